use hvrnn::data::{
    decode_pgm, encode_pgm, generate_sequence, load_mnist_idx, load_sequence_dir, make_batches, parse_idx_images,
    parse_idx_labels, save_sequence_dir, simulate, step_digit, synthetic_digits, test_seeds, train_seed, BatchStream,
    Dataset, DigitSet, DigitState, Image, SmmnistConfig, TEST_SET_SIZE,
};
use hvrnn::rng::SplitMix64;
use hvrnn::Error;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn idx_images(count: u32, side: u32, fill: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0803, count, side, side] {
        b.extend_from_slice(&u32::to_be_bytes(v));
    }
    b.extend((0..(count * side * side) as usize).map(fill));
    b
}

fn idx_labels(count: u32) -> Vec<u8> {
    let mut b = u32::to_be_bytes(0x0801).to_vec();
    b.extend_from_slice(&count.to_be_bytes());
    b.extend((0..count).map(|i| (i % 10) as u8));
    b
}

#[test]
fn idx_parses_header_and_scales() {
    let set = parse_idx_images(&idx_images(3, 28, |i| (i % 256) as u8), "mem").unwrap();
    assert_eq!((set.len(), set.size), (3, 28));
    assert_eq!(set.images[0][255], 1.0);
    assert_eq!(set.images[0][0], 0.0);
    assert_eq!(set.images[1][0], (784 % 256) as f32 / 255.0);
    assert_eq!(parse_idx_labels(&idx_labels(4), "mem").unwrap(), vec![0, 1, 2, 3]);
}

#[test]
fn idx_errors_name_offsets() {
    fn bad<T: std::fmt::Debug>(r: Result<T, Error>) -> u64 {
        match r {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        }
    }
    assert_eq!(bad(parse_idx_images(&[0; 16], "mem")), 0);
    assert_eq!(bad(parse_idx_images(&[], "mem")), 0);
    assert_eq!(bad(parse_idx_labels(&[], "mem")), 0);
    assert_eq!(bad(parse_idx_labels(&idx_images(1, 2, |_| 0), "mem")), 0);
    let mut short = idx_images(2, 28, |_| 7);
    short.truncate(16 + 784 + 10);
    assert_eq!(bad(parse_idx_images(&short, "mem")), 16 + 794);
    assert_eq!(bad(parse_idx_images(&idx_images(2, 28, |_| 0)[..10], "mem")), 8);
}

#[test]
fn idx_files_must_agree_on_count() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    std::fs::write(&img, idx_images(5, 28, |_| 1)).unwrap();
    std::fs::write(&lab, idx_labels(5)).unwrap();
    let set = load_mnist_idx(&img, &lab).unwrap();
    assert_eq!(set.labels.as_deref(), Some(&[0, 1, 2, 3, 4][..]));
    std::fs::write(&lab, idx_labels(4)).unwrap();
    assert!(matches!(load_mnist_idx(&img, &lab), Err(Error::Format { .. })));
    assert!(matches!(load_mnist_idx(&dir.path().join("missing"), &lab), Err(Error::Io { .. })));
}

#[test]
#[ignore = "needs the canonical MNIST files in $HVRNN_DATA_DIR"]
fn canonical_mnist_training_file() {
    let dir = std::path::PathBuf::from(std::env::var("HVRNN_DATA_DIR").expect("HVRNN_DATA_DIR"));
    let set = load_mnist_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    assert_eq!((set.len(), set.size), (60000, 28));
}

#[test]
fn synthetic_digits_are_deterministic_glyphs() {
    let a = synthetic_digits(20, 28, 1);
    assert_eq!(a, synthetic_digits(20, 28, 1));
    assert_ne!(a, synthetic_digits(20, 28, 2));
    for img in &a.images {
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        let ink: f32 = img.iter().sum();
        assert!(ink > 30.0 && ink < 400.0, "ink {ink}");
        // Borders stay dark, as in centered MNIST digits.
        assert!((0..28).all(|i| img[i] < 0.5 && img[27 * 28 + i] < 0.5));
    }
    assert_ne!(a.images[0], a.images[1]);
}

fn cfg(canvas: usize, digits: usize, speed: [f64; 2]) -> SmmnistConfig {
    SmmnistConfig { canvas, num_digits: digits, speed, ..SmmnistConfig::default() }
}

#[test]
fn config_validation() {
    SmmnistConfig::default().validate().unwrap();
    assert!(cfg(20, 1, [2.0, 5.0]).validate().is_err());
    assert!(cfg(64, 1, [-1.0, 5.0]).validate().is_err());
    assert!(cfg(64, 1, [3.0, 2.0]).validate().is_err());
    assert!(SmmnistConfig { horizon: 0, ..SmmnistConfig::default() }.validate().is_err());
}

#[test]
fn zero_speed_gives_static_frames() {
    let digits = synthetic_digits(10, 28, 0);
    let seq = generate_sequence(&cfg(64, 2, [0.0, 0.0]), &digits, 5).unwrap();
    assert_eq!(seq.shape(), &[15, 1, 64, 64]);
    let first = seq.narrow(0, 0, 1).unwrap();
    for t in 1..15 {
        assert_eq!(seq.narrow(0, t, 1).unwrap(), first);
    }
    assert!(first.data().iter().any(|&v| v > 0.5));
}

#[test]
fn corner_bounce_points_inward() {
    let c = cfg(64, 1, [2.0, 5.0]);
    let mut s = DigitState { x: 0.0, y: 0.0, vx: -3.0, vy: -3.0, digit: 0 };
    assert!(step_digit(&mut s, &c, &mut SplitMix64::new(1)));
    assert!(s.x >= 0.0 && s.y >= 0.0 && s.x <= 36.0 && s.y <= 36.0);
    assert!(s.vx > 0.0 && s.vy > 0.0);
    let speed = s.vx.hypot(s.vy);
    assert!((2.0..=5.0).contains(&speed));

    let mut s = DigitState { x: 36.0, y: 10.0, vx: 2.0, vy: 0.5, digit: 0 };
    assert!(step_digit(&mut s, &c, &mut SplitMix64::new(2)));
    assert_eq!(s.x, 36.0);
    assert!(s.vx < 0.0);
}

#[test]
fn bounces_are_random() {
    let c = cfg(64, 1, [2.0, 5.0]);
    let outcomes: Vec<(f64, f64)> = (0..1000)
        .map(|seed| {
            let mut s = DigitState { x: 35.0, y: 20.0, vx: 3.0, vy: 0.0, digit: 0 };
            assert!(step_digit(&mut s, &c, &mut SplitMix64::new(seed)));
            assert!(s.vx < 0.0);
            (s.vx, s.vy)
        })
        .collect();
    let mut distinct = outcomes.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    assert!(distinct.len() > 900);
    // Both vertical directions occur after a side bounce.
    assert!(outcomes.iter().any(|o| o.1 > 0.0) && outcomes.iter().any(|o| o.1 < 0.0));
}

#[test]
fn same_seed_same_sequence() {
    let digits = synthetic_digits(10, 28, 0);
    let c = SmmnistConfig::default();
    let a = generate_sequence(&c, &digits, 9).unwrap();
    assert_eq!(a, generate_sequence(&c, &digits, 9).unwrap());
    assert_ne!(a, generate_sequence(&c, &digits, 10).unwrap());
}

#[test]
fn ten_thousand_frames_hold_invariants() {
    let c = SmmnistConfig::default();
    let digits = synthetic_digits(50, 28, 3);
    let max = c.max_pos();
    let (mut frames, mut bounces) = (0, 0);
    let mut seed = 0;
    while frames < 10_000 {
        let tr = simulate(&c, digits.len(), seed).unwrap();
        for k in 0..c.num_digits {
            let mut anchor = 0;
            for t in 0..c.seq_len() {
                let s = tr.states[t][k];
                assert!((0.0..=max).contains(&s.x) && (0.0..=max).contains(&s.y), "seed {seed} t {t}: {s:?}");
                if tr.bounced[t][k] {
                    anchor = t;
                    bounces += 1;
                    continue;
                }
                let a = tr.states[anchor][k];
                let dt = (t - anchor) as f64;
                assert!((s.x - (a.x + dt * a.vx)).abs() < 1e-5 && (s.y - (a.y + dt * a.vy)).abs() < 1e-5);
                assert_eq!((s.vx, s.vy), (a.vx, a.vy));
            }
        }
        if seed % 20 == 0 {
            let seq = generate_sequence(&c, &digits, seed).unwrap();
            assert!(seq.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        frames += c.seq_len();
        seed += 1;
    }
    assert!(bounces > 1000, "{bounces}");
}

#[test]
fn golden_sequence_hash() {
    let digits = synthetic_digits(10, 28, 0);
    let mut h = Sha256::new();
    for seed in 0..4 {
        let seq = generate_sequence(&SmmnistConfig::default(), &digits, seed).unwrap();
        let img = Image::from_unit(64, 64 * 15, seq.data()).unwrap();
        h.update(&img.pixels);
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    // Reproduced by an independent NumPy reimplementation of the generator.
    assert_eq!(hex, "eafc0dcaa4f78f671d02b0ecfeb52ed116210432f0bd7b5111a1c53aa26fed96");
}

#[test]
fn binarize_gives_two_levels() {
    let digits = synthetic_digits(10, 28, 0);
    let seq = generate_sequence(&SmmnistConfig { binarize: true, ..Default::default() }, &digits, 1).unwrap();
    assert!(seq.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn digit_size_must_match() {
    let digits = synthetic_digits(10, 20, 0);
    assert!(matches!(generate_sequence(&SmmnistConfig::default(), &digits, 0), Err(Error::Contract { .. })));
    let empty = hvrnn::data::DigitSet { size: 28, images: vec![], labels: None };
    assert!(matches!(generate_sequence(&SmmnistConfig::default(), &empty, 0), Err(Error::Contract { .. })));
}

#[test]
fn batches_split_and_shuffle() {
    let digits = synthetic_digits(10, 28, 0);
    let c = SmmnistConfig { canvas: 32, ..Default::default() };
    let seeds: Vec<u64> = (0..10).map(|i| train_seed(1, i)).collect();
    let data = Dataset::generate(&c, &digits, &seeds).unwrap();
    let sizes: Vec<_> = make_batches(&data, 4, None).unwrap().iter().map(|b| b.batch_size()).collect();
    assert_eq!(sizes, vec![4, 4, 2]);
    let b = &make_batches(&data, 4, None).unwrap()[0];
    assert_eq!(b.context.shape(), &[4, 5, 1, 32, 32]);
    assert_eq!(b.targets.shape(), &[4, 10, 1, 32, 32]);
    assert_eq!(b.context.narrow(0, 1, 1).unwrap().data(), data.sequences[1].narrow(0, 0, 5).unwrap().data());
    assert_eq!(b.targets.narrow(0, 1, 1).unwrap().data(), data.sequences[1].narrow(0, 5, 10).unwrap().data());

    let e1 = make_batches(&data, 4, Some(7)).unwrap();
    let e2 = make_batches(&data, 4, Some(7)).unwrap();
    let e3 = make_batches(&data, 4, Some(8)).unwrap();
    let flat = |e: &[hvrnn::hvrnn::SequenceBatch<f32>]| e.iter().flat_map(|b| b.context.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(flat(&e1), flat(&e2));
    assert_ne!(flat(&e1), flat(&e3));

    let empty = Dataset::new(5, vec![]).unwrap();
    assert!(matches!(make_batches(&empty, 4, None), Err(Error::Contract { .. })));
    assert!(make_batches(&data, 0, None).is_err());
}

#[test]
fn default_shapes_and_stream() {
    let digits = synthetic_digits(10, 28, 0);
    let mut s = BatchStream::new(&SmmnistConfig::default(), &digits, 2, 3).unwrap();
    let (a, b) = (s.next().unwrap().unwrap(), s.next().unwrap().unwrap());
    assert_eq!(a.context.shape(), &[2, 5, 1, 64, 64]);
    assert_eq!(a.targets.shape(), &[2, 10, 1, 64, 64]);
    assert_ne!(a.context, b.context);
    let again = BatchStream::new(&SmmnistConfig::default(), &digits, 2, 3).unwrap().next().unwrap().unwrap();
    assert_eq!(a.context, again.context);
}

#[test]
fn train_and_test_seeds_are_disjoint() {
    let test = test_seeds();
    assert_eq!(test.len(), TEST_SET_SIZE);
    for run in 0..4 {
        for i in 0..10_000 {
            assert!(train_seed(run, i) < 1 << 63);
        }
    }
    assert!(test.iter().all(|&s| s >= 1 << 63));
}

#[test]
fn pgm_round_trip_and_errors() {
    let img = Image { width: 3, height: 2, pixels: vec![0, 10, 255, 7, 8, 9] };
    let bytes = encode_pgm(&img);
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(decode_pgm(&bytes, "mem").unwrap(), img);
    let commented = b"P5\n# made by hand\n3 2\n255\n\x00\x0a\xff\x07\x08\x09";
    assert_eq!(decode_pgm(commented, "mem").unwrap(), img);
    assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0", "mem"), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(decode_pgm(b"P5\n3 2\n255\n\x00", "mem"), Err(Error::Format { .. })));
    assert!(matches!(decode_pgm(b"P5\n3 2\n15\n\x00\x00\x00\x00\x00\x00", "mem"), Err(Error::Format { .. })));
    assert!(matches!(decode_pgm(b"", "mem"), Err(Error::Format { .. })));
}

#[test]
fn sequence_dir_round_trip() {
    let digits = synthetic_digits(10, 28, 0);
    let c = SmmnistConfig { canvas: 32, horizon: 3, ..Default::default() };
    let seqs: Vec<_> = (0..3).map(|s| generate_sequence(&c, &digits, s).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    save_sequence_dir(dir.path(), &seqs).unwrap();
    assert!(dir.path().join("seq_00002/frame_007.pgm").exists());
    let back = load_sequence_dir(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in seqs.iter().zip(&back) {
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-6);
    }
    let data = Dataset::new(5, back).unwrap();
    assert_eq!(make_batches(&data, 2, None).unwrap()[0].targets.shape(), &[2, 3, 1, 32, 32]);
}

proptest! {
    #[test]
    fn steps_stay_in_bounds(x in 0.0f64..=36.0, y in 0.0f64..=36.0, vx in -9.0f64..9.0, vy in -9.0f64..9.0, seed: u64) {
        let c = cfg(64, 1, [0.5, 9.0]);
        let mut s = DigitState { x, y, vx, vy, digit: 0 };
        let mut rng = SplitMix64::new(seed);
        for _ in 0..50 {
            step_digit(&mut s, &c, &mut rng);
            prop_assert!((0.0..=36.0).contains(&s.x) && (0.0..=36.0).contains(&s.y));
        }
    }
}

#[test]
fn resizing_averages_areas() {
    let set = DigitSet { size: 4, images: vec![(0..16).map(|i| i as f32 / 15.0).collect()], labels: None };
    assert_eq!(set.resized(4).unwrap(), set);
    let half = set.resized(2).unwrap();
    // Each output pixel is the mean of a 2x2 block.
    let block = |y: usize, x: usize| (0..2).flat_map(|u| (0..2).map(move |v| ((2 * y + u) * 4 + 2 * x + v) as f32 / 15.0)).sum::<f32>() / 4.0;
    for (i, &v) in half.images[0].iter().enumerate() {
        assert!((v - block(i / 2, i % 2)).abs() < 1e-6);
    }
    let odd = synthetic_digits(3, 28, 1).resized(13).unwrap();
    let src = synthetic_digits(3, 28, 1);
    for (a, b) in odd.images.iter().zip(&src.images) {
        let (ma, mb) = (a.iter().sum::<f32>() / a.len() as f32, b.iter().sum::<f32>() / b.len() as f32);
        assert!((ma - mb).abs() < 1e-5 && a.iter().all(|v| (0.0..=1.0 + 1e-6).contains(v)));
    }
    assert!(set.resized(0).is_err());
}
