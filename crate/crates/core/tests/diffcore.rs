use hvrnn::diffcore::gradcheck::{self, GradCheckOptions};
use hvrnn::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use hvrnn::rng::SplitMix64;
use hvrnn::{Error, Result};

fn uniform(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
}

/// Contract the output with fixed random weights so every entry matters.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::new(seed);
    let w = uniform(&mut rng, g.shape(out));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn check(store: &ParamStore<f64>, f: impl FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>) -> f64 {
    let report = gradcheck::grad_check(store, f, &GradCheckOptions::default()).unwrap();
    assert!(report.checked > 0);
    report.max_rel_error
}

fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParamStore::new();
    let ids = shapes.iter().map(|(n, s)| store.add(*n, uniform(&mut rng, s)).unwrap()).collect();
    (store, ids)
}

#[test]
fn sum_gives_ones() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let v = g.param(&store, p);
    let loss = g.sum(v).unwrap();
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(p).grad.data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_gives_2p_and_accumulates() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let v = g.param(&store, p);
    let sq = g.mul(v, v).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(p).grad.data(), &[2.0, 4.0, 6.0]);
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(p).grad.data(), &[4.0, 8.0, 12.0]);
    store.zero_grad();
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(p).grad.data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn sigmoid_at_zero_matches_finite_difference() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::new(&[1], vec![0.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let v = g.param(&store, p);
    let s = g.sigmoid(v).unwrap();
    let loss = g.sum(s).unwrap();
    let grads = g.backward(loss).unwrap();
    let fd = gradcheck::finite_difference_gradient(
        |x| Ok(x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).sum()),
        store.get(p).value(),
        1e-5,
    )
    .unwrap();
    let a = grads.get(p).unwrap().data()[0];
    assert!((a - 0.25).abs() < 1e-12);
    assert!((a - fd.data()[0]).abs() < 1e-9);
}

#[test]
fn non_participating_params_get_zero() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::full(&[2], 1.0)).unwrap();
    let b = store.add("b", Tensor::full(&[2], 1.0)).unwrap();
    let mut g = Graph::new();
    let va = g.param(&store, a);
    let loss = g.sum(va).unwrap();
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(b).grad.data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_contract_error() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::full(&[2], 1.0)).unwrap();
    let mut g = Graph::new();
    let va = g.param(&store, a);
    assert!(matches!(g.backward(va), Err(Error::Contract { .. })));
}

#[test]
fn overflow_in_backward_names_the_op() {
    let mut store = ParamStore::<f32>::new();
    let a = store.add("a", Tensor::full(&[1], 1e-30)).unwrap();
    let mut g = Graph::new();
    let va = g.param(&store, a);
    let y = g.scale(va, 1e30).unwrap();
    let z = g.scale(y, 1e30).unwrap();
    let loss = g.sum(z).unwrap();
    match g.backward(loss) {
        Err(Error::Numeric { op, .. }) => assert_eq!(op, "scale"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn forward_non_finite_is_numeric_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[1], 100.0));
    assert!(g.exp(x).unwrap_err().is_numeric());
}

#[test]
fn finite_difference_examples() {
    let x = Tensor::new(&[1], vec![3.0]).unwrap();
    let g = gradcheck::finite_difference_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-4).unwrap();
    assert!((g.data()[0] - 6.0).abs() < 1e-6);

    let c = gradcheck::finite_difference_gradient(|_| Ok(4.2), &uniform(&mut SplitMix64::new(1), &[5]), 1e-4).unwrap();
    assert!(c.data().iter().all(|&v| v == 0.0));

    let x = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
    let g = gradcheck::finite_difference_gradient(|t| Ok(t.data().iter().map(|v| v.exp()).sum()), &x, 1e-5).unwrap();
    assert!((g.data()[0] - 1.0).abs() < 1e-8);
    assert!((g.data()[1] - std::f64::consts::E).abs() < 1e-8);

    let bad = gradcheck::finite_difference_gradient(|_| Ok(f64::NAN), &x, 1e-5);
    assert!(bad.unwrap_err().is_numeric());
}

#[test]
fn sum_of_losses_is_sum_of_gradients() {
    let (store, ids) = store_with(&[("a", &[2, 3]), ("b", &[2, 3])], 5);
    let loss_a = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let a = g.param(s, ids[0]);
        let b = g.param(s, ids[1]);
        let m = g.mul(a, b)?;
        let t = g.tanh(m)?;
        project(g, t, 1)
    };
    let loss_b = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let a = g.param(s, ids[0]);
        let e = g.sigmoid(a)?;
        project(g, e, 2)
    };
    let ga = gradcheck::analytic_gradients(&store, loss_a).unwrap();
    let gb = gradcheck::analytic_gradients(&store, loss_b).unwrap();
    let both = gradcheck::analytic_gradients(&store, |g, s| {
        let x = loss_a(g, s)?;
        let y = loss_b(g, s)?;
        g.add(x, y)
    })
    .unwrap();
    for &id in &ids {
        let want = match (ga.get(id), gb.get(id)) {
            (Some(x), Some(y)) => x.zip_map(y, |p, q| p + q).unwrap(),
            (Some(x), None) | (None, Some(x)) => x.clone(),
            (None, None) => unreachable!(),
        };
        assert!(both.get(id).unwrap().max_abs_diff(&want) < 1e-14);
    }
}

#[test]
fn backward_is_deterministic() {
    let (store, ids) = store_with(&[("x", &[2, 3, 6, 6]), ("w", &[4, 3, 3, 3])], 9);
    let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let x = g.param(s, ids[0]);
        let w = g.param(s, ids[1]);
        let y = g.conv2d(x, w, None, 1, 1)?;
        let y = g.relu(y)?;
        project(g, y, 3)
    };
    let a = gradcheck::analytic_gradients(&store, f).unwrap();
    let b = gradcheck::analytic_gradients(&store, f).unwrap();
    for &id in &ids {
        assert_eq!(a.get(id).unwrap().data(), b.get(id).unwrap().data());
    }
}

#[test]
fn elementwise_ops_pass_grad_check() {
    let (store, ids) = store_with(&[("a", &[2, 5]), ("b", &[2, 5])], 11);
    let err = check(&store, |g, s| {
        let a = g.param(s, ids[0]);
        let b = g.param(s, ids[1]);
        let x = g.add(a, b)?;
        let y = g.sub(x, b)?;
        let y = g.mul(y, b)?;
        let e = g.exp(y)?;
        let sq = g.square(a)?;
        let t = g.tanh(sq)?;
        let r = g.relu(b)?;
        let c = g.clamp(a, -0.5, 0.5)?;
        let sg = g.sigmoid(c)?;
        let u = g.add(e, t)?;
        let u = g.add(u, r)?;
        let u = g.add(u, sg)?;
        let u = g.scale(u, 0.7)?;
        let u = g.add_scalar(u, 0.3)?;
        project(g, u, 4)
    });
    assert!(err < 1e-4, "max rel error {err}");
}

#[test]
fn layout_ops_pass_grad_check() {
    let (store, ids) = store_with(&[("a", &[2, 3, 4, 4]), ("b", &[2, 2, 4, 4]), ("c", &[2, 3, 2, 2])], 12);
    let err = check(&store, |g, s| {
        let a = g.param(s, ids[0]);
        let b = g.param(s, ids[1]);
        let c = g.param(s, ids[2]);
        let cat = g.concat(&[a, b], 1)?;
        let parts = g.chunk(cat, 5, 1)?;
        let n = g.narrow(cat, 1, 1, 3)?;
        let up = g.upsample_nearest(c, 2)?;
        let m = g.mul(n, up)?;
        let pooled = g.max_pool2d(m)?;
        let avg = g.global_avg_pool(pooled)?;
        let l1 = project(g, parts[4], 5)?;
        let l2 = project(g, avg, 6)?;
        let l3 = g.mean(pooled)?;
        let l = g.add(l1, l2)?;
        g.add(l, l3)
    });
    assert!(err < 1e-4, "max rel error {err}");
}

#[test]
fn single_conv3x3_passes_grad_check() {
    let (store, ids) = store_with(&[("x", &[2, 3, 5, 5]), ("w", &[4, 3, 3, 3]), ("b", &[4])], 13);
    let err = check(&store, |g, s| {
        let x = g.param(s, ids[0]);
        let w = g.param(s, ids[1]);
        let b = g.param(s, ids[2]);
        let y = g.conv2d(x, w, Some(b), 1, 1)?;
        project(g, y, 7)
    });
    assert!(err < 1e-4, "max rel error {err}");
}

#[test]
fn strided_and_pointwise_convs_pass_grad_check() {
    let (store, ids) = store_with(&[("x", &[2, 3, 6, 6]), ("w", &[2, 3, 3, 3]), ("p", &[5, 3, 1, 1])], 14);
    let err = check(&store, |g, s| {
        let x = g.param(s, ids[0]);
        let w = g.param(s, ids[1]);
        let p = g.param(s, ids[2]);
        let y = g.conv2d(x, w, None, 2, 0)?;
        let z = g.conv2d(x, p, None, 1, 0)?;
        let a = project(g, y, 8)?;
        let b = project(g, z, 9)?;
        g.add(a, b)
    });
    assert!(err < 1e-4, "max rel error {err}");
}

#[test]
fn transposed_conv_passes_grad_check() {
    let (store, ids) = store_with(&[("x", &[2, 3, 3, 3]), ("w", &[3, 2, 4, 4]), ("b", &[2])], 15);
    let err = check(&store, |g, s| {
        let x = g.param(s, ids[0]);
        let w = g.param(s, ids[1]);
        let b = g.param(s, ids[2]);
        let y = g.conv_transpose2d(x, w, Some(b), 2, 1)?;
        assert_eq!(g.shape(y), &[2, 2, 6, 6]);
        project(g, y, 10)
    });
    assert!(err < 1e-4, "max rel error {err}");
}

#[test]
fn group_norm_passes_grad_check() {
    let (store, ids) = store_with(&[("x", &[2, 6, 3, 3]), ("gamma", &[6]), ("beta", &[6])], 16);
    let err = check(&store, |g, s| {
        let x = g.param(s, ids[0]);
        let gm = g.param(s, ids[1]);
        let bt = g.param(s, ids[2]);
        let y = g.group_norm(x, gm, bt, 3, 1e-5)?;
        project(g, y, 11)
    });
    assert!(err < 1e-4, "max rel error {err}");
}

#[test]
fn corrupted_gradient_fails_with_half_relative_error() {
    let (store, ids) = store_with(&[("x", &[1, 2, 4, 4]), ("w", &[3, 2, 3, 3])], 17);
    let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let x = g.param(s, ids[0]);
        let w = g.param(s, ids[1]);
        let y = g.conv2d(x, w, None, 1, 1)?;
        project(g, y, 12)
    };
    let opts = GradCheckOptions::default();
    let mut analytic = gradcheck::analytic_gradients(&store, f).unwrap();
    analytic.scale(2.0);
    let numeric = gradcheck::numeric_gradients(&store, f, &opts).unwrap();
    let report = gradcheck::compare(&store, &analytic, &numeric, &opts);
    assert!(!report.passes(1e-4));
    assert!((report.max_rel_error - 0.5).abs() < 1e-6, "{}", report.max_rel_error);
}

#[test]
fn contract_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Contract { .. })));
    let big = g.constant(Tensor::zeros(&[2, 3, 7, 7]));
    assert!(matches!(g.conv2d(x, big, None, 1, 0), Err(Error::Contract { .. })));
    let odd = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(g.max_pool2d(odd), Err(Error::Contract { .. })));
    let gm = g.constant(Tensor::full(&[3], 1.0));
    assert!(matches!(g.group_norm(x, gm, gm, 2, 1e-5), Err(Error::Contract { .. })));
    let y = g.constant(Tensor::zeros(&[3]));
    let z = g.constant(Tensor::zeros(&[4]));
    assert!(matches!(g.add(y, z), Err(Error::Contract { .. })));
}
