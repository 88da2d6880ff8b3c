//! Stochastic Moving MNIST: digit sources, sequence synthesis, batching and
//! the PGM sequence-directory format.

mod batches;
mod glyphs;
mod idx;
mod pgm;
mod smmnist;

pub use batches::{make_batches, test_seeds, train_seed, BatchStream, Dataset, TEST_SET_SIZE};
pub use glyphs::synthetic_digits;
pub use idx::{load_mnist_idx, parse_idx_images, parse_idx_labels, DigitSet};
pub use pgm::{decode_pgm, encode_pgm, load_sequence_dir, read_pgm, save_sequence_dir, write_pgm, Image};
pub use smmnist::{generate_sequence, simulate, step_digit, DigitState, SmmnistConfig, Trajectory};
