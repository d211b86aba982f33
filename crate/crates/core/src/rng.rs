use gradkit::Array;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal `[rows, cols]` matrix.
pub fn randn(rng: &mut dyn RngCore, rows: usize, cols: usize) -> Array {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Array::matrix(rows, cols, data).expect("positive dimensions")
}
