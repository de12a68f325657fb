//! Seeded sampling helpers shared by the simulator and the toy detector.
//!
//! The Box-Muller transform is implemented directly (on top of `libm`) so
//! that sampling is bit-identical across platforms for a fixed seed.

use rand::Rng;

/// Standard normal deviate via the polar Box-Muller method.
pub(crate) fn normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = 2.0 * rng.gen::<f64>() - 1.0;
        let v: f64 = 2.0 * rng.gen::<f64>() - 1.0;
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * libm::sqrt(-2.0 * libm::log(s) / s);
        }
    }
}

/// Log-uniform deviate on `[lo, hi]`.
pub(crate) fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo > 0.0 && hi >= lo);
    libm::exp(rng.gen_range(libm::log(lo)..=libm::log(hi)))
}
