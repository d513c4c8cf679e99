//! Linear-β noise schedule and closed-form forward diffusion.
//!
//! Timesteps are 1-based in the formulas (`ᾱ_t = ∏_{s≤t} (1 − β_s)`), so
//! `alphas_cumprod()[t - 1]` is `ᾱ_t`. Timestep `0` is accepted everywhere and
//! means "no noise": [`NoiseSchedule::forward_noise`] returns `x0` unchanged.

use ndarray::{Array, Dimension, Zip};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// β interpolated linearly from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return param("schedule needs at least one step");
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return param(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            ));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    let frac = i as f64 / (steps - 1) as f64;
                    beta_start + frac * (beta_end - beta_start)
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Builds a schedule from an explicit β table, e.g. one shipped in a checkpoint.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return param("schedule needs at least one step");
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && **b < 1.0))
        {
            return param(format!("beta[{i}] = {b} is outside (0, 1)"));
        }
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            betas,
            alphas_cumprod,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    /// `ᾱ_t` for `t` in `0..=T`; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps() => Ok(self.alphas_cumprod[t - 1]),
            t => param(format!("timestep {t} outside 0..={}", self.steps())),
        }
    }

    /// Signal and noise coefficients `(√ᾱ_t, √(1−ᾱ_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// `x_t = √ᾱ_t · x0 + √(1−ᾱ_t) · ε`, elementwise. Noise is supplied by the caller.
    pub fn forward_noise<A, D>(
        &self,
        x0: &Array<A, D>,
        t: usize,
        epsilon: &Array<A, D>,
    ) -> Result<Array<A, D>>
    where
        A: Float,
        D: Dimension,
    {
        if x0.shape() != epsilon.shape() {
            return param(format!(
                "x0 shape {:?} differs from noise shape {:?}",
                x0.shape(),
                epsilon.shape()
            ));
        }
        if t == 0 {
            self.alpha_bar(t)?;
            return Ok(x0.clone());
        }
        let (signal, noise) = self.coefficients(t)?;
        let (signal, noise) = (A::from(signal).unwrap(), A::from(noise).unwrap());
        Ok(Zip::from(x0)
            .and(epsilon)
            .map_collect(|&x, &e| signal * x + noise * e))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alphas_cumprod(), &[0.5]);
    }

    #[test]
    fn two_steps_hand_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        assert!((s.alphas_cumprod()[0] - 0.9).abs() < 1e-15);
        assert!((s.alphas_cumprod()[1] - 0.63).abs() < 1e-15);
    }

    #[test]
    fn default_matches_running_product_oracle() {
        let s = NoiseSchedule::default();
        // independent construction of the first 100 betas and their product
        let mut prod = 1.0f64;
        for i in 0..100 {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / 999.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(100).unwrap() - prod).abs() < 1e-14);
        assert!((s.alpha_bar(100).unwrap() - 0.897_018_1).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.2]).is_err());
    }

    #[test]
    fn noise_free_and_signal_free() {
        let s = NoiseSchedule::default();
        let x0 = Array1::from(vec![0.5f64, -0.25, 1.0]);
        let zero = Array1::<f64>::zeros(3);
        let (a, b) = s.coefficients(250).unwrap();
        assert_eq!(s.forward_noise(&x0, 250, &zero).unwrap(), x0.mapv(|v| a * v));
        assert_eq!(s.forward_noise(&zero, 250, &x0).unwrap(), x0.mapv(|v| b * v));
    }

    #[test]
    fn timestep_zero_is_identity() {
        let s = NoiseSchedule::default();
        let x0 = Array1::from(vec![0.1f32, 0.2]);
        let eps = Array1::from(vec![5.0f32, 5.0]);
        assert_eq!(s.forward_noise(&x0, 0, &eps).unwrap(), x0);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(-1.0f32..1.0));
        let eps = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(-3.0f32..3.0));
        let out = s.forward_noise(&x0, 100, &eps).unwrap();
        let mut ab = 1.0f64;
        for i in 0..100 {
            ab *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        for ((o, x), e) in out.iter().zip(x0.iter()).zip(eps.iter()) {
            let want = ab.sqrt() * *x as f64 + (1.0 - ab).sqrt() * *e as f64;
            assert!((*o as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn errors() {
        let s = NoiseSchedule::default();
        let a = Array1::<f64>::zeros(3);
        let b = Array1::<f64>::zeros(4);
        assert!(s.forward_noise(&a, 10, &b).is_err());
        assert!(s.forward_noise(&a, 1001, &a).is_err());
    }

    proptest! {
        #[test]
        fn variance_preserving(t in 0usize..=1000) {
            let s = NoiseSchedule::default();
            let (a, b) = s.coefficients(t).unwrap();
            prop_assert!((a * a + b * b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn monotone(steps in 1usize..400, lo in 1e-5f64..0.1, span in 0.0f64..0.5) {
            let hi = (lo + span).min(0.999);
            let s = NoiseSchedule::linear(steps, lo, hi).unwrap();
            prop_assert_eq!(s.betas().len(), steps);
            prop_assert_eq!(s.alphas_cumprod().len(), steps);
            for w in s.alphas_cumprod().windows(2) {
                prop_assert!(w[1] < w[0]);
            }
            prop_assert!(s.alphas_cumprod().iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn linear_in_signal_and_noise(
            t in 1usize..=1000,
            scale in -4.0f64..4.0,
            vals in prop::collection::vec((-1.0f64..1.0, -3.0f64..3.0), 1..16),
        ) {
            let s = NoiseSchedule::default();
            let x0 = Array1::from_iter(vals.iter().map(|v| v.0));
            let eps = Array1::from_iter(vals.iter().map(|v| v.1));
            let base = s.forward_noise(&x0, t, &eps).unwrap();
            let scaled = s.forward_noise(&(&x0 * scale), t, &(&eps * scale)).unwrap();
            for (a, b) in scaled.iter().zip(base.iter()) {
                prop_assert!((a - scale * b).abs() < 1e-9);
            }
        }
    }
}
