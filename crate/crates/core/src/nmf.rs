//! Non-negative factorization of `|W|` and the reconstruction-error score.
//!
//! `|W| ~ F G` is fitted with Lee-Seung multiplicative updates on the squared
//! Frobenius objective. A weight's score is `| |w| - (F G)_ij |`: entries the
//! low-rank model explains poorly score high and are kept.

use std::collections::BTreeMap;

use log::debug;
use rand::Rng;

use crate::error::{OngError, Result};
use crate::matrix::Matrix;
use crate::parallel::Exec;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmfConfig {
    /// Requested rank `k`; clamped to `min(rows, cols)` per layer.
    pub components: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Added to every update denominator.
    pub epsilon: f64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        NmfConfig {
            components: 6,
            iterations: 200,
            seed: 0,
            epsilon: 1e-12,
        }
    }
}

impl NmfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(OngError::Config("nmf components must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(OngError::Config("nmf iterations must be >= 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(OngError::Config(format!(
                "nmf epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Same config with the seed replaced by one derived for `layer_id`.
    pub fn for_layer(&self, layer_id: &str) -> NmfConfig {
        NmfConfig {
            seed: seed::derive(self.seed, layer_id),
            ..*self
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmfResult {
    /// Basis, `rows x k_eff`.
    pub f: Matrix,
    /// Coefficients, `k_eff x cols`.
    pub g: Matrix,
    /// `||W - F G||_F^2` at initialization and after each iteration.
    pub objective_trace: Vec<f64>,
    pub k_eff: usize,
}

impl NmfResult {
    pub fn reconstruction(&self) -> Matrix {
        self.f
            .matmul(&self.g)
            .expect("factor shapes agree by construction")
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub layer_id: String,
    pub scores: Matrix,
}

pub type ScoreSet = BTreeMap<String, ScoreMatrix>;

pub fn factorize(w_abs: &Matrix, cfg: &NmfConfig) -> Result<NmfResult> {
    factorize_with(w_abs, cfg, Exec::default())
}

pub fn factorize_with(w_abs: &Matrix, cfg: &NmfConfig, exec: Exec) -> Result<NmfResult> {
    cfg.validate()?;
    let (m, p) = w_abs.shape();
    if m == 0 || p == 0 {
        return Err(OngError::InvalidArgument(
            "cannot factorize an empty matrix".into(),
        ));
    }
    if let Some(pos) = w_abs.data().iter().position(|&v| v < 0.0) {
        return Err(OngError::InvalidArgument(format!(
            "factorization input must be non-negative; found {} at ({}, {})",
            w_abs.data()[pos],
            pos / p,
            pos % p
        )));
    }
    let k = cfg.components.min(m).min(p);
    if k < cfg.components {
        debug!(
            "nmf rank clamped from {} to {k} for a {m}x{p} matrix",
            cfg.components
        );
    }

    let scale = (w_abs.mean() / k as f64).sqrt();
    let mut rng = seed::rng(cfg.seed);
    // (0, 1] so no factor entry starts at exactly zero
    let mut draw = || (1.0 - rng.random::<f64>()) * scale;
    let mut f = Matrix::from_fn(m, k, |_, _| draw());
    let mut g = Matrix::from_fn(k, p, |_, _| draw());

    let objective = |f: &Matrix, g: &Matrix| -> Result<f64> {
        Ok(w_abs.sub(&f.matmul_with(g, exec)?)?.frobenius_sq())
    };

    let eps = cfg.epsilon;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    trace.push(objective(&f, &g)?);
    for _ in 0..cfg.iterations {
        // F <- F * (W G^T) / (F (G G^T) + eps)
        let gt = g.transpose();
        let numer = w_abs.matmul_with(&gt, exec)?;
        let denom = f.matmul_with(&g.matmul_with(&gt, exec)?, exec)?;
        multiplicative_update(&mut f, &numer, &denom, eps);

        // G <- G * (F^T W) / ((F^T F) G + eps)
        let ft = f.transpose();
        let numer = ft.matmul_with(w_abs, exec)?;
        let denom = ft.matmul_with(&f, exec)?.matmul_with(&g, exec)?;
        multiplicative_update(&mut g, &numer, &denom, eps);

        trace.push(objective(&f, &g)?);
    }

    Ok(NmfResult {
        f,
        g,
        objective_trace: trace,
        k_eff: k,
    })
}

fn multiplicative_update(base: &mut Matrix, numer: &Matrix, denom: &Matrix, eps: f64) {
    for ((b, &n), &d) in base
        .data_mut()
        .iter_mut()
        .zip(numer.data())
        .zip(denom.data())
    {
        *b *= n / (d + eps);
    }
}

/// Reconstruction-error scores for one layer's flattened weights.
///
/// Reads `w` only; depends on `|w|` alone, so `score(w) == score(-w)`.
pub fn score_layer(layer_id: &str, w: &Matrix, cfg: &NmfConfig) -> Result<ScoreMatrix> {
    score_layer_with(layer_id, w, cfg, Exec::default())
}

pub fn score_layer_with(
    layer_id: &str,
    w: &Matrix,
    cfg: &NmfConfig,
    exec: Exec,
) -> Result<ScoreMatrix> {
    let w_abs = w.abs_map();
    let fit = factorize_with(&w_abs, cfg, exec)?;
    let scores = w_abs.sub(&fit.reconstruction())?.abs_map();
    Ok(ScoreMatrix {
        layer_id: layer_id.to_string(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_nonneg(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = seed::rng(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>())
    }

    fn rank_one(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = seed::rng(seed);
        let u: Vec<f64> = (0..rows).map(|_| rng.random_range(0.1..2.0)).collect();
        let v: Vec<f64> = (0..cols).map(|_| rng.random_range(0.1..2.0)).collect();
        Matrix::from_fn(rows, cols, |r, c| u[r] * v[c])
    }

    fn cfg(k: usize) -> NmfConfig {
        NmfConfig {
            components: k,
            seed: 42,
            ..NmfConfig::default()
        }
    }

    #[test]
    fn rank_one_is_recovered() {
        let w = rank_one(7, 5, 3);
        let fit = factorize(&w, &cfg(1)).unwrap();
        assert_eq!(fit.objective_trace.len(), 201);
        assert!(fit.final_objective() <= 1e-6 * w.frobenius_sq());
    }

    #[test]
    fn zero_matrix_stays_zero() {
        let w = Matrix::zeros(4, 3);
        let fit = factorize(&w, &cfg(2)).unwrap();
        assert!(fit.objective_trace.iter().all(|&v| v == 0.0));
        assert_eq!(fit.reconstruction(), Matrix::zeros(4, 3));
        let s = score_layer("z", &w, &cfg(2)).unwrap();
        assert_eq!(s.scores, Matrix::zeros(4, 3));
    }

    #[test]
    fn objective_is_monotone() {
        let w = random_nonneg(8, 6, 5);
        let fit = factorize(&w, &cfg(3)).unwrap();
        for pair in fit.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{} -> {}", pair[0], pair[1]);
        }
        assert!(fit.f.data().iter().all(|&v| v >= 0.0));
        assert!(fit.g.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rank_is_clamped() {
        let w = random_nonneg(3, 10, 6);
        let fit = factorize(&w, &cfg(6)).unwrap();
        assert_eq!(fit.k_eff, 3);
        assert_eq!(fit.f.shape(), (3, 3));
        assert_eq!(fit.g.shape(), (3, 10));
    }

    #[test]
    fn rejects_negative_input_and_bad_config() {
        let mut w = random_nonneg(3, 3, 7);
        w.set(1, 2, -0.5);
        let err = factorize(&w, &cfg(1)).unwrap_err();
        assert!(err.to_string().contains("(1, 2)"), "{err}");
        let bad = NmfConfig {
            iterations: 0,
            ..cfg(1)
        };
        assert!(factorize(&random_nonneg(2, 2, 1), &bad).is_err());
        let bad = NmfConfig {
            epsilon: 0.0,
            ..cfg(1)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn deterministic_and_exec_independent() {
        let w = random_nonneg(40, 30, 8);
        let a = factorize_with(&w, &cfg(4), Exec::Sequential).unwrap();
        let b = factorize_with(&w, &cfg(4), Exec::Parallel).unwrap();
        assert_eq!(a.f, b.f);
        assert_eq!(a.g, b.g);
        assert_eq!(a.objective_trace, b.objective_trace);
    }

    #[test]
    fn rank_one_scores_vanish() {
        let mut w = rank_one(6, 9, 10);
        // sign pattern must not matter
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            if i % 3 == 0 {
                *v = -*v;
            }
        }
        let s = score_layer("l", &w, &cfg(1)).unwrap();
        assert!(s.scores.max_abs() <= 1e-3 * w.max_abs());
    }

    #[test]
    fn scores_ignore_sign() {
        let mut rng = seed::rng(11);
        let w = Matrix::from_fn(10, 8, |_, _| rng.random_range(-1.0..1.0));
        let a = score_layer("l", &w, &cfg(3)).unwrap();
        let b = score_layer("l", &w.scale(-1.0), &cfg(3)).unwrap();
        assert_eq!(a.scores, b.scores);
        assert!(a.scores.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn per_layer_seeds_differ() {
        let base = cfg(2);
        assert_ne!(base.for_layer("a").seed, base.for_layer("b").seed);
        assert_eq!(base.for_layer("a"), base.for_layer("a"));
    }
}
