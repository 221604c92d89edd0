//! Score thresholds, binary masks, sparsity accounting and the gamma search.
//!
//! Every layer's threshold is `center + gamma * spread` of its own scores,
//! with (center, spread) = (mean, std) or (median, MAD). A weight is kept
//! when its score is `>=` the threshold. One gamma is shared by all layers;
//! [`tune_gamma`] bisects it until global sparsity is within tolerance of a
//! target.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{OngError, Result};
use crate::matrix::{Matrix, Stats};
use crate::nmf::{ScoreMatrix, ScoreSet};
use crate::parallel::Exec;

/// Floor applied to every probed gamma.
pub const GAMMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdType {
    /// `mean + gamma * std`
    Std,
    /// `median + gamma * mad`
    Mad,
}

impl std::str::FromStr for ThresholdType {
    type Err = OngError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "std" => Ok(ThresholdType::Std),
            "mad" => Ok(ThresholdType::Mad),
            other => Err(OngError::Config(format!(
                "unknown threshold type `{other}` (expected std or mad)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub t_type: ThresholdType,
    pub gamma: f64,
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(OngError::Config(format!(
                "gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

pub fn threshold_from_stats(stats: &Stats, t_type: ThresholdType, gamma: f64) -> f64 {
    match t_type {
        ThresholdType::Std => stats.mean + gamma * stats.std,
        ThresholdType::Mad => stats.median + gamma * stats.mad,
    }
}

pub fn layer_threshold(scores: &ScoreMatrix, cfg: &ThresholdConfig) -> Result<f64> {
    let stats = scores.scores.stats().map_err(|_| {
        OngError::InvalidArgument(format!("layer {} has no scores", scores.layer_id))
    })?;
    Ok(threshold_from_stats(&stats, cfg.t_type, cfg.gamma))
}

/// Binary keep-mask for one layer, entries exactly 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    layer_id: String,
    bits: Matrix,
}

impl Mask {
    pub fn new(layer_id: impl Into<String>, bits: Matrix) -> Result<Self> {
        let layer_id = layer_id.into();
        if let Some(pos) = bits.data().iter().position(|&b| b != 0.0 && b != 1.0) {
            return Err(OngError::InvalidArgument(format!(
                "mask for {layer_id} has non-binary entry {} at flat index {pos}",
                bits.data()[pos]
            )));
        }
        Ok(Mask { layer_id, bits })
    }

    pub fn ones(layer_id: impl Into<String>, rows: usize, cols: usize) -> Self {
        Mask {
            layer_id: layer_id.into(),
            bits: Matrix::ones(rows, cols),
        }
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn bits(&self) -> &Matrix {
        &self.bits
    }

    pub fn shape(&self) -> (usize, usize) {
        self.bits.shape()
    }

    pub fn total(&self) -> usize {
        self.bits.len()
    }

    pub fn kept(&self) -> usize {
        self.total() - self.pruned()
    }

    pub fn pruned(&self) -> usize {
        self.bits.count_zeros()
    }

    /// `target <- target * mask`
    pub fn apply(&self, target: &mut Matrix) -> Result<()> {
        if target.shape() != self.bits.shape() {
            return Err(OngError::shape(
                "mask apply",
                format!(
                    "layer {}: mask {:?} vs tensor {:?}",
                    self.layer_id,
                    self.bits.shape(),
                    target.shape()
                ),
            ));
        }
        target.hadamard_assign(&self.bits)
    }

    /// Flat indices where `values` is nonzero but the mask is zero.
    pub fn violations(&self, values: &Matrix) -> Vec<(usize, usize)> {
        let cols = self.bits.cols();
        self.bits
            .data()
            .iter()
            .zip(values.data())
            .enumerate()
            .filter(|(_, (&b, &v))| b == 0.0 && v != 0.0)
            .map(|(i, _)| (i / cols, i % cols))
            .collect()
    }
}

pub type MaskSet = BTreeMap<String, Mask>;

/// `bits[i,j] = 1` iff `scores[i,j] >= threshold`.
pub fn generate_mask(scores: &ScoreMatrix, threshold: f64) -> Mask {
    Mask {
        layer_id: scores.layer_id.clone(),
        bits: scores
            .scores
            .map(|s| if s >= threshold { 1.0 } else { 0.0 }),
    }
}

/// Masks for every scored layer at one shared gamma.
pub fn generate_masks(all_scores: &ScoreSet, cfg: &ThresholdConfig) -> Result<MaskSet> {
    let mut out = MaskSet::new();
    for (id, s) in all_scores {
        let tau = layer_threshold(s, cfg)?;
        out.insert(id.clone(), generate_mask(s, tau));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub zeros: usize,
    pub total: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub per_layer: BTreeMap<String, LayerSparsity>,
    pub global_zeros: usize,
    pub global_total: usize,
    pub global_sparsity: f64,
}

impl SparsityReport {
    pub fn from_counts<I, S>(counts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, usize, usize)>,
        S: Into<String>,
    {
        let mut per_layer = BTreeMap::new();
        let (mut gz, mut gt) = (0usize, 0usize);
        for (id, zeros, total) in counts {
            gz += zeros;
            gt += total;
            let sparsity = if total == 0 {
                0.0
            } else {
                zeros as f64 / total as f64
            };
            per_layer.insert(
                id.into(),
                LayerSparsity {
                    zeros,
                    total,
                    sparsity,
                },
            );
        }
        if per_layer.is_empty() || gt == 0 {
            return Err(OngError::InvalidArgument(
                "sparsity of an empty layer set".into(),
            ));
        }
        Ok(SparsityReport {
            per_layer,
            global_zeros: gz,
            global_total: gt,
            global_sparsity: gz as f64 / gt as f64,
        })
    }
}

pub fn global_sparsity(masks: &MaskSet) -> Result<SparsityReport> {
    SparsityReport::from_counts(
        masks
            .iter()
            .map(|(id, m)| (id.clone(), m.pruned(), m.total())),
    )
}

/// `W <- W * M` for every masked layer.
pub fn apply_initial_pruning(
    weights: &mut BTreeMap<String, Matrix>,
    masks: &MaskSet,
) -> Result<()> {
    for (id, mask) in masks {
        let w = weights.get(id).ok_or_else(|| {
            OngError::shape(
                "initial pruning",
                format!("no weights for masked layer {id}"),
            )
        })?;
        if w.shape() != mask.shape() {
            return Err(OngError::shape(
                "initial pruning",
                format!(
                    "layer {id}: mask {:?} vs weights {:?}",
                    mask.shape(),
                    w.shape()
                ),
            ));
        }
    }
    for (id, mask) in masks {
        mask.apply(weights.get_mut(id).expect("checked above"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaSearchConfig {
    pub s_target: f64,
    pub epsilon_sparsity: f64,
    pub n_search: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Only seeds the best-so-far slot; the first probe is always the midpoint.
    pub gamma_guess: f64,
    /// Relative bracket width below which the search stops.
    pub epsilon_gamma_conv: f64,
}

impl GammaSearchConfig {
    pub fn with_target(s_target: f64) -> Self {
        GammaSearchConfig {
            s_target,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(OngError::Config(msg));
        if !(self.s_target > 0.0 && self.s_target < 1.0) {
            return bad(format!(
                "target sparsity must be in (0,1), got {}",
                self.s_target
            ));
        }
        if !(self.epsilon_sparsity > 0.0 && self.epsilon_sparsity < 1.0) {
            return bad(format!(
                "sparsity tolerance must be in (0,1), got {}",
                self.epsilon_sparsity
            ));
        }
        if self.n_search == 0 {
            return bad("n_search must be >= 1".into());
        }
        if !(self.gamma_min.is_finite() && self.gamma_max.is_finite())
            || self.gamma_min >= self.gamma_max
        {
            return bad(format!(
                "gamma range [{}, {}] is empty",
                self.gamma_min, self.gamma_max
            ));
        }
        if self.epsilon_gamma_conv.is_nan() || self.epsilon_gamma_conv <= 0.0 {
            return bad("epsilon_gamma_conv must be > 0".into());
        }
        Ok(())
    }
}

impl Default for GammaSearchConfig {
    fn default() -> Self {
        GammaSearchConfig {
            s_target: 0.8,
            epsilon_sparsity: 0.005,
            n_search: 30,
            gamma_min: 0.01,
            gamma_max: 10.0,
            gamma_guess: 1.0,
            epsilon_gamma_conv: 1e-4,
        }
    }
}

/// One bisection step: bracket is the state after the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaProbe {
    pub iteration: usize,
    pub gamma: f64,
    pub achieved: f64,
    pub gamma_low: f64,
    pub gamma_high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStop {
    WithinTolerance,
    BracketConverged,
    IterationsExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSearchResult {
    pub gamma_star: f64,
    /// Global sparsity at `gamma_star`.
    pub achieved: f64,
    pub trace: Vec<GammaProbe>,
    pub stop: SearchStop,
    /// Set when no probe landed within tolerance and best-so-far was returned.
    pub warning: Option<String>,
}

impl GammaSearchResult {
    pub fn hit_tolerance(&self) -> bool {
        self.stop == SearchStop::WithinTolerance
    }

    /// One JSON object per probe.
    pub fn trace_json_lines(&self) -> String {
        self.trace
            .iter()
            .map(|p| {
                let mut v = serde_json::to_value(p).expect("plain struct");
                v["event"] = "gamma_probe".into();
                v.to_string() + "\n"
            })
            .collect()
    }
}

/// Per-layer score statistics, computed once and reused for every probe.
pub struct PreparedScores<'a> {
    layers: Vec<(&'a ScoreMatrix, Stats)>,
    total: usize,
}

impl<'a> PreparedScores<'a> {
    pub fn new(all_scores: &'a ScoreSet, exec: Exec) -> Result<Self> {
        if all_scores.is_empty() {
            return Err(OngError::InvalidArgument("no layers to threshold".into()));
        }
        let refs: Vec<&ScoreMatrix> = all_scores.values().collect();
        let stats = exec.map(&refs, |s| s.scores.stats());
        let mut layers = Vec::with_capacity(refs.len());
        for (s, st) in refs.into_iter().zip(stats) {
            let st = st.map_err(|_| {
                OngError::InvalidArgument(format!("layer {} has no scores", s.layer_id))
            })?;
            layers.push((s, st));
        }
        let total = layers.iter().map(|(s, _)| s.scores.len()).sum();
        Ok(PreparedScores { layers, total })
    }

    /// Global fraction of scores strictly below their layer threshold.
    pub fn sparsity_at(&self, t_type: ThresholdType, gamma: f64, exec: Exec) -> f64 {
        let zeros: Vec<usize> = exec.map(&self.layers, |(s, st)| {
            let tau = threshold_from_stats(st, t_type, gamma);
            s.scores.data().iter().filter(|&&v| v < tau).count()
        });
        zeros.iter().sum::<usize>() as f64 / self.total as f64
    }

    /// Layers whose spread statistic is zero: they prune nothing at any gamma.
    pub fn degenerate_layers(&self, t_type: ThresholdType) -> Vec<String> {
        self.layers
            .iter()
            .filter(|(_, st)| match t_type {
                ThresholdType::Std => st.std == 0.0,
                ThresholdType::Mad => st.mad == 0.0,
            })
            .map(|(s, _)| s.layer_id.clone())
            .collect()
    }
}

pub fn tune_gamma(
    all_scores: &ScoreSet,
    t_type: ThresholdType,
    cfg: &GammaSearchConfig,
) -> Result<GammaSearchResult> {
    tune_gamma_with(all_scores, t_type, cfg, Exec::default())
}

/// Bisect gamma on `[gamma_min, gamma_max]` toward `cfg.s_target`.
///
/// Returns the first probe within `epsilon_sparsity`, otherwise the probe
/// closest to the target seen so far (`gamma_guess` if nothing beat the
/// initial sentinel).
pub fn tune_gamma_with(
    all_scores: &ScoreSet,
    t_type: ThresholdType,
    cfg: &GammaSearchConfig,
    exec: Exec,
) -> Result<GammaSearchResult> {
    cfg.validate()?;
    let prepared = PreparedScores::new(all_scores, exec)?;

    let (mut low, mut high) = (cfg.gamma_min, cfg.gamma_max);
    let mut best_gamma = cfg.gamma_guess;
    let mut closest = -1.0_f64;
    let mut trace = Vec::with_capacity(cfg.n_search);
    let mut stop = SearchStop::IterationsExhausted;

    for iteration in 1..=cfg.n_search {
        let gamma = ((low + high) / 2.0).max(GAMMA_FLOOR);
        let achieved = prepared.sparsity_at(t_type, gamma, exec);
        let err = (achieved - cfg.s_target).abs();
        if err < (closest - cfg.s_target).abs() {
            closest = achieved;
            best_gamma = gamma;
        }
        if err <= cfg.epsilon_sparsity {
            trace.push(GammaProbe {
                iteration,
                gamma,
                achieved,
                gamma_low: low,
                gamma_high: high,
            });
            return Ok(GammaSearchResult {
                gamma_star: gamma,
                achieved,
                trace,
                stop: SearchStop::WithinTolerance,
                warning: None,
            });
        }
        if achieved < cfg.s_target {
            low = gamma;
        } else {
            high = gamma;
        }
        trace.push(GammaProbe {
            iteration,
            gamma,
            achieved,
            gamma_low: low,
            gamma_high: high,
        });
        if (high - low) / ((high + low) / 2.0 + 1e-9) < cfg.epsilon_gamma_conv {
            stop = SearchStop::BracketConverged;
            break;
        }
    }

    let achieved = prepared.sparsity_at(t_type, best_gamma, exec);
    let mut warning = format!(
        "target sparsity {} not reached within ±{}; using best gamma {best_gamma} (sparsity {achieved})",
        cfg.s_target, cfg.epsilon_sparsity
    );
    let degenerate = prepared.degenerate_layers(t_type);
    if !degenerate.is_empty() {
        warning.push_str(&format!("; zero-spread layers: {}", degenerate.join(", ")));
    }
    warn!("{warning}");
    Ok(GammaSearchResult {
        gamma_star: best_gamma,
        achieved,
        trace,
        stop,
        warning: Some(warning),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn scores(id: &str, m: Matrix) -> ScoreMatrix {
        ScoreMatrix {
            layer_id: id.into(),
            scores: m,
        }
    }

    fn random_scores(id: &str, rows: usize, cols: usize, seed: u64) -> ScoreMatrix {
        let mut rng = crate::seed::rng(seed);
        scores(id, Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>()))
    }

    fn set(items: Vec<ScoreMatrix>) -> ScoreSet {
        items.into_iter().map(|s| (s.layer_id.clone(), s)).collect()
    }

    fn five() -> ScoreMatrix {
        scores(
            "l",
            Matrix::from_vec(1, 5, vec![1., 2., 3., 4., 5.]).unwrap(),
        )
    }

    #[test]
    fn threshold_examples() {
        let c = scores("c", Matrix::filled(3, 3, 0.7));
        for gamma in [0.0, 1.0, 7.5] {
            let cfg = ThresholdConfig {
                t_type: ThresholdType::Std,
                gamma,
            };
            assert_eq!(layer_threshold(&c, &cfg).unwrap(), 0.7);
        }
        let std1 = ThresholdConfig {
            t_type: ThresholdType::Std,
            gamma: 1.0,
        };
        assert!((layer_threshold(&five(), &std1).unwrap() - (3.0 + 2f64.sqrt())).abs() < 1e-15);
        let mad2 = ThresholdConfig {
            t_type: ThresholdType::Mad,
            gamma: 2.0,
        };
        assert_eq!(layer_threshold(&five(), &mad2).unwrap(), 5.0);
        assert!(layer_threshold(&scores("e", Matrix::zeros(0, 0)), &mad2).is_err());
    }

    #[test]
    fn mask_examples() {
        let s = scores("l", Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        assert_eq!(generate_mask(&s, 3.0).bits().data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(generate_mask(&s, 1.0).pruned(), 0);
        assert_eq!(generate_mask(&s, 4.0001).kept(), 0);
        assert!(Mask::new("x", Matrix::filled(1, 1, 0.5)).is_err());
    }

    #[test]
    fn sparsity_examples() {
        let m = Mask::new("a", Matrix::from_rows(&[&[0.0, 0.0], &[1.0, 1.0]]).unwrap()).unwrap();
        let masks: MaskSet = [("a".to_string(), m)].into();
        assert_eq!(global_sparsity(&masks).unwrap().global_sparsity, 0.5);

        let layer = |id: &str, total: usize, zeros: usize| {
            let bits = Matrix::from_fn(1, total, |_, c| if c < zeros { 0.0 } else { 1.0 });
            (id.to_string(), Mask::new(id, bits).unwrap())
        };
        let masks: MaskSet = [layer("a", 10, 5), layer("b", 90, 45)].into();
        let r = global_sparsity(&masks).unwrap();
        assert_eq!(r.global_sparsity, 0.5);
        assert_eq!(r.global_zeros, 50);
        assert_eq!(r.per_layer["a"].zeros, 5);
        assert!(global_sparsity(&MaskSet::new()).is_err());
    }

    #[test]
    fn sparsity_matches_flat_scan() {
        let mut rng = crate::seed::rng(3);
        let mut masks = MaskSet::new();
        for (i, (r, c)) in [(4, 7), (9, 3), (16, 16)].into_iter().enumerate() {
            let bits = Matrix::from_fn(
                r,
                c,
                |_, _| if rng.random::<f64>() < 0.6 { 0.0 } else { 1.0 },
            );
            masks.insert(format!("l{i}"), Mask::new(format!("l{i}"), bits).unwrap());
        }
        let flat: Vec<f64> = masks
            .values()
            .flat_map(|m| m.bits().data().to_vec())
            .collect();
        let zeros = flat.iter().filter(|&&b| b == 0.0).count();
        let r = global_sparsity(&masks).unwrap();
        assert_eq!(r.global_zeros, zeros);
        assert_eq!(r.global_total, flat.len());
        assert_eq!(r.global_sparsity, zeros as f64 / flat.len() as f64);
    }

    #[test]
    fn initial_pruning_examples() {
        let mut w: BTreeMap<String, Matrix> =
            [("a".to_string(), Matrix::from_rows(&[&[5.0, 7.0]]).unwrap())].into();
        let masks: MaskSet = [(
            "a".to_string(),
            Mask::new("a", Matrix::from_rows(&[&[1.0, 0.0]]).unwrap()).unwrap(),
        )]
        .into();
        apply_initial_pruning(&mut w, &masks).unwrap();
        assert_eq!(w["a"].data(), &[5.0, 0.0]);

        let orig = Matrix::from_rows(&[&[-1.5, 2.25], &[3.0, -0.1]]).unwrap();
        let mut w: BTreeMap<String, Matrix> = [("a".to_string(), orig.clone())].into();
        apply_initial_pruning(&mut w, &[("a".to_string(), Mask::ones("a", 2, 2))].into()).unwrap();
        assert_eq!(
            w["a"]
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            orig.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let zeros = Mask::new("a", Matrix::zeros(2, 2)).unwrap();
        apply_initial_pruning(&mut w, &[("a".to_string(), zeros.clone())].into()).unwrap();
        assert!(w["a"].data().iter().all(|&v| v == 0.0));

        let bad = Mask::ones("a", 1, 4);
        assert!(apply_initial_pruning(&mut w, &[("a".to_string(), bad)].into()).is_err());
    }

    /// Sort-based oracle: fraction of scores strictly below each layer's threshold.
    fn oracle_sparsity(all: &ScoreSet, t_type: ThresholdType, gamma: f64) -> f64 {
        let (mut zeros, mut total) = (0, 0);
        for s in all.values() {
            let mut v = s.scores.data().to_vec();
            v.sort_by(f64::total_cmp);
            let tau = layer_threshold(s, &ThresholdConfig { t_type, gamma }).unwrap();
            zeros += v.partition_point(|&x| x < tau);
            total += v.len();
        }
        zeros as f64 / total as f64
    }

    #[test]
    fn search_hits_target_on_random_scores() {
        let all = set(vec![random_scores("a", 64, 64, 21)]);
        let cfg = GammaSearchConfig::with_target(0.80);
        let r = tune_gamma(&all, ThresholdType::Std, &cfg).unwrap();
        assert!(r.hit_tolerance());
        assert!((r.achieved - 0.80).abs() <= 0.005);
        let oracle = oracle_sparsity(&all, ThresholdType::Std, r.gamma_star);
        assert!((oracle - 0.80).abs() <= 0.005);
        assert_eq!(oracle, r.achieved);
        assert!(r.trace.len() <= 30);
    }

    #[test]
    fn search_on_constant_scores_warns() {
        let all = set(vec![
            scores("a", Matrix::filled(8, 8, 0.3)),
            scores("b", Matrix::filled(4, 4, 2.0)),
        ]);
        let cfg = GammaSearchConfig::with_target(0.5);
        let r = tune_gamma(&all, ThresholdType::Std, &cfg).unwrap();
        assert_eq!(r.achieved, 0.0);
        assert!(r.trace.iter().all(|p| p.achieved == 0.0));
        assert!(!r.hit_tolerance());
        let w = r.warning.as_deref().unwrap();
        assert!(w.contains("zero-spread layers: a, b"), "{w}");
        // every probe is equally far from the target, so only the first one
        // ever improves on the -1 sentinel
        assert_eq!(r.gamma_star, (0.01 + 10.0) / 2.0);
        // sparsity never moves, so gamma_low only climbs until the bracket collapses
        assert_eq!(r.stop, SearchStop::BracketConverged);
    }

    #[test]
    fn unreachable_target_returns_closest() {
        // only 4 distinct values: sparsity jumps in quarters
        let all = set(vec![scores(
            "a",
            Matrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )]);
        let cfg = GammaSearchConfig {
            s_target: 0.6,
            ..Default::default()
        };
        let r = tune_gamma(&all, ThresholdType::Std, &cfg).unwrap();
        assert!(r.warning.is_some());
        let best = r
            .trace
            .iter()
            .map(|p| (p.achieved - 0.6).abs())
            .fold(f64::INFINITY, f64::min);
        assert_eq!((r.achieved - 0.6).abs(), best);
    }

    #[test]
    fn trace_lines_are_json() {
        let all = set(vec![random_scores("a", 32, 32, 5)]);
        let r = tune_gamma(
            &all,
            ThresholdType::Mad,
            &GammaSearchConfig::with_target(0.7),
        )
        .unwrap();
        let lines = r.trace_json_lines();
        assert_eq!(lines.lines().count(), r.trace.len());
        for l in lines.lines() {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            assert_eq!(v["event"], "gamma_probe");
            assert!(v["gamma"].is_number());
        }
    }

    #[test]
    fn search_config_validation() {
        assert!(GammaSearchConfig::with_target(1.0).validate().is_err());
        assert!(GammaSearchConfig::with_target(0.0).validate().is_err());
        let c = GammaSearchConfig {
            gamma_min: 5.0,
            gamma_max: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(GammaSearchConfig {
            n_search: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn exec_paths_agree() {
        let all = set(vec![
            random_scores("a", 40, 30, 1),
            random_scores("b", 20, 50, 2),
            random_scores("c", 10, 10, 3),
        ]);
        let cfg = GammaSearchConfig::with_target(0.9);
        let s = tune_gamma_with(&all, ThresholdType::Mad, &cfg, Exec::Sequential).unwrap();
        let p = tune_gamma_with(&all, ThresholdType::Mad, &cfg, Exec::Parallel).unwrap();
        assert_eq!(s, p);
    }

    proptest! {
        #[test]
        fn sparsity_is_monotone_in_gamma(seed in 0u64..500, mad in any::<bool>()) {
            let t = if mad { ThresholdType::Mad } else { ThresholdType::Std };
            let all = set(vec![random_scores("a", 12, 9, seed), random_scores("b", 5, 17, seed + 1)]);
            let prepared = PreparedScores::new(&all, Exec::Sequential).unwrap();
            let mut prev = -1.0;
            for i in 0..40 {
                let g = i as f64 * 0.1;
                let s = prepared.sparsity_at(t, g, Exec::Sequential);
                prop_assert!(s >= prev);
                prev = s;
            }
        }

        #[test]
        fn masks_are_binary_and_consistent(seed in 0u64..500, tau in 0.0f64..1.0) {
            let s = random_scores("a", 6, 6, seed);
            let m = generate_mask(&s, tau);
            prop_assert!(m.bits().data().iter().all(|&b| b == 0.0 || b == 1.0));
            prop_assert_eq!(&m, &generate_mask(&s, tau));
            let below = s.scores.data().iter().filter(|&&v| v < tau).count();
            prop_assert_eq!(m.pruned(), below);
        }
    }
}
