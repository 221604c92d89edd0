//! End-to-end run: data, model, scoring, masking, masked training, report.
//!
//! A run writes into its output directory:
//!
//! - `run.jsonl`: one JSON line per gamma probe and per epoch
//! - `report.json`: the [`RunReport`]
//! - `model.ongc`: final checkpoint, plus `epoch_N.ongc` when requested
//! - `INCOMPLETE`: present while the run is in progress or after it failed

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod scoring;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{OngError, Result};
use crate::masking::{
    generate_masks, global_sparsity, tune_gamma_with, GammaSearchResult, MaskSet, PreparedScores,
    SparsityReport, ThresholdConfig, ThresholdType,
};
use crate::network::Network;
use crate::nmf::{NmfConfig, ScoreSet};
use crate::parallel::Exec;
use crate::trainer::{run_training_with, EpochMetrics, TrainEvent};

use config::RunConfig;
use data::{load_dataset, Dataset};
use scoring::{score_network, Scorer};

pub const REPORT_FILE: &str = "report.json";
pub const LOG_FILE: &str = "run.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ongc";
pub const INCOMPLETE_FILE: &str = "INCOMPLETE";
pub const FLOPS_CONVENTION: &str =
    "2 FLOPs per multiply-accumulate, one sample, masked weights skipped in sparse count";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    TargetSparsity,
    FixedGamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub dense: u64,
    pub sparse: u64,
    pub convention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: MaskingMode,
    pub scorer: String,
    pub threshold_type: ThresholdType,
    pub gamma_star: f64,
    /// Search trace in target mode.
    pub gamma_search: Option<GammaSearchResult>,
    /// Layers whose spread statistic is zero; they prune nothing.
    pub degenerate_layers: Vec<String>,
    /// Sparsity right after pruning, before training.
    pub pruned_sparsity: SparsityReport,
    /// Sparsity recounted from the final weights.
    pub sparsity_report: SparsityReport,
    pub epoch_metrics: Vec<EpochMetrics>,
    pub flops: FlopsReport,
    pub final_test_accuracy: f64,
    /// Seconds per stage.
    pub wall_times: BTreeMap<String, f64>,
    pub checkpoint: PathBuf,
}

/// Outcome of the masking stage.
#[derive(Debug, Clone)]
pub struct MaskOutcome {
    pub mode: MaskingMode,
    pub gamma_star: f64,
    pub search: Option<GammaSearchResult>,
    pub degenerate_layers: Vec<String>,
    pub masks: MaskSet,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        // nullity breaches keep their identity so callers can tell them apart
        e @ OngError::Stage { .. } => e,
        e => OngError::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

/// Load the dataset and build a freshly initialized network for it.
pub fn prepare(cfg: &RunConfig) -> Result<(Dataset, Network)> {
    let seeds = cfg.seeds();
    let data = stage("data", load_dataset(&cfg.dataset, seeds.data))?;
    let net = stage("model", build_network(cfg, &data))?;
    Ok((data, net))
}

fn build_network(cfg: &RunConfig, data: &Dataset) -> Result<Network> {
    let net = Network::init(&cfg.model, data.sample_shape, cfg.seeds().init)?;
    if net.num_classes() < data.n_classes {
        return Err(OngError::Config(format!(
            "model has {} outputs but the dataset has {} classes",
            net.num_classes(),
            data.n_classes
        )));
    }
    Ok(net)
}

/// Stage 1: score every prunable layer.
pub fn score_stage(cfg: &RunConfig, net: &Network, exec: Exec) -> Result<ScoreSet> {
    let (scorer, _) = cfg.seeded();
    stage("scoring", score_network(net, &scorer, exec))
}

/// Stage 2: pick gamma (search or fixed) and build the masks.
pub fn mask_stage(cfg: &RunConfig, scores: &ScoreSet, exec: Exec) -> Result<MaskOutcome> {
    stage("masking", mask_inner(cfg, scores, exec))
}

fn mask_inner(cfg: &RunConfig, scores: &ScoreSet, exec: Exec) -> Result<MaskOutcome> {
    let t_type = cfg.threshold.t_type;
    let degenerate_layers = PreparedScores::new(scores, exec)?.degenerate_layers(t_type);
    for id in &degenerate_layers {
        log::warn!("layer {id} has zero score spread under {t_type:?}; it will not be pruned");
    }
    let (mode, gamma_star, search) = match &cfg.gamma_search {
        Some(g) => {
            let r = tune_gamma_with(scores, t_type, g, exec)?;
            if let Some(w) = &r.warning {
                log::warn!("{w}");
            }
            (MaskingMode::TargetSparsity, r.gamma_star, Some(r))
        }
        None => (MaskingMode::FixedGamma, cfg.threshold.gamma, None),
    };
    let masks = generate_masks(
        scores,
        &ThresholdConfig {
            t_type,
            gamma: gamma_star,
        },
    )?;
    Ok(MaskOutcome {
        mode,
        gamma_star,
        search,
        degenerate_layers,
        masks,
    })
}

struct RunLog(BufWriter<File>);

impl RunLog {
    fn create(path: &Path) -> Result<Self> {
        Ok(RunLog(BufWriter::new(
            File::create(path).map_err(|e| OngError::io(path, e))?,
        )))
    }

    fn line(&mut self, event: &str, value: impl Serialize) -> Result<()> {
        let mut v = serde_json::to_value(value).expect("plain struct");
        v["event"] = event.into();
        writeln!(self.0, "{v}").map_err(|e| OngError::io(LOG_FILE, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.0.flush().map_err(|e| OngError::io(LOG_FILE, e))
    }
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    run_pipeline_with(cfg, Exec::default())
}

/// Full run into `cfg.output_dir`. On failure the `INCOMPLETE` marker stays
/// behind next to whatever was written.
pub fn run_pipeline_with(cfg: &RunConfig, exec: Exec) -> Result<RunReport> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| OngError::io(out, e))?;
    let marker = out.join(INCOMPLETE_FILE);
    fs::write(&marker, "run in progress or failed\n").map_err(|e| OngError::io(&marker, e))?;
    let _ = fs::remove_file(out.join(REPORT_FILE));

    let report = execute(cfg, exec)?;

    fs::remove_file(&marker).map_err(|e| OngError::io(&marker, e))?;
    Ok(report)
}

fn execute(cfg: &RunConfig, exec: Exec) -> Result<RunReport> {
    let out = &cfg.output_dir;
    let mut times = BTreeMap::new();
    let mut log = RunLog::create(&out.join(LOG_FILE))?;

    let t = Instant::now();
    let data = stage("data", load_dataset(&cfg.dataset, cfg.seeds().data))?;
    times.insert("data".to_string(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let net = stage("model", build_network(cfg, &data))?.with_exec(exec);
    times.insert("model".to_string(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let scores = score_stage(cfg, &net, exec)?;
    times.insert("scoring".to_string(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let outcome = mask_stage(cfg, &scores, exec)?;
    if let Some(r) = &outcome.search {
        for p in &r.trace {
            log.line("gamma_probe", p)?;
        }
    }
    let mut net = stage("masking", net.convert_to_masked(&outcome.masks))?;
    let pruned_sparsity = stage("masking", global_sparsity(&outcome.masks))?;
    times.insert("masking".to_string(), t.elapsed().as_secs_f64());
    log::info!(
        "gamma* = {:.6}, sparsity after pruning {:.4}",
        outcome.gamma_star,
        pruned_sparsity.global_sparsity
    );

    let t = Instant::now();
    let (_, train_cfg) = cfg.seeded();
    let every = cfg.checkpoint_every;
    let metrics = stage(
        "training",
        run_training_with(&mut net, &data.train, &data.test, &train_cfg, |ev, net| {
            if let TrainEvent::EpochEnd(m) = ev {
                log::info!(
                    "epoch {} lr {:.4} loss {:.4} test acc {:.4} sparsity {:.4}",
                    m.epoch,
                    m.lr,
                    m.train_loss,
                    m.test_accuracy,
                    m.achieved_sparsity
                );
                log.line("epoch", m)?;
                if every > 0 && (m.epoch + 1) % every == 0 {
                    checkpoint::save_checkpoint(
                        net,
                        &out.join(format!("epoch_{}.ongc", m.epoch + 1)),
                    )?;
                }
            }
            Ok(())
        }),
    )?;
    times.insert("training".to_string(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let ckpt = out.join(CHECKPOINT_FILE);
    let report = stage(
        "report",
        finish(cfg, &net, &data, outcome, pruned_sparsity, metrics, &ckpt),
    )?;
    log.flush()?;
    times.insert("report".to_string(), t.elapsed().as_secs_f64());
    let report = RunReport {
        wall_times: times,
        ..report
    };
    let json = serde_json::to_string_pretty(&report).expect("plain struct");
    let path = out.join(REPORT_FILE);
    fs::write(&path, json).map_err(|e| OngError::io(&path, e))?;
    Ok(report)
}

fn finish(
    cfg: &RunConfig,
    net: &Network,
    data: &Dataset,
    outcome: MaskOutcome,
    pruned_sparsity: SparsityReport,
    epoch_metrics: Vec<EpochMetrics>,
    ckpt: &Path,
) -> Result<RunReport> {
    net.verify_nullity()?;
    checkpoint::save_checkpoint(net, ckpt)?;
    // every reported sparsity figure comes from the file that was just written
    let saved = checkpoint::load_checkpoint(ckpt)?;
    let sparsity_report = saved.sparsity_report()?;
    let final_test_accuracy = match epoch_metrics.last() {
        Some(m) => m.test_accuracy,
        None if data.test.is_empty() => 0.0,
        None => net.accuracy(&data.test.features, &data.test.labels)?,
    };
    let f = net.flops_estimate(1);
    Ok(RunReport {
        mode: outcome.mode,
        scorer: cfg.scorer.name().to_string(),
        threshold_type: cfg.threshold.t_type,
        gamma_star: outcome.gamma_star,
        gamma_search: outcome.search,
        degenerate_layers: outcome.degenerate_layers,
        pruned_sparsity,
        sparsity_report,
        epoch_metrics,
        flops: FlopsReport {
            dense: f.dense_flops,
            sparse: f.sparse_flops,
            convention: FLOPS_CONVENTION.to_string(),
        },
        final_test_accuracy,
        wall_times: BTreeMap::new(),
        checkpoint: ckpt.to_path_buf(),
    })
}

/// One grid point of a sweep.
#[derive(Debug)]
pub struct SweepPoint {
    pub target: Option<f64>,
    pub components: Option<usize>,
    pub output_dir: PathBuf,
    pub result: Result<RunReport>,
}

/// Run the grid `targets x components` (either may be empty, meaning "as
/// configured"), each point in its own subdirectory of `base.output_dir`.
/// Points run concurrently under `Exec::Parallel`.
pub fn run_sweep(
    base: &RunConfig,
    targets: &[f64],
    components: &[usize],
    exec: Exec,
) -> Result<Vec<SweepPoint>> {
    if !components.is_empty() && !matches!(base.scorer, Scorer::Nmf(_)) {
        return Err(OngError::Config(
            "a components sweep needs the nmf scorer".into(),
        ));
    }
    let ts: Vec<Option<f64>> = if targets.is_empty() {
        vec![None]
    } else {
        targets.iter().copied().map(Some).collect()
    };
    let ks: Vec<Option<usize>> = if components.is_empty() {
        vec![None]
    } else {
        components.iter().copied().map(Some).collect()
    };
    let mut grid = Vec::new();
    for &t in &ts {
        for &k in &ks {
            let mut cfg = base.clone();
            let mut name = Vec::new();
            if let Some(t) = t {
                cfg.set_target_sparsity(t);
                name.push(format!("s{t}"));
            }
            if let (Some(k), Scorer::Nmf(n)) = (k, &mut cfg.scorer) {
                *n = NmfConfig {
                    components: k,
                    ..*n
                };
                name.push(format!("k{k}"));
            }
            if name.is_empty() {
                name.push("base".into());
            }
            cfg.output_dir = base.output_dir.join(name.join("_"));
            cfg.validate()?;
            grid.push((t, k, cfg));
        }
    }
    // one level of parallelism: points side by side, each run sequential inside
    let inner = if grid.len() > 1 {
        Exec::Sequential
    } else {
        exec
    };
    Ok(exec.map(&grid, |(t, k, cfg)| SweepPoint {
        target: *t,
        components: *k,
        output_dir: cfg.output_dir.clone(),
        result: run_pipeline_with(cfg, inner),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerSpec;
    use data::DatasetSource;

    fn blob_config(dir: &Path) -> RunConfig {
        RunConfig {
            seed: 3,
            model: vec![
                LayerSpec::linear(8, 32).prunable(true),
                LayerSpec::relu(),
                LayerSpec::linear(32, 3),
            ],
            dataset: DatasetSource::SyntheticBlobs {
                n_samples: 300,
                n_features: 8,
                n_classes: 3,
                seed: None,
            },
            scorer: Scorer::Nmf(NmfConfig {
                components: 4,
                iterations: 60,
                ..NmfConfig::default()
            }),
            threshold: ThresholdConfig {
                t_type: ThresholdType::Std,
                gamma: 1.0,
            },
            gamma_search: None,
            train: crate::trainer::TrainConfig {
                epochs: 3,
                lr: 0.05,
                batch_size: 32,
                lr_milestones: vec![],
                ..Default::default()
            },
            output_dir: dir.to_path_buf(),
            checkpoint_every: 2,
        }
    }

    #[test]
    fn fixed_gamma_run_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = blob_config(dir.path());
        let r = run_pipeline(&cfg).unwrap();
        assert_eq!(r.mode, MaskingMode::FixedGamma);
        assert_eq!(r.gamma_star, 1.0);
        assert!(r.gamma_search.is_none());
        assert_eq!(r.epoch_metrics.len(), 3);
        for f in [REPORT_FILE, LOG_FILE, CHECKPOINT_FILE, "epoch_2.ongc"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(!dir.path().join(INCOMPLETE_FILE).exists());
        let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert!(r.sparsity_report.global_zeros >= r.pruned_sparsity.global_zeros);
        assert!(r.flops.sparse < r.flops.dense);
    }

    #[test]
    fn target_mode_ignores_fixed_gamma() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blob_config(dir.path());
        cfg.set_target_sparsity(0.6);
        let a = run_pipeline_with(&cfg, Exec::Sequential).unwrap();
        cfg.threshold.gamma = 7.0;
        let b = run_pipeline_with(&cfg, Exec::Sequential).unwrap();
        assert_eq!(a.gamma_star, b.gamma_star);
        assert_eq!(a.mode, MaskingMode::TargetSparsity);
        let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let probes = log.lines().filter(|l| l.contains("gamma_probe")).count();
        assert_eq!(probes, a.gamma_search.as_ref().unwrap().trace.len());
    }

    #[test]
    fn runs_are_deterministic_across_exec() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut a = run_pipeline_with(&blob_config(d1.path()), Exec::Sequential).unwrap();
        let mut b = run_pipeline_with(&blob_config(d2.path()), Exec::default()).unwrap();
        a.wall_times.clear();
        b.wall_times.clear();
        b.checkpoint = a.checkpoint.clone();
        assert_eq!(a, b);
        assert_eq!(
            fs::read(d1.path().join(CHECKPOINT_FILE)).unwrap(),
            fs::read(d2.path().join(CHECKPOINT_FILE)).unwrap()
        );
    }

    #[test]
    fn failure_names_stage_and_leaves_marker() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blob_config(dir.path());
        cfg.dataset = DatasetSource::Csv {
            path: dir.path().join("missing.csv"),
            label_column: data::LabelColumn::Index(0),
            has_header: true,
        };
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(
            matches!(err, OngError::Stage { stage: "data", .. }),
            "{err}"
        );
        assert!(dir.path().join(INCOMPLETE_FILE).exists());
        assert!(!dir.path().join(REPORT_FILE).exists());
    }

    #[test]
    fn model_must_match_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blob_config(dir.path());
        cfg.model[2] = LayerSpec::linear(32, 2);
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(
            matches!(err, OngError::Stage { stage: "model", .. }),
            "{err}"
        );
    }

    #[test]
    fn sweep_gives_each_point_its_own_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blob_config(dir.path());
        cfg.train.epochs = 1;
        let pts = run_sweep(&cfg, &[0.7, 0.85], &[2, 3], Exec::default()).unwrap();
        assert_eq!(pts.len(), 4);
        for p in &pts {
            let r = p.result.as_ref().unwrap();
            assert!(p.output_dir.join(REPORT_FILE).exists());
            let t = p.target.unwrap();
            assert!((r.pruned_sparsity.global_sparsity - t).abs() <= 0.05);
        }
        let dirs: std::collections::BTreeSet<_> =
            pts.iter().map(|p| p.output_dir.clone()).collect();
        assert_eq!(dirs.len(), 4);
    }
}
