//! Run configuration, read from a TOML file.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/blobs"
//!
//! [[model]]
//! type = "linear"
//! in = 16
//! out = 64
//!
//! [[model]]
//! type = "relu"
//!
//! [[model]]
//! type = "linear"
//! in = 64
//! out = 2
//!
//! [dataset]
//! source = "synthetic-blobs"
//! n_samples = 1000
//! n_features = 16
//! n_classes = 2
//!
//! [scorer]
//! type = "nmf"
//! components = 6
//!
//! [threshold]
//! type = "std"
//! gamma = 1.5
//!
//! [gamma_search]          # present: target-sparsity mode, absent: fixed gamma
//! target_sparsity = 0.8
//!
//! [train]
//! epochs = 40
//! lr = 0.05
//! lr_milestones = [20, 30]
//! ```
//!
//! Omitted `prunable` flags default to every weight layer except the last.
//! Relative dataset paths resolve against the config file's directory;
//! `output_dir` resolves against the working directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{OngError, Result};
use crate::masking::{GammaSearchConfig, ThresholdConfig, ThresholdType};
use crate::network::{LayerKind, LayerSpec};
use crate::nmf::NmfConfig;
use crate::pipeline::data::{DatasetSource, LabelColumn};
use crate::pipeline::scoring::Scorer;
use crate::seed;
use crate::trainer::TrainConfig;

/// Default gamma for fixed-gamma mode.
pub const DEFAULT_GAMMA: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: Vec<LayerSpec>,
    pub dataset: DatasetSource,
    pub scorer: Scorer,
    pub threshold: ThresholdConfig,
    /// `Some` selects target-sparsity mode; `threshold.gamma` is then ignored.
    pub gamma_search: Option<GammaSearchConfig>,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    /// Extra checkpoint every N epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

/// Sub-seeds fanned out from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub init: u64,
    pub nmf: u64,
    pub shuffle: u64,
    pub data: u64,
}

impl RunConfig {
    pub fn seeds(&self) -> SeedPlan {
        SeedPlan {
            init: seed::derive(self.seed, "init"),
            nmf: seed::derive(self.seed, "nmf"),
            shuffle: seed::derive(self.seed, "shuffle"),
            data: seed::derive(self.seed, "data"),
        }
    }

    /// Scorer and training config with the derived seeds filled in.
    pub fn seeded(&self) -> (Scorer, TrainConfig) {
        let s = self.seeds();
        let scorer = match self.scorer {
            Scorer::Nmf(c) => Scorer::Nmf(NmfConfig { seed: s.nmf, ..c }),
            Scorer::Magnitude => Scorer::Magnitude,
        };
        let train = TrainConfig {
            seed: s.shuffle,
            ..self.train.clone()
        };
        (scorer, train)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.model.iter().any(|s| s.prunable) {
            return Err(OngError::Config("model has no prunable layer".into()));
        }
        if let Scorer::Nmf(c) = &self.scorer {
            c.validate()?;
        }
        self.threshold.validate()?;
        if let Some(g) = &self.gamma_search {
            g.validate()?;
        }
        self.train.validate()
    }

    /// Set (or switch to) target-sparsity mode.
    pub fn set_target_sparsity(&mut self, target: f64) {
        let g = self
            .gamma_search
            .get_or_insert_with(GammaSearchConfig::default);
        g.s_target = target;
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| OngError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<RunConfig> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| OngError::Config(e.to_string()))?;
        raw.into_config(base_dir)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_output")]
    output_dir: PathBuf,
    #[serde(default)]
    checkpoint_every: usize,
    model: Vec<RawLayer>,
    dataset: RawDataset,
    #[serde(default)]
    scorer: RawScorer,
    #[serde(default)]
    threshold: RawThreshold,
    gamma_search: Option<RawGammaSearch>,
    #[serde(default)]
    train: RawTrain,
}

fn default_output() -> PathBuf {
    PathBuf::from("ong-run")
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Kernel {
    Square(usize),
    Rect([usize; 2]),
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum RawLayer {
    Linear {
        #[serde(rename = "in")]
        in_features: usize,
        #[serde(rename = "out")]
        out_features: usize,
        prunable: Option<bool>,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: Kernel,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        prunable: Option<bool>,
    },
    Relu,
    Flatten,
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
enum RawDataset {
    SyntheticBlobs {
        n_samples: usize,
        n_features: usize,
        n_classes: usize,
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        label_column: LabelColumn,
        #[serde(default = "yes")]
        has_header: bool,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

fn yes() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum RawScorer {
    Nmf {
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default = "default_iterations")]
        iterations: usize,
        #[serde(default = "default_nmf_eps")]
        epsilon: f64,
    },
    Magnitude,
}

fn default_components() -> usize {
    NmfConfig::default().components
}
fn default_iterations() -> usize {
    NmfConfig::default().iterations
}
fn default_nmf_eps() -> f64 {
    NmfConfig::default().epsilon
}

impl Default for RawScorer {
    fn default() -> Self {
        RawScorer::Nmf {
            components: default_components(),
            iterations: default_iterations(),
            epsilon: default_nmf_eps(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawThreshold {
    #[serde(rename = "type", default = "default_ttype")]
    t_type: String,
    #[serde(default = "default_gamma")]
    gamma: f64,
}

fn default_ttype() -> String {
    "std".into()
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

impl Default for RawThreshold {
    fn default() -> Self {
        RawThreshold {
            t_type: default_ttype(),
            gamma: DEFAULT_GAMMA,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGammaSearch {
    target_sparsity: f64,
    tolerance: Option<f64>,
    max_iterations: Option<usize>,
    gamma_min: Option<f64>,
    gamma_max: Option<f64>,
    gamma_guess: Option<f64>,
    gamma_convergence: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    epochs: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    batch_size: Option<usize>,
    lr_milestones: Option<Vec<usize>>,
    lr_gamma: Option<f64>,
}

impl RawConfig {
    fn into_config(self, base: &Path) -> Result<RunConfig> {
        let mut explicit = Vec::new();
        let mut model = Vec::with_capacity(self.model.len());
        for layer in self.model {
            let (kind, prunable) = match layer {
                RawLayer::Linear {
                    in_features,
                    out_features,
                    prunable,
                } => (
                    LayerKind::Linear {
                        in_features,
                        out_features,
                    },
                    prunable,
                ),
                RawLayer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    prunable,
                } => {
                    let (kernel_h, kernel_w) = match kernel {
                        Kernel::Square(k) => (k, k),
                        Kernel::Rect([h, w]) => (h, w),
                    };
                    (
                        LayerKind::Conv2d {
                            in_channels,
                            out_channels,
                            kernel_h,
                            kernel_w,
                            stride,
                            padding,
                        },
                        prunable,
                    )
                }
                RawLayer::Relu => (LayerKind::Relu, None),
                RawLayer::Flatten => (LayerKind::Flatten, None),
            };
            explicit.push(prunable);
            model.push(LayerSpec {
                kind,
                prunable: false,
            });
        }
        crate::network::default_prunability(&mut model);
        for (spec, flag) in model.iter_mut().zip(explicit) {
            if let Some(p) = flag {
                spec.prunable = p;
            }
        }

        let resolve = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
        let dataset = match self.dataset {
            RawDataset::SyntheticBlobs {
                n_samples,
                n_features,
                n_classes,
                seed,
            } => DatasetSource::SyntheticBlobs {
                n_samples,
                n_features,
                n_classes,
                seed,
            },
            RawDataset::Csv {
                path,
                label_column,
                has_header,
            } => DatasetSource::Csv {
                path: resolve(path),
                label_column,
                has_header,
            },
            RawDataset::Idx { images, labels } => DatasetSource::Idx {
                images_path: resolve(images),
                labels_path: resolve(labels),
            },
        };

        let scorer = match self.scorer {
            RawScorer::Nmf {
                components,
                iterations,
                epsilon,
            } => Scorer::Nmf(NmfConfig {
                components,
                iterations,
                seed: 0,
                epsilon,
            }),
            RawScorer::Magnitude => Scorer::Magnitude,
        };

        let threshold = ThresholdConfig {
            t_type: self.threshold.t_type.parse::<ThresholdType>()?,
            gamma: self.threshold.gamma,
        };

        let gamma_search = self.gamma_search.map(|g| {
            let d = GammaSearchConfig::default();
            GammaSearchConfig {
                s_target: g.target_sparsity,
                epsilon_sparsity: g.tolerance.unwrap_or(d.epsilon_sparsity),
                n_search: g.max_iterations.unwrap_or(d.n_search),
                gamma_min: g.gamma_min.unwrap_or(d.gamma_min),
                gamma_max: g.gamma_max.unwrap_or(d.gamma_max),
                gamma_guess: g.gamma_guess.unwrap_or(d.gamma_guess),
                epsilon_gamma_conv: g.gamma_convergence.unwrap_or(d.epsilon_gamma_conv),
            }
        });

        let d = TrainConfig::default();
        let t = self.train;
        let train = TrainConfig {
            epochs: t.epochs.unwrap_or(d.epochs),
            lr: t.lr.unwrap_or(d.lr),
            momentum: t.momentum.unwrap_or(d.momentum),
            weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            lr_milestones: t.lr_milestones.unwrap_or(d.lr_milestones),
            lr_gamma: t.lr_gamma.unwrap_or(d.lr_gamma),
            seed: 0,
        };

        let cfg = RunConfig {
            seed: self.seed,
            model,
            dataset,
            scorer,
            threshold,
            gamma_search,
            train,
            output_dir: self.output_dir,
            checkpoint_every: self.checkpoint_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 11
output_dir = "out"

[[model]]
type = "conv2d"
in_channels = 1
out_channels = 4
kernel = 3
padding = 1

[[model]]
type = "relu"

[[model]]
type = "flatten"

[[model]]
type = "linear"
in = 64
out = 3

[dataset]
source = "idx"
images = "data/img.idx"
labels = "/abs/lab.idx"

[scorer]
type = "nmf"
components = 4

[threshold]
type = "mad"
gamma = 2.0

[gamma_search]
target_sparsity = 0.9
max_iterations = 20

[train]
epochs = 10
lr_milestones = [5, 8]
"#;

    #[test]
    fn parses_full_config() {
        let c = RunConfig::parse(SAMPLE, Path::new("/cfg")).unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.model.len(), 4);
        assert!(c.model[0].prunable);
        assert!(!c.model[3].prunable);
        assert_eq!(
            c.dataset,
            DatasetSource::Idx {
                images_path: PathBuf::from("/cfg/data/img.idx"),
                labels_path: PathBuf::from("/abs/lab.idx"),
            }
        );
        assert_eq!(c.threshold.t_type, ThresholdType::Mad);
        let g = c.gamma_search.unwrap();
        assert_eq!(
            (g.s_target, g.n_search, g.epsilon_sparsity),
            (0.9, 20, 0.005)
        );
        assert_eq!(c.train.epochs, 10);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.weight_decay, 5e-4);
        match c.scorer {
            Scorer::Nmf(n) => assert_eq!((n.components, n.iterations), (4, 200)),
            _ => panic!(),
        }
    }

    #[test]
    fn explicit_prunable_overrides_default() {
        let text = SAMPLE.replace("in = 64\nout = 3", "in = 64\nout = 3\nprunable = true");
        let c = RunConfig::parse(&text, Path::new(".")).unwrap();
        assert!(c.model[3].prunable);
    }

    #[test]
    fn rejects_bad_configs() {
        for (from, to) in [
            ("type = \"mad\"", "type = \"iqr\""),
            ("target_sparsity = 0.9", "target_sparsity = 1.5"),
            ("lr_milestones = [5, 8]", "lr_milestones = [8, 5]"),
            ("seed = 11", "seed = 11\nbogus = 1"),
        ] {
            let err = RunConfig::parse(&SAMPLE.replace(from, to), Path::new(".")).unwrap_err();
            assert!(matches!(err, OngError::Config(_)), "{from} -> {to}: {err}");
        }
    }

    #[test]
    fn seed_plan_fans_out() {
        let mut c = RunConfig::parse(SAMPLE, Path::new(".")).unwrap();
        let a = c.seeds();
        assert_ne!(a.init, a.nmf);
        assert_ne!(a.nmf, a.shuffle);
        c.seed = 12;
        assert_ne!(c.seeds(), a);
        let (scorer, train) = c.seeded();
        assert_eq!(train.seed, c.seeds().shuffle);
        assert!(matches!(scorer, Scorer::Nmf(n) if n.seed == c.seeds().nmf));
    }

    #[test]
    fn target_override_creates_search() {
        let mut c = RunConfig::parse(
            &SAMPLE.replace(
                "[gamma_search]\ntarget_sparsity = 0.9\nmax_iterations = 20\n",
                "",
            ),
            Path::new("."),
        )
        .unwrap();
        assert!(c.gamma_search.is_none());
        c.set_target_sparsity(0.7);
        assert_eq!(c.gamma_search.unwrap().s_target, 0.7);
    }
}
