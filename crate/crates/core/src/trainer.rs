//! SGD with momentum and coupled weight decay, a multi-step learning-rate
//! schedule, and the masked training loop.
//!
//! Per mini-batch the masked loop runs forward, backward, then for every
//! masked layer `grad <- grad * M` and `W <- W * M`, then the optimizer
//! step. After the step the masked positions are re-checked for exact zeros
//! and any breach is a hard error.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{OngError, Result};
use crate::matrix::Matrix;
use crate::network::Network;
use crate::pipeline::data::Split;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: 40 epochs, decay by 0.1 at 20 and 30.
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            lr_milestones: vec![20, 30],
            lr_gamma: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OngError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return bad(format!(
                "lr decay factor must be positive, got {}",
                self.lr_gamma
            ));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "lr milestones must be strictly increasing: {:?}",
                self.lr_milestones
            ));
        }
        if let Some(&last) = self.lr_milestones.last() {
            if self.epochs > 0 && last >= self.epochs {
                return bad(format!(
                    "lr milestone {last} is not before the final epoch {}",
                    self.epochs
                ));
            }
        }
        Ok(())
    }
}

/// `lr * lr_gamma^(number of milestones <= epoch)`, epochs counted from 0.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr * cfg.lr_gamma.powi(passed as i32)
}

/// Momentum buffers, one per parameter tensor, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    weight_buffers: Vec<Matrix>,
    bias_buffers: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(net: &Network) -> Self {
        OptimizerState {
            weight_buffers: net
                .weighted_layers()
                .map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            bias_buffers: net
                .weighted_layers()
                .map(|l| vec![0.0; l.bias.len()])
                .collect(),
        }
    }

    pub fn weight_buffers(&self) -> &[Matrix] {
        &self.weight_buffers
    }
}

/// `buf <- momentum * buf + (grad + wd * p)`, `p <- p - lr * buf`, for every
/// weight and bias.
pub fn sgd_step(
    net: &mut Network,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for l in net.weighted_layers() {
        let bad_w = l.grad_weights.data().iter().position(|v| !v.is_finite());
        let bad_b = l.grad_bias.iter().position(|v| !v.is_finite());
        if bad_w.is_some() || bad_b.is_some() {
            return Err(OngError::Numerical(format!(
                "non-finite gradient in layer {} (weight index {bad_w:?}, bias index {bad_b:?})",
                l.id()
            )));
        }
    }
    let n_layers = net.weighted_layers().count();
    if state.weight_buffers.len() != n_layers {
        return Err(OngError::shape(
            "sgd_step",
            format!(
                "optimizer tracks {} layers, network has {n_layers}",
                state.weight_buffers.len()
            ),
        ));
    }
    let (m, wd) = (cfg.momentum, cfg.weight_decay);
    let update = |p: &mut f64, g: f64, buf: &mut f64| {
        *buf = m * *buf + (g + wd * *p);
        *p -= lr * *buf;
    };
    for ((l, wbuf), bbuf) in net
        .weighted_layers_mut()
        .zip(&mut state.weight_buffers)
        .zip(&mut state.bias_buffers)
    {
        if wbuf.shape() != l.weights.shape() || bbuf.len() != l.bias.len() {
            return Err(OngError::shape(
                "sgd_step",
                format!("buffer shape drift in {}", l.id()),
            ));
        }
        let grads = l.grad_weights.data().to_vec();
        for ((p, g), b) in l
            .weights
            .data_mut()
            .iter_mut()
            .zip(grads)
            .zip(wbuf.data_mut())
        {
            update(p, g, b);
        }
        let grads = l.grad_bias.clone();
        for ((p, g), b) in l.bias.iter_mut().zip(grads).zip(bbuf.iter_mut()) {
            update(p, g, b);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub samples: usize,
}

fn forward_backward(net: &mut Network, x: &Matrix, labels: &[usize]) -> Result<StepStats> {
    let out = net.forward(x)?;
    let loss = net.backward(&out, labels)?;
    let correct = (0..out.logits.rows())
        .filter(|&r| {
            let row = out.logits.row(r);
            let arg = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                )
                .0;
            arg == labels[r]
        })
        .count();
    Ok(StepStats {
        loss,
        correct,
        samples: labels.len(),
    })
}

/// One unmasked step: forward, backward, optimizer.
pub fn train_step(
    net: &mut Network,
    state: &mut OptimizerState,
    x: &Matrix,
    labels: &[usize],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let stats = forward_backward(net, x, labels)?;
    sgd_step(net, state, lr, cfg)?;
    Ok(stats)
}

/// One masked step; layers without a mask train normally.
pub fn masked_train_step(
    net: &mut Network,
    state: &mut OptimizerState,
    x: &Matrix,
    labels: &[usize],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let stats = forward_backward(net, x, labels)?;
    for l in net.weighted_layers_mut() {
        let Some(mask) = l.mask().cloned() else {
            continue;
        };
        mask.apply(&mut l.grad_weights)?;
        mask.apply(&mut l.weights)?;
    }
    sgd_step(net, state, lr, cfg)?;
    net.verify_nullity()?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Recounted from the weights, over prunable layers.
    pub achieved_sparsity: f64,
    pub zero_count: usize,
}

/// Per-step observation passed to the training hook.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub stats: StepStats,
}

#[derive(Debug, Clone, Copy)]
pub enum TrainEvent<'a> {
    /// After an optimizer step.
    Step(StepInfo),
    /// After an epoch's metrics are computed.
    EpochEnd(&'a EpochMetrics),
}

fn gather(split: &Split, idx: &[usize]) -> Result<(Matrix, Vec<usize>)> {
    let d = split.features.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(split.features.row(i));
    }
    Ok((
        Matrix::from_vec(idx.len(), d, data)?,
        idx.iter().map(|&i| split.labels[i]).collect(),
    ))
}

pub fn run_training(
    net: &mut Network,
    train: &Split,
    test: &Split,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    run_training_with(net, train, test, cfg, |_, _| Ok(()))
}

/// Masked training over seeded shuffled mini-batches; `on_event` sees the
/// network after every optimizer step and at the end of every epoch.
pub fn run_training_with<F>(
    net: &mut Network,
    train: &Split,
    test: &Split,
    cfg: &TrainConfig,
    mut on_event: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(TrainEvent<'_>, &Network) -> Result<()>,
{
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if train.is_empty() {
        return Err(OngError::Dataset("training split is empty".into()));
    }
    net.verify_nullity()?;
    let mut state = OptimizerState::new(net);
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = gather(train, chunk)?;
            let stats = masked_train_step(net, &mut state, &x, &y, lr, cfg)?;
            loss_sum += stats.loss * stats.samples as f64;
            correct += stats.correct;
            seen += stats.samples;
            step += 1;
            on_event(TrainEvent::Step(StepInfo { epoch, step, stats }), net)?;
        }
        let zero_count = net.prunable_zero_count();
        let achieved_sparsity = net.sparsity_report().map_or(0.0, |r| r.global_sparsity);
        let test_accuracy = if test.is_empty() {
            0.0
        } else {
            net.accuracy(&test.features, &test.labels)?
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            test_accuracy,
            achieved_sparsity,
            zero_count,
        };
        log::debug!("{m:?}");
        on_event(TrainEvent::EpochEnd(&m), net)?;
        metrics.push(m);
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{Mask, MaskSet};
    use crate::network::{mlp_specs, LayerSpec, Shape3};
    use rand::Rng;

    fn single_linear() -> Network {
        Network::init(&[LayerSpec::linear(3, 2)], Shape3::flat(3), 1).unwrap()
    }

    fn set_grad(net: &mut Network, g: &Matrix) {
        let l = net.weighted_layers_mut().next().unwrap();
        l.grad_weights = g.clone();
        l.grad_bias.fill(0.0);
    }

    fn cfg(momentum: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            momentum,
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    fn weights(net: &Network) -> Matrix {
        net.weighted_layers().next().unwrap().weights.clone()
    }

    #[test]
    fn vanilla_sgd() {
        let mut net = single_linear();
        let w0 = weights(&net);
        let g = Matrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64 * 0.25 - 0.5);
        let mut st = OptimizerState::new(&net);
        set_grad(&mut net, &g);
        sgd_step(&mut net, &mut st, 0.1, &cfg(0.0, 0.0)).unwrap();
        let w1 = weights(&net);
        for ((a, b), gi) in w0.data().iter().zip(w1.data()).zip(g.data()) {
            assert_eq!(*b, a - 0.1 * gi);
        }
    }

    #[test]
    fn momentum_builds_geometrically() {
        let mut net = single_linear();
        let g = Matrix::filled(2, 3, 0.5);
        let mut st = OptimizerState::new(&net);
        let c = cfg(0.9, 0.0);
        set_grad(&mut net, &g);
        sgd_step(&mut net, &mut st, 0.1, &c).unwrap();
        let w1 = weights(&net);
        set_grad(&mut net, &g);
        sgd_step(&mut net, &mut st, 0.1, &c).unwrap();
        let w2 = weights(&net);
        for (a, b) in w1.data().iter().zip(w2.data()) {
            assert!(((a - b) - 0.1 * 0.5 * 1.9).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_only_step() {
        let mut net = single_linear();
        let w0 = weights(&net);
        let mut st = OptimizerState::new(&net);
        set_grad(&mut net, &Matrix::zeros(2, 3));
        sgd_step(&mut net, &mut st, 0.1, &cfg(0.9, 5e-4)).unwrap();
        for (a, b) in w0.data().iter().zip(weights(&net).data()) {
            assert_eq!(*b, a - 0.1 * (5e-4 * a));
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut net = single_linear();
        let mut g = Matrix::zeros(2, 3);
        g.data_mut()[4] = f64::NAN;
        set_grad(&mut net, &g);
        let mut st = OptimizerState::new(&net);
        let err = sgd_step(&mut net, &mut st, 0.1, &cfg(0.9, 0.0)).unwrap_err();
        assert!(err.to_string().contains("linear_0"), "{err}");
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig {
            epochs: 160,
            lr: 0.1,
            lr_milestones: vec![80, 120],
            lr_gamma: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &c), 0.1);
        assert_eq!(lr_at(79, &c), 0.1);
        assert!((lr_at(80, &c) - 0.01).abs() < 1e-15);
        assert!((lr_at(120, &c) - 0.001).abs() < 1e-15);
        let flat = TrainConfig {
            lr_milestones: vec![],
            ..c
        };
        assert_eq!(lr_at(150, &flat), 0.1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            lr_milestones: vec![30, 20],
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr_milestones: vec![40],
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn toy_split(n: usize, seed: u64) -> Split {
        let mut rng = seed::rng(seed);
        let features = Matrix::from_fn(n, 4, |_, _| rng.random_range(-1.0..1.0));
        let labels = (0..n)
            .map(|r| usize::from(features.get(r, 0) + features.get(r, 1) > 0.0))
            .collect();
        Split { features, labels }
    }

    fn random_masks(net: &Network, density: f64, seed: u64) -> MaskSet {
        let mut rng = seed::rng(seed);
        net.prunable_layers()
            .map(|l| {
                let bits = Matrix::from_fn(l.weights.rows(), l.weights.cols(), |_, _| {
                    if rng.random::<f64>() < density {
                        1.0
                    } else {
                        0.0
                    }
                });
                (l.id().to_string(), Mask::new(l.id(), bits).unwrap())
            })
            .collect()
    }

    #[test]
    fn fully_masked_layer_stays_zero() {
        let net = Network::init(&mlp_specs(&[4, 8, 2]), Shape3::flat(4), 2).unwrap();
        let masks: MaskSet = [(
            "linear_0".into(),
            Mask::new("linear_0", Matrix::zeros(8, 4)).unwrap(),
        )]
        .into();
        let mut net = net.convert_to_masked(&masks).unwrap();
        let (train, test) = (toy_split(64, 1), toy_split(16, 2));
        let c = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr_milestones: vec![],
            ..TrainConfig::default()
        };
        run_training_with(&mut net, &train, &test, &c, |_, n| {
            assert!(n
                .layer("linear_0")
                .unwrap()
                .weights
                .data()
                .iter()
                .all(|&v| v == 0.0));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn all_ones_mask_step_is_identity() {
        let base = Network::init(&mlp_specs(&[4, 8, 2]), Shape3::flat(4), 3).unwrap();
        let ones: MaskSet = base
            .prunable_layers()
            .map(|l| {
                (
                    l.id().to_string(),
                    Mask::ones(l.id(), l.weights.rows(), l.weights.cols()),
                )
            })
            .collect();
        let mut dense = base.clone();
        let mut masked = base.convert_to_masked(&ones).unwrap();
        let (mut sd, mut sm) = (OptimizerState::new(&dense), OptimizerState::new(&masked));
        let split = toy_split(16, 4);
        let c = TrainConfig::default();
        for _ in 0..5 {
            let a =
                train_step(&mut dense, &mut sd, &split.features, &split.labels, 0.1, &c).unwrap();
            let b = masked_train_step(
                &mut masked,
                &mut sm,
                &split.features,
                &split.labels,
                0.1,
                &c,
            )
            .unwrap();
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        let strip = |n: &Network| {
            n.weighted_layers()
                .flat_map(|l| l.weights.data().to_vec())
                .map(f64::to_bits)
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&dense), strip(&masked));
    }

    #[test]
    fn masked_gradients_are_zero_and_zero_count_is_frozen() {
        let net = Network::init(&mlp_specs(&[4, 16, 16, 2]), Shape3::flat(4), 5).unwrap();
        let masks = random_masks(&net, 0.2, 6);
        let mut net = net.convert_to_masked(&masks).unwrap();
        let z0 = net.prunable_zero_count();
        let (train, test) = (toy_split(96, 7), toy_split(16, 8));
        let c = TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr_milestones: vec![10],
            ..TrainConfig::default()
        };
        let metrics = run_training_with(&mut net, &train, &test, &c, |_, n| {
            assert_eq!(n.prunable_zero_count(), z0);
            for l in n.prunable_layers() {
                let m = l.mask().unwrap();
                let leaked = l
                    .grad_weights
                    .data()
                    .iter()
                    .zip(m.bits().data())
                    .any(|(&g, &b)| b == 0.0 && g != 0.0);
                assert!(!leaked, "gradient leaked through mask in {}", l.id());
            }
            Ok(())
        })
        .unwrap();
        assert!(metrics.iter().all(|m| m.zero_count == z0));
    }

    #[test]
    fn zero_epochs_leave_net_untouched() {
        let mut net = Network::init(&mlp_specs(&[4, 8, 2]), Shape3::flat(4), 9).unwrap();
        let before = net.parameter_bits();
        let c = TrainConfig {
            epochs: 0,
            lr_milestones: vec![],
            ..TrainConfig::default()
        };
        let m = run_training(&mut net, &toy_split(8, 1), &toy_split(4, 2), &c).unwrap();
        assert!(m.is_empty());
        assert_eq!(net.parameter_bits(), before);
    }

    #[test]
    fn training_replays_deterministically() {
        let run = || {
            let mut net = Network::init(&mlp_specs(&[4, 8, 2]), Shape3::flat(4), 10).unwrap();
            let c = TrainConfig {
                epochs: 4,
                batch_size: 10,
                lr_milestones: vec![2],
                seed: 77,
                ..TrainConfig::default()
            };
            run_training(&mut net, &toy_split(50, 11), &toy_split(20, 12), &c).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_on_separable_data_under_sparsity() {
        for density in [1.0, 0.5, 0.1] {
            let net = Network::init(&mlp_specs(&[4, 32, 2]), Shape3::flat(4), 13).unwrap();
            let masks = random_masks(&net, density, 14);
            let mut net = net.convert_to_masked(&masks).unwrap();
            let c = TrainConfig {
                epochs: 10,
                lr: 0.05,
                batch_size: 16,
                lr_milestones: vec![],
                ..TrainConfig::default()
            };
            let m = run_training(&mut net, &toy_split(200, 15), &toy_split(50, 16), &c).unwrap();
            assert!(
                m.last().unwrap().train_loss < m[0].train_loss,
                "density {density}: {m:?}"
            );
        }
    }
}
