//! Importance scorers applied to every prunable layer.

use crate::error::Result;
use crate::matrix::Matrix;
use crate::network::{MaskedLayer, Network};
use crate::nmf::{self, NmfConfig, ScoreMatrix, ScoreSet};
use crate::parallel::Exec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scorer {
    Nmf(NmfConfig),
    /// `|w|`, the usual magnitude baseline.
    Magnitude,
}

impl Scorer {
    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Nmf(_) => "nmf",
            Scorer::Magnitude => "magnitude",
        }
    }
}

pub fn score_magnitude(layer_id: &str, w: &Matrix) -> ScoreMatrix {
    ScoreMatrix {
        layer_id: layer_id.to_string(),
        scores: w.abs_map(),
    }
}

/// Score every prunable layer. NMF layers get their own seed derived from
/// the configured seed and the layer id.
pub fn score_network(net: &Network, scorer: &Scorer, exec: Exec) -> Result<ScoreSet> {
    let layers: Vec<&MaskedLayer> = net.prunable_layers().collect();
    let scored = exec.map(&layers, |l| match scorer {
        Scorer::Nmf(cfg) => {
            // layers already run concurrently; keep the inner products on this thread
            let inner = if layers.len() > 1 {
                Exec::Sequential
            } else {
                exec
            };
            nmf::score_layer_with(l.id(), &l.weights, &cfg.for_layer(l.id()), inner)
        }
        Scorer::Magnitude => Ok(score_magnitude(l.id(), &l.weights)),
    });
    scored
        .into_iter()
        .map(|s| s.map(|s| (s.layer_id.clone(), s)))
        .collect()
}
