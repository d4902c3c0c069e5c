//! Multi-head quantile ensemble critic.
//!
//! A shared backbone maps the observation to a latent vector; N independent
//! heads each map that latent to M quantile values. The critic's value
//! distribution is the per-index average of the heads. With N = 1 and M = 1
//! the whole stack degenerates to a scalar value network identical, layer
//! for layer, to the plain critic used by the scalar baseline.

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpGrads, MlpTrace, OutputActivation, ParamCursor};
use crate::quantile::{QuantileGrid, QuantileVector};
use crate::rng::Rng;

/// Backbone hidden widths. The backbone output layer counts as a hidden
/// layer of the composed network, so it gets the tanh treatment.
pub const BACKBONE_DIMS: [usize; 2] = [64, 64];
/// Hidden width of each head (and of the scalar critics in the baselines,
/// which reuse the same shape so architectures stay comparable).
pub const HEAD_HIDDEN: usize = 32;

#[derive(Debug, Clone)]
pub struct CriticNet {
    backbone: Mlp,
    heads: Vec<Mlp>,
    grid: QuantileGrid,
}

/// Forward tape for one state: backbone trace plus one trace per head.
#[derive(Debug, Clone)]
pub struct CriticTrace {
    backbone: MlpTrace,
    heads: Vec<MlpTrace>,
}

impl CriticTrace {
    pub fn head_outputs(&self) -> Result<Vec<QuantileVector>> {
        self.heads
            .iter()
            .map(|t| QuantileVector::new(t.output().to_vec()))
            .collect()
    }
}

/// Parameter gradients in the same layout as [`CriticNet::params_flat`]:
/// backbone first, then heads in order.
#[derive(Debug, Clone)]
pub struct CriticGrads {
    pub backbone: MlpGrads,
    pub heads: Vec<MlpGrads>,
}

impl CriticGrads {
    pub fn add(&mut self, other: &CriticGrads) {
        self.backbone.add(&other.backbone);
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.add(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.backbone.scale(s);
        for h in &mut self.heads {
            h.scale(s);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.backbone.flat();
        for h in &self.heads {
            out.extend(h.flat());
        }
        out
    }
}

impl CriticNet {
    /// Initialize with the fixed architecture. Layers draw from `rng` in
    /// order (backbone, then heads), matching the draw order of a single
    /// deeper network when there is one head.
    pub fn new(obs_dim: usize, n_heads: usize, grid: QuantileGrid, rng: &mut Rng) -> Result<Self> {
        if n_heads == 0 {
            return Err(Error::config("critic.n_heads", "must be at least 1"));
        }
        let backbone_dims = [obs_dim, BACKBONE_DIMS[0], BACKBONE_DIMS[1]];
        let backbone = Mlp::init(&backbone_dims, OutputActivation::Tanh, rng);
        let head_dims = [BACKBONE_DIMS[1], HEAD_HIDDEN, grid.m()];
        let heads = (0..n_heads)
            .map(|_| Mlp::init(&head_dims, OutputActivation::Identity, rng))
            .collect();
        Ok(CriticNet {
            backbone,
            heads,
            grid,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn grid(&self) -> &QuantileGrid {
        &self.grid
    }

    pub fn obs_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn forward(&self, state: &[f64]) -> Result<Vec<QuantileVector>> {
        self.forward_trace(state)?.head_outputs()
    }

    pub fn forward_trace(&self, state: &[f64]) -> Result<CriticTrace> {
        let backbone = self.backbone.forward_trace(state)?;
        let latent = backbone.output().to_vec();
        let heads = self
            .heads
            .iter()
            .map(|h| h.forward_trace(&latent))
            .collect::<Result<Vec<_>>>()?;
        Ok(CriticTrace { backbone, heads })
    }

    /// Backpropagate per-head output gradients. Head latent gradients sum
    /// into the shared backbone.
    pub fn backward(&self, trace: &CriticTrace, d_heads: &[Vec<f64>]) -> CriticGrads {
        assert_eq!(d_heads.len(), self.heads.len(), "one grad per head");
        let mut d_latent = vec![0.0; BACKBONE_DIMS[1]];
        let mut head_grads = Vec::with_capacity(self.heads.len());
        for ((head, head_trace), d_out) in self.heads.iter().zip(&trace.heads).zip(d_heads) {
            let (grads, d_in) = head.backward(head_trace, d_out);
            for (acc, d) in d_latent.iter_mut().zip(&d_in) {
                *acc += d;
            }
            head_grads.push(grads);
        }
        let (backbone_grads, _) = self.backbone.backward(&trace.backbone, &d_latent);
        CriticGrads {
            backbone: backbone_grads,
            heads: head_grads,
        }
    }

    pub fn zero_grads(&self) -> CriticGrads {
        CriticGrads {
            backbone: self.backbone.zero_grads(),
            heads: self.heads.iter().map(Mlp::zero_grads).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.heads.iter().map(Mlp::param_count).sum::<usize>()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = self.backbone.params_flat();
        for h in &self.heads {
            out.extend(h.params_flat());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut cursor = ParamCursor::new(flat);
        self.backbone.set_params(&mut cursor)?;
        for h in &mut self.heads {
            h.set_params(&mut cursor)?;
        }
        cursor.finish()
    }
}

/// Per-index average of the head outputs: the ensemble distribution.
pub fn ensemble_quantiles(heads: &[QuantileVector]) -> Result<QuantileVector> {
    let first = heads.first().ok_or(Error::Empty("ensemble heads"))?;
    let m = first.len();
    for h in heads {
        if h.len() != m {
            return Err(Error::ShapeMismatch {
                what: "ensemble head length",
                expected: m,
                got: h.len(),
            });
        }
    }
    let n = heads.len() as f64;
    let theta = (0..m)
        .map(|j| heads.iter().map(|h| h[j]).sum::<f64>() / n)
        .collect();
    QuantileVector::new(theta)
}
