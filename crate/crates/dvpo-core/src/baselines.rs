//! Comparison critics and advantages: a plain scalar critic, a pessimistic
//! min-over-heads critic, and group-relative reward normalization.
//!
//! The scalar critic is exactly the one-head one-quantile ensemble critic
//! flattened into a single network, layer for layer, so runs configured
//! either way produce identical trajectories. The min-head critic shares
//! the ensemble critic's architecture and differs only in how values are
//! read out (minimum instead of mean) and trained (every head toward the
//! shared worst-case bootstrap).

use crate::critic::{CriticNet, BACKBONE_DIMS, HEAD_HIDDEN};
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpGrads, MlpTrace, OutputActivation, ParamCursor};
use crate::quantile::QuantileGrid;
use crate::rng::Rng;

/// Single-output value network for the scalar baseline.
#[derive(Debug, Clone)]
pub struct ScalarCritic {
    net: Mlp,
}

impl ScalarCritic {
    pub fn new(obs_dim: usize, rng: &mut Rng) -> Self {
        let dims = [obs_dim, BACKBONE_DIMS[0], BACKBONE_DIMS[1], HEAD_HIDDEN, 1];
        ScalarCritic {
            net: Mlp::init(&dims, OutputActivation::Identity, rng),
        }
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.net.forward(state)?[0])
    }

    pub fn forward_trace(&self, state: &[f64]) -> Result<MlpTrace> {
        self.net.forward_trace(state)
    }

    pub fn backward(&self, trace: &MlpTrace, d_value: f64) -> MlpGrads {
        self.net.backward(trace, &[d_value]).0
    }

    pub fn zero_grads(&self) -> MlpGrads {
        self.net.zero_grads()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.net.params_flat()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut cursor = ParamCursor::new(flat);
        self.net.set_params(&mut cursor)?;
        cursor.finish()
    }
}

/// Ensemble of scalar value heads read out pessimistically.
#[derive(Debug, Clone)]
pub struct MinHeadCritic {
    critic: CriticNet,
}

impl MinHeadCritic {
    pub fn new(obs_dim: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        if n_heads < 2 {
            return Err(Error::config(
                "critic.n_heads",
                "min-head baseline needs at least 2 heads",
            ));
        }
        let grid = QuantileGrid::new(1)?;
        Ok(MinHeadCritic {
            critic: CriticNet::new(obs_dim, n_heads, grid, rng)?,
        })
    }

    pub fn head_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .critic
            .forward(state)?
            .iter()
            .map(|q| q[0])
            .collect())
    }

    pub fn min_value(&self, state: &[f64]) -> Result<f64> {
        min_head_value(&self.head_values(state)?)
    }

    /// Shared-architecture internals, for the training loop's forward and
    /// backward passes.
    pub fn critic(&self) -> &CriticNet {
        &self.critic
    }

    pub fn critic_mut(&mut self) -> &mut CriticNet {
        &mut self.critic
    }
}

/// Squared error and its gradient w.r.t. the prediction.
pub fn scalar_critic_loss(pred: f64, target: f64) -> (f64, f64) {
    let diff = pred - target;
    (diff * diff, 2.0 * diff)
}

/// Minimum over head values; with ties the first (lowest index) head wins,
/// which matters only for reproducible reduction order.
pub fn min_head_value(heads: &[f64]) -> Result<f64> {
    let first = *heads.first().ok_or(Error::Empty("min-head values"))?;
    Ok(heads[1..].iter().fold(first, |acc, &v| if v < acc { v } else { acc }))
}

/// Worst-case bootstrap target r + γ·min_next, dropped at terminals. Every
/// head regresses to this one number.
pub fn robust_bellman_target(r: f64, v_next_min: f64, done: bool, discount: f64) -> f64 {
    if done {
        r
    } else {
        r + discount * v_next_min
    }
}

/// Group-relative advantages (r − mean)/std with population std, floored at
/// 1e-8. Needs at least two members for the spread to mean anything.
pub fn grpo_advantage(group_rewards: &[f64]) -> Result<Vec<f64>> {
    let k = group_rewards.len();
    if k < 2 {
        return Err(Error::config(
            "grpo.group",
            format!("need at least 2 rewards in a group, got {k}"),
        ));
    }
    let n = k as f64;
    let mean = group_rewards.iter().sum::<f64>() / n;
    let var = group_rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    Ok(group_rewards.iter().map(|r| (r - mean) / std).collect())
}
