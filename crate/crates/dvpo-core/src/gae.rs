//! Generalized advantage estimation lifted to quantile vectors.
//!
//! The scalar GAE recursion runs unchanged on each quantile index: the
//! advantage at step t is the distributional TD-error plus a discounted
//! carry of the next step's advantage, both elementwise. Critic targets are
//! the rollout-time values plus the advantage quantiles, and are treated as
//! constants by the critic update (no gradient flows through them).

use crate::error::{Error, Result};
use crate::quantile::QuantileVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaeConfig {
    pub discount_gamma: f64,
    pub lambda: f64,
}

impl GaeConfig {
    pub fn new(discount_gamma: f64, lambda: f64) -> Result<Self> {
        if !(discount_gamma > 0.0 && discount_gamma <= 1.0) {
            return Err(Error::config("gae.discount_gamma", "must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config("gae.lambda", "must be in [0, 1]"));
        }
        Ok(GaeConfig {
            discount_gamma,
            lambda,
        })
    }
}

/// Per-step output of the advantage recursion.
#[derive(Debug, Clone)]
pub struct DistAdvantage {
    /// Advantage quantiles for the actor.
    pub adv_quantiles: QuantileVector,
    /// Critic regression targets: rollout values plus advantage quantiles.
    pub target_quantiles: QuantileVector,
    /// Mean of the advantage quantiles.
    pub scalar_adv: f64,
}

/// One-step distributional TD-error r + γ·v_next − v, elementwise. A
/// terminal step drops the bootstrap term.
pub fn dist_td_error(
    r: f64,
    v_next: &QuantileVector,
    v_t: &QuantileVector,
    done: bool,
    cfg: &GaeConfig,
) -> Result<QuantileVector> {
    if v_next.len() != v_t.len() {
        return Err(Error::ShapeMismatch {
            what: "td error quantiles",
            expected: v_t.len(),
            got: v_next.len(),
        });
    }
    let bootstrap = if done { 0.0 } else { cfg.discount_gamma };
    let theta = (0..v_t.len())
        .map(|j| r + bootstrap * v_next[j] - v_t[j])
        .collect();
    QuantileVector::new(theta)
}

/// Backward advantage recursion over a flat batch of steps. `values` holds
/// one vector per step plus a final bootstrap vector for the state after the
/// last step (only consulted when that step is not terminal). A terminal
/// step resets the recursion, so later episodes never leak into earlier
/// ones.
pub fn dist_gae(
    rewards: &[f64],
    dones: &[bool],
    values: &[QuantileVector],
    cfg: &GaeConfig,
) -> Result<Vec<DistAdvantage>> {
    let t_len = rewards.len();
    if t_len == 0 {
        return Err(Error::Empty("trajectory"));
    }
    if dones.len() != t_len {
        return Err(Error::ShapeMismatch {
            what: "done flags",
            expected: t_len,
            got: dones.len(),
        });
    }
    if values.len() != t_len + 1 {
        return Err(Error::ShapeMismatch {
            what: "value vectors",
            expected: t_len + 1,
            got: values.len(),
        });
    }
    let m = values[0].len();
    for v in values {
        if v.len() != m {
            return Err(Error::ShapeMismatch {
                what: "value quantiles",
                expected: m,
                got: v.len(),
            });
        }
    }

    let mut out: Vec<DistAdvantage> = Vec::with_capacity(t_len);
    let mut adv_next = vec![0.0; m];
    for t in (0..t_len).rev() {
        let carry = if dones[t] {
            0.0
        } else {
            cfg.discount_gamma * cfg.lambda
        };
        let delta = dist_td_error(rewards[t], &values[t + 1], &values[t], dones[t], cfg)?;
        let adv: Vec<f64> = (0..m).map(|j| delta[j] + carry * adv_next[j]).collect();
        let target: Vec<f64> = (0..m).map(|j| values[t][j] + adv[j]).collect();
        let adv_q = QuantileVector::new(adv.clone())?;
        let scalar_adv = adv_q.mean();
        out.push(DistAdvantage {
            adv_quantiles: adv_q,
            target_quantiles: QuantileVector::new(target)?,
            scalar_adv,
        });
        adv_next = adv;
    }
    out.reverse();
    Ok(out)
}

/// Scalar advantages for the actor, optionally standardized to mean 0 and
/// std 1 over the batch (population std, floored at 1e-8).
pub fn scalar_advantages(advs: &[DistAdvantage], normalize: bool) -> Result<Vec<f64>> {
    if advs.is_empty() {
        return Err(Error::Empty("advantages"));
    }
    let mut out: Vec<f64> = advs.iter().map(|a| a.scalar_adv).collect();
    if normalize {
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let var = out.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-8);
        for a in &mut out {
            *a = (*a - mean) / std;
        }
    }
    Ok(out)
}
