//! Discrete softmax policy and the clipped-ratio update.
//!
//! The surrogate objective clips the probability ratio to [1−ε, 1+ε] and
//! takes the pessimistic branch per sample. Entropy regularization inside
//! the loss uses the sampled estimator −mean(new_logprob), since the loss
//! only sees logprobs of taken actions; exact distribution entropy is
//! computed separately as a reported metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamState, Mlp, OutputActivation, ParamCursor};
use crate::par;
use crate::rng::Rng;

/// Policy network hidden widths.
pub const POLICY_DIMS: [usize; 2] = [64, 64];

#[derive(Debug, Clone)]
pub struct PolicyNet {
    net: Mlp,
    action_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
    pub epochs_per_batch: usize,
    pub minibatch_size: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_epsilon: 0.2,
            entropy_coef: 0.01,
            epochs_per_batch: 4,
            minibatch_size: 64,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::config("ppo.clip_epsilon", "must be in (0, 1)"));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return Err(Error::config("ppo.entropy_coef", "must be nonnegative"));
        }
        if self.epochs_per_batch == 0 {
            return Err(Error::config("ppo.epochs_per_batch", "must be at least 1"));
        }
        if self.minibatch_size == 0 {
            return Err(Error::config("ppo.minibatch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Output of one clipped-loss evaluation over a sample batch.
#[derive(Debug, Clone)]
pub struct ClipLoss {
    /// −surrogate − entropy_coef · entropy_estimate.
    pub loss: f64,
    /// Mean of the per-sample pessimistic surrogate (the maximized quantity).
    pub surrogate: f64,
    /// Sampled entropy estimator −mean(new_logprob).
    pub entropy_estimate: f64,
    /// Gradient of `loss` w.r.t. each new logprob.
    pub d_new_logprob: Vec<f64>,
    /// Fraction of samples with ratio outside the clip band.
    pub clip_fraction: f64,
}

/// Metrics from one full policy update.
#[derive(Debug, Clone, Copy)]
pub struct PolicyUpdateStats {
    /// Mean clipped loss across every minibatch pass.
    pub mean_loss: f64,
    /// Mean clip fraction across every minibatch pass.
    pub clip_fraction: f64,
    /// Exact mean distribution entropy over the batch, after the update.
    pub entropy: f64,
    /// Estimator mean(old_logprob − new_logprob), after the update.
    pub approx_kl: f64,
}

impl PolicyNet {
    pub fn new(obs_dim: usize, action_count: usize, rng: &mut Rng) -> Result<Self> {
        if action_count < 2 {
            return Err(Error::config("env.action_count", "need at least 2 actions"));
        }
        let dims = [obs_dim, POLICY_DIMS[0], POLICY_DIMS[1], action_count];
        Ok(PolicyNet {
            net: Mlp::init(&dims, OutputActivation::Identity, rng),
            action_count,
        })
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Softmax action probabilities.
    pub fn action_distribution(&self, state: &[f64]) -> Result<Vec<f64>> {
        let (probs, _) = self.probs_and_logprobs(state)?;
        Ok(probs)
    }

    fn probs_and_logprobs(&self, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let logits = self.net.forward(state)?;
        Ok(softmax_pair(&logits))
    }

    /// Sample an action and its logprob from the policy.
    pub fn sample(&self, state: &[f64], rng: &mut Rng) -> Result<(usize, f64)> {
        let (probs, logprobs) = self.probs_and_logprobs(state)?;
        let u = rng.uniform(0.0, 1.0);
        let mut cum = 0.0;
        for (a, p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return Ok((a, logprobs[a]));
            }
        }
        // Rounding can leave cum a hair under 1; charge the last action.
        let last = probs.len() - 1;
        Ok((last, logprobs[last]))
    }

    /// Highest-probability action, ties to the lowest index.
    pub fn greedy(&self, state: &[f64]) -> Result<usize> {
        let probs = self.action_distribution(state)?;
        let mut best = 0;
        for (a, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = a;
            }
        }
        Ok(best)
    }

    pub fn logprob_of(&self, state: &[f64], action: usize) -> Result<f64> {
        let (_, logprobs) = self.probs_and_logprobs(state)?;
        Ok(logprobs[action])
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

/// Stable softmax returning probabilities and log-probabilities.
fn softmax_pair(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp_sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_norm = max + exp_sum.ln();
    let logprobs: Vec<f64> = logits.iter().map(|l| l - log_norm).collect();
    let probs = logprobs.iter().map(|lp| lp.exp()).collect();
    (probs, logprobs)
}

/// Clipped-ratio policy loss over aligned sample arrays. Old logprobs and
/// advantages are constants; the gradient is w.r.t. the new logprobs only.
pub fn ppo_clip_loss(
    new_logprob: &[f64],
    old_logprob: &[f64],
    advantage: &[f64],
    cfg: &PpoConfig,
) -> Result<ClipLoss> {
    cfg.validate()?;
    let n = new_logprob.len();
    if n == 0 {
        return Err(Error::Empty("policy loss batch"));
    }
    if old_logprob.len() != n || advantage.len() != n {
        return Err(Error::ShapeMismatch {
            what: "policy loss arrays",
            expected: n,
            got: old_logprob.len().min(advantage.len()),
        });
    }
    let (lo, hi) = (1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
    let nf = n as f64;
    let mut surrogate = 0.0;
    let mut clipped = 0usize;
    let mut d_new = vec![0.0; n];
    for i in 0..n {
        let ratio = (new_logprob[i] - old_logprob[i]).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFinite("policy ratio"));
        }
        let unclipped = ratio * advantage[i];
        let clamped = ratio.clamp(lo, hi) * advantage[i];
        if ratio < lo || ratio > hi {
            clipped += 1;
        }
        // Pessimistic branch; the unclipped side wins ties so the gradient
        // convention at the boundary is the live ratio.
        if unclipped <= clamped {
            surrogate += unclipped;
            // dρ/d new_logprob = ρ, and the loss negates the surrogate.
            d_new[i] = -unclipped / nf;
        } else {
            surrogate += clamped;
        }
        // Entropy estimator term: loss += coef · new_logprob / n.
        d_new[i] += cfg.entropy_coef / nf;
    }
    surrogate /= nf;
    let entropy_estimate = -new_logprob.iter().sum::<f64>() / nf;
    Ok(ClipLoss {
        loss: -surrogate - cfg.entropy_coef * entropy_estimate,
        surrogate,
        entropy_estimate,
        d_new_logprob: d_new,
        clip_fraction: clipped as f64 / nf,
    })
}

/// Epochs of shuffled-minibatch ascent on the clipped objective. Gradients
/// accumulate in fixed-size chunks so parallel and sequential runs agree
/// bitwise; the shuffle order comes entirely from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn policy_update(
    policy: &mut PolicyNet,
    obs: &[Vec<f64>],
    actions: &[usize],
    old_logprobs: &[f64],
    advantages: &[f64],
    cfg: &PpoConfig,
    adam: &mut AdamState,
    rng: &mut Rng,
) -> Result<PolicyUpdateStats> {
    cfg.validate()?;
    let n = obs.len();
    if n == 0 {
        return Err(Error::Empty("policy update batch"));
    }
    if actions.len() != n || old_logprobs.len() != n || advantages.len() != n {
        return Err(Error::ShapeMismatch {
            what: "policy update arrays",
            expected: n,
            got: actions.len().min(old_logprobs.len()).min(advantages.len()),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_sum = 0.0;
    let mut clip_sum = 0.0;
    let mut passes = 0usize;
    for _ in 0..cfg.epochs_per_batch {
        rng.shuffle(&mut order);
        for minibatch in order.chunks(cfg.minibatch_size) {
            let net = &policy.net;
            let fwd: Vec<(crate::nn::MlpTrace, Vec<f64>, f64)> =
                par::map_indexed(minibatch.len(), |k| {
                    let i = minibatch[k];
                    let trace = net.forward_trace(&obs[i]).expect("dims checked");
                    let (probs, logprobs) = softmax_pair(trace.output());
                    (trace, probs, logprobs[actions[i]])
                });
            let new_lps: Vec<f64> = fwd.iter().map(|(_, _, lp)| *lp).collect();
            let mb_old: Vec<f64> = minibatch.iter().map(|&i| old_logprobs[i]).collect();
            let mb_adv: Vec<f64> = minibatch.iter().map(|&i| advantages[i]).collect();
            let clip = ppo_clip_loss(&new_lps, &mb_old, &mb_adv, cfg)?;

            let ks: Vec<usize> = (0..minibatch.len()).collect();
            let partials = par::map_chunks(&ks, |chunk| {
                let mut acc = net.zero_grads();
                for &k in chunk {
                    let (trace, probs, _) = &fwd[k];
                    let a = actions[minibatch[k]];
                    // d logprob[a] / d logit_k = δ_{ak} − p_k.
                    let d_logits: Vec<f64> = (0..probs.len())
                        .map(|j| {
                            let ind = if j == a { 1.0 } else { 0.0 };
                            clip.d_new_logprob[k] * (ind - probs[j])
                        })
                        .collect();
                    let (g, _) = net.backward(trace, &d_logits);
                    acc.add(&g);
                }
                acc
            });
            let mut grads = net.zero_grads();
            for p in &partials {
                grads.add(p);
            }

            let mut params = policy.params_flat();
            adam.step(&mut params, &grads.flat())?;
            policy.set_params_flat(&params)?;

            loss_sum += clip.loss;
            clip_sum += clip.clip_fraction;
            passes += 1;
        }
    }

    // Post-update diagnostics over the full batch.
    let post: Vec<(f64, f64)> = par::map_indexed(n, |i| {
        let (probs, logprobs) = policy.probs_and_logprobs(&obs[i]).expect("dims checked");
        let entropy = -probs
            .iter()
            .zip(&logprobs)
            .map(|(p, lp)| p * lp)
            .sum::<f64>();
        (entropy, old_logprobs[i] - logprobs[actions[i]])
    });
    let entropy = post.iter().map(|(e, _)| e).sum::<f64>() / n as f64;
    let approx_kl = post.iter().map(|(_, k)| k).sum::<f64>() / n as f64;

    Ok(PolicyUpdateStats {
        mean_loss: loss_sum / passes as f64,
        clip_fraction: clip_sum / passes as f64,
        entropy,
        approx_kl,
    })
}
