//! The training loop tying environments, critics, and the policy together.
//!
//! Each iteration collects a fresh batch of episodes, computes advantages
//! and critic regression targets from the rollout-time value estimates, runs
//! the critic update epochs against those frozen targets, then the clipped
//! policy update, and finally evaluates the greedy policy on the
//! uncorrupted task and snapshots value statistics on a fixed probe set.
//!
//! All four algorithms share the rollout, advantage, and policy-update
//! machinery; they differ only in the critic (quantile ensemble, scalar,
//! min-over-heads, or none) and in where regression targets come from.

use serde::{Deserialize, Serialize};

use crate::baselines::{grpo_advantage, robust_bellman_target, scalar_critic_loss, MinHeadCritic, ScalarCritic};
use crate::critic::{ensemble_quantiles, CriticNet};
use crate::envs::{
    collect_rollouts, evaluate_policy, probe_states, BanditEnv, ChainEnv, Env, EvalMode,
    NoisySpec, TrajectoryBatch,
};
use crate::error::{Error, Result};
use crate::gae::{dist_gae, scalar_advantages, DistAdvantage, GaeConfig};
use crate::losses::{composite_loss, consistency_loss, LossBreakdown, LossWeights};
use crate::nn::AdamState;
use crate::par;
use crate::policy::{policy_update, PolicyNet, PpoConfig};
use crate::quantile::{QuantileGrid, QuantileVector, TailSpec};
use crate::rng::{Rng, Stream};

/// Number of fixed diagnostic states tracked over a run.
pub const PROBE_COUNT: usize = 32;

/// A logged loss at or above this magnitude aborts the run as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Dvpo,
    Ppo,
    RobustBellman,
    Grpo,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dvpo => "dvpo",
            Algorithm::Ppo => "ppo",
            Algorithm::RobustBellman => "robust_bellman",
            Algorithm::Grpo => "grpo",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dvpo" => Ok(Algorithm::Dvpo),
            "ppo" => Ok(Algorithm::Ppo),
            "robust_bellman" => Ok(Algorithm::RobustBellman),
            "grpo" => Ok(Algorithm::Grpo),
            _ => Err(Error::config(
                "algorithm",
                "expected one of dvpo, ppo, robust_bellman, grpo",
            )),
        }
    }
}

/// Task selection. A missing `noise_seed` falls back to the run seed, so
/// multi-seed studies get fresh corruption noise per seed while paired
/// algorithm comparisons (same seed, different algorithm) share it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Bandit {
        #[serde(default = "default_arms")]
        arms: usize,
        #[serde(default = "default_flip_prob")]
        flip_prob: f64,
        #[serde(default)]
        noise_seed: Option<u64>,
    },
    Chain {
        #[serde(default = "default_chain_length")]
        length: usize,
        #[serde(default = "default_flip_prob")]
        flip_prob: f64,
        #[serde(default)]
        noise_seed: Option<u64>,
    },
}

fn default_arms() -> usize {
    5
}

fn default_chain_length() -> usize {
    16
}

fn default_flip_prob() -> f64 {
    0.25
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EnvConfig::Bandit { arms, flip_prob, .. } => {
                if arms < 2 {
                    return Err(Error::config("env.arms", "need at least 2 arms"));
                }
                NoisySpec {
                    flip_prob,
                    noise_seed: 0,
                }
                .validate()
            }
            EnvConfig::Chain {
                length, flip_prob, ..
            } => {
                if length == 0 {
                    return Err(Error::config("env.length", "must be at least 1"));
                }
                NoisySpec {
                    flip_prob,
                    noise_seed: 0,
                }
                .validate()
            }
        }
    }

    pub fn build(&self, run_seed: u64) -> Result<Env> {
        match *self {
            EnvConfig::Bandit {
                arms,
                flip_prob,
                noise_seed,
            } => {
                let noisy = NoisySpec {
                    flip_prob,
                    noise_seed: noise_seed.unwrap_or(run_seed),
                };
                Ok(Env::Bandit(BanditEnv::new(arms, noisy)?))
            }
            EnvConfig::Chain {
                length,
                flip_prob,
                noise_seed,
            } => {
                let noisy = NoisySpec {
                    flip_prob,
                    noise_seed: noise_seed.unwrap_or(run_seed),
                };
                Ok(Env::Chain(ChainEnv::new(length, noisy)?))
            }
        }
    }
}

/// Critic loss coefficients as they appear in config files. Tail bounds
/// live in [`TrainConfig`] because they also size the probe statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeightConfig {
    pub w_risk: f64,
    pub w_cvar: f64,
    pub w_gain: f64,
    pub w_shift: f64,
    pub w_shape: f64,
    pub w_curv: f64,
    pub w_consist: f64,
    pub risk_gamma: f64,
    pub huber_delta: f64,
}

impl Default for LossWeightConfig {
    fn default() -> Self {
        LossWeightConfig {
            w_risk: 0.3,
            w_cvar: 0.5,
            w_gain: 0.3,
            w_shift: 0.2,
            w_shape: 0.1,
            w_curv: 0.2,
            w_consist: 0.1,
            risk_gamma: 1.0,
            huber_delta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub iterations: usize,
    pub episodes_per_iter: usize,
    /// Quantile resolution M of each critic head.
    pub quantile_count: usize,
    /// Ensemble size N.
    pub head_count: usize,
    pub discount_gamma: f64,
    pub gae_lambda: f64,
    /// Lower tail fraction for the tail-sensitive losses and probe stats.
    pub tail_alpha: f64,
    /// Upper tail fraction.
    pub tail_beta: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub critic_epochs: usize,
    /// Standardize advantages before the policy update. Group-relative
    /// advantages are already standardized and ignore this.
    pub normalize_advantages: bool,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub losses: LossWeightConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Dvpo,
            seed: 7,
            iterations: 300,
            episodes_per_iter: 16,
            quantile_count: 200,
            head_count: 3,
            discount_gamma: 0.99,
            gae_lambda: 0.95,
            tail_alpha: 0.1,
            tail_beta: 0.1,
            critic_lr: 3e-4,
            actor_lr: 3e-4,
            critic_epochs: 4,
            normalize_advantages: true,
            env: EnvConfig::Chain {
                length: default_chain_length(),
                flip_prob: default_flip_prob(),
                noise_seed: None,
            },
            ppo: PpoConfig::default(),
            losses: LossWeightConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.episodes_per_iter == 0 {
            return Err(Error::config("run.episodes_per_iter", "must be at least 1"));
        }
        if self.quantile_count == 0 {
            return Err(Error::config("run.quantile_count", "must be at least 1"));
        }
        if self.head_count == 0 {
            return Err(Error::config("run.head_count", "must be at least 1"));
        }
        if self.algorithm == Algorithm::RobustBellman && self.head_count < 2 {
            return Err(Error::config(
                "run.head_count",
                "the min-over-heads critic needs at least 2 heads",
            ));
        }
        if !(self.critic_lr > 0.0 && self.critic_lr.is_finite()) {
            return Err(Error::config("run.critic_lr", "must be positive and finite"));
        }
        if !(self.actor_lr > 0.0 && self.actor_lr.is_finite()) {
            return Err(Error::config("run.actor_lr", "must be positive and finite"));
        }
        if self.critic_epochs == 0 {
            return Err(Error::config("run.critic_epochs", "must be at least 1"));
        }
        GaeConfig::new(self.discount_gamma, self.gae_lambda)?;
        self.ppo.validate()?;
        self.loss_weights()?.validate()
    }

    /// Tail index bounds at the configured quantile resolution.
    pub fn tails(&self) -> Result<TailSpec> {
        TailSpec::new(self.tail_alpha, self.tail_beta, self.quantile_count)
    }

    /// Loss coefficients after structural adjustments: fewer than three
    /// quantile points leave no interior positions for the curvature
    /// penalty, so it is disabled rather than rejected.
    pub fn loss_weights(&self) -> Result<LossWeights> {
        let c = &self.losses;
        let mut w = LossWeights {
            w_risk: c.w_risk,
            w_cvar: c.w_cvar,
            w_gain: c.w_gain,
            w_shift: c.w_shift,
            w_shape: c.w_shape,
            w_curv: c.w_curv,
            w_consist: c.w_consist,
            risk_gamma: c.risk_gamma,
            huber_delta: c.huber_delta,
            tails: self.tails()?,
        };
        if self.quantile_count < 3 {
            w.w_curv = 0.0;
        }
        Ok(w)
    }
}

/// Value statistics over the fixed probe set for one iteration.
///
/// The `across` fields are tail variances of the per-state scalar value
/// estimates across the probe set; every critic has those, so they are the
/// basis for cross-algorithm dispersion comparisons. The `dist` fields
/// average each state's own value-distribution tail variance and are only
/// nonzero for critics that carry a distribution wide enough for the
/// configured tails to select at least one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeStats {
    pub value_mean: f64,
    pub across_lower_var: f64,
    pub across_upper_var: f64,
    pub dist_lower_var: f64,
    pub dist_upper_var: f64,
}

impl ProbeStats {
    fn zero() -> Self {
        ProbeStats {
            value_mean: 0.0,
            across_lower_var: 0.0,
            across_upper_var: 0.0,
            dist_lower_var: 0.0,
            dist_upper_var: 0.0,
        }
    }

    fn all_finite(&self) -> bool {
        self.value_mean.is_finite()
            && self.across_lower_var.is_finite()
            && self.across_upper_var.is_finite()
            && self.dist_lower_var.is_finite()
            && self.dist_upper_var.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Mean uncorrupted return of the greedy policy.
    pub true_return: f64,
    /// Mean observed return of the rollout batch.
    pub corrupted_return: f64,
    pub critic: LossBreakdown,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub probe: ProbeStats,
}

impl IterationMetrics {
    pub fn all_finite(&self) -> bool {
        let c = &self.critic;
        self.true_return.is_finite()
            && self.corrupted_return.is_finite()
            && c.qr.is_finite()
            && c.risk.is_finite()
            && c.cvar.is_finite()
            && c.gain.is_finite()
            && c.shift.is_finite()
            && c.shape.is_finite()
            && c.curv.is_finite()
            && c.consist.is_finite()
            && c.total.is_finite()
            && self.clip_fraction.is_finite()
            && self.entropy.is_finite()
            && self.approx_kl.is_finite()
            && self.probe.all_finite()
    }
}

/// Value distribution snapshot at one probe state.
/// Quantile values read off one critic head, tagged with the head's index
/// so the serialized form stays unambiguous if heads are ever reordered.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadQuantiles {
    pub head: usize,
    pub quantiles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeDistribution {
    pub probe_index: usize,
    /// The critic's scalar value readout at this state (distribution mean,
    /// plain value, or min over heads, depending on the algorithm).
    pub value: f64,
    /// Quantile values per head, one entry per head index.
    pub heads: Vec<HeadQuantiles>,
    /// Elementwise mean over heads.
    pub ensemble: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalDistributions {
    pub algorithm: Algorithm,
    pub quantile_count: usize,
    pub head_count: usize,
    pub tail_alpha: f64,
    pub tail_beta: f64,
    /// Empty for critic-free algorithms.
    pub probes: Vec<ProbeDistribution>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub metrics: Vec<IterationMetrics>,
    pub final_distributions: FinalDistributions,
    pub policy: PolicyNet,
}

fn zero_breakdown() -> LossBreakdown {
    LossBreakdown {
        qr: 0.0,
        risk: 0.0,
        cvar: 0.0,
        gain: 0.0,
        shift: 0.0,
        shape: 0.0,
        curv: 0.0,
        consist: 0.0,
        total: 0.0,
    }
}

/// Breakdown for the scalar regression objectives: the squared error takes
/// the base-term slot and only the head-agreement penalty can join it.
fn scalar_breakdown(mse: f64, consist: f64, w_consist: f64) -> LossBreakdown {
    LossBreakdown {
        qr: mse,
        consist,
        total: mse + w_consist * consist,
        ..zero_breakdown()
    }
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.qr += b.qr;
    acc.risk += b.risk;
    acc.cvar += b.cvar;
    acc.gain += b.gain;
    acc.shift += b.shift;
    acc.shape += b.shape;
    acc.curv += b.curv;
    acc.consist += b.consist;
    acc.total += b.total;
}

fn scale_breakdown(acc: &mut LossBreakdown, s: f64) {
    acc.qr *= s;
    acc.risk *= s;
    acc.cvar *= s;
    acc.gain *= s;
    acc.shift *= s;
    acc.shape *= s;
    acc.curv *= s;
    acc.consist *= s;
    acc.total *= s;
}

/// Critic regression targets for one batch, frozen before the update epochs.
enum CriticTargets {
    Dist(Vec<QuantileVector>),
    Scalar(Vec<f64>),
    None,
}

struct Advantages {
    scalars: Vec<f64>,
    targets: CriticTargets,
}

/// Run the advantage recursion per episode over precomputed per-step value
/// vectors, then flatten in episode order. The value after a terminal step
/// never contributes (its coefficient is zero), so a zero vector stands in.
fn batch_dist_gae(
    batch: &TrajectoryBatch,
    values: &[QuantileVector],
    m: usize,
    gae: &GaeConfig,
) -> Result<Vec<DistAdvantage>> {
    let mut flat = Vec::with_capacity(batch.len());
    for e in 0..batch.n_episodes() {
        let range = batch.episode_range(e);
        let mut vals: Vec<QuantileVector> = values[range.clone()].to_vec();
        vals.push(QuantileVector::new(vec![0.0; m])?);
        let advs = dist_gae(
            &batch.rewards[range.clone()],
            &batch.dones[range.clone()],
            &vals,
            gae,
        )?;
        flat.extend(advs);
    }
    Ok(flat)
}

/// Group-relative advantages: episodes sharing an initial observation form
/// a group, each episode's observed return is standardized within its
/// group, and the result is broadcast to every step of the episode. A
/// group of one has no baseline and contributes zero advantage.
fn group_relative_advantages(batch: &TrajectoryBatch) -> Result<Vec<f64>> {
    let mut groups: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    for e in 0..batch.n_episodes() {
        let key = &batch.obs[batch.episode_starts[e]];
        match groups.iter_mut().find(|(k, _)| k == key) {
            Some((_, members)) => members.push(e),
            None => groups.push((key.clone(), vec![e])),
        }
    }
    let mut per_episode = vec![0.0; batch.n_episodes()];
    for (_, members) in &groups {
        if members.len() < 2 {
            continue;
        }
        let returns: Vec<f64> = members.iter().map(|&e| batch.episode_return(e)).collect();
        let advs = grpo_advantage(&returns)?;
        for (&e, &a) in members.iter().zip(&advs) {
            per_episode[e] = a;
        }
    }
    let mut out = Vec::with_capacity(batch.len());
    for e in 0..batch.n_episodes() {
        out.extend(batch.episode_range(e).map(|_| per_episode[e]));
    }
    Ok(out)
}

/// Shuffled-minibatch regression epochs for any critic built on
/// [`CriticNet`]. `step_loss` maps (head outputs, step index) to a loss
/// breakdown and per-head output gradients; the driver handles the
/// full-batch pre-update logging pass, chunked gradient accumulation, and
/// the optimizer steps.
fn critic_net_update<F>(
    critic: &mut CriticNet,
    adam: &mut AdamState,
    obs: &[Vec<f64>],
    epochs: usize,
    minibatch: usize,
    shuffle_rng: &mut Rng,
    step_loss: F,
) -> Result<LossBreakdown>
where
    F: Fn(&[QuantileVector], usize) -> Result<(LossBreakdown, Vec<Vec<f64>>)> + Sync,
{
    let n = obs.len();
    let logged = {
        let c = &*critic;
        let idx: Vec<usize> = (0..n).collect();
        let partials = par::map_chunks(&idx, |chunk| {
            let mut acc = zero_breakdown();
            for &i in chunk {
                let heads = c.forward(&obs[i])?;
                let (b, _) = step_loss(&heads, i)?;
                add_breakdown(&mut acc, &b);
            }
            Ok::<_, Error>(acc)
        });
        let mut total = zero_breakdown();
        for p in partials {
            add_breakdown(&mut total, &p?);
        }
        scale_breakdown(&mut total, 1.0 / n as f64);
        total
    };
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut order);
        for mb in order.chunks(minibatch) {
            let c = &*critic;
            let partials = par::map_chunks(mb, |chunk| {
                let mut g = c.zero_grads();
                for &i in chunk {
                    let trace = c.forward_trace(&obs[i])?;
                    let heads = trace.head_outputs()?;
                    let (_, d_heads) = step_loss(&heads, i)?;
                    g.add(&c.backward(&trace, &d_heads));
                }
                Ok::<_, Error>(g)
            });
            let mut g = critic.zero_grads();
            for p in partials {
                g.add(&p?);
            }
            g.scale(1.0 / mb.len() as f64);
            let mut params = critic.params_flat();
            adam.step(&mut params, &g.flat())?;
            critic.set_params_flat(&params)?;
        }
    }
    Ok(logged)
}

/// Same epoch structure as [`critic_net_update`] for the plain scalar
/// critic. Kept op-for-op parallel to the single-point quantile path so a
/// one-quantile one-head run and a scalar run produce identical floats.
fn scalar_critic_update(
    critic: &mut ScalarCritic,
    adam: &mut AdamState,
    obs: &[Vec<f64>],
    targets: &[f64],
    epochs: usize,
    minibatch: usize,
    shuffle_rng: &mut Rng,
) -> Result<LossBreakdown> {
    let n = obs.len();
    let logged = {
        let c = &*critic;
        let idx: Vec<usize> = (0..n).collect();
        let partials = par::map_chunks(&idx, |chunk| {
            let mut acc = zero_breakdown();
            for &i in chunk {
                let (mse, _) = scalar_critic_loss(c.value(&obs[i])?, targets[i]);
                add_breakdown(&mut acc, &scalar_breakdown(mse, 0.0, 0.0));
            }
            Ok::<_, Error>(acc)
        });
        let mut total = zero_breakdown();
        for p in partials {
            add_breakdown(&mut total, &p?);
        }
        scale_breakdown(&mut total, 1.0 / n as f64);
        total
    };
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut order);
        for mb in order.chunks(minibatch) {
            let c = &*critic;
            let partials = par::map_chunks(mb, |chunk| {
                let mut g = c.zero_grads();
                for &i in chunk {
                    let trace = c.forward_trace(&obs[i])?;
                    let (_, d) = scalar_critic_loss(trace.output()[0], targets[i]);
                    g.add(&c.backward(&trace, d));
                }
                Ok::<_, Error>(g)
            });
            let mut g = critic.zero_grads();
            for p in partials {
                g.add(&p?);
            }
            g.scale(1.0 / mb.len() as f64);
            let mut params = critic.params_flat();
            adam.step(&mut params, &g.flat())?;
            critic.set_params_flat(&params)?;
        }
    }
    Ok(logged)
}

/// Tail variances of the per-state scalar values across the probe set.
fn across_probe_stats(values: &[f64], alpha: f64, beta: f64) -> Result<(f64, f64)> {
    let v = QuantileVector::new(values.to_vec())?;
    let tails = TailSpec::new(alpha, beta, values.len())?;
    let perm = v.sort_permutation();
    let lower = if tails.lower_enabled() {
        let idx: Vec<usize> = tails.lower_sorted_range().map(|r| perm[r]).collect();
        v.tail_variance(&idx)?
    } else {
        0.0
    };
    let upper = if tails.upper_enabled() {
        let idx: Vec<usize> = tails.upper_sorted_range().map(|r| perm[r]).collect();
        v.tail_variance(&idx)?
    } else {
        0.0
    };
    Ok((lower, upper))
}

/// Mean over probe states of each state's own distribution tail variance.
/// Zero when the configured fractions select no points at this resolution.
fn dist_probe_stats(dists: &[QuantileVector], alpha: f64, beta: f64) -> Result<(f64, f64)> {
    let m = dists[0].len();
    let tails = TailSpec::new(alpha, beta, m)?;
    if !tails.lower_enabled() && !tails.upper_enabled() {
        return Ok((0.0, 0.0));
    }
    let (mut lower_sum, mut upper_sum) = (0.0, 0.0);
    for d in dists {
        let perm = d.sort_permutation();
        if tails.lower_enabled() {
            let idx: Vec<usize> = tails.lower_sorted_range().map(|r| perm[r]).collect();
            lower_sum += d.tail_variance(&idx)?;
        }
        if tails.upper_enabled() {
            let idx: Vec<usize> = tails.upper_sorted_range().map(|r| perm[r]).collect();
            upper_sum += d.tail_variance(&idx)?;
        }
    }
    let n = dists.len() as f64;
    Ok((lower_sum / n, upper_sum / n))
}

/// The per-algorithm critic state.
enum CriticKind {
    /// Quantile ensemble; with a single quantile point the distributional
    /// objective has no content (no tails, no shape, no curvature, and the
    /// level weighting degenerates), so the update collapses to symmetric
    /// squared error on the ensemble mean plus the head-agreement penalty.
    Quantile {
        critic: CriticNet,
        adam: AdamState,
        weights: LossWeights,
        scalar_mode: bool,
    },
    Scalar {
        critic: ScalarCritic,
        adam: AdamState,
    },
    MinHead {
        critic: MinHeadCritic,
        adam: AdamState,
        discount: f64,
    },
    Actorless,
}

impl CriticKind {
    fn new(cfg: &TrainConfig, obs_dim: usize) -> Result<Self> {
        let mut rng = Rng::substream(cfg.seed, Stream::Init, &[1]);
        match cfg.algorithm {
            Algorithm::Dvpo => {
                let grid = QuantileGrid::new(cfg.quantile_count)?;
                let critic = CriticNet::new(obs_dim, cfg.head_count, grid, &mut rng)?;
                let adam = AdamState::new(critic.param_count(), cfg.critic_lr);
                Ok(CriticKind::Quantile {
                    critic,
                    adam,
                    weights: cfg.loss_weights()?,
                    scalar_mode: cfg.quantile_count == 1,
                })
            }
            Algorithm::Ppo => {
                let critic = ScalarCritic::new(obs_dim, &mut rng);
                let adam = AdamState::new(critic.param_count(), cfg.critic_lr);
                Ok(CriticKind::Scalar { critic, adam })
            }
            Algorithm::RobustBellman => {
                let critic = MinHeadCritic::new(obs_dim, cfg.head_count, &mut rng)?;
                let adam = AdamState::new(critic.critic().param_count(), cfg.critic_lr);
                Ok(CriticKind::MinHead {
                    critic,
                    adam,
                    discount: cfg.discount_gamma,
                })
            }
            Algorithm::Grpo => Ok(CriticKind::Actorless),
        }
    }

    /// Scalar advantages for the policy update plus frozen critic targets,
    /// all from the pre-update critic.
    fn advantages(
        &self,
        batch: &TrajectoryBatch,
        gae: &GaeConfig,
        normalize: bool,
    ) -> Result<Advantages> {
        match self {
            CriticKind::Quantile { critic, .. } => {
                let m = critic.grid().m();
                let values = par::map_indexed(batch.len(), |t| {
                    ensemble_quantiles(&critic.forward(&batch.obs[t])?)
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
                let advs = batch_dist_gae(batch, &values, m, gae)?;
                let scalars = scalar_advantages(&advs, normalize)?;
                let targets = if m == 1 {
                    CriticTargets::Scalar(
                        advs.iter().map(|a| a.target_quantiles.as_slice()[0]).collect(),
                    )
                } else {
                    CriticTargets::Dist(advs.into_iter().map(|a| a.target_quantiles).collect())
                };
                Ok(Advantages { scalars, targets })
            }
            CriticKind::Scalar { critic, .. } => {
                let values = par::map_indexed(batch.len(), |t| {
                    QuantileVector::new(vec![critic.value(&batch.obs[t])?])
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
                let advs = batch_dist_gae(batch, &values, 1, gae)?;
                let scalars = scalar_advantages(&advs, normalize)?;
                let targets = CriticTargets::Scalar(
                    advs.iter().map(|a| a.target_quantiles.as_slice()[0]).collect(),
                );
                Ok(Advantages { scalars, targets })
            }
            CriticKind::MinHead {
                critic, discount, ..
            } => {
                let mins = par::map_indexed(batch.len(), |t| critic.min_value(&batch.obs[t]))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                let values = mins
                    .iter()
                    .map(|&v| QuantileVector::new(vec![v]))
                    .collect::<Result<Vec<_>>>()?;
                let advs = batch_dist_gae(batch, &values, 1, gae)?;
                let scalars = scalar_advantages(&advs, normalize)?;
                // One-step pessimistic bootstrap targets, not the advantage
                // recursion: every head regresses toward the min-head value
                // of the successor state.
                let targets = (0..batch.len())
                    .map(|t| {
                        let done = batch.dones[t];
                        let v_next = if done { 0.0 } else { mins[t + 1] };
                        robust_bellman_target(batch.rewards[t], v_next, done, *discount)
                    })
                    .collect();
                Ok(Advantages {
                    scalars,
                    targets: CriticTargets::Scalar(targets),
                })
            }
            CriticKind::Actorless => Ok(Advantages {
                scalars: group_relative_advantages(batch)?,
                targets: CriticTargets::None,
            }),
        }
    }

    fn update(
        &mut self,
        obs: &[Vec<f64>],
        targets: &CriticTargets,
        epochs: usize,
        minibatch: usize,
        shuffle_rng: &mut Rng,
    ) -> Result<LossBreakdown> {
        match (self, targets) {
            (
                CriticKind::Quantile {
                    critic,
                    adam,
                    weights,
                    scalar_mode: false,
                },
                CriticTargets::Dist(targets),
            ) => {
                let grid = critic.grid().clone();
                critic_net_update(critic, adam, obs, epochs, minibatch, shuffle_rng, |heads, i| {
                    composite_loss(heads, &targets[i], weights, &grid)
                })
            }
            (
                CriticKind::Quantile {
                    critic,
                    adam,
                    weights,
                    scalar_mode: true,
                },
                CriticTargets::Scalar(targets),
            ) => {
                let w_consist = weights.w_consist;
                critic_net_update(critic, adam, obs, epochs, minibatch, shuffle_rng, |heads, i| {
                    let n = heads.len() as f64;
                    let mean = heads.iter().map(|h| h.as_slice()[0]).sum::<f64>() / n;
                    let (mse, d_mse) = scalar_critic_loss(mean, targets[i]);
                    let (consist, consist_grads) = consistency_loss(heads)?;
                    let d_heads = consist_grads
                        .iter()
                        .map(|g| vec![d_mse / n + w_consist * g[0]])
                        .collect();
                    Ok((scalar_breakdown(mse, consist, w_consist), d_heads))
                })
            }
            (CriticKind::Scalar { critic, adam }, CriticTargets::Scalar(targets)) => {
                scalar_critic_update(critic, adam, obs, targets, epochs, minibatch, shuffle_rng)
            }
            (CriticKind::MinHead { critic, adam, .. }, CriticTargets::Scalar(targets)) => {
                critic_net_update(
                    critic.critic_mut(),
                    adam,
                    obs,
                    epochs,
                    minibatch,
                    shuffle_rng,
                    |heads, i| {
                        let n = heads.len() as f64;
                        let mut loss = 0.0;
                        let mut d_heads = Vec::with_capacity(heads.len());
                        for h in heads {
                            let (l, d) = scalar_critic_loss(h.as_slice()[0], targets[i]);
                            loss += l;
                            d_heads.push(vec![d / n]);
                        }
                        Ok((scalar_breakdown(loss / n, 0.0, 0.0), d_heads))
                    },
                )
            }
            (CriticKind::Actorless, CriticTargets::None) => Ok(zero_breakdown()),
            _ => Err(Error::ShapeMismatch {
                what: "critic targets",
                expected: 0,
                got: 0,
            }),
        }
    }

    fn probe_stats(&self, probes: &[Vec<f64>], alpha: f64, beta: f64) -> Result<ProbeStats> {
        let (values, dists): (Vec<f64>, Option<Vec<QuantileVector>>) = match self {
            CriticKind::Quantile { critic, .. } => {
                let dists = probes
                    .iter()
                    .map(|p| ensemble_quantiles(&critic.forward(p)?))
                    .collect::<Result<Vec<_>>>()?;
                (dists.iter().map(|d| d.mean()).collect(), Some(dists))
            }
            CriticKind::Scalar { critic, .. } => (
                probes
                    .iter()
                    .map(|p| critic.value(p))
                    .collect::<Result<Vec<_>>>()?,
                None,
            ),
            CriticKind::MinHead { critic, .. } => {
                let head_sets = probes
                    .iter()
                    .map(|p| critic.head_values(p))
                    .collect::<Result<Vec<_>>>()?;
                let values = head_sets
                    .iter()
                    .map(|hs| hs.iter().copied().fold(f64::INFINITY, f64::min))
                    .collect();
                let dists = head_sets
                    .into_iter()
                    .map(QuantileVector::new)
                    .collect::<Result<Vec<_>>>()?;
                (values, Some(dists))
            }
            CriticKind::Actorless => return Ok(ProbeStats::zero()),
        };
        let (across_lower_var, across_upper_var) = across_probe_stats(&values, alpha, beta)?;
        let (dist_lower_var, dist_upper_var) = match &dists {
            Some(d) => dist_probe_stats(d, alpha, beta)?,
            None => (0.0, 0.0),
        };
        Ok(ProbeStats {
            value_mean: values.iter().sum::<f64>() / values.len() as f64,
            across_lower_var,
            across_upper_var,
            dist_lower_var,
            dist_upper_var,
        })
    }

    fn distributions(&self, probes: &[Vec<f64>], cfg: &TrainConfig) -> Result<FinalDistributions> {
        let mut out = FinalDistributions {
            algorithm: cfg.algorithm,
            quantile_count: cfg.quantile_count,
            head_count: cfg.head_count,
            tail_alpha: cfg.tail_alpha,
            tail_beta: cfg.tail_beta,
            probes: Vec::new(),
        };
        for (i, p) in probes.iter().enumerate() {
            let entry = match self {
                CriticKind::Quantile { critic, .. } => {
                    let heads = critic.forward(p)?;
                    let ensemble = ensemble_quantiles(&heads)?;
                    ProbeDistribution {
                        probe_index: i,
                        value: ensemble.mean(),
                        heads: heads
                            .iter()
                            .enumerate()
                            .map(|(h, q)| HeadQuantiles {
                                head: h,
                                quantiles: q.as_slice().to_vec(),
                            })
                            .collect(),
                        ensemble: ensemble.as_slice().to_vec(),
                    }
                }
                CriticKind::Scalar { critic, .. } => {
                    let v = critic.value(p)?;
                    ProbeDistribution {
                        probe_index: i,
                        value: v,
                        heads: vec![HeadQuantiles { head: 0, quantiles: vec![v] }],
                        ensemble: vec![v],
                    }
                }
                CriticKind::MinHead { critic, .. } => {
                    let heads = critic.head_values(p)?;
                    let min = heads.iter().copied().fold(f64::INFINITY, f64::min);
                    let mean = heads.iter().sum::<f64>() / heads.len() as f64;
                    ProbeDistribution {
                        probe_index: i,
                        value: min,
                        heads: heads
                            .iter()
                            .enumerate()
                            .map(|(h, &v)| HeadQuantiles { head: h, quantiles: vec![v] })
                            .collect(),
                        ensemble: vec![mean],
                    }
                }
                CriticKind::Actorless => break,
            };
            out.probes.push(entry);
        }
        Ok(out)
    }
}

/// Run a full training job as described by the config.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    log::info!(
        "training {} for {} iterations, seed {}",
        cfg.algorithm,
        cfg.iterations,
        cfg.seed
    );
    let env = cfg.env.build(cfg.seed)?;
    let mut policy = PolicyNet::new(
        env.obs_dim(),
        env.action_count(),
        &mut Rng::substream(cfg.seed, Stream::Init, &[0]),
    )?;
    let mut critic = CriticKind::new(cfg, env.obs_dim())?;
    let probes = probe_states(&env, PROBE_COUNT, cfg.seed)?;
    let gae = GaeConfig::new(cfg.discount_gamma, cfg.gae_lambda)?;
    let mut actor_adam = AdamState::new(policy.param_count(), cfg.actor_lr);
    let mut shuffle_rng = Rng::substream(cfg.seed, Stream::Shuffle, &[]);
    let mut metrics = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let episode_base = (iteration * cfg.episodes_per_iter) as u64;
        let batch = collect_rollouts(&env, &policy, cfg.episodes_per_iter, cfg.seed, episode_base)?;
        let corrupted_return = batch.mean_return();

        let adv = critic.advantages(&batch, &gae, cfg.normalize_advantages)?;
        let breakdown = critic.update(
            &batch.obs,
            &adv.targets,
            cfg.critic_epochs,
            cfg.ppo.minibatch_size,
            &mut shuffle_rng,
        )?;
        if !breakdown.total.is_finite() || breakdown.total.abs() >= DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                iteration,
                loss: breakdown.total,
            });
        }

        let stats = policy_update(
            &mut policy,
            &batch.obs,
            &batch.actions,
            &batch.old_logprobs,
            &adv.scalars,
            &cfg.ppo,
            &mut actor_adam,
            &mut shuffle_rng,
        )?;
        if !stats.mean_loss.is_finite() || stats.mean_loss.abs() >= DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                iteration,
                loss: stats.mean_loss,
            });
        }

        let true_return = evaluate_policy(&env, &policy, 1, EvalMode::Greedy, cfg.seed)?;
        let probe = critic.probe_stats(&probes, cfg.tail_alpha, cfg.tail_beta)?;
        let row = IterationMetrics {
            iteration,
            true_return,
            corrupted_return,
            critic: breakdown,
            clip_fraction: stats.clip_fraction,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            probe,
        };
        if !row.all_finite() {
            return Err(Error::Diverged {
                iteration,
                loss: f64::NAN,
            });
        }
        log::debug!(
            "iteration {iteration}: true_return {true_return:.4} critic {:.6} entropy {:.4}",
            row.critic.total,
            row.entropy,
        );
        metrics.push(row);
    }

    let final_distributions = critic.distributions(&probes, cfg)?;
    Ok(TrainOutput {
        metrics,
        final_distributions,
        policy,
    })
}
