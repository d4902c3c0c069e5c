//! Small MDPs with corrupted terminal rewards.
//!
//! Both tasks pay a single outcome reward at episode end and flip it with a
//! configurable probability. The flip draw for episode k comes from a stream
//! keyed only by (noise seed, k), so two algorithms run against the same
//! noise seed see identical corruption realizations regardless of what
//! actions they take: paired comparisons by construction.
//!
//! The uncorrupted reward never leaves this module except through
//! [`evaluate_policy`]; training code consumes [`TrajectoryBatch`], which
//! carries only observed rewards.

use crate::error::{Error, Result};
use crate::par;
use crate::policy::PolicyNet;
use crate::rng::{Rng, Stream};

/// Reward corruption parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisySpec {
    /// Probability that a terminal reward r is replaced by 1 − r.
    pub flip_prob: f64,
    pub noise_seed: u64,
}

impl NoisySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.flip_prob >= 0.0 && self.flip_prob < 1.0) {
            return Err(Error::config("env.flip_prob", "must be in [0, 1)"));
        }
        Ok(())
    }
}

fn corrupt(r: f64, spec: &NoisySpec, noise_rng: &mut Rng) -> f64 {
    // Always draw, so the stream position per episode is fixed even at
    // flip_prob 0 and reruns with different probabilities stay aligned.
    if noise_rng.bernoulli(spec.flip_prob) {
        1.0 - r
    } else {
        r
    }
}

/// K-armed bandit; arm k pays (2k+1)/(2K) before corruption, so the means
/// sit evenly spaced in (0, 1).
#[derive(Debug, Clone)]
pub struct BanditEnv {
    arms: usize,
    pub noisy: NoisySpec,
}

impl BanditEnv {
    pub fn new(arms: usize, noisy: NoisySpec) -> Result<Self> {
        if arms < 2 {
            return Err(Error::config("env.arms", "need at least 2 arms"));
        }
        noisy.validate()?;
        Ok(BanditEnv { arms, noisy })
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn arm_mean(&self, arm: usize) -> f64 {
        (2 * arm + 1) as f64 / (2 * self.arms) as f64
    }

    /// Observed (possibly flipped) reward for pulling an arm.
    pub fn step(&self, action: usize, noise_rng: &mut Rng) -> Result<f64> {
        Ok(self.step_full(action, noise_rng)?.0)
    }

    fn step_full(&self, action: usize, noise_rng: &mut Rng) -> Result<(f64, f64)> {
        if action >= self.arms {
            return Err(Error::ShapeMismatch {
                what: "bandit action",
                expected: self.arms,
                got: action,
            });
        }
        let true_r = self.arm_mean(action);
        Ok((corrupt(true_r, &self.noisy, noise_rng), true_r))
    }
}

/// Fixed-length chain with two actions per step. One action per position is
/// "correct" (a hidden pattern derived from the noise seed); the terminal
/// reward is 1 when at least ⌈0.8·T⌉ steps were correct, else 0, then
/// corrupted. Observations carry the one-hot position plus position parity
/// and correct-count parity, so the exact correct count stays hidden and
/// terminal outcomes remain genuinely uncertain mid-episode.
#[derive(Debug, Clone)]
pub struct ChainEnv {
    pattern: Vec<bool>,
    threshold: usize,
    pub noisy: NoisySpec,
}

/// Opaque chain position; constructed by [`ChainEnv::reset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainState {
    position: usize,
    correct: usize,
}

impl ChainEnv {
    pub fn new(length: usize, noisy: NoisySpec) -> Result<Self> {
        let mut rng = Rng::substream(noisy.noise_seed, Stream::EnvStructure, &[]);
        let pattern = (0..length).map(|_| rng.bernoulli(0.5)).collect();
        Self::with_pattern(pattern, noisy)
    }

    /// Explicit correct-action pattern, mainly for tests that need known
    /// optimal trajectories.
    pub fn with_pattern(pattern: Vec<bool>, noisy: NoisySpec) -> Result<Self> {
        if pattern.is_empty() {
            return Err(Error::config("env.length", "must be at least 1"));
        }
        noisy.validate()?;
        let length = pattern.len();
        let threshold = (0.8 * length as f64).ceil() as usize;
        Ok(ChainEnv {
            pattern,
            threshold,
            noisy,
        })
    }

    pub fn length(&self) -> usize {
        self.pattern.len()
    }

    /// Correct actions needed for the terminal payout.
    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn reset(&self) -> ChainState {
        ChainState {
            position: 0,
            correct: 0,
        }
    }

    pub fn obs(&self, s: &ChainState) -> Vec<f64> {
        let t = self.pattern.len();
        let mut v = vec![0.0; t + 2];
        v[s.position] = 1.0;
        v[t] = (s.position % 2) as f64;
        v[t + 1] = (s.correct % 2) as f64;
        v
    }

    /// Advance one step; the observed terminal reward is corrupted.
    pub fn step(
        &self,
        s: &ChainState,
        action: usize,
        noise_rng: &mut Rng,
    ) -> Result<(ChainState, f64, bool)> {
        let (next, observed, _true_r, done) = self.step_full(s, action, noise_rng)?;
        Ok((next, observed, done))
    }

    fn step_full(
        &self,
        s: &ChainState,
        action: usize,
        noise_rng: &mut Rng,
    ) -> Result<(ChainState, f64, f64, bool)> {
        if action >= 2 {
            return Err(Error::ShapeMismatch {
                what: "chain action",
                expected: 2,
                got: action,
            });
        }
        let correct_action = if self.pattern[s.position] { 1 } else { 0 };
        let next = ChainState {
            position: s.position + 1,
            correct: s.correct + usize::from(action == correct_action),
        };
        if next.position == self.pattern.len() {
            let true_r = if next.correct >= self.threshold { 1.0 } else { 0.0 };
            let observed = corrupt(true_r, &self.noisy, noise_rng);
            Ok((next, observed, true_r, true))
        } else {
            Ok((next, 0.0, 0.0, false))
        }
    }
}

/// The task being trained on.
#[derive(Debug, Clone)]
pub enum Env {
    Bandit(BanditEnv),
    Chain(ChainEnv),
}

impl Env {
    pub fn obs_dim(&self) -> usize {
        match self {
            Env::Bandit(_) => 1,
            Env::Chain(c) => c.length() + 2,
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            Env::Bandit(b) => b.arms(),
            Env::Chain(_) => 2,
        }
    }

    pub fn noisy(&self) -> &NoisySpec {
        match self {
            Env::Bandit(b) => &b.noisy,
            Env::Chain(c) => &c.noisy,
        }
    }
}

/// One finished episode. The uncorrupted terminal reward stays private to
/// this module; see [`evaluate_policy`].
#[derive(Debug, Clone)]
pub struct Episode {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub logprobs: Vec<f64>,
    /// Observed rewards, including any corruption.
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    true_reward: f64,
}

enum ActionChoice<'a> {
    Policy(&'a PolicyNet, &'a mut Rng),
    PolicyGreedy(&'a PolicyNet),
    Uniform(&'a mut Rng),
}

impl ActionChoice<'_> {
    fn pick(&mut self, obs: &[f64], n_actions: usize) -> Result<(usize, f64)> {
        match self {
            ActionChoice::Policy(policy, rng) => policy.sample(obs, rng),
            ActionChoice::PolicyGreedy(policy) => {
                let a = policy.greedy(obs)?;
                Ok((a, policy.logprob_of(obs, a)?))
            }
            ActionChoice::Uniform(rng) => {
                let a = rng.below(n_actions);
                Ok((a, -(n_actions as f64).ln()))
            }
        }
    }
}

fn run_episode(env: &Env, mut choice: ActionChoice<'_>, noise_rng: &mut Rng) -> Result<Episode> {
    let n_actions = env.action_count();
    let mut ep = Episode {
        obs: Vec::new(),
        actions: Vec::new(),
        logprobs: Vec::new(),
        rewards: Vec::new(),
        dones: Vec::new(),
        true_reward: 0.0,
    };
    match env {
        Env::Bandit(b) => {
            let obs = vec![1.0];
            let (action, logprob) = choice.pick(&obs, n_actions)?;
            let (observed, true_r) = b.step_full(action, noise_rng)?;
            ep.obs.push(obs);
            ep.actions.push(action);
            ep.logprobs.push(logprob);
            ep.rewards.push(observed);
            ep.dones.push(true);
            ep.true_reward = true_r;
        }
        Env::Chain(c) => {
            let mut state = c.reset();
            loop {
                let obs = c.obs(&state);
                let (action, logprob) = choice.pick(&obs, n_actions)?;
                let (next, observed, true_r, done) = c.step_full(&state, action, noise_rng)?;
                ep.obs.push(obs);
                ep.actions.push(action);
                ep.logprobs.push(logprob);
                ep.rewards.push(observed);
                ep.dones.push(done);
                if done {
                    ep.true_reward = true_r;
                    break;
                }
                state = next;
            }
        }
    }
    Ok(ep)
}

/// Episodes concatenated into flat step arrays for the update code, with
/// episode boundaries kept for grouping. Observed rewards only.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub old_logprobs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Start index of each episode within the flat arrays.
    pub episode_starts: Vec<usize>,
}

impl TrajectoryBatch {
    fn from_episodes(episodes: Vec<Episode>) -> Self {
        let mut batch = TrajectoryBatch {
            obs: Vec::new(),
            actions: Vec::new(),
            old_logprobs: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            episode_starts: Vec::new(),
        };
        for ep in episodes {
            batch.episode_starts.push(batch.obs.len());
            batch.obs.extend(ep.obs);
            batch.actions.extend(ep.actions);
            batch.old_logprobs.extend(ep.logprobs);
            batch.rewards.extend(ep.rewards);
            batch.dones.extend(ep.dones);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn n_episodes(&self) -> usize {
        self.episode_starts.len()
    }

    /// Step range of episode `e`.
    pub fn episode_range(&self, e: usize) -> std::ops::Range<usize> {
        let start = self.episode_starts[e];
        let end = self
            .episode_starts
            .get(e + 1)
            .copied()
            .unwrap_or(self.obs.len());
        start..end
    }

    /// Observed (corrupted) return of episode `e`.
    pub fn episode_return(&self, e: usize) -> f64 {
        self.episode_range(e).map(|t| self.rewards[t]).sum()
    }

    pub fn mean_return(&self) -> f64 {
        (0..self.n_episodes())
            .map(|e| self.episode_return(e))
            .sum::<f64>()
            / self.n_episodes() as f64
    }
}

/// Collect `n_episodes` complete episodes by sampling from the policy.
/// Episode k draws actions from the sampling stream at index
/// `episode_base + k` and noise from the corruption stream at the same
/// index, so collection parallelizes without reordering effects and the
/// global episode counter keys the noise pairing.
pub fn collect_rollouts(
    env: &Env,
    policy: &PolicyNet,
    n_episodes: usize,
    master_seed: u64,
    episode_base: u64,
) -> Result<TrajectoryBatch> {
    if n_episodes == 0 {
        return Err(Error::Empty("rollout request"));
    }
    let noise_seed = env.noisy().noise_seed;
    let episodes = par::map_indexed(n_episodes, |e| {
        let idx = episode_base + e as u64;
        let mut sample_rng = Rng::substream(master_seed, Stream::Sampling, &[idx]);
        let mut noise_rng = Rng::substream(noise_seed, Stream::EnvNoise, &[idx]);
        run_episode(env, ActionChoice::Policy(policy, &mut sample_rng), &mut noise_rng)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBatch::from_episodes(episodes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Argmax actions; deterministic, so one episode settles the value on
    /// these deterministic tasks.
    Greedy,
    /// Sample from the policy distribution.
    Sample,
}

/// Mean uncorrupted return of the policy. This is the only reader of the
/// hidden true rewards; no corruption noise is drawn at all.
pub fn evaluate_policy(
    env: &Env,
    policy: &PolicyNet,
    n_episodes: usize,
    mode: EvalMode,
    seed: u64,
) -> Result<f64> {
    if n_episodes == 0 {
        return Err(Error::Empty("evaluation request"));
    }
    let noise_off = NoisySpec {
        flip_prob: 0.0,
        noise_seed: 0,
    };
    let clean = match env {
        Env::Bandit(b) => Env::Bandit(BanditEnv {
            arms: b.arms,
            noisy: noise_off,
        }),
        Env::Chain(c) => Env::Chain(ChainEnv {
            pattern: c.pattern.clone(),
            threshold: c.threshold,
            noisy: noise_off,
        }),
    };
    let totals = par::map_indexed(n_episodes, |e| {
        let mut noise_rng = Rng::substream(0, Stream::EnvNoise, &[e as u64]);
        let ep = match mode {
            EvalMode::Greedy => {
                run_episode(&clean, ActionChoice::PolicyGreedy(policy), &mut noise_rng)
            }
            EvalMode::Sample => {
                let mut rng = Rng::substream(seed, Stream::Sampling, &[e as u64]);
                run_episode(&clean, ActionChoice::Policy(policy, &mut rng), &mut noise_rng)
            }
        };
        ep.map(|ep| ep.true_reward)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    Ok(totals.iter().sum::<f64>() / n_episodes as f64)
}

/// Fixed diagnostic states, gathered once per run by walking the chain (or
/// pulling the bandit) with uniform random actions. The initial state alone
/// would be a single point on these tasks, so visitation sampling is what
/// gives the probes coverage across positions.
pub fn probe_states(env: &Env, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::Empty("probe request"));
    }
    let mut states = Vec::with_capacity(count);
    let mut episode = 0u64;
    while states.len() < count {
        let mut rng = Rng::substream(seed, Stream::Probe, &[episode]);
        // Noise never surfaces in observations, so the draw stream here is
        // irrelevant; use a fixed throwaway.
        let mut noise_rng = Rng::substream(0, Stream::EnvNoise, &[episode]);
        let ep = run_episode(env, ActionChoice::Uniform(&mut rng), &mut noise_rng)?;
        for obs in ep.obs {
            if states.len() < count {
                states.push(obs);
            }
        }
        episode += 1;
    }
    Ok(states)
}
