//! Group-relative policy optimization over a [`ToyPolicy`].
//!
//! Each epoch freezes the current policy as the sampling policy, draws a
//! group of candidates per query, scores them, standardizes rewards within
//! the group, and takes one ascent step on the clipped surrogate minus the
//! KL penalty toward a frozen reference.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::policy::{
    accumulate_conditional_logprob_grad, apply_update, conditional_logprob, lr_schedule, sample, GradientTable,
    OptimizerState, SampleOptions, TokenId, ToyPolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub kl_coefficient: f64,
    pub clip_range: f64,
    pub advantage_eps: f64,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub sampling: SampleOptions,
}

impl GrpoConfig {
    /// Published hyperparameters: G = 16, beta = 0.04, clip 0.2, lr 1e-5,
    /// cosine schedule with 5% warmup.
    pub fn paper() -> Self {
        GrpoConfig {
            group_size: 16,
            kl_coefficient: 0.04,
            clip_range: 0.2,
            advantage_eps: 1e-8,
            epochs: 200,
            base_lr: 1e-5,
            warmup_ratio: 0.05,
            weight_decay: 0.1,
            clip_norm: 1.0,
            sampling: SampleOptions::default(),
        }
    }

    /// Same group, KL and clip settings with a step size suited to a logits table.
    pub fn desk() -> Self {
        GrpoConfig {
            base_lr: 0.05,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if !(self.kl_coefficient >= 0.0) {
            return Err(Error::Config("kl_coefficient must be >= 0".into()));
        }
        if !(self.clip_range > 0.0) {
            return Err(Error::Config("clip_range must be positive".into()));
        }
        if !(self.advantage_eps > 0.0) {
            return Err(Error::Config("advantage_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<TokenId>,
    /// Sequence log-probability under the sampling policy.
    pub old_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub query: Vec<TokenId>,
    pub candidates: Vec<Candidate>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn size(&self) -> usize {
        self.candidates.len()
    }

    /// Records rewards and fills the standardized advantages.
    pub fn set_rewards(&mut self, rewards: Vec<f64>, advantage_eps: f64) -> Result<()> {
        if rewards.len() != self.size() {
            return Err(arg(format!("{} rewards for {} candidates", rewards.len(), self.size())));
        }
        self.advantages = normalize_advantages(&rewards, advantage_eps)?;
        self.rewards = rewards;
        Ok(())
    }
}

/// Draws `group_size` continuations of `query` from `policy_old`.
pub fn sample_group<R: rand::Rng + ?Sized>(
    policy_old: &ToyPolicy,
    query: &[TokenId],
    config: &GrpoConfig,
    rng: &mut R,
) -> Result<Group> {
    if config.group_size < 2 {
        return Err(Error::Config("group_size must be at least 2".into()));
    }
    let candidates = (0..config.group_size)
        .map(|_| {
            let s = sample(policy_old, query, &config.sampling, rng)?;
            Ok(Candidate {
                old_logprob: s.total_logprob(),
                tokens: s.tokens,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Group {
        query: query.to_vec(),
        candidates,
        rewards: Vec::new(),
        advantages: Vec::new(),
    })
}

pub fn sample_group_seeded(policy_old: &ToyPolicy, query: &[TokenId], config: &GrpoConfig, seed: u64) -> Result<Group> {
    sample_group(policy_old, query, config, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `(r_i - mean) / (std + eps)` with the population (1/G) standard deviation.
pub fn normalize_advantages(rewards: &[f64], advantage_eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(arg("advantage normalization needs at least two rewards"));
    }
    // the computed mean of equal values can miss them by an ulp
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
    let denom = var.sqrt() + advantage_eps;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// `exp(log pi_new(candidate | query) - old_logprob)`.
pub fn sequence_ratio(policy_new: &ToyPolicy, query: &[TokenId], candidate: &Candidate) -> Result<f64> {
    let lp = conditional_logprob(policy_new, query, &candidate.tokens)?;
    Ok((lp - candidate.old_logprob).exp())
}

/// Sorted distinct contexts visited by the group's candidates.
pub fn visited_contexts(policy: &ToyPolicy, group: &Group) -> Vec<usize> {
    group
        .candidates
        .iter()
        .flat_map(|c| policy.response_contexts(&group.query, &c.tokens))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn check_same_shape(a: &ToyPolicy, b: &ToyPolicy) -> Result<()> {
    if (a.vocab_size, a.order) != (b.vocab_size, b.order) {
        return Err(arg(format!(
            "policy shapes differ: V={} n={} vs V={} n={}",
            a.vocab_size, a.order, b.vocab_size, b.order
        )));
    }
    Ok(())
}

/// Exact categorical KL for one context.
fn context_kl(policy: &ToyPolicy, reference: &ToyPolicy, ctx: usize) -> f64 {
    let lp = policy.log_probs(ctx);
    let lq = reference.log_probs(ctx);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>().max(0.0)
}

/// Mean over `contexts` of `KL(policy(.|ctx) || reference(.|ctx))`.
pub fn kl_to_reference(policy: &ToyPolicy, reference: &ToyPolicy, contexts: &[usize]) -> Result<f64> {
    check_same_shape(policy, reference)?;
    if contexts.is_empty() {
        return Ok(0.0);
    }
    if let Some(&c) = contexts.iter().find(|&&c| c >= policy.n_contexts()) {
        return Err(arg(format!("context {c} out of range")));
    }
    let total: f64 = contexts.iter().map(|&c| context_kl(policy, reference, c)).sum();
    Ok(total / contexts.len() as f64)
}

fn clip(r: f64, eps: f64) -> f64 {
    r.clamp(1.0 - eps, 1.0 + eps)
}

/// `(1/G) sum_i min(r_i A_i, clip(r_i, 1-e, 1+e) A_i) - beta * kl`.
pub fn grpo_objective(ratios: &[f64], advantages: &[f64], kl: f64, config: &GrpoConfig) -> Result<f64> {
    if ratios.len() != advantages.len() {
        return Err(arg(format!(
            "{} ratios vs {} advantages",
            ratios.len(),
            advantages.len()
        )));
    }
    if ratios.is_empty() {
        return Err(arg("empty group"));
    }
    let surrogate: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| (r * a).min(clip(r, config.clip_range) * a))
        .sum::<f64>()
        / ratios.len() as f64;
    Ok(surrogate - config.kl_coefficient * kl)
}

fn group_ratios(policy: &ToyPolicy, group: &Group) -> Result<Vec<f64>> {
    group
        .candidates
        .iter()
        .map(|c| sequence_ratio(policy, &group.query, c))
        .collect()
}

fn check_advantages(group: &Group) -> Result<()> {
    if group.advantages.len() != group.size() {
        return Err(arg("group advantages not populated"));
    }
    Ok(())
}

/// Objective value of one group at `policy`, with the KL taken over the
/// contexts the group's candidates visit.
pub fn group_objective(policy: &ToyPolicy, group: &Group, reference: &ToyPolicy, config: &GrpoConfig) -> Result<f64> {
    check_advantages(group)?;
    let ratios = group_ratios(policy, group)?;
    let kl = kl_to_reference(policy, reference, &visited_contexts(policy, group))?;
    grpo_objective(&ratios, &group.advantages, kl, config)
}

/// Exact gradient of [`group_objective`] with respect to the logits.
///
/// Old log-probabilities are constants. A candidate whose clipped term is
/// strictly the smaller one contributes nothing.
pub fn objective_gradient(
    policy: &ToyPolicy,
    group: &Group,
    reference: &ToyPolicy,
    config: &GrpoConfig,
) -> Result<GradientTable> {
    check_advantages(group)?;
    check_same_shape(policy, reference)?;
    let g = group.size() as f64;
    let mut grad = GradientTable::zeros_like(policy);

    for (cand, &adv) in group.candidates.iter().zip(&group.advantages) {
        let r = sequence_ratio(policy, &group.query, cand)?;
        let binding = (adv > 0.0 && r > 1.0 + config.clip_range) || (adv < 0.0 && r < 1.0 - config.clip_range);
        if binding || adv == 0.0 {
            continue;
        }
        // d(r A)/dtheta = A r dlog pi / dtheta
        accumulate_conditional_logprob_grad(policy, &group.query, &cand.tokens, adv * r / g, &mut grad)?;
    }

    let contexts = visited_contexts(policy, group);
    if config.kl_coefficient > 0.0 && !contexts.is_empty() {
        let scale = -config.kl_coefficient / contexts.len() as f64;
        for &c in &contexts {
            let lp = policy.log_probs(c);
            let lq = reference.log_probs(c);
            let kl = context_kl(policy, reference, c);
            let row = grad.row_mut(c);
            for ((gr, a), b) in row.iter_mut().zip(&lp).zip(&lq) {
                *gr += scale * a.exp() * (a - b - kl);
            }
        }
    }
    Ok(grad)
}

/// Scores one candidate response to a query.
pub trait RewardFn {
    fn reward(&self, query: &[TokenId], response: &[TokenId]) -> Result<f64>;
}

impl<F> RewardFn for F
where
    F: Fn(&[TokenId], &[TokenId]) -> Result<f64>,
{
    fn reward(&self, query: &[TokenId], response: &[TokenId]) -> Result<f64> {
        self(query, response)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub kl: f64,
    pub objective: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

impl EpochMetrics {
    pub fn without_timing(&self) -> Self {
        EpochMetrics {
            wall_clock_ms: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainMetrics {
    pub fn without_timing(&self) -> Self {
        TrainMetrics {
            epochs: self.epochs.iter().map(EpochMetrics::without_timing).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    pub optimizer: OptimizerState,
    pub metrics: TrainMetrics,
}

/// Runs `config.epochs` epochs from `initial` with a fresh optimizer.
pub fn train<F: RewardFn + ?Sized>(
    config: &GrpoConfig,
    initial: &ToyPolicy,
    reference: &ToyPolicy,
    queries: &[Vec<TokenId>],
    reward_fn: &F,
    seed: u64,
) -> Result<TrainOutcome> {
    let optimizer = OptimizerState::new(initial);
    train_from(
        config,
        initial.clone(),
        optimizer,
        0..config.epochs,
        reference,
        queries,
        reward_fn,
        seed,
    )
}

/// Runs the epochs in `epochs` (clamped to `config.epochs`) with an existing
/// optimizer state.
///
/// The sampling stream and learning rate of epoch `e` depend only on
/// `(seed, e, config)`, so a run resumed from a checkpoint matches an
/// uninterrupted one.
#[allow(clippy::too_many_arguments)]
pub fn train_from<F: RewardFn + ?Sized>(
    config: &GrpoConfig,
    mut policy: ToyPolicy,
    mut optimizer: OptimizerState,
    epochs: std::ops::Range<usize>,
    reference: &ToyPolicy,
    queries: &[Vec<TokenId>],
    reward_fn: &F,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_same_shape(&policy, reference)?;
    if queries.is_empty() {
        return Err(arg("query set is empty"));
    }
    let mut metrics = TrainMetrics::default();

    for epoch in epochs.start..epochs.end.min(config.epochs) {
        let started = Instant::now();
        let old = policy.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));

        let mut groups = Vec::with_capacity(queries.len());
        for (qi, q) in queries.iter().enumerate() {
            let mut group = sample_group(&old, q, config, &mut rng)?;
            let rewards = group
                .candidates
                .iter()
                .enumerate()
                .map(|(ci, c)| {
                    reward_fn
                        .reward(q, &c.tokens)
                        .map_err(|e| Error::Reward(format!("epoch {epoch}, query {qi}, candidate {ci}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            group.set_rewards(rewards, config.advantage_eps)?;
            groups.push(group);
        }

        let n = groups.len() as f64;
        let mut grad = GradientTable::zeros_like(&policy);
        let (mut objective, mut kl) = (0.0, 0.0);
        for g in &groups {
            grad.add_scaled(&objective_gradient(&policy, g, reference, config)?, 1.0 / n)?;
            objective += group_objective(&policy, g, reference, config)? / n;
            kl += kl_to_reference(&policy, reference, &visited_contexts(&policy, g))? / n;
        }

        let all_rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
        let all_adv: Vec<f64> = groups.iter().flat_map(|g| g.advantages.iter().copied()).collect();
        let lr = lr_schedule(epoch, config.epochs, config.base_lr, config.warmup_ratio);

        // ascent on the objective is descent on its negation
        grad.scale(-1.0);
        apply_update(
            &mut policy,
            &grad,
            &mut optimizer,
            lr,
            config.weight_decay,
            config.clip_norm,
        )?;

        metrics.epochs.push(EpochMetrics {
            epoch,
            lr,
            mean_reward: mean(&all_rewards),
            mean_abs_advantage: all_adv.iter().map(|a| a.abs()).sum::<f64>() / all_adv.len() as f64,
            kl,
            objective,
            wall_clock_ms: Some(started.elapsed().as_secs_f64() * 1e3),
        });
    }

    Ok(TrainOutcome {
        policy,
        optimizer,
        metrics,
    })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mean reward of `samples_per_query` fresh samples per query.
pub fn evaluate<F: RewardFn + ?Sized>(
    policy: &ToyPolicy,
    queries: &[Vec<TokenId>],
    sampling: &SampleOptions,
    samples_per_query: usize,
    reward_fn: &F,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rewards = Vec::new();
    for q in queries {
        for _ in 0..samples_per_query {
            let s = sample(policy, q, sampling, &mut rng)?;
            rewards.push(reward_fn.reward(q, &s.tokens)?);
        }
    }
    Ok(mean(&rewards))
}
