//! An n-gram softmax policy with an explicit logits table.
//!
//! Every conditional distribution is a softmax over one row of the table, so
//! log-probabilities, losses and their gradients are exact. Contexts are the
//! previous `order - 1` tokens, padded on the left with a reserved
//! begin-of-sequence symbol.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, shape, Error, Result};

pub type TokenId = u32;

/// Token ids with an optional loss mask (`true` = counted).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        TokenSequence { tokens, mask: None }
    }

    pub fn with_mask(tokens: Vec<TokenId>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != tokens.len() {
            return Err(arg(format!(
                "mask length {} differs from token length {}",
                mask.len(),
                tokens.len()
            )));
        }
        Ok(TokenSequence {
            tokens,
            mask: Some(mask),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Dense table shaped like the policy logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientTable {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl GradientTable {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        GradientTable {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn zeros_like(model: &ToyPolicy) -> Self {
        Self::zeros(model.n_contexts(), model.vocab_size)
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    pub fn add_scaled(&mut self, other: &GradientTable, c: f64) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(shape(format!(
                "gradient {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub vocab_size: usize,
    pub order: usize,
    /// Row-major `(context, next token)`.
    pub logits: Vec<f64>,
}

impl ToyPolicy {
    /// All-zero logits, i.e. uniform conditionals.
    pub fn uniform(vocab_size: usize, order: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(arg("vocabulary must be non-empty"));
        }
        if !(1..=3).contains(&order) {
            return Err(arg(format!("order {order} outside 1..=3")));
        }
        let rows = (vocab_size + 1).pow(order as u32 - 1);
        Ok(ToyPolicy {
            vocab_size,
            order,
            logits: vec![0.0; rows * vocab_size],
        })
    }

    pub fn from_logits(vocab_size: usize, order: usize, logits: Vec<f64>) -> Result<Self> {
        let mut p = Self::uniform(vocab_size, order)?;
        if logits.len() != p.logits.len() {
            return Err(shape(format!(
                "expected {} logits, got {}",
                p.logits.len(),
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(arg("logits must be finite"));
        }
        p.logits = logits;
        Ok(p)
    }

    /// Random logits from a seeded normal-ish distribution with the given scale.
    pub fn random(vocab_size: usize, order: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut p = Self::uniform(vocab_size, order)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in &mut p.logits {
            *x = scale * (rng.random::<f64>() * 2.0 - 1.0);
        }
        Ok(p)
    }

    pub fn n_contexts(&self) -> usize {
        self.logits.len() / self.vocab_size
    }

    pub fn bos(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, ctx: usize) -> &[f64] {
        &self.logits[ctx * self.vocab_size..(ctx + 1) * self.vocab_size]
    }

    pub fn row_mut(&mut self, ctx: usize) -> &mut [f64] {
        let v = self.vocab_size;
        &mut self.logits[ctx * v..(ctx + 1) * v]
    }

    /// Context index for the next token after `history`.
    pub fn context_of(&self, history: &[TokenId]) -> usize {
        let width = self.order - 1;
        let base = self.vocab_size + 1;
        let mut idx = 0;
        for i in 0..width {
            // position history.len() - width + i, BOS when negative
            let sym = (history.len() + i)
                .checked_sub(width)
                .map_or(self.bos(), |p| history[p] as usize);
            idx = idx * base + sym;
        }
        idx
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(&token) => Err(Error::Vocabulary {
                token,
                vocab_size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    pub fn log_probs(&self, ctx: usize) -> Vec<f64> {
        log_softmax(self.row(ctx))
    }

    pub fn probs(&self, ctx: usize) -> Vec<f64> {
        self.log_probs(ctx).into_iter().map(f64::exp).collect()
    }

    /// Context index for each response position, conditioned on `prompt`.
    pub fn response_contexts(&self, prompt: &[TokenId], response: &[TokenId]) -> Vec<usize> {
        let mut history: Vec<TokenId> = prompt.to_vec();
        let mut out = Vec::with_capacity(response.len());
        for &t in response {
            out.push(self.context_of(&history));
            history.push(t);
        }
        out
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Per-position log P(x_t | x_<t) of `response` following `prompt`.
fn token_logprobs(model: &ToyPolicy, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<(usize, f64)>> {
    model.check_tokens(prompt)?;
    model.check_tokens(response)?;
    let ctxs = model.response_contexts(prompt, response);
    Ok(ctxs
        .into_iter()
        .zip(response)
        .map(|(c, &t)| (c, model.log_probs(c)[t as usize]))
        .collect())
}

/// Adds `weight * d/dlogits log P(token | ctx)` to `grad`.
fn accumulate_logprob_grad(model: &ToyPolicy, grad: &mut GradientTable, ctx: usize, token: TokenId, weight: f64) {
    let probs = model.probs(ctx);
    let row = grad.row_mut(ctx);
    for (g, p) in row.iter_mut().zip(&probs) {
        *g -= weight * p;
    }
    row[token as usize] += weight;
}

/// Sum-form next-token loss `-sum_t log P(x_t | x_<t)` and its exact gradient.
pub fn nll_loss(model: &ToyPolicy, seq: &TokenSequence) -> Result<(f64, GradientTable)> {
    if seq.is_empty() {
        return Err(arg("sequence must be non-empty"));
    }
    let lps = token_logprobs(model, &[], &seq.tokens)?;
    let mut grad = GradientTable::zeros_like(model);
    for (&(ctx, _), &t) in lps.iter().zip(&seq.tokens) {
        accumulate_logprob_grad(model, &mut grad, ctx, t, -1.0);
    }
    let total: f64 = lps.iter().map(|(_, lp)| lp).sum();
    Ok((-total, grad))
}

/// Mean loss over masked-in positions; a missing mask counts every position.
pub fn masked_sft_loss(model: &ToyPolicy, seq: &TokenSequence) -> Result<(f64, GradientTable)> {
    let mask: Vec<bool> = match &seq.mask {
        Some(m) if m.len() != seq.len() => return Err(arg("mask length differs from tokens")),
        Some(m) => m.clone(),
        None => vec![true; seq.len()],
    };
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(Error::EmptyMask);
    }
    let lps = token_logprobs(model, &[], &seq.tokens)?;
    let scale = 1.0 / active as f64;
    let mut grad = GradientTable::zeros_like(model);
    let mut total = 0.0;
    for ((&(ctx, lp), &t), &m) in lps.iter().zip(&seq.tokens).zip(&mask) {
        if m {
            total += lp;
            accumulate_logprob_grad(model, &mut grad, ctx, t, -scale);
        }
    }
    Ok((-total * scale, grad))
}

/// `sum_t log P(x_t | x_<t)` from the begin-of-sequence context.
pub fn logprob(model: &ToyPolicy, seq: &TokenSequence) -> Result<f64> {
    conditional_logprob(model, &[], &seq.tokens)
}

/// Log-probability of `response` given `prompt`.
pub fn conditional_logprob(model: &ToyPolicy, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
    Ok(token_logprobs(model, prompt, response)?.iter().map(|(_, lp)| lp).sum())
}

/// Gradient of `conditional_logprob` with respect to the logits, scaled by `weight`,
/// accumulated into `grad`.
pub fn accumulate_conditional_logprob_grad(
    model: &ToyPolicy,
    prompt: &[TokenId],
    response: &[TokenId],
    weight: f64,
    grad: &mut GradientTable,
) -> Result<()> {
    model.check_tokens(prompt)?;
    model.check_tokens(response)?;
    for (ctx, &t) in model.response_contexts(prompt, response).into_iter().zip(response) {
        accumulate_logprob_grad(model, grad, ctx, t, weight);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub max_len: usize,
    /// `0.0` selects greedy argmax decoding.
    pub temperature: f64,
    /// Generation stops after emitting this token.
    pub stop_token: Option<TokenId>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            max_len: 16,
            temperature: 1.0,
            stop_token: None,
        }
    }
}

/// A sampled continuation with its per-token log-probabilities under the
/// sampling-time model at temperature 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
}

impl Sample {
    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// Autoregressive categorical sampling continuing `prompt`.
///
/// The recorded log-probabilities are those of the untempered model, which is
/// what the importance ratio compares against.
pub fn sample<R: Rng + ?Sized>(
    model: &ToyPolicy,
    prompt: &[TokenId],
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<Sample> {
    if opts.max_len == 0 {
        return Err(arg("max_len must be at least 1"));
    }
    if !(opts.temperature >= 0.0) || !opts.temperature.is_finite() {
        return Err(arg("temperature must be finite and non-negative"));
    }
    model.check_tokens(prompt)?;
    let mut history = prompt.to_vec();
    let mut out = Sample {
        tokens: Vec::with_capacity(opts.max_len),
        logprobs: Vec::with_capacity(opts.max_len),
    };
    for _ in 0..opts.max_len {
        let ctx = model.context_of(&history);
        let lps = model.log_probs(ctx);
        let tok = if opts.temperature == 0.0 {
            argmax_lowest(model.row(ctx))
        } else {
            let scaled: Vec<f64> = model.row(ctx).iter().map(|x| x / opts.temperature).collect();
            let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
            categorical(&probs, rng.random::<f64>())
        };
        out.tokens.push(tok as TokenId);
        out.logprobs.push(lps[tok]);
        history.push(tok as TokenId);
        if opts.stop_token == Some(tok as TokenId) {
            break;
        }
    }
    Ok(out)
}

/// `sample` with a fresh generator seeded from `seed`.
pub fn sample_seeded(model: &ToyPolicy, prompt: &[TokenId], opts: &SampleOptions, seed: u64) -> Result<Sample> {
    sample(model, prompt, opts, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum; take the last positive entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub adam: AdamConfig,
}

impl OptimizerState {
    pub fn new(model: &ToyPolicy) -> Self {
        OptimizerState {
            step: 0,
            m: vec![0.0; model.logits.len()],
            v: vec![0.0; model.logits.len()],
            adam: AdamConfig::default(),
        }
    }
}

/// Rescales `grad` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut GradientTable, max_norm: f64) -> f64 {
    let n = grad.norm();
    if max_norm > 0.0 && n > max_norm {
        grad.scale(max_norm / n);
    }
    n
}

/// One AdamW step descending `grad` (a loss gradient), with global-norm
/// clipping applied first and weight decay decoupled from the moments.
pub fn apply_update(
    model: &mut ToyPolicy,
    grad: &GradientTable,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    clip_norm: f64,
) -> Result<()> {
    let n = model.logits.len();
    if grad.data.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(arg(format!(
            "shape mismatch: model {n}, grad {}, state {}/{}",
            grad.data.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let mut g = grad.clone();
    clip_grad_norm(&mut g, clip_norm);

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.adam;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..n {
        let gi = g.data[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * gi;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * gi * gi;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let theta = &mut model.logits[i];
        *theta -= lr * weight_decay * *theta;
        *theta -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Linear warmup over `warmup_ratio * total_steps` steps, then cosine decay to zero.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warmup = (warmup_ratio * total).max(0.0);
    if step < warmup {
        return base_lr * step / warmup;
    }
    let span = total - warmup;
    if span <= 0.0 {
        return base_lr;
    }
    let progress = (step - warmup) / span;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Serialized model plus optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub vocab_size: usize,
    pub order: usize,
    pub logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer_state: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(model: &ToyPolicy, optimizer_state: Option<OptimizerState>) -> Self {
        Checkpoint {
            vocab_size: model.vocab_size,
            order: model.order,
            logits: model.logits.clone(),
            optimizer_state,
        }
    }

    pub fn policy(&self) -> Result<ToyPolicy> {
        ToyPolicy::from_logits(self.vocab_size, self.order, self.logits.clone())
    }
}
