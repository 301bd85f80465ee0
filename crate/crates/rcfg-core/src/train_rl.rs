//! Desk-scale RL: a tabular softmax policy over base-model contexts,
//! trained with vanilla policy gradient on batch-standardized advantages
//! plus entropy and KL-to-base regularization; best-of-N baseline.

use crate::corpus::{ConditionKey, PropertyPool};
use crate::domain::{Prefix, Sequence, Token, VOCAB};
use crate::error::{Error, Result};
use crate::model::{context_code, softmax, ConditionalModel, TokenDist, TokenPolicy};
use crate::oracle::{exact_policy_value, sequence_reward};
use crate::reward::{normalize_score, optimal_y, standardize, RewardFunction};
use rand::Rng;
use std::collections::HashMap;
use std::io::{BufRead, Write};

/// Tabular softmax policy over the base model's context codes. Contexts
/// are instantiated lazily at the log of the base unconditional
/// distribution, so an untouched policy reproduces the base model.
#[derive(Debug, Clone)]
pub struct SoftmaxPolicy<'a> {
    theta: HashMap<u32, [f64; VOCAB]>,
    base: &'a ConditionalModel,
}

impl<'a> SoftmaxPolicy<'a> {
    pub fn new(base: &'a ConditionalModel) -> SoftmaxPolicy<'a> {
        SoftmaxPolicy {
            theta: HashMap::new(),
            base,
        }
    }

    pub fn base(&self) -> &'a ConditionalModel {
        self.base
    }

    pub fn context_code_of(&self, prefix: &Prefix) -> u32 {
        context_code(prefix.tokens(), self.base.config.context_len)
    }

    /// Base unconditional log-probs for the context of `prefix`; also the
    /// lazy initialization value of theta.
    fn base_log_probs(&self, prefix: &Prefix) -> [f64; VOCAB] {
        self.base
            .next_token_dist(&ConditionKey::empty(), prefix)
            .log_probs()
    }

    /// Current logits at `prefix` (stored or lazily-derived).
    pub fn logits(&self, prefix: &Prefix) -> [f64; VOCAB] {
        let code = self.context_code_of(prefix);
        self.theta
            .get(&code)
            .copied()
            .unwrap_or_else(|| self.base_log_probs(prefix))
    }

    fn logits_mut(&mut self, prefix: &Prefix) -> &mut [f64; VOCAB] {
        let code = self.context_code_of(prefix);
        let init = self.base_log_probs(prefix);
        self.theta.entry(code).or_insert(init)
    }

    /// Additively perturbs one stored logit (instantiating the context);
    /// the finite-difference checks use this.
    pub fn nudge(&mut self, prefix: &Prefix, token: Token, delta: f64) {
        self.logits_mut(prefix)[token.id()] += delta;
    }

    pub(crate) fn theta_mut(&mut self, code: u32) -> Option<&mut [f64; VOCAB]> {
        self.theta.get_mut(&code)
    }

    pub fn instantiated_contexts(&self) -> usize {
        self.theta.len()
    }

    pub fn all_logits_finite(&self) -> bool {
        self.theta.values().all(|l| l.iter().all(|x| x.is_finite()))
    }

    /// Samples one complete sequence at the given temperature, forcing EOS
    /// at l_max.
    pub fn sample_sequence<R: Rng>(&self, temperature: f64, rng: &mut R) -> Result<Sequence> {
        if !(temperature > 0.0) {
            return Err(Error::TrainRl("temperature must be > 0".into()));
        }
        let mut prefix = Prefix::empty();
        loop {
            if prefix.len() >= self.base.config.l_max {
                return Ok(prefix.complete());
            }
            let tok = self.next_dist(&prefix).tempered(temperature).sample(rng);
            if tok == Token::Eos {
                return Ok(prefix.complete());
            }
            prefix = prefix.push(tok)?;
        }
    }

    /// Deterministic text serialization of the instantiated contexts.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "policy v1")?;
        writeln!(w, "context_len {}", self.base.config.context_len)?;
        let mut codes: Vec<u32> = self.theta.keys().copied().collect();
        codes.sort_unstable();
        for code in codes {
            let l = &self.theta[&code];
            writeln!(w, "{code} {:?} {:?} {:?} {:?} {:?}", l[0], l[1], l[2], l[3], l[4])?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R, base: &'a ConditionalModel) -> Result<SoftmaxPolicy<'a>> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header != "policy v1" {
            return Err(Error::Parse(format!("bad policy header {header:?}")));
        }
        let ctx_line = lines.next().transpose()?.unwrap_or_default();
        let ctx: usize = ctx_line
            .strip_prefix("context_len ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad context_len line {ctx_line:?}")))?;
        if ctx != base.config.context_len {
            return Err(Error::TrainRl(format!(
                "policy context_len {ctx} does not match base model {}",
                base.config.context_len
            )));
        }
        let mut theta = HashMap::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 1 + VOCAB {
                return Err(Error::Parse(format!("bad policy line {line:?}")));
            }
            let code: u32 = f[0].parse().map_err(|_| Error::Parse(line.clone()))?;
            let mut l = [0.0; VOCAB];
            for i in 0..VOCAB {
                l[i] = f[1 + i].parse().map_err(|_| Error::Parse(line.clone()))?;
            }
            theta.insert(code, l);
        }
        Ok(SoftmaxPolicy { theta, base })
    }
}

impl TokenPolicy for SoftmaxPolicy<'_> {
    fn next_dist(&self, prefix: &Prefix) -> TokenDist {
        if prefix.len() >= self.base.config.l_max {
            return TokenDist::point_mass(Token::Eos);
        }
        softmax(&self.logits(prefix))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RLConfig {
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub kl_coef: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub temperature: f64,
    pub invalid_penalty: f64,
    /// Serialize the policy every this many steps (0 = final only).
    pub checkpoint_interval: usize,
}

impl Default for RLConfig {
    fn default() -> RLConfig {
        RLConfig {
            learning_rate: 0.05,
            entropy_coef: 0.01,
            kl_coef: 0.01,
            batch_size: 84,
            steps: 500,
            temperature: 0.7,
            invalid_penalty: crate::oracle::INVALID_REWARD,
            checkpoint_interval: 0,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::TrainRl(
                "batch_size must be >= 2 (advantage standardization needs variance)".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::TrainRl("learning_rate and temperature must be > 0".into()));
        }
        if self.entropy_coef < 0.0 || self.kl_coef < 0.0 {
            return Err(Error::TrainRl("regularizer coefficients must be >= 0".into()));
        }
        Ok(())
    }
}

/// Samples `n` sequences at `temperature` and scores them (invalid ones
/// get the invalid penalty, which equals the oracle's convention).
pub fn rollout_batch<R: Rng>(
    policy: &SoftmaxPolicy,
    n: usize,
    temperature: f64,
    r: &RewardFunction,
    pool: &PropertyPool,
    rng: &mut R,
) -> Result<Vec<(Sequence, f64)>> {
    let mut batch = Vec::with_capacity(n);
    for _ in 0..n {
        let seq = policy.sample_sequence(temperature, rng)?;
        let reward = sequence_reward(&seq, r, pool)?;
        batch.push((seq, reward));
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub mean_reward: f64,
    pub mean_entropy: f64,
    pub mean_kl_to_base: f64,
    pub validity: f64,
}

/// Entropy of `p` and forward KL of `p` against `b`, plus their gradients
/// with respect to the logits behind `p`.
fn reg_terms(p: &[f64; VOCAB], b: &[f64; VOCAB]) -> (f64, f64, [f64; VOCAB], [f64; VOCAB]) {
    let mut h = 0.0;
    let mut kl = 0.0;
    for i in 0..VOCAB {
        if p[i] > 0.0 {
            h -= p[i] * p[i].ln();
            kl += p[i] * (p[i].ln() - b[i].ln());
        }
    }
    let mut dh = [0.0; VOCAB];
    let mut dkl = [0.0; VOCAB];
    for i in 0..VOCAB {
        if p[i] > 0.0 {
            dh[i] = -p[i] * (p[i].ln() + h);
            dkl[i] = p[i] * ((p[i].ln() - b[i].ln()) - kl);
        }
    }
    (h, kl, dh, dkl)
}

/// The scalar objective the gradient step ascends, recomputable for
/// finite-difference verification: batch mean over sequences of
/// advantage-weighted log-likelihood at the sampling temperature, plus
/// entropy bonus and KL-to-base penalty at every visited context.
pub fn surrogate_objective(
    policy: &SoftmaxPolicy,
    batch: &[(Sequence, f64)],
    advantages: &[f64],
    cfg: &RLConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for ((seq, _), adv) in batch.iter().zip(advantages) {
        let mut prefix = Prefix::empty();
        for &tok in seq.tokens() {
            if prefix.len() >= policy.base.config.l_max {
                break; // forced EOS carries no trainable mass
            }
            let logits = policy.logits(&prefix);
            let q = softmax(&logits.map(|l| l / cfg.temperature));
            let p = softmax(&logits);
            let b = softmax(&policy.base_log_probs(&prefix));
            let (h, kl, _, _) = reg_terms(&p.probs, &b.probs);
            total += adv * q.probs[tok.id()].ln() + cfg.entropy_coef * h - cfg.kl_coef * kl;
            if tok == Token::Eos {
                break;
            }
            prefix = prefix.push(tok)?;
        }
    }
    Ok(total / batch.len() as f64)
}

/// Analytic gradient of [`surrogate_objective`] with respect to the
/// policy logits, keyed by context code.
pub fn surrogate_gradient(
    policy: &SoftmaxPolicy,
    batch: &[(Sequence, f64)],
    advantages: &[f64],
    cfg: &RLConfig,
) -> Result<HashMap<u32, [f64; VOCAB]>> {
    let mut grad: HashMap<u32, [f64; VOCAB]> = HashMap::new();
    let n = batch.len() as f64;
    for ((seq, _), adv) in batch.iter().zip(advantages) {
        let mut prefix = Prefix::empty();
        for &tok in seq.tokens() {
            if prefix.len() >= policy.base.config.l_max {
                break;
            }
            let code = policy.context_code_of(&prefix);
            let logits = policy.logits(&prefix);
            let q = softmax(&logits.map(|l| l / cfg.temperature));
            let p = softmax(&logits);
            let b = softmax(&policy.base_log_probs(&prefix));
            let (_, _, dh, dkl) = reg_terms(&p.probs, &b.probs);
            let g = grad.entry(code).or_insert([0.0; VOCAB]);
            for i in 0..VOCAB {
                let score = ((i == tok.id()) as u8 as f64 - q.probs[i]) / cfg.temperature;
                g[i] += (adv * score + cfg.entropy_coef * dh[i] - cfg.kl_coef * dkl[i]) / n;
            }
            if tok == Token::Eos {
                break;
            }
            prefix = prefix.push(tok)?;
        }
    }
    Ok(grad)
}

/// One ascent step on the batch: standardize rewards into advantages,
/// accumulate the analytic gradient, update theta in place. Returns batch
/// statistics measured before the update.
pub fn policy_gradient_step(
    policy: &mut SoftmaxPolicy,
    batch: &[(Sequence, f64)],
    cfg: &RLConfig,
) -> Result<StepStats> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::TrainRl("empty batch".into()));
    }
    let rewards: Vec<f64> = batch.iter().map(|(_, r)| *r).collect();
    let advantages = standardize(&rewards)?.values;
    let stats = batch_stats(policy, batch, cfg)?;
    let grad = surrogate_gradient(policy, batch, &advantages, cfg)?;
    // Materialize every visited context at its lazy init before updating.
    for (seq, _) in batch {
        let mut prefix = Prefix::empty();
        for &tok in seq.tokens() {
            if prefix.len() >= policy.base.config.l_max {
                break;
            }
            policy.logits_mut(&prefix);
            if tok == Token::Eos {
                break;
            }
            prefix = prefix.push(tok)?;
        }
    }
    for (code, g) in grad {
        let l = policy
            .theta
            .get_mut(&code)
            .expect("visited contexts were materialized above");
        for i in 0..VOCAB {
            l[i] += cfg.learning_rate * g[i];
        }
    }
    Ok(stats)
}

/// Mean reward / validity and exact per-visited-context entropy and
/// KL-to-base over a batch.
pub fn batch_stats(
    policy: &SoftmaxPolicy,
    batch: &[(Sequence, f64)],
    cfg: &RLConfig,
) -> Result<StepStats> {
    let n = batch.len() as f64;
    let mean_reward = batch.iter().map(|(_, r)| r).sum::<f64>() / n;
    let validity = batch
        .iter()
        .filter(|(s, _)| crate::domain::validate(s).is_valid())
        .count() as f64
        / n;
    let mut h_total = 0.0;
    let mut kl_total = 0.0;
    let mut positions = 0usize;
    for (seq, _) in batch {
        let mut prefix = Prefix::empty();
        for &tok in seq.tokens() {
            if prefix.len() >= policy.base.config.l_max {
                break;
            }
            let p = policy.next_dist(&prefix);
            let b = softmax(&policy.base_log_probs(&prefix));
            let (h, kl, _, _) = reg_terms(&p.probs, &b.probs);
            h_total += h;
            kl_total += kl;
            positions += 1;
            if tok == Token::Eos {
                break;
            }
            prefix = prefix.push(tok)?;
        }
    }
    let _ = cfg;
    Ok(StepStats {
        mean_reward,
        mean_entropy: h_total / positions.max(1) as f64,
        mean_kl_to_base: kl_total / positions.max(1) as f64,
        validity,
    })
}

/// Draws `n` sequences from `sampler` and returns the reward-argmax; ties
/// break toward the earliest draw.
pub fn best_of_n<R: Rng, F>(
    mut sampler: F,
    r: &RewardFunction,
    pool: &PropertyPool,
    n: usize,
    rng: &mut R,
) -> Result<(Sequence, f64)>
where
    F: FnMut(&mut R) -> Result<Sequence>,
{
    if n < 1 {
        return Err(Error::TrainRl("best-of-n needs n >= 1".into()));
    }
    let mut best: Option<(Sequence, f64)> = None;
    for _ in 0..n {
        let seq = sampler(rng)?;
        let reward = sequence_reward(&seq, r, pool)?;
        match &best {
            Some((_, br)) if reward <= *br => {}
            _ => best = Some((seq, reward)),
        }
    }
    Ok(best.expect("n >= 1"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub mean_reward: f64,
    pub norm_reward: f64,
    pub validity: f64,
    pub entropy: f64,
    pub kl_to_base: f64,
}

#[derive(Debug, Clone)]
pub struct RLTrace {
    pub rows: Vec<TraceRow>,
    /// Serialized policy text at each checkpoint step.
    pub checkpoints: Vec<(usize, String)>,
    /// Exact base-policy value used as the normalization zero point.
    pub baseline: f64,
    /// Optimal realized reward used as the normalization one point.
    pub r_star: f64,
}

pub fn trace_csv_header() -> &'static str {
    "step,mean_reward,norm_reward,validity,entropy,kl_to_base"
}

pub fn trace_row_csv(row: &TraceRow) -> String {
    format!(
        "{},{:?},{:?},{:?},{:?},{:?}",
        row.step, row.mean_reward, row.norm_reward, row.validity, row.entropy, row.kl_to_base
    )
}

fn checkpoint_text(policy: &SoftmaxPolicy) -> Result<String> {
    let mut buf = Vec::new();
    policy.write_to(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::TrainRl(e.to_string()))
}

/// RL from a caller-supplied starting policy; `run_rl` passes the fresh
/// base-initialized one. Row 0 evaluates the starting policy without an
/// update; rows 1..=steps record pre-update batch statistics.
pub fn run_rl_from<'a>(
    mut policy: SoftmaxPolicy<'a>,
    r: &RewardFunction,
    pool: &PropertyPool,
    cfg: &RLConfig,
    seed: u64,
) -> Result<(RLTrace, SoftmaxPolicy<'a>)> {
    cfg.validate()?;
    // Normalization zero point: the exact value of what base sampling at
    // this temperature actually draws from.
    let base_policy = crate::model::TemperedPolicy {
        inner: crate::model::KeyedPolicy {
            model: policy.base,
            key: ConditionKey::empty(),
        },
        temperature: cfg.temperature,
    };
    let baseline = exact_policy_value(&base_policy, r, pool)?;
    let (_, r_star) = optimal_y(r, pool)?;
    let mut rng = crate::rng::scoped("rl-rollouts", seed);
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    let mut checkpoints = Vec::new();

    let eval_batch = rollout_batch(&policy, cfg.batch_size, cfg.temperature, r, pool, &mut rng)?;
    let stats = batch_stats(&policy, &eval_batch, cfg)?;
    rows.push(stats_row(0, &stats, baseline, r_star)?);

    for step in 1..=cfg.steps {
        let batch = rollout_batch(&policy, cfg.batch_size, cfg.temperature, r, pool, &mut rng)?;
        let stats = policy_gradient_step(&mut policy, &batch, cfg)?;
        if !policy.all_logits_finite() {
            return Err(Error::TrainRl(format!(
                "divergence: non-finite policy logits after step {step}"
            )));
        }
        rows.push(stats_row(step, &stats, baseline, r_star)?);
        if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
            checkpoints.push((step, checkpoint_text(&policy)?));
        }
    }
    checkpoints.push((cfg.steps, checkpoint_text(&policy)?));
    Ok((
        RLTrace {
            rows,
            checkpoints,
            baseline,
            r_star,
        },
        policy,
    ))
}

fn stats_row(step: usize, stats: &StepStats, baseline: f64, r_star: f64) -> Result<TraceRow> {
    Ok(TraceRow {
        step,
        mean_reward: stats.mean_reward,
        norm_reward: normalize_score(stats.mean_reward, baseline, r_star)?,
        validity: stats.validity,
        entropy: stats.mean_entropy,
        kl_to_base: stats.mean_kl_to_base,
    })
}

/// RL from the base-initialized policy.
pub fn run_rl<'a>(
    base: &'a ConditionalModel,
    r: &RewardFunction,
    pool: &PropertyPool,
    cfg: &RLConfig,
    seed: u64,
) -> Result<(RLTrace, SoftmaxPolicy<'a>)> {
    run_rl_from(SoftmaxPolicy::new(base), r, pool, cfg, seed)
}
