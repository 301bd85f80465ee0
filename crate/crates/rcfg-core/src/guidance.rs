//! Reward-weighted classifier-free guidance: draw a set of property
//! vectors, weight their conditional-vs-unconditional log-ratios by
//! standardized advantages, restrict to the unconditional nucleus, and
//! sample at temperature.

use crate::corpus::{ConditionKey, PropertyPool};
use crate::domain::{Prefix, PropertyVector, Sequence, Token, PROPERTY_NAMES, VOCAB};
use crate::error::{Error, Result};
use crate::model::{softmax, ConditionalModel, TokenDist};
use crate::reward::{evaluate_reward, standardize, RewardFunction, StandardizedAdvantages};
use rand::seq::IndexedRandom;
use rand::Rng;

/// Inference-time guidance knobs. The guidance set is redrawn once per
/// generated sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub set_size: usize,
    pub nucleus_p: f64,
    pub temperature: f64,
}

impl Default for GuidanceConfig {
    fn default() -> GuidanceConfig {
        GuidanceConfig {
            gamma: 2.0,
            set_size: 8,
            nucleus_p: 0.95,
            temperature: 0.7,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Guidance("gamma must be >= 0".into()));
        }
        if self.set_size < 1 {
            return Err(Error::Guidance("set_size must be >= 1".into()));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::Guidance("nucleus_p must be in (0, 1]".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Guidance("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// A drawn guidance set: members, their rewards, standardized advantages,
/// and the condition keys projecting each member onto the properties the
/// reward depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSet {
    pub members: Vec<PropertyVector>,
    pub rewards: Vec<f64>,
    pub advantages: StandardizedAdvantages,
    pub keys: Vec<ConditionKey>,
}

/// Samples `size` members i.i.d. with replacement from the pool, projects
/// them onto `r.depends_on`, and standardizes their rewards.
pub fn draw_guidance_set<R: Rng>(
    pool: &PropertyPool,
    r: &RewardFunction,
    size: usize,
    rng: &mut R,
) -> Result<GuidanceSet> {
    if size < 1 {
        return Err(Error::Guidance("guidance set size must be >= 1".into()));
    }
    if pool.items().is_empty() {
        return Err(Error::Guidance("property pool is empty".into()));
    }
    let depends: Vec<&str> = r.depends_on.iter().map(|s| s.as_str()).collect();
    let mut members = Vec::with_capacity(size);
    let mut rewards = Vec::with_capacity(size);
    let mut keys = Vec::with_capacity(size);
    for _ in 0..size {
        let y = *pool.items().choose(rng).expect("pool nonempty");
        rewards.push(evaluate_reward(r, &y, pool)?);
        keys.push(ConditionKey::from_properties(&y, &depends)?);
        members.push(y);
    }
    let advantages = standardize(&rewards)?;
    Ok(GuidanceSet {
        members,
        rewards,
        advantages,
        keys,
    })
}

/// Guided logits: unconditional log-probs plus `gamma / |Y_S|` times the
/// advantage-weighted sum of conditional-minus-unconditional log-prob
/// differences, per token. At the forced-EOS position the unconditional
/// log-probs are returned unchanged.
pub fn rcfg_logits(
    model: &ConditionalModel,
    prefix: &Prefix,
    gs: &GuidanceSet,
    gamma: f64,
) -> [f64; VOCAB] {
    let lu = model
        .next_token_dist(&ConditionKey::empty(), prefix)
        .log_probs();
    if prefix.len() >= model.config.l_max {
        return lu;
    }
    let mut delta = [0.0; VOCAB];
    for (key, a) in gs.keys.iter().zip(gs.advantages.values.iter()) {
        let lc = model.next_token_dist(key, prefix).log_probs();
        for i in 0..VOCAB {
            delta[i] += a * (lc[i] - lu[i]);
        }
    }
    let scale = gamma / gs.keys.len() as f64;
    let mut logits = lu;
    for i in 0..VOCAB {
        logits[i] += scale * delta[i];
    }
    logits
}

/// Guided logits with explicit probability weights over full property
/// vectors instead of a sampled set: unconditional log-probs plus `gamma`
/// times the weighted sum of conditional-minus-unconditional log-ratios,
/// conditioning on all four properties. This is the exact-prior weighting
/// the one-step tilt comparison uses.
pub fn rcfg_logits_exact_prior(
    model: &ConditionalModel,
    prefix: &Prefix,
    weights: &[(PropertyVector, f64)],
    gamma: f64,
) -> Result<[f64; VOCAB]> {
    let lu = model
        .next_token_dist(&ConditionKey::empty(), prefix)
        .log_probs();
    if prefix.len() >= model.config.l_max {
        return Ok(lu);
    }
    let mut delta = [0.0; VOCAB];
    for (y, w) in weights {
        if *w == 0.0 {
            continue;
        }
        let key = ConditionKey::from_properties(y, &PROPERTY_NAMES)?;
        let lc = model.next_token_dist(&key, prefix).log_probs();
        for i in 0..VOCAB {
            delta[i] += w * (lc[i] - lu[i]);
        }
    }
    let mut logits = lu;
    for i in 0..VOCAB {
        logits[i] += gamma * delta[i];
    }
    Ok(logits)
}

/// Deliberately broken guided logits with the guidance term's sign
/// flipped. Kept as a tripwire: the self-test runs it through the
/// tilt-correlation check to confirm that check can actually fail while
/// the gamma=0 identity still passes.
#[doc(hidden)]
pub fn rcfg_logits_sign_flip_fixture(
    model: &ConditionalModel,
    prefix: &Prefix,
    gs: &GuidanceSet,
    gamma: f64,
) -> [f64; VOCAB] {
    rcfg_logits(model, prefix, gs, -gamma)
}

/// Smallest token set, in descending-probability order (ties broken by
/// ascending token id), whose cumulative probability reaches `p`. Never
/// empty.
pub fn nucleus_mask(uncond: &TokenDist, p: f64) -> [bool; VOCAB] {
    let mut order: Vec<usize> = (0..VOCAB).collect();
    order.sort_by(|&a, &b| {
        uncond.probs[b]
            .total_cmp(&uncond.probs[a])
            .then(a.cmp(&b))
    });
    let mut mask = [false; VOCAB];
    let mut cum = 0.0;
    for i in order {
        mask[i] = true;
        cum += uncond.probs[i];
        if cum >= p {
            break;
        }
    }
    mask
}

/// Guided logits after the nucleus restriction: tokens outside the
/// unconditional nucleus are set to negative infinity. Untempered.
pub fn masked_rcfg_logits(
    model: &ConditionalModel,
    prefix: &Prefix,
    gs: &GuidanceSet,
    gamma: f64,
    nucleus_p: f64,
) -> [f64; VOCAB] {
    let uncond = model.next_token_dist(&ConditionKey::empty(), prefix);
    let mask = nucleus_mask(&uncond, nucleus_p);
    let mut logits = rcfg_logits(model, prefix, gs, gamma);
    for i in 0..VOCAB {
        if !mask[i] {
            logits[i] = f64::NEG_INFINITY;
        }
    }
    logits
}

/// One guided decoding step: nucleus-masked guided logits divided by the
/// temperature, renormalized.
pub fn guided_step_dist(
    model: &ConditionalModel,
    prefix: &Prefix,
    gs: &GuidanceSet,
    cfg: &GuidanceConfig,
) -> TokenDist {
    let mut logits = masked_rcfg_logits(model, prefix, gs, cfg.gamma, cfg.nucleus_p);
    for l in &mut logits {
        *l /= cfg.temperature;
    }
    softmax(&logits)
}

/// Samples one sequence under guidance, drawing a fresh guidance set
/// first. EOS is forced once the prefix reaches l_max.
pub fn rcfg_sample<R: Rng>(
    model: &ConditionalModel,
    r: &RewardFunction,
    pool: &PropertyPool,
    cfg: &GuidanceConfig,
    rng: &mut R,
) -> Result<(Sequence, GuidanceSet)> {
    cfg.validate()?;
    let gs = draw_guidance_set(pool, r, cfg.set_size, rng)?;
    let mut prefix = Prefix::empty();
    loop {
        if prefix.len() >= model.config.l_max {
            return Ok((prefix.complete(), gs));
        }
        let tok = guided_step_dist(model, &prefix, &gs, cfg).sample(rng);
        if tok == Token::Eos {
            return Ok((prefix.complete(), gs));
        }
        prefix = prefix.push(tok)?;
    }
}
