//! Brute-force ground truth over the enumerable language: exact Q values,
//! the Bayes decomposition of Q into prior-weighted importance ratios, the
//! exact Q-tilted one-step policy, Jensen-gap reports for the log-ratio
//! guidance vector, and exact expected reward of any policy.

use crate::corpus::{ConditionKey, PropertyPool};
use crate::domain::{
    extract_properties, validate, Prefix, PropertyVector, Sequence, Token, L_MAX, PROPERTY_NAMES,
    VOCAB,
};
use crate::error::{Error, Result};
use crate::model::{ConditionalModel, TokenDist, TokenPolicy};
use crate::reward::{evaluate_reward, RewardFunction};
use rand::Rng;
use std::collections::BTreeMap;

/// Reward assigned to invalid complete sequences.
pub const INVALID_REWARD: f64 = -1.0;

/// Offset added when shifting nonpositive Q values before tilting.
pub const TILT_SHIFT_DELTA: f64 = 1e-6;

/// Reward of a complete sequence: the reward function on its properties
/// when valid, [`INVALID_REWARD`] otherwise.
pub fn sequence_reward(seq: &Sequence, r: &RewardFunction, pool: &PropertyPool) -> Result<f64> {
    if validate(seq).is_valid() {
        evaluate_reward(r, &extract_properties(seq)?, pool)
    } else {
        Ok(INVALID_REWARD)
    }
}

/// Outcome space for the Bayes decomposition: a realized property vector,
/// or the invalid pseudo-outcome carrying reward -1. Folding invalid mass
/// into y-space keeps the outcome weights a probability distribution.
pub type Outcome = Option<PropertyVector>;

fn outcome_reward(outcome: &Outcome, r: &RewardFunction, pool: &PropertyPool) -> Result<f64> {
    match outcome {
        Some(y) => evaluate_reward(r, y, pool),
        None => Ok(INVALID_REWARD),
    }
}

fn outcome_of(seq: &Sequence) -> Outcome {
    if validate(seq).is_valid() {
        Some(extract_properties(seq).expect("valid"))
    } else {
        None
    }
}

/// Expected reward of completing `prefix` with `policy`, exact by
/// enumeration of the full completion tree.
pub fn completion_value<P: TokenPolicy>(
    policy: &P,
    prefix: &Prefix,
    r: &RewardFunction,
    pool: &PropertyPool,
) -> Result<f64> {
    if prefix.len() >= L_MAX {
        return sequence_reward(&prefix.complete(), r, pool);
    }
    let dist = policy.next_dist(prefix);
    let mut value = 0.0;
    for tok in Token::ALL {
        let p = dist.probs[tok.id()];
        if p == 0.0 {
            continue;
        }
        let v = if tok == Token::Eos {
            sequence_reward(&prefix.complete(), r, pool)?
        } else {
            completion_value(policy, &prefix.push(tok)?, r, pool)?
        };
        value += p * v;
    }
    Ok(value)
}

/// Eq-style Q: expected reward after emitting `token` from `prefix` and
/// continuing with `policy`.
pub fn exact_q<P: TokenPolicy>(
    policy: &P,
    prefix: &Prefix,
    token: Token,
    r: &RewardFunction,
    pool: &PropertyPool,
) -> Result<f64> {
    if token == Token::Eos {
        return sequence_reward(&prefix.complete(), r, pool);
    }
    if prefix.len() >= L_MAX {
        return Err(Error::Oracle(format!(
            "prefix of length {} cannot be extended",
            prefix.len()
        )));
    }
    completion_value(policy, &prefix.push(token)?, r, pool)
}

/// Exact outcome masses under `policy` conditional on `prefix`:
/// `joint[(token, outcome)]` and `marginal[outcome]`, both normalized.
pub struct OutcomeMasses {
    pub joint: BTreeMap<(Token, Outcome), f64>,
    pub marginal: BTreeMap<Outcome, f64>,
}

pub fn outcome_masses<P: TokenPolicy>(policy: &P, prefix: &Prefix) -> Result<OutcomeMasses> {
    let mut joint: BTreeMap<(Token, Outcome), f64> = BTreeMap::new();

    fn walk<P: TokenPolicy>(
        policy: &P,
        prefix: &Prefix,
        first: Token,
        mass: f64,
        joint: &mut BTreeMap<(Token, Outcome), f64>,
    ) -> Result<()> {
        if prefix.len() >= L_MAX {
            *joint.entry((first, outcome_of(&prefix.complete()))).or_insert(0.0) += mass;
            return Ok(());
        }
        let dist = policy.next_dist(prefix);
        for tok in Token::ALL {
            let p = dist.probs[tok.id()];
            if p == 0.0 {
                continue;
            }
            if tok == Token::Eos {
                *joint.entry((first, outcome_of(&prefix.complete()))).or_insert(0.0) += mass * p;
            } else {
                walk(policy, &prefix.push(tok)?, first, mass * p, joint)?;
            }
        }
        Ok(())
    }

    if prefix.len() >= L_MAX {
        joint.insert((Token::Eos, outcome_of(&prefix.complete())), 1.0);
    } else {
        let dist = policy.next_dist(prefix);
        for tok in Token::ALL {
            let p = dist.probs[tok.id()];
            if p == 0.0 {
                continue;
            }
            if tok == Token::Eos {
                *joint.entry((tok, outcome_of(&prefix.complete()))).or_insert(0.0) += p;
            } else {
                walk(policy, &prefix.push(tok)?, tok, p, &mut joint)?;
            }
        }
    }

    let mut marginal: BTreeMap<Outcome, f64> = BTreeMap::new();
    for ((_, outcome), mass) in &joint {
        *marginal.entry(outcome.clone()).or_insert(0.0) += mass;
    }
    Ok(OutcomeMasses { joint, marginal })
}

/// Side-by-side Q values from the direct definition and from the Bayes
/// decomposition into prior-weighted importance ratios.
#[derive(Debug, Clone, Copy)]
pub struct QReport {
    pub q_direct: f64,
    pub q_bayes: f64,
    pub residual: f64,
}

/// Q via the Bayes route: sum over outcomes of
/// `r(y) * pi(y | prefix) * pi(token | y, prefix) / pi(token | prefix)`,
/// with every factor computed by exact enumeration under `policy`. The
/// summation path differs from [`exact_q`] (grouped by outcome instead of
/// by completion), which is what makes the identity a real check.
pub fn bayes_q<P: TokenPolicy>(
    policy: &P,
    prefix: &Prefix,
    token: Token,
    r: &RewardFunction,
    pool: &PropertyPool,
) -> Result<f64> {
    let masses = outcome_masses(policy, prefix)?;
    let p_token = if prefix.len() >= L_MAX {
        if token == Token::Eos {
            1.0
        } else {
            return Err(Error::Oracle("no non-EOS token at l_max".into()));
        }
    } else {
        policy.next_dist(prefix).probs[token.id()]
    };
    if p_token == 0.0 {
        return Err(Error::Oracle("token has zero probability under policy".into()));
    }
    let mut q = 0.0;
    for (outcome, prior) in &masses.marginal {
        let joint = masses.joint.get(&(token, outcome.clone())).copied().unwrap_or(0.0);
        // pi(token | y, prefix) = joint / prior; the prior cancels:
        // r(y) * prior * (joint/prior) / p_token = r(y) * joint / p_token.
        let cond = joint / prior;
        q += outcome_reward(outcome, r, pool)? * prior * cond / p_token;
    }
    Ok(q)
}

pub fn q_report<P: TokenPolicy>(
    policy: &P,
    prefix: &Prefix,
    token: Token,
    r: &RewardFunction,
    pool: &PropertyPool,
) -> Result<QReport> {
    let q_direct = exact_q(policy, prefix, token, r, pool)?;
    let q_bayes = bayes_q(policy, prefix, token, r, pool)?;
    Ok(QReport {
        q_direct,
        q_bayes,
        residual: (q_direct - q_bayes).abs(),
    })
}

/// One-step exact tilt: normalized `pi(token) * Q(token)^gamma`. Q values
/// are shifted by `-min(Q) + delta` when any is nonpositive; the applied
/// shift is returned (0 when none was needed).
pub fn exact_tilt_dist<P: TokenPolicy>(
    policy: &P,
    prefix: &Prefix,
    r: &RewardFunction,
    pool: &PropertyPool,
    gamma: f64,
) -> Result<(TokenDist, f64)> {
    let q = q_per_token(policy, prefix, r, pool)?;
    tilt_from_q(&policy.next_dist(prefix), &q, gamma)
}

/// Q value for every candidate token at `prefix`.
pub fn q_per_token<P: TokenPolicy>(
    policy: &P,
    prefix: &Prefix,
    r: &RewardFunction,
    pool: &PropertyPool,
) -> Result<[f64; VOCAB]> {
    let mut q = [0.0; VOCAB];
    for tok in Token::ALL {
        q[tok.id()] = exact_q(policy, prefix, tok, r, pool)?;
    }
    Ok(q)
}

/// Tilt with an explicit Q vector; shared by the gamma-sweep checks so one
/// shift applies across all gamma values.
pub fn tilt_from_q(base: &TokenDist, q: &[f64; VOCAB], gamma: f64) -> Result<(TokenDist, f64)> {
    let q_min = q.iter().cloned().fold(f64::INFINITY, f64::min);
    let shift = if q_min <= 0.0 { -q_min + TILT_SHIFT_DELTA } else { 0.0 };
    let mut w = [0.0; VOCAB];
    let mut total = 0.0;
    for i in 0..VOCAB {
        w[i] = base.probs[i] * (q[i] + shift).powf(gamma);
        total += w[i];
    }
    if !(total > 0.0) {
        return Err(Error::Oracle("tilt normalizer vanished".into()));
    }
    for x in &mut w {
        *x /= total;
    }
    Ok((TokenDist { probs: w }, shift))
}

/// Both sides of the Jensen comparison between the weighted log-ratio sum
/// and the log of the weighted ratio sum.
#[derive(Debug, Clone, Copy)]
pub struct JensenReport {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// Jensen gap at (prefix, token) for probability weights over property
/// vectors. Ratios are the trained model's keyed conditionals against its
/// unconditional distribution.
pub fn jensen_gap(
    model: &ConditionalModel,
    prefix: &Prefix,
    token: Token,
    weights: &[(PropertyVector, f64)],
) -> Result<JensenReport> {
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    if weights.iter().any(|(_, w)| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Oracle(
            "Jensen weights must be nonnegative and sum to 1".into(),
        ));
    }
    let uncond = model.next_token_dist(&ConditionKey::empty(), prefix).probs[token.id()];
    let mut lhs = 0.0;
    let mut ratio_sum = 0.0;
    for (y, w) in weights {
        if *w == 0.0 {
            continue;
        }
        let key = ConditionKey::from_properties(y, &PROPERTY_NAMES)?;
        let cond = model.next_token_dist(&key, prefix).probs[token.id()];
        let ratio = cond / uncond;
        lhs += w * ratio.ln();
        ratio_sum += w * ratio;
    }
    let rhs = ratio_sum.ln();
    Ok(JensenReport {
        lhs,
        rhs,
        gap: rhs - lhs,
    })
}

/// Prior-normalized reward weights over realized outcomes at `prefix`:
/// `r(y) * pi(y | prefix)` renormalized. Rewards are shifted to be
/// positive first when any is nonpositive (invalid mass counts as an
/// outcome with reward -1 for the shift, then drops out of the weighting
/// since the Jensen ratios only exist for realized property vectors).
pub fn prior_reward_weights<P: TokenPolicy>(
    policy: &P,
    prefix: &Prefix,
    r: &RewardFunction,
    pool: &PropertyPool,
) -> Result<Vec<(PropertyVector, f64)>> {
    let masses = outcome_masses(policy, prefix)?;
    let mut rewards: Vec<(Outcome, f64, f64)> = Vec::new();
    for (outcome, prior) in &masses.marginal {
        rewards.push((outcome.clone(), outcome_reward(outcome, r, pool)?, *prior));
    }
    let r_min = rewards.iter().map(|(_, rv, _)| *rv).fold(f64::INFINITY, f64::min);
    let shift = if r_min <= 0.0 { -r_min + TILT_SHIFT_DELTA } else { 0.0 };
    let mut weights: Vec<(PropertyVector, f64)> = rewards
        .iter()
        .filter_map(|(outcome, rv, prior)| outcome.clone().map(|y| (y, (rv + shift) * prior)))
        .collect();
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) {
        return Err(Error::Oracle("prior reward weights vanished".into()));
    }
    for (_, w) in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Exact expected reward of a policy: enumeration over every complete
/// sequence, invalid mass at reward -1.
pub fn exact_policy_value<P: TokenPolicy>(
    policy: &P,
    r: &RewardFunction,
    pool: &PropertyPool,
) -> Result<f64> {
    completion_value(policy, &Prefix::empty(), r, pool)
}

/// Seed of the frozen probe set.
pub const PROBE_SEED: u64 = 0x5eed_0001;

/// 100 (prefix, token) probes stratified by prefix length 0..=7,
/// reproduced bit-identically from [`PROBE_SEED`].
pub fn probe_set() -> Vec<(Prefix, Token)> {
    let mut rng = crate::rng::scoped("oracle-probes", PROBE_SEED);
    let mut probes = Vec::with_capacity(100);
    for i in 0..100usize {
        let len = i % L_MAX;
        let body: Vec<Token> = (0..len)
            .map(|_| Token::BODY[rng.random_range(0..Token::BODY.len())])
            .collect();
        let token = Token::ALL[rng.random_range(0..VOCAB)];
        probes.push((Prefix::new(&body).expect("probe length < L_MAX"), token));
    }
    probes
}
