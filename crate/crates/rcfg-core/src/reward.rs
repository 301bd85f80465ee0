//! The reward-function DSL: expression trees over property keys,
//! percentile clamping, guidance-set standardization, optimal-property
//! search, and score normalization.

use crate::corpus::PropertyPool;
use crate::domain::{all_valid_sequences, extract_properties, PropertyVector, L_MAX};
use crate::error::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Expression tree over property names.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Constant(f64),
    Property(String),
    /// Triangular kernel max(0, 1 - |child - t| / w).
    Triangular { child: Box<Expr>, target: f64, width: f64 },
    /// max(0, child).
    PosPart(Box<Expr>),
    /// 1 when the named boolean property holds, else 0.
    Indicator(String),
    Scale(f64, Box<Expr>),
    Sum(Vec<Expr>),
    Negate(Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClampAt {
    P90,
    P10,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardFunction {
    pub name: String,
    pub depends_on: BTreeSet<String>,
    pub expr: Expr,
    pub clamp_spec: BTreeMap<String, ClampAt>,
}

/// max(0, 1 - |x - t| / w).
pub fn triangular(x: f64, t: f64, w: f64) -> Result<f64> {
    if !(w > 0.0) {
        return Err(Error::Reward(format!("triangular width must be > 0, got {w}")));
    }
    Ok((1.0 - (x - t).abs() / w).max(0.0))
}

impl Expr {
    fn property_names(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Constant(_) => {}
            Expr::Property(n) | Expr::Indicator(n) => {
                out.insert(n.clone());
            }
            Expr::Triangular { child, .. } | Expr::PosPart(child) | Expr::Scale(_, child) | Expr::Negate(child) => {
                child.property_names(out)
            }
            Expr::Sum(children) => {
                for c in children {
                    c.property_names(out);
                }
            }
        }
    }

    fn eval(&self, lookup: &dyn Fn(&str) -> Result<f64>) -> Result<f64> {
        match self {
            Expr::Constant(c) => Ok(*c),
            Expr::Property(n) | Expr::Indicator(n) => lookup(n),
            Expr::Triangular { child, target, width } => triangular(child.eval(lookup)?, *target, *width),
            Expr::PosPart(child) => Ok(child.eval(lookup)?.max(0.0)),
            Expr::Scale(c, child) => Ok(c * child.eval(lookup)?),
            Expr::Sum(children) => children.iter().map(|c| c.eval(lookup)).sum(),
            Expr::Negate(child) => Ok(-child.eval(lookup)?),
        }
    }
}

impl RewardFunction {
    pub fn new(
        name: &str,
        depends_on: &[&str],
        expr: Expr,
        clamp_spec: &[(&str, ClampAt)],
    ) -> Result<RewardFunction> {
        let depends: BTreeSet<String> = depends_on.iter().map(|s| s.to_string()).collect();
        let mut used = BTreeSet::new();
        expr.property_names(&mut used);
        if !used.is_subset(&depends) {
            return Err(Error::Reward(format!(
                "reward {name:?} uses properties {used:?} outside depends_on {depends:?}"
            )));
        }
        Ok(RewardFunction {
            name: name.to_string(),
            depends_on: depends,
            expr,
            clamp_spec: clamp_spec
                .iter()
                .map(|(n, c)| (n.to_string(), *c))
                .collect(),
        })
    }
}

/// Evaluates a reward on a property vector, applying the per-property
/// percentile clamps first.
pub fn evaluate_reward(r: &RewardFunction, y: &PropertyVector, pool: &PropertyPool) -> Result<f64> {
    let lookup = |name: &str| -> Result<f64> {
        let raw = y
            .get(name)
            .ok_or_else(|| Error::Reward(format!("property {name:?} absent")))?;
        Ok(match r.clamp_spec.get(name) {
            Some(ClampAt::P90) => {
                let hi = pool
                    .p90(name)
                    .ok_or_else(|| Error::Reward(format!("no p90 for {name:?}")))?;
                raw.min(hi)
            }
            Some(ClampAt::P10) => {
                let lo = pool
                    .p10(name)
                    .ok_or_else(|| Error::Reward(format!("no p10 for {name:?}")))?;
                raw.max(lo)
            }
            None => raw,
        })
    };
    r.expr.eval(&lookup)
}

/// Rewards standardized within a guidance set.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedAdvantages {
    pub values: Vec<f64>,
    pub mean_removed: bool,
}

/// Subtracts the mean and divides by the population standard deviation.
/// Constant rewards (std below 1e-12) yield all-zero advantages: zero
/// guidance is the only consistent limit.
///
/// The division is routed through the max absolute deviation so that an
/// exact positive-affine transform of the inputs reproduces the exact
/// same advantage bits.
pub fn standardize(rewards: &[f64]) -> Result<StandardizedAdvantages> {
    if rewards.is_empty() {
        return Err(Error::Reward("standardize requires a nonempty list".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let dev: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    let std = (dev.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    if std < 1e-12 {
        return Ok(StandardizedAdvantages {
            values: vec![0.0; rewards.len()],
            mean_removed: true,
        });
    }
    let dmax = dev.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    let unit: Vec<f64> = dev.iter().map(|d| d / dmax).collect();
    let unit_std = (unit.iter().map(|u| u * u).sum::<f64>() / n).sqrt();
    Ok(StandardizedAdvantages {
        values: unit.iter().map(|u| u / unit_std).collect(),
        mean_removed: true,
    })
}

/// Property vectors realized by at least one valid sequence, ascending in
/// (n_A, depth, len_bin, has_AA).
pub fn realized_property_vectors() -> Vec<PropertyVector> {
    let mut set: BTreeSet<PropertyVector> = BTreeSet::new();
    for s in all_valid_sequences(L_MAX).expect("L_MAX enumeration is allowed") {
        set.insert(extract_properties(&s).expect("valid"));
    }
    set.into_iter().collect()
}

/// Argmax of the (clamped) reward over the realized property space. Ties
/// break toward the lexicographically smallest vector.
pub fn optimal_y(r: &RewardFunction, pool: &PropertyPool) -> Result<(PropertyVector, f64)> {
    let mut best: Option<(PropertyVector, f64)> = None;
    for y in realized_property_vectors() {
        let v = evaluate_reward(r, &y, pool)?;
        match &best {
            Some((_, bv)) if v <= *bv => {}
            _ => best = Some((y, v)),
        }
    }
    best.ok_or_else(|| Error::Reward("no realized property vectors".into()))
}

/// Linear rescaling with 0 at the baseline expectation and 1 at r(y*).
/// Values above 1 are legal.
pub fn normalize_score(raw: f64, baseline: f64, r_star: f64) -> Result<f64> {
    if r_star == baseline {
        return Err(Error::Reward("degenerate normalization: r_star equals baseline".into()));
    }
    Ok((raw - baseline) / (r_star - baseline))
}

// ---------------------------------------------------------------------------
// Text format: prefix-notation expressions, one `reward` block per function.

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Constant(c) => write!(f, "{c:?}"),
            Expr::Property(n) => write!(f, "{n}"),
            Expr::Indicator(n) => write!(f, "(ind {n})"),
            Expr::Triangular { child, target, width } => write!(f, "(tri {child} {target:?} {width:?})"),
            Expr::PosPart(child) => write!(f, "(pos {child})"),
            Expr::Scale(c, child) => write!(f, "(scale {c:?} {child})"),
            Expr::Sum(children) => {
                write!(f, "(+")?;
                for c in children {
                    write!(f, " {c}")?;
                }
                write!(f, ")")
            }
            Expr::Negate(child) => write!(f, "(neg {child})"),
        }
    }
}

fn tokenize(s: &str) -> Vec<String> {
    s.replace('(', " ( ")
        .replace(')', " ) ")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn parse_expr(tokens: &[String], pos: &mut usize) -> Result<Expr> {
    let tok = tokens
        .get(*pos)
        .ok_or_else(|| Error::Parse("unexpected end of expression".into()))?
        .clone();
    *pos += 1;
    if tok != "(" {
        if tok == ")" {
            return Err(Error::Parse("unexpected ')'".into()));
        }
        return Ok(match tok.parse::<f64>() {
            Ok(c) => Expr::Constant(c),
            Err(_) => Expr::Property(tok),
        });
    }
    let head = tokens
        .get(*pos)
        .ok_or_else(|| Error::Parse("empty expression".into()))?
        .clone();
    *pos += 1;
    let mut number = |what: &str| -> Result<f64> {
        let t = tokens
            .get(*pos)
            .ok_or_else(|| Error::Parse(format!("missing {what}")))?;
        *pos += 1;
        t.parse()
            .map_err(|_| Error::Parse(format!("bad {what}: {t:?}")))
    };
    let expr = match head.as_str() {
        "tri" => {
            let child = parse_expr(tokens, pos)?;
            let mut number = |what: &str| -> Result<f64> {
                let t = tokens
                    .get(*pos)
                    .ok_or_else(|| Error::Parse(format!("missing {what}")))?;
                *pos += 1;
                t.parse().map_err(|_| Error::Parse(format!("bad {what}: {t:?}")))
            };
            Expr::Triangular {
                child: Box::new(child),
                target: number("target")?,
                width: number("width")?,
            }
        }
        "pos" => Expr::PosPart(Box::new(parse_expr(tokens, pos)?)),
        "neg" => Expr::Negate(Box::new(parse_expr(tokens, pos)?)),
        "ind" => {
            let name = tokens
                .get(*pos)
                .ok_or_else(|| Error::Parse("missing indicator property".into()))?
                .clone();
            *pos += 1;
            Expr::Indicator(name)
        }
        "scale" => {
            let c = number("scale factor")?;
            Expr::Scale(c, Box::new(parse_expr(tokens, pos)?))
        }
        "+" => {
            let mut children = Vec::new();
            while tokens.get(*pos).map(String::as_str) != Some(")") {
                children.push(parse_expr(tokens, pos)?);
            }
            Expr::Sum(children)
        }
        other => return Err(Error::Parse(format!("unknown operator {other:?}"))),
    };
    match tokens.get(*pos).map(String::as_str) {
        Some(")") => {
            *pos += 1;
            Ok(expr)
        }
        _ => Err(Error::Parse("missing ')'".into())),
    }
}

impl Expr {
    pub fn parse(s: &str) -> Result<Expr> {
        let tokens = tokenize(s);
        let mut pos = 0;
        let e = parse_expr(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(Error::Parse(format!("trailing tokens in expression {s:?}")));
        }
        Ok(e)
    }
}

/// Parses a reward definition file: blocks of
/// `reward <name>` / `depends <a,b>` / optional `clamp <prop> <at_p90|at_p10>`
/// / `expr <prefix expression>`.
pub fn parse_reward_file(text: &str) -> Result<Vec<RewardFunction>> {
    let mut out = Vec::new();
    let mut name: Option<String> = None;
    let mut depends: Vec<String> = Vec::new();
    let mut clamps: Vec<(String, ClampAt)> = Vec::new();
    let mut expr: Option<Expr> = None;

    let flush = |name: &mut Option<String>,
                     depends: &mut Vec<String>,
                     clamps: &mut Vec<(String, ClampAt)>,
                     expr: &mut Option<Expr>|
     -> Result<Option<RewardFunction>> {
        if let Some(n) = name.take() {
            let e = expr
                .take()
                .ok_or_else(|| Error::Parse(format!("reward {n:?} has no expr")))?;
            let deps: Vec<&str> = depends.iter().map(String::as_str).collect();
            let cl: Vec<(&str, ClampAt)> = clamps.iter().map(|(s, c)| (s.as_str(), *c)).collect();
            let rf = RewardFunction::new(&n, &deps, e, &cl)?;
            depends.clear();
            clamps.clear();
            return Ok(Some(rf));
        }
        Ok(None)
    };

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (cmd, rest) = line.split_once(' ').unwrap_or((line, ""));
        match cmd {
            "reward" => {
                if let Some(rf) = flush(&mut name, &mut depends, &mut clamps, &mut expr)? {
                    out.push(rf);
                }
                name = Some(rest.to_string());
            }
            "depends" => depends = rest.split(',').map(|s| s.trim().to_string()).collect(),
            "clamp" => {
                let (prop, at) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::Parse(format!("bad clamp line {line:?}")))?;
                let at = match at {
                    "at_p90" => ClampAt::P90,
                    "at_p10" => ClampAt::P10,
                    _ => return Err(Error::Parse(format!("bad clamp target {at:?}"))),
                };
                clamps.push((prop.to_string(), at));
            }
            "expr" => expr = Some(Expr::parse(rest)?),
            _ => return Err(Error::Parse(format!("unknown reward-file line {line:?}"))),
        }
    }
    if let Some(rf) = flush(&mut name, &mut depends, &mut clamps, &mut expr)? {
        out.push(rf);
    }
    Ok(out)
}

/// The bundled 6-function toy suite (dependency arities 1 through 4).
pub const BUILTIN_REWARDS: &str = include_str!("builtin_rewards.txt");

pub fn builtin_rewards() -> Vec<RewardFunction> {
    parse_reward_file(BUILTIN_REWARDS).expect("bundled reward file parses")
}

pub fn builtin_reward(name: &str) -> Result<RewardFunction> {
    builtin_rewards()
        .into_iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::Reward(format!("unknown reward {name:?}")))
}
