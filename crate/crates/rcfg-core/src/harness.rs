//! Evaluation harness: per-policy metrics rows (reward, normalized
//! reward, validity, bigram-Jaccard diversity), the method sweep grid,
//! and deterministic CSV reporting with aggregate rows.

use crate::corpus::{ConditionKey, PropertyPool};
use crate::distill::DistillConfig;
use crate::domain::{validate, Sequence};
use crate::error::{Error, Result};
use crate::guidance::{rcfg_sample, GuidanceConfig};
use crate::model::{ConditionalModel, KeyedPolicy, TemperedPolicy};
use crate::oracle::{exact_policy_value, sequence_reward};
use crate::reward::{builtin_reward, normalize_score, optimal_y, RewardFunction};
use crate::rng::scoped;
use crate::train_rl::{best_of_n, run_rl, RLConfig};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeSet;

pub const DEFAULT_N_SAMPLES: usize = 2_000;

/// Maximum number of unordered pairs the diversity estimate averages.
pub const DIVERSITY_PAIR_BUDGET: usize = 1_000;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub reward_name: String,
    pub mean_reward: f64,
    pub norm_reward: f64,
    pub validity: f64,
    pub diversity: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Token-bigram feature set of a sequence, anchored with a beginning-of-
/// sequence marker; the trailing EOS token is not a feature.
fn bigram_set(seq: &Sequence) -> BTreeSet<(u8, u8)> {
    const BOS: u8 = 5;
    let body = seq.body();
    let mut set = BTreeSet::new();
    if let Some(first) = body.first() {
        set.insert((BOS, first.id() as u8));
    }
    for w in body.windows(2) {
        set.insert((w[0].id() as u8, w[1].id() as u8));
    }
    set
}

fn jaccard(a: &BTreeSet<(u8, u8)>, b: &BTreeSet<(u8, u8)>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean pairwise bigram-Jaccard similarity over all unordered pairs, or
/// over [`DIVERSITY_PAIR_BUDGET`] uniformly drawn pairs when there are
/// more than that.
pub fn diversity<R: Rng>(seqs: &[Sequence], rng: &mut R) -> Result<f64> {
    if seqs.len() < 2 {
        return Err(Error::Harness("diversity needs at least 2 sequences".into()));
    }
    let sets: Vec<BTreeSet<(u8, u8)>> = seqs.iter().map(bigram_set).collect();
    let n = seqs.len();
    let total_pairs = n * (n - 1) / 2;
    let mut sum = 0.0;
    let count;
    if total_pairs <= DIVERSITY_PAIR_BUDGET {
        for i in 0..n {
            for j in (i + 1)..n {
                sum += jaccard(&sets[i], &sets[j]);
            }
        }
        count = total_pairs;
    } else {
        for _ in 0..DIVERSITY_PAIR_BUDGET {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            sum += jaccard(&sets[i], &sets[j]);
        }
        count = DIVERSITY_PAIR_BUDGET;
    }
    Ok(sum / count as f64)
}

/// Draws `n` sequences from `sampler` and summarizes them into a metrics
/// row. Diversity is measured on the valid subset (defined as 1 when
/// fewer than 2 samples are valid). All randomness derives from the
/// (method, reward, seed) triple, so rows are order-independent.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy<F>(
    mut sampler: F,
    r: &RewardFunction,
    pool: &PropertyPool,
    baseline: f64,
    r_star: f64,
    n: usize,
    seed: u64,
    method: &str,
) -> Result<MetricsRow>
where
    F: FnMut(&mut ChaCha12Rng) -> Result<Sequence>,
{
    if n < 2 {
        return Err(Error::Harness("evaluate_policy needs n >= 2".into()));
    }
    let scope = format!("eval:{method}:{}", r.name);
    let mut rng = scoped(&scope, seed);
    let mut seqs = Vec::with_capacity(n);
    let mut reward_sum = 0.0;
    let mut valid = 0usize;
    for _ in 0..n {
        let s = sampler(&mut rng)?;
        reward_sum += sequence_reward(&s, r, pool)?;
        if validate(&s).is_valid() {
            valid += 1;
        }
        seqs.push(s);
    }
    let valid_seqs: Vec<Sequence> = seqs
        .into_iter()
        .filter(|s| validate(s).is_valid())
        .collect();
    let mut div_rng = scoped(&format!("eval-div:{method}:{}", r.name), seed);
    let div = if valid_seqs.len() < 2 {
        1.0
    } else {
        diversity(&valid_seqs, &mut div_rng)?
    };
    let mean_reward = reward_sum / n as f64;
    Ok(MetricsRow {
        method: method.to_string(),
        reward_name: r.name.clone(),
        mean_reward,
        norm_reward: normalize_score(mean_reward, baseline, r_star)?,
        validity: valid as f64 / n as f64,
        diversity: div,
        n_samples: n,
        seed,
    })
}

/// One evaluable method cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Base,
    YStarCond,
    BestOf { n: usize },
    Rcfg { gamma: f64, set_size: usize },
    Rl { steps: usize },
    WarmRl { distill_steps: usize, steps: usize },
}

impl Method {
    /// Row identifier, e.g. `rcfg(8)` or `rl@500`.
    pub fn id(&self) -> String {
        match self {
            Method::Base => "base".into(),
            Method::YStarCond => "y_star_cond".into(),
            Method::BestOf { n } => format!("best_of_{n}"),
            Method::Rcfg { gamma, set_size } => format!("rcfg({set_size},gamma={gamma})"),
            Method::Rl { steps } => format!("rl@{steps}"),
            Method::WarmRl {
                distill_steps,
                steps,
            } => format!("warm_rl@{steps}(distill={distill_steps})"),
        }
    }

    pub fn parse(line: &str) -> Result<Method> {
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::Parse("empty method line".into()))?;
        let kv = |key: &str, default: Option<f64>| -> Result<f64> {
            for p in line.split_whitespace().skip(1) {
                if let Some(v) = p.strip_prefix(&format!("{key}=")) {
                    return v
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad {key} in {line:?}")));
                }
            }
            default.ok_or_else(|| Error::Parse(format!("method {name} needs {key}=")))
        };
        match name {
            "base" => Ok(Method::Base),
            "y_star_cond" => Ok(Method::YStarCond),
            "best_of" => Ok(Method::BestOf {
                n: kv("n", Some(4.0))? as usize,
            }),
            "rcfg" => Ok(Method::Rcfg {
                gamma: kv("gamma", Some(2.0))?,
                set_size: kv("set_size", Some(8.0))? as usize,
            }),
            "rl" => Ok(Method::Rl {
                steps: kv("steps", Some(500.0))? as usize,
            }),
            "warm_rl" => Ok(Method::WarmRl {
                distill_steps: kv("distill_steps", Some(50.0))? as usize,
                steps: kv("steps", Some(100.0))? as usize,
            }),
            _ => Err(Error::Parse(format!("unknown method {name:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub rewards: Vec<String>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub n_samples: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rewards.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::Harness(
                "sweep needs nonempty rewards, methods, and seeds".into(),
            ));
        }
        if self.n_samples < 2 {
            return Err(Error::Harness("n_samples must be >= 2".into()));
        }
        Ok(())
    }

    /// Parses the plain-text sweep format:
    /// ```text
    /// sweep v1
    /// rewards max_nA,target_depth
    /// seeds 1,2,3
    /// n_samples 2000
    /// method base
    /// method rcfg gamma=2 set_size=8
    /// ```
    pub fn parse(text: &str) -> Result<SweepSpec> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().unwrap_or_default();
        if header != "sweep v1" {
            return Err(Error::Parse(format!("bad sweep header {header:?}")));
        }
        let mut rewards = Vec::new();
        let mut seeds = Vec::new();
        let mut n_samples = DEFAULT_N_SAMPLES;
        let mut methods = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("rewards ") {
                rewards = rest.split(',').map(|s| s.trim().to_string()).collect();
            } else if let Some(rest) = line.strip_prefix("seeds ") {
                seeds = rest
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| Error::Parse(line.into())))
                    .collect::<Result<_>>()?;
            } else if let Some(rest) = line.strip_prefix("n_samples ") {
                n_samples = rest.parse().map_err(|_| Error::Parse(line.into()))?;
            } else if let Some(rest) = line.strip_prefix("method ") {
                methods.push(Method::parse(rest)?);
            } else {
                return Err(Error::Parse(format!("unrecognized sweep line {line:?}")));
            }
        }
        let spec = SweepSpec {
            rewards,
            methods,
            seeds,
            n_samples,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("sweep v1\n");
        out.push_str(&format!("rewards {}\n", self.rewards.join(",")));
        out.push_str(&format!(
            "seeds {}\n",
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        out.push_str(&format!("n_samples {}\n", self.n_samples));
        for m in &self.methods {
            let line = match m {
                Method::Base => "base".to_string(),
                Method::YStarCond => "y_star_cond".to_string(),
                Method::BestOf { n } => format!("best_of n={n}"),
                Method::Rcfg { gamma, set_size } => {
                    format!("rcfg gamma={gamma} set_size={set_size}")
                }
                Method::Rl { steps } => format!("rl steps={steps}"),
                Method::WarmRl {
                    distill_steps,
                    steps,
                } => format!("warm_rl distill_steps={distill_steps} steps={steps}"),
            };
            out.push_str(&format!("method {line}\n"));
        }
        out
    }
}

/// The default sweep grid: the six built-in rewards, the base /
/// conditioned / best-of-4 / guided (|Y_S| grid) / RL / warm-RL methods,
/// five seeds.
pub fn default_sweep_spec() -> SweepSpec {
    SweepSpec {
        rewards: crate::reward::builtin_rewards()
            .into_iter()
            .map(|r| r.name)
            .collect(),
        methods: vec![
            Method::Base,
            Method::YStarCond,
            Method::BestOf { n: 4 },
            Method::Rcfg {
                gamma: 2.0,
                set_size: 2,
            },
            Method::Rcfg {
                gamma: 2.0,
                set_size: 4,
            },
            Method::Rcfg {
                gamma: 2.0,
                set_size: 8,
            },
            Method::Rcfg {
                gamma: 2.0,
                set_size: 16,
            },
            Method::Rl { steps: 500 },
        ],
        seeds: vec![1, 2, 3, 4, 5],
        n_samples: DEFAULT_N_SAMPLES,
    }
}

/// Evaluates one (reward, method, seed) cell.
pub fn run_cell(
    model: &ConditionalModel,
    pool: &PropertyPool,
    r: &RewardFunction,
    method: &Method,
    n_samples: usize,
    seed: u64,
) -> Result<MetricsRow> {
    let temperature = 0.7;
    let base_value = exact_policy_value(
        &TemperedPolicy {
            inner: KeyedPolicy {
                model,
                key: ConditionKey::empty(),
            },
            temperature,
        },
        r,
        pool,
    )?;
    let (_, r_star) = optimal_y(r, pool)?;
    let id = method.id();
    match method {
        Method::Base => evaluate_policy(
            |rng| model.sample_sequence(&ConditionKey::empty(), temperature, rng),
            r,
            pool,
            base_value,
            r_star,
            n_samples,
            seed,
            &id,
        ),
        Method::YStarCond => {
            let (y_star, _) = optimal_y(r, pool)?;
            let depends: Vec<&str> = r.depends_on.iter().map(|s| s.as_str()).collect();
            let key = ConditionKey::from_properties(&y_star, &depends)?;
            evaluate_policy(
                |rng| model.sample_sequence(&key, temperature, rng),
                r,
                pool,
                base_value,
                r_star,
                n_samples,
                seed,
                &id,
            )
        }
        Method::BestOf { n } => evaluate_policy(
            |rng| {
                best_of_n(
                    |rng| model.sample_sequence(&ConditionKey::empty(), temperature, rng),
                    r,
                    pool,
                    *n,
                    rng,
                )
                .map(|(s, _)| s)
            },
            r,
            pool,
            base_value,
            r_star,
            n_samples,
            seed,
            &id,
        ),
        Method::Rcfg { gamma, set_size } => {
            let cfg = GuidanceConfig {
                gamma: *gamma,
                set_size: *set_size,
                temperature,
                ..GuidanceConfig::default()
            };
            evaluate_policy(
                |rng| rcfg_sample(model, r, pool, &cfg, rng).map(|(s, _)| s),
                r,
                pool,
                base_value,
                r_star,
                n_samples,
                seed,
                &id,
            )
        }
        Method::Rl { steps } => {
            let cfg = RLConfig {
                steps: *steps,
                temperature,
                ..RLConfig::default()
            };
            let (_, policy) = run_rl(model, r, pool, &cfg, seed)?;
            evaluate_policy(
                |rng| policy.sample_sequence(temperature, rng),
                r,
                pool,
                base_value,
                r_star,
                n_samples,
                seed,
                &id,
            )
        }
        Method::WarmRl {
            distill_steps,
            steps,
        } => {
            let dcfg = DistillConfig {
                steps: *distill_steps,
                ..DistillConfig::default()
            };
            let rl_cfg = RLConfig {
                steps: *steps,
                temperature,
                ..RLConfig::default()
            };
            let (_, student) = crate::distill::run_distill(model, r, pool, &dcfg, seed)?;
            let (_, policy) = crate::train_rl::run_rl_from(student, r, pool, &rl_cfg, seed)?;
            evaluate_policy(
                |rng| policy.sample_sequence(temperature, rng),
                r,
                pool,
                base_value,
                r_star,
                n_samples,
                seed,
                &id,
            )
        }
    }
}

/// A full sweep report: data rows in spec order plus aggregate lines.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<MetricsRow>,
    pub csv: String,
}

pub fn metrics_csv_header() -> &'static str {
    "row_type,method,reward,seed,n_samples,mean_reward,norm_reward,validity,diversity,se"
}

fn data_row_csv(row: &MetricsRow) -> String {
    format!(
        "data,{},{},{},{},{:?},{:?},{:?},{:?},",
        row.method,
        row.reward_name,
        row.seed,
        row.n_samples,
        row.mean_reward,
        row.norm_reward,
        row.validity,
        row.diversity
    )
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either input is rank-degenerate (all values tied).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma).powi(2);
        vb += (rb[i] - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}

/// Median with the even-count convention of averaging the middle two.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-method aggregates over per-reward values (each first averaged
/// across seeds): mean with standard error, and the median. Computing on
/// per-reward values rather than pooled samples keeps one runaway reward
/// from skewing the aggregate.
pub fn aggregate_rows(spec: &SweepSpec, rows: &[MetricsRow]) -> Vec<String> {
    let mut out = Vec::new();
    for method in &spec.methods {
        let id = method.id();
        let per_reward: Vec<f64> = spec
            .rewards
            .iter()
            .map(|rname| {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter(|row| row.method == id && &row.reward_name == rname)
                    .map(|row| row.norm_reward)
                    .collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect();
        let n = per_reward.len() as f64;
        let mean = per_reward.iter().sum::<f64>() / n;
        let var = per_reward.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let se = (var / n).sqrt();
        out.push(format!(
            "mean_across_rewards,{id},all,,,,{mean:?},,,{se:?}"
        ));
        out.push(format!(
            "median_reward_fn,{id},all,,,,{:?},,,",
            median(&per_reward)
        ));
    }
    out
}

/// Runs every (reward, method, seed) cell, optionally across `jobs`
/// worker threads. Rows appear in spec order regardless of scheduling;
/// each cell's randomness is scoped to its own identity, so the CSV is
/// byte-identical across reruns and thread counts.
pub fn run_sweep(
    spec: &SweepSpec,
    model: &ConditionalModel,
    pool: &PropertyPool,
    jobs: usize,
) -> Result<SweepReport> {
    spec.validate()?;
    let rewards: Vec<RewardFunction> = spec
        .rewards
        .iter()
        .map(|name| builtin_reward(name))
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for r in &rewards {
        for method in &spec.methods {
            for &seed in &spec.seeds {
                cells.push((r, method, seed));
            }
        }
    }
    let jobs = jobs.max(1).min(cells.len().max(1));
    let mut rows: Vec<Option<MetricsRow>> = vec![None; cells.len()];
    if jobs == 1 {
        for (slot, (r, method, seed)) in rows.iter_mut().zip(&cells) {
            *slot = Some(run_cell(model, pool, r, method, spec.n_samples, *seed)?);
        }
    } else {
        let results: Vec<Result<(usize, MetricsRow)>> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (chunk_idx, chunk) in cells.chunks(cells.len().div_ceil(jobs)).enumerate() {
                let offset = chunk_idx * cells.len().div_ceil(jobs);
                handles.push(scope.spawn(move || {
                    let mut done = Vec::new();
                    for (i, (r, method, seed)) in chunk.iter().enumerate() {
                        done.push(
                            run_cell(model, pool, r, method, spec.n_samples, *seed)
                                .map(|row| (offset + i, row)),
                        );
                    }
                    done
                }));
            }
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        });
        for res in results {
            let (i, row) = res?;
            rows[i] = Some(row);
        }
    }
    let rows: Vec<MetricsRow> = rows.into_iter().map(|r| r.expect("all cells ran")).collect();
    let mut csv = String::from(metrics_csv_header());
    csv.push('\n');
    for row in &rows {
        csv.push_str(&data_row_csv(row));
        csv.push('\n');
    }
    for line in aggregate_rows(spec, &rows) {
        csv.push_str(&line);
        csv.push('\n');
    }
    Ok(SweepReport { rows, csv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::realized_property_vectors;

    fn full_pool() -> PropertyPool {
        PropertyPool::from_vectors(realized_property_vectors())
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
        // Ties get average ranks; monotone with ties still correlates 1.
        let s = spearman(&[1.0, 2.0, 2.0, 3.0], &[5.0, 7.0, 7.0, 9.0]);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_examples() {
        let mut rng = scoped("htest", 1);
        let a = Sequence::parse("A B EOS").unwrap();
        let b = Sequence::parse("A B A EOS").unwrap();
        assert_eq!(diversity(&[a.clone(), a.clone()], &mut rng).unwrap(), 1.0);
        let d = diversity(&[a.clone(), b], &mut rng).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-12);
        // Bigram-disjoint bodies.
        let c = Sequence::parse("B B EOS").unwrap();
        assert_eq!(diversity(&[a.clone(), c], &mut rng).unwrap(), 0.0);
        assert!(diversity(&[a], &mut rng).is_err());
    }

    #[test]
    fn diversity_pair_sampling_is_deterministic() {
        let m = crate::model::tests::trained_model(61, 2_000);
        let mut rng = scoped("htest-div", 2);
        let seqs: Vec<Sequence> = (0..100)
            .map(|_| {
                m.sample_sequence(&ConditionKey::empty(), 0.7, &mut rng)
                    .unwrap()
            })
            .collect();
        let d1 = diversity(&seqs, &mut scoped("pairs", 3)).unwrap();
        let d2 = diversity(&seqs, &mut scoped("pairs", 3)).unwrap();
        assert_eq!(d1, d2);
        assert!((0.0..=1.0).contains(&d1));
    }

    #[test]
    fn base_policy_anchors_norm_reward_at_zero() {
        let m = crate::model::tests::trained_model(62, 5_000);
        let pool = full_pool();
        let r = builtin_reward("tradeoff_AD").unwrap();
        let row = run_cell(&m, &pool, &r, &Method::Base, 4_000, 11).unwrap();
        assert!(row.norm_reward.abs() < 0.05, "norm {}", row.norm_reward);
        assert!(row.validity > 0.9);
    }

    #[test]
    fn fixed_optimal_sampler_anchors_norm_reward_at_one() {
        let m = crate::model::tests::trained_model(63, 2_000);
        let pool = full_pool();
        let r = builtin_reward("tradeoff_AD").unwrap();
        // tradeoff_AD's optimum is 8 letters A, depth 0.
        let fixed = Sequence::parse("A A A A A A A A EOS").unwrap();
        let base_value = exact_policy_value(
            &TemperedPolicy {
                inner: KeyedPolicy {
                    model: &m,
                    key: ConditionKey::empty(),
                },
                temperature: 0.7,
            },
            &r,
            &pool,
        )
        .unwrap();
        let (_, r_star) = optimal_y(&r, &pool).unwrap();
        let row = evaluate_policy(
            |_| Ok(fixed.clone()),
            &r,
            &pool,
            base_value,
            r_star,
            100,
            12,
            "fixed",
        )
        .unwrap();
        assert!((row.norm_reward - 1.0).abs() < 1e-9);
        assert_eq!(row.diversity, 1.0);
        assert_eq!(row.validity, 1.0);
    }

    #[test]
    fn sweep_spec_round_trip_and_errors() {
        let spec = default_sweep_spec();
        let parsed = SweepSpec::parse(&spec.render()).unwrap();
        assert_eq!(spec, parsed);
        assert!(SweepSpec::parse("nonsense").is_err());
        assert!(SweepSpec::parse("sweep v1\nrewards max_nA\nseeds 1\nmethod bogus\n").is_err());
    }

    #[test]
    fn tiny_sweep_shape_and_determinism() {
        let m = crate::model::tests::trained_model(64, 2_000);
        let pool = full_pool();
        let spec = SweepSpec {
            rewards: vec!["max_nA".into()],
            methods: vec![Method::Base],
            seeds: vec![3],
            n_samples: 200,
        };
        let a = run_sweep(&spec, &m, &pool, 1).unwrap();
        let b = run_sweep(&spec, &m, &pool, 1).unwrap();
        assert_eq!(a.csv, b.csv);
        assert_eq!(a.rows.len(), 1);
        // 1 data row + header + mean/median aggregates.
        assert_eq!(a.csv.lines().count(), 4);
        // Base-only sweep: norm aggregates near zero.
        let mean_line = a
            .csv
            .lines()
            .find(|l| l.starts_with("mean_across_rewards"))
            .unwrap();
        let mean: f64 = mean_line.split(',').nth(6).unwrap().parse().unwrap();
        assert!(mean.abs() < 0.15, "base aggregate {mean}");
    }

    #[test]
    fn sweep_parallelism_does_not_change_bytes() {
        let m = crate::model::tests::trained_model(65, 2_000);
        let pool = full_pool();
        let spec = SweepSpec {
            rewards: vec!["max_nA".into(), "target_depth".into()],
            methods: vec![Method::Base, Method::BestOf { n: 4 }],
            seeds: vec![1, 2],
            n_samples: 100,
        };
        let serial = run_sweep(&spec, &m, &pool, 1).unwrap();
        let parallel = run_sweep(&spec, &m, &pool, 4).unwrap();
        assert_eq!(serial.csv, parallel.csv);
    }

    #[test]
    fn aggregates_recompute_from_data_rows() {
        let m = crate::model::tests::trained_model(66, 2_000);
        let pool = full_pool();
        let spec = SweepSpec {
            rewards: vec!["max_nA".into(), "tradeoff_AD".into(), "target_depth".into()],
            methods: vec![Method::Base],
            seeds: vec![1, 2],
            n_samples: 100,
        };
        let report = run_sweep(&spec, &m, &pool, 2).unwrap();
        let recomputed = aggregate_rows(&spec, &report.rows);
        for line in &recomputed {
            assert!(report.csv.contains(line.as_str()), "missing {line}");
        }
        // Median of 3 per-reward values is the middle one.
        let per_reward: Vec<f64> = spec
            .rewards
            .iter()
            .map(|rn| {
                let v: Vec<f64> = report
                    .rows
                    .iter()
                    .filter(|row| &row.reward_name == rn)
                    .map(|row| row.norm_reward)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect();
        let mut sorted = per_reward.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(median(&per_reward), sorted[1]);
    }

    #[test]
    fn guided_methods_beat_base_in_sweep() {
        let m = crate::model::tests::trained_model(67, 5_000);
        let pool = full_pool();
        let spec = SweepSpec {
            rewards: vec!["max_nA".into()],
            methods: vec![
                Method::Base,
                Method::Rcfg {
                    gamma: 2.0,
                    set_size: 8,
                },
            ],
            seeds: vec![4],
            n_samples: 1_000,
        };
        let report = run_sweep(&spec, &m, &pool, 2).unwrap();
        let get = |method: &Method| {
            report
                .rows
                .iter()
                .find(|row| row.method == method.id())
                .unwrap()
                .norm_reward
        };
        assert!(
            get(&spec.methods[1]) > get(&spec.methods[0]) + 0.05,
            "rcfg {} base {}",
            get(&spec.methods[1]),
            get(&spec.methods[0])
        );
    }
}
