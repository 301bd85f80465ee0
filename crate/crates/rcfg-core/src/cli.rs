//! The `rcfg` command-line entry point: corpus/model lifecycle, oracle
//! checks, plain and guided sampling, RL, distillation, evaluation
//! sweeps, and a self-contained invariant self-test.
//!
//! Every command takes a `--seed`; randomness streams are scoped per
//! command, so equal seeds across different commands never share a
//! stream. Each artifact-producing command writes a `.manifest.txt`
//! recording the resolved configuration and input/output digests.
//! Config files are plain `key=value` lines; command-line flags win.

use crate::corpus::{
    empirical_property_pool, make_training_record, read_corpus, sample_corpus, write_corpus,
    ConditionKey, CorpusPreset, PropertyPool,
};
use crate::distill::{experimental_rounds, warm_start_rl, DistillConfig};
use crate::domain::Token;
use crate::error::{Error, Result};
use crate::guidance::{
    draw_guidance_set, rcfg_logits, rcfg_logits_exact_prior, rcfg_logits_sign_flip_fixture,
    rcfg_sample, GuidanceConfig,
};
use crate::harness::{
    evaluate_policy, metrics_csv_header, run_sweep, spearman, Method, SweepSpec,
};
use crate::model::{
    softmax, ConditionalModel, KeyedPolicy, ModelConfig, TemperedPolicy, TokenPolicy,
};
use crate::oracle::{
    exact_policy_value, exact_tilt_dist, outcome_masses, prior_reward_weights, probe_set,
    q_per_token, q_report, jensen_gap, tilt_from_q,
};
use crate::reward::{
    builtin_reward, optimal_y, parse_reward_file, realized_property_vectors, standardize,
    RewardFunction,
};
use crate::rng::scoped;
use crate::train_rl::{
    best_of_n, rollout_batch, run_rl, surrogate_gradient, surrogate_objective, trace_csv_header,
    trace_row_csv, RLConfig, RLTrace, SoftmaxPolicy,
};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "rcfg",
    about = "Exact-oracle laboratory for reward-weighted classifier-free guidance over a toy sequence language"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Root seed for this command's random streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional key=value config file; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a training corpus and its held-out property pool.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// uniform_valid or correlated.
        #[arg(long)]
        preset: Option<String>,
        /// Training corpus size.
        #[arg(long)]
        n: Option<usize>,
        /// Held-out corpus size feeding the property pool (default n/5).
        #[arg(long)]
        heldout: Option<usize>,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Fit the count model on a corpus file.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        context_len: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long, default_value = "model.txt")]
        out: PathBuf,
    },
    /// Sample sequences from a fitted model under a condition key.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Condition key, e.g. "n_A=3;depth=1"; empty = unconditional.
        #[arg(long, default_value = "")]
        key: String,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value = "samples.txt")]
        out: PathBuf,
    },
    /// Sample sequences with reward-weighted guidance; writes a sidecar
    /// file recording each sequence's guidance set.
    RcfgSample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        reward: String,
        /// Optional reward definition file; built-ins used otherwise.
        #[arg(long)]
        reward_file: Option<PathBuf>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        set_size: Option<usize>,
        #[arg(long)]
        nucleus_p: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value = "rcfg_samples.txt")]
        out: PathBuf,
    },
    /// Exact-oracle report over the frozen probe set; exits nonzero if
    /// any identity or bound is violated.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Property pool; the full realized set is used when omitted.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        reward: String,
        #[arg(long)]
        reward_file: Option<PathBuf>,
        /// Probe selection (only "default", the frozen 100-probe set).
        #[arg(long, default_value = "default")]
        probes: String,
        #[arg(long, default_value = "oracle_check.csv")]
        out: PathBuf,
    },
    /// Policy-gradient RL against a reward; writes a per-step CSV trace.
    Rl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        reward: String,
        #[arg(long)]
        reward_file: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        entropy_coef: Option<f64>,
        #[arg(long)]
        kl_coef: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        invalid_penalty: Option<f64>,
        #[arg(long)]
        checkpoint_interval: Option<usize>,
        /// Directory receiving policy checkpoints (final one always).
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long, default_value = "rl_trace.csv")]
        out: PathBuf,
    },
    /// Distillation warm-up followed by RL, with a paired cold RL run.
    DistillRl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        reward: String,
        #[arg(long)]
        reward_file: Option<PathBuf>,
        #[arg(long)]
        distill_steps: Option<usize>,
        #[arg(long)]
        distill_lr: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        set_size: Option<usize>,
        #[arg(long)]
        nucleus_p: Option<f64>,
        #[arg(long)]
        rl_steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        entropy_coef: Option<f64>,
        #[arg(long)]
        kl_coef: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        /// Iterated distill-then-RL rounds (unstable; not part of the
        /// acceptance surface). 0 disables.
        #[arg(long, default_value_t = 0)]
        experimental_rounds: usize,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Best-of-N rejection sampling baseline; writes one metrics row.
    BestOf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        reward: String,
        #[arg(long)]
        reward_file: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value = "best_of.csv")]
        out: PathBuf,
    },
    /// Evaluate one reward across methods and seeds; mini-sweep CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        reward: String,
        /// Method spec, repeatable, e.g. "base", "rcfg gamma=2 set_size=8".
        #[arg(long = "method", required = true)]
        methods: Vec<String>,
        /// Comma-separated seeds for the cells (the --seed flag is unused
        /// here beyond manifest bookkeeping).
        #[arg(long, default_value = "1")]
        seeds: String,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "eval.csv")]
        out: PathBuf,
    },
    /// Run a sweep spec file over a fitted model and pool.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Sweep spec file; the built-in default grid when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Fast end-to-end invariant suite on a self-generated mini corpus.
    SelfTest {
        #[command(flatten)]
        common: Common,
    },
}

/// Binary entry point: 0 on success, 1 on contract/invariant failure;
/// clap exits with 2 on usage errors before we get here.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

// --------------------------------------------------------------------------
// Config files, manifests, artifact I/O.

fn read_config(path: Option<&Path>) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    if let Some(path) = path {
        for line in fs::read_to_string(path)?.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("config line must be key=value: {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    Ok(map)
}

/// Flag wins, then config file, then the built-in default.
fn resolve<T: std::str::FromStr + ToString>(
    flag: Option<T>,
    cfg: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(raw) = cfg.get(key) {
        return raw
            .parse()
            .map_err(|_| Error::Parse(format!("config {key}={raw:?} is not valid")));
    }
    Ok(default)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

struct Manifest {
    command: &'static str,
    seed: u64,
    config: BTreeMap<String, String>,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
}

impl Manifest {
    fn new(command: &'static str, seed: u64) -> Manifest {
        Manifest {
            command,
            seed,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs
            .push((path.display().to_string(), file_digest(path)?));
        Ok(self)
    }

    fn output(&mut self, path: &Path) -> Result<&mut Self> {
        self.outputs
            .push((path.display().to_string(), file_digest(path)?));
        Ok(self)
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::from("manifest v1\n");
        text.push_str(&format!("command {}\n", self.command));
        text.push_str(&format!("seed {}\n", self.seed));
        for (k, v) in &self.config {
            text.push_str(&format!("config {k}={v}\n"));
        }
        for (p, d) in &self.inputs {
            text.push_str(&format!("input {p} sha256={d}\n"));
        }
        for (p, d) in &self.outputs {
            text.push_str(&format!("output {p} sha256={d}\n"));
        }
        fs::write(path, text)?;
        Ok(())
    }
}

fn load_model(path: &Path) -> Result<ConditionalModel> {
    ConditionalModel::read_from(&mut BufReader::new(fs::File::open(path)?))
}

fn load_pool(path: &Path) -> Result<PropertyPool> {
    PropertyPool::read_from(&mut BufReader::new(fs::File::open(path)?))
}

fn load_reward(name: &str, file: Option<&Path>) -> Result<RewardFunction> {
    match file {
        Some(path) => parse_reward_file(&fs::read_to_string(path)?)?
            .into_iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Reward(format!("reward {name:?} not found in {path:?}"))),
        None => builtin_reward(name),
    }
}

/// Whether any valid sequence is still reachable from `prefix` under the
/// policy. Dead-end prefixes (e.g. too many unmatched open brackets) have
/// no realized outcomes, so the prior-reward weighting is undefined there
/// and weight-based probes skip them.
fn reaches_valid_outcome<P: TokenPolicy>(policy: &P, prefix: &crate::domain::Prefix) -> Result<bool> {
    let masses = outcome_masses(policy, prefix)?;
    Ok(masses
        .marginal
        .iter()
        .any(|(outcome, prior)| outcome.is_some() && *prior > 0.0))
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    name.push_str(".manifest.txt");
    out.with_file_name(name)
}

// --------------------------------------------------------------------------
// Dispatch.

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus {
            common,
            preset,
            n,
            heldout,
            out_dir,
        } => cmd_gen_corpus(common, preset, n, heldout, out_dir),
        Command::Fit {
            common,
            corpus,
            context_len,
            alpha,
            kappa,
            out,
        } => cmd_fit(common, corpus, context_len, alpha, kappa, out),
        Command::Sample {
            common,
            model,
            key,
            temperature,
            count,
            out,
        } => cmd_sample(common, model, key, temperature, count, out),
        Command::RcfgSample {
            common,
            model,
            pool,
            reward,
            reward_file,
            gamma,
            set_size,
            nucleus_p,
            temperature,
            count,
            out,
        } => cmd_rcfg_sample(
            common, model, pool, reward, reward_file, gamma, set_size, nucleus_p, temperature,
            count, out,
        ),
        Command::OracleCheck {
            common,
            model,
            pool,
            reward,
            reward_file,
            probes,
            out,
        } => cmd_oracle_check(common, model, pool, reward, reward_file, probes, out),
        Command::Rl {
            common,
            model,
            pool,
            reward,
            reward_file,
            steps,
            learning_rate,
            entropy_coef,
            kl_coef,
            batch_size,
            temperature,
            invalid_penalty,
            checkpoint_interval,
            checkpoint_dir,
            out,
        } => cmd_rl(
            common,
            model,
            pool,
            reward,
            reward_file,
            steps,
            learning_rate,
            entropy_coef,
            kl_coef,
            batch_size,
            temperature,
            invalid_penalty,
            checkpoint_interval,
            checkpoint_dir,
            out,
        ),
        Command::DistillRl {
            common,
            model,
            pool,
            reward,
            reward_file,
            distill_steps,
            distill_lr,
            gamma,
            set_size,
            nucleus_p,
            rl_steps,
            learning_rate,
            entropy_coef,
            kl_coef,
            batch_size,
            temperature,
            experimental_rounds: rounds,
            out_dir,
        } => cmd_distill_rl(
            common,
            model,
            pool,
            reward,
            reward_file,
            distill_steps,
            distill_lr,
            gamma,
            set_size,
            nucleus_p,
            rl_steps,
            learning_rate,
            entropy_coef,
            kl_coef,
            batch_size,
            temperature,
            rounds,
            out_dir,
        ),
        Command::BestOf {
            common,
            model,
            pool,
            reward,
            reward_file,
            n,
            count,
            temperature,
            out,
        } => cmd_best_of(
            common, model, pool, reward, reward_file, n, count, temperature, out,
        ),
        Command::Eval {
            common,
            model,
            pool,
            reward,
            methods,
            seeds,
            n_samples,
            jobs,
            out,
        } => cmd_eval(common, model, pool, reward, methods, seeds, n_samples, jobs, out),
        Command::Sweep {
            common,
            model,
            pool,
            spec,
            jobs,
            out,
        } => cmd_sweep(common, model, pool, spec, jobs, out),
        Command::SelfTest { common } => cmd_self_test(common),
    }
}

// --------------------------------------------------------------------------
// Commands.

fn cmd_gen_corpus(
    common: Common,
    preset: Option<String>,
    n: Option<usize>,
    heldout: Option<usize>,
    out_dir: PathBuf,
) -> Result<()> {
    let cfg = read_config(common.config.as_deref())?;
    let preset_name = resolve(preset, &cfg, "preset", "uniform_valid".to_string())?;
    let preset = CorpusPreset::parse(&preset_name)?;
    let n = resolve(n, &cfg, "n", 50_000)?;
    let heldout_n = resolve(heldout, &cfg, "heldout", (n / 5).max(1))?;

    let mut rng = scoped("gen-corpus:train", common.seed);
    let corpus = sample_corpus(preset, n, &mut rng)?;
    let mut rng = scoped("gen-corpus:heldout", common.seed);
    let heldout_seqs = sample_corpus(preset, heldout_n, &mut rng)?;
    let pool = empirical_property_pool(&heldout_seqs)?;

    fs::create_dir_all(&out_dir)?;
    let corpus_path = out_dir.join("corpus.txt");
    let pool_path = out_dir.join("pool.txt");
    let mut buf = Vec::new();
    write_corpus(&mut buf, &corpus)?;
    fs::write(&corpus_path, &buf)?;
    let mut buf = Vec::new();
    pool.write_to(&mut buf)?;
    fs::write(&pool_path, &buf)?;

    let mut m = Manifest::new("gen-corpus", common.seed);
    m.set("preset", preset.name())
        .set("n", n)
        .set("heldout", heldout_n);
    m.output(&corpus_path)?.output(&pool_path)?;
    m.write(&out_dir.join("gen-corpus.manifest.txt"))?;
    println!(
        "wrote {} training sequences and a {}-sequence pool to {}",
        n,
        heldout_n,
        out_dir.display()
    );
    Ok(())
}

fn cmd_fit(
    common: Common,
    corpus: PathBuf,
    context_len: Option<usize>,
    alpha: Option<f64>,
    kappa: Option<f64>,
    out: PathBuf,
) -> Result<()> {
    let cfg = read_config(common.config.as_deref())?;
    let defaults = ModelConfig::default();
    let config = ModelConfig {
        context_len: resolve(context_len, &cfg, "context_len", defaults.context_len)?,
        alpha: resolve(alpha, &cfg, "alpha", defaults.alpha)?,
        kappa: resolve(kappa, &cfg, "kappa", defaults.kappa)?,
        ..defaults
    };
    let seqs = read_corpus(&mut BufReader::new(fs::File::open(&corpus)?))?;
    let mut rng = scoped("fit:dropout", common.seed);
    let records = seqs
        .iter()
        .map(|s| make_training_record(s, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let model = ConditionalModel::fit(&records, config.clone())?;
    let mut buf = Vec::new();
    model.write_to(&mut buf)?;
    fs::write(&out, &buf)?;

    let mut m = Manifest::new("fit", common.seed);
    m.set("context_len", config.context_len)
        .set("alpha", config.alpha)
        .set("kappa", config.kappa);
    m.input(&corpus)?.output(&out)?;
    m.write(&manifest_path(&out))?;
    println!("fit model on {} sequences -> {}", seqs.len(), out.display());
    Ok(())
}

fn cmd_sample(
    common: Common,
    model_path: PathBuf,
    key: String,
    temperature: Option<f64>,
    count: Option<usize>,
    out: PathBuf,
) -> Result<()> {
    let cfg = read_config(common.config.as_deref())?;
    let temperature = resolve(temperature, &cfg, "temperature", 0.7)?;
    let count = resolve(count, &cfg, "count", 100)?;
    let key = ConditionKey::parse(&key)?;
    let model = load_model(&model_path)?;
    let mut rng = scoped("sample", common.seed);
    let mut buf = Vec::new();
    for _ in 0..count {
        let s = model.sample_sequence(&key, temperature, &mut rng)?;
        write_corpus(&mut buf, std::slice::from_ref(&s))?;
    }
    fs::write(&out, &buf)?;

    let mut m = Manifest::new("sample", common.seed);
    m.set("key", key.canonical_string())
        .set("temperature", temperature)
        .set("count", count);
    m.input(&model_path)?.output(&out)?;
    m.write(&manifest_path(&out))?;
    println!("sampled {count} sequences -> {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_rcfg_sample(
    common: Common,
    model_path: PathBuf,
    pool_path: PathBuf,
    reward: String,
    reward_file: Option<PathBuf>,
    gamma: Option<f64>,
    set_size: Option<usize>,
    nucleus_p: Option<f64>,
    temperature: Option<f64>,
    count: Option<usize>,
    out: PathBuf,
) -> Result<()> {
    let cfg = read_config(common.config.as_deref())?;
    let d = GuidanceConfig::default();
    let gcfg = GuidanceConfig {
        gamma: resolve(gamma, &cfg, "gamma", d.gamma)?,
        set_size: resolve(set_size, &cfg, "set_size", d.set_size)?,
        nucleus_p: resolve(nucleus_p, &cfg, "nucleus_p", d.nucleus_p)?,
        temperature: resolve(temperature, &cfg, "temperature", d.temperature)?,
    };
    let count = resolve(count, &cfg, "count", 100)?;
    let model = load_model(&model_path)?;
    let pool = load_pool(&pool_path)?;
    let r = load_reward(&reward, reward_file.as_deref())?;

    let mut rng = scoped("rcfg-sample", common.seed);
    let mut seq_buf = Vec::new();
    let mut sidecar = String::from("guidance-sets v1\n");
    for i in 0..count {
        let (s, gs) = rcfg_sample(&model, &r, &pool, &gcfg, &mut rng)?;
        write_corpus(&mut seq_buf, std::slice::from_ref(&s))?;
        let keys: Vec<String> = gs.keys.iter().map(|k| k.canonical_string()).collect();
        let rewards: Vec<String> = gs.rewards.iter().map(|x| format!("{x:?}")).collect();
        let advs: Vec<String> = gs.advantages.values.iter().map(|x| format!("{x:?}")).collect();
        sidecar.push_str(&format!(
            "{i}|{}|{}|{}\n",
            keys.join(";"),
            rewards.join(","),
            advs.join(",")
        ));
    }
    fs::write(&out, &seq_buf)?;
    let sidecar_path = manifest_sibling(&out, ".guidance.txt");
    fs::write(&sidecar_path, sidecar)?;

    let mut m = Manifest::new("rcfg-sample", common.seed);
    m.set("reward", &r.name)
        .set("gamma", gcfg.gamma)
        .set("set_size", gcfg.set_size)
        .set("nucleus_p", gcfg.nucleus_p)
        .set("temperature", gcfg.temperature)
        .set("count", count);
    m.input(&model_path)?.input(&pool_path)?;
    m.output(&out)?.output(&sidecar_path)?;
    m.write(&manifest_path(&out))?;
    println!(
        "sampled {count} guided sequences -> {} (+ sidecar {})",
        out.display(),
        sidecar_path.display()
    );
    Ok(())
}

fn manifest_sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out
        .file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    name.push_str(suffix);
    out.with_file_name(name)
}

fn cmd_oracle_check(
    common: Common,
    model_path: PathBuf,
    pool_path: Option<PathBuf>,
    reward: String,
    reward_file: Option<PathBuf>,
    probes: String,
    out: PathBuf,
) -> Result<()> {
    if probes != "default" {
        return Err(Error::Oracle(format!(
            "unknown probe selection {probes:?}; only \"default\" exists"
        )));
    }
    let model = load_model(&model_path)?;
    let pool = match &pool_path {
        Some(p) => load_pool(p)?,
        None => PropertyPool::from_vectors(realized_property_vectors()),
    };
    let r = load_reward(&reward, reward_file.as_deref())?;
    let base = KeyedPolicy {
        model: &model,
        key: ConditionKey::empty(),
    };

    let mut csv = String::from(
        "prefix,token,q_direct,q_bayes,residual,jensen_lhs,jensen_rhs,jensen_gap,tilt_delta,tilt_shift\n",
    );
    let mut ok = true;
    for (prefix, token) in probe_set() {
        if !reaches_valid_outcome(&base, &prefix)? {
            continue;
        }
        let rep = q_report(&base, &prefix, token, &r, &pool)?;
        let weights = prior_reward_weights(&base, &prefix, &r, &pool)?;
        let jr = jensen_gap(&model, &prefix, token, &weights)?;
        let q = q_per_token(&base, &prefix, &r, &pool)?;
        let b = base.next_dist(&prefix);
        let (tilt, shift) = tilt_from_q(&b, &q, 1.0)?;
        let tilt_delta: f64 = (0..q.len())
            .map(|i| (tilt.probs[i] - b.probs[i]) * q[i])
            .sum();
        ok &= rep.residual <= 1e-10 && jr.gap >= -1e-10 && tilt_delta >= -1e-12;
        let prefix_text = prefix
            .tokens()
            .iter()
            .map(|t| t.symbol())
            .collect::<Vec<_>>()
            .join(" ");
        csv.push_str(&format!(
            "{prefix_text},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            token.symbol(),
            rep.q_direct,
            rep.q_bayes,
            rep.residual,
            jr.lhs,
            jr.rhs,
            jr.gap,
            tilt_delta,
            shift
        ));
    }
    fs::write(&out, &csv)?;

    let mut m = Manifest::new("oracle-check", common.seed);
    m.set("reward", &r.name).set("probes", "default");
    m.input(&model_path)?;
    if let Some(p) = &pool_path {
        m.input(p)?;
    }
    m.output(&out)?;
    m.write(&manifest_path(&out))?;

    if ok {
        println!("oracle-check: all probes satisfy the identities -> {}", out.display());
        Ok(())
    } else {
        Err(Error::Oracle(format!(
            "probe invariant violated; see {}",
            out.display()
        )))
    }
}

fn write_trace_csv(path: &Path, trace: &RLTrace) -> Result<()> {
    let mut csv = String::from(trace_csv_header());
    csv.push('\n');
    for row in &trace.rows {
        csv.push_str(&trace_row_csv(row));
        csv.push('\n');
    }
    fs::write(path, csv)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_rl(
    common: Common,
    model_path: PathBuf,
    pool_path: PathBuf,
    reward: String,
    reward_file: Option<PathBuf>,
    steps: Option<usize>,
    learning_rate: Option<f64>,
    entropy_coef: Option<f64>,
    kl_coef: Option<f64>,
    batch_size: Option<usize>,
    temperature: Option<f64>,
    invalid_penalty: Option<f64>,
    checkpoint_interval: Option<usize>,
    checkpoint_dir: Option<PathBuf>,
    out: PathBuf,
) -> Result<()> {
    let cfg = read_config(common.config.as_deref())?;
    let d = RLConfig::default();
    let rl_cfg = RLConfig {
        steps: resolve(steps, &cfg, "steps", d.steps)?,
        learning_rate: resolve(learning_rate, &cfg, "learning_rate", d.learning_rate)?,
        entropy_coef: resolve(entropy_coef, &cfg, "entropy_coef", d.entropy_coef)?,
        kl_coef: resolve(kl_coef, &cfg, "kl_coef", d.kl_coef)?,
        batch_size: resolve(batch_size, &cfg, "batch_size", d.batch_size)?,
        temperature: resolve(temperature, &cfg, "temperature", d.temperature)?,
        invalid_penalty: resolve(invalid_penalty, &cfg, "invalid_penalty", d.invalid_penalty)?,
        checkpoint_interval: resolve(
            checkpoint_interval,
            &cfg,
            "checkpoint_interval",
            d.checkpoint_interval,
        )?,
    };
    let model = load_model(&model_path)?;
    let pool = load_pool(&pool_path)?;
    let r = load_reward(&reward, reward_file.as_deref())?;

    let (trace, _) = run_rl(&model, &r, &pool, &rl_cfg, common.seed)?;
    write_trace_csv(&out, &trace)?;

    let mut m = Manifest::new("rl", common.seed);
    m.set("reward", &r.name)
        .set("steps", rl_cfg.steps)
        .set("learning_rate", rl_cfg.learning_rate)
        .set("entropy_coef", rl_cfg.entropy_coef)
        .set("kl_coef", rl_cfg.kl_coef)
        .set("batch_size", rl_cfg.batch_size)
        .set("temperature", rl_cfg.temperature)
        .set("invalid_penalty", rl_cfg.invalid_penalty)
        .set("checkpoint_interval", rl_cfg.checkpoint_interval);
    m.input(&model_path)?.input(&pool_path)?.output(&out)?;
    if let Some(dir) = &checkpoint_dir {
        fs::create_dir_all(dir)?;
        for (step, text) in &trace.checkpoints {
            let path = dir.join(format!("policy_step_{step}.txt"));
            fs::write(&path, text)?;
            m.output(&path)?;
        }
    }
    m.write(&manifest_path(&out))?;
    println!(
        "rl: {} steps, final mean reward {:?} -> {}",
        rl_cfg.steps,
        trace.rows.last().map(|r| r.mean_reward).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_distill_rl(
    common: Common,
    model_path: PathBuf,
    pool_path: PathBuf,
    reward: String,
    reward_file: Option<PathBuf>,
    distill_steps: Option<usize>,
    distill_lr: Option<f64>,
    gamma: Option<f64>,
    set_size: Option<usize>,
    nucleus_p: Option<f64>,
    rl_steps: Option<usize>,
    learning_rate: Option<f64>,
    entropy_coef: Option<f64>,
    kl_coef: Option<f64>,
    batch_size: Option<usize>,
    temperature: Option<f64>,
    rounds: usize,
    out_dir: PathBuf,
) -> Result<()> {
    let cfg = read_config(common.config.as_deref())?;
    let dd = DistillConfig::default();
    let gd = dd.teacher_guidance;
    let dcfg = DistillConfig {
        steps: resolve(distill_steps, &cfg, "distill_steps", dd.steps)?,
        learning_rate: resolve(distill_lr, &cfg, "distill_lr", dd.learning_rate)?,
        batch_size: resolve(batch_size, &cfg, "batch_size", dd.batch_size)?,
        teacher_guidance: GuidanceConfig {
            gamma: resolve(gamma, &cfg, "gamma", gd.gamma)?,
            set_size: resolve(set_size, &cfg, "set_size", gd.set_size)?,
            nucleus_p: resolve(nucleus_p, &cfg, "nucleus_p", gd.nucleus_p)?,
            temperature: resolve(temperature, &cfg, "temperature", gd.temperature)?,
        },
    };
    let rd = RLConfig::default();
    let rl_cfg = RLConfig {
        steps: resolve(rl_steps, &cfg, "rl_steps", rd.steps)?,
        learning_rate: resolve(learning_rate, &cfg, "learning_rate", rd.learning_rate)?,
        entropy_coef: resolve(entropy_coef, &cfg, "entropy_coef", rd.entropy_coef)?,
        kl_coef: resolve(kl_coef, &cfg, "kl_coef", rd.kl_coef)?,
        batch_size: dcfg.batch_size,
        temperature: dcfg.teacher_guidance.temperature,
        ..rd
    };
    let model = load_model(&model_path)?;
    let pool = load_pool(&pool_path)?;
    let r = load_reward(&reward, reward_file.as_deref())?;

    fs::create_dir_all(&out_dir)?;
    let out = warm_start_rl(&model, &r, &pool, &dcfg, &rl_cfg, common.seed)?;
    let warm_path = out_dir.join("warm_trace.csv");
    let cold_path = out_dir.join("cold_trace.csv");
    write_trace_csv(&warm_path, &out.warm)?;
    write_trace_csv(&cold_path, &out.cold)?;
    let kl_path = out_dir.join("distill_kl.csv");
    let mut kl_csv = String::from("step,mean_kl\n");
    for (i, kl) in out.distill_kls.iter().enumerate() {
        kl_csv.push_str(&format!("{},{:?}\n", i + 1, kl));
    }
    fs::write(&kl_path, kl_csv)?;

    let summary_path = out_dir.join("summary.txt");
    let row_at = |t: &RLTrace, step: usize| {
        t.rows
            .iter()
            .find(|row| row.step == step.min(t.rows.last().map(|r| r.step).unwrap_or(0)))
            .cloned()
    };
    let mut summary = String::from("distill-rl summary\n");
    summary.push_str(&format!("reward {}\n", r.name));
    summary.push_str(&format!(
        "distill steps {} first_kl {:?} last_kl {:?}\n",
        out.distill_kls.len(),
        out.distill_kls.first().copied().unwrap_or(f64::NAN),
        out.distill_kls.last().copied().unwrap_or(f64::NAN)
    ));
    for step in [0, rl_cfg.steps / 2, rl_cfg.steps] {
        if let (Some(w), Some(c)) = (row_at(&out.warm, step), row_at(&out.cold, step)) {
            summary.push_str(&format!(
                "step {step}: warm mean {:?} norm {:?} | cold mean {:?} norm {:?}\n",
                w.mean_reward, w.norm_reward, c.mean_reward, c.norm_reward
            ));
        }
    }
    fs::write(&summary_path, summary)?;

    let mut m = Manifest::new("distill-rl", common.seed);
    m.set("reward", &r.name)
        .set("distill_steps", dcfg.steps)
        .set("distill_lr", dcfg.learning_rate)
        .set("gamma", dcfg.teacher_guidance.gamma)
        .set("set_size", dcfg.teacher_guidance.set_size)
        .set("nucleus_p", dcfg.teacher_guidance.nucleus_p)
        .set("rl_steps", rl_cfg.steps)
        .set("batch_size", dcfg.batch_size)
        .set("temperature", rl_cfg.temperature)
        .set("experimental_rounds", rounds);
    m.input(&model_path)?.input(&pool_path)?;
    m.output(&warm_path)?
        .output(&cold_path)?
        .output(&kl_path)?
        .output(&summary_path)?;

    if rounds > 0 {
        let traces = experimental_rounds(&model, &r, &pool, &dcfg, &rl_cfg, rounds, common.seed)?;
        for (i, trace) in traces.iter().enumerate() {
            let path = out_dir.join(format!("round_{i}_trace.csv"));
            write_trace_csv(&path, trace)?;
            m.output(&path)?;
        }
    }
    m.write(&out_dir.join("distill-rl.manifest.txt"))?;
    println!("distill-rl artifacts written to {}", out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_best_of(
    common: Common,
    model_path: PathBuf,
    pool_path: PathBuf,
    reward: String,
    reward_file: Option<PathBuf>,
    n: Option<usize>,
    count: Option<usize>,
    temperature: Option<f64>,
    out: PathBuf,
) -> Result<()> {
    let cfg = read_config(common.config.as_deref())?;
    let n = resolve(n, &cfg, "n", 4)?;
    let count = resolve(count, &cfg, "count", 2_000)?;
    let temperature = resolve(temperature, &cfg, "temperature", 0.7)?;
    let model = load_model(&model_path)?;
    let pool = load_pool(&pool_path)?;
    let r = load_reward(&reward, reward_file.as_deref())?;

    let baseline = exact_policy_value(
        &TemperedPolicy {
            inner: KeyedPolicy {
                model: &model,
                key: ConditionKey::empty(),
            },
            temperature,
        },
        &r,
        &pool,
    )?;
    let (_, r_star) = optimal_y(&r, &pool)?;
    let row = evaluate_policy(
        |rng| {
            best_of_n(
                |rng| model.sample_sequence(&ConditionKey::empty(), temperature, rng),
                &r,
                &pool,
                n,
                rng,
            )
            .map(|(s, _)| s)
        },
        &r,
        &pool,
        baseline,
        r_star,
        count,
        common.seed,
        &format!("best_of_{n}"),
    )?;
    let csv = format!(
        "{}\ndata,{},{},{},{},{:?},{:?},{:?},{:?},\n",
        metrics_csv_header(),
        row.method,
        row.reward_name,
        row.seed,
        row.n_samples,
        row.mean_reward,
        row.norm_reward,
        row.validity,
        row.diversity
    );
    fs::write(&out, csv)?;

    let mut m = Manifest::new("best-of", common.seed);
    m.set("reward", &r.name)
        .set("n", n)
        .set("count", count)
        .set("temperature", temperature);
    m.input(&model_path)?.input(&pool_path)?.output(&out)?;
    m.write(&manifest_path(&out))?;
    println!(
        "best-of-{n}: mean reward {:?}, normalized {:?} -> {}",
        row.mean_reward,
        row.norm_reward,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    common: Common,
    model_path: PathBuf,
    pool_path: PathBuf,
    reward: String,
    methods: Vec<String>,
    seeds: String,
    n_samples: Option<usize>,
    jobs: usize,
    out: PathBuf,
) -> Result<()> {
    let cfg = read_config(common.config.as_deref())?;
    let n_samples = resolve(n_samples, &cfg, "n_samples", crate::harness::DEFAULT_N_SAMPLES)?;
    let methods = methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<Vec<_>>>()?;
    let seeds = seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad seed {s:?}")))
        })
        .collect::<Result<Vec<u64>>>()?;
    let spec = SweepSpec {
        rewards: vec![reward.clone()],
        methods,
        seeds,
        n_samples,
    };
    let model = load_model(&model_path)?;
    let pool = load_pool(&pool_path)?;
    let report = run_sweep(&spec, &model, &pool, jobs)?;
    fs::write(&out, &report.csv)?;

    let mut m = Manifest::new("eval", common.seed);
    m.set("reward", &reward)
        .set("n_samples", n_samples)
        .set("spec_digest", sha256_hex(spec.render().as_bytes()));
    m.input(&model_path)?.input(&pool_path)?.output(&out)?;
    m.write(&manifest_path(&out))?;
    println!("eval: {} rows -> {}", report.rows.len(), out.display());
    Ok(())
}

fn cmd_sweep(
    common: Common,
    model_path: PathBuf,
    pool_path: PathBuf,
    spec_path: Option<PathBuf>,
    jobs: usize,
    out: PathBuf,
) -> Result<()> {
    let spec = match &spec_path {
        Some(p) => SweepSpec::parse(&fs::read_to_string(p)?)?,
        None => crate::harness::default_sweep_spec(),
    };
    let model = load_model(&model_path)?;
    let pool = load_pool(&pool_path)?;
    let report = run_sweep(&spec, &model, &pool, jobs)?;
    fs::write(&out, &report.csv)?;

    let mut m = Manifest::new("sweep", common.seed);
    m.set("spec_digest", sha256_hex(spec.render().as_bytes()))
        .set(
            "seeds",
            spec.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        )
        .set("n_samples", spec.n_samples);
    if let Some(p) = &spec_path {
        m.input(p)?;
    }
    m.input(&model_path)?.input(&pool_path)?.output(&out)?;
    m.write(&manifest_path(&out))?;
    println!("sweep: {} data rows -> {}", report.rows.len(), out.display());
    Ok(())
}

// --------------------------------------------------------------------------
// Self-test.

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn cmd_self_test(common: Common) -> Result<()> {
    let checks = self_test_checks(common.seed)?;
    let mut failed = 0;
    for c in &checks {
        let tag = if c.passed { "ok  " } else { "FAIL" };
        println!("{tag} {} — {}", c.name, c.detail);
        if !c.passed {
            failed += 1;
        }
    }
    if failed == 0 {
        println!("self-test: {} checks passed", checks.len());
        Ok(())
    } else {
        Err(Error::Harness(format!(
            "self-test: {failed} of {} checks failed",
            checks.len()
        )))
    }
}

fn self_test_checks(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    // Self-contained mini corpus and model; no artifacts required.
    let mut rng = scoped("self-test:corpus", seed);
    let corpus = sample_corpus(CorpusPreset::UniformValid, 6_000, &mut rng)?;
    let records = corpus
        .iter()
        .map(|s| make_training_record(s, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let model = ConditionalModel::fit(&records, ModelConfig::default())?;
    let pool = PropertyPool::from_vectors(realized_property_vectors());
    let base = KeyedPolicy {
        model: &model,
        key: ConditionKey::empty(),
    };
    let r = builtin_reward("tradeoff_AD")?;

    // Standardization basics.
    let s = standardize(&[1.0, 2.0, 3.0, 4.0])?.values;
    let expect = 1.3416407864998738;
    let affine_in: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|x| 3.0 * x + 7.0).collect();
    let std_ok = (s[3] - expect).abs() < 1e-12
        && standardize(&affine_in)?.values == s
        && standardize(&[2.0, 2.0])?.values == vec![0.0, 0.0];
    checks.push(check(
        "standardize",
        std_ok,
        format!("top value {:?}, affine + degenerate cases", s[3]),
    ));

    // Dual-route Q identity on a probe subset.
    let probes: Vec<_> = probe_set().into_iter().take(30).collect();
    let mut max_resid = 0.0f64;
    for (prefix, token) in &probes {
        max_resid = max_resid.max(q_report(&base, prefix, *token, &r, &pool)?.residual);
    }
    checks.push(check(
        "q-identity",
        max_resid <= 1e-10,
        format!("max residual {max_resid:.3e} over {} probes", probes.len()),
    ));

    // Log-ratio averaging bound.
    let mut min_gap = f64::INFINITY;
    for (prefix, token) in probes.iter().take(20) {
        if !reaches_valid_outcome(&base, prefix)? {
            continue;
        }
        let weights = prior_reward_weights(&base, prefix, &r, &pool)?;
        min_gap = min_gap.min(jensen_gap(&model, prefix, *token, &weights)?.gap);
    }
    checks.push(check(
        "averaging-bound",
        min_gap >= -1e-10,
        format!("min gap {min_gap:.3e}"),
    ));

    // Guidance reduction identities (bit-exact at the logit level).
    let mut grng = scoped("self-test:guidance", seed);
    let gs = draw_guidance_set(&pool, &r, 8, &mut grng)?;
    let gs1 = draw_guidance_set(&pool, &r, 1, &mut grng)?;
    let constant = crate::reward::RewardFunction::new(
        "const",
        &[],
        crate::reward::Expr::Constant(2.0),
        &[],
    )?;
    let gs_const = draw_guidance_set(&pool, &constant, 8, &mut grng)?;
    let mut ident_ok = true;
    for (prefix, _) in probes.iter().take(10) {
        let lu = model
            .next_token_dist(&ConditionKey::empty(), prefix)
            .log_probs();
        ident_ok &= rcfg_logits(&model, prefix, &gs, 0.0) == lu;
        ident_ok &= rcfg_logits(&model, prefix, &gs1, 2.0) == lu;
        ident_ok &= rcfg_logits(&model, prefix, &gs_const, 2.0) == lu;
    }
    checks.push(check(
        "reduction-identities",
        ident_ok,
        "gamma=0, single-member, constant-reward all equal base logits".into(),
    ));

    // Analytic gradients against central finite differences.
    checks.push(gradient_checks(&model, &pool, &r, seed)?);

    // Guided one-step distributions track the exact tilt: rank correlation
    // and argmax-in-top-2 agreement, averaged over three rewards and every
    // reachable probe prefix. The flipped-sign stats feed the tripwire.
    let stats = tilt_correlation(&model, &pool)?;
    let correct_ok = stats.spearman >= 0.7 && stats.top2 >= 0.8;
    checks.push(check(
        "tilt-correlation",
        correct_ok,
        format!(
            "mean Spearman {:.3} (>= 0.7), argmax-in-top-2 {:.3} (>= 0.8)",
            stats.spearman, stats.top2
        ),
    ));

    // Mutation tripwire: a sign-flipped guidance term must still pass the
    // gamma=0 identity but fail the tilt-correlation check, proving the
    // check can actually catch a broken implementation.
    let mut flip_id_ok = true;
    for (prefix, _) in probes.iter().take(10) {
        let lu = model
            .next_token_dist(&ConditionKey::empty(), prefix)
            .log_probs();
        flip_id_ok &= rcfg_logits_sign_flip_fixture(&model, prefix, &gs, 0.0) == lu;
    }
    let flipped_fails = !(stats.flipped_spearman >= 0.7 && stats.flipped_top2 >= 0.8);
    checks.push(check(
        "mutation-tripwire",
        flip_id_ok && flipped_fails,
        format!(
            "flipped-sign Spearman {:.3}, top-2 {:.3} (identity still holds)",
            stats.flipped_spearman, stats.flipped_top2
        ),
    ));

    Ok(checks)
}

fn gradient_checks(
    model: &ConditionalModel,
    pool: &PropertyPool,
    r: &RewardFunction,
    seed: u64,
) -> Result<Check> {
    let step = 1e-5;
    let mut max_rel = 0.0f64;

    // Policy-gradient surrogate.
    let policy = SoftmaxPolicy::new(model);
    let cfg = RLConfig {
        batch_size: 4,
        ..RLConfig::default()
    };
    let mut rng = scoped("self-test:pg", seed);
    let batch = rollout_batch(&policy, 4, cfg.temperature, r, pool, &mut rng)?;
    let rewards: Vec<f64> = batch.iter().map(|(_, r)| *r).collect();
    let advantages = standardize(&rewards)?.values;
    let grad = surrogate_gradient(&policy, &batch, &advantages, &cfg)?;
    let mut contexts = Vec::new();
    for (seq, _) in &batch {
        let mut prefix = crate::domain::Prefix::empty();
        for &tok in seq.tokens() {
            if prefix.len() >= model.config.l_max {
                break;
            }
            if contexts.len() < 3 && !contexts.contains(&prefix) {
                contexts.push(prefix.clone());
            }
            if tok == Token::Eos {
                break;
            }
            prefix = prefix.push(tok)?;
        }
    }
    for prefix in &contexts {
        let g = grad[&policy.context_code_of(prefix)];
        for t in Token::ALL {
            let mut plus = policy.clone();
            plus.nudge(prefix, t, step);
            let mut minus = policy.clone();
            minus.nudge(prefix, t, -step);
            let fd = (surrogate_objective(&plus, &batch, &advantages, &cfg)?
                - surrogate_objective(&minus, &batch, &advantages, &cfg)?)
                / (2.0 * step);
            let denom = fd.abs().max(g[t.id()].abs()).max(1e-6);
            max_rel = max_rel.max((fd - g[t.id()]).abs() / denom);
        }
    }

    // Distillation KL gradient on a 3-context fixture.
    let mut grng = scoped("self-test:kl", seed);
    let gs = draw_guidance_set(pool, r, 8, &mut grng)?;
    let gcfg = GuidanceConfig::default();
    let pairs: Vec<(crate::domain::Prefix, crate::model::TokenDist)> = contexts
        .iter()
        .map(|p| (p.clone(), crate::distill::teacher_dist(model, &gcfg, &gs, p)))
        .collect();
    let kl_grad = crate::distill::kl_gradient(&policy, &pairs);
    for prefix in &contexts {
        let g = kl_grad[&policy.context_code_of(prefix)];
        for t in Token::ALL {
            let mut plus = policy.clone();
            plus.nudge(prefix, t, step);
            let mut minus = policy.clone();
            minus.nudge(prefix, t, -step);
            let fd = (crate::distill::kl_objective(&plus, &pairs)
                - crate::distill::kl_objective(&minus, &pairs))
                / (2.0 * step);
            let denom = fd.abs().max(g[t.id()].abs()).max(1e-6);
            max_rel = max_rel.max((fd - g[t.id()]).abs() / denom);
        }
    }

    Ok(check(
        "gradient-checks",
        max_rel <= 1e-4,
        format!("max relative error {max_rel:.3e}"),
    ))
}

struct TiltAgreement {
    spearman: f64,
    top2: f64,
    flipped_spearman: f64,
    flipped_top2: f64,
}

/// Agreement between the guided one-step distribution (exact-prior
/// weighting, gamma=2) and the exact Q-tilt: mean Spearman rank
/// correlation and argmax-in-top-2 rate, averaged over three rewards and
/// all reachable probe prefixes. Also reports the same statistics for a
/// sign-flipped guidance term, feeding the mutation tripwire.
fn tilt_correlation(model: &ConditionalModel, pool: &PropertyPool) -> Result<TiltAgreement> {
    let base = KeyedPolicy {
        model,
        key: ConditionKey::empty(),
    };
    let gamma = 2.0;
    let mut totals = [0.0f64; 2];
    let mut top2_hits = [0usize; 2];
    let mut count = 0usize;
    for name in ["target_depth", "lipophilic_analog", "profile_3"] {
        let r = builtin_reward(name)?;
        for (prefix, _) in probe_set() {
            if !reaches_valid_outcome(&base, &prefix)? {
                continue;
            }
            let weights = prior_reward_weights(&base, &prefix, &r, pool)?;
            let (tilt, _) = exact_tilt_dist(&base, &prefix, &r, pool, gamma)?;
            let mut tilt_order: Vec<usize> = (0..tilt.probs.len()).collect();
            tilt_order.sort_by(|&a, &b| tilt.probs[b].partial_cmp(&tilt.probs[a]).unwrap());
            for (slot, g) in [gamma, -gamma].into_iter().enumerate() {
                let guided = softmax(&rcfg_logits_exact_prior(model, &prefix, &weights, g)?);
                totals[slot] += spearman(&guided.probs, &tilt.probs);
                let argmax = guided
                    .probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                if tilt_order[..2].contains(&argmax) {
                    top2_hits[slot] += 1;
                }
            }
            count += 1;
        }
    }
    let n = count as f64;
    Ok(TiltAgreement {
        spearman: totals[0] / n,
        top2: top2_hits[0] as f64 / n,
        flipped_spearman: totals[1] / n,
        flipped_top2: top2_hits[1] as f64 / n,
    })
}
