//! Python bindings for the guided-sampling laboratory: corpus generation,
//! count-model fitting and sampling, built-in rewards, reward-weighted
//! guided sampling, and the exact oracle checks.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rcfg_core::corpus::{
    empirical_property_pool, make_training_record, sample_corpus, ConditionKey, CorpusPreset,
    PropertyPool,
};
use rcfg_core::domain::{extract_properties, validate, Prefix, Sequence, Token, VOCAB};
use rcfg_core::guidance::{rcfg_sample, GuidanceConfig};
use rcfg_core::model::{ConditionalModel, KeyedPolicy, ModelConfig};
use rcfg_core::oracle::{jensen_gap, prior_reward_weights, probe_set, q_report};
use rcfg_core::reward::{
    builtin_reward, builtin_rewards, evaluate_reward, realized_property_vectors, RewardFunction,
};
use rcfg_core::rng::scoped;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_sequences(lines: &[String]) -> PyResult<Vec<Sequence>> {
    lines.iter().map(|l| Sequence::parse(l).map_err(err)).collect()
}

fn parse_prefix(text: &str) -> PyResult<Prefix> {
    let tokens: Vec<Token> = text
        .split_whitespace()
        .map(|s| Token::from_symbol(s).ok_or_else(|| err(format!("unknown token {s:?}"))))
        .collect::<PyResult<_>>()?;
    Prefix::new(&tokens).map_err(err)
}

/// A pool of realized property vectors; guidance-set members and reward
/// percentiles are drawn from it.
#[pyclass(name = "Pool")]
struct PyPool {
    inner: PropertyPool,
}

#[pymethods]
impl PyPool {
    /// Pool over every property vector realized by some valid sequence.
    #[staticmethod]
    fn full() -> PyPool {
        PyPool {
            inner: PropertyPool::from_vectors(realized_property_vectors()),
        }
    }

    /// Empirical pool from held-out sequences (one rendered sequence per line).
    #[staticmethod]
    fn from_sequences(lines: Vec<String>) -> PyResult<PyPool> {
        let seqs = parse_sequences(&lines)?;
        Ok(PyPool {
            inner: empirical_property_pool(&seqs).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.items().len()
    }
}

/// A named reward over property vectors.
#[pyclass(name = "Reward")]
struct PyReward {
    inner: RewardFunction,
}

#[pymethods]
impl PyReward {
    /// Look up a built-in reward by name.
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<PyReward> {
        Ok(PyReward {
            inner: builtin_reward(name).map_err(err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn depends_on(&self) -> Vec<String> {
        self.inner.depends_on.iter().cloned().collect()
    }

    /// Reward of a complete sequence's property vector under `pool`.
    fn evaluate(&self, sequence: &str, pool: &PyPool) -> PyResult<f64> {
        let seq = Sequence::parse(sequence).map_err(err)?;
        let y = extract_properties(&seq).map_err(err)?;
        evaluate_reward(&self.inner, &y, &pool.inner).map_err(err)
    }
}

/// Smoothed conditional count model over token contexts.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ConditionalModel,
}

#[pymethods]
impl PyModel {
    /// Fit on rendered sequences; per-record condition-key dropout uses a
    /// stream derived from `seed`.
    #[staticmethod]
    #[pyo3(signature = (lines, seed=0))]
    fn fit(lines: Vec<String>, seed: u64) -> PyResult<PyModel> {
        let seqs = parse_sequences(&lines)?;
        let mut rng = scoped("py:fit", seed);
        let records = seqs
            .iter()
            .map(|s| make_training_record(s, &mut rng))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        Ok(PyModel {
            inner: ConditionalModel::fit(&records, ModelConfig::default()).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<PyModel> {
        let file = std::fs::File::open(path).map_err(err)?;
        let mut reader = std::io::BufReader::new(file);
        Ok(PyModel {
            inner: ConditionalModel::read_from(&mut reader).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mut buf = Vec::new();
        self.inner.write_to(&mut buf).map_err(err)?;
        std::fs::write(path, buf).map_err(err)
    }

    /// Next-token probabilities `[A, B, LP, RP, EOS]` after `prefix`,
    /// conditioned on `key` ("name=value;..." or "" for unconditional).
    #[pyo3(signature = (prefix, key=""))]
    fn next_dist(&self, prefix: &str, key: &str) -> PyResult<Vec<f64>> {
        let prefix = parse_prefix(prefix)?;
        let key = ConditionKey::parse(key).map_err(err)?;
        Ok(self.inner.next_token_dist(&key, &prefix).probs.to_vec())
    }

    /// Log probability of a complete rendered sequence (EOS step included).
    #[pyo3(signature = (sequence, key=""))]
    fn log_prob(&self, sequence: &str, key: &str) -> PyResult<f64> {
        let seq = Sequence::parse(sequence).map_err(err)?;
        let key = ConditionKey::parse(key).map_err(err)?;
        Ok(self.inner.log_prob(&key, &seq))
    }

    /// Draw `n` sequences autoregressively at `temperature`.
    #[pyo3(signature = (n, seed=0, temperature=0.7, key=""))]
    fn sample(&self, n: usize, seed: u64, temperature: f64, key: &str) -> PyResult<Vec<String>> {
        let key = ConditionKey::parse(key).map_err(err)?;
        let mut rng = scoped("py:sample", seed);
        (0..n)
            .map(|_| {
                self.inner
                    .sample_sequence(&key, temperature, &mut rng)
                    .map(|s| s.to_string())
                    .map_err(err)
            })
            .collect()
    }

    /// Draw `n` reward-guided sequences; each draws a fresh guidance set.
    #[pyo3(signature = (reward, pool, n, seed=0, gamma=2.0, set_size=8, nucleus_p=0.95, temperature=0.7))]
    #[allow(clippy::too_many_arguments)]
    fn guided_sample(
        &self,
        reward: &PyReward,
        pool: &PyPool,
        n: usize,
        seed: u64,
        gamma: f64,
        set_size: usize,
        nucleus_p: f64,
        temperature: f64,
    ) -> PyResult<Vec<String>> {
        let cfg = GuidanceConfig {
            gamma,
            set_size,
            nucleus_p,
            temperature,
        };
        let mut rng = scoped("py:guided-sample", seed);
        (0..n)
            .map(|_| {
                rcfg_sample(&self.inner, &reward.inner, &pool.inner, &cfg, &mut rng)
                    .map(|(s, _)| s.to_string())
                    .map_err(err)
            })
            .collect()
    }

    /// Exact-oracle consistency over the frozen probe set: returns
    /// `(max_q_residual, min_jensen_gap)`. The residual compares the direct
    /// and Bayes-decomposed Q computations; the gap is the log-ratio
    /// averaging bound, checked wherever prior-reward weights exist.
    fn oracle_check(&self, reward: &PyReward, pool: &PyPool) -> PyResult<(f64, f64)> {
        let base = KeyedPolicy {
            model: &self.inner,
            key: ConditionKey::empty(),
        };
        let mut max_resid = 0.0f64;
        let mut min_gap = f64::INFINITY;
        for (prefix, token) in probe_set() {
            let report = q_report(&base, &prefix, token, &reward.inner, &pool.inner).map_err(err)?;
            max_resid = max_resid.max(report.residual);
            if let Ok(w) = prior_reward_weights(&base, &prefix, &reward.inner, &pool.inner) {
                let g = jensen_gap(&self.inner, &prefix, token, &w).map_err(err)?;
                min_gap = min_gap.min(g.gap);
            }
        }
        Ok((max_resid, min_gap))
    }
}

/// Draw a corpus from a preset ("uniform_valid", "length_tilted", or
/// "correlated").
#[pyfunction]
#[pyo3(signature = (preset, n, seed=0))]
fn gen_corpus(preset: &str, n: usize, seed: u64) -> PyResult<Vec<String>> {
    let preset = CorpusPreset::parse(preset).map_err(err)?;
    let mut rng = scoped("py:gen-corpus", seed);
    Ok(sample_corpus(preset, n, &mut rng)
        .map_err(err)?
        .iter()
        .map(|s| s.to_string())
        .collect())
}

/// Names of the built-in reward suite.
#[pyfunction]
fn reward_names() -> Vec<String> {
    builtin_rewards().iter().map(|r| r.name.clone()).collect()
}

/// Whether a rendered sequence is valid (balanced brackets, >= 1 letter).
#[pyfunction]
fn is_valid(sequence: &str) -> PyResult<bool> {
    let seq = Sequence::parse(sequence).map_err(err)?;
    Ok(validate(&seq).is_valid())
}

/// Property vector of a valid sequence as a dict.
#[pyfunction]
fn properties(py: Python<'_>, sequence: &str) -> PyResult<Py<PyDict>> {
    let seq = Sequence::parse(sequence).map_err(err)?;
    let y = extract_properties(&seq).map_err(err)?;
    let d = PyDict::new(py);
    for name in rcfg_core::domain::PROPERTY_NAMES {
        d.set_item(name, y.get(name).expect("known property"))?;
    }
    Ok(d.into())
}

#[pymodule]
fn rcfg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyPool>()?;
    m.add_class::<PyReward>()?;
    m.add_function(wrap_pyfunction!(gen_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(reward_names, m)?)?;
    m.add_function(wrap_pyfunction!(is_valid, m)?)?;
    m.add_function(wrap_pyfunction!(properties, m)?)?;
    m.add("VOCAB", VOCAB)?;
    m.add("TOKENS", vec!["A", "B", "LP", "RP", "EOS"])?;
    Ok(())
}
