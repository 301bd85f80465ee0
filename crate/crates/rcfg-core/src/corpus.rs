//! Training corpora, conditioning-dropout records, and the held-out
//! property pool that guidance sets are sampled from.

use crate::domain::{
    all_valid_sequences, extract_properties, validate, PropertyVector, Sequence, L_MAX,
    NUMERIC_PROPERTY_NAMES, PROPERTY_NAMES,
};
use crate::error::{Error, Result};
use rand::seq::IndexedRandom;
use rand::Rng;
use std::fmt;
use std::io::{BufRead, Write};

/// Probability that a training record keeps the full property config.
pub const FULL_CONFIG_PROB: f64 = 0.2;

/// Reweighting strength of the correlated corpus preset.
pub const CORRELATED_BETA: f64 = 1.0;

/// A sorted set of (property name, discretized value) pairs. The empty key
/// denotes the unconditional model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConditionKey {
    entries: Vec<(String, String)>,
}

impl ConditionKey {
    pub fn empty() -> ConditionKey {
        ConditionKey::default()
    }

    pub fn new(mut entries: Vec<(String, String)>) -> Result<ConditionKey> {
        entries.sort();
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Corpus(format!("duplicate key name {:?}", w[0].0)));
            }
        }
        Ok(ConditionKey { entries })
    }

    /// Key holding the named properties of `y`.
    pub fn from_properties(y: &PropertyVector, names: &[&str]) -> Result<ConditionKey> {
        let entries = names
            .iter()
            .map(|n| {
                y.render(n)
                    .map(|v| (n.to_string(), v))
                    .ok_or_else(|| Error::Corpus(format!("unknown property {n:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        ConditionKey::new(entries)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Deterministic serialization: `name=value;...` sorted by name.
    pub fn canonical_string(&self) -> String {
        self.entries
            .iter()
            .map(|(n, v)| format!("{n}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn parse(s: &str) -> Result<ConditionKey> {
        if s.is_empty() {
            return Ok(ConditionKey::empty());
        }
        let entries = s
            .split(';')
            .map(|kv| {
                kv.split_once('=')
                    .map(|(n, v)| (n.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Parse(format!("bad key entry {kv:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        ConditionKey::new(entries)
    }
}

impl fmt::Display for ConditionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_string())
    }
}

/// A sequence paired with the (possibly dropped-out) conditioning key it
/// is trained under.
#[derive(Debug, Clone)]
pub struct ConditionedRecord {
    pub key: ConditionKey,
    pub seq: Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusPreset {
    UniformValid,
    Correlated,
}

impl CorpusPreset {
    pub fn parse(s: &str) -> Result<CorpusPreset> {
        match s {
            "uniform_valid" => Ok(CorpusPreset::UniformValid),
            "correlated" => Ok(CorpusPreset::Correlated),
            _ => Err(Error::Parse(format!("unknown preset {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CorpusPreset::UniformValid => "uniform_valid",
            CorpusPreset::Correlated => "correlated",
        }
    }
}

/// +1 when n_A and body length agree (both high or both low), else -1.
/// The correlated preset upweights agreement, reproducing the
/// positively-correlated-properties regime.
pub fn corr_score(y: &PropertyVector) -> f64 {
    if (y.n_a >= 2 && y.len_bin >= 3) || (y.n_a <= 1 && y.len_bin <= 2) {
        1.0
    } else {
        -1.0
    }
}

/// Samples `n` valid sequences (with replacement) from the full valid set
/// at L_MAX, uniformly or reweighted by `exp(beta * corr_score)`.
pub fn sample_corpus<R: Rng>(preset: CorpusPreset, n: usize, rng: &mut R) -> Result<Vec<Sequence>> {
    if n == 0 {
        return Err(Error::Corpus("corpus size must be >= 1".into()));
    }
    let valid = all_valid_sequences(L_MAX)?;
    match preset {
        CorpusPreset::UniformValid => Ok((0..n)
            .map(|_| valid.choose(rng).expect("valid set nonempty").clone())
            .collect()),
        CorpusPreset::Correlated => {
            let weights: Vec<f64> = valid
                .iter()
                .map(|s| (CORRELATED_BETA * corr_score(&extract_properties(s).expect("valid"))).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut cdf = Vec::with_capacity(weights.len());
            let mut acc = 0.0;
            for w in &weights {
                acc += w;
                cdf.push(acc);
            }
            Ok((0..n)
                .map(|_| {
                    let u: f64 = rng.random::<f64>() * total;
                    let idx = cdf.partition_point(|&c| c < u).min(valid.len() - 1);
                    valid[idx].clone()
                })
                .collect())
        }
    }
}

/// Applies the conditioning-dropout scheme: with probability
/// [`FULL_CONFIG_PROB`] keep all four properties, otherwise keep k
/// uniformly chosen names with k drawn uniformly from 0..=3. k=0 yields
/// the empty key, which trains the unconditional model explicitly.
pub fn make_training_record<R: Rng>(seq: &Sequence, rng: &mut R) -> Result<ConditionedRecord> {
    if !validate(seq).is_valid() {
        return Err(Error::Corpus(format!("cannot condition on invalid sequence {seq}")));
    }
    let y = extract_properties(seq)?;
    let names: Vec<&str> = if rng.random::<f64>() < FULL_CONFIG_PROB {
        PROPERTY_NAMES.to_vec()
    } else {
        let k = rng.random_range(0..PROPERTY_NAMES.len());
        let mut pool = PROPERTY_NAMES.to_vec();
        let mut chosen = Vec::with_capacity(k);
        for _ in 0..k {
            let i = rng.random_range(0..pool.len());
            chosen.push(pool.swap_remove(i));
        }
        chosen
    };
    Ok(ConditionedRecord {
        key: ConditionKey::from_properties(&y, &names)?,
        seq: seq.clone(),
    })
}

/// Forces one branch of the dropout mixture; used by tests and by callers
/// that need the full-config record deterministically.
pub fn full_config_record(seq: &Sequence) -> Result<ConditionedRecord> {
    let y = extract_properties(seq)?;
    Ok(ConditionedRecord {
        key: ConditionKey::from_properties(&y, &PROPERTY_NAMES)?,
        seq: seq.clone(),
    })
}

/// Multiset of property vectors from held-out valid sequences plus
/// nearest-rank p10/p90 percentiles for the numeric properties.
#[derive(Debug, Clone)]
pub struct PropertyPool {
    pub items: Vec<PropertyVector>,
    /// (property name, p10, p90), in NUMERIC_PROPERTY_NAMES order.
    pub percentiles: Vec<(String, f64, f64)>,
}

/// Nearest-rank percentile: with values sorted ascending, the p-th
/// percentile is the ceil(p/100 * n)-th value (1-based).
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Builds the empirical pool from a held-out corpus of valid sequences.
pub fn empirical_property_pool(heldout: &[Sequence]) -> Result<PropertyPool> {
    if heldout.is_empty() {
        return Err(Error::Corpus("empty held-out corpus".into()));
    }
    let items = heldout
        .iter()
        .map(extract_properties)
        .collect::<Result<Vec<_>>>()?;
    Ok(PropertyPool::from_vectors(items))
}

impl PropertyPool {
    pub fn from_vectors(items: Vec<PropertyVector>) -> PropertyPool {
        let percentiles = NUMERIC_PROPERTY_NAMES
            .iter()
            .map(|name| {
                let mut vals: Vec<f64> = items.iter().map(|y| y.get(name).unwrap()).collect();
                vals.sort_by(f64::total_cmp);
                (name.to_string(), nearest_rank(&vals, 10.0), nearest_rank(&vals, 90.0))
            })
            .collect();
        PropertyPool { items, percentiles }
    }

    /// The raw multiset of pooled property vectors.
    pub fn items(&self) -> &[PropertyVector] {
        &self.items
    }

    pub fn p10(&self, name: &str) -> Option<f64> {
        self.percentiles.iter().find(|(n, _, _)| n == name).map(|(_, lo, _)| *lo)
    }

    pub fn p90(&self, name: &str) -> Option<f64> {
        self.percentiles.iter().find(|(n, _, _)| n == name).map(|(_, _, hi)| *hi)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "pool v1")?;
        writeln!(w, "properties {}", PROPERTY_NAMES.join(","))?;
        for (name, lo, hi) in &self.percentiles {
            writeln!(w, "percentile {name} p10={lo:?} p90={hi:?}")?;
        }
        writeln!(w, "items {}", self.items.len())?;
        for y in &self.items {
            writeln!(w, "{} {} {} {}", y.n_a, y.depth, y.len_bin, u8::from(y.has_aa))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<PropertyPool> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header != "pool v1" {
            return Err(Error::Parse(format!("bad pool header {header:?}")));
        }
        let mut items = Vec::new();
        for line in lines {
            let line = line?;
            if line.starts_with("properties ") || line.starts_with("percentile ") || line.starts_with("items ") {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("bad pool item line {line:?}")));
            }
            items.push(PropertyVector {
                n_a: f[0].parse().map_err(|_| Error::Parse(line.clone()))?,
                depth: f[1].parse().map_err(|_| Error::Parse(line.clone()))?,
                len_bin: f[2].parse().map_err(|_| Error::Parse(line.clone()))?,
                has_aa: f[3] == "1",
            });
        }
        // Percentiles are recomputed rather than trusted from the file; the
        // multiset fully determines them.
        Ok(PropertyPool::from_vectors(items))
    }
}

/// Writes a corpus in the one-sequence-per-line text format.
pub fn write_corpus<W: Write>(w: &mut W, corpus: &[Sequence]) -> Result<()> {
    for s in corpus {
        writeln!(w, "{s}")?;
    }
    Ok(())
}

/// Reads a corpus from the text format.
pub fn read_corpus<R: BufRead>(r: &mut R) -> Result<Vec<Sequence>> {
    r.lines()
        .filter(|l| l.as_ref().map(|l| !l.trim().is_empty()).unwrap_or(true))
        .map(|l| Sequence::parse(&l?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::enumerate_sequences;
    use crate::rng::scoped;

    fn exact_corr_n_a_len(weighted: bool) -> f64 {
        // Enumeration oracle: exact corr(n_A, body_length) over all valid
        // sequences under uniform or correlated weights.
        let mut rows = Vec::new();
        for (s, v) in enumerate_sequences(L_MAX).unwrap() {
            if v.is_valid() {
                let y = extract_properties(&s).unwrap();
                let w = if weighted {
                    (CORRELATED_BETA * corr_score(&y)).exp()
                } else {
                    1.0
                };
                rows.push((f64::from(y.n_a), s.body_len() as f64, w));
            }
        }
        let total: f64 = rows.iter().map(|r| r.2).sum();
        let mean_a: f64 = rows.iter().map(|r| r.0 * r.2).sum::<f64>() / total;
        let mean_l: f64 = rows.iter().map(|r| r.1 * r.2).sum::<f64>() / total;
        let cov: f64 = rows.iter().map(|r| (r.0 - mean_a) * (r.1 - mean_l) * r.2).sum::<f64>() / total;
        let va: f64 = rows.iter().map(|r| (r.0 - mean_a).powi(2) * r.2).sum::<f64>() / total;
        let vl: f64 = rows.iter().map(|r| (r.1 - mean_l).powi(2) * r.2).sum::<f64>() / total;
        cov / (va * vl).sqrt()
    }

    fn empirical_corr(corpus: &[Sequence]) -> f64 {
        let rows: Vec<(f64, f64)> = corpus
            .iter()
            .map(|s| (f64::from(extract_properties(s).unwrap().n_a), s.body_len() as f64))
            .collect();
        let n = rows.len() as f64;
        let ma = rows.iter().map(|r| r.0).sum::<f64>() / n;
        let ml = rows.iter().map(|r| r.1).sum::<f64>() / n;
        let cov = rows.iter().map(|r| (r.0 - ma) * (r.1 - ml)).sum::<f64>() / n;
        let va = rows.iter().map(|r| (r.0 - ma).powi(2)).sum::<f64>() / n;
        let vl = rows.iter().map(|r| (r.1 - ml).powi(2)).sum::<f64>() / n;
        cov / (va * vl).sqrt()
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let a = sample_corpus(CorpusPreset::UniformValid, 100, &mut scoped("t", 7)).unwrap();
        let b = sample_corpus(CorpusPreset::UniformValid, 100, &mut scoped("t", 7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_corpus_matches_enumeration_correlation() {
        let corpus =
            sample_corpus(CorpusPreset::UniformValid, 100_000, &mut scoped("t", 1)).unwrap();
        let exact = exact_corr_n_a_len(false);
        assert!((empirical_corr(&corpus) - exact).abs() < 0.02);
    }

    #[test]
    fn correlated_corpus_raises_correlation() {
        let uni = exact_corr_n_a_len(false);
        let cor = exact_corr_n_a_len(true);
        assert!(cor > uni, "weighting must raise the exact correlation");
        let corpus =
            sample_corpus(CorpusPreset::Correlated, 100_000, &mut scoped("t", 2)).unwrap();
        let emp = empirical_corr(&corpus);
        assert!((emp - cor).abs() < 0.02);
        assert!(emp > uni);
    }

    #[test]
    fn full_config_key_serialization() {
        let s = Sequence::parse("A A EOS").unwrap();
        let rec = full_config_record(&s).unwrap();
        assert_eq!(rec.key.canonical_string(), "depth=0;has_AA=true;len_bin=1;n_A=2");
    }

    #[test]
    fn empty_key_round_trips() {
        let k = ConditionKey::empty();
        assert_eq!(k.canonical_string(), "");
        assert_eq!(ConditionKey::parse("").unwrap(), k);
    }

    #[test]
    fn key_is_order_invariant() {
        let a = ConditionKey::new(vec![
            ("n_A".into(), "2".into()),
            ("depth".into(), "0".into()),
        ])
        .unwrap();
        let b = ConditionKey::new(vec![
            ("depth".into(), "0".into()),
            ("n_A".into(), "2".into()),
        ])
        .unwrap();
        assert_eq!(a.canonical_string(), b.canonical_string());
        assert_eq!(ConditionKey::parse(&a.canonical_string()).unwrap(), a);
    }

    #[test]
    fn dropout_full_key_rate() {
        let s = Sequence::parse("LP A RP B EOS").unwrap();
        let mut rng = scoped("t", 3);
        let n = 100_000;
        let mut full = 0usize;
        for _ in 0..n {
            let rec = make_training_record(&s, &mut rng).unwrap();
            if rec.key.entries().len() == 4 {
                full += 1;
            }
            // Conditioning is never mislabeled.
            let y = extract_properties(&s).unwrap();
            for (name, val) in rec.key.entries() {
                assert_eq!(&y.render(name).unwrap(), val);
            }
        }
        let frac = full as f64 / n as f64;
        assert!((frac - FULL_CONFIG_PROB).abs() < 0.01, "full-key rate {frac}");
    }

    #[test]
    fn dropout_rejects_invalid() {
        let s = Sequence::parse("LP RP EOS").unwrap();
        assert!(make_training_record(&s, &mut scoped("t", 4)).is_err());
    }

    #[test]
    fn pool_examples() {
        let seqs: Vec<Sequence> = ["A EOS", "A EOS", "B EOS"]
            .iter()
            .map(|s| Sequence::parse(s).unwrap())
            .collect();
        let pool = empirical_property_pool(&seqs).unwrap();
        assert_eq!(pool.items.len(), 3);
        assert_eq!(pool.p90("n_A"), Some(1.0));

        let single = empirical_property_pool(&seqs[..1]).unwrap();
        for name in NUMERIC_PROPERTY_NAMES {
            assert_eq!(single.p10(name), single.p90(name));
        }
        assert!(empirical_property_pool(&[]).is_err());
    }

    #[test]
    fn pool_percentiles_match_enumeration() {
        let corpus = sample_corpus(CorpusPreset::UniformValid, 10_000, &mut scoped("t", 5)).unwrap();
        let pool = empirical_property_pool(&corpus).unwrap();
        // Exact percentiles over the full valid set.
        let exact = PropertyPool::from_vectors(
            all_valid_sequences(L_MAX)
                .unwrap()
                .iter()
                .map(|s| extract_properties(s).unwrap())
                .collect(),
        );
        for name in NUMERIC_PROPERTY_NAMES {
            assert!((pool.p90(name).unwrap() - exact.p90(name).unwrap()).abs() <= 1.0);
            assert!((pool.p10(name).unwrap() - exact.p10(name).unwrap()).abs() <= 1.0);
            assert!(pool.p10(name).unwrap() <= pool.p90(name).unwrap());
        }
    }

    #[test]
    fn pool_file_round_trips() {
        let corpus = sample_corpus(CorpusPreset::UniformValid, 50, &mut scoped("t", 6)).unwrap();
        let pool = empirical_property_pool(&corpus).unwrap();
        let mut buf = Vec::new();
        pool.write_to(&mut buf).unwrap();
        let back = PropertyPool::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back.items, pool.items);
        assert_eq!(back.percentiles, pool.percentiles);
    }

    #[test]
    fn corpus_file_round_trips() {
        let corpus = sample_corpus(CorpusPreset::UniformValid, 20, &mut scoped("t", 8)).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &corpus).unwrap();
        let back = read_corpus(&mut &buf[..]).unwrap();
        assert_eq!(back, corpus);
    }
}
