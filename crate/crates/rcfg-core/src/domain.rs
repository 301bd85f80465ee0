//! The enumerable toy sequence language.
//!
//! Five tokens (`A`, `B`, `LP`, `RP`, `EOS`), body length capped at
//! [`L_MAX`]. A complete sequence is valid when its brackets are balanced,
//! nesting never goes negative, the body is nonempty, and at least one
//! letter appears. Valid sequences carry a [`PropertyVector`] (letter
//! count, nesting depth, binned length, adjacent-AA flag) that plays the
//! role of a molecular property record.

use crate::error::{Error, Result};
use std::fmt;

/// Maximum body length (tokens before EOS).
pub const L_MAX: usize = 8;

/// Vocabulary size including EOS.
pub const VOCAB: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Token {
    A = 0,
    B = 1,
    /// Open bracket.
    Lp = 2,
    /// Close bracket.
    Rp = 3,
    Eos = 4,
}

impl Token {
    pub const ALL: [Token; VOCAB] = [Token::A, Token::B, Token::Lp, Token::Rp, Token::Eos];

    /// The four body tokens, in id order.
    pub const BODY: [Token; 4] = [Token::A, Token::B, Token::Lp, Token::Rp];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Token> {
        Token::ALL.get(id).copied()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Token::A => "A",
            Token::B => "B",
            Token::Lp => "LP",
            Token::Rp => "RP",
            Token::Eos => "EOS",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Token> {
        match s {
            "A" => Some(Token::A),
            "B" => Some(Token::B),
            "LP" => Some(Token::Lp),
            "RP" => Some(Token::Rp),
            "EOS" => Some(Token::Eos),
            _ => None,
        }
    }

    pub fn is_letter(self) -> bool {
        matches!(self, Token::A | Token::B)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// A complete sequence: body tokens followed by exactly one EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sequence {
    tokens: Vec<Token>,
}

impl Sequence {
    /// Builds a complete sequence from its body (no EOS inside).
    pub fn from_body(body: &[Token]) -> Result<Sequence> {
        if body.len() > L_MAX {
            return Err(Error::Domain(format!(
                "body length {} exceeds L_MAX={}",
                body.len(),
                L_MAX
            )));
        }
        if body.contains(&Token::Eos) {
            return Err(Error::Domain("EOS inside sequence body".into()));
        }
        let mut tokens = body.to_vec();
        tokens.push(Token::Eos);
        Ok(Sequence { tokens })
    }

    /// All tokens including the trailing EOS.
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Body tokens (EOS excluded).
    pub fn body(&self) -> &[Token] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn body_len(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Parses the space-separated text form, e.g. `"LP A RP EOS"`.
    pub fn parse(line: &str) -> Result<Sequence> {
        let toks: Vec<Token> = line
            .split_whitespace()
            .map(|s| Token::from_symbol(s).ok_or_else(|| Error::Parse(format!("unknown token {s:?}"))))
            .collect::<Result<_>>()?;
        match toks.split_last() {
            Some((Token::Eos, body)) => Sequence::from_body(body),
            _ => Err(Error::Parse(format!("sequence must end with EOS: {line:?}"))),
        }
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for t in &self.tokens {
            if !first {
                f.write_str(" ")?;
            }
            first = false;
            f.write_str(t.symbol())?;
        }
        Ok(())
    }
}

/// A partial sequence: no EOS, length <= L_MAX.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Prefix {
    tokens: Vec<Token>,
}

impl Prefix {
    pub fn empty() -> Prefix {
        Prefix { tokens: Vec::new() }
    }

    pub fn new(tokens: &[Token]) -> Result<Prefix> {
        if tokens.len() > L_MAX {
            return Err(Error::Domain(format!("prefix length {} exceeds L_MAX", tokens.len())));
        }
        if tokens.contains(&Token::Eos) {
            return Err(Error::Domain("EOS inside prefix".into()));
        }
        Ok(Prefix {
            tokens: tokens.to_vec(),
        })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Prefix extended by one body token.
    pub fn push(&self, t: Token) -> Result<Prefix> {
        let mut tokens = self.tokens.clone();
        tokens.push(t);
        Prefix::new(&tokens)
    }

    /// Complete sequence obtained by appending EOS here.
    pub fn complete(&self) -> Sequence {
        Sequence::from_body(&self.tokens).expect("prefix invariants imply a legal body")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidityVerdict {
    Valid,
    Invalid(InvalidReason),
}

impl ValidityVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, ValidityVerdict::Valid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidReason {
    EmptyBody,
    NegativeNesting,
    UnbalancedBrackets,
    NoLetter,
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InvalidReason::EmptyBody => "empty body",
            InvalidReason::NegativeNesting => "negative nesting",
            InvalidReason::UnbalancedBrackets => "unbalanced brackets",
            InvalidReason::NoLetter => "no letter",
        };
        f.write_str(s)
    }
}

/// Checks well-formedness of a complete sequence.
pub fn validate(seq: &Sequence) -> ValidityVerdict {
    let body = seq.body();
    if body.is_empty() {
        return ValidityVerdict::Invalid(InvalidReason::EmptyBody);
    }
    let mut depth: i32 = 0;
    let mut has_letter = false;
    for t in body {
        match t {
            Token::Lp => depth += 1,
            Token::Rp => {
                depth -= 1;
                if depth < 0 {
                    return ValidityVerdict::Invalid(InvalidReason::NegativeNesting);
                }
            }
            Token::A | Token::B => has_letter = true,
            Token::Eos => unreachable!("body never contains EOS"),
        }
    }
    if depth != 0 {
        return ValidityVerdict::Invalid(InvalidReason::UnbalancedBrackets);
    }
    if !has_letter {
        return ValidityVerdict::Invalid(InvalidReason::NoLetter);
    }
    ValidityVerdict::Valid
}

/// The discretized attribute record of a valid sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PropertyVector {
    /// Exact count of `A` tokens, 0..=8.
    pub n_a: u8,
    /// Maximum bracket nesting depth, 0..=4.
    pub depth: u8,
    /// Body length binned with width 2: ceil(len/2), 1..=4.
    pub len_bin: u8,
    /// Body contains adjacent `A A`.
    pub has_aa: bool,
}

/// Property names in canonical (lexicographic) order.
pub const PROPERTY_NAMES: [&str; 4] = ["depth", "has_AA", "len_bin", "n_A"];

/// Numeric property names (percentile-bearing).
pub const NUMERIC_PROPERTY_NAMES: [&str; 3] = ["n_A", "depth", "len_bin"];

impl PropertyVector {
    /// Value of a named property, booleans as 0/1.
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "n_A" => Some(f64::from(self.n_a)),
            "depth" => Some(f64::from(self.depth)),
            "len_bin" => Some(f64::from(self.len_bin)),
            "has_AA" => Some(if self.has_aa { 1.0 } else { 0.0 }),
            _ => None,
        }
    }

    /// Renders a named property in the condition-key value format.
    pub fn render(&self, name: &str) -> Option<String> {
        match name {
            "n_A" => Some(self.n_a.to_string()),
            "depth" => Some(self.depth.to_string()),
            "len_bin" => Some(self.len_bin.to_string()),
            "has_AA" => Some(self.has_aa.to_string()),
            _ => None,
        }
    }
}

/// Extracts the property vector of a valid sequence.
pub fn extract_properties(seq: &Sequence) -> Result<PropertyVector> {
    if !validate(seq).is_valid() {
        return Err(Error::Domain(format!(
            "properties undefined for invalid sequence {seq}"
        )));
    }
    let body = seq.body();
    let mut n_a = 0u8;
    let mut depth = 0i32;
    let mut max_depth = 0i32;
    let mut has_aa = false;
    let mut prev_a = false;
    for t in body {
        match t {
            Token::A => {
                n_a += 1;
                if prev_a {
                    has_aa = true;
                }
            }
            Token::Lp => {
                depth += 1;
                max_depth = max_depth.max(depth);
            }
            Token::Rp => depth -= 1,
            Token::B => {}
            Token::Eos => unreachable!(),
        }
        prev_a = *t == Token::A;
    }
    let len_bin = body.len().div_ceil(2) as u8;
    Ok(PropertyVector {
        n_a,
        depth: max_depth as u8,
        len_bin,
        has_aa,
    })
}

/// Yields every complete sequence with body length 1..=l_max exactly once,
/// in lexicographic token-id order, paired with its validity verdict.
pub fn enumerate_sequences(l_max: usize) -> Result<impl Iterator<Item = (Sequence, ValidityVerdict)>> {
    if l_max > L_MAX {
        return Err(Error::Domain(format!(
            "enumeration refused: l_max {l_max} > {L_MAX}"
        )));
    }
    Ok(enumerate_bodies(1, l_max).map(|body| {
        let seq = Sequence::from_body(&body).expect("enumerated body is legal");
        let verdict = validate(&seq);
        (seq, verdict)
    }))
}

/// Like [`enumerate_sequences`] but includes the empty body (bare EOS).
/// The oracles need it: the autoregressive model puts mass there.
pub fn enumerate_complete_sequences(l_max: usize) -> Result<impl Iterator<Item = Sequence>> {
    if l_max > L_MAX {
        return Err(Error::Domain(format!(
            "enumeration refused: l_max {l_max} > {L_MAX}"
        )));
    }
    Ok(enumerate_bodies(0, l_max).map(|body| Sequence::from_body(&body).expect("legal body")))
}

fn enumerate_bodies(min_len: usize, max_len: usize) -> impl Iterator<Item = Vec<Token>> {
    (min_len..=max_len).flat_map(|len| BodyIter::new(len))
}

struct BodyIter {
    len: usize,
    /// Odometer over body-token indices; None once exhausted.
    state: Option<Vec<usize>>,
}

impl BodyIter {
    fn new(len: usize) -> BodyIter {
        BodyIter {
            len,
            state: Some(vec![0; len]),
        }
    }
}

impl Iterator for BodyIter {
    type Item = Vec<Token>;

    fn next(&mut self) -> Option<Vec<Token>> {
        let state = self.state.as_mut()?;
        let body: Vec<Token> = state.iter().map(|&i| Token::BODY[i]).collect();
        // Advance the odometer, least-significant digit last.
        let mut pos = self.len;
        loop {
            if pos == 0 {
                self.state = None;
                break;
            }
            pos -= 1;
            let digits = self.state.as_mut()?;
            if digits[pos] + 1 < Token::BODY.len() {
                digits[pos] += 1;
                for d in digits[pos + 1..].iter_mut() {
                    *d = 0;
                }
                break;
            }
        }
        Some(body)
    }
}

/// All valid sequences at `l_max`, in enumeration order.
pub fn all_valid_sequences(l_max: usize) -> Result<Vec<Sequence>> {
    Ok(enumerate_sequences(l_max)?
        .filter(|(_, v)| v.is_valid())
        .map(|(s, _)| s)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn seq(text: &str) -> Sequence {
        Sequence::parse(text).unwrap()
    }

    #[test]
    fn vocabulary_bijection() {
        for (i, t) in Token::ALL.iter().enumerate() {
            assert_eq!(t.id(), i);
            assert_eq!(Token::from_id(i), Some(*t));
            assert_eq!(Token::from_symbol(t.symbol()), Some(*t));
        }
        assert_eq!(Token::Eos.id(), VOCAB - 1);
    }

    #[test]
    fn validate_examples() {
        assert!(validate(&seq("A EOS")).is_valid());
        assert!(validate(&seq("LP A RP EOS")).is_valid());
        assert_eq!(
            validate(&seq("RP A EOS")),
            ValidityVerdict::Invalid(InvalidReason::NegativeNesting)
        );
        assert_eq!(
            validate(&seq("LP RP EOS")),
            ValidityVerdict::Invalid(InvalidReason::NoLetter)
        );
        assert_eq!(
            validate(&seq("EOS")),
            ValidityVerdict::Invalid(InvalidReason::EmptyBody)
        );
        assert_eq!(
            validate(&seq("LP A EOS")),
            ValidityVerdict::Invalid(InvalidReason::UnbalancedBrackets)
        );
    }

    #[test]
    fn extract_examples() {
        assert_eq!(
            extract_properties(&seq("A A EOS")).unwrap(),
            PropertyVector { n_a: 2, depth: 0, len_bin: 1, has_aa: true }
        );
        assert_eq!(
            extract_properties(&seq("LP A RP B EOS")).unwrap(),
            PropertyVector { n_a: 1, depth: 1, len_bin: 2, has_aa: false }
        );
        assert_eq!(
            extract_properties(&seq("LP LP A RP RP EOS")).unwrap(),
            PropertyVector { n_a: 1, depth: 2, len_bin: 3, has_aa: false }
        );
    }

    #[test]
    fn extract_rejects_invalid() {
        assert!(extract_properties(&seq("LP RP EOS")).is_err());
    }

    #[test]
    fn enumeration_counts() {
        let n1 = enumerate_sequences(1).unwrap().count();
        assert_eq!(n1, 4);
        let v1 = enumerate_sequences(1)
            .unwrap()
            .filter(|(_, v)| v.is_valid())
            .count();
        assert_eq!(v1, 2);
        assert_eq!(enumerate_sequences(2).unwrap().count(), 20);
        assert_eq!(enumerate_sequences(8).unwrap().count(), 87_380);
        assert!(enumerate_sequences(9).is_err());
    }

    #[test]
    fn enumeration_matches_independent_generation() {
        // Independent route: recursive cartesian product, then filter dupes.
        fn gen(len: usize) -> Vec<Vec<Token>> {
            if len == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for shorter in gen(len - 1) {
                for t in Token::BODY {
                    let mut b = shorter.clone();
                    b.push(t);
                    out.push(b);
                }
            }
            out
        }
        for l_max in 1..=4 {
            let expected: HashSet<Sequence> = (1..=l_max)
                .flat_map(gen)
                .map(|b| Sequence::from_body(&b).unwrap())
                .collect();
            let got: Vec<Sequence> = enumerate_sequences(l_max).unwrap().map(|(s, _)| s).collect();
            let got_set: HashSet<Sequence> = got.iter().cloned().collect();
            assert_eq!(got.len(), got_set.len(), "enumerator repeated a sequence");
            assert_eq!(got_set, expected);
        }
    }

    #[test]
    fn enumeration_is_lexicographic() {
        let ids: Vec<Vec<usize>> = enumerate_sequences(2)
            .unwrap()
            .map(|(s, _)| s.body().iter().map(|t| t.id()).collect())
            .collect();
        for w in ids.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if a.len() == b.len() {
                assert!(a < b);
            } else {
                assert!(a.len() < b.len());
            }
        }
    }

    #[test]
    fn every_valid_prefix_has_a_valid_completion() {
        // Prefixes of valid sequences, by construction, complete to the
        // sequence they were cut from; check the enumerated set exhaustively.
        let valid = all_valid_sequences(L_MAX).unwrap();
        let mut prefixes: HashSet<Vec<Token>> = HashSet::new();
        for s in &valid {
            for cut in 0..s.body_len().min(L_MAX - 1) + 1 {
                if cut < L_MAX {
                    prefixes.insert(s.body()[..cut].to_vec());
                }
            }
        }
        let valid_set: HashSet<&Sequence> = valid.iter().collect();
        for p in &prefixes {
            let has_completion = valid_set
                .iter()
                .any(|s| s.body().len() >= p.len() && &s.body()[..p.len()] == p.as_slice());
            assert!(has_completion);
        }
    }

    #[test]
    fn depth_bound_from_length() {
        for (s, v) in enumerate_sequences(6).unwrap() {
            if v.is_valid() {
                let p = extract_properties(&s).unwrap();
                assert!(usize::from(p.depth) <= s.body_len() / 2);
                assert_eq!(usize::from(p.len_bin), s.body_len().div_ceil(2));
            }
        }
    }

    proptest! {
        #[test]
        fn text_format_round_trips(ids in proptest::collection::vec(0usize..4, 0..=8)) {
            let body: Vec<Token> = ids.iter().map(|&i| Token::BODY[i]).collect();
            let s = Sequence::from_body(&body).unwrap();
            let back = Sequence::parse(&s.to_string()).unwrap();
            prop_assert_eq!(s, back);
        }

        #[test]
        fn extraction_is_deterministic(ids in proptest::collection::vec(0usize..4, 1..=8)) {
            let body: Vec<Token> = ids.iter().map(|&i| Token::BODY[i]).collect();
            let s = Sequence::from_body(&body).unwrap();
            if validate(&s).is_valid() {
                let a = extract_properties(&s).unwrap();
                let b = extract_properties(&s).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
