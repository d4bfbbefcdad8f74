//! LEGO sentences: vocabulary, sampling, clause embedding, and corpora.
//!
//! A sentence of chain length `L` with answer horizon `L'` is
//!
//! ```text
//! x_1 = g_1(x_0)  ...  x_L = g_L(x_{L-1})   x_0 = y_0  ...  x_{L'} = y_{L'}
//! ```
//!
//! Every clause is carried as a fixed 5-token tuple: predicates occupy slots
//! 1-3 `(x, g, x')`, answers occupy slots 4-5 `(x, y)`, and unused slots hold
//! the blank token. Token embeddings are one-hot (so non-blank embeddings are
//! orthonormal by construction) and the blank embeds to the zero vector; a
//! clause embeds to the vertical stack of its five token embeddings, giving
//! clause columns of dimension `d_c = 5 d`.
//!
//! Corpora are JSON lines, one sentence per line. Bootstrapped sentences may
//! contain answer clauses produced by an annotator; clauses that do not parse
//! as a well-formed answer are stored verbatim and flagged, never filtered.

use crate::group::{ActionKind, GroupElement, GroupError, StateSpace};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Index into the vocabulary, in `[0, d)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Debug for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// What a token index denotes under a vocabulary layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    /// The i-th variable.
    Variable(usize),
    /// The canonically indexed group element.
    Action(usize),
    /// The value `y`.
    Value(usize),
    Blank,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("vocabulary needs at least 2 variables, got {0}")]
    TooFewVariables(usize),
    #[error("chain length {l} needs {} variables, vocabulary has {have}", l + 1)]
    ChainTooLong { l: usize, have: usize },
    #[error("answer horizon {horizon} exceeds chain length {l}")]
    HorizonOutOfRange { horizon: usize, l: usize },
    #[error("group error: {0}")]
    Group(#[from] GroupError),
    #[error("token {0:?} out of range for vocabulary of size {1}")]
    TokenOutOfRange(Token, usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Token layout: variables first, then action tokens in canonical group
/// order, then value tokens, then the blank in the last slot. The blank owns
/// an index (and therefore a logit coordinate) but embeds to the zero vector.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    n_x: usize,
    space: StateSpace,
}

impl Vocabulary {
    pub fn new(n_x: usize, kind: ActionKind, n_y: usize) -> Result<Self, CorpusError> {
        if n_x < 2 {
            return Err(CorpusError::TooFewVariables(n_x));
        }
        let space = StateSpace::new(kind, n_y)?;
        Ok(Vocabulary { n_x, space })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn n_actions(&self) -> usize {
        self.space.order()
    }

    pub fn n_y(&self) -> usize {
        self.space.n_y()
    }

    /// Total vocabulary size `d = |X| + |G| + |Y| + 1`.
    pub fn d(&self) -> usize {
        self.n_x + self.space.order() + self.space.n_y() + 1
    }

    /// Clause embedding dimension `d_c = 5 d`.
    pub fn d_c(&self) -> usize {
        5 * self.d()
    }

    pub fn variable(&self, i: usize) -> Token {
        assert!(i < self.n_x, "variable index {i} out of range");
        Token(i as u32)
    }

    pub fn action_by_index(&self, i: usize) -> Token {
        assert!(i < self.space.order(), "action index {i} out of range");
        Token((self.n_x + i) as u32)
    }

    pub fn action(&self, g: &GroupElement) -> Result<Token, CorpusError> {
        Ok(self.action_by_index(self.space.index_of(g)?))
    }

    pub fn value(&self, y: usize) -> Token {
        assert!(y < self.space.n_y(), "value {y} out of range");
        Token((self.n_x + self.space.order() + y) as u32)
    }

    pub fn blank(&self) -> Token {
        Token((self.d() - 1) as u32)
    }

    pub fn kind_of(&self, t: Token) -> Result<TokenKind, CorpusError> {
        let i = t.index();
        let n_g = self.space.order();
        let n_y = self.space.n_y();
        if i < self.n_x {
            Ok(TokenKind::Variable(i))
        } else if i < self.n_x + n_g {
            Ok(TokenKind::Action(i - self.n_x))
        } else if i < self.n_x + n_g + n_y {
            Ok(TokenKind::Value(i - self.n_x - n_g))
        } else if i == self.d() - 1 {
            Ok(TokenKind::Blank)
        } else {
            Err(CorpusError::TokenOutOfRange(t, self.d()))
        }
    }

    /// The group element behind an action token.
    pub fn element_of(&self, t: Token) -> Result<&GroupElement, CorpusError> {
        match self.kind_of(t)? {
            TokenKind::Action(i) => Ok(self.space.element(i)),
            _ => Err(CorpusError::TokenOutOfRange(t, self.d())),
        }
    }

    /// Reinterpret a raw 5-token clause as an answer when it has the
    /// canonical `(blank, blank, blank, x, y)` shape.
    pub fn canonicalize_answer(&self, raw: [Token; 5]) -> AnswerClause {
        let blank = self.blank();
        let shape_ok = raw[0] == blank
            && raw[1] == blank
            && raw[2] == blank
            && matches!(self.kind_of(raw[3]), Ok(TokenKind::Variable(_)))
            && matches!(self.kind_of(raw[4]), Ok(TokenKind::Value(_)));
        if shape_ok {
            AnswerClause::Canonical {
                var: raw[3],
                value: raw[4],
            }
        } else {
            AnswerClause::Raw(raw)
        }
    }
}

/// An answer clause. `Raw` stores an annotator emission verbatim when it does
/// not decode to a well-formed `x = y` clause; the variant itself is the
/// validity flag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AnswerClause {
    Canonical { var: Token, value: Token },
    Raw([Token; 5]),
}

impl AnswerClause {
    pub fn is_canonical(&self) -> bool {
        matches!(self, AnswerClause::Canonical { .. })
    }

    pub fn tokens(&self, blank: Token) -> [Token; 5] {
        match *self {
            AnswerClause::Canonical { var, value } => [blank, blank, blank, var, value],
            AnswerClause::Raw(raw) => raw,
        }
    }
}

/// A LEGO sentence: `L` predicate clauses plus `L' + 1` answer clauses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LegoSentence {
    /// Predicate clauses `(x_l, g_l, x_{l-1})` for `l = 1..=L`, as tokens.
    pub predicates: Vec<[Token; 3]>,
    /// Answer clauses for steps `0..=L'`.
    pub answers: Vec<AnswerClause>,
}

impl LegoSentence {
    /// Chain length `L`.
    pub fn chain_len(&self) -> usize {
        self.predicates.len()
    }

    /// Answer horizon `L'`.
    pub fn horizon(&self) -> usize {
        self.answers.len().saturating_sub(1)
    }

    /// Total clause count `L + L' + 1`.
    pub fn n_clauses(&self) -> usize {
        self.predicates.len() + self.answers.len()
    }

    /// The variable chain `x_0 ..= x_L` read off the predicate clauses.
    pub fn variables(&self) -> Vec<Token> {
        let mut vars = Vec::with_capacity(self.predicates.len() + 1);
        if let Some(first) = self.predicates.first() {
            vars.push(first[2]);
        } else if let Some(AnswerClause::Canonical { var, .. }) = self.answers.first() {
            vars.push(*var);
        }
        for p in &self.predicates {
            vars.push(p[0]);
        }
        vars
    }
}

/// Sample one sentence from the ground-truth LEGO distribution with
/// `L' = L`: variables without replacement, `y_0` uniform, actions i.i.d.
/// uniform, values tracked by the group oracle.
pub fn sample_sentence(
    vocab: &Vocabulary,
    l: usize,
    rng: &mut Rng,
) -> Result<LegoSentence, CorpusError> {
    let (predicates, var_tokens, y0) = sample_skeleton(vocab, l, rng)?;
    let space = vocab.space();
    let mut answers = Vec::with_capacity(l + 1);
    answers.push(AnswerClause::Canonical {
        var: var_tokens[0],
        value: vocab.value(y0),
    });
    let mut y = y0;
    for (step, pred) in predicates.iter().enumerate() {
        let g = vocab.element_of(pred[1])?;
        y = space.apply(g, y)?;
        answers.push(AnswerClause::Canonical {
            var: var_tokens[step + 1],
            value: vocab.value(y),
        });
    }
    Ok(LegoSentence {
        predicates,
        answers,
    })
}

/// Shared predicate/initial-state sampling used by both the ground-truth and
/// bootstrapped distributions (they differ only in how answers are produced).
fn sample_skeleton(
    vocab: &Vocabulary,
    l: usize,
    rng: &mut Rng,
) -> Result<(Vec<[Token; 3]>, Vec<Token>, usize), CorpusError> {
    if l + 1 > vocab.n_x() {
        return Err(CorpusError::ChainTooLong {
            l,
            have: vocab.n_x(),
        });
    }
    let var_tokens: Vec<Token> = rng
        .sample_distinct(vocab.n_x(), l + 1)
        .into_iter()
        .map(|i| vocab.variable(i))
        .collect();
    let y0 = rng.gen_range(vocab.n_y());
    let space = vocab.space();
    let mut predicates = Vec::with_capacity(l);
    for step in 0..l {
        let g = space.sample_uniform(rng);
        predicates.push([
            var_tokens[step + 1],
            vocab.action(&g)?,
            var_tokens[step],
        ]);
    }
    Ok((predicates, var_tokens, y0))
}

/// Keep all predicates and the answers for steps `0..=horizon`; the input is
/// untouched.
pub fn truncate(s: &LegoSentence, horizon: usize) -> Result<LegoSentence, CorpusError> {
    if horizon > s.horizon() {
        return Err(CorpusError::HorizonOutOfRange {
            horizon,
            l: s.horizon(),
        });
    }
    Ok(LegoSentence {
        predicates: s.predicates.clone(),
        answers: s.answers[..=horizon].to_vec(),
    })
}

/// Produces the next clause given a growing sentence prefix. Implemented by
/// the transformer (greedy or sampled decoding), by the group oracle, and by
/// degenerate test annotators.
pub trait Annotator {
    fn next_clause(&self, prefix: &LegoSentence, rng: &mut Rng) -> [Token; 5];
}

/// Ground-truth annotator: emits the oracle answer clause for the next step.
pub struct OracleAnnotator<'a> {
    pub vocab: &'a Vocabulary,
}

impl Annotator for OracleAnnotator<'_> {
    fn next_clause(&self, prefix: &LegoSentence, _rng: &mut Rng) -> [Token; 5] {
        let step = prefix.answers.len(); // next answer index
        let pred = prefix.predicates[step - 1];
        let blank = self.vocab.blank();
        // Replay the chain from y_0 through the predicates. Non-canonical
        // clauses in the prefix are ignored: the oracle answers from the
        // ground-truth chain, not from annotator output.
        let y0 = match prefix.answers[0] {
            AnswerClause::Canonical { value, .. } => match self.vocab.kind_of(value) {
                Ok(TokenKind::Value(y)) => y,
                _ => 0,
            },
            AnswerClause::Raw(_) => 0,
        };
        let space = self.vocab.space();
        let mut y = y0;
        for p in &prefix.predicates[..step] {
            let g = self.vocab.element_of(p[1]).expect("predicate action token");
            y = space.apply(g, y).expect("tracked value in range");
        }
        [blank, blank, blank, pred[0], self.vocab.value(y)]
    }
}

/// Annotator that always emits the same clause.
pub struct ConstantAnnotator(pub [Token; 5]);

impl Annotator for ConstantAnnotator {
    fn next_clause(&self, _prefix: &LegoSentence, _rng: &mut Rng) -> [Token; 5] {
        self.0
    }
}

/// Sample from the bootstrapped LEGO distribution: predicates and `y_0` as in
/// [`sample_sentence`], answers `1..=horizon` produced recursively by the
/// annotator on the growing prefix. Annotator output is recorded as-is; no
/// oracle correction or filtering is applied.
pub fn bootstrap_sentence(
    vocab: &Vocabulary,
    l: usize,
    horizon: usize,
    annotator: &dyn Annotator,
    rng: &mut Rng,
) -> Result<LegoSentence, CorpusError> {
    if horizon > l {
        return Err(CorpusError::HorizonOutOfRange { horizon, l });
    }
    let (predicates, var_tokens, y0) = sample_skeleton(vocab, l, rng)?;
    let mut sentence = LegoSentence {
        predicates,
        answers: vec![AnswerClause::Canonical {
            var: var_tokens[0],
            value: vocab.value(y0),
        }],
    };
    for _ in 1..=horizon {
        let raw = annotator.next_clause(&sentence, rng);
        sentence.answers.push(vocab.canonicalize_answer(raw));
    }
    Ok(sentence)
}

/// Full semantic validity check against the group oracle: distinct chain
/// variables, canonical answers bound to the right variables, and
/// `y_i = g_i(y_{i-1})` for every present answer.
pub fn validate_sentence(vocab: &Vocabulary, s: &LegoSentence) -> Result<(), String> {
    let vars = s.variables();
    if vars.len() != s.chain_len() + 1 {
        return Err("variable chain incomplete".into());
    }
    let mut seen = std::collections::HashSet::new();
    for &v in &vars {
        if !matches!(vocab.kind_of(v), Ok(TokenKind::Variable(_))) {
            return Err(format!("token {v:?} is not a variable"));
        }
        if !seen.insert(v) {
            return Err(format!("variable {v:?} repeats in the chain"));
        }
    }
    for (i, p) in s.predicates.iter().enumerate() {
        if i > 0 && p[2] != s.predicates[i - 1][0] {
            return Err(format!("predicate {} does not chain", i + 1));
        }
        if vocab.element_of(p[1]).is_err() {
            return Err(format!("predicate {} has a non-action token", i + 1));
        }
    }
    let mut y = usize::MAX;
    for (i, ans) in s.answers.iter().enumerate() {
        let AnswerClause::Canonical { var, value } = ans else {
            return Err(format!("answer {i} is not canonical"));
        };
        if *var != vars[i] {
            return Err(format!("answer {i} bound to wrong variable"));
        }
        let Ok(TokenKind::Value(v)) = vocab.kind_of(*value) else {
            return Err(format!("answer {i} has a non-value token"));
        };
        if i == 0 {
            y = v;
        } else {
            let g = vocab
                .element_of(s.predicates[i - 1][1])
                .map_err(|e| e.to_string())?;
            y = vocab.space().apply(g, y).map_err(|e| e.to_string())?;
            if v != y {
                return Err(format!("answer {i} value breaks the chain"));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Clause embedding
// ---------------------------------------------------------------------------

/// A sequence of embedded clause columns of dimension `d_c = 5 d`, stored
/// sparsely: each column keeps its five raw tokens and exposes the non-blank
/// one-hot coordinates. Column order is predicates `1..=L` then answers
/// `0..=L'`.
#[derive(Clone, Debug)]
pub struct EmbeddedSequence {
    d: usize,
    blank: Token,
    cols: Vec<[Token; 5]>,
}

impl EmbeddedSequence {
    pub fn new(d: usize, blank: Token) -> Self {
        EmbeddedSequence {
            d,
            blank,
            cols: Vec::new(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn d_c(&self) -> usize {
        5 * self.d
    }

    pub fn n_clauses(&self) -> usize {
        self.cols.len()
    }

    pub fn push_raw(&mut self, raw: [Token; 5]) {
        self.cols.push(raw);
    }

    pub fn truncate_clauses(&mut self, n: usize) {
        self.cols.truncate(n);
    }

    pub fn col_tokens(&self, k: usize) -> [Token; 5] {
        self.cols[k]
    }

    /// Non-blank `(slot, token)` pairs of column `k`; the one-hot coordinate
    /// of such a pair is `slot * d + token`.
    pub fn nonzeros(&self, k: usize) -> impl Iterator<Item = (usize, Token)> + '_ {
        let blank = self.blank;
        self.cols[k]
            .into_iter()
            .enumerate()
            .filter(move |&(_, t)| t != blank)
    }

    #[inline]
    pub fn coord(&self, slot: usize, t: Token) -> usize {
        slot * self.d + t.index()
    }

    /// Dense column, for cross-checks.
    pub fn dense_col(&self, k: usize) -> Vec<f64> {
        let mut col = vec![0.0; self.d_c()];
        for (slot, t) in self.nonzeros(k) {
            col[self.coord(slot, t)] = 1.0;
        }
        col
    }
}

/// Embed a sentence: columns are predicates `1..=L` then answers `0..=L'`.
pub fn embed(vocab: &Vocabulary, s: &LegoSentence) -> EmbeddedSequence {
    let blank = vocab.blank();
    let mut seq = EmbeddedSequence::new(vocab.d(), blank);
    for p in &s.predicates {
        seq.push_raw([p[0], p[1], p[2], blank, blank]);
    }
    for a in &s.answers {
        seq.push_raw(a.tokens(blank));
    }
    seq
}

// ---------------------------------------------------------------------------
// JSONL corpora
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SentenceLine {
    l: usize,
    l_prime: usize,
    predicates: Vec<[u32; 3]>,
    answers: Vec<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    malformed: Vec<(usize, [u32; 5])>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    index: Option<u64>,
}

fn sentence_to_line(s: &LegoSentence, seed: Option<u64>, index: Option<u64>) -> SentenceLine {
    let mut answers = Vec::with_capacity(s.answers.len());
    let mut malformed = Vec::new();
    for (i, a) in s.answers.iter().enumerate() {
        match a {
            AnswerClause::Canonical { var, value } => answers.push([var.0, value.0]),
            AnswerClause::Raw(raw) => {
                answers.push([raw[3].0, raw[4].0]);
                malformed.push((i, [raw[0].0, raw[1].0, raw[2].0, raw[3].0, raw[4].0]));
            }
        }
    }
    SentenceLine {
        l: s.chain_len(),
        l_prime: s.horizon(),
        predicates: s.predicates.iter().map(|p| [p[0].0, p[1].0, p[2].0]).collect(),
        answers,
        malformed,
        seed,
        index,
    }
}

fn line_to_sentence(line: &SentenceLine) -> Result<LegoSentence, String> {
    if line.predicates.len() != line.l {
        return Err(format!(
            "expected {} predicates, found {}",
            line.l,
            line.predicates.len()
        ));
    }
    if line.answers.len() != line.l_prime + 1 {
        return Err(format!(
            "expected {} answers, found {}",
            line.l_prime + 1,
            line.answers.len()
        ));
    }
    let raw_by_index: std::collections::HashMap<usize, [u32; 5]> =
        line.malformed.iter().cloned().collect();
    let mut answers = Vec::with_capacity(line.answers.len());
    for (i, a) in line.answers.iter().enumerate() {
        if let Some(raw) = raw_by_index.get(&i) {
            answers.push(AnswerClause::Raw(raw.map(Token)));
        } else {
            answers.push(AnswerClause::Canonical {
                var: Token(a[0]),
                value: Token(a[1]),
            });
        }
    }
    Ok(LegoSentence {
        predicates: line
            .predicates
            .iter()
            .map(|p| [Token(p[0]), Token(p[1]), Token(p[2])])
            .collect(),
        answers,
    })
}

/// Write a JSONL corpus; one sentence per line with seed metadata.
pub fn write_corpus(
    path: &Path,
    sentences: &[LegoSentence],
    seed: u64,
) -> Result<(), CorpusError> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    for (i, s) in sentences.iter().enumerate() {
        let line = sentence_to_line(s, Some(seed), Some(i as u64));
        serde_json::to_writer(&mut out, &line)
            .map_err(|e| CorpusError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a JSONL corpus; errors name the offending line.
pub fn read_corpus(path: &Path) -> Result<Vec<LegoSentence>, CorpusError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SentenceLine =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        out.push(line_to_sentence(&parsed).map_err(|message| CorpusError::Parse {
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}

/// Generate `count` oracle-labeled sentences of length `l` under the
/// per-sentence stream rule `Rng::for_stream(seed, index)`.
pub fn generate_corpus(
    vocab: &Vocabulary,
    l: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<LegoSentence>, CorpusError> {
    (0..count)
        .map(|i| {
            let mut rng = Rng::for_stream(seed, i as u64);
            sample_sentence(vocab, l, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c6_vocab() -> Vocabulary {
        Vocabulary::new(30, ActionKind::Cyclic, 6).unwrap()
    }

    #[test]
    fn vocabulary_sizes() {
        assert_eq!(c6_vocab().d(), 43);
        let s5 = Vocabulary::new(30, ActionKind::Symmetry, 5).unwrap();
        assert_eq!(s5.d(), 156);
        assert!(Vocabulary::new(30, ActionKind::Symmetry, 9).is_err());
        assert!(Vocabulary::new(1, ActionKind::Cyclic, 6).is_err());
    }

    #[test]
    fn token_map_is_injective_and_covering() {
        let vocab = c6_vocab();
        let mut seen = std::collections::HashSet::new();
        for i in 0..vocab.n_x() {
            assert!(seen.insert(vocab.variable(i)));
        }
        for i in 0..vocab.n_actions() {
            assert!(seen.insert(vocab.action_by_index(i)));
        }
        for y in 0..vocab.n_y() {
            assert!(seen.insert(vocab.value(y)));
        }
        assert!(seen.insert(vocab.blank()));
        assert_eq!(seen.len(), vocab.d());
        // every index decodes
        for i in 0..vocab.d() as u32 {
            assert!(vocab.kind_of(Token(i)).is_ok());
        }
        assert!(vocab.kind_of(Token(vocab.d() as u32)).is_err());
    }

    #[test]
    fn sample_has_expected_layout() {
        let vocab = c6_vocab();
        let mut rng = Rng::new(1);
        let s = sample_sentence(&vocab, 1, &mut rng).unwrap();
        assert_eq!(s.chain_len(), 1);
        assert_eq!(s.horizon(), 1);
        assert_eq!(s.n_clauses(), 3); // [Predicate, Answer(x0), Answer(x1)]
        validate_sentence(&vocab, &s).unwrap();
    }

    #[test]
    fn samples_pass_oracle_validation() {
        for vocab in [c6_vocab(), Vocabulary::new(30, ActionKind::Symmetry, 5).unwrap()] {
            for i in 0..2000 {
                let mut rng = Rng::for_stream(7, i);
                let s = sample_sentence(&vocab, 1 + (i % 10) as usize, &mut rng).unwrap();
                validate_sentence(&vocab, &s).unwrap();
            }
        }
    }

    #[test]
    fn sample_rejects_overlong_chain() {
        let vocab = c6_vocab();
        let mut rng = Rng::new(1);
        assert!(matches!(
            sample_sentence(&vocab, 30, &mut rng),
            Err(CorpusError::ChainTooLong { .. })
        ));
    }

    #[test]
    fn first_variable_frequency_is_uniform() {
        let vocab = c6_vocab();
        let n = 10_000;
        let mut counts = vec![0usize; vocab.n_x()];
        for i in 0..n {
            let mut rng = Rng::for_stream(42, i);
            let s = sample_sentence(&vocab, 3, &mut rng).unwrap();
            let x0 = s.variables()[0];
            counts[x0.index()] += 1;
        }
        let p = 1.0 / vocab.n_x() as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sigma,
                "variable {i} first-position count {c} outside ±3σ of {mean}"
            );
        }
    }

    #[test]
    fn truncate_keeps_prefix_and_counts() {
        let vocab = c6_vocab();
        let mut rng = Rng::new(5);
        let s = sample_sentence(&vocab, 4, &mut rng).unwrap();
        let full = truncate(&s, s.horizon()).unwrap();
        assert_eq!(full, s);
        let zero = truncate(&s, 0).unwrap();
        assert_eq!(zero.answers.len(), 1);
        for h in 0..=4 {
            let t = truncate(&s, h).unwrap();
            assert_eq!(t.n_clauses(), 4 + h + 1);
        }
        assert!(truncate(&s, 5).is_err());
        // original untouched
        assert_eq!(s.answers.len(), 5);
    }

    #[test]
    fn embedding_slots_and_norms() {
        let vocab = c6_vocab();
        let mut rng = Rng::new(8);
        let s = sample_sentence(&vocab, 3, &mut rng).unwrap();
        let seq = embed(&vocab, &s);
        assert_eq!(seq.n_clauses(), 7);
        for k in 0..3 {
            let nz: Vec<usize> = seq.nonzeros(k).map(|(slot, _)| slot).collect();
            assert_eq!(nz, vec![0, 1, 2], "predicate column slots");
            let norm: f64 = seq.dense_col(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 3f64.sqrt()).abs() < 1e-12);
        }
        for k in 3..7 {
            let nz: Vec<usize> = seq.nonzeros(k).map(|(slot, _)| slot).collect();
            assert_eq!(nz, vec![3, 4], "answer column slots");
            let norm: f64 = seq.dense_col(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_is_injective_on_samples() {
        let vocab = c6_vocab();
        let mut cols_seen = std::collections::HashSet::new();
        let mut sentences_seen = std::collections::HashSet::new();
        for i in 0..500 {
            let mut rng = Rng::for_stream(12, i);
            let s = sample_sentence(&vocab, 2, &mut rng).unwrap();
            let seq = embed(&vocab, &s);
            let key: Vec<[u32; 5]> = (0..seq.n_clauses())
                .map(|k| seq.col_tokens(k).map(|t| t.0))
                .collect();
            assert_eq!(
                sentences_seen.insert(format!("{s:?}")),
                cols_seen.insert(key),
                "distinct sentences must embed distinctly"
            );
        }
    }

    #[test]
    fn bootstrap_with_oracle_matches_ground_truth() {
        let vocab = c6_vocab();
        let oracle = OracleAnnotator { vocab: &vocab };
        for i in 0..200 {
            let mut rng_a = Rng::for_stream(3, i);
            let mut rng_b = Rng::for_stream(3, i);
            let boot = bootstrap_sentence(&vocab, 4, 2, &oracle, &mut rng_a).unwrap();
            let truth = truncate(&sample_sentence(&vocab, 4, &mut rng_b).unwrap(), 2).unwrap();
            assert_eq!(boot, truth);
        }
    }

    #[test]
    fn bootstrap_with_constant_annotator_records_verbatim() {
        let vocab = c6_vocab();
        let clause = [Token(0), Token(1), Token(2), Token(3), Token(4)];
        let annotator = ConstantAnnotator(clause);
        let mut rng = Rng::new(9);
        let s = bootstrap_sentence(&vocab, 3, 3, &annotator, &mut rng).unwrap();
        assert!(s.answers[0].is_canonical());
        for a in &s.answers[1..] {
            assert_eq!(*a, AnswerClause::Raw(clause));
        }
    }

    #[test]
    fn bootstrap_canonicalizes_well_formed_emissions() {
        let vocab = c6_vocab();
        let blank = vocab.blank();
        let clause = [blank, blank, blank, vocab.variable(7), vocab.value(3)];
        let annotator = ConstantAnnotator(clause);
        let mut rng = Rng::new(9);
        let s = bootstrap_sentence(&vocab, 2, 2, &annotator, &mut rng).unwrap();
        assert!(s.answers.iter().all(AnswerClause::is_canonical));
    }

    #[test]
    fn corpus_roundtrip() {
        let vocab = c6_vocab();
        let dir = std::env::temp_dir().join(format!("lego-corpus-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.jsonl");
        let mut sentences = generate_corpus(&vocab, 5, 1000, 77).unwrap();
        // include one sentence with a malformed bootstrapped answer
        let annotator = ConstantAnnotator([Token(1), Token(2), Token(3), Token(4), Token(5)]);
        let mut rng = Rng::new(1);
        sentences.push(bootstrap_sentence(&vocab, 3, 2, &annotator, &mut rng).unwrap());
        write_corpus(&path, &sentences, 77).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(back, sentences);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corpus_read_errors_name_the_line() {
        let dir = std::env::temp_dir().join(format!("lego-corpus-err-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.jsonl");
        let vocab = c6_vocab();
        let sentences = generate_corpus(&vocab, 2, 2, 5).unwrap();
        write_corpus(&path, &sentences, 5).unwrap();
        // truncate the final line mid-JSON
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = text.len() - 20;
        std::fs::write(&path, &text[..cut]).unwrap();
        match read_corpus(&path) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_corpus_reads_empty() {
        let dir = std::env::temp_dir().join(format!("lego-corpus-empty-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_corpus(&path).unwrap().is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }
}
