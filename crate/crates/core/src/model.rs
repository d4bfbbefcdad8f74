//! The one-layer decoder block.
//!
//! Architecture, in the order data flows:
//!
//! * **Attention** — clause-level softmax attention with no positional
//!   encoding. Scores are `z_q^T Q z_k` with a single merged parameter matrix
//!   `Q` per head; the query is always the final answer clause of the prefix
//!   and keys run over every clause (self included). Under block sparsity
//!   only the `(4,3)` and `(4,4)` slot blocks of `Q` are nonzero, so answer
//!   queries key on the slot-3 token of predicate clauses and the slot-4
//!   token of answer clauses. With several heads, each head aggregates
//!   independently and the aggregates are averaged.
//! * **FFN** — `m` neurons per (token position, vocabulary coordinate) pair:
//!   `Lambda_{i,j,r} = <W_{i,j,r}, X> + b` with a fixed bias `b`, output
//!   `S_{i,j} = sum_r sReLU(Lambda_{i,j,r})` clipped from above at `B`.
//! * **Decoding** — each of the five clipped logit vectors parameterizes an
//!   independent softmax over the vocabulary; the next clause is sampled (or
//!   taken greedily) from the product distribution.
//!
//! Weights are stored coordinate-major (`w[p][i][j][r]` flattened) so that
//! forward and backward passes over the sparse attention output reduce to
//! contiguous AXPY sweeps. Checkpoints serialize the logical row-major
//! `[5][d][m][d_c]` order with a JSON header, so files are layout-independent
//! and bit-exact.

use crate::corpus::{Annotator, EmbeddedSequence, LegoSentence, Token, Vocabulary};
use crate::group::ActionKind;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("empty clause sequence")]
    EmptySequence,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Smoothed ReLU
// ---------------------------------------------------------------------------

/// Activation variant. `Main` is the three-piece smoothed ReLU; `Modified`
/// adds a mild negative slope and saturates at `cap`, matching the variant
/// used for the symmetry-case analysis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum SReluVariant {
    Main,
    Modified { varpi: f64, cap: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SReluConfig {
    /// Even polynomial exponent of the transition region.
    pub q: u32,
    /// Transition half-width.
    pub rho: f64,
    #[serde(flatten)]
    pub variant: SReluVariant,
}

impl SReluConfig {
    pub fn main(q: u32, rho: f64) -> Self {
        let cfg = SReluConfig {
            q,
            rho,
            variant: SReluVariant::Main,
        };
        cfg.validate().expect("valid sReLU config");
        cfg
    }

    pub fn modified(q: u32, rho: f64, varpi: f64, cap: f64) -> Self {
        let cfg = SReluConfig {
            q,
            rho,
            variant: SReluVariant::Modified { varpi, cap },
        };
        cfg.validate().expect("valid sReLU config");
        cfg
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.q < 4 || self.q % 2 != 0 {
            return Err(ModelError::DimensionMismatch(format!(
                "sReLU exponent must be even and >= 4, got {}",
                self.q
            )));
        }
        if !(self.rho > 0.0) {
            return Err(ModelError::DimensionMismatch(format!(
                "sReLU width must be positive, got {}",
                self.rho
            )));
        }
        if let SReluVariant::Modified { varpi, cap } = self.variant {
            if !(varpi > 0.0) || !(cap > self.rho) {
                return Err(ModelError::DimensionMismatch(format!(
                    "modified sReLU needs 0 < varpi and cap > rho, got varpi={varpi}, cap={cap}"
                )));
            }
        }
        Ok(())
    }

    /// Reference constant `lambda = (d-1) / (d-1 + e^B)` associated with the
    /// modified variant's saturation bound.
    pub fn lambda_ref(&self, d: usize) -> Option<f64> {
        match self.variant {
            SReluVariant::Modified { cap, .. } => {
                Some((d as f64 - 1.0) / (d as f64 - 1.0 + cap.exp()))
            }
            SReluVariant::Main => None,
        }
    }

    /// x^q for even q, via repeated squaring on x^2.
    #[inline]
    fn pow_even(x: f64, q: u32) -> f64 {
        let mut acc = 1.0;
        let mut base = x * x;
        let mut e = q / 2;
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base *= base;
            e >>= 1;
        }
        acc
    }

    pub fn value(&self, x: f64) -> f64 {
        let q = self.q as f64;
        let rho = self.rho;
        match self.variant {
            SReluVariant::Main => {
                if x <= -rho {
                    rho / q
                } else if x <= rho {
                    Self::pow_even(x, self.q) / (rho.powi(self.q as i32 - 1) * q)
                } else {
                    x - rho * (1.0 - 1.0 / q)
                }
            }
            SReluVariant::Modified { varpi, cap } => {
                if x <= -cap {
                    varpi * cap
                } else if x <= -varpi {
                    -varpi * x
                } else if x <= 0.0 {
                    0.5 * x * x
                } else if x <= rho {
                    Self::pow_even(x, self.q) / (rho.powi(self.q as i32 - 1) * q)
                } else if x <= cap {
                    x - rho * (1.0 - 1.0 / q)
                } else {
                    cap - rho * (1.0 - 1.0 / q)
                }
            }
        }
    }

    /// Exact branch derivative; saturated plateaus return 0.
    pub fn deriv(&self, x: f64) -> f64 {
        let rho = self.rho;
        match self.variant {
            SReluVariant::Main => {
                if x <= -rho {
                    0.0
                } else if x <= rho {
                    let qm1 = self.q - 1;
                    // x^{q-1} / rho^{q-1}, q-1 odd
                    let t = x / rho;
                    t.powi(qm1 as i32)
                } else {
                    1.0
                }
            }
            SReluVariant::Modified { varpi, cap } => {
                if x <= -cap {
                    0.0
                } else if x <= -varpi {
                    -varpi
                } else if x <= 0.0 {
                    x
                } else if x <= rho {
                    let t = x / rho;
                    t.powi(self.q as i32 - 1)
                } else if x <= cap {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Branch boundaries, for breakpoint-exclusion in gradient checks.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self.variant {
            SReluVariant::Main => vec![-self.rho, self.rho],
            SReluVariant::Modified { varpi, cap } => {
                vec![-cap, -varpi, 0.0, self.rho, cap]
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sparsity {
    Full,
    Blocks43_44,
}

/// Hyperparameters that shape a model; dimensions come from the vocabulary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelHyper {
    pub m: usize,
    pub heads: usize,
    pub sparsity: Sparsity,
    pub srelu: SReluConfig,
    pub sigma0: f64,
    /// Logit clip bound `B = c_b * ln d`.
    pub c_b: f64,
    /// Standard deviation for the trainable attention entries at
    /// initialization; zero is the theory setting `Q = 0`.
    #[serde(default)]
    pub q_init_sigma: f64,
}

impl ModelHyper {
    /// Defaults: `q = 4`, `rho = 1/ln^2 d`, `sigma0 = d^{-1/2}`, `c_b = 20`,
    /// main sReLU, one merged-Q head, block-sparse attention.
    pub fn theory_default(d: usize, m: usize) -> Self {
        let ln_d = (d as f64).ln();
        ModelHyper {
            m,
            heads: 1,
            sparsity: Sparsity::Blocks43_44,
            srelu: SReluConfig::main(4, 1.0 / (ln_d * ln_d)),
            sigma0: (d as f64).powf(-0.5),
            c_b: 20.0,
            q_init_sigma: 0.0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    d: usize,
    m: usize,
    n_y: usize,
    action_kind: ActionKind,
    heads: usize,
    sparsity: Sparsity,
    srelu: SReluConfig,
    sigma0: f64,
    bias: f64,
    clip: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_len: Option<usize>,
}

/// All trainable and fixed parameters of the block.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub d: usize,
    pub m: usize,
    pub n_y: usize,
    pub action_kind: ActionKind,
    pub sparsity: Sparsity,
    pub srelu: SReluConfig,
    pub sigma0: f64,
    /// Fixed bias `b = sigma0 * ln d`; never updated.
    pub bias: f64,
    /// Clip bound `B`; logits are stored as `min(raw, B)`.
    pub clip: f64,
    /// Training length annotation carried into checkpoints.
    pub train_len: Option<usize>,
    /// FFN weights, coordinate-major: `w[p * n_neurons + n]` where
    /// `n = i * d * m + j * m + r` and `p` indexes the `d_c` input coords.
    w: Vec<f64>,
    /// One merged attention matrix per head, row-major `d_c x d_c`.
    q_heads: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn init(vocab: &Vocabulary, hyper: &ModelHyper, seed: u64) -> Self {
        let d = vocab.d();
        let d_c = 5 * d;
        let n_neurons = 5 * d * hyper.m;
        let ln_d = (d as f64).ln();
        let mut rng = Rng::new(seed);
        let mut w = vec![0.0; d_c * n_neurons];
        // Draw in logical row-major order (i, j, r, p) so the stream is
        // layout-independent.
        for n in 0..n_neurons {
            for p in 0..d_c {
                w[p * n_neurons + n] = hyper.sigma0 * rng.next_normal();
            }
        }
        let mut params = ModelParams {
            d,
            m: hyper.m,
            n_y: vocab.n_y(),
            action_kind: vocab.space().kind(),
            sparsity: hyper.sparsity,
            srelu: hyper.srelu,
            sigma0: hyper.sigma0,
            bias: hyper.sigma0 * ln_d,
            clip: hyper.c_b * ln_d,
            train_len: None,
            w,
            q_heads: vec![vec![0.0; d_c * d_c]; hyper.heads],
        };
        if hyper.q_init_sigma > 0.0 {
            for h in 0..hyper.heads {
                for row in 0..d_c {
                    for col in 0..d_c {
                        if params.q_entry_trainable(row, col) {
                            params.q_heads[h][row * d_c + col] =
                                hyper.q_init_sigma * rng.next_normal();
                        }
                    }
                }
            }
        }
        params
    }

    pub fn d_c(&self) -> usize {
        5 * self.d
    }

    pub fn n_neurons(&self) -> usize {
        5 * self.d * self.m
    }

    pub fn heads(&self) -> usize {
        self.q_heads.len()
    }

    #[inline]
    pub fn neuron(&self, i: usize, j: usize, r: usize) -> usize {
        (i * self.d + j) * self.m + r
    }

    #[inline]
    pub fn w_get(&self, i: usize, j: usize, r: usize, p: usize) -> f64 {
        self.w[p * self.n_neurons() + self.neuron(i, j, r)]
    }

    #[inline]
    pub fn w_set(&mut self, i: usize, j: usize, r: usize, p: usize, v: f64) {
        let idx = p * self.n_neurons() + self.neuron(i, j, r);
        self.w[idx] = v;
    }

    /// Coordinate-major weight storage (see struct docs).
    pub fn w_flat(&self) -> &[f64] {
        &self.w
    }

    pub fn w_flat_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }

    pub fn q_head(&self, h: usize) -> &[f64] {
        &self.q_heads[h]
    }

    pub fn q_head_mut(&mut self, h: usize) -> &mut [f64] {
        &mut self.q_heads[h]
    }

    /// Whether a `Q` entry (row = query coord, col = key coord) is trainable
    /// under the sparsity pattern. Slot blocks are 1-based in the paper's
    /// numbering: block (4,3) routes answer queries to predicate keys and
    /// (4,4) to answer keys.
    #[inline]
    pub fn q_entry_trainable(&self, row: usize, col: usize) -> bool {
        match self.sparsity {
            Sparsity::Full => true,
            Sparsity::Blocks43_44 => {
                let row_slot = row / self.d;
                let col_slot = col / self.d;
                row_slot == 3 && (col_slot == 2 || col_slot == 3)
            }
        }
    }

    /// Bit-exact equality of every parameter, for freeze contracts.
    pub fn bits_equal(&self, other: &ModelParams) -> bool {
        self.w.len() == other.w.len()
            && self
                .w
                .iter()
                .zip(&other.w)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.q_heads.len() == other.q_heads.len()
            && self
                .q_heads
                .iter()
                .zip(&other.q_heads)
                .all(|(qa, qb)| {
                    qa.iter().zip(qb.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
                })
    }

    pub fn q_is_zero(&self) -> bool {
        self.q_heads
            .iter()
            .all(|q| q.iter().all(|v| v.to_bits() == 0.0f64.to_bits()))
    }

    // -----------------------------------------------------------------------
    // Checkpoints: JSON header line + row-major little-endian f64 payload,
    // W first (logical [5][d][m][d_c]) then each head's Q (d_c x d_c).
    // -----------------------------------------------------------------------

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            d: self.d,
            m: self.m,
            n_y: self.n_y,
            action_kind: self.action_kind,
            heads: self.q_heads.len(),
            sparsity: self.sparsity,
            srelu: self.srelu,
            sigma0: self.sigma0,
            bias: self.bias,
            clip: self.clip,
            train_len: self.train_len,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut out, &header)
            .map_err(|e| ModelError::CorruptCheckpoint(e.to_string()))?;
        out.write_all(b"\n")?;
        let n_neurons = self.n_neurons();
        let d_c = self.d_c();
        let mut buf = Vec::with_capacity(d_c * 8);
        for n in 0..n_neurons {
            buf.clear();
            for p in 0..d_c {
                buf.extend_from_slice(&self.w[p * n_neurons + n].to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        for q in &self.q_heads {
            for v in q {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut header_bytes = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            file.read_exact(&mut byte).map_err(|_| {
                ModelError::CorruptCheckpoint("missing header terminator".into())
            })?;
            if byte[0] == b'\n' {
                break;
            }
            header_bytes.push(byte[0]);
            if header_bytes.len() > 1 << 16 {
                return Err(ModelError::CorruptCheckpoint("header too large".into()));
            }
        }
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| ModelError::CorruptCheckpoint(e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(ModelError::UnsupportedVersion(header.version));
        }
        header.srelu.validate()?;
        let d_c = 5 * header.d;
        let n_neurons = 5 * header.d * header.m;
        let expected = (n_neurons * d_c + header.heads * d_c * d_c) * 8;
        let mut payload = Vec::with_capacity(expected);
        file.read_to_end(&mut payload)?;
        if payload.len() != expected {
            return Err(ModelError::CorruptCheckpoint(format!(
                "payload length {} does not match header (expected {expected})",
                payload.len()
            )));
        }
        let mut doubles = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut w = vec![0.0; n_neurons * d_c];
        for n in 0..n_neurons {
            for p in 0..d_c {
                w[p * n_neurons + n] = doubles.next().unwrap();
            }
        }
        let mut q_heads = Vec::with_capacity(header.heads);
        for _ in 0..header.heads {
            q_heads.push((0..d_c * d_c).map(|_| doubles.next().unwrap()).collect());
        }
        Ok(ModelParams {
            d: header.d,
            m: header.m,
            n_y: header.n_y,
            action_kind: header.action_kind,
            sparsity: header.sparsity,
            srelu: header.srelu,
            sigma0: header.sigma0,
            bias: header.bias,
            clip: header.clip,
            train_len: header.train_len,
            w,
            q_heads,
        })
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Which of the five token positions to run the FFN and loss on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Positions(pub [bool; 5]);

impl Positions {
    pub const ALL: Positions = Positions([true; 5]);
    pub const FIFTH: Positions = Positions([false, false, false, false, true]);

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..5).filter(move |&i| self.0[i])
    }
}

/// Sparse vector as (coordinate, value) pairs, sorted by coordinate.
pub type SparseVec = Vec<(usize, f64)>;

/// Everything the forward pass produces for one prefix.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Per-head attention weights from the final answer clause to every
    /// clause, each row summing to 1.
    pub attn_heads: Vec<Vec<f64>>,
    /// Head-averaged attention weights.
    pub attn_mean: Vec<f64>,
    /// Per-head aggregated attention outputs.
    pub x_heads: Vec<SparseVec>,
    /// Head-averaged aggregate fed to the FFN.
    pub x_mean: SparseVec,
    /// Pre-activations for computed positions, indexed by neuron.
    pub lambda: Vec<f64>,
    /// Raw FFN sums before clipping, `[5][d]` flattened (computed positions).
    pub raw: Vec<f64>,
    /// Clipped logits `F = min(raw, B)`.
    pub logits: Vec<f64>,
    /// Softmax rows per position, `[5][d]` flattened.
    pub dist: Vec<f64>,
    pub positions: Positions,
}

/// Softmax in place; stable under score shifts.
pub(crate) fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Argmax with ties broken toward the lowest index.
pub(crate) fn argmax_lowest_tie(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Attention score from the query clause to a key clause under one head.
#[inline]
fn clause_score(seq: &EmbeddedSequence, q: &[f64], d_c: usize, query: usize, key: usize) -> f64 {
    let mut score = 0.0;
    for (sq, tq) in seq.nonzeros(query) {
        let row = seq.coord(sq, tq);
        let row_base = row * d_c;
        for (sk, tk) in seq.nonzeros(key) {
            score += q[row_base + seq.coord(sk, tk)];
        }
    }
    score
}

impl ModelParams {
    /// Attention weights (per head and head-averaged) and the averaged
    /// aggregate, with the final clause as the query.
    pub fn attention_forward(
        &self,
        seq: &EmbeddedSequence,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>, SparseVec), ModelError> {
        let trace = self.forward_with(seq, Positions([false; 5]))?;
        Ok((trace.attn_heads, trace.attn_mean, trace.x_mean))
    }

    /// Full forward pass on the given positions.
    pub fn forward(&self, seq: &EmbeddedSequence) -> Result<ForwardTrace, ModelError> {
        self.forward_with(seq, Positions::ALL)
    }

    pub fn forward_with(
        &self,
        seq: &EmbeddedSequence,
        positions: Positions,
    ) -> Result<ForwardTrace, ModelError> {
        let n_clauses = seq.n_clauses();
        if n_clauses == 0 {
            return Err(ModelError::EmptySequence);
        }
        if seq.d() != self.d {
            return Err(ModelError::DimensionMismatch(format!(
                "sequence vocabulary {} vs model {}",
                seq.d(),
                self.d
            )));
        }
        let d_c = self.d_c();
        let query = n_clauses - 1;
        let heads = self.q_heads.len();

        let mut attn_heads = Vec::with_capacity(heads);
        let mut x_heads = Vec::with_capacity(heads);
        let mut x_dense = vec![0.0; d_c];
        let mut touched: Vec<usize> = Vec::new();
        for q in &self.q_heads {
            let mut scores: Vec<f64> = (0..n_clauses)
                .map(|k| clause_score(seq, q, d_c, query, k))
                .collect();
            softmax_in_place(&mut scores);
            // per-head aggregate
            let mut head_dense = vec![0.0; d_c];
            let mut head_coords: Vec<usize> = Vec::new();
            for (k, &wk) in scores.iter().enumerate() {
                for (slot, t) in seq.nonzeros(k) {
                    let p = seq.coord(slot, t);
                    if head_dense[p] == 0.0 {
                        head_coords.push(p);
                    }
                    head_dense[p] += wk;
                }
            }
            head_coords.sort_unstable();
            head_coords.dedup();
            let head_sparse: SparseVec =
                head_coords.iter().map(|&p| (p, head_dense[p])).collect();
            for &(p, v) in &head_sparse {
                if x_dense[p] == 0.0 {
                    touched.push(p);
                }
                x_dense[p] += v / heads as f64;
            }
            x_heads.push(head_sparse);
            attn_heads.push(scores);
        }
        touched.sort_unstable();
        touched.dedup();
        let x_mean: SparseVec = touched.iter().map(|&p| (p, x_dense[p])).collect();

        let mut attn_mean = vec![0.0; n_clauses];
        for head in &attn_heads {
            for (k, &w) in head.iter().enumerate() {
                attn_mean[k] += w / heads as f64;
            }
        }

        // FFN on requested positions.
        let n_neurons = self.n_neurons();
        let block = self.d * self.m;
        let mut lambda = vec![self.bias; n_neurons];
        for i in positions.iter() {
            let (n0, n1) = (i * block, (i + 1) * block);
            for &(p, xv) in &x_mean {
                let row = &self.w[p * n_neurons + n0..p * n_neurons + n1];
                let dst = &mut lambda[n0..n1];
                for (acc, &wv) in dst.iter_mut().zip(row) {
                    *acc += xv * wv;
                }
            }
        }

        let mut raw = vec![0.0; 5 * self.d];
        let mut logits = vec![0.0; 5 * self.d];
        let mut dist = vec![0.0; 5 * self.d];
        for i in positions.iter() {
            for j in 0..self.d {
                let base = (i * self.d + j) * self.m;
                let mut s = 0.0;
                for r in 0..self.m {
                    s += self.srelu.value(lambda[base + r]);
                }
                raw[i * self.d + j] = s;
                // not f64::min: NaN must propagate to the divergence guard
                logits[i * self.d + j] = if s > self.clip { self.clip } else { s };
            }
            let row = &mut dist[i * self.d..(i + 1) * self.d];
            row.copy_from_slice(&logits[i * self.d..(i + 1) * self.d]);
            softmax_in_place(row);
        }

        Ok(ForwardTrace {
            attn_heads,
            attn_mean,
            x_heads,
            x_mean,
            lambda,
            raw,
            logits,
            dist,
            positions,
        })
    }
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Sample,
    Greedy,
}

fn sample_index(dist: &[f64], rng: &mut Rng) -> usize {
    let r = rng.next_f64();
    let mut cum = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        cum += p;
        if r < cum {
            return i;
        }
    }
    dist.len() - 1
}

impl ModelParams {
    /// Predict the next clause as five tokens drawn independently from the
    /// per-position distributions (Sample) or the per-position argmax with
    /// ties to the lowest index (Greedy).
    pub fn predict_clause(
        &self,
        seq: &EmbeddedSequence,
        mode: DecodeMode,
        rng: &mut Rng,
    ) -> Result<[Token; 5], ModelError> {
        let trace = self.forward(seq)?;
        let mut tokens = [Token(0); 5];
        for i in 0..5 {
            let row = &trace.dist[i * self.d..(i + 1) * self.d];
            let idx = match mode {
                DecodeMode::Greedy => {
                    argmax_lowest_tie(&trace.logits[i * self.d..(i + 1) * self.d])
                }
                DecodeMode::Sample => sample_index(row, rng),
            };
            tokens[i] = Token(idx as u32);
        }
        Ok(tokens)
    }
}

/// Annotator backed by a frozen model; used for bootstrapped corpora and
/// rollout evaluation.
pub struct ModelAnnotator<'a> {
    pub params: &'a ModelParams,
    pub vocab: &'a Vocabulary,
    pub mode: DecodeMode,
}

impl Annotator for ModelAnnotator<'_> {
    fn next_clause(&self, prefix: &LegoSentence, rng: &mut Rng) -> [Token; 5] {
        let seq = crate::corpus::embed(self.vocab, prefix);
        self.params
            .predict_clause(&seq, self.mode, rng)
            .expect("model annotator forward")
    }
}
