//! Losses, gradients, optimizers, and the two staged training algorithms.
//!
//! The next-clause loss conditions on a ground-truth (or bootstrapped) prefix
//! and scores the model's product distribution on the next answer clause.
//! All losses are population expectations realized as fresh-minibatch Monte
//! Carlo estimates: every step draws a new batch from the configured
//! distribution.
//!
//! Gradients come in two independent flavors:
//!
//! * [`grad_analytic`] — closed-form backward pass. For the FFN,
//!   `dLoss/dW_{i,j,r} = (dist - onehot) * sReLU'(Lambda) * X` per item; for
//!   the attention matrix, the per-key score gradient is
//!   `attn_k * (xi_k - xibar)` with `xi_k = gX . Z_k`, scattered through the
//!   outer product of query and key one-hots. Coordinates whose logit was
//!   clipped contribute nothing (hard clip, subgradient zero past the bound).
//! * [`grad_fd`] — central finite differences over every trainable scalar on
//!   the same frozen batch, sharing the forward loss path bit for bit.
//!
//! Training runs are staged: Algorithm-style curricula freeze one parameter
//! group per stage (the FFN stage leaves `Q` untouched and vice versa), and
//! recursive self-training doubles the chain length each stage, labeling
//! batches with the previous stage's frozen checkpoint acting as a greedy
//! annotator.

use crate::corpus::{
    bootstrap_sentence, embed, sample_sentence, truncate, Annotator, EmbeddedSequence,
    LegoSentence, Token, Vocabulary,
};
use crate::model::{DecodeMode, ModelAnnotator, ModelError, ModelParams, Positions};
use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("loss diverged to NaN at stage {stage} step {step}")]
    Diverged { stage: usize, step: u64 },
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("corpus error: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
}

/// Domain separator mixed into the seed for training batch streams.
const TRAIN_STREAM_DOMAIN: u64 = 0x7261_696e_5f62_6174;

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// One teacher-forced (or self-labeled) training example: an embedded prefix
/// `Z^{L, h-1}` and the five target tokens of the answer clause at step `h`.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub seq: EmbeddedSequence,
    pub target: [Token; 5],
}

/// A minibatch. Losses normalize by `n_sentences`, so a sentence contributing
/// several horizon terms realizes the summed objective exactly.
#[derive(Clone, Debug)]
pub struct Batch {
    pub items: Vec<TrainItem>,
    pub n_sentences: usize,
}

/// Which answer steps of each sampled sentence enter the loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HorizonMode {
    /// Sum over every step `1..=L` (the full next-clause objective).
    All,
    /// Sum over the listed steps.
    Fixed(Vec<usize>),
    /// One step per sentence, uniform in `1..=L`: an unbiased sample of the
    /// full objective up to the constant factor `1/L`.
    UniformOne,
}

impl HorizonMode {
    fn horizons(&self, l: usize, rng: &mut Rng) -> Vec<usize> {
        match self {
            HorizonMode::All => (1..=l).collect(),
            HorizonMode::Fixed(list) => list.clone(),
            HorizonMode::UniformOne => vec![1 + rng.gen_range(l)],
        }
    }

    fn max_horizon(&self, l: usize) -> usize {
        match self {
            HorizonMode::All | HorizonMode::UniformOne => l,
            HorizonMode::Fixed(list) => list.iter().copied().max().unwrap_or(0),
        }
    }
}

fn answer_tokens(s: &LegoSentence, h: usize, vocab: &Vocabulary) -> [Token; 5] {
    s.answers[h].tokens(vocab.blank())
}

/// Build one ground-truth batch: fresh sentences, prefixes `Z^{L,h-1}`,
/// targets `Z_{ans,h}`.
pub fn build_batch(
    vocab: &Vocabulary,
    chain_len: usize,
    horizons: &HorizonMode,
    n_sentences: usize,
    rng: &mut Rng,
) -> Result<Batch, TrainError> {
    let mut items = Vec::new();
    for _ in 0..n_sentences {
        let s = sample_sentence(vocab, chain_len, rng)?;
        for h in horizons.horizons(chain_len, rng) {
            let prefix = truncate(&s, h - 1)?;
            items.push(TrainItem {
                seq: embed(vocab, &prefix),
                target: answer_tokens(&s, h, vocab),
            });
        }
    }
    Ok(Batch {
        items,
        n_sentences,
    })
}

/// Build one bootstrapped batch: predicates and `y_0` from the ground-truth
/// distribution, answers `1..=h` recursively emitted by the frozen annotator,
/// and the annotator's own clause at step `h` used as the target.
pub fn build_bootstrapped_batch(
    vocab: &Vocabulary,
    chain_len: usize,
    horizons: &HorizonMode,
    n_sentences: usize,
    annotator: &dyn Annotator,
    rng: &mut Rng,
) -> Result<Batch, TrainError> {
    let max_h = horizons.max_horizon(chain_len).max(1);
    let mut items = Vec::new();
    for _ in 0..n_sentences {
        let s = bootstrap_sentence(vocab, chain_len, max_h, annotator, rng)?;
        for h in horizons.horizons(chain_len, rng) {
            let prefix = truncate(&s, h - 1)?;
            items.push(TrainItem {
                seq: embed(vocab, &prefix),
                target: answer_tokens(&s, h, vocab),
            });
        }
    }
    Ok(Batch {
        items,
        n_sentences,
    })
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    /// Mean over sentences of the per-sentence loss (summed over horizon
    /// terms and requested token positions).
    pub total: f64,
    /// Same, split by token position.
    pub per_token: [f64; 5],
}

/// Negative log-likelihood of the targets under the model, teacher-forcing
/// the prefixes in the batch.
pub fn next_clause_loss(
    params: &ModelParams,
    batch: &Batch,
    positions: Positions,
) -> Result<LossValue, TrainError> {
    if batch.items.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = 0.0;
    let mut per_token = [0.0; 5];
    for item in &batch.items {
        let trace = params.forward_with(&item.seq, positions)?;
        for i in positions.iter() {
            let p = trace.dist[i * params.d + item.target[i].index()];
            let nll = -p.ln();
            total += nll;
            per_token[i] += nll;
        }
    }
    let norm = batch.n_sentences as f64;
    Ok(LossValue {
        total: total / norm,
        per_token: per_token.map(|v| v / norm),
    })
}

/// Gradients of the batch loss with the sparsity mask applied. Bias
/// gradients do not exist: the bias is fixed by construction.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    /// Same coordinate-major layout as `ModelParams::w_flat`.
    pub d_w: Vec<f64>,
    /// Sorted input coordinates whose `d_w` row can be nonzero; optimizer
    /// sweeps visit only these rows (plus previously active ones for Adam).
    pub w_rows: Vec<usize>,
    /// Per head, row-major `d_c x d_c`; masked entries are exactly zero.
    pub d_q: Vec<Vec<f64>>,
    pub loss: f64,
    pub per_token: [f64; 5],
    pub batch_size: usize,
}

/// Worker count for gradient accumulation, from the `THREADS` environment
/// variable (default 1). Results are reproducible at a fixed count: chunks
/// are contiguous item ranges reduced in index order.
pub fn worker_count() -> usize {
    static N: std::sync::OnceLock<usize> = std::sync::OnceLock::new();
    *N.get_or_init(|| {
        std::env::var("THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

/// Per-worker accumulator with reusable scratch.
struct GradAccum {
    d_w: Vec<f64>,
    w_row_mask: Vec<bool>,
    d_q: Vec<Vec<f64>>,
    total: f64,
    per_token: [f64; 5],
    coeff: Vec<f64>,
    dotp_dense: Vec<f64>,
    x_scratch: Vec<f64>,
}

impl GradAccum {
    fn new(params: &ModelParams) -> Self {
        GradAccum {
            d_w: vec![0.0; params.w_flat().len()],
            w_row_mask: vec![false; params.d_c()],
            d_q: vec![vec![0.0; params.d_c() * params.d_c()]; params.heads()],
            total: 0.0,
            per_token: [0.0; 5],
            coeff: vec![0.0; params.n_neurons()],
            dotp_dense: vec![0.0; params.d_c()],
            x_scratch: vec![0.0; params.d_c()],
        }
    }
}

/// Closed-form gradients on a batch. See the module docs for the formulas.
pub fn grad_analytic(
    params: &ModelParams,
    batch: &Batch,
    positions: Positions,
) -> Result<GradientBundle, TrainError> {
    if batch.items.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let workers = worker_count().min(batch.items.len());
    let mut acc = if workers <= 1 {
        let mut acc = GradAccum::new(params);
        for item in &batch.items {
            accumulate_item(params, item, positions, &mut acc)?;
        }
        acc
    } else {
        let chunk_size = batch.items.len().div_ceil(workers);
        let results: Vec<Result<GradAccum, TrainError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .items
                .chunks(chunk_size)
                .map(|chunk| {
                    scope.spawn(move || {
                        let mut acc = GradAccum::new(params);
                        for item in chunk {
                            accumulate_item(params, item, positions, &mut acc)?;
                        }
                        Ok(acc)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        });
        let mut merged: Option<GradAccum> = None;
        for r in results {
            let part = r?;
            match &mut merged {
                None => merged = Some(part),
                Some(acc) => {
                    for (a, b) in acc.d_w.iter_mut().zip(&part.d_w) {
                        *a += b;
                    }
                    for (a, b) in acc.w_row_mask.iter_mut().zip(&part.w_row_mask) {
                        *a |= b;
                    }
                    for (qa, qb) in acc.d_q.iter_mut().zip(&part.d_q) {
                        for (a, b) in qa.iter_mut().zip(qb) {
                            *a += b;
                        }
                    }
                    acc.total += part.total;
                    for i in 0..5 {
                        acc.per_token[i] += part.per_token[i];
                    }
                }
            }
        }
        merged.expect("at least one chunk")
    };

    let norm = batch.n_sentences as f64;
    for v in acc.d_w.iter_mut() {
        *v /= norm;
    }
    for q in acc.d_q.iter_mut() {
        for v in q.iter_mut() {
            *v /= norm;
        }
    }
    let w_rows: Vec<usize> = acc
        .w_row_mask
        .iter()
        .enumerate()
        .filter_map(|(p, &m)| m.then_some(p))
        .collect();
    Ok(GradientBundle {
        d_w: acc.d_w,
        w_rows,
        d_q: acc.d_q,
        loss: acc.total / norm,
        per_token: acc.per_token.map(|v| v / norm),
        batch_size: batch.n_sentences,
    })
}

fn accumulate_item(
    params: &ModelParams,
    item: &TrainItem,
    positions: Positions,
    acc: &mut GradAccum,
) -> Result<(), TrainError> {
    let n_neurons = params.n_neurons();
    let d_c = params.d_c();
    let d = params.d;
    let m = params.m;
    let heads = params.heads();
    let GradAccum {
        d_w,
        w_row_mask,
        d_q,
        total,
        per_token,
        coeff,
        dotp_dense,
        x_scratch,
    } = acc;
    {
        let item = item;
        let trace = params.forward_with(&item.seq, positions)?;
        // coeff[n] = dLoss/dLambda_n = (dist - onehot) * sReLU'(Lambda),
        // zeroed when the coordinate's logit is clipped.
        for i in positions.iter() {
            let t = item.target[i].index();
            let p = trace.dist[i * d + t];
            let nll = -p.ln();
            *total += nll;
            per_token[i] += nll;
            for j in 0..d {
                let flat = i * d + j;
                let clipped = trace.raw[flat] > params.clip;
                let e = trace.dist[flat] - if j == t { 1.0 } else { 0.0 };
                let base = flat * m;
                if clipped {
                    for r in 0..m {
                        coeff[base + r] = 0.0;
                    }
                } else {
                    for r in 0..m {
                        coeff[base + r] = e * params.srelu.deriv(trace.lambda[base + r]);
                    }
                }
            }
        }

        // Fused backward sweep: one pass over the clause-coordinate union
        // computes both the dW rank-one update (coeff (x) X) and the
        // aggregate gradient dotp[p] = sum_n coeff[n] * W[p][n], reusing the
        // W row while it is hot. The aggregate coordinates and the clause
        // union coincide (attention weights are strictly positive).
        let block = d * m;
        let n_clauses = item.seq.n_clauses();
        let mut union_coords: Vec<usize> = Vec::new();
        for k in 0..n_clauses {
            for (slot, t) in item.seq.nonzeros(k) {
                union_coords.push(item.seq.coord(slot, t));
            }
        }
        union_coords.sort_unstable();
        union_coords.dedup();
        let w_all = params.w_flat();
        for &(p, xv) in &trace.x_mean {
            x_scratch[p] = xv;
        }
        for &p in &union_coords {
            let xv = x_scratch[p];
            if xv != 0.0 {
                w_row_mask[p] = true;
            }
            let mut dot = 0.0;
            for i in positions.iter() {
                let (n0, n1) = (i * block, (i + 1) * block);
                let w_row = &w_all[p * n_neurons + n0..p * n_neurons + n1];
                let src = &coeff[n0..n1];
                if xv != 0.0 {
                    let dst = &mut d_w[p * n_neurons + n0..p * n_neurons + n1];
                    for ((acc_w, &wv), &c) in dst.iter_mut().zip(w_row).zip(src) {
                        *acc_w += xv * c;
                        dot += wv * c;
                    }
                } else {
                    for (&wv, &c) in w_row.iter().zip(src) {
                        dot += wv * c;
                    }
                }
            }
            dotp_dense[p] = dot;
        }
        let xi: Vec<f64> = (0..n_clauses)
            .map(|k| {
                item.seq
                    .nonzeros(k)
                    .map(|(slot, t)| dotp_dense[item.seq.coord(slot, t)])
                    .sum()
            })
            .collect();
        let query = n_clauses - 1;
        let head_norm = 1.0 / heads as f64;
        for (h, attn) in trace.attn_heads.iter().enumerate() {
            let xibar: f64 = attn.iter().zip(&xi).map(|(&a, &x)| a * x).sum();
            for k in 0..n_clauses {
                let dscore = head_norm * attn[k] * (xi[k] - xibar);
                if dscore == 0.0 {
                    continue;
                }
                for (sq, tq) in item.seq.nonzeros(query) {
                    let row = item.seq.coord(sq, tq);
                    for (sk, tk) in item.seq.nonzeros(k) {
                        let col = item.seq.coord(sk, tk);
                        if params.q_entry_trainable(row, col) {
                            d_q[h][row * d_c + col] += dscore;
                        }
                    }
                }
            }
        }
        for &p in &union_coords {
            dotp_dense[p] = 0.0;
            x_scratch[p] = 0.0;
        }
    }
    Ok(())
}

/// Central finite differences of an arbitrary scalar function of the
/// parameters; shared by [`grad_fd`] and the gradient-check tests.
pub fn fd_of(
    params: &ModelParams,
    h: f64,
    mut f: impl FnMut(&ModelParams) -> f64,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut work = params.clone();
    let n_w = work.w_flat().len();
    let mut d_w = vec![0.0; n_w];
    for idx in 0..n_w {
        let orig = work.w_flat()[idx];
        work.w_flat_mut()[idx] = orig + h;
        let up = f(&work);
        work.w_flat_mut()[idx] = orig - h;
        let down = f(&work);
        work.w_flat_mut()[idx] = orig;
        d_w[idx] = (up - down) / (2.0 * h);
    }
    let d_c = work.d_c();
    let heads = work.heads();
    let mut d_q = vec![vec![0.0; d_c * d_c]; heads];
    for hd in 0..heads {
        for row in 0..d_c {
            for col in 0..d_c {
                if !work.q_entry_trainable(row, col) {
                    continue;
                }
                let idx = row * d_c + col;
                let orig = work.q_head(hd)[idx];
                work.q_head_mut(hd)[idx] = orig + h;
                let up = f(&work);
                work.q_head_mut(hd)[idx] = orig - h;
                let down = f(&work);
                work.q_head_mut(hd)[idx] = orig;
                d_q[hd][idx] = (up - down) / (2.0 * h);
            }
        }
    }
    (d_w, d_q)
}

/// Finite-difference gradients of the batch loss: the verification oracle for
/// [`grad_analytic`]. Identical loss code path, identical batch.
pub fn grad_fd(
    params: &ModelParams,
    batch: &Batch,
    positions: Positions,
    h: f64,
) -> Result<GradientBundle, TrainError> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let center = next_clause_loss(params, batch, positions)?;
    let (d_w, d_q) = fd_of(params, h, |p| {
        next_clause_loss(p, batch, positions).expect("fd loss").total
    });
    Ok(GradientBundle {
        d_w,
        w_rows: (0..params.d_c()).collect(),
        d_q,
        loss: center.total,
        per_token: center.per_token,
        batch_size: batch.n_sentences,
    })
}

/// Result of comparing analytic and finite-difference gradients entry-wise.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_checked: usize,
    pub n_excluded: usize,
}

/// Relative error with a floor: entries where both gradients are below the
/// floor must agree absolutely and count as zero relative error.
fn rel_err(a: f64, f: f64) -> f64 {
    let scale = a.abs().max(f.abs());
    if scale < 1e-6 {
        if (a - f).abs() < 1e-7 {
            0.0
        } else {
            1.0
        }
    } else {
        (a - f).abs() / scale
    }
}

/// Entry-wise analytic-vs-FD comparison, excluding parameters whose
/// pre-activation sits within `margin` of an sReLU breakpoint (or whose raw
/// logit sits within `margin` of the clip bound) on any batch item.
pub fn grad_check(
    params: &ModelParams,
    batch: &Batch,
    positions: Positions,
    h: f64,
    margin: f64,
) -> Result<GradCheckReport, TrainError> {
    let analytic = grad_analytic(params, batch, positions)?;
    let fd = grad_fd(params, batch, positions, h)?;
    let d = params.d;
    let m = params.m;
    let n_neurons = params.n_neurons();
    let breakpoints = params.srelu.breakpoints();

    // Collect, per neuron, whether any item's Lambda is near a breakpoint,
    // and whether any logit coordinate is near the clip bound.
    let mut neuron_near = vec![false; n_neurons];
    let mut any_clip_near = false;
    for item in &batch.items {
        let trace = params.forward_with(&item.seq, positions)?;
        for i in positions.iter() {
            for j in 0..d {
                if (trace.raw[i * d + j] - params.clip).abs() < margin {
                    any_clip_near = true;
                }
                for r in 0..m {
                    let n = (i * d + j) * m + r;
                    let lam = trace.lambda[n];
                    if breakpoints.iter().any(|bp| (lam - bp).abs() < margin) {
                        neuron_near[n] = true;
                    }
                }
            }
        }
    }

    let mut max_rel = 0.0f64;
    let mut n_checked = 0;
    let mut n_excluded = 0;
    for n in 0..n_neurons {
        if neuron_near[n] || any_clip_near {
            n_excluded += params.d_c();
            continue;
        }
        for p in 0..params.d_c() {
            let idx = p * n_neurons + n;
            max_rel = max_rel.max(rel_err(analytic.d_w[idx], fd.d_w[idx]));
            n_checked += 1;
        }
    }
    // Q entries move every Lambda, so exclude them only if any neuron (or the
    // clip) is near a boundary.
    let any_near = any_clip_near || neuron_near.iter().any(|&b| b);
    let d_c = params.d_c();
    for hd in 0..params.heads() {
        for row in 0..d_c {
            for col in 0..d_c {
                if !params.q_entry_trainable(row, col) {
                    continue;
                }
                if any_near {
                    n_excluded += 1;
                    continue;
                }
                let idx = row * d_c + col;
                max_rel = max_rel.max(rel_err(analytic.d_q[hd][idx], fd.d_q[hd][idx]));
                n_checked += 1;
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        n_checked,
        n_excluded,
    })
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerCfg {
    PlainGd { eta: f64 },
    Adam { eta: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerCfg {
    pub fn adam(eta: f64) -> Self {
        OptimizerCfg::Adam {
            eta,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which parameter groups a stage updates; everything else stays bit-frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainableSet {
    pub w: bool,
    pub q: bool,
}

impl TrainableSet {
    pub const W_ONLY: TrainableSet = TrainableSet { w: true, q: false };
    pub const Q_ONLY: TrainableSet = TrainableSet { w: false, q: true };
    pub const BOTH: TrainableSet = TrainableSet { w: true, q: true };
}

/// First/second Adam moments, allocated lazily per parameter group.
#[derive(Clone, Debug, Default)]
pub struct OptState {
    t: u64,
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_q: Vec<Vec<f64>>,
    v_q: Vec<Vec<f64>>,
    /// Input-coordinate rows of W that have ever received gradient. Rows
    /// outside this set have zero gradient and zero moments, so skipping
    /// them reproduces the dense update exactly.
    active_w_rows: Vec<bool>,
}

impl OptState {
    pub fn new() -> Self {
        OptState::default()
    }
}

/// Trainable row/column ranges of a Q head under the sparsity pattern:
/// everything for `Full`, rows `[3d, 4d)` by columns `[2d, 4d)` for the
/// block-sparse mode.
fn q_ranges(params: &ModelParams) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    match params.sparsity {
        crate::model::Sparsity::Full => (0..params.d_c(), 0..params.d_c()),
        crate::model::Sparsity::Blocks43_44 => {
            (3 * params.d..4 * params.d, 2 * params.d..4 * params.d)
        }
    }
}

/// Apply one optimizer step to the trainable set; frozen groups are not
/// touched at all.
pub fn step(
    params: &mut ModelParams,
    bundle: &GradientBundle,
    cfg: &OptimizerCfg,
    state: &mut OptState,
    trainable: TrainableSet,
) {
    state.t += 1;
    let d_c = params.d_c();
    let (row_range, col_range) = q_ranges(params);
    match *cfg {
        OptimizerCfg::PlainGd { eta } => {
            if trainable.w {
                let n = params.n_neurons();
                let w = params.w_flat_mut();
                for &p in &bundle.w_rows {
                    let (w_row, g_row) =
                        (&mut w[p * n..(p + 1) * n], &bundle.d_w[p * n..(p + 1) * n]);
                    for (wv, &g) in w_row.iter_mut().zip(g_row) {
                        *wv -= eta * g;
                    }
                }
            }
            if trainable.q {
                for h in 0..bundle.d_q.len() {
                    let q = params.q_head_mut(h);
                    for row in row_range.clone() {
                        let base = row * d_c;
                        for col in col_range.clone() {
                            q[base + col] -= eta * bundle.d_q[h][base + col];
                        }
                    }
                }
            }
        }
        OptimizerCfg::Adam {
            eta,
            beta1,
            beta2,
            eps,
        } => {
            let bc1 = 1.0 - beta1.powi(state.t as i32);
            let bc2 = 1.0 - beta2.powi(state.t as i32);
            if trainable.w {
                if state.m_w.is_empty() {
                    state.m_w = vec![0.0; bundle.d_w.len()];
                    state.v_w = vec![0.0; bundle.d_w.len()];
                    state.active_w_rows = vec![false; params.d_c()];
                }
                for &p in &bundle.w_rows {
                    state.active_w_rows[p] = true;
                }
                let n = params.n_neurons();
                let d_c_total = params.d_c();
                let w = params.w_flat_mut();
                for p in 0..d_c_total {
                    if !state.active_w_rows[p] {
                        continue;
                    }
                    for i in p * n..(p + 1) * n {
                        let g = bundle.d_w[i];
                        state.m_w[i] = beta1 * state.m_w[i] + (1.0 - beta1) * g;
                        state.v_w[i] = beta2 * state.v_w[i] + (1.0 - beta2) * g * g;
                        let mhat = state.m_w[i] / bc1;
                        let vhat = state.v_w[i] / bc2;
                        w[i] -= eta * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            if trainable.q {
                if state.m_q.is_empty() {
                    state.m_q = vec![vec![0.0; d_c * d_c]; bundle.d_q.len()];
                    state.v_q = vec![vec![0.0; d_c * d_c]; bundle.d_q.len()];
                }
                for h in 0..bundle.d_q.len() {
                    let q = params.q_head_mut(h);
                    for row in row_range.clone() {
                        let base = row * d_c;
                        for col in col_range.clone() {
                            let i = base + col;
                            let g = bundle.d_q[h][i];
                            state.m_q[h][i] = beta1 * state.m_q[h][i] + (1.0 - beta1) * g;
                            state.v_q[h][i] = beta2 * state.v_q[h][i] + (1.0 - beta2) * g * g;
                            let mhat = state.m_q[h][i] / bc1;
                            let vhat = state.v_q[h][i] / bc2;
                            q[i] -= eta * mhat / (vhat.sqrt() + eps);
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Staged schedules
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum StopRule {
    FixedSteps(usize),
    /// Stop when an exponential moving average of the batch loss falls below
    /// `theta`, or after `cap` steps (the stage is then flagged
    /// non-converged).
    LossBelow {
        theta: f64,
        ema_decay: f64,
        cap: usize,
    },
}

#[derive(Clone, Debug)]
pub struct StageSpec {
    pub name: String,
    /// Checkpoint label when this stage closes a T_k boundary.
    pub boundary: Option<String>,
    pub trainable: TrainableSet,
    pub chain_len: usize,
    pub horizons: HorizonMode,
    pub positions: Positions,
    /// Label batches with the frozen previous-boundary checkpoint instead of
    /// ground truth.
    pub bootstrapped: bool,
    pub stop: StopRule,
    pub optimizer: OptimizerCfg,
    pub batch_size: usize,
}

#[derive(Clone, Debug)]
pub struct StageSchedule {
    pub stages: Vec<StageSpec>,
}

impl StageSchedule {
    /// The two-stage curriculum: stage 1 trains the FFN on one-step
    /// reasoning with uniform attention (`Q` frozen at zero), stage 2 trains
    /// the attention matrix on the summed two-step fifth-token loss with the
    /// FFN frozen.
    pub fn algorithm1(t1: usize, t2: usize, optimizer: OptimizerCfg, batch_size: usize) -> Self {
        StageSchedule {
            stages: vec![
                StageSpec {
                    name: "stage1-ffn".into(),
                    boundary: Some("T1".into()),
                    trainable: TrainableSet::W_ONLY,
                    chain_len: 1,
                    horizons: HorizonMode::All,
                    positions: Positions::ALL,
                    bootstrapped: false,
                    stop: StopRule::FixedSteps(t1),
                    optimizer,
                    batch_size,
                },
                StageSpec {
                    name: "stage2-attention".into(),
                    boundary: Some("T2".into()),
                    trainable: TrainableSet::Q_ONLY,
                    chain_len: 2,
                    horizons: HorizonMode::Fixed(vec![1, 2]),
                    positions: Positions::FIFTH,
                    bootstrapped: false,
                    stop: StopRule::FixedSteps(t2),
                    optimizer,
                    batch_size,
                },
            ],
        }
    }

    /// Recursive self-training: FFN stage, then an attention stage at the
    /// base length with ground truth, then doubling stages trained on the
    /// previous checkpoint's greedy self-labels until the fifth-token loss at
    /// step 2 drops below `theta` (or the cap hits). `base_len = 2` is the
    /// literal doubling ladder `2, 4, 8, ...`; experiments use base 5 for
    /// `5 -> 10 -> 20 -> 40`.
    #[allow(clippy::too_many_arguments)]
    pub fn algorithm2(
        base_len: usize,
        k_max: usize,
        tau1: usize,
        tau2: usize,
        theta: f64,
        ema_decay: f64,
        cap: usize,
        ffn_optimizer: OptimizerCfg,
        attn_optimizer: OptimizerCfg,
        batch_size: usize,
    ) -> Self {
        let mut stages = vec![
            StageSpec {
                name: "stage1.1-ffn".into(),
                boundary: None,
                trainable: TrainableSet::W_ONLY,
                chain_len: 1,
                horizons: HorizonMode::All,
                positions: Positions::ALL,
                bootstrapped: false,
                stop: StopRule::FixedSteps(tau1),
                optimizer: ffn_optimizer,
                batch_size,
            },
            StageSpec {
                name: format!("stage1.2-attention-L{base_len}"),
                boundary: Some("T1".into()),
                trainable: TrainableSet::Q_ONLY,
                chain_len: base_len,
                horizons: HorizonMode::Fixed(vec![2]),
                positions: Positions::FIFTH,
                bootstrapped: false,
                stop: StopRule::FixedSteps(tau2),
                optimizer: attn_optimizer,
                batch_size,
            },
        ];
        for k in 2..=k_max {
            let len = base_len << (k - 1);
            stages.push(StageSpec {
                name: format!("stage{k}-selftrain-L{len}"),
                boundary: Some(format!("T{k}")),
                trainable: TrainableSet::Q_ONLY,
                chain_len: len,
                horizons: HorizonMode::Fixed(vec![2]),
                positions: Positions::FIFTH,
                bootstrapped: true,
                stop: StopRule::LossBelow {
                    theta,
                    ema_decay,
                    cap,
                },
                optimizer: attn_optimizer,
                batch_size,
            });
        }
        StageSchedule { stages }
    }

    /// Joint end-to-end training of both parameter groups on the full
    /// next-clause loss, sampling one horizon term per sentence. An optional
    /// FFN-only warmup precedes the joint stage inside the same budget.
    pub fn joint(
        chain_len: usize,
        steps: usize,
        warmup_steps: usize,
        warmup_optimizer: OptimizerCfg,
        early_stop_theta: Option<f64>,
        optimizer: OptimizerCfg,
        batch_size: usize,
    ) -> Self {
        let stop = match early_stop_theta {
            Some(theta) => StopRule::LossBelow {
                theta,
                ema_decay: 0.99,
                cap: steps,
            },
            None => StopRule::FixedSteps(steps),
        };
        let mut stages = Vec::new();
        if warmup_steps > 0 {
            // One-step-reasoning warmup: the FFN learns the group operation
            // on clean length-1 contexts under uniform attention before the
            // joint phase opens every parameter.
            stages.push(StageSpec {
                name: "joint-warmup-L1".to_string(),
                boundary: None,
                trainable: TrainableSet::W_ONLY,
                chain_len: 1,
                horizons: HorizonMode::All,
                positions: Positions::ALL,
                bootstrapped: false,
                stop: StopRule::FixedSteps(warmup_steps),
                optimizer: warmup_optimizer,
                batch_size,
            });
        }
        stages.push(StageSpec {
            name: format!("joint-L{chain_len}"),
            boundary: Some("final".into()),
            trainable: TrainableSet::BOTH,
            chain_len,
            horizons: HorizonMode::All,
            positions: Positions::ALL,
            bootstrapped: false,
            stop,
            optimizer,
            batch_size,
        });
        StageSchedule { stages }
    }
}

// ---------------------------------------------------------------------------
// Run driver
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MetricRecord {
    pub stage: usize,
    pub step: u64,
    pub loss: f64,
    pub per_token: [f64; 5],
    pub wallclock_ms: u128,
}

#[derive(Clone, Debug)]
pub struct StageSummary {
    pub name: String,
    pub boundary: Option<String>,
    pub steps_run: usize,
    pub converged: bool,
    /// FNV-1a hashes of the frozen annotator parameters at stage start and
    /// end; equal by contract.
    pub annotator_hash: Option<(u64, u64)>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricRecord>,
    pub stages: Vec<StageSummary>,
    pub final_params: ModelParams,
}

/// FNV-1a over the raw parameter bytes; used for annotator freeze checks.
pub fn params_hash(params: &ModelParams) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |v: f64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    };
    for &v in params.w_flat() {
        eat(v);
    }
    for hd in 0..params.heads() {
        for &v in params.q_head(hd) {
            eat(v);
        }
    }
    h
}

/// Execute a staged schedule. `sink` is called at every declared boundary
/// with the label and the parameters at that point. Batches derive from
/// per-step streams of `seed`, so a run is a pure function of
/// (initial params, schedule, seed).
pub fn run_schedule(
    vocab: &Vocabulary,
    params: ModelParams,
    schedule: &StageSchedule,
    seed: u64,
    sink: impl FnMut(&str, &ModelParams),
) -> Result<TrainOutcome, TrainError> {
    run_schedule_observed(vocab, params, schedule, seed, sink, |_| {})
}

/// [`run_schedule`] with a per-step metric observer (used to stream the
/// metric CSV to disk during long runs).
pub fn run_schedule_observed(
    vocab: &Vocabulary,
    mut params: ModelParams,
    schedule: &StageSchedule,
    seed: u64,
    mut sink: impl FnMut(&str, &ModelParams),
    mut observe: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome, TrainError> {
    let started = std::time::Instant::now();
    let mut metrics = Vec::new();
    let mut stages = Vec::new();
    let mut global_step: u64 = 0;
    let mut annotator_params: Option<ModelParams> = None;

    for (stage_idx, stage) in schedule.stages.iter().enumerate() {
        let mut opt_state = OptState::new();
        let mut ema: Option<f64> = None;
        let mut steps_run = 0;
        let mut converged = true;
        let annotator_hashes = if stage.bootstrapped {
            let frozen = annotator_params
                .clone()
                .expect("bootstrapped stage needs a previous boundary checkpoint");
            let h = params_hash(&frozen);
            annotator_params = Some(frozen);
            Some((h, h))
        } else {
            None
        };

        let max_steps = match stage.stop {
            StopRule::FixedSteps(n) => n,
            StopRule::LossBelow { cap, .. } => cap,
        };
        if matches!(stage.stop, StopRule::LossBelow { .. }) {
            converged = false;
        }

        for _ in 0..max_steps {
            let mut rng = Rng::for_stream(seed ^ TRAIN_STREAM_DOMAIN, global_step);
            let batch = if stage.bootstrapped {
                let frozen = annotator_params.as_ref().unwrap();
                let annot = ModelAnnotator {
                    params: frozen,
                    vocab,
                    mode: DecodeMode::Greedy,
                };
                build_bootstrapped_batch(
                    vocab,
                    stage.chain_len,
                    &stage.horizons,
                    stage.batch_size,
                    &annot,
                    &mut rng,
                )?
            } else {
                build_batch(
                    vocab,
                    stage.chain_len,
                    &stage.horizons,
                    stage.batch_size,
                    &mut rng,
                )?
            };
            let bundle = grad_analytic(&params, &batch, stage.positions)?;
            if !bundle.loss.is_finite() {
                return Err(TrainError::Diverged {
                    stage: stage_idx,
                    step: global_step,
                });
            }
            step(
                &mut params,
                &bundle,
                &stage.optimizer,
                &mut opt_state,
                stage.trainable,
            );
            let record = MetricRecord {
                stage: stage_idx,
                step: global_step,
                loss: bundle.loss,
                per_token: bundle.per_token,
                wallclock_ms: started.elapsed().as_millis(),
            };
            observe(&record);
            metrics.push(record);
            global_step += 1;
            steps_run += 1;
            if let StopRule::LossBelow {
                theta, ema_decay, ..
            } = stage.stop
            {
                let e = match ema {
                    None => bundle.loss,
                    Some(prev) => ema_decay * prev + (1.0 - ema_decay) * bundle.loss,
                };
                ema = Some(e);
                if e < theta {
                    converged = true;
                    break;
                }
            }
        }

        let annotator_hash = annotator_hashes.map(|(start, _)| {
            let end = params_hash(annotator_params.as_ref().unwrap());
            (start, end)
        });
        if let Some(label) = &stage.boundary {
            params.train_len = Some(stage.chain_len);
            sink(label, &params);
            annotator_params = Some(params.clone());
        }
        stages.push(StageSummary {
            name: stage.name.clone(),
            boundary: stage.boundary.clone(),
            steps_run,
            converged,
            annotator_hash,
        });
    }

    Ok(TrainOutcome {
        metrics,
        stages,
        final_params: params,
    })
}
