//! Accuracy metrics, attention diagnostics, feature probes, and their CSV
//! exports.
//!
//! Two accuracy views are reported side by side:
//!
//! * **Teacher-forced** — condition on the ground-truth prefix at every step,
//!   draw the next clause from the model's product distribution, and score an
//!   exact 5-token match, averaged over steps and sentences.
//! * **Rollout** — generate every answer clause autoregressively from
//!   `Z^{L,0}` with greedy decoding and no teacher forcing. `rollout_final`
//!   demands an exact match of every generated clause; `rollout_value_only`
//!   scores only the slot-5 value tokens, which is the cheap headline metric
//!   for length-generalization curves.
//!
//! Attention diagnostics measure routing quality per step: the concentration
//! degree `eps = 1 - attn(->pred_l) - attn(->ans_{l-1})` (mass off the two
//! relevant clauses) and the gap `delta = |attn(->pred_l) - attn(->ans_{l-1})|`
//! (imbalance between them). Heatmaps average the full attention rows over
//! samples, with query rows in sentence order as in the attention figures.

use crate::corpus::{embed, sample_sentence, truncate, Annotator, LegoSentence, Vocabulary};
use crate::model::{DecodeMode, ModelAnnotator, ModelParams};
use crate::rng::Rng;
use crate::train::TrainError;
use std::io::Write;
use std::path::Path;

const EVAL_STREAM_DOMAIN: u64 = 0x6576_616c_5f73_7472;

/// Accuracy summary at one evaluation length.
#[derive(Clone, Debug)]
pub struct AccReport {
    pub eval_len: usize,
    pub teacher_forced: f64,
    pub rollout_final: f64,
    pub rollout_value_only: f64,
    pub n_eval: usize,
    pub seed: u64,
}

/// Teacher-forced accuracy along the chain: for every `L' < L`, condition on
/// the ground-truth prefix `Z^{L,L'}` and score an exact next-clause match.
pub fn acc_teacher_forced(
    annotator: &dyn Annotator,
    vocab: &Vocabulary,
    l: usize,
    n_eval: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    assert!(n_eval >= 1);
    let blank = vocab.blank();
    let mut hits = 0usize;
    for i in 0..n_eval {
        let mut rng = Rng::for_stream(seed ^ EVAL_STREAM_DOMAIN, i as u64);
        let s = sample_sentence(vocab, l, &mut rng)?;
        for h in 0..l {
            let prefix = truncate(&s, h)?;
            let predicted = annotator.next_clause(&prefix, &mut rng);
            if predicted == s.answers[h + 1].tokens(blank) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (n_eval * l) as f64)
}

/// Greedy rollout of all `L` answer clauses from `Z^{L,0}`; returns
/// (fraction with every clause exact, fraction with every value correct).
pub fn acc_rollout(
    annotator: &dyn Annotator,
    vocab: &Vocabulary,
    l: usize,
    n_eval: usize,
    seed: u64,
) -> Result<(f64, f64), TrainError> {
    assert!(n_eval >= 1);
    let blank = vocab.blank();
    let mut exact = 0usize;
    let mut value_only = 0usize;
    for i in 0..n_eval {
        let mut rng = Rng::for_stream(seed ^ EVAL_STREAM_DOMAIN, i as u64);
        let s = sample_sentence(vocab, l, &mut rng)?;
        let mut prefix = truncate(&s, 0)?;
        let mut all_exact = true;
        let mut all_values = true;
        for h in 1..=l {
            let predicted = annotator.next_clause(&prefix, &mut rng);
            let truth = s.answers[h].tokens(blank);
            if predicted != truth {
                all_exact = false;
            }
            if predicted[4] != truth[4] {
                all_values = false;
            }
            prefix.answers.push(vocab.canonicalize_answer(predicted));
        }
        exact += all_exact as usize;
        value_only += all_values as usize;
    }
    Ok((
        exact as f64 / n_eval as f64,
        value_only as f64 / n_eval as f64,
    ))
}

/// Full accuracy report for a model: sampled teacher-forcing (with a greedy
/// variant available through `teacher_mode`) plus greedy rollouts.
pub fn evaluate_model(
    params: &ModelParams,
    vocab: &Vocabulary,
    l: usize,
    n_eval: usize,
    seed: u64,
    teacher_mode: DecodeMode,
) -> Result<AccReport, TrainError> {
    let sampler = ModelAnnotator {
        params,
        vocab,
        mode: teacher_mode,
    };
    let teacher_forced = acc_teacher_forced(&sampler, vocab, l, n_eval, seed)?;
    let greedy = ModelAnnotator {
        params,
        vocab,
        mode: DecodeMode::Greedy,
    };
    let (rollout_final, rollout_value_only) = acc_rollout(&greedy, vocab, l, n_eval, seed)?;
    debug_assert!(rollout_final <= rollout_value_only + 1e-12);
    Ok(AccReport {
        eval_len: l,
        teacher_forced,
        rollout_final,
        rollout_value_only,
        n_eval,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Attention diagnostics
// ---------------------------------------------------------------------------

/// Concentration and gap statistics per step, plus the averaged heatmap.
#[derive(Clone, Debug)]
pub struct AttnDiagnostics {
    pub l: usize,
    /// Mean `eps^{L,l}` for `l = 1..=L`.
    pub eps: Vec<f64>,
    /// Mean `Delta^{L,l}` for `l = 1..=L`.
    pub delta: Vec<f64>,
    /// `L x 2L` matrix: row `l-1` is the head-averaged attention of query
    /// `ans_{l-1}` over keys `pred_1..pred_L, ans_0..ans_{L-1}` (zeros where
    /// a key is not yet present), averaged over samples.
    pub heatmap: Vec<Vec<f64>>,
    pub n_samples: usize,
}

pub fn attention_diagnostics(
    params: &ModelParams,
    vocab: &Vocabulary,
    l: usize,
    n_samples: usize,
    seed: u64,
) -> Result<AttnDiagnostics, TrainError> {
    assert!(n_samples >= 1);
    let mut eps = vec![0.0; l];
    let mut delta = vec![0.0; l];
    let mut heatmap = vec![vec![0.0; 2 * l]; l];
    for i in 0..n_samples {
        let mut rng = Rng::for_stream(seed ^ EVAL_STREAM_DOMAIN, i as u64);
        let s = sample_sentence(vocab, l, &mut rng)?;
        for ell in 1..=l {
            let prefix = truncate(&s, ell - 1)?;
            let seq = embed(vocab, &prefix);
            let (_, weights, _) = params.attention_forward(&seq)?;
            // keys: pred_1..pred_L at 0..l, then ans_0..ans_{ell-1}
            let to_pred = weights[ell - 1];
            let to_self = weights[l + ell - 1];
            eps[ell - 1] += 1.0 - to_pred - to_self;
            delta[ell - 1] += (to_pred - to_self).abs();
            for (k, &w) in weights.iter().enumerate() {
                heatmap[ell - 1][k] += w;
            }
        }
    }
    let norm = n_samples as f64;
    for v in eps.iter_mut().chain(delta.iter_mut()) {
        *v /= norm;
    }
    for row in heatmap.iter_mut() {
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(AttnDiagnostics {
        l,
        eps,
        delta,
        heatmap,
        n_samples,
    })
}

// ---------------------------------------------------------------------------
// Permutation ablation
// ---------------------------------------------------------------------------

/// Paired before/after report for randomly permuted predicate-clause
/// positions (answers untouched).
#[derive(Clone, Debug)]
pub struct PermutationReport {
    pub l: usize,
    pub n_samples: usize,
    pub rollout_final_base: f64,
    pub rollout_final_perm: f64,
    pub rollout_value_base: f64,
    pub rollout_value_perm: f64,
    /// Largest absolute change of any clause's received attention weight when
    /// the predicates are permuted, over all queries and samples.
    pub max_weight_deviation: f64,
    pub eps_base: Vec<f64>,
    pub eps_perm: Vec<f64>,
}

fn permute_predicates(s: &LegoSentence, rng: &mut Rng) -> (LegoSentence, Vec<usize>) {
    let l = s.predicates.len();
    let mut order: Vec<usize> = (0..l).collect();
    rng.shuffle(&mut order);
    let mut permuted = s.clone();
    for (dest, &src) in order.iter().enumerate() {
        permuted.predicates[dest] = s.predicates[src];
    }
    (permuted, order)
}

pub fn permutation_ablation(
    params: &ModelParams,
    vocab: &Vocabulary,
    l: usize,
    n_samples: usize,
    seed: u64,
) -> Result<PermutationReport, TrainError> {
    let mut max_dev = 0.0f64;
    let mut eps_base = vec![0.0; l];
    let mut eps_perm = vec![0.0; l];
    for i in 0..n_samples {
        let mut rng = Rng::for_stream(seed ^ EVAL_STREAM_DOMAIN, i as u64);
        let s = sample_sentence(vocab, l, &mut rng)?;
        let (permuted, order) = permute_predicates(&s, &mut rng);
        for ell in 1..=l {
            let base_seq = embed(vocab, &truncate(&s, ell - 1)?);
            let perm_seq = embed(vocab, &truncate(&permuted, ell - 1)?);
            let (_, wb, _) = params.attention_forward(&base_seq)?;
            let (_, wp, _) = params.attention_forward(&perm_seq)?;
            eps_base[ell - 1] += 1.0 - wb[ell - 1] - wb[l + ell - 1];
            // In the permuted sequence, pred_ell sits where `order` put it.
            let perm_pos = order.iter().position(|&src| src == ell - 1).unwrap();
            eps_perm[ell - 1] += 1.0 - wp[perm_pos] - wp[l + ell - 1];
            // received weight per clause identity
            for (dest, &src) in order.iter().enumerate() {
                max_dev = max_dev.max((wb[src] - wp[dest]).abs());
            }
            for k in 0..ell {
                max_dev = max_dev.max((wb[l + k] - wp[l + k]).abs());
            }
        }
    }
    for v in eps_base.iter_mut().chain(eps_perm.iter_mut()) {
        *v /= n_samples as f64;
    }

    // Rollout accuracy on base and permuted sentences, paired seeds.
    let greedy = ModelAnnotator {
        params,
        vocab,
        mode: DecodeMode::Greedy,
    };
    let blank = vocab.blank();
    let mut counts = [0usize; 4]; // base_exact, base_value, perm_exact, perm_value
    for i in 0..n_samples {
        let mut rng = Rng::for_stream(seed ^ EVAL_STREAM_DOMAIN, i as u64);
        let s = sample_sentence(vocab, l, &mut rng)?;
        let (permuted, _) = permute_predicates(&s, &mut rng);
        for (variant, offset) in [(&s, 0usize), (&permuted, 2usize)] {
            let mut prefix = truncate(variant, 0)?;
            let mut all_exact = true;
            let mut all_values = true;
            for h in 1..=l {
                let predicted = greedy.next_clause(&prefix, &mut rng);
                let truth = s.answers[h].tokens(blank);
                if predicted != truth {
                    all_exact = false;
                }
                if predicted[4] != truth[4] {
                    all_values = false;
                }
                prefix.answers.push(vocab.canonicalize_answer(predicted));
            }
            counts[offset] += all_exact as usize;
            counts[offset + 1] += all_values as usize;
        }
    }
    let n = n_samples as f64;
    Ok(PermutationReport {
        l,
        n_samples,
        rollout_final_base: counts[0] as f64 / n,
        rollout_value_base: counts[1] as f64 / n,
        rollout_final_perm: counts[2] as f64 / n,
        rollout_value_perm: counts[3] as f64 / n,
        max_weight_deviation: max_dev,
        eps_base,
        eps_perm,
    })
}

// ---------------------------------------------------------------------------
// Feature probe
// ---------------------------------------------------------------------------

/// Composite feature magnitudes of the fifth-token FFN weights:
/// `V_{j,r}(g) = <W_{5,j,r,slot2}, e_g>` and `V_{j,r}(y) = <W_{5,j,r,slot5}, e_y>`
/// for every value class `j`, read directly off the one-hot coordinates.
#[derive(Clone, Debug)]
pub struct FeatureProbe {
    pub n_y: usize,
    pub m: usize,
    pub n_actions: usize,
    /// `v_g[y_class][r][g_index]`
    pub v_g: Vec<Vec<Vec<f64>>>,
    /// `v_y[y_class][r][y_index]`
    pub v_y: Vec<Vec<Vec<f64>>>,
}

pub fn feature_probe(params: &ModelParams, vocab: &Vocabulary) -> FeatureProbe {
    let n_y = vocab.n_y();
    let n_g = vocab.n_actions();
    let m = params.m;
    let d = params.d;
    let mut v_g = vec![vec![vec![0.0; n_g]; m]; n_y];
    let mut v_y = vec![vec![vec![0.0; n_y]; m]; n_y];
    for y_class in 0..n_y {
        let j = vocab.value(y_class).index();
        for r in 0..m {
            for g in 0..n_g {
                let p = d + vocab.action_by_index(g).index(); // slot 2 block
                v_g[y_class][r][g] = params.w_get(4, j, r, p);
            }
            for y in 0..n_y {
                let p = 4 * d + vocab.value(y).index(); // slot 5 block
                v_y[y_class][r][y] = params.w_get(4, j, r, p);
            }
        }
    }
    FeatureProbe {
        n_y,
        m,
        n_actions: n_g,
        v_g,
        v_y,
    }
}

impl FeatureProbe {
    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for table in [&self.v_g, &self.v_y] {
            for per_class in table {
                for per_neuron in per_class {
                    for &v in per_neuron {
                        m = m.max(v.abs());
                    }
                }
            }
        }
        m
    }

    /// For each value class, the maximal action feature over neurons minus
    /// the median of the class table: a descriptive sharpness margin.
    pub fn class_margins(&self) -> Vec<f64> {
        (0..self.n_y)
            .map(|j| {
                let mut all: Vec<f64> = self.v_g[j]
                    .iter()
                    .flat_map(|per_neuron| per_neuron.iter().copied())
                    .collect();
                let max = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let median = all[all.len() / 2];
                max - median
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// CSV exports
// ---------------------------------------------------------------------------

/// One row of the accuracy-curve CSV.
#[derive(Clone, Debug)]
pub struct AccCsvRow {
    pub run_id: String,
    pub stage: String,
    pub report: AccReport,
    pub train_len: Option<usize>,
}

pub fn write_accuracy_csv(path: &Path, rows: &[AccCsvRow]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "run_id,stage,eval_L,teacher_forced,rollout_final,rollout_value_only,n_eval,train_L"
    )?;
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.run_id,
            row.stage,
            row.report.eval_len,
            row.report.teacher_forced,
            row.report.rollout_final,
            row.report.rollout_value_only,
            row.report.n_eval,
            row.train_len.map_or(String::new(), |l| l.to_string()),
        )?;
    }
    out.flush()
}

/// Dense heatmap matrix plus an axis-label sidecar.
pub fn write_heatmap_csv(path: &Path, labels_path: &Path, diag: &AttnDiagnostics) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in &diag.heatmap {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    let mut labels = std::io::BufWriter::new(std::fs::File::create(labels_path)?);
    writeln!(labels, "axis,index,label")?;
    for k in 0..diag.l {
        writeln!(labels, "key,{},pred_{}", k, k + 1)?;
    }
    for k in 0..diag.l {
        writeln!(labels, "key,{},ans_{}", diag.l + k, k)?;
    }
    for q in 0..diag.l {
        writeln!(labels, "query,{},ans_{}", q, q)?;
    }
    labels.flush()
}

pub fn write_diagnostics_csv(path: &Path, diag: &AttnDiagnostics) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "L,ell,eps,delta")?;
    for ell in 1..=diag.l {
        writeln!(
            out,
            "{},{},{},{}",
            diag.l,
            ell,
            diag.eps[ell - 1],
            diag.delta[ell - 1]
        )?;
    }
    out.flush()
}

pub fn write_permutation_csv(path: &Path, report: &PermutationReport) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "metric,baseline,permuted,delta")?;
    let rows = [
        (
            "rollout_final",
            report.rollout_final_base,
            report.rollout_final_perm,
        ),
        (
            "rollout_value_only",
            report.rollout_value_base,
            report.rollout_value_perm,
        ),
    ];
    for (name, base, perm) in rows {
        writeln!(out, "{},{},{},{}", name, base, perm, perm - base)?;
    }
    for ell in 1..=report.l {
        writeln!(
            out,
            "eps_{},{},{},{}",
            ell,
            report.eps_base[ell - 1],
            report.eps_perm[ell - 1],
            report.eps_perm[ell - 1] - report.eps_base[ell - 1]
        )?;
    }
    writeln!(
        out,
        "max_weight_deviation,0,{},{}",
        report.max_weight_deviation, report.max_weight_deviation
    )?;
    out.flush()
}

pub fn write_feature_probe_csv(path: &Path, probe: &FeatureProbe) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "value_class,neuron,feature_kind,feature_index,value")?;
    for j in 0..probe.n_y {
        for r in 0..probe.m {
            for (g, &v) in probe.v_g[j][r].iter().enumerate() {
                writeln!(out, "{j},{r},action,{g},{v}")?;
            }
            for (y, &v) in probe.v_y[j][r].iter().enumerate() {
                writeln!(out, "{j},{r},value,{y},{v}")?;
            }
        }
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ConstantAnnotator, OracleAnnotator, Token};
    use crate::group::ActionKind;
    use crate::model::{ModelHyper, ModelParams};

    fn c6_vocab() -> Vocabulary {
        Vocabulary::new(30, ActionKind::Cyclic, 6).unwrap()
    }

    fn random_model(vocab: &Vocabulary, m: usize, seed: u64) -> ModelParams {
        let hyper = ModelHyper::theory_default(vocab.d(), m);
        ModelParams::init(vocab, &hyper, seed)
    }

    #[test]
    fn oracle_annotator_scores_one_everywhere() {
        let vocab = c6_vocab();
        let oracle = OracleAnnotator { vocab: &vocab };
        let tf = acc_teacher_forced(&oracle, &vocab, 4, 50, 1).unwrap();
        assert_eq!(tf, 1.0);
        let (exact, value) = acc_rollout(&oracle, &vocab, 4, 50, 2).unwrap();
        assert_eq!(exact, 1.0);
        assert_eq!(value, 1.0);
    }

    #[test]
    fn constant_annotator_rollout_fails_for_l_ge_2() {
        let vocab = c6_vocab();
        let annot = ConstantAnnotator([
            vocab.blank(),
            vocab.blank(),
            vocab.blank(),
            vocab.variable(0),
            vocab.value(0),
        ]);
        let (exact, _) = acc_rollout(&annot, &vocab, 2, 100, 3).unwrap();
        assert_eq!(exact, 0.0, "distinct variables force a mismatch");
    }

    #[test]
    fn uniform_logit_model_never_matches_whole_clause() {
        let vocab = c6_vocab();
        let mut params = random_model(&vocab, 4, 5);
        for v in params.w_flat_mut().iter_mut() {
            *v = 0.0;
        }
        // exact 5-token match probability is (1/43)^5 ~ 6.8e-9
        let annot = ModelAnnotator {
            params: &params,
            vocab: &vocab,
            mode: DecodeMode::Sample,
        };
        let tf = acc_teacher_forced(&annot, &vocab, 1, 10_000, 7).unwrap();
        assert_eq!(tf, 0.0);
    }

    #[test]
    fn two_seeds_agree_within_binomial_3_sigma() {
        // A half-right annotator gives a mid-range accuracy where the bound
        // is meaningful.
        struct HalfOracle<'a> {
            vocab: &'a Vocabulary,
        }
        impl Annotator for HalfOracle<'_> {
            fn next_clause(&self, prefix: &LegoSentence, rng: &mut Rng) -> [Token; 5] {
                let oracle = OracleAnnotator { vocab: self.vocab };
                if rng.next_f64() < 0.5 {
                    oracle.next_clause(prefix, rng)
                } else {
                    [self.vocab.blank(); 5]
                }
            }
        }
        let vocab = c6_vocab();
        let annot = HalfOracle { vocab: &vocab };
        let l = 4;
        let n = 800;
        let a = acc_teacher_forced(&annot, &vocab, l, n, 11).unwrap();
        let b = acc_teacher_forced(&annot, &vocab, l, n, 1213).unwrap();
        let draws = (n * l) as f64;
        let p = 0.5f64;
        let sigma = (p * (1.0 - p) / draws).sqrt();
        assert!(
            (a - b).abs() <= 3.0 * (2.0f64).sqrt() * sigma,
            "estimates {a} and {b} disagree beyond 3 sigma"
        );
    }

    #[test]
    fn evaluate_model_is_seed_reproducible() {
        let vocab = c6_vocab();
        let params = random_model(&vocab, 4, 9);
        let a = evaluate_model(&params, &vocab, 3, 50, 17, DecodeMode::Sample).unwrap();
        let b = evaluate_model(&params, &vocab, 3, 50, 17, DecodeMode::Sample).unwrap();
        assert_eq!(a.teacher_forced, b.teacher_forced);
        assert_eq!(a.rollout_final, b.rollout_final);
        assert!(a.rollout_final <= a.rollout_value_only);
    }

    #[test]
    fn zero_q_diagnostics_match_uniform_arithmetic() {
        let vocab = c6_vocab();
        let params = random_model(&vocab, 4, 13);
        let diag = attention_diagnostics(&params, &vocab, 2, 20, 19).unwrap();
        // ell = 2: |I^{2,1}| = 4 uniform keys; eps = 1 - 1/4 - 1/4 = 0.5
        assert!((diag.eps[1] - 0.5).abs() < 1e-12);
        assert!(diag.delta[1].abs() < 1e-12);
        // ell = 1: 3 keys; eps = 1/3
        assert!((diag.eps[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn concentrated_attention_hits_extremes() {
        let vocab = c6_vocab();
        let mut params = random_model(&vocab, 4, 23);
        let d = params.d;
        let d_c = params.d_c();
        // Huge diagonal on the predicate block only: all mass on pred_ell,
        // none on the answer clause, so eps -> 0 and delta -> 1.
        for v in 0..vocab.n_x() {
            let row = 3 * d + v;
            let col = 2 * d + v;
            params.q_head_mut(0)[row * d_c + col] = 200.0;
        }
        let diag = attention_diagnostics(&params, &vocab, 3, 10, 29).unwrap();
        for ell in 0..3 {
            assert!(diag.eps[ell].abs() < 1e-9, "eps {}", diag.eps[ell]);
            assert!((diag.delta[ell] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn heatmap_rows_are_probability_vectors() {
        let vocab = c6_vocab();
        let params = random_model(&vocab, 4, 31);
        let diag = attention_diagnostics(&params, &vocab, 4, 25, 37).unwrap();
        for row in &diag.heatmap {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        // eps + two target weights = 1 exactly, per query row
        for ell in 1..=4usize {
            let row = &diag.heatmap[ell - 1];
            let recon = 1.0 - row[ell - 1] - row[4 + ell - 1];
            assert!((recon - diag.eps[ell - 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn permutation_is_invisible_to_uniform_attention() {
        let vocab = c6_vocab();
        let params = random_model(&vocab, 4, 41);
        let report = permutation_ablation(&params, &vocab, 4, 30, 43).unwrap();
        assert!(report.max_weight_deviation < 1e-12);
        for (a, b) in report.eps_base.iter().zip(&report.eps_perm) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_weights_invariant_for_block_sparse_content_keys() {
        let vocab = c6_vocab();
        let mut params = random_model(&vocab, 4, 47);
        let d = params.d;
        let d_c = params.d_c();
        let mut rng = Rng::new(3);
        for row in 3 * d..4 * d {
            for col in 2 * d..4 * d {
                params.q_head_mut(0)[row * d_c + col] = rng.next_normal();
            }
        }
        let report = permutation_ablation(&params, &vocab, 5, 40, 53).unwrap();
        assert!(
            report.max_weight_deviation < 1e-9,
            "deviation {}",
            report.max_weight_deviation
        );
    }

    #[test]
    fn feature_probe_reads_exact_coordinates() {
        let vocab = c6_vocab();
        let mut params = random_model(&vocab, 4, 59);
        let j_class = 2;
        let j = vocab.value(j_class).index();
        let g = 4;
        let p = params.d + vocab.action_by_index(g).index();
        params.w_set(4, j, 1, p, 3.0);
        let probe = feature_probe(&params, &vocab);
        assert_eq!(probe.v_g[j_class][1][g], 3.0);
    }

    #[test]
    fn fresh_model_features_are_small() {
        let vocab = c6_vocab();
        let params = random_model(&vocab, 4, 61);
        let probe = feature_probe(&params, &vocab);
        let bound = 10.0 * params.sigma0 * (vocab.d() as f64).ln().sqrt();
        assert!(probe.max_abs() < bound, "{} vs {bound}", probe.max_abs());
        // margins exist for every class (descriptive, no threshold)
        assert_eq!(probe.class_margins().len(), vocab.n_y());
    }

    #[test]
    fn csv_exports_have_expected_shapes() {
        let vocab = c6_vocab();
        let params = random_model(&vocab, 4, 67);
        let dir = std::env::temp_dir().join(format!("lego-eval-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let report = evaluate_model(&params, &vocab, 2, 10, 1, DecodeMode::Sample).unwrap();
        let acc_path = dir.join("acc.csv");
        write_accuracy_csv(
            &acc_path,
            &[AccCsvRow {
                run_id: "r".into(),
                stage: "final".into(),
                report,
                train_len: Some(5),
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&acc_path).unwrap();
        assert!(text.starts_with("run_id,stage,eval_L,teacher_forced"));
        assert_eq!(text.lines().count(), 2);

        let diag = attention_diagnostics(&params, &vocab, 3, 5, 2).unwrap();
        let hm = dir.join("heatmap.csv");
        let labels = dir.join("heatmap_labels.csv");
        write_heatmap_csv(&hm, &labels, &diag).unwrap();
        assert_eq!(std::fs::read_to_string(&hm).unwrap().lines().count(), 3);
        let label_text = std::fs::read_to_string(&labels).unwrap();
        assert!(label_text.contains("key,0,pred_1"));
        assert!(label_text.contains("query,0,ans_0"));

        let diag_path = dir.join("diag.csv");
        write_diagnostics_csv(&diag_path, &diag).unwrap();
        assert_eq!(
            std::fs::read_to_string(&diag_path).unwrap().lines().count(),
            4
        );

        let perm = permutation_ablation(&params, &vocab, 3, 5, 3).unwrap();
        let perm_path = dir.join("perm.csv");
        write_permutation_csv(&perm_path, &perm).unwrap();
        let perm_text = std::fs::read_to_string(&perm_path).unwrap();
        assert!(perm_text.contains("rollout_value_only"));
        assert!(perm_text.contains("max_weight_deviation"));

        let probe_path = dir.join("probe.csv");
        write_feature_probe_csv(&probe_path, &feature_probe(&params, &vocab)).unwrap();
        assert!(std::fs::read_to_string(&probe_path)
            .unwrap()
            .starts_with("value_class,neuron"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
