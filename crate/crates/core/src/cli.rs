//! Command implementations behind the `lego` binary.
//!
//! Every command is a pure function of (config, seed, input files) at a fixed
//! worker count; run directories carry a config snapshot and a content-hash
//! manifest so reruns are checkable byte for byte. The only environment
//! knobs are `THREADS` (gradient worker count) and `OUT_DIR` (default output
//! root when a command's output flag is omitted).

use crate::config::{ConfigError, ExperimentConfig, TrainingCfg};
use crate::corpus::{generate_corpus, read_corpus, validate_sentence, write_corpus};
use crate::eval::{
    attention_diagnostics, evaluate_model, permutation_ablation, write_accuracy_csv,
    write_diagnostics_csv, write_heatmap_csv, write_permutation_csv, AccCsvRow,
};
use crate::manifest::{build_manifest, read_manifest, sha256_hex, write_manifest, Manifest};
use crate::model::{DecodeMode, ModelError, ModelParams};
use crate::train::{run_schedule_observed, MetricRecord, StageSummary, TrainError};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Resolve an output path: explicit flag wins, then `OUT_DIR`.
pub fn resolve_out(explicit: Option<PathBuf>, default_name: &str) -> Result<PathBuf, CliError> {
    if let Some(path) = explicit {
        return Ok(path);
    }
    if let Ok(root) = std::env::var("OUT_DIR") {
        return Ok(PathBuf::from(root).join(default_name));
    }
    Err(CliError::Invalid(format!(
        "no output path: pass a flag or set OUT_DIR (default name would be {default_name})"
    )))
}

/// Deterministic run identifier: leading hex of the config snapshot hash.
pub fn run_id_of(cfg: &ExperimentConfig) -> (String, String) {
    let snapshot = cfg.to_json_pretty();
    let hash = sha256_hex(snapshot.as_bytes());
    (hash[..12].to_string(), hash)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub fn cmd_gen(
    cfg: &ExperimentConfig,
    length: usize,
    count: usize,
    out: &Path,
) -> Result<(), CliError> {
    cfg.validate()?;
    let vocab = cfg.vocabulary()?;
    if length + 1 > vocab.n_x() {
        return Err(CliError::Invalid(format!(
            "length {length} needs {} variables, config has {}",
            length + 1,
            vocab.n_x()
        )));
    }
    let sentences = generate_corpus(&vocab, length, count, cfg.seed)?;
    for s in &sentences {
        validate_sentence(&vocab, s).map_err(CliError::Invalid)?;
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_corpus(out, &sentences, cfg.seed)?;
    Ok(())
}

/// Re-derive every line of a corpus against the group oracle.
pub fn cmd_check_corpus(cfg: &ExperimentConfig, path: &Path) -> Result<usize, CliError> {
    let vocab = cfg.vocabulary()?;
    let sentences = read_corpus(path)?;
    for (i, s) in sentences.iter().enumerate() {
        validate_sentence(&vocab, s)
            .map_err(|e| CliError::Invalid(format!("sentence {i}: {e}")))?;
    }
    Ok(sentences.len())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainReport {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub stages: Vec<StageSummary>,
    pub checkpoints: Vec<PathBuf>,
}

const METRICS_HEADER: &str = "run_id,stage,step,loss,token_loss_1,token_loss_2,token_loss_3,token_loss_4,token_loss_5,wallclock_ms";

fn metric_line(run_id: &str, r: &MetricRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        run_id,
        r.stage,
        r.step,
        r.loss,
        r.per_token[0],
        r.per_token[1],
        r.per_token[2],
        r.per_token[3],
        r.per_token[4],
        r.wallclock_ms
    )
}

pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainReport, CliError> {
    cfg.validate()?;
    let (run_id, config_hash) = run_id_of(cfg);
    std::fs::create_dir_all(out_dir.join("checkpoints"))?;
    std::fs::write(out_dir.join("config.json"), cfg.to_json_pretty() + "\n")?;

    let vocab = cfg.vocabulary()?;
    let hyper = cfg.model_hyper();
    let params = ModelParams::init(&vocab, &hyper, cfg.seed);
    let schedule = cfg.schedule();
    eprintln!(
        "[{run_id}] training: {} stage(s), d = {}, m = {}, heads = {}",
        schedule.stages.len(),
        vocab.d(),
        hyper.m,
        hyper.heads
    );

    let mut checkpoints = Vec::new();
    let ckpt_dir = out_dir.join("checkpoints");
    let mut save_err: Option<CliError> = None;
    let metrics_file = std::fs::File::create(out_dir.join("metrics.csv"))?;
    let mut metrics_out = std::io::BufWriter::new(metrics_file);
    writeln!(metrics_out, "{METRICS_HEADER}")?;
    let mut stream_err: Option<std::io::Error> = None;
    let outcome = run_schedule_observed(
        &vocab,
        params,
        &schedule,
        cfg.seed,
        |label, p| {
            let path = ckpt_dir.join(format!("{label}.ckpt"));
            if let Err(e) = p.save_checkpoint(&path) {
                save_err.get_or_insert(CliError::Model(e));
            } else {
                checkpoints.push(path);
            }
            eprintln!("[{run_id}] checkpoint {label}");
        },
        |record| {
            if let Err(e) = writeln!(metrics_out, "{}", metric_line(&run_id, record)) {
                stream_err.get_or_insert(e);
            }
            if record.step % 2000 == 0 {
                let _ = metrics_out.flush();
                eprintln!(
                    "[{run_id}] stage {} step {} loss {:.4}",
                    record.stage, record.step, record.loss
                );
            }
        },
    )?;
    if let Some(e) = save_err {
        return Err(e);
    }
    if let Some(e) = stream_err {
        return Err(CliError::Io(e));
    }
    metrics_out.flush()?;
    drop(metrics_out);
    let manifest = build_manifest(out_dir, &run_id, &config_hash)?;
    write_manifest(out_dir, &manifest)?;
    Ok(TrainReport {
        run_id,
        out_dir: out_dir.to_path_buf(),
        stages: outcome.stages,
        checkpoints,
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    lengths: &[usize],
    n_eval: Option<usize>,
    out: &Path,
) -> Result<Vec<AccCsvRow>, CliError> {
    cfg.validate()?;
    let vocab = cfg.vocabulary()?;
    let params = ModelParams::load_checkpoint(checkpoint)?;
    if params.d != vocab.d() {
        return Err(CliError::Invalid(format!(
            "checkpoint vocabulary size {} does not match config ({})",
            params.d,
            vocab.d()
        )));
    }
    let mut lengths: Vec<usize> = lengths.to_vec();
    lengths.sort_unstable();
    lengths.dedup();
    let n_eval = n_eval.unwrap_or(cfg.eval.n_eval);
    let (run_id, _) = run_id_of(cfg);
    let stage = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let mut rows = Vec::new();
    for &l in &lengths {
        if l + 1 > vocab.n_x() {
            return Err(CliError::Invalid(format!(
                "eval length {l} needs {} variables, config has {}",
                l + 1,
                vocab.n_x()
            )));
        }
        let report = evaluate_model(&params, &vocab, l, n_eval, cfg.seed, DecodeMode::Sample)?;
        eprintln!(
            "[{run_id}] eval L={l}: teacher {:.4} rollout {:.4} value-only {:.4}",
            report.teacher_forced, report.rollout_final, report.rollout_value_only
        );
        rows.push(AccCsvRow {
            run_id: run_id.clone(),
            stage: stage.clone(),
            report,
            train_len: params.train_len,
        });
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_accuracy_csv(out, &rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// attn
// ---------------------------------------------------------------------------

pub fn cmd_attn(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    length: usize,
    out_dir: &Path,
) -> Result<(), CliError> {
    cfg.validate()?;
    let vocab = cfg.vocabulary()?;
    let params = ModelParams::load_checkpoint(checkpoint)?;
    if params.d != vocab.d() {
        return Err(CliError::Invalid(format!(
            "checkpoint vocabulary size {} does not match config ({})",
            params.d,
            vocab.d()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let diag = attention_diagnostics(&params, &vocab, length, cfg.eval.attn_samples, cfg.seed)?;
    write_heatmap_csv(
        &out_dir.join("heatmap.csv"),
        &out_dir.join("heatmap_labels.csv"),
        &diag,
    )?;
    write_diagnostics_csv(&out_dir.join("diagnostics.csv"), &diag)?;
    let perm = permutation_ablation(&params, &vocab, length, cfg.eval.attn_samples, cfg.seed)?;
    write_permutation_csv(&out_dir.join("permutation.csv"), &perm)?;
    let probe = crate::eval::feature_probe(&params, &vocab);
    crate::eval::write_feature_probe_csv(&out_dir.join("feature_probe.csv"), &probe)?;
    write_q_diag_csv(&out_dir.join("q_diagonals.csv"), &params, &vocab)?;
    Ok(())
}

/// Mean diagonal and off-diagonal magnitudes of the variable-indexed entries
/// of the Q43 and Q44 blocks, per head.
fn write_q_diag_csv(
    path: &Path,
    params: &ModelParams,
    vocab: &crate::corpus::Vocabulary,
) -> std::io::Result<()> {
    let d = params.d;
    let d_c = params.d_c();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "head,block,mean_diag,mean_offdiag,max_diag")?;
    for h in 0..params.heads() {
        let q = params.q_head(h);
        for (name, col_slot) in [("q43", 2usize), ("q44", 3usize)] {
            let mut diag_sum = 0.0;
            let mut diag_max = f64::NEG_INFINITY;
            let mut off_sum = 0.0;
            let mut off_n = 0usize;
            for s in 0..vocab.n_x() {
                for s2 in 0..vocab.n_x() {
                    let v = q[(3 * d + s) * d_c + col_slot * d + s2];
                    if s == s2 {
                        diag_sum += v;
                        diag_max = diag_max.max(v);
                    } else {
                        off_sum += v;
                        off_n += 1;
                    }
                }
            }
            writeln!(
                out,
                "{},{},{},{},{}",
                h,
                name,
                diag_sum / vocab.n_x() as f64,
                off_sum / off_n.max(1) as f64,
                diag_max
            )?;
        }
    }
    out.flush()
}

// ---------------------------------------------------------------------------
// validate-config / show-manifest
// ---------------------------------------------------------------------------

pub fn cmd_validate(cfg: &ExperimentConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let (run_id, hash) = run_id_of(cfg);
    let mode = match &cfg.training {
        TrainingCfg::TheoryCurriculum { .. } => "theory curriculum",
        TrainingCfg::TheorySelfTrain { .. } => "theory self-training",
        TrainingCfg::ExperimentJoint { .. } => "experiment joint",
    };
    Ok(format!(
        "ok: d = {}, mode = {mode}, max train length = {}, run id = {run_id}, config sha256 = {hash}",
        cfg.d(),
        cfg.max_train_len()
    ))
}

pub fn cmd_show_manifest(run_dir: &Path) -> Result<Manifest, CliError> {
    Ok(read_manifest(run_dir)?)
}
