//! The commands behind the `listennet` binary. Each returns data rather than
//! printing, so tests can drive them directly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{write_recording, Manifest, RunConfig, TrialEntry};
use crate::model::{count_params, mac_breakdown, ListenNet, MacBreakdown, ModelConfig};
use crate::preprocess::{align_per_subject, make_windows, zscore_normalize, DecisionWindow, Recording};
use crate::train::{evaluate, split_loso, split_subject_dependent, train_loop, Protocol, SplitPlan, TrainOutcome};
use crate::verify::{run_battery, BatteryOptions, GradCheckReport};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_SELFTEST: u8 = 3;

pub fn exit_code(err: &Error) -> u8 {
    if err.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row).map_err(|e| Error::Serde(e.to_string()))?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Loads the manifest and its recordings, then z-scores and windows them.
/// Returns the manifest, the model configuration and all windows in
/// manifest order.
pub fn load_windows(manifest_path: &Path, run: &RunConfig) -> Result<(Manifest, ModelConfig, Vec<DecisionWindow>)> {
    let manifest = Manifest::load(manifest_path).map_err(|e| e.in_stage("load"))?;
    let model_cfg = run
        .model_config(manifest.channels, manifest.fs)
        .map_err(|e| e.in_stage("config"))?;
    let recordings = manifest.load_recordings().map_err(|e| e.in_stage("load"))?;
    let windows = window_recordings(&recordings, run, manifest.fs).map_err(|e| e.in_stage("preprocess"))?;
    Ok((manifest, model_cfg, windows))
}

fn window_recordings(recordings: &[Recording], run: &RunConfig, fs: f32) -> Result<Vec<DecisionWindow>> {
    let win = run.window_samples(fs)?;
    let stride = run.stride_samples(fs)?;
    let mut windows = Vec::new();
    for rec in recordings {
        windows.extend(make_windows(&zscore_normalize(rec)?, win, stride)?);
    }
    Ok(windows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldSummary {
    pub fold: String,
    pub subject: String,
    pub window_seconds: f64,
    pub test_accuracy: f64,
}

/// Aligns (when enabled) using only the fold's training windows, except for
/// subjects with none, then trains and scores the test set.
fn run_fold(
    mut windows: Vec<DecisionWindow>,
    plan: &SplitPlan,
    model_cfg: &ModelConfig,
    run: &RunConfig,
) -> Result<(TrainOutcome, f64)> {
    if run.align {
        let mut fit = vec![false; windows.len()];
        plan.train.iter().for_each(|&i| fit[i] = true);
        align_per_subject(&mut windows, |i| fit[i]).map_err(|e| e.in_stage("align"))?;
    }
    let outcome = train_loop(&windows, plan, model_cfg, &run.train).map_err(|e| e.in_stage("train"))?;
    let test: Vec<&DecisionWindow> = plan.test.iter().map(|&i| &windows[i]).collect();
    let acc = evaluate(&outcome.model, &test).map_err(|e| e.in_stage("evaluate"))?;
    Ok((outcome, acc))
}

/// Full pipeline: preprocessing, splits, training and evaluation for every
/// fold of the configured protocol. Writes `summary.jsonl` plus a history
/// and model file per fold into the output directory.
pub fn cmd_train(manifest_path: &Path, run: &RunConfig) -> Result<Vec<FoldSummary>> {
    let (manifest, model_cfg, windows) = load_windows(manifest_path, run)?;
    let out = &run.output_dir;
    create_dir(out)?;
    write_json(&out.join("run_config.json"), run)?;

    let mut summaries = Vec::new();
    let mut record = |fold: &str, subject: &str, outcome: &TrainOutcome, acc: f64| -> Result<()> {
        info!("fold {fold}: test accuracy {acc:.4} (best epoch {})", outcome.best_epoch);
        write_jsonl(&out.join(format!("history-{fold}.jsonl")), &outcome.history)?;
        write_json(&out.join(format!("model-{fold}.json")), &outcome.model)?;
        summaries.push(FoldSummary {
            fold: fold.to_string(),
            subject: subject.to_string(),
            window_seconds: run.window_seconds,
            test_accuracy: acc,
        });
        Ok(())
    };

    match run.train.mode {
        Protocol::SubjectDependent => {
            for subject in manifest.subjects() {
                let own: Vec<DecisionWindow> = windows.iter().filter(|w| w.subject_id == subject).cloned().collect();
                let local: Vec<usize> = (0..own.len()).collect();
                let plan = split_subject_dependent(&local, run.seed, &subject).map_err(|e| e.in_stage("split"))?;
                plan.check(&local).map_err(|e| e.in_stage("split"))?;
                let (outcome, acc) = run_fold(own, &plan, &model_cfg, run)?;
                record(&subject, &subject, &outcome, acc)?;
            }
        }
        Protocol::Loso => {
            let subjects: Vec<&str> = windows.iter().map(|w| w.subject_id.as_str()).collect();
            let all: Vec<usize> = (0..windows.len()).collect();
            for subject in manifest.subjects() {
                let plan = split_loso(&subjects, &subject, run.seed, run.train.val_fraction_loso)
                    .map_err(|e| e.in_stage("split"))?;
                plan.check(&all).map_err(|e| e.in_stage("split"))?;
                let (outcome, acc) = run_fold(windows.clone(), &plan, &model_cfg, run)?;
                record(&format!("loso-{subject}"), &subject, &outcome, acc)?;
            }
        }
    }
    write_jsonl(&out.join("summary.jsonl"), &summaries)?;
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub subject: String,
    pub windows: usize,
    pub accuracy: f64,
}

/// Scores a saved model on every window of a manifest, per subject. Each
/// subject is aligned on its own windows, which needs no labels.
pub fn cmd_eval(manifest_path: &Path, model_path: &Path, run: &RunConfig) -> Result<Vec<EvalRow>> {
    let text = fs::read_to_string(model_path).map_err(|e| Error::io(model_path, e))?;
    let model: ListenNet =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", model_path.display())))?;
    let (_, model_cfg, mut windows) = load_windows(manifest_path, run)?;
    if (model_cfg.channels, model_cfg.window_len) != (model.config.channels, model.config.window_len) {
        return Err(Error::config(format!(
            "model expects {}x{} windows, data gives {}x{}",
            model.config.channels, model.config.window_len, model_cfg.channels, model_cfg.window_len
        )));
    }
    if run.align {
        align_per_subject(&mut windows, |_| true).map_err(|e| e.in_stage("align"))?;
    }
    let mut by_subject: BTreeMap<&str, Vec<&DecisionWindow>> = BTreeMap::new();
    for w in &windows {
        by_subject.entry(&w.subject_id).or_default().push(w);
    }
    by_subject
        .into_iter()
        .map(|(subject, ws)| {
            Ok(EvalRow {
                subject: subject.to_string(),
                windows: ws.len(),
                accuracy: evaluate(&model, &ws).map_err(|e| e.in_stage("evaluate"))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct WindowIndexRow<'a> {
    subject: &'a str,
    trial: &'a str,
    start_sample: usize,
    label: crate::preprocess::Label,
}

/// Writes normalized (and, when enabled, aligned) recordings with a new
/// manifest, the per-subject alignment matrices and a window index into
/// the output directory. Returns the new manifest's path.
pub fn cmd_prep(manifest_path: &Path, run: &RunConfig) -> Result<PathBuf> {
    let manifest = Manifest::load(manifest_path).map_err(|e| e.in_stage("load"))?;
    let recordings = manifest.load_recordings().map_err(|e| e.in_stage("load"))?;
    let normalized: Vec<Recording> = recordings
        .iter()
        .map(zscore_normalize)
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("preprocess"))?;
    let mut windows = window_recordings(&recordings, run, manifest.fs).map_err(|e| e.in_stage("preprocess"))?;
    let out = &run.output_dir;
    create_dir(out)?;

    let mut matrices = BTreeMap::new();
    if run.align {
        matrices = align_per_subject(&mut windows, |_| true).map_err(|e| e.in_stage("align"))?;
    }
    let mut trials = Vec::with_capacity(normalized.len());
    for rec in &normalized {
        let mut rec = rec.clone();
        if let Some(m) = matrices.get(&rec.subject_id) {
            let s = rec.n_samples();
            let mut aligned = vec![0.0f32; rec.samples.len()];
            for i in 0..rec.channels {
                for k in 0..rec.channels {
                    let a = m.matrix[(i, k)];
                    for t in 0..s {
                        aligned[i * s + t] += (a * rec.samples[k * s + t] as f64) as f32;
                    }
                }
            }
            rec.samples = aligned;
        }
        let file = format!("{}_{}.eegw", rec.subject_id, rec.trial_id);
        write_recording(&rec, &out.join(&file))?;
        trials.push(TrialEntry {
            subject: rec.subject_id.clone(),
            trial: rec.trial_id.clone(),
            path: PathBuf::from(file),
            label: rec.label,
        });
    }
    let prepared = Manifest {
        name: format!("{}-prep", manifest.name),
        trials,
        base_dir: out.clone(),
        ..manifest
    };
    let path = out.join("manifest.toml");
    prepared.save(&path)?;

    let alignment: BTreeMap<&String, Vec<Vec<f64>>> = matrices
        .iter()
        .map(|(s, m)| (s, m.matrix.row_iter().map(|r| r.iter().copied().collect()).collect()))
        .collect();
    write_json(&out.join("alignment.json"), &alignment)?;
    let index: Vec<WindowIndexRow> = windows
        .iter()
        .map(|w| WindowIndexRow {
            subject: &w.subject_id,
            trial: &w.trial_id,
            start_sample: w.start_sample,
            label: w.label,
        })
        .collect();
    write_jsonl(&out.join("windows.jsonl"), &index)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub channels: usize,
    pub window_len: usize,
    pub params: usize,
    pub macs: u64,
    pub breakdown: MacBreakdown,
}

impl AuditReport {
    pub fn params_millions(&self) -> f64 {
        (self.params as f64 / 1e6 * 100.0).round() / 100.0
    }

    pub fn macs_millions(&self) -> f64 {
        (self.macs as f64 / 1e6 * 100.0).round() / 100.0
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input      C={} T={}", self.channels, self.window_len)?;
        writeln!(f, "params     {} ({:.2} M)", self.params, self.params_millions())?;
        writeln!(f, "macs       {} ({:.2} M)", self.macs, self.macs_millions())?;
        let b = &self.breakdown;
        write!(
            f,
            "  stde {}  mste {}  cna {}  classifier {}",
            b.stde, b.mste, b.cna, b.classifier
        )
    }
}

pub fn cmd_audit(config: &ModelConfig) -> Result<AuditReport> {
    let breakdown = mac_breakdown(config)?;
    Ok(AuditReport {
        channels: config.channels,
        window_len: config.window_len,
        params: count_params(config),
        macs: breakdown.total(),
        breakdown,
    })
}

/// Runs the gradient battery; the flag is true iff every check passed.
pub fn cmd_gradcheck(opts: &BatteryOptions) -> Result<(Vec<GradCheckReport>, bool)> {
    let reports = run_battery(opts)?;
    let ok = reports.iter().all(|r| r.pass);
    Ok((reports, ok))
}

pub fn report_lines<T: Serialize>(rows: &[T]) -> Result<Vec<String>> {
    rows.iter()
        .map(|r| serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string())))
        .collect()
}

/// Appends `rows` as JSON lines to any writer.
pub fn print_jsonl<T: Serialize>(mut w: impl Write, rows: &[T]) -> Result<()> {
    for line in report_lines(rows)? {
        writeln!(w, "{line}").map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}
