//! Subcommands. Artifacts go under `--out`; progress goes to the log.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use swpc_core::datagen::{synth_recording, SynthSpec};
use swpc_core::engine::{decode_stream, DecisionRecord};
use swpc_core::eval::{score_stream, ScoreReport};
use swpc_core::model::ModelBundle;
use swpc_core::pipeline::{
    adapt_offline, evaluate_recording, prepare_training, run_ablation, run_sweep, train_swpc, TrainedSwpc,
};
use swpc_core::recording::ContinuousRecording;
use swpc_core::training::{EpochMetrics, Stage};

use crate::checkpoint::{self, CheckpointMeta, Role};
use crate::config::SwpcConfig;
use crate::container::{read_recording, recording_path, write_recording};
use crate::logs::{read_json, read_jsonl, sidecar_path, write_csv, write_json, write_jsonl, MeanStd, MetricsLine, TruthSidecar};

#[derive(Debug, Parser)]
#[command(name = "swpc", version, about = "Sliding-window prescreening and classification for asynchronous MI decoding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/test sessions for every configured subject.
    Synth(Common),
    /// Train both modules per subject and seed; write checkpoints and metrics.
    Train(Common),
    /// Decode one recording with a pair of checkpoints.
    Decode(DecodeArgs),
    /// Score a decision log against truth events.
    Eval(EvalArgs),
    /// Score every (window length, threshold) grid point.
    Sweep(Common),
    /// Score the eight ablation switch combinations.
    Ablate(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; defaults apply to missing fields or a missing file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Config override, `key.path=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Replaces the seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

impl Common {
    pub fn config(&self) -> Result<SwpcConfig> {
        let base = match &self.config {
            Some(p) => SwpcConfig::load(p)?,
            None => SwpcConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.sets)?;
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory holding `prescreen.ckpt` and `classifier.ckpt`.
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// `.swpc` recording to decode; its event table is ignored.
    #[arg(long)]
    pub recording: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// `decisions.jsonl` written by `decode`.
    #[arg(long)]
    pub decisions: PathBuf,
    /// Truth: a `.swpc` container or an `.events.json` sidecar.
    #[arg(long)]
    pub truth: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => cmd_synth(&c.config()?, &c.out),
        Command::Train(c) => cmd_train(&c.config()?, &c.out).map(|_| ()),
        Command::Decode(a) => cmd_decode(&a.common.config()?, &a.checkpoints, &a.recording, &a.common.out),
        Command::Eval(a) => cmd_eval(&a.common.config()?, &a.decisions, &a.truth, &a.common.out).map(|_| ()),
        Command::Sweep(c) => cmd_sweep(&c.config()?, &c.out),
        Command::Ablate(c) => cmd_ablate(&c.config()?, &c.out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Seed of one synthetic session; subjects and sessions never share one.
fn session_seed(base: u64, subject: usize, session: usize) -> u64 {
    base.wrapping_add(1000 * subject as u64 + session as u64)
}

pub fn cmd_synth(cfg: &SwpcConfig, out: &Path) -> Result<()> {
    let sessions = [&cfg.data.train_session, &cfg.data.test_session];
    for (si, subject) in cfg.data.subjects.iter().enumerate() {
        for (j, session) in sessions.iter().enumerate() {
            let spec = SynthSpec {
                seed: session_seed(cfg.synth.seed, si, j),
                ..cfg.synth.clone()
            };
            let rec = synth_recording(&spec)?;
            let path = recording_path(out, &cfg.data.dataset, subject, session);
            create_dir(path.parent().unwrap())?;
            write_recording(&rec, &path)?;
            write_json(&sidecar_path(&path), &TruthSidecar::of(&rec))?;
            info!(
                "{}: {} ch, {} samples, {} events",
                path.display(),
                rec.n_channels(),
                rec.n_samples(),
                rec.events.len()
            );
        }
    }
    Ok(())
}

fn load_session(cfg: &SwpcConfig, subject: &str, session: &str) -> Result<ContinuousRecording> {
    let path = cfg.data.path(subject, session);
    read_recording(&path).with_context(|| format!("loading {}", path.display()))
}

fn training_recordings(cfg: &SwpcConfig, subject: &str) -> Result<Vec<ContinuousRecording>> {
    cfg.training_subjects(subject)
        .into_iter()
        .map(|s| load_session(cfg, s, &cfg.data.train_session))
        .collect()
}

/// Test-set scores of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestScores {
    pub acc: f64,
    pub prescreen_acc: f64,
    pub false_alarm_rate: f64,
}

impl From<&ScoreReport> for TestScores {
    fn from(r: &ScoreReport) -> Self {
        Self {
            acc: r.acc,
            prescreen_acc: r.prescreen_acc,
            false_alarm_rate: r.false_alarm_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub subject: String,
    pub seed: u64,
    pub prescreen_valid_acc: Option<f64>,
    pub classifier_valid_acc: Option<f64>,
    pub test: Option<TestScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject: String,
    /// Across seeds.
    pub acc: MeanStd,
    pub prescreen_acc: MeanStd,
    pub false_alarm_rate: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub runs: Vec<RunSummary>,
    pub subjects: Vec<SubjectSummary>,
    /// Across subjects of the per-subject means.
    pub acc: Option<MeanStd>,
}

fn best_valid(log: &[EpochMetrics]) -> Option<f64> {
    log.iter()
        .filter(|m| m.stage == Stage::Supervised)
        .filter_map(|m| m.valid_acc)
        .fold(None, |best, v| Some(best.map_or(v, |b: f64| b.max(v))))
}

pub fn run_dir(out: &Path, subject: &str, seed: u64) -> PathBuf {
    out.join(subject).join(format!("seed-{seed}"))
}

pub fn cmd_train(cfg: &SwpcConfig, out: &Path) -> Result<TrainSummary> {
    let mut runs = Vec::new();
    for subject in &cfg.data.subjects {
        let train = training_recordings(cfg, subject)?;
        let test_path = cfg.data.path(subject, &cfg.data.test_session);
        let test = if test_path.exists() {
            Some(read_recording(&test_path)?)
        } else {
            warn!("{} missing; skipping test scores for {subject}", test_path.display());
            None
        };
        for &seed in &cfg.seeds {
            let pcfg = cfg.pipeline_for(seed);
            let data = prepare_training(&train, &pcfg)?;
            if data.skipped_rest > 0 {
                warn!("{subject}: {} events lack a clean rest window", data.skipped_rest);
            }
            info!(
                "{subject} seed {seed}: {} MI trials, {} binary trials",
                data.multiclass.len(),
                data.binary.len()
            );
            let trained = train_swpc(&data, &pcfg)?;
            let dir = run_dir(out, subject, seed);
            create_dir(&dir)?;
            checkpoint::save(&trained.prescreen, Role::Prescreen, data.fs, dir.join(Role::Prescreen.file_name()))?;
            checkpoint::save(&trained.classifier, Role::Classifier, data.fs, dir.join(Role::Classifier.file_name()))?;
            let lines = trained
                .prescreen_log
                .iter()
                .map(|m| (Role::Prescreen, m))
                .chain(trained.classifier_log.iter().map(|m| (Role::Classifier, m)))
                .map(|(module, m)| MetricsLine {
                    module,
                    metrics: m.clone(),
                });
            write_jsonl(&dir.join("metrics.jsonl"), lines)?;

            let scores = match &test {
                Some(t) => {
                    let ev = evaluate_recording(&mut trained.clone(), t, &pcfg)?;
                    write_json(&dir.join("report.json"), &ev.report)?;
                    info!("{subject} seed {seed}: test ACC {:.3}", ev.report.acc);
                    Some(TestScores::from(&ev.report))
                }
                None => None,
            };
            runs.push(RunSummary {
                subject: subject.clone(),
                seed,
                prescreen_valid_acc: best_valid(&trained.prescreen_log),
                classifier_valid_acc: best_valid(&trained.classifier_log),
                test: scores,
            });
        }
    }
    let summary = summarize(runs);
    if let Some(acc) = summary.acc {
        info!("ACC over {} subject(s): {acc}", acc.n);
    }
    create_dir(out)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn summarize(runs: Vec<RunSummary>) -> TrainSummary {
    let mut by_subject: BTreeMap<&str, Vec<TestScores>> = BTreeMap::new();
    for r in &runs {
        if let Some(t) = r.test {
            by_subject.entry(&r.subject).or_default().push(t);
        }
    }
    let subjects: Vec<SubjectSummary> = by_subject
        .into_iter()
        .map(|(s, v)| {
            let stat = |f: fn(&TestScores) -> f64| MeanStd::of(&v.iter().map(f).collect::<Vec<_>>());
            SubjectSummary {
                subject: s.to_string(),
                acc: stat(|t| t.acc),
                prescreen_acc: stat(|t| t.prescreen_acc),
                false_alarm_rate: stat(|t| t.false_alarm_rate),
            }
        })
        .collect();
    let acc = (!subjects.is_empty()).then(|| MeanStd::of(&subjects.iter().map(|s| s.acc.mean).collect::<Vec<_>>()));
    TrainSummary { runs, subjects, acc }
}

fn load_module(dir: &Path, role: Role) -> Result<(ModelBundle, CheckpointMeta)> {
    let path = dir.join(role.file_name());
    let (bundle, meta) = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    ensure!(meta.role == role, "{} holds a {:?} module", path.display(), meta.role);
    Ok((bundle, meta))
}

fn check_shape(meta: &CheckpointMeta, rec: &ContinuousRecording, window_len: usize) -> Result<()> {
    let net = &meta.net;
    if net.n_channels != rec.n_channels() {
        bail!(
            "{:?} checkpoint expects {} channels, recording has {}",
            meta.role,
            net.n_channels,
            rec.n_channels()
        );
    }
    if meta.fs != rec.fs {
        bail!("{:?} checkpoint was trained at {} Hz, recording is {} Hz", meta.role, meta.fs, rec.fs);
    }
    if net.input_len != window_len {
        bail!(
            "{:?} checkpoint takes {}-sample windows, config gives {window_len}",
            meta.role,
            net.input_len
        );
    }
    Ok(())
}

pub fn cmd_decode(cfg: &SwpcConfig, checkpoints: &Path, recording: &Path, out: &Path) -> Result<()> {
    let (prescreen, pmeta) = load_module(checkpoints, Role::Prescreen)?;
    let (classifier, cmeta) = load_module(checkpoints, Role::Classifier)?;
    let mut rec = read_recording(recording).with_context(|| format!("loading {}", recording.display()))?;
    // The decoder never sees the truth.
    rec.events.clear();
    let pcfg = cfg.pipeline_for(cfg.seeds[0]);
    let wl = pcfg.stream.window_len(rec.fs);
    check_shape(&pmeta, &rec, wl)?;
    check_shape(&cmeta, &rec, wl)?;

    let mut trained = TrainedSwpc {
        prescreen,
        classifier,
        prescreen_log: Vec::new(),
        classifier_log: Vec::new(),
    };
    let clean = pcfg.preprocessing.apply(&rec)?;
    create_dir(out)?;
    if pcfg.offline_adapt {
        let report = adapt_offline(&mut trained, &clean, &pcfg)?;
        for w in &report.warnings {
            warn!("{w}");
        }
        write_json(&out.join("adaptation.json"), &report)?;
    }
    let records = decode_stream(
        &trained.prescreen,
        &trained.classifier,
        &clean,
        &pcfg.stream,
        pcfg.ablation.averaging,
    )?;
    let gated = records.iter().filter(|r| r.is_gated()).count();
    info!("{} windows, {gated} gated in", records.len());
    write_jsonl(&out.join("decisions.jsonl"), &records)
}

pub fn cmd_eval(cfg: &SwpcConfig, decisions: &Path, truth: &Path, out: &Path) -> Result<ScoreReport> {
    let records: Vec<DecisionRecord> = read_jsonl(decisions)?;
    if records.is_empty() {
        bail!("decision log {} is empty", decisions.display());
    }
    let truth = if truth.extension().is_some_and(|e| e == "swpc") {
        TruthSidecar::of(&read_recording(truth)?)
    } else {
        read_json(truth)?
    };
    let stream = &cfg.pipeline.stream;
    let report = score_stream(&records, &truth.events, stream.window_len(truth.fs), stream.tau)?;
    info!(
        "ACC {:.3} ({}/{}), prescreen {:.3}, false alarms {:.3}",
        report.acc, report.n_correct, report.n_events, report.prescreen_acc, report.false_alarm_rate
    );
    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

fn test_recording(cfg: &SwpcConfig, subject: &str) -> Result<ContinuousRecording> {
    load_session(cfg, subject, &cfg.data.test_session)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    #[serde(rename = "L_w")]
    pub lw_seconds: f64,
    pub tau: f64,
    pub acc: f64,
    pub prescreen_acc: f64,
    pub false_alarm_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SweepRunRow {
    subject: String,
    seed: u64,
    #[serde(rename = "L_w")]
    lw_seconds: f64,
    tau: f64,
    acc: f64,
    prescreen_acc: f64,
    false_alarm_rate: f64,
}

/// `sweep.csv` holds the mean over subjects and seeds per grid point;
/// `sweep_runs.csv` every run.
pub fn cmd_sweep(cfg: &SwpcConfig, out: &Path) -> Result<()> {
    let mut runs = Vec::new();
    for subject in &cfg.data.subjects {
        let train = training_recordings(cfg, subject)?;
        let test = test_recording(cfg, subject)?;
        for &seed in &cfg.seeds {
            let rows = run_sweep(&train, &test, &cfg.pipeline_for(seed), &cfg.sweep.lw_seconds, &cfg.sweep.tau)?;
            info!("{subject} seed {seed}: {} grid points", rows.len());
            runs.extend(rows.into_iter().map(|r| SweepRunRow {
                subject: subject.clone(),
                seed,
                lw_seconds: r.lw_seconds,
                tau: r.tau,
                acc: r.acc,
                prescreen_acc: r.prescreen_acc,
                false_alarm_rate: r.false_alarm_rate,
            }));
        }
    }
    let n_points = cfg.sweep.lw_seconds.len() * cfg.sweep.tau.len();
    let n_runs = runs.len() / n_points;
    let mean = |v: &[&SweepRunRow], f: fn(&SweepRunRow) -> f64| v.iter().map(|r| f(r)).sum::<f64>() / v.len() as f64;
    let table: Vec<SweepCsvRow> = (0..n_points)
        .map(|p| {
            // Every run emits the grid in the same order.
            let at: Vec<&SweepRunRow> = (0..n_runs).map(|k| &runs[k * n_points + p]).collect();
            SweepCsvRow {
                lw_seconds: at[0].lw_seconds,
                tau: at[0].tau,
                acc: mean(&at, |r| r.acc),
                prescreen_acc: mean(&at, |r| r.prescreen_acc),
                false_alarm_rate: mean(&at, |r| r.false_alarm_rate),
            }
        })
        .collect();
    create_dir(out)?;
    write_csv(&out.join("sweep_runs.csv"), &runs)?;
    write_csv(&out.join("sweep.csv"), &table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCsvRow {
    pub ssl_prescreen: bool,
    pub ssl_classification: bool,
    pub averaging: bool,
    pub acc: f64,
    pub acc_std: f64,
    pub prescreen_acc: f64,
    pub false_alarm_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AblationRunRow {
    subject: String,
    seed: u64,
    ssl_prescreen: bool,
    ssl_classification: bool,
    averaging: bool,
    acc: f64,
    prescreen_acc: f64,
    false_alarm_rate: f64,
}

/// `ablation.csv` holds the eight switch rows averaged over subjects and
/// seeds; `ablation_runs.csv` every run.
pub fn cmd_ablate(cfg: &SwpcConfig, out: &Path) -> Result<()> {
    let mut runs: Vec<AblationRunRow> = Vec::new();
    for subject in &cfg.data.subjects {
        let train = training_recordings(cfg, subject)?;
        let test = test_recording(cfg, subject)?;
        for &seed in &cfg.seeds {
            let pcfg = cfg.pipeline_for(seed);
            let data = prepare_training(&train, &pcfg)?;
            for r in run_ablation(&data, &test, &pcfg)? {
                runs.push(AblationRunRow {
                    subject: subject.clone(),
                    seed,
                    ssl_prescreen: r.ablation.ssl_prescreen,
                    ssl_classification: r.ablation.ssl_classification,
                    averaging: r.ablation.averaging,
                    acc: r.acc,
                    prescreen_acc: r.prescreen_acc,
                    false_alarm_rate: r.false_alarm_rate,
                });
            }
            info!("{subject} seed {seed}: ablation done");
        }
    }
    let table: Vec<AblationCsvRow> = swpc_core::pipeline::Ablation::grid()
        .into_iter()
        .map(|ab| {
            let rows: Vec<&AblationRunRow> = runs
                .iter()
                .filter(|r| (r.ssl_prescreen, r.ssl_classification, r.averaging) == (ab.ssl_prescreen, ab.ssl_classification, ab.averaging))
                .collect();
            let stat = |f: fn(&AblationRunRow) -> f64| MeanStd::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let acc = stat(|r| r.acc);
            info!(
                "ssl_prescreen={} ssl_classification={} averaging={}: ACC {acc}",
                ab.ssl_prescreen, ab.ssl_classification, ab.averaging
            );
            AblationCsvRow {
                ssl_prescreen: ab.ssl_prescreen,
                ssl_classification: ab.ssl_classification,
                averaging: ab.averaging,
                acc: acc.mean,
                acc_std: acc.std,
                prescreen_acc: stat(|r| r.prescreen_acc).mean,
                false_alarm_rate: stat(|r| r.false_alarm_rate).mean,
            }
        })
        .collect();
    create_dir(out)?;
    write_csv(&out.join("ablation_runs.csv"), &runs)?;
    write_csv(&out.join("ablation.csv"), &table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn seeds_flag_replaces_the_list() {
        let cli = Cli::parse_from(["swpc", "train", "--out", "x", "--seeds", "3,4", "--set", "pipeline.stream.tau=0.3"]);
        let Command::Train(c) = cli.command else { panic!() };
        let cfg = c.config().unwrap();
        assert_eq!(cfg.seeds, [3, 4]);
        assert_eq!(cfg.pipeline.stream.tau, 0.3);
    }

    #[test]
    fn session_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for s in 0..20 {
            for j in 0..2 {
                assert!(seen.insert(session_seed(5, s, j)));
            }
        }
    }

    #[test]
    fn summary_averages_subject_means() {
        let run = |subject: &str, seed, acc| RunSummary {
            subject: subject.into(),
            seed,
            prescreen_valid_acc: None,
            classifier_valid_acc: None,
            test: Some(TestScores {
                acc,
                prescreen_acc: acc,
                false_alarm_rate: 0.0,
            }),
        };
        let s = summarize(vec![run("A", 0, 0.5), run("A", 1, 0.7), run("B", 0, 0.9)]);
        assert_eq!(s.subjects.len(), 2);
        assert!((s.subjects[0].acc.mean - 0.6).abs() < 1e-12);
        let acc = s.acc.unwrap();
        assert!((acc.mean - 0.75).abs() < 1e-12);
        assert_eq!(acc.n, 2);
    }
}
