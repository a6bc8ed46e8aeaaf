//! The experiment config: one JSON document, every field optional, with
//! `key.path=value` overrides from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use swpc_core::datagen::SynthSpec;
use swpc_core::pipeline::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Train on a subject's training session, test on its test session.
    WithinSubject,
    /// Train on the training sessions of every other subject.
    CrossSubject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub dataset: String,
    pub subjects: Vec<String>,
    pub train_session: String,
    pub test_session: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            dataset: "synthetic".into(),
            subjects: vec!["S01".into()],
            train_session: "session1".into(),
            test_session: "session2".into(),
        }
    }
}

impl DataConfig {
    pub fn path(&self, subject: &str, session: &str) -> PathBuf {
        crate::container::recording_path(&self.root, &self.dataset, subject, session)
    }
}

/// Window lengths (seconds) and thresholds scored by `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub lw_seconds: Vec<f64>,
    pub tau: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            lw_seconds: vec![0.5, 1.0, 1.5, 2.0],
            tau: (1..=9).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwpcConfig {
    pub mode: Mode,
    pub data: DataConfig,
    /// One full run per seed; summaries average over them.
    pub seeds: Vec<u64>,
    pub pipeline: PipelineConfig,
    pub synth: SynthSpec,
    pub sweep: SweepGrid,
}

impl Default for SwpcConfig {
    fn default() -> Self {
        Self {
            mode: Mode::WithinSubject,
            data: DataConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            pipeline: PipelineConfig::default(),
            synth: SynthSpec::default(),
            sweep: SweepGrid::default(),
        }
    }
}

impl SwpcConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies `a.b.c=value` overrides. The value is parsed as JSON and kept
    /// as a string when that fails, so `data.dataset=MI4` works unquoted.
    pub fn with_overrides(self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self);
        }
        let mut doc = serde_json::to_value(&self)?;
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .with_context(|| format!("override {set:?} is not key=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut doc;
            for part in key.split('.') {
                node = match node {
                    Value::Object(map) => map
                        .get_mut(part)
                        .with_context(|| format!("unknown config key {key:?}"))?,
                    _ => bail!("config key {key:?} descends into a non-object"),
                };
            }
            *node = value;
        }
        serde_json::from_value(doc).context("applying overrides")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("config lists no seeds");
        }
        if self.data.subjects.is_empty() {
            bail!("config lists no subjects");
        }
        if self.mode == Mode::CrossSubject && self.data.subjects.len() < 2 {
            bail!("cross_subject mode needs at least two subjects");
        }
        self.pipeline.validate()?;
        Ok(())
    }

    /// The pipeline config of one seeded run.
    pub fn pipeline_for(&self, seed: u64) -> PipelineConfig {
        PipelineConfig {
            seed,
            ..self.pipeline.clone()
        }
    }

    /// Subjects whose training sessions feed the model tested on `subject`.
    pub fn training_subjects<'a>(&'a self, subject: &'a str) -> Vec<&'a str> {
        match self.mode {
            Mode::WithinSubject => vec![subject],
            Mode::CrossSubject => self
                .data
                .subjects
                .iter()
                .map(String::as_str)
                .filter(|s| *s != subject)
                .collect(),
        }
    }
}
