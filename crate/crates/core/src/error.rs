use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid recording: {0}")]
    InvalidRecording(String),

    #[error("event {index} lasts {duration} samples, shorter than the trial length {trial_len}")]
    EventTooShort {
        index: usize,
        duration: usize,
        trial_len: usize,
    },

    #[error("no event has {trial_len} clean rest samples before its onset")]
    NoRestTrials { trial_len: usize },

    #[error("invalid filter design: {0}")]
    InvalidFilter(String),

    #[error("designed filter is unstable (pole magnitude {0})")]
    UnstableFilter(f64),

    #[error("signal of {len} samples is too short for zero-phase filtering (need more than {min})")]
    SignalTooShort { len: usize, min: usize },

    #[error("window of {window} samples does not fit a stream of {len} samples")]
    WindowTooLong { window: usize, len: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("zero-norm row {row} in l2 normalization")]
    ZeroNorm { row: usize },

    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),

    #[error("batch norm in training mode needs at least 2 samples")]
    BatchTooSmall,

    #[error("invalid network config: {0}")]
    InvalidConfig(String),

    #[error("invalid augmentation parameters: {0}")]
    InvalidAugment(String),

    #[error("class {label} has only {count} trial(s); at least 2 are needed to stratify")]
    ClassTooSmall { label: u16, count: usize },

    #[error("trial set is missing class {0}")]
    MissingClass(u16),

    #[error("label {label} outside the head's {n_classes} classes")]
    LabelOutOfRange { label: u16, n_classes: usize },

    #[error("non-finite loss at epoch {epoch}: {loss}")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid synthetic spec: {0}")]
    InvalidSynth(String),

    #[error("invalid stream config: {0}")]
    InvalidStream(String),
}
