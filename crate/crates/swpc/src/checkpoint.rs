//! Model checkpoints: a u32 little-endian byte count, that many bytes of UTF-8
//! JSON metadata, then every tensor as little-endian f64 in declaration order
//! (θ parameters, θ running statistics, ψ weight, ψ bias, and the same θ
//! layout again for φ when present).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use swpc_core::autodiff::Tensor;
use swpc_core::model::{FeatureExtractor, ModelBundle, NetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prescreen,
    Classifier,
}

impl Role {
    pub fn file_name(self) -> &'static str {
        match self {
            Role::Prescreen => "prescreen.ckpt",
            Role::Classifier => "classifier.ckpt",
        }
    }
}

/// JSON header of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub role: Role,
    pub net: NetConfig,
    /// Sampling rate the network was trained at.
    pub fs: f64,
    /// Whether an EMA target extractor follows ψ.
    pub has_target: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("checkpoint has {0} unexpected trailing bytes")]
    Trailing(usize),

    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),

    #[error("checkpoint config rejected: {0}")]
    Config(#[from] swpc_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn tensors(bundle: &ModelBundle) -> Vec<&Tensor> {
    let mut out: Vec<&Tensor> = Vec::new();
    out.extend(bundle.theta.params());
    out.extend(bundle.theta.buffers());
    out.push(&bundle.psi.weight);
    out.push(&bundle.psi.bias);
    if let Some(phi) = &bundle.phi {
        out.extend(phi.params());
        out.extend(phi.buffers());
    }
    out
}

fn fill_extractor(ext: &mut FeatureExtractor, values: &mut impl Iterator<Item = f64>) {
    for t in ext.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = values.next().expect("length checked"));
    }
    for t in ext.buffers_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = values.next().expect("length checked"));
    }
}

/// Overwrites every tensor, in the order of [`tensors`].
fn fill(bundle: &mut ModelBundle, values: &mut impl Iterator<Item = f64>) {
    fill_extractor(&mut bundle.theta, values);
    for t in [&mut bundle.psi.weight, &mut bundle.psi.bias] {
        t.data_mut().iter_mut().for_each(|v| *v = values.next().expect("length checked"));
    }
    if let Some(phi) = &mut bundle.phi {
        fill_extractor(phi, values);
    }
}

pub fn encode(bundle: &ModelBundle, role: Role, fs: f64) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        role,
        net: bundle.config.clone(),
        fs,
        has_target: bundle.phi.is_some(),
    };
    let json = serde_json::to_vec(&meta)?;
    let ts = tensors(bundle);
    let n: usize = ts.iter().map(|t| t.data().len()).sum();
    let mut out = Vec::with_capacity(4 + json.len() + 8 * n);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in ts {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ModelBundle, CheckpointMeta)> {
    let short = |needed| CheckpointError::Truncated {
        needed,
        available: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(short(4));
    }
    let json_len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let body = 4 + json_len;
    if bytes.len() < body {
        return Err(short(body));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[4..body])?;
    // Initialization fixes every tensor shape; the values are overwritten.
    let mut bundle = ModelBundle::init(meta.net.clone(), 0)?;
    if meta.has_target {
        bundle.phi = Some(bundle.theta.clone());
    }
    let n: usize = tensors(&bundle).iter().map(|t| t.data().len()).sum();
    let total = body + 8 * n;
    if bytes.len() < total {
        return Err(short(total));
    }
    if bytes.len() > total {
        return Err(CheckpointError::Trailing(bytes.len() - total));
    }
    let mut values = bytes[body..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    fill(&mut bundle, &mut values);
    Ok((bundle, meta))
}

pub fn save(bundle: &ModelBundle, role: Role, fs: f64, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(bundle, role, fs)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelBundle, CheckpointMeta)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> ModelBundle {
        ModelBundle::init(NetConfig::eegnet_lite(3, 64.0, 64, 2), 7).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut b = bundle();
        b.theta.bn2.running_var.data_mut()[1] = 0.1 + 0.2;
        let bytes = encode(&b, Role::Prescreen, 64.0).unwrap();
        let (back, meta) = decode(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(meta.role, Role::Prescreen);
        assert_eq!(meta.fs, 64.0);
    }

    #[test]
    fn target_extractor_survives() {
        let mut b = bundle();
        let mut phi = b.theta.clone();
        phi.temporal.data_mut()[0] = 42.0;
        b.phi = Some(phi);
        let (back, _) = decode(&encode(&b, Role::Classifier, 64.0).unwrap()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn length_checks() {
        let bytes = encode(&bundle(), Role::Prescreen, 64.0).unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 8]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(CheckpointError::Trailing(1))));
        assert!(matches!(decode(&bytes[..2]), Err(CheckpointError::Truncated { .. })));
    }
}
