//! EEGNet-style compact convolutional feature extractor and linear softmax
//! head, shared by the prescreening and classification modules.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, BatchNormMode, BatchStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::recording::ChannelMatrix;

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_channels: usize,
    pub input_len: usize,
    pub f1: usize,
    pub depth: usize,
    pub f2: usize,
    pub temporal_kernel: usize,
    pub separable_kernel: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub dropout: f64,
    pub n_classes: usize,
}

impl NetConfig {
    /// F1 = 8, D = 2, F2 = 16 with a half-second temporal kernel clipped to
    /// half the input.
    pub fn eegnet_lite(n_channels: usize, fs: f64, input_len: usize, n_classes: usize) -> Self {
        let half_second = libm::round(fs / 2.0) as usize;
        Self {
            n_channels,
            input_len,
            f1: 8,
            depth: 2,
            f2: 16,
            temporal_kernel: half_second.min(input_len / 2).max(1),
            separable_kernel: 16,
            pool1: 4,
            pool2: 8,
            dropout: 0.25,
            n_classes,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.f2 * (self.input_len / self.pool1 / self.pool2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if self.f2 != self.f1 * self.depth {
            return bad(format!("F2 = {} must equal F1 x D = {}", self.f2, self.f1 * self.depth));
        }
        if self.n_channels == 0 || self.f1 == 0 || self.depth == 0 {
            return bad("channel and filter counts must be positive".into());
        }
        if self.pool1 == 0 || self.pool2 == 0 || self.input_len < self.pool1 * self.pool2 {
            return bad(format!(
                "input length {} shorter than the combined pooling {}",
                self.input_len,
                self.pool1 * self.pool2
            ));
        }
        if self.temporal_kernel == 0 || self.separable_kernel == 0 {
            return bad("kernel lengths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.n_classes < 2 {
            return bad(format!("{} classes; at least 2 needed", self.n_classes));
        }
        Ok(())
    }
}

/// Learnable affine parameters and running statistics of one batch norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormParams {
    fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::full(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::full(&[c], 1.0),
        }
    }

    fn update_running(&mut self, stats: &BatchStats, momentum: f64) {
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

/// How a forward pass treats batch norm and dropout.
pub enum Mode<'r> {
    /// Running statistics, no dropout.
    Eval,
    /// Batch statistics; dropout drawn from the generator when one is given.
    Train(Option<&'r mut dyn RngCore>),
}

/// Feature extractor parameters (θ, and its EMA copy φ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub temporal: Tensor,
    pub bn1: BatchNormParams,
    pub spatial: Tensor,
    pub bn2: BatchNormParams,
    pub separable_depthwise: Tensor,
    pub separable_pointwise: Tensor,
    pub bn3: BatchNormParams,
}

/// Handles of a feature-extractor pass recorded on a tape.
pub struct FeatureForward {
    pub embedding: Var,
    /// Parameter leaves in declaration order.
    pub params: [Var; FeatureExtractor::N_PARAMS],
    /// Batch statistics of the three batch norms (training mode only).
    pub stats: Vec<BatchStats>,
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("shape product")
}

impl FeatureExtractor {
    pub const N_PARAMS: usize = 10;

    fn init(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let g = cfg.f1 * cfg.depth;
        let (k, c, ks) = (cfg.temporal_kernel, cfg.n_channels, cfg.separable_kernel);
        Self {
            temporal: glorot(rng, &[cfg.f1, k], k, cfg.f1 * k),
            bn1: BatchNormParams::new(cfg.f1),
            spatial: glorot(rng, &[g, c], c, cfg.depth * c),
            bn2: BatchNormParams::new(g),
            separable_depthwise: glorot(rng, &[g, ks], ks, ks),
            separable_pointwise: glorot(rng, &[cfg.f2, g], g, cfg.f2),
            bn3: BatchNormParams::new(cfg.f2),
        }
    }

    /// Learnable tensors in declaration order.
    pub fn params(&self) -> [&Tensor; Self::N_PARAMS] {
        [
            &self.temporal,
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.spatial,
            &self.bn2.gamma,
            &self.bn2.beta,
            &self.separable_depthwise,
            &self.separable_pointwise,
            &self.bn3.gamma,
            &self.bn3.beta,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; Self::N_PARAMS] {
        [
            &mut self.temporal,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.spatial,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.separable_depthwise,
            &mut self.separable_pointwise,
            &mut self.bn3.gamma,
            &mut self.bn3.beta,
        ]
    }

    /// Running statistics in declaration order (mean, var per batch norm).
    pub fn buffers(&self) -> [&Tensor; 6] {
        [
            &self.bn1.running_mean,
            &self.bn1.running_var,
            &self.bn2.running_mean,
            &self.bn2.running_var,
            &self.bn3.running_mean,
            &self.bn3.running_var,
        ]
    }

    pub fn buffers_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.bn1.running_mean,
            &mut self.bn1.running_var,
            &mut self.bn2.running_mean,
            &mut self.bn2.running_var,
            &mut self.bn3.running_mean,
            &mut self.bn3.running_var,
        ]
    }

    /// Records the extractor on `tape`. Parameters are leaves that require a
    /// gradient iff `track_grad`.
    pub fn forward(
        &self,
        cfg: &NetConfig,
        tape: &mut Tape,
        input: Var,
        mode: Mode<'_>,
        track_grad: bool,
    ) -> Result<FeatureForward> {
        let shape = tape.value(input).shape();
        if shape.len() != 3 || shape[1] != cfg.n_channels || shape[2] != cfg.input_len {
            return Err(Error::Shape {
                op: "feature_extract",
                detail: format!(
                    "input {shape:?}, expected [B, {}, {}]",
                    cfg.n_channels, cfg.input_len
                ),
            });
        }
        let params: [Var; Self::N_PARAMS] = self.params().map(|p| {
            let mut t = p.clone();
            t.requires_grad = track_grad;
            tape.leaf(t)
        });
        let [w_t, g1, b1, w_s, g2, b2, w_d, w_p, g3, b3] = params;
        let (train, mut rng) = match mode {
            Mode::Eval => (false, None),
            Mode::Train(rng) => (true, rng),
        };
        fn bn_mode(bn: &BatchNormParams, train: bool) -> BatchNormMode<'_> {
            if train {
                BatchNormMode::Train
            } else {
                BatchNormMode::Eval {
                    mean: bn.running_mean.data(),
                    var: bn.running_var.data(),
                }
            }
        }
        let mut stats = Vec::new();

        let h = tape.conv_temporal(input, w_t)?;
        let (h, s) = tape.batch_norm(h, g1, b1, bn_mode(&self.bn1, train))?;
        stats.extend(s);
        let h = tape.conv_depthwise_spatial(h, w_s)?;
        let (h, s) = tape.batch_norm(h, g2, b2, bn_mode(&self.bn2, train))?;
        stats.extend(s);
        let h = tape.elu(h);
        let h = tape.avg_pool(h, cfg.pool1)?;
        let h = match rng.as_deref_mut() {
            Some(r) => tape.dropout(h, cfg.dropout, r)?,
            None => h,
        };
        let h = tape.conv_depthwise_temporal(h, w_d)?;
        let h = tape.conv_pointwise(h, w_p)?;
        let (h, s) = tape.batch_norm(h, g3, b3, bn_mode(&self.bn3, train))?;
        stats.extend(s);
        let h = tape.elu(h);
        let h = tape.avg_pool(h, cfg.pool2)?;
        let h = match rng {
            Some(r) => tape.dropout(h, cfg.dropout, r)?,
            None => h,
        };
        let embedding = tape.flatten(h)?;
        Ok(FeatureForward {
            embedding,
            params,
            stats,
        })
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (bn, s) in [&mut self.bn1, &mut self.bn2, &mut self.bn3].into_iter().zip(stats) {
            bn.update_running(s, BN_MOMENTUM);
        }
    }

    /// Eval-mode embeddings of a `[B, C, T]` batch.
    pub fn embed(&self, cfg: &NetConfig, batch: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch);
        let out = self.forward(cfg, &mut tape, x, Mode::Eval, false)?;
        Ok(tape.value(out.embedding).clone())
    }

    /// `self ← λ·self + (1 − λ)·online` over the learnable parameters.
    pub fn ema_update(&mut self, online: &FeatureExtractor, lambda: f64) {
        for (target, src) in self.params_mut().into_iter().zip(online.params()) {
            for (t, s) in target.data_mut().iter_mut().zip(src.data()) {
                *t = lambda * *t + (1.0 - lambda) * s;
            }
        }
    }
}

/// Linear classifier head (ψ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn forward(&self, tape: &mut Tape, embedding: Var, track_grad: bool) -> Result<(Var, [Var; 2])> {
        let mut w = self.weight.clone();
        let mut b = self.bias.clone();
        w.requires_grad = track_grad;
        b.requires_grad = track_grad;
        let (w, b) = (tape.leaf(w), tape.leaf(b));
        Ok((tape.dense(embedding, w, b)?, [w, b]))
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    /// Class probabilities of `[B, E]` embeddings.
    pub fn classify(&self, embeddings: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let e = tape.leaf(embeddings.clone());
        let (logits, _) = self.forward(&mut tape, e, false)?;
        let p = tape.softmax(logits)?;
        Ok(tape.value(p).clone())
    }
}

/// θ, ψ and (during self-supervised refinement) φ of one module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: NetConfig,
    pub theta: FeatureExtractor,
    pub psi: Head,
    pub phi: Option<FeatureExtractor>,
}

impl ModelBundle {
    /// Glorot-uniform weights, zero biases, unit batch-norm scales.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = FeatureExtractor::init(&config, &mut rng);
        let e = config.embedding_dim();
        let k = config.n_classes;
        let psi = Head {
            weight: glorot(&mut rng, &[e, k], e, k),
            bias: Tensor::zeros(&[k]),
        };
        Ok(Self {
            config,
            theta,
            psi,
            phi: None,
        })
    }

    /// Eval-mode class probabilities, `[B, K]`, for a `[B, C, T]` batch.
    pub fn predict_proba(&self, batch: Tensor) -> Result<Tensor> {
        let emb = self.theta.embed(&self.config, batch)?;
        self.psi.classify(&emb)
    }

    /// Same as [`Self::predict_proba`] but for matrices, in chunks of `chunk`.
    pub fn predict_windows(&self, windows: &[ChannelMatrix], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let k = self.config.n_classes;
        let mut out = Vec::with_capacity(windows.len());
        for part in windows.chunks(chunk.max(1)) {
            let refs: Vec<&ChannelMatrix> = part.iter().collect();
            let p = self.predict_proba(batch_tensor(&refs)?)?;
            out.extend(p.data().chunks_exact(k).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

/// Stacks equally shaped matrices into a `[B, C, T]` tensor.
pub fn batch_tensor(items: &[&ChannelMatrix]) -> Result<Tensor> {
    let first = items.first().ok_or(Error::Empty("batch"))?;
    let (c, t) = (first.n_channels(), first.n_samples());
    let mut data = Vec::with_capacity(items.len() * c * t);
    for m in items {
        if m.n_channels() != c || m.n_samples() != t {
            return Err(Error::Shape {
                op: "batch_tensor",
                detail: format!("{}x{} vs {c}x{t}", m.n_channels(), m.n_samples()),
            });
        }
        data.extend_from_slice(m.as_slice());
    }
    Tensor::new(&[items.len(), c, t], data)
}

/// Probabilities from logits, row-wise.
pub fn probabilities(logits: &Tensor) -> Vec<f64> {
    softmax_rows(logits.data(), logits.shape()[1])
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NetConfig {
        NetConfig::eegnet_lite(22, 250.0, 250, 2)
    }

    #[test]
    fn default_embedding_dim() {
        let c = cfg();
        assert_eq!(c.temporal_kernel, 125);
        assert_eq!(c.embedding_dim(), 112);
    }

    #[test]
    fn kernel_is_clipped_for_short_windows() {
        let c = NetConfig::eegnet_lite(4, 128.0, 64, 2);
        assert_eq!(c.temporal_kernel, 32);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelBundle::init(cfg(), 7).unwrap();
        let b = ModelBundle::init(cfg(), 7).unwrap();
        let c = ModelBundle::init(cfg(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.theta.temporal, c.theta.temporal);
        assert!(a.psi.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = cfg();
        c.f2 = 12;
        assert!(matches!(ModelBundle::init(c, 0), Err(Error::InvalidConfig(_))));
        let mut c = cfg();
        c.input_len = 16;
        assert!(ModelBundle::init(c, 0).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let head = Head {
            weight: Tensor::zeros(&[5, 3]),
            bias: Tensor::zeros(&[3]),
        };
        let e = Tensor::new(&[2, 5], (0..10).map(|v| v as f64).collect()).unwrap();
        let p = head.classify(&e).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zeros_batch_embeds_finitely() {
        let c = NetConfig::eegnet_lite(4, 128.0, 128, 2);
        let m = ModelBundle::init(c.clone(), 1).unwrap();
        let emb = m.theta.embed(&c, Tensor::zeros(&[3, 4, 128])).unwrap();
        assert_eq!(emb.shape(), &[3, c.embedding_dim()]);
        assert!(emb.is_finite());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }
}
