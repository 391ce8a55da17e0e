//! The five-stage separation network.
//!
//! An encoder lifts the mixture spectrogram into a latent map, a
//! separator models it with dual-path blocks, a splitter expands it into
//! per-speaker features, a reconstructor refines those with triple-path
//! blocks, and a decoder maps each speaker back to a complex spectrum and
//! (via inverse STFT) a waveform.
//!
//! Separator and reconstructor are applied a runtime-adjustable number of
//! times. With parameter sharing enabled (the default) the same block
//! stack is reused for every iteration, so depth can be changed at
//! inference without touching the weights.

mod blocks;
mod stages;

pub use blocks::PathAxis;
pub use stages::{decode, encode, reconstruct, separate, split};
pub(crate) use stages::{forward_on_tape, TapeRunView};

use ndarray::{Array3, Array4, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::{Arr, Tape, Var};
use crate::dsp::{DftBasis, StftConfig, Waveform};
use crate::error::{Error, Result};

/// Latent map of shape `[D, T, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor(pub Array3<f64>);

/// Per-speaker latent maps of shape `[J, D, T, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerFeatures(pub Array4<f64>);

/// Splitter head variant. `Conv2dSwiglu` is the gated module; `Conv2d`
/// is the lighter plain-convolution variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitterKind {
    #[serde(rename = "conv2d_swiglu")]
    Conv2dSwiglu,
    #[serde(rename = "conv2d")]
    Conv2d,
}

/// Hyperparameters of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Latent channel count D.
    pub d: usize,
    /// Number of speakers J.
    pub j: usize,
    /// Blocks per separator pass.
    pub m_sep: usize,
    /// Separator passes used during training.
    pub n_sep: usize,
    /// Blocks per reconstructor pass.
    pub m_re: usize,
    /// Reconstructor passes used during training.
    pub n_re: usize,
    pub heads: usize,
    /// Hidden width of the gated-conv feed-forward as a multiple of `d`.
    pub ffn_expansion: f64,
    /// Kernel length of the gated-conv feed-forward along time/frequency.
    pub conv_kernel: usize,
    pub splitter_kind: SplitterKind,
    pub share_separator: bool,
    pub share_reconstructor: bool,
    pub stft: StftConfig,
    /// Adds the pass input back onto each separator/reconstructor pass
    /// output.
    pub iteration_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::medium(2)
    }
}

impl ModelConfig {
    /// Base-model-matched medium dimensions: the `sep1x2-re1x3` layout.
    pub fn medium(j: usize) -> Self {
        Self {
            d: 128,
            j,
            m_sep: 1,
            n_sep: 2,
            m_re: 1,
            n_re: 3,
            heads: 4,
            ffn_expansion: 3.0,
            conv_kernel: 4,
            splitter_kind: SplitterKind::Conv2dSwiglu,
            share_separator: true,
            share_reconstructor: true,
            stft: StftConfig::default(),
            iteration_residual: true,
        }
    }

    /// A desk-scale configuration small enough to train on a CPU.
    pub fn tiny(j: usize) -> Self {
        Self {
            d: 12,
            j,
            m_sep: 1,
            n_sep: 1,
            m_re: 1,
            n_re: 2,
            heads: 2,
            ffn_expansion: 2.0,
            conv_kernel: 4,
            splitter_kind: SplitterKind::Conv2dSwiglu,
            share_separator: true,
            share_reconstructor: true,
            stft: StftConfig::default(),
            iteration_residual: true,
        }
    }

    /// Feed-forward hidden width.
    pub fn hidden(&self) -> usize {
        ((self.d as f64) * self.ffn_expansion).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        if self.j == 0 {
            return Err(Error::Config("j must be >= 1".into()));
        }
        if self.m_sep == 0 || self.n_sep == 0 || self.m_re == 0 || self.n_re == 0 {
            return Err(Error::Config(
                "m_sep, n_sep, m_re, n_re must all be >= 1".into(),
            ));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads must divide d (heads={}, d={})",
                self.heads, self.d
            )));
        }
        if self.hidden() == 0 {
            return Err(Error::Config("ffn_expansion too small".into()));
        }
        if self.conv_kernel == 0 {
            return Err(Error::Config("conv_kernel must be >= 1".into()));
        }
        self.stft.validate()
    }

    /// Separator parameter copies that exist: one shared stack, or one per
    /// training pass.
    fn sep_copies(&self) -> usize {
        if self.share_separator {
            1
        } else {
            self.n_sep
        }
    }

    fn re_copies(&self) -> usize {
        if self.share_reconstructor {
            1
        } else {
            self.n_re
        }
    }
}

fn path_block_specs(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, cfg: &ModelConfig, axis_kernel: usize) {
    let d = cfg.d;
    let h = cfg.hidden();
    for ffn in ["ffn1", "ffn2"] {
        out.push((format!("{prefix}.{ffn}.w_in"), vec![2 * h, d, axis_kernel]));
        out.push((format!("{prefix}.{ffn}.b_in"), vec![2 * h]));
        out.push((format!("{prefix}.{ffn}.w_out"), vec![d, h, axis_kernel]));
        out.push((format!("{prefix}.{ffn}.b_out"), vec![d]));
    }
    for w in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.attn.{w}.weight"), vec![d, d]));
        out.push((format!("{prefix}.attn.{w}.bias"), vec![d]));
    }
    for n in ["norm1", "norm2", "norm3"] {
        out.push((format!("{prefix}.{n}.gamma"), vec![d]));
    }
}

/// Enumerates every tensor name and shape for a config, in a fixed order.
pub fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d;
    let h = cfg.hidden();
    let j = cfg.j;
    let mut out = Vec::new();

    out.push(("encoder.conv.weight".into(), vec![d, 2, 3, 3]));
    out.push(("encoder.conv.bias".into(), vec![d]));
    out.push(("encoder.norm.gamma".into(), vec![d]));
    out.push(("encoder.norm.beta".into(), vec![d]));

    for c in 0..cfg.sep_copies() {
        for b in 0..cfg.m_sep {
            for axis in [PathAxis::Frequency, PathAxis::Time] {
                let prefix = format!("separator.{c}.{b}.{}", axis.name());
                path_block_specs(&mut out, &prefix, cfg, axis.conv_kernel(cfg.conv_kernel));
            }
        }
    }

    match cfg.splitter_kind {
        SplitterKind::Conv2dSwiglu => {
            out.push(("splitter.w_in".into(), vec![2 * h, d, 3, 3]));
            out.push(("splitter.b_in".into(), vec![2 * h]));
            out.push(("splitter.w_out".into(), vec![j * d, h, 3, 3]));
            out.push(("splitter.b_out".into(), vec![j * d]));
        }
        SplitterKind::Conv2d => {
            out.push(("splitter.weight".into(), vec![j * d, d, 3, 3]));
            out.push(("splitter.bias".into(), vec![j * d]));
        }
    }

    for c in 0..cfg.re_copies() {
        for b in 0..cfg.m_re {
            for axis in [PathAxis::Frequency, PathAxis::Time, PathAxis::Speaker] {
                let prefix = format!("reconstructor.{c}.{b}.{}", axis.name());
                path_block_specs(&mut out, &prefix, cfg, axis.conv_kernel(cfg.conv_kernel));
            }
        }
    }

    // Transposed-conv layout: [in, out, kh, kw].
    out.push(("decoder.deconv.weight".into(), vec![d, 2, 3, 3]));
    out.push(("decoder.deconv.bias".into(), vec![2]));
    out
}

/// Named parameter store plus the config that shaped it.
#[derive(Clone)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Arr>,
    pub config: ModelConfig,
    pub init_seed: u64,
    basis: Arc<DftBasis>,
}

impl std::fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelParams")
            .field("tensors", &self.tensors.len())
            .field("config", &self.config)
            .field("init_seed", &self.init_seed)
            .finish()
    }
}

impl ModelParams {
    pub(crate) fn basis(&self) -> &Arc<DftBasis> {
        &self.basis
    }

    /// Rebuilds a parameter store from raw tensors, validating names and
    /// shapes against the config.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: BTreeMap<String, Arr>,
        init_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let specs = tensor_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &specs {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        let basis = Arc::new(DftBasis::new(&config.stft));
        Ok(Self {
            tensors,
            config,
            init_seed,
            basis,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Standard normal via Box-Muller on a uniform source.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministically initializes parameters for `config` from `seed`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in tensor_specs(config) {
        let value = if name.ends_with(".gamma") {
            ArrayD::from_elem(IxDyn(&shape), 1.0)
        } else if name.ends_with(".beta")
            || name.ends_with(".bias")
            || name.ends_with(".b_in")
            || name.ends_with(".b_out")
        {
            ArrayD::zeros(IxDyn(&shape))
        } else {
            // Glorot-style fan scaling; kernel taps count toward both fans.
            let (fan_out, fan_in) = match shape.len() {
                2 => (shape[1], shape[0]),
                3 => (shape[0] * shape[2], shape[1] * shape[2]),
                4 => (shape[0] * shape[2] * shape[3], shape[1] * shape[2] * shape[3]),
                _ => (shape[0], shape[0]),
            };
            let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
            ArrayD::from_shape_fn(IxDyn(&shape), |_| normal(&mut rng) * sd)
        };
        tensors.insert(name, value);
    }
    let basis = Arc::new(DftBasis::new(&config.stft));
    Ok(ModelParams {
        tensors,
        config: config.clone(),
        init_seed: seed,
        basis,
    })
}

/// Total count of trainable scalar entries.
pub fn count_parameters(params: &ModelParams) -> usize {
    params.tensors.values().map(|t| t.len()).sum()
}

/// Leaf vars for every tensor of a parameter store, in name order.
pub(crate) struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn new(tape: &mut Tape, params: &ModelParams) -> Self {
        let mut map = BTreeMap::new();
        for (name, tensor) in &params.tensors {
            map.insert(name.clone(), tape.leaf(tensor.clone()));
        }
        Self { map }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter tensor {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct SeparationOutput {
    /// Final per-speaker waveforms, network channel order.
    pub waves: Vec<Waveform>,
    /// Final per-speaker complex spectra `[J, 2, T, F]`.
    pub spec: Array4<f64>,
    /// One entry per applied separator pass (empty unless intermediates
    /// were collected).
    pub sep_intermediates: Vec<FeatureTensor>,
    /// Splitter output fed to the reconstructor.
    pub splitter_output: SpeakerFeatures,
    /// One entry per applied reconstructor pass.
    pub re_intermediates: Vec<SpeakerFeatures>,
    /// `(n_sep, n_re)` actually applied.
    pub applied_depths: (usize, usize),
    /// Decoded waveform estimates for the auxiliary supervision points.
    pub stage_estimates: Option<StageEstimates>,
}

/// Waveform estimates decoded from intermediate stages through the shared
/// splitter/decoder heads.
#[derive(Debug, Clone)]
pub struct StageEstimates {
    /// First `n_sep - 1` separator passes, each decoded to J waveforms.
    pub sep: Vec<Vec<Waveform>>,
    /// The last separator pass's splitter output, decoded.
    pub split: Vec<Waveform>,
    /// First `n_re - 1` reconstructor passes, decoded.
    pub re: Vec<Vec<Waveform>>,
}

/// Runs the full pipeline on a mixture at the requested depths.
///
/// With `collect_intermediates` the per-pass features and the decoded
/// auxiliary estimates needed by the training objective are returned as
/// well; the final waveforms are identical either way.
pub fn forward(
    params: &ModelParams,
    mixture: &Waveform,
    n_sep: usize,
    n_re: usize,
    collect_intermediates: bool,
) -> Result<SeparationOutput> {
    let mut tape = Tape::new(false);
    let pv = ParamVars::new(&mut tape, params);
    let run = forward_on_tape(
        &mut tape,
        &pv,
        params,
        mixture,
        n_sep,
        n_re,
        collect_intermediates,
    )?;
    Ok(run.into_output(&tape, mixture.sample_rate))
}

#[cfg(test)]
mod tests;
