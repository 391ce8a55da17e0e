//! The encoder -> separator -> splitter -> reconstructor -> decoder
//! pipeline, built on an autodiff tape so the same code serves inference
//! and training.

use ndarray::{Array4, Ix3, Ix4};

use crate::autodiff::{Tape, Var};
use crate::dsp::{stft_with_basis, Waveform};
use crate::error::{Error, Result};

use super::blocks::{
    fold_feature, fold_speaker_feature, path_block_folded, BlockHyper, BlockProbe, PathAxis,
};
use super::{FeatureTensor, ModelConfig, ModelParams, ParamVars, SeparationOutput, SpeakerFeatures, SplitterKind, StageEstimates};

const GLN_EPS: f64 = 1e-8;

fn check_finite(tape: &Tape, var: Var, stage: &'static str) -> Result<()> {
    if tape.value(var).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage })
    }
}

/// Conv2D + global layer norm: `[2, T, F] -> [D, T, F]`.
pub(crate) fn encode_on_tape(tape: &mut Tape, pv: &ParamVars, spec: Var) -> Var {
    let sh = tape.shape(spec).to_vec();
    let x = tape.reshape(spec, &[1, sh[0], sh[1], sh[2]]);
    let w = pv.var("encoder.conv.weight");
    let b = pv.var("encoder.conv.bias");
    let y = tape.conv2d(x, w, b);
    let ysh = tape.shape(y).to_vec();
    let y = tape.reshape(y, &[ysh[1], ysh[2], ysh[3]]);
    let gamma = pv.var("encoder.norm.gamma");
    let beta = pv.var("encoder.norm.beta");
    tape.global_layer_norm(y, gamma, beta, GLN_EPS)
}

/// One path block on a `[D, T, F]` feature.
fn feature_path_block(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    axis: PathAxis,
    probe: Option<&mut BlockProbe>,
) -> Var {
    let (folded, restore) = fold_feature(tape, x, axis);
    let hyper = BlockHyper {
        heads: cfg.heads,
        use_rope: axis.uses_rope(),
    };
    let out = path_block_folded(tape, pv, prefix, folded, hyper, probe);
    tape.permute(out, &restore)
}

/// One path block on a `[J, D, T, F]` speaker feature.
fn speaker_path_block(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    axis: PathAxis,
    probe: Option<&mut BlockProbe>,
) -> Var {
    let (folded, restore) = fold_speaker_feature(tape, x, axis);
    let hyper = BlockHyper {
        heads: cfg.heads,
        use_rope: axis.uses_rope(),
    };
    let out = path_block_folded(tape, pv, prefix, folded, hyper, probe);
    restore.apply(tape, out)
}

/// Dual-path separator block: frequency modeling then time modeling.
pub(crate) fn sep_block_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    copy: usize,
    block: usize,
    x: Var,
) -> Var {
    let mut h = x;
    for axis in [PathAxis::Frequency, PathAxis::Time] {
        let prefix = format!("separator.{copy}.{block}.{}", axis.name());
        h = feature_path_block(tape, pv, cfg, &prefix, h, axis, None);
    }
    h
}

/// Triple-path reconstructor block: frequency, time, then speaker.
pub(crate) fn re_block_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    copy: usize,
    block: usize,
    x: Var,
) -> Var {
    let mut h = x;
    for axis in [PathAxis::Frequency, PathAxis::Time, PathAxis::Speaker] {
        let prefix = format!("reconstructor.{copy}.{block}.{}", axis.name());
        h = speaker_path_block(tape, pv, cfg, &prefix, h, axis, None);
    }
    h
}

fn sep_copy_for_pass(cfg: &ModelConfig, pass: usize) -> Result<usize> {
    if cfg.share_separator {
        Ok(0)
    } else if pass < cfg.n_sep {
        Ok(pass)
    } else {
        Err(Error::Depth(format!(
            "separator pass {pass} requested but non-shared model holds {} copies",
            cfg.n_sep
        )))
    }
}

fn re_copy_for_pass(cfg: &ModelConfig, pass: usize) -> Result<usize> {
    if cfg.share_reconstructor {
        Ok(0)
    } else if pass < cfg.n_re {
        Ok(pass)
    } else {
        Err(Error::Depth(format!(
            "reconstructor pass {pass} requested but non-shared model holds {} copies",
            cfg.n_re
        )))
    }
}

/// Applies the separator stack `n_sep` times; returns the final feature
/// and every pass output.
pub(crate) fn separate_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    z: Var,
    n_sep: usize,
) -> Result<(Var, Vec<Var>)> {
    if n_sep < 1 {
        return Err(Error::Depth("n_sep must be >= 1".into()));
    }
    let mut h = z;
    let mut passes = Vec::with_capacity(n_sep);
    for pass in 0..n_sep {
        let copy = sep_copy_for_pass(cfg, pass)?;
        let input = h;
        for b in 0..cfg.m_sep {
            h = sep_block_on_tape(tape, pv, cfg, copy, b, h);
        }
        if cfg.iteration_residual {
            h = tape.add(h, input);
        }
        passes.push(h);
    }
    Ok((h, passes))
}

/// Expands `[D, T, F]` into `[J, D, T, F]` through the splitter head.
pub(crate) fn split_on_tape(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, h: Var) -> Var {
    let sh = tape.shape(h).to_vec();
    let (d, t, f) = (sh[0], sh[1], sh[2]);
    let x = tape.reshape(h, &[1, d, t, f]);
    let out = match cfg.splitter_kind {
        SplitterKind::Conv2dSwiglu => {
            let w_in = pv.var("splitter.w_in");
            let b_in = pv.var("splitter.b_in");
            let y = tape.conv2d(x, w_in, b_in);
            let hid = tape.shape(y)[1] / 2;
            let a = tape.narrow(y, 1, 0, hid);
            let b = tape.narrow(y, 1, hid, hid);
            let sb = tape.swish(b);
            let gated = tape.mul(a, sb);
            let w_out = pv.var("splitter.w_out");
            let b_out = pv.var("splitter.b_out");
            tape.conv2d(gated, w_out, b_out)
        }
        SplitterKind::Conv2d => {
            let w = pv.var("splitter.weight");
            let b = pv.var("splitter.bias");
            tape.conv2d(x, w, b)
        }
    };
    tape.reshape(out, &[cfg.j, d, t, f])
}

/// Applies the reconstructor stack `n_re` times.
pub(crate) fn reconstruct_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    v: Var,
    n_re: usize,
) -> Result<(Var, Vec<Var>)> {
    if n_re < 1 {
        return Err(Error::Depth("n_re must be >= 1".into()));
    }
    let mut h = v;
    let mut passes = Vec::with_capacity(n_re);
    for pass in 0..n_re {
        let copy = re_copy_for_pass(cfg, pass)?;
        let input = h;
        for b in 0..cfg.m_re {
            h = re_block_on_tape(tape, pv, cfg, copy, b, h);
        }
        if cfg.iteration_residual {
            h = tape.add(h, input);
        }
        passes.push(h);
    }
    Ok((h, passes))
}

/// Per-speaker transposed convolution back to complex spectra, then
/// inverse STFT to waveforms of `target_length`.
pub(crate) fn decode_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParams,
    v: Var,
    target_length: usize,
) -> (Var, Var) {
    let w = pv.var("decoder.deconv.weight");
    let b = pv.var("decoder.deconv.bias");
    // Transposed conv with stride 1 == convolution with the kernel flipped
    // spatially and the channel axes swapped.
    let wt = tape.permute(w, &[1, 0, 2, 3]);
    let wt = tape.rev_axes(wt, &[2, 3]);
    let spec = tape.conv2d(v, wt, b);
    let waves = tape.istft(
        spec,
        params.config.stft,
        params.basis().clone(),
        target_length,
    );
    (waves, spec)
}

/// Tape-level result of a forward pass.
pub(crate) struct TapeRun {
    pub waves: Var,
    pub spec: Var,
    pub split_feat: Var,
    pub sep_feats: Vec<Var>,
    pub re_feats: Vec<Var>,
    pub aux: Option<AuxWaves>,
    pub applied: (usize, usize),
}

/// Borrowed view of a [`TapeRun`] for the objective assembler.
pub(crate) struct TapeRunView<'a> {
    pub waves: Var,
    pub applied: (usize, usize),
    pub aux_sep: Option<&'a [Var]>,
    pub aux_split: Option<Var>,
    pub aux_re: Option<&'a [Var]>,
}

impl TapeRun {
    pub(crate) fn view(&self) -> TapeRunView<'_> {
        TapeRunView {
            waves: self.waves,
            applied: self.applied,
            aux_sep: self.aux.as_ref().map(|a| a.sep.as_slice()),
            aux_split: self.aux.as_ref().map(|a| a.split),
            aux_re: self.aux.as_ref().map(|a| a.re.as_slice()),
        }
    }
}

/// Decoded waveform vars at the auxiliary supervision points.
pub(crate) struct AuxWaves {
    /// First `n_sep - 1` separator passes through splitter + decoder.
    pub sep: Vec<Var>,
    /// Last separator pass's splitter output through the decoder.
    pub split: Var,
    /// First `n_re - 1` reconstructor passes through the decoder.
    pub re: Vec<Var>,
}

/// Builds the whole pipeline on `tape`.
pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParams,
    mixture: &Waveform,
    n_sep: usize,
    n_re: usize,
    collect_intermediates: bool,
) -> Result<TapeRun> {
    if n_sep < 1 || n_re < 1 {
        return Err(Error::Depth(format!(
            "depths must be >= 1, got n_sep={n_sep} n_re={n_re}"
        )));
    }
    if mixture.is_empty() {
        return Err(Error::Shape("mixture must be non-empty".into()));
    }
    if !mixture.is_finite() {
        return Err(Error::NonFinite { stage: "input" });
    }
    let cfg = &params.config;
    let target_length = mixture.len();

    let spec = stft_with_basis(mixture, &cfg.stft, params.basis())?;
    let spec_var = tape.leaf(spec.planes.into_dyn());

    let z = encode_on_tape(tape, pv, spec_var);
    check_finite(tape, z, "encoder")?;

    let (h, sep_passes) = separate_on_tape(tape, pv, cfg, z, n_sep)?;
    check_finite(tape, h, "separator")?;

    let v = split_on_tape(tape, pv, cfg, h);
    check_finite(tape, v, "splitter")?;

    let (r, re_passes) = reconstruct_on_tape(tape, pv, cfg, v, n_re)?;
    check_finite(tape, r, "reconstructor")?;

    let (waves, out_spec) = decode_on_tape(tape, pv, params, r, target_length);
    check_finite(tape, waves, "decoder")?;

    let aux = if collect_intermediates {
        let mut sep_aux = Vec::new();
        for &pass in &sep_passes[..n_sep - 1] {
            let vi = split_on_tape(tape, pv, cfg, pass);
            let (wi, _) = decode_on_tape(tape, pv, params, vi, target_length);
            sep_aux.push(wi);
        }
        let (split_wave, _) = decode_on_tape(tape, pv, params, v, target_length);
        let mut re_aux = Vec::new();
        for &pass in &re_passes[..n_re - 1] {
            let (wi, _) = decode_on_tape(tape, pv, params, pass, target_length);
            re_aux.push(wi);
        }
        Some(AuxWaves {
            sep: sep_aux,
            split: split_wave,
            re: re_aux,
        })
    } else {
        None
    };

    Ok(TapeRun {
        waves,
        spec: out_spec,
        split_feat: v,
        sep_feats: if collect_intermediates { sep_passes } else { Vec::new() },
        re_feats: if collect_intermediates { re_passes } else { Vec::new() },
        aux,
        applied: (n_sep, n_re),
    })
}

fn waves_from_var(tape: &Tape, var: Var, sample_rate: u32) -> Vec<Waveform> {
    let v = tape.value(var);
    let j = v.shape()[0];
    let l = v.shape()[1];
    (0..j)
        .map(|s| {
            Waveform::new(
                (0..l).map(|i| v[[s, i]]).collect(),
                sample_rate,
            )
        })
        .collect()
}

impl TapeRun {
    pub fn into_output(self, tape: &Tape, sample_rate: u32) -> SeparationOutput {
        let waves = waves_from_var(tape, self.waves, sample_rate);
        let spec = tape
            .value(self.spec)
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("spec rank");
        let splitter_output = SpeakerFeatures(
            tape.value(self.split_feat)
                .clone()
                .into_dimensionality::<Ix4>()
                .expect("splitter rank"),
        );
        let sep_intermediates = self
            .sep_feats
            .iter()
            .map(|&v| {
                FeatureTensor(
                    tape.value(v)
                        .clone()
                        .into_dimensionality::<Ix3>()
                        .expect("feature rank"),
                )
            })
            .collect();
        let re_intermediates = self
            .re_feats
            .iter()
            .map(|&v| {
                SpeakerFeatures(
                    tape.value(v)
                        .clone()
                        .into_dimensionality::<Ix4>()
                        .expect("speaker feature rank"),
                )
            })
            .collect();
        let stage_estimates = self.aux.as_ref().map(|aux| StageEstimates {
            sep: aux
                .sep
                .iter()
                .map(|&v| waves_from_var(tape, v, sample_rate))
                .collect(),
            split: waves_from_var(tape, aux.split, sample_rate),
            re: aux
                .re
                .iter()
                .map(|&v| waves_from_var(tape, v, sample_rate))
                .collect(),
        });
        SeparationOutput {
            waves,
            spec,
            sep_intermediates,
            splitter_output,
            re_intermediates,
            applied_depths: self.applied,
            stage_estimates,
        }
    }
}

// ----------------------------------------------------------------------
// Array-level stage wrappers
// ----------------------------------------------------------------------

/// 2 -> D channel convolution followed by global layer normalization.
pub fn encode(params: &ModelParams, spec: &crate::dsp::ComplexSpectrogram) -> Result<FeatureTensor> {
    if spec.bin_count() != params.config.stft.bin_count() {
        return Err(Error::Shape(format!(
            "spectrogram bins {} do not match config bins {}",
            spec.bin_count(),
            params.config.stft.bin_count()
        )));
    }
    let mut tape = Tape::new(false);
    let pv = ParamVars::new(&mut tape, params);
    let s = tape.leaf(spec.planes.clone().into_dyn());
    let z = encode_on_tape(&mut tape, &pv, s);
    Ok(FeatureTensor(
        tape.value(z).clone().into_dimensionality::<Ix3>().unwrap(),
    ))
}

/// Applies the separator `n_sep` times; returns the final feature and all
/// pass outputs.
pub fn separate(
    params: &ModelParams,
    z: &FeatureTensor,
    n_sep: usize,
) -> Result<(FeatureTensor, Vec<FeatureTensor>)> {
    let mut tape = Tape::new(false);
    let pv = ParamVars::new(&mut tape, params);
    let zv = tape.leaf(z.0.clone().into_dyn());
    let (h, passes) = separate_on_tape(&mut tape, &pv, &params.config, zv, n_sep)?;
    let take = |v: Var| -> FeatureTensor {
        FeatureTensor(tape.value(v).clone().into_dimensionality::<Ix3>().unwrap())
    };
    Ok((take(h), passes.into_iter().map(take).collect()))
}

/// Expands a mixture feature into per-speaker features.
pub fn split(params: &ModelParams, h: &FeatureTensor) -> Result<SpeakerFeatures> {
    if h.0.shape()[0] != params.config.d {
        return Err(Error::Shape(format!(
            "feature has {} channels, config expects {}",
            h.0.shape()[0],
            params.config.d
        )));
    }
    let mut tape = Tape::new(false);
    let pv = ParamVars::new(&mut tape, params);
    let hv = tape.leaf(h.0.clone().into_dyn());
    let v = split_on_tape(&mut tape, &pv, &params.config, hv);
    Ok(SpeakerFeatures(
        tape.value(v).clone().into_dimensionality::<Ix4>().unwrap(),
    ))
}

/// Applies the reconstructor `n_re` times.
pub fn reconstruct(
    params: &ModelParams,
    v: &SpeakerFeatures,
    n_re: usize,
) -> Result<(SpeakerFeatures, Vec<SpeakerFeatures>)> {
    let mut tape = Tape::new(false);
    let pv = ParamVars::new(&mut tape, params);
    let vv = tape.leaf(v.0.clone().into_dyn());
    let (r, passes) = reconstruct_on_tape(&mut tape, &pv, &params.config, vv, n_re)?;
    let take = |x: Var| -> SpeakerFeatures {
        SpeakerFeatures(tape.value(x).clone().into_dimensionality::<Ix4>().unwrap())
    };
    Ok((take(r), passes.into_iter().map(take).collect()))
}

/// Maps per-speaker features to complex spectra and waveforms.
pub fn decode(
    params: &ModelParams,
    v: &SpeakerFeatures,
    target_length: usize,
) -> Result<(Vec<Waveform>, Array4<f64>)> {
    let sh = v.0.shape();
    if sh[0] != params.config.j || sh[1] != params.config.d {
        return Err(Error::Shape(format!(
            "speaker features {:?} do not match config (j={}, d={})",
            sh, params.config.j, params.config.d
        )));
    }
    let mut tape = Tape::new(false);
    let pv = ParamVars::new(&mut tape, params);
    let vv = tape.leaf(v.0.clone().into_dyn());
    let (waves, spec) = decode_on_tape(&mut tape, &pv, params, vv, target_length);
    Ok((
        waves_from_var(&tape, waves, 8000),
        tape.value(spec)
            .clone()
            .into_dimensionality::<Ix4>()
            .unwrap(),
    ))
}

/// Applies one named path block to a folded `[B, S, D]` tensor, returning
/// the output and the attention probability arrays; exposed for
/// block-level verification.
#[cfg(test)]
pub(crate) fn apply_path_block(
    params: &ModelParams,
    prefix: &str,
    x: &ndarray::ArrayD<f64>,
    axis: PathAxis,
) -> (ndarray::ArrayD<f64>, Vec<ndarray::ArrayD<f64>>) {
    let mut tape = Tape::new(false);
    let pv = ParamVars::new(&mut tape, params);
    let xv = tape.leaf(x.clone());
    let hyper = BlockHyper {
        heads: params.config.heads,
        use_rope: axis.uses_rope(),
    };
    let mut probe = BlockProbe::default();
    let out = path_block_folded(&mut tape, &pv, prefix, xv, hyper, Some(&mut probe));
    let probs = probe
        .attn_probs
        .iter()
        .map(|&p| tape.value(p).clone())
        .collect();
    (tape.value(out).clone(), probs)
}
