//! Tape builders for the sequence-modeling blocks.
//!
//! A path block treats one axis of the latent tensor as the sequence
//! dimension (everything else folded into batch) and applies, each with
//! RMS-group pre-normalization and a residual connection:
//! gated-conv feed-forward, multi-head self-attention with rotary
//! positions, gated-conv feed-forward.

use crate::autodiff::{Tape, Var};

use super::ParamVars;

pub(crate) const NORM_EPS: f64 = 1e-8;
const ROPE_BASE: f64 = 10000.0;

/// Which axis of a latent tensor a path block models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathAxis {
    Time,
    Frequency,
    Speaker,
}

impl PathAxis {
    pub(crate) fn name(self) -> &'static str {
        match self {
            PathAxis::Time => "time",
            PathAxis::Frequency => "freq",
            PathAxis::Speaker => "spk",
        }
    }

    /// Rotary positions encode order, which the speaker axis must not have.
    pub(crate) fn uses_rope(self) -> bool {
        !matches!(self, PathAxis::Speaker)
    }

    /// The speaker axis is convolved pointwise so that the block stays
    /// permutation-equivariant; time and frequency use the config kernel.
    pub(crate) fn conv_kernel(self, configured: usize) -> usize {
        match self {
            PathAxis::Speaker => 1,
            _ => configured,
        }
    }
}

/// Per-block hyperparameters resolved from the model config.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockHyper {
    pub heads: usize,
    pub use_rope: bool,
}

/// Optional recorder for attention probabilities, used by tests.
#[derive(Default)]
pub(crate) struct BlockProbe {
    pub attn_probs: Vec<Var>,
}

/// Gated-conv feed-forward on `[B, S, C]`: expand to `2h` channels along
/// the sequence axis, gate the first half with the swish of the second,
/// and project back to `C` channels.
pub(crate) fn gated_conv_ffn(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    x: Var,
) -> Var {
    let w_in = pv.var(&format!("{prefix}.w_in"));
    let b_in = pv.var(&format!("{prefix}.b_in"));
    let w_out = pv.var(&format!("{prefix}.w_out"));
    let b_out = pv.var(&format!("{prefix}.b_out"));
    let hidden2 = tape.shape(w_in)[0];
    let h = hidden2 / 2;
    let y = tape.conv1d_seq(x, w_in, b_in);
    let a = tape.narrow(y, 2, 0, h);
    let b = tape.narrow(y, 2, h, h);
    let sb = tape.swish(b);
    let gated = tape.mul(a, sb);
    tape.conv1d_seq(gated, w_out, b_out)
}

/// Multi-head self-attention on `[B, S, D]`.
pub(crate) fn mhsa(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    x: Var,
    hyper: BlockHyper,
    probe: Option<&mut BlockProbe>,
) -> Var {
    let shape = tape.shape(x).to_vec();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let heads = hyper.heads;
    let dh = d / heads;

    let x2 = tape.reshape(x, &[b * s, d]);
    let mut heads_of = |name: &str| {
        let w = pv.var(&format!("{prefix}.{name}.weight"));
        let bias = pv.var(&format!("{prefix}.{name}.bias"));
        let y = tape.matmul(x2, w);
        let y = tape.add(y, bias);
        let y = tape.reshape(y, &[b, s, heads, dh]);
        let y = tape.permute(y, &[0, 2, 1, 3]);
        tape.reshape(y, &[b * heads, s, dh])
    };
    let mut q = heads_of("wq");
    let mut k = heads_of("wk");
    let v = heads_of("wv");
    if hyper.use_rope {
        q = tape.rope(q, ROPE_BASE);
        k = tape.rope(k, ROPE_BASE);
    }
    let kt = tape.permute(k, &[0, 2, 1]);
    let scores = tape.bmm(q, kt);
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = tape.softmax(scaled);
    if let Some(p) = probe {
        p.attn_probs.push(probs);
    }
    let ctx = tape.bmm(probs, v);
    let ctx = tape.reshape(ctx, &[b, heads, s, dh]);
    let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
    let ctx = tape.reshape(ctx, &[b * s, d]);
    let wo = pv.var(&format!("{prefix}.wo.weight"));
    let bo = pv.var(&format!("{prefix}.wo.bias"));
    let out = tape.matmul(ctx, wo);
    let out = tape.add(out, bo);
    tape.reshape(out, &[b, s, d])
}

/// One path block on a folded `[B, S, D]` tensor.
pub(crate) fn path_block_folded(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    x: Var,
    hyper: BlockHyper,
    probe: Option<&mut BlockProbe>,
) -> Var {
    let g1 = pv.var(&format!("{prefix}.norm1.gamma"));
    let n1 = tape.rms_group_norm(x, g1, hyper.heads, NORM_EPS);
    let f1 = gated_conv_ffn(tape, pv, &format!("{prefix}.ffn1"), n1);
    let x = tape.add(x, f1);

    let g2 = pv.var(&format!("{prefix}.norm2.gamma"));
    let n2 = tape.rms_group_norm(x, g2, hyper.heads, NORM_EPS);
    let a = mhsa(tape, pv, &format!("{prefix}.attn"), n2, hyper, probe);
    let x = tape.add(x, a);

    let g3 = pv.var(&format!("{prefix}.norm3.gamma"));
    let n3 = tape.rms_group_norm(x, g3, hyper.heads, NORM_EPS);
    let f2 = gated_conv_ffn(tape, pv, &format!("{prefix}.ffn2"), n3);
    tape.add(x, f2)
}

/// Folds a `[D, T, F]` feature so the chosen axis is the sequence axis of
/// a `[B, S, D]` tensor, returning the folded var and the permutation that
/// restores the original layout.
pub(crate) fn fold_feature(tape: &mut Tape, x: Var, axis: PathAxis) -> (Var, Vec<usize>) {
    match axis {
        // [D,T,F] -> [F,T,D]
        PathAxis::Time => (tape.permute(x, &[2, 1, 0]), vec![2, 1, 0]),
        // [D,T,F] -> [T,F,D]
        PathAxis::Frequency => (tape.permute(x, &[1, 2, 0]), vec![2, 0, 1]),
        PathAxis::Speaker => panic!("speaker axis undefined for [D,T,F] features"),
    }
}

/// Folds a `[J, D, T, F]` speaker feature for the chosen axis; returns the
/// folded `[B, S, D]` var plus the shapes needed to restore.
pub(crate) fn fold_speaker_feature(
    tape: &mut Tape,
    x: Var,
    axis: PathAxis,
) -> (Var, FoldRestore) {
    let sh = tape.shape(x).to_vec();
    let (j, d, t, f) = (sh[0], sh[1], sh[2], sh[3]);
    match axis {
        PathAxis::Frequency => {
            // [J,D,T,F] -> [J,T,F,D] -> [J*T, F, D]
            let p = tape.permute(x, &[0, 2, 3, 1]);
            let folded = tape.reshape(p, &[j * t, f, d]);
            (
                folded,
                FoldRestore {
                    unfold: vec![j, t, f, d],
                    perm: vec![0, 3, 1, 2],
                },
            )
        }
        PathAxis::Time => {
            // [J,D,T,F] -> [J,F,T,D] -> [J*F, T, D]
            let p = tape.permute(x, &[0, 3, 2, 1]);
            let folded = tape.reshape(p, &[j * f, t, d]);
            (
                folded,
                FoldRestore {
                    unfold: vec![j, f, t, d],
                    perm: vec![0, 3, 2, 1],
                },
            )
        }
        PathAxis::Speaker => {
            // [J,D,T,F] -> [T,F,J,D] -> [T*F, J, D]
            let p = tape.permute(x, &[2, 3, 0, 1]);
            let folded = tape.reshape(p, &[t * f, j, d]);
            (
                folded,
                FoldRestore {
                    unfold: vec![t, f, j, d],
                    perm: vec![2, 3, 0, 1],
                },
            )
        }
    }
}

pub(crate) struct FoldRestore {
    unfold: Vec<usize>,
    perm: Vec<usize>,
}

impl FoldRestore {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let u = tape.reshape(x, &self.unfold);
        tape.permute(u, &self.perm)
    }
}
