//! Tape-based reverse-mode automatic differentiation over `f64` arrays.
//!
//! Every operation appends a node holding its output value and, when
//! gradients are enabled, a backward closure that maps the node's output
//! gradient to contributions for its parents. Values are always kept in
//! standard (row-major contiguous) layout so matrix products and reshapes
//! stay cheap.
//!
//! The op set is exactly what the separation network needs; it is not a
//! general tensor library.

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, Axis, Ix2, Ix3, IxDyn};
use std::sync::Arc;

use crate::dsp::{self, DftBasis, StftConfig};

pub type Arr = ArrayD<f64>;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Arr, &[&Arr], &Arr) -> Vec<Arr>>;

struct BackEntry {
    parents: Vec<usize>,
    func: BackFn,
}

struct Node {
    value: Arr,
    back: Option<BackEntry>,
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
pub struct Gradients {
    slots: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Arr> {
        self.slots.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Arr> {
        self.slots.get_mut(var.0).and_then(|g| g.take())
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

fn as_standard(a: ArrayViewD<f64>) -> Arr {
    if a.is_standard_layout() {
        a.to_owned()
    } else {
        a.as_standard_layout().to_owned()
    }
}

/// Sums `g` down to `shape` following right-aligned broadcast rules.
fn reduce_to_shape(g: &Arr, shape: &[usize]) -> Arr {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, (&got, &want)) in out.shape().to_vec().iter().zip(shape).enumerate() {
        if got != want {
            debug_assert_eq!(want, 1, "broadcast reduce mismatch");
            let summed = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            out = summed;
        }
    }
    out
}

impl Tape {
    pub fn new(grad_enabled: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Arr {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        let v = &self.nodes[var.0].value;
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().expect("empty node value")
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Arr, back: Option<BackEntry>) -> Var {
        debug_assert!(value.is_standard_layout());
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            back: if self.grad_enabled { back } else { None },
        });
        Var(id)
    }

    /// Inserts a leaf node. Parameters and constants are both leaves; the
    /// caller decides which gradients to read after `backward`.
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(as_standard(value.view()), None)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    // ------------------------------------------------------------------
    // Elementwise arithmetic (broadcasting, right-aligned)
    // ------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let back = BackEntry {
            parents: vec![a.0, b.0],
            func: Box::new(|g, pv, _| {
                vec![
                    reduce_to_shape(g, pv[0].shape()),
                    reduce_to_shape(g, pv[1].shape()),
                ]
            }),
        };
        self.push(as_standard(value.view()), Some(back))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let back = BackEntry {
            parents: vec![a.0, b.0],
            func: Box::new(|g, pv, _| {
                let gb = reduce_to_shape(g, pv[1].shape());
                vec![reduce_to_shape(g, pv[0].shape()), -gb]
            }),
        };
        self.push(as_standard(value.view()), Some(back))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let back = BackEntry {
            parents: vec![a.0, b.0],
            func: Box::new(|g, pv, _| {
                vec![
                    reduce_to_shape(&(g * pv[1]), pv[0].shape()),
                    reduce_to_shape(&(g * pv[0]), pv[1].shape()),
                ]
            }),
        };
        self.push(as_standard(value.view()), Some(back))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let back = BackEntry {
            parents: vec![a.0, b.0],
            func: Box::new(|g, pv, _| {
                let ga = g / pv[1];
                let gb = -(g * pv[0]) / (pv[1] * pv[1]);
                vec![
                    reduce_to_shape(&ga, pv[0].shape()),
                    reduce_to_shape(&gb, pv[1].shape()),
                ]
            }),
        };
        self.push(as_standard(value.view()), Some(back))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        let back = BackEntry {
            parents: vec![a.0],
            func: Box::new(move |g, _, _| vec![g * c]),
        };
        self.push(value, Some(back))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value + c;
        let back = BackEntry {
            parents: vec![a.0],
            func: Box::new(|g, _, _| vec![g.clone()]),
        };
        self.push(value, Some(back))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        let back = BackEntry {
            parents: vec![a.0],
            func: Box::new(|g, pv, _| vec![g / pv[0]]),
        };
        self.push(value, Some(back))
    }

    /// Swish / SiLU activation `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        let back = BackEntry {
            parents: vec![a.0],
            func: Box::new(|g, pv, _| {
                let dx = pv[0].mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                vec![g * &dx]
            }),
        };
        self.push(value, Some(back))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        let back = BackEntry {
            parents: vec![a.0],
            func: Box::new(|g, pv, _| {
                let gv = *g.iter().next().expect("scalar grad");
                vec![ArrayD::from_elem(pv[0].raw_dim(), gv)]
            }),
        };
        self.push(value, Some(back))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // ------------------------------------------------------------------
    // Shape ops
    // ------------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let back = BackEntry {
            parents: vec![a.0],
            func: Box::new(|g, pv, _| {
                vec![g
                    .clone()
                    .into_shape_with_order(pv[0].raw_dim())
                    .expect("reshape grad")]
            }),
        };
        self.push(value, Some(back))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes_fwd = axes.to_vec();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let value = as_standard(self.nodes[a.0].value.view().permuted_axes(IxDyn(axes)));
        let _ = &axes_fwd;
        let back = BackEntry {
            parents: vec![a.0],
            func: Box::new(move |g, _, _| {
                vec![as_standard(g.view().permuted_axes(IxDyn(&inverse)))]
            }),
        };
        self.push(value, Some(back))
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = as_standard(
            self.nodes[a.0]
                .value
                .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len)),
        );
        let back = BackEntry {
            parents: vec![a.0],
            func: Box::new(move |g, pv, _| {
                let mut out = ArrayD::zeros(pv[0].raw_dim());
                out.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![out]
            }),
        };
        self.push(value, Some(back))
    }

    /// Reverses the array along the given axes (linear; used to build the
    /// flipped kernels of transposed convolution).
    pub fn rev_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes_owned = axes.to_vec();
        let mut v = self.nodes[a.0].value.clone();
        for &ax in axes {
            v.invert_axis(Axis(ax));
        }
        let back = BackEntry {
            parents: vec![a.0],
            func: Box::new(move |g, _, _| {
                let mut gg = g.clone();
                for &ax in &axes_owned {
                    gg.invert_axis(Axis(ax));
                }
                vec![as_standard(gg.view())]
            }),
        };
        self.push(as_standard(v.view()), Some(back))
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs not 2-d");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs not 2-d");
        let value = mm(&av, &bv).into_dyn();
        let back = BackEntry {
            parents: vec![a.0, b.0],
            func: Box::new(|g, pv, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = pv[0].view().into_dimensionality::<Ix2>().unwrap();
                let b2 = pv[1].view().into_dimensionality::<Ix2>().unwrap();
                vec![
                    mm(&g2, &b2.t()).into_dyn(),
                    mm(&a2.t(), &g2).into_dyn(),
                ]
            }),
        };
        self.push(value, Some(back))
    }

    /// Batched matmul `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm lhs not 3-d");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm rhs not 3-d");
        let (bs, m, _k) = av.dim();
        let n = bv.dim().2;
        let mut value = ndarray::Array3::<f64>::zeros((bs, m, n));
        for i in 0..bs {
            value
                .index_axis_mut(Axis(0), i)
                .assign(&mm(&av.index_axis(Axis(0), i), &bv.index_axis(Axis(0), i)));
        }
        let back = BackEntry {
            parents: vec![a.0, b.0],
            func: Box::new(|g, pv, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = pv[0].view().into_dimensionality::<Ix3>().unwrap();
                let b3 = pv[1].view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = ndarray::Array3::<f64>::zeros(a3.dim());
                let mut gb = ndarray::Array3::<f64>::zeros(b3.dim());
                for i in 0..g3.dim().0 {
                    let gi = g3.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&mm(&gi, &b3.index_axis(Axis(0), i).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&mm(&a3.index_axis(Axis(0), i).t(), &gi));
                }
                vec![ga.into_dyn(), gb.into_dyn()]
            }),
        };
        self.push(value.into_dyn(), Some(back))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let row_len = *v.shape().last().expect("softmax input rank");
        let mut out = v.clone();
        for row in out.as_slice_mut().expect("softmax layout").chunks_exact_mut(row_len) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            let inv = 1.0 / sum;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        let back = BackEntry {
            parents: vec![a.0],
            func: Box::new(move |g, _, out| {
                // dx_i = p_i * (g_i - sum_j g_j p_j)
                let mut dx = g * out;
                let po = out.as_slice().expect("softmax output layout");
                for (gp, p) in dx
                    .as_slice_mut()
                    .expect("softmax grad layout")
                    .chunks_exact_mut(row_len)
                    .zip(po.chunks_exact(row_len))
                {
                    let dot: f64 = gp.iter().sum();
                    for (d, &pi) in gp.iter_mut().zip(p.iter()) {
                        *d -= dot * pi;
                    }
                }
                vec![dx]
            }),
        };
        self.push(out, Some(back))
    }

    /// Rotary position embedding over `[B, S, D]` where positions index the
    /// middle axis. Adjacent channel pairs are rotated; a trailing odd
    /// channel passes through.
    pub fn rope(&mut self, a: Var, base: f64) -> Var {
        let v = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("rope input not 3-d");
        let (_b, s, d) = v.dim();
        let pairs = d / 2;
        let tables = std::sync::Arc::new(rope_tables(s, d, base));
        let mut out = self.nodes[a.0].value.clone();
        {
            let flat = out.as_slice_mut().expect("rope layout");
            let t = &tables;
            for (row_idx, row) in flat.chunks_exact_mut(d).enumerate() {
                let si = row_idx % s;
                let tab = &t[si * pairs..(si + 1) * pairs];
                for (p, &(cos, sin)) in tab.iter().enumerate() {
                    let x0 = row[2 * p];
                    let x1 = row[2 * p + 1];
                    row[2 * p] = x0 * cos - x1 * sin;
                    row[2 * p + 1] = x0 * sin + x1 * cos;
                }
            }
        }
        let back = BackEntry {
            parents: vec![a.0],
            func: Box::new(move |g, _, _| {
                let mut dx = g.clone();
                let flat = dx.as_slice_mut().expect("rope grad layout");
                for (row_idx, row) in flat.chunks_exact_mut(d).enumerate() {
                    let si = row_idx % s;
                    let tab = &tables[si * pairs..(si + 1) * pairs];
                    for (p, &(cos, sin)) in tab.iter().enumerate() {
                        let g0 = row[2 * p];
                        let g1 = row[2 * p + 1];
                        row[2 * p] = g0 * cos + g1 * sin;
                        row[2 * p + 1] = -g0 * sin + g1 * cos;
                    }
                }
                vec![dx]
            }),
        };
        self.push(out, Some(back))
    }

    /// Root-mean-square group normalization with per-channel scale.
    ///
    /// Input `[B, S, D]`; channels are split into `groups` equal groups and
    /// each group vector is divided by its RMS.
    pub fn rms_group_norm(&mut self, a: Var, gamma: Var, groups: usize, eps: f64) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.ndim(), 3, "rms_group_norm input not 3-d");
        let d = v.shape()[2];
        let gm = &self.nodes[gamma.0].value;
        assert_eq!(d % groups, 0, "groups must divide channels");
        assert_eq!(gm.len(), d, "gamma length");
        let gsz = d / groups;
        let mut out = v.clone();
        {
            let gms = gm.as_slice().expect("gamma layout");
            for row in out.as_slice_mut().expect("norm layout").chunks_exact_mut(d) {
                for g in 0..groups {
                    let seg = &mut row[g * gsz..(g + 1) * gsz];
                    let ms: f64 = seg.iter().map(|x| x * x).sum();
                    let inv_r = 1.0 / (ms / gsz as f64 + eps).sqrt();
                    for (x, gamma) in seg.iter_mut().zip(&gms[g * gsz..(g + 1) * gsz]) {
                        *x *= inv_r * gamma;
                    }
                }
            }
        }
        let back = BackEntry {
            parents: vec![a.0, gamma.0],
            func: Box::new(move |gout, pv, _| {
                let xs = pv[0].as_slice().expect("norm input layout");
                let gms = pv[1].as_slice().expect("gamma layout");
                let gs = gout.as_slice().expect("norm grad layout");
                let mut dx = ArrayD::zeros(pv[0].raw_dim());
                let mut dgamma = ArrayD::zeros(IxDyn(&[d]));
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let dgs = dgamma.as_slice_mut().unwrap();
                    for ((xrow, grow), dxrow) in xs
                        .chunks_exact(d)
                        .zip(gs.chunks_exact(d))
                        .zip(dxs.chunks_exact_mut(d))
                    {
                        for g in 0..groups {
                            let lo = g * gsz;
                            let hi = lo + gsz;
                            let (xg, gg, gmg) = (&xrow[lo..hi], &grow[lo..hi], &gms[lo..hi]);
                            let ms: f64 = xg.iter().map(|x| x * x).sum();
                            let r = (ms / gsz as f64 + eps).sqrt();
                            let inv_r = 1.0 / r;
                            let mut dot = 0.0;
                            for c in 0..gsz {
                                dot += gg[c] * gmg[c] * xg[c];
                            }
                            let scale = dot / (gsz as f64 * r * r * r);
                            for c in 0..gsz {
                                dxrow[lo + c] = gg[c] * gmg[c] * inv_r - scale * xg[c];
                                dgs[lo + c] += gg[c] * xg[c] * inv_r;
                            }
                        }
                    }
                }
                vec![dx, dgamma]
            }),
        };
        self.push(out, Some(back))
    }

    /// Layer normalization over every element of the input, with
    /// per-channel affine applied along axis 0.
    pub fn global_layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let d = x.shape()[0];
        assert_eq!(self.nodes[gamma.0].value.len(), d);
        assert_eq!(self.nodes[beta.0].value.len(), d);
        let n = x.len() as f64;
        let mu = x.sum() / n;
        let var = x.mapv(|v| (v - mu) * (v - mu)).sum() / n;
        let sd = (var + eps).sqrt();
        let gm = &self.nodes[gamma.0].value;
        let bt = &self.nodes[beta.0].value;
        let mut out = x.clone();
        let rest: usize = x.len() / d;
        {
            let mut flat = out.view_mut().into_shape_with_order((d, rest)).unwrap();
            for (c, mut row) in flat.axis_iter_mut(Axis(0)).enumerate() {
                let (g, b) = (gm[[c]], bt[[c]]);
                for v in row.iter_mut() {
                    *v = (*v - mu) / sd * g + b;
                }
            }
        }
        let back = BackEntry {
            parents: vec![a.0, gamma.0, beta.0],
            func: Box::new(move |gout, pv, _| {
                let x = pv[0];
                let gm = pv[1];
                let xf = x.view().into_shape_with_order((d, rest)).unwrap();
                let gf = gout.view().into_shape_with_order((d, rest)).unwrap();
                let n = x.len() as f64;
                let mu = x.sum() / n;
                let var = x.mapv(|v| (v - mu) * (v - mu)).sum() / n;
                let sd = (var + eps).sqrt();
                // h = gamma (broadcast) * gout; xhat = (x - mu)/sd
                let mut mean_h = 0.0;
                let mut mean_hx = 0.0;
                for c in 0..d {
                    let g = gm[[c]];
                    for r in 0..rest {
                        let h = g * gf[[c, r]];
                        mean_h += h;
                        mean_hx += h * (xf[[c, r]] - mu) / sd;
                    }
                }
                mean_h /= n;
                mean_hx /= n;
                let mut dx = Array2::<f64>::zeros((d, rest));
                let mut dgamma = Array1::<f64>::zeros(d);
                let mut dbeta = Array1::<f64>::zeros(d);
                for c in 0..d {
                    let g = gm[[c]];
                    for r in 0..rest {
                        let xhat = (xf[[c, r]] - mu) / sd;
                        let h = g * gf[[c, r]];
                        dx[[c, r]] = (h - mean_h - xhat * mean_hx) / sd;
                        dgamma[c] += gf[[c, r]] * xhat;
                        dbeta[c] += gf[[c, r]];
                    }
                }
                vec![
                    dx.into_dyn()
                        .into_shape_with_order(x.raw_dim())
                        .unwrap(),
                    dgamma.into_dyn(),
                    dbeta.into_dyn(),
                ]
            }),
        };
        self.push(out, Some(back))
    }

    // ------------------------------------------------------------------
    // Convolutions
    // ------------------------------------------------------------------

    /// 1-d convolution along the middle (sequence) axis of `[B, S, C]`,
    /// with same-padding. Weight `[Cout, Cin, K]`, bias `[Cout]`.
    pub fn conv1d_seq(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv1d input not 3-d");
        let wv = &self.nodes[w.0].value;
        let (bs, s, cin) = xv.dim();
        let (cout, wcin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(cin, wcin, "conv1d channel mismatch");
        let pad_l = (k - 1) / 2;
        // im2col: [B*S, Cin*K]
        let mut cols = Array2::<f64>::zeros((bs * s, cin * k));
        {
            let xs = xv.as_slice().expect("conv1d input layout");
            let cf = cols.as_slice_mut().expect("cols layout");
            let row_w = cin * k;
            for bi in 0..bs {
                for si in 0..s {
                    let row_base = (bi * s + si) * row_w;
                    for ki in 0..k {
                        let sj = si as isize + ki as isize - pad_l as isize;
                        if sj < 0 || sj >= s as isize {
                            continue;
                        }
                        let src = (bi * s + sj as usize) * cin;
                        for c in 0..cin {
                            cf[row_base + c * k + ki] = xs[src + c];
                        }
                    }
                }
            }
        }
        let wmat = wv
            .view()
            .into_shape_with_order((cout, cin * k))
            .expect("conv1d weight layout");
        let mut out = cols.dot(&wmat.t());
        let bv = &self.nodes[b.0].value;
        for mut row in out.rows_mut() {
            for (v, bias) in row.iter_mut().zip(bv.iter()) {
                *v += bias;
            }
        }
        let value = out
            .into_dyn()
            .into_shape_with_order(IxDyn(&[bs, s, cout]))
            .unwrap();
        let cols = Arc::new(cols);
        let back = BackEntry {
            parents: vec![x.0, w.0, b.0],
            func: Box::new(move |g, pv, _| {
                let g2 = g
                    .view()
                    .into_shape_with_order((bs * s, cout))
                    .unwrap()
                    .to_owned();
                let wmat = pv[1]
                    .view()
                    .into_shape_with_order((cout, cin * k))
                    .unwrap();
                let gw = g2.t().dot(&cols.view());
                let gb = g2.sum_axis(Axis(0));
                let gcols = g2.dot(&wmat);
                // col2im
                let mut gx = ndarray::Array3::<f64>::zeros((bs, s, cin));
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    let gcf = gcols.as_slice().unwrap();
                    let row_w = cin * k;
                    for bi in 0..bs {
                        for si in 0..s {
                            let row_base = (bi * s + si) * row_w;
                            for ki in 0..k {
                                let sj = si as isize + ki as isize - pad_l as isize;
                                if sj < 0 || sj >= s as isize {
                                    continue;
                                }
                                let dst = (bi * s + sj as usize) * cin;
                                for c in 0..cin {
                                    gxs[dst + c] += gcf[row_base + c * k + ki];
                                }
                            }
                        }
                    }
                }
                vec![
                    gx.into_dyn(),
                    gw.into_dyn()
                        .into_shape_with_order(IxDyn(&[cout, cin, k]))
                        .unwrap(),
                    gb.into_dyn(),
                ]
            }),
        };
        self.push(value, Some(back))
    }

    /// 2-d convolution over `[B, Cin, H, W]` with same-padding.
    /// Weight `[Cout, Cin, KH, KW]`, bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        assert_eq!(xv.ndim(), 4, "conv2d input not 4-d");
        let (bs, cin, h, wd) = (
            xv.shape()[0],
            xv.shape()[1],
            xv.shape()[2],
            xv.shape()[3],
        );
        let (cout, wcin, kh, kw) = (
            wv.shape()[0],
            wv.shape()[1],
            wv.shape()[2],
            wv.shape()[3],
        );
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut cols = Array2::<f64>::zeros((bs * h * wd, cin * kh * kw));
        {
            let xs = xv.as_slice().expect("conv2d input layout");
            let cf = cols.as_slice_mut().expect("cols layout");
            let row_w = cin * kh * kw;
            for bi in 0..bs {
                for hi in 0..h {
                    for wi in 0..wd {
                        let row_base = ((bi * h + hi) * wd + wi) * row_w;
                        for c in 0..cin {
                            let base_src = (bi * cin + c) * h;
                            let base_col = row_base + c * kh * kw;
                            for ki in 0..kh {
                                let hj = hi as isize + ki as isize - ph as isize;
                                if hj < 0 || hj >= h as isize {
                                    continue;
                                }
                                let src_row = (base_src + hj as usize) * wd;
                                for kj in 0..kw {
                                    let wj = wi as isize + kj as isize - pw as isize;
                                    if wj < 0 || wj >= wd as isize {
                                        continue;
                                    }
                                    cf[base_col + ki * kw + kj] = xs[src_row + wj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let wmat = wv
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        let out = cols.dot(&wmat.t()); // [B*H*W, Cout]
        let bv = &self.nodes[b.0].value;
        let mut out = out;
        for mut row in out.rows_mut() {
            for (v, bias) in row.iter_mut().zip(bv.iter()) {
                *v += bias;
            }
        }
        // [B*H*W, Cout] -> [B, Cout, H, W]
        let value4 = out
            .into_shape_with_order((bs, h, wd, cout))
            .unwrap()
            .permuted_axes([0, 3, 1, 2]);
        let value = as_standard(value4.into_dyn().view());
        let cols = Arc::new(cols);
        let back = BackEntry {
            parents: vec![x.0, w.0, b.0],
            func: Box::new(move |g, pv, _| {
                // g: [B, Cout, H, W] -> [B*H*W, Cout]
                let g4 = g.view().into_shape_with_order((bs, cout, h, wd)).unwrap();
                let g2 = as_standard(g4.permuted_axes([0, 2, 3, 1]).into_dyn())
                    .into_shape_with_order((bs * h * wd, cout))
                    .unwrap();
                let wmat = pv[1]
                    .view()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .unwrap();
                let gw = g2.t().dot(&cols.view());
                let gb = g2.sum_axis(Axis(0));
                let gcols = g2.dot(&wmat);
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&[bs, cin, h, wd]));
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    let gcf = gcols.as_slice().unwrap();
                    let row_w = cin * kh * kw;
                    for bi in 0..bs {
                        for hi in 0..h {
                            for wi in 0..wd {
                                let row_base = ((bi * h + hi) * wd + wi) * row_w;
                                for c in 0..cin {
                                    let base_dst = (bi * cin + c) * h;
                                    let base_col = row_base + c * kh * kw;
                                    for ki in 0..kh {
                                        let hj = hi as isize + ki as isize - ph as isize;
                                        if hj < 0 || hj >= h as isize {
                                            continue;
                                        }
                                        let dst_row = (base_dst + hj as usize) * wd;
                                        for kj in 0..kw {
                                            let wj = wi as isize + kj as isize - pw as isize;
                                            if wj < 0 || wj >= wd as isize {
                                                continue;
                                            }
                                            gxs[dst_row + wj as usize] +=
                                                gcf[base_col + ki * kw + kj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    gx,
                    gw.into_dyn()
                        .into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                        .unwrap(),
                    gb.into_dyn(),
                ]
            }),
        };
        self.push(value, Some(back))
    }

    /// Batched inverse STFT: `[B, 2, T, F] -> [B, L]`.
    pub(crate) fn istft(
        &mut self,
        spec: Var,
        config: StftConfig,
        basis: Arc<DftBasis>,
        target_length: usize,
    ) -> Var {
        let v = &self.nodes[spec.0].value;
        assert_eq!(v.ndim(), 4, "istft input not 4-d");
        assert_eq!(v.shape()[1], 2, "istft expects [B, 2, T, F]");
        let (bs, frames, bins) = (v.shape()[0], v.shape()[2], v.shape()[3]);
        assert_eq!(bins, config.bin_count(), "istft bin mismatch");
        let mut out = Array2::<f64>::zeros((bs, target_length));
        for bi in 0..bs {
            let re = v
                .slice(ndarray::s![bi, 0, .., ..])
                .into_dimensionality::<Ix2>()
                .unwrap();
            let im = v
                .slice(ndarray::s![bi, 1, .., ..])
                .into_dimensionality::<Ix2>()
                .unwrap();
            let samples = dsp::istft_planes(&re, &im, &config, &basis, target_length);
            out.row_mut(bi)
                .assign(&Array1::from_vec(samples));
        }
        let back = BackEntry {
            parents: vec![spec.0],
            func: Box::new(move |g, _, _| {
                let g2 = g.view().into_shape_with_order((bs, target_length)).unwrap();
                let mut gs = ArrayD::<f64>::zeros(IxDyn(&[bs, 2, frames, bins]));
                for bi in 0..bs {
                    let gi = g2.row(bi);
                    let adj = dsp::istft_adjoint(
                        gi.as_slice().unwrap(),
                        &config,
                        &basis,
                        frames,
                    );
                    gs.slice_mut(ndarray::s![bi, .., .., ..]).assign(&adj);
                }
                vec![gs]
            }),
        };
        self.push(out.into_dyn(), Some(back))
    }

    // ------------------------------------------------------------------
    // Backward pass
    // ------------------------------------------------------------------

    /// Backpropagates from a scalar root; returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(
            self.grad_enabled,
            "backward called on a tape built without gradients"
        );
        let mut slots: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0);
        assert_eq!(seed.len(), 1, "backward root must be scalar");
        slots[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(entry) = self.nodes[i].back.as_ref() else {
                continue;
            };
            let Some(g) = slots[i].take() else {
                continue;
            };
            let pvals: Vec<&Arr> = entry
                .parents
                .iter()
                .map(|&p| &self.nodes[p].value)
                .collect();
            let contribs = (entry.func)(&g, &pvals, &self.nodes[i].value);
            debug_assert_eq!(contribs.len(), entry.parents.len());
            for (&p, c) in entry.parents.iter().zip(contribs) {
                match &mut slots[p] {
                    Some(acc) => *acc += &c,
                    slot => *slot = Some(c),
                }
            }
        }
        Gradients { slots }
    }
}

/// Matrix product dispatching tiny shapes to a loop kernel; the packing
/// setup inside the BLAS-style kernel dominates at these sizes.
fn mm(a: &ndarray::ArrayView2<f64>, b: &ndarray::ArrayView2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let n = b.dim().1;
    if m * k * n > 120_000 {
        return a.dot(b);
    }
    let mut out = Array2::<f64>::zeros((m, n));
    {
        let av = a.as_standard_layout();
        let bv = b.as_standard_layout();
        let asl = av.as_slice().unwrap();
        let bsl = bv.as_slice().unwrap();
        let osl = out.as_slice_mut().unwrap();
        for i in 0..m {
            let arow = &asl[i * k..(i + 1) * k];
            let orow = &mut osl[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &bsl[kk * n..(kk + 1) * n];
                for (o, &bkn) in orow.iter_mut().zip(brow) {
                    *o += aik * bkn;
                }
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine/sine tables for rotary embedding: entry `pos * pairs + i` holds
/// `(cos, sin)` of `pos * base^(-2i/d)`.
fn rope_tables(seq: usize, d: usize, base: f64) -> Vec<(f64, f64)> {
    let pairs = d / 2;
    let mut t = Vec::with_capacity(seq * pairs);
    for pos in 0..seq {
        for i in 0..pairs {
            let inv_freq = base.powf(-2.0 * i as f64 / d as f64);
            let theta = pos as f64 * inv_freq;
            t.push((theta.cos(), theta.sin()));
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite-difference check of `f`'s gradient with respect to
    /// each input array, where `f` builds a scalar on a fresh tape.
    fn grad_check(inputs: &[Arr], f: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let mut tape = Tape::new(true);
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let root = f(&mut tape, &vars);
        let grads = tape.backward(root);
        let h = 1e-5;
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[idx])
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
            for flat in 0..input.len() {
                let eval = |delta: f64| -> f64 {
                    let mut shifted: Vec<Arr> = inputs.to_vec();
                    shifted[idx].as_slice_mut().unwrap()[flat] += delta;
                    let mut t = Tape::new(false);
                    let vs: Vec<Var> = shifted.iter().map(|a| t.leaf(a.clone())).collect();
                    let r = f(&mut t, &vs);
                    t.scalar_value(r)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[flat];
                let denom = fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    ((fd - an) / denom).abs() < tol,
                    "input {idx} flat {flat}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn add_mul_div_broadcast() {
        let a = randn(&[3, 4], 1);
        let b = randn(&[4], 2);
        let c = randn(&[3, 4], 3).mapv(|x| x + 2.5);
        grad_check(&[a, b, c], |t, v| {
            let s = t.add(v[0], v[1]);
            let m = t.mul(s, v[0]);
            let d = t.div(m, v[2]);
            t.sum_all(d)
        }, 1e-6);
    }

    #[test]
    fn matmul_and_softmax() {
        let a = randn(&[3, 5], 4);
        let b = randn(&[5, 2], 5);
        grad_check(&[a, b], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let p = t.softmax(m);
            let sq = t.mul(p, p);
            t.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn bmm_permute_narrow() {
        let a = randn(&[2, 3, 4], 6);
        let b = randn(&[2, 4, 3], 7);
        grad_check(&[a, b], |t, v| {
            let m = t.bmm(v[0], v[1]);
            let p = t.permute(m, &[1, 0, 2]);
            let n = t.narrow(p, 0, 1, 2);
            let s = t.swish(n);
            t.mean_all(s)
        }, 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new(false);
        let a = t.leaf(randn(&[4, 7], 8));
        let p = t.softmax(a);
        for row in t.value(p).rows() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_grad_and_norm_preservation() {
        let x = randn(&[2, 5, 6], 9);
        // Rotations preserve per-pair norms.
        let mut t = Tape::new(false);
        let v = t.leaf(x.clone());
        let y = t.rope(v, 10000.0);
        let xn: f64 = x.iter().map(|a| a * a).sum();
        let yn: f64 = t.value(y).iter().map(|a| a * a).sum();
        assert!((xn - yn).abs() < 1e-10);
        grad_check(&[x], |t, v| {
            let y = t.rope(v[0], 10000.0);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn rms_group_norm_grad() {
        let x = randn(&[2, 3, 6], 10);
        let gamma = randn(&[6], 11).mapv(|v| v + 1.5);
        grad_check(&[x, gamma], |t, v| {
            let y = t.rms_group_norm(v[0], v[1], 2, 1e-8);
            let sq = t.mul(y, y);
            let s = t.sum_all(sq);
            let c = t.sum_all(y);
            t.add(s, c)
        }, 1e-5);
    }

    #[test]
    fn global_layer_norm_grad_and_stats() {
        let x = randn(&[3, 4, 5], 12);
        let gamma = randn(&[3], 13).mapv(|v| v + 1.2);
        let beta = randn(&[3], 14);
        {
            let mut t = Tape::new(false);
            let v = t.leaf(x.clone());
            let ones = t.leaf(ArrayD::from_elem(IxDyn(&[3]), 1.0));
            let zeros = t.leaf(ArrayD::zeros(IxDyn(&[3])));
            let y = t.global_layer_norm(v, ones, zeros, 1e-8);
            let out = t.value(y);
            let n = out.len() as f64;
            let mu = out.sum() / n;
            let var = out.mapv(|v| (v - mu) * (v - mu)).sum() / n;
            assert!(mu.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
        grad_check(&[x, gamma, beta], |t, v| {
            let y = t.global_layer_norm(v[0], v[1], v[2], 1e-8);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn conv1d_grad() {
        let x = randn(&[2, 6, 3], 15);
        let w = randn(&[4, 3, 4], 16);
        let b = randn(&[4], 17);
        grad_check(&[x, w, b], |t, v| {
            let y = t.conv1d_seq(v[0], v[1], v[2]);
            let s = t.swish(y);
            t.sum_all(s)
        }, 1e-5);
    }

    #[test]
    fn conv2d_grad() {
        let x = randn(&[2, 3, 5, 4], 18);
        let w = randn(&[2, 3, 3, 3], 19);
        let b = randn(&[2], 20);
        grad_check(&[x, w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2]);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn conv1d_matches_direct_computation() {
        // Cross-check the im2col path against a straightforward loop.
        let x = randn(&[1, 5, 2], 21);
        let w = randn(&[3, 2, 3], 22);
        let b = randn(&[3], 23);
        let mut t = Tape::new(false);
        let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
        let y = t.conv1d_seq(xv, wv, bv);
        let out = t.value(y);
        for s in 0..5usize {
            for o in 0..3usize {
                let mut acc = b[[o]];
                for k in 0..3usize {
                    let sj = s as isize + k as isize - 1;
                    if sj < 0 || sj >= 5 {
                        continue;
                    }
                    for c in 0..2usize {
                        acc += x[[0, sj as usize, c]] * w[[o, c, k]];
                    }
                }
                assert!((out[[0, s, o]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn istft_node_grad() {
        let cfg = StftConfig::new(16, 8);
        let basis = Arc::new(DftBasis::new(&cfg));
        let spec = randn(&[2, 2, 5, 9], 24);
        let target = randn(&[2, 40], 25);
        grad_check(&[spec], |t, v| {
            let cfgc = cfg;
            let w = t.istft(v[0], cfgc, basis.clone(), 40);
            let tv = t.leaf(target.clone());
            let d = t.sub(w, tv);
            let sq = t.mul(d, d);
            t.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn shared_leaf_accumulates_gradient() {
        // Using the same leaf twice must sum both contributions.
        let a = randn(&[3], 26);
        let mut t = Tape::new(true);
        let v = t.leaf(a.clone());
        let m = t.mul(v, v);
        let s = t.sum_all(m);
        let g = t.backward(s);
        let got = g.get(v).unwrap();
        for (ga, xa) in got.iter().zip(a.iter()) {
            assert!((ga - 2.0 * xa).abs() < 1e-12);
        }
    }

    #[test]
    fn rev_axes_round_trip() {
        let a = randn(&[2, 3, 4], 27);
        let mut t = Tape::new(true);
        let v = t.leaf(a.clone());
        let r = t.rev_axes(v, &[1, 2]);
        let rr = t.rev_axes(r, &[1, 2]);
        assert_eq!(t.value(rr), &a);
        grad_check(&[a], |t, v| {
            let r = t.rev_axes(v[0], &[0, 2]);
            let sq = t.mul(r, r);
            t.sum_all(sq)
        }, 1e-6);
    }
}
