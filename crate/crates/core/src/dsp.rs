//! Windowed STFT analysis and synthesis.
//!
//! Analysis applies a periodic Hann window to center-padded frames and
//! takes a real DFT; synthesis overlap-adds windowed inverse frames and
//! divides by the accumulated squared window, which inverts the analysis
//! exactly wherever the squared-window sum is positive.
//!
//! Transforms are evaluated as dense matrix products against precomputed
//! cosine/sine tables. At the window sizes used here (<= 512) this is
//! fast enough and keeps the adjoint (needed for backpropagation through
//! synthesis) a plain transposed product.

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A finite mono sample sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let e: f64 = self.samples.iter().map(|x| x * x).sum();
        (e / self.samples.len() as f64).sqrt()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|x| x.is_finite())
    }
}

/// Real/imaginary STFT planes of shape `[2, T, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub planes: Array3<f64>,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            planes: Array3::zeros((2, frames, bins)),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.planes.shape()[1]
    }

    pub fn bin_count(&self) -> usize {
        self.planes.shape()[2]
    }

    pub fn is_finite(&self) -> bool {
        self.planes.iter().all(|x| x.is_finite())
    }
}

/// Analysis window family. Only the periodic Hann window is supported;
/// other names are rejected when a config is parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum WindowKind {
    Hann,
}

impl FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(WindowKind::Hann),
            other => Err(Error::Config(format!("unsupported window_kind: {other}"))),
        }
    }
}

impl TryFrom<String> for WindowKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WindowKind> for String {
    fn from(k: WindowKind) -> String {
        match k {
            WindowKind::Hann => "hann".to_string(),
        }
    }
}

/// STFT framing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub window_size: usize,
    pub hop: usize,
    pub window_kind: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_size: 128,
            hop: 64,
            window_kind: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn new(window_size: usize, hop: usize) -> Self {
        Self {
            window_size,
            hop,
            window_kind: WindowKind::Hann,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 != 0 {
            return Err(Error::Config(format!(
                "window_size must be even and positive, got {}",
                self.window_size
            )));
        }
        if self.hop == 0 || self.hop > self.window_size {
            return Err(Error::Config(format!(
                "hop must satisfy 0 < hop <= window_size, got hop={} window={}",
                self.hop, self.window_size
            )));
        }
        // Squared-window overlap-add must stay positive at every hop
        // position, otherwise synthesis cannot invert analysis.
        let w = make_window(self);
        for r in 0..self.hop {
            let s: f64 = (r..self.window_size)
                .step_by(self.hop)
                .map(|m| w[m] * w[m])
                .sum();
            if s <= 1e-9 {
                return Err(Error::Config(format!(
                    "window/hop combination violates overlap-add invertibility \
                     (zero coverage at hop position {r})"
                )));
            }
        }
        Ok(())
    }

    /// Frequency bin count `window_size / 2 + 1`.
    pub fn bin_count(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Frame count for a signal of `len` samples: `floor(len / hop) + 1`.
    pub fn frame_count(&self, len: usize) -> usize {
        len / self.hop + 1
    }
}

/// Returns the periodic analysis window for `config`.
pub fn make_window(config: &StftConfig) -> Vec<f64> {
    let n = config.window_size;
    match config.window_kind {
        WindowKind::Hann => (0..n)
            .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
            .collect(),
    }
}

/// Precomputed DFT basis tables for one framing config.
pub(crate) struct DftBasis {
    /// `[F, W]` analysis cosines: `cos(2 pi f n / W)`.
    pub fwd_cos: Array2<f64>,
    /// `[F, W]` analysis sines with the `-i` convention sign folded in.
    pub fwd_sin: Array2<f64>,
    /// `[F, W]` synthesis table for the real plane (includes `c_f / W`).
    pub inv_cos: Array2<f64>,
    /// `[F, W]` synthesis table for the imaginary plane.
    pub inv_sin: Array2<f64>,
    pub window: Vec<f64>,
}

impl DftBasis {
    pub fn new(config: &StftConfig) -> Self {
        let w = config.window_size;
        let f_bins = config.bin_count();
        let mut fwd_cos = Array2::zeros((f_bins, w));
        let mut fwd_sin = Array2::zeros((f_bins, w));
        let mut inv_cos = Array2::zeros((f_bins, w));
        let mut inv_sin = Array2::zeros((f_bins, w));
        for f in 0..f_bins {
            // Hermitian weight: DC and Nyquist appear once in the full spectrum.
            let c = if f == 0 || f == f_bins - 1 { 1.0 } else { 2.0 };
            for n in 0..w {
                let theta = 2.0 * PI * (f * n) as f64 / w as f64;
                fwd_cos[[f, n]] = theta.cos();
                fwd_sin[[f, n]] = -theta.sin();
                inv_cos[[f, n]] = c * theta.cos() / w as f64;
                inv_sin[[f, n]] = -c * theta.sin() / w as f64;
            }
        }
        Self {
            fwd_cos,
            fwd_sin,
            inv_cos,
            inv_sin,
            window: make_window(config),
        }
    }
}

/// Reflect-pad index lookup: maps position `i` of a signal padded on both
/// sides back into `[0, len)`.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Extracts center-padded windowed frames as a `[T, W]` matrix.
fn windowed_frames(samples: &[f64], config: &StftConfig, window: &[f64]) -> Array2<f64> {
    let w = config.window_size;
    let pad = w / 2;
    let frames = config.frame_count(samples.len());
    let mut out = Array2::zeros((frames, w));
    for t in 0..frames {
        let start = (t * config.hop) as isize - pad as isize;
        for n in 0..w {
            let src = reflect_index(start + n as isize, samples.len());
            out[[t, n]] = samples[src] * window[n];
        }
    }
    out
}

/// Short-time Fourier transform with center padding.
///
/// Output shape is `[2, T, F]` with `T = floor(L / hop) + 1` and
/// `F = window_size / 2 + 1`.
pub fn stft(wave: &Waveform, config: &StftConfig) -> Result<ComplexSpectrogram> {
    config.validate()?;
    if wave.is_empty() {
        return Err(Error::Shape("stft input must be non-empty".into()));
    }
    let basis = DftBasis::new(config);
    stft_with_basis(wave, config, &basis)
}

pub(crate) fn stft_with_basis(
    wave: &Waveform,
    config: &StftConfig,
    basis: &DftBasis,
) -> Result<ComplexSpectrogram> {
    let frames = windowed_frames(&wave.samples, config, &basis.window);
    let re = frames.dot(&basis.fwd_cos.t());
    let im = frames.dot(&basis.fwd_sin.t());
    let (t, f) = (re.shape()[0], re.shape()[1]);
    let mut planes = Array3::zeros((2, t, f));
    planes.index_axis_mut(ndarray::Axis(0), 0).assign(&re);
    planes.index_axis_mut(ndarray::Axis(0), 1).assign(&im);
    Ok(ComplexSpectrogram { planes })
}

/// Per-sample squared-window overlap-add sum for the padded domain.
fn squared_window_sum(frames: usize, config: &StftConfig, window: &[f64]) -> Vec<f64> {
    let w = config.window_size;
    let padded = (frames - 1) * config.hop + w;
    let mut s = vec![0.0; padded];
    for t in 0..frames {
        let off = t * config.hop;
        for n in 0..w {
            s[off + n] += window[n] * window[n];
        }
    }
    s
}

/// Inverse STFT via windowed overlap-add with squared-window
/// normalization, truncated or zero-padded to `target_length`.
pub fn istft(
    spec: &ComplexSpectrogram,
    config: &StftConfig,
    target_length: usize,
) -> Result<Waveform> {
    config.validate()?;
    if spec.bin_count() != config.bin_count() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins but config implies {}",
            spec.bin_count(),
            config.bin_count()
        )));
    }
    let basis = DftBasis::new(config);
    let re = spec.planes.index_axis(ndarray::Axis(0), 0);
    let im = spec.planes.index_axis(ndarray::Axis(0), 1);
    let samples = istft_planes(&re, &im, config, &basis, target_length);
    Ok(Waveform::new(samples, 8000))
}

/// Synthesis core shared by the public op and the autodiff node.
pub(crate) fn istft_planes(
    re: &ArrayView2<f64>,
    im: &ArrayView2<f64>,
    config: &StftConfig,
    basis: &DftBasis,
    target_length: usize,
) -> Vec<f64> {
    let frames = re.shape()[0];
    let w = config.window_size;
    let pad = w / 2;
    // Time-domain frames, then synthesis windowing.
    let mut td = re.dot(&basis.inv_cos) + im.dot(&basis.inv_sin);
    for mut row in td.rows_mut() {
        for (v, win) in row.iter_mut().zip(&basis.window) {
            *v *= win;
        }
    }
    let wsum = squared_window_sum(frames, config, &basis.window);
    let padded_len = wsum.len();
    let mut acc = vec![0.0; padded_len];
    for t in 0..frames {
        let off = t * config.hop;
        for n in 0..w {
            acc[off + n] += td[[t, n]];
        }
    }
    let mut out = vec![0.0; target_length];
    for (i, o) in out.iter_mut().enumerate() {
        let p = pad + i;
        if p < padded_len && wsum[p] > 1e-12 {
            *o = acc[p] / wsum[p];
        }
    }
    out
}

/// Adjoint of [`istft_planes`]: maps an output-waveform gradient back to
/// `[2, T, F]` spectrogram gradients.
pub(crate) fn istft_adjoint(
    grad_out: &[f64],
    config: &StftConfig,
    basis: &DftBasis,
    frames: usize,
) -> Array3<f64> {
    let w = config.window_size;
    let pad = w / 2;
    let wsum = squared_window_sum(frames, config, &basis.window);
    let padded_len = wsum.len();

    // Transpose of truncate -> unpad -> normalize.
    let mut gpad = vec![0.0; padded_len];
    for (i, g) in grad_out.iter().enumerate() {
        let p = pad + i;
        if p < padded_len && wsum[p] > 1e-12 {
            gpad[p] = g / wsum[p];
        }
    }
    // Transpose of overlap-add: gather frames; then synthesis windowing.
    let mut gframes = Array2::zeros((frames, w));
    for t in 0..frames {
        let off = t * config.hop;
        for n in 0..w {
            gframes[[t, n]] = gpad[off + n] * basis.window[n];
        }
    }
    // Transpose of the inverse-DFT products.
    let gre = gframes.dot(&basis.inv_cos.t());
    let gim = gframes.dot(&basis.inv_sin.t());
    let (t, f) = (gre.shape()[0], gre.shape()[1]);
    let mut out = Array3::zeros((2, t, f));
    out.index_axis_mut(ndarray::Axis(0), 0).assign(&gre);
    out.index_axis_mut(ndarray::Axis(0), 1).assign(&gim);
    out
}

/// Naive per-frame DFT of one windowed frame, used as an independent
/// oracle in tests.
pub fn naive_frame_dft(frame: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = frame.len();
    let bins = w / 2 + 1;
    let mut re = vec![0.0; bins];
    let mut im = vec![0.0; bins];
    for (f, (r, i)) in re.iter_mut().zip(im.iter_mut()).enumerate() {
        for (n, x) in frame.iter().enumerate() {
            let theta = 2.0 * PI * (f * n) as f64 / w as f64;
            *r += x * theta.cos();
            *i -= x * theta.sin();
        }
    }
    (re, im)
}

/// The windowed frame at index `t` exactly as the analysis sees it.
pub fn analysis_frame(wave: &Waveform, config: &StftConfig, t: usize) -> Vec<f64> {
    let window = make_window(config);
    let w = config.window_size;
    let pad = w / 2;
    let start = (t * config.hop) as isize - pad as isize;
    (0..w)
        .map(|n| wave.samples[reflect_index(start + n as isize, wave.len())] * window[n])
        .collect()
}
