//! Deterministic synthetic-mixture generation.
//!
//! Every example is a pure function of its seed: J harmonic pseudo-voices
//! in disjoint fundamental-frequency bands (which keeps the toy task
//! separable), per-source gain offsets drawn from a dB range, and an
//! optional noise floor at a fixed SNR. The mixture is the exact
//! sample-wise sum of the stored sources and noise.
//!
//! A manifest records split membership, seeds and durations; audio is
//! regenerated on demand unless a path to persisted audio is recorded.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Source flavor for [`synth_source`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    HarmonicVoice,
    Chirp,
    FilteredNoise,
}

/// Slow amplitude-envelope descriptor. `depth` 0 disables modulation and
/// the inserted soft silences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeMod {
    pub rate_hz: f64,
    pub depth: f64,
}

impl Default for AmplitudeMod {
    fn default() -> Self {
        Self {
            rate_hz: 2.5,
            depth: 0.5,
        }
    }
}

/// Everything needed to synthesize one source deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub kind: SourceKind,
    pub f0_range: (f64, f64),
    pub duration: f64,
    pub amplitude_mod: AmplitudeMod,
    pub seed: u64,
}

impl SourceSpec {
    fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.duration <= 0.0 {
            return Err(Error::Config("source duration must be positive".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let (lo, hi) = self.f0_range;
        if !(lo > 0.0 && lo <= hi && hi < nyquist) {
            return Err(Error::Config(format!(
                "f0_range ({lo}, {hi}) must satisfy 0 < lo <= hi < {nyquist}"
            )));
        }
        if !(0.0..=0.95).contains(&self.amplitude_mod.depth) {
            return Err(Error::Config("amplitude_mod.depth must be in [0, 0.95]".into()));
        }
        Ok(())
    }
}

/// Envelope with slow modulation plus a few soft-silence dips.
fn envelope(len: usize, sample_rate: u32, am: &AmplitudeMod, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut env = vec![1.0; len];
    if am.depth == 0.0 {
        return env;
    }
    let phase0: f64 = rng.random_range(0.0..2.0 * PI);
    for (i, e) in env.iter_mut().enumerate() {
        let t = i as f64 / sample_rate as f64;
        let m = 0.5 + 0.5 * (2.0 * PI * am.rate_hz * t + phase0).sin();
        *e = 1.0 - am.depth * m;
    }
    // Up to two soft dips standing in for pauses. The floor stays well
    // above zero so every source keeps nonzero energy.
    let dips = rng.random_range(0..3u32);
    for _ in 0..dips {
        let dur = (0.03 * sample_rate as f64) as usize;
        if len <= 2 * dur {
            break;
        }
        let start = rng.random_range(0..len - dur);
        for i in 0..dur {
            // Raised-cosine dip down to 8 % amplitude.
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / dur as f64).cos();
            env[start + i] *= 1.0 - 0.92 * w;
        }
    }
    env
}

/// Piecewise-linear random walk of f0 inside the band.
fn f0_track(len: usize, sample_rate: u32, range: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (lo, hi) = range;
    if (hi - lo).abs() < f64::EPSILON {
        return vec![lo; len];
    }
    let seg = (0.06 * sample_rate as f64) as usize;
    let mut track = Vec::with_capacity(len);
    let mut current = rng.random_range(lo..hi);
    while track.len() < len {
        let target = rng.random_range(lo..hi);
        let n = seg.min(len - track.len());
        for i in 0..n {
            track.push(current + (target - current) * i as f64 / seg as f64);
        }
        current = current + (target - current) * (n.min(seg) as f64 - 1.0).max(0.0) / seg as f64;
        current = current.clamp(lo, hi);
    }
    track
}

const HARMONIC_DECAY: f64 = 0.55;
const MAX_HARMONICS: usize = 6;

/// RBJ biquad bandpass (constant skirt gain).
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Biquad {
    fn bandpass(center_hz: f64, q: f64, sample_rate: u32) -> Self {
        let w0 = 2.0 * PI * center_hz / sample_rate as f64;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            b1: 0.0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b1 * self.x1 + self.b2 * self.x2
            - self.a1 * self.y1
            - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Synthesizes one source. Deterministic in `spec.seed`.
pub fn synth_source(spec: &SourceSpec, sample_rate: u32) -> Result<Waveform> {
    spec.validate(sample_rate)?;
    let len = (spec.duration * sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::Config("duration rounds to zero samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let env = envelope(len, sample_rate, &spec.amplitude_mod, &mut rng);
    let nyquist = sample_rate as f64 / 2.0;
    let mut samples = vec![0.0; len];
    match spec.kind {
        SourceKind::HarmonicVoice => {
            let track = f0_track(len, sample_rate, spec.f0_range, &mut rng);
            let harmonics = MAX_HARMONICS
                .min((0.95 * nyquist / spec.f0_range.1).floor() as usize)
                .max(1);
            let mut phase = rng.random_range(0.0..2.0 * PI);
            for (i, s) in samples.iter_mut().enumerate() {
                phase += 2.0 * PI * track[i] / sample_rate as f64;
                let mut v = 0.0;
                let mut amp = 1.0;
                for k in 1..=harmonics {
                    if track[i] * k as f64 >= 0.98 * nyquist {
                        break;
                    }
                    v += amp * (k as f64 * phase).sin();
                    amp *= HARMONIC_DECAY;
                }
                *s = v * env[i];
            }
        }
        SourceKind::Chirp => {
            let (lo, hi) = spec.f0_range;
            let up: bool = rng.random();
            let (start, end) = if up { (lo, hi) } else { (hi, lo) };
            let mut phase = rng.random_range(0.0..2.0 * PI);
            for (i, s) in samples.iter_mut().enumerate() {
                let f = start + (end - start) * i as f64 / len as f64;
                phase += 2.0 * PI * f / sample_rate as f64;
                *s = phase.sin() * env[i];
            }
        }
        SourceKind::FilteredNoise => {
            let center = (spec.f0_range.0 * spec.f0_range.1).sqrt();
            let bw = (spec.f0_range.1 - spec.f0_range.0).max(center * 0.2);
            let q = (center / bw).max(0.7);
            let mut f1 = Biquad::bandpass(center, q, sample_rate);
            let mut f2 = Biquad::bandpass(center, q, sample_rate);
            for (i, s) in samples.iter_mut().enumerate() {
                let white: f64 = rng.random_range(-1.0..1.0);
                *s = f2.process(f1.process(white)) * env[i];
            }
        }
    }
    Ok(Waveform::new(samples, sample_rate))
}

/// One generated training example. The mixture is exactly the sample-wise
/// sum of `sources` plus `noise`.
#[derive(Debug, Clone)]
pub struct MixtureExample {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    pub noise: Option<Waveform>,
    pub snr_offsets: Vec<f64>,
    pub seed: u64,
}

/// Disjoint fundamental-frequency bands, one per speaker, spanning
/// 100-850 Hz with a guard gap between neighbours.
pub fn speaker_bands(j: usize) -> Vec<(f64, f64)> {
    let (f_min, f_max) = (100.0f64, 850.0f64);
    let ratio = (f_max / f_min).powf(1.0 / j as f64);
    (0..j)
        .map(|i| {
            let lo = f_min * ratio.powi(i as i32);
            let hi = lo * ratio.powf(0.72);
            (lo, hi)
        })
        .collect()
}

const SOURCE_RMS: f64 = 0.08;

/// Generation knobs shared by a whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub speakers: usize,
    pub duration: f64,
    /// Per-source gain offsets are drawn uniformly from this dB range.
    pub snr_range: (f64, f64),
    /// Noise floor SNR in dB relative to the summed sources; `None`
    /// disables noise.
    pub noise_snr_db: Option<f64>,
    pub sample_rate: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            speakers: 2,
            duration: 0.5,
            snr_range: (0.0, 3.0),
            noise_snr_db: None,
            sample_rate: 8000,
        }
    }
}

fn scale_to_rms(w: &mut Waveform, rms: f64) {
    let current = w.rms();
    if current > 0.0 {
        let s = rms / current;
        for x in w.samples.iter_mut() {
            *x *= s;
        }
    }
}

/// Generates one mixture deterministically from `seed`.
pub fn synth_mixture(seed: u64, gen: &GenParams) -> Result<MixtureExample> {
    if gen.speakers < 2 {
        return Err(Error::Config("mixtures need at least 2 speakers".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    let bands = speaker_bands(gen.speakers);
    let mut sources = Vec::with_capacity(gen.speakers);
    let mut offsets = Vec::with_capacity(gen.speakers);
    for band in bands.iter() {
        let spec = SourceSpec {
            kind: SourceKind::HarmonicVoice,
            f0_range: *band,
            duration: gen.duration,
            amplitude_mod: AmplitudeMod::default(),
            seed: master.random(),
        };
        let mut s = synth_source(&spec, gen.sample_rate)?;
        scale_to_rms(&mut s, SOURCE_RMS);
        let offset_db: f64 = if gen.snr_range.0 == gen.snr_range.1 {
            gen.snr_range.0
        } else {
            master.random_range(gen.snr_range.0..gen.snr_range.1)
        };
        let g = 10f64.powf(offset_db / 20.0);
        for x in s.samples.iter_mut() {
            *x *= g;
        }
        offsets.push(offset_db);
        sources.push(s);
    }
    let len = sources[0].len();
    let mut mixture = vec![0.0; len];
    for s in &sources {
        for (m, x) in mixture.iter_mut().zip(&s.samples) {
            *m += x;
        }
    }
    let noise = match gen.noise_snr_db {
        Some(snr) => {
            let mut n: Vec<f64> = (0..len).map(|_| master.random_range(-1.0..1.0)).collect();
            let src_energy: f64 = mixture.iter().map(|x| x * x).sum();
            let raw_energy: f64 = n.iter().map(|x| x * x).sum();
            let target = src_energy * 10f64.powf(-snr / 10.0);
            let s = (target / raw_energy).sqrt();
            for x in n.iter_mut() {
                *x *= s;
            }
            for (m, x) in mixture.iter_mut().zip(&n) {
                *m += x;
            }
            Some(Waveform::new(n, gen.sample_rate))
        }
        None => None,
    };
    for s in &sources {
        if s.energy() <= 0.0 {
            return Err(Error::Config(format!("seed {seed} produced a silent source")));
        }
    }
    Ok(MixtureExample {
        mixture: Waveform::new(mixture, gen.sample_rate),
        sources,
        noise,
        snr_offsets: offsets,
        seed,
    })
}

/// Dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split: {other}"))),
        }
    }
}

/// One manifest row: where an example comes from and optionally where its
/// audio is persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub seed: u64,
    pub duration: f64,
    /// Path stem of persisted audio, or `None` to regenerate from seed.
    pub path: Option<String>,
}

/// Seed-indexed dataset description.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub gen: GenParams,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Regenerates the example behind an entry.
    pub fn example(&self, entry: &ManifestEntry) -> Result<MixtureExample> {
        let gen = GenParams {
            duration: entry.duration,
            ..self.gen.clone()
        };
        synth_mixture(entry.seed, &gen)
    }
}

/// Counts and seed bases per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub counts: [usize; 3],
    pub seed_bases: [u64; 3],
    pub gen: GenParams,
}

impl DatasetSpec {
    pub fn new(train: usize, val: usize, test: usize, gen: GenParams) -> Self {
        Self {
            counts: [train, val, test],
            seed_bases: [1_000, 200_000, 300_000],
            gen,
        }
    }
}

/// Builds a manifest with disjoint per-split seed ranges.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Manifest> {
    if spec.counts.iter().any(|&c| c == 0) {
        return Err(Error::Config("every split needs at least one example".into()));
    }
    // Ranges must not overlap.
    let ranges: Vec<(u64, u64)> = spec
        .seed_bases
        .iter()
        .zip(spec.counts)
        .map(|(&b, c)| (b, b + c as u64))
        .collect();
    for i in 0..3 {
        for k in i + 1..3 {
            let (a, b) = ranges[i];
            let (c, d) = ranges[k];
            if a < d && c < b {
                return Err(Error::Config(format!(
                    "seed ranges overlap: [{a}, {b}) and [{c}, {d})"
                )));
            }
        }
    }
    let mut entries = Vec::new();
    for (si, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
        for k in 0..spec.counts[si] {
            entries.push(ManifestEntry {
                split,
                seed: spec.seed_bases[si] + k as u64,
                duration: spec.gen.duration,
                path: None,
            });
        }
    }
    Ok(Manifest {
        gen: spec.gen.clone(),
        entries,
    })
}

// ----------------------------------------------------------------------
// Plain-text manifest format
// ----------------------------------------------------------------------

/// Serializes a manifest to the plain-text format.
pub fn manifest_to_string(m: &Manifest) -> String {
    let mut out = String::new();
    out.push_str("# separation dataset manifest v1\n");
    out.push_str(&format!("sample_rate {}\n", m.gen.sample_rate));
    out.push_str(&format!("speakers {}\n", m.gen.speakers));
    out.push_str(&format!("snr_db {} {}\n", m.gen.snr_range.0, m.gen.snr_range.1));
    match m.gen.noise_snr_db {
        Some(db) => out.push_str(&format!("noise {db}\n")),
        None => out.push_str("noise off\n"),
    }
    for e in &m.entries {
        out.push_str(&format!(
            "entry {} {} {} {}\n",
            e.split.name(),
            e.seed,
            e.duration,
            e.path.as_deref().unwrap_or("-")
        ));
    }
    out
}

/// Parses the plain-text manifest format.
pub fn manifest_from_str(text: &str) -> Result<Manifest> {
    let mut gen = GenParams::default();
    let mut entries = Vec::new();
    let mut seen_rate = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap();
        let fail = |msg: &str| Error::Manifest(format!("line {}: {msg}", lineno + 1));
        match key {
            "sample_rate" => {
                gen.sample_rate = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| fail("bad sample_rate"))?;
                seen_rate = true;
            }
            "speakers" => {
                gen.speakers = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| fail("bad speakers"))?;
            }
            "snr_db" => {
                let lo = parts.next().and_then(|v| v.parse().ok());
                let hi = parts.next().and_then(|v| v.parse().ok());
                gen.snr_range = match (lo, hi) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(fail("bad snr_db")),
                };
            }
            "noise" => {
                let v = parts.next().ok_or_else(|| fail("bad noise"))?;
                gen.noise_snr_db = if v == "off" {
                    None
                } else {
                    Some(v.parse().map_err(|_| fail("bad noise value"))?)
                };
            }
            "entry" => {
                let split = Split::parse(parts.next().ok_or_else(|| fail("missing split"))?)?;
                let seed = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| fail("bad seed"))?;
                let duration = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| fail("bad duration"))?;
                let path = match parts.next() {
                    Some("-") | None => None,
                    Some(p) => Some(p.to_string()),
                };
                entries.push(ManifestEntry {
                    split,
                    seed,
                    duration,
                    path,
                });
            }
            other => return Err(fail(&format!("unknown key: {other}"))),
        }
    }
    if !seen_rate {
        return Err(Error::Manifest("missing sample_rate".into()));
    }
    // Seeds must be unique within a split.
    let mut seen = std::collections::BTreeSet::new();
    for e in &entries {
        if !seen.insert((e.split.name(), e.seed)) {
            return Err(Error::Manifest(format!(
                "duplicate seed {} in split {}",
                e.seed,
                e.split.name()
            )));
        }
    }
    if let Some(first) = entries.first() {
        gen.duration = first.duration;
    }
    Ok(Manifest { gen, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{istft, stft, StftConfig};
    use crate::objectives::si_snr_improvement;

    #[test]
    fn sources_are_deterministic() {
        let spec = SourceSpec {
            kind: SourceKind::HarmonicVoice,
            f0_range: (150.0, 250.0),
            duration: 0.5,
            amplitude_mod: AmplitudeMod::default(),
            seed: 42,
        };
        let a = synth_source(&spec, 8000).unwrap();
        let b = synth_source(&spec, 8000).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.len(), 4000);
    }

    #[test]
    fn one_second_is_8000_samples() {
        let spec = SourceSpec {
            kind: SourceKind::Chirp,
            f0_range: (300.0, 600.0),
            duration: 1.0,
            amplitude_mod: AmplitudeMod { rate_hz: 2.0, depth: 0.3 },
            seed: 1,
        };
        assert_eq!(synth_source(&spec, 8000).unwrap().len(), 8000);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SourceSpec {
            kind: SourceKind::HarmonicVoice,
            f0_range: (150.0, 250.0),
            duration: 0.5,
            amplitude_mod: AmplitudeMod::default(),
            seed: 0,
        };
        spec.duration = 0.0;
        assert!(synth_source(&spec, 8000).is_err());
        spec.duration = 0.5;
        spec.f0_range = (500.0, 100.0);
        assert!(synth_source(&spec, 8000).is_err());
        spec.f0_range = (100.0, 4500.0);
        assert!(synth_source(&spec, 8000).is_err());
    }

    #[test]
    fn fixed_f0_has_peaks_at_harmonics() {
        // DFT oracle over the raw signal: with f0 pinned at 200 Hz the
        // spectrum peaks at multiples of 200 Hz.
        let spec = SourceSpec {
            kind: SourceKind::HarmonicVoice,
            f0_range: (200.0, 200.0),
            duration: 0.5,
            amplitude_mod: AmplitudeMod { rate_hz: 0.0, depth: 0.0 },
            seed: 7,
        };
        let w = synth_source(&spec, 8000).unwrap();
        let n = w.len();
        let bin_hz = 8000.0 / n as f64; // 2 Hz
        let mag = |freq_bin: usize| -> f64 {
            let mut re = 0.0;
            let mut im = 0.0;
            for (i, x) in w.samples.iter().enumerate() {
                let th = 2.0 * PI * freq_bin as f64 * i as f64 / n as f64;
                re += x * th.cos();
                im -= x * th.sin();
            }
            (re * re + im * im).sqrt()
        };
        // Sample the spectrum on a 10 Hz grid up to 1.5 kHz.
        let grid: Vec<(usize, f64)> = (1..150)
            .map(|k| {
                let bin = (k as f64 * 10.0 / bin_hz).round() as usize;
                (bin, mag(bin))
            })
            .collect();
        let peak = grid.iter().cloned().fold((0usize, 0.0), |m, v| {
            if v.1 > m.1 {
                v
            } else {
                m
            }
        });
        let peak_hz = peak.0 as f64 * bin_hz;
        assert!(
            (peak_hz - 200.0).abs() < 15.0,
            "fundamental found at {peak_hz} Hz"
        );
        // Harmonics at 400 and 600 Hz dominate their neighbourhoods.
        for k in [2usize, 3] {
            let at = mag((k as f64 * 200.0 / bin_hz).round() as usize);
            let off = mag(((k as f64 * 200.0 + 55.0) / bin_hz).round() as usize);
            assert!(at > 5.0 * off, "harmonic {k}: {at} vs off-peak {off}");
        }
    }

    #[test]
    fn mixture_is_exact_sum() {
        let gen = GenParams::default();
        let ex = synth_mixture(11, &gen).unwrap();
        assert_eq!(ex.sources.len(), 2);
        assert!(ex.noise.is_none());
        // Summing the stored sources reproduces the mixture bit-exactly.
        let mut sum = vec![0.0; ex.mixture.len()];
        for s in &ex.sources {
            for (a, x) in sum.iter_mut().zip(&s.samples) {
                *a += x;
            }
        }
        let residual: Vec<f64> = ex
            .mixture
            .samples
            .iter()
            .zip(&sum)
            .map(|(m, s)| m - s)
            .collect();
        assert!(residual.iter().all(|&x| x == 0.0), "mixture identity violated");

        let noisy = GenParams { noise_snr_db: Some(18.0), ..GenParams::default() };
        let ex = synth_mixture(11, &noisy).unwrap();
        let mut sum = vec![0.0; ex.mixture.len()];
        for s in &ex.sources {
            for (a, x) in sum.iter_mut().zip(&s.samples) {
                *a += x;
            }
        }
        for (a, x) in sum.iter_mut().zip(&ex.noise.as_ref().unwrap().samples) {
            *a += x;
        }
        for (m, s) in ex.mixture.samples.iter().zip(&sum) {
            assert_eq!(m, s);
        }
    }

    #[test]
    fn equal_snr_range_means_equal_rms() {
        let gen = GenParams {
            snr_range: (0.0, 0.0),
            ..GenParams::default()
        };
        let ex = synth_mixture(3, &gen).unwrap();
        let r0 = ex.sources[0].rms();
        let r1 = ex.sources[1].rms();
        assert!((r0 - r1).abs() < 1e-12, "{r0} vs {r1}");
    }

    #[test]
    fn noise_energy_matches_requested_snr() {
        let gen = GenParams {
            noise_snr_db: Some(20.0),
            ..GenParams::default()
        };
        let ex = synth_mixture(5, &gen).unwrap();
        let noise = ex.noise.as_ref().unwrap();
        let mut srcsum = vec![0.0; ex.mixture.len()];
        for s in &ex.sources {
            for (a, b) in srcsum.iter_mut().zip(&s.samples) {
                *a += b;
            }
        }
        let src_energy: f64 = srcsum.iter().map(|x| x * x).sum();
        let ratio = noise.energy() / src_energy;
        assert!((ratio - 0.01).abs() < 0.0001, "ratio {ratio}");
    }

    #[test]
    fn mixtures_are_reproducible() {
        let gen = GenParams::default();
        let a = synth_mixture(17, &gen).unwrap();
        let b = synth_mixture(17, &gen).unwrap();
        assert_eq!(a.mixture.samples, b.mixture.samples);
        for (x, y) in a.sources.iter().zip(&b.sources) {
            assert_eq!(x.samples, y.samples);
        }
    }

    #[test]
    fn dataset_split_accounting() {
        let spec = DatasetSpec::new(200, 50, 50, GenParams::default());
        let m = build_dataset(&spec).unwrap();
        assert_eq!(m.entries.len(), 300);
        let mut seeds: Vec<u64> = m.entries.iter().map(|e| e.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 300, "seeds must be unique");
        assert_eq!(m.split_entries(Split::Train).len(), 200);
        assert_eq!(m.split_entries(Split::Val).len(), 50);
        assert_eq!(m.split_entries(Split::Test).len(), 50);
        // Regeneration is stable.
        let e = &m.entries[17];
        let a = m.example(e).unwrap();
        let b = m.example(e).unwrap();
        assert_eq!(a.mixture.samples, b.mixture.samples);
    }

    #[test]
    fn overlapping_seed_ranges_rejected() {
        let mut spec = DatasetSpec::new(100, 50, 50, GenParams::default());
        spec.seed_bases = [1000, 1050, 3000];
        assert!(build_dataset(&spec).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let spec = DatasetSpec::new(3, 2, 2, GenParams {
            noise_snr_db: Some(15.0),
            ..GenParams::default()
        });
        let m = build_dataset(&spec).unwrap();
        let text = manifest_to_string(&m);
        let back = manifest_from_str(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn manifest_rejects_duplicates_and_garbage() {
        assert!(manifest_from_str("entry train 1 0.5 -").is_err());
        let text = "sample_rate 8000\nentry train 1 0.5 -\nentry train 1 0.5 -\n";
        assert!(manifest_from_str(text).is_err());
        let text = "sample_rate 8000\nwhatever 3\n";
        assert!(manifest_from_str(text).is_err());
    }

    /// Ideal-ratio-mask oracle: builds masks from the true sources and
    /// checks that masked mixtures separate well. This pins down that the
    /// synthetic task is learnable.
    #[test]
    fn ideal_ratio_mask_achieves_over_10_db() {
        let cfg = StftConfig::default();
        let gen = GenParams {
            duration: 1.0,
            ..GenParams::default()
        };
        let mut improvements = Vec::new();
        for seed in [101u64, 202, 303, 404] {
            let ex = synth_mixture(seed, &gen).unwrap();
            let mix_spec = stft(&ex.mixture, &cfg).unwrap();
            let src_specs: Vec<_> = ex
                .sources
                .iter()
                .map(|s| stft(s, &cfg).unwrap())
                .collect();
            for (j, s) in ex.sources.iter().enumerate() {
                let mut est = mix_spec.clone();
                for t in 0..mix_spec.frame_count() {
                    for f in 0..mix_spec.bin_count() {
                        let power = |sp: &crate::dsp::ComplexSpectrogram| {
                            sp.planes[[0, t, f]].powi(2) + sp.planes[[1, t, f]].powi(2)
                        };
                        let total: f64 =
                            src_specs.iter().map(power).sum::<f64>() + 1e-12;
                        let mask = power(&src_specs[j]) / total;
                        est.planes[[0, t, f]] *= mask;
                        est.planes[[1, t, f]] *= mask;
                    }
                }
                let est_wave = istft(&est, &cfg, ex.mixture.len()).unwrap();
                improvements
                    .push(si_snr_improvement(&est_wave, s, &ex.mixture).unwrap());
            }
        }
        let mean = improvements.iter().sum::<f64>() / improvements.len() as f64;
        assert!(mean > 10.0, "IRM oracle SI-SNRi {mean} dB");
    }
}
