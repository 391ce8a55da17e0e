//! Mono 8 kHz WAV input/output.

use anyhow::{bail, Context};
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use std::path::Path;

use scalesep_core::Waveform;

pub const REQUIRED_RATE: u32 = 8000;

/// Sample encoding for written files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavEncoding {
    #[default]
    Float32,
    Pcm16,
}

impl std::str::FromStr for WavEncoding {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "float" | "float32" => Ok(WavEncoding::Float32),
            "pcm16" => Ok(WavEncoding::Pcm16),
            other => bail!("unknown encoding '{other}' (use float or pcm16)"),
        }
    }
}

/// Reads a mono 8 kHz WAV file (float32 or 16-bit PCM).
pub fn read_wav(path: &Path) -> anyhow::Result<Waveform> {
    let reader =
        WavReader::open(path).with_context(|| format!("opening {}", path.display()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        bail!(
            "{}: expected mono input, got {} channels",
            path.display(),
            spec.channels
        );
    }
    if spec.sample_rate != REQUIRED_RATE {
        bail!(
            "{}: unsupported sample rate {} (this tool operates at {REQUIRED_RATE} Hz)",
            path.display(),
            spec.sample_rate
        );
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()?,
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()?,
        (fmt, bits) => bail!(
            "{}: unsupported sample format {fmt:?}/{bits} bits",
            path.display()
        ),
    };
    if samples.is_empty() {
        bail!("{}: file holds no samples", path.display());
    }
    Ok(Waveform::new(samples, REQUIRED_RATE))
}

/// Writes a waveform as a mono WAV file.
pub fn write_wav(path: &Path, wave: &Waveform, encoding: WavEncoding) -> anyhow::Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Float32 => 32,
            WavEncoding::Pcm16 => 16,
        },
        sample_format: match encoding {
            WavEncoding::Float32 => SampleFormat::Float,
            WavEncoding::Pcm16 => SampleFormat::Int,
        },
    };
    let mut writer =
        WavWriter::create(path, spec).with_context(|| format!("creating {}", path.display()))?;
    match encoding {
        WavEncoding::Float32 => {
            for &s in &wave.samples {
                writer.write_sample(s as f32)?;
            }
        }
        WavEncoding::Pcm16 => {
            for &s in &wave.samples {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v)?;
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
