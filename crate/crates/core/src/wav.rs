//! Mono WAV input/output (PCM16, PCM24, 32-bit float).

use std::path::Path;

use thiserror::Error;

use crate::sfi_stft::Waveform;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("{path}: {source}")]
    Io { path: String, source: hound::Error },
    #[error("{path}: expected mono audio, found {channels} channels")]
    MultiChannel { path: String, channels: u16 },
    #[error("{path}: unsupported sample format ({bits}-bit {format:?})")]
    UnsupportedFormat { path: String, bits: u16, format: hound::SampleFormat },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavFormat {
    Pcm16,
    Pcm24,
    #[default]
    Float32,
}

fn io_err(path: &Path) -> impl FnOnce(hound::Error) -> WavError + '_ {
    move |source| WavError::Io { path: path.display().to_string(), source }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, WavError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(io_err(path))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(WavError::MultiChannel { path: path.display().to_string(), channels: spec.channels });
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(io_err(path))?,
        (hound::SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = (1i64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(io_err(path))?
        }
        (format, bits) => {
            return Err(WavError::UnsupportedFormat { path: path.display().to_string(), bits, format })
        }
    };
    Ok(Waveform::new(samples, spec.sample_rate))
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, format: WavFormat) -> Result<(), WavError> {
    let path = path.as_ref();
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, hound::SampleFormat::Int),
        WavFormat::Pcm24 => (24, hound::SampleFormat::Int),
        WavFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec { channels: 1, sample_rate: w.sample_rate, bits_per_sample: bits, sample_format };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io_err(path))?;
    match format {
        WavFormat::Float32 => {
            for &s in &w.samples {
                writer.write_sample(s as f32).map_err(io_err(path))?;
            }
        }
        WavFormat::Pcm16 | WavFormat::Pcm24 => {
            let max = ((1i64 << (bits - 1)) - 1) as f64;
            for &s in &w.samples {
                let v = (s * (max + 1.0)).round().clamp(-max - 1.0, max) as i32;
                writer.write_sample(v).map_err(io_err(path))?;
            }
        }
    }
    writer.finalize().map_err(io_err(path))
}
