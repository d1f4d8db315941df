use std::process::Command;

use serde::{Deserialize, Serialize};

use super::config::{CodecBackend, CodecStage, OggEncoder};
use super::stages::{bitcrush, lowpass};
use super::DegradeError;
use crate::sfi_stft::Waveform;
use crate::wav::{read_wav, write_wav, WavFormat};

const SURROGATE_LOWPASS_TAPS: usize = 101;

/// Which codec a recipe applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "codec", rename_all = "lowercase")]
pub enum CodecChoice {
    Mp3 { kbps: f64 },
    Ogg { encoder: OggEncoder },
}

/// How a codec stage was actually realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecRealization {
    Surrogate,
    External,
    /// External tool failed and the surrogate was used instead.
    Fallback,
}

impl CodecChoice {
    /// Nominal bit rate driving the surrogate.
    pub fn nominal_kbps(&self, stage: &CodecStage) -> f64 {
        match *self {
            CodecChoice::Mp3 { kbps } => kbps,
            CodecChoice::Ogg { encoder: OggEncoder::Vorbis } => stage.surrogate.vorbis_kbps,
            CodecChoice::Ogg { encoder: OggEncoder::Opus } => stage.surrogate.opus_kbps,
        }
    }
}

/// Requantize at the mapped bit depth, then band-limit at the mapped cutoff.
/// Quantizing first keeps the stopband clean, as a decoder's output would be.
pub fn codec_surrogate(signal: &Waveform, kbps: f64, stage: &CodecStage) -> Waveform {
    let (bits, cutoff) = stage.surrogate.params(kbps);
    lowpass(&bitcrush(signal, bits), cutoff, SURROGATE_LOWPASS_TAPS)
}

fn fill(template: &str, input: &str, output: &str, choice: &CodecChoice, rate: u32) -> String {
    let (kbps, encoder) = match choice {
        CodecChoice::Mp3 { kbps } => (format!("{}", kbps.round() as i64), "mp3".to_string()),
        CodecChoice::Ogg { encoder } => (String::new(), format!("{encoder:?}").to_lowercase()),
    };
    template
        .replace("{in}", input)
        .replace("{out}", output)
        .replace("{kbps}", &kbps)
        .replace("{encoder}", &encoder)
        .replace("{rate}", &rate.to_string())
}

fn run_shell(cmd: &str) -> Result<(), DegradeError> {
    let status = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .output()
        .map_err(|e| DegradeError::ExternalToolFailed(format!("{cmd}: {e}")))?;
    if !status.status.success() {
        return Err(DegradeError::ExternalToolFailed(format!(
            "{cmd}: exit {:?}: {}",
            status.status.code(),
            String::from_utf8_lossy(&status.stderr).trim()
        )));
    }
    Ok(())
}

fn codec_external(signal: &Waveform, choice: &CodecChoice, encode: &str, decode: &str) -> Result<Waveform, DegradeError> {
    let dir = tempfile::tempdir().map_err(|e| DegradeError::ExternalToolFailed(e.to_string()))?;
    let raw = dir.path().join("in.wav");
    let ext = match choice {
        CodecChoice::Mp3 { .. } => "mp3",
        CodecChoice::Ogg { .. } => "ogg",
    };
    let coded = dir.path().join(format!("coded.{ext}"));
    let back = dir.path().join("out.wav");
    write_wav(&raw, signal, WavFormat::Float32).map_err(|e| DegradeError::ExternalToolFailed(e.to_string()))?;
    let p = |x: &std::path::Path| x.to_string_lossy().into_owned();
    run_shell(&fill(encode, &p(&raw), &p(&coded), choice, signal.sample_rate))?;
    run_shell(&fill(decode, &p(&coded), &p(&back), choice, signal.sample_rate))?;
    let out = read_wav(&back).map_err(|e| DegradeError::ExternalToolFailed(e.to_string()))?;
    if out.sample_rate != signal.sample_rate {
        return Err(DegradeError::ExternalToolFailed(format!(
            "decoder returned {} Hz instead of {} Hz",
            out.sample_rate, signal.sample_rate
        )));
    }
    // codecs pad or trim; keep the stage length-preserving
    let mut samples = out.samples;
    samples.resize(signal.len(), 0.0);
    Ok(Waveform::new(samples, signal.sample_rate))
}

/// Applies the selected codec with the configured backend.
pub fn codec_stage(signal: &Waveform, choice: &CodecChoice, stage: &CodecStage) -> Result<(Waveform, CodecRealization), DegradeError> {
    match &stage.backend {
        CodecBackend::Surrogate => Ok((codec_surrogate(signal, choice.nominal_kbps(stage), stage), CodecRealization::Surrogate)),
        CodecBackend::External { mp3_encode, mp3_decode, ogg_encode, ogg_decode, fallback_to_surrogate } => {
            let (enc, dec) = match choice {
                CodecChoice::Mp3 { .. } => (mp3_encode, mp3_decode),
                CodecChoice::Ogg { .. } => (ogg_encode, ogg_decode),
            };
            match codec_external(signal, choice, enc, dec) {
                Ok(w) => Ok((w, CodecRealization::External)),
                Err(_) if *fallback_to_surrogate => {
                    Ok((codec_surrogate(signal, choice.nominal_kbps(stage), stage), CodecRealization::Fallback))
                }
                Err(e) => Err(e),
            }
        }
    }
}
