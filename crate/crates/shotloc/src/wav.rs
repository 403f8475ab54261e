//! WAV input and output.

use std::io::{Read, Seek};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use shotloc_core::audio::AudioClip;

use crate::error::{Error, Result};

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io.to_string()),
        hound::Error::Unsupported => Error::UnsupportedFormat("unsupported WAV encoding".into()),
        hound::Error::FormatError(m) => Error::CorruptFile(m.into()),
        other => Error::CorruptFile(other.to_string()),
    }
}

/// Reads 16-bit PCM or 32-bit float WAV, one or two channels. Stereo is
/// averaged to mono and 16-bit samples are scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(map_hound)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode(reader, name)
}

pub fn read_wav<R: Read + Seek>(r: R, source: impl Into<String>) -> Result<AudioClip> {
    decode(WavReader::new(r).map_err(map_hound)?, source.into())
}

fn decode<R: Read>(reader: WavReader<R>, source: String) -> Result<AudioClip> {
    let spec = reader.spec();
    if !(1..=2).contains(&spec.channels) {
        return Err(Error::UnsupportedFormat(format!(
            "{} channels",
            spec.channels
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => return Err(Error::UnsupportedFormat(format!("{bits}-bit {fmt:?}"))),
    };
    let ch = spec.channels as usize;
    if !interleaved.len().is_multiple_of(ch) {
        return Err(Error::CorruptFile("truncated sample frame".into()));
    }
    let mono = interleaved
        .chunks_exact(ch)
        .map(|f| f.iter().sum::<f64>() / ch as f64)
        .collect();
    Ok(AudioClip::new(mono, spec.sample_rate, source)?)
}

/// Writes mono 32-bit float.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in &clip.samples {
        w.write_sample(s as f32).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)
}
