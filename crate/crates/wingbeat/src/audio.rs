//! WAV and PNG files.

use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use wingbeat_core::dsp::{pcm16_to_f64, AudioBuffer, GrayImage};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write_bytes;

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads an integer or float WAV file, averaging channels to mono.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => format_err(path, other),
    })?;
    decode(reader, path)
}

pub fn decode_wav_bytes(bytes: &[u8]) -> Result<AudioBuffer> {
    let path = Path::new("<memory>");
    decode(
        WavReader::new(Cursor::new(bytes)).map_err(|e| format_err(path, e))?,
        path,
    )
}

fn decode<R: std::io::Read>(reader: WavReader<R>, path: &Path) -> Result<AudioBuffer> {
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(pcm16_to_f64))
            .collect::<std::result::Result<_, _>>(),
        (SampleFormat::Int, bits) if bits <= 32 => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
        }
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>(),
        (format, bits) => return Err(format_err(path, format!("unsupported {format:?} {bits}-bit WAV"))),
    }
    .map_err(|e| format_err(path, e))?;
    let mono = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    Ok(AudioBuffer::new(mono, spec.sample_rate)?)
}

/// 16-bit mono WAV bytes.
pub fn encode_wav_pcm16(samples: &[i16], sample_rate_hz: u32) -> Result<Vec<u8>> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: sample_rate_hz,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    let mut writer = WavWriter::new(&mut cursor, spec).map_err(|e| format_err(Path::new("<memory>"), e))?;
    for &s in samples {
        writer
            .write_sample(s)
            .map_err(|e| format_err(Path::new("<memory>"), e))?;
    }
    writer.finalize().map_err(|e| format_err(Path::new("<memory>"), e))?;
    Ok(cursor.into_inner())
}

pub fn write_wav_pcm16(path: &Path, samples: &[i16], sample_rate_hz: u32) -> Result<()> {
    atomic_write_bytes(path, &encode_wav_pcm16(samples, sample_rate_hz)?)
}

pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    write_wav_pcm16(path, &audio.to_pcm16(), audio.sample_rate_hz())
}

pub fn encode_png(image: &GrayImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| format_err(Path::new("<png>"), e);
    let mut writer = encoder.write_header().map_err(to_err)?;
    writer.write_image_data(&image.pixels).map_err(to_err)?;
    writer.finish().map_err(to_err)?;
    Ok(out)
}

pub fn write_png(path: &Path, image: &GrayImage) -> Result<()> {
    atomic_write_bytes(path, &encode_png(image)?)
}
