use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct WavData {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

fn decode<R: std::io::Read>(reader: hound::WavReader<R>) -> std::result::Result<WavData, String> {
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(format!("expected mono audio, got {} channels", spec.channels));
    }
    if spec.sample_rate == 0 {
        return Err("sample rate is zero".into());
    }
    let samples: std::result::Result<Vec<f64>, hound::Error> = match spec.sample_format {
        hound::SampleFormat::Int => {
            if spec.bits_per_sample == 0 || spec.bits_per_sample > 32 {
                return Err(format!("unsupported bit depth {}", spec.bits_per_sample));
            }
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader.into_samples::<i32>().map(|s| s.map(|v| v as f64 * scale)).collect()
        }
        hound::SampleFormat::Float => reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect(),
    };
    let samples = samples.map_err(|e| e.to_string())?;
    if samples.iter().any(|v| !v.is_finite()) {
        return Err("non-finite sample".into());
    }
    Ok(WavData {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Decodes an in-memory WAV file (mono, integer PCM or 32-bit float).
pub fn decode_wav(bytes: &[u8]) -> Result<WavData> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| Error::Data(format!("wav: {e}")))?;
    decode(reader).map_err(|m| Error::Data(format!("wav: {m}")))
}

pub fn read_wav(path: &Path) -> Result<WavData> {
    let reader = hound::WavReader::open(path).map_err(|source| Error::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    decode(reader).map_err(|m| Error::Data(format!("{}: {m}", path.display())))
}

/// Quantizes to 16-bit PCM with saturation.
pub fn quantize_i16(samples: &[f64]) -> Vec<i16> {
    samples
        .iter()
        .map(|v| (v * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16)
        .collect()
}

pub fn write_wav_i16(path: &Path, samples: &[i16], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for s in samples {
        writer.write_sample(*s).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Writes 16-bit PCM; values are quantized with saturation.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    write_wav_i16(path, &quantize_i16(samples), sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let x: Vec<f64> = (0..100).map(|i| (i as f64 - 50.0) / 64.0 / 2.0).collect();
        write_wav(&path, &x, 8000).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 8000);
        let q: Vec<f64> = quantize_i16(&x).iter().map(|v| *v as f64 / 32768.0).collect();
        assert_eq!(back.samples, q);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(decode_wav(&bytes).unwrap(), back);
    }

    #[test]
    fn garbage_is_an_error() {
        assert!(decode_wav(b"RIFF\x00\x00").is_err());
        assert!(decode_wav(&[]).is_err());
    }

    #[test]
    fn stereo_is_rejected() {
        let mut buf = Cursor::new(Vec::new());
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(decode_wav(buf.get_ref()).is_err());
    }
}
