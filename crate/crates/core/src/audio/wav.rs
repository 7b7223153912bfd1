use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

fn spec(sample_rate: u32) -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

fn quantize(v: f64) -> i16 {
    (v.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

/// Mono PCM16 RIFF bytes; samples outside [-1, 1] are clipped.
pub fn wav_bytes(w: &Waveform) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(Vec::new());
    {
        let mut wr = WavWriter::new(&mut cur, spec(w.sample_rate())).map_err(|e| Error::Wav(e.to_string()))?;
        for &v in w.samples() {
            wr.write_sample(quantize(v)).map_err(|e| Error::Wav(e.to_string()))?;
        }
        wr.finalize().map_err(|e| Error::Wav(e.to_string()))?;
    }
    Ok(cur.into_inner())
}

pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, wav_bytes(w)?).map_err(|e| Error::io(path, e))
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other.to_string()),
    })?;
    let s = reader.spec();
    if s.channels != 1 {
        return Err(Error::NonMono(s.channels));
    }
    if s.sample_format != SampleFormat::Int || s.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding(format!(
            "{:?} {}-bit",
            s.sample_format, s.bits_per_sample
        )));
    }
    let expected = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|r| r.map(|v| v as f64 / 32767.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Wav(format!("truncated or corrupt data: {e}")))?;
    if samples.len() != expected {
        return Err(Error::Wav(format!("truncated: {} of {expected} samples", samples.len())));
    }
    Waveform::new(samples, s.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_of_silence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        save_wav(&p, &Waveform::new(vec![0.0; 16_000], 16_000).unwrap()).unwrap();
        let w = load_wav(&p).unwrap();
        assert_eq!(w.len(), 16_000);
        assert!(w.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_within_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let xs: Vec<f64> = (0..5000).map(|i| ((i as f64) * 0.013).sin() * 0.9).collect();
        save_wav(&p, &Waveform::new(xs.clone(), 16_000).unwrap()).unwrap();
        let back = load_wav(&p).unwrap();
        let max = xs
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max <= 1.0 / 32768.0, "{max}");
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let mut spec = spec(16_000);
        spec.channels = 2;
        let mut w = WavWriter::create(&p, spec).unwrap();
        for _ in 0..20 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let err = load_wav(&p).unwrap_err();
        assert!(err.to_string().contains("non-mono"));
    }

    #[test]
    fn float_encoding_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&p), Err(Error::UnsupportedEncoding(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        let bytes = wav_bytes(&Waveform::new(vec![0.25; 1000], 16_000).unwrap()).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 501]).unwrap();
        assert!(load_wav(&p).is_err());
    }
}
