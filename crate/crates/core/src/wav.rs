//! RIFF/WAVE PCM16 reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::AudioBuffer;

const WAVE_FORMAT_PCM: u16 = 1;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn wav_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let bytes = fs::read(path)?;
    decode_wav(&bytes).map_err(|msg| wav_err(path, msg))
}

/// Decodes PCM16 little-endian WAV bytes, keeping the first channel.
pub fn decode_wav(bytes: &[u8]) -> std::result::Result<AudioBuffer, String> {
    if bytes.len() < 12 {
        return Err("truncated RIFF header".into());
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err("truncated fmt chunk".into());
                }
                let mut format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if format == WAVE_FORMAT_EXTENSIBLE {
                    if size < 40 || body + 26 > bytes.len() {
                        return Err("truncated extensible fmt chunk".into());
                    }
                    format = u16_at(bytes, body + 24);
                }
                if format != WAVE_FORMAT_PCM {
                    return Err(format!("unsupported encoding (format tag {format}), expected PCM"));
                }
                if bits != 16 {
                    return Err(format!("unsupported bit depth {bits}, expected 16"));
                }
                if channels == 0 || rate == 0 {
                    return Err("fmt chunk declares zero channels or zero sample rate".into());
                }
                fmt = Some((channels, rate, bits));
            }
            b"data" => {
                let (channels, rate, _) = fmt.ok_or("data chunk before fmt chunk")?;
                let end = body.checked_add(size).filter(|e| *e <= bytes.len());
                let end = end.ok_or("truncated data chunk")?;
                let frame = 2 * channels as usize;
                let samples = bytes[body..end]
                    .chunks_exact(frame)
                    .map(|f| i16::from_le_bytes([f[0], f[1]]) as f64 / 32768.0)
                    .collect();
                return Ok(AudioBuffer::new(samples, rate));
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(if fmt.is_none() {
        "missing fmt chunk".into()
    } else {
        "missing data chunk".into()
    })
}

/// Encodes mono PCM16 little-endian WAV bytes; samples are clipped to [-1, 1].
pub fn encode_wav(audio: &AudioBuffer) -> Vec<u8> {
    let data_len = audio.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&WAVE_FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate.to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for s in &audio.samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    fs::write(path, encode_wav(audio))?;
    Ok(())
}

/// Linear-interpolation resampling to `target_rate`.
pub fn resample_linear(audio: &AudioBuffer, target_rate: u32) -> AudioBuffer {
    if audio.sample_rate == target_rate || audio.samples.is_empty() {
        return AudioBuffer::new(audio.samples.clone(), target_rate);
    }
    let ratio = audio.sample_rate as f64 / target_rate as f64;
    let n_in = audio.samples.len();
    let n_out = ((n_in - 1) as f64 / ratio).floor() as usize + 1;
    let samples = (0..n_out)
        .map(|i| {
            let t = i as f64 * ratio;
            let k = t.floor() as usize;
            let frac = t - k as f64;
            let a = audio.samples[k];
            let b = audio.samples[(k + 1).min(n_in - 1)];
            a + (b - a) * frac
        })
        .collect();
    AudioBuffer::new(samples, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantizes_to_pcm16() {
        let audio = AudioBuffer::new(vec![0.0, 0.5, -0.5, 0.999, -1.0], 22050);
        let back = decode_wav(&encode_wav(&audio)).unwrap();
        assert_eq!(back.sample_rate, 22050);
        for (a, b) in audio.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
    }

    #[test]
    fn stereo_keeps_first_channel() {
        let mut bytes = encode_wav(&AudioBuffer::new(vec![0.25, -0.25], 44100));
        // Patch to 2 channels: the two samples become one stereo frame.
        bytes[22] = 2;
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.samples.len(), 1);
        assert!((back.samples[0] - 0.25).abs() < 1e-4);
    }

    #[test]
    fn rejects_truncated_and_non_pcm() {
        assert!(decode_wav(b"RIFF\0\0").unwrap_err().contains("truncated"));
        let mut bytes = encode_wav(&AudioBuffer::new(vec![0.1; 8], 22050));
        bytes[20] = 3; // IEEE float tag
        assert!(decode_wav(&bytes).unwrap_err().contains("PCM"));
        let bytes = encode_wav(&AudioBuffer::new(vec![0.1; 8], 22050));
        assert!(decode_wav(&bytes[..40]).is_err());
    }

    #[test]
    fn resample_halves_length() {
        let audio = AudioBuffer::new((0..44100).map(|i| (i as f64 * 0.01).sin() * 0.5).collect(), 44100);
        let out = resample_linear(&audio, 22050);
        assert_eq!(out.sample_rate, 22050);
        assert!((out.samples.len() as i64 - 22050).abs() <= 1);
    }
}
