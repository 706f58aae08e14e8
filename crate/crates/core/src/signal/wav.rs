//! Minimal RIFF/WAVE reader and 16-bit PCM writer.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{AudioTrack, Result, SignalError};

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct FmtChunk {
    format_tag: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Reads a PCM WAV file (16-bit integer or 32-bit float) and averages all
/// channels down to mono. The track id is the file stem.
pub fn load_wav(path: impl AsRef<Path>, label: usize) -> Result<AudioTrack> {
    let path = path.as_ref();
    let display = path.display().to_string();
    if !path.exists() {
        return Err(SignalError::MissingFile(display));
    }
    let bytes = fs::read(path).map_err(|source| SignalError::Io {
        path: display.clone(),
        source,
    })?;
    let malformed = |reason: &str| SignalError::MalformedWav {
        path: display.clone(),
        reason: reason.to_string(),
    };

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing RIFF/WAVE header"));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| malformed("chunk extends past end of file"))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(malformed("fmt chunk too short"));
                }
                let mut format_tag = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes([body[14], body[15]]);
                if format_tag == FORMAT_EXTENSIBLE {
                    // Sub-format GUID starts at offset 24; its first two bytes carry the tag.
                    if body.len() < 26 {
                        return Err(malformed("extensible fmt chunk too short"));
                    }
                    format_tag = u16::from_le_bytes([body[24], body[25]]);
                }
                fmt = Some(FmtChunk {
                    format_tag,
                    channels,
                    sample_rate,
                    bits,
                });
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word aligned.
        pos = body_end + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| malformed("no fmt chunk"))?;
    let data = data.ok_or_else(|| malformed("no data chunk"))?;
    if fmt.channels == 0 {
        return Err(malformed("zero channels"));
    }
    if fmt.sample_rate == 0 {
        return Err(malformed("zero sample rate"));
    }
    let bytes_per_sample = match (fmt.format_tag, fmt.bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_IEEE_FLOAT, 32) => 4,
        (format_tag, bits) => {
            return Err(SignalError::UnsupportedEncoding {
                path: display,
                format_tag,
                bits,
            })
        }
    };
    let frame_bytes = bytes_per_sample * fmt.channels as usize;
    let n_frames = data.len() / frame_bytes;
    if n_frames == 0 {
        return Err(SignalError::EmptyPayload(display));
    }

    let channels = fmt.channels as usize;
    let mut samples = Vec::with_capacity(n_frames);
    for frame in data.chunks_exact(frame_bytes) {
        let mut acc = 0.0;
        for ch in frame.chunks_exact(bytes_per_sample) {
            acc += match bytes_per_sample {
                2 => i16::from_le_bytes([ch[0], ch[1]]) as f64 / 32768.0,
                _ => f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]) as f64,
            };
        }
        samples.push(acc / channels as f64);
    }

    let track_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| display.clone());
    AudioTrack::new(track_id, samples, fmt.sample_rate, label).map_err(|e| match e {
        SignalError::InvalidTrack { reason, .. } => SignalError::MalformedWav {
            path: display,
            reason,
        },
        other => other,
    })
}

/// Quantizes a sample in [-1, 1] to a signed 16-bit integer.
pub(crate) fn quantize_i16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a mono 16-bit PCM WAV file.
pub fn write_wav_pcm16(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let data_len = (samples.len() * 2) as u32;
    let mut buf = Vec::with_capacity(44 + data_len as usize);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes());
    buf.extend_from_slice(&sample_rate.to_le_bytes());
    buf.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes());
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        buf.extend_from_slice(&quantize_i16(s).to_le_bytes());
    }
    let io_err = |source| SignalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wav_bytes(format_tag: u16, channels: u16, bits: u16, payload: &[u8]) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"RIFF");
        buf.extend_from_slice(&(36 + payload.len() as u32).to_le_bytes());
        buf.extend_from_slice(b"WAVE");
        buf.extend_from_slice(b"fmt ");
        buf.extend_from_slice(&16u32.to_le_bytes());
        buf.extend_from_slice(&format_tag.to_le_bytes());
        buf.extend_from_slice(&channels.to_le_bytes());
        buf.extend_from_slice(&8000u32.to_le_bytes());
        let block = channels * bits / 8;
        buf.extend_from_slice(&(8000 * block as u32).to_le_bytes());
        buf.extend_from_slice(&block.to_le_bytes());
        buf.extend_from_slice(&bits.to_le_bytes());
        buf.extend_from_slice(b"data");
        buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        buf.extend_from_slice(payload);
        buf
    }

    #[test]
    fn pcm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let payload: Vec<u8> = [0i16, 16384, -16384]
            .iter()
            .flat_map(|s| s.to_le_bytes())
            .collect();
        fs::write(&path, wav_bytes(1, 1, 16, &payload)).unwrap();
        let track = load_wav(&path, 2).unwrap();
        assert_eq!(track.samples, vec![0.0, 0.5, -0.5]);
        assert_eq!(track.sample_rate, 8000);
        assert_eq!(track.label, 2);
        assert_eq!(track.track_id, "a");
    }

    #[test]
    fn stereo_float_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let payload: Vec<u8> = [1.0f32, 0.0]
            .iter()
            .flat_map(|s| s.to_le_bytes())
            .collect();
        fs::write(&path, wav_bytes(3, 2, 32, &payload)).unwrap();
        let track = load_wav(&path, 0).unwrap();
        assert_eq!(track.samples, vec![0.5]);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_wav(dir.path().join("nope.wav"), 0),
            Err(SignalError::MissingFile(_))
        ));

        let garbage = dir.path().join("garbage.wav");
        fs::write(&garbage, b"not a wav file at all").unwrap();
        assert!(matches!(
            load_wav(&garbage, 0),
            Err(SignalError::MalformedWav { .. })
        ));

        // A-law (format tag 6) is a compressed encoding.
        let alaw = dir.path().join("alaw.wav");
        fs::write(&alaw, wav_bytes(6, 1, 8, &[1, 2, 3])).unwrap();
        assert!(matches!(
            load_wav(&alaw, 0),
            Err(SignalError::UnsupportedEncoding { format_tag: 6, .. })
        ));

        let empty = dir.path().join("empty.wav");
        fs::write(&empty, wav_bytes(1, 1, 16, &[])).unwrap();
        assert!(matches!(
            load_wav(&empty, 0),
            Err(SignalError::EmptyPayload(_))
        ));
    }

    #[test]
    fn pcm16_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ints: Vec<i16> = (0..4000).map(|_| rng.random::<i16>()).collect();
        let samples: Vec<f64> = ints.iter().map(|&i| i as f64 / 32768.0).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        write_wav_pcm16(&path, &samples, 4000).unwrap();
        let track = load_wav(&path, 0).unwrap();
        let back: Vec<i16> = track.samples.iter().map(|&s| quantize_i16(s)).collect();
        assert_eq!(back, ints);
        // Rewriting the reloaded track reproduces the file byte for byte.
        let path2 = dir.path().join("rt2.wav");
        write_wav_pcm16(&path2, &track.samples, 4000).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }
}
