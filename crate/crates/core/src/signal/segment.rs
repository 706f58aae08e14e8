use super::{AudioSegment, AudioTrack, Result, SignalError};

/// Segments cut from a track set, plus the number of tracks that were too
/// short to yield a single segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub segments: Vec<AudioSegment>,
    pub skipped_tracks: usize,
}

/// Cuts every track into windows of `segment_len` seconds starting every
/// `segment_len - overlap` seconds. Trailing partial windows are dropped.
pub fn segment_tracks(
    tracks: &[AudioTrack],
    segment_len: f64,
    overlap: f64,
) -> Result<Segmentation> {
    if !(segment_len > 0.0) || !(overlap >= 0.0) || overlap >= segment_len {
        return Err(SignalError::InvalidSegmentation(format!(
            "need 0 <= overlap ({overlap}) < segment_len ({segment_len})"
        )));
    }
    let mut segments = Vec::new();
    let mut skipped_tracks = 0;
    for track in tracks {
        let sr = track.sample_rate as f64;
        let len = (segment_len * sr).round() as usize;
        let hop = ((segment_len - overlap) * sr).round() as usize;
        if len == 0 || hop == 0 {
            return Err(SignalError::InvalidSegmentation(format!(
                "segment of {segment_len} s with overlap {overlap} s is below one sample at {sr} Hz"
            )));
        }
        let n = track.samples.len();
        if n < len {
            log::warn!(
                "track {} ({:.2} s) shorter than one segment; skipped",
                track.track_id,
                track.duration()
            );
            skipped_tracks += 1;
            continue;
        }
        let count = (n - len) / hop + 1;
        for index in 0..count {
            let start = index * hop;
            segments.push(AudioSegment {
                parent_track_id: track.track_id.clone(),
                index,
                offset: start as f64 / sr,
                duration: len as f64 / sr,
                samples: track.samples[start..start + len].to_vec(),
                sample_rate: track.sample_rate,
                label: track.label,
            });
        }
    }
    Ok(Segmentation {
        segments,
        skipped_tracks,
    })
}
