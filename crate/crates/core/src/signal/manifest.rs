use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_wav, synthesize_track, AudioTrack, Result, SignalError, SynthesisSpec};

/// Where a track's samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrackSource {
    /// WAV file, relative to the manifest's directory unless absolute.
    File { path: PathBuf },
    /// Regenerated from the manifest's synthesis spec with the given seed.
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub track_id: String,
    pub label: usize,
    #[serde(flatten)]
    pub source: TrackSource,
}

/// Dataset manifest: the track list plus class names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthesisSpec>,
    pub tracks: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(SignalError::MissingFile(path.display().to_string()));
        }
        let text = fs::read_to_string(path).map_err(|source| SignalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| SignalError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|source| SignalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Loads every track. `base` resolves relative WAV paths.
    pub fn load_tracks(&self, base: &Path) -> Result<Vec<AudioTrack>> {
        self.tracks
            .iter()
            .map(|entry| {
                if entry.label >= self.class_names.len() {
                    return Err(SignalError::Manifest(format!(
                        "track {} has label {} but only {} classes are named",
                        entry.track_id,
                        entry.label,
                        self.class_names.len()
                    )));
                }
                let mut track = match &entry.source {
                    TrackSource::File { path } => {
                        let full = if path.is_absolute() {
                            path.clone()
                        } else {
                            base.join(path)
                        };
                        load_wav(full, entry.label)?
                    }
                    TrackSource::Synthetic { seed } => {
                        let spec = self.synthesis.as_ref().ok_or_else(|| {
                            SignalError::Manifest(format!(
                                "track {} is synthetic but the manifest has no synthesis spec",
                                entry.track_id
                            ))
                        })?;
                        spec.validate()?;
                        let samples = synthesize_track(spec, entry.label, *seed)?;
                        AudioTrack::new(entry.track_id.clone(), samples, spec.sample_rate, entry.label)?
                    }
                };
                track.track_id = entry.track_id.clone();
                Ok(track)
            })
            .collect()
    }
}
