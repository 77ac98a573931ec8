//! Dataset manifests: a JSON document naming the dataset and listing one
//! feature file per video, with paths relative to the manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssalign_core::data::{DomainDataset, FrameFeatureVideo};

use crate::features::{read_video_features, write_video_features};
use crate::{read_file, write_file, IoError, IoResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub label: usize,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub videos: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> IoResult<Self> {
        let bytes = read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: &Path) -> IoResult<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        text.push('\n');
        write_file(path, text.as_bytes())
    }
}

fn video_err(id: &str, msg: String) -> IoError {
    IoError::Video {
        id: id.to_string(),
        msg,
    }
}

/// Loads every feature file of a manifest and checks it against the declared
/// label, frame count, dimension and class count.
pub fn load_manifest(path: &Path) -> IoResult<DomainDataset> {
    let manifest = Manifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let file = base.join(&entry.path);
        let features = read_video_features(&file).map_err(|e| video_err(&entry.id, e.to_string()))?;
        let (n, d) = features.frames.shape();
        if n != entry.n_frames {
            return Err(video_err(
                &entry.id,
                format!("{} has {n} frames, manifest declares {}", file.display(), entry.n_frames),
            ));
        }
        if d != manifest.feature_dim {
            return Err(video_err(
                &entry.id,
                format!(
                    "{} has {d}-dim features, manifest declares {}",
                    file.display(),
                    manifest.feature_dim
                ),
            ));
        }
        if entry.label >= manifest.num_classes {
            return Err(video_err(
                &entry.id,
                format!("label {} is not below {} classes", entry.label, manifest.num_classes),
            ));
        }
        if features.label != entry.label {
            return Err(video_err(
                &entry.id,
                format!(
                    "{} stores label {}, manifest declares {}",
                    file.display(),
                    features.label,
                    entry.label
                ),
            ));
        }
        videos.push(FrameFeatureVideo {
            id: entry.id.clone(),
            label: entry.label,
            frames: features.frames,
        });
    }
    let dataset = DomainDataset {
        name: manifest.name,
        num_classes: manifest.num_classes,
        feature_dim: manifest.feature_dim,
        videos,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes `dataset` as `<dir>/<stem>.json` with feature files under
/// `<dir>/<stem>/`. Returns the manifest path.
pub fn write_dataset(dataset: &DomainDataset, dir: &Path, stem: &str) -> IoResult<PathBuf> {
    let mut entries = Vec::with_capacity(dataset.videos.len());
    for video in &dataset.videos {
        let rel = format!("{stem}/{}.fsvd", video.id);
        write_video_features(video, &dir.join(&rel))?;
        entries.push(ManifestEntry {
            id: video.id.clone(),
            path: rel,
            label: video.label,
            n_frames: video.num_frames(),
        });
    }
    let manifest = Manifest {
        name: dataset.name.clone(),
        num_classes: dataset.num_classes,
        feature_dim: dataset.feature_dim,
        videos: entries,
    };
    let path = dir.join(format!("{stem}.json"));
    manifest.write(&path)?;
    Ok(path)
}
