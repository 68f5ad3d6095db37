use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::{read_feature_file, ClipPair, Modality};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub song_id: String,
    pub audio_path: PathBuf,
    pub video_path: PathBuf,
}

/// Tab-separated list of clips: `clip_id, song_id, audio_path, video_path`.
///
/// Lines starting with `#` are comments. Relative paths are resolved
/// against the directory containing the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            records,
            base_dir: base_dir.into(),
        };
        m.check_unique()?;
        Ok(m)
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .has_headers(false)
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| Error::Manifest(e.to_string()))?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            if row.len() == 1 && row[0].trim().is_empty() {
                continue;
            }
            if row.len() != 4 {
                return Err(Error::Manifest(format!(
                    "line {line}: expected 4 tab-separated fields, found {}",
                    row.len()
                )));
            }
            records.push(ManifestRecord {
                clip_id: row[0].to_string(),
                song_id: row[1].to_string(),
                audio_path: PathBuf::from(&row[2]),
                video_path: PathBuf::from(&row[3]),
            });
        }
        Self::new(records, base_dir)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# clip_id\tsong_id\taudio_path\tvideo_path\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.clip_id,
                r.song_id,
                r.audio_path.display(),
                r.video_path.display()
            ));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.clip_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate clip_id {:?}", r.clip_id)));
            }
        }
        Ok(())
    }

    /// Reject records whose feature files do not exist.
    pub fn validate_paths(&self) -> Result<()> {
        let dangling: Vec<String> = self
            .records
            .iter()
            .flat_map(|r| [&r.audio_path, &r.video_path])
            .map(|p| self.resolve(p))
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if dangling.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest(format!(
                "{} missing feature file(s): {}",
                dangling.len(),
                dangling.join(", ")
            )))
        }
    }

    /// Read every listed clip.
    pub fn load_pairs(&self) -> Result<Vec<ClipPair>> {
        self.validate_paths()?;
        self.records
            .iter()
            .map(|r| {
                let mut audio = read_feature_file(self.resolve(&r.audio_path))?;
                let mut video = read_feature_file(self.resolve(&r.video_path))?;
                for (seq, want) in [(&audio, Modality::Audio), (&video, Modality::Video)] {
                    if seq.modality != want {
                        return Err(Error::Manifest(format!(
                            "clip {}: {} file holds {} features",
                            r.clip_id, want, seq.modality
                        )));
                    }
                }
                audio.clip_id = r.clip_id.clone();
                video.clip_id = r.clip_id.clone();
                ClipPair::new(&r.clip_id, &r.song_id, audio, video)
            })
            .collect()
    }
}
