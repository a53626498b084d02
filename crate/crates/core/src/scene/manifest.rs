//! Dataset manifest: `manifest.csv` next to the scene files with columns
//! `file,split,kind,causal_track,label`.

use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{load_scene_csv, Scene};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "unknown split `{s}` (train, val, test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub file: String,
    pub split: Split,
    #[serde(default)]
    pub kind: String,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub causal_track: Option<String>,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub label: Option<String>,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<Option<String>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    Ok(s.filter(|s| !s.is_empty()))
}

/// Reads `dir/manifest.csv`.
pub fn load_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let file = File::open(&path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn save_manifest(dir: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.as_ref().join(MANIFEST_FILE))?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads every scene of one split in manifest order.
pub fn load_dataset(dir: impl AsRef<Path>, split: Split) -> Result<Vec<(Scene, ManifestEntry)>> {
    let dir = dir.as_ref();
    load_manifest(dir)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let path: PathBuf = dir.join(&e.file);
            let scene = load_scene_csv(&path)
                .map_err(|err| Error::Data(format!("{}: {err}", path.display())))?;
            Ok((scene, e))
        })
        .collect()
}
