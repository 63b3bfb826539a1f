//! Sample manifests: one CSV row per expression clip.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetId {
    Casme2,
    Samm,
    SmicHs,
    Casme3A,
    Synth,
}

impl DatasetId {
    pub const ALL: [DatasetId; 5] = [
        DatasetId::Casme2,
        DatasetId::Samm,
        DatasetId::SmicHs,
        DatasetId::Casme3A,
        DatasetId::Synth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Casme2 => "CASME2",
            DatasetId::Samm => "SAMM",
            DatasetId::SmicHs => "SMIC_HS",
            DatasetId::Casme3A => "CASME3_A",
            DatasetId::Synth => "SYNTH",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset id {s:?}")))
    }
}

/// One expression clip. `apex_idx` is always resolved: rows without an apex
/// get one from `resolve_apex` at load time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub dataset_id: DatasetId,
    pub subject_id: String,
    pub clip_id: String,
    pub frames_dir: PathBuf,
    pub onset_idx: usize,
    pub apex_idx: usize,
    pub offset_idx: usize,
    pub label: String,
    pub is_macro: bool,
}

impl Sample {
    /// Subject key unique across datasets, for cross-database folds.
    pub fn subject_key(&self) -> String {
        format!("{}/{}", self.dataset_id, self.subject_id)
    }

    /// Frame image files inside `frames_dir`, sorted lexicographically.
    pub fn frame_paths(&self) -> Result<Vec<PathBuf>> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&self.frames_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && matches!(
                        p.extension().and_then(|e| e.to_str()),
                        Some("png") | Some("jpg") | Some("jpeg") | Some("bmp")
                    )
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Empty(format!(
                "no frame images in {}",
                self.frames_dir.display()
            )));
        }
        if self.offset_idx >= paths.len() {
            return Err(Error::Shape(format!(
                "offset_idx {} out of bounds for {} frames in {}",
                self.offset_idx,
                paths.len(),
                self.frames_dir.display()
            )));
        }
        Ok(paths)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub dataset_id: DatasetId,
    pub samples: Vec<Sample>,
    /// Ordered class names; every sample label is one of these.
    pub label_schema: Vec<String>,
}

impl Manifest {
    pub fn from_samples(dataset_id: DatasetId, samples: Vec<Sample>) -> Self {
        let mut schema: Vec<String> = samples
            .iter()
            .map(|s| s.label.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        schema.sort();
        Self {
            dataset_id,
            samples,
            label_schema: schema,
        }
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut keys: Vec<String> = self
            .samples
            .iter()
            .map(|s| s.subject_key())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        keys.sort();
        keys
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.label_schema
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Schema {
                label: label.to_string(),
                schema: self.label_schema.clone(),
            })
    }
}

/// Pick the apex index:
/// macro clip -> the pseudo-apex (onset + n - 1, capped at offset);
/// micro with a labelled apex -> that apex;
/// micro without -> the floor midpoint of onset and offset.
pub fn resolve_apex(
    onset_idx: usize,
    apex_idx: Option<usize>,
    offset_idx: usize,
    is_macro: bool,
    macro_pseudo_apex_n: usize,
) -> Result<usize> {
    if onset_idx > offset_idx {
        return Err(Error::Shape(format!(
            "onset_idx {onset_idx} > offset_idx {offset_idx}"
        )));
    }
    if macro_pseudo_apex_n == 0 {
        return Err(Error::Config("macro_pseudo_apex_n must be >= 1".into()));
    }
    let apex = if is_macro {
        (onset_idx + macro_pseudo_apex_n - 1).min(offset_idx)
    } else {
        match apex_idx {
            Some(a) => a,
            None => (onset_idx + offset_idx) / 2,
        }
    };
    if apex < onset_idx || apex > offset_idx {
        return Err(Error::Shape(format!(
            "apex {apex} outside [{onset_idx}, {offset_idx}]"
        )));
    }
    Ok(apex)
}

pub const MANIFEST_HEADER: [&str; 9] = [
    "dataset_id",
    "subject_id",
    "clip_id",
    "frames_dir",
    "onset_idx",
    "apex_idx",
    "offset_idx",
    "label",
    "is_macro",
];

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Load a manifest CSV. Relative `frames_dir` entries are resolved against
/// the manifest's own directory; rows missing apex_idx get one from
/// `resolve_apex`.
pub fn load_manifest(
    path: &Path,
    dataset_id: DatasetId,
    macro_pseudo_apex_n: usize,
) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_error(path, 1, e.to_string()))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| parse_error(path, 1, e.to_string()))?;
        let got: Vec<&str> = headers.iter().collect();
        if got != MANIFEST_HEADER {
            return Err(parse_error(
                path,
                1,
                format!("header {got:?}, expected {MANIFEST_HEADER:?}"),
            ));
        }
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let record = record.map_err(|e| parse_error(path, line, e.to_string()))?;
        if record.len() != MANIFEST_HEADER.len() {
            return Err(parse_error(
                path,
                line,
                format!("{} fields, expected {}", record.len(), MANIFEST_HEADER.len()),
            ));
        }
        let field = |idx: usize| record.get(idx).unwrap_or("");
        let row_dataset: DatasetId = field(0)
            .parse()
            .map_err(|e: Error| parse_error(path, line, e.to_string()))?;
        if row_dataset != dataset_id {
            return Err(parse_error(
                path,
                line,
                format!("row dataset {row_dataset} does not match requested {dataset_id}"),
            ));
        }
        let parse_idx = |idx: usize, name: &str| -> Result<usize> {
            field(idx)
                .parse::<usize>()
                .map_err(|_| parse_error(path, line, format!("bad {name} {:?}", field(idx))))
        };
        let onset_idx = parse_idx(4, "onset_idx")?;
        let apex_raw = if field(5).is_empty() {
            None
        } else {
            Some(parse_idx(5, "apex_idx")?)
        };
        let offset_idx = parse_idx(6, "offset_idx")?;
        let label = field(7).to_string();
        if label.is_empty() {
            return Err(parse_error(path, line, "empty label"));
        }
        let is_macro = match field(8) {
            "true" | "1" => true,
            "false" | "0" => false,
            other => return Err(parse_error(path, line, format!("bad is_macro {other:?}"))),
        };
        let apex_idx = resolve_apex(onset_idx, apex_raw, offset_idx, is_macro, macro_pseudo_apex_n)
            .map_err(|e| parse_error(path, line, e.to_string()))?;
        let subject_id = field(1).to_string();
        let clip_id = field(2).to_string();
        if !seen.insert((subject_id.clone(), clip_id.clone())) {
            return Err(parse_error(
                path,
                line,
                format!("duplicate (subject_id, clip_id) = ({subject_id}, {clip_id})"),
            ));
        }
        let frames_dir = {
            let raw = PathBuf::from(field(3));
            if raw.is_absolute() {
                raw
            } else {
                base.join(raw)
            }
        };
        samples.push(Sample {
            dataset_id: row_dataset,
            subject_id,
            clip_id,
            frames_dir,
            onset_idx,
            apex_idx,
            offset_idx,
            label,
            is_macro,
        });
    }
    Ok(Manifest::from_samples(dataset_id, samples))
}

/// Write a manifest CSV with resolved apex indices.
pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(MANIFEST_HEADER)?;
    for s in &manifest.samples {
        writer.write_record([
            s.dataset_id.as_str(),
            &s.subject_id,
            &s.clip_id,
            &s.frames_dir.display().to_string(),
            &s.onset_idx.to_string(),
            &s.apex_idx.to_string(),
            &s.offset_idx.to_string(),
            &s.label,
            if s.is_macro { "true" } else { "false" },
        ])?;
    }
    writer.flush()?;
    Ok(())
}
