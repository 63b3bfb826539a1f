//! LOSO splitting and the SDE/CDE label-mapping protocols.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetId, Manifest, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// CASME II sole-database, 5 classes.
    SdeCasme2_5,
    /// SAMM sole-database, 5 classes.
    SdeSamm5,
    /// CAS(ME)^3 part A sole-database, 3 classes.
    SdeCasme3_3,
    /// Composite 3-class task over SMIC-HS + CASME II + SAMM.
    Cde3,
    /// Identity mapping on whatever labels the manifest carries (used for
    /// the synthetic dataset).
    SdeNative,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Protocol::SdeCasme2_5,
        Protocol::SdeSamm5,
        Protocol::SdeCasme3_3,
        Protocol::Cde3,
        Protocol::SdeNative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::SdeCasme2_5 => "SDE_CASME2_5",
            Protocol::SdeSamm5 => "SDE_SAMM_5",
            Protocol::SdeCasme3_3 => "SDE_CASME3_3",
            Protocol::Cde3 => "CDE_3",
            Protocol::SdeNative => "SDE_NATIVE",
        }
    }

    /// Datasets a protocol requires; empty means "whatever is provided".
    pub fn required_datasets(self) -> Vec<DatasetId> {
        match self {
            Protocol::SdeCasme2_5 => vec![DatasetId::Casme2],
            Protocol::SdeSamm5 => vec![DatasetId::Samm],
            Protocol::SdeCasme3_3 => vec![DatasetId::Casme3A],
            Protocol::Cde3 => vec![DatasetId::SmicHs, DatasetId::Casme2, DatasetId::Samm],
            Protocol::SdeNative => vec![],
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownProtocol(s.to_string()))
    }
}

/// Three-class composite mapping (MEGC-style): happiness -> positive,
/// surprise stays, the negative emotions merge; positive/negative (native
/// SMIC labels) pass through.
fn map_cde3(label: &str) -> Option<&'static str> {
    match label {
        "happiness" | "positive" => Some("positive"),
        "surprise" => Some("surprise"),
        "disgust" | "repression" | "anger" | "contempt" | "fear" | "sadness" | "negative" => {
            Some("negative")
        }
        _ => None,
    }
}

fn keep_identity<'a>(label: &'a str, allowed: &[&str]) -> Option<&'a str> {
    allowed.contains(&label).then_some(label)
}

/// Result of applying a protocol's label mapping to one manifest.
#[derive(Debug, Clone)]
pub struct MappedManifest {
    pub manifest: Manifest,
    /// Excluded samples per unmapped label.
    pub excluded: BTreeMap<String, usize>,
}

/// Map labels per protocol; samples whose label has no image under the
/// mapping are excluded with per-label counts.
pub fn map_labels(manifest: &Manifest, protocol: Protocol) -> Result<MappedManifest> {
    let mut samples: Vec<Sample> = Vec::new();
    let mut excluded: BTreeMap<String, usize> = BTreeMap::new();
    for s in &manifest.samples {
        let mapped: Option<String> = match protocol {
            Protocol::Cde3 | Protocol::SdeCasme3_3 => map_cde3(&s.label).map(str::to_string),
            Protocol::SdeCasme2_5 => keep_identity(
                &s.label,
                &["happiness", "disgust", "repression", "surprise", "others"],
            )
            .map(str::to_string),
            Protocol::SdeSamm5 => keep_identity(
                &s.label,
                &["happiness", "anger", "contempt", "surprise", "others"],
            )
            .map(str::to_string),
            Protocol::SdeNative => Some(s.label.clone()),
        };
        match mapped {
            Some(label) => {
                let mut s = s.clone();
                s.label = label;
                samples.push(s);
            }
            None => {
                *excluded.entry(s.label.clone()).or_insert(0) += 1;
            }
        }
    }
    if !excluded.is_empty() {
        log::warn!(
            "{protocol}: excluded {} samples with unmapped labels {excluded:?}",
            excluded.values().sum::<usize>()
        );
    }
    let mut mapped = Manifest::from_samples(manifest.dataset_id, samples);
    // Fixed schema orders so folds and checkpoints agree on class indices.
    let schema: Vec<&str> = match protocol {
        Protocol::Cde3 | Protocol::SdeCasme3_3 => vec!["negative", "positive", "surprise"],
        Protocol::SdeCasme2_5 => vec!["disgust", "happiness", "others", "repression", "surprise"],
        Protocol::SdeSamm5 => vec!["anger", "contempt", "happiness", "others", "surprise"],
        Protocol::SdeNative => vec![],
    };
    if !schema.is_empty() {
        mapped.label_schema = schema.into_iter().map(str::to_string).collect();
    }
    Ok(MappedManifest {
        manifest: mapped,
        excluded,
    })
}

/// One leave-one-subject-out fold over sample indices.
#[derive(Debug, Clone)]
pub struct Fold {
    pub test_subject: String,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// One fold per distinct subject; together the test sets partition the
/// samples exactly.
pub fn loso_splits(samples: &[Sample]) -> Result<Vec<Fold>> {
    let mut subjects: Vec<String> = samples
        .iter()
        .map(|s| s.subject_key())
        .collect::<std::collections::HashSet<_>>()
        .into_iter()
        .collect();
    subjects.sort();
    if subjects.len() < 2 {
        return Err(Error::Config(format!(
            "LOSO needs >= 2 subjects, got {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .into_iter()
        .map(|subject| {
            let (test_indices, train_indices): (Vec<usize>, Vec<usize>) = (0..samples.len())
                .partition(|&i| samples[i].subject_key() == subject);
            Fold {
                test_subject: subject,
                train_indices,
                test_indices,
            }
        })
        .collect())
}
