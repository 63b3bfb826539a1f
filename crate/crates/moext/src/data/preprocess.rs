//! Preprocessing: detect landmarks on raw frames, align and crop to the
//! canonical 224x224 face, and emit a processed manifest.

use std::path::Path;

use crate::error::{Error, Result};

use super::align::align_and_crop;
use super::imageio::{load_image, save_image};
use super::landmarks::detect_landmarks;
use super::manifest::{save_manifest, Manifest, Sample};

/// Outcome of preprocessing one manifest.
pub struct PreprocessOutcome {
    pub manifest: Manifest,
    /// Samples dropped because landmark detection failed on a frame.
    pub skipped: usize,
}

/// Align each sample's onset and apex frames and write them (plus a new
/// manifest) under `out_dir`. Samples whose landmark detection fails are
/// skipped with a logged warning and counted, never silently dropped.
pub fn preprocess_manifest(manifest: &Manifest, out_dir: &Path) -> Result<PreprocessOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for s in &manifest.samples {
        let frames = s.frame_paths()?;
        let mut aligned = Vec::with_capacity(2);
        let mut failed = false;
        for &idx in &[s.onset_idx, s.apex_idx] {
            let img = load_image(&frames[idx])?;
            match detect_landmarks(&img) {
                Ok(lm) => aligned.push(align_and_crop(&img, &lm)?),
                Err(Error::Detection) => {
                    log::warn!(
                        "landmark detection failed on {}, skipping sample {}/{}",
                        frames[idx].display(),
                        s.subject_id,
                        s.clip_id
                    );
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if failed {
            skipped += 1;
            continue;
        }
        let rel_dir = format!("frames/{}/{}", s.subject_id, s.clip_id);
        let dir = out_dir.join(&rel_dir);
        for (i, img) in aligned.iter().enumerate() {
            save_image(&dir.join(format!("frame_{i:02}.png")), img)?;
        }
        samples.push(Sample {
            frames_dir: dir,
            onset_idx: 0,
            apex_idx: 1,
            offset_idx: 1,
            ..s.clone()
        });
    }
    if skipped > 0 {
        log::warn!("preprocessing skipped {skipped} samples (landmark failures)");
    }
    let mut out = Manifest::from_samples(manifest.dataset_id, samples);
    out.label_schema = manifest.label_schema.clone();
    save_manifest(&out, &out_dir.join("manifest.csv"))?;
    Ok(PreprocessOutcome {
        manifest: out,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::generate_synthetic_dataset;

    #[test]
    fn preprocess_produces_canonical_crops() {
        let raw = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let m = generate_synthetic_dataset(raw.path(), 2, 2, 2, 13).unwrap();
        let result = preprocess_manifest(&m, out.path()).unwrap();
        assert_eq!(result.skipped, 0);
        assert_eq!(result.manifest.samples.len(), 4);
        for s in &result.manifest.samples {
            let frames = s.frame_paths().unwrap();
            assert_eq!(frames.len(), 2);
            let img = load_image(&frames[0]).unwrap();
            assert_eq!(img.dim(), (3, 224, 224));
        }
    }
}
