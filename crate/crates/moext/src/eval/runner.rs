//! LOSO protocol runner: per-fold fine-tuning (with optional shared or
//! per-fold pre-training) and fold-summed metric aggregation.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::s;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::Mode;
use crate::training::{
    finetune, load_clips, pretrain, pretrain_run_checkpoint, Checkpoint, Clip, TrainConfig,
};

use super::metrics::{acc, uar, uf1, ConfusionMatrix};
use super::protocol::{loso_splits, map_labels, Protocol};

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub protocol: Protocol,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    /// With no shared checkpoint: pre-train once (or per fold when
    /// `exclude_test_subjects_from_pretrain` is set) before fine-tuning.
    pub do_pretrain: bool,
    pub exclude_test_subjects_from_pretrain: bool,
    /// Re-use this pre-training checkpoint for every fold.
    pub shared_pretrain: Option<Checkpoint>,
    /// Number of folds evaluated concurrently.
    pub jobs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub test_subject: String,
    pub train_subjects: Vec<String>,
    /// Subjects whose samples were available to this fold's pre-training
    /// (empty when pre-training was shared or skipped).
    pub pretrain_subjects: Vec<String>,
    pub n_test: usize,
    /// (true, predicted) class indices per test sample.
    pub predictions: Vec<(usize, usize)>,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub protocol: String,
    pub dataset: String,
    pub uf1: f64,
    pub uar: f64,
    pub acc: f64,
    pub n_samples: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub protocol: String,
    pub config_hash: String,
    pub class_names: Vec<String>,
    pub excluded_labels: BTreeMap<String, usize>,
    pub folds: Vec<FoldReport>,
    pub aggregate_counts: Vec<Vec<u64>>,
    /// First row is the combined result; CDE additionally breaks the same
    /// fold predictions down per source dataset.
    pub metrics: Vec<MetricsRow>,
}

fn matrix_rows(cm: &ConfusionMatrix) -> Vec<Vec<u64>> {
    (0..cm.num_classes())
        .map(|i| cm.counts.row(i).to_vec())
        .collect()
}

fn config_hash(opts: &EvalOptions) -> String {
    let mut hasher = Sha256::new();
    hasher.update(opts.protocol.as_str().as_bytes());
    hasher.update(serde_json::to_vec(&opts.model_cfg).unwrap_or_default());
    hasher.update(serde_json::to_vec(&opts.train_cfg).unwrap_or_default());
    hasher.update([
        opts.do_pretrain as u8,
        opts.exclude_test_subjects_from_pretrain as u8,
    ]);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct FoldOutcome {
    report: FoldReport,
    cm: ConfusionMatrix,
}

fn run_fold(
    opts: &EvalOptions,
    class_names: &[String],
    clips: &[Clip],
    micro_indices: &[usize],
    fold_train: &[usize],
    fold_test: &[usize],
    test_subject: &str,
    shared: Option<&Checkpoint>,
) -> Result<FoldOutcome> {
    let train_clips: Vec<Clip> = fold_train
        .iter()
        .map(|&i| clips[micro_indices[i]].clone())
        .collect();

    // Per-fold pre-training when test subjects must be excluded from it.
    let local_ckpt: Option<Checkpoint> = if shared.is_none()
        && opts.do_pretrain
        && opts.train_cfg.ablation.use_pretrained
    {
        let pool: Vec<Clip> = clips
            .iter()
            .filter(|c| {
                !opts.exclude_test_subjects_from_pretrain || c.subject_key != test_subject
            })
            .cloned()
            .collect();
        let mut run = pretrain(&opts.model_cfg, &opts.train_cfg, &pool, None)?;
        Some(pretrain_run_checkpoint(&mut run, &opts.model_cfg, &opts.train_cfg))
    } else {
        None
    };
    let pretrain_subjects: Vec<String> = if local_ckpt.is_some() {
        let mut subjects: Vec<String> = clips
            .iter()
            .filter(|c| {
                !opts.exclude_test_subjects_from_pretrain || c.subject_key != test_subject
            })
            .map(|c| c.subject_key.clone())
            .collect::<std::collections::HashSet<_>>()
            .into_iter()
            .collect();
        subjects.sort();
        subjects
    } else {
        Vec::new()
    };
    let ckpt = local_ckpt.as_ref().or(shared);

    let run = finetune(
        &opts.model_cfg,
        &opts.train_cfg,
        ckpt,
        &train_clips,
        class_names.len(),
    )?;
    let mut model = run.model;

    let mut cm = ConfusionMatrix::new(class_names.to_vec())?;
    let mut predictions = Vec::with_capacity(fold_test.len());
    for &i in fold_test {
        let clip = &clips[micro_indices[i]];
        let (c, h, w) = clip.onset.dim();
        let mut x_o = ndarray::Array4::zeros((1, c, h, w));
        let mut x_a = ndarray::Array4::zeros((1, c, h, w));
        x_o.slice_mut(s![0, .., .., ..]).assign(&clip.onset);
        x_a.slice_mut(s![0, .., .., ..]).assign(&clip.apex);
        let probs = model.forward_classify(&x_o, &x_a, Mode::Eval)?;
        let pred = probs
            .row(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .unwrap();
        cm.record(clip.label_idx, pred);
        predictions.push((clip.label_idx, pred));
    }

    let mut train_subjects: Vec<String> = fold_train
        .iter()
        .map(|&i| clips[micro_indices[i]].subject_key.clone())
        .collect::<std::collections::HashSet<_>>()
        .into_iter()
        .collect();
    train_subjects.sort();

    Ok(FoldOutcome {
        report: FoldReport {
            test_subject: test_subject.to_string(),
            train_subjects,
            pretrain_subjects,
            n_test: fold_test.len(),
            predictions,
            counts: matrix_rows(&cm),
        },
        cm,
    })
}

/// Run a full LOSO evaluation of `protocol` over the given manifests.
///
/// Fine-tuning and evaluation use micro samples only; macro samples in the
/// manifests feed pre-training (subject to the ablation flags).
pub fn run_protocol(opts: &EvalOptions, manifests: &[Manifest]) -> Result<Report> {
    let required = opts.protocol.required_datasets();
    let missing: Vec<String> = required
        .iter()
        .filter(|d| !manifests.iter().any(|m| m.dataset_id == **d))
        .map(|d| d.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingDataset(missing));
    }

    // Map labels per manifest, merge, and fix one class order.
    let mut excluded_labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut all_samples = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    for manifest in manifests {
        let mapped = map_labels(manifest, opts.protocol)?;
        for (label, count) in mapped.excluded {
            *excluded_labels.entry(label).or_insert(0) += count;
        }
        for name in &mapped.manifest.label_schema {
            if !class_names.contains(name) {
                class_names.push(name.clone());
            }
        }
        all_samples.extend(mapped.manifest.samples);
    }
    class_names.sort();
    if all_samples.is_empty() {
        return Err(Error::Empty("no samples after label mapping".into()));
    }

    let mut merged = Manifest::from_samples(manifests[0].dataset_id, all_samples);
    merged.label_schema = class_names.clone();

    let mut model_cfg = opts.model_cfg.clone();
    model_cfg.num_classes = class_names.len();
    let opts = EvalOptions {
        model_cfg,
        ..opts.clone()
    };

    let clips = load_clips(&merged, opts.model_cfg.input_size)?;
    let micro_indices: Vec<usize> = (0..clips.len())
        .filter(|&i| !merged.samples[i].is_macro)
        .collect();
    let micro_samples: Vec<_> = micro_indices
        .iter()
        .map(|&i| merged.samples[i].clone())
        .collect();
    let folds = loso_splits(&micro_samples)?;

    // One shared pre-training pass unless test subjects must be excluded
    // from it (then it happens per fold).
    let shared: Option<Checkpoint> = match &opts.shared_pretrain {
        Some(ckpt) => Some(ckpt.clone()),
        None => {
            if opts.do_pretrain
                && opts.train_cfg.ablation.use_pretrained
                && !opts.exclude_test_subjects_from_pretrain
            {
                let mut run = pretrain(&opts.model_cfg, &opts.train_cfg, &clips, None)?;
                Some(pretrain_run_checkpoint(&mut run, &opts.model_cfg, &opts.train_cfg))
            } else {
                None
            }
        }
    };

    let jobs = opts.jobs.max(1);
    let outcomes: Vec<Option<FoldOutcome>> = {
        let slots = Mutex::new((0..folds.len()).map(|_| None).collect::<Vec<_>>());
        let next = AtomicUsize::new(0);
        let first_error: Mutex<Option<Error>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(folds.len()) {
                scope.spawn(|| loop {
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    if k >= folds.len() {
                        break;
                    }
                    let fold = &folds[k];
                    match run_fold(
                        &opts,
                        &class_names,
                        &clips,
                        &micro_indices,
                        &fold.train_indices,
                        &fold.test_indices,
                        &fold.test_subject,
                        shared.as_ref(),
                    ) {
                        Ok(outcome) => slots.lock().unwrap()[k] = Some(outcome),
                        Err(e) => {
                            let mut guard = first_error.lock().unwrap();
                            if guard.is_none() {
                                *guard = Some(e);
                            }
                        }
                    }
                });
            }
        });
        if let Some(e) = first_error.into_inner().unwrap() {
            return Err(e);
        }
        slots.into_inner().unwrap()
    };

    let mut aggregate = ConfusionMatrix::new(class_names.clone())?;
    let mut fold_reports = Vec::with_capacity(folds.len());
    for outcome in outcomes.into_iter() {
        let outcome = outcome.expect("fold skipped without error");
        aggregate.add(&outcome.cm)?;
        fold_reports.push(outcome.report);
    }

    let mut metrics = vec![MetricsRow {
        protocol: opts.protocol.to_string(),
        dataset: "combined".to_string(),
        uf1: uf1(&aggregate)?,
        uar: uar(&aggregate)?,
        acc: acc(&aggregate)?,
        n_samples: aggregate.total(),
    }];
    if opts.protocol == Protocol::Cde3 {
        // Per-source breakdown: same fold predictions, restricted by the
        // test sample's source dataset.
        for dataset in opts.protocol.required_datasets() {
            let mut cm = ConfusionMatrix::new(class_names.clone())?;
            for (fold, report) in folds.iter().zip(&fold_reports) {
                for (&i, &(t, p)) in fold.test_indices.iter().zip(&report.predictions) {
                    if micro_samples[i].dataset_id == dataset {
                        cm.record(t, p);
                    }
                }
            }
            if cm.total() == 0 {
                continue;
            }
            metrics.push(MetricsRow {
                protocol: opts.protocol.to_string(),
                dataset: dataset.to_string(),
                uf1: uf1(&cm)?,
                uar: uar(&cm)?,
                acc: acc(&cm)?,
                n_samples: cm.total(),
            });
        }
    }

    Ok(Report {
        protocol: opts.protocol.to_string(),
        config_hash: config_hash(&opts),
        class_names,
        excluded_labels,
        folds: fold_reports,
        aggregate_counts: matrix_rows(&aggregate),
        metrics,
    })
}

/// Write the report JSON and the CSV summary
/// `protocol,dataset,uf1,uar,acc,n_samples`.
pub fn save_report(report: &Report, json_path: &Path, csv_path: &Path) -> Result<()> {
    for p in [json_path, csv_path] {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(json_path, serde_json::to_string_pretty(report)?)?;
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(["protocol", "dataset", "uf1", "uar", "acc", "n_samples"])?;
    for row in &report.metrics {
        w.write_record([
            row.protocol.clone(),
            row.dataset.clone(),
            format!("{:.6}", row.uf1),
            format!("{:.6}", row.uar),
            format!("{:.6}", row.acc),
            row.n_samples.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
