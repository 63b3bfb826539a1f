//! Two-phase training: self-supervised pre-training of the separator /
//! motion extractor / reconstructor, then supervised fine-tuning of the
//! shape-only classifier.

pub mod checkpoint;

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_training_set, build_expansion_sets, load_image, Manifest};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_losses_grad, cross_entropy, reconstruction_loss_grad, total_pretrain_loss,
    LossConfig, PretrainFeatures,
};
use crate::model::{export_params, import_params, FinetuneModel, ModelConfig, PretrainModel};
use crate::nn::{Mode, Module};
use crate::optim::{AdamW, AdamWConfig};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Phase};

/// Table-8-style ablation switches; all true reproduces the full method.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_pretrained: bool,
    pub use_macro_data: bool,
    pub use_motion_extractor: bool,
    pub use_st_loss: bool,
    pub use_ss_loss: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_pretrained: true,
            use_macro_data: true,
            use_motion_extractor: true,
            use_st_loss: true,
            use_ss_loss: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub ablation: AblationFlags,
    pub macro_pseudo_apex_n: usize,
    /// Apply the mirror+rotation 10x augmentation during fine-tuning.
    pub augment_finetune: bool,
    /// Stop fine-tuning early once training accuracy reaches this value.
    pub target_train_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            epochs: 30,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            seed: 0,
            loss: LossConfig::default(),
            ablation: AblationFlags::default(),
            macro_pseudo_apex_n: 5,
            augment_finetune: true,
            target_train_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be > 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        self.loss.validate()
    }

    fn optimizer(&self) -> AdamW<f32> {
        AdamW::new(AdamWConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        })
    }
}

/// One clip loaded into memory at the model's input resolution.
#[derive(Debug, Clone)]
pub struct Clip {
    pub onset: Array3<f32>,
    pub apex: Array3<f32>,
    pub label_idx: usize,
    pub subject_key: String,
    pub is_macro: bool,
}

/// Average-pool when the source side is a multiple of the target, bilinear
/// otherwise.
pub fn resize(img: &Array3<f32>, size: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    if h == size && w == size {
        return img.clone();
    }
    if h % size == 0 && w % size == 0 {
        let (fy, fx) = (h / size, w / size);
        let scale = 1.0 / (fy * fx) as f32;
        return Array3::from_shape_fn((c, size, size), |(ch, y, x)| {
            let mut acc = 0.0;
            for dy in 0..fy {
                for dx in 0..fx {
                    acc += img[[ch, y * fy + dy, x * fx + dx]];
                }
            }
            acc * scale
        });
    }
    Array3::from_shape_fn((c, size, size), |(ch, y, x)| {
        let sy = (y as f32 + 0.5) * h as f32 / size as f32 - 0.5;
        let sx = (x as f32 + 0.5) * w as f32 / size as f32 - 0.5;
        let (sy, sx) = (sy.clamp(0.0, (h - 1) as f32), sx.clamp(0.0, (w - 1) as f32));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
        img[[ch, y0, x0]] * (1.0 - fy) * (1.0 - fx)
            + img[[ch, y0, x1]] * (1.0 - fy) * fx
            + img[[ch, y1, x0]] * fy * (1.0 - fx)
            + img[[ch, y1, x1]] * fy * fx
    })
}

/// Load each sample's onset/apex frames, resized to `input_size`.
pub fn load_clips(manifest: &Manifest, input_size: usize) -> Result<Vec<Clip>> {
    let mut clips = Vec::with_capacity(manifest.samples.len());
    for sample in &manifest.samples {
        let frames = sample.frame_paths()?;
        let onset = resize(&load_image(&frames[sample.onset_idx])?, input_size);
        let apex = resize(&load_image(&frames[sample.apex_idx])?, input_size);
        clips.push(Clip {
            onset,
            apex,
            label_idx: manifest.label_index(&sample.label)?,
            subject_key: sample.subject_key(),
            is_macro: sample.is_macro,
        });
    }
    Ok(clips)
}

fn stack_images(images: &[Array3<f32>]) -> Array4<f32> {
    let (c, h, w) = images[0].dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).assign(img);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub l_re: f64,
    pub l_st: f64,
    pub l_ss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub train_acc: f64,
}

pub struct PretrainRun {
    pub model: PretrainModel<f32>,
    pub history: Vec<PretrainEpoch>,
}

fn pretrain_checkpoint(
    model: &mut PretrainModel<f32>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    epoch: usize,
    history: &[PretrainEpoch],
) -> Checkpoint {
    Checkpoint {
        phase: Phase::Pretrain,
        model_cfg: model_cfg.clone(),
        train_cfg: cfg.clone(),
        epoch,
        pretrain_history: history.to_vec(),
        finetune_history: vec![],
        params: export_params(model).into_iter().collect(),
    }
}

/// Self-supervised pre-training. `clips` may mix micro and macro samples;
/// macro samples are dropped when the ablation disables them. When
/// `checkpoint_path` is given, a checkpoint is written after every epoch, so
/// a non-finite-loss abort leaves the last good epoch on disk.
pub fn pretrain(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    clips: &[Clip],
    checkpoint_path: Option<&Path>,
) -> Result<PretrainRun> {
    cfg.validate()?;
    let clips: Vec<&Clip> = clips
        .iter()
        .filter(|c| cfg.ablation.use_macro_data || !c.is_macro)
        .collect();
    if clips.is_empty() {
        return Err(Error::Empty("pre-training set".into()));
    }
    let m = cfg.loss.m;
    let mut model = PretrainModel::<f32>::new(model_cfg, cfg.seed)?;
    let mut opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history: Vec<PretrainEpoch> = Vec::with_capacity(cfg.epochs);

    // Ablated contrastive losses get weight zero; their values stay in the
    // history so the traces remain comparable.
    let eff = LossConfig {
        alpha1: if cfg.ablation.use_st_loss { cfg.loss.alpha1 } else { 0.0 },
        alpha2: if cfg.ablation.use_ss_loss { cfg.loss.alpha2 } else { 0.0 },
        ..cfg.loss.clone()
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let n = batch.len();
            let mut onsets = Vec::with_capacity(n * m);
            let mut apexes = Vec::with_capacity(n * m);
            for (bi, &idx) in batch.iter().enumerate() {
                let seed = cfg
                    .seed
                    .wrapping_add(1 + epoch as u64 * 1_000_003)
                    .wrapping_add((batches * cfg.batch_size + bi) as u64 * 7919);
                let (set_o, set_a) =
                    build_expansion_sets(&clips[idx].onset, &clips[idx].apex, m, seed)?;
                onsets.extend(set_o);
                apexes.extend(set_a);
            }
            let x_o = stack_images(&onsets);
            let x_a = stack_images(&apexes);

            model.zero_grads();
            let out = model.forward_pretrain(&x_o, &x_a, Mode::Train)?;
            let d = model_cfg.feature_dim;

            // Instance layout: rows are sample-major, so set i instance j
            // lives at row i*m + j of each (n*m, d) feature matrix.
            let reshape = |a: &Array2<f32>| -> Array3<f32> {
                a.to_owned().into_shape_with_order((n, m, d)).unwrap()
            };
            let (so3, sa3) = (reshape(&out.s_o), reshape(&out.s_a));
            let (to3, ta3) = (reshape(&out.t_o), reshape(&out.t_a));
            let mut shape = Array3::zeros((n, 2 * m, d));
            let mut texture = Array3::zeros((n, 2 * m, d));
            shape.slice_mut(s![.., ..m, ..]).assign(&so3);
            shape.slice_mut(s![.., m.., ..]).assign(&sa3);
            texture.slice_mut(s![.., ..m, ..]).assign(&to3);
            texture.slice_mut(s![.., m.., ..]).assign(&ta3);
            let feats = PretrainFeatures::new(shape, texture)?;

            let (l_re, g_rec) = reconstruction_loss_grad(&x_a, &out.x_rec)?;
            let contrastive = contrastive_losses_grad(&feats, &mut model.projector, &eff)?;
            let total = total_pretrain_loss(l_re, contrastive.st, contrastive.ss, &eff)?;

            let flat = |a: ndarray::ArrayView3<f32>| -> Array2<f32> {
                a.to_owned().into_shape_with_order((n * m, d)).unwrap()
            };
            let g_s_o = flat(contrastive.d_shape.slice(s![.., ..m, ..]));
            let g_s_a = flat(contrastive.d_shape.slice(s![.., m.., ..]));
            let g_t_o = flat(contrastive.d_texture.slice(s![.., ..m, ..]));
            let g_t_a = flat(contrastive.d_texture.slice(s![.., m.., ..]));
            model.backward_pretrain(&g_rec, &g_s_o, &g_s_a, &g_t_o, &g_t_a);

            opt.begin_step();
            model.visit_params("", &mut |name, p| opt.update(name, p));

            sums.0 += l_re as f64;
            sums.1 += contrastive.st as f64;
            sums.2 += contrastive.ss as f64;
            sums.3 += total as f64;
            batches += 1;
        }
        let k = batches as f64;
        let record = PretrainEpoch {
            epoch,
            l_re: sums.0 / k,
            l_st: sums.1 / k,
            l_ss: sums.2 / k,
            total: sums.3 / k,
        };
        if !record.total.is_finite() {
            return Err(Error::Numeric {
                context: format!("pretrain epoch {epoch}"),
                msg: "non-finite loss; last good checkpoint retained".into(),
            });
        }
        history.push(record);
        log::info!(
            "pretrain epoch {epoch}: l_re {:.4} l_st {:.4} l_ss {:.4} total {:.4}",
            record.l_re,
            record.l_st,
            record.l_ss,
            record.total
        );
        if let Some(path) = checkpoint_path {
            let ckpt = pretrain_checkpoint(&mut model, model_cfg, cfg, epoch, &history);
            save_checkpoint(&ckpt, path)?;
        }
    }
    Ok(PretrainRun { model, history })
}

/// Snapshot a finished pre-training run as a checkpoint value.
pub fn pretrain_run_checkpoint(
    run: &mut PretrainRun,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Checkpoint {
    let epoch = run.history.last().map(|h| h.epoch).unwrap_or(0);
    let history = run.history.clone();
    pretrain_checkpoint(&mut run.model, model_cfg, cfg, epoch, &history)
}

pub struct FinetuneRun {
    pub model: FinetuneModel<f32>,
    pub history: Vec<FinetuneEpoch>,
}

/// Supervised fine-tuning on (onset, apex) pairs. Backbone, shape branch,
/// and motion extractor come from the pre-training checkpoint unless the
/// ablation disables it; the classifier always starts fresh.
pub fn finetune(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pretrained: Option<&Checkpoint>,
    clips: &[Clip],
    num_classes: usize,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::Empty("fine-tuning set".into()));
    }
    if model_cfg.num_classes != num_classes {
        return Err(Error::Config(format!(
            "model configured for {} classes but the data has {num_classes}",
            model_cfg.num_classes
        )));
    }
    let mut model =
        FinetuneModel::<f32>::new(model_cfg, cfg.ablation.use_motion_extractor, cfg.seed)?;
    if cfg.ablation.use_pretrained {
        if let Some(ckpt) = pretrained {
            if ckpt.phase != Phase::Pretrain {
                return Err(Error::Checkpoint(format!(
                    "expected a pretrain checkpoint, got {:?}",
                    ckpt.phase
                )));
            }
            let report = import_params(&mut model, &ckpt.params)?;
            log::info!(
                "loaded {} parameter tensors; {} archive entries unused (texture \
                 branch, reconstructor, projector); {} fresh (classifier)",
                report.loaded,
                report.ignored.len(),
                report.missing.len()
            );
        }
    }

    // Expand pairs with the mirror + rotation augmentation; labels follow
    // their source pair.
    let (pairs, labels): (Vec<(Array3<f32>, Array3<f32>)>, Vec<usize>) = if cfg.augment_finetune {
        let base: Vec<(Array3<f32>, Array3<f32>)> = clips
            .iter()
            .map(|c| (c.onset.clone(), c.apex.clone()))
            .collect();
        let augmented = augment_training_set(&base, cfg.seed);
        let labels = clips
            .iter()
            .flat_map(|c| std::iter::repeat(c.label_idx).take(10))
            .collect();
        (augmented, labels)
    } else {
        (
            clips
                .iter()
                .map(|c| (c.onset.clone(), c.apex.clone()))
                .collect(),
            clips.iter().map(|c| c.label_idx).collect(),
        )
    };

    let mut opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut ce_sum = 0.0f64;
        let mut correct = 0usize;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let onsets: Vec<Array3<f32>> = batch.iter().map(|&i| pairs[i].0.clone()).collect();
            let apexes: Vec<Array3<f32>> = batch.iter().map(|&i| pairs[i].1.clone()).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x_o = stack_images(&onsets);
            let x_a = stack_images(&apexes);
            model.zero_grads();
            let probs = model.forward_classify(&x_o, &x_a, Mode::Train)?;
            let (ce, _) = cross_entropy(&probs, &batch_labels)?;
            if !ce.is_finite() {
                return Err(Error::Numeric {
                    context: format!("finetune epoch {epoch}"),
                    msg: "non-finite loss".into(),
                });
            }
            for (row, &label) in probs.outer_iter().zip(&batch_labels) {
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap();
                if pred == label {
                    correct += 1;
                }
            }
            let label_arr = Array1::from_vec(batch_labels);
            model.backward_cross_entropy(&label_arr);
            opt.begin_step();
            model.visit_params("", &mut |name, p| opt.update(name, p));
            ce_sum += ce as f64;
            batches += 1;
        }
        let record = FinetuneEpoch {
            epoch,
            ce: ce_sum / batches as f64,
            train_acc: correct as f64 / pairs.len() as f64,
        };
        history.push(record);
        log::info!(
            "finetune epoch {epoch}: ce {:.4} train_acc {:.4}",
            record.ce,
            record.train_acc
        );
        if let Some(target) = cfg.target_train_acc {
            if record.train_acc >= target {
                break;
            }
        }
    }
    Ok(FinetuneRun { model, history })
}

/// Write the pretrain loss history CSV `epoch,l_re,l_st,l_ss,total`.
pub fn save_pretrain_history(history: &[PretrainEpoch], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "l_re", "l_st", "l_ss", "total"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            format!("{:.9}", h.l_re),
            format!("{:.9}", h.l_st),
            format!("{:.9}", h.l_ss),
            format!("{:.9}", h.total),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write the finetune loss history CSV `epoch,ce,train_acc`.
pub fn save_finetune_history(history: &[FinetuneEpoch], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "ce", "train_acc"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            format!("{:.9}", h.ce),
            format!("{:.9}", h.train_acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn toy_clips(n: usize, size: usize) -> Vec<Clip> {
        (0..n)
            .map(|i| {
                let onset = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
                    (((c + 1) * (y * 13 + x * 5 + i * 3)) % 17) as f32 / 17.0
                });
                let apex = onset.mapv(|v| (v + 0.05 * ((i % 3) as f32)).min(1.0));
                Clip {
                    onset,
                    apex,
                    label_idx: i % 3,
                    subject_key: format!("SYNTH/s{:02}", i % 2),
                    is_macro: i % 4 == 3,
                }
            })
            .collect()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            seed: 9,
            augment_finetune: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pretrain_runs_and_records_history() {
        let model_cfg = ModelConfig::tiny(3);
        let clips = toy_clips(6, model_cfg.input_size);
        let run = pretrain(&model_cfg, &quick_cfg(), &clips, None).unwrap();
        assert_eq!(run.history.len(), 2);
        for h in &run.history {
            assert!(h.total.is_finite() && h.l_re >= 0.0);
        }
    }

    #[test]
    fn pretrain_is_deterministic() {
        let model_cfg = ModelConfig::tiny(3);
        let clips = toy_clips(5, model_cfg.input_size);
        let h1 = pretrain(&model_cfg, &quick_cfg(), &clips, None)
            .unwrap()
            .history;
        let h2 = pretrain(&model_cfg, &quick_cfg(), &clips, None)
            .unwrap()
            .history;
        assert_eq!(h1, h2);
    }

    #[test]
    fn macro_ablation_shrinks_training_set() {
        let model_cfg = ModelConfig::tiny(3);
        let clips = toy_clips(8, model_cfg.input_size);
        let n_macro = clips.iter().filter(|c| c.is_macro).count();
        assert!(n_macro > 0);
        let mut cfg = quick_cfg();
        cfg.ablation.use_macro_data = false;
        // Different data -> different loss trace.
        let with_macro = pretrain(&model_cfg, &quick_cfg(), &clips, None).unwrap();
        let without = pretrain(&model_cfg, &cfg, &clips, None).unwrap();
        assert_ne!(with_macro.history, without.history);
    }

    #[test]
    fn finetune_runs_and_uses_pretrained_weights() {
        let model_cfg = ModelConfig::tiny(3);
        let clips = toy_clips(6, model_cfg.input_size);
        let cfg = quick_cfg();
        let mut run = pretrain(&model_cfg, &cfg, &clips, None).unwrap();
        let ckpt = pretrain_run_checkpoint(&mut run, &model_cfg, &cfg);
        let fine = finetune(&model_cfg, &cfg, Some(&ckpt), &clips, 3).unwrap();
        assert_eq!(fine.history.len(), 2);

        // Random-init ablation must start from different parameters, so the
        // first-epoch loss differs on the same data.
        let mut cfg2 = cfg.clone();
        cfg2.ablation.use_pretrained = false;
        let fresh = finetune(&model_cfg, &cfg2, Some(&ckpt), &clips, 3).unwrap();
        assert_ne!(fine.history[0].ce, fresh.history[0].ce);
    }

    #[test]
    fn finetune_class_count_mismatch_is_error() {
        let model_cfg = ModelConfig::tiny(3);
        let clips = toy_clips(4, model_cfg.input_size);
        assert!(matches!(
            finetune(&model_cfg, &quick_cfg(), None, &clips, 5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_training_set_is_error() {
        let model_cfg = ModelConfig::tiny(3);
        assert!(matches!(
            pretrain(&model_cfg, &quick_cfg(), &[], None),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn resize_average_pools_divisible_factors() {
        let img = Array3::from_shape_fn((3, 8, 8), |(_, y, x)| (y * 8 + x) as f32);
        let out = resize(&img, 4);
        assert_eq!(out.dim(), (3, 4, 4));
        // Top-left 2x2 block of the source: 0, 1, 8, 9 -> mean 4.5.
        assert_eq!(out[[0, 0, 0]], 4.5);
    }

    #[test]
    fn history_csvs_roundtrip_format() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("pre.csv");
        save_pretrain_history(
            &[PretrainEpoch {
                epoch: 0,
                l_re: 0.5,
                l_st: 0.3,
                l_ss: 0.15,
                total: 0.8,
            }],
            &p1,
        )
        .unwrap();
        let text = std::fs::read_to_string(&p1).unwrap();
        assert!(text.starts_with("epoch,l_re,l_st,l_ss,total"));
        let p2 = dir.path().join("fine.csv");
        save_finetune_history(
            &[FinetuneEpoch {
                epoch: 0,
                ce: 1.1,
                train_acc: 0.5,
            }],
            &p2,
        )
        .unwrap();
        assert!(std::fs::read_to_string(&p2)
            .unwrap()
            .starts_with("epoch,ce,train_acc"));
    }
}
