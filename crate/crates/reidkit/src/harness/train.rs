//! The training loop: PK-sampled epochs over the synthetic corpus, the total
//! objective with per-step gradient descent, loss logging, checkpoints and a
//! run manifest.

use std::path::PathBuf;

use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{
    fixed_attention, group_max, grouping_preset, resize_bilinear, GroupedFields, PartGrouping,
};
use crate::harness::augment::AugPlan;
use crate::harness::config::{lr_schedule, RunConfig};
use crate::net::checkpoint;
use crate::net::layers::Adam;
use crate::net::{Model, ModelConfig};
use crate::objectives::{
    part_attention_loss_with_logit_grad, training_losses, LossValues, IGNORE_LABEL,
};
use crate::synthgen::{PkSampler, SampleRecord};

/// Sharpening applied to resized binary field maps before the per-pixel
/// softmax of the fixed-attention ablation, so present parts get near-one
/// weights like the learned maps they replace.
pub const FIXED_ATTENTION_SHARPNESS: f64 = 8.0;

/// Per-epoch mean loss components and the learning rate used.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossValues,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochLog>,
    /// Final checkpoint path when artifacts were written.
    pub checkpoint: Option<PathBuf>,
}

/// Builds the `K+1`-channel fixed attention maps for one sample at feature
/// resolution: channel 0 (background) is zero, channels 1..=K are the
/// sharpened per-pixel softmax of the resized grouped fields.
pub fn fixed_attention_maps(
    grouped_full: &Array3<f64>,
    feat_h: usize,
    feat_w: usize,
) -> Array3<f64> {
    let resized = resize_bilinear(grouped_full, feat_h, feat_w);
    let sharpened = GroupedFields {
        data: resized.mapv(|v| v * FIXED_ATTENTION_SHARPNESS),
    };
    let soft = fixed_attention(&sharpened);
    let (h, w, k) = soft.dim();
    let mut out = Array3::zeros((h, w, k + 1));
    out.slice_mut(ndarray::s![.., .., 1..]).assign(&soft);
    out
}

/// Majority-vote downsampling of a label map that may contain
/// [`IGNORE_LABEL`] pixels: a feature cell becomes `IGNORE_LABEL` when the
/// unsupervised pixels outnumber every individual class in its footprint.
fn downsample_labels_with_ignore(
    labels: &ndarray::Array2<u8>,
    part_count: usize,
    out_h: usize,
    out_w: usize,
) -> ndarray::Array2<u8> {
    let (h, w) = labels.dim();
    let mut out = ndarray::Array2::zeros((out_h, out_w));
    for oy in 0..out_h {
        let y0 = oy * h / out_h;
        let y1 = ((oy + 1) * h).div_ceil(out_h).min(h).max(y0 + 1);
        for ox in 0..out_w {
            let x0 = ox * w / out_w;
            let x1 = ((ox + 1) * w).div_ceil(out_w).min(w).max(x0 + 1);
            // slot part_count+1 counts ignored pixels
            let mut counts = vec![0usize; part_count + 2];
            for y in y0..y1 {
                for x in x0..x1 {
                    let l = labels[(y, x)];
                    let slot = if l == IGNORE_LABEL {
                        part_count + 1
                    } else {
                        l as usize
                    };
                    counts[slot] += 1;
                }
            }
            let mut best = 0usize;
            for (l, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = l;
                }
            }
            out[(oy, ox)] = if best == part_count + 1 {
                IGNORE_LABEL
            } else {
                best as u8
            };
        }
    }
    out
}

/// Maps raw identity labels to contiguous class indices (sorted order).
fn class_indices(samples: &[SampleRecord]) -> (Vec<u32>, Vec<usize>) {
    let mut uniq: Vec<u32> = samples.iter().map(|s| s.id).collect();
    uniq.sort_unstable();
    uniq.dedup();
    let classes = samples
        .iter()
        .map(|s| uniq.binary_search(&s.id).unwrap())
        .collect();
    (uniq, classes)
}

struct PreparedSample {
    image: Array3<f64>,
    class: usize,
    labels: ndarray::Array2<u8>,
    grouped: Option<Array3<f64>>,
}

/// Trains a model on in-memory samples. Writes checkpoints and a run
/// manifest under the configured output directory when `write_artifacts`.
pub fn train_on_samples(
    cfg: &RunConfig,
    samples: &[SampleRecord],
    write_artifacts: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Corpus("no training samples".into()));
    }
    let grouping: PartGrouping = grouping_preset(cfg.corpus.spec.part_count)?;
    let (uniq_ids, classes) = class_indices(samples);
    let model_cfg = ModelConfig {
        num_train_ids: uniq_ids.len(),
        ..cfg.model_config()
    };
    let (feat_h, feat_w) = model_cfg.feature_hw();
    let k = model_cfg.part_count;
    let hp = cfg.hyper_params();
    let loss_cfg = cfg.loss_config();
    let fixed = cfg.ablation.fixed_attention;

    let prepared: Result<Vec<PreparedSample>> = samples
        .iter()
        .zip(classes.iter())
        .map(|(s, &class)| {
            let grouped = if fixed {
                Some(group_max(&s.fields, &grouping)?.data)
            } else {
                None
            };
            Ok(PreparedSample {
                image: s.image.clone(),
                class,
                labels: s.parsing_gt.labels.clone(),
                grouped,
            })
        })
        .collect();
    let prepared = prepared?;

    let mut model = Model::new(model_cfg, cfg.train.seed);
    let mut opt = Adam::default();
    let labels: Vec<(usize, u32)> = samples.iter().enumerate().map(|(i, s)| (i, s.id)).collect();
    let mut sampler = PkSampler::new(
        &labels,
        cfg.train.batch_p,
        cfg.train.batch_k,
        cfg.train.seed ^ 0x5A17_17E5,
    )?;

    let out_dir = cfg.train.out_dir.clone();
    if write_artifacts {
        std::fs::create_dir_all(&out_dir)?;
        cfg.save(&out_dir.join("run.toml"))?;
    }

    let mut history = Vec::new();
    let mut checkpoint_path = None;
    for epoch in 0..cfg.train.epochs {
        let lr = lr_schedule(&cfg.optimizer, epoch);
        let mut epoch_loss = LossValues::default();
        let batches = sampler.epoch();
        let steps = batches.len();
        for (step, batch) in batches.into_iter().enumerate() {
            let mut aug_rng = ChaCha8Rng::seed_from_u64(
                cfg.train.seed ^ (epoch as u64) << 32 ^ (step as u64) << 8 ^ 0xA06,
            );
            let b = batch.len();
            let (h, w) = (model.cfg.input_h, model.cfg.input_w);
            let mut images = Array4::zeros((b, h, w, 3));
            let mut label_maps = Array3::zeros((b, feat_h, feat_w));
            let mut fixed_m = fixed.then(|| Array4::zeros((b, feat_h, feat_w, k + 1)));
            let mut ids = Vec::with_capacity(b);
            for (bi, &idx) in batch.iter().enumerate() {
                let sample = &prepared[idx];
                let plan = AugPlan::draw(&cfg.augment, h, w, &mut aug_rng);
                images
                    .index_axis_mut(Axis(0), bi)
                    .assign(&plan.apply_image(&sample.image));
                let mut shifted = plan.apply_labels(&sample.labels);
                if let Some((y0, x0, eh, ew)) = plan.erase {
                    // Erased pixels no longer show the labelled part, so they
                    // carry no attention supervision.
                    for y in y0..y0 + eh {
                        for x in x0..x0 + ew {
                            shifted[(y, x)] = IGNORE_LABEL;
                        }
                    }
                }
                let down = downsample_labels_with_ignore(&shifted, k, feat_h, feat_w);
                label_maps.index_axis_mut(Axis(0), bi).assign(&down);
                if let Some(fm) = fixed_m.as_mut() {
                    let grouped = sample.grouped.as_ref().expect("prepared for ablation");
                    let maps =
                        fixed_attention_maps(&plan.apply_fields(grouped), feat_h, feat_w);
                    fm.index_axis_mut(Axis(0), bi).assign(&maps);
                }
                ids.push(sample.class);
            }

            model.zero_grads();
            let fwd = model.forward_train(&images, fixed_m.as_ref())?;
            let (mut values, pool) =
                training_losses(&loss_cfg, &hp, &mut model.heads, &fwd.emb, &ids)?;
            let d_logits = if fixed {
                None
            } else {
                let (att, grad) = part_attention_loss_with_logit_grad(
                    &fwd.m,
                    &label_maps,
                    hp.eps,
                    hp.lambda_pa,
                )?;
                values.attention = att;
                values.total += att;
                Some(grad)
            };
            if !values.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    indices: batch,
                });
            }
            model.backward(&fwd, &pool, d_logits.as_ref());
            opt.step(model.params_mut(), lr);

            epoch_loss.attention += values.attention;
            epoch_loss.identity += values.identity;
            epoch_loss.triplet += values.triplet;
            epoch_loss.total += values.total;
        }
        let n = steps as f64;
        epoch_loss.attention /= n;
        epoch_loss.identity /= n;
        epoch_loss.triplet /= n;
        epoch_loss.total /= n;
        history.push(EpochLog {
            epoch,
            lr,
            loss: epoch_loss,
        });

        if write_artifacts {
            let last = epoch + 1 == cfg.train.epochs;
            let periodic =
                cfg.train.checkpoint_every > 0 && (epoch + 1) % cfg.train.checkpoint_every == 0;
            if last || periodic {
                let path = out_dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
                checkpoint::save(&model, epoch + 1, &path)?;
                if last {
                    let final_path = out_dir.join("model.ckpt");
                    checkpoint::save(&model, epoch + 1, &final_path)?;
                    checkpoint_path = Some(final_path);
                }
            }
        }
    }

    if write_artifacts {
        let log = serde_json::to_string_pretty(&history)?;
        std::fs::write(out_dir.join("history.json"), log)?;
    }

    Ok(TrainOutcome {
        model,
        history,
        checkpoint: checkpoint_path,
    })
}

/// Loads the train split from the configured corpus directory and trains
/// with artifacts.
pub fn train_from_config(cfg: &RunConfig) -> Result<TrainOutcome> {
    let split = crate::synthgen::load_split(&cfg.corpus.root, "train")?;
    let samples: Vec<SampleRecord> = split
        .samples
        .into_iter()
        .map(|s| SampleRecord {
            name: s.name,
            image: s.image,
            id: s.id,
            cam: s.cam,
            fields: s.fields,
            parsing_gt: s.parsing,
            part_visible_gt: s.part_visible,
        })
        .collect();
    let mut cfg = cfg.clone();
    cfg.corpus.spec = split.config;
    train_on_samples(&cfg, &samples, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, CorpusConfig};

    fn micro_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.corpus.spec = CorpusConfig {
            train_ids: 4,
            images_per_id: 4,
            eval_ids: 0,
            cameras: 2,
            height: 32,
            width: 16,
            part_count: 3,
            occlusion_prob: 0.3,
            ..CorpusConfig::default()
        };
        cfg.model.channels = [6, 8, 12];
        cfg.train.batch_p = 2;
        cfg.train.batch_k = 2;
        cfg.train.epochs = 1;
        cfg
    }

    fn micro_samples(cfg: &RunConfig) -> Vec<SampleRecord> {
        generate_dataset(&cfg.corpus.spec, 77).unwrap().train
    }

    #[test]
    fn one_epoch_on_micro_corpus_completes_with_finite_loss() {
        let cfg = micro_config();
        let samples = micro_samples(&cfg);
        let outcome = train_on_samples(&cfg, &samples, false).unwrap();
        assert_eq!(outcome.history.len(), 1);
        let loss = outcome.history[0].loss;
        assert!(loss.total.is_finite() && loss.total > 0.0);
        assert!(loss.attention > 0.0);
        assert!(loss.identity > 0.0);
    }

    #[test]
    fn training_is_deterministic_in_config_and_seed() {
        let mut cfg = micro_config();
        cfg.train.epochs = 2;
        let samples = micro_samples(&cfg);
        let a = train_on_samples(&cfg, &samples, false).unwrap();
        let b = train_on_samples(&cfg, &samples, false).unwrap();
        for (x, y) in a.history.iter().zip(b.history.iter()) {
            assert_eq!(x.loss.total, y.loss.total);
            assert_eq!(x.loss.attention, y.loss.attention);
        }
        for ((n1, _, v1), (n2, _, v2)) in a
            .model
            .state_entries()
            .iter()
            .zip(b.model.state_entries().iter())
        {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2, "{n1} diverged");
        }
    }

    #[test]
    fn fixed_attention_leaves_part_classifier_untouched() {
        let mut cfg = micro_config();
        cfg.ablation.fixed_attention = true;
        let samples = micro_samples(&cfg);
        let fresh = Model::new(
            ModelConfig {
                num_train_ids: 4,
                ..cfg.model_config()
            },
            cfg.train.seed,
        );
        let before = fresh.part_classifier.value.clone();
        let outcome = train_on_samples(&cfg, &samples, false).unwrap();
        assert_eq!(outcome.model.part_classifier.value, before);
        // attention loss is not applied in this mode
        assert_eq!(outcome.history[0].loss.attention, 0.0);
    }

    #[test]
    fn artifacts_include_checkpoint_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_config();
        cfg.train.out_dir = dir.path().join("run");
        cfg.train.checkpoint_every = 1;
        let samples = micro_samples(&cfg);
        let outcome = train_on_samples(&cfg, &samples, true).unwrap();
        let ckpt = outcome.checkpoint.unwrap();
        assert!(ckpt.exists());
        assert!(cfg.train.out_dir.join("run.toml").exists());
        assert!(cfg.train.out_dir.join("history.json").exists());
        let (loaded, epoch) = checkpoint::load(&ckpt).unwrap();
        assert_eq!(epoch, 1);
        assert_eq!(loaded.cfg.part_count, 3);
    }

    #[test]
    fn fixed_attention_maps_have_zero_background_and_sharp_parts() {
        let mut grouped = Array3::zeros((32, 16, 3));
        // one strong region for part 0
        for y in 4..12 {
            for x in 4..12 {
                grouped[(y, x, 0)] = 1.0;
            }
        }
        let maps = fixed_attention_maps(&grouped, 8, 4);
        assert_eq!(maps.dim(), (8, 4, 4));
        assert!(maps.index_axis(Axis(2), 0).iter().all(|&v| v == 0.0));
        // interior of the region maps near-one to part 0's channel
        assert!(maps[(2, 2, 1)] > 0.9, "got {}", maps[(2, 2, 1)]);
    }
}
