//! Embedding extraction: runs the trained model over a corpus split and
//! writes the part-based embeddings plus visibility bits to an archive.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::error::Result;
use crate::fields::{group_max, grouping_preset};
use crate::harness::train::fixed_attention_maps;
use crate::net::checkpoint;
use crate::net::Model;
use crate::retrieval::{write_archive, ArchiveHeader, EmbeddingRecord};
use crate::synthgen::SampleRecord;

#[derive(Debug, Clone, Copy)]
pub struct EmbedOptions {
    /// Visibility threshold λ_v.
    pub lambda_v: f64,
    /// Force all visibility bits to 1 (visibility ablation).
    pub no_visibility: bool,
    /// Use fixed field-derived attention maps instead of the learned ones.
    pub fixed_attention: bool,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            lambda_v: 0.4,
            no_visibility: false,
            fixed_attention: false,
        }
    }
}

/// Extracts one record per sample: row 0 is the foreground embedding,
/// rows 1..=K the part embeddings; visibility bits follow the same order
/// with the foreground bit always 1.
pub fn embed_samples(
    model: &Model,
    samples: &[SampleRecord],
    opts: EmbedOptions,
) -> Result<Vec<EmbeddingRecord>> {
    let k = model.cfg.part_count;
    let c = model.cfg.embed_dim();
    let (feat_h, feat_w) = model.cfg.feature_hw();
    let grouping = opts
        .fixed_attention
        .then(|| grouping_preset(k))
        .transpose()?;

    samples
        .par_iter()
        .map(|sample| {
            let fixed_m = match &grouping {
                Some(g) => {
                    let grouped = group_max(&sample.fields, g)?;
                    Some(fixed_attention_maps(&grouped.data, feat_h, feat_w))
                }
                None => None,
            };
            let out = model.infer(&sample.image, opts.lambda_v, fixed_m.as_ref())?;
            let mut emb = Array2::zeros((k + 1, c));
            emb.row_mut(0).assign(&out.f_f);
            emb.slice_mut(s![1.., ..]).assign(&out.parts);
            let vis = if opts.no_visibility {
                vec![1u8; k + 1]
            } else {
                // out.vis is ordered (g, f, c, part 1..K)
                let mut bits = vec![1u8];
                bits.extend_from_slice(&out.vis[3..]);
                bits
            };
            EmbeddingRecord::new(
                format!("images/{}.png", sample.name),
                sample.id as usize,
                sample.cam as usize,
                emb,
                vis,
            )
        })
        .collect()
}

/// Loads a checkpoint and a corpus split, embeds it, and writes the archive
/// to `<out>`. Returns the archive path.
pub fn embed_split_to_archive(
    ckpt: &Path,
    corpus_root: &Path,
    split: &str,
    out: &Path,
    opts: EmbedOptions,
) -> Result<PathBuf> {
    let (model, _) = checkpoint::load(ckpt)?;
    let loaded = crate::synthgen::load_split(corpus_root, split)?;
    let samples: Vec<SampleRecord> = loaded
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
    let records = embed_samples(&model, &samples, opts)?;
    let header = ArchiveHeader {
        k: model.cfg.part_count,
        c: model.cfg.embed_dim(),
        fingerprint: checkpoint::config_fingerprint(&model.cfg),
    };
    write_archive(out, &header, &records)?;
    Ok(out.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;
    use crate::retrieval::read_archive;
    use crate::synthgen::{generate_dataset, CorpusConfig};

    fn micro_corpus() -> (Vec<SampleRecord>, Model) {
        let cfg = CorpusConfig {
            train_ids: 3,
            images_per_id: 2,
            eval_ids: 0,
            cameras: 2,
            height: 32,
            width: 16,
            part_count: 3,
            occlusion_prob: 0.5,
            ..CorpusConfig::default()
        };
        let split = generate_dataset(&cfg, 5).unwrap();
        let model = Model::new(
            ModelConfig {
                input_h: 32,
                input_w: 16,
                channels: [6, 8, 12],
                strides: [2, 2, 1],
                part_count: 3,
                num_train_ids: 3,
            },
            9,
        );
        (split.train, model)
    }

    #[test]
    fn one_record_per_sample_with_expected_shapes() {
        let (samples, model) = micro_corpus();
        let records = embed_samples(&model, &samples, EmbedOptions::default()).unwrap();
        assert_eq!(records.len(), samples.len());
        for r in &records {
            assert_eq!(r.emb.dim(), (4, 12));
            assert_eq!(r.vis.len(), 4);
            assert_eq!(r.vis[0], 1);
        }
    }

    #[test]
    fn repeated_extraction_is_identical() {
        let (samples, model) = micro_corpus();
        let a = embed_samples(&model, &samples, EmbedOptions::default()).unwrap();
        let b = embed_samples(&model, &samples, EmbedOptions::default()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.emb, y.emb);
            assert_eq!(x.vis, y.vis);
        }
    }

    #[test]
    fn no_visibility_option_forces_all_bits_on() {
        let (samples, model) = micro_corpus();
        let opts = EmbedOptions {
            no_visibility: true,
            ..EmbedOptions::default()
        };
        let records = embed_samples(&model, &samples, opts).unwrap();
        assert!(records.iter().all(|r| r.vis.iter().all(|&v| v == 1)));
    }

    #[test]
    fn fully_hidden_part_gets_zero_visibility_under_fixed_attention() {
        let (_, model) = micro_corpus();
        let cfg = CorpusConfig {
            train_ids: 6,
            images_per_id: 6,
            eval_ids: 0,
            cameras: 2,
            height: 32,
            width: 16,
            part_count: 3,
            occlusion_prob: 1.0,
            ..CorpusConfig::default()
        };
        let samples = generate_dataset(&cfg, 11).unwrap().train;
        let opts = EmbedOptions {
            fixed_attention: true,
            ..EmbedOptions::default()
        };
        let records = embed_samples(&model, &samples, opts).unwrap();
        let mut hidden_checked = 0;
        for (rec, sample) in records.iter().zip(samples.iter()) {
            for (k, &visible) in sample.part_visible_gt.iter().enumerate() {
                if !visible {
                    assert_eq!(
                        rec.vis[k + 1],
                        0,
                        "{}: hidden part {k} marked visible",
                        sample.name
                    );
                    hidden_checked += 1;
                }
            }
        }
        assert!(hidden_checked > 0, "corpus produced no hidden parts");
    }

    #[test]
    fn archive_round_trip_from_disk_split() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            train_ids: 2,
            images_per_id: 2,
            eval_ids: 2,
            cameras: 2,
            height: 32,
            width: 16,
            part_count: 3,
            occlusion_prob: 0.3,
            ..CorpusConfig::default()
        };
        let split = generate_dataset(&cfg, 3).unwrap();
        crate::synthgen::write_corpus(&split, dir.path()).unwrap();
        let model = Model::new(
            ModelConfig {
                input_h: 32,
                input_w: 16,
                channels: [6, 8, 12],
                strides: [2, 2, 1],
                part_count: 3,
                num_train_ids: 2,
            },
            4,
        );
        let ckpt = dir.path().join("m.ckpt");
        checkpoint::save(&model, 0, &ckpt).unwrap();
        let out = dir.path().join("query.jsonl");
        embed_split_to_archive(&ckpt, dir.path(), "query", &out, EmbedOptions::default())
            .unwrap();
        let (header, records) = read_archive(&out).unwrap();
        assert_eq!(header.k, 3);
        assert_eq!(header.c, 12);
        assert_eq!(header.fingerprint, checkpoint::config_fingerprint(&model.cfg));
        assert!(!records.is_empty());
        assert!(records[0].file.starts_with("images/"));
    }
}
