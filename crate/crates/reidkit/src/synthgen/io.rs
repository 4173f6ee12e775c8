//! Corpus on-disk layout:
//! `root/{train,query,gallery}/images/*.png`, `.../masks/*.png` (8-bit label
//! maps), `.../fields/*.fstk`, and `.../meta.jsonl` with one record per line.
//! A `corpus.toml` at the root echoes the generation config.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{FieldStack, ParsingLabelMap};
use crate::synthgen::{CorpusConfig, DatasetSplit, SampleRecord};

#[derive(Debug, Serialize, Deserialize)]
struct MetaRecord {
    file: String,
    id: u32,
    cam: u32,
    part_visible: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    seed: u64,
    config: CorpusConfig,
}

fn write_image_png(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (image[(y as usize, x as usize, c)].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}

fn read_image_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(y, x, c)| img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0,
    ))
}

fn write_split(samples: &[SampleRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    fs::create_dir_all(dir.join("fields"))?;
    let mut meta = String::new();
    for s in samples {
        let image_rel = format!("images/{}.png", s.name);
        write_image_png(&s.image, &dir.join(&image_rel))?;
        s.parsing_gt
            .write_png(&dir.join(format!("masks/{}.png", s.name)))?;
        s.fields
            .write_fstk_file(&dir.join(format!("fields/{}.fstk", s.name)))?;
        let record = MetaRecord {
            file: image_rel,
            id: s.id,
            cam: s.cam,
            part_visible: s.part_visible_gt.clone(),
        };
        meta.push_str(&serde_json::to_string(&record)?);
        meta.push('\n');
    }
    fs::write(dir.join("meta.jsonl"), meta)?;
    Ok(())
}

/// Writes all three splits plus the corpus manifest under `root`.
pub fn write_corpus(split: &DatasetSplit, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    write_split(&split.train, &root.join("train"))?;
    write_split(&split.query, &root.join("query"))?;
    write_split(&split.gallery, &root.join("gallery"))?;
    let manifest = CorpusManifest {
        seed: split.seed,
        config: split.config.clone(),
    };
    fs::write(root.join("corpus.toml"), toml::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// One sample read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub name: String,
    pub image: Array3<f64>,
    pub id: u32,
    pub cam: u32,
    pub parsing: ParsingLabelMap,
    pub fields: FieldStack,
    pub part_visible: Vec<bool>,
}

/// A split read back from disk, with the corpus config it was generated from.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub config: CorpusConfig,
    pub samples: Vec<LoadedSample>,
}

/// Loads one split (`train`, `query` or `gallery`) from a corpus root.
pub fn load_split(root: &Path, split: &str) -> Result<LoadedSplit> {
    let manifest: CorpusManifest = toml::from_str(&fs::read_to_string(
        root.join("corpus.toml"),
    )?)?;
    let dir = root.join(split);
    let meta = fs::read_to_string(dir.join("meta.jsonl"))?;
    let mut samples = Vec::new();
    for line in meta.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MetaRecord = serde_json::from_str(line)?;
        let name = Path::new(&record.file)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Corpus(format!("bad file name {}", record.file)))?
            .to_string();
        let image = read_image_png(&dir.join(&record.file))?;
        let parsing = ParsingLabelMap::read_png(
            &dir.join(format!("masks/{name}.png")),
            manifest.config.part_count,
        )?;
        let fields = FieldStack::read_fstk_file(&dir.join(format!("fields/{name}.fstk")))?;
        samples.push(LoadedSample {
            name,
            image,
            id: record.id,
            cam: record.cam,
            parsing,
            fields,
            part_visible: record.part_visible,
        });
    }
    Ok(LoadedSplit {
        config: manifest.config,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate_dataset;

    #[test]
    fn corpus_round_trip_and_byte_identical_rewrite() {
        let cfg = CorpusConfig {
            train_ids: 3,
            images_per_id: 2,
            eval_ids: 2,
            cameras: 2,
            occlusion_prob: 0.5,
            ..CorpusConfig::default()
        };
        let ds = generate_dataset(&cfg, 42).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let root_a = tmp.path().join("a");
        let root_b = tmp.path().join("b");
        write_corpus(&ds, &root_a).unwrap();
        let ds2 = generate_dataset(&cfg, 42).unwrap();
        write_corpus(&ds2, &root_b).unwrap();

        // byte-identical corpora from the same (config, seed)
        for entry in walk(&root_a) {
            let rel = entry.strip_prefix(&root_a).unwrap();
            let a = fs::read(&entry).unwrap();
            let b = fs::read(root_b.join(rel)).unwrap();
            assert_eq!(a, b, "{rel:?} differs");
        }

        let loaded = load_split(&root_a, "train").unwrap();
        assert_eq!(loaded.samples.len(), ds.train.len());
        for (l, s) in loaded.samples.iter().zip(ds.train.iter()) {
            assert_eq!(l.id, s.id);
            assert_eq!(l.cam, s.cam);
            assert_eq!(l.part_visible, s.part_visible_gt);
            assert_eq!(l.parsing.labels, s.parsing_gt.labels);
            // images go through u8 quantization
            for (a, b) in l.image.iter().zip(s.image.iter()) {
                assert!((a - b).abs() < 1.0 / 255.0 + 1e-9);
            }
        }
    }

    fn walk(root: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            let mut entries: Vec<_> = fs::read_dir(&dir)
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            entries.sort();
            for path in entries {
                if path.is_dir() {
                    stack.push(path);
                } else {
                    out.push(path);
                }
            }
        }
        out
    }
}
