//! Ablation grids: sweeps over the loss configuration, the embedding
//! selection at test time, and the architectural components, each reported
//! as rank-1 / mAP rows.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::embed::{embed_samples, EmbedOptions};
use crate::harness::train::train_on_samples;
use crate::objectives::table3_rows;
use crate::retrieval::{distance_matrix, evaluate, full_selector, EmbeddingRecord, Selector};
use crate::synthgen::{generate_dataset, DatasetSplit};

/// Which sweep to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// Identity/triplet loss placement sweep.
    LossGrid,
    /// Test-time embedding selection sweep on one trained model.
    EmbeddingStudy,
    /// Component on/off study (attention, visibility, triplet averaging).
    Components,
}

impl std::str::FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss_grid" => Ok(Self::LossGrid),
            "embedding_study" => Ok(Self::EmbeddingStudy),
            "components" => Ok(Self::Components),
            other => Err(Error::InvalidConfig(format!(
                "unknown grid '{other}' (expected loss_grid, embedding_study or components)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub rank1: f64,
    pub map: f64,
}

fn eval_records(
    query: &[EmbeddingRecord],
    gallery: &[EmbeddingRecord],
    selector: &Selector,
) -> Result<(f64, f64)> {
    let dist = distance_matrix(query, gallery, selector)?;
    let q_ids: Vec<usize> = query.iter().map(|r| r.id).collect();
    let g_ids: Vec<usize> = gallery.iter().map(|r| r.id).collect();
    let q_cams: Vec<usize> = query.iter().map(|r| r.cam).collect();
    let g_cams: Vec<usize> = gallery.iter().map(|r| r.cam).collect();
    let res = evaluate(&dist, &q_ids, &g_ids, &q_cams, &g_cams, &[1])?;
    Ok((res.rank(1).unwrap(), res.map))
}

fn train_and_eval(
    cfg: &RunConfig,
    split: &DatasetSplit,
    embed_opts: EmbedOptions,
    selector: &Selector,
) -> Result<(f64, f64)> {
    let outcome = train_on_samples(cfg, &split.train, false)?;
    let query = embed_samples(&outcome.model, &split.query, embed_opts)?;
    let gallery = embed_samples(&outcome.model, &split.gallery, embed_opts)?;
    eval_records(&query, &gallery, selector)
}

fn embed_opts(cfg: &RunConfig) -> EmbedOptions {
    EmbedOptions {
        lambda_v: cfg.train.lambda_v,
        no_visibility: cfg.ablation.no_visibility,
        fixed_attention: cfg.ablation.fixed_attention,
    }
}

/// Trains one model per loss placement row and evaluates each with the full
/// embedding set.
pub fn loss_grid(cfg: &RunConfig, split: &DatasetSplit) -> Result<Vec<AblationRow>> {
    let k = cfg.corpus.spec.part_count;
    let selector = full_selector(k);
    let mut rows = Vec::new();
    for (name, loss_cfg) in table3_rows() {
        let mut row_cfg = cfg.clone();
        row_cfg.loss.id_on = loss_cfg.id_on;
        row_cfg.loss.tri_on = loss_cfg.tri_on;
        let (rank1, map) = train_and_eval(&row_cfg, split, embed_opts(&row_cfg), &selector)?;
        rows.push(AblationRow { name, rank1, map });
    }
    Ok(rows)
}

/// Trains once with the default objective, then compares test-time embedding
/// selections: foreground only, each part alone, parts without foreground,
/// and the full set.
pub fn embedding_study(cfg: &RunConfig, split: &DatasetSplit) -> Result<Vec<AblationRow>> {
    let k = cfg.corpus.spec.part_count;
    let outcome = train_on_samples(cfg, &split.train, false)?;
    let opts = embed_opts(cfg);
    let query = embed_samples(&outcome.model, &split.query, opts)?;
    let gallery = embed_samples(&outcome.model, &split.gallery, opts)?;

    let mut selections: Vec<(String, Selector)> = vec![("foreground".into(), vec![0])];
    for part in 1..=k {
        selections.push((format!("part_{part}"), vec![part]));
    }
    selections.push(("parts_only".into(), (1..=k).collect()));
    selections.push(("foreground_and_parts".into(), full_selector(k)));

    selections
        .into_iter()
        .map(|(name, selector)| {
            let (rank1, map) = eval_records(&query, &gallery, &selector)?;
            Ok(AblationRow { name, rank1, map })
        })
        .collect()
}

/// Component study: full model against single-component removals and the
/// all-removed baseline.
pub fn components(cfg: &RunConfig, split: &DatasetSplit) -> Result<Vec<AblationRow>> {
    let selector = full_selector(cfg.corpus.spec.part_count);
    let variants: Vec<(&str, fn(&mut RunConfig))> = vec![
        ("full", |_| {}),
        ("no_learned_attention", |c| c.ablation.fixed_attention = true),
        ("no_visibility", |c| c.ablation.no_visibility = true),
        ("no_part_averaging", |c| c.ablation.per_part_triplet = true),
        ("baseline", |c| {
            c.ablation.fixed_attention = true;
            c.ablation.no_visibility = true;
            c.ablation.per_part_triplet = true;
        }),
    ];
    variants
        .into_iter()
        .map(|(name, apply)| {
            let mut row_cfg = cfg.clone();
            apply(&mut row_cfg);
            let (rank1, map) =
                train_and_eval(&row_cfg, split, embed_opts(&row_cfg), &selector)?;
            Ok(AblationRow {
                name: name.to_string(),
                rank1,
                map,
            })
        })
        .collect()
}

/// Runs a grid on a freshly generated corpus and writes the rows as TSV.
pub fn run_grid(grid: Grid, cfg: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let split = generate_dataset(&cfg.corpus.spec, cfg.train.seed)?;
    let rows = run_grid_on_split(grid, cfg, &split)?;
    write_rows(out, &rows)?;
    Ok(rows)
}

pub fn run_grid_on_split(
    grid: Grid,
    cfg: &RunConfig,
    split: &DatasetSplit,
) -> Result<Vec<AblationRow>> {
    match grid {
        Grid::LossGrid => loss_grid(cfg, split),
        Grid::EmbeddingStudy => embedding_study(cfg, split),
        Grid::Components => components(cfg, split),
    }
}

pub fn format_rows(rows: &[AblationRow]) -> String {
    let mut text = String::from("name\trank1\tmap\n");
    for row in rows {
        writeln!(text, "{}\t{:.4}\t{:.4}", row.name, row.rank1, row.map).unwrap();
    }
    text
}

fn write_rows(path: &Path, rows: &[AblationRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, format_rows(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::CorpusConfig;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.corpus.spec = CorpusConfig {
            train_ids: 4,
            images_per_id: 4,
            eval_ids: 4,
            cameras: 2,
            height: 32,
            width: 16,
            part_count: 3,
            occlusion_prob: 0.3,
            ..CorpusConfig::default()
        };
        cfg.model.channels = [4, 6, 8];
        cfg.train.batch_p = 2;
        cfg.train.batch_k = 2;
        cfg.train.epochs = 1;
        cfg
    }

    #[test]
    fn embedding_study_covers_all_selections() {
        let cfg = tiny_config();
        let split = generate_dataset(&cfg.corpus.spec, 21).unwrap();
        let rows = embedding_study(&cfg, &split).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "foreground",
                "part_1",
                "part_2",
                "part_3",
                "parts_only",
                "foreground_and_parts"
            ]
        );
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.rank1)));
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.map)));
    }

    #[test]
    fn components_grid_has_expected_rows_and_tsv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let out = dir.path().join("components.tsv");
        let rows = run_grid(Grid::Components, &cfg, &out).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].name, "full");
        assert_eq!(rows[4].name, "baseline");
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("name\trank1\tmap\n"));
    }

    #[test]
    fn grid_names_parse_from_cli_strings() {
        assert_eq!("loss_grid".parse::<Grid>().unwrap(), Grid::LossGrid);
        assert_eq!(
            "embedding_study".parse::<Grid>().unwrap(),
            Grid::EmbeddingStudy
        );
        assert_eq!("components".parse::<Grid>().unwrap(), Grid::Components);
        assert!("bogus".parse::<Grid>().is_err());
    }

    #[test]
    fn loss_grid_runs_every_placement_row() {
        let cfg = tiny_config();
        let split = generate_dataset(&cfg.corpus.spec, 22).unwrap();
        let rows = loss_grid(&cfg, &split).unwrap();
        assert_eq!(rows.len(), table3_rows().len());
        assert!(rows.iter().all(|r| r.rank1.is_finite() && r.map.is_finite()));
    }
}
