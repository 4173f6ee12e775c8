use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use reidkit::error::Result;
use reidkit::harness::{
    embed_split_to_archive, rank_report, run_grid, train_from_config, EmbedOptions, Grid,
    RankReportOptions, RunConfig,
};
use reidkit::retrieval::{distance_matrix, evaluate, full_selector, read_archive};
use reidkit::synthgen::{generate_dataset, write_corpus};

/// Body part-based person re-identification toolkit with a synthetic
/// occluded-person corpus.
#[derive(Parser)]
#[command(name = "reidkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (train/query/gallery splits) on disk.
    Generate {
        /// Run configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the configured corpus and write checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the full-scale 120-epoch schedule.
        #[arg(long)]
        paper_schedule: bool,
    },
    /// Embed a corpus split with a trained checkpoint into an archive.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        /// Split name: train, query or gallery.
        #[arg(long)]
        split: String,
        /// Corpus root directory.
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
        /// Output archive path (default: <split>.jsonl next to the corpus).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Visibility threshold.
        #[arg(long, default_value_t = 0.4)]
        lambda_v: f64,
        /// Force all visibility bits to 1.
        #[arg(long)]
        no_visibility: bool,
        /// Use fixed field-derived attention maps.
        #[arg(long)]
        fixed_attention: bool,
    },
    /// Evaluate retrieval (CMC and mAP) between two embedding archives.
    Eval {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
    },
    /// Run an ablation grid and write its table.
    Ablate {
        /// One of: loss_grid, embedding_study, components.
        #[arg(long)]
        grid: Grid,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output TSV path (default: <grid>.tsv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit top-k ranking grids and tables for a query archive.
    Rank {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        /// Output directory for the report files.
        #[arg(long, default_value = "rank_report")]
        out: PathBuf,
        /// Directory query image paths are relative to
        /// (default: "query" next to the query archive).
        #[arg(long)]
        query_dir: Option<PathBuf>,
        /// Directory gallery image paths are relative to
        /// (default: "gallery" next to the gallery archive).
        #[arg(long)]
        gallery_dir: Option<PathBuf>,
        /// Restrict the report to these query identities.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<usize>,
        /// Checkpoint for attention-map panels.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn sibling(path: &PathBuf, name: &str) -> PathBuf {
    path.parent()
        .map(|p| p.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = load_config(&config)?;
            let split = generate_dataset(&cfg.corpus.spec, cfg.train.seed)?;
            write_corpus(&split, &out)?;
            println!(
                "wrote corpus to {}: {} train / {} query / {} gallery samples",
                out.display(),
                split.train.len(),
                split.query.len(),
                split.gallery.len()
            );
        }
        Command::Train {
            config,
            paper_schedule,
        } => {
            let mut cfg = load_config(&config)?;
            if paper_schedule {
                cfg = cfg.with_paper_schedule();
            }
            let outcome = train_from_config(&cfg)?;
            for log in &outcome.history {
                println!(
                    "epoch {:3}  lr {:.2e}  total {:.4}  id {:.4}  tri {:.4}  att {:.4}",
                    log.epoch,
                    log.lr,
                    log.loss.total,
                    log.loss.identity,
                    log.loss.triplet,
                    log.loss.attention
                );
            }
            if let Some(ckpt) = outcome.checkpoint {
                println!("checkpoint: {}", ckpt.display());
            }
        }
        Command::Embed {
            ckpt,
            split,
            corpus,
            out,
            lambda_v,
            no_visibility,
            fixed_attention,
        } => {
            let out = out.unwrap_or_else(|| corpus.join(format!("{split}.jsonl")));
            let opts = EmbedOptions {
                lambda_v,
                no_visibility,
                fixed_attention,
            };
            let path = embed_split_to_archive(&ckpt, &corpus, &split, &out, opts)?;
            println!("wrote archive: {}", path.display());
        }
        Command::Eval { query, gallery } => {
            let (qh, q) = read_archive(&query)?;
            let (gh, g) = read_archive(&gallery)?;
            if qh != gh {
                return Err(reidkit::error::Error::Checkpoint(format!(
                    "archive headers disagree: {qh:?} vs {gh:?}"
                )));
            }
            let dist = distance_matrix(&q, &g, &full_selector(qh.k))?;
            let q_ids: Vec<usize> = q.iter().map(|r| r.id).collect();
            let g_ids: Vec<usize> = g.iter().map(|r| r.id).collect();
            let q_cams: Vec<usize> = q.iter().map(|r| r.cam).collect();
            let g_cams: Vec<usize> = g.iter().map(|r| r.cam).collect();
            let res = evaluate(&dist, &q_ids, &g_ids, &q_cams, &g_cams, &[1, 5, 10])?;
            for (k, v) in &res.cmc {
                println!("rank-{k}: {v:.4}");
            }
            println!("mAP: {:.4}", res.map);
            println!("evaluated {} queries, skipped {}", res.evaluated, res.skipped);
        }
        Command::Ablate { grid, config, out } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| {
                PathBuf::from(match grid {
                    Grid::LossGrid => "loss_grid.tsv",
                    Grid::EmbeddingStudy => "embedding_study.tsv",
                    Grid::Components => "components.tsv",
                })
            });
            let rows = run_grid(grid, &cfg, &out)?;
            print!("{}", reidkit::harness::ablate::format_rows(&rows));
            println!("wrote table: {}", out.display());
        }
        Command::Rank {
            query,
            gallery,
            topk,
            out,
            query_dir,
            gallery_dir,
            ids,
            ckpt,
        } => {
            let opts = RankReportOptions {
                topk,
                query_dir: query_dir.unwrap_or_else(|| sibling(&query, "query")),
                gallery_dir: gallery_dir.unwrap_or_else(|| sibling(&gallery, "gallery")),
                query_ids: ids,
                ckpt,
            };
            let report = rank_report(&query, &gallery, &out, &opts)?;
            println!("wrote table: {}", report.table.display());
            println!("wrote grid: {}", report.grid.display());
            if let Some(att) = report.attention {
                println!("wrote attention panels: {}", att.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
