//! Static ranking reports: per-query top-k image grids with green/red
//! match borders, a distance table, and optional attention-map panels.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Axis;

use crate::error::{Error, Result};
use crate::net::Model;
use crate::retrieval::{
    distance_matrix, format_distance, full_selector, read_archive, EmbeddingRecord,
};

const BORDER: u32 = 1;
const GUTTER: u32 = 2;
const GREEN: Rgb<u8> = Rgb([0, 200, 0]);
const RED: Rgb<u8> = Rgb([220, 0, 0]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BACKGROUND: Rgb<u8> = Rgb([24, 24, 24]);

#[derive(Debug, Clone)]
pub struct RankReportOptions {
    pub topk: usize,
    /// Directory the query archive's image paths are relative to.
    pub query_dir: PathBuf,
    /// Directory the gallery archive's image paths are relative to.
    pub gallery_dir: PathBuf,
    /// Restrict the report to these query identities (all when empty).
    pub query_ids: Vec<usize>,
    /// Checkpoint for attention-map panels; skipped when absent.
    pub ckpt: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RankReport {
    pub table: PathBuf,
    pub grid: PathBuf,
    pub attention: Option<PathBuf>,
}

struct RankedRow {
    query: usize,
    order: Vec<usize>,
}

fn rank_rows(
    query: &[EmbeddingRecord],
    gallery: &[EmbeddingRecord],
    selected: &[usize],
    topk: usize,
) -> Result<(Vec<RankedRow>, ndarray::Array2<f64>)> {
    let k = query[0].emb.dim().0 - 1;
    let dist = distance_matrix(query, gallery, &full_selector(k))?;
    let rows = selected
        .iter()
        .map(|&qi| {
            let mut order: Vec<usize> = (0..gallery.len()).collect();
            order.sort_by(|&a, &b| {
                dist.values[(qi, a)]
                    .total_cmp(&dist.values[(qi, b)])
                    .then(a.cmp(&b))
            });
            order.truncate(topk);
            RankedRow { query: qi, order }
        })
        .collect();
    Ok((rows, dist.values))
}

fn load_tile(dir: &Path, file: &str) -> Result<RgbImage> {
    let path = dir.join(file);
    let img = image::open(&path)
        .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

fn blit_with_border(canvas: &mut RgbImage, tile: &RgbImage, x0: u32, y0: u32, border: Rgb<u8>) {
    let (tw, th) = tile.dimensions();
    for y in 0..th + 2 * BORDER {
        for x in 0..tw + 2 * BORDER {
            let inside = x >= BORDER && y >= BORDER && x < tw + BORDER && y < th + BORDER;
            let px = if inside {
                *tile.get_pixel(x - BORDER, y - BORDER)
            } else {
                border
            };
            canvas.put_pixel(x0 + x, y0 + y, px);
        }
    }
}

/// Renders the top-k grid: one row per query, the query tile (white border)
/// followed by its nearest gallery tiles, green for identity matches and red
/// otherwise.
fn render_grid(
    rows: &[RankedRow],
    query: &[EmbeddingRecord],
    gallery: &[EmbeddingRecord],
    opts: &RankReportOptions,
) -> Result<RgbImage> {
    let first = load_tile(&opts.query_dir, &query[rows[0].query].file)?;
    let (tw, th) = first.dimensions();
    let cell_w = tw + 2 * BORDER + GUTTER;
    let cell_h = th + 2 * BORDER + GUTTER;
    let cols = 1 + opts.topk as u32;
    let mut canvas = RgbImage::from_pixel(
        cols * cell_w + GUTTER,
        rows.len() as u32 * cell_h + GUTTER,
        BACKGROUND,
    );
    for (ri, row) in rows.iter().enumerate() {
        let y0 = ri as u32 * cell_h + GUTTER;
        let q = &query[row.query];
        let tile = load_tile(&opts.query_dir, &q.file)?;
        blit_with_border(&mut canvas, &tile, GUTTER, y0, WHITE);
        for (ci, &gi) in row.order.iter().enumerate() {
            let g = &gallery[gi];
            let tile = load_tile(&opts.gallery_dir, &g.file)?;
            let border = if g.id == q.id { GREEN } else { RED };
            blit_with_border(&mut canvas, &tile, (1 + ci as u32) * cell_w + GUTTER, y0, border);
        }
    }
    Ok(canvas)
}

/// Renders per-part attention panels for each query: the query image
/// followed by one grayscale tile per attention channel (background first),
/// upsampled to image size.
fn render_attention(
    rows: &[RankedRow],
    query: &[EmbeddingRecord],
    model: &Model,
    opts: &RankReportOptions,
) -> Result<RgbImage> {
    let first = load_tile(&opts.query_dir, &query[rows[0].query].file)?;
    let (tw, th) = first.dimensions();
    let channels = model.cfg.part_count + 1;
    let cell_w = tw + 2 * BORDER + GUTTER;
    let cell_h = th + 2 * BORDER + GUTTER;
    let cols = 1 + channels as u32;
    let mut canvas = RgbImage::from_pixel(
        cols * cell_w + GUTTER,
        rows.len() as u32 * cell_h + GUTTER,
        BACKGROUND,
    );
    for (ri, row) in rows.iter().enumerate() {
        let y0 = ri as u32 * cell_h + GUTTER;
        let q = &query[row.query];
        let tile = load_tile(&opts.query_dir, &q.file)?;
        let pixels = ndarray::Array3::from_shape_fn(
            (th as usize, tw as usize, 3),
            |(y, x, c)| tile.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0,
        );
        blit_with_border(&mut canvas, &tile, GUTTER, y0, WHITE);
        let out = model.infer(&pixels, 0.0, None)?;
        let maps = crate::fields::resize_bilinear(&out.m, th as usize, tw as usize);
        for ch in 0..channels {
            let map = maps.index_axis(Axis(2), ch);
            let panel = RgbImage::from_fn(tw, th, |x, y| {
                let v = (map[(y as usize, x as usize)].clamp(0.0, 1.0) * 255.0) as u8;
                Rgb([v, v, v])
            });
            blit_with_border(
                &mut canvas,
                &panel,
                (1 + ch as u32) * cell_w + GUTTER,
                y0,
                WHITE,
            );
        }
    }
    Ok(canvas)
}

/// Ranks every selected query against the gallery and writes the grid PNG,
/// the TSV distance table, and (with a checkpoint) the attention panels.
pub fn rank_report(
    query_archive: &Path,
    gallery_archive: &Path,
    out_dir: &Path,
    opts: &RankReportOptions,
) -> Result<RankReport> {
    if opts.topk == 0 {
        return Err(Error::InvalidConfig("topk must be at least 1".into()));
    }
    let (qh, query) = read_archive(query_archive)?;
    let (gh, gallery) = read_archive(gallery_archive)?;
    if qh != gh {
        return Err(Error::Checkpoint(format!(
            "archive headers disagree: {qh:?} vs {gh:?}"
        )));
    }
    let selected: Vec<usize> = if opts.query_ids.is_empty() {
        (0..query.len()).collect()
    } else {
        let mut sel = Vec::new();
        for &id in &opts.query_ids {
            let matches: Vec<usize> = (0..query.len()).filter(|&i| query[i].id == id).collect();
            if matches.is_empty() {
                return Err(Error::Lookup(format!("no query with identity {id}")));
            }
            sel.extend(matches);
        }
        sel
    };
    let topk = opts.topk.min(gallery.len());
    let (rows, dist) = rank_rows(&query, &gallery, &selected, topk)?;

    std::fs::create_dir_all(out_dir)?;
    let mut table = String::from("query\trank\tgallery\tdistance\tmatch\n");
    for row in &rows {
        let q = &query[row.query];
        for (rank, &gi) in row.order.iter().enumerate() {
            let g = &gallery[gi];
            writeln!(
                table,
                "{}\t{}\t{}\t{}\t{}",
                q.file,
                rank + 1,
                g.file,
                format_distance(dist[(row.query, gi)]),
                u8::from(g.id == q.id)
            )
            .unwrap();
        }
    }
    let table_path = out_dir.join("ranking.tsv");
    std::fs::write(&table_path, table)?;

    let grid = render_grid(&rows, &query, &gallery, opts)?;
    let grid_path = out_dir.join("ranking.png");
    grid.save(&grid_path)
        .map_err(|e| Error::Corpus(format!("{}: {e}", grid_path.display())))?;

    let attention = match &opts.ckpt {
        Some(ckpt) => {
            let (model, _) = crate::net::checkpoint::load(ckpt)?;
            let panel = render_attention(&rows, &query, &model, opts)?;
            let path = out_dir.join("attention.png");
            panel
                .save(&path)
                .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
            Some(path)
        }
        None => None,
    };

    Ok(RankReport {
        table: table_path,
        grid: grid_path,
        attention,
    })
}
