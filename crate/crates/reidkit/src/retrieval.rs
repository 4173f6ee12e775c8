//! Inference-time matching: visibility-weighted part-to-part distances,
//! query/gallery distance matrices with embedding selectors, CMC/mAP
//! evaluation under the single-query protocol, and the embedding archive
//! format.

use std::io::{BufRead, Write as _};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sample's inference embeddings: the foreground embedding followed by
/// the `K` part embeddings, with one visibility bit each. The foreground bit
/// is always 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub file: String,
    pub id: usize,
    pub cam: usize,
    /// Shape `(K+1, C)`: row 0 is the foreground embedding, rows 1..=K the
    /// part embeddings.
    pub emb: Array2<f64>,
    /// `K+1` bits ordered (foreground, part 1..K); `vis[0] == 1`.
    pub vis: Vec<u8>,
}

impl EmbeddingRecord {
    pub fn new(file: String, id: usize, cam: usize, emb: Array2<f64>, vis: Vec<u8>) -> Result<Self> {
        if vis.len() != emb.nrows() {
            return Err(Error::Shape(format!(
                "{} visibility bits for {} embeddings",
                vis.len(),
                emb.nrows()
            )));
        }
        if vis.first() != Some(&1) {
            return Err(Error::Shape(
                "the foreground embedding must be marked visible".into(),
            ));
        }
        Ok(Self {
            file,
            id,
            cam,
            emb,
            vis,
        })
    }
}

/// Indices into a record's embedding rows: 0 selects the foreground
/// embedding, `k` selects part `k`.
pub type Selector = Vec<usize>;

/// The selector matching the full inference-time distance: foreground plus
/// all `k` parts.
pub fn full_selector(k: usize) -> Selector {
    (0..=k).collect()
}

fn euclid(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn pair_distance_selected(
    q: &EmbeddingRecord,
    g: &EmbeddingRecord,
    selector: &[usize],
) -> Result<f64> {
    if q.emb.dim() != g.emb.dim() {
        return Err(Error::Shape(format!(
            "query embeddings {:?} vs gallery {:?}",
            q.emb.dim(),
            g.emb.dim()
        )));
    }
    let rows = q.emb.nrows();
    let mut num = 0.0;
    let mut den = 0.0;
    for &i in selector {
        if i >= rows {
            return Err(Error::InvalidConfig(format!(
                "selector index {i} out of range for {rows} embeddings"
            )));
        }
        let v = (q.vis[i] * g.vis[i]) as f64;
        if v > 0.0 {
            num += euclid(q.emb.row(i), g.emb.row(i));
            den += 1.0;
        }
    }
    if den == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(num / den)
    }
}

/// Visibility-weighted mean of per-embedding Euclidean distances over the
/// foreground and all parts; +∞ when no embedding is visible in both records.
pub fn pair_distance(q: &EmbeddingRecord, g: &EmbeddingRecord) -> Result<f64> {
    pair_distance_selected(q, g, &full_selector(q.emb.nrows() - 1))
}

/// A query × gallery matrix of extended-real distances.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub values: Array2<f64>,
}

/// Pairwise distances restricted to a selector; a pair with no mutually
/// visible selected embedding gets +∞.
pub fn distance_matrix(
    queries: &[EmbeddingRecord],
    gallery: &[EmbeddingRecord],
    selector: &[usize],
) -> Result<DistanceMatrix> {
    if selector.is_empty() {
        return Err(Error::InvalidConfig("empty embedding selector".into()));
    }
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let rows: Result<Vec<Vec<f64>>> = queries
        .par_iter()
        .map(|q| {
            gallery
                .iter()
                .map(|g| pair_distance_selected(q, g, selector))
                .collect()
        })
        .collect();
    let rows = rows?;
    let mut values = Array2::zeros((queries.len(), gallery.len()));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, d) in row.into_iter().enumerate() {
            values[(i, j)] = d;
        }
    }
    Ok(DistanceMatrix { values })
}

/// Retrieval quality under the single-query protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    /// Rank-k accuracy for each requested rank, in request order.
    pub cmc: Vec<(usize, f64)>,
    pub map: f64,
    /// Queries with no valid positive after filtering, excluded from means.
    pub skipped: usize,
    pub evaluated: usize,
}

impl EvalResult {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.cmc.iter().find(|(r, _)| *r == k).map(|(_, v)| *v)
    }
}

/// CMC and mAP over a distance matrix. Gallery entries sharing both identity
/// and camera with the query are excluded; infinite distances rank last; ties
/// break by gallery index; queries without any valid positive are skipped and
/// counted.
pub fn evaluate(
    dist: &DistanceMatrix,
    q_ids: &[usize],
    g_ids: &[usize],
    q_cams: &[usize],
    g_cams: &[usize],
    ranks: &[usize],
) -> Result<EvalResult> {
    let (nq, ng) = dist.values.dim();
    if q_ids.len() != nq || q_cams.len() != nq || g_ids.len() != ng || g_cams.len() != ng {
        return Err(Error::Shape(format!(
            "distance matrix {nq}x{ng} vs {} query / {} gallery labels",
            q_ids.len(),
            g_ids.len()
        )));
    }
    let mut skipped = 0usize;
    let mut ap_sum = 0.0;
    let mut first_match_ranks = Vec::new();
    for qi in 0..nq {
        // standard filter: drop gallery entries with same id and same camera
        let valid: Vec<usize> = (0..ng)
            .filter(|&gi| !(g_ids[gi] == q_ids[qi] && g_cams[gi] == q_cams[qi]))
            .collect();
        let has_positive = valid.iter().any(|&gi| g_ids[gi] == q_ids[qi]);
        if !has_positive {
            skipped += 1;
            continue;
        }
        let mut order = valid;
        order.sort_by(|&a, &b| {
            dist.values[(qi, a)]
                .total_cmp(&dist.values[(qi, b)])
                .then(a.cmp(&b))
        });
        let mut num_pos = 0usize;
        let mut ap = 0.0;
        let mut first = None;
        for (pos, &gi) in order.iter().enumerate() {
            if g_ids[gi] == q_ids[qi] {
                num_pos += 1;
                ap += num_pos as f64 / (pos + 1) as f64;
                if first.is_none() {
                    first = Some(pos);
                }
            }
        }
        ap_sum += ap / num_pos as f64;
        first_match_ranks.push(first.expect("positive exists"));
    }
    let evaluated = first_match_ranks.len();
    if evaluated == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let cmc = ranks
        .iter()
        .map(|&k| {
            let hits = first_match_ranks.iter().filter(|&&r| r < k).count();
            (k, hits as f64 / evaluated as f64)
        })
        .collect();
    Ok(EvalResult {
        cmc,
        map: ap_sum / evaluated as f64,
        skipped,
        evaluated,
    })
}

/// Formats a distance for reports; +∞ becomes the string `inf`.
pub fn format_distance(d: f64) -> String {
    if d.is_infinite() {
        "inf".to_string()
    } else {
        format!("{d:.6}")
    }
}

// ---- embedding archive ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchiveHeader {
    /// Number of parts K (the archive stores K+1 embeddings per record).
    pub k: usize,
    /// Embedding dimension.
    pub c: usize,
    /// Fingerprint of the producing checkpoint's model configuration.
    pub fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct RecordWire {
    file: String,
    id: usize,
    cam: usize,
    emb: Vec<f64>,
    vis: Vec<u8>,
}

/// Writes an archive: a JSON header line followed by one JSON record per
/// line, embeddings flattened foreground-first.
pub fn write_archive(
    path: &Path,
    header: &ArchiveHeader,
    records: &[EmbeddingRecord],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for rec in records {
        if rec.emb.dim() != (header.k + 1, header.c) {
            return Err(Error::Shape(format!(
                "record {} has embeddings {:?}, archive expects {:?}",
                rec.file,
                rec.emb.dim(),
                (header.k + 1, header.c)
            )));
        }
        let wire = RecordWire {
            file: rec.file.clone(),
            id: rec.id,
            cam: rec.cam,
            emb: rec.emb.iter().copied().collect(),
            vis: rec.vis.clone(),
        };
        serde_json::to_writer(&mut out, &wire)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<(ArchiveHeader, Vec<EmbeddingRecord>)> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Corpus(format!("{}: empty archive", path.display())))??;
    let header: ArchiveHeader = serde_json::from_str(&header_line)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: RecordWire = serde_json::from_str(&line)?;
        let emb = Array2::from_shape_vec((header.k + 1, header.c), wire.emb).map_err(|e| {
            Error::Shape(format!("record {}: {e}", wire.file))
        })?;
        records.push(EmbeddingRecord::new(
            wire.file, wire.id, wire.cam, emb, wire.vis,
        )?);
    }
    Ok((header, records))
}
