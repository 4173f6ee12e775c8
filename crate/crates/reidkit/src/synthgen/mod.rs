//! Procedural occluded-person corpus with full ground truth.
//!
//! Bodies are layered 2-D shapes with per-identity part colors drawn from a
//! small palette, so single body parts are frequently shared across
//! identities while the joint appearance stays discriminative. Occluders are
//! random rectangles or lower bodies of other identities. Every sample
//! carries its field stack, parsing labels and per-part visibility ground
//! truth, all derived from the same rasterization.

pub mod body;
mod io;

pub use io::{load_split, write_corpus, LoadedSample, LoadedSplit};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fields::{FieldStack, ParsingLabelMap, PartGrouping, ATOM_NAMES};
use body::{posed_shapes, rasterize_atoms, rasterize_subset, PoseParams, NUM_ATOMS};

/// Part color palette; deliberately small so distinct identities often share
/// a color on individual body parts.
/// Colors for inanimate occluders (street furniture, vehicles, luggage):
/// muted tones distinct from the clothing palette so occlusion is visually
/// learnable, as it is for real scene objects.
const OCCLUDER_PALETTE: [[f64; 3]; 5] = [
    [0.45, 0.42, 0.38],
    [0.30, 0.32, 0.35],
    [0.55, 0.50, 0.40],
    [0.25, 0.28, 0.22],
    [0.50, 0.45, 0.50],
];

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.70, 0.20],
    [0.20, 0.30, 0.85],
    [0.85, 0.80, 0.15],
    [0.80, 0.20, 0.75],
    [0.15, 0.75, 0.80],
];

/// Corpus generation parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub train_ids: usize,
    pub images_per_id: usize,
    pub eval_ids: usize,
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    /// Part count K; must have a grouping preset.
    pub part_count: usize,
    /// Probability that a sample receives an occluder.
    pub occlusion_prob: f64,
    /// Occluder extent range as a fraction of the image dimensions.
    pub occluder_min: f64,
    pub occluder_max: f64,
    /// Fraction of occluders that are other identities' lower bodies
    /// (pedestrian interference); the rest are solid rectangles (obstacles).
    pub pedestrian_frac: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_ids: 50,
            images_per_id: 20,
            eval_ids: 25,
            cameras: 4,
            height: 64,
            width: 32,
            part_count: 5,
            occlusion_prob: 0.3,
            occluder_min: 0.25,
            occluder_max: 0.60,
            pedestrian_frac: 0.4,
        }
    }
}

/// Appearance parameters of one identity: a color per atomic body region and
/// a body width factor, both deterministic in (corpus seed, id).
#[derive(Debug, Clone)]
pub struct IdentitySpec {
    pub id: u32,
    pub atom_colors: [[f64; 3]; NUM_ATOMS],
    pub body_width: f64,
}

impl IdentitySpec {
    pub fn derive(corpus_seed: u64, id: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(
            corpus_seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(id as u64 + 1)),
        );
        let mut atom_colors = [[0.0; 3]; NUM_ATOMS];
        for color in atom_colors.iter_mut() {
            let base = PALETTE[rng.gen_range(0..PALETTE.len())];
            // small per-identity shade variation on top of the palette color
            let shade = rng.gen_range(0.85..1.15);
            for (channel, &b) in color.iter_mut().zip(base.iter()) {
                *channel = (b * shade).clamp(0.0, 1.0);
            }
        }
        Self {
            id,
            atom_colors,
            body_width: rng.gen_range(0.88..1.0),
        }
    }
}

/// Occluder drawn over a rendered person.
#[derive(Debug, Clone)]
pub enum OccluderSpec {
    None,
    /// Solid-color rectangle in normalized coordinates.
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        color: [f64; 3],
    },
    /// Lower body of another identity pasted at an offset.
    LowerBody {
        other: Box<IdentitySpec>,
        pose: PoseParams,
        dx: f64,
        dy: f64,
    },
}

/// Everything a rendered sample carries: image, identity/camera labels,
/// field stack, parsing ground truth and per-part visibility.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub name: String,
    pub image: Array3<f64>,
    pub id: u32,
    pub cam: u32,
    pub fields: FieldStack,
    pub parsing_gt: ParsingLabelMap,
    pub part_visible_gt: Vec<bool>,
}

/// Per-camera color response, shared across the corpus.
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub gains: Vec<[f64; 3]>,
    pub offsets: Vec<f64>,
}

impl CameraModel {
    pub fn derive(corpus_seed: u64, cameras: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed ^ 0xCA3E_0001);
        let gains = (0..cameras)
            .map(|_| {
                [
                    rng.gen_range(0.90..1.10),
                    rng.gen_range(0.90..1.10),
                    rng.gen_range(0.90..1.10),
                ]
            })
            .collect();
        let offsets = (0..cameras).map(|_| rng.gen_range(-0.04..0.04)).collect();
        Self { gains, offsets }
    }
}

/// Static rendering context shared by all samples of a corpus.
pub struct RenderEnv {
    pub height: usize,
    pub width: usize,
    pub grouping: PartGrouping,
    pub cameras: CameraModel,
    pub lambda_t: f64,
}

/// Fraction of a part's unoccluded area that must survive for the part to
/// count as visible in the ground truth.
pub const TAU_VIS: f64 = 0.01;

/// Resolution of the emulated pose estimator: confidence fields are rendered
/// on a grid this many times coarser than the image.
pub const FIELD_STRIDE: usize = 4;
/// Confidence bled into the 4-connected neighbors of an active field cell.
pub const FIELD_DILATION_EDGE: f64 = 0.65;
/// Confidence bled into the diagonal neighbors of an active field cell.
pub const FIELD_DILATION_CORNER: f64 = 0.45;
/// Probability that the emulated estimator localizes an atom's confidence
/// blob off its true position.
pub const FIELD_JITTER_PROB: f64 = 0.5;
/// Maximum localization error, in grid cells per axis.
pub const FIELD_JITTER_MAX: i64 = 2;

/// Renders one sample. Fails with a corpus error when the occluder covers the
/// entire person; callers retry with a fresh draw.
pub fn render_sample(
    identity: &IdentitySpec,
    pose: &PoseParams,
    occlusion: &OccluderSpec,
    cam: u32,
    env: &RenderEnv,
    noise_seed: u64,
) -> Result<SampleRecord> {
    let (h, w) = (env.height, env.width);
    let shapes = posed_shapes(pose, identity.body_width);
    let atom_map = rasterize_atoms(&shapes, h, w);

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let bg = rng.gen_range(0.35..0.65);
    let mut image = Array3::from_shape_fn((h, w, 3), |_| bg);

    for y in 0..h {
        for x in 0..w {
            let atom = atom_map[y * w + x];
            let base = if atom >= 0 {
                identity.atom_colors[atom as usize]
            } else {
                [bg, bg, bg]
            };
            for c in 0..3 {
                let noise = rng.gen_range(-0.04..0.04);
                image[(y, x, c)] = (base[c] + noise).clamp(0.0, 1.0);
            }
        }
    }

    // occluder mask and painting
    let mut occluded = vec![false; h * w];
    match occlusion {
        OccluderSpec::None => {}
        OccluderSpec::Rect { x0, y0, x1, y1, color } => {
            for y in 0..h {
                let ny = (y as f64 + 0.5) / h as f64;
                for x in 0..w {
                    let nx = (x as f64 + 0.5) / w as f64;
                    if nx >= *x0 && nx < *x1 && ny >= *y0 && ny < *y1 {
                        occluded[y * w + x] = true;
                        for c in 0..3 {
                            let noise = rng.gen_range(-0.04..0.04);
                            image[(y, x, c)] = (color[c] + noise).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        OccluderSpec::LowerBody { other, pose, dx, dy } => {
            let other_shapes = posed_shapes(pose, other.body_width);
            let mask = rasterize_subset(&other_shapes, &[2, 7, 8, 9, 10], *dx, *dy, h, w);
            for y in 0..h {
                for x in 0..w {
                    let atom = mask[y * w + x];
                    if atom >= 0 {
                        occluded[y * w + x] = true;
                        let base = other.atom_colors[atom as usize];
                        for c in 0..3 {
                            let noise = rng.gen_range(-0.04..0.04);
                            image[(y, x, c)] = (base[c] + noise).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }

    // fields: per-atom confidence blobs emulating a coarse external pose
    // estimator. The atom mask is max-pooled onto a stride-FIELD_STRIDE grid,
    // dilated by one cell (confidence blobs bleed past the true silhouette,
    // like real keypoint heatmaps), bilinearly upsampled, and re-zeroed under
    // occluders. A part with any unoccluded pixel keeps a near-1 peak; a
    // fully occluded part contributes no source cell and stays zero.
    let ch = h.div_ceil(FIELD_STRIDE);
    let cw = w.div_ceil(FIELD_STRIDE);
    let mut coarse = Array3::zeros((ch, cw, NUM_ATOMS));
    for y in 0..h {
        for x in 0..w {
            let atom = atom_map[y * w + x];
            if atom >= 0 && !occluded[y * w + x] {
                coarse[(y / FIELD_STRIDE, x / FIELD_STRIDE, atom as usize)] = 1.0;
            }
        }
    }
    // keypoint localization error: each atom's blob may land up to
    // FIELD_JITTER_MAX grid cells off. A shift is kept only when at least
    // one shifted cell sits on a fully unoccluded cell, so a visible part
    // never loses its confidence peak to the occluder re-zeroing below.
    let mut field_rng = ChaCha8Rng::seed_from_u64(noise_seed ^ 0xF1E1D);
    let mut cell_clear = vec![true; ch * cw];
    for y in 0..h {
        for x in 0..w {
            if occluded[y * w + x] {
                cell_clear[(y / FIELD_STRIDE) * cw + x / FIELD_STRIDE] = false;
            }
        }
    }
    for a in 0..NUM_ATOMS {
        let jitters = field_rng.gen::<f64>() < FIELD_JITTER_PROB;
        let (dy, dx) = (
            field_rng.gen_range(-FIELD_JITTER_MAX..=FIELD_JITTER_MAX),
            field_rng.gen_range(-FIELD_JITTER_MAX..=FIELD_JITTER_MAX),
        );
        if !jitters || (dy == 0 && dx == 0) {
            continue;
        }
        let cells: Vec<(usize, usize)> = (0..ch)
            .flat_map(|cy| (0..cw).map(move |cx| (cy, cx)))
            .filter(|&(cy, cx)| coarse[(cy, cx, a)] > 0.0)
            .collect();
        if cells.is_empty() {
            continue;
        }
        let shifted: Vec<(usize, usize)> = cells
            .iter()
            .filter_map(|&(cy, cx)| {
                let (ny, nx) = (cy as i64 + dy, cx as i64 + dx);
                (ny >= 0 && nx >= 0 && ny < ch as i64 && nx < cw as i64)
                    .then(|| (ny as usize, nx as usize))
            })
            .collect();
        if !shifted.iter().any(|&(cy, cx)| cell_clear[cy * cw + cx]) {
            continue;
        }
        for &(cy, cx) in &cells {
            coarse[(cy, cx, a)] = 0.0;
        }
        for &(cy, cx) in &shifted {
            coarse[(cy, cx, a)] = 1.0;
        }
    }
    let mut dilated = coarse.clone();
    for cy in 0..ch {
        for cx in 0..cw {
            for a in 0..NUM_ATOMS {
                if coarse[(cy, cx, a)] < 1.0 {
                    continue;
                }
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (cy as i64 + dy, cx as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= ch as i64 || nx >= cw as i64 {
                            continue;
                        }
                        let spread = if dy == 0 || dx == 0 {
                            FIELD_DILATION_EDGE
                        } else {
                            FIELD_DILATION_CORNER
                        };
                        let cell = &mut dilated[(ny as usize, nx as usize, a)];
                        *cell = f64::max(*cell, spread);
                    }
                }
            }
        }
    }
    let mut field_data = crate::fields::resize_bilinear(&dilated, h, w);
    for y in 0..h {
        for x in 0..w {
            if occluded[y * w + x] {
                for a in 0..NUM_ATOMS {
                    field_data[(y, x, a)] = 0.0;
                }
            }
        }
    }
    let fields = FieldStack::new(
        field_data,
        ATOM_NAMES.iter().map(|s| s.to_string()).collect(),
    )?;

    // exact parsing ground truth: the rendered part silhouettes, with
    // occluded pixels labelled background. The fields above are the noisy
    // estimator view; the parsing map is the renderer's own truth.
    let k = env.grouping.part_count;
    let mut atom_to_part = vec![usize::MAX; NUM_ATOMS];
    for (part, group) in env.grouping.groups.iter().enumerate() {
        for &a in group {
            atom_to_part[a] = part;
        }
    }
    let mut label_grid = ndarray::Array2::<u8>::zeros((h, w));
    let mut unoccluded = vec![0usize; k];
    let mut remaining = vec![0usize; k];
    for y in 0..h {
        for x in 0..w {
            let atom = atom_map[y * w + x];
            if atom >= 0 {
                let part = atom_to_part[atom as usize];
                if part != usize::MAX {
                    unoccluded[part] += 1;
                    if !occluded[y * w + x] {
                        remaining[part] += 1;
                        label_grid[(y, x)] = part as u8 + 1;
                    }
                }
            }
        }
    }
    let parsing_gt = ParsingLabelMap::new(label_grid, k)?;
    let part_visible_gt = part_visibility(&remaining, &unoccluded);
    if !matches!(occlusion, OccluderSpec::None) && part_visible_gt.iter().all(|&v| !v) {
        return Err(Error::Corpus("occluder covers the entire person".into()));
    }

    // camera response applied last so occluders are tinted too
    let cam_idx = cam as usize % env.cameras.gains.len();
    let gains = env.cameras.gains[cam_idx];
    let offset = env.cameras.offsets[cam_idx];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                image[(y, x, c)] = (image[(y, x, c)] * gains[c] + offset).clamp(0.0, 1.0);
            }
        }
    }

    Ok(SampleRecord {
        name: String::new(),
        image,
        id: identity.id,
        cam,
        fields,
        parsing_gt,
        part_visible_gt,
    })
}

/// Visibility ground truth from pixel counts: a part is visible when at
/// least `TAU_VIS` of its unoccluded area survives (and at least one pixel).
pub fn part_visibility(remaining: &[usize], unoccluded: &[usize]) -> Vec<bool> {
    remaining
        .iter()
        .zip(unoccluded.iter())
        .map(|(&rem, &area)| {
            if area == 0 {
                false
            } else {
                let needed = ((area as f64 * TAU_VIS).ceil() as usize).max(1);
                rem >= needed
            }
        })
        .collect()
}

/// Corpus splits, train identities disjoint from query/gallery identities.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub config: CorpusConfig,
    pub seed: u64,
    pub train: Vec<SampleRecord>,
    pub query: Vec<SampleRecord>,
    pub gallery: Vec<SampleRecord>,
}

fn draw_occluder(
    rng: &mut ChaCha8Rng,
    cfg: &CorpusConfig,
    corpus_seed: u64,
    all_ids: std::ops::Range<u32>,
    own_id: u32,
) -> OccluderSpec {
    if rng.gen::<f64>() >= cfg.occlusion_prob {
        return OccluderSpec::None;
    }
    if rng.gen::<f64>() < 1.0 - cfg.pedestrian_frac {
        let color = OCCLUDER_PALETTE[rng.gen_range(0..OCCLUDER_PALETTE.len())];
        let shade = rng.gen_range(0.5..1.2);
        let tinted = [
            (color[0] * shade).clamp(0.0, 1.0),
            (color[1] * shade).clamp(0.0, 1.0),
            (color[2] * shade).clamp(0.0, 1.0),
        ];
        if rng.gen::<f64>() < 0.5 {
            // bottom-anchored object in front of the person, the typical
            // occlusion pattern: wide, flush with the image bottom
            let wfrac = rng.gen_range(0.7..1.0);
            let cx = rng.gen_range(0.4..0.6);
            let y0 = rng.gen_range(0.55..0.80);
            OccluderSpec::Rect {
                x0: cx - wfrac / 2.0,
                y0,
                x1: cx + wfrac / 2.0,
                y1: 1.0,
                color: tinted,
            }
        } else {
            let wfrac = rng.gen_range(cfg.occluder_min..cfg.occluder_max);
            let hfrac = rng.gen_range(cfg.occluder_min..cfg.occluder_max) * 0.7;
            let cx = rng.gen_range(0.15..0.85);
            let cy = rng.gen_range(0.15..0.85);
            OccluderSpec::Rect {
                x0: cx - wfrac / 2.0,
                y0: cy - hfrac / 2.0,
                x1: cx + wfrac / 2.0,
                y1: cy + hfrac / 2.0,
                color: tinted,
            }
        }
    } else {
        let mut other_id = rng.gen_range(all_ids.clone());
        if other_id == own_id {
            other_id = if other_id + 1 < all_ids.end {
                other_id + 1
            } else {
                all_ids.start
            };
        }
        OccluderSpec::LowerBody {
            other: Box::new(IdentitySpec::derive(corpus_seed, other_id)),
            pose: PoseParams::sample(rng),
            dx: rng.gen_range(-0.25..0.25),
            dy: rng.gen_range(0.05..0.30),
        }
    }
}

/// Generates the full corpus. Deterministic in `(config, seed)`.
///
/// Train identities are `0..train_ids`; evaluation identities follow and are
/// split by camera: camera-0 images form the query set, the rest the
/// gallery, so every query has cross-camera positives.
pub fn generate_dataset(config: &CorpusConfig, seed: u64) -> Result<DatasetSplit> {
    if config.train_ids == 0 || config.images_per_id == 0 {
        return Err(Error::InvalidConfig(
            "need at least one identity and one image per identity".into(),
        ));
    }
    if config.eval_ids > 0 && config.cameras < 2 {
        return Err(Error::InvalidConfig(
            "evaluation identities require at least two cameras".into(),
        ));
    }
    let grouping = crate::fields::grouping_preset(config.part_count)?;
    let env = RenderEnv {
        height: config.height,
        width: config.width,
        grouping,
        cameras: CameraModel::derive(seed, config.cameras),
        lambda_t: 0.5,
    };

    let total_ids = (config.train_ids + config.eval_ids) as u32;
    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();

    for id in 0..total_ids {
        let identity = IdentitySpec::derive(seed, id);
        let is_train = (id as usize) < config.train_ids;
        for idx in 0..config.images_per_id {
            let cam = (idx % config.cameras) as u32;
            let sample_seed = seed
                ^ (id as u64).wrapping_mul(0x1000_0001)
                ^ (idx as u64).wrapping_mul(0x0001_F123);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let mut sample = None;
            for attempt in 0..20u64 {
                let pose = PoseParams::sample(&mut rng);
                let occ = draw_occluder(&mut rng, config, seed, 0..total_ids, id);
                let noise_seed = sample_seed.wrapping_add(attempt.wrapping_mul(0xABCD));
                match render_sample(&identity, &pose, &occ, cam, &env, noise_seed) {
                    Ok(s) => {
                        sample = Some(s);
                        break;
                    }
                    Err(Error::Corpus(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            let mut sample = match sample {
                Some(s) => s,
                None => {
                    // every draw degenerate; fall back to the unoccluded sample
                    let pose = PoseParams::sample(&mut rng);
                    render_sample(&identity, &pose, &OccluderSpec::None, cam, &env, sample_seed)?
                }
            };
            sample.name = format!("{id:04}_c{cam}_{idx:03}");
            if is_train {
                train.push(sample);
            } else if cam == 0 {
                query.push(sample);
            } else {
                gallery.push(sample);
            }
        }
    }

    Ok(DatasetSplit {
        config: config.clone(),
        seed,
        train,
        query,
        gallery,
    })
}

/// Identity-balanced batch sampler: each batch holds `p` distinct identities
/// with `k_inst` instances each, sampling images with replacement when an
/// identity has fewer than `k_inst` images.
pub struct PkSampler {
    ids: Vec<u32>,
    images: Vec<Vec<usize>>,
    p: usize,
    k_inst: usize,
    total: usize,
    rng: ChaCha8Rng,
    queues: Vec<Vec<usize>>,
    cycle: Vec<usize>,
    pos: usize,
}

impl PkSampler {
    pub fn new(labels: &[(usize, u32)], p: usize, k_inst: usize, seed: u64) -> Result<Self> {
        let mut by_id: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        for &(index, id) in labels {
            by_id.entry(id).or_default().push(index);
        }
        if by_id.len() < p {
            return Err(Error::InvalidConfig(format!(
                "PK sampler needs at least P={p} identities, corpus has {}",
                by_id.len()
            )));
        }
        let ids: Vec<u32> = by_id.keys().copied().collect();
        let images: Vec<Vec<usize>> = by_id.into_values().collect();
        let n = ids.len();
        Ok(Self {
            ids,
            images,
            p,
            k_inst,
            total: labels.len(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            queues: vec![Vec::new(); n],
            cycle: Vec::new(),
            pos: 0,
        })
    }

    pub fn num_identities(&self) -> usize {
        self.ids.len()
    }

    /// Batches per epoch: enough to cover every image once in expectation and
    /// every identity at least once.
    pub fn batches_per_epoch(&self) -> usize {
        let by_images = self.total.div_ceil(self.p * self.k_inst);
        let by_ids = self.ids.len().div_ceil(self.p);
        by_images.max(by_ids)
    }

    fn next_id(&mut self, exclude: &[usize]) -> usize {
        loop {
            if self.pos >= self.cycle.len() {
                let mut order: Vec<usize> = (0..self.ids.len()).collect();
                use rand::seq::SliceRandom;
                order.shuffle(&mut self.rng);
                self.cycle = order;
                self.pos = 0;
            }
            let candidate = self.cycle[self.pos];
            self.pos += 1;
            if !exclude.contains(&candidate) {
                return candidate;
            }
        }
    }

    fn take_instances(&mut self, id_slot: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.k_inst);
        while out.len() < self.k_inst {
            if self.queues[id_slot].is_empty() {
                let mut imgs = self.images[id_slot].clone();
                use rand::seq::SliceRandom;
                imgs.shuffle(&mut self.rng);
                self.queues[id_slot] = imgs;
            }
            out.push(self.queues[id_slot].pop().unwrap());
        }
        out
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut chosen: Vec<usize> = Vec::with_capacity(self.p);
        while chosen.len() < self.p {
            let slot = self.next_id(&chosen);
            chosen.push(slot);
        }
        let mut batch = Vec::with_capacity(self.p * self.k_inst);
        for slot in chosen {
            batch.extend(self.take_instances(slot));
        }
        batch
    }

    /// One epoch worth of batches.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        (0..self.batches_per_epoch())
            .map(|_| self.next_batch())
            .collect()
    }
}

impl Iterator for PkSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}
