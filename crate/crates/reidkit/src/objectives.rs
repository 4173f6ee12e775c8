//! Training losses: the pixel-wise part attention loss, label-smoothed
//! identity losses behind normalization necks, part-averaged batch-hard
//! triplet mining, their GiLt composition, and the configurable loss
//! placement grid used by the ablation harness.

use ndarray::{Array2, Array3, Array4, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::model::{BatchEmbeddings, Heads, IdentityHead, PoolGrads};

/// Weights and rates shared by all losses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossHyperParams {
    /// Label-smoothing rate ε.
    pub eps: f64,
    /// Triplet margin α.
    pub margin: f64,
    /// Weight of the attention loss in the total objective.
    pub lambda_pa: f64,
}

impl Default for LossHyperParams {
    fn default() -> Self {
        Self {
            eps: 0.1,
            margin: 0.3,
            lambda_pa: 0.35,
        }
    }
}

impl LossHyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eps) {
            return Err(Error::InvalidConfig(format!(
                "label smoothing rate must be in [0,1), got {}",
                self.eps
            )));
        }
        if self.margin < 0.0 || self.lambda_pa < 0.0 {
            return Err(Error::InvalidConfig(
                "triplet margin and attention weight must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// An embedding a loss can be placed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    G,
    F,
    C,
    Parts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartTripletMode {
    /// One triplet term on the part-averaged distance.
    Averaged,
    /// Independent batch-hard triplet per part, averaged over parts.
    PerPart,
}

/// Which embeddings receive the identity loss and which the triplet loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub id_on: Vec<Slot>,
    pub tri_on: Vec<Slot>,
    pub part_triplet_mode: PartTripletMode,
}

impl LossConfig {
    /// Identity loss on the holistic embeddings, part-averaged triplet on the
    /// part embeddings.
    pub fn gilt() -> Self {
        Self {
            id_on: vec![Slot::G, Slot::F, Slot::C],
            tri_on: vec![Slot::Parts],
            part_triplet_mode: PartTripletMode::Averaged,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id_on.is_empty() && self.tri_on.is_empty() {
            return Err(Error::InvalidConfig("no loss enabled".into()));
        }
        for list in [&self.id_on, &self.tri_on] {
            for (i, a) in list.iter().enumerate() {
                if list[..i].contains(a) {
                    return Err(Error::InvalidConfig(format!(
                        "duplicate loss placement {a:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Smoothed target weight for class `j`: `ε/n` plus `1−ε` on the true class,
/// so the weights sum to one.
fn smoothed_target(j: usize, target: usize, n: usize, eps: f64) -> f64 {
    let base = eps / n as f64;
    if j == target {
        base + 1.0 - eps
    } else {
        base
    }
}

/// Label-smoothed cross-entropy over logit rows; returns the batch mean and
/// per-row logit gradients of the mean.
fn smoothed_ce_logits(
    logits: &Array2<f64>,
    ids: &[usize],
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    let (b, n) = logits.dim();
    debug_assert_eq!(b, ids.len());
    let mut grad = Array2::zeros((b, n));
    let mut total = 0.0;
    for (row, (&id, mut grow)) in logits
        .rows()
        .into_iter()
        .zip(ids.iter().zip(grad.rows_mut()))
    {
        if id >= n {
            return Err(Error::InvalidLabel { label: id, max: n });
        }
        let maxv = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln() + maxv;
        for j in 0..n {
            let q = smoothed_target(j, id, n, eps);
            total -= q * (row[j] - log_z);
            grow[j] = ((row[j] - log_z).exp() - q) / b as f64;
        }
    }
    Ok((total / b as f64, grad))
}

/// Smoothed cross-entropy against already-normalized probabilities (used for
/// the attention maps, which are softmax outputs). Terms with zero target
/// weight are skipped so exact one-hot predictions are well defined.
fn smoothed_ce_probs(probs: ArrayView1<f64>, target: usize, eps: f64) -> f64 {
    let n = probs.len();
    let mut loss = 0.0;
    for j in 0..n {
        let q = smoothed_target(j, target, n, eps);
        if q > 0.0 {
            loss -= q * probs[j].max(f64::MIN_POSITIVE).ln();
        }
    }
    loss
}

/// Label value marking a pixel as unsupervised: it contributes neither loss
/// nor gradient to the attention objective. Used for augmentation-erased
/// regions, where the true part layout no longer matches the pixels.
pub const IGNORE_LABEL: u8 = u8::MAX;

/// Pixel-wise attention supervision: smoothed cross-entropy of the `K+1`
/// attention channels against the part label map, mean over supervised
/// pixels and batch. Pixels labelled [`IGNORE_LABEL`] are skipped.
pub fn part_attention_loss(m: &Array4<f64>, labels: &Array3<u8>, eps: f64) -> Result<f64> {
    let (b, h, w, classes) = m.dim();
    if labels.dim() != (b, h, w) {
        return Err(Error::Shape(format!(
            "attention maps {:?} vs labels {:?}",
            m.dim(),
            labels.dim()
        )));
    }
    let mut total = 0.0;
    let mut supervised = 0usize;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                if labels[(bi, y, x)] == IGNORE_LABEL {
                    continue;
                }
                let target = labels[(bi, y, x)] as usize;
                if target >= classes {
                    return Err(Error::InvalidLabel {
                        label: target,
                        max: classes,
                    });
                }
                let probs = m.slice(ndarray::s![bi, y, x, ..]);
                total += smoothed_ce_probs(probs, target, eps);
                supervised += 1;
            }
        }
    }
    if supervised == 0 {
        return Ok(0.0);
    }
    Ok(total / supervised as f64)
}

/// Attention loss together with its gradient with respect to the classifier
/// logits (the maps are the softmax of those logits), both scaled by `weight`.
pub fn part_attention_loss_with_logit_grad(
    m: &Array4<f64>,
    labels: &Array3<u8>,
    eps: f64,
    weight: f64,
) -> Result<(f64, Array4<f64>)> {
    let loss = part_attention_loss(m, labels, eps)?;
    let (b, h, w, classes) = m.dim();
    let supervised = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut grad = Array4::zeros((b, h, w, classes));
    if supervised == 0 {
        return Ok((0.0, grad));
    }
    let count = supervised as f64;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                if labels[(bi, y, x)] == IGNORE_LABEL {
                    continue;
                }
                let target = labels[(bi, y, x)] as usize;
                for j in 0..classes {
                    let q = smoothed_target(j, target, classes, eps);
                    grad[(bi, y, x, j)] = weight * (m[(bi, y, x, j)] - q) / count;
                }
            }
        }
    }
    Ok((weight * loss, grad))
}

/// Identity loss through a head's eval-mode neck (value only).
pub fn identity_loss(
    head: &IdentityHead,
    features: &Array2<f64>,
    ids: &[usize],
    eps: f64,
) -> Result<f64> {
    let logits = head.logits_eval(features);
    let (loss, _) = smoothed_ce_logits(&logits, ids, eps)?;
    Ok(loss)
}

/// Identity loss through a head's train-mode neck, accumulating the head's
/// parameter gradients; returns the loss and the pre-neck feature gradient.
pub fn identity_loss_train(
    head: &mut IdentityHead,
    features: &Array2<f64>,
    ids: &[usize],
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    let (logits, cache) = head.forward_train(features);
    let (loss, d_logits) = smoothed_ce_logits(&logits, ids, eps)?;
    let d_features = head.backward(&cache, &d_logits);
    Ok((loss, d_features))
}

/// Mean over parts of the Euclidean distance between corresponding part
/// embeddings of two samples.
pub fn part_avg_dist(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "part embeddings {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let k = a.nrows();
    let mut total = 0.0;
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        total += ra
            .iter()
            .zip(rb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total / k as f64)
}

fn euclid(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Hardest positive / hardest negative mining over a precomputed distance
/// matrix. Returns, per anchor with at least one positive, the indices of the
/// mined pair and the hinge value. Errors if any anchor lacks a negative.
fn batch_hard(
    dist: &Array2<f64>,
    ids: &[usize],
    margin: f64,
) -> Result<Vec<(usize, usize, usize, f64)>> {
    let b = ids.len();
    let mut mined = Vec::new();
    for a in 0..b {
        let mut hard_pos: Option<(usize, f64)> = None;
        let mut hard_neg: Option<(usize, f64)> = None;
        for o in 0..b {
            if o == a {
                continue;
            }
            let d = dist[(a, o)];
            if ids[o] == ids[a] {
                if hard_pos.map_or(true, |(_, best)| d > best) {
                    hard_pos = Some((o, d));
                }
            } else if hard_neg.map_or(true, |(_, best)| d < best) {
                hard_neg = Some((o, d));
            }
        }
        let Some((n, d_an)) = hard_neg else {
            return Err(Error::NoNegatives);
        };
        if let Some((p, d_ap)) = hard_pos {
            mined.push((a, p, n, (d_ap - d_an + margin).max(0.0)));
        }
    }
    Ok(mined)
}

/// Per-anchor hinge terms of the part-averaged batch-hard triplet loss,
/// in anchor order (anchors without positives are skipped).
pub fn part_averaged_triplet_per_anchor(
    parts: &Array3<f64>,
    ids: &[usize],
    margin: f64,
) -> Result<Vec<f64>> {
    let b = ids.len();
    let mut dist = Array2::zeros((b, b));
    for a in 0..b {
        for o in (a + 1)..b {
            let d = part_avg_dist(
                &parts.index_axis(Axis(0), a).to_owned(),
                &parts.index_axis(Axis(0), o).to_owned(),
            )?;
            dist[(a, o)] = d;
            dist[(o, a)] = d;
        }
    }
    Ok(batch_hard(&dist, ids, margin)?
        .into_iter()
        .map(|(_, _, _, h)| h)
        .collect())
}

/// Batch-hard triplet loss on the part-averaged distance, mean over anchors.
pub fn part_averaged_triplet(parts: &Array3<f64>, ids: &[usize], margin: f64) -> Result<f64> {
    let terms = part_averaged_triplet_per_anchor(parts, ids, margin)?;
    if terms.is_empty() {
        return Ok(0.0);
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Part-averaged triplet loss with its gradient with respect to the part
/// embeddings.
pub fn part_averaged_triplet_with_grad(
    parts: &Array3<f64>,
    ids: &[usize],
    margin: f64,
) -> Result<(f64, Array3<f64>)> {
    let (b, k, _c) = parts.dim();
    let mut dist = Array2::zeros((b, b));
    for a in 0..b {
        for o in (a + 1)..b {
            let mut total = 0.0;
            for part in 0..k {
                total += euclid(
                    parts.slice(ndarray::s![a, part, ..]),
                    parts.slice(ndarray::s![o, part, ..]),
                );
            }
            let d = total / k as f64;
            dist[(a, o)] = d;
            dist[(o, a)] = d;
        }
    }
    let mined = batch_hard(&dist, ids, margin)?;
    let mut grad = Array3::zeros(parts.raw_dim());
    if mined.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / mined.len() as f64;
    let mut total = 0.0;
    // d(part-averaged distance)/d(anchor part k) = (a_k − o_k) / (K · ‖a_k − o_k‖)
    let add_dist_grad = |grad: &mut Array3<f64>, a: usize, o: usize, sign: f64| {
        for part in 0..k {
            let pa = parts.slice(ndarray::s![a, part, ..]);
            let po = parts.slice(ndarray::s![o, part, ..]);
            let d = euclid(pa, po);
            if d == 0.0 {
                continue;
            }
            let coef = sign * scale / (k as f64 * d);
            for (ch, (&va, &vo)) in pa.iter().zip(po.iter()).enumerate() {
                grad[(a, part, ch)] += coef * (va - vo);
                grad[(o, part, ch)] -= coef * (va - vo);
            }
        }
    };
    for (a, p, n, hinge) in mined {
        total += hinge * scale;
        if hinge > 0.0 {
            add_dist_grad(&mut grad, a, p, 1.0);
            add_dist_grad(&mut grad, a, n, -1.0);
        }
    }
    Ok((total, grad))
}

/// Batch-hard triplet loss on single per-sample embeddings.
pub fn standard_triplet(features: &Array2<f64>, ids: &[usize], margin: f64) -> Result<f64> {
    Ok(standard_triplet_with_grad(features, ids, margin)?.0)
}

/// Standard batch-hard triplet loss with gradients.
pub fn standard_triplet_with_grad(
    features: &Array2<f64>,
    ids: &[usize],
    margin: f64,
) -> Result<(f64, Array2<f64>)> {
    let b = ids.len();
    let mut dist = Array2::zeros((b, b));
    for a in 0..b {
        for o in (a + 1)..b {
            let d = euclid(features.row(a), features.row(o));
            dist[(a, o)] = d;
            dist[(o, a)] = d;
        }
    }
    let mined = batch_hard(&dist, ids, margin)?;
    let mut grad = Array2::zeros(features.raw_dim());
    if mined.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / mined.len() as f64;
    let mut total = 0.0;
    let add_dist_grad = |grad: &mut Array2<f64>, a: usize, o: usize, sign: f64| {
        let d = dist[(a, o)];
        if d == 0.0 {
            return;
        }
        let coef = sign * scale / d;
        for (ch, (&va, &vo)) in features.row(a).iter().zip(features.row(o).iter()).enumerate() {
            grad[(a, ch)] += coef * (va - vo);
            grad[(o, ch)] -= coef * (va - vo);
        }
    };
    for (a, p, n, hinge) in mined {
        total += hinge * scale;
        if hinge > 0.0 {
            add_dist_grad(&mut grad, a, p, 1.0);
            add_dist_grad(&mut grad, a, n, -1.0);
        }
    }
    Ok((total, grad))
}

fn part_triplet(
    parts: &Array3<f64>,
    ids: &[usize],
    margin: f64,
    mode: PartTripletMode,
) -> Result<f64> {
    match mode {
        PartTripletMode::Averaged => part_averaged_triplet(parts, ids, margin),
        PartTripletMode::PerPart => {
            let k = parts.dim().1;
            let mut total = 0.0;
            for part in 0..k {
                let f = parts.index_axis(Axis(1), part).to_owned();
                total += standard_triplet(&f, ids, margin)?;
            }
            Ok(total / k as f64)
        }
    }
}

/// Evaluates the losses a [`LossConfig`] places on a batch of embeddings
/// (eval-mode necks; value only).
pub fn evaluate_config(
    cfg: &LossConfig,
    hp: &LossHyperParams,
    heads: &Heads,
    emb: &BatchEmbeddings,
    ids: &[usize],
) -> Result<f64> {
    cfg.validate()?;
    let mut total = 0.0;
    for slot in &cfg.id_on {
        total += match slot {
            Slot::G => identity_loss(&heads.global, &emb.f_g, ids, hp.eps)?,
            Slot::F => identity_loss(&heads.foreground, &emb.f_f, ids, hp.eps)?,
            Slot::C => identity_loss(&heads.concat, &emb.f_c, ids, hp.eps)?,
            Slot::Parts => {
                let mut sum = 0.0;
                for (k, head) in heads.parts.iter().enumerate() {
                    let f = emb.parts.index_axis(Axis(1), k).to_owned();
                    sum += identity_loss(head, &f, ids, hp.eps)?;
                }
                sum
            }
        };
    }
    for slot in &cfg.tri_on {
        total += match slot {
            Slot::G => standard_triplet(&emb.f_g, ids, hp.margin)?,
            Slot::F => standard_triplet(&emb.f_f, ids, hp.margin)?,
            Slot::C => standard_triplet(&emb.f_c, ids, hp.margin)?,
            Slot::Parts => part_triplet(&emb.parts, ids, hp.margin, cfg.part_triplet_mode)?,
        };
    }
    Ok(total)
}

/// Builds a value-level loss function for one placement configuration.
pub fn loss_from_config(
    cfg: &LossConfig,
    hp: &LossHyperParams,
) -> Result<impl Fn(&Heads, &BatchEmbeddings, &[usize]) -> Result<f64>> {
    cfg.validate()?;
    hp.validate()?;
    let cfg = cfg.clone();
    let hp = *hp;
    Ok(move |heads: &Heads, emb: &BatchEmbeddings, ids: &[usize]| {
        evaluate_config(&cfg, &hp, heads, emb, ids)
    })
}

/// Identity losses on the holistic embeddings plus the part-averaged triplet
/// loss on the part embeddings.
pub fn gilt_loss(
    heads: &Heads,
    emb: &BatchEmbeddings,
    ids: &[usize],
    hp: &LossHyperParams,
) -> Result<f64> {
    evaluate_config(&LossConfig::gilt(), hp, heads, emb, ids)
}

/// Full objective: attention loss weighted by λ_pa plus the placement losses.
pub fn total_loss(
    heads: &Heads,
    emb: &BatchEmbeddings,
    m: &Array4<f64>,
    labels: &Array3<u8>,
    ids: &[usize],
    hp: &LossHyperParams,
) -> Result<f64> {
    Ok(hp.lambda_pa * part_attention_loss(m, labels, hp.eps)? + gilt_loss(heads, emb, ids, hp)?)
}

/// Per-component loss values of one training step.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub attention: f64,
    pub identity: f64,
    pub triplet: f64,
    pub total: f64,
}

/// Train-mode loss evaluation: runs the enabled identity heads in training
/// mode (accumulating their parameter gradients) and returns the embedding
/// gradients for the model backward pass.
pub fn training_losses(
    cfg: &LossConfig,
    hp: &LossHyperParams,
    heads: &mut Heads,
    emb: &BatchEmbeddings,
    ids: &[usize],
) -> Result<(LossValues, PoolGrads)> {
    cfg.validate()?;
    let (b, k, c) = emb.parts.dim();
    let mut pool = PoolGrads::zeros(b, k, c);
    let mut values = LossValues::default();
    for slot in &cfg.id_on {
        match slot {
            Slot::G => {
                let (l, d) = identity_loss_train(&mut heads.global, &emb.f_g, ids, hp.eps)?;
                values.identity += l;
                pool.d_f_g += &d;
            }
            Slot::F => {
                let (l, d) = identity_loss_train(&mut heads.foreground, &emb.f_f, ids, hp.eps)?;
                values.identity += l;
                pool.d_f_f += &d;
            }
            Slot::C => {
                let (l, d) = identity_loss_train(&mut heads.concat, &emb.f_c, ids, hp.eps)?;
                values.identity += l;
                pool.d_f_c += &d;
            }
            Slot::Parts => {
                for part in 0..k {
                    let f = emb.parts.index_axis(Axis(1), part).to_owned();
                    let (l, d) =
                        identity_loss_train(&mut heads.parts[part], &f, ids, hp.eps)?;
                    values.identity += l;
                    let mut target = pool.d_parts.slice_mut(ndarray::s![.., part, ..]);
                    target += &d;
                }
            }
        }
    }
    for slot in &cfg.tri_on {
        match slot {
            Slot::G => {
                let (l, d) = standard_triplet_with_grad(&emb.f_g, ids, hp.margin)?;
                values.triplet += l;
                pool.d_f_g += &d;
            }
            Slot::F => {
                let (l, d) = standard_triplet_with_grad(&emb.f_f, ids, hp.margin)?;
                values.triplet += l;
                pool.d_f_f += &d;
            }
            Slot::C => {
                let (l, d) = standard_triplet_with_grad(&emb.f_c, ids, hp.margin)?;
                values.triplet += l;
                pool.d_f_c += &d;
            }
            Slot::Parts => match cfg.part_triplet_mode {
                PartTripletMode::Averaged => {
                    let (l, d) = part_averaged_triplet_with_grad(&emb.parts, ids, hp.margin)?;
                    values.triplet += l;
                    pool.d_parts += &d;
                }
                PartTripletMode::PerPart => {
                    for part in 0..k {
                        let f = emb.parts.index_axis(Axis(1), part).to_owned();
                        let (l, d) = standard_triplet_with_grad(&f, ids, hp.margin)?;
                        values.triplet += l / k as f64;
                        let mut target = pool.d_parts.slice_mut(ndarray::s![.., part, ..]);
                        ndarray::Zip::from(&mut target)
                            .and(&d)
                            .for_each(|t, &g| *t += g / k as f64);
                    }
                }
            },
        }
    }
    values.total = values.identity + values.triplet;
    Ok((values, pool))
}

/// The named rows of the loss-placement grid: the GiLt default, a PCB-style
/// baseline (identity loss on parts only), and twelve numbered variants
/// covering triplet/identity placements across all embeddings.
pub fn table3_rows() -> Vec<(String, LossConfig)> {
    use Slot::{Parts, C, F, G};
    let cfg = |id_on: &[Slot], tri_on: &[Slot]| LossConfig {
        id_on: id_on.to_vec(),
        tri_on: tri_on.to_vec(),
        part_triplet_mode: PartTripletMode::Averaged,
    };
    vec![
        ("GiLt".to_string(), cfg(&[G, F, C], &[Parts])),
        ("PCB".to_string(), cfg(&[Parts], &[])),
        ("1".to_string(), cfg(&[Parts], &[G, F, C])),
        ("2".to_string(), cfg(&[G, F, C, Parts], &[G, F, C, Parts])),
        ("3".to_string(), cfg(&[G, F, C, Parts], &[])),
        ("4".to_string(), cfg(&[], &[G, F, C, Parts])),
        ("5".to_string(), cfg(&[G, F, C, Parts], &[Parts])),
        ("6".to_string(), cfg(&[G, F], &[Parts])),
        ("7".to_string(), cfg(&[G, C], &[Parts])),
        ("8".to_string(), cfg(&[F, C], &[Parts])),
        ("9".to_string(), cfg(&[G, F, C], &[C, Parts])),
        ("10".to_string(), cfg(&[G, F, C], &[F, Parts])),
        ("11".to_string(), cfg(&[G, F, C], &[G, Parts])),
        ("12".to_string(), cfg(&[G, F, C], &[C])),
    ]
}
