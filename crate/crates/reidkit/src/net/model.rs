//! Model assembly: backbone, part classifier, pooling and identity heads,
//! with a batched training forward/backward pass.

use ndarray::{Array1, Array2, Array3, Array4, Axis, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::layers::{
    randn, BatchNorm, BnCache, Conv2d, ConvCache, Linear, Param, relu_backward, relu_inplace,
};
use crate::net::ops::{self, GWAP_DENOM_GUARD};

/// Architecture parameters. The backbone is three conv blocks
/// (conv 3x3 -> batch norm -> ReLU) with the last stride kept at 1 to
/// preserve spatial resolution for the attention maps.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub channels: [usize; 3],
    pub strides: [usize; 3],
    pub part_count: usize,
    pub num_train_ids: usize,
}

impl ModelConfig {
    pub fn toy(part_count: usize, num_train_ids: usize) -> Self {
        Self {
            input_h: 64,
            input_w: 32,
            channels: [16, 32, 64],
            strides: [2, 2, 1],
            part_count,
            num_train_ids,
        }
    }

    /// Embedding dimension C (the last backbone width).
    pub fn embed_dim(&self) -> usize {
        self.channels[2]
    }

    /// Spatial size of the appearance map for the configured input size.
    pub fn feature_hw(&self) -> (usize, usize) {
        let mut h = self.input_h;
        let mut w = self.input_w;
        for &s in &self.strides {
            // k=3, pad=1 convolutions
            h = (h + 2 - 3) / s + 1;
            w = (w + 2 - 3) / s + 1;
        }
        (h, w)
    }
}

#[derive(Clone)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

/// Normalization neck plus linear classifier for one supervised embedding.
/// Distances use the pre-neck feature; classification the post-neck logits.
#[derive(Clone)]
pub struct IdentityHead {
    pub neck: BatchNorm,
    pub classifier: Linear,
}

pub struct HeadCache {
    bn: BnCache,
    post: Array2<f64>,
}

impl IdentityHead {
    fn new(name: &str, dim: usize, num_ids: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            neck: BatchNorm::new(&format!("{name}.neck"), dim),
            classifier: Linear::new(&format!("{name}.cls"), dim, num_ids, false, rng),
        }
    }

    pub fn num_ids(&self) -> usize {
        self.classifier.weight.value.shape()[0]
    }

    /// Eval-mode logits (running-statistics neck).
    pub fn logits_eval(&self, features: &Array2<f64>) -> Array2<f64> {
        self.classifier.forward(&self.neck.forward_eval(features))
    }

    pub fn forward_train(&mut self, features: &Array2<f64>) -> (Array2<f64>, HeadCache) {
        let (post, bn) = self.neck.forward_train(features);
        let logits = self.classifier.forward(&post);
        (logits, HeadCache { bn, post })
    }

    /// Backward from logit gradients to pre-neck feature gradients,
    /// accumulating the head's parameter gradients.
    pub fn backward(&mut self, cache: &HeadCache, d_logits: &Array2<f64>) -> Array2<f64> {
        let d_post = self.classifier.backward(&cache.post, d_logits);
        self.neck.backward(&cache.bn, &d_post)
    }
}

/// Identity heads for every embedding that can be supervised.
#[derive(Clone)]
pub struct Heads {
    pub global: IdentityHead,
    pub foreground: IdentityHead,
    pub concat: IdentityHead,
    pub parts: Vec<IdentityHead>,
}

/// All embeddings of a batch, pre-neck.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    pub f_g: Array2<f64>,
    pub f_f: Array2<f64>,
    pub f_c: Array2<f64>,
    /// Shape `(B, K, C)`.
    pub parts: Array3<f64>,
}

/// Gradients flowing back into the pooled embeddings.
#[derive(Debug, Clone)]
pub struct PoolGrads {
    pub d_f_g: Array2<f64>,
    pub d_f_f: Array2<f64>,
    pub d_f_c: Array2<f64>,
    pub d_parts: Array3<f64>,
}

impl PoolGrads {
    pub fn zeros(b: usize, k: usize, c: usize) -> Self {
        Self {
            d_f_g: Array2::zeros((b, c)),
            d_f_f: Array2::zeros((b, c)),
            d_f_c: Array2::zeros((b, k * c)),
            d_parts: Array3::zeros((b, k, c)),
        }
    }
}

/// Cached activations of one training forward pass.
pub struct TrainForward {
    pub g: Array4<f64>,
    pub logits: Array4<f64>,
    pub m: Array4<f64>,
    pub m_f: Array3<f64>,
    m_f_arg: Array3<usize>,
    pub emb: BatchEmbeddings,
    mass_f: Array1<f64>,
    mass_parts: Array2<f64>,
    conv_caches: Vec<ConvCache>,
    bn_caches: Vec<BnCache>,
    post_acts: Vec<Array4<f64>>,
    pub fixed_attention: bool,
}

/// One sample's inference output.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub g: Array3<f64>,
    pub m: Array3<f64>,
    pub m_f: Array2<f64>,
    pub f_g: Array1<f64>,
    pub f_f: Array1<f64>,
    pub f_c: Array1<f64>,
    pub parts: Array2<f64>,
    /// Visibility bits ordered (g, f, c, part 1..K); holistic entries are 1.
    pub vis: Vec<u8>,
}

#[derive(Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    blocks: Vec<ConvBlock>,
    /// Part classifier parameters, shape `(K+1, C)`.
    pub part_classifier: Param,
    pub heads: Heads,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (i, (&cout, &stride)) in cfg.channels.iter().zip(cfg.strides.iter()).enumerate() {
            blocks.push(ConvBlock {
                conv: Conv2d::new(&format!("backbone.{i}"), cin, cout, 3, stride, &mut rng),
                bn: BatchNorm::new(&format!("backbone.{i}.bn"), cout),
            });
            cin = cout;
        }
        let c = cfg.embed_dim();
        let k = cfg.part_count;
        let part_classifier = Param::new(
            "part_classifier",
            // scaled so initial pixel logits already span a few units: the
            // attention softmax then reaches confident (near-binary) maps
            // within a short schedule, which the max-pixel visibility test
            // of Eq-4-style gating depends on
            ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[k + 1, c]), |_| randn(&mut rng) * 0.5),
        );
        let heads = Heads {
            global: IdentityHead::new("head.g", c, cfg.num_train_ids, &mut rng),
            foreground: IdentityHead::new("head.f", c, cfg.num_train_ids, &mut rng),
            concat: IdentityHead::new("head.c", k * c, cfg.num_train_ids, &mut rng),
            parts: (0..k)
                .map(|i| IdentityHead::new(&format!("head.p{i}"), c, cfg.num_train_ids, &mut rng))
                .collect(),
        };
        Self {
            cfg,
            blocks,
            part_classifier,
            heads,
        }
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h != self.cfg.input_h || w != self.cfg.input_w {
            return Err(Error::Shape(format!(
                "expected {}x{} input, got {h}x{w}",
                self.cfg.input_h, self.cfg.input_w
            )));
        }
        Ok(())
    }

    /// Backbone in eval mode for a single image.
    pub fn backbone_eval(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        let (h, w, _) = image.dim();
        self.check_input(h, w)?;
        let mut x = image.clone().insert_axis(Axis(0));
        for block in &self.blocks {
            let y = block.conv.forward_nocache(&x);
            let (b, ho, wo, c) = y.dim();
            let flat = y.into_shape_with_order((b * ho * wo, c)).unwrap();
            let mut normed = block.bn.forward_eval(&flat);
            relu_inplace(&mut normed);
            x = normed.into_shape_with_order((b, ho, wo, c)).unwrap();
        }
        Ok(x.index_axis(Axis(0), 0).to_owned())
    }

    fn classifier_matrix(&self) -> ndarray::ArrayView2<'_, f64> {
        self.part_classifier
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
    }

    /// Eval-mode forward for one image. `fixed_m` replaces the learned
    /// attention maps (already at feature resolution, `K+1` channels).
    pub fn infer(
        &self,
        image: &Array3<f64>,
        lambda_v: f64,
        fixed_m: Option<&Array3<f64>>,
    ) -> Result<ModelOutput> {
        let g = self.backbone_eval(image)?;
        let m = match fixed_m {
            Some(m) => m.clone(),
            None => ops::classify_pixels(&g, &self.classifier_matrix().to_owned())?,
        };
        let m_f = ops::foreground_map(&m);
        let pooled = ops::pool_embeddings(&g, &m);
        let k = self.cfg.part_count;
        let mut vis = vec![1u8; 3];
        for part in 0..k {
            let map = m.index_axis(Axis(2), part + 1).to_owned();
            vis.push(ops::visibility(&map, lambda_v));
        }
        Ok(ModelOutput {
            g,
            m,
            m_f,
            f_g: pooled.f_g,
            f_f: pooled.f_f,
            f_c: pooled.f_c,
            parts: pooled.parts,
            vis,
        })
    }

    /// Train-mode batched forward. `fixed_m` (batched, `K+1` channels with a
    /// zero background channel) switches to the fixed-attention ablation: the
    /// part classifier is bypassed and receives no gradient.
    pub fn forward_train(
        &mut self,
        images: &Array4<f64>,
        fixed_m: Option<&Array4<f64>>,
    ) -> Result<TrainForward> {
        let (b, h, w, _) = images.dim();
        self.check_input(h, w)?;
        let mut conv_caches = Vec::new();
        let mut bn_caches = Vec::new();
        let mut post_acts = Vec::new();
        let mut x = images.clone();
        for block in &mut self.blocks {
            let (y, ccache) = block.conv.forward(&x);
            let (bs, ho, wo, c) = y.dim();
            let flat = y.into_shape_with_order((bs * ho * wo, c)).unwrap();
            let (mut normed, bcache) = block.bn.forward_train(&flat);
            relu_inplace(&mut normed);
            let out = normed.into_shape_with_order((bs, ho, wo, c)).unwrap();
            conv_caches.push(ccache);
            bn_caches.push(bcache);
            post_acts.push(out.clone());
            x = out;
        }
        let g = x;
        let (_, hp, wp, c) = g.dim();
        let k = self.cfg.part_count;
        let classes = k + 1;

        let (logits, m) = if let Some(fixed) = fixed_m {
            if fixed.dim() != (b, hp, wp, classes) {
                return Err(Error::Shape("fixed attention shape mismatch".into()));
            }
            (Array4::zeros((b, hp, wp, classes)), fixed.clone())
        } else {
            let p = self.classifier_matrix();
            let g_flat = g
                .view()
                .into_shape_with_order((b * hp * wp, c))
                .unwrap()
                .to_owned();
            let logits_flat = g_flat.dot(&p.t());
            let mut m_flat = logits_flat.clone();
            for mut row in m_flat.rows_mut() {
                let maxv = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - maxv).exp();
                    sum += *v;
                }
                row.mapv_inplace(|v| v / sum);
            }
            (
                logits_flat.into_shape_with_order((b, hp, wp, classes)).unwrap(),
                m_flat.into_shape_with_order((b, hp, wp, classes)).unwrap(),
            )
        };

        // foreground map with argmax routing info
        let mut m_f = Array3::zeros((b, hp, wp));
        let mut m_f_arg = Array3::zeros((b, hp, wp));
        for bi in 0..b {
            for y in 0..hp {
                for x in 0..wp {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0usize;
                    for part in 0..k {
                        let v = m[(bi, y, x, part + 1)];
                        if v > best {
                            best = v;
                            arg = part;
                        }
                    }
                    m_f[(bi, y, x)] = best;
                    m_f_arg[(bi, y, x)] = arg;
                }
            }
        }

        // pooling
        let pixels = (hp * wp) as f64;
        let mut f_g = Array2::zeros((b, c));
        let mut f_f = Array2::zeros((b, c));
        let mut parts = Array3::zeros((b, k, c));
        let mut mass_f = Array1::zeros(b);
        let mut mass_parts = Array2::zeros((b, k));
        for bi in 0..b {
            for y in 0..hp {
                for x in 0..wp {
                    for ch in 0..c {
                        f_g[(bi, ch)] += g[(bi, y, x, ch)];
                    }
                }
            }
            for ch in 0..c {
                f_g[(bi, ch)] /= pixels;
            }
            let mf: f64 = m_f.index_axis(Axis(0), bi).sum();
            mass_f[bi] = mf;
            if mf > GWAP_DENOM_GUARD {
                for y in 0..hp {
                    for x in 0..wp {
                        let wgt = m_f[(bi, y, x)];
                        for ch in 0..c {
                            f_f[(bi, ch)] += g[(bi, y, x, ch)] * wgt;
                        }
                    }
                }
                for ch in 0..c {
                    f_f[(bi, ch)] /= mf;
                }
            }
            for part in 0..k {
                let mut mass = 0.0;
                for y in 0..hp {
                    for x in 0..wp {
                        mass += m[(bi, y, x, part + 1)];
                    }
                }
                mass_parts[(bi, part)] = mass;
                if mass > GWAP_DENOM_GUARD {
                    for y in 0..hp {
                        for x in 0..wp {
                            let wgt = m[(bi, y, x, part + 1)];
                            for ch in 0..c {
                                parts[(bi, part, ch)] += g[(bi, y, x, ch)] * wgt;
                            }
                        }
                    }
                    for ch in 0..c {
                        parts[(bi, part, ch)] /= mass;
                    }
                }
            }
        }
        let mut f_c = Array2::zeros((b, k * c));
        for bi in 0..b {
            for part in 0..k {
                for ch in 0..c {
                    f_c[(bi, part * c + ch)] = parts[(bi, part, ch)];
                }
            }
        }

        Ok(TrainForward {
            g,
            logits,
            m,
            m_f,
            m_f_arg,
            emb: BatchEmbeddings { f_g, f_f, f_c, parts },
            mass_f,
            mass_parts,
            conv_caches,
            bn_caches,
            post_acts,
            fixed_attention: fixed_m.is_some(),
        })
    }

    /// Backward from embedding and logit gradients through pooling,
    /// classifier and backbone; accumulates parameter gradients and returns
    /// the gradient with respect to the input images.
    pub fn backward(
        &mut self,
        fwd: &TrainForward,
        pool: &PoolGrads,
        d_logits_extra: Option<&Array4<f64>>,
    ) -> Array4<f64> {
        let (b, hp, wp, c) = fwd.g.dim();
        let k = self.cfg.part_count;
        let classes = k + 1;
        let pixels = (hp * wp) as f64;

        let mut d_g = Array4::zeros((b, hp, wp, c));
        let mut d_m = Array4::<f64>::zeros((b, hp, wp, classes));

        // f_c is the exact concatenation of the parts
        let mut d_parts = pool.d_parts.clone();
        for bi in 0..b {
            for part in 0..k {
                for ch in 0..c {
                    d_parts[(bi, part, ch)] += pool.d_f_c[(bi, part * c + ch)];
                }
            }
        }

        for bi in 0..b {
            // global mean pooling
            for y in 0..hp {
                for x in 0..wp {
                    for ch in 0..c {
                        d_g[(bi, y, x, ch)] += pool.d_f_g[(bi, ch)] / pixels;
                    }
                }
            }
            // foreground pooling
            let mf = fwd.mass_f[bi];
            if mf > GWAP_DENOM_GUARD {
                for y in 0..hp {
                    for x in 0..wp {
                        let wgt = fwd.m_f[(bi, y, x)];
                        let mut d_weight = 0.0;
                        for ch in 0..c {
                            let df = pool.d_f_f[(bi, ch)];
                            d_g[(bi, y, x, ch)] += wgt * df / mf;
                            d_weight += (fwd.g[(bi, y, x, ch)] - fwd.emb.f_f[(bi, ch)]) * df / mf;
                        }
                        // max over part channels routes to the argmax
                        let arg = fwd.m_f_arg[(bi, y, x)];
                        d_m[(bi, y, x, arg + 1)] += d_weight;
                    }
                }
            }
            // part pooling
            for part in 0..k {
                let mass = fwd.mass_parts[(bi, part)];
                if mass <= GWAP_DENOM_GUARD {
                    continue;
                }
                for y in 0..hp {
                    for x in 0..wp {
                        let wgt = fwd.m[(bi, y, x, part + 1)];
                        let mut d_weight = 0.0;
                        for ch in 0..c {
                            let dp = d_parts[(bi, part, ch)];
                            d_g[(bi, y, x, ch)] += wgt * dp / mass;
                            d_weight +=
                                (fwd.g[(bi, y, x, ch)] - fwd.emb.parts[(bi, part, ch)]) * dp / mass;
                        }
                        d_m[(bi, y, x, part + 1)] += d_weight;
                    }
                }
            }
        }

        if !fwd.fixed_attention {
            // softmax backward: d_logit_j = m_j * (d_m_j - sum_k d_m_k m_k)
            let mut d_logits = Array4::zeros((b, hp, wp, classes));
            for bi in 0..b {
                for y in 0..hp {
                    for x in 0..wp {
                        let mut dot = 0.0;
                        for j in 0..classes {
                            dot += d_m[(bi, y, x, j)] * fwd.m[(bi, y, x, j)];
                        }
                        for j in 0..classes {
                            d_logits[(bi, y, x, j)] =
                                fwd.m[(bi, y, x, j)] * (d_m[(bi, y, x, j)] - dot);
                        }
                    }
                }
            }
            if let Some(extra) = d_logits_extra {
                d_logits += extra;
            }
            // classifier: logits = G P^T
            let p = self.classifier_matrix().to_owned();
            let l_flat = d_logits
                .into_shape_with_order((b * hp * wp, classes))
                .unwrap();
            let g_flat = fwd
                .g
                .view()
                .into_shape_with_order((b * hp * wp, c))
                .unwrap()
                .to_owned();
            let dp = l_flat.t().dot(&g_flat);
            {
                let mut pg = self
                    .part_classifier
                    .grad
                    .view_mut()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                pg += &dp;
            }
            let dg_from_logits = l_flat.dot(&p);
            d_g += &dg_from_logits
                .into_shape_with_order((b, hp, wp, c))
                .unwrap();
        }

        // backbone backward
        let mut d = d_g;
        for i in (0..self.blocks.len()).rev() {
            relu_backward(&fwd.post_acts[i], &mut d);
            let (bs, ho, wo, ch) = d.dim();
            let flat = d.into_shape_with_order((bs * ho * wo, ch)).unwrap();
            let d_flat = self.blocks[i].bn.backward(&fwd.bn_caches[i], &flat);
            let d4 = d_flat.into_shape_with_order((bs, ho, wo, ch)).unwrap();
            d = self.blocks[i].conv.backward(&fwd.conv_caches[i], &d4);
        }
        d
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.push(&mut block.conv.weight);
            out.push(&mut block.bn.gamma);
            out.push(&mut block.bn.beta);
        }
        out.push(&mut self.part_classifier);
        let Heads {
            global,
            foreground,
            concat,
            parts,
        } = &mut self.heads;
        for head in [global, foreground, concat]
            .into_iter()
            .chain(parts.iter_mut())
        {
            out.push(&mut head.neck.gamma);
            out.push(&mut head.neck.beta);
            out.push(&mut head.classifier.weight);
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Full parameter and buffer state for checkpointing.
    pub fn state_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let push_param = |out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, p: &Param| {
            out.push((
                p.name.clone(),
                p.value.shape().to_vec(),
                p.value.iter().copied().collect(),
            ));
        };
        let push_bn = |out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, bn: &BatchNorm| {
            push_param(out, &bn.gamma);
            push_param(out, &bn.beta);
            out.push((
                format!("{}.running_mean", bn.gamma.name.trim_end_matches(".gamma")),
                vec![bn.running_mean.len()],
                bn.running_mean.to_vec(),
            ));
            out.push((
                format!("{}.running_var", bn.gamma.name.trim_end_matches(".gamma")),
                vec![bn.running_var.len()],
                bn.running_var.to_vec(),
            ));
        };
        for block in &self.blocks {
            push_param(&mut out, &block.conv.weight);
            push_bn(&mut out, &block.bn);
        }
        push_param(&mut out, &self.part_classifier);
        let heads = [
            &self.heads.global,
            &self.heads.foreground,
            &self.heads.concat,
        ];
        for head in heads.into_iter().chain(self.heads.parts.iter()) {
            push_bn(&mut out, &head.neck);
            push_param(&mut out, &head.classifier.weight);
        }
        out
    }

    /// Loads a state produced by [`Model::state_entries`]; shapes must match.
    pub fn load_state(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let map: std::collections::HashMap<&str, (&Vec<usize>, &Vec<f64>)> = entries
            .iter()
            .map(|(n, s, v)| (n.as_str(), (s, v)))
            .collect();
        let expected = self.state_entries();
        for (name, shape, _) in &expected {
            let (s, _) = map
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
            if *s != shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: checkpoint {s:?}, model {shape:?}"
                )));
            }
        }
        let load_param = |p: &mut Param| {
            let (_, v) = map[p.name.as_str()];
            p.value = ndarray::ArrayD::from_shape_vec(p.value.raw_dim(), v.clone()).unwrap();
        };
        let load_bn = |bn: &mut BatchNorm| {
            let base = bn.gamma.name.trim_end_matches(".gamma").to_string();
            let (_, gv) = map[format!("{base}.gamma").as_str()];
            bn.gamma.value = ndarray::ArrayD::from_shape_vec(bn.gamma.value.raw_dim(), gv.clone())
                .unwrap();
            let (_, bv) = map[format!("{base}.beta").as_str()];
            bn.beta.value =
                ndarray::ArrayD::from_shape_vec(bn.beta.value.raw_dim(), bv.clone()).unwrap();
            let (_, mv) = map[format!("{base}.running_mean").as_str()];
            bn.running_mean = Array1::from_vec(mv.clone());
            let (_, vv) = map[format!("{base}.running_var").as_str()];
            bn.running_var = Array1::from_vec(vv.clone());
        };
        for block in &mut self.blocks {
            load_param(&mut block.conv.weight);
            load_bn(&mut block.bn);
        }
        load_param(&mut self.part_classifier);
        let Heads {
            global,
            foreground,
            concat,
            parts,
        } = &mut self.heads;
        for head in [global, foreground, concat]
            .into_iter()
            .chain(parts.iter_mut())
        {
            load_bn(&mut head.neck);
            load_param(&mut head.classifier.weight);
        }
        Ok(())
    }
}
