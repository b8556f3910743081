//! The temporal recognition model: attention backbone, task adapter, fusion,
//! and classifier heads, with exact hand-written backward for every path.
//!
//! The backbone stacks self-attention layers over the frame sequence, with an
//! optional pyramid of additional layers at progressively halved temporal
//! resolution whose outputs are upsampled and summed back in. Prompt prefix
//! rows can be injected into the keys/values of exactly one layer. The task
//! adapter refines four learnable task tokens through temporal self-attention
//! and a cross-attention over the transposed feature map, yielding one
//! feature slice per task; the triplet slice is fused with a dedicated
//! attention block before classification.

use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Attention, AttentionConfig, Linear, Mlp, MlpCache, SelfAttnLayer};
use crate::pool::{PoolSet, PrefixMode, PrefixRows};
use crate::rng::rng_for;
use crate::tensor::{Parameter, Tensor};
use crate::{Error, Result};

/// Number of recognition tasks (instrument, verb, target, triplet).
pub const NUM_TASKS: usize = 4;

/// Prefix-injection settings; present only when the prompt-pool path is on.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PrefixSettings {
    /// Prompts retrieved per sub-pool.
    pub k: usize,
    /// Index of the attention layer receiving the prefix.
    pub location: usize,
    #[serde(default)]
    pub mode: PrefixMode,
    /// Dimension of the raw prompt vectors before projection.
    pub pool_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input feature dimension per frame.
    pub feature_dim: usize,
    /// Backbone model dimension.
    pub model_dim: usize,
    pub num_heads: usize,
    pub base_layers: usize,
    pub pyramid_layers: usize,
    pub pyramid_scale: usize,
    pub include_residual: bool,
    pub activation: Activation,
    /// Sequence length; pins the spatial adapter's cross-attention dimension.
    pub seq_len: usize,
    pub spatial_heads: usize,
    /// Hidden width of the adapter's two MLPs.
    pub adapter_hidden: usize,
    pub n_instruments: usize,
    pub n_verbs: usize,
    pub n_targets: usize,
    pub n_triplets: usize,
    /// Weight of the summed task slices in the triplet fusion.
    pub alpha: f64,
    pub use_tsp: bool,
    pub prefix: Option<PrefixSettings>,
}

impl ModelConfig {
    /// Small CPU-friendly defaults; the full-scale layer counts remain
    /// expressible through the fields.
    pub fn desk(seq_len: usize) -> Self {
        Self {
            feature_dim: 32,
            model_dim: 32,
            num_heads: 4,
            base_layers: 2,
            pyramid_layers: 0,
            pyramid_scale: 2,
            include_residual: true,
            activation: Activation::Gelu,
            seq_len,
            spatial_heads: 1,
            adapter_hidden: 32,
            n_instruments: 6,
            n_verbs: 10,
            n_targets: 15,
            n_triplets: 100,
            alpha: 0.1,
            use_tsp: true,
            prefix: None,
        }
    }

    pub fn total_attn_layers(&self) -> usize {
        self.base_layers + self.pyramid_layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_layers == 0 {
            return Err(Error::Config("need at least one base layer".into()));
        }
        if self.model_dim == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.use_tsp && self.seq_len % self.spatial_heads != 0 {
            return Err(Error::Config(format!(
                "seq_len {} must be divisible by spatial_heads {}",
                self.seq_len, self.spatial_heads
            )));
        }
        if self.pyramid_layers > 0 && self.pyramid_scale < 2 {
            return Err(Error::Config("pyramid scale must be >= 2".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        if let Some(p) = &self.prefix {
            if p.location >= self.total_attn_layers() {
                return Err(Error::Config(format!(
                    "prefix location {} out of range for {} attention layers",
                    p.location,
                    self.total_attn_layers()
                )));
            }
            if p.mode == PrefixMode::PerFrame && p.location >= self.base_layers {
                return Err(Error::Config(
                    "per-frame prefixes only fit full-resolution base layers".into(),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Temporal down/upsampling for the pyramid path.
// ---------------------------------------------------------------------------

fn downsample(x: &Tensor, scale: usize) -> Tensor {
    let (n, e) = (x.rows(), x.cols());
    let m = n.div_ceil(scale);
    let mut out = Tensor::zeros(&[m, e]);
    for i in 0..m {
        let lo = i * scale;
        let hi = ((i + 1) * scale).min(n);
        let inv = 1.0 / (hi - lo) as f64;
        for j in lo..hi {
            for (o, v) in out.row_mut(i).iter_mut().zip(x.row(j)) {
                *o += v * inv;
            }
        }
    }
    out
}

fn downsample_backward(dy: &Tensor, orig_len: usize, scale: usize) -> Tensor {
    let e = dy.cols();
    let mut out = Tensor::zeros(&[orig_len, e]);
    for i in 0..dy.rows() {
        let lo = i * scale;
        let hi = ((i + 1) * scale).min(orig_len);
        let inv = 1.0 / (hi - lo) as f64;
        for j in lo..hi {
            for (o, v) in out.row_mut(j).iter_mut().zip(dy.row(i)) {
                *o += v * inv;
            }
        }
    }
    out
}

fn upsample_to(x: &Tensor, target: usize, scale: usize) -> Tensor {
    let e = x.cols();
    let mut out = Tensor::zeros(&[target, e]);
    for j in 0..target {
        out.row_mut(j).copy_from_slice(x.row(j / scale));
    }
    out
}

fn upsample_backward(dy: &Tensor, src_len: usize, scale: usize) -> Tensor {
    let e = dy.cols();
    let mut out = Tensor::zeros(&[src_len, e]);
    for j in 0..dy.rows() {
        for (o, v) in out.row_mut(j / scale).iter_mut().zip(dy.row(j)) {
            *o += v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Backbone.
// ---------------------------------------------------------------------------

/// Input projection, base attention layers at full temporal resolution, and
/// optional pyramid layers at halved resolutions merged back by upsampling.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub input_proj: Linear,
    pub base: Vec<SelfAttnLayer>,
    pub pyramid: Vec<SelfAttnLayer>,
    scale: usize,
}

enum BaseCache {
    Plain(crate::nn::SelfAttnCache),
    PerFrame {
        caches: Vec<crate::nn::AttnCache>,
        prefix_rows: usize,
        residual: bool,
    },
}

pub struct BackboneCache {
    x: Tensor,
    base_caches: Vec<BaseCache>,
    pyr_caches: Vec<crate::nn::SelfAttnCache>,
    level_lens: Vec<usize>,
}

impl Backbone {
    fn new(cfg: &ModelConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Self> {
        let attn_cfg = AttentionConfig {
            model_dim: cfg.model_dim,
            num_heads: cfg.num_heads,
            include_residual: cfg.include_residual,
        };
        let input_proj = Linear::new(cfg.feature_dim, cfg.model_dim, rng);
        let base = (0..cfg.base_layers)
            .map(|_| SelfAttnLayer::new(&attn_cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let pyramid = (0..cfg.pyramid_layers)
            .map(|_| SelfAttnLayer::new(&attn_cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input_proj,
            base,
            pyramid,
            scale: cfg.pyramid_scale,
        })
    }

    /// Forward over the frame sequence; `prefix` is `(layer index, rows)`.
    pub fn forward(
        &self,
        x: &Tensor,
        prefix: Option<(usize, &PrefixRows)>,
    ) -> Result<(Tensor, BackboneCache)> {
        let mut h = self.input_proj.forward(x)?;
        let mut base_caches = Vec::with_capacity(self.base.len());
        for (idx, layer) in self.base.iter().enumerate() {
            match prefix {
                Some((loc, PrefixRows::Shared(rows))) if loc == idx => {
                    let (out, cache) = layer.forward(&h, Some(rows))?;
                    base_caches.push(BaseCache::Plain(cache));
                    h = out;
                }
                Some((loc, PrefixRows::PerFrame(per))) if loc == idx => {
                    if per.len() != h.rows() {
                        return Err(Error::Shape(format!(
                            "{} per-frame prefixes for {} frames",
                            per.len(),
                            h.rows()
                        )));
                    }
                    let mut out = Tensor::zeros(h.shape());
                    let mut caches = Vec::with_capacity(h.rows());
                    let r = per[0].rows();
                    for f in 0..h.rows() {
                        let q = h.row_slice(f, f + 1);
                        let kv = per[f].concat_rows(&h)?;
                        let (row, cache) = layer.attn.forward(&q, &kv, &kv)?;
                        for (o, v) in out.row_mut(f).iter_mut().zip(row.row(0)) {
                            *o = *v;
                        }
                        caches.push(cache);
                    }
                    if layer.residual {
                        out.add_assign(&h)?;
                    }
                    base_caches.push(BaseCache::PerFrame {
                        caches,
                        prefix_rows: r,
                        residual: layer.residual,
                    });
                    h = out;
                }
                _ => {
                    let (out, cache) = layer.forward(&h, None)?;
                    base_caches.push(BaseCache::Plain(cache));
                    h = out;
                }
            }
        }
        // Pyramid: each level runs at the previous level's length / scale.
        let mut level_lens = vec![h.rows()];
        let mut level_outs = vec![h];
        let mut pyr_caches = Vec::with_capacity(self.pyramid.len());
        for (p, layer) in self.pyramid.iter().enumerate() {
            let input = downsample(level_outs.last().expect("level 0 exists"), self.scale);
            level_lens.push(input.rows());
            let global_idx = self.base.len() + p;
            let rows = match prefix {
                Some((loc, PrefixRows::Shared(rows))) if loc == global_idx => Some(rows),
                _ => None,
            };
            let (out, cache) = layer.forward(&input, rows)?;
            pyr_caches.push(cache);
            level_outs.push(out);
        }
        let mut y = level_outs[0].clone();
        for p in 1..level_outs.len() {
            let mut up = level_outs[p].clone();
            for q in (0..p).rev() {
                up = upsample_to(&up, level_lens[q], self.scale);
            }
            y.add_assign(&up)?;
        }
        Ok((
            y,
            BackboneCache {
                x: x.clone(),
                base_caches,
                pyr_caches,
                level_lens,
            },
        ))
    }

    /// Returns `(dx, d_prefix_rows)`.
    pub fn backward(
        &mut self,
        cache: &BackboneCache,
        dy: &Tensor,
    ) -> Result<(Tensor, Option<PrefixRows>)> {
        let levels = cache.level_lens.len();
        // Gradient wrt each level output: merge path first.
        let mut acc: Vec<Tensor> = Vec::with_capacity(levels);
        acc.push(dy.clone());
        for p in 1..levels {
            let mut d = dy.clone();
            for q in 0..p {
                d = upsample_backward(&d, cache.level_lens[q + 1], self.scale);
            }
            acc.push(d);
        }
        let mut d_prefix: Option<PrefixRows> = None;
        // Walk pyramid levels top-down, adding each level's input gradient to
        // the level below.
        for p in (1..levels).rev() {
            let (d_input, dp) = self.pyramid[p - 1].backward(&cache.pyr_caches[p - 1], &acc[p])?;
            if let Some(dp) = dp {
                d_prefix = Some(PrefixRows::Shared(dp));
            }
            let spread = downsample_backward(&d_input, cache.level_lens[p - 1], self.scale);
            acc[p - 1].add_assign(&spread)?;
        }
        let mut d_h = acc.swap_remove(0);
        for (layer, layer_cache) in self.base.iter_mut().zip(&cache.base_caches).rev() {
            match layer_cache {
                BaseCache::Plain(c) => {
                    let (dx, dp) = layer.backward(c, &d_h)?;
                    if let Some(dp) = dp {
                        d_prefix = Some(PrefixRows::Shared(dp));
                    }
                    d_h = dx;
                }
                BaseCache::PerFrame {
                    caches,
                    prefix_rows,
                    residual,
                } => {
                    let frames = caches.len();
                    let e = d_h.cols();
                    let mut dx = Tensor::zeros(&[frames, e]);
                    let mut dps = Vec::with_capacity(frames);
                    for (f, c) in caches.iter().enumerate() {
                        let d_row = d_h.row_slice(f, f + 1);
                        let (dq, dk, dv) = layer.attn.backward(c, &d_row)?;
                        let dkv = dk.add(&dv)?;
                        for (o, v) in dx.row_mut(f).iter_mut().zip(dq.row(0)) {
                            *o += v;
                        }
                        dx.add_assign(&dkv.row_slice(*prefix_rows, dkv.rows()))?;
                        dps.push(dkv.row_slice(0, *prefix_rows));
                    }
                    if *residual {
                        dx.add_assign(&d_h)?;
                    }
                    d_prefix = Some(PrefixRows::PerFrame(dps));
                    d_h = dx;
                }
            }
        }
        let dx = self.input_proj.backward(&cache.x, &d_h)?;
        Ok((dx, d_prefix))
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.input_proj.visit("backbone.input_proj", f);
        for (i, layer) in self.base.iter().enumerate() {
            layer.visit(&format!("backbone.base{i}"), f);
        }
        for (i, layer) in self.pyramid.iter().enumerate() {
            layer.visit(&format!("backbone.pyr{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.input_proj.visit_mut("backbone.input_proj", f);
        for (i, layer) in self.base.iter_mut().enumerate() {
            layer.visit_mut(&format!("backbone.base{i}"), f);
        }
        for (i, layer) in self.pyramid.iter_mut().enumerate() {
            layer.visit_mut(&format!("backbone.pyr{i}"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Task adapter.
// ---------------------------------------------------------------------------

/// Four learnable task tokens refined along the temporal axis (self-attention
/// over `[features; tokens]`) and the spatial axis (cross-attention of
/// MLP-mapped tokens against the transposed feature map).
#[derive(Debug, Clone)]
pub struct TaskAdapter {
    pub prompts: Parameter,
    pub temporal: SelfAttnLayer,
    pub query_mlp: Mlp,
    pub spatial_attn: Attention,
    pub out_mlp: Mlp,
}

pub struct AdapterCache {
    temporal: crate::nn::SelfAttnCache,
    query_cache: MlpCache,
    spatial: crate::nn::AttnCache,
    out_cache: MlpCache,
    /// Temporally enhanced feature rows (first `L` rows of the split).
    pub f_t: Tensor,
    /// Fused task tokens `P_t + P_s`.
    pub q_tilde: Tensor,
}

impl TaskAdapter {
    fn new(cfg: &ModelConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Self> {
        let e = cfg.model_dim;
        let attn_cfg = AttentionConfig {
            model_dim: e,
            num_heads: cfg.num_heads,
            include_residual: cfg.include_residual,
        };
        Ok(Self {
            prompts: Parameter::new(crate::rng::uniform(
                &[NUM_TASKS, e],
                1.0 / (e as f64).sqrt(),
                rng,
            )),
            temporal: SelfAttnLayer::new(&attn_cfg, rng)?,
            query_mlp: Mlp::new(e, cfg.adapter_hidden, cfg.seq_len, cfg.activation, rng),
            spatial_attn: Attention::new(cfg.seq_len, cfg.spatial_heads, rng)?,
            out_mlp: Mlp::new(cfg.seq_len, cfg.adapter_hidden, e, cfg.activation, rng),
        })
    }

    /// Temporal and spatial prompting producing `(F_t, Q_tilde)`.
    pub fn forward(&self, xhat: &Tensor) -> Result<AdapterCache> {
        let l = xhat.rows();
        // Temporal: self-attention over the concatenation, then split.
        let concat = xhat.concat_rows(&self.prompts.value)?;
        let (t_out, temporal) = self.temporal.forward(&concat, None)?;
        let f_t = t_out.row_slice(0, l);
        let p_t = t_out.row_slice(l, l + NUM_TASKS);
        // Spatial: tokens mapped to length-L queries, keys/values are the
        // transposed features.
        let (q_mid, query_cache) = self.query_mlp.forward(&self.prompts.value)?;
        let xt = xhat.transposed();
        let (s_out, spatial) = self.spatial_attn.forward(&q_mid, &xt, &xt)?;
        let (p_s, out_cache) = self.out_mlp.forward(&s_out)?;
        let q_tilde = p_t.add(&p_s)?;
        Ok(AdapterCache {
            temporal,
            query_cache,
            spatial,
            out_cache,
            f_t,
            q_tilde,
        })
    }

    /// Backward from `(d_f_t, d_q_tilde)`; returns the gradient wrt `xhat`.
    pub fn backward(
        &mut self,
        cache: &AdapterCache,
        d_f_t: &Tensor,
        d_q_tilde: &Tensor,
    ) -> Result<Tensor> {
        // Spatial branch.
        let d_s_out = self.out_mlp.backward(&cache.out_cache, d_q_tilde)?;
        let (d_q_mid, d_k, d_v) = self.spatial_attn.backward(&cache.spatial, &d_s_out)?;
        let mut d_xhat = d_k.add(&d_v)?.transposed();
        self.prompts
            .grad
            .add_assign(&self.query_mlp.backward(&cache.query_cache, &d_q_mid)?)?;
        // Temporal branch: re-assemble the split gradient.
        let d_concat_out = d_f_t.concat_rows(d_q_tilde)?;
        let (d_concat, _) = self.temporal.backward(&cache.temporal, &d_concat_out)?;
        let l = d_f_t.rows();
        d_xhat.add_assign(&d_concat.row_slice(0, l))?;
        self.prompts
            .grad
            .add_assign(&d_concat.row_slice(l, l + NUM_TASKS))?;
        Ok(d_xhat)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        f("adapter.prompts", &self.prompts);
        self.temporal.visit("adapter.temporal", f);
        self.query_mlp.visit("adapter.query_mlp", f);
        self.spatial_attn.visit("adapter.spatial", f);
        self.out_mlp.visit("adapter.out_mlp", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("adapter.prompts", &mut self.prompts);
        self.temporal.visit_mut("adapter.temporal", f);
        self.query_mlp.visit_mut("adapter.query_mlp", f);
        self.spatial_attn.visit_mut("adapter.spatial", f);
        self.out_mlp.visit_mut("adapter.out_mlp", f);
    }
}

// ---------------------------------------------------------------------------
// Full model.
// ---------------------------------------------------------------------------

/// Per-task frame logits.
#[derive(Debug, Clone)]
pub struct TaskLogits {
    pub instrument: Tensor,
    pub verb: Tensor,
    pub target: Tensor,
    pub triplet: Tensor,
}

pub struct ModelCache {
    backbone: BackboneCache,
    xhat: Tensor,
    adapter: Option<AdapterCache>,
    fusion: crate::nn::SelfAttnCache,
    fused: Tensor,
    z_final: Tensor,
    raw_prefix: Option<PrefixRows>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub prefix_proj: Option<Linear>,
    pub adapter: Option<TaskAdapter>,
    pub fusion_attn: SelfAttnLayer,
    pub head_i: Linear,
    pub head_v: Linear,
    pub head_t: Linear,
    pub head_ivt: Linear,
}

impl Model {
    /// Parameters are drawn from per-component seeded streams, so toggling
    /// one module never shifts another module's initialization.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config, &mut rng_for(seed, "init-backbone"))?;
        let prefix_proj = config.prefix.as_ref().map(|p| {
            Linear::new(
                p.pool_dim,
                config.model_dim,
                &mut rng_for(seed, "init-prefix-proj"),
            )
        });
        let adapter = if config.use_tsp {
            Some(TaskAdapter::new(config, &mut rng_for(seed, "init-adapter"))?)
        } else {
            None
        };
        let fusion_attn = SelfAttnLayer::new(
            &AttentionConfig {
                model_dim: config.model_dim,
                num_heads: config.num_heads,
                include_residual: config.include_residual,
            },
            &mut rng_for(seed, "init-fusion"),
        )?;
        let mut head_rng = rng_for(seed, "init-heads");
        let e = config.model_dim;
        Ok(Self {
            config: config.clone(),
            backbone,
            prefix_proj,
            adapter,
            fusion_attn,
            head_i: Linear::new(e, config.n_instruments, &mut head_rng),
            head_v: Linear::new(e, config.n_verbs, &mut head_rng),
            head_t: Linear::new(e, config.n_targets, &mut head_rng),
            head_ivt: Linear::new(e, config.n_triplets, &mut head_rng),
        })
    }

    /// Project raw prompt rows into model space.
    fn project_prefix(&self, raw: &PrefixRows) -> Result<PrefixRows> {
        let proj = self
            .prefix_proj
            .as_ref()
            .ok_or_else(|| Error::Config("prefix rows given but prompt path is off".into()))?;
        Ok(match raw {
            PrefixRows::Shared(rows) => PrefixRows::Shared(proj.forward(rows)?),
            PrefixRows::PerFrame(list) => PrefixRows::PerFrame(
                list.iter()
                    .map(|t| proj.forward(t))
                    .collect::<Result<Vec<_>>>()?,
            ),
        })
    }

    /// Full forward pass; `prefix` carries raw (unprojected) prompt rows.
    pub fn forward(&self, x: &Tensor, prefix: Option<&PrefixRows>) -> Result<(TaskLogits, ModelCache)> {
        if x.cols() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "input dim {} vs configured {}",
                x.cols(),
                self.config.feature_dim
            )));
        }
        let projected = prefix.map(|p| self.project_prefix(p)).transpose()?;
        let loc = self.config.prefix.as_ref().map(|p| p.location);
        let (xhat, backbone) = self.backbone.forward(
            x,
            projected
                .as_ref()
                .and_then(|p| loc.map(|l| (l, p))),
        )?;
        let (fused, fusion) = self.fusion_attn.forward(&xhat, None)?;
        let (adapter_cache, z_final, logits) = if let Some(adapter) = &self.adapter {
            let cache = adapter.forward(&xhat)?;
            let slices = task_slices(&cache.f_t, &cache.q_tilde)?;
            let mut z_final = fused.clone();
            let mut summed = slices[0].clone();
            for s in &slices[1..] {
                summed.add_assign(s)?;
            }
            z_final.add_scaled_assign(&summed, self.config.alpha)?;
            let logits = TaskLogits {
                instrument: self.head_i.forward(&slices[0])?,
                verb: self.head_v.forward(&slices[1])?,
                target: self.head_t.forward(&slices[2])?,
                triplet: self.head_ivt.forward(&z_final)?,
            };
            (Some(cache), z_final, logits)
        } else {
            let logits = TaskLogits {
                instrument: self.head_i.forward(&xhat)?,
                verb: self.head_v.forward(&xhat)?,
                target: self.head_t.forward(&xhat)?,
                triplet: self.head_ivt.forward(&fused)?,
            };
            (None, fused.clone(), logits)
        };
        Ok((
            logits,
            ModelCache {
                backbone,
                xhat,
                adapter: adapter_cache,
                fusion,
                fused,
                z_final,
                raw_prefix: prefix.cloned(),
            },
        ))
    }

    /// Accumulate parameter gradients from per-task logit gradients and
    /// return the gradient wrt the input features.
    pub fn backward(&mut self, cache: &ModelCache, d_logits: &TaskLogits) -> Result<Tensor> {
        let alpha = self.config.alpha;
        let mut d_xhat;
        let d_fused;
        if let Some(adapter) = &mut self.adapter {
            let ac = cache.adapter.as_ref().expect("adapter cache present");
            let slices = task_slices(&ac.f_t, &ac.q_tilde)?;
            let d_z_final = self.head_ivt.backward(&cache.z_final, &d_logits.triplet)?;
            d_fused = d_z_final.clone();
            let mut d_slices = [
                self.head_i.backward(&slices[0], &d_logits.instrument)?,
                self.head_v.backward(&slices[1], &d_logits.verb)?,
                self.head_t.backward(&slices[2], &d_logits.target)?,
                Tensor::zeros(slices[3].shape()),
            ];
            for d in &mut d_slices {
                d.add_scaled_assign(&d_z_final, alpha)?;
            }
            // Z[m] = F_t + broadcast(Q_tilde[m]).
            let mut d_f_t = Tensor::zeros(ac.f_t.shape());
            let mut d_q_tilde = Tensor::zeros(&[NUM_TASKS, ac.f_t.cols()]);
            for (m, d) in d_slices.iter().enumerate() {
                d_f_t.add_assign(d)?;
                let sums = d.col_sums();
                for (o, v) in d_q_tilde.row_mut(m).iter_mut().zip(sums.data()) {
                    *o += v;
                }
            }
            d_xhat = adapter.backward(ac, &d_f_t, &d_q_tilde)?;
        } else {
            d_fused = self.head_ivt.backward(&cache.fused, &d_logits.triplet)?;
            d_xhat = self.head_i.backward(&cache.xhat, &d_logits.instrument)?;
            d_xhat.add_assign(&self.head_v.backward(&cache.xhat, &d_logits.verb)?)?;
            d_xhat.add_assign(&self.head_t.backward(&cache.xhat, &d_logits.target)?)?;
        }
        let (d_from_fusion, _) = self.fusion_attn.backward(&cache.fusion, &d_fused)?;
        d_xhat.add_assign(&d_from_fusion)?;
        let (dx, d_prefix) = self.backbone.backward(&cache.backbone, &d_xhat)?;
        if let (Some(proj), Some(d_rows), Some(raw)) =
            (&mut self.prefix_proj, d_prefix, &cache.raw_prefix)
        {
            match (d_rows, raw) {
                (PrefixRows::Shared(d), PrefixRows::Shared(r)) => {
                    proj.backward(r, &d)?;
                }
                (PrefixRows::PerFrame(ds), PrefixRows::PerFrame(rs)) => {
                    for (d, r) in ds.iter().zip(rs) {
                        proj.backward(r, d)?;
                    }
                }
                _ => return Err(Error::Shape("prefix gradient/input mode mismatch".into())),
            }
        }
        Ok(dx)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.backbone.visit(f);
        if let Some(proj) = &self.prefix_proj {
            proj.visit("prefix_proj", f);
        }
        if let Some(adapter) = &self.adapter {
            adapter.visit(f);
        }
        self.fusion_attn.visit("fusion", f);
        self.head_i.visit("head_i", f);
        self.head_v.visit("head_v", f);
        self.head_t.visit("head_t", f);
        self.head_ivt.visit("head_ivt", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.backbone.visit_mut(f);
        if let Some(proj) = &mut self.prefix_proj {
            proj.visit_mut("prefix_proj", f);
        }
        if let Some(adapter) = &mut self.adapter {
            adapter.visit_mut(f);
        }
        self.fusion_attn.visit_mut("fusion", f);
        self.head_i.visit_mut("head_i", f);
        self.head_v.visit_mut("head_v", f);
        self.head_t.visit_mut("head_t", f);
        self.head_ivt.visit_mut("head_ivt", f);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _| names.push(name.to_string()));
        names
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }
}

/// `Z[m] = F_t + broadcast(Q_tilde[m])` as four `L x E` slices in task order
/// instrument, verb, target, triplet.
pub fn task_slices(f_t: &Tensor, q_tilde: &Tensor) -> Result<[Tensor; 4]> {
    if q_tilde.rows() != NUM_TASKS || q_tilde.cols() != f_t.cols() {
        return Err(Error::Shape(format!(
            "task tokens {:?} vs features {:?}",
            q_tilde.shape(),
            f_t.shape()
        )));
    }
    let make = |m: usize| {
        let mut z = f_t.clone();
        for r in 0..z.rows() {
            for (v, q) in z.row_mut(r).iter_mut().zip(q_tilde.row(m)) {
                *v += q;
            }
        }
        z
    };
    Ok([make(0), make(1), make(2), make(3)])
}

// ---------------------------------------------------------------------------
// Checkpointing: text header (magic + one JSON line) + little-endian f64
// parameter payload, bit-exact round trip.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "IVT-CHECKPOINT-V1";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    pools: Option<PoolSet>,
    params: Vec<(String, Vec<usize>)>,
}

/// Write the model (and pools, when the prompt path is on) to one file.
pub fn save_checkpoint(
    model: &Model,
    pools: Option<&PoolSet>,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let mut params = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    model.visit_params(&mut |name, p| {
        params.push((name.to_string(), p.value.shape().to_vec()));
        for &v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let meta = CheckpointMeta {
        config: model.config.clone(),
        pools: pools.cloned(),
        params,
    };
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(serde_json::to_string(&meta)?.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Rebuild a model (and pools) from a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<(Model, Option<PoolSet>)> {
    let bytes = std::fs::read(path)?;
    let first_nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint missing header".into()))?;
    if &bytes[..first_nl] != CHECKPOINT_MAGIC.as_bytes() {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let rest = &bytes[first_nl + 1..];
    let second_nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint missing metadata line".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&rest[..second_nl])?;
    let payload = &rest[second_nl + 1..];
    let expected: usize = meta
        .params
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() * 8)
        .sum();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let mut model = Model::new(&meta.config, 0)?;
    let mut cursor = 0usize;
    let mut values: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
    for (name, shape) in &meta.params {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = payload[cursor..cursor + n * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        cursor += n * 8;
        values.insert(name.clone(), Tensor::new(shape.clone(), data)?);
    }
    let mut missing = Vec::new();
    model.visit_params_mut(&mut |name, p| match values.remove(name) {
        Some(v) if v.shape() == p.value.shape() => p.value = v,
        _ => missing.push(name.to_string()),
    });
    if !missing.is_empty() || !values.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint/model parameter mismatch: missing {missing:?}, extra {:?}",
            values.keys().collect::<Vec<_>>()
        )));
    }
    Ok((model, meta.pools))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, rng_for};
    use crate::tensor::{close, finite_diff_grad};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 6,
            model_dim: 8,
            num_heads: 2,
            base_layers: 2,
            pyramid_layers: 0,
            pyramid_scale: 2,
            include_residual: true,
            activation: Activation::Gelu,
            seq_len: 5,
            spatial_heads: 1,
            adapter_hidden: 6,
            n_instruments: 3,
            n_verbs: 4,
            n_targets: 5,
            n_triplets: 7,
            alpha: 0.1,
            use_tsp: true,
            prefix: None,
        }
    }

    #[test]
    fn backbone_preserves_length_for_all_configs() {
        for (base, pyr) in [(1, 0), (2, 0), (2, 2), (3, 1)] {
            let mut cfg = tiny_config();
            cfg.base_layers = base;
            cfg.pyramid_layers = pyr;
            cfg.use_tsp = false;
            let model = Model::new(&cfg, 1).unwrap();
            for l in [1usize, 2, 5, 9] {
                let mut rng = rng_for(l as u64, "bb-len");
                let x = randn(&[l, 6], &mut rng);
                let (y, _) = model.backbone.forward(&x, None).unwrap();
                assert_eq!(y.shape(), &[l, 8]);
            }
        }
    }

    #[test]
    fn one_layer_zero_weights_reduces_to_residual_of_projection() {
        let mut cfg = tiny_config();
        cfg.base_layers = 1;
        cfg.use_tsp = false;
        let mut model = Model::new(&cfg, 2).unwrap();
        // Zero every backbone attention weight; keep the input projection.
        model.backbone.base[0]
            .attn
            .visit_mut("", &mut |_, p: &mut Parameter| {
                p.value = Tensor::zeros(p.value.shape())
            });
        let mut rng = rng_for(3, "bb-zero");
        let x = randn(&[4, 6], &mut rng);
        let (y, _) = model.backbone.forward(&x, None).unwrap();
        let projected = model.backbone.input_proj.forward(&x).unwrap();
        // Attention output is all zeros, so the residual path carries through.
        assert_eq!(y, projected);
    }

    #[test]
    fn temporal_prompting_shapes_and_m_is_four() {
        let cfg = tiny_config();
        let model = Model::new(&cfg, 4).unwrap();
        let adapter = model.adapter.as_ref().unwrap();
        assert_eq!(adapter.prompts.value.shape(), &[NUM_TASKS, 8]);
        assert_eq!(NUM_TASKS, 4);
        let mut rng = rng_for(5, "tsp-shape");
        let xhat = randn(&[5, 8], &mut rng);
        let cache = adapter.forward(&xhat).unwrap();
        assert_eq!(cache.f_t.shape(), &[5, 8]);
        assert_eq!(cache.q_tilde.shape(), &[4, 8]);
    }

    #[test]
    fn temporal_prompting_matches_primitive_composition() {
        let cfg = tiny_config();
        let model = Model::new(&cfg, 6).unwrap();
        let adapter = model.adapter.as_ref().unwrap();
        let mut rng = rng_for(7, "tsp-oracle");
        let xhat = randn(&[5, 8], &mut rng);
        let cache = adapter.forward(&xhat).unwrap();
        // Independent composition: concat -> the same attention layer -> split.
        let concat = xhat.concat_rows(&adapter.prompts.value).unwrap();
        let (full, _) = adapter.temporal.forward(&concat, None).unwrap();
        let f_t = full.row_slice(0, 5);
        for (a, b) in cache.f_t.data().iter().zip(f_t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_prompting_handles_length_one() {
        let mut cfg = tiny_config();
        cfg.seq_len = 1;
        let model = Model::new(&cfg, 8).unwrap();
        let mut rng = rng_for(9, "tsp-l1");
        let x = randn(&[1, 6], &mut rng);
        let (logits, _) = model.forward(&x, None).unwrap();
        assert_eq!(logits.triplet.shape(), &[1, 7]);
    }

    #[test]
    fn expand_identities_hold() {
        let mut rng = rng_for(10, "expand");
        let f_t = randn(&[5, 8], &mut rng);
        let q = randn(&[4, 8], &mut rng);
        let z = task_slices(&f_t, &q).unwrap();
        // Zero tokens: every slice equals F_t.
        let z0 = task_slices(&f_t, &Tensor::zeros(&[4, 8])).unwrap();
        for s in &z0 {
            assert_eq!(s, &f_t);
        }
        // Task offsets are frame-independent.
        for l in 0..5 {
            for e in 0..8 {
                let diff = z[1].at(l, e) - z[2].at(l, e);
                assert!((diff - (q.at(1, e) - q.at(2, e))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alpha_zero_triplet_branch_is_fusion_attention_only() {
        let mut cfg = tiny_config();
        cfg.alpha = 0.0;
        let model = Model::new(&cfg, 11).unwrap();
        let mut rng = rng_for(12, "alpha0");
        let x = randn(&[5, 6], &mut rng);
        let (logits, cache) = model.forward(&x, None).unwrap();
        let direct = model.head_ivt.forward(&cache.fused).unwrap();
        assert_eq!(logits.triplet, direct);
        // And the triplet head ignores the task tokens entirely.
        let mut altered = model.clone();
        altered.adapter.as_mut().unwrap().prompts.value =
            randn(&[4, 8], &mut rng_for(13, "alpha0-alt"));
        let (logits2, _) = altered.forward(&x, None).unwrap();
        assert_eq!(logits.triplet, logits2.triplet);
        assert_ne!(logits.instrument, logits2.instrument);
    }

    #[test]
    fn alpha_one_zero_fusion_weights_gives_plain_slice_sum() {
        let mut cfg = tiny_config();
        cfg.alpha = 1.0;
        cfg.include_residual = false;
        let mut model = Model::new(&cfg, 14).unwrap();
        model
            .fusion_attn
            .visit_mut("", &mut |_, p: &mut Parameter| {
                p.value = Tensor::zeros(p.value.shape())
            });
        let mut rng = rng_for(15, "alpha1");
        let x = randn(&[5, 6], &mut rng);
        let (_, cache) = model.forward(&x, None).unwrap();
        let slices = task_slices(
            &cache.adapter.as_ref().unwrap().f_t,
            &cache.adapter.as_ref().unwrap().q_tilde,
        )
        .unwrap();
        let mut want = slices[0].clone();
        for s in &slices[1..] {
            want.add_assign(s).unwrap();
        }
        for (a, b) in cache.z_final.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_zero_weights_yields_half_probability() {
        let mut cfg = tiny_config();
        cfg.use_tsp = false;
        let mut model = Model::new(&cfg, 16).unwrap();
        model.head_ivt.w.value = Tensor::zeros(&[8, 7]);
        model.head_ivt.b.value = Tensor::zeros(&[7]);
        let mut rng = rng_for(17, "cls0");
        let x = randn(&[3, 6], &mut rng);
        let (logits, _) = model.forward(&x, None).unwrap();
        assert!(logits.triplet.data().iter().all(|&v| v == 0.0));
        let probs = crate::tensor::sigmoid(&logits.triplet);
        assert!(probs.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn disabling_tsp_keeps_backbone_and_fusion_bit_identical() {
        let mut with = tiny_config();
        let mut without = tiny_config();
        without.use_tsp = false;
        with.prefix = None;
        without.prefix = None;
        let a = Model::new(&with, 18).unwrap();
        let b = Model::new(&without, 18).unwrap();
        let mut rng = rng_for(19, "toggle");
        let x = randn(&[5, 6], &mut rng);
        let (_, ca) = a.forward(&x, None).unwrap();
        let (_, cb) = b.forward(&x, None).unwrap();
        assert_eq!(ca.xhat, cb.xhat);
        assert_eq!(ca.fused, cb.fused);
    }

    #[test]
    fn missing_prefix_settings_reject_prefix_rows() {
        let cfg = tiny_config();
        let model = Model::new(&cfg, 20).unwrap();
        let mut rng = rng_for(21, "noprefix");
        let x = randn(&[5, 6], &mut rng);
        let rows = PrefixRows::Shared(randn(&[2, 6], &mut rng));
        assert!(model.forward(&x, Some(&rows)).is_err());
    }

    #[test]
    fn prefix_location_out_of_range_is_rejected() {
        let mut cfg = tiny_config();
        cfg.prefix = Some(PrefixSettings {
            k: 1,
            location: 5,
            mode: PrefixMode::Video,
            pool_dim: 6,
        });
        assert!(Model::new(&cfg, 22).is_err());
    }

    fn fixed_weight_loss(model: &Model, x: &Tensor, prefix: Option<&PrefixRows>, w: &TaskLogits) -> f64 {
        let (logits, _) = model.forward(x, prefix).unwrap();
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        dot(&logits.instrument, &w.instrument)
            + dot(&logits.verb, &w.verb)
            + dot(&logits.target, &w.target)
            + dot(&logits.triplet, &w.triplet)
    }

    fn check_model_grads(cfg: ModelConfig, prefix: Option<PrefixRows>, seed: u64) {
        cfg.validate().unwrap();
        let mut model = Model::new(&cfg, seed).unwrap();
        let mut rng = rng_for(seed, "model-grad");
        let x = randn(&[cfg.seq_len, cfg.feature_dim], &mut rng);
        let weights = TaskLogits {
            instrument: randn(&[cfg.seq_len, cfg.n_instruments], &mut rng),
            verb: randn(&[cfg.seq_len, cfg.n_verbs], &mut rng),
            target: randn(&[cfg.seq_len, cfg.n_targets], &mut rng),
            triplet: randn(&[cfg.seq_len, cfg.n_triplets], &mut rng),
        };
        model.zero_grads();
        let (_, cache) = model.forward(&x, prefix.as_ref()).unwrap();
        model.backward(&cache, &weights).unwrap();
        let names = model.param_names();
        for name in names {
            let mut analytic = None;
            model.visit_params(&mut |n, p| {
                if n == name {
                    analytic = Some(p.grad.clone());
                }
            });
            let analytic = analytic.unwrap();
            let mut theta = None;
            model.visit_params(&mut |n, p| {
                if n == name {
                    theta = Some(p.value.clone());
                }
            });
            let theta = theta.unwrap();
            // Probe only a few coordinates per tensor to keep this quick;
            // the acceptance suite sweeps everything.
            let probe_coords: Vec<usize> = (0..theta.len().min(3)).collect();
            for &coord in &probe_coords {
                let mut probe_model = model.clone();
                let numeric = finite_diff_grad(
                    &mut |t| {
                        probe_model.visit_params_mut(&mut |n, p| {
                            if n == name {
                                p.value = t.clone();
                            }
                        });
                        fixed_weight_loss(&probe_model, &x, prefix.as_ref(), &weights)
                    },
                    &theta,
                    1e-5,
                )
                .unwrap();
                let a = analytic.data()[coord];
                let n = numeric.data()[coord];
                assert!(close(a, n, 1e-4, 1e-7), "{name}[{coord}]: {a} vs {n}");
            }
        }
    }

    #[test]
    fn model_grads_match_finite_diff_with_adapter() {
        check_model_grads(tiny_config(), None, 30);
    }

    #[test]
    fn model_grads_match_finite_diff_with_pyramid_and_prefix() {
        let mut cfg = tiny_config();
        cfg.pyramid_layers = 1;
        cfg.use_tsp = false;
        cfg.prefix = Some(PrefixSettings {
            k: 1,
            location: 1,
            mode: PrefixMode::Video,
            pool_dim: 5,
        });
        let rows = PrefixRows::Shared(randn(&[3, 5], &mut rng_for(31, "rows")));
        check_model_grads(cfg, Some(rows), 32);
    }

    #[test]
    fn model_grads_match_finite_diff_per_frame_prefix() {
        let mut cfg = tiny_config();
        cfg.prefix = Some(PrefixSettings {
            k: 1,
            location: 0,
            mode: PrefixMode::PerFrame,
            pool_dim: 5,
        });
        let mut rng = rng_for(33, "rows-pf");
        let rows = PrefixRows::PerFrame((0..cfg.seq_len).map(|_| randn(&[2, 5], &mut rng)).collect());
        check_model_grads(cfg, Some(rows), 34);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let model = Model::new(&cfg, 40).unwrap();
        let mut rng = rng_for(41, "det");
        let x = randn(&[5, 6], &mut rng);
        let (a, _) = model.forward(&x, None).unwrap();
        let (b, _) = model.forward(&x, None).unwrap();
        assert_eq!(a.triplet, b.triplet);
        assert_eq!(a.instrument, b.instrument);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut cfg = tiny_config();
        cfg.prefix = Some(PrefixSettings {
            k: 1,
            location: 0,
            mode: PrefixMode::Video,
            pool_dim: 6,
        });
        let model = Model::new(&cfg, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, None, &path).unwrap();
        let (back, pools) = load_checkpoint(&path).unwrap();
        assert!(pools.is_none());
        let mut originals = Vec::new();
        model.visit_params(&mut |name, p| originals.push((name.to_string(), p.value.clone())));
        back.visit_params(&mut |name, p| {
            let (want_name, want) = originals.remove(0);
            assert_eq!(name, want_name);
            assert_eq!(p.value.shape(), want.shape());
            for (a, b) in p.value.data().iter().zip(want.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        });
        assert!(originals.is_empty());
    }
}
