//! Two-stream co-attention transformer with MLM, region and ITM heads.
//!
//! Text and region sequences run through separate post-LN encoder stacks.
//! At each co-attention placement `(t, v)` (after text layer `t` and visual
//! layer `v`) the streams exchange keys and values: text queries attend over
//! regions and region queries attend over text. One weight-tied MLM head
//! serves MLM and the three scene-graph tasks; they differ only in which
//! positions carry labels.

mod checkpoint;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{location_feature, ImageRecord};
use crate::error::{Error, Result};
use crate::masking::{Batch, Task};
use crate::numerics::{trunc_normal, AttentionMask, Element, ParamId, ParamStore, Tape, Tensor, Var};
use crate::seed;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

const INIT_STD: f64 = 0.02;
/// Location of the whole-image slot.
pub const FULL_IMAGE_LOCATION: [f64; 5] = [0.0, 0.0, 1.0, 1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub text: StreamConfig,
    pub visual: StreamConfig,
    /// `(text_layer, visual_layer)` after which a co-attention block runs.
    pub co_attention: Vec<(usize, usize)>,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub region_classes: usize,
    /// Token positions including [CLS] and [SEP].
    pub max_text_len: usize,
    pub max_regions: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text: StreamConfig {
                layers: 4,
                hidden: 128,
                heads: 4,
                ffn: 256,
            },
            visual: StreamConfig {
                layers: 2,
                hidden: 128,
                heads: 4,
                ffn: 256,
            },
            co_attention: vec![(1, 0), (3, 1)],
            vocab_size: 1000,
            feature_dim: 64,
            region_classes: 32,
            max_text_len: 40,
            max_regions: 36,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("text", &self.text), ("visual", &self.visual)] {
            if s.layers == 0 || s.hidden == 0 || s.heads == 0 || s.ffn == 0 {
                return Err(Error::Config(format!("{name} stream sizes must be positive")));
            }
            if s.hidden % s.heads != 0 {
                return Err(Error::Config(format!(
                    "{name} hidden size {} is not divisible by {} heads",
                    s.hidden, s.heads
                )));
            }
        }
        if self.text.hidden != self.visual.hidden {
            return Err(Error::Config(format!(
                "matching head needs equal hidden sizes, got text {} and visual {}",
                self.text.hidden, self.visual.hidden
            )));
        }
        if self.co_attention.is_empty() {
            return Err(Error::Config("at least one co-attention block is required".into()));
        }
        let mut prev: Option<(usize, usize)> = None;
        for &(t, v) in &self.co_attention {
            if t >= self.text.layers || v >= self.visual.layers {
                return Err(Error::Config(format!(
                    "co-attention placement ({t}, {v}) is outside the {}x{} layer grid",
                    self.text.layers, self.visual.layers
                )));
            }
            if let Some((pt, pv)) = prev {
                if t <= pt || v <= pv {
                    return Err(Error::Config(
                        "co-attention placements must increase in both streams".into(),
                    ));
                }
            }
            prev = Some((t, v));
        }
        if self.vocab_size <= crate::textproc::Vocab::FIRST_PLAIN_ID as usize {
            return Err(Error::Config("vocab_size leaves no plain tokens".into()));
        }
        if self.feature_dim == 0 || self.region_classes == 0 {
            return Err(Error::Config("feature_dim and region_classes must be positive".into()));
        }
        if self.max_text_len < 2 || self.max_regions == 0 {
            return Err(Error::Config("max_text_len must be >= 2 and max_regions >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} is outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Names of fields that differ from `other`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, same: bool| {
            if !same {
                out.push(name.to_string());
            }
        };
        check("text", self.text == other.text);
        check("visual", self.visual == other.visual);
        check("co_attention", self.co_attention == other.co_attention);
        check("vocab_size", self.vocab_size == other.vocab_size);
        check("feature_dim", self.feature_dim == other.feature_dim);
        check("region_classes", self.region_classes == other.region_classes);
        check("max_text_len", self.max_text_len == other.max_text_len);
        check("max_regions", self.max_regions == other.max_regions);
        check("dropout", self.dropout == other.dropout);
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

/// Attention sublayer followed by a feed-forward sublayer, each post-LN.
#[derive(Debug, Clone, Copy)]
struct Block {
    attn: Attention,
    ln1: Norm,
    ff1: Linear,
    ff2: Linear,
    ln2: Norm,
}

#[derive(Debug, Clone)]
struct Layout {
    word_emb: ParamId,
    pos_emb: ParamId,
    seg_emb: ParamId,
    text_ln: Norm,
    feat_proj: Linear,
    loc_proj: Linear,
    vis_ln: Norm,
    text_layers: Vec<Block>,
    vis_layers: Vec<Block>,
    /// (text side, visual side) per placement.
    co_layers: Vec<(Block, Block)>,
    mlm_dense: Linear,
    mlm_ln: Norm,
    mlm_bias: ParamId,
    region_head: Linear,
    itm_head: Linear,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: seed::Rng,
}

impl<T: Element> Builder<'_, T> {
    fn normal(&mut self, name: String, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(trunc_normal(&mut self.rng, INIT_STD))).collect();
        self.store.add(name, Tensor::new(shape, data).expect("shape"))
    }

    fn filled(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::of(v)))
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.normal(format!("{name}.w"), &[d_in, d_out]),
            b: self.filled(format!("{name}.b"), &[d_out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.filled(format!("{name}.g"), &[d], 1.0),
            b: self.filled(format!("{name}.b"), &[d], 0.0),
        }
    }

    /// Queries come from a stream of width `hq`, keys/values from width `hkv`.
    fn block(&mut self, name: &str, hq: usize, hkv: usize, heads: usize, ffn: usize) -> Block {
        Block {
            attn: Attention {
                q: self.linear(&format!("{name}.attn.q"), hq, hq),
                k: self.linear(&format!("{name}.attn.k"), hkv, hq),
                v: self.linear(&format!("{name}.attn.v"), hkv, hq),
                o: self.linear(&format!("{name}.attn.o"), hq, hq),
                heads,
            },
            ln1: self.norm(&format!("{name}.ln1"), hq),
            ff1: self.linear(&format!("{name}.ffn.1"), hq, ffn),
            ff2: self.linear(&format!("{name}.ffn.2"), ffn, hq),
            ln2: self.norm(&format!("{name}.ln2"), hq),
        }
    }
}

fn build_layout<T: Element>(config: &ModelConfig, store: &mut ParamStore<T>, init_seed: u64) -> Layout {
    let (t, v) = (config.text, config.visual);
    let mut b = Builder {
        store,
        rng: seed::derived_rng(init_seed, &[seed::tag::INIT]),
    };
    Layout {
        word_emb: b.normal("text.word_emb".into(), &[config.vocab_size, t.hidden]),
        pos_emb: b.normal("text.pos_emb".into(), &[config.max_text_len, t.hidden]),
        seg_emb: b.normal("text.seg_emb".into(), &[2, t.hidden]),
        text_ln: b.norm("text.emb_ln", t.hidden),
        feat_proj: b.linear("visual.feat_proj", config.feature_dim, v.hidden),
        loc_proj: b.linear("visual.loc_proj", 5, v.hidden),
        vis_ln: b.norm("visual.emb_ln", v.hidden),
        text_layers: (0..t.layers)
            .map(|i| b.block(&format!("text.layer{i}"), t.hidden, t.hidden, t.heads, t.ffn))
            .collect(),
        vis_layers: (0..v.layers)
            .map(|i| b.block(&format!("visual.layer{i}"), v.hidden, v.hidden, v.heads, v.ffn))
            .collect(),
        co_layers: (0..config.co_attention.len())
            .map(|i| {
                (
                    b.block(&format!("co{i}.text"), t.hidden, v.hidden, t.heads, t.ffn),
                    b.block(&format!("co{i}.visual"), v.hidden, t.hidden, v.heads, v.ffn),
                )
            })
            .collect(),
        mlm_dense: b.linear("head.mlm.dense", t.hidden, t.hidden),
        mlm_ln: b.norm("head.mlm.ln", t.hidden),
        mlm_bias: b.filled("head.mlm.bias".into(), &[config.vocab_size], 0.0),
        region_head: b.linear("head.region", v.hidden, config.region_classes),
        itm_head: b.linear("head.itm", t.hidden, 1),
    }
}

/// Per-task losses and their unweighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_obj: f64,
    pub l_attr: f64,
    pub l_rel: f64,
    pub l_mlm: f64,
    pub l_region: f64,
    pub l_itm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_obj, self.l_attr, self.l_rel, self.l_mlm, self.l_region, self.l_itm, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// Recorded forward pass of one batch.
pub struct Forward<T> {
    pub tape: Tape<T>,
    /// `[B * max_t, H_text]`
    pub text: Var,
    /// `[B * (max_i + 1), H_vis]`, slot 0 of each image is [IMG].
    pub visual: Var,
    /// `[B, H_text]`
    pub h_cls: Var,
    /// `[B, H_vis]`
    pub h_img: Var,
    /// `[B]` matching logits s(w, v).
    pub itm: Var,
    /// Attention probabilities of every attention sublayer.
    pub attention: Vec<Var>,
    pub batch_size: usize,
    pub text_len: usize,
    pub visual_len: usize,
    params: Vec<Option<Var>>,
}

impl<T> Forward<T> {
    fn cached(&self, id: ParamId) -> Option<Var> {
        self.params[id.index()]
    }
}

impl<T: Element> Model<T> {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params, init_seed);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model around existing parameters, checking every shape.
    pub fn from_params(config: ModelConfig, loaded: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut problems = Vec::new();
        for p in model.params.iter_mut() {
            match loaded.id(&p.name).map(|id| loaded.value(id)) {
                Some(v) if v.shape() == p.value.shape() => p.value = v.clone(),
                Some(v) => problems.push(format!(
                    "{}: expected {:?}, found {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )),
                None => problems.push(format!("{}: missing", p.name)),
            }
        }
        if loaded.len() != model.params.len() {
            for p in loaded.iter() {
                if model.params.id(&p.name).is_none() {
                    problems.push(format!("{}: unexpected", p.name));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        let mut out = Model::<U>::new(self.config.clone(), 0).expect("validated config");
        for (dst, src) in out.params.iter_mut().zip(self.params.iter()) {
            dst.value = src.value.cast();
        }
        out
    }

    fn param(&self, fwd: &mut Forward<T>, id: ParamId) -> Var {
        if let Some(v) = fwd.cached(id) {
            return v;
        }
        let v = fwd.tape.param(&self.params, id);
        fwd.params[id.index()] = Some(v);
        v
    }

    fn linear(&self, fwd: &mut Forward<T>, x: Var, l: Linear) -> Result<Var> {
        let w = self.param(fwd, l.w);
        let b = self.param(fwd, l.b);
        let y = fwd.tape.matmul(x, w)?;
        fwd.tape.add(y, b)
    }

    fn norm(&self, fwd: &mut Forward<T>, x: Var, n: Norm) -> Result<Var> {
        let g = self.param(fwd, n.g);
        let b = self.param(fwd, n.b);
        fwd.tape.layer_norm(x, g, b)
    }

    /// Multi-head attention of `xq` ([B*tq, Hq]) over `xkv` ([B*tk, Hkv]).
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        fwd: &mut Forward<T>,
        a: &Attention,
        xq: Var,
        xkv: Var,
        (b, tq, tk): (usize, usize, usize),
        keys: &Arc<Vec<bool>>,
    ) -> Result<Var> {
        let h = fwd.tape.shape(xq)[1];
        let heads = a.heads;
        let dh = h / heads;
        let q = self.linear(fwd, xq, a.q)?;
        let k = self.linear(fwd, xkv, a.k)?;
        let v = self.linear(fwd, xkv, a.v)?;
        let split = |fwd: &mut Forward<T>, x: Var, t: usize| -> Result<Var> {
            let x = fwd.tape.reshape(x, &[b, t, heads, dh])?;
            fwd.tape.swap_axes12(x)
        };
        let q = split(fwd, q, tq)?;
        let k = split(fwd, k, tk)?;
        let v = split(fwd, v, tk)?;
        let scores = fwd.tape.bmm(q, k, true)?;
        let scores = fwd.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let mask = AttentionMask {
            valid: Arc::clone(keys),
            keys: tk,
            rows_per_batch: heads * tq,
        };
        let probs = fwd.tape.softmax(scores, Some(&mask))?;
        fwd.attention.push(probs);
        let ctx = fwd.tape.bmm(probs, v, false)?;
        let ctx = fwd.tape.swap_axes12(ctx)?;
        let ctx = fwd.tape.reshape(ctx, &[b * tq, h])?;
        self.linear(fwd, ctx, a.o)
    }

    #[allow(clippy::too_many_arguments)]
    fn block<R: rand::Rng>(
        &self,
        fwd: &mut Forward<T>,
        blk: &Block,
        xq: Var,
        xkv: Var,
        dims: (usize, usize, usize),
        keys: &Arc<Vec<bool>>,
        rng: &mut Option<&mut R>,
    ) -> Result<Var> {
        let rate = if rng.is_some() { self.config.dropout } else { 0.0 };
        let attn = self.attention(fwd, &blk.attn, xq, xkv, dims, keys)?;
        let attn = dropout(fwd, attn, rate, rng);
        let x = fwd.tape.add(xq, attn)?;
        let x = self.norm(fwd, x, blk.ln1)?;
        let f = self.linear(fwd, x, blk.ff1)?;
        let f = fwd.tape.gelu(f);
        let f = self.linear(fwd, f, blk.ff2)?;
        let f = dropout(fwd, f, rate, rng);
        let y = fwd.tape.add(x, f)?;
        self.norm(fwd, y, blk.ln2)
    }

    /// Word + segment + position embeddings for one sequence, before
    /// normalization. Segment id is 0 throughout.
    pub fn embed_text(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let mut fwd = self.empty_forward();
        let v = self.embed_text_raw(&mut fwd, ids, 1, ids.len())?;
        Ok(fwd.tape.value(v).clone())
    }

    fn embed_text_raw(&self, fwd: &mut Forward<T>, ids: &[u32], b: usize, t: usize) -> Result<Var> {
        if t > self.config.max_text_len {
            return Err(Error::Validation(format!(
                "sequence of {t} tokens exceeds max_text_len {}",
                self.config.max_text_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::UnknownTokenId(bad));
        }
        let word = self.param(fwd, self.layout.word_emb);
        let pos = self.param(fwd, self.layout.pos_emb);
        let seg = self.param(fwd, self.layout.seg_emb);
        let w = fwd.tape.embedding(word, ids)?;
        let positions: Vec<u32> = (0..b).flat_map(|_| 0..t as u32).collect();
        let p = fwd.tape.embedding(pos, &positions)?;
        let s = fwd.tape.embedding(seg, &vec![0; b * t])?;
        let x = fwd.tape.add(w, p)?;
        fwd.tape.add(x, s)
    }

    /// Projected region features plus projected locations for one image,
    /// with the [IMG] slot first. Before normalization.
    pub fn embed_regions(&self, img: &ImageRecord) -> Result<Tensor<T>> {
        let n = img.regions.len();
        if n > self.config.max_regions {
            return Err(Error::Validation(format!(
                "image {} has {n} regions, model allows {}",
                img.image_id, self.config.max_regions
            )));
        }
        let d = self.config.feature_dim;
        if img.regions.iter().any(|r| r.feature.len() != d) {
            return Err(Error::Shape {
                op: "embed_regions",
                lhs: vec![img.feature_dim()],
                rhs: vec![d],
            });
        }
        let features: Vec<f32> = img.regions.iter().flat_map(|r| r.feature.iter().copied()).collect();
        let locations: Vec<f32> = img
            .regions
            .iter()
            .flat_map(|r| location_feature(&r.bbox).map(|x| x as f32))
            .collect();
        let mut fwd = self.empty_forward();
        let v = self.embed_regions_raw(&mut fwd, &features, &locations, &vec![true; n], 1, n)?;
        Ok(fwd.tape.value(v).clone())
    }

    /// `features` is `[b, i, D_v]`, `locations` `[b, i, 5]`; output rows are
    /// `[b * (i + 1)]` with the [IMG] slot at each image's row 0.
    fn embed_regions_raw(
        &self,
        fwd: &mut Forward<T>,
        features: &[f32],
        locations: &[f32],
        real: &[bool],
        b: usize,
        i: usize,
    ) -> Result<Var> {
        let d = self.config.feature_dim;
        if features.len() != b * i * d {
            return Err(Error::Shape {
                op: "embed_regions",
                lhs: vec![b, i, features.len() / (b * i).max(1)],
                rhs: vec![d],
            });
        }
        let slots = i + 1;
        let mut feat = vec![T::zero(); b * slots * d];
        let mut loc = vec![T::zero(); b * slots * 5];
        for k in 0..b {
            let base = k * slots;
            let count = real[k * i..(k + 1) * i].iter().filter(|&&m| m).count();
            let mut mean = vec![0.0f64; d];
            for r in 0..i {
                let src = &features[(k * i + r) * d..(k * i + r + 1) * d];
                for (dst, &x) in feat[(base + 1 + r) * d..(base + 2 + r) * d].iter_mut().zip(src) {
                    *dst = T::of(x as f64);
                }
                if real[k * i + r] {
                    for (m, &x) in mean.iter_mut().zip(src) {
                        *m += x as f64;
                    }
                }
                for c in 0..5 {
                    loc[(base + 1 + r) * 5 + c] = T::of(locations[(k * i + r) * 5 + c] as f64);
                }
            }
            let inv = 1.0 / count.max(1) as f64;
            for (dst, m) in feat[base * d..(base + 1) * d].iter_mut().zip(mean) {
                *dst = T::of(m * inv);
            }
            for (c, &x) in FULL_IMAGE_LOCATION.iter().enumerate() {
                loc[base * 5 + c] = T::of(x);
            }
        }
        let feat = fwd.tape.constant(Tensor::new(&[b * slots, d], feat)?);
        let loc = fwd.tape.constant(Tensor::new(&[b * slots, 5], loc)?);
        let f = self.linear(fwd, feat, self.layout.feat_proj)?;
        let l = self.linear(fwd, loc, self.layout.loc_proj)?;
        fwd.tape.add(f, l)
    }

    fn empty_forward(&self) -> Forward<T> {
        let mut tape = Tape::new();
        let dummy = tape.constant(Tensor::zeros(&[0]));
        Forward {
            tape,
            text: dummy,
            visual: dummy,
            h_cls: dummy,
            h_img: dummy,
            itm: dummy,
            attention: Vec::new(),
            batch_size: 0,
            text_len: 0,
            visual_len: 0,
            params: vec![None; self.params.len()],
        }
    }

    /// Runs both streams. Passing an rng enables dropout (training mode);
    /// `None` is deterministic evaluation.
    pub fn forward<R: rand::Rng>(&self, batch: &Batch, mut rng: Option<&mut R>) -> Result<Forward<T>> {
        let (b, t, i) = (batch.size, batch.max_t, batch.max_i);
        if b == 0 {
            return Err(Error::Validation("empty batch".into()));
        }
        if i > self.config.max_regions {
            return Err(Error::Validation(format!(
                "batch has {i} region slots, model allows {}",
                self.config.max_regions
            )));
        }
        let rate = if rng.is_some() { self.config.dropout } else { 0.0 };
        let mut fwd = self.empty_forward();
        fwd.batch_size = b;
        fwd.text_len = t;
        fwd.visual_len = i + 1;

        let text_keys = Arc::new(batch.token_mask.clone());
        let mut vis_valid = Vec::with_capacity(b * (i + 1));
        for k in 0..b {
            vis_valid.push(true);
            vis_valid.extend_from_slice(&batch.region_mask[k * i..(k + 1) * i]);
        }
        let vis_keys = Arc::new(vis_valid);

        let x = self.embed_text_raw(&mut fwd, &batch.token_ids, b, t)?;
        let x = self.norm(&mut fwd, x, self.layout.text_ln)?;
        let mut text = dropout(&mut fwd, x, rate, &mut rng);
        let v = self.embed_regions_raw(
            &mut fwd,
            &batch.region_features,
            &batch.region_locations,
            &batch.region_mask,
            b,
            i,
        )?;
        let v = self.norm(&mut fwd, v, self.layout.vis_ln)?;
        let mut vis = dropout(&mut fwd, v, rate, &mut rng);

        let (tdims, vdims) = ((b, t, t), (b, i + 1, i + 1));
        let mut next_t = 0;
        let mut next_v = 0;
        for (c, &(pt, pv)) in self.config.co_attention.iter().enumerate() {
            while next_t <= pt {
                let blk = self.layout.text_layers[next_t];
                text = self.block(&mut fwd, &blk, text, text, tdims, &text_keys, &mut rng)?;
                next_t += 1;
            }
            while next_v <= pv {
                let blk = self.layout.vis_layers[next_v];
                vis = self.block(&mut fwd, &blk, vis, vis, vdims, &vis_keys, &mut rng)?;
                next_v += 1;
            }
            let (ct, cv) = self.layout.co_layers[c];
            let new_text = self.block(&mut fwd, &ct, text, vis, (b, t, i + 1), &vis_keys, &mut rng)?;
            let new_vis = self.block(&mut fwd, &cv, vis, text, (b, i + 1, t), &text_keys, &mut rng)?;
            text = new_text;
            vis = new_vis;
        }
        while next_t < self.config.text.layers {
            let blk = self.layout.text_layers[next_t];
            text = self.block(&mut fwd, &blk, text, text, tdims, &text_keys, &mut rng)?;
            next_t += 1;
        }
        while next_v < self.config.visual.layers {
            let blk = self.layout.vis_layers[next_v];
            vis = self.block(&mut fwd, &blk, vis, vis, vdims, &vis_keys, &mut rng)?;
            next_v += 1;
        }

        let cls_rows: Vec<usize> = (0..b).map(|k| k * t).collect();
        let img_rows: Vec<usize> = (0..b).map(|k| k * (i + 1)).collect();
        let h_cls = fwd.tape.gather_rows(text, &cls_rows)?;
        let h_img = fwd.tape.gather_rows(vis, &img_rows)?;
        let fused = fwd.tape.mul(h_cls, h_img)?;
        let itm = self.linear(&mut fwd, fused, self.layout.itm_head)?;
        let itm = fwd.tape.reshape(itm, &[b])?;
        fwd.text = text;
        fwd.visual = vis;
        fwd.h_cls = h_cls;
        fwd.h_img = h_img;
        fwd.itm = itm;
        Ok(fwd)
    }

    /// MLM logits `[rows.len(), V]` at the given flat text positions.
    pub fn mlm_logits(&self, fwd: &mut Forward<T>, rows: &[usize]) -> Result<Var> {
        let h = fwd.tape.gather_rows(fwd.text, rows)?;
        let h = self.linear(fwd, h, self.layout.mlm_dense)?;
        let h = fwd.tape.gelu(h);
        let h = self.norm(fwd, h, self.layout.mlm_ln)?;
        let word = self.param(fwd, self.layout.word_emb);
        let logits = fwd.tape.matmul_t(h, word)?;
        let bias = self.param(fwd, self.layout.mlm_bias);
        fwd.tape.add(logits, bias)
    }

    /// MLM logits at every text position, `[B * max_t, V]`.
    pub fn mlm_logits_all(&self, fwd: &mut Forward<T>) -> Result<Var> {
        let rows: Vec<usize> = (0..fwd.batch_size * fwd.text_len).collect();
        self.mlm_logits(fwd, &rows)
    }

    /// Region-class logits `[rows.len(), C]` at flat visual slots.
    pub fn region_logits(&self, fwd: &mut Forward<T>, rows: &[usize]) -> Result<Var> {
        let h = fwd.tape.gather_rows(fwd.visual, rows)?;
        self.linear(fwd, h, self.layout.region_head)
    }

    /// Region-class logits at every visual slot, `[B * (max_i + 1), C]`.
    pub fn region_logits_all(&self, fwd: &mut Forward<T>) -> Result<Var> {
        let rows: Vec<usize> = (0..fwd.batch_size * fwd.visual_len).collect();
        self.region_logits(fwd, &rows)
    }

    /// Records every loss term on the tape and returns the scalar total.
    pub fn loss(&self, fwd: &mut Forward<T>, batch: &Batch) -> Result<(Var, LossBreakdown)> {
        let rows: Vec<usize> = (0..batch.token_labels.len())
            .filter(|&p| batch.token_labels[p].is_some())
            .collect();
        let mut terms = [None; 4];
        if !rows.is_empty() {
            let logits = self.mlm_logits(fwd, &rows)?;
            for task in Task::ALL {
                let labels: Vec<Option<u32>> = rows
                    .iter()
                    .map(|&p| (batch.token_tasks[p] == Some(task)).then(|| batch.token_labels[p]).flatten())
                    .collect();
                if labels.iter().any(Option::is_some) {
                    terms[task.index()] = Some(fwd.tape.cross_entropy(logits, &labels)?);
                }
            }
        }
        let i = batch.max_i;
        let mut region_rows = Vec::new();
        let mut region_labels = Vec::new();
        for k in 0..batch.size {
            for r in 0..i {
                if let Some(c) = batch.region_labels[k * i + r] {
                    region_rows.push(k * (i + 1) + 1 + r);
                    region_labels.push(Some(c));
                }
            }
        }
        let region = if region_rows.is_empty() {
            None
        } else {
            let logits = self.region_logits(fwd, &region_rows)?;
            Some(fwd.tape.cross_entropy(logits, &region_labels)?)
        };
        let targets: Vec<T> = batch.itm_labels.iter().map(|&p| if p { T::one() } else { T::zero() }).collect();
        let itm = fwd.tape.bce_with_logits(fwd.itm, &targets)?;

        let value = |fwd: &Forward<T>, v: Option<Var>| v.map_or(0.0, |v| fwd.tape.value(v).item().as_f64());
        let mut parts: Vec<Var> = terms.iter().flatten().copied().collect();
        parts.extend(region);
        parts.push(itm);
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = fwd.tape.add(total, p)?;
        }
        let mut breakdown = LossBreakdown {
            l_mlm: value(fwd, terms[Task::Mlm.index()]),
            l_obj: value(fwd, terms[Task::Object.index()]),
            l_attr: value(fwd, terms[Task::Attribute.index()]),
            l_rel: value(fwd, terms[Task::Relationship.index()]),
            l_region: value(fwd, region),
            l_itm: value(fwd, Some(itm)),
            total: 0.0,
        };
        breakdown.total = breakdown.l_obj
            + breakdown.l_attr
            + breakdown.l_rel
            + breakdown.l_mlm
            + breakdown.l_region
            + breakdown.l_itm;
        Ok((total, breakdown))
    }

    /// Forward, loss and backward; gradients accumulate in the store.
    pub fn loss_and_grad<R: rand::Rng>(&mut self, batch: &Batch, rng: Option<&mut R>) -> Result<LossBreakdown> {
        let mut fwd = self.forward(batch, rng)?;
        let (total, breakdown) = self.loss(&mut fwd, batch)?;
        fwd.tape.backward(total, &mut self.params)?;
        Ok(breakdown)
    }

    /// Evaluation-mode loss without gradients.
    pub fn eval_loss(&self, batch: &Batch) -> Result<LossBreakdown> {
        let mut fwd = self.forward::<seed::Rng>(batch, None)?;
        Ok(self.loss(&mut fwd, batch)?.1)
    }
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub samples: usize,
    pub max_rel_error: f64,
    /// Parameter index and element of the worst sample.
    pub worst: (usize, usize),
}

/// Compares backward gradients of the evaluation loss with central
/// differences at `samples` random parameter elements. Relative error is
/// measured against `max(|analytic|, |numeric|, floor)`, where the floor
/// tracks the rounding noise of the difference quotient.
pub fn gradient_check(model: &mut Model<f64>, batch: &Batch, samples: usize, h: f64, rng_seed: u64) -> Result<GradCheck> {
    use rand::Rng;
    model.params_mut().clear_grads();
    let loss = model.loss_and_grad::<seed::Rng>(batch, None)?.total;
    // central-difference rounding noise is about eps * |loss| / h; below
    // this floor it would exceed 1e-5 of the gradient
    let floor = (1e5 * f64::EPSILON * loss.abs() / h).max(1e-6);
    let ids: Vec<ParamId> = model.params().ids().collect();
    let grads: Vec<Option<Tensor<f64>>> = model.params().iter().map(|p| p.grad.clone()).collect();
    model.params_mut().clear_grads();
    let mut rng = seed::rng(rng_seed);
    let mut out = GradCheck {
        samples,
        max_rel_error: 0.0,
        worst: (0, 0),
    };
    for _ in 0..samples {
        let pi = rng.random_range(0..ids.len());
        let id = ids[pi];
        let k = rng.random_range(0..model.params().value(id).len());
        let analytic = grads[pi].as_ref().map_or(0.0, |g| g.data()[k]);
        let orig = model.params().value(id).data()[k];
        model.params_mut().get_mut(id).value.data_mut()[k] = orig + h;
        let up = model.eval_loss(batch)?.total;
        model.params_mut().get_mut(id).value.data_mut()[k] = orig - h;
        let down = model.eval_loss(batch)?.total;
        model.params_mut().get_mut(id).value.data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(floor);
        if rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst = (pi, k);
        }
    }
    Ok(out)
}

fn dropout<T: Element, R: rand::Rng>(fwd: &mut Forward<T>, x: Var, rate: f64, rng: &mut Option<&mut R>) -> Var {
    match rng {
        Some(r) if rate > 0.0 => fwd.tape.dropout(x, rate, &mut **r),
        _ => x,
    }
}

#[cfg(test)]
mod tests;
