//! Image/caption records, JSONL ingestion and the synthetic corpus generator.
//!
//! In the synthetic world every caption is rendered from a small random
//! scene graph, and each object region's feature is the frozen embedding of
//! its category plus the mean embedding of its attributes. Relations are
//! encoded geometrically: the object's box is placed relative to the
//! subject's box according to a per-relation offset, so they are recoverable
//! from location features alone.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegraph::{parse, ParserLexicon, SceneGraph, WordClass};
use crate::seed;
use crate::util;

pub const MIN_REGIONS: usize = 10;
pub const MAX_REGIONS: usize = 36;

/// Seed of the frozen category embeddings; independent of any corpus seed.
const FROZEN_EMBEDDING_SEED: u64 = 0x5347_564C_454D_4200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub width: f64,
    pub height: f64,
}

impl RegionBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, width: f64, height: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2, width, height };
        b.validate()?;
        Ok(b)
    }

    pub fn full(width: f64, height: f64) -> Self {
        Self { x1: 0.0, y1: 0.0, x2: width, y2: height, width, height }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x1, self.y1, self.x2, self.y2, self.width, self.height]
            .iter()
            .all(|v| v.is_finite())
            && 0.0 <= self.x1
            && self.x1 < self.x2
            && self.x2 <= self.width
            && 0.0 <= self.y1
            && self.y1 < self.y2
            && self.y2 <= self.height;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "box ({}, {}, {}, {}) not inside {}x{} image",
                self.x1, self.y1, self.x2, self.y2, self.width, self.height
            )))
        }
    }
}

/// `(x1/W, y1/H, x2/W, y2/H, area fraction)`.
pub fn location_feature(b: &RegionBox) -> [f64; 5] {
    let (w, h) = (b.width, b.height);
    [
        b.x1 / w,
        b.y1 / h,
        b.x2 / w,
        b.y2 / h,
        (b.y2 - b.y1) * (b.x2 - b.x1) / (w * h),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub bbox: RegionBox,
    pub feature: Vec<f32>,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub regions: Vec<Region>,
}

impl ImageRecord {
    pub fn feature_dim(&self) -> usize {
        self.regions.first().map_or(0, |r| r.feature.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.regions.len();
        if !(MIN_REGIONS..=MAX_REGIONS).contains(&n) {
            return Err(Error::Validation(format!(
                "image {} has {n} regions; between {MIN_REGIONS} and {MAX_REGIONS} are required",
                self.image_id
            )));
        }
        let dim = self.feature_dim();
        for r in &self.regions {
            r.bbox.validate()?;
            if r.feature.len() != dim || dim == 0 {
                return Err(Error::Validation(format!(
                    "image {}: inconsistent region feature dimension",
                    self.image_id
                )));
            }
            if !r.feature.iter().all(|x| x.is_finite()) {
                return Err(Error::Validation(format!(
                    "image {}: non-finite region feature",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    /// Mean of region features, the input for the whole-image slot.
    pub fn mean_feature(&self) -> Vec<f32> {
        let dim = self.feature_dim();
        let mut mean = vec![0.0f64; dim];
        for r in &self.regions {
            for (m, &x) in mean.iter_mut().zip(&r.feature) {
                *m += x as f64;
            }
        }
        let n = self.regions.len().max(1) as f64;
        mean.into_iter().map(|m| (m / n) as f32).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: String,
    pub image_id: String,
    pub text: String,
}

#[derive(Serialize, Deserialize)]
struct RegionLine {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    class_id: u32,
    feature: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct ImageLine {
    image_id: String,
    width: f64,
    height: f64,
    regions: Vec<RegionLine>,
}

impl From<&ImageRecord> for ImageLine {
    fn from(img: &ImageRecord) -> Self {
        Self {
            image_id: img.image_id.clone(),
            width: img.width,
            height: img.height,
            regions: img
                .regions
                .iter()
                .map(|r| RegionLine {
                    x1: r.bbox.x1,
                    y1: r.bbox.y1,
                    x2: r.bbox.x2,
                    y2: r.bbox.y2,
                    class_id: r.class_id,
                    feature: r.feature.clone(),
                })
                .collect(),
        }
    }
}

impl ImageLine {
    fn into_record(self) -> Result<ImageRecord> {
        let (w, h) = (self.width, self.height);
        let regions = self
            .regions
            .into_iter()
            .map(|r| {
                Ok(Region {
                    bbox: RegionBox::new(r.x1, r.y1, r.x2, r.y2, w, h)?,
                    feature: r.feature,
                    class_id: r.class_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let img = ImageRecord {
            image_id: self.image_id,
            width: w,
            height: h,
            regions,
        };
        img.validate()?;
        Ok(img)
    }
}

/// Captions joined to their images.
#[derive(Debug, Clone, Default)]
pub struct PairedCorpus {
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
    /// `image_of[i]` indexes `images` for `captions[i]`.
    pub image_of: Vec<usize>,
}

impl PairedCorpus {
    pub fn join(images: Vec<ImageRecord>, captions: Vec<CaptionRecord>) -> Result<Self> {
        let by_id: HashMap<&str, usize> = images
            .iter()
            .enumerate()
            .map(|(i, img)| (img.image_id.as_str(), i))
            .collect();
        let mut missing = BTreeSet::new();
        let mut image_of = Vec::with_capacity(captions.len());
        for c in &captions {
            if c.text.trim().is_empty() {
                return Err(Error::Validation(format!("caption {} has empty text", c.caption_id)));
            }
            match by_id.get(c.image_id.as_str()) {
                Some(&i) => image_of.push(i),
                None => {
                    missing.insert(c.image_id.clone());
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Validation(format!(
                "captions reference missing images: {}",
                missing.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(Self {
            images,
            captions,
            image_of,
        })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&CaptionRecord, &ImageRecord)> {
        self.captions
            .iter()
            .zip(&self.image_of)
            .map(|(c, &i)| (c, &self.images[i]))
    }

    /// Keeps only the captions whose held-out membership equals `heldout`.
    pub fn split(&self, heldout: bool) -> Self {
        let keep: Vec<usize> = (0..self.captions.len())
            .filter(|&i| is_heldout(&self.captions[i].caption_id) == heldout)
            .collect();
        let mut remap = HashMap::new();
        let mut images = Vec::new();
        let mut captions = Vec::new();
        let mut image_of = Vec::new();
        for i in keep {
            let src = self.image_of[i];
            let dst = *remap.entry(src).or_insert_with(|| {
                images.push(self.images[src].clone());
                images.len() - 1
            });
            captions.push(self.captions[i].clone());
            image_of.push(dst);
        }
        Self {
            images,
            captions,
            image_of,
        }
    }
}

/// Deterministic 80/20 train/held-out assignment by caption id.
pub fn is_heldout(caption_id: &str) -> bool {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in caption_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed::derive(h, &[]) % 5 == 0
}

pub fn load_pairs(captions: &Path, images: &Path) -> Result<PairedCorpus> {
    let caps: Vec<CaptionRecord> = util::from_jsonl(captions)?;
    let lines: Vec<ImageLine> = util::from_jsonl(images)?;
    let imgs = lines
        .into_iter()
        .map(ImageLine::into_record)
        .collect::<Result<Vec<_>>>()?;
    PairedCorpus::join(imgs, caps)
}

pub fn captions_jsonl(captions: &[CaptionRecord]) -> Result<String> {
    util::to_jsonl(captions)
}

pub fn images_jsonl(images: &[ImageRecord]) -> Result<String> {
    let lines: Vec<ImageLine> = images.iter().map(ImageLine::from).collect();
    util::to_jsonl(&lines)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub object_categories: usize,
    pub attribute_categories: usize,
    pub relation_categories: usize,
    /// Categories used only for distractor regions; they never appear in captions.
    pub background_categories: usize,
    pub pairs: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            object_categories: 24,
            attribute_categories: 12,
            relation_categories: 8,
            background_categories: 8,
            pairs: 2000,
            feature_dim: 64,
            noise: 0.05,
            image_width: 640.0,
            image_height: 480.0,
        }
    }
}

impl GeneratorConfig {
    /// Number of region classes: object categories followed by background ones.
    pub fn region_classes(&self) -> usize {
        self.object_categories + self.background_categories
    }

    fn validate(&self, lexicon: &ParserLexicon) -> Result<()> {
        let checks = [
            (self.object_categories, WordClass::Noun, "object_categories"),
            (self.attribute_categories, WordClass::Adjective, "attribute_categories"),
            (self.relation_categories, WordClass::Preposition, "relation_categories"),
        ];
        for (n, class, field) in checks {
            let available = lexicon.entries(class).len();
            if n > available {
                return Err(Error::Config(format!(
                    "{field} = {n} exceeds the {available} {class} entries in the lexicon"
                )));
            }
        }
        if self.object_categories < 2 {
            return Err(Error::Config("object_categories must be at least 2".into()));
        }
        if self.background_categories == 0 {
            return Err(Error::Config("background_categories must be at least 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and non-negative".into()));
        }
        if !(self.image_width >= 64.0 && self.image_height >= 64.0) {
            return Err(Error::Config("image must be at least 64x64".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Object = 1,
    Attribute = 2,
    Background = 3,
}

/// The frozen random embedding of a category; identical across corpus seeds.
pub fn category_embedding(kind: EmbeddingKind, index: usize, dim: usize) -> Vec<f32> {
    let mut rng = seed::derived_rng(FROZEN_EMBEDDING_SEED, &[kind as u64, index as u64, dim as u64]);
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
        .collect()
}

/// Relative placement of the object box w.r.t. the subject box, in units of
/// the subject's width/height: (dx, dy, width scale, height scale).
fn relation_geometry(rel: usize) -> (f64, f64, f64, f64) {
    const TABLE: [(f64, f64, f64, f64); 8] = [
        (0.0, 1.0, 1.2, 1.0),   // on top of: object directly below
        (0.0, -1.1, 1.0, 1.0),  // under: object above
        (1.15, 0.0, 1.0, 1.0),  // next to: object to the right
        (0.1, -0.3, 1.5, 1.4),  // in front of: object larger, behind
        (0.1, 0.25, 0.6, 0.6),  // behind: object smaller, in front
        (1.4, 1.2, 0.9, 0.9),   // near: diagonal, some distance
        (-0.3, -0.3, 1.8, 1.8), // inside: object encloses subject
        (-1.15, 0.0, 1.0, 1.0), // beside: object to the left
    ];
    TABLE[rel % TABLE.len()]
}

#[derive(Debug, Clone, Default)]
pub struct SyntheticCorpus {
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
    pub graphs: Vec<SceneGraph>,
}

impl SyntheticCorpus {
    pub fn paired(&self) -> PairedCorpus {
        PairedCorpus {
            images: self.images.clone(),
            captions: self.captions.clone(),
            image_of: (0..self.captions.len()).collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        util::write_atomic(&dir.join("captions.jsonl"), captions_jsonl(&self.captions)?.as_bytes())?;
        util::write_atomic(&dir.join("images.jsonl"), images_jsonl(&self.images)?.as_bytes())
    }
}

struct Placed {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

fn clamp_box(p: &Placed, width: f64, height: f64) -> Placed {
    let w = p.w.clamp(8.0, width * 0.9);
    let h = p.h.clamp(8.0, height * 0.9);
    Placed {
        x: p.x.clamp(0.0, width - w),
        y: p.y.clamp(0.0, height - h),
        w,
        h,
    }
}

/// Deterministic in `(config, lexicon, seed)`.
pub fn generate_corpus(
    config: &GeneratorConfig,
    lexicon: &ParserLexicon,
    seed: u64,
) -> Result<SyntheticCorpus> {
    config.validate(lexicon)?;
    let nouns = lexicon.entries(WordClass::Noun);
    let adjs = lexicon.entries(WordClass::Adjective);
    let preps = lexicon.entries(WordClass::Preposition);
    let dim = config.feature_dim;
    let obj_emb: Vec<Vec<f32>> = (0..config.object_categories)
        .map(|i| category_embedding(EmbeddingKind::Object, i, dim))
        .collect();
    let attr_emb: Vec<Vec<f32>> = (0..config.attribute_categories)
        .map(|i| category_embedding(EmbeddingKind::Attribute, i, dim))
        .collect();
    let bg_emb: Vec<Vec<f32>> = (0..config.background_categories)
        .map(|i| category_embedding(EmbeddingKind::Background, i, dim))
        .collect();
    let (width, height) = (config.image_width, config.image_height);

    let mut corpus = SyntheticCorpus::default();
    for i in 0..config.pairs {
        let mut rng = seed::derived_rng(seed, &[seed::tag::GENERATOR, i as u64]);
        let n_obj = rng.random_range(2..=4usize).min(config.object_categories);
        let mut cats: Vec<usize> = (0..config.object_categories).collect();
        cats.shuffle(&mut rng);
        cats.truncate(n_obj);
        let attrs: Vec<Vec<usize>> = cats
            .iter()
            .map(|_| {
                let k = rng.random_range(0..=2usize).min(config.attribute_categories);
                let mut pool: Vec<usize> = (0..config.attribute_categories).collect();
                pool.shuffle(&mut rng);
                pool.truncate(k);
                pool.sort_unstable();
                pool
            })
            .collect();
        let rels: Vec<Option<usize>> = (1..n_obj)
            .map(|_| (config.relation_categories > 0).then(|| rng.random_range(0..config.relation_categories)))
            .collect();

        // caption
        let mut words: Vec<String> = Vec::new();
        for (k, &cat) in cats.iter().enumerate() {
            if k > 0 {
                match rels[k - 1] {
                    Some(r) => words.push(preps[r].lemma.clone()),
                    None => words.push("and".into()),
                }
            }
            words.push(if rng.random_bool(0.5) { "a" } else { "the" }.into());
            for &a in &attrs[k] {
                words.push(adjs[a].lemma.clone());
            }
            words.push(nouns[cat].lemma.clone());
        }
        let text = words.join(" ");

        // boxes: a chain, each object placed relative to the previous one
        let mut placed: Vec<Placed> = Vec::with_capacity(n_obj);
        let w0 = width * rng.random_range(0.15..0.3);
        let h0 = height * rng.random_range(0.15..0.3);
        placed.push(Placed {
            x: rng.random_range(0.0..width - w0),
            y: rng.random_range(0.0..height - h0),
            w: w0,
            h: h0,
        });
        for k in 1..n_obj {
            let prev = &placed[k - 1];
            let (dx, dy, sw, sh) = relation_geometry(rels[k - 1].unwrap_or(5));
            let jitter = |rng: &mut seed::Rng| rng.random_range(-0.08..0.08);
            let p = Placed {
                x: prev.x + (dx + jitter(&mut rng)) * prev.w,
                y: prev.y + (dy + jitter(&mut rng)) * prev.h,
                w: prev.w * sw * (1.0 + jitter(&mut rng)),
                h: prev.h * sh * (1.0 + jitter(&mut rng)),
            };
            placed.push(clamp_box(&p, width, height));
        }

        let noise = |rng: &mut seed::Rng, f: &mut [f32]| {
            if config.noise > 0.0 {
                for x in f.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *x += (config.noise * z) as f32;
                }
            }
        };
        let mut regions = Vec::with_capacity(MIN_REGIONS);
        for (k, &cat) in cats.iter().enumerate() {
            let mut feature = obj_emb[cat].clone();
            if !attrs[k].is_empty() {
                let inv = 1.0 / attrs[k].len() as f32;
                let mut mean = vec![0.0f32; dim];
                for &a in &attrs[k] {
                    for (m, &x) in mean.iter_mut().zip(&attr_emb[a]) {
                        *m += x;
                    }
                }
                for (f, m) in feature.iter_mut().zip(mean) {
                    *f += m * inv;
                }
            }
            noise(&mut rng, &mut feature);
            let p = &placed[k];
            regions.push(Region {
                bbox: RegionBox::new(p.x, p.y, p.x + p.w, p.y + p.h, width, height)?,
                feature,
                class_id: cat as u32,
            });
        }
        // distractors on a jittered 4x3 grid
        let mut cells: Vec<usize> = (0..12).collect();
        cells.shuffle(&mut rng);
        let (cw, ch) = (width / 4.0, height / 3.0);
        for &cell in cells.iter().take(MIN_REGIONS.saturating_sub(regions.len())) {
            let (cx, cy) = ((cell % 4) as f64 * cw, (cell / 4) as f64 * ch);
            let bw = cw * rng.random_range(0.5..0.9);
            let bh = ch * rng.random_range(0.5..0.9);
            let x = cx + rng.random_range(0.0..cw - bw);
            let y = cy + rng.random_range(0.0..ch - bh);
            let b = rng.random_range(0..config.background_categories);
            let mut feature = bg_emb[b].clone();
            noise(&mut rng, &mut feature);
            regions.push(Region {
                bbox: RegionBox::new(x, y, x + bw, y + bh, width, height)?,
                feature,
                class_id: (config.object_categories + b) as u32,
            });
        }
        regions.shuffle(&mut rng);

        let image_id = format!("img{i:06}");
        let graph = parse(&text, lexicon);
        debug_assert_eq!(graph.objects.len(), n_obj, "{text}");
        corpus.images.push(ImageRecord {
            image_id: image_id.clone(),
            width,
            height,
            regions,
        });
        corpus.captions.push(CaptionRecord {
            caption_id: format!("cap{i:06}"),
            image_id,
            text,
        });
        corpus.graphs.push(graph);
    }
    Ok(corpus)
}
