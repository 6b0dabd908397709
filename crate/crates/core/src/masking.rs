//! Pre-training instance construction: scene-graph node masking, residual
//! MLM, masked regions and image-text matching negatives.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{location_feature, ImageRecord};
use crate::error::{Error, Result};
use crate::scenegraph::{NodeCategory, NodeRef, SceneGraph};
use crate::seed;
use crate::textproc::{AlignedCaption, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mlm,
    Object,
    Attribute,
    Relationship,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Mlm, Task::Object, Task::Attribute, Task::Relationship];

    pub fn of(category: NodeCategory) -> Self {
        match category {
            NodeCategory::Object => Task::Object,
            NodeCategory::Attribute => Task::Attribute,
            NodeCategory::Relationship => Task::Relationship,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Mlm => "mlm",
            Task::Object => "object",
            Task::Attribute => "attribute",
            Task::Relationship => "relationship",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// How a selected span is corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Replacement {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplacementMix {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for ReplacementMix {
    fn default() -> Self {
        Self {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

impl ReplacementMix {
    pub const MASK_ONLY: Self = Self {
        mask: 1.0,
        random: 0.0,
        keep: 0.0,
    };

    fn draw<R: Rng>(&self, rng: &mut R) -> Replacement {
        let u: f64 = rng.random();
        if u < self.mask {
            Replacement::Mask
        } else if u < self.mask + self.random {
            Replacement::Random
        } else {
            Replacement::Keep
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingPolicy {
    pub token_mask_rate: f64,
    pub node_mask_rate: f64,
    pub region_mask_rate: f64,
    pub mix: ReplacementMix,
    pub p_neg: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            token_mask_rate: 0.15,
            node_mask_rate: 0.30,
            region_mask_rate: 0.15,
            mix: ReplacementMix::default(),
            p_neg: 0.5,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("token_mask_rate", self.token_mask_rate),
            ("node_mask_rate", self.node_mask_rate),
            ("region_mask_rate", self.region_mask_rate),
            ("p_neg", self.p_neg),
            ("mix.mask", self.mix.mask),
            ("mix.random", self.mix.random),
            ("mix.keep", self.mix.keep),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} is outside [0, 1]")));
            }
        }
        let sum = self.mix.mask + self.mix.random + self.mix.keep;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("replacement mix sums to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItmLabel {
    Positive,
    Negative,
}

/// One labeled token span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpan {
    pub pos: usize,
    pub len: usize,
    pub task: Task,
    pub target_ids: Vec<u32>,
    pub replacement: Replacement,
    /// The scene-graph node behind an SGP label.
    #[serde(skip)]
    pub node: Option<NodeRef>,
}

/// Token ranges that stayed visible as conditioning context for a masked
/// attribute (its owner) or relationship (both endpoints).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SgpContext {
    pub node: NodeRef,
    pub context: Vec<(usize, usize)>,
}

/// Per-instance counters for masking audits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MaskingCounts {
    pub nodes: usize,
    pub nodes_masked: usize,
    /// Residual positions that were eligible for MLM.
    pub residual: usize,
    pub residual_masked: usize,
    pub plain_tokens: usize,
    pub masked_tokens: usize,
    pub regions: usize,
    pub regions_masked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainInstance {
    pub caption_id: String,
    pub image_id: String,
    pub input_ids: Vec<u32>,
    /// Original id at labeled positions.
    pub labels: Vec<Option<u32>>,
    pub tasks: Vec<Option<Task>>,
    pub spans: Vec<LabelSpan>,
    pub contexts: Vec<SgpContext>,
    /// Row-major `[regions, feature_dim]`, after masking.
    pub region_features: Vec<f32>,
    pub region_locations: Vec<[f32; 5]>,
    pub region_labels: Vec<Option<u32>>,
    pub feature_dim: usize,
    pub itm_label: ItmLabel,
    pub rng_seed: u64,
    pub counts: MaskingCounts,
}

impl PretrainInstance {
    /// The caption/image pair with no corruption and no labels.
    pub fn unmasked(caption_id: &str, ac: &AlignedCaption, img: &ImageRecord) -> Self {
        let n = ac.len();
        let mut inst = Self {
            caption_id: caption_id.to_string(),
            image_id: img.image_id.clone(),
            input_ids: ac.ids.clone(),
            labels: vec![None; n],
            tasks: vec![None; n],
            spans: Vec::new(),
            contexts: Vec::new(),
            region_features: Vec::new(),
            region_locations: Vec::new(),
            region_labels: vec![None; img.regions.len()],
            feature_dim: img.feature_dim(),
            itm_label: ItmLabel::Positive,
            rng_seed: 0,
            counts: MaskingCounts {
                nodes: 0,
                plain_tokens: ac.ids.iter().filter(|&&id| !Vocab::is_special(id)).count(),
                regions: img.regions.len(),
                ..Default::default()
            },
        };
        inst.set_image(img);
        inst
    }

    fn set_image(&mut self, img: &ImageRecord) {
        self.image_id = img.image_id.clone();
        self.feature_dim = img.feature_dim();
        self.region_features = img.regions.iter().flat_map(|r| r.feature.iter().copied()).collect();
        self.region_locations = img
            .regions
            .iter()
            .map(|r| location_feature(&r.bbox).map(|x| x as f32))
            .collect();
        self.region_labels = vec![None; img.regions.len()];
        self.counts.regions = img.regions.len();
    }

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn regions(&self) -> usize {
        self.region_locations.len()
    }

    pub fn masked_regions(&self) -> Vec<usize> {
        (0..self.region_labels.len())
            .filter(|&i| self.region_labels[i].is_some())
            .collect()
    }

    /// Replaces `[pos, pos + len)` with [MASK] and labels it.
    pub fn mask_span(&mut self, pos: usize, len: usize, task: Task) {
        for p in pos..pos + len {
            self.labels[p] = Some(self.input_ids[p]);
            self.tasks[p] = Some(task);
            self.input_ids[p] = Vocab::MASK_ID;
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.iter().any(Option::is_some) || self.region_labels.iter().any(Option::is_some)
    }

    pub fn to_record(&self) -> InstanceRecord {
        let mut labels: Vec<SpanRecord> = self
            .spans
            .iter()
            .map(|s| SpanRecord {
                pos: s.pos,
                len: s.len,
                task: s.task,
                target_ids: s.target_ids.clone(),
            })
            .collect();
        labels.sort_by_key(|s| s.pos);
        InstanceRecord {
            caption_id: self.caption_id.clone(),
            image_id: self.image_id.clone(),
            input_ids: self.input_ids.clone(),
            labels,
            masked_regions: self.masked_regions(),
            itm_label: self.itm_label,
            rng_seed: self.rng_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub pos: usize,
    pub len: usize,
    pub task: Task,
    pub target_ids: Vec<u32>,
}

/// JSONL line emitted by `mask`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub caption_id: String,
    pub image_id: String,
    pub input_ids: Vec<u32>,
    pub labels: Vec<SpanRecord>,
    pub masked_regions: Vec<usize>,
    pub itm_label: ItmLabel,
    pub rng_seed: u64,
}

fn stochastic_round<R: Rng>(x: f64, rng: &mut R) -> usize {
    let base = x.floor();
    let extra = rng.random_bool((x - base).clamp(0.0, 1.0));
    base as usize + extra as usize
}

fn pick_negative<'a, R: Rng>(
    img: &ImageRecord,
    pool: &'a [ImageRecord],
    rng: &mut R,
) -> Option<&'a ImageRecord> {
    if pool.is_empty() {
        return None;
    }
    for _ in 0..32 {
        let cand = &pool[rng.random_range(0..pool.len())];
        if cand.image_id != img.image_id {
            return Some(cand);
        }
    }
    let start = rng.random_range(0..pool.len());
    (0..pool.len())
        .map(|k| &pool[(start + k) % pool.len()])
        .find(|c| c.image_id != img.image_id)
}

/// Inputs of one caption/image pair.
#[derive(Debug, Clone, Copy)]
pub struct PairRef<'a> {
    pub caption_id: &'a str,
    pub aligned: &'a AlignedCaption,
    pub graph: &'a SceneGraph,
    pub image: &'a ImageRecord,
}

/// Builds one instance. `pool` supplies images for negative pairs;
/// random replacement draws ids from `[FIRST_PLAIN_ID, vocab_size)`.
pub fn build_instance(
    pair: PairRef<'_>,
    pool: &[ImageRecord],
    policy: &MaskingPolicy,
    vocab_size: usize,
    rng_seed: u64,
) -> Result<PretrainInstance> {
    let PairRef {
        caption_id,
        aligned: ac,
        graph,
        image: img,
    } = pair;
    if ac.node_spans.len() != graph.node_count() {
        return Err(Error::Validation(format!(
            "caption {caption_id}: alignment covers {} nodes, graph has {}",
            ac.node_spans.len(),
            graph.node_count()
        )));
    }
    if vocab_size <= Vocab::FIRST_PLAIN_ID as usize {
        return Err(Error::Config("vocabulary has no plain tokens".into()));
    }
    let mut rng = seed::rng(rng_seed);
    let mut inst = PretrainInstance::unmasked(caption_id, ac, img);
    inst.rng_seed = rng_seed;
    inst.counts.nodes = graph.node_count();

    // negatives are corrupted like positives so that masking carries no
    // hint about the pair; their labels are dropped at the end
    let mut image = img;
    if rng.random_bool(policy.p_neg) {
        let Some(neg) = pick_negative(img, pool, &mut rng) else {
            return Err(Error::Validation(format!(
                "caption {caption_id}: no other image available for a negative pair"
            )));
        };
        inst.set_image(neg);
        inst.itm_label = ItmLabel::Negative;
        image = neg;
    }

    let n = ac.len();
    let mut masked = vec![false; n];
    let mut protected = vec![false; n];
    let mut masked_objects = BTreeSet::new();
    let mut protected_objects = BTreeSet::new();

    let object_span = |o: usize| {
        ac.span_of(NodeRef {
            category: NodeCategory::Object,
            index: o,
        })
        .expect("every node is aligned")
    };

    // (a)/(b) scene-graph nodes
    let target = stochastic_round(policy.node_mask_rate * graph.node_count() as f64, &mut rng);
    let mut order: Vec<NodeRef> = graph.nodes().collect();
    order.shuffle(&mut rng);
    let mut selected = Vec::new();
    for node in order {
        if selected.len() >= target {
            break;
        }
        let span = ac.span_of(node).expect("every node is aligned");
        if span.positions().any(|p| masked[p] || protected[p]) {
            continue;
        }
        let context: Vec<usize> = match node.category {
            NodeCategory::Object => {
                if protected_objects.contains(&node.index) {
                    continue;
                }
                Vec::new()
            }
            NodeCategory::Attribute => vec![graph.attributes[node.index].owner],
            NodeCategory::Relationship => {
                let r = &graph.relations[node.index];
                vec![r.subject, r.object]
            }
        };
        if context.iter().any(|o| masked_objects.contains(o)) {
            continue;
        }
        let ctx_spans: Vec<_> = context.iter().map(|&o| object_span(o)).collect();
        if ctx_spans.iter().any(|s| s.positions().any(|p| masked[p])) {
            continue;
        }
        for s in &ctx_spans {
            protected[s.positions()].fill(true);
        }
        protected_objects.extend(context.iter().copied());
        if node.category == NodeCategory::Object {
            masked_objects.insert(node.index);
        }
        masked[span.positions()].fill(true);
        if !context.is_empty() {
            inst.contexts.push(SgpContext {
                node,
                context: ctx_spans.iter().map(|s| (s.start, s.end)).collect(),
            });
        }
        selected.push((node, span));
    }
    for (node, span) in selected {
        let mode = policy.mix.draw(&mut rng);
        apply(&mut inst, span.start, span.len(), Task::of(node.category), Some(node), mode, vocab_size, &mut rng);
    }
    inst.counts.nodes_masked = inst.spans.len();

    // (c) residual MLM
    for p in 0..n {
        if Vocab::is_special(ac.ids[p]) || masked[p] || protected[p] {
            continue;
        }
        inst.counts.residual += 1;
        if rng.random_bool(policy.token_mask_rate) {
            inst.counts.residual_masked += 1;
            let mode = policy.mix.draw(&mut rng);
            apply(&mut inst, p, 1, Task::Mlm, None, mode, vocab_size, &mut rng);
        }
    }
    inst.counts.masked_tokens = inst.labels.iter().filter(|l| l.is_some()).count();

    // (d) regions
    let dim = inst.feature_dim;
    for (i, region) in image.regions.iter().enumerate() {
        if rng.random_bool(policy.region_mask_rate) {
            inst.region_features[i * dim..(i + 1) * dim].fill(0.0);
            inst.region_labels[i] = Some(region.class_id);
            inst.counts.regions_masked += 1;
        }
    }
    if inst.itm_label == ItmLabel::Negative {
        inst.labels.fill(None);
        inst.tasks.fill(None);
        inst.region_labels.fill(None);
        inst.spans.clear();
        inst.contexts.clear();
        inst.counts = MaskingCounts::default();
    }
    Ok(inst)
}

#[allow(clippy::too_many_arguments)]
fn apply<R: Rng>(
    inst: &mut PretrainInstance,
    pos: usize,
    len: usize,
    task: Task,
    node: Option<NodeRef>,
    mode: Replacement,
    vocab_size: usize,
    rng: &mut R,
) {
    let target_ids = inst.input_ids[pos..pos + len].to_vec();
    for p in pos..pos + len {
        inst.labels[p] = Some(inst.input_ids[p]);
        inst.tasks[p] = Some(task);
        match mode {
            Replacement::Mask => inst.input_ids[p] = Vocab::MASK_ID,
            Replacement::Random => {
                inst.input_ids[p] = rng.random_range(Vocab::FIRST_PLAIN_ID..vocab_size as u32)
            }
            Replacement::Keep => {}
        }
    }
    inst.spans.push(LabelSpan {
        pos,
        len,
        task,
        target_ids,
        replacement: mode,
        node,
    });
}

/// Padded tensors for a list of instances. Sequence length `max_t` counts
/// [CLS] and [SEP]; `max_i` counts real regions, not the [IMG] slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub max_t: usize,
    pub max_i: usize,
    pub feature_dim: usize,
    /// `[size, max_t]`
    pub token_ids: Vec<u32>,
    pub token_mask: Vec<bool>,
    pub token_labels: Vec<Option<u32>>,
    pub token_tasks: Vec<Option<Task>>,
    /// `[size, max_i, feature_dim]`
    pub region_features: Vec<f32>,
    /// `[size, max_i, 5]`
    pub region_locations: Vec<f32>,
    /// `[size, max_i]`
    pub region_mask: Vec<bool>,
    pub region_labels: Vec<Option<u32>>,
    pub itm_labels: Vec<bool>,
}

impl Batch {
    pub fn labeled_tokens(&self) -> usize {
        self.token_labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn region_count(&self, b: usize) -> usize {
        self.region_mask[b * self.max_i..(b + 1) * self.max_i]
            .iter()
            .filter(|&&m| m)
            .count()
    }
}

pub fn make_batch(instances: &[PretrainInstance], max_t: usize, max_i: usize) -> Result<Batch> {
    let size = instances.len();
    let feature_dim = instances.first().map_or(0, |i| i.feature_dim);
    let mut b = Batch {
        size,
        max_t,
        max_i,
        feature_dim,
        token_ids: vec![Vocab::PAD_ID; size * max_t],
        token_mask: vec![false; size * max_t],
        token_labels: vec![None; size * max_t],
        token_tasks: vec![None; size * max_t],
        region_features: vec![0.0; size * max_i * feature_dim],
        region_locations: vec![0.0; size * max_i * 5],
        region_mask: vec![false; size * max_i],
        region_labels: vec![None; size * max_i],
        itm_labels: Vec::with_capacity(size),
    };
    for (k, inst) in instances.iter().enumerate() {
        if inst.len() > max_t {
            return Err(Error::Validation(format!(
                "caption {} has {} tokens, batch allows {max_t}",
                inst.caption_id,
                inst.len()
            )));
        }
        if inst.regions() > max_i {
            return Err(Error::Validation(format!(
                "image {} has {} regions, batch allows {max_i}",
                inst.image_id,
                inst.regions()
            )));
        }
        if inst.feature_dim != feature_dim {
            return Err(Error::Validation(format!(
                "image {} has feature dimension {}, batch uses {feature_dim}",
                inst.image_id, inst.feature_dim
            )));
        }
        let t0 = k * max_t;
        let n = inst.len();
        b.token_ids[t0..t0 + n].copy_from_slice(&inst.input_ids);
        b.token_mask[t0..t0 + n].fill(true);
        b.token_labels[t0..t0 + n].clone_from_slice(&inst.labels);
        b.token_tasks[t0..t0 + n].clone_from_slice(&inst.tasks);
        let r0 = k * max_i;
        let r = inst.regions();
        b.region_features[r0 * feature_dim..(r0 + r) * feature_dim]
            .copy_from_slice(&inst.region_features);
        for (i, loc) in inst.region_locations.iter().enumerate() {
            b.region_locations[(r0 + i) * 5..(r0 + i + 1) * 5].copy_from_slice(loc);
        }
        b.region_mask[r0..r0 + r].fill(true);
        b.region_labels[r0..r0 + r].clone_from_slice(&inst.region_labels);
        b.itm_labels.push(inst.itm_label == ItmLabel::Positive);
    }
    Ok(b)
}

/// Aggregated masking counters over many instances.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MaskingAudit {
    pub instances: usize,
    pub negatives: usize,
    pub counts: MaskingCounts,
    /// Selected spans by replacement mode: mask, random, keep.
    pub modes: [usize; 3],
    pub context_violations: usize,
}

impl MaskingAudit {
    pub fn add(&mut self, inst: &PretrainInstance, graph: &SceneGraph, ac: &AlignedCaption) {
        self.instances += 1;
        if inst.itm_label == ItmLabel::Negative {
            self.negatives += 1;
        }
        let c = &inst.counts;
        let t = &mut self.counts;
        t.nodes += c.nodes;
        t.nodes_masked += c.nodes_masked;
        t.residual += c.residual;
        t.residual_masked += c.residual_masked;
        t.plain_tokens += c.plain_tokens;
        t.masked_tokens += c.masked_tokens;
        t.regions += c.regions;
        t.regions_masked += c.regions_masked;
        for s in &inst.spans {
            let k = match s.replacement {
                Replacement::Mask => 0,
                Replacement::Random => 1,
                Replacement::Keep => 2,
            };
            self.modes[k] += 1;
        }
        self.context_violations += context_violations(inst, graph, ac);
    }

    pub fn node_rate(&self) -> f64 {
        ratio(self.counts.nodes_masked, self.counts.nodes)
    }

    pub fn residual_rate(&self) -> f64 {
        ratio(self.counts.residual_masked, self.counts.residual)
    }

    pub fn region_rate(&self) -> f64 {
        ratio(self.counts.regions_masked, self.counts.regions)
    }

    pub fn token_rate(&self) -> f64 {
        ratio(self.counts.masked_tokens, self.counts.plain_tokens)
    }

    pub fn mix(&self) -> [f64; 3] {
        let total: usize = self.modes.iter().sum();
        self.modes.map(|m| ratio(m, total))
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Counts masked attributes whose owner and masked relationships whose
/// endpoints have any labeled token.
pub fn context_violations(inst: &PretrainInstance, graph: &SceneGraph, ac: &AlignedCaption) -> usize {
    let labeled = |o: usize| {
        let s = ac
            .span_of(NodeRef {
                category: NodeCategory::Object,
                index: o,
            })
            .expect("every node is aligned");
        s.positions().any(|p| inst.labels[p].is_some())
    };
    inst.spans
        .iter()
        .filter_map(|s| s.node)
        .filter(|node| match node.category {
            NodeCategory::Object => false,
            NodeCategory::Attribute => labeled(graph.attributes[node.index].owner),
            NodeCategory::Relationship => {
                let r = &graph.relations[node.index];
                labeled(r.subject) || labeled(r.object)
            }
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GeneratorConfig};
    use crate::scenegraph::{parse, tests_support::TABLE1, ParserLexicon};
    use crate::textproc::encode;

    struct Fixture {
        ac: AlignedCaption,
        graph: SceneGraph,
        images: Vec<ImageRecord>,
        vocab: Vocab,
    }

    fn table1() -> Fixture {
        let lex = ParserLexicon::bundled();
        let graph = parse(TABLE1, &lex);
        let vocab = Vocab::build([TABLE1], &lex, 1000);
        let ac = encode(TABLE1, &graph, &vocab).unwrap();
        let images = generate_corpus(&GeneratorConfig { pairs: 3, ..Default::default() }, &lex, 0)
            .unwrap()
            .images;
        Fixture { ac, graph, images, vocab }
    }

    impl Fixture {
        fn build(&self, policy: &MaskingPolicy, seed: u64) -> PretrainInstance {
            let pair = PairRef {
                caption_id: "c",
                aligned: &self.ac,
                graph: &self.graph,
                image: &self.images[0],
            };
            build_instance(pair, &self.images, policy, self.vocab.len(), seed).unwrap()
        }
    }

    fn forced() -> MaskingPolicy {
        MaskingPolicy {
            token_mask_rate: 0.0,
            node_mask_rate: 1.0,
            region_mask_rate: 0.0,
            mix: ReplacementMix::MASK_ONLY,
            p_neg: 0.0,
        }
    }

    #[test]
    fn forced_selection_masks_a_maximal_compatible_set() {
        let fx = table1();
        for seed in 0..50 {
            let inst = fx.build(&forced(), seed);
            assert_eq!(context_violations(&inst, &fx.graph, &fx.ac), 0);
            for s in &inst.spans {
                assert!(inst.input_ids[s.pos..s.pos + s.len].iter().all(|&i| i == Vocab::MASK_ID));
            }
            let chosen: BTreeSet<NodeRef> = inst.spans.iter().filter_map(|s| s.node).collect();
            let masked_obj = |o| chosen.contains(&NodeRef { category: NodeCategory::Object, index: o });
            // every unchosen node is blocked by the context rule
            for node in fx.graph.nodes().filter(|n| !chosen.contains(n)) {
                let blocked = match node.category {
                    NodeCategory::Object => inst.contexts.iter().any(|c| {
                        let s = fx.ac.span_of(node).unwrap();
                        c.context.contains(&(s.start, s.end))
                    }),
                    NodeCategory::Attribute => masked_obj(fx.graph.attributes[node.index].owner),
                    NodeCategory::Relationship => {
                        let r = &fx.graph.relations[node.index];
                        masked_obj(r.subject) || masked_obj(r.object)
                    }
                };
                assert!(blocked, "seed {seed}: {node:?} could have been masked");
            }
            assert!(!chosen.is_empty());
        }
    }

    #[test]
    fn forced_attributes_and_relations_leave_all_objects_visible() {
        // whenever no object is drawn, all 4 attributes and 4 relations are
        let fx = table1();
        let mut hits = 0;
        for seed in 0..200 {
            let inst = fx.build(&forced(), seed);
            let tasks: Vec<Task> = inst.spans.iter().map(|s| s.task).collect();
            if !tasks.contains(&Task::Object) {
                assert_eq!(tasks.len(), 8);
                hits += 1;
            }
        }
        assert!(hits > 0);
    }

    #[test]
    fn negative_pairs_carry_no_labels() {
        let fx = table1();
        let policy = MaskingPolicy { p_neg: 1.0, ..Default::default() };
        let mut corrupted = 0;
        for seed in 0..20 {
            let inst = fx.build(&policy, seed);
            assert_eq!(inst.itm_label, ItmLabel::Negative);
            assert!(!inst.is_labeled());
            assert!(inst.spans.is_empty() && inst.contexts.is_empty());
            assert_ne!(inst.image_id, fx.images[0].image_id);
            corrupted += (inst.input_ids != fx.ac.ids) as usize;
        }
        // inputs are still corrupted, so masking says nothing about the label
        assert!(corrupted > 10, "{corrupted}");
    }

    #[test]
    fn deterministic_in_seed() {
        let fx = table1();
        let p = MaskingPolicy::default();
        assert_eq!(fx.build(&p, 42), fx.build(&p, 42));
    }

    #[test]
    fn tags_are_a_partition_and_specials_untouched() {
        let fx = table1();
        let p = MaskingPolicy { p_neg: 0.0, ..Default::default() };
        for seed in 0..200 {
            let inst = fx.build(&p, seed);
            let mut covered = vec![0; inst.len()];
            for s in &inst.spans {
                for c in &mut covered[s.pos..s.pos + s.len] {
                    *c += 1;
                }
            }
            assert!(covered.iter().all(|&c| c <= 1));
            assert!(inst.labels[0].is_none() && inst.labels[inst.len() - 1].is_none());
            for (p, l) in inst.labels.iter().enumerate() {
                assert_eq!(l.is_some(), inst.tasks[p].is_some());
                assert_eq!(l.is_some(), covered[p] == 1);
                if let Some(id) = l {
                    assert_eq!(*id, fx.ac.ids[p]);
                }
            }
            assert_eq!(context_violations(&inst, &fx.graph, &fx.ac), 0);
        }
    }

    #[test]
    fn masked_regions_are_zeroed() {
        let fx = table1();
        let p = MaskingPolicy { region_mask_rate: 1.0, p_neg: 0.0, ..Default::default() };
        let inst = fx.build(&p, 1);
        assert!(inst.region_features.iter().all(|&x| x == 0.0));
        let classes: Vec<u32> = fx.images[0].regions.iter().map(|r| r.class_id).collect();
        assert_eq!(inst.region_labels, classes.into_iter().map(Some).collect::<Vec<_>>());
        assert_eq!(inst.region_locations.len(), fx.images[0].regions.len());
    }

    #[test]
    fn batch_padding() {
        let fx = table1();
        let mut a = fx.build(&forced(), 0);
        a.input_ids.truncate(5);
        a.labels.truncate(5);
        a.tasks.truncate(5);
        let b = fx.build(&forced(), 1);
        let n = b.len();
        let batch = make_batch(&[a, b.clone()], n, 10).unwrap();
        assert_eq!(&batch.token_ids[5..n], vec![Vocab::PAD_ID; n - 5].as_slice());
        assert!(batch.token_mask[..5].iter().all(|&m| m));
        assert!(batch.token_mask[5..n].iter().all(|&m| !m));
        assert!(batch.token_mask[n..].iter().all(|&m| m));
        assert!(batch.token_labels[5..n].iter().all(Option::is_none));

        let single = make_batch(std::slice::from_ref(&b), n, b.regions()).unwrap();
        assert!(single.token_mask.iter().all(|&m| m) && single.region_mask.iter().all(|&m| m));
        assert!(make_batch(std::slice::from_ref(&b), n - 1, 10).is_err());
        assert!(make_batch(std::slice::from_ref(&b), n, 9).is_err());
    }

    #[test]
    fn batch_label_count_matches_spans() {
        let fx = table1();
        let inst = fx.build(&forced(), 3);
        let tokens: usize = inst.spans.iter().map(|s| s.len).sum();
        let batch = make_batch(std::slice::from_ref(&inst), inst.len(), 10).unwrap();
        assert_eq!(batch.labeled_tokens(), tokens);
    }

    #[test]
    fn policy_validation() {
        assert!(MaskingPolicy::default().validate().is_ok());
        let bad = MaskingPolicy { token_mask_rate: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad_mix = MaskingPolicy {
            mix: ReplacementMix { mask: 0.5, random: 0.1, keep: 0.1 },
            ..Default::default()
        };
        assert!(bad_mix.validate().is_err());
    }

    #[test]
    fn record_lists_spans_in_position_order() {
        let fx = table1();
        let inst = fx.build(&forced(), 9);
        let rec = inst.to_record();
        assert!(rec.labels.windows(2).all(|w| w[0].pos < w[1].pos));
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.contains("\"itm_label\":\"positive\""), "{line}");
    }
}
