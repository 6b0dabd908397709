//! Cross-modal cloze test, image-text matching accuracy and the two-arm
//! ablation driver.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{PretrainInstance, Task};
use crate::model::{Model, ModelConfig};
use crate::numerics::Element;
use crate::scenegraph::NodeCategory;
use crate::seed;
use crate::train::{batch_of, train, AblationMode, Dataset, TrainConfig};
use crate::util;

/// Reference overall ACC@1 (without, with scene-graph prediction) from the
/// full-scale experiment, shown for context in ablation tables.
pub const REFERENCE_OVERALL_ACC1: (f64, f64) = (49.75, 51.75);

const EVAL_BATCH: usize = 32;
const TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeItem {
    pub caption_id: String,
    pub image_id: String,
    /// Index into the dataset's examples.
    pub example: usize,
    pub start: usize,
    pub len: usize,
    pub category: NodeCategory,
    pub gold_ids: Vec<u32>,
}

/// Samples `per_category` nodes of each category uniformly without
/// replacement.
pub fn build_cloze_set(data: &Dataset, per_category: usize, seed_base: u64) -> Result<Vec<ClozeItem>> {
    let mut items = Vec::with_capacity(3 * per_category);
    for (c, category) in NodeCategory::ALL.into_iter().enumerate() {
        let mut pool: Vec<ClozeItem> = data
            .examples
            .iter()
            .enumerate()
            .flat_map(|(e, ex)| {
                ex.aligned
                    .node_spans
                    .iter()
                    .filter(move |s| s.node.category == category)
                    .map(move |s| ClozeItem {
                        caption_id: ex.caption_id.clone(),
                        image_id: data.images[ex.image].image_id.clone(),
                        example: e,
                        start: s.start,
                        len: s.len(),
                        category,
                        gold_ids: ex.aligned.ids[s.positions()].to_vec(),
                    })
            })
            .collect();
        if pool.len() < per_category {
            return Err(Error::Validation(format!(
                "only {} {} nodes available, {per_category} requested",
                pool.len(),
                category.as_str()
            )));
        }
        let mut rng = seed::derived_rng(seed_base, &[seed::tag::CLOZE, c as u64]);
        let (chosen, _) = pool.partial_shuffle(&mut rng, per_category);
        items.extend(chosen.iter().cloned());
    }
    Ok(items)
}

/// Ranked candidate ids per masked position.
pub trait ClozePredictor {
    /// For each item, the top `k` vocabulary ids at each span position,
    /// best first.
    fn top_k(&self, data: &Dataset, items: &[ClozeItem], k: usize) -> Result<Vec<Vec<Vec<u32>>>>;
}

/// The caption with `item`'s span replaced by [MASK], paired with its image.
pub fn cloze_instance(data: &Dataset, item: &ClozeItem) -> PretrainInstance {
    let ex = &data.examples[item.example];
    let mut inst = PretrainInstance::unmasked(&ex.caption_id, &ex.aligned, &data.images[ex.image]);
    let task = Task::of(item.category);
    inst.mask_span(item.start, item.len, task);
    inst
}

/// Ids of the `k` largest entries; ties go to the lower id.
fn top_ids<T: Element>(row: &[T], k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..row.len() as u32).collect();
    let k = k.min(idx.len());
    let cmp = |a: &u32, b: &u32| {
        row[*b as usize]
            .partial_cmp(&row[*a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

impl<T: Element> ClozePredictor for Model<T> {
    fn top_k(&self, data: &Dataset, items: &[ClozeItem], k: usize) -> Result<Vec<Vec<Vec<u32>>>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(EVAL_BATCH) {
            let instances: Vec<PretrainInstance> = chunk.iter().map(|it| cloze_instance(data, it)).collect();
            let batch = batch_of(&instances)?;
            let mut fwd = self.forward::<seed::Rng>(&batch, None)?;
            let rows: Vec<usize> = chunk
                .iter()
                .enumerate()
                .flat_map(|(b, it)| (it.start..it.start + it.len).map(move |p| b * batch.max_t + p))
                .collect();
            let logits = self.mlm_logits(&mut fwd, &rows)?;
            let v = self.config().vocab_size;
            let values = fwd.tape.value(logits).data();
            let mut r = 0;
            for it in chunk {
                let per_pos = (0..it.len)
                    .map(|j| top_ids(&values[(r + j) * v..(r + j + 1) * v], k))
                    .collect();
                r += it.len;
                out.push(per_pos);
            }
        }
        Ok(out)
    }
}

/// Always ranks the gold ids first.
pub struct OracleCloze;

impl ClozePredictor for OracleCloze {
    fn top_k(&self, _data: &Dataset, items: &[ClozeItem], _k: usize) -> Result<Vec<Vec<Vec<u32>>>> {
        Ok(items
            .iter()
            .map(|it| it.gold_ids.iter().map(|&g| vec![g]).collect())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub count: usize,
    pub correct_at_1: usize,
    pub correct_at_5: usize,
    pub acc1: f64,
    pub acc5: f64,
}

impl CategoryScore {
    fn from_counts(count: usize, c1: usize, c5: usize) -> Self {
        let frac = |c: usize| if count == 0 { 0.0 } else { c as f64 / count as f64 };
        Self {
            count,
            correct_at_1: c1,
            correct_at_5: c5,
            acc1: frac(c1),
            acc5: frac(c5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClozeReport {
    pub seed: u64,
    pub checkpoint: String,
    pub objects: CategoryScore,
    pub attributes: CategoryScore,
    pub relationships: CategoryScore,
    pub overall: CategoryScore,
}

impl ClozeReport {
    pub fn category(&self, c: NodeCategory) -> &CategoryScore {
        match c {
            NodeCategory::Object => &self.objects,
            NodeCategory::Attribute => &self.attributes,
            NodeCategory::Relationship => &self.relationships,
        }
    }

    pub fn rows(&self) -> [(&'static str, &CategoryScore); 4] {
        [
            ("objects", &self.objects),
            ("attributes", &self.attributes),
            ("relationships", &self.relationships),
            ("overall", &self.overall),
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<14} {:>7} {:>7} {:>6}\n", "", "ACC@1", "ACC@5", "n");
        for (name, c) in self.rows() {
            let _ = writeln!(s, "{name:<14} {:>7.2} {:>7.2} {:>6}", 100.0 * c.acc1, 100.0 * c.acc5, c.count);
        }
        s
    }
}

/// Scores `items` with strict all-positions matching.
pub fn run_cloze<P: ClozePredictor + ?Sized>(
    predictor: &P,
    data: &Dataset,
    items: &[ClozeItem],
    seed: u64,
    checkpoint: &str,
) -> Result<ClozeReport> {
    let ranked = predictor.top_k(data, items, TOP_K)?;
    let mut counts = [(0usize, 0usize, 0usize); 3];
    for (it, per_pos) in items.iter().zip(&ranked) {
        let c = &mut counts[it.category as usize];
        c.0 += 1;
        let at = |k: usize| {
            it.gold_ids
                .iter()
                .zip(per_pos)
                .all(|(g, cands)| cands.iter().take(k).any(|x| x == g))
        };
        c.1 += at(1) as usize;
        c.2 += at(TOP_K) as usize;
    }
    let score = |c: (usize, usize, usize)| CategoryScore::from_counts(c.0, c.1, c.2);
    let total = counts
        .iter()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    Ok(ClozeReport {
        seed,
        checkpoint: checkpoint.to_string(),
        objects: score(counts[0]),
        attributes: score(counts[1]),
        relationships: score(counts[2]),
        overall: score(total),
    })
}

/// One caption paired with an image (its own or another).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItmPair {
    pub example: usize,
    pub image: usize,
    pub positive: bool,
}

/// Matching logit per pair; positive means "matches".
pub trait ItmScorer {
    fn scores(&self, data: &Dataset, pairs: &[ItmPair]) -> Result<Vec<f64>>;
}

impl<T: Element> ItmScorer for Model<T> {
    fn scores(&self, data: &Dataset, pairs: &[ItmPair]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(EVAL_BATCH) {
            let instances: Vec<PretrainInstance> = chunk
                .iter()
                .map(|p| {
                    let ex = &data.examples[p.example];
                    PretrainInstance::unmasked(&ex.caption_id, &ex.aligned, &data.images[p.image])
                })
                .collect();
            let batch = batch_of(&instances)?;
            let fwd = self.forward::<seed::Rng>(&batch, None)?;
            out.extend(fwd.tape.value(fwd.itm).data().iter().map(|x| x.as_f64()));
        }
        Ok(out)
    }
}

/// Scores +inf for true pairs and -inf otherwise.
pub struct OracleItm;

impl ItmScorer for OracleItm {
    fn scores(&self, data: &Dataset, pairs: &[ItmPair]) -> Result<Vec<f64>> {
        Ok(pairs
            .iter()
            .map(|p| {
                if data.examples[p.example].image == p.image {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect())
    }
}

/// Every example once; a `p_neg` fraction (rounded) gets a random other image.
pub fn itm_pairs(data: &Dataset, p_neg: f64, seed_base: u64) -> Result<Vec<ItmPair>> {
    if !(0.0..=1.0).contains(&p_neg) {
        return Err(Error::Config(format!("p_neg = {p_neg} is outside [0, 1]")));
    }
    let n = data.len();
    let mut rng = seed::derived_rng(seed_base, &[seed::tag::ITM]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let negatives = (p_neg * n as f64).round() as usize;
    let mut negative = vec![false; n];
    for &e in &order[..negatives] {
        negative[e] = true;
    }
    (0..n)
        .map(|e| {
            let own = data.examples[e].image;
            if !negative[e] {
                return Ok(ItmPair { example: e, image: own, positive: true });
            }
            let own_id = &data.images[own].image_id;
            let others = data.images.iter().filter(|i| &i.image_id != own_id).count();
            if others == 0 {
                return Err(Error::Validation("matching evaluation needs at least two images".into()));
            }
            loop {
                let img = rng.random_range(0..data.images.len());
                if &data.images[img].image_id != own_id {
                    return Ok(ItmPair { example: e, image: img, positive: false });
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItmReport {
    pub pairs: usize,
    pub positives: usize,
    pub correct: usize,
    pub accuracy: f64,
}

pub fn run_itm_eval<S: ItmScorer + ?Sized>(scorer: &S, data: &Dataset, p_neg: f64, seed: u64) -> Result<ItmReport> {
    let pairs = itm_pairs(data, p_neg, seed)?;
    let scores = scorer.scores(data, &pairs)?;
    let correct = pairs
        .iter()
        .zip(&scores)
        .filter(|(p, &s)| (s > 0.0) == p.positive)
        .count();
    Ok(ItmReport {
        pairs: pairs.len(),
        positives: pairs.iter().filter(|p| p.positive).count(),
        correct,
        accuracy: if pairs.is_empty() { 0.0 } else { correct as f64 / pairs.len() as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub mode: AblationMode,
    pub cloze: ClozeReport,
    pub itm: ItmReport,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub steps: usize,
    pub sgp: AblationArm,
    pub random_only: AblationArm,
}

impl AblationReport {
    /// ACC@1 of the sgp arm minus the random-only arm, per table row.
    pub fn acc1_delta(&self) -> [(&'static str, f64); 4] {
        let a = self.sgp.cloze.rows();
        let b = self.random_only.cloze.rows();
        [0, 1, 2, 3].map(|i| (a[i].0, a[i].1.acc1 - b[i].1.acc1))
    }

    /// Side-by-side table: rows per category, ACC@1/ACC@5 per arm.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>10} {:>10} {:>10} {:>10} {:>8}\n",
            "", "rand ACC@1", "rand ACC@5", "sgp ACC@1", "sgp ACC@5", "delta@1"
        );
        let a = self.random_only.cloze.rows();
        let b = self.sgp.cloze.rows();
        for i in 0..4 {
            let _ = writeln!(
                s,
                "{:<14} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>+8.2}",
                a[i].0,
                100.0 * a[i].1.acc1,
                100.0 * a[i].1.acc5,
                100.0 * b[i].1.acc1,
                100.0 * b[i].1.acc5,
                100.0 * (b[i].1.acc1 - a[i].1.acc1)
            );
        }
        let _ = writeln!(
            s,
            "itm accuracy: random-only {:.4}, sgp {:.4}",
            self.random_only.itm.accuracy, self.sgp.itm.accuracy
        );
        let _ = writeln!(
            s,
            "reference overall ACC@1 at full scale: {:.2} without scene-graph prediction, {:.2} with",
            REFERENCE_OVERALL_ACC1.0, REFERENCE_OVERALL_ACC1.1
        );
        s
    }
}

/// Inputs shared by both ablation arms.
pub struct AblationSetup<'a> {
    pub train: &'a Dataset,
    pub heldout: &'a Dataset,
    pub model: &'a ModelConfig,
    pub train_config: &'a TrainConfig,
    pub cloze_per_category: usize,
}

/// Trains and evaluates the sgp and random-only arms with identical seeds.
/// With `out`, each arm's training artifacts and the reports go there.
pub fn ablate(setup: &AblationSetup<'_>, out: Option<&Path>) -> Result<AblationReport> {
    let cfg = setup.train_config;
    let items = build_cloze_set(setup.heldout, setup.cloze_per_category, cfg.seed)?;
    let mut arms = Vec::with_capacity(2);
    for mode in [AblationMode::Sgp, AblationMode::RandomOnly] {
        let arm_cfg = TrainConfig { mode, ..cfg.clone() };
        let dir = out.map(|d| d.join(mode.as_str()));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let outcome = train(setup.train, setup.model, &arm_cfg, dir.as_deref())?;
        let id = outcome.checkpoint.digest()?;
        let model = &outcome.checkpoint.model;
        let cloze = run_cloze(model, setup.heldout, &items, cfg.seed, &id)?;
        let itm = run_itm_eval(model, setup.heldout, 0.5, cfg.seed)?;
        if let Some(d) = &dir {
            util::write_atomic(&d.join("cloze.json"), cloze.to_json()?.as_bytes())?;
        }
        arms.push(AblationArm {
            mode,
            cloze,
            itm,
            final_loss: outcome.history.last().map_or(f64::NAN, |l| l.total),
        });
    }
    let random_only = arms.pop().expect("two arms");
    let sgp = arms.pop().expect("two arms");
    let report = AblationReport {
        seed: cfg.seed,
        steps: cfg.steps,
        sgp,
        random_only,
    };
    if let Some(d) = out {
        util::write_atomic(&d.join("ablation.json"), (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
        util::write_atomic(&d.join("ablation.txt"), report.to_table().as_bytes())?;
    }
    Ok(report)
}
