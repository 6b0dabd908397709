//! Step-based training loop, checkpoint resume and the ablation switch.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{ImageRecord, PairedCorpus};
use crate::error::{Error, Result};
use crate::masking::{build_instance, make_batch, Batch, MaskingAudit, MaskingPolicy, PairRef, PretrainInstance};
use crate::model::{Checkpoint, LossBreakdown, Model, ModelConfig};
use crate::numerics::{adam_step, NoamSchedule};
use crate::scenegraph::{parse, ParserLexicon, SceneGraph};
use crate::seed;
use crate::textproc::{encode, AlignedCaption, Vocab};
use crate::util;

/// One caption with its parse and token alignment.
#[derive(Debug, Clone)]
pub struct Example {
    pub caption_id: String,
    pub image: usize,
    pub graph: SceneGraph,
    pub aligned: AlignedCaption,
}

/// Parsed, tokenized and aligned caption/image pairs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub images: Vec<ImageRecord>,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn prepare(corpus: &PairedCorpus, lexicon: &ParserLexicon, vocab: Vocab) -> Result<Self> {
        let examples = corpus
            .captions
            .iter()
            .zip(&corpus.image_of)
            .map(|(c, &image)| {
                let graph = parse(&c.text, lexicon);
                let aligned = encode(&c.text, &graph, &vocab)?;
                Ok(Example {
                    caption_id: c.caption_id.clone(),
                    image,
                    graph,
                    aligned,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vocab,
            images: corpus.images.clone(),
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn pair(&self, i: usize) -> PairRef<'_> {
        let ex = &self.examples[i];
        PairRef {
            caption_id: &ex.caption_id,
            aligned: &ex.aligned,
            graph: &ex.graph,
            image: &self.images[ex.image],
        }
    }

    pub fn instance(&self, i: usize, policy: &MaskingPolicy, rng_seed: u64) -> Result<PretrainInstance> {
        build_instance(self.pair(i), &self.images, policy, self.vocab.len(), rng_seed)
    }

    pub fn max_text_len(&self) -> usize {
        self.examples.iter().map(|e| e.aligned.len()).max().unwrap_or(0)
    }

    pub fn max_regions(&self) -> usize {
        self.images.iter().map(|i| i.regions.len()).max().unwrap_or(0)
    }

    pub fn feature_dim(&self) -> usize {
        self.images.first().map_or(0, ImageRecord::feature_dim)
    }

    /// Model configuration sized to this dataset on top of `base`.
    pub fn model_config(&self, base: &ModelConfig, region_classes: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            feature_dim: self.feature_dim(),
            region_classes,
            max_text_len: base.max_text_len.max(self.max_text_len()),
            max_regions: base.max_regions.max(self.max_regions()),
            ..base.clone()
        }
    }
}

/// Training and held-out datasets of one corpus.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub heldout: Dataset,
    /// One more than the largest region class id in the corpus.
    pub region_classes: usize,
}

impl Splits {
    pub fn prepare(corpus: &PairedCorpus, lexicon: &ParserLexicon, vocab: Vocab) -> Result<Self> {
        let region_classes = corpus
            .images
            .iter()
            .flat_map(|i| &i.regions)
            .map(|r| r.class_id as usize + 1)
            .max()
            .unwrap_or(1);
        Ok(Self {
            train: Dataset::prepare(&corpus.split(false), lexicon, vocab.clone())?,
            heldout: Dataset::prepare(&corpus.split(true), lexicon, vocab)?,
            region_classes,
        })
    }

    /// `base` sized to hold every caption and image of both splits.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let a = self.train.model_config(base, self.region_classes);
        let b = self.heldout.model_config(base, self.region_classes);
        ModelConfig {
            max_text_len: a.max_text_len.max(b.max_text_len),
            max_regions: a.max_regions.max(b.max_regions),
            feature_dim: if a.feature_dim == 0 { b.feature_dim } else { a.feature_dim },
            ..a
        }
    }
}

/// Batches padded to their longest member.
pub fn batch_of(instances: &[PretrainInstance]) -> Result<Batch> {
    let t = instances.iter().map(PretrainInstance::len).max().unwrap_or(0);
    let i = instances.iter().map(PretrainInstance::regions).max().unwrap_or(0);
    make_batch(instances, t, i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    #[default]
    Sgp,
    RandomOnly,
}

impl AblationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Sgp => "sgp",
            AblationMode::RandomOnly => "random-only",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgp" => Ok(Self::Sgp),
            "random-only" => Ok(Self::RandomOnly),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected sgp or random-only"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub peak_lr: f64,
    /// Defaults to a tenth of `steps` when unset.
    pub warmup: Option<usize>,
    pub policy: MaskingPolicy,
    pub mode: AblationMode,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    pub clip_norm: f64,
    /// Instances used to calibrate the random-only token rate.
    pub calibration_instances: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            seed: 0,
            peak_lr: 1e-4,
            warmup: None,
            policy: MaskingPolicy::default(),
            mode: AblationMode::Sgp,
            checkpoint_interval: 0,
            log_interval: 10,
            clip_norm: 1.0,
            calibration_instances: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be at least 1".into()));
        }
        self.policy.validate()
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup.unwrap_or(self.steps / 10).max(1)
    }
}

/// Token-level masking rate that gives random-only masking the same
/// expected number of masked positions as the scene-graph policy.
pub fn calibrate_random_rate(data: &Dataset, policy: &MaskingPolicy, instances: usize, seed_base: u64) -> Result<f64> {
    if data.is_empty() {
        return Ok(policy.token_mask_rate);
    }
    let positive = MaskingPolicy {
        p_neg: 0.0,
        ..policy.clone()
    };
    let mut audit = MaskingAudit::default();
    for k in 0..instances {
        let i = (seed::derive(seed_base, &[seed::tag::CALIBRATION, k as u64, 0]) % data.len() as u64) as usize;
        let s = seed::derive(seed_base, &[seed::tag::CALIBRATION, k as u64, 1]);
        let inst = data.instance(i, &positive, s)?;
        let ex = &data.examples[i];
        audit.add(&inst, &ex.graph, &ex.aligned);
    }
    Ok(audit.token_rate())
}

/// The masking policy actually used for `cfg.mode`.
pub fn effective_policy(data: &Dataset, cfg: &TrainConfig) -> Result<MaskingPolicy> {
    match cfg.mode {
        AblationMode::Sgp => Ok(cfg.policy.clone()),
        AblationMode::RandomOnly => {
            // independent of the training seed so both arms of an ablation
            // compare against the same calibration
            let rate = calibrate_random_rate(data, &cfg.policy, cfg.calibration_instances, 0)?;
            Ok(MaskingPolicy {
                node_mask_rate: 0.0,
                token_mask_rate: rate,
                ..cfg.policy.clone()
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub l_obj: f64,
    pub l_attr: f64,
    pub l_rel: f64,
    pub l_mlm: f64,
    pub l_region: f64,
    pub l_itm: f64,
    pub total: f64,
}

impl MetricsRow {
    fn new(step: u64, lr: f64, l: &LossBreakdown) -> Self {
        Self {
            step,
            lr,
            l_obj: l.l_obj,
            l_attr: l.l_attr,
            l_rel: l.l_rel,
            l_mlm: l.l_mlm,
            l_region: l.l_region,
            l_itm: l.l_itm,
            total: l.total,
        }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint<f32>,
    /// Rows written to metrics.jsonl.
    pub metrics: Vec<MetricsRow>,
    /// Loss of every step run in this call.
    pub history: Vec<LossBreakdown>,
}

/// Assembles the batch of global step `step` (0-based).
pub fn step_batch(data: &Dataset, policy: &MaskingPolicy, cfg: &TrainConfig, step: u64) -> Result<Batch> {
    let n = data.len() as u64;
    let instances = (0..cfg.batch_size as u64)
        .map(|j| {
            let i = (seed::derive(cfg.seed, &[seed::tag::SAMPLE, step, j]) % n) as usize;
            let s = seed::derive(cfg.seed, &[seed::tag::INSTANCE, step, j]);
            data.instance(i, policy, s)
        })
        .collect::<Result<Vec<_>>>()?;
    batch_of(&instances)
}

/// Trains a fresh model for `cfg.steps` steps. With `out`, metrics.jsonl
/// and checkpoints are written there.
pub fn train(data: &Dataset, model_config: &ModelConfig, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(data, model_config)?;
    let model = Model::<f32>::new(model_config.clone(), cfg.seed)?;
    run(data, Checkpoint::new(model), cfg, out, Vec::new())
}

/// Continues `ckpt` up to `cfg.steps` total steps.
pub fn resume(
    ckpt: Checkpoint<f32>,
    model_config: &ModelConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let diff = ckpt.config().diff(model_config);
    if !diff.is_empty() {
        return Err(Error::ConfigMismatch(diff));
    }
    check_data(data, model_config)?;
    if ckpt.step as usize > cfg.steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {}, beyond the configured {} steps",
            ckpt.step, cfg.steps
        )));
    }
    let metrics = match out {
        Some(dir) if dir.join(METRICS_FILE).exists() => util::from_jsonl(&dir.join(METRICS_FILE))?,
        _ => Vec::new(),
    };
    run(data, ckpt, cfg, out, metrics)
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

fn check_data(data: &Dataset, config: &ModelConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    let mut diff = Vec::new();
    if data.vocab.len() != config.vocab_size {
        diff.push(format!("vocab_size ({} in model, {} in vocabulary)", config.vocab_size, data.vocab.len()));
    }
    if data.feature_dim() != config.feature_dim {
        diff.push(format!("feature_dim ({} in model, {} in corpus)", config.feature_dim, data.feature_dim()));
    }
    if !diff.is_empty() {
        return Err(Error::ConfigMismatch(diff));
    }
    if data.max_text_len() > config.max_text_len {
        return Err(Error::Validation(format!(
            "longest caption has {} tokens, model allows {}",
            data.max_text_len(),
            config.max_text_len
        )));
    }
    if let Some(bad) = data
        .images
        .iter()
        .flat_map(|i| &i.regions)
        .find(|r| r.class_id as usize >= config.region_classes)
    {
        return Err(Error::Validation(format!(
            "region class {} is outside the model's {} classes",
            bad.class_id, config.region_classes
        )));
    }
    Ok(())
}

fn run(
    data: &Dataset,
    mut ckpt: Checkpoint<f32>,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut metrics: Vec<MetricsRow>,
) -> Result<TrainOutcome> {
    let policy = effective_policy(data, cfg)?;
    let schedule = NoamSchedule::new(ckpt.config().text.hidden, cfg.warmup_steps(), cfg.peak_lr);
    let mut history = Vec::new();
    let metrics_path: Option<PathBuf> = out.map(|d| d.join(METRICS_FILE));
    while (ckpt.step as usize) < cfg.steps {
        let step = ckpt.step;
        let batch = step_batch(data, &policy, cfg, step)?;
        let mut rng = seed::derived_rng(cfg.seed, &[seed::tag::DROPOUT, step]);
        let loss = ckpt.model.loss_and_grad(&batch, Some(&mut rng))?;
        let done = step + 1;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: done as usize,
                breakdown: format!("{loss:?}"),
            });
        }
        // heads without labels in this batch get no gradient
        ckpt.model.params_mut().zero_missing_grads();
        ckpt.model.params_mut().clip_grad_norm(cfg.clip_norm);
        let lr = schedule.lr(done as usize);
        adam_step(ckpt.model.params_mut(), &mut ckpt.adam, lr)?;
        ckpt.step = done;
        history.push(loss);
        if done % cfg.log_interval as u64 == 0 || done as usize == cfg.steps {
            metrics.push(MetricsRow::new(done, lr, &loss));
            if let Some(p) = &metrics_path {
                util::write_atomic(p, util::to_jsonl(&metrics)?.as_bytes())?;
            }
        }
        if let Some(dir) = out {
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval as u64 == 0 {
                ckpt.save(&dir.join(format!("checkpoint-{done:07}.bin")))?;
            }
        }
    }
    if let Some(dir) = out {
        ckpt.save(&dir.join(CHECKPOINT_FILE))?;
        if let Some(p) = &metrics_path {
            util::write_atomic(p, util::to_jsonl(&metrics)?.as_bytes())?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        metrics,
        history,
    })
}

/// Mean of `total` over a trailing window ending at each step.
pub fn moving_average(history: &[LossBreakdown], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..history.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let s: f64 = history[lo..=i].iter().map(|l| l.total).sum();
            s / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::tiny_setup;

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            seed: 3,
            warmup: Some(4),
            log_interval: 1,
            calibration_instances: 200,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let (data, mc) = tiny_setup(10);
        assert!(matches!(train(&data, &mc, &quick(0), None), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic() {
        let (data, mc) = tiny_setup(20);
        let a = train(&data, &mc, &quick(3), None).unwrap();
        let b = train(&data, &mc, &quick(3), None).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn split_run_equals_full_run() {
        let (data, mc) = tiny_setup(20);
        let full = train(&data, &mc, &quick(6), None).unwrap();
        let half = train(&data, &mc, &quick(3), None).unwrap();
        let rest = resume(half.checkpoint, &mc, &data, &quick(6), None).unwrap();
        assert_eq!(full.checkpoint.to_bytes().unwrap(), rest.checkpoint.to_bytes().unwrap());
    }

    #[test]
    fn resume_without_extra_steps_is_identity() {
        let (data, mc) = tiny_setup(10);
        let a = train(&data, &mc, &quick(2), None).unwrap();
        let bytes = a.checkpoint.to_bytes().unwrap();
        let b = resume(a.checkpoint, &mc, &data, &quick(2), None).unwrap();
        assert_eq!(bytes, b.checkpoint.to_bytes().unwrap());
        assert!(b.history.is_empty());
    }

    #[test]
    fn resume_rejects_altered_vocab_size() {
        let (data, mc) = tiny_setup(10);
        let a = train(&data, &mc, &quick(1), None).unwrap();
        let altered = ModelConfig {
            vocab_size: mc.vocab_size + 1,
            ..mc.clone()
        };
        match resume(a.checkpoint, &altered, &data, &quick(2), None) {
            Err(Error::ConfigMismatch(fields)) => assert_eq!(fields, ["vocab_size"]),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("resume accepted a mismatched config"),
        }
    }

    #[test]
    fn one_step_checkpoint_round_trips() {
        let (data, mc) = tiny_setup(10);
        let dir = tempfile::tempdir().unwrap();
        let a = train(&data, &mc, &quick(1), Some(dir.path())).unwrap();
        let loaded = Checkpoint::<f32>::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(loaded.to_bytes().unwrap(), a.checkpoint.to_bytes().unwrap());
        for (p, q) in loaded.model.params().iter().zip(a.checkpoint.model.params().iter()) {
            let bits = |t: &crate::numerics::Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p.value), bits(&q.value), "{}", p.name);
        }
        let rows: Vec<MetricsRow> = util::from_jsonl(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].step, 1);
    }

    #[test]
    fn ablation_modes_mask_equal_token_counts() {
        let (data, _) = tiny_setup(300);
        let cfg = TrainConfig {
            calibration_instances: 2000,
            ..Default::default()
        };
        let sgp = effective_policy(&data, &cfg).unwrap();
        let rnd = effective_policy(&data, &TrainConfig { mode: AblationMode::RandomOnly, ..cfg.clone() }).unwrap();
        assert_eq!(rnd.node_mask_rate, 0.0);
        let count = |policy: &MaskingPolicy| {
            let positive = MaskingPolicy { p_neg: 0.0, ..policy.clone() };
            (0..10_000u64)
                .map(|k| {
                    let i = (k as usize * 7919) % data.len();
                    data.instance(i, &positive, seed::derive(99, &[k])).unwrap().counts.masked_tokens
                })
                .sum::<usize>() as f64
        };
        let (a, b) = (count(&sgp), count(&rnd));
        assert!((a - b).abs() / a < 0.02, "sgp {a} vs random-only {b}");
    }

    #[test]
    fn itm_classes_follow_p_neg() {
        let (data, _) = tiny_setup(50);
        let cfg = TrainConfig { batch_size: 32, seed: 1, ..Default::default() };
        let mut pos = 0usize;
        let mut total = 0usize;
        for step in 0..100 {
            let b = step_batch(&data, &cfg.policy, &cfg, step).unwrap();
            pos += b.itm_labels.iter().filter(|&&p| p).count();
            total += b.size;
        }
        let neg = 1.0 - pos as f64 / total as f64;
        assert!((neg - 0.5).abs() < 0.03, "{neg}");
    }

    #[test]
    fn moving_average_window() {
        let h: Vec<LossBreakdown> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&t| LossBreakdown { total: t, ..Default::default() })
            .collect();
        assert_eq!(moving_average(&h, 2), [1.0, 1.5, 2.5, 3.5]);
    }
}
