//! Source-free adaptation: anchor, teacher and student branches trained by
//! self-training on fixed prompt sets, with anchor and contrastive
//! regularization, updating only the trainable set of the shared weights.

mod pretrain;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use pretrain::{supervised_pretrain, PretrainConfig, PretrainOutcome};

use crate::archive::{adapter_checkpoint, Archive};
use crate::augment::AugmentationPolicy;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::exec::Exec;
use crate::lora::{inject, AdaptedModel, FinetuneMode, ParamRef};
use crate::losses::{
    anchor_loss_grad, contrastive_loss_grad, dice_loss_grad, downsample_masks, focal_loss_grad,
    pool_instance_features, pool_instance_features_backward, total_loss, LossBreakdown, LossConfig,
    LossParts, LossToggles,
};
use crate::model::toy::no_adapters;
use crate::model::{Gradients, PromptableModel, ToyModel};
use crate::optim::{Adam, AdamConfig};
use crate::prompts::{
    box_from_mask, filter_masks, grid_points, nms_masks, prompts_from_masks, AutoMaskThresholds, PointPrompt,
    Prompt, PromptKind, PromptSet, PromptSource,
};
use crate::seed::derive_rng;
use crate::tensor::{binarize, sigmoid_normalize, BinaryMask, ImageTensor, MaskStack, ProbMask};

/// Where the per-image prompt set comes from during adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPrompt {
    Box,
    Point,
    Poly,
    Automated,
}

impl TrainPrompt {
    pub fn weak_kind(self) -> Option<PromptKind> {
        match self {
            TrainPrompt::Box => Some(PromptKind::Box),
            TrainPrompt::Point => Some(PromptKind::Point),
            TrainPrompt::Poly => Some(PromptKind::Poly),
            TrainPrompt::Automated => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainPrompt::Box => "box",
            TrainPrompt::Point => "point",
            TrainPrompt::Poly => "poly",
            TrainPrompt::Automated => "automated",
        }
    }
}

impl std::str::FromStr for TrainPrompt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "automated" | "auto" => Ok(TrainPrompt::Automated),
            other => Ok(match other.parse::<PromptKind>()? {
                PromptKind::Box => TrainPrompt::Box,
                PromptKind::Point => TrainPrompt::Point,
                PromptKind::Poly => TrainPrompt::Poly,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherMode {
    Shared,
    Ema,
}

impl std::str::FromStr for TeacherMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(TeacherMode::Shared),
            "ema" => Ok(TeacherMode::Ema),
            _ => Err(Error::invalid(format!("unknown teacher mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub rank: usize,
    pub epochs: usize,
    pub prompt_type: TrainPrompt,
    pub toggles: LossToggles,
    pub loss: LossConfig,
    pub finetune_mode: FinetuneMode,
    pub teacher_mode: TeacherMode,
    pub ema_momentum: f64,
    pub seed: u64,
    /// Number of weakly labeled images used; all when unset.
    pub labeled_subset_size: Option<usize>,
    /// Adapter targets; the model's default list when unset.
    pub lora_targets: Option<Vec<String>>,
    pub weak_augment: AugmentationPolicy,
    pub strong_augment: AugmentationPolicy,
    pub automated: AutoMaskThresholds,
    /// Evaluate on the held-out part after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            rank: 4,
            epochs: 10,
            prompt_type: TrainPrompt::Box,
            toggles: LossToggles::default(),
            loss: LossConfig::default(),
            finetune_mode: FinetuneMode::LORA,
            teacher_mode: TeacherMode::Shared,
            ema_momentum: 0.99,
            seed: 0,
            labeled_subset_size: None,
            lora_targets: None,
            weak_augment: AugmentationPolicy::weak(),
            strong_augment: AugmentationPolicy::strong(),
            automated: AutoMaskThresholds::default(),
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.rank == 0 {
            return Err(Error::config("batch_size and rank must be positive"));
        }
        if self.labeled_subset_size == Some(0) {
            return Err(Error::config("labeled_subset_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::config("ema_momentum must lie in [0,1)"));
        }
        self.adam().validate()?;
        self.loss.validate()?;
        self.weak_augment.validate()?;
        self.strong_augment.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Frozen anchor, shared student/teacher weights, and an optional EMA teacher.
#[derive(Debug, Clone)]
pub struct BranchSet {
    pub anchor: ToyModel,
    pub shared: AdaptedModel,
    pub ema_teacher: Option<AdaptedModel>,
}

impl BranchSet {
    /// Weights the teacher forward runs with.
    pub fn teacher(&self) -> &AdaptedModel {
        self.ema_teacher.as_ref().unwrap_or(&self.shared)
    }

    pub fn anchor_checksum(&self) -> String {
        self.anchor.params().checksum()
    }
}

pub fn build_branches(base: &ToyModel, cfg: &TrainConfig) -> Result<BranchSet> {
    cfg.validate()?;
    let targets = match (&cfg.lora_targets, cfg.finetune_mode.lora) {
        (_, false) => Vec::new(),
        (Some(t), true) => t.clone(),
        (None, true) => base.default_lora_targets(),
    };
    let shared = inject(base.clone(), &targets, cfg.rank, cfg.seed)?.with_mode(cfg.finetune_mode);
    let ema_teacher = (cfg.teacher_mode == TeacherMode::Ema).then(|| shared.clone());
    Ok(BranchSet {
        anchor: base.clone(),
        shared,
        ema_teacher,
    })
}

/// `ema ← m·ema + (1−m)·shared` on every trainable tensor.
pub fn ema_update(shared: &AdaptedModel, ema: &mut AdaptedModel, momentum: f64) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid(format!("EMA momentum {momentum} outside [0,1)")));
    }
    for r in shared.trainable_parameters() {
        let (src, dst) = match &r {
            ParamRef::Base(n) => (shared.base.params().get(n), ema.base.params_mut().get_mut(n)),
            ParamRef::AdapterA(n) => (
                shared.adapters.get(n).map(|a| &a.a),
                ema.adapters.get_mut(n).map(|a| &mut a.a),
            ),
            ParamRef::AdapterB(n) => (
                shared.adapters.get(n).map(|a| &a.b),
                ema.adapters.get_mut(n).map(|a| &mut a.b),
            ),
        };
        if let (Some(src), Some(dst)) = (src, dst) {
            dst.zip_mut_with(src, |e, &s| *e = momentum * *e + (1.0 - momentum) * s);
        }
    }
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub prompts: usize,
    pub skipped_instances: usize,
    pub skipped_samples: usize,
    pub wall_seconds: f64,
}

pub const LOG_HEADER: &str = "step,focal,dice,anchor,contrastive,total";

/// CSV with the loss columns only, so equal runs give equal bytes.
pub fn log_csv(records: &[StepRecord]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in records {
        let l = &r.loss;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, l.focal, l.dice, l.anchor, l.contrastive, l.total
        );
    }
    s
}

/// Fully automated prompts: grid points decoded by the anchor, filtered by
/// the stability score (also standing in for predicted IoU), suppressed by
/// NMS, then turned into one box per surviving mask.
pub fn automated_prompts(
    anchor: &ToyModel,
    image: &ImageTensor,
    thr: &AutoMaskThresholds,
) -> Result<PromptSet> {
    let (h, w) = (image.height(), image.width());
    let points: Vec<Prompt> = grid_points(h, w, thr.grid_stride)
        .into_iter()
        .map(|p| {
            Prompt::Points(PointPrompt {
                positives: vec![p],
                negatives: vec![],
            })
        })
        .collect();
    let logits = anchor.predict(image, &points)?;
    let views: Vec<_> = logits.0.outer_iter().collect();
    let scores: Vec<f64> = views
        .iter()
        .map(|v| crate::prompts::stability_score(v.view(), thr.stability_offset))
        .collect();
    let kept = filter_masks(&scores, &views, thr);
    let masks: Vec<BinaryMask> = kept
        .iter()
        .map(|&j| BinaryMask(logits.0.index_axis(ndarray::Axis(0), j).mapv(|v| v > 0.0)))
        .collect();
    let kept_scores: Vec<f64> = kept.iter().map(|&j| scores[j]).collect();
    let survivors = nms_masks(&masks, &kept_scores, thr.nms_iou);
    let mut prompts = Vec::new();
    let mut mask_indices = Vec::new();
    for k in survivors {
        if let Ok(b) = box_from_mask(&masks[k]) {
            prompts.push(Prompt::Box(b));
            mask_indices.push(kept[k]);
        }
    }
    Ok(PromptSet {
        prompts,
        source: PromptSource::Automated,
        mask_indices,
        skipped: 0,
    })
}

/// Prompt set for one sample in one epoch. Points are redrawn per epoch;
/// boxes, polygons and automated prompts do not depend on the epoch.
pub fn training_prompts(
    sample: &Sample,
    sample_index: usize,
    epoch: usize,
    anchor: &ToyModel,
    cfg: &TrainConfig,
) -> Result<PromptSet> {
    match cfg.prompt_type.weak_kind() {
        Some(kind) => {
            let epoch_key = if kind == PromptKind::Point {
                epoch as u64
            } else {
                0
            };
            let mut rng = derive_rng(cfg.seed, "train-prompts", &[sample_index as u64, epoch_key]);
            prompts_from_masks(&sample.instances, kind, PromptSource::WeakLabel, &mut rng)
        }
        None => automated_prompts(anchor, sample.image()?, &cfg.automated),
    }
}

struct SampleOutcome {
    grads: Gradients,
    loss: LossBreakdown,
    prompts: usize,
}

fn logit_grad(prob: &ProbMask, d_prob: &Array3<f64>) -> Array3<f64> {
    d_prob * &prob.0.mapv(|p| p * (1.0 - p))
}

fn feature_rows(d_map: &Array3<f64>) -> Array2<f64> {
    let (d, gh, gw) = d_map.dim();
    Array2::from_shape_fn((gh * gw, d), |(c, k)| d_map[[k, c / gw, c % gw]])
}

/// Loss and gradients for one image and its fixed prompt set.
fn sample_gradients(
    branches: &BranchSet,
    cfg: &TrainConfig,
    image: &ImageTensor,
    prompts: &PromptSet,
    rng_weak: &mut ChaCha8Rng,
    rng_strong: &mut ChaCha8Rng,
) -> Result<SampleOutcome> {
    let x_weak = cfg.weak_augment.apply(image, rng_weak);
    let x_strong = cfg.strong_augment.apply(image, rng_strong);
    let p = &prompts.prompts;
    let shared = &branches.shared;
    let teacher_model = branches.teacher();
    let anchor = branches.anchor.forward(&x_weak, p, no_adapters())?;
    let teacher = teacher_model.base.forward(&x_weak, p, &teacher_model.adapters)?;
    let student = shared.base.forward(&x_strong, p, &shared.adapters)?;

    let m_anchor = sigmoid_normalize(&anchor.logits);
    let m_teacher = sigmoid_normalize(&teacher.logits);
    let m_student = sigmoid_normalize(&student.logits);
    let anchor_bin = binarize(&m_anchor, 0.5)?;
    let teacher_bin = binarize(&m_teacher, 0.5)?;

    let toggles = cfg.toggles;
    let lc = &cfg.loss;
    let mut parts = LossParts::default();
    let mut d_student = Array3::zeros(m_student.0.dim());
    let mut d_teacher = Array3::zeros(m_teacher.0.dim());
    let mut d_teacher_feat = None;
    if toggles.self_training {
        let (f, gf) = focal_loss_grad(&m_student, &teacher_bin, lc.gamma)?;
        let (d, gd) = dice_loss_grad(&m_student, &teacher_bin, lc.epsilon)?;
        parts.focal = f;
        parts.dice = d;
        d_student.scaled_add(lc.lambda_focal, &gf);
        d_student += &gd;
    }
    if toggles.anchor {
        let (v, gs, gt) = anchor_loss_grad(
            &m_student,
            &m_teacher,
            &anchor_bin,
            lc.lambda_dice_stu,
            lc.lambda_dice_tea,
            lc.epsilon,
        )?;
        parts.anchor = v;
        d_student += &gs;
        d_teacher += &gt;
    }
    if toggles.contrastive {
        let g = branches.anchor.config().grid();
        let fa = branches.anchor.rows_to_feature_map(&anchor.features);
        let ft = teacher_model.base.rows_to_feature_map(&teacher.features);
        let ma = downsample_masks(&anchor_bin, g, g);
        let mt = downsample_masks(&teacher_bin, g, g);
        let pa = pool_instance_features(&fa, &ma)?;
        let pt = pool_instance_features(&ft, &mt)?;
        let common: Vec<usize> = pa.kept.iter().copied().filter(|j| pt.kept.contains(j)).collect();
        let pick = |pool: &crate::losses::PooledFeatures| {
            common
                .iter()
                .map(|j| pool.features[pool.kept.iter().position(|k| k == j).unwrap()].clone())
                .collect::<Vec<_>>()
        };
        let out = contrastive_loss_grad(&pick(&pa), &pick(&pt), lc.tau, lc.contrastive_form)?;
        parts.contrastive = out.value;
        if !out.skipped {
            let d_map = pool_instance_features_backward(&ft, &mt, &common, &out.d_teacher);
            d_teacher_feat = Some(feature_rows(&d_map));
        }
    }
    let loss = total_loss(parts, lc, toggles)?;
    let ad = &shared.adapters;
    let mut grads = shared
        .base
        .backward(&student, &logit_grad(&m_student, &d_student), None, ad);
    // The EMA teacher is a constant target: no gradient flows through it.
    if branches.ema_teacher.is_none() && (toggles.anchor || d_teacher_feat.is_some()) {
        let gt = shared.base.backward(
            &teacher,
            &logit_grad(&m_teacher, &d_teacher),
            d_teacher_feat.as_ref(),
            ad,
        );
        grads.add_assign(&gt);
    }
    Ok(SampleOutcome {
        grads,
        loss,
        prompts: p.len(),
    })
}

/// One batch entry: the sample, its dataset index and its prompt set.
pub struct BatchItem<'a> {
    pub sample: &'a Sample,
    pub index: usize,
    pub prompts: &'a PromptSet,
}

/// Computes the batch loss on a consistent weight snapshot (branch forwards
/// may run in parallel), then applies a single optimizer update.
pub fn adaptation_step(
    batch: &[BatchItem<'_>],
    branches: &mut BranchSet,
    cfg: &TrainConfig,
    optimizer: &mut Adam,
    step: usize,
    epoch: usize,
    exec: Exec,
) -> Result<StepRecord> {
    let start = Instant::now();
    let usable: Vec<&BatchItem<'_>> = batch.iter().filter(|b| !b.prompts.prompts.is_empty()).collect();
    let skipped_samples = batch.len() - usable.len();
    for b in batch.iter().filter(|b| b.prompts.prompts.is_empty()) {
        log::warn!("sample `{}` has no usable prompt; skipped", b.sample.id);
    }
    let skipped_instances = usable.iter().map(|b| b.prompts.skipped).sum();
    let mut record = StepRecord {
        step,
        epoch,
        loss: LossBreakdown::default(),
        prompts: 0,
        skipped_instances,
        skipped_samples,
        wall_seconds: 0.0,
    };
    if usable.is_empty() {
        record.wall_seconds = start.elapsed().as_secs_f64();
        return Ok(record);
    }
    let snapshot: &BranchSet = branches;
    let outcomes = exec.map(&usable, |b| -> Result<SampleOutcome> {
        let key = [epoch as u64, step as u64, b.index as u64];
        let mut rw = derive_rng(cfg.seed, "weak-aug", &key);
        let mut rs = derive_rng(cfg.seed, "strong-aug", &key);
        sample_gradients(snapshot, cfg, b.sample.image()?, b.prompts, &mut rw, &mut rs)
    });
    let mut grads = Gradients::zeros(&branches.shared.base, &branches.shared.adapters);
    let n = outcomes.len() as f64;
    for o in outcomes {
        let o = o?;
        grads.add_assign(&o.grads);
        let (l, acc) = (&o.loss, &mut record.loss);
        acc.focal += l.focal / n;
        acc.dice += l.dice / n;
        acc.anchor += l.anchor / n;
        acc.contrastive += l.contrastive / n;
        acc.total += l.total / n;
        record.prompts += o.prompts;
    }
    if cfg.toggles.any() {
        grads.scale(1.0 / n);
        optimizer.step(&mut branches.shared, &grads);
        if let Some(ema) = branches.ema_teacher.as_mut() {
            ema_update(&branches.shared, ema, cfg.ema_momentum)?;
        }
    }
    record.wall_seconds = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Everything produced by one adaptation run.
#[derive(Debug, Clone)]
pub struct AdaptationOutcome {
    pub last: AdaptedModel,
    /// Weights with the best held-out mIoU (the last ones without held-out data).
    pub best: AdaptedModel,
    pub best_epoch: usize,
    pub log: Vec<StepRecord>,
    /// Held-out mIoU before adaptation and after each epoch.
    pub heldout_miou: Vec<f64>,
    pub anchor_checksum: String,
}

impl AdaptationOutcome {
    pub fn checkpoint(&self, model: &AdaptedModel, cfg: &TrainConfig) -> Archive {
        let mut extra = BTreeMap::new();
        extra.insert("weak_sup".to_string(), cfg.prompt_type.as_str().to_string());
        extra.insert("seed".to_string(), cfg.seed.to_string());
        adapter_checkpoint(model, &extra)
    }
}

/// Indices of the weakly labeled subset, drawn once from the seed.
pub fn labeled_subset(n: usize, size: Option<usize>, seed: u64) -> Result<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(k) = size {
        if k > n {
            return Err(Error::invalid(format!(
                "subset of {k} requested from {n} samples"
            )));
        }
        idx.shuffle(&mut derive_rng(seed, "subset", &[]));
        idx.truncate(k);
        idx.sort_unstable();
    }
    Ok(idx)
}

/// Runs the full adaptation loop.
pub fn run_adaptation(
    base: &ToyModel,
    adapt_set: &[Sample],
    heldout: Option<&[Sample]>,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<AdaptationOutcome> {
    if adapt_set.is_empty() {
        return Err(Error::invalid("empty adaptation set"));
    }
    let mut branches = build_branches(base, cfg)?;
    let anchor_checksum = branches.anchor_checksum();
    let mut optimizer = Adam::new(cfg.adam())?;
    let subset = labeled_subset(adapt_set.len(), cfg.labeled_subset_size, cfg.seed)?;
    let eval_kind = cfg.prompt_type.weak_kind().unwrap_or(PromptKind::Box);
    let heldout_score = |m: &AdaptedModel| -> Result<Option<f64>> {
        match heldout {
            Some(h) if cfg.eval_each_epoch && !h.is_empty() => {
                Ok(Some(evaluate(m, "heldout", h, eval_kind, cfg.seed, exec)?.miou))
            }
            _ => Ok(None),
        }
    };
    let mut heldout_miou = Vec::new();
    let mut best = (branches.shared.clone(), f64::NEG_INFINITY, 0);
    if let Some(s) = heldout_score(&branches.shared)? {
        heldout_miou.push(s);
        best.1 = s;
    }
    // Prompts that do not change across epochs are built once.
    let cached: Option<Vec<PromptSet>> = if cfg.prompt_type == TrainPrompt::Point {
        None
    } else {
        Some(
            exec.map(&subset, |&i| {
                training_prompts(&adapt_set[i], i, 0, &branches.anchor, cfg)
            })
            .into_iter()
            .collect::<Result<_>>()?,
        )
    };
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let prompts: Vec<PromptSet> = match &cached {
            Some(c) => c.clone(),
            None => exec
                .map(&subset, |&i| {
                    training_prompts(&adapt_set[i], i, epoch, &branches.anchor, cfg)
                })
                .into_iter()
                .collect::<Result<_>>()?,
        };
        let mut order: Vec<usize> = (0..subset.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, "order", &[epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&k| BatchItem {
                    sample: &adapt_set[subset[k]],
                    index: subset[k],
                    prompts: &prompts[k],
                })
                .collect();
            let rec = adaptation_step(&batch, &mut branches, cfg, &mut optimizer, step, epoch, exec)?;
            log::debug!("epoch {epoch} step {step} total {:.5}", rec.loss.total);
            log.push(rec);
            step += 1;
        }
        if let Some(s) = heldout_score(&branches.shared)? {
            log::info!("epoch {epoch}: held-out mIoU {s:.4}");
            heldout_miou.push(s);
            if s > best.1 {
                best = (branches.shared.clone(), s, epoch + 1);
            }
        }
    }
    if branches.anchor_checksum() != anchor_checksum {
        return Err(Error::TrainingFault {
            component: "anchor".into(),
            detail: "anchor weights changed during adaptation".into(),
        });
    }
    let last = branches.shared;
    let (best, best_epoch) = if best.1.is_finite() {
        (best.0, best.2)
    } else {
        (last.clone(), cfg.epochs)
    };
    Ok(AdaptationOutcome {
        last,
        best,
        best_epoch,
        log,
        heldout_miou,
        anchor_checksum,
    })
}

/// Binary masks of the ground truth as a stack (helper for tests and tools).
pub fn gt_stack(sample: &Sample, prompts: &PromptSet) -> MaskStack {
    let picked: Vec<BinaryMask> = prompts
        .mask_indices
        .iter()
        .map(|&k| sample.instances[k].clone())
        .collect();
    MaskStack::from_instances(&picked).expect("instances share one shape")
}
