//! Supervised training of the toy backend on a labeled source domain.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lora::{AdaptedModel, FinetuneMode, ParamRef};
use crate::losses::{dice_loss_grad, focal_loss_grad, LossConfig};
use crate::model::toy::no_adapters;
use crate::model::{Gradients, ToyModel};
use crate::optim::{Adam, AdamConfig};
use crate::prompts::{prompts_from_masks, PromptKind, PromptSource};
use crate::seed::derive_rng;
use crate::tensor::sigmoid_normalize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Prompt kinds drawn uniformly per image and step.
    pub prompt_kinds: Vec<PromptKind>,
    pub augment: AugmentationPolicy,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 4,
            learning_rate: 2e-3,
            prompt_kinds: PromptKind::ALL.to_vec(),
            augment: AugmentationPolicy::weak(),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: ToyModel,
    /// Mean supervised loss per step.
    pub losses: Vec<f64>,
}

/// Trains every parameter (encoder, prompt encoder, decoder) against the
/// ground-truth masks with the focal and dice terms.
pub fn supervised_pretrain(
    model: ToyModel,
    samples: &[Sample],
    cfg: &PretrainConfig,
    exec: Exec,
) -> Result<PretrainOutcome> {
    if samples.is_empty() || cfg.prompt_kinds.is_empty() || cfg.batch_size == 0 {
        return Err(Error::invalid(
            "pretraining needs samples, prompt kinds and a batch size",
        ));
    }
    let mut optimizer = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        ..AdamConfig::default()
    })?;
    let refs: Vec<ParamRef> = model
        .params()
        .names()
        .map(|n| ParamRef::Base(n.to_string()))
        .collect();
    let mut holder = AdaptedModel {
        base: model,
        adapters: Default::default(),
        mode: FinetuneMode::default(),
        rank: 0,
    };
    let lc = cfg.loss;
    let mut losses = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, "pretrain-order", &[epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let model = &holder.base;
            let outcomes = exec.map(chunk, |&i| -> Result<Option<(Gradients, f64)>> {
                let mut rng = derive_rng(cfg.seed, "pretrain", &[step, i as u64]);
                let kind = cfg.prompt_kinds[rng.random_range(0..cfg.prompt_kinds.len())];
                let s = &samples[i];
                let prompts = prompts_from_masks(&s.instances, kind, PromptSource::WeakLabel, &mut rng)?;
                if prompts.prompts.is_empty() {
                    return Ok(None);
                }
                let image = cfg.augment.apply(s.image()?, &mut rng);
                let target = super::gt_stack(s, &prompts);
                let pass = model.forward(&image, &prompts.prompts, no_adapters())?;
                let prob = sigmoid_normalize(&pass.logits);
                let (f, gf) = focal_loss_grad(&prob, &target, lc.gamma)?;
                let (d, gd) = dice_loss_grad(&prob, &target, lc.epsilon)?;
                let d_prob: Array3<f64> = gf * lc.lambda_focal + gd;
                let d_logits = d_prob * prob.0.mapv(|p| p * (1.0 - p));
                let g = model.backward(&pass, &d_logits, None, no_adapters());
                Ok(Some((g, lc.lambda_focal * f + d)))
            });
            let mut grads = Gradients::zeros(&holder.base, &holder.adapters);
            let (mut total, mut n) = (0.0, 0usize);
            for o in outcomes {
                if let Some((g, l)) = o? {
                    grads.add_assign(&g);
                    total += l;
                    n += 1;
                }
            }
            if n > 0 {
                grads.scale(1.0 / n as f64);
                optimizer.step_refs(&mut holder, &refs, &grads);
                losses.push(total / n as f64);
            }
            step += 1;
        }
    }
    Ok(PretrainOutcome {
        model: holder.base,
        losses,
    })
}
