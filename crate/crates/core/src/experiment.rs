//! The clean-to-corrupted toy pipeline: train a toy model on clean blobs,
//! measure it on a corrupted rendering, then adapt it with weak labels.

use serde::{Deserialize, Serialize};

use crate::adapt::{run_adaptation, supervised_pretrain, AdaptationOutcome, PretrainConfig, TrainConfig};
use crate::data::{make_toy_domain_with, split, Sample, ToyDomainConfig, ToyKind};
use crate::error::Result;
use crate::eval::evaluate;
use crate::exec::Exec;
use crate::model::{ToyConfig, ToyModel};

/// Sizes and settings of one toy experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyExperiment {
    pub seed: u64,
    pub clean_images: usize,
    /// Corrupted images used for adaptation.
    pub adapt_images: usize,
    /// Corrupted images held out for scoring.
    pub heldout_images: usize,
    pub domain: ToyDomainConfig,
    pub model: ToyConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl Default for ToyExperiment {
    fn default() -> Self {
        Self {
            seed: 0,
            clean_images: 200,
            adapt_images: 200,
            heldout_images: 50,
            domain: ToyDomainConfig::default(),
            model: ToyConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Data drawn for an experiment; every set has its own stream.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub clean: Vec<Sample>,
    pub adapt: Vec<Sample>,
    pub heldout: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct ToyResult {
    /// Held-out mIoU of the unadapted model.
    pub direct_miou: f64,
    /// Held-out mIoU of the weights after the final epoch.
    pub adapted_miou: f64,
    pub outcome: AdaptationOutcome,
}

impl ToyExperiment {
    /// The same experiment with every seed replaced.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn data(&self) -> Result<ToyData> {
        let clean = make_toy_domain_with(&self.domain, ToyKind::Clean, self.clean_images, 1000 + self.seed)?;
        let total = self.adapt_images + self.heldout_images;
        let corrupted = make_toy_domain_with(&self.domain, ToyKind::Corrupted, total, 2000 + self.seed)?;
        let ratio = self.adapt_images as f64 / total as f64;
        let (adapt, heldout) = split(&corrupted, ratio, self.seed)?;
        Ok(ToyData {
            clean,
            adapt,
            heldout,
        })
    }

    /// Supervised training on the clean rendering.
    pub fn pretrain_base(&self, data: &ToyData, exec: Exec) -> Result<ToyModel> {
        let init = ToyModel::with_config(self.model.clone(), self.seed)?;
        Ok(supervised_pretrain(init, &data.clean, &self.pretrain, exec)?.model)
    }

    /// Adapts `base` on the corrupted split and scores both ends on the
    /// held-out split with the weak-supervision prompt kind.
    pub fn adapt(&self, base: &ToyModel, data: &ToyData, exec: Exec) -> Result<ToyResult> {
        let outcome = run_adaptation(base, &data.adapt, Some(&data.heldout), &self.train, exec)?;
        let kind = self
            .train
            .prompt_type
            .weak_kind()
            .unwrap_or(crate::prompts::PromptKind::Box);
        let score = |m: &dyn crate::eval::Segmenter| -> Result<f64> {
            Ok(evaluate(m, "toy-heldout", &data.heldout, kind, self.train.seed, exec)?.miou)
        };
        let direct_miou = score(base)?;
        let adapted_miou = score(&outcome.last)?;
        Ok(ToyResult {
            direct_miou,
            adapted_miou,
            outcome,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_sizes_and_seed_propagation() {
        let exp = ToyExperiment {
            clean_images: 3,
            adapt_images: 4,
            heldout_images: 2,
            ..ToyExperiment::default()
        }
        .with_seed(9);
        assert_eq!((exp.pretrain.seed, exp.train.seed), (9, 9));
        let d = exp.data().unwrap();
        assert_eq!((d.clean.len(), d.adapt.len(), d.heldout.len()), (3, 4, 2));
    }
}
