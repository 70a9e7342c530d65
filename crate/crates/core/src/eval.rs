//! Per-instance IoU evaluation under simulated prompts.

use std::fmt::Write as _;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::PromptableModel;
use crate::prompts::{mask_iou, prompts_from_masks, PromptKind, PromptSet, PromptSource};
use crate::seed::derive_rng_for;
use crate::tensor::{binarize, sigmoid_normalize, MaskLogits};

/// Anything that turns a sample and its prompt set into one logit map per prompt.
pub trait Segmenter: Sync {
    fn segment(&self, sample: &Sample, prompts: &PromptSet) -> Result<MaskLogits>;
}

impl<M: PromptableModel> Segmenter for M {
    fn segment(&self, sample: &Sample, prompts: &PromptSet) -> Result<MaskLogits> {
        self.predict(sample.image()?, &prompts.prompts)
    }
}

/// Returns the ground-truth instance behind each prompt as saturated logits.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthOracle;

impl Segmenter for GroundTruthOracle {
    fn segment(&self, sample: &Sample, prompts: &PromptSet) -> Result<MaskLogits> {
        let (h, w) = sample.instances[0].dim();
        let mut out = Array3::zeros((prompts.prompts.len(), h, w));
        for (j, &k) in prompts.mask_indices.iter().enumerate() {
            let m = &sample.instances[k];
            out.index_axis_mut(ndarray::Axis(0), j)
                .assign(&m.0.mapv(|b| if b { 20.0 } else { -20.0 }));
        }
        Ok(MaskLogits(out))
    }
}

/// Predicts background everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptySegmenter;

impl Segmenter for EmptySegmenter {
    fn segment(&self, sample: &Sample, prompts: &PromptSet) -> Result<MaskLogits> {
        let (h, w) = sample.instances[0].dim();
        Ok(MaskLogits(Array3::from_elem(
            (prompts.prompts.len(), h, w),
            -20.0,
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub sample_id: String,
    pub instance: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    /// Weak-supervision type the evaluated weights were adapted with.
    pub train_weak_sup: Option<String>,
    pub test_prompt: PromptKind,
    pub instances: Vec<InstanceScore>,
    pub miou: f64,
    pub instance_count: usize,
    pub skipped: usize,
}

/// Arithmetic mean; zero for an empty list.
pub fn mean_iou(ious: &[f64]) -> f64 {
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Test-time prompts for one sample. The stream depends on the sample id,
/// so results do not depend on test-set order.
pub fn test_prompts(sample: &Sample, kind: PromptKind, seed: u64) -> Result<PromptSet> {
    let mut rng = derive_rng_for(seed, "eval-prompts", &sample.id);
    prompts_from_masks(&sample.instances, kind, PromptSource::WeakLabel, &mut rng)
}

/// Per-instance IoU of `binarize(sigmoid(prediction))` against ground truth.
pub fn evaluate(
    model: &dyn Segmenter,
    dataset: &str,
    test_set: &[Sample],
    kind: PromptKind,
    seed: u64,
    exec: Exec,
) -> Result<EvalReport> {
    let per_sample = exec.map(test_set, |s| -> Result<(Vec<InstanceScore>, usize)> {
        let prompts = test_prompts(s, kind, seed)?;
        if prompts.prompts.is_empty() {
            return Ok((Vec::new(), prompts.skipped));
        }
        let logits = model.segment(s, &prompts)?;
        if logits.0.dim().0 != prompts.prompts.len() {
            return Err(Error::invalid("segmenter returned the wrong number of masks"));
        }
        let pred = binarize(&sigmoid_normalize(&logits), 0.5)?;
        let scores = prompts
            .mask_indices
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                Ok(InstanceScore {
                    sample_id: s.id.clone(),
                    instance: k,
                    iou: mask_iou(&pred.instance(j), &s.instances[k])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((scores, prompts.skipped))
    });
    let mut instances = Vec::new();
    let mut skipped = 0;
    for r in per_sample {
        let (scores, sk) = r?;
        instances.extend(scores);
        skipped += sk;
    }
    instances.sort_by(|a, b| (&a.sample_id, a.instance).cmp(&(&b.sample_id, b.instance)));
    let ious: Vec<f64> = instances.iter().map(|s| s.iou).collect();
    Ok(EvalReport {
        dataset: dataset.to_string(),
        train_weak_sup: None,
        test_prompt: kind,
        miou: mean_iou(&ious),
        instance_count: instances.len(),
        instances,
        skipped,
    })
}

/// Reports for every (adapted weights, test prompt) pair, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossPromptGrid {
    pub test_prompts: Vec<PromptKind>,
    pub rows: Vec<Vec<EvalReport>>,
}

pub fn cross_prompt_matrix(
    models: &[(String, &dyn Segmenter)],
    dataset: &str,
    test_set: &[Sample],
    kinds: &[PromptKind],
    seed: u64,
    exec: Exec,
) -> Result<CrossPromptGrid> {
    let rows = models
        .iter()
        .map(|(train, m)| {
            kinds
                .iter()
                .map(|&k| {
                    let mut r = evaluate(*m, dataset, test_set, k, seed, exec)?;
                    r.train_weak_sup = Some(train.clone());
                    Ok(r)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossPromptGrid {
        test_prompts: kinds.to_vec(),
        rows,
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset      {}", self.dataset);
        let _ = writeln!(
            s,
            "weak sup     {}",
            self.train_weak_sup.as_deref().unwrap_or("-")
        );
        let _ = writeln!(s, "test prompt  {}", self.test_prompt);
        let _ = writeln!(s, "instances    {}", self.instance_count);
        let _ = writeln!(s, "skipped      {}", self.skipped);
        let _ = writeln!(s, "mIoU         {:.3}", self.miou);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,instance,iou\n");
        for i in &self.instances {
            let _ = writeln!(s, "{},{},{:?}", i.sample_id, i.instance, i.iou);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("report", e.line(), e.to_string()))
    }
}

impl CrossPromptGrid {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12}", "weak sup");
        for k in &self.test_prompts {
            let _ = write!(s, "{:>8}", k.as_str());
        }
        s.push('\n');
        for row in &self.rows {
            let name = row
                .first()
                .and_then(|r| r.train_weak_sup.clone())
                .unwrap_or_else(|| "-".into());
            let _ = write!(s, "{name:<12}");
            for r in row {
                let _ = write!(s, "{:>8.3}", r.miou);
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("train_weak_sup,test_prompt,miou,instances,skipped\n");
        for r in self.rows.iter().flatten() {
            let _ = writeln!(
                s,
                "{},{},{:?},{},{}",
                r.train_weak_sup.as_deref().unwrap_or("-"),
                r.test_prompt,
                r.miou,
                r.instance_count,
                r.skipped
            );
        }
        s
    }

    pub fn cells(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}
