//! Self-training, anchor and contrastive objectives with analytic gradients.
//!
//! Every loss comes in two forms: a value function and a `*_grad` function
//! returning the value together with the gradient with respect to its
//! differentiable inputs. Probabilities are clamped to
//! `[PROB_CLAMP, 1 - PROB_CLAMP]` before entering any logarithm; the gradient
//! is zero where the clamp is active.

use ndarray::{Array1, Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, MaskStack, ProbMask};

pub const PROB_CLAMP: f64 = 1e-7;

/// Form of the instance contrastive objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastiveForm {
    /// One log-ratio of summed positives over summed off-diagonal negatives.
    #[default]
    SetRatio,
    /// Mean per-instance InfoNCE with the positive kept in the denominator.
    PerInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub lambda_focal: f64,
    pub lambda_dice_stu: f64,
    pub lambda_dice_tea: f64,
    pub tau: f64,
    pub contrastive_form: ContrastiveForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            epsilon: 1.0,
            lambda_focal: 20.0,
            lambda_dice_stu: 0.5,
            lambda_dice_tea: 0.5,
            tau: 0.3,
            contrastive_form: ContrastiveForm::SetRatio,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::config("gamma must be >= 0"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be > 0"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("tau must be > 0"));
        }
        for (name, v) in [
            ("lambda_focal", self.lambda_focal),
            ("lambda_dice_stu", self.lambda_dice_stu),
            ("lambda_dice_tea", self.lambda_dice_tea),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Objective switches used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub self_training: bool,
    pub anchor: bool,
    pub contrastive: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            self_training: true,
            anchor: true,
            contrastive: true,
        }
    }
}

impl LossToggles {
    pub fn any(&self) -> bool {
        self.self_training || self.anchor || self.contrastive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub dice: f64,
    pub anchor: f64,
    pub contrastive: f64,
    pub total: f64,
}

fn check_shapes(a: ArrayView3<'_, f64>, b: &MaskStack, what: &str) -> Result<()> {
    if a.dim() != b.0.dim() {
        return Err(Error::invalid(format!(
            "{what}: prediction shape {:?} vs target shape {:?}",
            a.dim(),
            b.0.dim()
        )));
    }
    Ok(())
}

#[inline]
fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, false)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, false)
    } else {
        (p, true)
    }
}

#[inline]
fn focal_pixel(p: f64, positive: bool, gamma: f64) -> (f64, f64) {
    let (q, live) = clamp_prob(p);
    let (v, d) = if positive {
        let w = (1.0 - q).powf(gamma);
        let dw = if gamma == 0.0 {
            0.0
        } else {
            -gamma * (1.0 - q).powf(gamma - 1.0)
        };
        (-w * q.ln(), -(dw * q.ln() + w / q))
    } else {
        let w = q.powf(gamma);
        let dw = if gamma == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0)
        };
        let l = (1.0 - q).ln();
        (-w * l, -(dw * l - w / (1.0 - q)))
    };
    (v, if live { d } else { 0.0 })
}

/// Focal loss against a binary target: pixel-mean per prompt, summed over
/// prompts.
pub fn focal_loss(student: &ProbMask, target: &MaskStack, gamma: f64) -> Result<f64> {
    check_shapes(student.0.view(), target, "focal loss")?;
    let (_, h, w) = student.0.dim();
    let hw = (h * w) as f64;
    let mut total = 0.0;
    Zip::from(&student.0)
        .and(&target.0)
        .for_each(|&p, &t| total += focal_pixel(p, t, gamma).0);
    Ok(total / hw)
}

pub fn focal_loss_grad(student: &ProbMask, target: &MaskStack, gamma: f64) -> Result<(f64, Array3<f64>)> {
    check_shapes(student.0.view(), target, "focal loss")?;
    let (_, h, w) = student.0.dim();
    let hw = (h * w) as f64;
    let mut grad = Array3::zeros(student.0.dim());
    let mut total = 0.0;
    Zip::from(&mut grad)
        .and(&student.0)
        .and(&target.0)
        .for_each(|g, &p, &t| {
            let (v, d) = focal_pixel(p, t, gamma);
            total += v;
            *g = d / hw;
        });
    Ok((total / hw, grad))
}

/// Soft dice loss summed over prompts.
pub fn dice_loss(pred: &ProbMask, target: &MaskStack, epsilon: f64) -> Result<f64> {
    Ok(dice_loss_grad(pred, target, epsilon)?.0)
}

pub fn dice_loss_grad(pred: &ProbMask, target: &MaskStack, epsilon: f64) -> Result<(f64, Array3<f64>)> {
    check_shapes(pred.0.view(), target, "dice loss")?;
    let mut grad = Array3::zeros(pred.0.dim());
    let mut total = 0.0;
    for ((p, t), mut g) in pred
        .0
        .axis_iter(Axis(0))
        .zip(target.0.axis_iter(Axis(0)))
        .zip(grad.axis_iter_mut(Axis(0)))
    {
        let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
        Zip::from(&p).and(&t).for_each(|&p, &t| {
            let t = if t { 1.0 } else { 0.0 };
            inter += p * t;
            sp += p;
            st += t;
        });
        let num = 2.0 * inter + epsilon;
        let den = sp + st + epsilon;
        total += 1.0 - num / den;
        Zip::from(&mut g).and(&t).for_each(|g, &t| {
            let t = if t { 1.0 } else { 0.0 };
            *g = -(2.0 * t * den - num) / (den * den);
        });
    }
    Ok((total, grad))
}

/// Weighted dice of student and teacher probabilities against the anchor's
/// binarized masks.
pub fn anchor_loss(
    student: &ProbMask,
    teacher: &ProbMask,
    anchor: &MaskStack,
    lambda_stu: f64,
    lambda_tea: f64,
    epsilon: f64,
) -> Result<f64> {
    Ok(anchor_loss_grad(student, teacher, anchor, lambda_stu, lambda_tea, epsilon)?.0)
}

/// Returns `(value, d/d student, d/d teacher)`.
pub fn anchor_loss_grad(
    student: &ProbMask,
    teacher: &ProbMask,
    anchor: &MaskStack,
    lambda_stu: f64,
    lambda_tea: f64,
    epsilon: f64,
) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    let (ls, gs) = dice_loss_grad(student, anchor, epsilon)?;
    let (lt, gt) = dice_loss_grad(teacher, anchor, epsilon)?;
    Ok((
        lambda_stu * ls + lambda_tea * lt,
        gs * lambda_stu,
        gt * lambda_tea,
    ))
}

/// Mask-pooled mean of unit-normalized feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFeature(pub Array1<f64>);

/// Result of pooling: features for the instances with a non-empty pooled mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    pub features: Vec<InstanceFeature>,
    /// Prompt index of each feature.
    pub kept: Vec<usize>,
    /// Prompt indices whose pooled mask was empty.
    pub excluded: Vec<usize>,
}

/// Max-pools pixel-resolution masks onto a `grid_h x grid_w` feature grid.
/// Cell `(i, j)` covers pixel rows `[i*H/gh, (i+1)*H/gh)` (likewise columns).
pub fn downsample_masks(masks: &MaskStack, grid_h: usize, grid_w: usize) -> MaskStack {
    let (n, h, w) = masks.0.dim();
    let mut out = Array3::from_elem((n, grid_h, grid_w), false);
    for j in 0..n {
        for gy in 0..grid_h {
            let (y0, y1) = (gy * h / grid_h, ((gy + 1) * h / grid_h).max(gy * h / grid_h + 1));
            for gx in 0..grid_w {
                let (x0, x1) = (gx * w / grid_w, ((gx + 1) * w / grid_w).max(gx * w / grid_w + 1));
                let mut any = false;
                'cell: for y in y0..y1.min(h) {
                    for x in x0..x1.min(w) {
                        if masks.0[[j, y, x]] {
                            any = true;
                            break 'cell;
                        }
                    }
                }
                out[[j, gy, gx]] = any;
            }
        }
    }
    MaskStack(out)
}

fn unit_features(feat: &FeatureMap) -> (Array3<f64>, Vec<f64>) {
    let (d, h, w) = feat.data.dim();
    let mut unit = feat.data.clone();
    let mut norms = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let n = (0..d).map(|k| feat.data[[k, y, x]].powi(2)).sum::<f64>().sqrt();
            norms.push(n);
            let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
            for k in 0..d {
                unit[[k, y, x]] *= inv;
            }
        }
    }
    (unit, norms)
}

/// Pools instance features from a feature map using masks already on the
/// feature grid.
pub fn pool_instance_features(feat: &FeatureMap, masks: &MaskStack) -> Result<PooledFeatures> {
    let (d, h, w) = feat.data.dim();
    let (n, mh, mw) = masks.0.dim();
    if (mh, mw) != (h, w) {
        return Err(Error::invalid(format!(
            "pooling masks are {mh}x{mw}, feature grid is {h}x{w}"
        )));
    }
    let (unit, _) = unit_features(feat);
    let mut out = PooledFeatures {
        features: Vec::new(),
        kept: Vec::new(),
        excluded: Vec::new(),
    };
    for j in 0..n {
        let mut acc = Array1::zeros(d);
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                if masks.0[[j, y, x]] {
                    count += 1;
                    for k in 0..d {
                        acc[k] += unit[[k, y, x]];
                    }
                }
            }
        }
        if count == 0 {
            out.excluded.push(j);
        } else {
            out.features.push(InstanceFeature(acc / count as f64));
            out.kept.push(j);
        }
    }
    Ok(out)
}

/// Back-propagates gradients on pooled features (ordered as `pooled.kept`)
/// into the raw feature map.
pub fn pool_instance_features_backward(
    feat: &FeatureMap,
    masks: &MaskStack,
    kept: &[usize],
    d_features: &[Array1<f64>],
) -> Array3<f64> {
    let (d, h, w) = feat.data.dim();
    let (unit, norms) = unit_features(feat);
    let mut d_unit = Array3::<f64>::zeros((d, h, w));
    for (&j, g) in kept.iter().zip(d_features) {
        let count = masks.0.index_axis(Axis(0), j).iter().filter(|&&b| b).count() as f64;
        for y in 0..h {
            for x in 0..w {
                if masks.0[[j, y, x]] {
                    for k in 0..d {
                        d_unit[[k, y, x]] += g[k] / count;
                    }
                }
            }
        }
    }
    let mut d_feat = Array3::zeros((d, h, w));
    for y in 0..h {
        for x in 0..w {
            let n = norms[y * w + x];
            if n == 0.0 {
                continue;
            }
            let dot: f64 = (0..d).map(|k| unit[[k, y, x]] * d_unit[[k, y, x]]).sum();
            for k in 0..d {
                d_feat[[k, y, x]] = (d_unit[[k, y, x]] - unit[[k, y, x]] * dot) / n;
            }
        }
    }
    d_feat
}

/// Value and gradients of the contrastive objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutcome {
    pub value: f64,
    /// Fewer than two aligned instances: no negatives, value is 0.
    pub skipped: bool,
    pub d_anchor: Vec<Array1<f64>>,
    pub d_teacher: Vec<Array1<f64>>,
}

fn similarity(anchor: &[InstanceFeature], teacher: &[InstanceFeature], tau: f64) -> Vec<Vec<f64>> {
    anchor
        .iter()
        .map(|a| teacher.iter().map(|t| a.0.dot(&t.0) / tau).collect())
        .collect()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn contrastive_loss(
    anchor: &[InstanceFeature],
    teacher: &[InstanceFeature],
    tau: f64,
    form: ContrastiveForm,
) -> Result<ContrastiveOutcome> {
    contrastive_loss_grad(anchor, teacher, tau, form)
}

/// Contrastive objective over aligned anchor/teacher instance features.
/// Positives are same-index pairs, negatives every cross-index pair.
pub fn contrastive_loss_grad(
    anchor: &[InstanceFeature],
    teacher: &[InstanceFeature],
    tau: f64,
    form: ContrastiveForm,
) -> Result<ContrastiveOutcome> {
    if anchor.len() != teacher.len() {
        return Err(Error::invalid("contrastive lists are not aligned"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let n = anchor.len();
    let dim = anchor.first().map(|f| f.0.len()).unwrap_or(0);
    let zeros = || vec![Array1::zeros(dim); n];
    if n < 2 {
        return Ok(ContrastiveOutcome {
            value: 0.0,
            skipped: true,
            d_anchor: zeros(),
            d_teacher: zeros(),
        });
    }
    let s = similarity(anchor, teacher, tau);
    // weights[j][k]: dL/ds_jk (already in units of the scaled similarity)
    let mut weights = vec![vec![0.0; n]; n];
    let value = match form {
        ContrastiveForm::SetRatio => {
            let pos = log_sum_exp((0..n).map(|j| s[j][j]));
            let neg_iter = (0..n).flat_map(|j| (0..n).filter(move |&k| k != j).map(move |k| (j, k)));
            let neg = log_sum_exp(neg_iter.clone().map(|(j, k)| s[j][k]));
            for j in 0..n {
                weights[j][j] = -(s[j][j] - pos).exp();
            }
            for (j, k) in neg_iter {
                weights[j][k] = (s[j][k] - neg).exp();
            }
            neg - pos
        }
        ContrastiveForm::PerInstance => {
            let mut total = 0.0;
            for j in 0..n {
                let lse = log_sum_exp(s[j].iter().copied());
                total += lse - s[j][j];
                for k in 0..n {
                    weights[j][k] += (s[j][k] - lse).exp() / n as f64;
                }
                weights[j][j] -= 1.0 / n as f64;
            }
            total / n as f64
        }
    };
    let mut d_anchor = zeros();
    let mut d_teacher = zeros();
    for j in 0..n {
        for k in 0..n {
            let wjk = weights[j][k] / tau;
            if wjk != 0.0 {
                d_anchor[j].scaled_add(wjk, &teacher[k].0);
                d_teacher[k].scaled_add(wjk, &anchor[j].0);
            }
        }
    }
    Ok(ContrastiveOutcome {
        value,
        skipped: false,
        d_anchor,
        d_teacher,
    })
}

/// Raw component values before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub focal: f64,
    pub dice: f64,
    pub anchor: f64,
    pub contrastive: f64,
}

/// `λ_focal·focal + dice + anchor + contrastive`, restricted to enabled terms.
/// Disabled components are reported as 0.
pub fn total_loss(parts: LossParts, cfg: &LossConfig, toggles: LossToggles) -> Result<LossBreakdown> {
    for (name, v) in [
        ("focal", parts.focal),
        ("dice", parts.dice),
        ("anchor", parts.anchor),
        ("contrastive", parts.contrastive),
    ] {
        if !v.is_finite() {
            return Err(Error::TrainingFault {
                component: name.into(),
                detail: format!("non-finite value {v}"),
            });
        }
    }
    let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
    let focal = on(toggles.self_training, parts.focal);
    let dice = on(toggles.self_training, parts.dice);
    let anchor = on(toggles.anchor, parts.anchor);
    let contrastive = on(toggles.contrastive, parts.contrastive);
    Ok(LossBreakdown {
        focal,
        dice,
        anchor,
        contrastive,
        total: cfg.lambda_focal * focal + dice + anchor + contrastive,
    })
}
