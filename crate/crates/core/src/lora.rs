//! Low-rank adapters over encoder weights.
//!
//! A wrapped weight `θ ∈ R^{d_i×d_o}` is used as `θ + A·B` with
//! `A ∈ R^{d_i×r}` and `B ∈ R^{r×d_o}`. `B` starts at zero so a freshly
//! injected model reproduces its base exactly. No extra scale is applied.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::toy::ToyModel;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target_id: String,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

pub type AdapterSet = BTreeMap<String, LoraAdapter>;

impl LoraAdapter {
    /// `A ~ N(0, 1/r)`, `B = 0`.
    pub fn new(
        target_id: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::invalid(format!(
                "rank {rank} outside [1, {}] for a {d_in}x{d_out} weight",
                d_in.min(d_out)
            )));
        }
        let normal = Normal::new(0.0, (1.0 / rank as f64).sqrt()).expect("valid std");
        let a = Array2::from_shape_fn((d_in, rank), |_| normal.sample(rng));
        Ok(Self {
            target_id: target_id.into(),
            a,
            b: Array2::zeros((rank, d_out)),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.a.nrows(), self.b.ncols())
    }

    pub fn delta(&self) -> Array2<f64> {
        self.a.dot(&self.b)
    }

    pub fn num_scalars(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Adapter-path product `x·θ + (x·A)·B` without materializing `θ + AB`.
    pub fn forward(&self, x: &Array2<f64>, base_weight: &Array2<f64>) -> Array2<f64> {
        x.dot(base_weight) + x.dot(&self.a).dot(&self.b)
    }
}

/// `θ + A·B`.
pub fn merge(adapter: &LoraAdapter, base_weight: &Array2<f64>) -> Result<Array2<f64>> {
    if base_weight.dim() != adapter.shape() {
        return Err(Error::invalid(format!(
            "adapter `{}` is {:?}, base weight is {:?}",
            adapter.target_id,
            adapter.shape(),
            base_weight.dim()
        )));
    }
    Ok(base_weight + &adapter.delta())
}

/// Fraction of scalars an adapter needs relative to its weight:
/// `r (d_i + d_o) / (d_i d_o)`.
pub fn compression_ratio(d_in: usize, d_out: usize, rank: usize) -> f64 {
    (rank * (d_in + d_out)) as f64 / (d_in * d_out) as f64
}

/// Which parameter groups are trainable during adaptation. Groups combine
/// with `+`, e.g. `lora+decoder`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FinetuneMode {
    pub lora: bool,
    pub decoder: bool,
    pub layernorm: bool,
    pub full: bool,
    /// Patch-embedding tuning (embedding-level visual prompt style).
    pub embed: bool,
}

impl FinetuneMode {
    pub const LORA: FinetuneMode = FinetuneMode {
        lora: true,
        decoder: false,
        layernorm: false,
        full: false,
        embed: false,
    };

    pub fn uses_adapters(&self) -> bool {
        self.lora
    }
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut mode = FinetuneMode::default();
        for part in s.split('+').map(str::trim) {
            match part {
                "lora" => mode.lora = true,
                "decoder" => mode.decoder = true,
                "layernorm" => mode.layernorm = true,
                "full" => mode.full = true,
                "embed" | "evp" => mode.embed = true,
                other => return Err(Error::config(format!("unknown finetune component `{other}`"))),
            }
        }
        if mode == FinetuneMode::default() {
            return Err(Error::config("empty finetune mode"));
        }
        Ok(mode)
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.lora, "lora"),
            (self.decoder, "decoder"),
            (self.layernorm, "layernorm"),
            (self.full, "full"),
            (self.embed, "embed"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        f.write_str(&parts.join("+"))
    }
}

impl TryFrom<String> for FinetuneMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FinetuneMode> for String {
    fn from(m: FinetuneMode) -> String {
        m.to_string()
    }
}

/// Reference to one trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamRef {
    Base(String),
    AdapterA(String),
    AdapterB(String),
}

/// Base model, its adapters and the trainable-set policy.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub base: ToyModel,
    pub adapters: AdapterSet,
    pub mode: FinetuneMode,
    pub rank: usize,
}

/// Wraps `targets` of the base encoder with fresh rank-`rank` adapters.
pub fn inject(model: ToyModel, targets: &[String], rank: usize, seed: u64) -> Result<AdaptedModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = AdapterSet::new();
    for t in targets {
        if !model.is_adaptable(t) {
            return Err(Error::config(format!(
                "`{t}` is not an adaptable 2-D encoder weight"
            )));
        }
        let (d_in, d_out) = model.params().expect(t).dim();
        adapters.insert(
            t.clone(),
            LoraAdapter::new(t.clone(), d_in, d_out, rank, &mut rng)?,
        );
    }
    Ok(AdaptedModel {
        base: model,
        adapters,
        mode: FinetuneMode::LORA,
        rank,
    })
}

impl AdaptedModel {
    pub fn with_mode(mut self, mode: FinetuneMode) -> Self {
        self.mode = mode;
        self
    }

    /// Base model with every adapter folded into its weight.
    pub fn merged(&self) -> Result<ToyModel> {
        let mut out = self.base.clone();
        for (t, a) in &self.adapters {
            let merged = merge(a, self.base.params().require(t)?)?;
            out.params_mut().insert(t.clone(), merged);
        }
        Ok(out)
    }

    /// Tensors the optimizer may update under the current mode.
    pub fn trainable_parameters(&self) -> Vec<ParamRef> {
        let mut out = Vec::new();
        if self.mode.lora {
            for t in self.adapters.keys() {
                out.push(ParamRef::AdapterA(t.clone()));
                out.push(ParamRef::AdapterB(t.clone()));
            }
        }
        for name in self.base.params().names() {
            let is_encoder = name.starts_with("encoder.");
            let take = (self.mode.full && is_encoder)
                || (self.mode.decoder && name.starts_with("decoder."))
                || (self.mode.layernorm && is_encoder && name.contains("norm"))
                || (self.mode.embed && name.starts_with("encoder.patch_embed."));
            if take {
                out.push(ParamRef::Base(name.to_string()));
            }
        }
        out
    }

    /// Checksum of the base tensors this mode leaves untouched.
    pub fn base_checksum_untuned(&self) -> String {
        let tuned: Vec<String> = self
            .trainable_parameters()
            .into_iter()
            .filter_map(|r| match r {
                ParamRef::Base(n) => Some(n),
                _ => None,
            })
            .collect();
        self.base
            .params()
            .checksum_filtered(|n| !tuned.iter().any(|t| t == n))
    }

    pub fn count_scalars(&self, refs: &[ParamRef]) -> usize {
        refs.iter()
            .map(|r| match r {
                ParamRef::Base(n) => self.base.params().get(n).map_or(0, |t| t.len()),
                ParamRef::AdapterA(n) => self.adapters.get(n).map_or(0, |a| a.a.len()),
                ParamRef::AdapterB(n) => self.adapters.get(n).map_or(0, |a| a.b.len()),
            })
            .sum()
    }
}
