//! Desk-scale promptable segmenter.
//!
//! Encoder: patch embedding, then attention-free blocks of (neighbourhood token
//! mixing, channel MLP), each pre-normalized with a residual, then a neck
//! normalization. Prompt encoder: a dense prior map per prompt with a learned
//! per-kind scale and shift. Decoder: per-cell score from a hidden projection
//! plus a similarity term against the mean feature of the prompted region,
//! bilinearly upsampled to pixels and added to the prompt prior.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    add_row, bilinear_matrix, column_sums, gelu, gelu_grad, layer_norm, layer_norm_backward,
    neighbour_matrix, NormCache,
};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::prompts::{Prompt, PromptKind};
use crate::tensor::{FeatureMap, ImageTensor, MaskLogits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub mlp_dim: usize,
    pub decoder_dim: usize,
    pub blocks: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Gaussian radius (pixels) of point-prompt bumps.
    pub point_sigma: f64,
    /// Multiplier on the patch-embedding initialization scale.
    pub embed_init_scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            patch_size: 4,
            feature_dim: 32,
            mlp_dim: 32,
            decoder_dim: 32,
            blocks: 2,
            mean: [0.5; 3],
            std: [0.25; 3],
            point_sigma: 4.0,
            embed_init_scale: 1.0,
        }
    }
}

impl ToyConfig {
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "input size {} is not a multiple of patch size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.feature_dim < 4 {
            return Err(Error::config("feature_dim must be >= 4"));
        }
        if self.mlp_dim == 0 || self.decoder_dim == 0 {
            return Err(Error::config("hidden sizes must be positive"));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("normalization std must be positive"));
        }
        Ok(())
    }
}

/// Promptable segmentation interface: encode once, decode per prompt set.
pub trait PromptableModel: Sync {
    fn input_size(&self) -> usize;
    fn encode_image(&self, image: &ImageTensor) -> Result<FeatureMap>;
    fn decode_masks(&self, feat: &FeatureMap, prompts: &[Prompt]) -> Result<MaskLogits>;

    fn predict(&self, image: &ImageTensor, prompts: &[Prompt]) -> Result<MaskLogits> {
        let feat = self.encode_image(image)?;
        self.decode_masks(&feat, prompts)
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyConfig,
    params: ParamStore,
    neighbour: Array2<f64>,
    upsample: Array2<f64>,
}

pub(crate) struct LinearCache {
    input: Array2<f64>,
    lora_hidden: Option<Array2<f64>>,
}

struct BlockCache {
    norm1: NormCache,
    mix: LinearCache,
    norm2: NormCache,
    fc1: LinearCache,
    fc1_pre: Array2<f64>,
    fc2: LinearCache,
}

/// Activations kept for the encoder backward pass.
pub struct EncoderCache {
    patch: LinearCache,
    blocks: Vec<BlockCache>,
    neck: NormCache,
}

/// Prompt after the prompt encoder: dense prior and pooled region.
#[derive(Debug, Clone)]
pub struct EncodedPrompt {
    pub kind: PromptKind,
    pub prior: Array2<f64>,
    pub region: Vec<usize>,
}

/// Activations kept for the decoder backward pass.
pub struct DecoderCache {
    features: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    prompts: Vec<EncodedPrompt>,
    queries: Vec<Array1<f64>>,
}

/// Gradients for base parameters and adapter factors.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamStore,
    pub adapters: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl Gradients {
    pub fn zeros(model: &ToyModel, adapters: &AdapterSet) -> Self {
        Self {
            params: model.params.zeros_like(),
            adapters: adapters
                .iter()
                .map(|(k, a)| (k.clone(), (Array2::zeros(a.a.dim()), Array2::zeros(a.b.dim()))))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.params.add_assign(&other.params);
        for (k, (da, db)) in &mut self.adapters {
            if let Some((oa, ob)) = other.adapters.get(k) {
                *da += oa;
                *db += ob;
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        self.params.scale(f);
        for (da, db) in self.adapters.values_mut() {
            da.mapv_inplace(|x| x * f);
            db.mapv_inplace(|x| x * f);
        }
    }

    fn accumulate(&mut self, name: &str, g: &Array2<f64>) {
        if let Some(t) = self.params.get_mut(name) {
            *t += g;
        }
    }
}

fn block_name(i: usize, leaf: &str) -> String {
    format!("encoder.blocks.{i}.{leaf}")
}

const PATCH_EMBED: &str = "encoder.patch_embed";
const NECK: &str = "encoder.neck_norm";

impl ToyModel {
    /// Seeded toy backend with the default architecture.
    pub fn build(seed: u64, feature_dim: usize) -> Result<Self> {
        Self::with_config(
            ToyConfig {
                feature_dim,
                mlp_dim: feature_dim,
                decoder_dim: feature_dim,
                ..ToyConfig::default()
            },
            seed,
        )
    }

    pub fn with_config(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.feature_dim;
        let p_in = 3 * config.patch_size * config.patch_size;
        let mut dense = |params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| {
            let gain = if name == PATCH_EMBED {
                config.embed_init_scale
            } else {
                1.0
            };
            let normal = Normal::new(0.0, gain * (1.0 / fan_in as f64).sqrt()).expect("valid std");
            params.insert(
                format!("{name}.weight"),
                Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(&mut rng)),
            );
            params.insert(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        };
        dense(&mut params, PATCH_EMBED, p_in, d);
        for i in 0..config.blocks {
            dense(&mut params, &block_name(i, "token_mix"), d, d);
            dense(&mut params, &block_name(i, "mlp.fc1"), d, config.mlp_dim);
            dense(&mut params, &block_name(i, "mlp.fc2"), config.mlp_dim, d);
        }
        dense(&mut params, "decoder.hidden", d, config.decoder_dim);
        dense(&mut params, "decoder.out", config.decoder_dim, 1);
        dense(&mut params, "decoder.sim", d, 1);
        params.get_mut("decoder.sim.weight").unwrap().fill(0.0);
        let norm = |params: &mut ParamStore, name: &str| {
            params.insert(format!("{name}.weight"), Array2::ones((1, d)));
            params.insert(format!("{name}.bias"), Array2::zeros((1, d)));
        };
        for i in 0..config.blocks {
            norm(&mut params, &block_name(i, "norm1"));
            norm(&mut params, &block_name(i, "norm2"));
        }
        norm(&mut params, NECK);
        params.insert("prompt_encoder.scale", Array2::from_elem((1, 3), 2.0));
        params.insert("prompt_encoder.shift", Array2::zeros((1, 3)));
        Self::from_params(config, params)
    }

    /// Rebuilds a model from stored parameters, checking every expected tensor.
    pub fn from_params(config: ToyConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::shapes(&config);
        for (name, shape) in &reference {
            match params.get(name) {
                Some(t) if t.dim() == *shape => {}
                Some(t) => {
                    return Err(Error::config(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.dim()
                    )))
                }
                None => return Err(Error::config(format!("missing parameter `{name}`"))),
            }
        }
        if params.len() != reference.len() {
            return Err(Error::config("unexpected extra parameters"));
        }
        let g = config.grid();
        Ok(Self {
            neighbour: neighbour_matrix(g, g),
            upsample: bilinear_matrix(config.input_size, g),
            config,
            params,
        })
    }

    fn shapes(c: &ToyConfig) -> BTreeMap<String, (usize, usize)> {
        let d = c.feature_dim;
        let mut m = BTreeMap::new();
        let mut dense = |name: String, i: usize, o: usize| {
            m.insert(format!("{name}.weight"), (i, o));
            m.insert(format!("{name}.bias"), (1, o));
        };
        dense(PATCH_EMBED.into(), 3 * c.patch_size * c.patch_size, d);
        for i in 0..c.blocks {
            dense(block_name(i, "token_mix"), d, d);
            dense(block_name(i, "mlp.fc1"), d, c.mlp_dim);
            dense(block_name(i, "mlp.fc2"), c.mlp_dim, d);
            dense(block_name(i, "norm1"), 1, d);
            dense(block_name(i, "norm2"), 1, d);
        }
        dense(NECK.into(), 1, d);
        dense("decoder.hidden".into(), d, c.decoder_dim);
        dense("decoder.out".into(), c.decoder_dim, 1);
        dense("decoder.sim".into(), d, 1);
        m.insert("prompt_encoder.scale".into(), (1, 3));
        m.insert("prompt_encoder.shift".into(), (1, 3));
        m
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Names of the 2-D encoder weights that accept adapters.
    pub fn adaptable_weights(&self) -> Vec<String> {
        let mut v = vec![format!("{PATCH_EMBED}.weight")];
        for i in 0..self.config.blocks {
            for leaf in ["token_mix", "mlp.fc1", "mlp.fc2"] {
                v.push(block_name(i, &format!("{leaf}.weight")));
            }
        }
        v
    }

    /// Default adapter targets: mixing and MLP weights of every block.
    pub fn default_lora_targets(&self) -> Vec<String> {
        self.adaptable_weights()
            .into_iter()
            .filter(|n| n.starts_with("encoder.blocks."))
            .collect()
    }

    pub fn is_adaptable(&self, name: &str) -> bool {
        self.adaptable_weights().iter().any(|n| n == name)
    }

    fn linear(&self, x: Array2<f64>, name: &str, adapters: &AdapterSet) -> (Array2<f64>, LinearCache) {
        let wname = format!("{name}.weight");
        let w = self.params.expect(&wname);
        let mut y = x.dot(w);
        let lora_hidden = adapters.get(&wname).map(|a| {
            let h = x.dot(&a.a);
            y += &h.dot(&a.b);
            h
        });
        let y = add_row(y, self.params.expect(&format!("{name}.bias")));
        (
            y,
            LinearCache {
                input: x,
                lora_hidden,
            },
        )
    }

    fn linear_backward(
        &self,
        dy: &Array2<f64>,
        name: &str,
        cache: &LinearCache,
        adapters: &AdapterSet,
        grads: &mut Gradients,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let wname = format!("{name}.weight");
        let w = self.params.expect(&wname);
        grads.accumulate(&wname, &cache.input.t().dot(dy));
        grads.accumulate(&format!("{name}.bias"), &column_sums(dy));
        let mut dx = need_input_grad.then(|| dy.dot(&w.t()));
        if let (Some(a), Some(h)) = (adapters.get(&wname), cache.lora_hidden.as_ref()) {
            let dh = dy.dot(&a.b.t());
            if let Some((da, db)) = grads.adapters.get_mut(&wname) {
                *da += &cache.input.t().dot(&dh);
                *db += &h.t().dot(dy);
            }
            if let Some(dx) = dx.as_mut() {
                *dx += &dh.dot(&a.a.t());
            }
        }
        dx
    }

    fn norm(&self, x: &Array2<f64>, name: &str) -> (Array2<f64>, NormCache) {
        layer_norm(
            x,
            self.params.expect(&format!("{name}.weight")),
            self.params.expect(&format!("{name}.bias")),
        )
    }

    fn norm_backward(
        &self,
        dy: &Array2<f64>,
        name: &str,
        cache: &NormCache,
        grads: &mut Gradients,
    ) -> Array2<f64> {
        let wname = format!("{name}.weight");
        let (dx, dg, db) = layer_norm_backward(dy, self.params.expect(&wname), cache);
        grads.accumulate(&wname, &dg);
        grads.accumulate(&format!("{name}.bias"), &db);
        dx
    }

    /// Normalized image as one row of `3·p·p` values per patch.
    fn patchify(&self, image: &ImageTensor) -> Result<Array2<f64>> {
        let s = self.config.input_size;
        if image.height() != s || image.width() != s {
            return Err(Error::config(format!(
                "model expects {s}x{s} input, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        let p = self.config.patch_size;
        let g = self.config.grid();
        let data = image.data();
        let mut out = Array2::zeros((g * g, 3 * p * p));
        for gy in 0..g {
            for gx in 0..g {
                let row = gy * g + gx;
                let mut k = 0;
                for c in 0..3 {
                    let (m, sd) = (self.config.mean[c], self.config.std[c]);
                    for py in 0..p {
                        for px in 0..p {
                            out[[row, k]] = (data[[c, gy * p + py, gx * p + px]] - m) / sd;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Encoder forward; returns per-cell features `[N, D]` and the cache.
    pub fn encode_rows(
        &self,
        image: &ImageTensor,
        adapters: &AdapterSet,
    ) -> Result<(Array2<f64>, EncoderCache)> {
        let x = self.patchify(image)?;
        let (mut t, patch) = self.linear(x, PATCH_EMBED, adapters);
        let mut blocks = Vec::with_capacity(self.config.blocks);
        for i in 0..self.config.blocks {
            let (h1, norm1) = self.norm(&t, &block_name(i, "norm1"));
            let mixed = self.neighbour.dot(&h1);
            let (m, mix) = self.linear(mixed, &block_name(i, "token_mix"), adapters);
            t += &m;
            let (h2, norm2) = self.norm(&t, &block_name(i, "norm2"));
            let (fc1_pre, fc1) = self.linear(h2, &block_name(i, "mlp.fc1"), adapters);
            let u = fc1_pre.mapv(gelu);
            let (o, fc2) = self.linear(u, &block_name(i, "mlp.fc2"), adapters);
            t += &o;
            blocks.push(BlockCache {
                norm1,
                mix,
                norm2,
                fc1,
                fc1_pre,
                fc2,
            });
        }
        let (f, neck) = self.norm(&t, NECK);
        Ok((f, EncoderCache { patch, blocks, neck }))
    }

    pub fn rows_to_feature_map(&self, rows: &Array2<f64>) -> FeatureMap {
        let g = self.config.grid();
        let d = rows.ncols();
        let data = Array3::from_shape_fn((d, g, g), |(k, y, x)| rows[[y * g + x, k]]);
        FeatureMap { data }
    }

    pub fn feature_map_to_rows(&self, feat: &FeatureMap) -> Result<Array2<f64>> {
        let g = self.config.grid();
        let (d, h, w) = feat.data.dim();
        if (h, w) != (g, g) || d != self.config.feature_dim {
            return Err(Error::invalid(format!(
                "feature map {:?} does not match a {}x{g}x{g} encoder",
                feat.data.dim(),
                self.config.feature_dim
            )));
        }
        Ok(Array2::from_shape_fn((g * g, d), |(i, k)| {
            feat.data[[k, i / g, i % g]]
        }))
    }

    fn cell_of(&self, x: usize, y: usize) -> usize {
        let p = self.config.patch_size;
        let g = self.config.grid();
        (y / p).min(g - 1) * g + (x / p).min(g - 1)
    }

    fn cell_centre(&self, cell: usize) -> (f64, f64) {
        let p = self.config.patch_size as f64;
        let g = self.config.grid();
        (
            ((cell % g) as f64 + 0.5) * p - 0.5,
            ((cell / g) as f64 + 0.5) * p - 0.5,
        )
    }

    /// Prompt encoder: validates prompts and produces prior maps and regions.
    pub fn encode_prompts(&self, prompts: &[Prompt]) -> Result<Vec<EncodedPrompt>> {
        if prompts.is_empty() {
            return Err(Error::invalid("empty prompt list"));
        }
        let s = self.config.input_size;
        let g = self.config.grid();
        let cells = g * g;
        prompts
            .iter()
            .map(|p| {
                if !p.in_bounds(s, s) {
                    return Err(Error::invalid(format!("prompt outside the {s}x{s} frame")));
                }
                let (prior, mut region) = match p {
                    Prompt::Box(b) => {
                        let prior =
                            Array2::from_shape_fn((s, s), |(y, x)| if b.contains(x, y) { 1.0 } else { -1.0 });
                        let region: Vec<usize> = (0..cells)
                            .filter(|&c| {
                                let (cx, cy) = self.cell_centre(c);
                                cx >= b.x_min as f64
                                    && cx <= b.x_max as f64
                                    && cy >= b.y_min as f64
                                    && cy <= b.y_max as f64
                            })
                            .collect();
                        let fallback = self.cell_of((b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2);
                        (prior, if region.is_empty() { vec![fallback] } else { region })
                    }
                    Prompt::Points(pp) => {
                        let inv = 1.0 / (2.0 * self.config.point_sigma.powi(2));
                        let bump = |x: usize, y: usize, (px, py): (usize, usize)| {
                            let d2 = (x as f64 - px as f64).powi(2) + (y as f64 - py as f64).powi(2);
                            (-d2 * inv).exp()
                        };
                        let prior = Array2::from_shape_fn((s, s), |(y, x)| {
                            let pos: f64 = pp.positives.iter().map(|&q| bump(x, y, q)).sum();
                            let neg: f64 = pp.negatives.iter().map(|&q| bump(x, y, q)).sum();
                            (pos - neg).clamp(-1.0, 1.0)
                        });
                        let mut region: Vec<usize> =
                            pp.positives.iter().map(|&(x, y)| self.cell_of(x, y)).collect();
                        if region.is_empty() {
                            region = (0..cells).collect();
                        }
                        (prior, region)
                    }
                    Prompt::Poly(poly) => {
                        let prior = poly.rasterized.0.mapv(|b| if b { 1.0 } else { -1.0 });
                        let region: Vec<usize> = (0..cells)
                            .filter(|&c| {
                                let (cx, cy) = self.cell_centre(c);
                                poly.rasterized.get(cx.round() as usize, cy.round() as usize)
                            })
                            .collect();
                        let fallback = poly
                            .vertices
                            .first()
                            .map(|&(x, y)| self.cell_of(x, y))
                            .unwrap_or(0);
                        (prior, if region.is_empty() { vec![fallback] } else { region })
                    }
                };
                region.sort_unstable();
                region.dedup();
                Ok(EncodedPrompt {
                    kind: p.kind(),
                    prior,
                    region,
                })
            })
            .collect()
    }

    /// Decoder forward over per-cell features.
    pub fn decode_rows(
        &self,
        features: &Array2<f64>,
        prompts: Vec<EncodedPrompt>,
    ) -> (MaskLogits, DecoderCache) {
        let s = self.config.input_size;
        let g = self.config.grid();
        let hidden_pre = add_row(
            features.dot(self.params.expect("decoder.hidden.weight")),
            self.params.expect("decoder.hidden.bias"),
        );
        let hidden = hidden_pre.mapv(gelu);
        let w_out = self.params.expect("decoder.out.weight").column(0).to_owned();
        let b_out = self.params.expect("decoder.out.bias")[[0, 0]];
        let w_sim = self.params.expect("decoder.sim.weight").column(0).to_owned();
        let scale = self.params.expect("prompt_encoder.scale");
        let shift = self.params.expect("prompt_encoder.shift");
        let base_score = hidden.dot(&w_out) + b_out;

        let mut logits = Array3::zeros((prompts.len(), s, s));
        let mut queries = Vec::with_capacity(prompts.len());
        for (j, p) in prompts.iter().enumerate() {
            let mut q = Array1::zeros(features.ncols());
            for &c in &p.region {
                q += &features.row(c);
            }
            q /= p.region.len() as f64;
            let qw = &q * &w_sim;
            let score = &base_score + &features.dot(&qw);
            let grid = score.into_shape_with_order((g, g)).expect("grid scores");
            let up = self.upsample.dot(&grid).dot(&self.upsample.t());
            let k = p.kind.index();
            let mut out = logits.slice_mut(s![j, .., ..]);
            out.assign(&up);
            out.scaled_add(scale[[0, k]], &p.prior);
            out += shift[[0, k]];
            queries.push(q);
        }
        (
            MaskLogits(logits),
            DecoderCache {
                features: features.clone(),
                hidden_pre,
                hidden,
                prompts,
                queries,
            },
        )
    }

    /// Backward through decoder and prompt encoder. Returns `dL/d features`.
    pub fn decoder_backward(
        &self,
        cache: &DecoderCache,
        d_logits: &Array3<f64>,
        grads: &mut Gradients,
    ) -> Array2<f64> {
        let g = self.config.grid();
        let f = &cache.features;
        let w_out = self.params.expect("decoder.out.weight").column(0).to_owned();
        let w_sim = self.params.expect("decoder.sim.weight").column(0).to_owned();
        let mut d_feat = Array2::zeros(f.dim());
        let mut d_scale = Array2::zeros((1, 3));
        let mut d_shift = Array2::zeros((1, 3));
        let mut d_base = Array1::<f64>::zeros(f.nrows());
        let mut d_wsim = Array1::<f64>::zeros(f.ncols());
        for (j, p) in cache.prompts.iter().enumerate() {
            let dy = d_logits.index_axis(Axis(0), j);
            let k = p.kind.index();
            d_scale[[0, k]] += (&dy * &p.prior).sum();
            d_shift[[0, k]] += dy.sum();
            let d_grid = self.upsample.t().dot(&dy).dot(&self.upsample);
            let ds = d_grid.into_shape_with_order(g * g).expect("grid grads");
            d_base += &ds;
            let q = &cache.queries[j];
            // score_c += F_c · (q ⊙ w_sim)
            let qw = q * &w_sim;
            for (c, &dsc) in ds.iter().enumerate() {
                if dsc != 0.0 {
                    d_feat.row_mut(c).scaled_add(dsc, &qw);
                }
            }
            let f_ds = f.t().dot(&ds); // Σ_c ds_c F_c
            d_wsim += &(&f_ds * q);
            let dq = &f_ds * &w_sim;
            let share = 1.0 / p.region.len() as f64;
            for &c in &p.region {
                d_feat.row_mut(c).scaled_add(share, &dq);
            }
        }
        grads.accumulate("prompt_encoder.scale", &d_scale);
        grads.accumulate("prompt_encoder.shift", &d_shift);
        grads.accumulate("decoder.sim.weight", &d_wsim.insert_axis(Axis(1)));
        grads.accumulate(
            "decoder.out.weight",
            &cache.hidden.t().dot(&d_base).insert_axis(Axis(1)),
        );
        grads.accumulate("decoder.out.bias", &Array2::from_elem((1, 1), d_base.sum()));
        let d_hidden = d_base.insert_axis(Axis(1)).dot(&w_out.insert_axis(Axis(0)));
        let d_pre = d_hidden * cache.hidden_pre.mapv(gelu_grad);
        grads.accumulate("decoder.hidden.weight", &f.t().dot(&d_pre));
        grads.accumulate("decoder.hidden.bias", &column_sums(&d_pre));
        d_feat += &d_pre.dot(&self.params.expect("decoder.hidden.weight").t());
        d_feat
    }

    /// Backward through the encoder from `dL/d features`.
    pub fn encoder_backward(
        &self,
        cache: &EncoderCache,
        d_features: &Array2<f64>,
        adapters: &AdapterSet,
        grads: &mut Gradients,
    ) {
        let mut dt = self.norm_backward(d_features, NECK, &cache.neck, grads);
        for i in (0..self.config.blocks).rev() {
            let b = &cache.blocks[i];
            let du = self
                .linear_backward(&dt, &block_name(i, "mlp.fc2"), &b.fc2, adapters, grads, true)
                .expect("input grad");
            let d_pre = du * b.fc1_pre.mapv(gelu_grad);
            let dh2 = self
                .linear_backward(&d_pre, &block_name(i, "mlp.fc1"), &b.fc1, adapters, grads, true)
                .expect("input grad");
            dt += &self.norm_backward(&dh2, &block_name(i, "norm2"), &b.norm2, grads);
            let dmixed = self
                .linear_backward(&dt, &block_name(i, "token_mix"), &b.mix, adapters, grads, true)
                .expect("input grad");
            let dh1 = self.neighbour.t().dot(&dmixed);
            dt += &self.norm_backward(&dh1, &block_name(i, "norm1"), &b.norm1, grads);
        }
        self.linear_backward(&dt, PATCH_EMBED, &cache.patch, adapters, grads, false);
    }

    /// Full forward with caches for training.
    pub fn forward(
        &self,
        image: &ImageTensor,
        prompts: &[Prompt],
        adapters: &AdapterSet,
    ) -> Result<ForwardPass> {
        let encoded = self.encode_prompts(prompts)?;
        let (features, encoder) = self.encode_rows(image, adapters)?;
        let (logits, decoder) = self.decode_rows(&features, encoded);
        Ok(ForwardPass {
            features,
            logits,
            encoder,
            decoder,
        })
    }

    /// Gradients of a scalar loss given `dL/d logits` and optionally
    /// `dL/d features` (encoder output rows).
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_logits: &Array3<f64>,
        d_features: Option<&Array2<f64>>,
        adapters: &AdapterSet,
    ) -> Gradients {
        let mut grads = Gradients::zeros(self, adapters);
        let mut d_feat = self.decoder_backward(&pass.decoder, d_logits, &mut grads);
        if let Some(extra) = d_features {
            d_feat += extra;
        }
        self.encoder_backward(&pass.encoder, &d_feat, adapters, &mut grads);
        grads
    }

    pub fn predict_with(
        &self,
        image: &ImageTensor,
        prompts: &[Prompt],
        adapters: &AdapterSet,
    ) -> Result<MaskLogits> {
        Ok(self.forward(image, prompts, adapters)?.logits)
    }
}

/// Output and caches of one forward pass.
pub struct ForwardPass {
    pub features: Array2<f64>,
    pub logits: MaskLogits,
    pub encoder: EncoderCache,
    pub decoder: DecoderCache,
}

static NO_ADAPTERS: std::sync::OnceLock<AdapterSet> = std::sync::OnceLock::new();

pub(crate) fn no_adapters() -> &'static AdapterSet {
    NO_ADAPTERS.get_or_init(AdapterSet::new)
}

impl PromptableModel for ToyModel {
    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn encode_image(&self, image: &ImageTensor) -> Result<FeatureMap> {
        let (rows, _) = self.encode_rows(image, no_adapters())?;
        Ok(self.rows_to_feature_map(&rows))
    }

    fn decode_masks(&self, feat: &FeatureMap, prompts: &[Prompt]) -> Result<MaskLogits> {
        let rows = self.feature_map_to_rows(feat)?;
        let encoded = self.encode_prompts(prompts)?;
        Ok(self.decode_rows(&rows, encoded).0)
    }
}

impl PromptableModel for crate::lora::AdaptedModel {
    fn input_size(&self) -> usize {
        self.base.config.input_size
    }

    fn encode_image(&self, image: &ImageTensor) -> Result<FeatureMap> {
        let (rows, _) = self.base.encode_rows(image, &self.adapters)?;
        Ok(self.base.rows_to_feature_map(&rows))
    }

    fn decode_masks(&self, feat: &FeatureMap, prompts: &[Prompt]) -> Result<MaskLogits> {
        self.base.decode_masks(feat, prompts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraAdapter;
    use crate::prompts::{BoxPrompt, PointPrompt};
    use rand::Rng;

    fn small() -> ToyModel {
        let cfg = ToyConfig {
            input_size: 16,
            patch_size: 4,
            feature_dim: 4,
            mlp_dim: 5,
            decoder_dim: 3,
            ..ToyConfig::default()
        };
        let mut m = ToyModel::with_config(cfg, 3).unwrap();
        // Break the zero init so every path carries gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (_, t) in m.params_mut().iter_mut() {
            t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
        m
    }

    fn random_image(s: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((3, s, s), |_| rng.random())).unwrap()
    }

    fn prompts() -> Vec<Prompt> {
        vec![
            Prompt::Box(BoxPrompt {
                x_min: 2,
                y_min: 3,
                x_max: 9,
                y_max: 12,
            }),
            Prompt::Points(PointPrompt {
                positives: vec![(5, 5), (12, 2)],
                negatives: vec![(1, 14)],
            }),
        ]
    }

    #[test]
    fn zero_image_gives_finite_features_on_the_patch_grid() {
        let m = ToyModel::build(0, 8).unwrap();
        let f = m.encode_image(&ImageTensor::zeros(64, 64)).unwrap();
        let g = m.config().grid();
        assert_eq!(g, 64 / m.config().patch_size);
        assert_eq!(f.data.dim(), (8, g, g));
        assert!(f.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sixteen_pixel_patches_give_a_four_by_four_grid() {
        let cfg = ToyConfig {
            patch_size: 16,
            feature_dim: 8,
            ..ToyConfig::default()
        };
        let m = ToyModel::with_config(cfg, 0).unwrap();
        let f = m.encode_image(&ImageTensor::zeros(64, 64)).unwrap();
        assert_eq!(f.data.dim(), (8, 4, 4));
        assert!(f.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let a = ToyModel::build(0, 16).unwrap();
        let b = ToyModel::build(0, 16).unwrap();
        assert_eq!(a.params().checksum(), b.params().checksum());
        assert_ne!(
            a.params().checksum(),
            ToyModel::build(1, 16).unwrap().params().checksum()
        );
    }

    #[test]
    fn one_pixel_changes_features() {
        let m = ToyModel::build(0, 8).unwrap();
        let a = random_image(64, 1);
        let mut data = a.data().clone();
        data[[1, 30, 30]] = 1.0 - data[[1, 30, 30]];
        let b = ImageTensor::new(data).unwrap();
        assert_ne!(m.encode_image(&a).unwrap().data, m.encode_image(&b).unwrap().data);
    }

    #[test]
    fn decode_rejects_bad_prompts() {
        let m = small();
        let f = m.encode_image(&random_image(16, 2)).unwrap();
        assert!(matches!(m.decode_masks(&f, &[]), Err(Error::InvalidArgument(_))));
        let oob = Prompt::Box(BoxPrompt {
            x_min: 0,
            y_min: 0,
            x_max: 16,
            y_max: 3,
        });
        assert!(matches!(
            m.decode_masks(&f, &[oob]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            m.encode_image(&random_image(20, 2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prompt_order_equivariance() {
        let m = small();
        let f = m.encode_image(&random_image(16, 2)).unwrap();
        let p = prompts();
        let fwd = m.decode_masks(&f, &p).unwrap();
        let rev: Vec<Prompt> = p.iter().rev().cloned().collect();
        let back = m.decode_masks(&f, &rev).unwrap();
        assert_eq!(fwd.0.index_axis(Axis(0), 0), back.0.index_axis(Axis(0), 1));
        assert_eq!(fwd.0.index_axis(Axis(0), 1), back.0.index_axis(Axis(0), 0));
    }

    /// Central finite differences against the analytic backward pass for
    /// every base parameter and adapter factor.
    #[test]
    fn backward_matches_finite_differences() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut adapters = AdapterSet::new();
        for t in m.default_lora_targets().into_iter().take(2) {
            let (i, o) = m.params().expect(&t).dim();
            let mut a = LoraAdapter::new(t.clone(), i, o, 2, &mut rng).unwrap();
            a.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            adapters.insert(t, a);
        }
        let image = random_image(16, 4);
        let p = prompts();
        let w_logits = Array3::from_shape_fn((2, 16, 16), |_| rng.random_range(-1.0..1.0));
        let w_feat = Array2::from_shape_fn((16, 4), |_| rng.random_range(-1.0..1.0));
        let loss = |m: &ToyModel, ad: &AdapterSet| {
            let pass = m.forward(&image, &p, ad).unwrap();
            (&pass.logits.0 * &w_logits).sum() + (&pass.features * &w_feat).sum()
        };
        let pass = m.forward(&image, &p, &adapters).unwrap();
        let grads = m.backward(&pass, &w_logits, Some(&w_feat), &adapters);
        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let numeric = (plus - minus) / (2.0 * h);
            let tol = 1e-3 * numeric.abs().max(analytic.abs()).max(1e-3);
            assert!(
                (analytic - numeric).abs() <= tol,
                "{what}: {analytic} vs {numeric}"
            );
        };
        for name in m.params().names().map(str::to_string).collect::<Vec<_>>() {
            let n = m.params().expect(&name).len();
            for k in (0..n).step_by(n.div_ceil(6)) {
                let mut mp = m.clone();
                let mut mm = m.clone();
                mp.params_mut().get_mut(&name).unwrap().as_slice_mut().unwrap()[k] += h;
                mm.params_mut().get_mut(&name).unwrap().as_slice_mut().unwrap()[k] -= h;
                let g = grads.params.expect(&name).as_slice().unwrap()[k];
                check(
                    g,
                    loss(&mp, &adapters),
                    loss(&mm, &adapters),
                    &format!("{name}[{k}]"),
                );
            }
        }
        for (t, (da, db)) in &grads.adapters {
            for (which, g) in [("A", da), ("B", db)] {
                for k in 0..g.len().min(4) {
                    let nudge = |delta: f64| {
                        let mut s = adapters.clone();
                        let a = s.get_mut(t).unwrap();
                        let mat = if which == "A" { &mut a.a } else { &mut a.b };
                        mat.as_slice_mut().unwrap()[k] += delta;
                        s
                    };
                    let (ap, am) = (nudge(h), nudge(-h));
                    let gk = g.as_slice().unwrap()[k];
                    check(gk, loss(&m, &ap), loss(&m, &am), &format!("{t}.{which}[{k}]"));
                }
            }
        }
    }
}
