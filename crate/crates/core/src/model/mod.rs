//! Promptable segmentation model: interface, preprocessing and the toy backend.

pub(crate) mod layers;
pub mod params;
pub mod toy;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

pub use params::ParamStore;
pub use toy::{ForwardPass, Gradients, PromptableModel, ToyConfig, ToyModel};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Seeded toy backend with the default architecture.
pub fn build_toy_model(seed: u64, feature_dim: usize) -> Result<ToyModel> {
    ToyModel::build(seed, feature_dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Toy,
    Pretrained,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Toy => "toy",
            BackendKind::Pretrained => "pretrained",
        })
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "toy" => Ok(BackendKind::Toy),
            "pretrained" => Ok(BackendKind::Pretrained),
            other => Err(Error::config(format!("unknown backend `{other}`"))),
        }
    }
}

/// Backend description, readable from `key=value` text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub backend: BackendKind,
    pub input_size: usize,
    pub feature_dim: usize,
    pub patch_size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub pretrained_weights_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let toy = ToyConfig::default();
        Self {
            backend: BackendKind::Toy,
            input_size: toy.input_size,
            feature_dim: toy.feature_dim,
            patch_size: toy.patch_size,
            mean: toy.mean,
            std: toy.std,
            pretrained_weights_path: None,
            seed: 0,
        }
    }
}

fn parse_triple(key: &str, v: &str, line: usize) -> Result<[f64; 3]> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse("backend config", line, format!("{key}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| Error::parse("backend config", line, format!("{key} needs 3 values")))
}

impl BackendConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = BackendConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("backend config", i, "expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|e| Error::parse("backend config", i, format!("{k}: {e}")))
            };
            match k {
                "backend" => cfg.backend = v.parse()?,
                "input_size" => cfg.input_size = num(v)?,
                "feature_dim" => cfg.feature_dim = num(v)?,
                "patch_size" => cfg.patch_size = num(v)?,
                "seed" => cfg.seed = num(v)? as u64,
                "mean" => cfg.mean = parse_triple(k, v, i)?,
                "std" => cfg.std = parse_triple(k, v, i)?,
                "pretrained_weights_path" => cfg.pretrained_weights_path = Some(v.into()),
                other => {
                    return Err(Error::parse(
                        "backend config",
                        i,
                        format!("unknown key `{other}`"),
                    ))
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let triple = |a: &[f64; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        let mut s = format!(
            "backend={}\ninput_size={}\nfeature_dim={}\npatch_size={}\nmean={}\nstd={}\nseed={}\n",
            self.backend,
            self.input_size,
            self.feature_dim,
            self.patch_size,
            triple(&self.mean),
            triple(&self.std),
            self.seed
        );
        if let Some(p) = &self.pretrained_weights_path {
            s.push_str(&format!("pretrained_weights_path={}\n", p.display()));
        }
        s
    }

    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            input_size: self.input_size,
            patch_size: self.patch_size,
            feature_dim: self.feature_dim,
            mlp_dim: self.feature_dim,
            decoder_dim: self.feature_dim,
            mean: self.mean,
            std: self.std,
            ..ToyConfig::default()
        }
    }

    /// Instantiates the backend. `pretrained` loads a weights archive for
    /// the toy architecture; a seeded toy backend needs no files.
    pub fn build(&self) -> Result<ToyModel> {
        match self.backend {
            BackendKind::Toy => ToyModel::with_config(self.toy_config(), self.seed),
            BackendKind::Pretrained => {
                let path = self
                    .pretrained_weights_path
                    .as_ref()
                    .ok_or_else(|| Error::config("backend=pretrained requires pretrained_weights_path"))?;
                let archive = crate::archive::Archive::read(path)?;
                let model = crate::archive::model_from_archive(&archive)?;
                if model.config().input_size != self.input_size
                    || model.config().feature_dim != self.feature_dim
                {
                    return Err(Error::config(format!(
                        "weights at {} do not match input_size={} feature_dim={}",
                        path.display(),
                        self.input_size,
                        self.feature_dim
                    )));
                }
                Ok(model)
            }
        }
    }
}

/// Resizes the longest side to `size` (bilinear), zero-pads to a square.
/// Channel normalization happens inside the encoder.
pub fn preprocess(image: &ImageTensor, size: usize) -> Result<ImageTensor> {
    let (h, w) = (image.height(), image.width());
    if h == size && w == size {
        return Ok(image.clone());
    }
    let scale = size as f64 / h.max(w) as f64;
    let nh = ((h as f64 * scale).round() as usize).clamp(1, size);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, size);
    let src = image.data();
    let sample = |c: usize, y: f64, x: f64| {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = src[[c, y0, x0]] * (1.0 - fx) + src[[c, y0, x1]] * fx;
        let bot = src[[c, y1, x0]] * (1.0 - fx) + src[[c, y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    };
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let data = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        if y < nh && x < nw {
            sample(c, (y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5)
        } else {
            0.0
        }
    });
    ImageTensor::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backend_config_round_trips() {
        let cfg = BackendConfig {
            mean: [0.4, 0.5, 0.6],
            pretrained_weights_path: Some("w.bin".into()),
            ..BackendConfig::default()
        };
        assert_eq!(BackendConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(BackendConfig::parse("backend=vit").is_err());
        assert!(matches!(
            BackendConfig::parse("# c\nmean=1,2").unwrap_err(),
            Error::Parse { index: 1, .. }
        ));
    }

    #[test]
    fn preprocess_pads_to_square() {
        let img = ImageTensor::new(Array3::from_elem((3, 32, 16), 0.5)).unwrap();
        let out = preprocess(&img, 64).unwrap();
        assert_eq!(out.data().dim(), (3, 64, 64));
        assert_eq!(out.data()[[0, 10, 10]], 0.5);
        assert_eq!(out.data()[[0, 10, 40]], 0.0);
    }
}
