//! Datasets: coco-style JSON polygons, per-instance PNG mask directories,
//! and a synthetic blob domain with a clean and a corrupted rendering.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::gaussian_blur;
use crate::error::{Error, Result};
use crate::prompts::rasterize_polygon;
use crate::tensor::{BinaryMask, ImageTensor, MaskStack};

/// One image with its ground-truth instances. The image may be decoded lazily.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image_path: Option<PathBuf>,
    image: OnceLock<ImageTensor>,
    pub instances: Vec<BinaryMask>,
}

impl Sample {
    pub fn in_memory(id: impl Into<String>, image: ImageTensor, instances: Vec<BinaryMask>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            image_path: None,
            image: OnceLock::from(image),
            instances,
        };
        let img = s.image()?;
        s.check_masks(img.height(), img.width())?;
        Ok(s)
    }

    /// Sample whose image is decoded from `path` on first access.
    pub fn from_file(id: impl Into<String>, path: PathBuf, instances: Vec<BinaryMask>) -> Result<Self> {
        let (w, h) = image::image_dimensions(&path).map_err(|e| Error::Image {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let s = Self {
            id: id.into(),
            image_path: Some(path),
            image: OnceLock::new(),
            instances,
        };
        s.check_masks(h as usize, w as usize)?;
        Ok(s)
    }

    fn check_masks(&self, h: usize, w: usize) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::invalid(format!("sample `{}` has no instances", self.id)));
        }
        if let Some(m) = self.instances.iter().find(|m| m.dim() != (h, w)) {
            return Err(Error::invalid(format!(
                "sample `{}`: mask {:?} does not match image {h}x{w}",
                self.id,
                m.dim()
            )));
        }
        Ok(())
    }

    pub fn image(&self) -> Result<&ImageTensor> {
        if let Some(img) = self.image.get() {
            return Ok(img);
        }
        let path = self.image_path.as_ref().expect("lazy samples carry a path");
        let img = read_png(path)?;
        Ok(self.image.get_or_init(|| img))
    }

    /// `(height, width)` taken from the annotations, decoding the image
    /// only when there are none.
    pub fn frame(&self) -> Result<(usize, usize)> {
        match self.instances.first() {
            Some(m) => Ok(m.dim()),
            None => self.image().map(|i| (i.height(), i.width())),
        }
    }

    pub fn masks(&self) -> MaskStack {
        MaskStack::from_instances(&self.instances).expect("validated at construction")
    }

    /// Copy brought to `size`x`size`: image via [`crate::model::preprocess`],
    /// masks by nearest-neighbour on the same geometry.
    pub fn resized(&self, size: usize) -> Result<Sample> {
        let img = self.image()?;
        let (h, w) = (img.height(), img.width());
        if h == size && w == size {
            return Ok(self.clone());
        }
        let image = crate::model::preprocess(img, size)?;
        let scale = size as f64 / h.max(w) as f64;
        let nh = ((h as f64 * scale).round() as usize).clamp(1, size);
        let nw = ((w as f64 * scale).round() as usize).clamp(1, size);
        let instances = self
            .instances
            .iter()
            .map(|m| {
                BinaryMask::from_fn(size, size, |x, y| {
                    x < nw
                        && y < nh
                        && m.get(
                            ((x as f64 + 0.5) * w as f64 / nw as f64) as usize,
                            ((y as f64 + 0.5) * h as f64 / nh as f64) as usize,
                        )
                })
            })
            .filter(|m| m.count() > 0)
            .collect();
        Sample::in_memory(self.id.clone(), image, instances)
    }
}

pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    });
    ImageTensor::new(data)
}

pub fn write_png(path: &Path, image: &ImageTensor) -> Result<()> {
    let d = image.data();
    let buf = image::RgbImage::from_fn(image.width() as u32, image.height() as u32, |x, y| {
        let px = |c| (d[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    Ok(BinaryMask::from_fn(h as usize, w as usize, |x, y| {
        g.get_pixel(x as u32, y as u32)[0] > 127
    }))
}

fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let buf = image::GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotationFormat {
    CocoJson,
    MaskDirs,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyKind {
    Clean,
    Corrupted,
}

impl ToyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ToyKind::Clean => "clean",
            ToyKind::Corrupted => "corrupted",
        }
    }
}

impl std::str::FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(ToyKind::Clean),
            "corrupted" => Ok(ToyKind::Corrupted),
            _ => Err(Error::invalid(format!("unknown toy domain `{s}`"))),
        }
    }
}

/// Rendering parameters of the synthetic blob domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDomainConfig {
    pub size: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Per-pixel texture noise present in both renderings.
    pub texture_noise: f64,
    /// Amplitude of a fine checker/stripe pattern on the background.
    pub background_texture: f64,
    /// When positive, blobs differ from a mid-grey background by at most
    /// this much per channel instead of being bright on dark.
    pub blob_contrast: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
}

impl Default for ToyDomainConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_blobs: 2,
            max_blobs: 5,
            min_radius: 5.0,
            max_radius: 12.0,
            texture_noise: 0.02,
            background_texture: 0.0,
            blob_contrast: 0.25,
            noise_sigma: 0.2,
            blur_sigma: 1.0,
        }
    }
}

/// Where a dataset lives and how to read it. Stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(default)]
    pub root: PathBuf,
    pub format: AnnotationFormat,
    /// coco-json only; relative to `root`.
    #[serde(default = "default_annotations")]
    pub annotation_file: PathBuf,
    #[serde(default = "default_ratio")]
    pub split_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    /// synthetic only.
    #[serde(default)]
    pub toy_kind: Option<ToyKind>,
    #[serde(default)]
    pub toy_images: Option<usize>,
    #[serde(default)]
    pub toy: ToyDomainConfig,
}

fn default_annotations() -> PathBuf {
    "annotations.json".into()
}

fn default_ratio() -> f64 {
    0.8
}

impl DatasetManifest {
    pub fn synthetic(name: &str, kind: ToyKind, n_images: usize, seed: u64) -> Self {
        Self {
            name: name.into(),
            root: PathBuf::new(),
            format: AnnotationFormat::Synthetic,
            annotation_file: default_annotations(),
            split_ratio: default_ratio(),
            seed,
            toy_kind: Some(kind),
            toy_images: Some(n_images),
            toy: ToyDomainConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self =
            toml::from_str(&text).map_err(|e| Error::config(format!("manifest {}: {e}", path.display())))?;
        if m.root.is_relative() {
            m.root = path.parent().unwrap_or(Path::new(".")).join(&m.root);
        }
        Ok(m)
    }
}

/// Loads every sample of a manifest, ordered by id.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    let mut samples = match manifest.format {
        AnnotationFormat::CocoJson => {
            load_coco(&manifest.root.join(&manifest.annotation_file), &manifest.root)?
        }
        AnnotationFormat::MaskDirs => load_mask_dirs(&manifest.root)?,
        AnnotationFormat::Synthetic => {
            let kind = manifest
                .toy_kind
                .ok_or_else(|| Error::config("synthetic manifest needs toy_kind"))?;
            let n = manifest
                .toy_images
                .ok_or_else(|| Error::config("synthetic manifest needs toy_images"))?;
            make_toy_domain_with(&manifest.toy, kind, n, manifest.seed)?
        }
    };
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(samples)
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<serde_json::Value>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    segmentation: serde_json::Value,
}

/// Rasterizes coco polygons (pixel `(x, y)` covers `[x, x+1)`) by testing
/// pixel centres, so a polygon's mask area tracks its geometric area.
pub fn rasterize_coco_polygons(polys: &[Vec<f64>], height: usize, width: usize) -> Result<BinaryMask> {
    let mut out = BinaryMask::empty(height, width);
    for poly in polys {
        if poly.len() < 6 || poly.len() % 2 != 0 {
            return Err(Error::invalid(format!(
                "polygon needs an even number (>= 6) of coordinates, got {}",
                poly.len()
            )));
        }
        let verts: Vec<(f64, f64)> = poly.chunks(2).map(|c| (c[0] - 0.5, c[1] - 0.5)).collect();
        let m = rasterize_polygon(&verts, height, width, 0.0);
        out.0.zip_mut_with(&m.0, |a, &b| *a |= b);
    }
    Ok(out)
}

fn load_coco(path: &Path, root: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CocoFile = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))?;
    let images: BTreeMap<u64, &CocoImage> = file.images.iter().map(|i| (i.id, i)).collect();
    let mut per_image: BTreeMap<u64, Vec<BinaryMask>> = BTreeMap::new();
    let ctx = || format!("{} annotation", path.display());
    for (idx, raw) in file.annotations.iter().enumerate() {
        let ann: CocoAnnotation =
            serde_json::from_value(raw.clone()).map_err(|e| Error::parse(ctx(), idx, e.to_string()))?;
        let img = images
            .get(&ann.image_id)
            .ok_or_else(|| Error::parse(ctx(), idx, format!("unknown image_id {}", ann.image_id)))?;
        let polys: Vec<Vec<f64>> = match &ann.segmentation {
            serde_json::Value::Array(_) => serde_json::from_value(ann.segmentation.clone())
                .map_err(|e| Error::parse(ctx(), idx, e.to_string()))?,
            _ => {
                return Err(Error::parse(
                    ctx(),
                    idx,
                    "only polygon segmentation is supported (no RLE)",
                ))
            }
        };
        let mask = rasterize_coco_polygons(&polys, img.height, img.width)
            .map_err(|e| Error::parse(ctx(), idx, e.to_string()))?;
        if mask.count() > 0 {
            per_image.entry(ann.image_id).or_default().push(mask);
        }
    }
    per_image
        .into_iter()
        .map(|(id, masks)| {
            let img = images[&id];
            Sample::from_file(id.to_string(), root.join(&img.file_name), masks)
        })
        .collect()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    // Numeric stems sort numerically, everything else lexically.
    out.sort_by_key(|p| {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        (stem.parse::<u64>().unwrap_or(u64::MAX), stem)
    });
    Ok(out)
}

/// `root/images/<image_id>.png` with masks at `root/masks/<image_id>/<instance_k>.png`.
fn load_mask_dirs(root: &Path) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for img_path in sorted_entries(&root.join("images"))? {
        if img_path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let id = img_path.file_stem().unwrap().to_string_lossy().into_owned();
        let mask_dir = root.join("masks").join(&id);
        let mut masks = Vec::new();
        for m in sorted_entries(&mask_dir)? {
            if m.extension().and_then(|e| e.to_str()) == Some("png") {
                let mask = read_mask_png(&m)?;
                if mask.count() > 0 {
                    masks.push(mask);
                }
            }
        }
        samples.push(Sample::from_file(id, img_path, masks)?);
    }
    Ok(samples)
}

/// Writes samples in the mask-directory layout plus a manifest.
pub fn write_mask_dirs(root: &Path, name: &str, samples: &[Sample]) -> Result<PathBuf> {
    let images = root.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for s in samples {
        write_png(&images.join(format!("{}.png", s.id)), s.image()?)?;
        let dir = root.join("masks").join(&s.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (k, m) in s.instances.iter().enumerate() {
            write_mask_png(&dir.join(format!("{k}.png")), m)?;
        }
    }
    let manifest = DatasetManifest {
        name: name.into(),
        root: ".".into(),
        format: AnnotationFormat::MaskDirs,
        annotation_file: default_annotations(),
        split_ratio: default_ratio(),
        seed: 0,
        toy_kind: None,
        toy_images: None,
        toy: ToyDomainConfig::default(),
    };
    let path = root.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Seed-deterministic disjoint split; the adaptation part gets
/// `round(ratio * n)` samples, at least one on each side when `n >= 2`.
pub fn split(samples: &[Sample], ratio: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} outside (0,1)")));
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut k = (ratio * n as f64).round() as usize;
    if n >= 2 {
        k = k.clamp(1, n - 1);
    }
    let (a, b) = order.split_at(k.min(n));
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| samples[i].clone()).collect::<Vec<_>>()
    };
    Ok((pick(a), pick(b)))
}

/// Synthetic domain with default rendering parameters.
pub fn make_toy_domain(kind: ToyKind, n_images: usize, seed: u64) -> Result<Vec<Sample>> {
    make_toy_domain_with(&ToyDomainConfig::default(), kind, n_images, seed)
}

fn sample_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((index as u128) << 24);
    rng
}

struct Blob {
    mask: BinaryMask,
    color: [f64; 3],
}

fn random_blob(cfg: &ToyDomainConfig, rng: &mut ChaCha8Rng) -> BinaryMask {
    let s = cfg.size as f64;
    let r1 = rng.random_range(cfg.min_radius..=cfg.max_radius);
    let r2 = rng.random_range(cfg.min_radius..=cfg.max_radius);
    let cx = rng.random_range(r1.max(r2)..s - r1.max(r2));
    let cy = rng.random_range(r1.max(r2)..s - r1.max(r2));
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = angle.sin_cos();
    let rect = rng.random_bool(0.4);
    BinaryMask::from_fn(cfg.size, cfg.size, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let u = (dx * cos + dy * sin) / r1;
        let v = (-dx * sin + dy * cos) / r2;
        if rect {
            u.abs() <= 0.85 && v.abs() <= 0.85
        } else {
            u * u + v * v <= 1.0
        }
    })
}

fn dilate(mask: &BinaryMask, r: usize) -> BinaryMask {
    let (h, w) = mask.dim();
    BinaryMask::from_fn(h, w, |x, y| {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
        (y0..=y1).any(|yy| (x0..=x1).any(|xx| mask.get(xx, yy)))
    })
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = rng.random_range(0.1..0.6);
    }
    c[rng.random_range(0..3)] = rng.random_range(0.75..1.0);
    c
}

/// Blobs with exact masks. Geometry, colours and texture depend only on
/// `(seed, index)`; the corrupted rendering adds blur and Gaussian noise
/// on top from a separate stream, so masks agree across kinds.
pub fn make_toy_domain_with(
    cfg: &ToyDomainConfig,
    kind: ToyKind,
    n_images: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if n_images == 0 {
        return Err(Error::invalid("toy domain needs at least one image"));
    }
    if cfg.min_blobs == 0 || cfg.min_blobs > cfg.max_blobs || cfg.min_radius <= 1.0 {
        return Err(Error::config("invalid toy domain blob settings"));
    }
    if 2.0 * cfg.max_radius >= cfg.size as f64 {
        return Err(Error::config("toy blobs must fit inside the image"));
    }
    let s = cfg.size;
    (0..n_images)
        .map(|i| {
            let mut rng = sample_rng(seed, i, 0);
            let target = rng.random_range(cfg.min_blobs..=cfg.max_blobs);
            let mut occupied = BinaryMask::empty(s, s);
            let mut blobs: Vec<Blob> = Vec::new();
            for _ in 0..200 {
                if blobs.len() == target {
                    break;
                }
                let mask = random_blob(cfg, &mut rng);
                let colour = random_colour(&mut rng);
                let overlaps = mask.0.iter().zip(occupied.0.iter()).any(|(&a, &b)| a && b);
                if overlaps || mask.count() < 10 {
                    continue;
                }
                let grown = dilate(&mask, 2);
                occupied.0.zip_mut_with(&grown.0, |a, &b| *a |= b);
                blobs.push(Blob { mask, color: colour });
            }
            let bg: [f64; 3] = if cfg.blob_contrast > 0.0 {
                std::array::from_fn(|_| rng.random_range(0.3..0.7))
            } else {
                std::array::from_fn(|_| rng.random_range(0.05..0.3))
            };
            if cfg.blob_contrast > 0.0 {
                for b in &mut blobs {
                    let mut d: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                    let peak = d.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
                    d.iter_mut().for_each(|v| *v /= peak);
                    b.color = std::array::from_fn(|c| (bg[c] + cfg.blob_contrast * d[c]).clamp(0.0, 1.0));
                }
            }
            let texture = Normal::new(0.0, cfg.texture_noise.max(1e-12)).expect("valid sigma");
            let pattern = rng.random_range(0..3u8);
            let amp = cfg.background_texture;
            let mut data = Array3::from_shape_fn((3, s, s), |(c, y, x)| {
                let on = match pattern {
                    0 => (x + y) % 2 == 0,
                    1 => x % 2 == 0,
                    _ => y % 2 == 0,
                };
                bg[c] + if on { amp } else { -amp }
            });
            for b in &blobs {
                for ((y, x), &on) in b.mask.0.indexed_iter() {
                    if on {
                        for c in 0..3 {
                            data[[c, y, x]] = b.color[c];
                        }
                    }
                }
            }
            data.mapv_inplace(|v| (v + texture.sample(&mut rng)).clamp(0.0, 1.0));
            if kind == ToyKind::Corrupted {
                data = corrupt(&data, cfg, &mut sample_rng(seed, i, 1));
            }
            let instances = blobs.into_iter().map(|b| b.mask).collect();
            Sample::in_memory(format!("{i:05}"), ImageTensor::new(data)?, instances)
        })
        .collect()
}

fn corrupt(data: &Array3<f64>, cfg: &ToyDomainConfig, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut out = gaussian_blur(data, cfg.blur_sigma);
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        out.mapv_inplace(|v| (v + noise.sample(rng)).clamp(0.0, 1.0));
    }
    out
}

/// Foreground of all instances in one map.
pub fn union_mask(instances: &[BinaryMask]) -> Option<Array2<bool>> {
    let first = instances.first()?;
    let mut out = first.0.clone();
    for m in &instances[1..] {
        out.zip_mut_with(&m.0, |a, &b| *a |= b);
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_masks_valid_and_shared_across_kinds() {
        let clean = make_toy_domain(ToyKind::Clean, 6, 3).unwrap();
        let corrupted = make_toy_domain(ToyKind::Corrupted, 6, 3).unwrap();
        for (a, b) in clean.iter().zip(&corrupted) {
            assert!((2..=5).contains(&a.instances.len()));
            assert!(a.instances.iter().all(|m| m.count() > 0 && m.dim() == (64, 64)));
            assert_eq!(a.instances, b.instances);
            assert_ne!(a.image().unwrap().data(), b.image().unwrap().data());
            let union = union_mask(&a.instances).unwrap();
            assert_eq!(
                union.iter().filter(|&&v| v).count(),
                a.instances.iter().map(|m| m.count()).sum::<usize>()
            );
        }
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let samples = make_toy_domain(ToyKind::Clean, 10, 0).unwrap();
        let (a, b) = split(&samples, 0.8, 7).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a2, _) = split(&samples, 0.8, 7).unwrap();
        let ids = |v: &[Sample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&a2));
        let mut all = [ids(&a), ids(&b)].concat();
        all.sort();
        assert_eq!(all, ids(&samples));
        assert!(split(&samples, 1.0, 0).is_err());
    }

    #[test]
    fn unit_square_polygon_area() {
        let m = rasterize_coco_polygons(&[vec![2.0, 3.0, 12.0, 3.0, 12.0, 13.0, 2.0, 13.0]], 20, 20).unwrap();
        assert!((m.count() as i64 - 100).abs() <= 1, "{}", m.count());
    }

    #[test]
    fn resize_keeps_masks_aligned() {
        let img = ImageTensor::new(Array3::zeros((3, 32, 16))).unwrap();
        let mask = BinaryMask::from_fn(32, 16, |x, y| x < 8 && y < 16);
        let s = Sample::in_memory("a", img, vec![mask]).unwrap();
        let r = s.resized(64).unwrap();
        assert_eq!(r.instances[0].count(), 16 * 32);
    }
}
