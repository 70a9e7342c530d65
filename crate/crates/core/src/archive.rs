//! Binary archive of named f64 matrices plus a `key=value` manifest.
//!
//! Layout: magic, manifest length (u64 LE) and UTF-8 text, tensor count
//! (u64 LE), then per tensor: name length (u32 LE), name, rows and cols
//! (u64 LE), row-major f64 LE values. Values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::lora::{AdaptedModel, FinetuneMode, LoraAdapter, ParamRef};
use crate::model::{ParamStore, ToyConfig, ToyModel};

const MAGIC: &[u8; 8] = b"SEGADPT1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub manifest: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::parse("archive", self.pos, "truncated archive"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::parse("archive", at, "invalid UTF-8"))
    }
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let manifest: String = self.manifest.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::parse("archive", 0, "bad magic bytes"));
        }
        let n = r.u64()? as usize;
        let text = r.text(n)?;
        let mut manifest = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("archive manifest", i, "expected key=value"))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let count = r.u64()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = r.text(len)?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let at = r.pos;
            let bytes = r.take(rows.saturating_mul(cols).saturating_mul(8))?;
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Array2::from_shape_vec((rows, cols), values)
                .map_err(|e| Error::parse("archive", at, e.to_string()))?;
            tensors.insert(name, t);
        }
        if r.pos != buf.len() {
            return Err(Error::parse("archive", r.pos, "trailing bytes"));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::config(format!("archive manifest lacks `{key}`")))
    }

    fn tensor(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("archive lacks tensor `{name}`")))
    }
}

/// Full-weights archive for a toy-architecture model.
pub fn model_to_archive(model: &ToyModel) -> Result<Archive> {
    let config = toml::to_string(model.config())
        .map_err(|e| Error::config(format!("cannot encode model config: {e}")))?;
    let mut manifest = BTreeMap::new();
    manifest.insert("kind".into(), "model".into());
    manifest.insert("backend".into(), "toy".into());
    manifest.insert("config".into(), config.replace('\n', ";"));
    Ok(Archive {
        manifest,
        tensors: model
            .params()
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    })
}

pub fn model_from_archive(archive: &Archive) -> Result<ToyModel> {
    if archive.get("kind")? != "model" {
        return Err(Error::config("archive does not hold model weights"));
    }
    let config: ToyConfig = toml::from_str(&archive.get("config")?.replace(';', "\n"))
        .map_err(|e| Error::config(format!("bad model config in archive: {e}")))?;
    let mut params = ParamStore::new();
    for (k, v) in &archive.tensors {
        params.insert(k.clone(), v.clone());
    }
    ToyModel::from_params(config, params)
}

/// Adapter-only checkpoint: adapter factors, plus any base tensors the
/// mode tuned directly. Never stores untouched base weights.
pub fn adapter_checkpoint(model: &AdaptedModel, extra: &BTreeMap<String, String>) -> Archive {
    let mut manifest = extra.clone();
    manifest.insert("kind".into(), "adapter".into());
    manifest.insert("backend".into(), "toy".into());
    manifest.insert("mode".into(), model.mode.to_string());
    manifest.insert("rank".into(), model.rank.to_string());
    manifest.insert(
        "targets".into(),
        model.adapters.keys().cloned().collect::<Vec<_>>().join(","),
    );
    manifest.insert("base_checksum".into(), model.base_checksum_untuned());
    let mut tensors = BTreeMap::new();
    for (t, a) in &model.adapters {
        tensors.insert(format!("lora/{t}/A"), a.a.clone());
        tensors.insert(format!("lora/{t}/B"), a.b.clone());
    }
    for r in model.trainable_parameters() {
        if let ParamRef::Base(name) = r {
            tensors.insert(format!("tuned/{name}"), model.base.params().expect(&name).clone());
        }
    }
    Archive { manifest, tensors }
}

/// Rebuilds an adapted model from `base` and a checkpoint, verifying that
/// the checkpoint was produced against the same base weights.
pub fn apply_adapter_checkpoint(base: ToyModel, archive: &Archive) -> Result<AdaptedModel> {
    if archive.get("kind")? != "adapter" {
        return Err(Error::config("archive is not an adapter checkpoint"));
    }
    let mode: FinetuneMode = archive.get("mode")?.parse()?;
    let rank: usize = archive
        .get("rank")?
        .parse()
        .map_err(|_| Error::config("bad rank in checkpoint manifest"))?;
    let mut model = AdaptedModel {
        base,
        adapters: Default::default(),
        mode,
        rank,
    };
    let expected = archive.get("base_checksum")?;
    let found = model.base_checksum_untuned();
    if expected != found {
        return Err(Error::config(format!(
            "checkpoint base mismatch: manifest base_checksum={expected}, backend base_checksum={found}"
        )));
    }
    let targets = archive.get("targets")?;
    for t in targets.split(',').filter(|t| !t.is_empty()) {
        let a = archive.tensor(&format!("lora/{t}/A"))?.clone();
        let b = archive.tensor(&format!("lora/{t}/B"))?.clone();
        let w = model.base.params().require(t)?;
        if a.nrows() != w.nrows() || b.ncols() != w.ncols() || a.ncols() != b.nrows() {
            return Err(Error::config(format!("adapter `{t}` does not fit its target")));
        }
        model.adapters.insert(
            t.to_string(),
            LoraAdapter {
                target_id: t.to_string(),
                a,
                b,
            },
        );
    }
    for (k, v) in &archive.tensors {
        if let Some(name) = k.strip_prefix("tuned/") {
            let slot = model
                .base
                .params_mut()
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("tuned tensor `{name}` unknown to backend")))?;
            if slot.dim() != v.dim() {
                return Err(Error::config(format!("tuned tensor `{name}` has wrong shape")));
            }
            slot.assign(v);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_bit_exact() {
        let mut a = Archive::default();
        a.manifest.insert("mode".into(), "lora".into());
        a.tensors.insert(
            "w".into(),
            Array2::from_shape_vec((2, 2), vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        );
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(b.tensors["w"][[0, 1]].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncated_and_garbage_rejected() {
        let mut a = Archive::default();
        a.tensors.insert("w".into(), Array2::zeros((3, 3)));
        let bytes = a.to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Archive::from_bytes(b"nonsense").is_err());
    }
}
