//! Flat binary archive of named matrices, used for adapter sets and
//! distilled encoder weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "RLTA"
//! version  u16      1
//! count    u32      number of entries, sorted by key
//! entry    key_len u16, key (UTF-8), rows u32, cols u32, rows·cols f64
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::SlotName;
use crate::error::{Error, Result};
use crate::model::ToyDenoiser;
use crate::params::ParamSet;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"RLTA";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, Mat>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Archive(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Mat) {
        self.entries.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<&Mat> {
        self.entries.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (key, m) in &self.entries {
            out.extend_from_slice(&(key.len() as u16).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(&m.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let key = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Archive("key is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| Error::Archive("entry too large".into()))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Archive("entry too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            entries.insert(key, Mat::from_vec(rows, cols, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Archive(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Every parameter whose name starts with `prefix`, under its full name.
    pub fn from_params(params: &ParamSet, prefix: &str) -> Self {
        let mut a = Self::new();
        for id in params.ids() {
            if params.name(id).starts_with(prefix) {
                a.insert(params.name(id), params.value(id).clone());
            }
        }
        a
    }

    /// Overwrites parameters from entries under `prefix`. Every such entry
    /// must name an existing parameter of the same shape.
    pub fn load_into(&self, params: &mut ParamSet, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (key, m) in self.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let id = params.find(key).ok_or_else(|| Error::Incompatible(format!("no parameter named {key}")))?;
            let have = params.value(id).shape();
            if have != m.shape() {
                return Err(Error::Incompatible(format!("{key}: archive {:?}, model {have:?}", m.shape())));
            }
            params.set_value(id, m.clone());
            n += 1;
        }
        Ok(n)
    }
}

/// One adapter pair for a named slot of a numbered layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub layer: usize,
    pub slot: SlotName,
    pub a: Mat,
    pub b: Mat,
    pub scale: f64,
}

impl AdapterEntry {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }
}

/// LoRA adapters keyed by `layer_index/slot_name`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub entries: Vec<AdapterEntry>,
}

impl AdapterSet {
    pub fn from_denoiser(params: &ParamSet, denoiser: &ToyDenoiser) -> Self {
        let mut entries = Vec::new();
        for layer in denoiser.attention_layers() {
            for ad in layer.adapters() {
                entries.push(AdapterEntry {
                    layer: layer.layer_index(),
                    slot: ad.slot,
                    a: params.value(ad.a).clone(),
                    b: params.value(ad.b).clone(),
                    scale: ad.scale,
                });
            }
        }
        entries.sort_by_key(|e| (e.layer, e.slot.index()));
        Self { entries }
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|e| e.a.len() + e.b.len()).sum()
    }

    pub fn to_archive(&self) -> Archive {
        let mut ar = Archive::new();
        for e in &self.entries {
            let base = format!("{}/{}", e.layer, e.slot);
            ar.insert(format!("{base}/A"), e.a.clone());
            ar.insert(format!("{base}/B"), e.b.clone());
            ar.insert(format!("{base}/scale"), Mat::scalar(e.scale));
        }
        ar
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let mut entries = Vec::new();
        for key in ar.keys().filter(|k| k.ends_with("/A")) {
            let base = &key[..key.len() - 2];
            let (layer, slot) = base
                .split_once('/')
                .ok_or_else(|| Error::Archive(format!("malformed adapter key {key}")))?;
            let layer: usize = layer.parse().map_err(|_| Error::Archive(format!("bad layer index in {key}")))?;
            let slot: SlotName = slot.parse()?;
            let get = |suffix: &str| {
                ar.get(&format!("{base}/{suffix}")).ok_or_else(|| Error::Archive(format!("{base} has no {suffix}")))
            };
            let (a, b) = (get("A")?.clone(), get("B")?.clone());
            let scale = get("scale")?;
            if scale.shape() != (1, 1) {
                return Err(Error::Archive(format!("{base}/scale is not a scalar")));
            }
            if b.cols() != a.rows() {
                return Err(Error::Archive(format!("{base}: B has {} columns for rank {}", b.cols(), a.rows())));
            }
            entries.push(AdapterEntry { layer, slot, a, b, scale: scale.to_scalar() });
        }
        entries.sort_by_key(|e| (e.layer, e.slot.index()));
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Dimension mismatches against a denoiser, one line each.
    pub fn incompatibilities(&self, denoiser: &ToyDenoiser) -> Vec<String> {
        let layers: Vec<_> = denoiser.attention_layers().collect();
        let mut report = Vec::new();
        for e in &self.entries {
            let Some(layer) = layers.iter().find(|l| l.layer_index() == e.layer) else {
                report.push(format!("layer {}: not present (model has {} layers)", e.layer, layers.len()));
                continue;
            };
            let slot = layer.slot(e.slot);
            if e.a.cols() != slot.d_in || e.b.rows() != slot.d_out {
                report.push(format!(
                    "layer {} {}: archive A {}x{}, B {}x{}; model expects d_in {}, d_out {}",
                    e.layer,
                    e.slot,
                    e.a.rows(),
                    e.a.cols(),
                    e.b.rows(),
                    e.b.cols(),
                    slot.d_in,
                    slot.d_out
                ));
            }
        }
        report
    }

    /// Attaches every adapter to the matching layer and slot.
    pub fn attach(&self, params: &mut ParamSet, denoiser: &mut ToyDenoiser) -> Result<()> {
        let report = self.incompatibilities(denoiser);
        if !report.is_empty() {
            return Err(Error::Incompatible(report.join("; ")));
        }
        for e in &self.entries {
            let block = denoiser
                .blocks_mut()
                .iter_mut()
                .find(|b| b.attn.layer_index() == e.layer)
                .expect("checked above");
            block.attn.attach_lora_weights(params, e.slot, e.a.clone(), e.b.clone(), e.scale)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_bytes_round_trip() {
        let mut a = Archive::new();
        a.insert("x/y", Mat::from_rows(&[vec![1.0, -2.5], vec![3.0, 4.0]]).unwrap());
        a.insert("s", Mat::scalar(0.25));
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(Archive::from_bytes(&bytes).unwrap(), a);
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Archive::from_bytes(&bad).is_err());
    }
}
