//! Checkpoint archives.
//!
//! A checkpoint is a single safetensors file. Tensors are namespaced
//! `gen.*`, `disc.*`, `opt_g.{m,v}.*` and `opt_d.{m,v}.*`; the header
//! metadata carries the full run config (JSON), the step counter, optimizer
//! step counts and the best validation record.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::config::TrainConfig;
use crate::error::{Error, IoContext, Result};

pub const FORMAT_TAG: &str = "vocl-checkpoint/1";
pub const LATEST_POINTER: &str = "latest";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor>,
    pub extra: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Tensors under `prefix.` with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            owned.push((name.clone(), t.dims().to_vec(), bytes));
        }
        let views = owned
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta: HashMap<String, String> = self.extra.clone().into_iter().collect();
        meta.insert("format".into(), FORMAT_TAG.into());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("config".into(), serde_json::to_string(&self.config)?);
        let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).at(parent)?;
        }
        // write-then-rename so a crash never leaves a truncated archive
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, bytes).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut extra: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .ok_or_else(|| bad("no metadata".into()))?
            .into_iter()
            .collect();
        match extra.remove("format").as_deref() {
            Some(FORMAT_TAG) => {}
            other => return Err(bad(format!("unsupported format tag {other:?}"))),
        }
        let step = extra
            .remove("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing step".into()))?;
        let config: TrainConfig = serde_json::from_str(&extra.remove("config").ok_or_else(|| bad("missing config".into()))?)?;

        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!("tensor `{name}` is not f32")));
            }
            let data: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::from_vec(data, view.shape(), &Device::Cpu)?);
        }
        Ok(Self {
            config,
            step,
            tensors,
            extra,
        })
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step}.bin")
}

/// Records `file_name` as the latest checkpoint in `out_dir`.
pub fn write_latest(out_dir: &Path, file_name: &str) -> Result<()> {
    let p = out_dir.join(LATEST_POINTER);
    fs::write(&p, format!("{file_name}\n")).at(&p)
}

pub fn read_latest(out_dir: &Path) -> Result<Option<PathBuf>> {
    let p = out_dir.join(LATEST_POINTER);
    if !p.exists() {
        return Ok(None);
    }
    let name = fs::read_to_string(&p).at(&p)?;
    Ok(Some(out_dir.join(name.trim())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "gen.w".to_string(),
            Tensor::from_vec(vec![1.5f32, -2.0, 3.25, f32::MIN_POSITIVE], (2, 2), &Device::Cpu).unwrap(),
        );
        tensors.insert("disc.b".to_string(), Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap());
        let mut extra = BTreeMap::new();
        extra.insert("note".to_string(), "x".to_string());
        let ck = Checkpoint {
            config: TrainConfig::tiny(),
            step: 42,
            tensors,
            extra,
        };
        let path = dir.path().join(checkpoint_name(42));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.extra, ck.extra);
        let g = back.group("gen");
        assert_eq!(
            g["w"].flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![1.5, -2.0, 3.25, f32::MIN_POSITIVE]
        );
        write_latest(dir.path(), &checkpoint_name(42)).unwrap();
        assert_eq!(read_latest(dir.path()).unwrap().unwrap(), path);
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"\x08\0\0\0\0\0\0\0{}      ").unwrap();
        assert!(Checkpoint::load(&path).is_err());
        assert!(Checkpoint::load(&dir.path().join("missing.bin")).is_err());
    }
}
