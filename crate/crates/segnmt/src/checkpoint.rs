//! Binary parameter files: the magic `SEGNMT1`, a record count, then per
//! parameter its name, rank, dims and little-endian f64 values.

use std::fs;
use std::path::Path;

use segnmt_core::nmt::{Model, ModelConfig};
use segnmt_core::param::ParamStore;
use segnmt_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 7] = b"SEGNMT1";

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend((p.name.len() as u64).to_le_bytes());
        out.extend(p.name.as_bytes());
        out.extend((p.value.rank() as u64).to_le_bytes());
        for &d in p.value.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode_params(bytes: &[u8]) -> Option<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return None;
    }
    let count = r.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = usize::try_from(r.u64()?).ok()?;
        let name = std::str::from_utf8(r.take(len)?).ok()?.to_owned();
        let rank = r.u64()?;
        let shape = (0..rank).map(|_| r.u64().and_then(|d| usize::try_from(d).ok())).collect::<Option<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
        if numel > (bytes.len() - r.pos) / 8 {
            return None;
        }
        let data = (0..numel).map(|_| r.f64()).collect::<Option<Vec<_>>>()?;
        store.register(name, Tensor::new(shape, data).ok()?).ok()?;
    }
    (r.pos == bytes.len()).then_some(store)
}

/// JSON written next to the parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_hash: String,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

pub fn save(path: &Path, model: &Model, sidecar: &Sidecar) -> Result<()> {
    fs::write(path, encode_params(&model.store)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load(path: &Path) -> Result<(Model, Sidecar)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let store = decode_params(&bytes).ok_or_else(|| Error::format(path, "not a valid checkpoint"))?;
    let model = Model::from_store(sidecar.model, store).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((model, sidecar))
}
