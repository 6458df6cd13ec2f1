//! `CNDSR1` checkpoints: named f32 tensors, a JSON config echo, the seed and
//! the epoch counter.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::backbone::FrozenModel;
use crate::binio::{put_f32s, put_u32, Reader};
use crate::condenser::{self, Condenser};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::profile::ModelDims;

const MAGIC: &[u8; 7] = b"CNDSR1\n";

/// JSON blob stored next to the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub dims: ModelDims,
    /// Absent for backbone-only checkpoints.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Free-form context from the caller, such as file paths.
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub echo: ConfigEcho,
    pub frozen: FrozenModel,
    pub condenser: Option<Condenser>,
    pub seed: u64,
    pub epoch: u32,
}

impl Checkpoint {
    pub fn dims(&self) -> &ModelDims {
        &self.echo.dims
    }

    /// The trained Condenser, or a config error for backbone-only files.
    pub fn require_condenser(&self) -> Result<&Condenser> {
        self.condenser
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint holds no Condenser; train one first".into()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut params = self.frozen.to_params();
        if let Some(c) = &self.condenser {
            params.extend(c.params.clone());
        }
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, params.len());
        for (name, t) in params.iter() {
            put_u32(&mut out, name.len());
            out.extend(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.dims() {
                put_u32(&mut out, d);
            }
            put_f32s(&mut out, t.data());
        }
        let echo = serde_json::to_string(&self.echo).map_err(|e| Error::Format(e.to_string()))?;
        put_u32(&mut out, echo.len());
        out.extend(echo.as_bytes());
        out.extend(self.seed.to_le_bytes());
        out.extend(self.epoch.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, echo, seed, epoch) = parse(bytes).map_err(Error::Format)?;
        let dims = echo.dims;
        dims.validate()?;
        let frozen_names = FrozenModel::seeded(dims, 0)?.to_params();
        let cond_names = condenser::init_params::<f32>(&dims, 0);
        if let Some(unknown) = params
            .names()
            .find(|n| !frozen_names.contains(n) && !cond_names.contains(n))
        {
            return Err(Error::Tensor {
                name: unknown.to_string(),
                reason: "unknown tensor name".into(),
            });
        }
        let frozen = FrozenModel::from_params(dims, &params)?;
        let cond = params.with_prefix(&format!("{}/", condenser::PREFIX));
        let condenser = if cond.is_empty() {
            None
        } else {
            Some(Condenser::from_params(dims, cond)?)
        };
        Ok(Self {
            echo,
            frozen,
            condenser,
            seed,
            epoch,
        })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

type Parsed = (ParamStore<f32>, ConfigEcho, u64, u32);

fn parse(bytes: &[u8]) -> std::result::Result<Parsed, String> {
    let mut r = Reader::new(bytes);
    let magic = r.take(MAGIC.len()).map_err(|_| "file too short for a CNDSR1 header".to_string())?;
    if magic != MAGIC {
        return Err("bad magic: not a CNDSR1 checkpoint".into());
    }
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = r.utf8(len)?.to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor size overflow")?;
        let t = Tensor::new(dims, r.f32s(n)?).map_err(|e| e.to_string())?;
        if params.contains(&name) {
            return Err(format!("duplicate tensor `{name}`"));
        }
        params.insert(name, t);
    }
    let len = r.u32()? as usize;
    let echo: ConfigEcho = serde_json::from_str(r.utf8(len)?).map_err(|e| format!("config echo: {e}"))?;
    let seed = r.u64()?;
    let epoch = r.u32()?;
    if r.remaining() != 0 {
        return Err(format!("{} trailing bytes", r.remaining()));
    }
    Ok((params, echo, seed, epoch))
}

/// Writes `bytes` to `path` via a temp file in the same directory, so a
/// failure never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
