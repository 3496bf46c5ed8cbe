//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic "CDKD" | version u32 | epoch u32 | config length u32 | config UTF-8
//! tensor count u32
//! per tensor: name length u32 | name | role u8 | dtype u8 | rank u32
//!             | dims u32 × rank | payload
//! ```
//!
//! Tensors are written in name order and the only dtype is `1` (f64), so
//! loading and saving again reproduces the file byte for byte.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use cdkd_core::params::{ParamSet, Role};

use crate::error::{HarnessError, Result};

const MAGIC: &[u8; 4] = b"CDKD";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: u32,
    /// Resolved configuration of the producing run.
    pub config: String,
    pub params: ParamSet,
}

fn len_u32(n: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| HarnessError::Checkpoint(format!("{what} {n} does not fit the format")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&len_u32(self.config.len(), "config length")?);
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&len_u32(self.params.len(), "tensor count")?);
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&len_u32(name.len(), "name length")?);
            out.extend_from_slice(name.as_bytes());
            out.push(p.role.code());
            out.push(DTYPE_F64);
            out.extend_from_slice(&len_u32(p.shape.len(), "rank")?);
            for &d in &p.shape {
                out.extend_from_slice(&len_u32(d, "dimension")?);
            }
            for v in p.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| HarnessError::Checkpoint(format!("truncated or corrupt: {what}"));
        let mut r = Cursor::new(bytes);
        let u32_at = |r: &mut Cursor<&[u8]>, what: &str| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| corrupt(what))?;
            Ok(u32::from_le_bytes(b))
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("magic"))?;
        if &magic != MAGIC {
            return Err(HarnessError::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = u32_at(&mut r, "version")?;
        if version != FORMAT_VERSION {
            return Err(HarnessError::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let epoch = u32_at(&mut r, "epoch")?;
        let clen = u32_at(&mut r, "config length")? as usize;
        let mut cbytes = vec![0u8; clen];
        r.read_exact(&mut cbytes).map_err(|_| corrupt("config"))?;
        let config = String::from_utf8(cbytes).map_err(|_| corrupt("config is not UTF-8"))?;
        let count = u32_at(&mut r, "tensor count")?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let nlen = u32_at(&mut r, "name length")? as usize;
            let mut nbytes = vec![0u8; nlen];
            r.read_exact(&mut nbytes).map_err(|_| corrupt("name"))?;
            let name = String::from_utf8(nbytes).map_err(|_| corrupt("name is not UTF-8"))?;
            let mut tag = [0u8; 2];
            r.read_exact(&mut tag).map_err(|_| corrupt("role"))?;
            let role = Role::from_code(tag[0])
                .ok_or_else(|| HarnessError::Checkpoint(format!("`{name}` has unknown role {}", tag[0])))?;
            if tag[1] != DTYPE_F64 {
                return Err(HarnessError::Checkpoint(format!("`{name}` has unknown dtype {}", tag[1])));
            }
            let rank = u32_at(&mut r, "rank")? as usize;
            let shape = (0..rank)
                .map(|_| u32_at(&mut r, "dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut payload = vec![0u8; 8 * n];
            r.read_exact(&mut payload).map_err(|_| corrupt("payload"))?;
            let values = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params
                .insert(&name, role, &shape, values)
                .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        }
        if (r.position() as usize) != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { epoch, config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| HarnessError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Copy keeping only the backbone and head tensors.
    pub fn stripped(&self) -> Self {
        Self {
            epoch: self.epoch,
            config: self.config.clone(),
            params: self.params.with_roles(&Role::INFERENCE),
        }
    }
}
