//! Binary checkpoint: named parameters, optimizer moments and the RNG key.
//!
//! Layout, little-endian:
//! ```text
//! "BIOSTCKP" | version u16 | config hash [32] | step u64
//! | n_params u32 | n_params x tensor record
//! | n_moments u32 | n_moments x tensor record
//! | rng key [32]
//! tensor record = name_len u16 | name utf-8 | rank u8 | dims u32 x rank | f32 x prod(dims)
//! ```
//! Moment records are named `m/<param>` and `v/<param>`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, put_f32s, Reader};
use crate::tensor::Tensor;

use super::optimizer::Moment;

pub const MAGIC: &[u8; 8] = b"BIOSTCKP";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    /// Global step: phase I steps plus phase II steps completed.
    pub step: u64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub moments: Vec<Moment>,
    pub rng_key: [u8; 32],
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::format("checkpoint", format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let rank = u8::try_from(t.rank()).map_err(|_| Error::format("checkpoint", "rank above 255"))?;
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::format("checkpoint", "dimension above u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    put_f32s(out, t.data());
    Ok(())
}

fn get_tensor(r: &mut Reader<'_>) -> Result<(String, Tensor<f32>)> {
    let len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(len)?)
        .map_err(|e| Error::format("checkpoint", format!("parameter name is not utf-8: {e}")))?
        .to_string();
    let rank = r.u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let n =
        n.ok_or_else(|| Error::format("checkpoint", format!("{name}: dims {dims:?} overflow")))?;
    let data = r.f32s(n)?;
    let t = Tensor::from_vec(&dims, data)
        .map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))?;
    Ok((name, t))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_tensor(&mut out, name, t)?;
        }
        out.extend_from_slice(&(2 * self.moments.len() as u32).to_le_bytes());
        for m in &self.moments {
            put_tensor(&mut out, &format!("m/{}", m.name), &m.m)?;
            put_tensor(&mut out, &format!("v/{}", m.name), &m.v)?;
        }
        out.extend_from_slice(&self.rng_key);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if &r.array::<8>()? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let config_hash = r.array()?;
        let step = r.u64()?;
        let n = r.u32()?;
        let params = (0..n)
            .map(|_| get_tensor(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let n = r.u32()?;
        if n % 2 != 0 {
            return Err(Error::format(
                "checkpoint",
                format!("odd moment record count {n}"),
            ));
        }
        let mut moments = Vec::with_capacity(n as usize / 2);
        for _ in 0..n / 2 {
            let (mn, m) = get_tensor(&mut r)?;
            let (vn, v) = get_tensor(&mut r)?;
            let name = mn
                .strip_prefix("m/")
                .filter(|base| vn.strip_prefix("v/") == Some(*base))
                .ok_or_else(|| {
                    Error::format("checkpoint", format!("unpaired moment records {mn}, {vn}"))
                })?;
            moments.push(Moment {
                name: name.to_string(),
                m,
                v,
            });
        }
        let rng_key = r.array()?;
        if !r.is_at_end() {
            return Err(Error::format(
                "checkpoint",
                format!("trailing bytes after offset {}", r.position()),
            ));
        }
        Ok(Self {
            config_hash,
            step,
            params,
            moments,
            rng_key,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read(path)?).map_err(|e| match e {
            Error::Format { context, detail } => {
                Error::format(format!("{context} {}", path.display()), detail)
            }
            e => e,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
