//! `TENM` checkpoints.
//!
//! ```text
//! magic "TENM" | version u16 = 1
//! repeated until end of file:
//!   name_len u16 | name bytes (UTF-8) | rows u32 | cols u32 | rows*cols f64 LE
//! ```
//!
//! Single-dataset checkpoints hold `w_proj b_proj codebook smoothing w_fc
//! b_fc`; joint ones hold `w_proj b_proj` and the four head tensors prefixed
//! with `a.` and `b.`. An optional 1x1 `normalize` tensor records the
//! normalization mode (0 global, 1 per codeword).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::joint::{JointNetwork, JOINT_TENSOR_NAMES};
use super::{EncodingHead, NetworkParams, TENSOR_NAMES};
use crate::data::ByteReader;
use crate::encoding::{Codebook, NormalizeMode, SmoothingFactors};
use crate::error::{Error, Result};
use crate::matrix::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TENM";
pub const CHECKPOINT_VERSION: u16 = 1;
const NORMALIZE_TENSOR: &str = "normalize";

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Single {
        params: NetworkParams,
        normalize: NormalizeMode,
    },
    Joint {
        net: JointNetwork,
        normalize: NormalizeMode,
    },
}

impl Checkpoint {
    pub fn normalize(&self) -> NormalizeMode {
        match self {
            Checkpoint::Single { normalize, .. } | Checkpoint::Joint { normalize, .. } => *normalize,
        }
    }

    /// Network for head `which` (ignored for single checkpoints).
    pub fn head(&self, which: usize) -> Result<NetworkParams> {
        match self {
            Checkpoint::Single { params, .. } => Ok(params.clone()),
            Checkpoint::Joint { net, .. } if which < 2 => Ok(net.head_params(which)),
            Checkpoint::Joint { .. } => Err(Error::Argument(format!("joint checkpoint has no head {which}"))),
        }
    }

    fn named_tensors(&self) -> Vec<(String, Mat)> {
        let mut out: Vec<(String, Mat)> = match self {
            Checkpoint::Single { params, .. } => TENSOR_NAMES
                .iter()
                .zip(params.tensors())
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            Checkpoint::Joint { net, .. } => JOINT_TENSOR_NAMES
                .iter()
                .zip(net.tensors())
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        };
        let code = match self.normalize() {
            NormalizeMode::Global => 0.0,
            NormalizeMode::PerCodeword => 1.0,
        };
        out.push((NORMALIZE_TENSOR.to_string(), Mat::filled(1, 1, code)));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.named_tensors();
        let refs: Vec<(&str, &Mat)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        encode_tensors(&refs)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let tensors = decode_tensors(bytes, origin)?;
        let mut map: BTreeMap<String, Mat> = BTreeMap::new();
        for (name, t) in tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::Format {
                    path: origin.to_string(),
                    offset: 0,
                    detail: format!("duplicate tensor {name:?}"),
                });
            }
        }
        let missing = |name: &str| Error::Format {
            path: origin.to_string(),
            offset: 0,
            detail: format!("missing tensor {name:?}"),
        };
        let normalize = match map.remove(NORMALIZE_TENSOR) {
            None => NormalizeMode::Global,
            Some(t) if t.as_slice() == [0.0] => NormalizeMode::Global,
            Some(t) if t.as_slice() == [1.0] => NormalizeMode::PerCodeword,
            Some(_) => {
                return Err(Error::Format {
                    path: origin.to_string(),
                    offset: 0,
                    detail: "normalize tensor must be 1x1 holding 0 or 1".into(),
                })
            }
        };
        let joint = map.contains_key("a.codebook");
        let mut take = |name: &str| map.remove(name).ok_or_else(|| missing(name));
        let ck = if joint {
            let w_proj = take("w_proj")?;
            let b_proj = take("b_proj")?;
            let head_a = read_head(&mut take, "a.")?;
            let head_b = read_head(&mut take, "b.")?;
            let net = JointNetwork {
                w_proj,
                b_proj,
                heads: [head_a, head_b],
            };
            net.validate()?;
            Checkpoint::Joint { net, normalize }
        } else {
            let w_proj = take("w_proj")?;
            let b_proj = take("b_proj")?;
            let head = read_head(&mut take, "")?;
            let params = NetworkParams { w_proj, b_proj, head };
            params.validate()?;
            Checkpoint::Single { params, normalize }
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format {
                path: origin.to_string(),
                offset: 0,
                detail: format!("unexpected tensor {extra:?}"),
            });
        }
        Ok(ck)
    }
}

fn read_head(take: &mut impl FnMut(&str) -> Result<Mat>, prefix: &str) -> Result<EncodingHead> {
    Ok(EncodingHead {
        codebook: Codebook::new(take(&format!("{prefix}codebook"))?)?,
        smoothing: SmoothingFactors::new(take(&format!("{prefix}smoothing"))?)?,
        w_fc: take(&format!("{prefix}w_fc"))?,
        b_fc: take(&format!("{prefix}b_fc"))?,
    })
}

/// Writes named tensors in the `TENM` layout.
pub fn encode_tensors(tensors: &[(&str, &Mat)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Argument(format!("tensor name too long: {} bytes", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8], origin: &str) -> Result<Vec<(String, Mat)>> {
    let mut rd = ByteReader::new(bytes, origin);
    let magic = rd.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(rd.error_at(0, format!("bad magic {magic:?}, expected \"TENM\"")));
    }
    let version = rd.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: origin.to_string(),
            kind: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut out = Vec::new();
    while rd.remaining() > 0 {
        let start = rd.pos;
        let len = rd.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(rd.take(len, "tensor name")?)
            .map_err(|_| rd.error_at(start + 2, "tensor name is not UTF-8".into()))?
            .to_string();
        let rows = rd.u32("rows")? as usize;
        let cols = rd.u32("cols")? as usize;
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= rd.remaining()))
            .ok_or_else(|| {
                rd.error_at(
                    rd.pos,
                    format!("truncated tensor {name:?}: {rows}x{cols} values do not fit"),
                )
            })?;
        let body = rd.pos;
        let mut data = Vec::with_capacity(count);
        for j in 0..count {
            let v = rd.f64("tensor value")?;
            if !v.is_finite() {
                return Err(rd.error_at(body + 8 * j, format!("tensor {name:?} holds a non-finite value")));
            }
            data.push(v);
        }
        out.push((name, Mat::from_vec(rows, cols, data)?));
    }
    Ok(out)
}

pub fn write_tensors(path: impl AsRef<Path>, tensors: &[(&str, &Mat)]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensors(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Mat)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes, &path.display().to_string())
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ck.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}
