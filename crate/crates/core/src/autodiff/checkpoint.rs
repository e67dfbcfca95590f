//! Flat binary container of named `f32` arrays plus a text metadata record.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"AQMVCKPT"
//! u32    version (1)
//! u64    optimiser step count
//! u32    metadata length, then that many UTF-8 bytes
//! u32    tensor count, then per tensor:
//!        u32 name length, name bytes, u32 rank, rank × u32 dims, f32 data
//! ```
//!
//! Adam moments are stored as extra tensors named `adam.m/<name>` and
//! `adam.v/<name>`.

use std::io::Write;
use std::path::Path;

use super::{Parameter, ParameterSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AQMVCKPT";
const VERSION: u32 = 1;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// Parameters, optimiser state and free-form metadata (usually TOML).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.params.step.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(3 * self.params.params.len() as u32).to_le_bytes());
        for p in &self.params.params {
            write_tensor(&mut out, &p.name, &p.value);
            write_tensor(&mut out, &format!("{M_PREFIX}{}", p.name), &p.m);
            write_tensor(&mut out, &format!("{V_PREFIX}{}", p.name), &p.v);
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.error(0, "bad magic"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Unsupported {
                path: path.to_path_buf(),
                message: format!("checkpoint version {version} at byte {at}"),
            });
        }
        let step = r.u64()?;
        let meta_len = r.u32()? as usize;
        let at = r.pos;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| r.error(at, "metadata is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut tensors: Vec<(String, Tensor, usize)> = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(r.error(at, format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.error(at, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?, at));
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes"));
        }

        let mut params = Vec::new();
        for (name, value, at) in &tensors {
            if name.starts_with(M_PREFIX) || name.starts_with(V_PREFIX) {
                continue;
            }
            if params.iter().any(|p: &Parameter| &p.name == name) {
                return Err(r.error(*at, format!("duplicate tensor {name}")));
            }
            let moment = |prefix: &str| -> Result<Tensor> {
                let key = format!("{prefix}{name}");
                match tensors.iter().find(|(n, _, _)| *n == key) {
                    Some((_, t, _)) if t.shape() == value.shape() => Ok(t.clone()),
                    Some((_, _, at2)) => Err(r.error(*at2, format!("{key} shape differs"))),
                    None => Err(r.error(*at, format!("missing {key}"))),
                }
            };
            params.push(Parameter {
                name: name.clone(),
                grad: Tensor::zeros(value.shape()),
                m: moment(M_PREFIX)?,
                v: moment(V_PREFIX)?,
                value: value.clone(),
            });
        }
        Ok(Self {
            metadata,
            params: ParameterSet { params, step },
        })
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos, format!("need {n} bytes, file ends")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Write atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile_in(dir, path)?;
    tmp.1
        .write_all(&ckpt.encode())
        .and_then(|_| tmp.1.sync_all())
        .map_err(|e| Error::io(&tmp.0, e))?;
    drop(tmp.1);
    std::fs::rename(&tmp.0, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp.0);
        Error::io(path, e)
    })
}

fn tempfile_in(dir: &Path, path: &Path) -> Result<(std::path::PathBuf, std::fs::File)> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    Ok((tmp, f))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, path)
}
