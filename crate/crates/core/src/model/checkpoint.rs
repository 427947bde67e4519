//! `WPSCKPT1` checkpoint: student, teacher and momentum tensors plus the
//! resolved run configuration.
//!
//! Layout (little-endian):
//! ```text
//! magic[8] version:u32 step:u64 num_classes:u32 config_len:u32 config[config_len]
//! n_tensors:u32 { name_len:u16 name ndim:u8 dims:u32*ndim offset:u64 }*
//! payload: f32 values, offsets relative to payload start
//! ```

use std::fs;
use std::path::Path;

use super::{ParamSet, ParamTensor, Role, PARAM_NAMES};
use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 8] = b"WPSCKPT1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_json: String,
    pub student: ParamSet<f32>,
    pub teacher: ParamSet<f32>,
    pub momentum: ParamSet<f32>,
}

const GROUPS: [&str; 3] = ["student", "teacher", "momentum"];

impl Checkpoint {
    fn groups(&self) -> [&ParamSet<f32>; 3] {
        [&self.student, &self.teacher, &self.momentum]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.student.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());

        let n = GROUPS.len() * PARAM_NAMES.len();
        out.extend_from_slice(&(n as u32).to_le_bytes());
        let mut offset = 0u64;
        for (group, set) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in set.named() {
                let full = format!("{group}.{name}");
                out.extend_from_slice(&(full.len() as u16).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.push(t.shape.len() as u8);
                for &d in &t.shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                out.extend_from_slice(&offset.to_le_bytes());
                offset += 4 * t.data.len() as u64;
            }
        }
        for set in self.groups() {
            for t in &set.tensors {
                out.extend(t.data.iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != CKPT_MAGIC {
            return Err(Error::MagicMismatch {
                path: path.into(),
                expected: String::from_utf8_lossy(CKPT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.into(),
                expected: CKPT_VERSION,
                found: version,
            });
        }
        let step = r.u64()?;
        let num_classes = r.u32()? as usize;
        if !(1..=255).contains(&num_classes) {
            return Err(r.bad(format!("num_classes {num_classes}")));
        }
        let cfg_len = r.u32()? as usize;
        let config_json = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| r.bad("config is not UTF-8".into()))?;

        let n = r.u32()? as usize;
        let expected_n = GROUPS.len() * PARAM_NAMES.len();
        if n != expected_n {
            return Err(r.bad(format!("{n} tensors in directory, expected {expected_n}")));
        }
        let mut dir = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.bad("tensor name is not UTF-8".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let offset = r.u64()?;
            dir.push((name, shape, offset));
        }
        let payload_start = r.pos;

        let mut sets: Vec<ParamSet<f32>> = Vec::with_capacity(3);
        let mut it = dir.into_iter();
        for (g, group) in GROUPS.iter().enumerate() {
            let mut set = ParamSet::<f32>::zeros(num_classes, if g == 1 { Role::Teacher } else { Role::Student });
            for (slot, pname) in set.tensors.iter_mut().zip(PARAM_NAMES) {
                let (name, shape, offset) = it.next().expect("directory length checked");
                if name != format!("{group}.{pname}") {
                    return Err(r.bad(format!("unexpected tensor {name:?}, wanted {group}.{pname}")));
                }
                if shape != slot.shape {
                    return Err(r.bad(format!("{name}: shape {shape:?}, expected {:?}", slot.shape)));
                }
                let start = payload_start as u64 + offset;
                let end = start + 4 * slot.data.len() as u64;
                if end > bytes.len() as u64 {
                    return Err(Error::Truncated {
                        path: path.into(),
                        offset: start,
                        expected: end,
                        actual: bytes.len() as u64,
                    });
                }
                *slot = ParamTensor {
                    shape,
                    data: bytes[start as usize..end as usize]
                        .chunks_exact(4)
                        .map(|q| f32::from_le_bytes(q.try_into().unwrap()))
                        .collect(),
                };
            }
            sets.push(set);
        }
        let expected_len = payload_start as u64 + 4 * 3 * sets[0].num_params() as u64;
        if (bytes.len() as u64) != expected_len {
            return Err(r.bad(format!("file is {} bytes, expected {expected_len}", bytes.len())));
        }
        let momentum = sets.pop().unwrap();
        let teacher = sets.pop().unwrap();
        let student = sets.pop().unwrap();
        Ok(Self {
            step,
            config_json,
            student,
            teacher,
            momentum,
        })
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.into(),
                offset: self.pos as u64,
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bad(&self, reason: String) -> Error {
        Error::Format {
            path: self.path.into(),
            reason,
        }
    }
}
