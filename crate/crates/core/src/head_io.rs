//! Versioned binary format for trained heads.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DPHD"            magic
//! u32               format version (1)
//! u8                kind: 1 classifier, 2 segmentation ensemble
//! u32 n, n×(u32,u32) feature provenance (block, timestep)
//! u32 n, n×u64       member seeds (segmentation only, else 0)
//! u32 n tensors, each:
//!     u16 name length, UTF-8 name
//!     u8 rank, rank×u32 dims
//!     f64 data, row-major
//! [u8; 32]          SHA-256 of everything above
//! ```

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayViewD;
use sha2::{Digest, Sha256};

use crate::backbone::BlockSpec;
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::probes::{ClassifierHead, PixelMlp, SegmentationEnsemble, StateDict, ENSEMBLE_SIZE, NUM_CLASSES};

const MAGIC: &[u8; 4] = b"DPHD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Classifier(ClassifierHead),
    Segmentation(SegmentationEnsemble),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCheckpoint {
    pub head: Head,
    pub provenance: Vec<BlockSpec>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::HeadFormat(msg.into())
}

fn write_tensors(out: &mut Vec<u8>, tensors: &[(String, ArrayViewD<'_, f64>)]) -> Result<()> {
    out.write_u32::<LE>(tensors.len() as u32)?;
    for (name, t) in tensors {
        out.write_u16::<LE>(name.len() as u16)?;
        out.write_all(name.as_bytes())?;
        out.write_u8(t.ndim() as u8)?;
        for &d in t.shape() {
            out.write_u32::<LE>(d as u32)?;
        }
        for &v in t.iter() {
            out.write_f64::<LE>(v)?;
        }
    }
    Ok(())
}

struct RawTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn read_tensors(cur: &mut Cursor<&[u8]>) -> Result<Vec<RawTensor>> {
    let n = cur.read_u32::<LE>()? as usize;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let len = cur.read_u16::<LE>()? as usize;
        let mut name = vec![0u8; len];
        cur.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = cur.read_u8()? as usize;
        let shape = (0..rank)
            .map(|_| cur.read_u32::<LE>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let remaining = cur.get_ref().len() - cur.position() as usize;
        if count.saturating_mul(8) > remaining {
            return Err(bad(format!("tensor {name} overruns the file")));
        }
        let mut data = vec![0.0; count];
        cur.read_f64_into::<LE>(&mut data)?;
        out.push(RawTensor { name, shape, data });
    }
    Ok(out)
}

fn fill<M: StateDict>(model: &mut M, prefix: &str, tensors: &[RawTensor]) -> Result<()> {
    let mut state = Vec::new();
    model.visit_state_mut(prefix, &mut state);
    for (name, mut dst) in state {
        let src = tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if src.shape != dst.shape() {
            return Err(bad(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                src.shape,
                dst.shape()
            )));
        }
        for (d, &s) in dst.iter_mut().zip(&src.data) {
            *d = s;
        }
    }
    Ok(())
}

impl HeadCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(FORMAT_VERSION)?;
        let (kind, seeds): (u8, &[u64]) = match &self.head {
            Head::Classifier(_) => (1, &[]),
            Head::Segmentation(e) => (2, &e.member_seeds),
        };
        out.write_u8(kind)?;
        out.write_u32::<LE>(self.provenance.len() as u32)?;
        for spec in &self.provenance {
            out.write_u32::<LE>(spec.block as u32)?;
            out.write_u32::<LE>(spec.timestep as u32)?;
        }
        out.write_u32::<LE>(seeds.len() as u32)?;
        for &s in seeds {
            out.write_u64::<LE>(s)?;
        }
        let tensors = match &self.head {
            Head::Classifier(h) => h.state(),
            Head::Segmentation(e) => {
                let mut all = Vec::new();
                for (i, m) in e.members.iter().enumerate() {
                    let p = format!("member{i}");
                    m.visit(&p, &mut all);
                    m.buffers(&p, &mut all);
                }
                all
            }
        };
        write_tensors(&mut out, &tensors)?;
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("not a head checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut cur = Cursor::new(body);
        cur.set_position(4);
        let version = cur.read_u32::<LE>()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let kind = cur.read_u8()?;
        let n = cur.read_u32::<LE>()? as usize;
        let provenance = (0..n)
            .map(|_| -> Result<BlockSpec> {
                let b = cur.read_u32::<LE>()? as usize;
                let t = cur.read_u32::<LE>()? as usize;
                Ok(BlockSpec::new(b, t))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = cur.read_u32::<LE>()? as usize;
        let seeds = (0..n)
            .map(|_| cur.read_u64::<LE>())
            .collect::<std::io::Result<Vec<_>>>()?;
        let tensors = read_tensors(&mut cur)?;
        if (cur.position() as usize) != body.len() {
            return Err(bad("trailing bytes after tensors"));
        }
        let head = match kind {
            1 => {
                let mut h = ClassifierHead::zeros();
                fill(&mut h, "", &tensors)?;
                Head::Classifier(h)
            }
            2 => {
                if seeds.len() != ENSEMBLE_SIZE {
                    return Err(bad(format!("ensemble has {} members", seeds.len())));
                }
                let first = tensors
                    .iter()
                    .find(|t| t.name == "member0.dense1.weight")
                    .ok_or_else(|| bad("missing tensor member0.dense1.weight"))?;
                let [hidden, dim] = first.shape[..] else {
                    return Err(bad("member0.dense1.weight is not a matrix"));
                };
                let mut members = Vec::with_capacity(ENSEMBLE_SIZE);
                for i in 0..ENSEMBLE_SIZE {
                    let mut m = PixelMlp::new(dim, hidden, 0);
                    fill(&mut m, &format!("member{i}"), &tensors)?;
                    if m.dense3.weight.nrows() != NUM_CLASSES {
                        return Err(bad("member output is not 5 classes"));
                    }
                    members.push(m);
                }
                Head::Segmentation(SegmentationEnsemble {
                    members,
                    member_seeds: seeds,
                })
            }
            k => return Err(bad(format!("unknown head kind {k}"))),
        };
        Ok(Self { head, provenance })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_roundtrip() {
        let mut h = ClassifierHead::new(4);
        h.bn1.running_mean.fill(0.25);
        let ck = HeadCheckpoint {
            head: Head::Classifier(h),
            provenance: vec![BlockSpec::new(6, 100)],
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(HeadCheckpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn ensemble_roundtrip_via_file() {
        let e = SegmentationEnsemble::new(12, 16, &[1, 2, 3, 4, 5]).unwrap();
        let ck = HeadCheckpoint {
            head: Head::Segmentation(e),
            provenance: vec![BlockSpec::new(6, 100), BlockSpec::new(8, 100)],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.head");
        ck.save(&path).unwrap();
        assert_eq!(HeadCheckpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corruption_is_detected() {
        let ck = HeadCheckpoint {
            head: Head::Classifier(ClassifierHead::new(0)),
            provenance: vec![],
        };
        let mut bytes = ck.to_bytes().unwrap();
        bytes[100] ^= 1;
        assert!(matches!(HeadCheckpoint::from_bytes(&bytes), Err(Error::HeadFormat(_))));
        assert!(HeadCheckpoint::from_bytes(b"nope").is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            HeadCheckpoint::load(&dir.path().join("x")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
