//! Named f32 tensor bundles (`VSWT` files) for the U-Net and the Gaussian head.
//!
//! Layout: magic `VSWT`, `u32` tensor count, then per tensor
//! `u16` name length, UTF-8 name, `u8` rank, `rank × u32` dims and the f32
//! payload; a CRC32 of everything before it closes the file.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytes::Reader;
use crate::error::{Error, Result};

const WEIGHT_MAGIC: &[u8; 4] = b"VSWT";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightBlob {
    pub tensors: Vec<NamedTensor>,
}

impl WeightBlob {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Looks up a tensor and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&NamedTensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::WeightLoad(format!("missing tensor `{name}`")))?;
        if t.shape != shape {
            return Err(Error::WeightLoad(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    /// Fails unless the blob holds exactly the listed tensors with these shapes.
    pub fn check_layout(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in expected {
            self.expect(name, shape)?;
        }
        if let Some(extra) = self
            .tensors
            .iter()
            .find(|t| !expected.iter().any(|(n, _)| *n == t.name))
        {
            return Err(Error::WeightLoad(format!("unexpected tensor `{}`", extra.name)));
        }
        Ok(())
    }

    pub fn zeros(layout: &[(String, Vec<usize>)]) -> Self {
        WeightBlob {
            tensors: layout.iter().map(|(n, s)| NamedTensor::zeros(n.clone(), s)).collect(),
        }
    }

    /// Kaiming-uniform weights (`±sqrt(6 / fan_in)`) and uniform biases
    /// (`±1 / sqrt(fan_in)`), where `fan_in` is the product of all but the last
    /// weight dimension. Tensors named `*.bias` take the fan-in of the matching weight.
    pub fn kaiming_uniform(layout: &[(String, Vec<usize>)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in_of = |shape: &[usize]| shape[..shape.len().saturating_sub(1)].iter().product::<usize>().max(1);
        let tensors = layout
            .iter()
            .map(|(name, shape)| {
                let fan_in = match name.strip_suffix(".bias") {
                    Some(stem) => layout
                        .iter()
                        .find(|(n, _)| *n == format!("{stem}.weight"))
                        .map_or(1, |(_, s)| fan_in_of(s)),
                    None => fan_in_of(shape),
                } as f32;
                let bound = if name.ends_with(".bias") {
                    1.0 / fan_in.sqrt()
                } else {
                    (6.0 / fan_in).sqrt()
                };
                let n: usize = shape.iter().product();
                NamedTensor {
                    name: name.clone(),
                    shape: shape.clone(),
                    data: (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                }
            })
            .collect();
        WeightBlob { tensors }
    }

    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.encode_body())
    }

    fn encode_body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for d in &t.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.encode_body();
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |e: Error| Error::WeightLoad(e.to_string());
        if bytes.len() < 12 {
            return Err(Error::WeightLoad("weight file too short".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::WeightLoad(format!(
                "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
            )));
        }
        let mut r = Reader::new(body);
        if r.take(4).map_err(fail)? != WEIGHT_MAGIC {
            return Err(Error::WeightLoad("missing VSWT header".into()));
        }
        let count = r.u32().map_err(fail)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u16().map_err(fail)? as usize;
            let name = std::str::from_utf8(r.take(len).map_err(fail)?)
                .map_err(|_| Error::WeightLoad("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8().map_err(fail)? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()
                .map_err(fail)?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>().map_err(fail)?;
            tensors.push(NamedTensor { name, shape, data });
        }
        r.finish().map_err(fail)?;
        Ok(WeightBlob { tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::WeightLoad(format!("{}: {e}", path.display())))?;
        WeightBlob::decode(&bytes)
    }
}
