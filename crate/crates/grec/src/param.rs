//! Named parameter registry and checkpoint persistence.
//!
//! Parameters live under dot-separated hierarchical names and iterate in
//! lexicographic order so that optimizer updates and checkpoints are
//! deterministic.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GRC1";

#[derive(Clone, Copy)]
pub enum Init {
    /// Uniform in +-sqrt(6 / (fan_in + fan_out)).
    GlorotUniform,
    Zeros,
    Ones,
}

#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn create(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!(
                "parameter name already registered: {}",
                name
            )));
        }
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::GlorotUniform => {
                let fan_in = shape[0] as f64;
                let fan_out = *shape.last().unwrap() as f64;
                let bound = (6.0 / (fan_in + fan_out)).sqrt();
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(shape.to_vec(), data)?.with_grad();
        self.params.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).cloned()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Lexicographic iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn zero_grad(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// First parameter (lexicographically) containing a NaN/Inf, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.params
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            let shape = t.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for d in &shape {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in t.value() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic bytes {:?}, expected {:?}",
                magic, MAGIC
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Checkpoint(format!("non-UTF8 name: {}", e)))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            if params
                .insert(name.clone(), Tensor::from_vec(shape, data)?.with_grad())
                .is_some()
            {
                return Err(Error::Checkpoint(format!("duplicate entry: {}", name)));
            }
        }
        Ok(ParamStore { params })
    }

    /// Copy values from `other` into this store's tensors (names and
    /// shapes must match exactly).
    pub fn load_values_from(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (name, t) in self.params.iter() {
            let src = other
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry: {}", name)))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", name)));
            }
            t.set_data(src.value())?;
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
