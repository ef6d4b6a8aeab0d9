use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VXC1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint is truncated or malformed: {0}")]
    Malformed(String),
    #[error("checkpoint has no tensor named {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint config does not match the requested config")]
    ConfigMismatch,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Config text plus named tensors, values rounded to `f32` on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(config: impl Into<String>, store: &ParamStore) -> Self {
        Checkpoint {
            config: config.into(),
            tensors: store
                .iter()
                .map(|(n, t)| (n.to_string(), t.rounded_f32()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `store` from the checkpoint by name.
    pub fn restore(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self
                .get(&name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            let expected = store.get(id).shape().to_vec();
            if t.shape() != expected.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected,
                    found: t.shape().to_vec(),
                });
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn expect_config(&self, config: &str) -> Result<(), CheckpointError> {
        if self.config == config {
            Ok(())
        } else {
            Err(CheckpointError::ConfigMismatch)
        }
    }

    pub fn write(&self, mut out: impl Write) -> io::Result<()> {
        out.write_all(MAGIC)?;
        write_bytes(&mut out, self.config.as_bytes())?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_bytes(&mut out, name.as_bytes())?;
            out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(mut input: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let config = read_string(&mut input, "config")?;
        let count = read_u32(&mut input, "tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = read_string(&mut input, "tensor name")?;
            let rank = read_u32(&mut input, "rank")?;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                input.read_exact(&mut b).map_err(|_| malformed("dims"))?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            input.read_exact(&mut raw).map_err(|_| malformed(&name))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| malformed(&e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Checkpoint { config, tensors })
    }
}

fn malformed(what: &str) -> CheckpointError {
    CheckpointError::Malformed(what.to_string())
}

fn write_bytes(out: &mut impl Write, b: &[u8]) -> io::Result<()> {
    out.write_all(&(b.len() as u32).to_le_bytes())?;
    out.write_all(b)
}

fn read_u32(input: &mut impl Read, what: &str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(|_| malformed(what))?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(input: &mut impl Read, what: &str) -> Result<String, CheckpointError> {
    let len = read_u32(input, what)? as usize;
    let mut b = vec![0u8; len];
    input.read_exact(&mut b).map_err(|_| malformed(what))?;
    String::from_utf8(b).map_err(|_| malformed(what))
}

/// Writes the checkpoint through a temporary sibling file and a rename.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    ckpt.write(&mut bytes)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    Checkpoint::read(bytes.as_slice())
}
