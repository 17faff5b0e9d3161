//! Versioned binary checkpoints.
//!
//! Layout: magic `DTMC`, version u32, architecture descriptor, then the
//! parameter vector as little-endian f64 in declaration order. All integers
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{NeuralConfig, NeuralModel, PosteriorModel, TabularModel};
use crate::seq::Vocabulary;

const MAGIC: &[u8; 4] = b"DTMC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchDescriptor {
    Tabular { vocab_size: u32, seq_len: u32 },
    Neural { vocab_size: u32, seq_len: u32, embed_dim: u32, hidden_dim: u32 },
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: ArchDescriptor,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn of_tabular(model: &TabularModel) -> Self {
        Checkpoint {
            arch: ArchDescriptor::Tabular {
                vocab_size: model.vocab().size(),
                seq_len: model.seq_len() as u32,
            },
            params: model.params().to_vec(),
        }
    }

    pub fn of_neural(model: &NeuralModel) -> Self {
        Checkpoint {
            arch: ArchDescriptor::Neural {
                vocab_size: model.vocab().size(),
                seq_len: model.seq_len() as u32,
                embed_dim: model.config().embed_dim as u32,
                hidden_dim: model.config().hidden_dim as u32,
            },
            params: model.params().to_vec(),
        }
    }

    pub fn into_neural(self) -> Result<NeuralModel> {
        match self.arch {
            ArchDescriptor::Neural { vocab_size, seq_len, embed_dim, hidden_dim } => {
                NeuralModel::from_params(
                    Vocabulary::new(vocab_size)?,
                    seq_len as usize,
                    NeuralConfig {
                        embed_dim: embed_dim as usize,
                        hidden_dim: hidden_dim as usize,
                    },
                    self.params,
                )
            }
            _ => Err(Error::Config("checkpoint does not hold a neural model".into())),
        }
    }

    pub fn into_tabular(self) -> Result<TabularModel> {
        match self.arch {
            ArchDescriptor::Tabular { vocab_size, seq_len } => {
                let mut model =
                    TabularModel::zero_logits(Vocabulary::new(vocab_size)?, seq_len as usize);
                if model.num_params() != self.params.len() {
                    return Err(Error::Config(format!(
                        "tabular checkpoint has {} params, expected {}",
                        self.params.len(),
                        model.num_params()
                    )));
                }
                model.params_mut().copy_from_slice(&self.params);
                Ok(model)
            }
            _ => Err(Error::Config("checkpoint does not hold a tabular model".into())),
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    match ckpt.arch {
        ArchDescriptor::Tabular { vocab_size, seq_len } => {
            w.write_all(&[0u8])?;
            w.write_all(&vocab_size.to_le_bytes())?;
            w.write_all(&seq_len.to_le_bytes())?;
        }
        ArchDescriptor::Neural { vocab_size, seq_len, embed_dim, hidden_dim } => {
            w.write_all(&[1u8])?;
            w.write_all(&vocab_size.to_le_bytes())?;
            w.write_all(&seq_len.to_le_bytes())?;
            w.write_all(&embed_dim.to_le_bytes())?;
            w.write_all(&hidden_dim.to_le_bytes())?;
        }
    }
    w.write_all(&(ckpt.params.len() as u64).to_le_bytes())?;
    for p in &ckpt.params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config("not a model checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Config(format!("unsupported checkpoint version {version}")));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let arch = match kind[0] {
        0 => ArchDescriptor::Tabular {
            vocab_size: read_u32(&mut r)?,
            seq_len: read_u32(&mut r)?,
        },
        1 => ArchDescriptor::Neural {
            vocab_size: read_u32(&mut r)?,
            seq_len: read_u32(&mut r)?,
            embed_dim: read_u32(&mut r)?,
            hidden_dim: read_u32(&mut r)?,
        },
        k => return Err(Error::Config(format!("unknown architecture tag {k}"))),
    };
    let n = {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        u64::from_le_bytes(buf) as usize
    };
    let mut params = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        params.push(f64::from_le_bytes(buf));
    }
    Ok(Checkpoint { arch, params })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
