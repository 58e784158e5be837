//! Checkpoint container: config snapshot, RNG state, string tables (text
//! vocabulary and answer vocabulary), and the named tensor table covering
//! every model parameter and the codebook.
//!
//! Layout, all little-endian:
//! `"MWCK"`, version u32, config block (u32 len + key=value text),
//! rng seed u64, rng word position u128, two string tables, then the
//! tensor table (u32 count, each entry a length-prefixed name plus one
//! MWT1 tensor record). Save∘load is identity on every byte.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::MultiwayModel;
use crate::tensor::Tensor;
use crate::text::Vocab;
use crate::vision::VqkdModel;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    /// Ordinary (non-reserved) text tokens, id order.
    pub text_tokens: Vec<String>,
    /// Answer vocabulary, id order; the option set for answer selection.
    pub answers: Vec<String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn write_string(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| fmt_err(path, format!("truncated checkpoint: {what}")))
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, path, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, path: &Path, what: &str) -> Result<String> {
    let len = read_u32(r, path, what)? as usize;
    if len > 1 << 24 {
        return Err(fmt_err(path, format!("string length {len} implausible")));
    }
    let mut buf = vec![0u8; len];
    read_exact_or(r, &mut buf, path, what)?;
    String::from_utf8(buf).map_err(|_| fmt_err(path, format!("{what} is not UTF-8")))
}

fn write_string_table(w: &mut impl Write, items: &[String]) -> std::io::Result<()> {
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for s in items {
        write_string(w, s)?;
    }
    Ok(())
}

fn read_string_table(r: &mut impl Read, path: &Path, what: &str) -> Result<Vec<String>> {
    let count = read_u32(r, path, what)? as usize;
    (0..count).map(|_| read_string(r, path, what)).collect()
}

impl Checkpoint {
    /// Snapshot the full training state.
    pub fn from_state(
        config: &RunConfig,
        rng_seed: u64,
        rng_word_pos: u128,
        vocab: &Vocab,
        answers: &[String],
        multiway: &MultiwayModel,
        vqkd: &VqkdModel,
    ) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = multiway
            .names()
            .into_iter()
            .zip(multiway.tensors().into_iter().cloned())
            .collect();
        tensors.extend(
            vqkd.names()
                .into_iter()
                .zip(vqkd.tensors().into_iter().cloned()),
        );
        Checkpoint {
            config: config.clone(),
            rng_seed,
            rng_word_pos,
            text_tokens: vocab.ordinary_tokens().to_vec(),
            answers: answers.to_vec(),
            tensors,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_tokens(self.text_tokens.clone())
    }

    /// Rebuild both models, validating every tensor name and shape against
    /// the configuration.
    pub fn models(&self) -> Result<(MultiwayModel, VqkdModel)> {
        let vocab_len = self.text_tokens.len() + crate::text::RESERVED.len();
        let mw_config = self.config.multiway_config(vocab_len, self.answers.len());
        let mut multiway = MultiwayModel::init(mw_config, 0)?;
        let mut vqkd = VqkdModel::init(self.config.vqkd_config(), 0)?;

        let mut stored: std::collections::HashMap<&str, &Tensor> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let mut restore = |names: Vec<String>, slots: Vec<&mut Tensor>| -> Result<()> {
            for (name, slot) in names.into_iter().zip(slots) {
                let Some(t) = stored.remove(name.as_str()) else {
                    return Err(Error::Config(format!("checkpoint missing tensor {name}")));
                };
                if t.shape() != slot.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "checkpoint load",
                        lhs: t.shape().to_vec(),
                        rhs: slot.shape().to_vec(),
                    });
                }
                *slot = t.clone().with_grad();
            }
            Ok(())
        };
        restore(multiway.names(), multiway.tensors_mut())?;
        restore(vqkd.names(), vqkd.tensors_mut())?;
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Config(format!(
                "checkpoint has unexpected tensor {extra}"
            )));
        }
        Ok((multiway, vqkd))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.write_all(CHECKPOINT_MAGIC).unwrap();
        buf.write_all(&CHECKPOINT_VERSION.to_le_bytes()).unwrap();
        write_string(&mut buf, &self.config.to_key_values()).unwrap();
        buf.write_all(&self.rng_seed.to_le_bytes()).unwrap();
        buf.write_all(&self.rng_word_pos.to_le_bytes()).unwrap();
        write_string_table(&mut buf, &self.text_tokens).unwrap();
        write_string_table(&mut buf, &self.answers).unwrap();
        buf.write_all(&(self.tensors.len() as u32).to_le_bytes())
            .unwrap();
        for (name, tensor) in &self.tensors {
            write_string(&mut buf, name).unwrap();
            tensor.write_to(&mut buf).unwrap();
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = bytes.as_slice();

        let mut magic = [0u8; 4];
        read_exact_or(&mut r, &mut magic, path, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt_err(path, "bad checkpoint magic (expected MWCK)"));
        }
        let version = read_u32(&mut r, path, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config_text = read_string(&mut r, path, "config block")?;
        let config = RunConfig::from_key_values(&config_text)?;
        let mut b8 = [0u8; 8];
        read_exact_or(&mut r, &mut b8, path, "rng seed")?;
        let rng_seed = u64::from_le_bytes(b8);
        let mut b16 = [0u8; 16];
        read_exact_or(&mut r, &mut b16, path, "rng position")?;
        let rng_word_pos = u128::from_le_bytes(b16);
        let text_tokens = read_string_table(&mut r, path, "text vocabulary")?;
        let answers = read_string_table(&mut r, path, "answer vocabulary")?;
        let count = read_u32(&mut r, path, "tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_string(&mut r, path, "tensor name")?;
            let tensor = Tensor::read_from(&mut r, &path.display().to_string())?;
            tensors.push((name, tensor));
        }
        if !r.is_empty() {
            return Err(fmt_err(path, "trailing bytes after tensor table"));
        }
        Ok(Checkpoint {
            config,
            rng_seed,
            rng_word_pos,
            text_tokens,
            answers,
            tensors,
        })
    }
}
