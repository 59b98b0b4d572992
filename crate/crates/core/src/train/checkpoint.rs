//! Binary checkpoint format.
//!
//! ```text
//! "LVCK" | version u8 | mode u8 | 2 reserved
//! config_len u32 | config text (UTF-8 `key = value` lines)
//! tensor_count u32 | tensor records
//! has_optimizer u8 | [step u64 | moment_count u32 | moment records]
//! rng seed [u8; 32] | rng stream u64 | rng word position u128
//! ```
//!
//! A tensor record is `name_len u16 | name | rank u8 | dims u32… | data_len
//! u64 | data f64…`; a moment record is `name_len u16 | name | data_len u64 |
//! m f64… | v f64…`. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Mode, Moments, TrainConfig, Trainer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LVCK";
pub const CHECKPOINT_VERSION: u8 = 1;

fn mode_byte(mode: Mode) -> u8 {
    match mode {
        Mode::Joint => 0,
        Mode::TamOnly => 1,
        Mode::RouterOnly => 2,
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("name {name:?} too long")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, trainer: &Trainer) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&[CHECKPOINT_VERSION, mode_byte(trainer.mode), 0, 0]);
    let text = trainer.model.config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    let store = &trainer.model.store;
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, tensor) in store.iter() {
        put_name(&mut out, name)?;
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(tensor.numel() as u64).to_le_bytes());
        put_f64s(&mut out, tensor.data());
    }

    let opt = &trainer.optimizer;
    out.push(1);
    out.extend_from_slice(&opt.step.to_le_bytes());
    out.extend_from_slice(&(opt.moments.len() as u32).to_le_bytes());
    for (name, m) in &opt.moments {
        put_name(&mut out, name)?;
        out.extend_from_slice(&(m.m.len() as u64).to_le_bytes());
        put_f64s(&mut out, &m.m);
        put_f64s(&mut out, &m.v);
    }

    out.extend_from_slice(&trainer.rng.get_seed());
    out.extend_from_slice(&trainer.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&trainer.rng.get_word_pos().to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Corruption(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().expect("16 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16("name length")? as usize;
        String::from_utf8(self.take(len, "name")?.to_vec()).map_err(|_| Error::Corruption("name is not UTF-8".into()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Corruption(format!("{what} length overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Rebuilds a trainer from a checkpoint. The model is constructed from the
/// stored configuration and every parameter is then overwritten by name.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing LVCK magic".into()));
    }
    r.at = 4;
    let version = r.u8("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mode = match r.u8("mode")? {
        0 => Mode::Joint,
        1 => Mode::TamOnly,
        2 => Mode::RouterOnly,
        b => return Err(Error::Format(format!("unknown mode byte {b}"))),
    };
    r.take(2, "reserved bytes")?;
    let text_len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(text_len, "config")?)
        .map_err(|_| Error::Corruption("config is not UTF-8".into()))?;
    let config = TrainConfig::parse(text)?;
    let mut trainer = Trainer::new(&config, mode)?;

    let count = r.u32("tensor count")? as usize;
    let mut seen = vec![false; trainer.model.store.len()];
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let data_len = r.u64("data length")? as usize;
        if data_len != dims.iter().product::<usize>() {
            return Err(Error::Corruption(format!(
                "tensor {name:?} declares {data_len} values for shape {dims:?}"
            )));
        }
        let data = r.f64s(data_len, "tensor data")?;
        let id = trainer
            .model
            .store
            .lookup(&name)
            .ok_or_else(|| Error::Schema(format!("checkpoint tensor {name:?} is not a model parameter")))?;
        let tensor = trainer.model.store.get_mut(id);
        if tensor.shape() != dims.as_slice() {
            return Err(Error::Schema(format!(
                "tensor {name:?} has shape {dims:?}, model expects {:?}",
                tensor.shape()
            )));
        }
        tensor
            .assign(&data)
            .map_err(|e| Error::Corruption(format!("tensor {name:?}: {e}")))?;
        seen[id.0] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let id = trainer.model.store.ids().nth(i).expect("index in range");
        return Err(Error::Schema(format!(
            "checkpoint is missing tensor {:?}",
            trainer.model.store.name(id)
        )));
    }

    match r.u8("optimizer flag")? {
        0 => {}
        1 => {
            trainer.optimizer.step = r.u64("optimizer step")?;
            let n = r.u32("moment count")? as usize;
            for _ in 0..n {
                let name = r.name()?;
                let len = r.u64("moment length")? as usize;
                let expected = trainer
                    .model
                    .store
                    .lookup(&name)
                    .map(|id| trainer.model.store.get(id).numel())
                    .ok_or_else(|| Error::Schema(format!("moments for unknown parameter {name:?}")))?;
                if len != expected {
                    return Err(Error::Corruption(format!(
                        "moments of {name:?} have {len} values, parameter has {expected}"
                    )));
                }
                let m = r.f64s(len, "first moments")?;
                let v = r.f64s(len, "second moments")?;
                trainer.optimizer.moments.insert(name, Moments { m, v });
            }
        }
        b => return Err(Error::Format(format!("bad optimizer flag {b}"))),
    }

    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
    let stream = r.u64("rng stream")?;
    let word_pos = r.u128("rng position")?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    trainer.rng = rng;
    if r.at != bytes.len() {
        return Err(Error::Corruption(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(trainer)
}
