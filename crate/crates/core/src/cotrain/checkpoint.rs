//! Model checkpoints:
//!
//! ```text
//! "DACLCKPT" | version u32 | config hash u64 | t u64
//! per model: param count u32, then per param: len u64, len x f64
//! ```

use std::io::{Read, Write};

use crate::error::{DaclError, Result};

use super::{TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DACLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(trainer: &Trainer, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&trainer.cfg.hash().to_le_bytes())?;
    w.write_all(&(trainer.step_index() as u64).to_le_bytes())?;
    for model in &trainer.models {
        w.write_all(&(model.params.len() as u32).to_le_bytes())?;
        for p in &model.params {
            w.write_all(&(p.len() as u64).to_le_bytes())?;
            for x in p.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Rebuilds a trainer from a checkpoint written under `cfg`.
///
/// Banks and optimizer state are not stored and start empty.
pub fn read_checkpoint<R: Read>(mut r: R, cfg: TrainConfig) -> Result<Trainer> {
    if &read_array::<_, 8>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(DaclError::Format("not a DACLCKPT file".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(DaclError::Format(format!("unsupported checkpoint version {version}")));
    }
    let hash = u64::from_le_bytes(read_array(&mut r)?);
    if hash != cfg.hash() {
        return Err(DaclError::Format(format!(
            "checkpoint config hash {hash:016x} does not match {:016x}",
            cfg.hash()
        )));
    }
    let t = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let mut models = [Vec::new(), Vec::new()];
    for bufs in &mut models {
        let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
        for _ in 0..count {
            let len = u64::from_le_bytes(read_array(&mut r)?) as usize;
            if len > 1 << 28 {
                return Err(DaclError::Format(format!("parameter of {len} values")));
            }
            let data = (0..len).map(|_| Ok(f64::from_le_bytes(read_array(&mut r)?))).collect::<Result<Vec<_>>>()?;
            bufs.push(data);
        }
    }
    Trainer::restore(cfg, t, models, None)
}
