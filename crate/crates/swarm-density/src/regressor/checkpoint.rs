//! Versioned binary checkpoints and the training-history CSV export.
//!
//! Layout (all integers little-endian):
//! magic "SDRC", format version u32, architecture JSON (u32 length +
//! bytes), best epoch u32, tensor count u32, then per tensor the name
//! (u32 length + bytes), value count u64, and f32 values; finally the
//! history record count u32 and per record epoch u32 plus train loss,
//! validation loss, and learning rate as f64. Weights are stored in single
//! precision, so a round-trip quantizes them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ArchSpec, EpochRecord, NetError, RegressorParams};

const MAGIC: &[u8; 4] = b"SDRC";
const VERSION: u32 = 1;

/// Everything a training run persists.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: RegressorParams,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch the stored weights came from.
    pub best_epoch: usize,
}

pub fn save_checkpoint(
    path: &Path,
    params: &RegressorParams,
    history: &[EpochRecord],
    best_epoch: usize,
) -> Result<(), NetError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let arch_json = serde_json::to_vec(&params.arch)
        .map_err(|e| NetError::Checkpoint(format!("architecture serialization: {e}")))?;
    w.write_all(&(arch_json.len() as u32).to_le_bytes())?;
    w.write_all(&arch_json)?;
    w.write_all(&(best_epoch as u32).to_le_bytes())?;

    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, values) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(values.len() as u64).to_le_bytes())?;
        for &v in values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }

    w.write_all(&(history.len() as u32).to_le_bytes())?;
    for rec in history {
        w.write_all(&(rec.epoch as u32).to_le_bytes())?;
        w.write_all(&rec.train_loss.to_le_bytes())?;
        w.write_all(&rec.val_loss.to_le_bytes())?;
        w.write_all(&rec.lr.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_buf(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>, NetError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| NetError::Checkpoint(format!("truncated reading {what}: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, NetError> {
    let b = read_exact_buf(r, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64, NetError> {
    let b = read_exact_buf(r, 8, what)?;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

fn read_f64(r: &mut impl Read, what: &str) -> Result<f64, NetError> {
    let b = read_exact_buf(r, 8, what)?;
    Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NetError> {
    let mut r = BufReader::new(File::open(path)?);

    let magic = read_exact_buf(&mut r, 4, "magic")?;
    if magic != MAGIC {
        return Err(NetError::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(NetError::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }

    let arch_len = read_u32(&mut r, "architecture length")? as usize;
    let arch_json = read_exact_buf(&mut r, arch_len, "architecture")?;
    let arch: ArchSpec = serde_json::from_slice(&arch_json)
        .map_err(|e| NetError::Checkpoint(format!("architecture parse: {e}")))?;
    arch.validate()?;
    let best_epoch = read_u32(&mut r, "best epoch")? as usize;

    // Rebuild the parameter container and require the stored tensors to
    // match its names and shapes exactly, in order.
    let mut params = RegressorParams::init(&arch, 0)?.zeros_like();
    let tensor_count = read_u32(&mut r, "tensor count")? as usize;
    {
        let mut expected = params.tensors_mut();
        if tensor_count != expected.len() {
            return Err(NetError::Checkpoint(format!(
                "checkpoint holds {tensor_count} tensors, architecture needs {}",
                expected.len()
            )));
        }
        for (name, values) in expected.iter_mut() {
            let name_len = read_u32(&mut r, "tensor name length")? as usize;
            let name_bytes = read_exact_buf(&mut r, name_len, "tensor name")?;
            let stored_name = String::from_utf8(name_bytes)
                .map_err(|_| NetError::Checkpoint("tensor name is not UTF-8".into()))?;
            if stored_name != *name {
                return Err(NetError::Checkpoint(format!(
                    "tensor order mismatch: found {stored_name}, expected {name}"
                )));
            }
            let count = read_u64(&mut r, "tensor length")? as usize;
            if count != values.len() {
                return Err(NetError::Checkpoint(format!(
                    "tensor {name} holds {count} values, architecture needs {}",
                    values.len()
                )));
            }
            let bytes = read_exact_buf(&mut r, count * 4, "tensor values")?;
            for (v, chunk) in values.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
            }
        }
    }

    let record_count = read_u32(&mut r, "history length")? as usize;
    let mut history = Vec::with_capacity(record_count);
    for _ in 0..record_count {
        history.push(EpochRecord {
            epoch: read_u32(&mut r, "history epoch")? as usize,
            train_loss: read_f64(&mut r, "history train loss")?,
            val_loss: read_f64(&mut r, "history val loss")?,
            lr: read_f64(&mut r, "history lr")?,
        });
    }

    if !params.is_finite() {
        return Err(NetError::Checkpoint("non-finite weight loaded".into()));
    }
    Ok(Checkpoint {
        params,
        history,
        best_epoch,
    })
}

/// Writes the per-epoch loss curve as CSV with a header row.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<(), NetError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,train_loss,val_loss,lr")?;
    for rec in history {
        writeln!(w, "{},{},{},{}", rec.epoch, rec.train_loss, rec.val_loss, rec.lr)?;
    }
    w.flush()?;
    Ok(())
}
