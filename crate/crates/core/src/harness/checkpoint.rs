//! Binary checkpoints of a field and its optimizer state.
//!
//! Layout, little endian: magic, tensor count (u32), then per tensor the
//! name length (u32), name bytes, rank (u32), dims (u64 each) and f64
//! values; then a flag byte and, when set, the Adam step (u64) followed
//! by the first and second moments of every tensor in the same order.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::field::RadianceField;
use crate::trainer::{AdamState, Trainer};

use super::HarnessError;

const MAGIC: &[u8; 8] = b"SCLRFCK1";
const MAX_NAME: usize = 256;
const MAX_RANK: usize = 8;

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

fn put_f64s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, field: &RadianceField, adam: Option<&AdamState>) -> Result<(), HarnessError> {
    let tensors = field.named_tensors();
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        put_f64s(w, t.data())?;
    }
    match adam {
        None => w.write_all(&[0])?,
        Some(a) => {
            if a.m.len() != tensors.len() || a.v.len() != tensors.len() {
                return Err(bad("optimizer state does not match the field"));
            }
            w.write_all(&[1])?;
            w.write_all(&a.t.to_le_bytes())?;
            for ((_, t), (m, v)) in tensors.iter().zip(a.m.iter().zip(&a.v)) {
                if m.len() != t.len() || v.len() != t.len() {
                    return Err(bad("optimizer moment size mismatch"));
                }
                put_f64s(w, m)?;
                put_f64s(w, v)?;
            }
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], HarnessError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize, HarnessError> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, HarnessError> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
}

pub fn read_checkpoint(r: impl Read) -> Result<(RadianceField, Option<AdamState>), HarnessError> {
    let mut r = Reader { inner: r };
    if &r.bytes::<8>()? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let count = r.u32()?;
    let mut named: Vec<(String, Tensor)> = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = r.u32()?;
        if len > MAX_NAME {
            return Err(bad(format!("tensor name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.inner.read_exact(&mut name).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = r.u32()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(bad(format!("{name}: rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n < 1 << 32)
            .ok_or_else(|| bad(format!("{name}: shape {shape:?}")))?;
        let data = r.f64s(n)?;
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
        if named.iter().any(|(k, _)| *k == name) {
            return Err(bad(format!("duplicate tensor {name}")));
        }
        named.push((name, t));
    }
    let lookup_order: Vec<String> = named.iter().map(|(k, _)| k.clone()).collect();
    let mut pool = named.clone();
    let field = RadianceField::from_named(|name| {
        let i = pool.iter().position(|(k, _)| k == name)?;
        Some(pool.swap_remove(i).1)
    })?;
    if !pool.is_empty() {
        return Err(bad(format!("unexpected tensor {}", pool[0].0)));
    }
    let canonical: Vec<&str> = field.named_tensors().iter().map(|(k, _)| *k).collect();
    let adam = match r.bytes::<1>()?[0] {
        0 => None,
        1 => {
            if lookup_order.iter().map(String::as_str).ne(canonical.iter().copied()) {
                return Err(bad("optimizer state requires canonical tensor order"));
            }
            let t = r.u64()?;
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (_, tensor) in field.named_tensors() {
                m.push(r.f64s(tensor.len())?);
                v.push(r.f64s(tensor.len())?);
            }
            Some(AdamState { m, v, t })
        }
        f => return Err(bad(format!("optimizer flag {f}"))),
    };
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok((field, adam))
}

pub fn save_trainer(path: &Path, trainer: &Trainer) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &trainer.field, Some(&trainer.adam))?;
    // write-then-rename so an interrupted run never leaves a torn file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Field plus optimizer state; a fresh optimizer when none was stored.
pub fn load_trainer(path: &Path) -> Result<Trainer, HarnessError> {
    let file = std::fs::File::open(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    let (field, adam) = read_checkpoint(std::io::BufReader::new(file))?;
    let mut trainer = Trainer::new(field);
    if let Some(a) = adam {
        trainer.adam = a;
    }
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trainer() -> Trainer {
        let dims = FieldDims {
            channels: 3,
            plane_height: 4,
            plane_width: 5,
            grid: [3, 4, 2],
            hidden: 6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Trainer::new(RadianceField::init(&dims, &mut rng));
        t.adam.t = 17;
        for (k, m) in t.adam.m.iter_mut().enumerate() {
            m.iter_mut().enumerate().for_each(|(i, x)| *x = (k * 1000 + i) as f64 * 1e-3);
        }
        t.adam.v[2][1] = f64::MIN_POSITIVE;
        t
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = trainer();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.ckpt");
        save_trainer(&path, &t).unwrap();
        let back = load_trainer(&path).unwrap();
        assert_eq!(back.field, t.field);
        assert_eq!(back.adam.t, 17);
        assert_eq!(back.adam.m, t.adam.m);
        assert_eq!(back.adam.v, t.adam.v);
    }

    #[test]
    fn field_only_checkpoint_gets_fresh_optimizer() {
        let t = trainer();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &t.field, None).unwrap();
        let (field, adam) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(field, t.field);
        assert!(adam.is_none());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let t = trainer();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &t.field, Some(&t.adam)).unwrap();
        for cut in [0, 7, 12, buf.len() / 2, buf.len() - 1] {
            assert!(matches!(read_checkpoint(&buf[..cut]), Err(HarnessError::Checkpoint(_))), "cut {cut}");
        }
        let mut magic = buf.clone();
        magic[0] = b'X';
        assert!(read_checkpoint(&magic[..]).is_err());
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_checkpoint(&trailing[..]).is_err());
    }
}
