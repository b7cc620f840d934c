//! Per-class first-in-first-out memory of past prototypes.
//!
//! Densities are stamped at push time and never recomputed. Banks can be
//! persisted as a flat little-endian file:
//!
//! ```text
//! "DACLBANK" | version u32 | N u32 | L u32 | D u32
//! per class: count u32, then count x (seq_id u64, density f64, D x f64)
//! ```
//!
//! A missing density is stored as NaN.

use std::io::{Read, Write};

use crate::error::{DaclError, Result};
use crate::geometry::{ClassEmbedding, Origin};

pub const BANK_MAGIC: &[u8; 8] = b"DACLBANK";
pub const BANK_VERSION: u32 = 1;

/// Fixed-capacity ring of embeddings for one class.
#[derive(Clone, Debug)]
pub struct ClassMemoryBank {
    class_id: usize,
    capacity: usize,
    ring: Vec<ClassEmbedding>,
    write_cursor: usize,
}

impl ClassMemoryBank {
    pub fn new(class_id: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(DaclError::config("bank_size", "capacity must be positive"));
        }
        Ok(Self { class_id, capacity, ring: Vec::with_capacity(capacity.min(4096)), write_cursor: 0 })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    /// Appends `items` in `seq_id` order, evicting the oldest entries once
    /// the bank is full.
    pub fn push(&mut self, items: impl IntoIterator<Item = ClassEmbedding>) -> Result<()> {
        let mut items: Vec<ClassEmbedding> = items.into_iter().collect();
        if let Some(bad) = items.iter().find(|e| e.class_id != self.class_id) {
            return Err(DaclError::Contract(format!(
                "class {} embedding pushed into bank {}",
                bad.class_id, self.class_id
            )));
        }
        items.sort_by_key(|e| e.seq_id);
        for mut item in items {
            item.origin = Origin::Bank;
            if self.ring.len() < self.capacity {
                self.ring.push(item);
            } else {
                self.ring[self.write_cursor] = item;
                self.write_cursor = (self.write_cursor + 1) % self.capacity;
            }
        }
        Ok(())
    }

    /// Contents oldest-first.
    pub fn snapshot(&self) -> Vec<ClassEmbedding> {
        let (newer, older) = self.ring.split_at(self.write_cursor);
        older.iter().chain(newer).cloned().collect()
    }
}

/// Batch and bank pool for density estimation (`G_n ∪ V`), bank first.
pub fn union_pool(
    bank_snapshot: &[ClassEmbedding],
    batch: &[ClassEmbedding],
    class_id: usize,
) -> Result<Vec<ClassEmbedding>> {
    if let Some(bad) = bank_snapshot.iter().chain(batch).find(|e| e.class_id != class_id) {
        return Err(DaclError::Contract(format!(
            "class {} embedding in the pool of class {class_id}",
            bad.class_id
        )));
    }
    Ok(bank_snapshot.iter().chain(batch).cloned().collect())
}

/// One bank per class.
#[derive(Clone, Debug)]
pub struct BankSet {
    banks: Vec<ClassMemoryBank>,
}

impl BankSet {
    pub fn new(num_classes: usize, capacity: usize) -> Result<Self> {
        let banks = (0..num_classes).map(|c| ClassMemoryBank::new(c, capacity)).collect::<Result<_>>()?;
        Ok(Self { banks })
    }

    pub fn num_classes(&self) -> usize {
        self.banks.len()
    }

    pub fn bank(&self, class_id: usize) -> &ClassMemoryBank {
        &self.banks[class_id]
    }

    pub fn bank_mut(&mut self, class_id: usize) -> &mut ClassMemoryBank {
        &mut self.banks[class_id]
    }

    pub fn fills(&self) -> Vec<usize> {
        self.banks.iter().map(ClassMemoryBank::len).collect()
    }

    /// Routes each embedding to the bank of its class.
    pub fn push_all(&mut self, items: &[ClassEmbedding]) -> Result<()> {
        for bank in &mut self.banks {
            let cls = bank.class_id;
            bank.push(items.iter().filter(|e| e.class_id == cls).cloned())?;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let dim = self.dimension();
        let capacity = self.banks.first().map_or(0, |b| b.capacity);
        w.write_all(BANK_MAGIC)?;
        for v in [BANK_VERSION, self.banks.len() as u32, capacity as u32, dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for bank in &self.banks {
            let snap = bank.snapshot();
            w.write_all(&(snap.len() as u32).to_le_bytes())?;
            for e in snap {
                if e.vector.len() != dim {
                    return Err(DaclError::Contract("mixed embedding widths in bank".into()));
                }
                w.write_all(&e.seq_id.to_le_bytes())?;
                w.write_all(&e.density.unwrap_or(f64::NAN).to_le_bytes())?;
                for x in e.vector {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(DaclError::Format("not a DACLBANK file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != BANK_VERSION {
            return Err(DaclError::Format(format!("unsupported bank version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let capacity = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let mut set = BankSet::new(n, capacity)?;
        for class_id in 0..n {
            let count = read_u32(&mut r)? as usize;
            if count > capacity {
                return Err(DaclError::Format(format!("class {class_id} holds {count} > L={capacity}")));
            }
            let mut items = Vec::with_capacity(count);
            for _ in 0..count {
                let seq_id = read_u64(&mut r)?;
                let d = read_f64(&mut r)?;
                let vector = (0..dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
                let mut e = ClassEmbedding::new(vector, class_id, Origin::Bank, seq_id);
                e.density = (!d.is_nan()).then_some(d);
                items.push(e);
            }
            // stored oldest-first; append one at a time to keep that order
            let bank = set.bank_mut(class_id);
            for e in items {
                bank.push([e])?;
            }
        }
        Ok(set)
    }

    fn dimension(&self) -> usize {
        self.banks.iter().find_map(|b| b.ring.first().map(|e| e.vector.len())).unwrap_or(0)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
