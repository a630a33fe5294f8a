//! Binary bank snapshots.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic  "RASTBANK"          8 bytes
//! version u16                currently 1
//! kind    u8                 0 spatial, 1 temporal
//! dtype   u8                 0 f32, 1 f64; width of vector components
//! dim     u32
//! count   u32
//! entries count times:
//!     vector  dim x f32|f64
//!     momentum f64
//!     epoch_stamp u32
//!     insert_count u32
//! crc32   u32                over every preceding byte
//! ```
//!
//! Vectors are stored at the writing bank's scalar width. Loading at the
//! same width reproduces them bit for bit; loading at a different width
//! converts once, after which save-load cycles are idempotent. Derived
//! statistics are recomputed on load, the index starts Flat, and the
//! generation starts at 0.

use std::fs;
use std::path::Path;

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

use super::{BankKind, MemoryBank, PatternEntry, StorePolicy};

const MAGIC: &[u8; 8] = b"RASTBANK";
const VERSION: u16 = 1;

/// Serializes the bank's entries; cache, index, and recent-query state are
/// runtime-only and not persisted.
pub fn save<S: Scalar>(bank: &MemoryBank<S>, path: &Path) -> Result<()> {
    let mut w = ByteWriter::new();
    w.raw(MAGIC);
    w.u16(VERSION);
    w.u8(bank.kind.tag());
    w.u8(S::DTYPE.tag());
    w.u32(bank.dim as u32);
    w.u32(bank.entries.len() as u32);
    for entry in &bank.entries {
        for v in &entry.vector {
            match S::DTYPE {
                Dtype::F32 => w.f32(v.as_f32()),
                Dtype::F64 => w.f64(v.as_f64()),
            }
        }
        w.f64(entry.momentum);
        w.u32(entry.epoch_stamp);
        w.u32(entry.insert_count);
    }
    let crc = crc32fast::hash(w.as_slice());
    w.u32(crc);

    // Write-then-rename keeps a crash from leaving a half-written snapshot
    // at the target path.
    let mut tmp_name = path.as_os_str().to_os_string();
    tmp_name.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp_name);
    fs::write(&tmp, w.as_slice())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Restores a bank from a snapshot. The checksum is verified before any
/// entry is parsed, so a corrupt file never yields a partial bank.
pub fn load<S: Scalar>(path: &Path, policy: StorePolicy) -> Result<MemoryBank<S>> {
    let buf = fs::read(path)?;
    if buf.len() < MAGIC.len() + 4 {
        return Err(Error::format(buf.len(), "snapshot shorter than header"));
    }
    let body_len = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body_len..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&buf[..body_len]);
    if stored != actual {
        return Err(Error::format(
            body_len,
            format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"),
        ));
    }

    let mut r = ByteReader::new(&buf[..body_len]);
    r.expect_magic(MAGIC, "bank snapshot magic")?;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(
            r.pos() - 2,
            format!("unsupported snapshot version {version}, expected {VERSION}"),
        ));
    }
    let kind_tag = r.u8("bank kind")?;
    let kind = BankKind::from_tag(kind_tag)
        .ok_or_else(|| Error::format(r.pos() - 1, format!("unknown bank kind tag {kind_tag}")))?;
    let dtype_tag = r.u8("vector dtype")?;
    let dtype = Dtype::from_tag(dtype_tag)
        .ok_or_else(|| Error::format(r.pos() - 1, format!("unknown dtype tag {dtype_tag}")))?;
    let dim = r.u32("dim")? as usize;
    let count = r.u32("entry count")? as usize;

    let mut bank = MemoryBank::new(kind, dim, policy);
    for _ in 0..count {
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            vector.push(match dtype {
                Dtype::F32 => S::of_f32(r.f32("vector component")?),
                Dtype::F64 => S::of(r.f64("vector component")?),
            });
        }
        let momentum = r.f64("momentum")?;
        let epoch_stamp = r.u32("epoch stamp")?;
        let insert_count = r.u32("insert count")?;
        let mut entry = PatternEntry::new(vector, epoch_stamp);
        entry.momentum = momentum;
        entry.insert_count = insert_count;
        bank.entries.push(entry);
    }
    if r.remaining() != 0 {
        return Err(Error::format(
            r.pos(),
            format!("{} trailing bytes after {count} entries", r.remaining()),
        ));
    }
    Ok(bank)
}
