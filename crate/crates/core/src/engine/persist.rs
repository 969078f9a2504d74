//! Store persistence. Raw moments are written, not prepared inverses, so a
//! loaded store can be re-prepared under different shrinkage settings.
//!
//! Record layout (after the common [`crate::format`] header):
//!
//! ```text
//! u16 domain_id | u32 class_id | u32 dim | u64 count | dim floats (mean) | dim*dim floats (m2, row-major)
//! ```

use thiserror::Error;

use super::{ClassKey, EngineConfig, Prototype, PrototypeStore};
use crate::format::{
    FloatWidth, FormatError, Header, Reader, RecordType, Writer, CRC_LEN, HEADER_LEN,
};
use crate::linalg::{MomentPack, SqMat};

const RECORD_FIXED: usize = 2 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PersistError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("record {record}: domain {domain} has dimension {expected}, record says {found}")]
    DimensionInconsistent {
        record: usize,
        domain: u16,
        expected: usize,
        found: usize,
    },
    #[error("record {record}: zero dimension")]
    ZeroDim { record: usize },
    #[error("record {record}: duplicate prototype {key}")]
    DuplicateKey { record: usize, key: ClassKey },
    #[error("record {record}: invalid moments ({reason})")]
    InvalidMoments { record: usize, reason: String },
}

/// Exact serialized size of `store` at the given float width.
pub fn encoded_len(store: &PrototypeStore, width: FloatWidth) -> usize {
    HEADER_LEN
        + store
            .iter()
            .map(|p| {
                let d = p.moments.dim();
                RECORD_FIXED + (d + d * d) * width.bytes()
            })
            .sum::<usize>()
        + CRC_LEN
}

pub fn save_store(store: &PrototypeStore, width: FloatWidth) -> Vec<u8> {
    let mut w = Writer::new(
        Header {
            width,
            record_type: RecordType::Prototypes,
            count: store.len() as u32,
        },
        encoded_len(store, width),
    );
    for p in store.iter() {
        w.u16(p.key.domain);
        w.u32(p.key.class);
        w.u32(p.moments.dim() as u32);
        w.u64(p.moments.count());
        w.floats(p.moments.mean());
        w.floats(p.moments.m2().as_slice());
    }
    w.finish()
}

/// Loads a store with the default engine configuration.
pub fn load_store(bytes: &[u8]) -> Result<PrototypeStore, PersistError> {
    load_store_with(bytes, EngineConfig::default())
}

/// Loads a store and attaches `config` for subsequent preparation. The
/// task in which a class was first seen is not persisted and loads as 0.
pub fn load_store_with(bytes: &[u8], config: EngineConfig) -> Result<PrototypeStore, PersistError> {
    let (header, mut r) = Reader::open(bytes, RecordType::Prototypes)?;
    let mut store = PrototypeStore::new(config);
    for record in 0..header.count as usize {
        let domain = r.u16()?;
        let class = r.u32()?;
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        if dim == 0 {
            return Err(PersistError::ZeroDim { record });
        }
        if let Some(expected) = store.domain_dim(domain) {
            if expected != dim {
                return Err(PersistError::DimensionInconsistent {
                    record,
                    domain,
                    expected,
                    found: dim,
                });
            }
        }
        let mean = r.floats(dim)?;
        let m2 = r.floats(
            dim.checked_mul(dim)
                .ok_or(PersistError::ZeroDim { record })?,
        )?;
        let invalid = |e: crate::linalg::LinalgError| PersistError::InvalidMoments {
            record,
            reason: e.to_string(),
        };
        let m2 = SqMat::new(dim, m2).map_err(invalid)?;
        let moments = MomentPack::from_parts(count, mean, m2).map_err(invalid)?;
        let key = ClassKey::new(domain, class);
        if store.get(&key).is_some() {
            return Err(PersistError::DuplicateKey { record, key });
        }
        store
            .insert_prototype(Prototype {
                key,
                moments,
                first_seen_task: 0,
            })
            .map_err(|_| PersistError::DimensionInconsistent {
                record,
                domain,
                expected: store.domain_dim(domain).unwrap_or(0),
                found: dim,
            })?;
    }
    r.finish()?;
    Ok(store)
}
