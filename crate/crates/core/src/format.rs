//! Little-endian container shared by the prototype store and raw feature
//! files.
//!
//! ```text
//! magic   "EXFC"           4 bytes
//! version u16              currently 1
//! flags   u16              bit 0: float width (0 = f64, 1 = f32)
//!                          bit 1: record type (0 = prototypes, 1 = raw features)
//! count   u32              number of records
//! records ...
//! crc32   u32              CRC-32 (IEEE) of every preceding byte
//! ```

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"EXFC";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 12;
pub const CRC_LEN: usize = 4;

const FLAG_F32: u16 = 1 << 0;
const FLAG_RAW_FEATURES: u16 = 1 << 1;
const KNOWN_FLAGS: u16 = FLAG_F32 | FLAG_RAW_FEATURES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloatWidth {
    #[default]
    F64,
    F32,
}

impl std::str::FromStr for FloatWidth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f64" => Ok(FloatWidth::F64),
            "f32" => Ok(FloatWidth::F32),
            other => Err(format!(
                "unknown float width {other:?} (expected f64 or f32)"
            )),
        }
    }
}

impl FloatWidth {
    pub fn bytes(self) -> usize {
        match self {
            FloatWidth::F64 => 8,
            FloatWidth::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordType {
    Prototypes,
    RawFeatures,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:02x?}; not an EXFC file")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("unknown flag bits {flags:#06x}")]
    UnknownFlags { flags: u16 },
    #[error("expected {expected:?} records, file holds {found:?}")]
    WrongRecordType {
        expected: RecordType,
        found: RecordType,
    },
    #[error("truncated payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("{extra} unexpected bytes after the last record")]
    TrailingBytes { extra: usize },
    #[error("non-finite value in record {record}")]
    NonFinite { record: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub width: FloatWidth,
    pub record_type: RecordType,
    pub count: u32,
}

pub struct Writer {
    buf: Vec<u8>,
    width: FloatWidth,
}

impl Writer {
    pub fn new(header: Header, capacity: usize) -> Self {
        let mut buf = Vec::with_capacity(capacity);
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let mut flags = 0u16;
        if header.width == FloatWidth::F32 {
            flags |= FLAG_F32;
        }
        if header.record_type == RecordType::RawFeatures {
            flags |= FLAG_RAW_FEATURES;
        }
        buf.extend_from_slice(&flags.to_le_bytes());
        buf.extend_from_slice(&header.count.to_le_bytes());
        Self {
            buf,
            width: header.width,
        }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn floats(&mut self, values: &[f64]) {
        match self.width {
            FloatWidth::F64 => {
                for v in values {
                    self.buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            FloatWidth::F32 => {
                for v in values {
                    self.buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub struct Reader<'a> {
    full: &'a [u8],
    bytes: &'a [u8],
    pos: usize,
    width: FloatWidth,
}

impl<'a> Reader<'a> {
    /// Validates magic, version and flags, then positions the cursor at the
    /// first record. The checksum is verified by [`Reader::finish`], after the
    /// records have been walked, so that truncation is reported as such.
    pub fn open(bytes: &'a [u8], expected: RecordType) -> Result<(Header, Self), FormatError> {
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(FormatError::BadMagic {
                found: bytes[..bytes.len().min(MAGIC.len())].to_vec(),
            });
        }
        if bytes.len() < HEADER_LEN + CRC_LEN {
            return Err(FormatError::Truncated {
                offset: 0,
                needed: HEADER_LEN + CRC_LEN,
                available: bytes.len(),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion { found: version });
        }
        let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
        if flags & !KNOWN_FLAGS != 0 {
            return Err(FormatError::UnknownFlags { flags });
        }
        let width = if flags & FLAG_F32 != 0 {
            FloatWidth::F32
        } else {
            FloatWidth::F64
        };
        let record_type = if flags & FLAG_RAW_FEATURES != 0 {
            RecordType::RawFeatures
        } else {
            RecordType::Prototypes
        };
        if record_type != expected {
            return Err(FormatError::WrongRecordType {
                expected,
                found: record_type,
            });
        }
        let body_end = bytes.len() - CRC_LEN;
        let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let header = Header {
            width,
            record_type,
            count,
        };
        Ok((
            header,
            Self {
                full: bytes,
                bytes: &bytes[..body_end],
                pos: HEADER_LEN,
                width,
            },
        ))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn floats(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let w = self.width.bytes();
        let raw = self.take(n.checked_mul(w).ok_or(FormatError::Truncated {
            offset: self.pos,
            needed: usize::MAX,
            available: self.bytes.len() - self.pos,
        })?)?;
        Ok(match self.width {
            FloatWidth::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            FloatWidth::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        })
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn finish(self) -> Result<(), FormatError> {
        let stored = u32::from_le_bytes(self.full[self.bytes.len()..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(self.bytes);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed });
        }
        let extra = self.bytes.len() - self.pos;
        if extra == 0 {
            Ok(())
        } else {
            Err(FormatError::TrailingBytes { extra })
        }
    }
}
