//! Little-endian binary formats.
//!
//! Feature file: `"VFT1"`, u32 num_rows, u32 dim, then `num_rows·dim`
//! binary32 values row-major.
//!
//! Anchor file: `"VEA1"`, u32 num_classes, u32 dim, then per class a u16
//! name length, the UTF-8 name, u32 n_c and `n_c·dim` binary32 values.

use std::path::Path;

use super::{AnchorClass, AnchorFile, FeatureTable};
use crate::error::{Error, FormatError, Result};
use crate::modality::Modality;

pub const FEATURE_MAGIC: &[u8; 4] = b"VFT1";
pub const ANCHOR_MAGIC: &[u8; 4] = b"VEA1";

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(FormatError::LengthMismatch {
                expected: self.pos.saturating_add(n),
                actual: self.bytes.len(),
            }),
        }
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4).map_err(|_| FormatError::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(self.bytes).into_owned(),
        })?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// `n` binary32 values; `base` offsets the index reported for a
    /// non-finite value.
    pub(crate) fn f32s(&mut self, n: usize, base: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::LengthMismatch {
            expected: usize::MAX,
            actual: self.bytes.len(),
        })?)?;
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite { index: base + i });
        }
        Ok(vals)
    }
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    out.reserve(vals.len() * 4);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_feature_table(table: &FeatureTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * table.data().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(table.num_rows() as u32).to_le_bytes());
    out.extend_from_slice(&(table.dim() as u32).to_le_bytes());
    push_f32s(&mut out, table.data());
    out
}

pub fn decode_feature_table(bytes: &[u8], modality: Modality) -> Result<FeatureTable, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    let rows = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let expected = 12 + 4 * rows * dim;
    if bytes.len() != expected {
        return Err(FormatError::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let data = r.f32s(rows * dim, 0)?;
    FeatureTable::new(modality, dim, data)
}

pub fn encode_anchor_file(anchors: &AnchorFile) -> Result<Vec<u8>, FormatError> {
    anchors.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(ANCHOR_MAGIC);
    out.extend_from_slice(&(anchors.classes.len() as u32).to_le_bytes());
    out.extend_from_slice(&(anchors.dim as u32).to_le_bytes());
    for class in &anchors.classes {
        let name = class.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| FormatError::Invalid(format!("class name of {} bytes exceeds u16", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&((class.vectors.len() / anchors.dim) as u32).to_le_bytes());
        push_f32s(&mut out, &class.vectors);
    }
    Ok(out)
}

pub fn decode_anchor_file(bytes: &[u8]) -> Result<AnchorFile, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(ANCHOR_MAGIC)?;
    let num_classes = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(FormatError::ZeroDim);
    }
    let mut classes = Vec::with_capacity(num_classes.min(1024));
    let mut offset = 0;
    for _ in 0..num_classes {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::InvalidUtf8)?
            .to_owned();
        let n = r.u32()? as usize;
        let vectors = r.f32s(n * dim, offset)?;
        offset += vectors.len();
        classes.push(AnchorClass { name, vectors });
    }
    if !r.is_done() {
        return Err(FormatError::LengthMismatch {
            expected: r.pos,
            actual: bytes.len(),
        });
    }
    let file = AnchorFile { dim, classes };
    file.validate()?;
    Ok(file)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>, modality: Modality) -> Result<FeatureTable> {
    let path = path.as_ref();
    decode_feature_table(&read_bytes(path)?, modality).map_err(|e| Error::format(path, e))
}

pub fn write_feature_file(path: impl AsRef<Path>, table: &FeatureTable) -> Result<()> {
    write_bytes(path.as_ref(), &encode_feature_table(table))
}

pub fn read_anchor_file(path: impl AsRef<Path>) -> Result<AnchorFile> {
    let path = path.as_ref();
    decode_anchor_file(&read_bytes(path)?).map_err(|e| Error::format(path, e))
}

pub fn write_anchor_file(path: impl AsRef<Path>, anchors: &AnchorFile) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_anchor_file(anchors).map_err(|e| Error::format(path, e))?;
    write_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> FeatureTable {
        FeatureTable::new(Modality::Audio, 4, vec![0.25; 12]).unwrap()
    }

    #[test]
    fn feature_round_trip() {
        let t = table();
        let bytes = encode_feature_table(&t);
        assert_eq!(bytes.len(), 12 + 4 * 3 * 4);
        assert_eq!(&bytes[..4], b"VFT1");
        assert_eq!(decode_feature_table(&bytes, Modality::Audio).unwrap(), t);
    }

    #[test]
    fn feature_bad_magic() {
        let mut bytes = encode_feature_table(&table());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode_feature_table(&bytes, Modality::Audio),
            Err(FormatError::BadMagic { .. })
        ));
    }

    #[test]
    fn feature_length_must_match_header() {
        let bytes = encode_feature_table(&table());
        for bad in [&bytes[..bytes.len() - 1], &bytes[..12]] {
            assert_eq!(
                decode_feature_table(bad, Modality::Audio),
                Err(FormatError::LengthMismatch {
                    expected: 60,
                    actual: bad.len()
                })
            );
        }
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            decode_feature_table(&long, Modality::Audio),
            Err(FormatError::LengthMismatch { expected: 60, actual: 64 })
        ));
    }

    #[test]
    fn feature_rejects_non_finite() {
        let mut bytes = encode_feature_table(&table());
        bytes[12 + 4 * 5..12 + 4 * 6].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(
            decode_feature_table(&bytes, Modality::Audio),
            Err(FormatError::NonFinite { index: 5 })
        );
    }

    fn anchors() -> AnchorFile {
        AnchorFile {
            dim: 2,
            classes: vec![
                AnchorClass {
                    name: "happy".into(),
                    vectors: vec![1.0, 0.0, 0.5, 0.5],
                },
                AnchorClass {
                    name: "tristeza".into(),
                    vectors: vec![0.0, -1.0],
                },
            ],
        }
    }

    #[test]
    fn anchor_round_trip_and_layout() {
        let a = anchors();
        let bytes = encode_anchor_file(&a).unwrap();
        assert_eq!(&bytes[..4], b"VEA1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 5);
        assert_eq!(&bytes[14..19], b"happy");
        assert_eq!(u32::from_le_bytes(bytes[19..23].try_into().unwrap()), 2);
        assert_eq!(decode_anchor_file(&bytes).unwrap(), a);
    }

    #[test]
    fn single_vector_anchor_file_is_valid() {
        let a = AnchorFile {
            dim: 3,
            classes: vec![AnchorClass {
                name: "neutral".into(),
                vectors: vec![0.1, 0.2, 0.3],
            }],
        };
        let bytes = encode_anchor_file(&a).unwrap();
        assert_eq!(bytes.len(), 12 + 2 + 7 + 4 + 12);
        assert_eq!(decode_anchor_file(&bytes).unwrap(), a);
    }

    #[test]
    fn anchor_rejects_duplicates_and_bad_bytes() {
        let mut a = anchors();
        a.classes[1].name = "happy".into();
        assert_eq!(
            encode_anchor_file(&a),
            Err(FormatError::DuplicateClass("happy".into()))
        );
        // hand-encode the duplicate to exercise the reader
        let mut bytes = encode_anchor_file(&anchors()).unwrap();
        let second = 12 + 2 + 5 + 4 + 16;
        bytes[second..second + 2].copy_from_slice(&5u16.to_le_bytes());
        bytes.splice(second + 2..second + 2 + 8, b"happy".iter().copied());
        assert_eq!(
            decode_anchor_file(&bytes),
            Err(FormatError::DuplicateClass("happy".into()))
        );

        let good = encode_anchor_file(&anchors()).unwrap();
        assert!(matches!(
            decode_anchor_file(&good[..good.len() - 2]),
            Err(FormatError::LengthMismatch { .. })
        ));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_anchor_file(&bad), Err(FormatError::BadMagic { .. })));
        let mut zero = anchors();
        zero.classes[1].vectors = vec![0.0, 0.0];
        assert!(matches!(encode_anchor_file(&zero), Err(FormatError::ZeroVector { .. })));
    }
}
