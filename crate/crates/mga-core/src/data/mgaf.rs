//! MGAF feature files: a little-endian binary container for image records.
//!
//! Layout:
//!   magic "MGAF" | version u16 | record count u32
//!   per record: image_id (u16 length + UTF-8 bytes) | class_id u32 |
//!               split u8 | layer count u8
//!   per layer:  tag u8 (0 coarse, 1 fine) | h u16 | w u16 | dim u16 |
//!               h·w·dim f32 values
//!
//! The manifest is embedded: there is no sidecar file to drift out of sync
//! with the features. Round trips are bit-exact on the 32-bit payload.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::data::types::{GridFeatures, ImageRecord, LayerTag, Split};
use crate::error::{MgaError, Result};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"MGAF";
pub const VERSION: u16 = 1;

pub fn write_feature_file(records: &[ImageRecord<f32>], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(records, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_records<W: Write>(records: &[ImageRecord<f32>], w: &mut W) -> Result<()> {
    let mut seen = HashSet::new();
    for rec in records {
        if !seen.insert(rec.image_id.as_str()) {
            return Err(MgaError::DuplicateImageId(rec.image_id.clone()));
        }
    }
    w.write_all(&MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(records.len() as u32)?;
    for rec in records {
        let id = rec.image_id.as_bytes();
        w.write_u16::<LittleEndian>(id.len() as u16)?;
        w.write_all(id)?;
        w.write_u32::<LittleEndian>(rec.class_id)?;
        w.write_u8(rec.split.code())?;
        w.write_u8(rec.layers.len() as u8)?;
        for layer in &rec.layers {
            w.write_u8(layer.tag.code())?;
            w.write_u16::<LittleEndian>(layer.height as u16)?;
            w.write_u16::<LittleEndian>(layer.width as u16)?;
            w.write_u16::<LittleEndian>(layer.dim() as u16)?;
            for &v in layer.values.as_slice() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
    }
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Vec<ImageRecord<f32>>> {
    let mut r = BufReader::new(File::open(path)?);
    read_records(&mut r)
}

pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<ImageRecord<f32>>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(MgaError::BadMagic {
            expected: MAGIC,
            got: magic,
        });
    }
    let version = read_u16(r, "version")?;
    if version != VERSION {
        return Err(MgaError::UnsupportedVersion(version));
    }
    let count = read_u32(r, "record count")?;
    let mut records = Vec::with_capacity(count as usize);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let id_len = read_u16(r, "image_id length")? as usize;
        let mut id_bytes = vec![0u8; id_len];
        read_exact(r, &mut id_bytes, "image_id")?;
        let image_id = String::from_utf8(id_bytes).map_err(|_| {
            MgaError::TruncatedFile("image_id is not valid UTF-8".into())
        })?;
        if !seen.insert(image_id.clone()) {
            return Err(MgaError::DuplicateImageId(image_id));
        }
        let class_id = read_u32(r, "class_id")?;
        let split = Split::from_code(read_u8(r, "split")?).ok_or_else(|| {
            MgaError::TruncatedFile(format!("invalid split code in record {:?}", image_id))
        })?;
        let layer_count = read_u8(r, "layer count")?;
        let mut layers = Vec::with_capacity(layer_count as usize);
        for _ in 0..layer_count {
            let tag = LayerTag::from_code(read_u8(r, "layer tag")?).ok_or_else(|| {
                MgaError::TruncatedFile(format!(
                    "invalid layer tag in record {:?}",
                    image_id
                ))
            })?;
            let h = read_u16(r, "layer height")? as usize;
            let w = read_u16(r, "layer width")? as usize;
            let dim = read_u16(r, "layer dim")? as usize;
            let mut values = vec![0f32; h * w * dim];
            for v in &mut values {
                *v = r
                    .read_f32::<LittleEndian>()
                    .map_err(|e| map_eof(e, "feature values"))?;
            }
            layers.push(GridFeatures::new(
                tag,
                h,
                w,
                Matrix::from_vec(h * w, dim, values),
            )?);
        }
        records.push(ImageRecord::new(image_id, class_id, split, layers)?);
    }
    Ok(records)
}

/// SHA-256 of the serialized record set; a compact determinism fingerprint.
pub fn records_digest(records: &[ImageRecord<f32>]) -> Result<String> {
    let mut buf = Vec::new();
    write_records(records, &mut buf)?;
    Ok(hex_digest(&buf))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

fn map_eof(e: std::io::Error, what: &str) -> MgaError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        MgaError::TruncatedFile(format!("unexpected end of file reading {}", what))
    } else {
        MgaError::Io(e)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| map_eof(e, what))
}

fn read_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    r.read_u8().map_err(|e| map_eof(e, what))
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    r.read_u16::<LittleEndian>().map_err(|e| map_eof(e, what))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(|e| map_eof(e, what))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record(id: &str, class: u32) -> ImageRecord<f32> {
        let coarse = GridFeatures::new(
            LayerTag::Coarse,
            2,
            2,
            Matrix::from_vec(4, 3, (0..12).map(|i| i as f32 * 0.25).collect()),
        )
        .unwrap();
        let fine = GridFeatures::new(
            LayerTag::Fine,
            2,
            3,
            Matrix::from_vec(6, 2, (0..12).map(|i| -(i as f32) * 0.5).collect()),
        )
        .unwrap();
        ImageRecord::new(id.to_string(), class, Split::Train, vec![coarse, fine]).unwrap()
    }

    #[test]
    fn round_trip_three_records() {
        let records = vec![
            sample_record("a", 0),
            sample_record("b", 1),
            sample_record("c", 1),
        ];
        let mut buf = Vec::new();
        write_records(&records, &mut buf).unwrap();
        let back = read_records(&mut buf.as_slice()).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn empty_record_list_round_trips() {
        let mut buf = Vec::new();
        write_records(&[], &mut buf).unwrap();
        let back = read_records(&mut buf.as_slice()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut buf = Vec::new();
        write_records(&[sample_record("a", 0)], &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            read_records(&mut buf.as_slice()),
            Err(MgaError::BadMagic { .. })
        ));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let mut buf = Vec::new();
        write_records(&[], &mut buf).unwrap();
        buf[4] = 99;
        assert!(matches!(
            read_records(&mut buf.as_slice()),
            Err(MgaError::UnsupportedVersion(_))
        ));
    }

    #[test]
    fn truncation_is_reported() {
        let mut buf = Vec::new();
        write_records(&[sample_record("a", 0)], &mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(matches!(
            read_records(&mut buf.as_slice()),
            Err(MgaError::TruncatedFile(_))
        ));
    }

    #[test]
    fn duplicate_ids_rejected_on_write() {
        let records = vec![sample_record("a", 0), sample_record("a", 1)];
        let mut buf = Vec::new();
        assert!(matches!(
            write_records(&records, &mut buf),
            Err(MgaError::DuplicateImageId(_))
        ));
    }
}
