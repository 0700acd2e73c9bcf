//! Big-endian IDX container (magic 0x00000803 for u8 image tensors,
//! 0x00000801 for u8 label vectors).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    Images {
        data: Vec<u8>,
        count: usize,
        height: usize,
        width: usize,
    },
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::parse(format!(
            "IDX truncated: wanted 4 bytes at offset {offset}, file has {}",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse one IDX file (images or labels, decided by the magic).
pub fn load_idx(path: &Path) -> Result<IdxData> {
    let bytes = fs::read(path)
        .map_err(|e| Error::parse(format!("cannot read {}: {e}", path.display())))?;
    let magic = be_u32(&bytes, 0)?;
    match magic {
        IDX_IMAGES_MAGIC => {
            let count = be_u32(&bytes, 4)? as usize;
            let height = be_u32(&bytes, 8)? as usize;
            let width = be_u32(&bytes, 12)? as usize;
            let expect = 16 + count * height * width;
            if bytes.len() != expect {
                return Err(Error::parse(format!(
                    "IDX image payload mismatch at byte {}: expected {} bytes total, got {}",
                    16,
                    expect,
                    bytes.len()
                )));
            }
            Ok(IdxData::Images {
                data: bytes[16..].to_vec(),
                count,
                height,
                width,
            })
        }
        IDX_LABELS_MAGIC => {
            let count = be_u32(&bytes, 4)? as usize;
            let expect = 8 + count;
            if bytes.len() != expect {
                return Err(Error::parse(format!(
                    "IDX label payload mismatch at byte {}: expected {} bytes total, got {}",
                    8,
                    expect,
                    bytes.len()
                )));
            }
            Ok(IdxData::Labels(bytes[8..].to_vec()))
        }
        other => Err(Error::parse(format!(
            "unknown IDX magic {other:#010x} at byte 0 in {}",
            path.display()
        ))),
    }
}

pub fn write_idx_images(
    path: &Path,
    data: &[u8],
    count: usize,
    height: usize,
    width: usize,
) -> Result<()> {
    if data.len() != count * height * width {
        return Err(Error::layout(format!(
            "write_idx_images: {} bytes for {count}x{height}x{width}",
            data.len()
        )));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(count as u32).to_be_bytes())?;
    f.write_all(&(height as u32).to_be_bytes())?;
    f.write_all(&(width as u32).to_be_bytes())?;
    f.write_all(data)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_file_round_trips_bitwise() {
        let dir = std::env::temp_dir().join("mdbm_idx_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("four.idx3-ubyte");
        let data: Vec<u8> = (0..4 * 28 * 28).map(|i| (i % 251) as u8).collect();
        write_idx_images(&path, &data, 4, 28, 28).unwrap();
        match load_idx(&path).unwrap() {
            IdxData::Images {
                data: got,
                count,
                height,
                width,
            } => {
                assert_eq!((count, height, width), (4, 28, 28));
                assert_eq!(got, data);
            }
            _ => panic!("wrong kind"),
        }
        // whole-file bitwise comparison after a rewrite
        let bytes = std::fs::read(&path).unwrap();
        write_idx_images(&path, &data, 4, 28, 28).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
    }

    #[test]
    fn label_file_round_trips() {
        let dir = std::env::temp_dir().join("mdbm_idx_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("labels.idx1-ubyte");
        let labels = vec![3u8, 1, 4, 1, 5, 9];
        write_idx_labels(&path, &labels).unwrap();
        assert_eq!(load_idx(&path).unwrap(), IdxData::Labels(labels));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("mdbm_idx_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.idx");
        std::fs::write(&path, 0x0000_0999u32.to_be_bytes()).unwrap();
        let err = load_idx(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncation_is_rejected_with_offset() {
        let dir = std::env::temp_dir().join("mdbm_idx_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.idx");
        let mut bytes = Vec::new();
        bytes.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend(28u32.to_be_bytes());
        bytes.extend(28u32.to_be_bytes());
        bytes.extend(vec![0u8; 100]);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_idx(&path).unwrap_err();
        assert!(err.to_string().contains("byte"), "{err}");
    }
}
