//! IDX image/label files (the MNIST container format).

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use crate::data::{Dataset, InputShape};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn read_u32(cur: &mut Cursor<&[u8]>, path: &Path) -> Result<u32> {
    let at = cur.position();
    cur.read_u32::<BigEndian>()
        .map_err(|_| format_err(path, at, "truncated"))
}

fn read_body(cur: &mut Cursor<&[u8]>, path: &Path, len: usize) -> Result<Vec<u8>> {
    let at = cur.position();
    let available = cur.get_ref().len() as u64 - at;
    if (len as u64) > available {
        return Err(format_err(
            path,
            at + available,
            format!("truncated: expected {len} data bytes, found {available}"),
        ));
    }
    let mut buf = vec![0; len];
    cur.read_exact(&mut buf).expect("length checked");
    if cur.position() != cur.get_ref().len() as u64 {
        return Err(format_err(path, cur.position(), "trailing bytes after data"));
    }
    Ok(buf)
}

fn check_magic(cur: &mut Cursor<&[u8]>, path: &Path, expected: u32) -> Result<()> {
    let magic = read_u32(cur, path)?;
    if magic != expected {
        return Err(format_err(
            path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        ));
    }
    Ok(())
}

/// Parsed image file: `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, path, IMAGES_MAGIC)?;
    let count = read_u32(&mut cur, path)? as usize;
    let rows = read_u32(&mut cur, path)? as usize;
    let cols = read_u32(&mut cur, path)? as usize;
    let len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| format_err(path, 4, "image dimensions overflow"))?;
    let pixels = read_body(&mut cur, path, len)?;
    Ok((count, rows, cols, pixels))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, path, LABELS_MAGIC)?;
    let count = read_u32(&mut cur, path)? as usize;
    read_body(&mut cur, path, count)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image/label file pair. Pixels are scaled to `[0, 1]`; the class
/// count is one more than the largest label.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_images(&read(images)?, images)?;
    let label_bytes = parse_labels(&read(labels)?, labels)?;
    if label_bytes.len() != count {
        return Err(format_err(
            labels,
            4,
            format!(
                "label count {} does not match image count {count}",
                label_bytes.len()
            ),
        ));
    }
    let classes = label_bytes.iter().copied().max().map_or(1, |m| m as usize + 1);
    Dataset::new(
        InputShape {
            channels: 1,
            height: rows,
            width: cols,
        },
        classes,
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        label_bytes.iter().map(|&l| l as usize).collect(),
    )
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.write_u32::<BigEndian>(v).expect("vec write");
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.write_u32::<BigEndian>(LABELS_MAGIC).expect("vec write");
    out.write_u32::<BigEndian>(labels.len() as u32).expect("vec write");
    out.extend_from_slice(labels);
    out
}
