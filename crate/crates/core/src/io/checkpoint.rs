//! Binary checkpoints.
//!
//! Layout, integers little-endian:
//! `"XBWT"`, version `u16`, record count `u16`, then per record: name
//! (`u16` length + UTF-8), kind `u8`, dims (`u32` each, count fixed by kind),
//! values as `f32` in weight-matrix row-major order, mask flag `u8`, and when
//! set the packed mask (row-major, LSB-first). The flag is 0 for no mask and
//! otherwise one more than the mask's provenance code.
//!
//! Kinds: 0 dense `[fan_in, fan_out]`, 1 conv `[out, in, k, k]`,
//! 2 bias `[len]`. Biases never carry a mask.

use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::nnet::Network;
use crate::prune::{Provenance, PruneMask};
use crate::tiling::{LayerMatrix, LayerShape};

pub const MAGIC: &[u8; 4] = b"XBWT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordShape {
    Weights(LayerShape),
    Bias(usize),
}

impl RecordShape {
    fn kind(self) -> u8 {
        match self {
            RecordShape::Weights(LayerShape::Dense { .. }) => 0,
            RecordShape::Weights(LayerShape::Conv { .. }) => 1,
            RecordShape::Bias(_) => 2,
        }
    }

    fn dims(self) -> Vec<usize> {
        match self {
            RecordShape::Weights(LayerShape::Dense { fan_in, fan_out }) => vec![fan_in, fan_out],
            RecordShape::Weights(LayerShape::Conv {
                out_channels,
                in_channels,
                kernel,
            }) => vec![out_channels, in_channels, kernel, kernel],
            RecordShape::Bias(len) => vec![len],
        }
    }

    fn numel(self) -> usize {
        self.dims().iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: RecordShape,
    pub values: Vec<f32>,
    pub mask: Option<PruneMask>,
}

impl Record {
    /// The weight matrix of a weights record.
    pub fn matrix(&self) -> Option<Result<LayerMatrix>> {
        match self.shape {
            RecordShape::Weights(shape) => Some(LayerMatrix::new(
                self.name.clone(),
                shape,
                self.values.iter().map(|&v| v as f64).collect(),
            )),
            RecordShape::Bias(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

impl Checkpoint {
    pub fn from_network(net: &Network) -> Self {
        let mut records = Vec::new();
        for p in net.params() {
            records.push(Record {
                name: p.weights.name().to_string(),
                shape: RecordShape::Weights(p.weights.shape()),
                values: p.weights.values().iter().map(|&v| v as f32).collect(),
                mask: p.mask.clone(),
            });
            records.push(Record {
                name: bias_name(p.weights.name()),
                shape: RecordShape::Bias(p.bias.len()),
                values: p.bias.iter().map(|&v| v as f32).collect(),
                mask: None,
            });
        }
        Checkpoint { records }
    }

    /// Weight layers only, with their masks.
    pub fn layers(&self) -> Result<Vec<(LayerMatrix, Option<PruneMask>)>> {
        self.records
            .iter()
            .filter_map(|r| r.matrix().map(|m| m.map(|m| (m, r.mask.clone()))))
            .collect()
    }

    /// Replaces the masks of the weight records, in order.
    pub fn set_masks(&mut self, masks: &[Option<PruneMask>]) -> Result<()> {
        let mut it = masks.iter();
        for r in self.records.iter_mut().filter(|r| matches!(r.shape, RecordShape::Weights(_))) {
            let m = it
                .next()
                .ok_or_else(|| Error::Dimension("fewer masks than weight layers".into()))?;
            r.mask = m.clone();
        }
        if it.next().is_some() {
            return Err(Error::Dimension("more masks than weight layers".into()));
        }
        Ok(())
    }

    /// Copies weights, biases and masks into a network built from the same
    /// architecture, matching records by layer name.
    pub fn restore(&self, net: &mut Network) -> Result<()> {
        let names: Vec<(String, LayerShape, usize)> = net
            .params()
            .map(|p| (p.weights.name().to_string(), p.weights.shape(), p.bias.len()))
            .collect();
        let mut masks = Vec::with_capacity(names.len());
        for (i, (name, shape, bias_len)) in names.iter().enumerate() {
            let w = self.find(name)?;
            if w.shape != RecordShape::Weights(*shape) {
                return Err(Error::Data(format!(
                    "checkpoint layer '{name}' has shape {:?}, network expects {:?}",
                    w.shape, shape
                )));
            }
            let b = self.find(&bias_name(name))?;
            if b.shape != RecordShape::Bias(*bias_len) {
                return Err(Error::Data(format!(
                    "checkpoint bias of '{name}' has {} values, network expects {bias_len}",
                    b.shape.numel()
                )));
            }
            net.set_weights(
                i,
                w.values.iter().map(|&v| v as f64).collect(),
                b.values.iter().map(|&v| v as f64).collect(),
            )?;
            masks.push(w.mask.clone());
        }
        if self.records.len() != 2 * names.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} records, network needs {}",
                self.records.len(),
                2 * names.len()
            )));
        }
        net.set_masks(masks)
    }

    fn find(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no record '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u16::try_from(self.records.len())
            .map_err(|_| Error::InvalidArgument("too many records for a checkpoint".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u16::<LittleEndian>(VERSION).expect("vec write");
        out.write_u16::<LittleEndian>(count).expect("vec write");
        for r in &self.records {
            let name = r.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("layer name '{}' too long", r.name)))?;
            out.write_u16::<LittleEndian>(len).expect("vec write");
            out.extend_from_slice(name);
            out.push(r.shape.kind());
            for d in r.shape.dims() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
                out.write_u32::<LittleEndian>(d).expect("vec write");
            }
            if r.values.len() != r.shape.numel() {
                return Err(Error::ShapeMismatch {
                    expected: r.shape.numel(),
                    actual: r.values.len(),
                });
            }
            for &v in &r.values {
                out.write_f32::<LittleEndian>(v).expect("vec write");
            }
            match &r.mask {
                Some(m) => {
                    out.push(1 + m.provenance.code());
                    out.extend_from_slice(&m.pack());
                }
                None => out.push(0),
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            cur: Cursor::new(bytes),
            path: path.to_path_buf(),
        };
        let magic = r.bytes(4, "magic")?;
        if magic != MAGIC {
            return Err(r.fail(0, format!("bad magic {magic:02x?}, expected \"XBWT\"")));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.fail(4, format!("unsupported version {version}")));
        }
        let count = r.u16("record count")?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let at = r.pos();
            let name = String::from_utf8(r.bytes(len, "layer name")?)
                .map_err(|_| r.fail(at, "layer name is not UTF-8".into()))?;
            let at = r.pos();
            let kind = r.u8("layer kind")?;
            let shape = match kind {
                0 => {
                    let (i, o) = (r.dim()?, r.dim()?);
                    RecordShape::Weights(LayerShape::dense(i, o))
                }
                1 => {
                    let (o, i, k1, k2) = (r.dim()?, r.dim()?, r.dim()?, r.dim()?);
                    if k1 != k2 {
                        return Err(r.fail(at, format!("non-square kernel {k1}x{k2}")));
                    }
                    RecordShape::Weights(LayerShape::conv(o, i, k1))
                }
                2 => RecordShape::Bias(r.dim()?),
                k => return Err(r.fail(at, format!("unknown layer kind {k}"))),
            };
            let numel = shape.numel();
            if numel.saturating_mul(4) > bytes.len() {
                return Err(r.fail(r.pos(), format!("layer '{name}' claims {numel} values")));
            }
            let mut values = vec![0f32; numel];
            let at = r.pos();
            r.cur
                .read_f32_into::<LittleEndian>(&mut values)
                .map_err(|_| r.fail(at, format!("truncated weights of '{name}'")))?;
            let at = r.pos();
            let mask = match r.u8("mask flag")? {
                0 => None,
                f @ 1..=7 => {
                    let RecordShape::Weights(ls) = shape else {
                        return Err(r.fail(at, format!("bias record '{name}' has a mask")));
                    };
                    let provenance = Provenance::from_code(f - 1).expect("flag range checked");
                    let packed = r.bytes(numel.div_ceil(8), "mask bits")?;
                    Some(PruneMask::unpack(ls.height(), ls.width(), &packed).with_provenance(provenance))
                }
                f => return Err(r.fail(at, format!("invalid mask flag {f}"))),
            };
            records.push(Record {
                name,
                shape,
                values,
                mask,
            });
        }
        if r.pos() != bytes.len() as u64 {
            return Err(r.fail(r.pos(), "trailing bytes after last record".into()));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    path: PathBuf,
}

impl Reader<'_> {
    fn pos(&self) -> u64 {
        self.cur.position()
    }

    fn fail(&self, offset: u64, message: String) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset,
            message,
        }
    }

    fn truncated(&self, offset: u64, what: &str) -> Error {
        self.fail(offset, format!("truncated while reading {what}"))
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let at = self.pos();
        let mut buf = vec![0; n];
        self.cur.read_exact(&mut buf).map_err(|_| self.truncated(at, what))?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let at = self.pos();
        self.cur.read_u8().map_err(|_| self.truncated(at, what))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let at = self.pos();
        self.cur.read_u16::<LittleEndian>().map_err(|_| self.truncated(at, what))
    }

    fn dim(&mut self) -> Result<usize> {
        let at = self.pos();
        let d = self
            .cur
            .read_u32::<LittleEndian>()
            .map_err(|_| self.truncated(at, "dimension"))?;
        if d == 0 {
            return Err(self.fail(at, "zero dimension".into()));
        }
        Ok(d as usize)
    }
}
