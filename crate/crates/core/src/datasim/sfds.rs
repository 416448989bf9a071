//! Dataset cache files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "SFDS"  u32 version  u32 width  u32 rows  u32 n_classes (0 = regression)  u8 task
//! u32 n_train  u32 n_val  u8 shift tag  f64 shift param  u64 shift seed
//! rows x width^2 f64 inputs (train, val, test rows in order)
//! rows f64 labels
//! ```

use std::io::{Read, Write};

use ndarray::Array2;

use super::{DataError, Result, ShiftKind, ShiftSpec, SiteDataset, Split};
use crate::nn::{Labels, TaskKind, TaskSpec};

pub const SFDS_MAGIC: &[u8; 4] = b"SFDS";
pub const SFDS_VERSION: u32 = 1;

pub fn write_sfds<W: Write>(ds: &SiteDataset, mut out: W) -> Result<()> {
    let rows = ds.train.len() + ds.val.len() + ds.test.len();
    let (n_classes, task) = match ds.task.kind {
        TaskKind::Classification { n_classes } => (n_classes as u32, 0u8),
        TaskKind::Regression => (0, 1),
    };
    let mut buf = Vec::with_capacity(64 + rows * (ds.input_dim() + 1) * 8);
    buf.extend_from_slice(SFDS_MAGIC);
    buf.extend_from_slice(&SFDS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.width as u32).to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&n_classes.to_le_bytes());
    buf.push(task);
    buf.extend_from_slice(&(ds.train.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.val.len() as u32).to_le_bytes());
    buf.push(ds.shift.kind.tag());
    buf.extend_from_slice(&ds.shift.kind.param().to_le_bytes());
    buf.extend_from_slice(&ds.shift.seed.to_le_bytes());
    for split in ds.splits() {
        for v in split.inputs.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for split in ds.splits() {
        for v in split.labels.as_f64() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DataError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_sfds<R: Read>(mut input: R) -> Result<SiteDataset> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != SFDS_MAGIC {
        return Err(DataError::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != SFDS_VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let width = c.u32()? as usize;
    let rows = c.u32()? as usize;
    let n_classes = c.u32()? as usize;
    let task = match c.u8()? {
        0 => TaskSpec::classification(n_classes),
        1 => TaskSpec::regression(),
        t => return Err(DataError::Format(format!("unknown task tag {t}"))),
    };
    let n_train = c.u32()? as usize;
    let n_val = c.u32()? as usize;
    let tag = c.u8()?;
    let param = c.f64()?;
    let seed = c.u64()?;
    let kind = ShiftKind::from_tag(tag, param).ok_or_else(|| DataError::Format(format!("unknown shift tag {tag}")))?;
    if n_train + n_val > rows {
        return Err(DataError::Format("split sizes exceed row count".into()));
    }
    let d = width * width;
    let mut inputs = Vec::with_capacity(rows * d);
    for _ in 0..rows * d {
        inputs.push(c.f64()?);
    }
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        labels.push(c.f64()?);
    }
    if c.pos != bytes.len() {
        return Err(DataError::Format("trailing bytes".into()));
    }
    let inputs = Array2::from_shape_vec((rows, d), inputs).map_err(|e| DataError::Format(e.to_string()))?;
    let bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, rows)];
    let mut splits = bounds.iter().map(|&(a, b)| {
        let rows: Vec<usize> = (a..b).collect();
        let lab = &labels[a..b];
        let labels = if task.is_classification() {
            Labels::Classes(lab.iter().map(|&v| v as usize).collect())
        } else {
            Labels::Values(lab.to_vec())
        };
        Split { inputs: inputs.select(ndarray::Axis(0), &rows), labels }
    });
    Ok(SiteDataset {
        width,
        task,
        shift: ShiftSpec { kind, seed },
        train: splits.next().expect("three splits"),
        val: splits.next().expect("three splits"),
        test: splits.next().expect("three splits"),
    })
}
