//! Dataset files.
//!
//! Binary (all integers little-endian):
//!
//! ```text
//! "IMB1" | version u32 | N u32 | K u32 | layout u8 (0 vector, 1 image)
//! | dims u32 (D, or C H W) | N × (label u16 | features f32 × numel)
//! ```
//!
//! CSV has a `label,f0,f1,...` header and one row per sample. A CSV file
//! carries no class count or image shape, so it reads back as vectors with
//! `K = max label + 1`.

use std::fs;
use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::InputShape;

pub const DATASET_MAGIC: &[u8; 4] = b"IMB1";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(ds: &LabeledDataset) -> Result<Vec<u8>> {
    if ds.is_empty() {
        return Err(Error::invalid("refusing to write an empty dataset"));
    }
    if ds.num_classes() > usize::from(u16::MAX) + 1 {
        return Err(Error::invalid("binary format stores labels as u16"));
    }
    let mut out = Vec::with_capacity(32 + ds.len() * (2 + 4 * ds.feature_len()));
    out.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION, ds.len() as u32, ds.num_classes() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let dims = match *ds.shape() {
        InputShape::Vector { dim } => {
            out.push(0);
            vec![dim]
        }
        InputShape::Image {
            channels,
            height,
            width,
        } => {
            out.push(1);
            vec![channels, height, width]
        }
    };
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for i in 0..ds.len() {
        out.extend_from_slice(&(ds.labels()[i] as u16).to_le_bytes());
        for &x in ds.sample(i) {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + N)
            .ok_or_else(|| Error::Truncated {
                path: self.origin.to_string(),
            })?;
        self.pos += N;
        Ok(s.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }
}

pub fn decode_dataset(bytes: &[u8], origin: &str) -> Result<LabeledDataset> {
    let format = |message: String| Error::Format {
        path: origin.to_string(),
        message,
    };
    let mut r = Cursor {
        bytes,
        pos: 0,
        origin,
    };
    if r.take::<4>().ok().as_ref() != Some(DATASET_MAGIC) {
        return Err(Error::BadMagic {
            path: origin.into(),
        });
    }
    let version = r.u32()? as u32;
    if version != DATASET_VERSION {
        return Err(format(format!("unsupported dataset version {version}")));
    }
    let n = r.u32()?;
    let k = r.u32()?;
    let shape = match r.take::<1>()?[0] {
        0 => InputShape::Vector { dim: r.u32()? },
        1 => InputShape::Image {
            channels: r.u32()?,
            height: r.u32()?,
            width: r.u32()?,
        },
        tag => return Err(format(format!("unknown layout tag {tag}"))),
    };
    let width = shape.numel();
    if width == 0 || k == 0 {
        return Err(format("zero-sized shape or class count".into()));
    }
    let needed = n
        .checked_mul(2 + 4 * width)
        .ok_or_else(|| format("record size overflows".into()))?;
    if bytes.len() - r.pos < needed {
        return Err(Error::Truncated {
            path: origin.into(),
        });
    }
    if bytes.len() - r.pos > needed {
        return Err(format("trailing bytes after the last record".into()));
    }
    let mut labels = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * width);
    for _ in 0..n {
        let y = usize::from(u16::from_le_bytes(r.take()?));
        if y >= k {
            return Err(format(format!("label {y} out of range for {k} classes")));
        }
        labels.push(y);
        for _ in 0..width {
            features.push(f64::from(f32::from_le_bytes(r.take()?)));
        }
    }
    LabeledDataset::new(shape, k, features, labels)
}

pub fn write_csv(ds: &LabeledDataset) -> Result<String> {
    if ds.is_empty() {
        return Err(Error::invalid("refusing to write an empty dataset"));
    }
    let mut out = String::from("label");
    for j in 0..ds.feature_len() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..ds.len() {
        out.push_str(&ds.labels()[i].to_string());
        for x in ds.sample(i) {
            // Display for f64 prints the shortest exact round-trip form.
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn read_csv(text: &str, origin: &str) -> Result<LabeledDataset> {
    let format = |line: usize, message: String| Error::Format {
        path: origin.to_string(),
        message: format!("line {line}: {message}"),
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| format(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(format(1, "header must be `label,f0,f1,...`".into()));
    }
    let width = cols.len() - 1;
    let mut labels = Vec::new();
    let mut features = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(format(
                i + 1,
                format!("expected {} fields, got {}", cols.len(), fields.len()),
            ));
        }
        labels.push(
            fields[0]
                .parse::<usize>()
                .map_err(|e| format(i + 1, format!("label: {e}")))?,
        );
        for f in &fields[1..] {
            features.push(
                f.parse::<f64>()
                    .map_err(|e| format(i + 1, format!("feature: {e}")))?,
            );
        }
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if k == 0 {
        return Err(format(1, "no samples".into()));
    }
    LabeledDataset::new(InputShape::Vector { dim: width }, k, features, labels)
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Write binary, or CSV when the path ends in `.csv`.
pub fn write_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_csv(path) {
        write_csv(ds)?.into_bytes()
    } else {
        encode_dataset(ds)?
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read binary, or CSV when the path ends in `.csv`.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    if is_csv(path) {
        let text = String::from_utf8(bytes).map_err(|_| Error::Format {
            path: origin.clone(),
            message: "not UTF-8".into(),
        })?;
        read_csv(&text, &origin)
    } else {
        decode_dataset(&bytes, &origin)
    }
}
