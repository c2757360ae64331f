//! File formats: the `SEGT` tensor container, binary PGM/PPM, and atomic writes.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "SEGT" | version u8 = 1 | entry count u32
//! per entry: name length u16 | UTF-8 name | ndim u8 | dims u32 × ndim | f32 × prod(dims)
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::embednet::ModelParams;
use crate::error::{Error, Result};
use crate::imagecore::{ImageGrid, InstanceSet, Mask};

pub const MAGIC: &[u8; 4] = b"SEGT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

/// Ordered collection of uniquely named f32 tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorContainer {
    entries: Vec<TensorEntry>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid("tensor name too long"));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::invalid("too many tensor dims"));
        }
        let expected: usize = dims.iter().map(|&d| d as usize).product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "tensor {name}: dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate tensor name {name}")));
        }
        self.entries.push(TensorEntry { name, dims, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Parse("tensor container: bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Parse(format!("tensor container: unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut names = BTreeSet::new();
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Parse("tensor container: name is not UTF-8".into()))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(Error::Parse(format!("tensor container: duplicate name {name}")));
            }
            let ndim = r.take(1)?[0] as usize;
            let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| Error::Parse(format!("tensor container: {name} is too large")))?;
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Parse("tensor too large".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(TensorEntry { name, dims, data });
        }
        if r.at != bytes.len() {
            return Err(Error::Parse(format!(
                "tensor container: {} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Ok(Self { entries })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Parse(format!(
                "tensor container truncated at byte {} (wanted {n} more)",
                self.at
            ))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Masks as one `[K, H, W]` tensor of 0/1 values named `masks`.
pub fn instances_to_container(set: &InstanceSet) -> TensorContainer {
    let (h, w) = set.dims();
    let mut data = Vec::with_capacity(set.len() * h * w);
    for m in set.masks() {
        data.extend(m.bits().iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
    }
    let mut c = TensorContainer::new();
    c.push("masks", vec![set.len() as u32, h as u32, w as u32], data)
        .expect("dims match payload");
    c
}

pub fn instances_from_container(c: &TensorContainer) -> Result<InstanceSet> {
    let e = c
        .get("masks")
        .ok_or_else(|| Error::Parse("tensor container has no `masks` entry".into()))?;
    if e.dims.len() != 3 {
        return Err(Error::Parse(format!("masks must be 3-d, got {:?}", e.dims)));
    }
    let (k, h, w) = (e.dims[0] as usize, e.dims[1] as usize, e.dims[2] as usize);
    let masks = (0..k)
        .map(|i| Mask::from_bits(h, w, e.data[i * h * w..(i + 1) * h * w].iter().map(|&v| v != 0.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    InstanceSet::new(h, w, masks)
}

pub fn grid_to_container(name: &str, grid: &ImageGrid) -> TensorContainer {
    let mut c = TensorContainer::new();
    c.push(
        name,
        vec![grid.height() as u32, grid.width() as u32],
        grid.values().iter().map(|&v| v as f32).collect(),
    )
    .expect("dims match payload");
    c
}

pub fn params_to_container(params: &ModelParams) -> TensorContainer {
    let mut c = TensorContainer::new();
    for (name, dims, values) in params.named_tensors() {
        c.push(
            name,
            dims.iter().map(|&d| d as u32).collect(),
            values.iter().map(|&v| v as f32).collect(),
        )
        .expect("parameter shapes are consistent");
    }
    c
}

pub fn params_from_container(c: &TensorContainer) -> Result<ModelParams> {
    let dims: Vec<Vec<usize>> = c
        .entries()
        .iter()
        .map(|e| e.dims.iter().map(|&d| d as usize).collect())
        .collect();
    ModelParams::from_named_tensors(
        c.entries()
            .iter()
            .zip(&dims)
            .map(|(e, d)| (e.name.as_str(), d.as_slice(), e.data.iter().map(|&v| v as f64).collect())),
    )
}

/// 8-bit binary PGM; values are clamped to [0, 1] and scaled to 0..=255.
pub fn encode_pgm(image: &ImageGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.values().iter().map(|&v| to_byte(v)));
    out
}

pub(crate) fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5) with maxval up to 65535, scaled to [0, 1].
pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGrid> {
    let (header, body) = parse_netpbm_header(bytes, b"P5")?;
    let [w, h, maxval] = header;
    let values: Vec<f64> = if maxval < 256 {
        if body.len() < w * h {
            return Err(Error::Parse("PGM payload truncated".into()));
        }
        body[..w * h].iter().map(|&b| b as f64 / maxval as f64).collect()
    } else {
        if body.len() < 2 * w * h {
            return Err(Error::Parse("PGM payload truncated".into()));
        }
        body[..2 * w * h]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64)
            .collect()
    };
    ImageGrid::new(h, w, values)
}

/// Binary PPM (P6), 8-bit.
pub fn encode_ppm(width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<Vec<u8>> {
    if rgb.len() != width * height {
        return Err(Error::invalid("PPM pixel count does not match dims"));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in rgb {
        out.extend_from_slice(px);
    }
    Ok(out)
}

/// Returns `(width, height, pixels)` of an 8-bit P6 image.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let ([w, h, maxval], body) = parse_netpbm_header(bytes, b"P6")?;
    if maxval > 255 {
        return Err(Error::Parse("only 8-bit PPM is supported".into()));
    }
    if body.len() < 3 * w * h {
        return Err(Error::Parse("PPM payload truncated".into()));
    }
    Ok((w, h, body[..3 * w * h].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

fn parse_netpbm_header<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<([usize; 3], &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Parse(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut at = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and `#` comments separate header tokens.
        loop {
            match bytes.get(at) {
                Some(b) if b.is_ascii_whitespace() => at += 1,
                Some(b'#') => {
                    while bytes.get(at).is_some_and(|&b| b != b'\n') {
                        at += 1;
                    }
                }
                _ => break,
            }
        }
        let start = at;
        while bytes.get(at).is_some_and(|b| b.is_ascii_digit()) {
            at += 1;
        }
        *field = std::str::from_utf8(&bytes[start..at])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse("malformed netpbm header".into()))?;
    }
    // Exactly one whitespace byte precedes the raster.
    if !bytes.get(at).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Parse("malformed netpbm header".into()));
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Parse(format!("unsupported netpbm dims {w}x{h}, maxval {maxval}")));
    }
    Ok((fields, &bytes[at + 1..]))
}

/// Write via a temporary sibling file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
