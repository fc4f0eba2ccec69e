//! Bit-exact serialization: a minimal little-endian tensor container plus
//! JSON, CSV and 16-bit PGM writers for reports and image dumps.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! magic "JOSA" | version u16 | tensor count u32
//! per tensor: dtype u8 (1 = f32) | rank u8 | dims u32 x rank
//!             | name length u16 | name utf-8 | payload f32 x prod(dims)
//! ```
//!
//! Payloads are f32 on disk; in-memory math runs in f64 and is rounded on
//! write. Reading back what was written is bitwise exact.

use crate::error::{Error, Result};
use crate::field::Field;
use crate::sphere_grid::GridSpec;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"JOSA";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

const MAX_RANK: u8 = 8;
const MAX_NAME: u16 = 4096;
const MAX_ELEMS: u64 = 1 << 30;

/// A named f32 tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let n: u64 = dims.iter().map(|d| *d as u64).product();
        if n != data.len() as u64 {
            return Err(Error::Corrupt(format!(
                "tensor data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self {
            name: name.into(),
            dims,
            data,
        })
    }

    /// [channels, height, width] tensor from a field, rounded to f32.
    pub fn from_field(name: impl Into<String>, field: &Field) -> Self {
        let grid = field.grid();
        Self {
            name: name.into(),
            dims: vec![
                field.channels() as u32,
                grid.height() as u32,
                grid.width() as u32,
            ],
            data: field.data().iter().map(|v| *v as f32).collect(),
        }
    }

    /// Interprets a rank-3 [channels, height, width] tensor as a field.
    pub fn to_field(&self) -> Result<Field> {
        if self.dims.len() != 3 {
            return Err(Error::Corrupt(format!(
                "tensor {:?} has rank {}, expected 3",
                self.name,
                self.dims.len()
            )));
        }
        let grid = GridSpec::new(self.dims[1] as usize, self.dims[2] as usize)?;
        Field::from_vec(
            grid,
            self.dims[0] as usize,
            self.data.iter().map(|v| *v as f64).collect(),
        )
    }
}

pub fn write_container(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let n: u64 = t.dims.iter().map(|d| *d as u64).product();
        if n != t.data.len() as u64 {
            return Err(Error::Corrupt(format!(
                "tensor {:?}: dims/product mismatch on write",
                t.name
            )));
        }
        if t.dims.len() > MAX_RANK as usize || t.name.len() > MAX_NAME as usize {
            return Err(Error::Corrupt(format!(
                "tensor {:?}: rank or name too large",
                t.name
            )));
        }
        w.write_all(&[DTYPE_F32, t.dims.len() as u8])?;
        for d in &t.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&(t.name.len() as u16).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what)
        } else {
            Error::Io(e)
        }
    })
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::CorruptMagic);
    }
    let mut b2 = [0u8; 2];
    read_exact(&mut r, &mut b2, "version")?;
    let version = u16::from_le_bytes(b2);
    if version > VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4, "tensor count")?;
    let count = u32::from_le_bytes(b4);

    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut hdr = [0u8; 2];
        read_exact(&mut r, &mut hdr, "tensor header")?;
        let (dtype, rank) = (hdr[0], hdr[1]);
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        if rank > MAX_RANK {
            return Err(Error::Corrupt(format!("rank {rank} too large")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            read_exact(&mut r, &mut b4, "dims")?;
            dims.push(u32::from_le_bytes(b4));
        }
        let n: u64 = dims.iter().map(|d| *d as u64).product();
        if n > MAX_ELEMS {
            return Err(Error::Corrupt(format!("implausible element count {n}")));
        }
        read_exact(&mut r, &mut b2, "name length")?;
        let name_len = u16::from_le_bytes(b2);
        if name_len > MAX_NAME {
            return Err(Error::Corrupt(format!("name length {name_len} too large")));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        read_exact(&mut r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Corrupt("tensor name is not utf-8".into()))?;
        let mut payload = vec![0u8; n as usize * 4];
        read_exact(&mut r, &mut payload, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor { name, dims, data });
    }
    let mut rest = [0u8; 1];
    match r.read(&mut rest)? {
        0 => Ok(tensors),
        _ => Err(Error::Corrupt("trailing bytes after last tensor".into())),
    }
}

/// Looks a tensor up by name.
pub fn find_tensor<'a>(tensors: &'a [Tensor], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))
}

// --- JSON / CSV / PGM ---------------------------------------------------------

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

/// Minimal CSV writer; fields containing commas or quotes are quoted.
pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let quote = |s: &str| -> String {
        if s.contains(',') || s.contains('"') || s.contains('\n') {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|c| quote(c)).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// One channel of a field as a 16-bit binary PGM, min-max normalized.
pub fn write_pgm16(path: impl AsRef<Path>, field: &Field, channel: usize) -> Result<()> {
    let grid = field.grid();
    let plane = field.plane(channel);
    let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n65535\n", grid.width(), grid.height())?;
    for v in plane {
        let q = (((v - lo) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16;
        w.write_all(&q.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::fs;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("josa-io-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let t1 = Tensor::new(
            "field",
            vec![2, 64, 128],
            (0..2 * 64 * 128).map(|i| (i as f32 * 0.7).sin()).collect(),
        )
        .unwrap();
        let t2 = Tensor::new("scalar", vec![1], vec![f32::NAN]).unwrap();
        let path = tmp("roundtrip.josa");
        write_container(&path, &[t1.clone(), t2.clone()]).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], t1);
        // NaN payloads keep their bit pattern
        assert_eq!(back[1].data[0].to_bits(), t2.data[0].to_bits());
    }

    #[test]
    fn truncated_file_reports_truncation() {
        let t = Tensor::new("x", vec![16], vec![1.0; 16]).unwrap();
        let path = tmp("trunc.josa");
        write_container(&path, &[t]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_container(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let path = tmp("magic.josa");
        fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_container(&path), Err(Error::CorruptMagic)));
    }

    #[test]
    fn future_version_is_rejected() {
        let t = Tensor::new("x", vec![2], vec![1.0, 2.0]).unwrap();
        let path = tmp("version.josa");
        write_container(&path, &[t]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 0xFF;
        bytes[5] = 0x00;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_container(&path),
            Err(Error::UnsupportedVersion(255))
        ));
    }

    #[test]
    fn dims_payload_mismatch_is_corrupt() {
        // hand-build a container whose dims product exceeds the payload
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(DTYPE_F32);
        bytes.push(1); // rank 1
        bytes.extend_from_slice(&8u32.to_le_bytes()); // dims say 8 values
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&1.0f32.to_le_bytes()); // only one value
        let path = tmp("mismatch.josa");
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_container(&path), Err(Error::Truncated(_))));

        // and the converse: trailing data after the declared tensors
        let mut bytes2 = Vec::new();
        bytes2.extend_from_slice(&MAGIC);
        bytes2.extend_from_slice(&VERSION.to_le_bytes());
        bytes2.extend_from_slice(&0u32.to_le_bytes());
        bytes2.push(0xAB);
        let path2 = tmp("trailing.josa");
        fs::write(&path2, &bytes2).unwrap();
        assert!(matches!(read_container(&path2), Err(Error::Corrupt(_))));
    }

    #[test]
    fn tensor_new_validates_dims() {
        assert!(Tensor::new("x", vec![3, 3], vec![0.0; 8]).is_err());
    }

    #[test]
    fn field_round_trip_through_tensor() {
        let grid = GridSpec::new(8, 16).unwrap();
        let f = Field::from_fn(grid, 2, |c, i, j| (c + i + j) as f64 * 0.25);
        let t = Tensor::from_field("f", &f);
        let back = t.to_field().unwrap();
        assert_eq!(back.grid(), grid);
        assert_eq!(back.channels(), 2);
        // exact because the values are small dyadic rationals
        assert_eq!(back.data(), f.data());
    }

    #[test]
    fn pgm_has_expected_header_and_size() {
        let grid = GridSpec::new(8, 16).unwrap();
        let f = Field::from_fn(grid, 1, |_, i, j| (i * 16 + j) as f64);
        let path = tmp("dump.pgm");
        write_pgm16(&path, &f, 0).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n16 8\n65535\n"));
        assert_eq!(bytes.len(), b"P5\n16 8\n65535\n".len() + 2 * 8 * 16);
    }

    proptest! {
        #[test]
        fn container_round_trip_any_payload(data in proptest::collection::vec(any::<f32>(), 1..200)) {
            let t = Tensor::new("t", vec![data.len() as u32], data).unwrap();
            let path = tmp(&format!("prop-{}.josa", t.data.len()));
            write_container(&path, std::slice::from_ref(&t)).unwrap();
            let back = read_container(&path).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(back[0].dims.clone(), t.dims.clone());
            let a: Vec<u32> = back[0].data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
