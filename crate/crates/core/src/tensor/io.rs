//! Portable tensor container.
//!
//! One record is the magic `APTT`, a little-endian `u32` rank, `rank`
//! little-endian `u32` extents, then the row-major payload as little-endian
//! `f64`. A checkpoint is a concatenation of records (`weights.aptt`) plus
//! a text manifest (`manifest.txt`) with one `name shape offset` line per
//! parameter, where `shape` is `AxBxC` (`-` for rank 0) and `offset` is the
//! byte offset of the record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{Params, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"APTT";

pub const WEIGHTS_FILE: &str = "weights.aptt";
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor) -> Result<usize> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for d in t.shape() {
        let d = u32::try_from(*d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(8 + 4 * t.rank() + 8 * t.len())
}

pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read_tensor_from(&mut BufReader::new(File::open(path)?))
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_string()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| Error::Format(format!("bad shape `{s}`"))))
        .collect()
}

/// Writes `weights.aptt` and `manifest.txt` into `dir`.
pub fn write_checkpoint(params: &Params, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(WEIGHTS_FILE))?);
    let mut manifest = String::new();
    let mut offset = 0usize;
    for (name, e) in params.iter() {
        manifest.push_str(&format!("{name} {} {offset}\n", shape_str(e.tensor.shape())));
        offset += write_tensor_to(&mut w, &e.tensor)?;
    }
    w.flush()?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`]. All entries are trainable.
pub fn read_checkpoint(dir: &Path) -> Result<Params> {
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut f = BufReader::new(File::open(dir.join(WEIGHTS_FILE))?);
    let mut params = Params::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, offset] = fields[..] else {
            return Err(Error::Format(format!("manifest line {}: `{line}`", lineno + 1)));
        };
        let shape = parse_shape(shape)?;
        let offset: u64 = offset
            .parse()
            .map_err(|_| Error::Format(format!("manifest line {}: bad offset", lineno + 1)))?;
        f.seek(SeekFrom::Start(offset))?;
        let t = read_tensor_from(&mut f)?;
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "`{name}`: manifest shape {shape:?} but record has {:?}",
                t.shape()
            )));
        }
        params.insert(name, t, true)?;
    }
    Ok(params)
}
