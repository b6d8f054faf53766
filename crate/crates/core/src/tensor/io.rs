//! The `OCTK` flat binary tensor format.
//!
//! ```text
//! "OCTK" | version: u32 | n, c, h, w: u32 | n·c·h·w × f32
//! ```
//! All integers and floats little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Result, Shape, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"OCTK";
pub const VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Io(e.to_string())
}

pub fn write_tensor<T: Real, W: Write>(t: &Tensor<T>, mut w: W) -> Result<()> {
    let s = t.shape();
    let mut header = Vec::with_capacity(24);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    for d in s.dims() {
        let d = u32::try_from(d).map_err(|_| TensorError::Io(format!("extent {d} exceeds u32")))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    w.write_all(&header).map_err(io_err)?;
    let mut payload = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&payload).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_tensor<T: Real, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut header = [0u8; 24];
    r.read_exact(&mut header).map_err(io_err)?;
    if &header[..4] != MAGIC {
        return Err(TensorError::Io("bad magic, not an OCTK tensor".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(TensorError::Io(format!("unsupported OCTK version {version}")));
    }
    let shape = Shape::new(word(8) as usize, word(12) as usize, word(16) as usize, word(20) as usize);
    let mut payload = vec![0u8; shape.len() * 4];
    r.read_exact(&mut payload).map_err(io_err)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| T::from_f64_lossy(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn save<T: Real>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))?;
    write_tensor(t, BufWriter::new(f))
}

pub fn load<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let f = File::open(path).map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))?;
    read_tensor(BufReader::new(f))
}
