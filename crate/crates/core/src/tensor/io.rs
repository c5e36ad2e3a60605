//! Binary tensor container: `"MTEN"`, version byte, rank byte, the shape as
//! little-endian `u32`s, then the little-endian `f32` payload.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MTEN";
const VERSION: u8 = 1;

pub fn write_raw<W: Write>(w: &mut W, shape: &[usize], data: &[f32]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Shape(format!("rank {} too large to serialize", shape.len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, shape.len() as u8])?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_raw<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Parse("missing MTEN magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Parse(format!("unsupported MTEN version {}", head[4])));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((shape, data))
}

impl Tensor {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_raw(w, self.shape(), self.data())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let (shape, data) = read_raw(r)?;
        Tensor::new(&shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }
}
