//! Grayscale images and integer masks, with binary PGM (P5) I/O.

use std::io::{BufRead, Write};

use crate::error::{shape_err, Error, Result};

/// Grayscale image with intensities in `[0, 255]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(shape_err!("{width}×{height} image needs {} pixels, got {}", width * height, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Pixels rounded and clamped to bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32).collect())
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self { width: self.width, height: self.height, data }
    }
}

/// Integer label mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(shape_err!("{width}×{height} mask needs {} pixels, got {}", width * height, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Values as `0.0 / 1.0` floats (nonzero → 1).
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| if v != 0 { 1.0 } else { 0.0 }).collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self { width: self.width, height: self.height, data }
    }
}

/// Write an 8-bit binary PGM.
pub fn write_pgm<W: Write>(w: &mut W, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(shape_err!("PGM payload of {} bytes for {width}×{height}", bytes.len()));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(bytes)?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            break;
        }
        let c = b[0] as char;
        if c == '#' && tok.is_empty() {
            let mut line = String::new();
            r.read_line(&mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
    }
    if tok.is_empty() {
        return Err(Error::Parse("truncated PGM header".into()));
    }
    Ok(tok)
}

/// Read an 8-bit binary PGM: `(width, height, bytes)`.
pub fn read_pgm<R: BufRead>(r: &mut R) -> Result<(usize, usize, Vec<u8>)> {
    if header_token(r)? != "P5" {
        return Err(Error::Parse("not a binary PGM (P5)".into()));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad PGM header field {s:?}")));
    let width = num(header_token(r)?)?;
    let height = num(header_token(r)?)?;
    let maxval = num(header_token(r)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("unsupported PGM maxval {maxval}")));
    }
    let mut bytes = vec![0u8; width * height];
    r.read_exact(&mut bytes)?;
    Ok((width, height, bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let bytes: Vec<u8> = (0..12).map(|v| v * 20).collect();
        let mut buf = Vec::new();
        write_pgm(&mut buf, 4, 3, &bytes).unwrap();
        assert!(buf.starts_with(b"P5\n4 3\n255\n"));
        let (w, h, back) = read_pgm(&mut buf.as_slice()).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, bytes);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut buf = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        buf.extend([7, 9]);
        assert_eq!(read_pgm(&mut buf.as_slice()).unwrap(), (2, 1, vec![7, 9]));
        assert!(read_pgm(&mut b"P2\n1 1\n255\n0".as_slice()).is_err());
    }

    #[test]
    fn flips_are_involutions() {
        let m = Mask::new(3, 2, vec![1, 0, 0, 0, 2, 3]).unwrap();
        assert_eq!(m.flip_horizontal().data, vec![0, 0, 1, 3, 2, 0]);
        assert_eq!(m.flip_horizontal().flip_horizontal(), m);
    }
}
