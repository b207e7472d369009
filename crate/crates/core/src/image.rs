//! Plain image and mask buffers, plus binary PPM/PGM I/O.

use crate::error::{Error, Result};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

/// `height × width × channels` pixels in `[0, 1]`, row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ImageFormat(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = self.idx(y, x);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = self.idx(y, x);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::ImageFormat("PPM output needs 3 channels".into()));
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        out.write_all(&bytes)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let (w, h, bytes) = read_pnm(path, "P6", 3)?;
        Self::new(h, w, 3, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel category indices: 0 = background, 1..=K = categories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ImageFormat(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(path, self.width, self.height, &self.data)
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let (w, h, bytes) = read_pnm(path, "P5", 1)?;
        Self::new(h, w, bytes)
    }
}

pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(bytes)?;
    out.flush()?;
    Ok(())
}

fn read_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            break;
        }
        let c = b[0] as char;
        if c == '#' && tok.is_empty() {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
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
        return Err(Error::ImageFormat("truncated header".into()));
    }
    Ok(tok)
}

fn read_pnm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let m = read_token(&mut r)?;
    if m != magic {
        return Err(Error::ImageFormat(format!(
            "{}: expected {magic}, found {m}",
            path.display()
        )));
    }
    let parse = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::ImageFormat(format!("bad header field {s:?}")))
    };
    let w = parse(read_token(&mut r)?)?;
    let h = parse(read_token(&mut r)?)?;
    let maxval = parse(read_token(&mut r)?)?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("unsupported maxval {maxval}")));
    }
    let mut bytes = vec![0u8; w * h * channels];
    r.read_exact(&mut bytes)?;
    Ok((w, h, bytes))
}
