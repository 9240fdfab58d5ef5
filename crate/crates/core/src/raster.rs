//! RGBA pixel buffers and their netpbm encodings.
//!
//! Colour images are written as PAM (`P7`, `RGB_ALPHA`, 8 bit). Binary PPM
//! (`P6`) is accepted on input and gets an opaque alpha channel. Depth maps
//! use single-channel 16-bit PAM with big-endian samples, as netpbm requires.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad netpbm header: {0}")]
    Header(String),
    #[error("unsupported netpbm variant: {0}")]
    Unsupported(String),
    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("buffer length {len} does not match {width}x{height}x{channels}")]
    Size {
        len: usize,
        width: u32,
        height: u32,
        channels: u32,
    },
}

/// Row-major RGBA image, 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, fill: [u8; 4]) -> Self {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 4);
        for _ in 0..n {
            pixels.extend_from_slice(&fill);
        }
        RasterImage {
            width,
            height,
            pixels,
        }
    }

    pub fn from_rgba(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, RasterError> {
        if pixels.len() != width as usize * height as usize * 4 {
            return Err(RasterError::Size {
                len: pixels.len(),
                width,
                height,
                channels: 4,
            });
        }
        Ok(RasterImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.pixels
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 4
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 4] {
        let o = self.offset(x, y);
        [
            self.pixels[o],
            self.pixels[o + 1],
            self.pixels[o + 2],
            self.pixels[o + 3],
        ]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, px: [u8; 4]) {
        let o = self.offset(x, y);
        self.pixels[o..o + 4].copy_from_slice(&px);
    }

    pub fn write_pam<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(
            out,
            "P7\nWIDTH {}\nHEIGHT {}\nDEPTH 4\nMAXVAL 255\nTUPLTYPE RGB_ALPHA\nENDHDR\n",
            self.width, self.height
        )?;
        out.write_all(&self.pixels)
    }

    pub fn to_pam_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.pixels.len() + 64);
        self.write_pam(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// RGB only, alpha dropped.
    pub fn write_ppm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let rgb: Vec<u8> = self
            .pixels
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect();
        out.write_all(&rgb)
    }

    /// Decodes a `P6` PPM or an 8-bit `P7` PAM with 3 or 4 channels.
    pub fn read_netpbm<R: Read>(mut input: R) -> Result<Self, RasterError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::decode_netpbm(&bytes)
    }

    pub fn decode_netpbm(bytes: &[u8]) -> Result<Self, RasterError> {
        match bytes.get(..2) {
            Some(b"P6") => decode_ppm(bytes),
            Some(b"P7") => {
                let pam = decode_pam(bytes)?;
                if pam.maxval != 255 {
                    return Err(RasterError::Unsupported(format!("MAXVAL {}", pam.maxval)));
                }
                let n = pam.width as usize * pam.height as usize;
                let pixels = match pam.depth {
                    4 => pam.data.to_vec(),
                    3 => pam
                        .data
                        .chunks_exact(3)
                        .flat_map(|p| [p[0], p[1], p[2], 255])
                        .collect(),
                    d => return Err(RasterError::Unsupported(format!("DEPTH {d}"))),
                };
                debug_assert_eq!(pixels.len(), n * 4);
                RasterImage::from_rgba(pam.width, pam.height, pixels)
            }
            _ => Err(RasterError::Header("missing P6/P7 magic".into())),
        }
    }
}

struct Pam<'a> {
    width: u32,
    height: u32,
    depth: u32,
    maxval: u32,
    data: &'a [u8],
}

fn decode_pam(bytes: &[u8]) -> Result<Pam<'_>, RasterError> {
    let mut pos = 0;
    let mut next_line = || -> Result<&[u8], RasterError> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| RasterError::Header("unterminated header".into()))?;
        pos += end + 1;
        Ok(&rest[..end])
    };
    if next_line()? != b"P7" {
        return Err(RasterError::Header("expected P7".into()));
    }
    let (mut width, mut height, mut depth, mut maxval) = (None, None, None, None);
    loop {
        let line = std::str::from_utf8(next_line()?)
            .map_err(|_| RasterError::Header("non-ascii header".into()))?
            .trim();
        if line == "ENDHDR" {
            break;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once(' ').unwrap_or((line, ""));
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|_| RasterError::Header(format!("bad {key} value {v:?}")))
        };
        match key {
            "WIDTH" => width = Some(parse(value)?),
            "HEIGHT" => height = Some(parse(value)?),
            "DEPTH" => depth = Some(parse(value)?),
            "MAXVAL" => maxval = Some(parse(value)?),
            "TUPLTYPE" => {}
            other => return Err(RasterError::Header(format!("unknown key {other}"))),
        }
    }
    let missing = |k: &str| RasterError::Header(format!("missing {k}"));
    let width = width.ok_or_else(|| missing("WIDTH"))?;
    let height = height.ok_or_else(|| missing("HEIGHT"))?;
    let depth = depth.ok_or_else(|| missing("DEPTH"))?;
    let maxval = maxval.ok_or_else(|| missing("MAXVAL"))?;
    let sample = if maxval > 255 { 2 } else { 1 };
    let expected = width as usize * height as usize * depth as usize * sample;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(RasterError::Truncated {
            expected,
            found: data.len(),
        });
    }
    Ok(Pam {
        width,
        height,
        depth,
        maxval,
        data: &data[..expected],
    })
}

fn decode_ppm(bytes: &[u8]) -> Result<RasterImage, RasterError> {
    // P6 <ws> width <ws> height <ws> maxval <single ws> data, with # comments.
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(RasterError::Header("truncated PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RasterError::Header("bad PPM number".into()))?;
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(RasterError::Unsupported(format!("PPM maxval {maxval}")));
    }
    let expected = width as usize * height as usize * 3;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() < expected {
        return Err(RasterError::Truncated {
            expected,
            found: data.len(),
        });
    }
    let pixels = data[..expected]
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect();
    RasterImage::from_rgba(width, height, pixels)
}

/// Single-channel 16-bit image, used for depth / surface-id maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage16 {
    pub width: u32,
    pub height: u32,
    pub values: Vec<u16>,
}

impl GrayImage16 {
    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn to_pam_bytes(&self) -> Vec<u8> {
        let mut buf = format!(
            "P7\nWIDTH {}\nHEIGHT {}\nDEPTH 1\nMAXVAL 65535\nTUPLTYPE GRAYSCALE\nENDHDR\n",
            self.width, self.height
        )
        .into_bytes();
        for v in &self.values {
            buf.extend_from_slice(&v.to_be_bytes());
        }
        buf
    }

    pub fn decode_pam(bytes: &[u8]) -> Result<Self, RasterError> {
        let pam = decode_pam(bytes)?;
        if pam.depth != 1 || pam.maxval <= 255 {
            return Err(RasterError::Unsupported(format!(
                "expected 16-bit grayscale, got DEPTH {} MAXVAL {}",
                pam.depth, pam.maxval
            )));
        }
        let values = pam
            .data
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect();
        Ok(GrayImage16 {
            width: pam.width,
            height: pam.height,
            values,
        })
    }
}
