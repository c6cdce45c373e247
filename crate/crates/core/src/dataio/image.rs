//! Binary PGM ("P5") grayscale codec, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Result, SimicError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(SimicError::InvalidArgument(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cursor = HeaderCursor { bytes, pos: 0 };
        let magic = cursor.token()?;
        if magic != b"P5" {
            return Err(SimicError::Image {
                offset: 0,
                message: "missing P5 magic".into(),
            });
        }
        let (width, _) = cursor.number("width")?;
        let (height, _) = cursor.number("height")?;
        let (maxval, maxval_at) = cursor.number("maxval")?;
        if maxval != 255 {
            return Err(SimicError::Image {
                offset: maxval_at,
                message: format!("maxval {maxval} unsupported (only 255)"),
            });
        }
        // Exactly one whitespace byte separates the header from the raster.
        match bytes.get(cursor.pos) {
            Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
            _ => {
                return Err(SimicError::Image {
                    offset: cursor.pos,
                    message: "expected whitespace after maxval".into(),
                })
            }
        }
        if width == 0 || height == 0 {
            return Err(SimicError::Image {
                offset: cursor.pos,
                message: "zero image dimension".into(),
            });
        }
        let need = width * height;
        let payload = &bytes[cursor.pos..];
        if payload.len() < need {
            return Err(SimicError::Image {
                offset: bytes.len(),
                message: format!("truncated payload: {} of {} bytes", payload.len(), need),
            });
        }
        Ok(Self {
            width,
            height,
            pixels: payload[..need].to_vec(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| SimicError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            SimicError::Image { offset, message } => SimicError::Image {
                offset,
                message: format!("{}: {}", path.display(), message),
            },
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| SimicError::io(path, e))
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(SimicError::Image {
                offset: start,
                message: "unexpected end of header".into(),
            });
        }
        Ok(&self.bytes[start..self.pos])
    }

    /// Parses a decimal header field, returning it with its byte offset.
    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        let tok = self.token()?;
        let start = self.pos - tok.len();
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .map(|v| (v, start))
            .ok_or_else(|| SimicError::Image {
                offset: start,
                message: format!("invalid {what} {:?}", String::from_utf8_lossy(tok)),
            })
    }
}
