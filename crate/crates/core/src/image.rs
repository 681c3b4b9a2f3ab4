//! Binary PGM (P5) input and PPM (P6) output.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{width}×{height} image needs {expected} pixels, got {got}")]
    Size { width: usize, height: usize, expected: usize, got: usize },
}

fn parse_err(offset: usize, message: impl Into<String>) -> ImageError {
    ImageError::Parse { offset, message: message.into() }
}

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, ImageError> {
        if pixels.len() != width * height {
            return Err(ImageError::Size { width, height, expected: width * height, got: pixels.len() });
        }
        Ok(Self { width, height, pixels })
    }
}

/// `[0, 1]` → byte, rounding to nearest.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, ImageError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(match self.bytes.get(start) {
                None => parse_err(start, format!("header ends before {what}")),
                Some(b) => parse_err(start, format!("expected {what}, found byte 0x{b:02x}")),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{what} is out of range")))
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    match bytes.get(..2) {
        Some(b"P5") => {}
        Some(b"P2") => return Err(parse_err(0, "ASCII PGM (P2) is not supported; expected P5")),
        Some(m) => return Err(parse_err(0, format!("bad magic {:?}; expected P5", String::from_utf8_lossy(m)))),
        None => return Err(parse_err(0, "file too short for a magic number")),
    }
    let mut c = Cursor { bytes, pos: 2 };
    if !c.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(parse_err(2, "expected whitespace after magic"));
    }
    let width = c.number("width")?;
    let height = c.number("height")?;
    c.skip_space_and_comments();
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(maxval_at, format!("empty {width}×{height} image")));
    }
    if maxval != 255 {
        return Err(parse_err(maxval_at, format!("maxval {maxval} is not supported; expected 255")));
    }
    if !c.bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(c.pos, "expected a single whitespace byte before the raster"));
    }
    let start = c.pos + 1;
    let need = width * height;
    let raster = &bytes[start..];
    if raster.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated raster: {need} bytes expected from offset {start}, {} present", raster.len()),
        ));
    }
    if raster.len() > need {
        log::warn!("ignoring {} trailing bytes after the PGM raster", raster.len() - need);
    }
    Ok(GrayImage { width, height, pixels: raster[..need].iter().map(|&b| dequantize(b)).collect() })
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| quantize(v)));
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io { path: path.display().to_string(), source }
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage, ImageError> {
    let path = path.as_ref();
    parse_pgm(&fs::read(path).map_err(io_err(path))?)
}

pub fn save_pgm(image: &GrayImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)).map_err(io_err(path))
}

/// Binary PPM from interleaved RGB bytes.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "rgb buffer size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn save_ppm(width: usize, height: usize, rgb: &[u8], path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(width, height, rgb)).map_err(io_err(path))
}
