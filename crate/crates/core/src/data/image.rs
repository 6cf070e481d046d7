use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dsp::Grid;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed image: {0}")]
    Malformed(String),
    #[error("unsupported image: {0}")]
    Unsupported(String),
}

/// Decoded 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn header_fields(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize), ImageError> {
    let mut fields = Vec::new();
    let mut i = 2;
    while fields.len() < count {
        match bytes.get(i) {
            None => return Err(ImageError::Malformed("truncated header".into())),
            Some(b'#') => {
                while bytes.get(i).is_some_and(|&b| b != b'\n') {
                    i += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => i += 1,
            Some(b) if b.is_ascii_digit() => {
                let start = i;
                while bytes.get(i).is_some_and(u8::is_ascii_digit) {
                    i += 1;
                }
                let text = std::str::from_utf8(&bytes[start..i]).expect("ascii digits");
                fields.push(text.parse().map_err(|_| ImageError::Malformed(format!("bad number {text}")))?);
            }
            Some(b) => return Err(ImageError::Malformed(format!("unexpected byte {b:#04x} in header"))),
        }
    }
    match bytes.get(i) {
        Some(b) if b.is_ascii_whitespace() => Ok((fields, i + 1)),
        _ => Err(ImageError::Malformed("missing whitespace after header".into())),
    }
}

/// Decodes binary PPM (`P6`) or PGM (`P5`, replicated to three channels).
pub fn decode_pnm(bytes: &[u8]) -> Result<Rgb8, ImageError> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        Some([b'P', _]) => return Err(ImageError::Unsupported("only binary P5/P6 images are supported".into())),
        _ => return Err(ImageError::Malformed("not a PNM file".into())),
    };
    let (f, start) = header_fields(bytes, 3)?;
    let (width, height, maxval) = (f[0], f[1], f[2]);
    if width == 0 || height == 0 {
        return Err(ImageError::Malformed("zero-sized image".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Unsupported(format!("maxval {maxval}")));
    }
    let need = width * height * channels;
    let body = bytes
        .get(start..start + need)
        .ok_or_else(|| ImageError::Malformed(format!("expected {need} pixel bytes")))?;
    let scale = |v: u8| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8;
    let pixels = if channels == 3 {
        body.iter().map(|&v| scale(v)).collect()
    } else {
        body.iter().flat_map(|&v| [scale(v); 3]).collect()
    };
    Ok(Rgb8 { width, height, pixels })
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Rgb8, ImageError> {
    decode_pnm(&fs::read(path)?)
}

/// Centre-crops to a square and resamples (nearest neighbour) to
/// `size × size`, returning a `3 × size × size` tensor in [0, 1].
pub fn to_tensor(img: &Rgb8, size: usize) -> Tensor {
    let side = img.width.min(img.height);
    let (ox, oy) = ((img.width - side) / 2, (img.height - side) / 2);
    Tensor::from_fn(&[3, size, size], |i| {
        let (c, y, x) = (i / (size * size), (i / size) % size, i % size);
        let sy = oy + (y * side) / size;
        let sx = ox + (x * side) / size;
        img.pixels[(sy * img.width + sx) * 3 + c] as f64 / 255.0
    })
}

pub fn load_image(path: impl AsRef<Path>, size: usize) -> Result<Tensor, ImageError> {
    Ok(to_tensor(&load_ppm(path)?, size))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `3 × H × W` tensor with values in [0, 1] as binary PPM.
pub fn save_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let &[3, h, w] = image.shape() else {
        return Err(ImageError::Unsupported(format!("expected 3×H×W, got {:?}", image.shape())));
    };
    let d = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        out.extend((0..3).map(|c| to_byte(d[c * h * w + i])));
    }
    Ok(fs::write(path, out)?)
}

/// Writes a grid with values in [0, 1] as a binary grayscale PGM, with the
/// first row (lowest frequency) at the bottom.
pub fn save_pgm(grid: &Grid, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let (h, w) = grid.shape();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for r in (0..h).rev() {
        out.extend((0..w).map(|c| to_byte(grid.get(r, c))));
    }
    Ok(fs::write(path, out)?)
}
