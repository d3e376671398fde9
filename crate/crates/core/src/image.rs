//! Grayscale carrier images and PGM/PPM input-output.
//!
//! Output is always binary PGM (`P5`, maxval 255). Input accepts `P5` and
//! ASCII `P2` PGM; `P6`/`P3` colour inputs are converted to gray with
//! BT.601 luma weights.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

/// Smallest side length accepted for dataset images.
pub const MIN_DATASET_SIDE: usize = 16;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed PNM header: {field}: {detail}")]
    Header { field: &'static str, detail: String },
    #[error("unsupported maxval {0} (only 255 is accepted)")]
    Maxval(u32),
    #[error("truncated pixel payload: expected {expected} samples, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("pixel payload: {0}")]
    Payload(String),
    #[error("invalid image dimensions {height}x{width}")]
    Dimensions { height: usize, width: usize },
    #[error("shape mismatch: {a:?} vs {b:?}")]
    Shape { a: (usize, usize), b: (usize, usize) },
}

/// An `H × W` 8-bit grayscale image stored row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ImageGray {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for ImageGray {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageGray({}x{})", self.height, self.width)
    }
}

impl ImageGray {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(ImageError::Dimensions { height, width });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("non-empty")
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                pixels.push(f(i, j));
            }
        }
        Self::new(height, width, pixels).expect("non-empty")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.pixels[i * self.width + j]
    }

    /// Pixels as `f64` in `[0, 255]`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    /// Check the dataset-level size floor.
    pub fn check_dataset_size(&self) -> Result<(), ImageError> {
        if self.height < MIN_DATASET_SIDE || self.width < MIN_DATASET_SIDE {
            return Err(ImageError::Dimensions {
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ImageGray) -> Result<(), ImageError> {
        if self.shape() != other.shape() {
            return Err(ImageError::Shape {
                a: self.shape(),
                b: other.shape(),
            });
        }
        Ok(())
    }

    /// Bilinear resize, used when ingesting images whose size differs from
    /// the dataset's.
    pub fn resize(&self, height: usize, width: usize) -> ImageGray {
        if (height, width) == self.shape() {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        ImageGray::from_fn(height, width, |i, j| {
            let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let p = |a: usize, b: usize| self.get(a, b) as f64;
            let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
            v.round().clamp(0.0, 255.0) as u8
        })
    }
}

/// ITU-R BT.601 luma of an 8-bit RGB triple.
pub fn bt601_luma(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
        .round()
        .clamp(0.0, 255.0) as u8
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.data.len() {
            match self.data[self.pos] {
                b'#' => {
                    while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, field: &'static str) -> Result<u32, ImageError> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            let detail = match self.data.get(self.pos) {
                None => "unexpected end of file".to_string(),
                Some(c) => format!("expected a decimal number, found {:?}", *c as char),
            };
            return Err(ImageError::Header { field, detail });
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|e| ImageError::Header {
                field,
                detail: format!("{e}"),
            })
    }
}

/// Decode PGM/PPM bytes.
pub fn decode_pnm(data: &[u8]) -> Result<ImageGray, ImageError> {
    if data.len() < 2 {
        return Err(ImageError::Header {
            field: "magic",
            detail: "file shorter than magic number".into(),
        });
    }
    let magic = &data[..2];
    let (channels, binary) = match magic {
        b"P5" => (1, true),
        b"P2" => (1, false),
        b"P6" => (3, true),
        b"P3" => (3, false),
        _ => {
            return Err(ImageError::Header {
                field: "magic",
                detail: format!("unsupported magic {:?}", String::from_utf8_lossy(magic)),
            })
        }
    };
    let mut cur = Cursor { data, pos: 2 };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(ImageError::Header {
            field: if width == 0 { "width" } else { "height" },
            detail: "must be positive".into(),
        });
    }
    if maxval != 255 {
        return Err(ImageError::Maxval(maxval));
    }
    let samples = width * height * channels;
    let raw: Vec<u8> = if binary {
        // Exactly one whitespace byte separates the header from the raster.
        match data.get(cur.pos) {
            Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
            _ => {
                return Err(ImageError::Header {
                    field: "maxval",
                    detail: "missing whitespace before raster".into(),
                })
            }
        }
        let payload = &data[cur.pos..];
        if payload.len() < samples {
            return Err(ImageError::Truncated {
                expected: samples,
                found: payload.len(),
            });
        }
        payload[..samples].to_vec()
    } else {
        let mut out = Vec::with_capacity(samples);
        for k in 0..samples {
            cur.skip_ws_and_comments();
            if cur.pos >= data.len() {
                return Err(ImageError::Truncated {
                    expected: samples,
                    found: k,
                });
            }
            let v = cur.number("pixel")?;
            if v > 255 {
                return Err(ImageError::Payload(format!("sample {k} = {v} exceeds maxval")));
            }
            out.push(v as u8);
        }
        out
    };
    let pixels = if channels == 3 {
        raw.chunks_exact(3).map(|c| bt601_luma(c[0], c[1], c[2])).collect()
    } else {
        raw
    };
    ImageGray::new(height, width, pixels)
}

/// Encode as binary PGM (`P5`, maxval 255).
pub fn encode_pgm(img: &ImageGray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn load_image(path: &Path) -> Result<ImageGray, ImageError> {
    let data = fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_pnm(&data)
}

pub fn save_image(img: &ImageGray, path: &Path) -> Result<(), ImageError> {
    fs::write(path, encode_pgm(img)).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_16_bit_maxval() {
        let mut data = b"P5\n2 2\n65535\n".to_vec();
        data.extend_from_slice(&[0; 8]);
        assert!(matches!(decode_pnm(&data), Err(ImageError::Maxval(65535))));
    }

    #[test]
    fn truncated_payload_names_counts() {
        let data = b"P5\n4 4\n255\n\x01\x02\x03".to_vec();
        match decode_pnm(&data) {
            Err(ImageError::Truncated { expected, found }) => {
                assert_eq!((expected, found), (16, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_header_names_field() {
        let err = decode_pnm(b"P5\n4 x\n255\n").unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
        let err = decode_pnm(b"P9\n").unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn ascii_pgm_with_comments() {
        let img = decode_pnm(b"P2\n# a comment\n3 2\n255\n0 1 2\n# mid\n253 254 255\n").unwrap();
        assert_eq!(img.shape(), (2, 3));
        assert_eq!(img.pixels(), &[0, 1, 2, 253, 254, 255]);
    }

    #[test]
    fn colour_input_becomes_luma() {
        let mut data = b"P6\n2 1\n255\n".to_vec();
        data.extend_from_slice(&[255, 0, 0, 10, 200, 30]);
        let img = decode_pnm(&data).unwrap();
        assert_eq!(img.pixels(), &[76, bt601_luma(10, 200, 30)]);
    }

    #[test]
    fn every_constant_image_round_trips() {
        for v in 0..=255u8 {
            let img = ImageGray::filled(16, 17, v);
            assert_eq!(decode_pnm(&encode_pgm(&img)).unwrap(), img);
        }
    }

    #[test]
    fn full_scale_image_parses() {
        let img = ImageGray::from_fn(512, 512, |i, j| ((i * 3 + j) % 256) as u8);
        let back = decode_pnm(&encode_pgm(&img)).unwrap();
        assert_eq!(back.shape(), (512, 512));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ImageGray::filled(20, 30, 77);
        assert_eq!(img.resize(20, 30), img);
        assert!(img.resize(64, 64).pixels().iter().all(|&p| p == 77));
    }

    proptest! {
        #[test]
        fn random_images_round_trip(h in 1usize..24, w in 1usize..24, seed in any::<u64>()) {
            let img = ImageGray::from_fn(h, w, |i, j| {
                (seed.wrapping_mul(6364136223846793005).wrapping_add((i * 31 + j) as u64) >> 40) as u8
            });
            prop_assert_eq!(decode_pnm(&encode_pgm(&img)).unwrap(), img);
        }
    }
}
