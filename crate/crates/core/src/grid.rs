//! Float grid files for probability and cost maps.
//!
//! An 8-byte header holds `H` and `W` as big-endian `u32`, followed by one
//! or more planes of `H·W` big-endian `f32` values. Probability maps are a
//! single plane; cost maps store the `+1` plane then the `-1` plane.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("grid file too short for its header")]
    Header,
    #[error("grid payload of {bytes} bytes is not a whole number of {height}x{width} planes")]
    Payload {
        height: usize,
        width: usize,
        bytes: usize,
    },
    #[error("expected {expected} plane(s), found {found}")]
    Planes { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub planes: Vec<Vec<f64>>,
}

pub fn encode(height: usize, width: usize, planes: &[&[f64]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + planes.len() * height * width * 4);
    out.extend_from_slice(&(height as u32).to_be_bytes());
    out.extend_from_slice(&(width as u32).to_be_bytes());
    for plane in planes {
        assert_eq!(plane.len(), height * width, "plane size");
        for &v in plane.iter() {
            out.extend_from_slice(&(v as f32).to_be_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Grid, GridError> {
    if bytes.len() < 8 {
        return Err(GridError::Header);
    }
    let height = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let width = u32::from_be_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[8..];
    let plane_bytes = height * width * 4;
    if plane_bytes == 0 || payload.is_empty() || payload.len() % plane_bytes != 0 {
        return Err(GridError::Payload {
            height,
            width,
            bytes: payload.len(),
        });
    }
    let planes = payload
        .chunks_exact(plane_bytes)
        .map(|p| {
            p.chunks_exact(4)
                .map(|c| f32::from_be_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()
        })
        .collect();
    Ok(Grid {
        height,
        width,
        planes,
    })
}

pub fn write(path: &Path, height: usize, width: usize, planes: &[&[f64]]) -> Result<(), GridError> {
    fluxsteg_nn::archive::write_atomic(path, &encode(height, width, planes)).map_err(|source| {
        GridError::Io {
            path: path.display().to_string(),
            source,
        }
    })
}

pub fn read(path: &Path) -> Result<Grid, GridError> {
    let bytes = fs::read(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_big_endian() {
        let bytes = encode(2, 3, &[&[0.0; 6]]);
        assert_eq!(&bytes[..8], &[0, 0, 0, 2, 0, 0, 0, 3]);
        assert_eq!(bytes.len(), 8 + 24);
    }

    #[test]
    fn two_planes_round_trip() {
        let a = [0.5, 1e13, -2.25, 3.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let g = decode(&encode(2, 2, &[&a, &b])).unwrap();
        assert_eq!(g.planes.len(), 2);
        assert_eq!(g.planes[1], b.to_vec());
        assert_eq!(g.planes[0][0], 0.5);
        assert!((g.planes[0][1] - 1e13).abs() / 1e13 < 1e-6);
    }

    #[test]
    fn ragged_payload_is_rejected() {
        let mut bytes = encode(2, 2, &[&[0.0; 4]]);
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(GridError::Payload { .. })));
    }
}
