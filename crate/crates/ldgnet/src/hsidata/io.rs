//! Bit-exact cube and label files.
//!
//! Cube (HSIC1): ASCII magic `HSIC1\n`, one JSON header line
//! `{"h":H,"w":W,"d":D,"dtype":"f32","layout":"bsq"}`, a newline, then
//! H*W*D little-endian f32 values, band-sequential.
//!
//! Labels (HSIL1): magic `HSIL1\n`, header `{"h":H,"w":W}`, newline, then
//! H*W little-endian u16 values, row-major; 0 = unlabeled.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HsiCube, HsiError, LabelRaster, Result};

const CUBE_MAGIC: &[u8; 6] = b"HSIC1\n";
const LABEL_MAGIC: &[u8; 6] = b"HSIL1\n";

#[derive(Serialize, Deserialize)]
struct CubeHeader {
    h: usize,
    w: usize,
    d: usize,
    dtype: String,
    layout: String,
}

#[derive(Serialize, Deserialize)]
struct LabelHeader {
    h: usize,
    w: usize,
}

pub fn cube_to_bytes(cube: &HsiCube) -> Vec<u8> {
    let header = CubeHeader {
        h: cube.height,
        w: cube.width,
        d: cube.bands,
        dtype: "f32".into(),
        layout: "bsq".into(),
    };
    let mut out = Vec::with_capacity(cube.values().len() * 4 + 64);
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(serde_json::to_string(&header).expect("plain struct").as_bytes());
    out.push(b'\n');
    for v in cube.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn save_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    fs::write(path, cube_to_bytes(cube))?;
    Ok(())
}

pub fn load_cube(path: &Path) -> Result<HsiCube> {
    let bytes = fs::read(path)?;
    cube_from_bytes(&bytes)
}

pub fn cube_from_bytes(bytes: &[u8]) -> Result<HsiCube> {
    let (header, payload) = split_header::<CubeHeader>(bytes, CUBE_MAGIC, "HSIC1")?;
    if header.dtype != "f32" || header.layout != "bsq" {
        return Err(HsiError::BadHeader(format!(
            "unsupported dtype/layout {}/{}",
            header.dtype, header.layout
        )));
    }
    let count = header.h * header.w * header.d;
    if payload.len() != count * 4 {
        return Err(HsiError::SizeMismatch { expected: count * 4, got: payload.len() });
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    HsiCube::new(header.h, header.w, header.d, values)
}

pub fn labels_to_bytes(labels: &LabelRaster) -> Vec<u8> {
    let header = LabelHeader { h: labels.height, w: labels.width };
    let mut out = Vec::with_capacity(labels.labels().len() * 2 + 32);
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(serde_json::to_string(&header).expect("plain struct").as_bytes());
    out.push(b'\n');
    for l in labels.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn save_labels(labels: &LabelRaster, path: &Path) -> Result<()> {
    fs::write(path, labels_to_bytes(labels))?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<LabelRaster> {
    let bytes = fs::read(path)?;
    labels_from_bytes(&bytes)
}

pub fn labels_from_bytes(bytes: &[u8]) -> Result<LabelRaster> {
    let (header, payload) = split_header::<LabelHeader>(bytes, LABEL_MAGIC, "HSIL1")?;
    let count = header.h * header.w;
    if payload.len() != count * 2 {
        return Err(HsiError::SizeMismatch { expected: count * 2, got: payload.len() });
    }
    let labels: Vec<u16> = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    LabelRaster::new(header.h, header.w, labels)
}

fn split_header<'a, H: for<'de> Deserialize<'de>>(
    bytes: &'a [u8],
    magic: &'static [u8; 6],
    name: &'static str,
) -> Result<(H, &'a [u8])> {
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(HsiError::BadMagic { expected: name });
    }
    let rest = &bytes[magic.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| HsiError::BadHeader("missing header line terminator".into()))?;
    let header: H = serde_json::from_slice(&rest[..nl]).map_err(|e| HsiError::BadHeader(e.to_string()))?;
    Ok((header, &rest[nl + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn one_voxel_cube_round_trips() {
        let cube = HsiCube::new(1, 1, 1, vec![0.5]).unwrap();
        let bytes = cube_to_bytes(&cube);
        assert_eq!(&bytes[..6], b"HSIC1\n");
        let header_end = 6 + bytes[6..].iter().position(|&b| b == b'\n').unwrap() + 1;
        assert_eq!(bytes.len() - header_end, 4); // exactly one f32
        let back = cube_from_bytes(&bytes).unwrap();
        assert_eq!(back.values(), &[0.5]);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let header = br#"{"h":2,"w":2,"d":3,"dtype":"f32","layout":"bsq"}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"HSIC1\n");
        bytes.extend_from_slice(header);
        bytes.push(b'\n');
        bytes.extend(std::iter::repeat_n(0u8, 11 * 4)); // 11 floats, 12 declared
        assert!(matches!(
            cube_from_bytes(&bytes),
            Err(HsiError::SizeMismatch { expected: 48, got: 44 })
        ));
    }

    #[test]
    fn bad_magic_is_an_error() {
        assert!(matches!(cube_from_bytes(b"NOPE!\n{}"), Err(HsiError::BadMagic { .. })));
        assert!(matches!(labels_from_bytes(b"HSIC1\n{}"), Err(HsiError::BadMagic { .. })));
    }

    #[test]
    fn random_cube_round_trips_exactly() {
        let mut rng = crate::stream::rng(11, "roundtrip");
        // values quantized to f32 so the 32-bit file preserves them exactly
        let values: Vec<f64> = (0..8 * 8 * 4).map(|_| rng.random_range(-2.0..2.0f64) as f32 as f64).collect();
        let cube = HsiCube::new(8, 8, 4, values).unwrap();
        let back = cube_from_bytes(&cube_to_bytes(&cube)).unwrap();
        assert_eq!(back, cube);
    }

    #[test]
    fn labels_round_trip() {
        let raster = LabelRaster::new(2, 3, vec![0, 1, 2, 65535, 7, 0]).unwrap();
        let back = labels_from_bytes(&labels_to_bytes(&raster)).unwrap();
        assert_eq!(back, raster);
    }
}
