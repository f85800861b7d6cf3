//! Minimal binary PGM/PPM writers for heatmaps and sample grids.

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale image from row-major values in [0, 1].
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Shape(format!(
            "{} values for {width}x{height} image",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(values.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend(values.iter().map(|&v| to_u8(v)));
    fs::write(path, out)?;
    Ok(())
}

/// RGB image from row-major (r, g, b) triples in [0, 1].
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[(f64, f64, f64)]) -> Result<()> {
    if rgb.len() != width * height {
        return Err(Error::Shape(format!(
            "{} pixels for {width}x{height} image",
            rgb.len()
        )));
    }
    let mut out = Vec::with_capacity(rgb.len() * 3 + 32);
    write!(out, "P6\n{width} {height}\n255\n")?;
    for &(r, g, b) in rgb {
        out.push(to_u8(r));
        out.push(to_u8(g));
        out.push(to_u8(b));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, 2, 1, &[0.0, 1.0]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 2..], &[0u8, 255u8]);
        assert!(write_pgm(&path, 3, 1, &[0.0]).is_err());
    }
}
