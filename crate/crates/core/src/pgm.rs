//! Binary PGM (P5, maxval 255) reading and writing. Images are 8-bit
//! grayscale; masks use {0, 255} and decode with a >= 128 threshold.

use crate::error::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub w: usize,
    pub h: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(h: usize, w: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != h * w {
            return Err(Error::Data(format!(
                "image buffer {} != {h}x{w}",
                pixels.len()
            )));
        }
        Ok(GrayImage { w, h, pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.w + col]
    }
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut data = format!("P5\n{} {}\n255\n", img.w, img.h).into_bytes();
    data.extend_from_slice(&img.pixels);
    std::fs::write(path, data).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_pgm(&data).map_err(|msg| Error::Data(format!("{}: {msg}", path.display())))
}

fn parse_pgm(data: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0usize;
    let mut token = |data: &[u8]| -> std::result::Result<String, String> {
        // skip whitespace and '#' comments
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };
    if token(data)? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let w: usize = token(data)?.parse().map_err(|_| "bad width")?;
    let h: usize = token(data)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token(data)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval} (expected 255)"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if data.len() < pos + w * h {
        return Err("truncated pixel data".into());
    }
    GrayImage::new(h, w, data[pos..pos + w * h].to_vec()).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = std::env::temp_dir().join(format!("pgm_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        let img = GrayImage::new(3, 5, (0..15).map(|v| (v * 17) as u8).collect()).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(img, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_pgm(b"P6\n2 2\n255\nxxxx").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\nxx").is_err());
        assert!(parse_pgm(b"").is_err());
    }

    #[test]
    fn parses_comments() {
        let img = parse_pgm(b"P5\n# comment line\n2 1\n255\nab").unwrap();
        assert_eq!(img.w, 2);
        assert_eq!(img.pixels, b"ab");
    }
}
