//! Grayscale image container and PGM/PNG loading.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ImageDimensions(format!(
                "data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel access with border replication.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> u8 {
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        self.get(x, y)
    }

    /// Bilinear sample at a sub-pixel location; `None` outside the image.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p00 = self.get(x0, y0) as f64;
        let p10 = self.get(x1, y0) as f64;
        let p01 = self.get(x0, y1) as f64;
        let p11 = self.get(x1, y1) as f64;
        Some(p00 * (1.0 - fx) * (1.0 - fy) + p10 * fx * (1.0 - fy) + p01 * (1.0 - fx) * fy + p11 * fx * fy)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        w.flush()?;
        Ok(())
    }
}

/// ITU-R BT.601 luma conversion, rounded to nearest.
#[inline]
pub fn rgb_to_luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round().clamp(0.0, 255.0) as u8
}

/// Load an 8-bit binary PGM (P5) or 8-bit grayscale/RGB PNG.
pub fn load_image(path: &Path) -> Result<GrayImage> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "pgm" | "pnm" => load_pgm(path),
        "png" => load_png(path),
        other => Err(Error::UnsupportedImage(format!(
            "unknown extension '{other}' for {}",
            path.display()
        ))),
    }
}

fn load_pgm(path: &Path) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pgm(&bytes)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0usize;

    let magic = next_token(bytes, &mut pos)
        .ok_or_else(|| Error::UnsupportedImage("missing PNM magic".into()))?;
    if magic != b"P5" {
        return Err(Error::UnsupportedImage(format!(
            "expected P5 magic, got {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = parse_pnm_int(bytes, &mut pos, "width")?;
    let height = parse_pnm_int(bytes, &mut pos, "height")?;
    let maxval = parse_pnm_int(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedImage(format!(
            "only maxval 255 supported, got {maxval}"
        )));
    }
    // Single whitespace byte separates header from raster.
    if pos >= bytes.len() {
        return Err(Error::UnsupportedImage("truncated PGM header".into()));
    }
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(Error::ImageDimensions(format!(
            "raster has {} bytes, header declares {}",
            bytes.len() - pos,
            n
        )));
    }
    GrayImage::new(width, height, bytes[pos..pos + n].to_vec())
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    // Skip whitespace and '#' comments.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

fn parse_pnm_int(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)
        .ok_or_else(|| Error::UnsupportedImage(format!("missing PNM {what}")))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::UnsupportedImage(format!("invalid PNM {what}")))
}

fn load_png(path: &Path) -> Result<GrayImage> {
    let dyn_img = image::open(path)
        .map_err(|e| Error::UnsupportedImage(format!("png decode: {e}")))?;
    match dyn_img {
        image::DynamicImage::ImageLuma8(img) => {
            GrayImage::new(img.width() as usize, img.height() as usize, img.into_raw())
        }
        image::DynamicImage::ImageRgb8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let data = img
                .pixels()
                .map(|p| rgb_to_luma(p.0[0], p.0[1], p.0[2]))
                .collect();
            GrayImage::new(w, h, data)
        }
        image::DynamicImage::ImageRgba8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let data = img
                .pixels()
                .map(|p| rgb_to_luma(p.0[0], p.0[1], p.0[2]))
                .collect();
            GrayImage::new(w, h, data)
        }
        other => Err(Error::UnsupportedImage(format!(
            "unsupported PNG color type {:?}",
            other.color()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_minimal_p5() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\x80\x40";
        let img = parse_pgm(bytes).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.height(), 2);
        assert_eq!(img.data(), &[0, 255, 128, 64]);
    }

    #[test]
    fn parse_p5_with_comment() {
        let bytes = b"P5\n# a comment\n2 1 255\n\x01\x02";
        let img = parse_pgm(bytes).unwrap();
        assert_eq!(img.data(), &[1, 2]);
    }

    #[test]
    fn reject_p2() {
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn reject_truncated_raster() {
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00\x01").is_err());
    }

    #[test]
    fn reject_maxval_16bit() {
        assert!(parse_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn luma_white_is_white() {
        assert_eq!(rgb_to_luma(255, 255, 255), 255);
    }

    #[test]
    fn luma_weighted_sum() {
        // 29.9 + 88.05 + 22.8 = 140.75 -> 141
        assert_eq!(rgb_to_luma(100, 150, 200), 141);
    }

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage::new(3, 2, vec![9, 8, 7, 6, 5, 4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        img.save_pgm(&p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(GrayImage::new(2, 2, vec![0; 3]).is_err());
    }
}
