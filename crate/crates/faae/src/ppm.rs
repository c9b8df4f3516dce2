//! Binary P6 PPM reading and writing, plus panel composition.
//!
//! Pixels are carried as `f64` in [0, 1] and quantized with
//! round-half-away-from-zero to a maxval of 255, so write/read round trips
//! are exact to within 1/255 per channel.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

/// An RGB image, channel-last: h x w x 3, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Image { height, width, pixels })
    }

    /// From planar [3, h, w] data (the network layout).
    pub fn from_chw(c: usize, h: usize, w: usize, data: &[f64]) -> Result<Self> {
        if c != 3 || data.len() != 3 * h * w {
            return Err(Error::Dimension(format!(
                "expected [3, {h}, {w}] planar data, got {c} channels / {} values",
                data.len()
            )));
        }
        let mut pixels = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    pixels.push(data[(ch * h + y) * w + x]);
                }
            }
        }
        Ok(Image { height: h, width: w, pixels })
    }

    /// To planar [3, h, w].
    pub fn to_chw(&self) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    out[(ch * h + y) * w + x] = self.pixels[(y * w + x) * 3 + ch];
                }
            }
        }
        out
    }
}

fn quantize(v: f64) -> u8 {
    // round half away from zero; v is validated to [0,1] first
    (v * 255.0 + 0.5).floor() as u8
}

/// Writes a binary P6 file with maxval 255. Values must already be in [0, 1].
pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    if let Some(bad) = image.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!(
            "pixel value {bad} outside [0, 1]; nothing written"
        )));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend(image.pixels.iter().map(|&v| quantize(v)));
    fs::write(path, bytes)?;
    Ok(())
}

/// Composites images into a rows x cols panel with white padding and writes it.
pub fn write_panel(
    path: &Path,
    images: &[Image],
    rows: usize,
    cols: usize,
    pad: usize,
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Contract("panel needs at least one image".into()));
    }
    if rows * cols < images.len() {
        return Err(Error::Contract(format!(
            "panel {rows}x{cols} cannot hold {} images",
            images.len()
        )));
    }
    let (h, w) = (images[0].height, images[0].width);
    if images.iter().any(|im| im.height != h || im.width != w) {
        return Err(Error::Dimension("panel images must share one size".into()));
    }
    let ph = rows * h + (rows + 1) * pad;
    let pw = cols * w + (cols + 1) * pad;
    let mut pixels = vec![1.0f64; ph * pw * 3];
    for (i, im) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let y0 = pad + r * (h + pad);
        let x0 = pad + c * (w + pad);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    pixels[((y0 + y) * pw + x0 + x) * 3 + ch] = im.pixels[(y * w + x) * 3 + ch];
                }
            }
        }
    }
    write_ppm(path, &Image::new(ph, pw, pixels)?)
}

fn read_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a [u8]> {
    // skip whitespace and comments
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
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Io(format!("{}: truncated PPM header", path.display())));
    }
    Ok(&bytes[start..*pos])
}

fn parse_dim(tok: &[u8], what: &str, path: &Path) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Io(format!("{}: malformed PPM {what}", path.display())))
}

/// Reads a binary P6 file with maxval 255, scaling to [0, 1].
pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut pos = 0;
    let magic = read_token(&bytes, &mut pos, path)?;
    if magic != b"P6" {
        return Err(Error::Io(format!("{}: not a P6 PPM file", path.display())));
    }
    let width = parse_dim(read_token(&bytes, &mut pos, path)?, "width", path)?;
    let height = parse_dim(read_token(&bytes, &mut pos, path)?, "height", path)?;
    let maxval = parse_dim(read_token(&bytes, &mut pos, path)?, "maxval", path)?;
    if maxval != 255 {
        return Err(Error::Io(format!(
            "{}: unsupported maxval {maxval} (only 255)",
            path.display()
        )));
    }
    pos += 1; // exactly one whitespace byte after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::Io(format!(
            "{}: expected {need} pixel bytes, found {}",
            path.display(),
            bytes.len().saturating_sub(pos)
        )));
    }
    let pixels = bytes[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(height, width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::env;

    fn tmp(name: &str) -> std::path::PathBuf {
        env::temp_dir().join(format!("faae-ppm-{name}-{}", std::process::id()))
    }

    #[test]
    fn black_pixel_bytes() {
        let p = tmp("black.ppm");
        write_ppm(&p, &Image::new(1, 1, vec![0.0; 3]).unwrap()).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n1 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 0, 0]);
        fs::remove_file(&p).ok();
    }

    #[test]
    fn round_trip_within_quantization() {
        let mut rng = Rng::new(31);
        let pixels: Vec<f64> = (0..4 * 5 * 3).map(|_| rng.uniform()).collect();
        let im = Image::new(4, 5, pixels).unwrap();
        let p = tmp("rt.ppm");
        write_ppm(&p, &im).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.height, 4);
        assert_eq!(back.width, 5);
        for (a, b) in im.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
        fs::remove_file(&p).ok();
    }

    #[test]
    fn out_of_range_rejected_before_write() {
        let p = tmp("bad.ppm");
        let im = Image::new(1, 1, vec![0.0, 1.5, 0.0]).unwrap();
        assert!(write_ppm(&p, &im).is_err());
        assert!(!p.exists());
    }

    #[test]
    fn panel_dimensions() {
        let imgs: Vec<Image> = (0..4)
            .map(|i| Image::new(3, 3, vec![i as f64 / 4.0; 27]).unwrap())
            .collect();
        let p = tmp("panel.ppm");
        write_panel(&p, &imgs, 2, 2, 2).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.height, 2 * 3 + 3 * 2);
        assert_eq!(back.width, 2 * 3 + 3 * 2);
        fs::remove_file(&p).ok();
    }

    #[test]
    fn truncated_file_errors() {
        let p = tmp("trunc.ppm");
        fs::write(&p, b"P6\n2 2\n255\nabc").unwrap();
        assert!(read_ppm(&p).is_err());
        fs::remove_file(&p).ok();
    }

    #[test]
    fn chw_round_trip() {
        let mut rng = Rng::new(8);
        let data: Vec<f64> = (0..3 * 2 * 4).map(|_| rng.uniform()).collect();
        let im = Image::from_chw(3, 2, 4, &data).unwrap();
        assert_eq!(im.to_chw(), data);
    }
}
