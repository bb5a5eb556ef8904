//! Image containers and file I/O.
//!
//! Rendered images live as row-major `[h*w, 3]` float tensors in `[0, 1]`.
//! They are written twice: as 8-bit PNG for viewing and as a raw `f32` dump
//! (`.f32` extension, `HFIM` header) that metrics read to keep quantization
//! out of tolerance budgets. Writes go through a temp file plus rename so
//! partially written cells never appear in a dataset.

use std::io::Read;
use std::path::Path;

use crate::diff::Tensor;
use crate::error::{Error, Result};

const FLOAT_MAGIC: &[u8; 4] = b"HFIM";

/// An RGB image with float intensities, `data: [h*w, 3]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub h: usize,
    pub w: usize,
    pub data: Tensor,
}

impl FloatImage {
    pub fn new(h: usize, w: usize, data: Tensor) -> FloatImage {
        assert_eq!(data.dim(), (h * w, 3), "image tensor shape");
        FloatImage { h, w, data }
    }

    /// Solid-color image.
    pub fn filled(h: usize, w: usize, rgb: [f64; 3]) -> FloatImage {
        let mut data = Tensor::zeros((h * w, 3));
        for mut row in data.rows_mut() {
            row[0] = rgb[0];
            row[1] = rgb[1];
            row[2] = rgb[2];
        }
        FloatImage { h, w, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let r = self.data.row(y * self.w + x);
        [r[0], r[1], r[2]]
    }

    /// 2× box-filter downsample; dimensions must be even.
    pub fn downsample2x(&self) -> FloatImage {
        assert!(self.h % 2 == 0 && self.w % 2 == 0, "even dimensions");
        let (ho, wo) = (self.h / 2, self.w / 2);
        let mut data = Tensor::zeros((ho * wo, 3));
        for y in 0..ho {
            for x in 0..wo {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += self.data[((2 * y + dy) * self.w + 2 * x + dx, c)];
                        }
                    }
                    data[(y * wo + x, c)] = acc * 0.25;
                }
            }
        }
        FloatImage { h: ho, w: wo, data }
    }

    /// Mean absolute difference against another image of the same size.
    pub fn mean_abs_diff(&self, other: &FloatImage) -> f64 {
        assert_eq!((self.h, self.w), (other.h, other.w), "image sizes");
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }
}

/// Write via a temp file in the same directory plus rename, so readers never
/// observe a partial file. Creates parent directories as needed.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Write an 8-bit PNG; intensities are clamped to `[0, 1]` and rounded.
pub fn save_png(path: &Path, img: &FloatImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.h * img.w * 3);
    for row in img.data.rows() {
        for c in 0..3 {
            bytes.push((row[c].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let buffer: image::RgbImage =
        image::ImageBuffer::from_raw(img.w as u32, img.h as u32, bytes)
            .expect("raw buffer size");
    let mut out = Vec::new();
    buffer
        .write_to(
            &mut std::io::Cursor::new(&mut out),
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    atomic_write(path, &out)
}

/// Read an 8-bit PNG back to floats in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<FloatImage> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Tensor::zeros((h * w, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(y as usize * w + x as usize, c)] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(FloatImage { h, w, data })
}

/// Write the raw float dump metrics read: `HFIM`, u32 h, u32 w, then
/// `h*w*3` little-endian `f32` values.
pub fn save_float(path: &Path, img: &FloatImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + img.data.len() * 4);
    bytes.extend_from_slice(FLOAT_MAGIC);
    bytes.extend_from_slice(&(img.h as u32).to_le_bytes());
    bytes.extend_from_slice(&(img.w as u32).to_le_bytes());
    for &v in img.data.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    atomic_write(path, &bytes)
}

/// Read a float dump written by [`save_float`].
pub fn load_float(path: &Path) -> Result<FloatImage> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::Image(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[0..4] != FLOAT_MAGIC {
        return Err(fail("not a float image dump"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expect = 12 + h * w * 3 * 4;
    if bytes.len() != expect {
        return Err(fail("truncated float image dump"));
    }
    let mut data = Tensor::zeros((h * w, 3));
    let mut off = 12;
    for r in 0..h * w {
        for c in 0..3 {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            data[(r, c)] = v as f64;
            off += 4;
        }
    }
    Ok(FloatImage { h, w, data })
}

/// Convenience used by the CLI: write both the PNG and the float dump for a
/// rendered image (`name.png` and `name.f32`).
pub fn save_render(dir: &Path, name: &str, img: &FloatImage) -> Result<()> {
    save_png(&dir.join(format!("{name}.png")), img)?;
    save_float(&dir.join(format!("{name}.f32")), img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> FloatImage {
        FloatImage::new(
            h,
            w,
            Tensor::from_shape_fn((h * w, 3), |_| rng.gen_range(0.0..1.0)),
        )
    }

    #[test]
    fn png_round_trip_is_exact_for_quantized_values() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Start from exactly representable 8-bit levels.
        let img = FloatImage::new(
            9,
            13,
            Tensor::from_shape_fn((9 * 13, 3), |_| {
                rng.gen_range(0u32..256) as f64 / 255.0
            }),
        );
        let path = dir.path().join("x.png");
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.h, 9);
        assert_eq!(back.w, 13);
        let max = img
            .data
            .iter()
            .zip(back.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-12, "max error {max}");
    }

    #[test]
    fn float_dump_round_trips_to_f32_precision() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, 7, 5);
        let path = dir.path().join("x.f32");
        save_float(&path, &img).unwrap();
        let back = load_float(&path).unwrap();
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert_eq!(*a as f32, *b as f32);
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn corrupt_float_dumps_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.f32");
        std::fs::write(&path, b"nope").unwrap();
        assert!(load_float(&path).is_err());
        std::fs::write(&path, b"HFIM\x01\x00\x00\x00\x01\x00\x00\x00short").unwrap();
        assert!(load_float(&path).is_err());
    }

    #[test]
    fn downsample_averages_quads() {
        let mut img = FloatImage::filled(4, 4, [0.0, 0.0, 0.0]);
        img.data[(0, 0)] = 1.0; // pixel (0,0) red
        let half = img.downsample2x();
        assert_eq!(half.h, 2);
        assert!((half.pixel(0, 0)[0] - 0.25).abs() < 1e-15);
        assert_eq!(half.pixel(1, 1), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn save_render_writes_both_files() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_image(&mut rng, 16, 16);
        save_render(dir.path(), "frame", &img).unwrap();
        assert!(dir.path().join("frame.png").exists());
        assert!(dir.path().join("frame.f32").exists());
    }
}
