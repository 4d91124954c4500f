//! File formats: binary PGM images for mask/frame dumps and a small
//! binary container for trained head weights.
//!
//! PGM (P5) is the simplest raster format any image viewer opens —
//! experiments dump per-patch shading and generated frames as PGM so a
//! run can be inspected without plotting tools.
//!
//! The weight snapshot is a named list of matrices: magic `VPPW`, a
//! format version, then per entry a length-prefixed name, the dimensions,
//! and row-major little-endian f64 data. Bit-exact round-trips are part
//! of the contract (reproducibility depends on them), so readers validate
//! magic, version, and sizes strictly.

use crate::error::{Result, VppError};
use crate::tensor::Matrix;
use crate::vit::Image;
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// Snapshot file magic.
pub const SNAPSHOT_MAGIC: [u8; 4] = *b"VPPW";
/// Current snapshot format version.
pub const SNAPSHOT_VERSION: u32 = 1;

/// Writes a binary (P5) PGM. `pixels` is row-major, one byte per pixel.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(VppError::Shape(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(pixels.len() + 32);
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary (P5) PGM written by [`write_pgm`] (single whitespace
/// separators, maxval 255).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let data = fs::read(path)?;
    let header_end = data
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| VppError::Parse("truncated image header".into()))?;
    let header = std::str::from_utf8(&data[..header_end])
        .map_err(|_| VppError::Parse("image header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("P5") {
        return Err(VppError::Parse("not a binary PGM".into()));
    }
    let dims = lines.next().unwrap_or_default();
    let mut it = dims.split_whitespace();
    let width: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| VppError::Parse(format!("bad image dimensions {dims:?}")))?;
    let height: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| VppError::Parse(format!("bad image dimensions {dims:?}")))?;
    if lines.next() != Some("255") {
        return Err(VppError::Parse("unsupported maxval".into()));
    }
    let pixels = data[header_end + 1..].to_vec();
    if pixels.len() != width * height {
        return Err(VppError::Parse(format!(
            "{} payload bytes for a {width}x{height} image",
            pixels.len()
        )));
    }
    Ok((width, height, pixels))
}

/// Quantizes an image to grayscale bytes (channel mean, clamped, rounded).
pub fn image_to_gray(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.height * img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            out.push((img.gray(y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Writes named matrices as a weight snapshot.
pub fn write_snapshot(path: &Path, entries: &[(String, Matrix)]) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(&SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, m) in entries {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(bytes);
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for &v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.data.len() {
            return Err(VppError::Parse("snapshot is truncated".into()));
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a weight snapshot written by [`write_snapshot`].
pub fn read_snapshot(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let data = fs::read(path)?;
    let mut c = Cursor { data: &data, at: 0 };
    if c.take(4)? != SNAPSHOT_MAGIC {
        return Err(VppError::Parse("not a weight snapshot (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(VppError::Parse(format!(
            "snapshot version {version}, expected {SNAPSHOT_VERSION}"
        )));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| VppError::Parse("snapshot entry name is not UTF-8".into()))?
            .to_string();
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            values.push(c.f64()?);
        }
        entries.push((name, Matrix::from_vec(rows, cols, values)?));
    }
    if c.at != data.len() {
        return Err(VppError::Parse("snapshot has trailing bytes".into()));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("vpp-io-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn pgm_round_trips_and_has_the_expected_header() {
        let path = tmp("roundtrip.pgm");
        let pixels: Vec<u8> = vec![0, 64, 128, 192, 255, 7];
        write_pgm(&path, 3, 2, &pixels).unwrap();
        let raw = fs::read(&path).unwrap();
        assert!(raw.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&raw[raw.len() - 6..], &pixels[..]);
        let (w, h, px) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, pixels);
    }

    #[test]
    fn pgm_rejects_wrong_pixel_counts() {
        let path = tmp("bad.pgm");
        assert!(write_pgm(&path, 3, 2, &[0u8; 5]).is_err());
    }

    #[test]
    fn gray_quantization_clamps_and_rounds() {
        let mut img = Image::new(1, 5);
        for (x, v) in [0.0, 1.0, 0.5, -0.3, 2.0].into_iter().enumerate() {
            for c in 0..3 {
                img.set_pixel(c, 0, x, v);
            }
        }
        assert_eq!(image_to_gray(&img), vec![0, 255, 128, 0, 255]);
    }

    #[test]
    fn snapshot_round_trips_bit_exactly() {
        let path = tmp("weights.bin");
        let entries = vec![
            ("map.w1".to_string(), Matrix::from_vec(2, 3, vec![
                1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -0.1,
            ]).unwrap()),
            ("map.b1".to_string(), Matrix::from_vec(1, 3, vec![0.25, -0.5, 3.0]).unwrap()),
        ];
        write_snapshot(&path, &entries).unwrap();
        let back = read_snapshot(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, m0), (n1, m1)) in entries.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(m0.rows(), m1.rows());
            assert_eq!(m0.cols(), m1.cols());
            for (a, b) in m0.data().iter().zip(m1.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn snapshot_rejects_corruption() {
        let path = tmp("weights2.bin");
        let entries = vec![("w".to_string(), Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap())];
        write_snapshot(&path, &entries).unwrap();
        let good = fs::read(&path).unwrap();

        let bad_magic = tmp("bad_magic.bin");
        let mut data = good.clone();
        data[0] = b'X';
        fs::write(&bad_magic, &data).unwrap();
        assert!(read_snapshot(&bad_magic).is_err());

        let bad_version = tmp("bad_version.bin");
        let mut data = good.clone();
        data[4] = 99;
        fs::write(&bad_version, &data).unwrap();
        assert!(read_snapshot(&bad_version).is_err());

        let truncated = tmp("truncated.bin");
        fs::write(&truncated, &good[..good.len() - 3]).unwrap();
        assert!(read_snapshot(&truncated).is_err());

        let trailing = tmp("trailing.bin");
        let mut data = good;
        data.push(0);
        fs::write(&trailing, &data).unwrap();
        assert!(read_snapshot(&trailing).is_err());
    }

    #[test]
    fn unwritable_paths_surface_io_errors() {
        let dir = tmp("iamadir");
        fs::create_dir_all(&dir).unwrap();
        let err = write_pgm(&dir, 1, 1, &[0]).unwrap_err();
        assert!(matches!(err, VppError::Io(_)));
    }
}
