//! Image grids as binary PGM.
//!
//! Pixels in `[0, 1]` map to bytes by `floor(p·255 + 0.5)` clamped to
//! `0..=255`, so 0.5 becomes 128 and `b/255` maps back to `b`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::common_content;
use crate::ndcore::Tensor2;
use crate::trainer::CategorySnapshot;

pub const SIDE: usize = 28;

pub fn quantize(p: f64) -> u8 {
    (p * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Encodes `width x height` grayscale bytes as P5.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Tiles the columns of `images` (each `side²` pixels, row-major) into a
/// grid `cols` tiles wide. Unused cells stay black. Returns
/// `(width, height, bytes)`.
pub fn tile_images(images: &Tensor2, cols: usize, side: usize) -> Result<(usize, usize, Vec<u8>)> {
    let n = images.cols();
    if n == 0 || cols == 0 {
        return Err(Error::EmptyData("image grid needs at least one image and one column".into()));
    }
    if images.rows() != side * side {
        return Err(Error::Shape { op: "tile_images", left: images.shape(), right: (side * side, n) });
    }
    let grid_rows = n.div_ceil(cols);
    let (width, height) = (cols * side, grid_rows * side);
    let mut bytes = vec![0u8; width * height];
    for k in 0..n {
        let (gr, gc) = (k / cols, k % cols);
        for y in 0..side {
            for x in 0..side {
                let p = images.get(y * side + x, k);
                bytes[(gr * side + y) * width + gc * side + x] = quantize(p);
            }
        }
    }
    Ok((width, height, bytes))
}

pub fn write_image_grid(images: &Tensor2, cols: usize, path: &Path) -> Result<()> {
    let (w, h, bytes) = tile_images(images, cols, SIDE)?;
    fs::write(path, encode_pgm(w, h, &bytes))?;
    Ok(())
}

/// Renders common content for every snapshot with the same latent draws, one
/// file per snapshot named by how many categories it had learned.
pub fn common_content_snapshots(
    snapshots: &[CategorySnapshot],
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    snapshots
        .iter()
        .map(|s| {
            let images = common_content(&s.params, n, seed)?;
            let path = out_dir.join(format!("common-{:02}.pgm", s.params.n_categories()));
            write_image_grid(&images, cols, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CvaeParams, Dims};

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
        for b in 0..=255u8 {
            assert_eq!(quantize(b as f64 / 255.0), b);
        }
    }

    #[test]
    fn black_image_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("black.pgm");
        write_image_grid(&Tensor2::zeros(784, 1), 1, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n28 28\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 784);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn grid_dimensions_and_placement() {
        let images = Tensor2::from_fn(784, 10, |_, c| if c == 6 { 1.0 } else { 0.0 });
        let (w, h, bytes) = tile_images(&images, 5, SIDE).unwrap();
        assert_eq!((w, h), (140, 56));
        // image 6 sits at grid row 1, column 1
        assert_eq!(bytes[28 * w + 28], 255);
        assert_eq!(bytes[55 * w + 55], 255);
        assert_eq!(bytes[28 * w + 27], 0);
        assert_eq!(bytes.iter().filter(|&&b| b == 255).count(), 784);
    }

    #[test]
    fn partial_last_row_is_black() {
        let images = Tensor2::filled(784, 3, 1.0);
        let (w, h, bytes) = tile_images(&images, 2, SIDE).unwrap();
        assert_eq!((w, h), (56, 56));
        assert_eq!(bytes[(h - 1) * w + w - 1], 0);
        assert!(tile_images(&images, 0, SIDE).is_err());
        assert!(tile_images(&Tensor2::zeros(10, 1), 1, SIDE).is_err());
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("x.pgm");
        assert!(write_image_grid(&Tensor2::zeros(784, 1), 1, &path).is_err());
    }

    #[test]
    fn snapshots_are_deterministic_and_named_by_count() {
        let p1 = CvaeParams::init(Dims { input: 784, hidden: 8 }, 1);
        let p2 = p1.grow(2);
        let snaps = vec![
            CategorySnapshot { labels: vec![0], params: p1 },
            CategorySnapshot { labels: vec![0, 1], params: p2 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let files = common_content_snapshots(&snaps, 4, 9, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files[1].ends_with("common-02.pgm"));
        // growth leaves common content untouched
        assert_eq!(fs::read(&files[0]).unwrap(), fs::read(&files[1]).unwrap());
        let again = common_content_snapshots(&snaps, 4, 9, dir.path()).unwrap();
        assert_eq!(fs::read(&again[0]).unwrap(), fs::read(&files[0]).unwrap());
    }
}
