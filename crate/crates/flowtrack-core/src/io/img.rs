//! Image loading and saving through the `image` crate: PNG and binary PPM,
//! chosen by file extension.

use crate::error::{Error, Result};
use crate::types::ImageSequence;
use ndarray::{Array3, Array4, Axis};
use std::path::Path;

/// Load an RGB image as `(3, H, W)` values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Load an ordered list of frames into a sequence.
pub fn load_sequence(paths: &[std::path::PathBuf]) -> Result<ImageSequence> {
    if paths.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a sequence needs at least 2 frames, got {}",
            paths.len()
        )));
    }
    let frames: Result<Vec<Array3<f64>>> = paths.iter().map(|p| load_image(p)).collect();
    let frames = frames?;
    let (h, w) = (frames[0].shape()[1], frames[0].shape()[2]);
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != [3, h, w] {
            return Err(Error::InvalidArgument(format!(
                "frame {i} is {}x{}, expected {h}x{w}",
                f.shape()[1],
                f.shape()[2]
            )));
        }
    }
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ImageSequence::new(ndarray::stack(Axis(0), &views).expect("stack frames"))
}

/// Save an `(H, W, 3)` byte image; the extension picks PNG or PPM.
pub fn save_image(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push(pixels[[y, x, c]]);
            }
        }
    }
    image::save_buffer(
        path,
        &buf,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

/// Quantize a `(3, H, W)` float image in `[0, 1]` to `(H, W, 3)` bytes.
pub fn to_rgb8(frame: &ndarray::ArrayView3<'_, f64>) -> Array3<u8> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        (frame[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8
    })
}

/// Quantize a whole sequence for frame dumps.
#[allow(dead_code)]
pub fn sequence_to_rgb8(frames: &Array4<f64>) -> Vec<Array3<u8>> {
    (0..frames.shape()[0])
        .map(|t| to_rgb8(&frames.index_axis(Axis(0), t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_ppm_round_trip_byte_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((5, 7, 3), |(y, x, c)| ((y * 50 + x * 9 + c * 3) % 256) as u8);
        for name in ["t.png", "t.ppm"] {
            let path = dir.path().join(name);
            save_image(&path, &img).unwrap();
            let back = load_image(&path).unwrap();
            for y in 0..5 {
                for x in 0..7 {
                    for c in 0..3 {
                        let expected = img[[y, x, c]] as f64 / 255.0;
                        assert!(
                            (back[[c, y, x]] - expected).abs() < 1e-9,
                            "{name} at ({y},{x},{c})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn sequence_loader_checks_shape_agreement() {
        let dir = tempfile::tempdir().unwrap();
        let a = Array3::from_elem((4, 4, 3), 10u8);
        let b = Array3::from_elem((4, 6, 3), 10u8);
        let pa = dir.path().join("a.png");
        let pb = dir.path().join("b.png");
        save_image(&pa, &a).unwrap();
        save_image(&pb, &b).unwrap();
        assert!(load_sequence(&[pa.clone(), pb]).is_err());
        assert!(load_sequence(&[pa]).is_err());
    }
}
