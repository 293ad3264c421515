//! Videos on disk: a directory of `frame_%05d.png` plus `meta.json`.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{MiveError, Result};
use crate::tensor::Video;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct VideoMeta {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    #[serde(rename = "fps")]
    pub fps: f64,
}

pub const DEFAULT_FPS: f64 = 8.0;

fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn frame_image(video: &Video, t: usize) -> RgbImage {
    let f = video.frame_view(t);
    RgbImage::from_fn(video.width() as u32, video.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            quantize(f[[0, y, x]]),
            quantize(f[[1, y, x]]),
            quantize(f[[2, y, x]]),
        ])
    })
}

/// Writes one frame of `video` as an 8-bit RGB PNG.
pub fn write_frame_png(path: impl AsRef<Path>, video: &Video, t: usize) -> Result<()> {
    let path = path.as_ref();
    frame_image(video, t)
        .save(path)
        .map_err(|e| MiveError::format(format!("{}: {e}", path.display())))
}

/// One frame encoded as PNG bytes.
pub fn frame_png_bytes(video: &Video, t: usize) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    frame_image(video, t)
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| MiveError::format(format!("png encoding: {e}")))?;
    Ok(out.into_inner())
}

/// Reads a PNG as a single-frame video.
pub fn read_image(path: impl AsRef<Path>) -> Result<Video> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| MiveError::format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = Array4::from_shape_fn((1, 3, h, w), |(_, c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    });
    Video::new(data)
}

pub fn write_video(dir: impl AsRef<Path>, video: &Video, fps: f64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| MiveError::io(dir, e))?;
    for t in 0..video.frames() {
        write_frame_png(dir.join(frame_name(t)), video, t)?;
    }
    let (t, h, w) = video.dims();
    let meta = VideoMeta { t, h, w, fps };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| MiveError::io(&meta_path, e))
}

pub fn read_meta(dir: impl AsRef<Path>) -> Result<VideoMeta> {
    let path = dir.as_ref().join("meta.json");
    let bytes = fs::read(&path).map_err(|e| MiveError::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_video(dir: impl AsRef<Path>) -> Result<Video> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let mut data = Array4::<f64>::zeros((meta.t, 3, meta.h, meta.w));
    for t in 0..meta.t {
        let frame = read_image(dir.join(frame_name(t)))?;
        if frame.height() != meta.h || frame.width() != meta.w {
            return Err(MiveError::format(format!(
                "frame {t} in {} is {}x{}, meta says {}x{}",
                dir.display(),
                frame.height(),
                frame.width(),
                meta.h,
                meta.w
            )));
        }
        data.slice_mut(ndarray::s![t..t + 1, .., .., ..])
            .assign(frame.data());
    }
    Video::new(data)
}

/// Writes a binary `T x H x W` mask as grayscale frames (0 or 255).
pub fn write_mask(dir: impl AsRef<Path>, mask: &Array3<bool>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| MiveError::io(dir, e))?;
    let (t, h, w) = mask.dim();
    for f in 0..t {
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([if mask[[f, y as usize, x as usize]] { 255 } else { 0 }])
        });
        let path = dir.join(frame_name(f));
        img.save(&path)
            .map_err(|e| MiveError::format(format!("{}: {e}", path.display())))?;
    }
    let meta = VideoMeta {
        t,
        h,
        w,
        fps: DEFAULT_FPS,
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| MiveError::io(&meta_path, e))
}

/// Reads a mask directory; a pixel is set when its gray level exceeds one half.
pub fn read_mask(dir: impl AsRef<Path>) -> Result<Array3<bool>> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let mut mask = Array3::from_elem((meta.t, meta.h, meta.w), false);
    for f in 0..meta.t {
        let path = dir.join(frame_name(f));
        let img = image::open(&path)
            .map_err(|e| MiveError::format(format!("{}: {e}", path.display())))?
            .to_luma8();
        if img.width() as usize != meta.w || img.height() as usize != meta.h {
            return Err(MiveError::format(format!("mask frame {f} has wrong size")));
        }
        for (x, y, p) in img.enumerate_pixels() {
            mask[[f, y as usize, x as usize]] = p[0] > 127;
        }
    }
    Ok(mask)
}

/// Writes an 8-bit grayscale PNG from values already scaled to `[0, 1]`.
pub fn write_gray_png(path: impl AsRef<Path>, values: &ndarray::Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = values.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([quantize(values[[y as usize, x as usize]])])
    });
    img.save(path)
        .map_err(|e| MiveError::format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_video_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array4::from_shape_fn((5, 3, 8, 16), |(t, c, y, x)| {
            ((t * 31 + c * 7 + y * 3 + x) % 256) as f64 / 255.0
        });
        let v = Video::new(data).unwrap();
        write_video(dir.path(), &v, 12.0).unwrap();
        let meta = read_meta(dir.path()).unwrap();
        assert_eq!((meta.t, meta.h, meta.w), (5, 8, 16));
        assert_eq!(read_video(dir.path()).unwrap(), v);
        let raw = fs::read_to_string(dir.path().join("meta.json")).unwrap();
        assert!(raw.contains("\"T\"") && raw.contains("\"fps\""));
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Array3::from_shape_fn((2, 4, 4), |(t, y, x)| (t + y * x) % 3 == 0);
        write_mask(dir.path(), &mask).unwrap();
        assert_eq!(read_mask(dir.path()).unwrap(), mask);
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let err = read_video("/nonexistent/definitely").unwrap_err();
        assert_eq!(err.kind(), "io");
    }
}
