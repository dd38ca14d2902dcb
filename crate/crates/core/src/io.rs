//! PNG frame I/O. Pixel values in `[-1, 1]` map linearly to `0..=255`.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn check_frame<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] if c == 1 || c == 3 => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("expected a [1|3, H, W] frame, got {s:?}"))),
    }
}

/// `[C, H, W]` frame as an RGB image; single-channel frames become grey.
pub fn to_image<T: Scalar>(frame: &Tensor<T>) -> Result<RgbImage> {
    let (c, h, w) = check_frame(frame)?;
    let d = frame.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| to_byte(d[(ch.min(c - 1) * h + y as usize) * w + x as usize].re_f64());
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn from_image<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(&[3, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        T::lit(img.get_pixel(x as u32, y as u32)[ch] as f64 / 127.5 - 1.0)
    })
}

pub fn save_png<T: Scalar>(frame: &Tensor<T>, path: &Path) -> Result<()> {
    to_image(frame)?.save(path)?;
    Ok(())
}

/// Loads a PNG as a `[3, H, W]` tensor in `[-1, 1]`.
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)?.to_rgb8();
    Ok(from_image(&img))
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:06}.png"))
}

/// Writes `frame_000000.png`, `frame_000001.png`, … into `dir`.
pub fn save_frames<T: Scalar>(dir: &Path, frames: &[Tensor<T>]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = frame_path(dir, i);
            save_png(f, &p)?;
            Ok(p)
        })
        .collect()
}

/// Tiles rows of equally sized frames with a 1-pixel white gutter.
pub fn contact_sheet<T: Scalar>(rows: &[Vec<Tensor<T>>]) -> Result<RgbImage> {
    let first = rows.iter().flatten().next().ok_or_else(|| Error::InvalidArgument("empty contact sheet".into()))?;
    let (_, h, w) = check_frame(first)?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut sheet = RgbImage::from_pixel(
        (cols * (w + 1) + 1) as u32,
        (rows.len() * (h + 1) + 1) as u32,
        Rgb([255, 255, 255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, f) in row.iter().enumerate() {
            let (_, fh, fw) = check_frame(f)?;
            if (fh, fw) != (h, w) {
                return Err(Error::Shape("contact sheet frames differ in size".into()));
            }
            let img = to_image(f)?;
            image::imageops::replace(&mut sheet, &img, (c * (w + 1) + 1) as i64, (r * (h + 1) + 1) as i64);
        }
    }
    Ok(sheet)
}
