//! PNG round-tripping for `[H, W, 3]` image tensors in [0, 1].

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Dimension(format!("expected [H, W, 3] image, got {shape:?}")));
    }
    let (h, w) = (shape[0] as u32, shape[1] as u32);
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w, h);
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        let x = (i as u32) % w;
        let y = (i as u32) / w;
        let to8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        buf.put_pixel(x, y, Rgb([to8(px[0]), to8(px[1]), to8(px[2])]));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    buf.save(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for px in img.pixels() {
        data.extend(px.0.iter().map(|&v| v as f32 / 255.0));
    }
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Stitches same-height images left to right (turntable strips).
pub fn hstack(images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Input("nothing to stack".into()));
    }
    let h = images[0].shape()[0];
    let total_w: usize = images.iter().map(|t| t.shape()[1]).sum();
    let mut data = vec![0.0f32; h * total_w * 3];
    let mut x0 = 0usize;
    for img in images {
        let (ih, iw) = (img.shape()[0], img.shape()[1]);
        if ih != h {
            return Err(Error::Dimension("hstack needs equal heights".into()));
        }
        for y in 0..h {
            for x in 0..iw {
                let src = (y * iw + x) * 3;
                let dst = (y * total_w + x0 + x) * 3;
                data[dst..dst + 3].copy_from_slice(&img.data()[src..src + 3]);
            }
        }
        x0 += iw;
    }
    Tensor::new(vec![h, total_w, 3], data)
}
