//! PNG rendering of `[C, H, W]` images in `[0, 1]`.

use boss_core::Tensor;

use crate::error::{AppError, Result};

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 1-channel image as grayscale and a 3-channel image as RGB.
pub fn png(image: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(AppError::Invalid(format!("expected [C, H, W], got {:?}", image.shape())));
    };
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(AppError::Invalid(format!("cannot render {c} channels"))),
    };
    let plane = h * w;
    let data = image.data();
    let mut pixels = Vec::with_capacity(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            pixels.push(to_byte(data[ch * plane + p]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| AppError::Format(e.to_string()))?;
        writer.write_image_data(&pixels).map_err(|e| AppError::Format(e.to_string()))?;
    }
    Ok(out)
}
