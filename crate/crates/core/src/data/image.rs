//! Image decoding and the two geometric transforms: bilinear resize and
//! nearest-neighbour rotation.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Little-endian `width, height, channels` header ahead of raw 8-bit samples.
pub const RAW_HEADER_LEN: usize = 12;

/// Encodes the raw fixture format. `pixels` is interleaved `h x w x channels`.
pub fn encode_raw(width: u32, height: u32, channels: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + pixels.len());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(pixels);
    out
}

fn decode_raw(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    if bytes.len() < RAW_HEADER_LEN {
        return Err("raw header truncated".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (word(0), word(1), word(2));
    if w == 0 || h == 0 || !matches!(c, 1 | 3 | 4) {
        return Err(format!("raw header {w}x{h}x{c} is invalid"));
    }
    let body = &bytes[RAW_HEADER_LEN..];
    if body.len() != w * h * c {
        return Err(format!("raw body has {} bytes, header needs {}", body.len(), w * h * c));
    }
    Ok(planar(w, h, |y, x, ch| {
        let src = if c == 1 { 0 } else { ch };
        body[(y * w + x) * c + src]
    }))
}

fn planar(w: usize, h: usize, sample: impl Fn(usize, usize, usize) -> u8) -> Tensor<f32> {
    Tensor::from_fn([3, h, w], |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        f32::from(sample(rest / w, rest % w, ch)) / 255.0
    })
}

fn from_dynamic(img: DynamicImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16 => {
            let luma = img.to_luma8();
            planar(w, h, |y, x, _| luma.get_pixel(x as u32, y as u32).0[0])
        }
        _ => {
            let rgb = img.to_rgb8();
            planar(w, h, |y, x, ch| rgb.get_pixel(x as u32, y as u32).0[ch])
        }
    }
}

/// Decodes PNG, JPEG, or the raw fixture format into `[3, h, w]` in `[0, 1]`.
/// Single-channel sources are replicated across the three channels.
pub fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    let fail = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let is_raw = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("raw"));
    if is_raw {
        return decode_raw(&std::fs::read(path)?).map_err(fail);
    }
    let img = ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| fail(e.to_string()))?;
    Ok(from_dynamic(img))
}

fn check_image(img: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    if img.rank() != 3 {
        return Err(Error::arg(format!("expected [c, h, w] image, got {:?}", img.shape())));
    }
    Ok((img.shape()[0], img.shape()[1], img.shape()[2]))
}

/// Bilinear resize with half-pixel centres: source coordinate
/// `(i + 0.5) * in / out - 0.5`, clamped to the valid range.
pub fn resize(img: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = check_image(img)?;
    if height == 0 || width == 0 {
        return Err(Error::arg("resize target must be non-empty"));
    }
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    let taps = |len_in: usize, len_out: usize| -> Vec<(usize, usize, f64)> {
        (0..len_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * len_in as f64 / len_out as f64 - 0.5)
                    .clamp(0.0, (len_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = taps(h, height);
    let xs = taps(w, width);
    let src = img.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(((top * (1.0 - fy) + bottom * fy) as f32).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new([c, height, width], out)
}

/// Rotates counter-clockwise (as displayed, y pointing down) by `angle_deg`
/// about the image centre. Each output pixel takes the nearest source pixel of
/// its inverse-rotated position; positions outside the image clamp to the edge.
pub fn rotate(img: &Tensor<f32>, angle_deg: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = check_image(img)?;
    if angle_deg == 0.0 {
        return Ok(img.clone());
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut map = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = dx * cos - dy * sin + cx;
            let sy = dx * sin + dy * cos + cy;
            let sx = sx.round().clamp(0.0, (w - 1) as f64) as usize;
            let sy = sy.round().clamp(0.0, (h - 1) as f64) as usize;
            map.push(sy * w + sx);
        }
    }
    let src = img.data();
    let mut out = Vec::with_capacity(img.len());
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        out.extend(map.iter().map(|&i| plane[i]));
    }
    Tensor::new([c, h, w], out)
}

/// Rotation by an angle drawn uniformly from `[-max_deg, max_deg]`.
pub fn augment_rotate(img: &Tensor<f32>, max_deg: f64, rng: &mut Rng) -> Result<(Tensor<f32>, f64)> {
    if max_deg < 0.0 || !max_deg.is_finite() {
        return Err(Error::arg(format!("max rotation {max_deg} must be finite and >= 0")));
    }
    if max_deg == 0.0 {
        return Ok((img.clone(), 0.0));
    }
    let angle = rng.uniform(-max_deg, max_deg);
    Ok((rotate(img, angle)?, angle))
}
