//! Small generated datasets in the on-disk layout [`super::load_dataset`] reads.

use std::path::Path;

use super::image::encode_raw;
use crate::error::Result;
use crate::tensor::Rng;

pub const SYNTHETIC_CLASSES: [&str; 4] = [
    "MildDemented",
    "ModerateDemented",
    "NonDemented",
    "VeryMildDemented",
];

/// Per-class mean RGB; classes are separable by colour alone, which survives
/// any rotation.
const PALETTE: [[f64; 3]; 4] = [
    [0.75, 0.25, 0.25],
    [0.25, 0.75, 0.25],
    [0.25, 0.25, 0.75],
    [0.55, 0.55, 0.55],
];

/// Writes `counts[c]` raw RGB images of `size x size` under `root/<class>/`.
/// Each image is its class colour plus a centred bright disc and uniform noise.
pub fn write_synthetic_dataset(root: &Path, counts: &[usize], size: usize, seed: u64) -> Result<()> {
    for (c, &n) in counts.iter().enumerate() {
        let name = SYNTHETIC_CLASSES
            .get(c)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("class{c}"));
        let dir = root.join(name);
        std::fs::create_dir_all(&dir)?;
        let base = PALETTE[c % PALETTE.len()];
        for j in 0..n {
            let mut rng = Rng::stream(seed, ((c as u64) << 32) | j as u64);
            let radius = size as f64 * rng.uniform(0.15, 0.35);
            let centre = (size as f64 - 1.0) / 2.0;
            let mut pixels = Vec::with_capacity(size * size * 3);
            for y in 0..size {
                for x in 0..size {
                    let (dy, dx) = (y as f64 - centre, x as f64 - centre);
                    let disc = if dx * dx + dy * dy <= radius * radius { 0.2 } else { 0.0 };
                    for &b in &base {
                        let v = b + disc + rng.uniform(-0.12, 0.12);
                        pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
            let bytes = encode_raw(size as u32, size as u32, 3, &pixels);
            std::fs::write(dir.join(format!("img_{j:04}.raw")), bytes)?;
        }
    }
    Ok(())
}
