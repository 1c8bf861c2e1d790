//! Synthetic salient-object corpus: saturated elliptical blobs on muted,
//! textured backgrounds, with exact binary masks.

#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salfuse_core::imaging::{hsv_to_rgb, save_image, GrayMap, Image};

pub struct BlobScene {
    pub image: Image,
    pub mask: GrayMap,
}

/// One scene of `size × size` pixels, fully determined by `seed`.
pub fn blob_scene(size: usize, seed: u64) -> BlobScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let bg_hue: f64 = rng.random();
    let bg_sat = rng.random_range(0.1..0.3);
    let bg_val = rng.random_range(0.35..0.6);
    let blob_hue = (bg_hue + rng.random_range(0.35..0.65)) % 1.0;
    let blob_rgb = hsv_to_rgb([blob_hue, rng.random_range(0.75..1.0), rng.random_range(0.8..1.0)]);

    // background texture: two oriented gratings plus pixel noise
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(4.0..10.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (
                theta.cos() / period,
                theta.sin() / period,
                phase,
                rng.random_range(0.04..0.08),
            )
        })
        .collect();

    let cx = rng.random_range(0.35 * s..0.65 * s);
    let cy = rng.random_range(0.35 * s..0.65 * s);
    let rx = rng.random_range(0.14 * s..0.24 * s);
    let ry = rng.random_range(0.14 * s..0.24 * s);
    let rot: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let inside = |x: usize, y: usize| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let u = dx * rot.cos() + dy * rot.sin();
        let v = -dx * rot.sin() + dy * rot.cos();
        (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
    };

    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let noise = rng.random_range(-0.03..0.03);
            let rgb = if inside(x, y) {
                blob_rgb.map(|c| c + noise)
            } else {
                let t: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph, amp)| {
                        amp * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph).sin()
                    })
                    .sum();
                hsv_to_rgb([bg_hue, bg_sat, bg_val + t]).map(|c| c + noise)
            };
            pixels.push(rgb);
        }
    }
    let image = Image::new(size, size, pixels).expect("valid scene");
    let mask = GrayMap::from_fn(size, size, |x, y| if inside(x, y) { 1.0 } else { 0.0 });
    BlobScene { image, mask }
}

/// Writes `count` scenes as `dir/images/sNN.png` and `dir/masks/sNN.png`.
pub fn write_corpus(dir: &Path, count: usize, size: usize, seed: u64) {
    let (imgs, masks) = (dir.join("images"), dir.join("masks"));
    std::fs::create_dir_all(&imgs).unwrap();
    std::fs::create_dir_all(&masks).unwrap();
    for i in 0..count {
        let scene = blob_scene(size, seed.wrapping_mul(1000).wrapping_add(i as u64));
        save_image(&scene.image, imgs.join(format!("s{i:02}.png"))).unwrap();
        scene.mask.save_png(masks.join(format!("s{i:02}.png"))).unwrap();
    }
}

/// A `size × size` mosaic of randomly colored square tiles with pixel noise;
/// neighbouring tiles often have similar colors, so hierarchies merge them.
pub fn mosaic_scene(size: usize, tile: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tiles = size.div_ceil(tile);
    let base_hue: f64 = rng.random();
    let colors: Vec<[f64; 3]> = (0..tiles * tiles)
        .map(|_| {
            let hue = (base_hue + rng.random_range(0.0..0.4)) % 1.0;
            hsv_to_rgb([hue, rng.random_range(0.3..0.9), rng.random_range(0.4..0.9)])
        })
        .collect();
    Image::from_fn(size, size, |x, y| {
        let noise = rng.random_range(-0.02..0.02);
        colors[(y / tile) * tiles + x / tile].map(|c| c + noise)
    })
}
