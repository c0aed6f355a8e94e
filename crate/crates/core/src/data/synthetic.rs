//! Procedural stand-in faces for tests and desk-scale runs.
//!
//! Every face shares the same layout (hair, oval face, two eyes, nose,
//! mouth) with seeded jitter in position, size and colour, so a hole can be
//! filled from what the rest of the image and the training set show.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_image, ALIGNED_SIZE};
use crate::error::Result;
use crate::tensor::Tensor;

type Rgb = [f64; 3];

fn jitter<R: Rng>(rng: &mut R, base: Rgb, amount: f64) -> Rgb {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 255.0))
}

/// Soft inside test for an axis-aligned ellipse: 1 inside, 0 outside, ~1.5px ramp.
fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let d = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
    let edge = 1.5 / rx.min(ry);
    ((1.0 - d) / edge + 0.5).clamp(0.0, 1.0)
}

fn blend(dst: &mut Rgb, src: Rgb, alpha: f64) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - alpha) + src[c] * alpha;
    }
}

/// One `size × size` synthetic face as an 8-bit `[3, size, size]` tensor.
pub fn synthetic_face(seed: u64, size: usize) -> Tensor<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = size as f64 / ALIGNED_SIZE as f64;
    let bg_top = jitter(&mut rng, [90.0, 120.0, 160.0], 50.0);
    let bg_bottom = jitter(&mut rng, [60.0, 70.0, 90.0], 40.0);
    let skin = jitter(&mut rng, [215.0, 170.0, 140.0], 35.0);
    let hair = jitter(&mut rng, [60.0, 40.0, 25.0], 25.0);
    let iris = jitter(&mut rng, [60.0, 80.0, 90.0], 30.0);
    let lips = jitter(&mut rng, [180.0, 80.0, 80.0], 25.0);
    let cx = (72.0 + rng.random_range(-3.0..=3.0)) * u;
    let cy = (78.0 + rng.random_range(-3.0..=3.0)) * u;
    let rx = (42.0 + rng.random_range(-4.0..=4.0)) * u;
    let ry = (52.0 + rng.random_range(-4.0..=4.0)) * u;
    let eye_dx = (18.0 + rng.random_range(-2.0..=2.0)) * u;
    let eye_y = cy - (12.0 + rng.random_range(-2.0..=2.0)) * u;
    let eye_r = (6.5 + rng.random_range(-1.0..=1.0)) * u;
    let mouth_y = cy + (26.0 + rng.random_range(-2.0..=2.0)) * u;
    let mouth_w = (15.0 + rng.random_range(-3.0..=3.0)) * u;
    let hair_drop = (16.0 + rng.random_range(-4.0..=4.0)) * u;

    let mut data = vec![0u8; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = fy / size as f64;
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = bg_top[c] * (1.0 - t) + bg_bottom[c] * t;
            }
            blend(&mut px, hair, ellipse(fx, fy, cx, cy - hair_drop, rx * 1.12, ry * 0.95));
            let face = ellipse(fx, fy, cx, cy + 4.0 * u, rx, ry * 0.9);
            let shade = 1.0 - 0.25 * ((fx - cx) / rx).powi(2);
            blend(&mut px, skin.map(|c| c * shade), face);
            for side in [-1.0, 1.0] {
                let ex = cx + side * eye_dx;
                blend(&mut px, [245.0, 245.0, 240.0], ellipse(fx, fy, ex, eye_y, eye_r * 1.6, eye_r));
                blend(&mut px, iris, ellipse(fx, fy, ex, eye_y, eye_r * 0.75, eye_r * 0.75));
                blend(&mut px, hair, ellipse(fx, fy, ex, eye_y - eye_r * 1.9, eye_r * 1.8, eye_r * 0.35));
            }
            blend(&mut px, skin.map(|c| c * 0.8), ellipse(fx, fy, cx, cy + 8.0 * u, 4.0 * u, 9.0 * u));
            blend(&mut px, lips, ellipse(fx, fy, cx, mouth_y, mouth_w, 4.5 * u));
            for c in 0..3 {
                data[c * size * size + y * size + x] = px[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Tensor::from_vec([3, size, size], data).expect("3*size*size")
}

/// Write `count` faces named `face_000.png`, ... into `dir`.
pub fn write_synthetic_set(dir: &Path, count: usize, seed: u64, size: usize) -> Result<Vec<PathBuf>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let path = dir.join(format!("face_{i:03}.png"));
        let face_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
        save_image(&path, &synthetic_face(face_seed, size))?;
        out.push(path);
    }
    Ok(out)
}
