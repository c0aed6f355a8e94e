//! Degradation operators: bicubic resampling, square occlusion masks and
//! their composition `lq = mask ⊙ downsample(gt)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cubic convolution parameter.
pub const CUBIC_A: f64 = -0.5;

/// Keys' cubic convolution kernel with `a = -0.5`.
pub fn cubic(t: f64) -> f64 {
    let a = CUBIC_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Sparse 1-D resampling matrix: for each output index, `(input index, weight)` taps.
///
/// Output sample `x` sits at input coordinate `(x + 0.5) / scale - 0.5`.
/// When shrinking, the kernel is stretched by `1 / scale` so every input
/// pixel contributes (antialiasing); weights are normalized to sum to 1 and
/// out-of-range taps are clamped to the border pixel.
pub fn resample_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_out as f64 / n_in as f64;
    let (kscale, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    (0..n_out)
        .map(|x| {
            let u = (x as f64 + 0.5) / scale - 0.5;
            let left = (u - width / 2.0).floor() as i64;
            let taps = width.ceil() as i64 + 2;
            let mut row: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in left..left + taps {
                let w = kscale * cubic(kscale * (u - j as f64));
                if w == 0.0 {
                    continue;
                }
                total += w;
                let idx = j.clamp(0, n_in as i64 - 1) as usize;
                match row.iter_mut().find(|(i, _)| *i == idx) {
                    Some(e) => e.1 += w,
                    None => row.push((idx, w)),
                }
            }
            for e in &mut row {
                e.1 /= total;
            }
            row
        })
        .collect()
}

/// Separable bicubic resize of `[..., H, W]`, width pass first, computed in f64.
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let shape = img.shape();
    if shape.len() < 2 {
        return Err(Error::shape("bicubic_resize", "rank", format!("need at least [H,W], got {shape:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("bicubic_resize: output extent must be ≥ 1, got {out_h}x{out_w}"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h == 0 || w == 0 {
        return Err(Error::shape("bicubic_resize", "H/W", "empty input"));
    }
    let planes = img.numel() / (h * w);
    let wx = resample_weights(w, out_w);
    let wy = resample_weights(h, out_h);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let mut tmp = vec![0.0f64; h * out_w];
    for p in 0..planes {
        let src = &img.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (x, taps) in wx.iter().enumerate() {
                tmp[y * out_w + x] = taps.iter().map(|&(i, c)| c * row[i].as_f64()).sum();
            }
        }
        for taps in &wy {
            for x in 0..out_w {
                let v: f64 = taps.iter().map(|&(i, c)| c * tmp[i * out_w + x]).sum();
                out.push(T::lit(v));
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = out_h;
    out_shape[r - 1] = out_w;
    Tensor::from_vec(out_shape, out)
}

/// A single square zero region on an `s × s` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskRealization {
    pub s: usize,
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl MaskRealization {
    pub fn is_hole(&self, r: usize, c: usize) -> bool {
        (self.top..self.top + self.side).contains(&r) && (self.left..self.left + self.side).contains(&c)
    }

    /// Binary `[s, s]` matrix, 0 inside the hole.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let s = self.s;
        let data = (0..s * s)
            .map(|i| if self.is_hole(i / s, i % s) { T::zero() } else { T::one() })
            .collect();
        Tensor::from_vec([s, s], data).expect("s*s elements")
    }

    /// 8-bit grayscale `[1, s, s]`: 255 kept, 0 masked.
    pub fn to_image(&self) -> Tensor<u8> {
        self.to_tensor::<f64>().map(|v| if v > 0.0 { 255 } else { 0 }).reshape([1, self.s, self.s]).expect("same numel")
    }

    pub fn zero_count(&self) -> usize {
        self.side * self.side
    }

    /// Zero every channel inside the hole of a `[C, s, s]` image.
    pub fn apply<T: Scalar>(&self, img: &mut Tensor<T>) -> Result<()> {
        let sh = img.shape();
        if sh.len() != 3 || sh[1] != self.s || sh[2] != self.s {
            return Err(Error::shape("apply_mask", "H/W", format!("mask is {0}x{0}, image {sh:?}", self.s)));
        }
        let s = self.s;
        let c = sh[0];
        let d = img.data_mut();
        for ch in 0..c {
            for r in self.top..self.top + self.side {
                let base = ch * s * s + r * s;
                d[base + self.left..base + self.left + self.side].fill(T::zero());
            }
        }
        Ok(())
    }
}

/// Hole side `round(sqrt(fraction) · s)` at a uniformly random valid position.
pub fn sample_mask<R: Rng + ?Sized>(s: usize, fraction: f64, rng: &mut R) -> Result<MaskRealization> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid!("mask fraction must be in [0, 1), got {fraction}"));
    }
    let side = (fraction.sqrt() * s as f64).round() as usize;
    if side == 0 {
        return Ok(MaskRealization { s, top: 0, left: 0, side: 0 });
    }
    let top = rng.random_range(0..=s - side);
    let left = rng.random_range(0..=s - side);
    Ok(MaskRealization { s, top, left, side })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationSpec {
    pub scale: usize,
    pub mask_fraction: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(scale: usize, mask_fraction: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            scale,
            mask_fraction,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || 128 % self.scale != 0 {
            return Err(invalid!("scale must divide 128, got {}", self.scale));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(invalid!("mask fraction must be in [0, 1), got {}", self.mask_fraction));
        }
        Ok(())
    }

    /// Independent random stream for batch item `index`.
    pub fn item_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Degrade one `[C, H, W]` image with the stream of batch item `index`.
pub fn degrade_item<T: Scalar>(img: &Tensor<T>, spec: &DegradationSpec, index: usize) -> Result<(Tensor<T>, MaskRealization)> {
    spec.validate()?;
    let sh = img.shape();
    if sh.len() != 3 || sh[1] != sh[2] {
        return Err(Error::shape("apply_degradation", "H/W", format!("expected square [C,H,W], got {sh:?}")));
    }
    if sh[1] % spec.scale != 0 {
        return Err(invalid!("extent {} not divisible by scale {}", sh[1], spec.scale));
    }
    let s = sh[1] / spec.scale;
    let mut lq = if spec.scale == 1 { img.clone() } else { bicubic_resize(img, s, s)? };
    let mask = sample_mask(s, spec.mask_fraction, &mut spec.item_rng(index))?;
    mask.apply(&mut lq)?;
    Ok((lq, mask))
}

/// Degrade an `[N, C, H, W]` batch; item `i` uses stream `i` of the spec seed.
pub fn apply_degradation<T: Scalar>(batch: &Tensor<T>, spec: &DegradationSpec) -> Result<(Tensor<T>, Vec<MaskRealization>)> {
    if batch.rank() != 4 {
        return Err(Error::shape("apply_degradation", "rank", format!("expected [N,C,H,W], got {:?}", batch.shape())));
    }
    let mut items = Vec::new();
    let mut masks = Vec::new();
    for i in 0..batch.dim(0) {
        let (lq, m) = degrade_item(&batch.index_outer(i), spec, i)?;
        items.push(lq);
        masks.push(m);
    }
    Ok((Tensor::stack_outer(&items)?, masks))
}
