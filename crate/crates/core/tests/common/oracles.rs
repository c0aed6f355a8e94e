//! Direct-loop reference implementations, written without any library op.
//! Shared by the core integration tests and the acceptance suite.

#![allow(dead_code)]

use facegraph::patchgraph::NormalizedAdjacency;
use facegraph::Tensor;

/// `[N, C, H, W]` cross-correlation with zero padding.
pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[oi]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * wdat[((oi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::from_vec([n, o, oh, ow], out).unwrap()
}

/// Transposed convolution by scattering every input pixel; weight `[C_in, C_out, kh, kw]`.
pub fn deconv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: usize, out_pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, kh, kw) = (w.dim(1), w.dim(2), w.dim(3));
    let oh = (h - 1) * stride + kh + out_pad - 2 * pad;
    let ow = (wd - 1) * stride + kw + out_pad - 2 * pad;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.data()[((ni * c + ci) * h + y) * wd + xx];
                    for oi in 0..o {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let ty = (y * stride + ky) as isize - pad as isize;
                                let tx = (xx * stride + kx) as isize - pad as isize;
                                if ty < 0 || tx < 0 || ty >= oh as isize || tx >= ow as isize {
                                    continue;
                                }
                                out[((ni * o + oi) * oh + ty as usize) * ow + tx as usize] +=
                                    v * w.data()[((ci * o + oi) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = b {
        for ni in 0..n {
            for oi in 0..o {
                for v in &mut out[(ni * o + oi) * oh * ow..][..oh * ow] {
                    *v += b[oi];
                }
            }
        }
    }
    Tensor::from_vec([n, o, oh, ow], out).unwrap()
}

/// Split into `k×k` patches, convolve each (padding 1), ReLU, mix with the
/// adjacency weights, write back in place.
pub fn igcn(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], adj: &NormalizedAdjacency, stride: usize) -> Tensor<f64> {
    let k = adj.k();
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (ph, pw) = (h / k, wd / k);
    let mut acts = Vec::new();
    for r in 0..k {
        for cc in 0..k {
            let mut patch = vec![0.0; n * c * ph * pw];
            for plane in 0..n * c {
                for y in 0..ph {
                    for xx in 0..pw {
                        patch[(plane * ph + y) * pw + xx] = x.data()[(plane * h + r * ph + y) * wd + cc * pw + xx];
                    }
                }
            }
            let p = Tensor::from_vec([n, c, ph, pw], patch).unwrap();
            acts.push(conv2d(&p, w, Some(b), stride, 1).map(|v| v.max(0.0)));
        }
    }
    let (o, oph, opw) = (acts[0].dim(1), acts[0].dim(2), acts[0].dim(3));
    let (oh, ow) = (oph * k, opw * k);
    let mut out = vec![0.0; n * o * oh * ow];
    for i in 0..k * k {
        let (r, cc) = (i / k, i % k);
        for plane in 0..n * o {
            for y in 0..oph {
                for xx in 0..opw {
                    let mut acc = 0.0;
                    for (j, a) in acts.iter().enumerate() {
                        acc += adj.weight(i, j) * a.data()[(plane * oph + y) * opw + xx];
                    }
                    out[(plane * oh + r * oph + y) * ow + cc * opw + xx] = acc;
                }
            }
        }
    }
    Tensor::from_vec([n, o, oh, ow], out).unwrap()
}

pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] - b[i]) * (a[i] - b[i]);
    }
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Mean SSIM over every 11×11 window fully inside the luma plane, each
/// window statistic summed directly from a 2-D Gaussian (σ = 1.5).
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, range: f64) -> f64 {
    let luma = |t: &Tensor<f64>| -> (Vec<f64>, usize, usize) {
        let (h, w) = (t.dim(1), t.dim(2));
        let d = t.data();
        let n = h * w;
        if t.dim(0) == 1 {
            return (d.to_vec(), h, w);
        }
        ((0..n).map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]).collect(), h, w)
    };
    let (x, h, w) = luma(a);
    let (y, _, _) = luma(b);
    let mut g = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for r in 0..=h - 11 {
        for c in 0..=w - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wgt = g[i][j] / total;
                    mx += wgt * x[(r + i) * w + c + j];
                    my += wgt * y[(r + i) * w + c + j];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wgt = g[i][j] / total;
                    let (dx, dy) = (x[(r + i) * w + c + j] - mx, y[(r + i) * w + c + j] - my);
                    vx += wgt * dx * dx;
                    vy += wgt * dy * dy;
                    cov += wgt * dx * dy;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}
