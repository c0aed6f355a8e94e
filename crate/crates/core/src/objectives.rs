//! Pixel, perceptual and adversarial losses and their weighted total.

use crate::backend::{Graph, Var};
use crate::blocks::PerceptualExtractor;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Trade-off weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub pixel: f64,
    pub adversarial: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pixel: 1.0,
            adversarial: 0.01,
            perceptual: 0.0005,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pixel", self.pixel), ("adversarial", self.adversarial), ("perceptual", self.perceptual)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid!("loss weight {name} must be finite and ≥ 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// The three generator loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossParts<V> {
    pub pixel: V,
    pub adversarial: V,
    pub perceptual: V,
}

/// Mean squared error between output and ground truth.
pub fn pixel_loss<'g, T: Scalar>(out: &Var<'g, T>, gt: &Var<'g, T>) -> Result<Var<'g, T>> {
    out.mse(gt)
}

/// MSE at extractor tap (2,2) plus MSE at tap (5,4); the extractor stays frozen.
pub fn perceptual_loss<'g, T: Scalar>(
    graph: &'g Graph<T>,
    out: &Var<'g, T>,
    gt: &Var<'g, T>,
    extractor: &dyn PerceptualExtractor<T>,
) -> Result<Var<'g, T>> {
    let (o_lo, o_hi) = extractor.perceptual_taps(graph, out)?;
    let (g_lo, g_hi) = extractor.perceptual_taps(graph, &gt.detach())?;
    o_lo.mse(&g_lo)?.add(&o_hi.mse(&g_hi)?)
}

/// `BCE(real → 1) + BCE(fake → 0)`, each averaged over the batch.
pub fn discriminator_loss<'g, T: Scalar>(real_logits: &Var<'g, T>, fake_logits: &Var<'g, T>) -> Result<Var<'g, T>> {
    real_logits.bce_with_logits(T::one())?.add(&fake_logits.bce_with_logits(T::zero())?)
}

/// Non-saturating generator term `BCE(fake → 1)`.
pub fn generator_adversarial_loss<'g, T: Scalar>(fake_logits: &Var<'g, T>) -> Result<Var<'g, T>> {
    fake_logits.bce_with_logits(T::one())
}

/// `(loss_D, loss_G)` from one pair of logit batches.
pub fn adversarial_losses<'g, T: Scalar>(real_logits: &Var<'g, T>, fake_logits: &Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
    Ok((discriminator_loss(real_logits, fake_logits)?, generator_adversarial_loss(fake_logits)?))
}

/// `λ1·pixel + λ2·adversarial + λ3·perceptual`.
pub fn total_generator_loss<'g, T: Scalar>(parts: &LossParts<Var<'g, T>>, w: &LossWeights) -> Result<Var<'g, T>> {
    w.validate()?;
    for (name, v) in [("pixel", parts.pixel), ("adversarial", parts.adversarial), ("perceptual", parts.perceptual)] {
        if v.value().numel() != 1 {
            return Err(Error::shape("total_generator_loss", name, format!("expected a scalar, got {:?}", v.shape())));
        }
        if !v.item().is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                name: name.to_string(),
            });
        }
    }
    parts
        .pixel
        .scale(T::lit(w.pixel))
        .add(&parts.adversarial.scale(T::lit(w.adversarial)))?
        .add(&parts.perceptual.scale(T::lit(w.perceptual)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{gradient_check, ParamStore};
    use crate::blocks::{IdentityTaps, PerceptualNet};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar<'g>(g: &'g Graph<f64>, v: f64) -> Var<'g, f64> {
        g.constant(Tensor::scalar(v))
    }

    #[test]
    fn default_weights() {
        let g = Graph::new();
        let parts = LossParts {
            pixel: scalar(&g, 1.0),
            adversarial: scalar(&g, 1.0),
            perceptual: scalar(&g, 1.0),
        };
        let t = total_generator_loss(&parts, &LossWeights::default()).unwrap().item();
        assert!((t - 1.0105).abs() < 1e-15);
        let zero = LossWeights {
            pixel: 0.0,
            adversarial: 0.0,
            perceptual: 0.0,
        };
        assert_eq!(total_generator_loss(&parts, &zero).unwrap().item(), 0.0);
        let neg = LossWeights { pixel: -1.0, ..zero };
        assert!(total_generator_loss(&parts, &neg).is_err());
    }

    #[test]
    fn total_is_linear_in_each_part() {
        let g = Graph::new();
        let w = LossWeights::default();
        let eval = |p: f64, a: f64, c: f64| {
            let parts = LossParts {
                pixel: scalar(&g, p),
                adversarial: scalar(&g, a),
                perceptual: scalar(&g, c),
            };
            total_generator_loss(&parts, &w).unwrap().item()
        };
        let base = eval(0.3, 0.7, 2.0);
        assert!((eval(1.3, 0.7, 2.0) - base - w.pixel).abs() < 1e-12);
        assert!((eval(0.3, 1.7, 2.0) - base - w.adversarial).abs() < 1e-12);
        assert!((eval(0.3, 0.7, 3.0) - base - w.perceptual).abs() < 1e-12);
    }

    #[test]
    fn pixel_loss_values() {
        let g = Graph::new();
        let zeros = g.constant(Tensor::<f64>::zeros([2, 3, 4, 4]));
        let ones = g.constant(Tensor::<f64>::ones([2, 3, 4, 4]));
        assert_eq!(pixel_loss(&zeros, &zeros).unwrap().item(), 0.0);
        assert_eq!(pixel_loss(&zeros, &ones).unwrap().item(), 1.0);
        let other = g.constant(Tensor::<f64>::zeros([2, 3, 4, 5]));
        assert!(pixel_loss(&zeros, &other).is_err());
    }

    #[test]
    fn pixel_loss_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::uniform([2, 3, 5, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform([2, 3, 5, 5], -1.0, 1.0, &mut rng);
        let mut acc = 0.0;
        for i in 0..a.numel() {
            acc += (a.data()[i] - b.data()[i]).powi(2);
        }
        let g = Graph::new();
        let got = pixel_loss(&g.constant(a.clone()), &g.constant(b.clone())).unwrap().item();
        assert!((got - acc / a.numel() as f64).abs() < 1e-14);
    }

    #[test]
    fn identity_taps_give_twice_pixel_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::new();
        let a = g.constant(Tensor::<f64>::uniform([1, 3, 8, 8], -1.0, 1.0, &mut rng));
        let b = g.constant(Tensor::<f64>::uniform([1, 3, 8, 8], -1.0, 1.0, &mut rng));
        let per = perceptual_loss(&g, &a, &b, &IdentityTaps).unwrap().item();
        let pix = pixel_loss(&a, &b).unwrap().item();
        assert!((per - 2.0 * pix).abs() < 1e-15);
        assert_eq!(perceptual_loss(&g, &a, &a, &IdentityTaps).unwrap().item(), 0.0);
    }

    #[test]
    fn adversarial_at_zero_logits() {
        let g = Graph::new();
        let z = g.constant(Tensor::<f64>::zeros([4, 1]));
        let (d, gl) = adversarial_losses(&z, &z).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((d.item() - 2.0 * ln2).abs() < 1e-15);
        assert!((gl.item() - ln2).abs() < 1e-15);
    }

    #[test]
    fn confident_discriminator_has_vanishing_loss() {
        let g = Graph::new();
        let real = g.constant(Tensor::<f64>::full([3, 1], 40.0));
        let fake = g.constant(Tensor::<f64>::full([3, 1], -40.0));
        assert!(discriminator_loss(&real, &fake).unwrap().item() < 1e-16);
        let inf = g.constant(Tensor::<f64>::full([1, 1], f64::INFINITY));
        assert!(adversarial_losses(&inf, &fake).is_err());
    }

    #[test]
    fn adversarial_matches_scalar_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = Tensor::<f64>::uniform([5, 1], -6.0, 6.0, &mut rng);
        let f = Tensor::<f64>::uniform([5, 1], -6.0, 6.0, &mut rng);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let bce = |p: f64, y: f64| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        let mean = |t: &Tensor<f64>, y: f64| t.data().iter().map(|&z| bce(sig(z), y)).sum::<f64>() / 5.0;
        let g = Graph::new();
        let (d, gl) = adversarial_losses(&g.constant(r.clone()), &g.constant(f.clone())).unwrap();
        assert!((d.item() - (mean(&r, 1.0) + mean(&f, 0.0))).abs() < 1e-12);
        assert!((gl.item() - mean(&f, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_wrt_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = Tensor::<f64>::uniform([1, 3, 32, 32], -1.0, 1.0, &mut rng);
        let vgg = PerceptualNet::<f64>::random([2, 2, 2, 2, 2], &mut rng).unwrap();
        let mut store = ParamStore::new();
        let out = store.insert("out", Tensor::uniform([1, 3, 32, 32], -1.0, 1.0, &mut rng)).unwrap();
        let report = gradient_check(
            &mut store,
            |b| {
                let g = b.graph();
                let o = b.param(out);
                let t = g.constant(gt.clone());
                let pix = pixel_loss(&o, &t)?;
                let per = perceptual_loss(g, &o, &t, &vgg)?;
                let logits = o.reshape([3, 1024])?.mean().reshape([1, 1])?;
                let (ld, lg) = adversarial_losses(&logits, &logits)?;
                pix.add(&per)?.add(&ld)?.add(&lg)
            },
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
