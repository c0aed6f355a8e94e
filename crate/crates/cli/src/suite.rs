//! Finite-difference gradient checks of every trainable component on small shapes.

use facegraph::backend::{gradient_check, GradCheckReport, ParamStore};
use facegraph::blocks::{AdjacencyPlan, Gcpb, GcpbConfig, PerceptualNet};
use facegraph::networks::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use facegraph::objectives::{discriminator_loss, generator_adversarial_loss, perceptual_loss, pixel_loss};
use facegraph::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}

/// One pyramid block on a 24×24 map, the smallest extent with all three relation scales.
pub fn gcpb() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let cfg = GcpbConfig {
        in_channels: 2,
        extent: 24,
        extractor_widths: [2, 2, 2],
        rrmb_channels: 2,
        fusion_channels: 2,
        fusion_stride: 1,
        adjacency: AdjacencyPlan::default(),
    };
    let g = Gcpb::new(&mut store, "gcpb", &cfg, &mut rng(1))?;
    for p in store.iter_mut().filter(|p| p.name.ends_with(".bias")) {
        p.tensor = Tensor::uniform(p.tensor.shape().to_vec(), 0.0, 0.2, &mut rng(2));
    }
    let x = uniform(&[1, 2, 24, 24], 3);
    gradient_check(&mut store, |b| Ok(g.forward(b, &b.graph().constant(x.clone()))?.tanh().mean()), EPS, TOL)
}

/// Generator upsampling head and output layer, with the trunk frozen.
pub fn generator_head() -> Result<GradCheckReport> {
    let cfg = GeneratorConfig {
        extractor_widths: [2, 2, 2],
        rrmb_channels: 2,
        fusion_channels: 2,
        igcn_channels: 2,
        head_channels: 2,
        ..GeneratorConfig::toy(32)
    };
    let mut gen = Generator::<f64>::new(&cfg, &mut rng(4))?;
    gen.params.set_trainable_prefix("gen.stage", false);
    for p in gen.params.iter_mut().filter(|p| p.name.starts_with("gen.head") && p.name.ends_with(".bias")) {
        p.tensor = Tensor::full(p.tensor.shape().to_vec(), 0.05);
    }
    let x = uniform(&[1, 3, 32, 32], 5);
    let target = uniform(&[1, 3, 128, 128], 6).map(|v| v * 0.5);
    let net = gen.clone();
    gradient_check(
        &mut gen.params,
        |b| net.forward(b, &b.graph().constant(x.clone()))?.mse(&b.graph().constant(target.clone())),
        EPS,
        TOL,
    )
}

/// Discriminator on 16×16 inputs.
pub fn discriminator() -> Result<GradCheckReport> {
    let cfg = DiscriminatorConfig {
        input_size: 16,
        channels: [2; 6],
        ..DiscriminatorConfig::toy()
    };
    let mut d = Discriminator::<f64>::new(&cfg, &mut rng(7))?;
    let x = uniform(&[2, 3, 16, 16], 8);
    let net = d.clone();
    gradient_check(&mut d.params, |b| net.forward(b, &b.graph().constant(x.clone()))?.bce_with_logits(1.0), EPS, TOL)
}

/// Pixel loss with respect to the restored image.
pub fn pixel() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let out = store.insert("restored", uniform(&[2, 3, 4, 4], 9))?;
    let gt = uniform(&[2, 3, 4, 4], 10);
    gradient_check(&mut store, |b| pixel_loss(&b.param(out), &b.graph().constant(gt.clone())), EPS, TOL)
}

/// Perceptual loss with respect to the restored image, through a frozen extractor.
pub fn perceptual() -> Result<GradCheckReport> {
    let net = PerceptualNet::<f64>::random([2, 2, 2, 2, 2], &mut rng(11))?;
    let mut store = ParamStore::new();
    let out = store.insert("restored", uniform(&[1, 3, 16, 16], 12))?;
    let gt = uniform(&[1, 3, 16, 16], 13);
    gradient_check(&mut store, |b| perceptual_loss(b.graph(), &b.param(out), &b.graph().constant(gt.clone()), &net), EPS, TOL)
}

/// Discriminator and generator adversarial terms with respect to the logits.
pub fn adversarial() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let real = store.insert("real_logits", uniform(&[4, 1], 14).map(|v| 3.0 * v))?;
    let fake = store.insert("fake_logits", uniform(&[4, 1], 15).map(|v| 3.0 * v))?;
    gradient_check(
        &mut store,
        |b| discriminator_loss(&b.param(real), &b.param(fake))?.add(&generator_adversarial_loss(&b.param(fake))?.scale(0.5)),
        EPS,
        TOL,
    )
}

/// Every component check, in a fixed order.
pub fn gradient_suite() -> Vec<(&'static str, Result<GradCheckReport>)> {
    vec![
        ("gcpb", gcpb()),
        ("generator_head", generator_head()),
        ("discriminator", discriminator()),
        ("loss_pixel", pixel()),
        ("loss_perceptual", perceptual()),
        ("loss_adversarial", adversarial()),
    ]
}
