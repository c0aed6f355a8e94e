//! Generator (`[pyramid block → graph layer] × 3 → upsampling head → tanh`)
//! and discriminator (six graph layers and a linear logit).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{fan_in_uniform, Bound, ParamId, ParamStore, Var};
use crate::blocks::{largest_fitting_scale, scale_fits, AdjacencyPlan, Gcpb, GcpbConfig, Rrmb, RrmbConfig, KERNEL, RELATION_SCALES};
use crate::error::{invalid, Error, Result};
use crate::patchgraph::{IgcnLayer, IgcnMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const OUTPUT_SIZE: usize = 128;

/// Model variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Relation blocks without the extractor pyramid.
    M1,
    /// Plain convolutions in place of every graph layer.
    M2,
    /// Full model.
    M3,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::M1, Ablation::M2, Ablation::M3];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::M1 => "M1",
            Ablation::M2 => "M2",
            Ablation::M3 => "M3",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Ablation::M1),
            "m2" => Ok(Ablation::M2),
            "m3" => Ok(Ablation::M3),
            _ => Err(invalid!("unknown ablation {s:?} (expected m1, m2 or m3)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub input_size: usize,
    pub extractor_widths: [usize; 3],
    pub rrmb_channels: usize,
    /// Output width of each pyramid block.
    pub fusion_channels: usize,
    /// Output width of the graph layer after each pyramid block.
    pub igcn_channels: usize,
    pub head_channels: usize,
    /// `false` replaces pyramid blocks by single relation blocks.
    pub pyramid: bool,
    /// Requested patch scale of the graph layer after each block. Coarse
    /// scales average every patch with its neighbours and blur the trunk, so
    /// the default is 1; the relation blocks still mix at 2 and 8.
    #[serde(default = "unit_scale")]
    pub trunk_scale: usize,
    pub adjacency: AdjacencyPlan,
}

fn unit_scale() -> usize {
    1
}

impl GeneratorConfig {
    pub fn new(input_size: usize) -> Self {
        Self {
            input_size,
            extractor_widths: [16, 32, 64],
            rrmb_channels: 64,
            fusion_channels: 128,
            igcn_channels: 64,
            head_channels: 64,
            pyramid: true,
            trunk_scale: 1,
            adjacency: AdjacencyPlan::default(),
        }
    }

    /// Narrow widths for desk-scale runs.
    pub fn toy(input_size: usize) -> Self {
        Self {
            input_size,
            extractor_widths: [16, 16, 16],
            rrmb_channels: 16,
            fusion_channels: 16,
            igcn_channels: 16,
            head_channels: 16,
            pyramid: true,
            trunk_scale: 1,
            adjacency: AdjacencyPlan::default(),
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.pyramid = a != Ablation::M1;
        self.adjacency.standard_conv = a == Ablation::M2;
        self
    }

    /// Number of stride-2 upsampling stages in the head.
    pub fn head_stages(&self) -> usize {
        (OUTPUT_SIZE / self.input_size).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.input_size;
        if s == 0 || OUTPUT_SIZE % s != 0 || !(OUTPUT_SIZE / s).is_power_of_two() {
            return Err(invalid!("generator input size must be 128 / 2^n, got {s}"));
        }
        if s % 4 != 0 {
            return Err(invalid!("generator input size must be divisible by 4, got {s}"));
        }
        if !RELATION_SCALES.contains(&self.trunk_scale) {
            return Err(invalid!("trunk_scale must be one of {RELATION_SCALES:?}, got {}", self.trunk_scale));
        }
        Ok(())
    }

    /// Patch scale of the graph layer following each block: `trunk_scale`,
    /// or the largest smaller scale that fits the feature map.
    pub fn igcn_scale(&self) -> usize {
        if self.adjacency.standard_conv {
            1
        } else {
            let fits: Vec<usize> = [8, 2, 1].into_iter().filter(|&k| k <= self.trunk_scale).collect();
            largest_fitting_scale(&fits, self.input_size)
        }
    }

    /// Closed-form parameter count; a `c_in → c_out` 3×3 layer with bias
    /// holds `9·c_in·c_out + c_out` values.
    pub fn parameter_count(&self) -> usize {
        let layer = |cin: usize, cout: usize| 9 * cin * cout + cout;
        let branches = |extent: usize| {
            if self.adjacency.standard_conv {
                RELATION_SCALES.len()
            } else {
                RELATION_SCALES.iter().filter(|&&k| scale_fits(k, extent)).count()
            }
        };
        let s = self.input_size;
        let r = self.rrmb_channels;
        let mut total = 0;
        for stage in 0..3 {
            let cin = if stage == 0 { 3 } else { self.igcn_channels };
            if self.pyramid {
                let e = self.extractor_widths;
                total += layer(cin, e[0]) + layer(e[0], e[1]) + layer(e[1], e[2]);
                for (i, &c) in e.iter().enumerate() {
                    total += branches(s >> i) * layer(c, r);
                }
                total += 3 * 9 * r * r;
                total += layer(3 * r, self.fusion_channels);
            } else {
                total += branches(s) * layer(cin, self.fusion_channels);
            }
            total += layer(self.fusion_channels, self.igcn_channels);
        }
        let mut c = self.igcn_channels;
        for _ in 0..self.head_stages() {
            total += layer(c, self.head_channels);
            c = self.head_channels;
        }
        total + layer(c, 3)
    }
}

#[derive(Debug, Clone)]
pub enum TrunkBlock {
    Pyramid(Gcpb),
    Relation(Rrmb),
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub cfg: GeneratorConfig,
    pub params: ParamStore<T>,
    pub blocks: Vec<(TrunkBlock, IgcnLayer)>,
    pub head: Vec<ConvLayer>,
    pub output: ConvLayer,
}

fn deconv_layer<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<ConvLayer> {
    Ok(ConvLayer {
        weight: store.insert(format!("{name}.weight"), fan_in_uniform([cin, cout, KERNEL, KERNEL], cin * 9, rng))?,
        bias: store.insert(format!("{name}.bias"), Tensor::zeros([cout]))?,
    })
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let s = cfg.input_size;
        let mut blocks = Vec::new();
        for stage in 1..=3 {
            let cin = if stage == 1 { 3 } else { cfg.igcn_channels };
            let name = format!("gen.stage{stage}");
            let block = if cfg.pyramid {
                TrunkBlock::Pyramid(Gcpb::new(
                    &mut params,
                    &format!("{name}.gcpb"),
                    &GcpbConfig {
                        in_channels: cin,
                        extent: s,
                        extractor_widths: cfg.extractor_widths,
                        rrmb_channels: cfg.rrmb_channels,
                        fusion_channels: cfg.fusion_channels,
                        fusion_stride: 1,
                        adjacency: cfg.adjacency.clone(),
                    },
                    rng,
                )?)
            } else {
                TrunkBlock::Relation(Rrmb::new(
                    &mut params,
                    &format!("{name}.rrmb"),
                    &RrmbConfig {
                        in_channels: cin,
                        out_channels: cfg.fusion_channels,
                        extent: s,
                        adjacency: cfg.adjacency.clone(),
                    },
                    rng,
                )?)
            };
            let k = cfg.igcn_scale();
            let igcn = IgcnLayer::new(
                &mut params,
                &format!("{name}.igcn"),
                cfg.fusion_channels,
                cfg.igcn_channels,
                cfg.adjacency.normalized(k)?,
                IgcnMode::Conv,
                1,
                rng,
            )?;
            blocks.push((block, igcn));
        }
        let mut head = Vec::new();
        let mut c = cfg.igcn_channels;
        for i in 0..cfg.head_stages() {
            head.push(deconv_layer(&mut params, &format!("gen.head.up{}", i + 1), c, cfg.head_channels, rng)?);
            c = cfg.head_channels;
        }
        let output = deconv_layer(&mut params, "gen.head.out", c, 3, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            blocks,
            head,
            output,
        })
    }

    /// Every graph layer in the network, for structural inspection.
    pub fn graph_layers(&self) -> Vec<&IgcnLayer> {
        let mut out = Vec::new();
        for (block, igcn) in &self.blocks {
            match block {
                TrunkBlock::Pyramid(g) => out.extend(g.rrmbs.iter().flat_map(|r| r.branches.iter())),
                TrunkBlock::Relation(r) => out.extend(r.branches.iter()),
            }
            out.push(igcn);
        }
        out
    }

    pub fn forward<'g>(&self, b: &Bound<'g, '_, T>, lq: &Var<'g, T>) -> Result<Var<'g, T>> {
        let sh = lq.shape();
        let s = self.cfg.input_size;
        if sh.len() != 4 || sh[1] != 3 || sh[2] != s || sh[3] != s {
            return Err(Error::shape("generator_forward", "input", format!("expected [N,3,{s},{s}], got {sh:?}")));
        }
        let mut h = *lq;
        for (block, igcn) in &self.blocks {
            h = match block {
                TrunkBlock::Pyramid(g) => g.forward(b, &h)?,
                TrunkBlock::Relation(r) => r.forward(b, &h)?,
            };
            h = igcn.forward(b, &h)?;
        }
        for layer in &self.head {
            h = h.deconv2d(&b.param(layer.weight), Some(&b.param(layer.bias)), 2, 1, 1)?.relu();
        }
        Ok(h.deconv2d(&b.param(self.output.weight), Some(&b.param(self.output.bias)), 1, 1, 0)?.tanh())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub input_size: usize,
    pub channels: [usize; 6],
    pub strides: [usize; 6],
    pub adjacency: AdjacencyPlan,
}

impl DiscriminatorConfig {
    pub fn new() -> Self {
        Self {
            input_size: OUTPUT_SIZE,
            channels: [16, 32, 64, 128, 256, 512],
            strides: [2, 1, 2, 1, 2, 1],
            adjacency: AdjacencyPlan::default(),
        }
    }

    pub fn toy() -> Self {
        Self {
            channels: [4, 8, 8, 16, 16, 16],
            ..Self::new()
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.adjacency.standard_conv = a == Ablation::M2;
        self
    }

    /// Patch scale and output extent of every layer.
    pub fn layer_plan(&self) -> Vec<(usize, usize)> {
        let mut extent = self.input_size;
        let mut plan = Vec::new();
        for &s in &self.strides {
            let k = if self.adjacency.standard_conv || !scale_fits(2, extent) { 1 } else { 2 };
            let patch_out = (extent / k - 1) / s + 1;
            extent = patch_out * k;
            plan.push((k, extent));
        }
        plan
    }

    pub fn features(&self) -> usize {
        let extent = self.layer_plan().last().map(|l| l.1).unwrap_or(self.input_size);
        self.channels[5] * extent * extent
    }

    pub fn parameter_count(&self) -> usize {
        let mut cin = 3;
        let mut total = 0;
        for &c in &self.channels {
            total += 9 * cin * c + c;
            cin = c;
        }
        total + self.features() + 1
    }
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub cfg: DiscriminatorConfig,
    pub params: ParamStore<T>,
    pub layers: Vec<IgcnLayer>,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if cfg.channels.contains(&0) || cfg.strides.contains(&0) || cfg.input_size == 0 {
            return Err(invalid!("discriminator widths, strides and input size must be positive"));
        }
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, ((k, _), (&c, &s))) in cfg.layer_plan().into_iter().zip(cfg.channels.iter().zip(&cfg.strides)).enumerate() {
            layers.push(IgcnLayer::new(
                &mut params,
                &format!("disc.layer{}", i + 1),
                cin,
                c,
                cfg.adjacency.normalized(k)?,
                IgcnMode::Conv,
                s,
                rng,
            )?);
            cin = c;
        }
        let d = cfg.features();
        let fc_weight = params.insert("disc.fc.weight", fan_in_uniform([d, 1], d, rng))?;
        let fc_bias = params.insert("disc.fc.bias", Tensor::zeros([1]))?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            layers,
            fc_weight,
            fc_bias,
        })
    }

    /// Raw logits `[N, 1]`.
    pub fn forward<'g>(&self, b: &Bound<'g, '_, T>, img: &Var<'g, T>) -> Result<Var<'g, T>> {
        let sh = img.shape();
        let s = self.cfg.input_size;
        if sh.len() != 4 || sh[1] != 3 || sh[2] != s || sh[3] != s {
            return Err(Error::shape("discriminator_forward", "input", format!("expected [N,3,{s},{s}], got {sh:?}")));
        }
        let mut h = *img;
        for layer in &self.layers {
            h = layer.forward(b, &h)?;
        }
        let n = sh[0];
        h.reshape([n, self.cfg.features()])?.linear(&b.param(self.fc_weight), &b.param(self.fc_bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    #[test]
    fn head_lengths() {
        assert_eq!(GeneratorConfig::toy(128).head_stages(), 0);
        assert_eq!(GeneratorConfig::toy(32).head_stages(), 2);
        assert_eq!(GeneratorConfig::toy(16).head_stages(), 3);
        assert!(GeneratorConfig::toy(24).validate().is_err());
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        for s in [16, 32] {
            for a in Ablation::ALL {
                let cfg = GeneratorConfig::toy(s).with_ablation(a);
                let g = Generator::<f32>::new(&cfg, &mut rng()).unwrap();
                assert_eq!(g.params.num_elements(), cfg.parameter_count(), "input {s} {a:?}");
            }
        }
        let d = DiscriminatorConfig::toy();
        assert_eq!(Discriminator::<f32>::new(&d, &mut rng()).unwrap().params.num_elements(), d.parameter_count());
    }

    #[test]
    fn generator_shapes_and_range() {
        for s in [16, 32] {
            let gen = Generator::<f32>::new(&GeneratorConfig::toy(s), &mut rng()).unwrap();
            let g = Graph::new();
            let b = g.bind(&gen.params, false);
            let x = g.constant(Tensor::uniform([1, 3, s, s], -1.0, 1.0, &mut rng()));
            let y = gen.forward(&b, &x).unwrap();
            assert_eq!(y.shape(), vec![1, 3, 128, 128]);
            assert!(y.value().data().iter().all(|v| v.abs() < 1.0));
            let bad = g.constant(Tensor::zeros([1, 3, s + 4, s + 4]));
            assert!(gen.forward(&b, &bad).is_err());
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_image() {
        let mut gen = Generator::<f64>::new(&GeneratorConfig::toy(32), &mut rng()).unwrap();
        for id in [gen.output.weight, gen.output.bias] {
            gen.params.get_mut(id).tensor.data_mut().fill(0.0);
        }
        let g = Graph::new();
        let b = g.bind(&gen.params, false);
        let x = g.constant(Tensor::uniform([2, 3, 32, 32], -1.0, 1.0, &mut rng()));
        assert!(gen.forward(&b, &x).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discriminator_zero_weights_give_bias() {
        let mut d = Discriminator::<f64>::new(&DiscriminatorConfig::toy(), &mut rng()).unwrap();
        d.params.zero_all();
        let bias = d.fc_bias;
        d.params.get_mut(bias).tensor.data_mut()[0] = 0.25;
        let g = Graph::new();
        let b = g.bind(&d.params, false);
        let x = g.constant(Tensor::uniform([3, 3, 128, 128], -1.0, 1.0, &mut rng()));
        let y = d.forward(&b, &x).unwrap();
        assert_eq!(y.shape(), vec![3, 1]);
        assert!(y.value().data().iter().all(|&v| v == 0.25));
        assert!(d.forward(&b, &g.constant(Tensor::zeros([1, 3, 64, 64]))).is_err());
    }

    #[test]
    fn m2_has_only_unit_scale_identity_layers() {
        let gen = Generator::<f32>::new(&GeneratorConfig::toy(32).with_ablation(Ablation::M2), &mut rng()).unwrap();
        let d = Discriminator::<f32>::new(&DiscriminatorConfig::toy().with_ablation(Ablation::M2), &mut rng()).unwrap();
        let layers: Vec<_> = gen.graph_layers().into_iter().chain(d.layers.iter()).collect();
        assert!(!layers.is_empty());
        assert!(layers.iter().all(|l| l.k() == 1 && l.adjacency.is_identity()));
        let full = Generator::<f32>::new(&GeneratorConfig::toy(32), &mut rng()).unwrap();
        assert!(full.graph_layers().iter().any(|l| l.k() == 8));
    }

    #[test]
    fn m1_has_no_pyramid() {
        let gen = Generator::<f32>::new(&GeneratorConfig::toy(32).with_ablation(Ablation::M1), &mut rng()).unwrap();
        assert!(gen.blocks.iter().all(|(b, _)| matches!(b, TrunkBlock::Relation(_))));
        assert!(gen.params.iter().all(|p| !p.name.contains("extractor")));
    }
}
