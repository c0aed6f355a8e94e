//! Multi-scale relation blocks, the VGG-style feature extractor and the
//! pyramid fusion block that combines them.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{concat_channels, fan_in_uniform, sum_all, Bound, Graph, ParamId, ParamStore, Var};
use crate::data::container::{self, AnyTensor};
use crate::error::{invalid, Error, Result};
use crate::patchgraph::{build_adjacency, normalize_adjacency, AdjacencyScheme, IgcnLayer, IgcnMode, NormalizedAdjacency};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Patch scales of a relation block, coarse to fine.
pub const RELATION_SCALES: [usize; 3] = [1, 2, 8];

/// Kernel extent used by every convolution in the networks.
pub const KERNEL: usize = 3;

/// Adjacency scheme used for one patch scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyOverride {
    pub k: usize,
    pub scheme: AdjacencyScheme,
}

/// Which adjacency each patch scale uses, and whether graph mixing is enabled at all.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdjacencyPlan {
    /// Collapse every graph layer to `k = 1` with unit adjacency (plain convolution).
    pub standard_conv: bool,
    pub overrides: Vec<AdjacencyOverride>,
}

impl AdjacencyPlan {
    pub fn standard() -> Self {
        Self {
            standard_conv: true,
            overrides: Vec::new(),
        }
    }

    pub fn scheme(&self, k: usize) -> AdjacencyScheme {
        self.overrides
            .iter()
            .find(|o| o.k == k)
            .map(|o| o.scheme.clone())
            .unwrap_or_else(|| AdjacencyScheme::default_for(k))
    }

    /// Patch scale actually used for a requested `k` on an `extent × extent` map.
    pub fn effective_scale(&self, k: usize, extent: usize) -> Option<usize> {
        if self.standard_conv {
            return Some(1);
        }
        scale_fits(k, extent).then_some(k)
    }

    pub fn normalized(&self, k: usize) -> Result<NormalizedAdjacency> {
        let scheme = if self.standard_conv { AdjacencyScheme::Identity } else { self.scheme(k) };
        Ok(normalize_adjacency(&build_adjacency(k, &scheme)?))
    }
}

/// A `k×k` split of an `extent`-sized map yields patches at least as large as the kernel.
pub fn scale_fits(k: usize, extent: usize) -> bool {
    k == 1 || (extent % k == 0 && extent / k >= KERNEL)
}

/// Largest of `candidates` that fits `extent`, falling back to 1.
pub fn largest_fitting_scale(candidates: &[usize], extent: usize) -> usize {
    candidates
        .iter()
        .copied()
        .filter(|&k| scale_fits(k, extent))
        .max()
        .unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrmbConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial extent of the (square) input map.
    pub extent: usize,
    pub adjacency: AdjacencyPlan,
}

/// Region relation block: pixelwise sum of graph convolutions at patch
/// scales 1×1 (image level), 2×2 (object level) and 8×8 (patch level).
///
/// Scales whose patches would be smaller than the kernel are skipped.
#[derive(Debug, Clone)]
pub struct Rrmb {
    pub branches: Vec<IgcnLayer>,
    pub extent: usize,
}

impl Rrmb {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &RrmbConfig, rng: &mut R) -> Result<Self> {
        let mut branches = Vec::new();
        for &k in &RELATION_SCALES {
            let Some(eff) = cfg.adjacency.effective_scale(k, cfg.extent) else { continue };
            branches.push(IgcnLayer::new(
                store,
                &format!("{name}.k{k}"),
                cfg.in_channels,
                cfg.out_channels,
                cfg.adjacency.normalized(eff)?,
                IgcnMode::Conv,
                1,
                rng,
            )?);
        }
        Ok(Self {
            branches,
            extent: cfg.extent,
        })
    }

    pub fn scales(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.k()).collect()
    }

    pub fn forward<'g, T: Scalar>(&self, b: &Bound<'g, '_, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[2] != self.extent || shape[3] != self.extent {
            return Err(Error::shape(
                "rrmb_forward",
                "H/W",
                format!("block built for {0}x{0}, got {shape:?}", self.extent),
            ));
        }
        let outs = self
            .branches
            .iter()
            .map(|br| br.forward(b, x))
            .collect::<Result<Vec<_>>>()?;
        sum_all(&outs)
    }
}

/// A 3×3 convolution with bias, followed by ReLU.
#[derive(Debug, Clone)]
pub struct ConvRelu {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvRelu {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: store.insert(format!("{name}.weight"), fan_in_uniform([cout, cin, KERNEL, KERNEL], cin * KERNEL * KERNEL, rng))?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros([cout]))?,
        })
    }

    fn forward<'g, T: Scalar>(&self, b: &Bound<'g, '_, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.conv2d(&b.param(self.weight), Some(&b.param(self.bias)), 1, KERNEL / 2)?.relu())
    }
}

/// Multi-level feature source feeding the relation blocks of a pyramid block.
pub trait FeatureExtractor<T: Scalar> {
    /// Outputs of the first three blocks at full, half and quarter resolution.
    fn pyramid<'g>(&self, b: &Bound<'g, '_, T>, x: &Var<'g, T>) -> Result<[Var<'g, T>; 3]>;

    fn pyramid_channels(&self) -> [usize; 3];
}

/// Source of the two feature maps compared by the perceptual loss: the
/// 2nd convolution of block 2 and the 4th convolution of block 5.
pub trait PerceptualExtractor<T: Scalar> {
    fn perceptual_taps<'g>(&self, graph: &'g Graph<T>, x: &Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)>;
}

/// VGG-style stack: blocks of 3×3 conv+ReLU separated by 2×2 max pooling.
#[derive(Debug, Clone)]
pub struct MiniVgg {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<Vec<ConvRelu>>,
}

impl MiniVgg {
    /// `convs[i]` conv layers of width `widths[i]` in block `i`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        widths: &[usize],
        convs: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() != convs.len() || widths.is_empty() {
            return Err(invalid!("extractor: {} widths for {} blocks", widths.len(), convs.len()));
        }
        let mut blocks = Vec::new();
        let mut cin = in_channels;
        for (bi, (&w, &n)) in widths.iter().zip(convs).enumerate() {
            let mut layers = Vec::new();
            for ci in 0..n {
                layers.push(ConvRelu::new(store, &format!("{name}.block{}.conv{}", bi + 1, ci + 1), cin, w, rng)?);
                cin = w;
            }
            blocks.push(layers);
        }
        Ok(Self {
            in_channels,
            widths: widths.to_vec(),
            blocks,
        })
    }

    /// Feature maps after every conv layer, grouped by block.
    fn run<'g, T: Scalar>(&self, b: &Bound<'g, '_, T>, x: &Var<'g, T>, upto_block: usize) -> Result<Vec<Vec<Var<'g, T>>>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape(
                "extract_features",
                "C (channels)",
                format!("extractor expects {} channels, got {shape:?}", self.in_channels),
            ));
        }
        let mut h = *x;
        let mut out = Vec::new();
        for (bi, block) in self.blocks.iter().take(upto_block).enumerate() {
            if bi > 0 {
                h = h.max_pool2()?;
            }
            let mut maps = Vec::new();
            for layer in block {
                h = layer.forward(b, &h)?;
                maps.push(h);
            }
            out.push(maps);
        }
        Ok(out)
    }
}

impl<T: Scalar> FeatureExtractor<T> for MiniVgg {
    fn pyramid<'g>(&self, b: &Bound<'g, '_, T>, x: &Var<'g, T>) -> Result<[Var<'g, T>; 3]> {
        if self.blocks.len() < 3 {
            return Err(invalid!("extractor has {} blocks, pyramid needs 3", self.blocks.len()));
        }
        let maps = self.run(b, x, 3)?;
        let last = |i: usize| *maps[i].last().expect("non-empty block");
        Ok([last(0), last(1), last(2)])
    }

    fn pyramid_channels(&self) -> [usize; 3] {
        [self.widths[0], self.widths[1], self.widths[2]]
    }
}

/// Conv-layer counts of the five VGG-19 blocks.
pub const VGG19_BLOCK_CONVS: [usize; 5] = [2, 2, 4, 4, 4];

/// Frozen perceptual feature network with its own parameters.
#[derive(Debug, Clone)]
pub struct PerceptualNet<T> {
    pub params: ParamStore<T>,
    pub net: MiniVgg,
}

impl<T: Scalar> PerceptualNet<T> {
    /// Randomly initialized five-block network with VGG-19 block depths.
    pub fn random<R: Rng + ?Sized>(widths: [usize; 5], rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = MiniVgg::new(&mut params, "vgg", 3, &widths, &VGG19_BLOCK_CONVS, rng)?;
        for p in params.iter_mut() {
            p.trainable = false;
        }
        Ok(Self { params, net })
    }

    /// Load pretrained weights (`vgg.blockI.convJ.{weight,bias}`) from a container.
    pub fn load(path: &Path) -> Result<Self> {
        let entries = container::load_container(path)?;
        let mut widths = [0usize; 5];
        for (bi, w) in widths.iter_mut().enumerate() {
            let name = format!("vgg.block{}.conv1.weight", bi + 1);
            let t = entries
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| invalid!("{}: missing {name}", path.display()))?;
            *w = t.1.shape()[0];
        }
        let mut net = Self::random(widths, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let values = entries
            .into_iter()
            .filter(|(n, _)| n.starts_with("vgg."))
            .map(|(n, t)| Ok((n, t.to_float::<T>()?)))
            .collect::<Result<Vec<_>>>()?;
        net.params.load_values(values.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, AnyTensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), AnyTensor::from_float(&p.tensor)))
            .collect();
        container::save_container(path, &entries)?;
        Ok(())
    }
}

impl<T: Scalar> PerceptualExtractor<T> for PerceptualNet<T> {
    fn perceptual_taps<'g>(&self, graph: &'g Graph<T>, x: &Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let b = graph.bind(&self.params, false);
        let maps = self.net.run(&b, x, 5)?;
        let tap = |block: usize, conv: usize| {
            maps.get(block - 1)
                .and_then(|m| m.get(conv - 1))
                .copied()
                .ok_or_else(|| invalid!("perceptual extractor lacks tap ({block},{conv})"))
        };
        Ok((tap(2, 2)?, tap(5, 4)?))
    }
}

/// Taps equal to the input; collapses the perceptual loss onto the pixel loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTaps;

impl<T: Scalar> PerceptualExtractor<T> for IdentityTaps {
    fn perceptual_taps<'g>(&self, _graph: &'g Graph<T>, x: &Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        Ok((*x, *x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcpbConfig {
    pub in_channels: usize,
    pub extent: usize,
    pub extractor_widths: [usize; 3],
    pub rrmb_channels: usize,
    pub fusion_channels: usize,
    pub fusion_stride: usize,
    pub adjacency: AdjacencyPlan,
}

impl GcpbConfig {
    pub fn concat_channels(&self) -> usize {
        3 * self.rrmb_channels
    }
}

/// Graph convolution pyramid block.
///
/// Extractor taps `f1..f3` (full, half, quarter resolution) each go through
/// their own relation block; `f2` and `f3` are brought back to full
/// resolution by stride-2 transposed convolutions (one and two of them),
/// everything is channel-concatenated and fused by a final transposed
/// convolution.
#[derive(Debug, Clone)]
pub struct Gcpb {
    pub extractor: MiniVgg,
    pub rrmbs: [Rrmb; 3],
    pub up_half: ParamId,
    pub up_quarter: [ParamId; 2],
    pub fusion_weight: ParamId,
    pub fusion_bias: ParamId,
    pub cfg: GcpbConfig,
}

impl Gcpb {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &GcpbConfig, rng: &mut R) -> Result<Self> {
        if cfg.extent % 4 != 0 {
            return Err(invalid!("pyramid block extent {} must be divisible by 4", cfg.extent));
        }
        let extractor = MiniVgg::new(store, &format!("{name}.extractor"), cfg.in_channels, &cfg.extractor_widths, &[1, 1, 1], rng)?;
        let r = cfg.rrmb_channels;
        let mut rrmbs = Vec::new();
        for (i, &c) in cfg.extractor_widths.iter().enumerate() {
            rrmbs.push(Rrmb::new(
                store,
                &format!("{name}.rrmb{}", i + 1),
                &RrmbConfig {
                    in_channels: c,
                    out_channels: r,
                    extent: cfg.extent >> i,
                    adjacency: cfg.adjacency.clone(),
                },
                rng,
            )?);
        }
        let up = |store: &mut ParamStore<T>, n: String, rng: &mut R| store.insert(n, fan_in_uniform([r, r, KERNEL, KERNEL], r * 9, rng));
        let up_half = up(store, format!("{name}.up2.weight"), rng)?;
        let up_quarter = [up(store, format!("{name}.up4a.weight"), rng)?, up(store, format!("{name}.up4b.weight"), rng)?];
        let cat = cfg.concat_channels();
        let fusion_weight = store.insert(
            format!("{name}.fusion.weight"),
            fan_in_uniform([cat, cfg.fusion_channels, KERNEL, KERNEL], cat * 9, rng),
        )?;
        let fusion_bias = store.insert(format!("{name}.fusion.bias"), Tensor::zeros([cfg.fusion_channels]))?;
        let rrmbs: [Rrmb; 3] = rrmbs.try_into().map_err(|_| invalid!("three relation blocks"))?;
        Ok(Self {
            extractor,
            rrmbs,
            up_half,
            up_quarter,
            fusion_weight,
            fusion_bias,
            cfg: cfg.clone(),
        })
    }

    pub fn output_extent(&self) -> usize {
        self.cfg.extent * self.cfg.fusion_stride
    }

    pub fn forward<'g, T: Scalar>(&self, b: &Bound<'g, '_, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let [f1, f2, f3] = self.extractor.pyramid(b, x)?;
        let r1 = self.rrmbs[0].forward(b, &f1)?;
        let r2 = self.rrmbs[1].forward(b, &f2)?;
        let r3 = self.rrmbs[2].forward(b, &f3)?;
        let up2 = |v: &Var<'g, T>, w: ParamId| v.deconv2d(&b.param(w), None, 2, 1, 1);
        let u2 = up2(&r2, self.up_half)?;
        let u3 = up2(&up2(&r3, self.up_quarter[0])?, self.up_quarter[1])?;
        let cat = concat_channels(&[r1, u2, u3])?;
        let s = self.cfg.fusion_stride;
        cat.deconv2d(&b.param(self.fusion_weight), Some(&b.param(self.fusion_bias)), s, 1, s - 1)
    }

    /// Replace extractor weights with pretrained values and freeze them.
    pub fn load_pretrained_extractor<T: Scalar>(&self, store: &mut ParamStore<T>, name: &str, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(invalid!("pretrained extractor weights not found at {}", path.display()));
        }
        let entries = container::load_container(path)?;
        let prefix = format!("{name}.extractor");
        let values = entries
            .into_iter()
            .map(|(n, t)| Ok((format!("{prefix}.{n}"), t.to_float::<T>()?)))
            .collect::<Result<Vec<_>>>()?;
        store.load_values(values.iter().map(|(n, t)| (n.as_str(), t)))?;
        store.set_trainable_prefix(&prefix, false);
        Ok(())
    }
}
