//! Patch graphs over feature maps and the graph-convolution layer built on them.
//!
//! A feature map `[N, C, H, W]` is cut into a `k×k` grid of patches, numbered
//! row-major (`p = r·k + c`). Each patch is convolved with one shared weight
//! set, passed through ReLU, mixed with its neighbours through a fixed
//! normalized adjacency and written back to its original position.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::backend::{fan_in_uniform, Bound, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of a `k×k` patch decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub k: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, k: usize) -> Result<Self> {
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(
                "split_patches",
                "H/W",
                format!("H={h}, W={w} must both be divisible by k={k}"),
            ));
        }
        Ok(Self {
            k,
            patch_h: h / k,
            patch_w: w / k,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.k * self.k
    }

    /// Row-major order ID of the patch at grid cell `(row, col)`.
    pub fn order_id(&self, row: usize, col: usize) -> usize {
        row * self.k + col
    }
}

fn split_data<T: Scalar>(src: &[T], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (ph, pw) = (h / k, w / k);
    let mut out = Vec::with_capacity(src.len());
    for r in 0..k {
        for cc in 0..k {
            for plane in 0..n * c {
                let base = plane * h * w;
                for y in 0..ph {
                    let row = base + (r * ph + y) * w + cc * pw;
                    out.extend_from_slice(&src[row..row + pw]);
                }
            }
        }
    }
    out
}

fn merge_data<T: Scalar>(src: &[T], n: usize, c: usize, ph: usize, pw: usize, k: usize) -> Vec<T> {
    let (h, w) = (ph * k, pw * k);
    let mut out = vec![T::zero(); src.len()];
    let patch_len = n * c * ph * pw;
    for r in 0..k {
        for cc in 0..k {
            let patch = &src[(r * k + cc) * patch_len..][..patch_len];
            for plane in 0..n * c {
                for y in 0..ph {
                    let dst = plane * h * w + (r * ph + y) * w + cc * pw;
                    out[dst..dst + pw].copy_from_slice(&patch[(plane * ph + y) * pw..][..pw]);
                }
            }
        }
    }
    out
}

/// `[N, C, H, W]` -> `[k², N, C, H/k, W/k]`.
pub fn split_tensor<T: Scalar>(f: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if f.rank() != 4 {
        return Err(Error::shape("split_patches", "rank", format!("expected [N,C,H,W], got {:?}", f.shape())));
    }
    let (n, c, h, w) = (f.dim(0), f.dim(1), f.dim(2), f.dim(3));
    let grid = PatchGrid::new(h, w, k)?;
    Tensor::from_vec(
        [k * k, n, c, grid.patch_h, grid.patch_w],
        split_data(f.data(), n, c, h, w, k),
    )
}

/// `[k², N, C, h, w]` -> `[N, C, k·h, k·w]`.
pub fn merge_tensor<T: Scalar>(patches: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if patches.rank() != 5 {
        return Err(Error::shape("merge_patches", "rank", format!("expected [P,N,C,h,w], got {:?}", patches.shape())));
    }
    if patches.dim(0) != k * k {
        return Err(Error::shape(
            "merge_patches",
            "patch count",
            format!("expected k²={} patches, got {}", k * k, patches.dim(0)),
        ));
    }
    let (n, c, ph, pw) = (patches.dim(1), patches.dim(2), patches.dim(3), patches.dim(4));
    Tensor::from_vec([n, c, ph * k, pw * k], merge_data(patches.data(), n, c, ph, pw, k))
}

/// Differentiable patch split.
pub fn split_patches<'g, T: Scalar>(f: &Var<'g, T>, k: usize) -> Result<Var<'g, T>> {
    let out = split_tensor(&f.value(), k)?;
    Ok(f.graph().record(
        out,
        &[*f],
        Box::new(move |g| vec![Some(merge_tensor(g, k).expect("inverse of split"))]),
    ))
}

/// Differentiable patch merge, the exact inverse of [`split_patches`].
pub fn merge_patches<'g, T: Scalar>(patches: &Var<'g, T>, k: usize) -> Result<Var<'g, T>> {
    let out = merge_tensor(&patches.value(), k)?;
    Ok(patches.graph().record(
        out,
        &[*patches],
        Box::new(move |g| vec![Some(split_tensor(g, k).expect("inverse of merge"))]),
    ))
}

/// How patches of a `k×k` grid are linked.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyScheme {
    /// Self-loops only.
    Identity,
    /// Self-loops plus the 4-neighbourhood on the grid.
    Spatial4,
    /// `Spatial4` plus a link from `(r, c)` to its horizontal mirror `(r, k−1−c)`.
    MirrorSpatial,
    /// Every pair linked.
    FullyLinked,
    /// Loaded from an adjacency text file.
    Custom(PathBuf),
}

impl AdjacencyScheme {
    /// Default scheme for a patch scale: fully linked at `k = 2`, mirror-spatial otherwise.
    pub fn default_for(k: usize) -> Self {
        match k {
            2 => AdjacencyScheme::FullyLinked,
            _ => AdjacencyScheme::MirrorSpatial,
        }
    }
}

/// Binary symmetric link matrix over `k²` patches with unit diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    k: usize,
    links: Vec<u8>,
}

impl Adjacency {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn size(&self) -> usize {
        self.k * self.k
    }

    pub fn linked(&self, i: usize, j: usize) -> bool {
        self.links[i * self.size() + j] == 1
    }

    pub fn links(&self) -> &[u8] {
        &self.links
    }

    /// Build from explicit links; checks binary entries, symmetry and unit diagonal.
    pub fn from_links(k: usize, links: Vec<u8>) -> Result<Self> {
        let p = k * k;
        if links.len() != p * p {
            return Err(Error::Adjacency(format!("expected {p}x{p} entries, got {}", links.len())));
        }
        for i in 0..p {
            for j in 0..p {
                let v = links[i * p + j];
                if v > 1 {
                    return Err(Error::Adjacency(format!("entry at row {i}, col {j} is {v}, expected 0 or 1")));
                }
                if v != links[j * p + i] {
                    return Err(Error::Adjacency(format!("matrix not symmetric at row {i}, col {j}")));
                }
            }
            if links[i * p + i] != 1 {
                return Err(Error::Adjacency(format!("missing self-loop at row {i}, col {i}")));
            }
        }
        Ok(Self { k, links })
    }

    /// Parse the text format: line 1 is `k`, then `k²` rows of `k²` 0/1 entries.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::Adjacency("empty adjacency file".into()))?;
        let k: usize = first
            .trim()
            .parse()
            .map_err(|_| Error::Adjacency(format!("line 1: expected k, got {:?}", first.trim())))?;
        if k == 0 {
            return Err(Error::Adjacency("line 1: k must be >= 1".into()));
        }
        let p = k * k;
        let mut links = Vec::with_capacity(p * p);
        for row in 0..p {
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| Error::Adjacency(format!("row {row}: missing (expected {p} rows)")))?;
            let mut count = 0;
            for (col, tok) in line.split_whitespace().enumerate() {
                let v = match tok {
                    "0" => 0,
                    "1" => 1,
                    _ => {
                        return Err(Error::Adjacency(format!(
                            "row {row}, col {col} (line {}): expected 0 or 1, got {tok:?}",
                            lineno + 1
                        )))
                    }
                };
                if col < p {
                    links.push(v);
                }
                count += 1;
            }
            if count != p {
                return Err(Error::Adjacency(format!("row {row}, col {}: expected {p} entries, got {count}", count.min(p))));
            }
        }
        if let Some((lineno, _)) = lines.next() {
            return Err(Error::Adjacency(format!("row {p}: unexpected extra line {}", lineno + 1)));
        }
        Self::from_links(k, links)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let p = self.size();
        let mut s = format!("{}\n", self.k);
        for i in 0..p {
            let row: Vec<String> = (0..p).map(|j| self.links[i * p + j].to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    /// Relabel nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let p = self.size();
        let mut links = vec![0; p * p];
        for i in 0..p {
            for j in 0..p {
                links[perm[i] * p + perm[j]] = self.links[i * p + j];
            }
        }
        Self { k: self.k, links }
    }
}

pub fn build_adjacency(k: usize, scheme: &AdjacencyScheme) -> Result<Adjacency> {
    if k == 0 {
        return Err(Error::Adjacency("k must be >= 1".into()));
    }
    if let AdjacencyScheme::Custom(path) = scheme {
        let adj = Adjacency::load(path)?;
        if adj.k != k {
            return Err(Error::Adjacency(format!(
                "{} describes k={}, layer needs k={k}",
                path.display(),
                adj.k
            )));
        }
        return Ok(adj);
    }
    let p = k * k;
    let mut links = vec![0u8; p * p];
    let mut link = |a: usize, b: usize| {
        links[a * p + b] = 1;
        links[b * p + a] = 1;
    };
    for r in 0..k {
        for c in 0..k {
            let i = r * k + c;
            link(i, i);
            match scheme {
                AdjacencyScheme::Identity => {}
                AdjacencyScheme::FullyLinked => {
                    for j in 0..p {
                        link(i, j);
                    }
                }
                AdjacencyScheme::Spatial4 | AdjacencyScheme::MirrorSpatial => {
                    if c + 1 < k {
                        link(i, i + 1);
                    }
                    if r + 1 < k {
                        link(i, i + k);
                    }
                    if *scheme == AdjacencyScheme::MirrorSpatial {
                        link(i, r * k + (k - 1 - c));
                    }
                }
                AdjacencyScheme::Custom(_) => unreachable!(),
            }
        }
    }
    Adjacency::from_links(k, links)
}

/// Symmetrically normalized adjacency `D^{-1/2} A D^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    k: usize,
    weights: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn size(&self) -> usize {
        self.k * self.k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size() + j]
    }

    pub fn is_identity(&self) -> bool {
        let p = self.size();
        (0..p).all(|i| (0..p).all(|j| self.weights[i * p + j] == if i == j { 1.0 } else { 0.0 }))
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let p = self.size();
        Tensor::from_vec([p, p], self.weights.iter().map(|&v| T::lit(v)).collect()).expect("square")
    }
}

pub fn normalize_adjacency(adj: &Adjacency) -> NormalizedAdjacency {
    let p = adj.size();
    // self-loops guarantee every degree is >= 1
    let inv_sqrt: Vec<f64> = (0..p)
        .map(|i| {
            let deg: u32 = adj.links[i * p..(i + 1) * p].iter().map(|&v| v as u32).sum();
            1.0 / (deg as f64).sqrt()
        })
        .collect();
    let weights = (0..p * p)
        .map(|idx| {
            let (i, j) = (idx / p, idx % p);
            adj.links[idx] as f64 * inv_sqrt[i] * inv_sqrt[j]
        })
        .collect();
    NormalizedAdjacency { k: adj.k, weights }
}

/// Whether the shared per-patch transform is a convolution or a transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IgcnMode {
    Conv,
    Deconv,
}

/// Graph convolution over image patches.
///
/// Split into `k²` patches, apply the shared 3×3 (de)convolution with
/// padding 1 to every patch, ReLU, aggregate across patches with
/// `adjacency`, merge back by order ID. Deconv mode upsamples each patch by
/// `stride` exactly.
pub fn igcn_layer<'g, T: Scalar>(
    f: &Var<'g, T>,
    weight: &Var<'g, T>,
    bias: &Var<'g, T>,
    adjacency: &NormalizedAdjacency,
    mode: IgcnMode,
    stride: usize,
) -> Result<Var<'g, T>> {
    let k = adjacency.k();
    let shape = f.shape();
    if shape.len() != 4 {
        return Err(Error::shape("igcn_layer", "rank", format!("expected [N,C,H,W], got {shape:?}")));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let grid = PatchGrid::new(h, w, k)?;
    let kernel = weight.shape()[2];
    if k > 1 && (grid.patch_h < kernel || grid.patch_w < kernel) {
        return Err(Error::shape(
            "igcn_layer",
            "patch",
            format!(
                "{}x{} patches (k={k} on {h}x{w}) are smaller than the {kernel}x{kernel} kernel",
                grid.patch_h, grid.patch_w
            ),
        ));
    }
    let p = grid.num_patches();
    let patches = split_patches(f, k)?;
    let folded = patches.reshape([p * n, shape[1], grid.patch_h, grid.patch_w])?;
    let pad = kernel / 2;
    let z = match mode {
        IgcnMode::Conv => folded.conv2d(weight, Some(bias), stride, pad)?,
        IgcnMode::Deconv => folded.deconv2d(weight, Some(bias), stride, pad, stride - 1)?,
    };
    let zs = z.shape();
    let act = z.relu().reshape([p, n, zs[1], zs[2], zs[3]])?;
    let mixed = if k == 1 && adjacency.is_identity() {
        act
    } else {
        act.graph_aggregate(&adjacency.to_tensor())?
    };
    merge_patches(&mixed, k)
}

/// Parameters and fixed adjacency of one graph-convolution layer.
#[derive(Debug, Clone)]
pub struct IgcnLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub adjacency: NormalizedAdjacency,
    pub mode: IgcnMode,
    pub stride: usize,
}

impl IgcnLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        adjacency: NormalizedAdjacency,
        mode: IgcnMode,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let wshape = match mode {
            IgcnMode::Conv => [out_channels, in_channels, 3, 3],
            IgcnMode::Deconv => [in_channels, out_channels, 3, 3],
        };
        let weight = store.insert(format!("{name}.weight"), fan_in_uniform(wshape, in_channels * 9, rng))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros([out_channels]))?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            adjacency,
            mode,
            stride,
        })
    }

    pub fn k(&self) -> usize {
        self.adjacency.k()
    }

    pub fn forward<'g, T: Scalar>(&self, b: &Bound<'g, '_, T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        igcn_layer(x, &b.param(self.weight), &b.param(self.bias), &self.adjacency, self.mode, self.stride)
    }

    /// Spatial extent after this layer for an input extent `h`.
    pub fn output_extent(&self, h: usize) -> usize {
        let ph = h / self.k();
        let out = match self.mode {
            IgcnMode::Conv => (ph + 2 - 3) / self.stride + 1,
            IgcnMode::Deconv => ph * self.stride,
        };
        out * self.k()
    }
}
