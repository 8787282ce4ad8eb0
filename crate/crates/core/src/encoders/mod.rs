//! Dual encoders mapping point clouds and view features onto the unit
//! hypersphere, with hand-written backward passes.
//!
//! Shape branch: per-point `6 -> H` (ReLU) `-> H`, channel-wise max pool over
//! points, projection `H -> D`, l2 normalization.
//! Image branch: `F -> H` (ReLU) `-> D`, l2 normalization.

mod checkpoint;
mod embedding;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use sha2::{Digest, Sha256};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Fingerprint};
pub use embedding::{l2_normalize, Embedding, NORM_EPS, UNIT_TOL};

use crate::geometry::{PointCloud, ViewFeature, CHANNELS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub hidden: usize,
    pub embed: usize,
    pub view: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            hidden: 128,
            embed: 64,
            view: crate::geometry::DEFAULT_GRID * crate::geometry::DEFAULT_GRID,
        }
    }
}

/// Affine layer `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Glorot-uniform weights, zero bias.
    fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-a..=a));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.weight) + &self.bias
    }

    fn slices(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeBranch {
    pub point1: Dense,
    pub point2: Dense,
    pub proj: Dense,
}

impl ShapeBranch {
    fn zeros(d: EncoderDims) -> Self {
        Self {
            point1: Dense::zeros(CHANNELS, d.hidden),
            point2: Dense::zeros(d.hidden, d.hidden),
            proj: Dense::zeros(d.hidden, d.embed),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        [&self.point1, &self.point2, &self.proj]
            .into_iter()
            .flat_map(Dense::slices)
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        [&mut self.point1, &mut self.point2, &mut self.proj]
            .into_iter()
            .flat_map(Dense::slices_mut)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBranch {
    pub hidden: Dense,
    pub proj: Dense,
}

impl ImageBranch {
    fn zeros(d: EncoderDims) -> Self {
        Self {
            hidden: Dense::zeros(d.view, d.hidden),
            proj: Dense::zeros(d.hidden, d.embed),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        [&self.hidden, &self.proj].into_iter().flat_map(Dense::slices).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        [&mut self.hidden, &mut self.proj]
            .into_iter()
            .flat_map(Dense::slices_mut)
            .collect()
    }

    /// SHA-256 over the branch weights; keys the offline embedding cache.
    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        Fingerprint(h.finalize().into())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub shape: ShapeBranch,
    pub image: ImageBranch,
    pub shape_trainable: bool,
    pub image_trainable: bool,
}

impl EncoderParams {
    pub fn init(dims: EncoderDims, seed: u64) -> Self {
        let mut rng = crate::seed::rng(seed);
        let shape = ShapeBranch {
            point1: Dense::glorot(CHANNELS, dims.hidden, &mut rng),
            point2: Dense::glorot(dims.hidden, dims.hidden, &mut rng),
            proj: Dense::glorot(dims.hidden, dims.embed, &mut rng),
        };
        let image = ImageBranch {
            hidden: Dense::glorot(dims.view, dims.hidden, &mut rng),
            proj: Dense::glorot(dims.hidden, dims.embed, &mut rng),
        };
        Self {
            shape,
            image,
            shape_trainable: true,
            image_trainable: true,
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            hidden: self.shape.point2.weight.nrows(),
            embed: self.shape.proj.weight.ncols(),
            view: self.image.hidden.weight.nrows(),
        }
    }

    pub fn num_weights(&self) -> usize {
        self.shape.tensors().iter().chain(&self.image.tensors()).map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.shape
            .tensors()
            .iter()
            .chain(&self.image.tensors())
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::of(&encode_checkpoint(self))
    }
}

/// Per-weight gradients, laid out like [`EncoderParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub shape: ShapeBranch,
    pub image: ImageBranch,
}

impl Gradients {
    pub fn zeros(dims: EncoderDims) -> Self {
        Self {
            shape: ShapeBranch::zeros(dims),
            image: ImageBranch::zeros(dims),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.shape
            .tensors()
            .iter()
            .chain(&self.image.tensors())
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.shape
            .tensors()
            .iter()
            .chain(&self.image.tensors())
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Forward record for one cloud. Only the points that win at least one
/// max-pool channel can receive gradient, so only their rows are kept.
#[derive(Clone, Debug)]
pub struct ShapeTrace {
    /// Winning point per hidden channel (lowest index among ties).
    argmax: Vec<usize>,
    /// Row in `active_*` for each channel's winner.
    winner_row: Vec<usize>,
    active_input: Array2<f64>,
    active_hidden: Array2<f64>,
    pooled: Array1<f64>,
    raw: Array1<f64>,
    norm: f64,
    output: Embedding,
}

impl ShapeTrace {
    pub fn embedding(&self) -> &Embedding {
        &self.output
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

#[derive(Clone, Debug)]
pub struct ImageTrace {
    input: Array1<f64>,
    hidden: Array1<f64>,
    raw: Array1<f64>,
    norm: f64,
    output: Embedding,
}

impl ImageTrace {
    pub fn embedding(&self) -> &Embedding {
        &self.output
    }
}

fn check_finite(values: &[f64], layer: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer })
    }
}

fn cloud_matrix(cloud: &PointCloud) -> Array2<f64> {
    let mut x = Array2::zeros((cloud.len(), CHANNELS));
    for (mut row, p) in x.rows_mut().into_iter().zip(&cloud.points) {
        for (dst, v) in row.iter_mut().zip(p.channels()) {
            *dst = v;
        }
    }
    x
}

pub fn forward_shape(params: &EncoderParams, cloud: &PointCloud) -> Result<ShapeTrace> {
    if cloud.is_empty() {
        return Err(Error::param("cannot encode an empty cloud"));
    }
    let branch = &params.shape;
    let x = cloud_matrix(cloud);
    check_finite(x.as_slice().unwrap(), "shape.input")?;
    let mut h1 = x.dot(&branch.point1.weight);
    h1 += &branch.point1.bias;
    h1.mapv_inplace(|v| v.max(0.0));
    let h2 = h1.dot(&branch.point2.weight);

    let hidden = h2.ncols();
    let mut best = vec![f64::NEG_INFINITY; hidden];
    let mut argmax = vec![0usize; hidden];
    for (p, row) in h2.rows().into_iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v > best[c] {
                best[c] = v;
                argmax[c] = p;
            }
        }
    }
    check_finite(&best, "shape.point2")?;

    let mut active: Vec<usize> = argmax.clone();
    active.sort_unstable();
    active.dedup();
    let winner_row = argmax
        .iter()
        .map(|p| active.binary_search(p).expect("winner is active"))
        .collect();
    let active_input = x.select(Axis(0), &active);
    let active_hidden = h1.select(Axis(0), &active);

    let pooled = Array1::from(best) + &branch.point2.bias;
    let raw = branch.proj.apply(pooled.view());
    check_finite(raw.as_slice().unwrap(), "shape.proj")?;
    let (output, norm) = l2_normalize(raw.as_slice().unwrap());
    Ok(ShapeTrace {
        argmax,
        winner_row,
        active_input,
        active_hidden,
        pooled,
        raw,
        norm,
        output,
    })
}

pub fn forward_image(params: &EncoderParams, view: &ViewFeature) -> Result<ImageTrace> {
    let expected = params.image.hidden.weight.nrows();
    if view.dim() != expected {
        return Err(Error::Dimension {
            expected,
            actual: view.dim(),
        });
    }
    let input = Array1::from(view.descriptor.clone());
    check_finite(input.as_slice().unwrap(), "image.input")?;
    let hidden = params.image.hidden.apply(input.view()).mapv(|v| v.max(0.0));
    check_finite(hidden.as_slice().unwrap(), "image.hidden")?;
    let raw = params.image.proj.apply(hidden.view());
    check_finite(raw.as_slice().unwrap(), "image.proj")?;
    let (output, norm) = l2_normalize(raw.as_slice().unwrap());
    Ok(ImageTrace {
        input,
        hidden,
        raw,
        norm,
        output,
    })
}

/// f_P: embeds a (normalized) point cloud.
pub fn encode_shape(params: &EncoderParams, cloud: &PointCloud) -> Result<Embedding> {
    forward_shape(params, cloud).map(|t| t.output)
}

/// f_I: embeds a view feature.
pub fn encode_image(params: &EncoderParams, view: &ViewFeature) -> Result<Embedding> {
    forward_image(params, view).map(|t| t.output)
}

/// Recorded forward passes for one batch.
#[derive(Clone, Debug, Default)]
pub struct BatchTrace {
    pub shapes: Vec<ShapeTrace>,
    /// Empty when image embeddings came from a cache.
    pub images: Vec<ImageTrace>,
}

/// Back-propagation of the normalization `y = z / max(|z|, eps)`.
fn normalize_backward(raw: &Array1<f64>, norm: f64, out: &Embedding, upstream: &[f64]) -> Array1<f64> {
    if norm < NORM_EPS {
        return Array1::from_iter(upstream.iter().map(|g| g / NORM_EPS));
    }
    debug_assert_eq!(raw.len(), upstream.len());
    let proj: f64 = out.as_slice().iter().zip(upstream).map(|(y, g)| y * g).sum();
    Array1::from_iter(
        out.as_slice()
            .iter()
            .zip(upstream)
            .map(|(y, g)| (g - y * proj) / norm),
    )
}

fn accumulate_outer(dst: &mut Array2<f64>, left: ArrayView1<f64>, right: ArrayView1<f64>) {
    for (mut row, &l) in dst.rows_mut().into_iter().zip(left.iter()) {
        if l != 0.0 {
            row.scaled_add(l, &right);
        }
    }
}

fn shape_backward(branch: &ShapeBranch, trace: &ShapeTrace, upstream: &[f64], grads: &mut ShapeBranch) {
    let dz = normalize_backward(&trace.raw, trace.norm, &trace.output, upstream);
    accumulate_outer(&mut grads.proj.weight, trace.pooled.view(), dz.view());
    grads.proj.bias += &dz;
    let dpooled = branch.proj.weight.dot(&dz);
    grads.point2.bias += &dpooled;

    let hidden = dpooled.len();
    let mut dh1 = Array2::<f64>::zeros((trace.active_hidden.nrows(), hidden));
    for c in 0..hidden {
        let g = dpooled[c];
        if g == 0.0 {
            continue;
        }
        let row = trace.winner_row[c];
        let h = trace.active_hidden.row(row);
        grads.point2.weight.column_mut(c).scaled_add(g, &h);
        dh1.row_mut(row).scaled_add(g, &branch.point2.weight.column(c));
    }
    for (r, mut d) in dh1.rows_mut().into_iter().enumerate() {
        let h = trace.active_hidden.row(r);
        d.zip_mut_with(&h, |g, &a| {
            if a <= 0.0 {
                *g = 0.0;
            }
        });
        accumulate_outer(&mut grads.point1.weight, trace.active_input.row(r), d.view());
        grads.point1.bias += &d;
    }
}

fn image_backward(branch: &ImageBranch, trace: &ImageTrace, upstream: &[f64], grads: &mut ImageBranch) {
    let dz = normalize_backward(&trace.raw, trace.norm, &trace.output, upstream);
    accumulate_outer(&mut grads.proj.weight, trace.hidden.view(), dz.view());
    grads.proj.bias += &dz;
    let mut dh = branch.proj.weight.dot(&dz);
    dh.zip_mut_with(&trace.hidden, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    accumulate_outer(&mut grads.hidden.weight, trace.input.view(), dh.view());
    grads.hidden.bias += &dh;
}

/// Exact parameter gradients given upstream gradients on each embedding.
/// Examples are accumulated in batch order; frozen branches get zeros.
pub fn backward(
    params: &EncoderParams,
    trace: &BatchTrace,
    d_shape: &[Vec<f64>],
    d_image: &[Vec<f64>],
) -> Result<Gradients> {
    let dims = params.dims();
    if d_shape.len() != trace.shapes.len() {
        return Err(Error::Usage(format!(
            "{} shape gradients for {} recorded shape passes",
            d_shape.len(),
            trace.shapes.len()
        )));
    }
    if params.image_trainable && d_image.len() != trace.images.len() {
        return Err(Error::Usage(format!(
            "{} image gradients for {} recorded image passes",
            d_image.len(),
            trace.images.len()
        )));
    }
    let mut grads = Gradients::zeros(dims);
    if params.shape_trainable {
        for (t, g) in trace.shapes.iter().zip(d_shape) {
            if g.len() != dims.embed || t.argmax.len() != dims.hidden {
                return Err(Error::Usage("recorded shape pass does not match parameters".into()));
            }
            shape_backward(&params.shape, t, g, &mut grads.shape);
        }
    }
    if params.image_trainable {
        for (t, g) in trace.images.iter().zip(d_image) {
            if g.len() != dims.embed || t.input.len() != dims.view {
                return Err(Error::Usage("recorded image pass does not match parameters".into()));
            }
            image_backward(&params.image, t, g, &mut grads.image);
        }
    }
    Ok(grads)
}
