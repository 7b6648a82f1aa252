//! Parameter-free rendering of frames from flat INR weight vectors.
//!
//! A weight vector is unflattened into a ReLU MLP that maps Fourier-embedded
//! pixel coordinates to `C` output channels. Flattening order is layer-major;
//! within a layer the `out x in` weight matrix (row-major) precedes the bias.
//!
//! Embedding layout per coordinate `(x, y)`:
//! `[sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{K-1} pi x), cos(2^{K-1} pi x),`
//! ` (same for y), x, y]`, the raw pair only when `include_raw_coords` is set.

use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::nn::Tensor;
use crate::tape::{CustomOp, Tape, Var};

/// Hidden-layer nonlinearity. Only the rectified-linear unit is supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InrArchitecture {
    /// Linear layers including the output layer.
    pub depth: usize,
    pub width: usize,
    pub out_channels: usize,
    /// Fourier bands per axis.
    pub fourier_bands: usize,
    pub include_raw_coords: bool,
    pub activation: Activation,
}

impl Default for InrArchitecture {
    fn default() -> Self {
        Self {
            depth: 6,
            width: 12,
            out_channels: 1,
            fourier_bands: 6,
            include_raw_coords: true,
            activation: Activation::Relu,
        }
    }
}

impl InrArchitecture {
    pub fn new(depth: usize, width: usize, out_channels: usize, fourier_bands: usize) -> Self {
        Self {
            depth,
            width,
            out_channels,
            fourier_bands,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("INR depth {} < 2", self.depth)));
        }
        if self.width < 1 || self.fourier_bands < 1 || self.out_channels < 1 {
            return Err(Error::Config(
                "INR width, bands and channels must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        4 * self.fourier_bands + if self.include_raw_coords { 2 } else { 0 }
    }

    /// `(out, in)` for each linear layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.depth);
        let mut fan_in = self.input_dim();
        for l in 0..self.depth {
            let out = if l + 1 == self.depth {
                self.out_channels
            } else {
                self.width
            };
            shapes.push((out, fan_in));
            fan_in = out;
        }
        shapes
    }

    /// Length of the flat weight vector `d_z`.
    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

/// Total weight-and-bias count of `arch`.
pub fn param_count(arch: &InrArchitecture) -> usize {
    arch.param_count()
}

/// Flat INR parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(pub Vec<f32>);

impl WeightVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Regular grid of pixel-centre coordinates in `[-1, 1]^2`.
///
/// Column `j` sits at `x = -1 + (2j + 1) / cols` and row `i` at
/// `y = -1 + (2i + 1) / rows`, so the sample spacing is `2 / cols` and
/// `2 / rows` respectively.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoordinateGrid {
    pub rows: usize,
    pub cols: usize,
}

impl CoordinateGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "grid must be non-empty");
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self, col: usize) -> f64 {
        -1.0 + (2 * col + 1) as f64 / self.cols as f64
    }

    pub fn y(&self, row: usize) -> f64 {
        -1.0 + (2 * row + 1) as f64 / self.rows as f64
    }

    /// Row-major coordinate pairs `(x, y)`.
    pub fn coords(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.rows).flat_map(move |i| (0..self.cols).map(move |j| (self.x(j), self.y(i))))
    }

    /// Grid scaled by `s` on both axes, rounding to the nearest pixel.
    pub fn scaled(&self, s: f64) -> Self {
        let r = ((self.rows as f64 * s).round() as usize).max(1);
        let c = ((self.cols as f64 * s).round() as usize).max(1);
        Self::new(r, c)
    }

    /// Masked embedding of every grid coordinate, row-major `[rows*cols, input_dim]`.
    pub fn embedding(&self, arch: &InrArchitecture, mask: &FrequencyMask) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len() * arch.input_dim());
        for (x, y) in self.coords() {
            out.extend(fourier_embed(
                (x, y),
                arch.fourier_bands,
                mask,
                arch.include_raw_coords,
            ));
        }
        out
    }
}

/// Per-band keep flags for each axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyMask {
    pub x_keep: Vec<bool>,
    pub y_keep: Vec<bool>,
}

impl FrequencyMask {
    pub fn all_pass(bands: usize) -> Self {
        Self {
            x_keep: vec![true; bands],
            y_keep: vec![true; bands],
        }
    }

    pub fn bands(&self) -> usize {
        self.x_keep.len()
    }

    /// Zeroes masked band entries of an embedding in place.
    pub fn apply(&self, embedding: &mut [f32]) {
        let k = self.bands();
        assert!(embedding.len() >= 4 * k, "embedding shorter than 4K");
        for (axis, keep) in [&self.x_keep, &self.y_keep].into_iter().enumerate() {
            for (band, &kept) in keep.iter().enumerate() {
                if !kept {
                    let base = axis * 2 * k + 2 * band;
                    embedding[base] = 0.0;
                    embedding[base + 1] = 0.0;
                }
            }
        }
    }

    pub fn kept_x(&self) -> Vec<usize> {
        kept(&self.x_keep)
    }

    pub fn kept_y(&self) -> Vec<usize> {
        kept(&self.y_keep)
    }
}

fn kept(flags: &[bool]) -> Vec<usize> {
    flags
        .iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect()
}

/// Band `k` survives on an axis of `n` samples iff `2^(k-1) < n/4`,
/// i.e. `k < log2(n) - 1`, evaluated exactly as `2^(k+1) < n`.
fn band_below_nyquist(k: usize, n: usize) -> bool {
    k + 1 < usize::BITS as usize && (1usize << (k + 1)) < n
}

/// Mask removing every band at or above the Nyquist limit of a
/// `train_h x train_w` sampling grid, independently per axis.
pub fn nyquist_mask(train_h: usize, train_w: usize, bands: usize) -> FrequencyMask {
    FrequencyMask {
        x_keep: (0..bands).map(|k| band_below_nyquist(k, train_w)).collect(),
        y_keep: (0..bands).map(|k| band_below_nyquist(k, train_h)).collect(),
    }
}

/// Fourier features of one coordinate; length `4K` (+2 with raw coordinates).
pub fn fourier_embed(
    coord: (f64, f64),
    bands: usize,
    mask: &FrequencyMask,
    raw: bool,
) -> Vec<f32> {
    assert_eq!(mask.bands(), bands, "mask band count");
    let mut out = Vec::with_capacity(4 * bands + 2);
    for v in [coord.0, coord.1] {
        for k in 0..bands {
            let arg = (1u64 << k) as f64 * PI * v;
            out.push(arg.sin() as f32);
            out.push(arg.cos() as f32);
        }
    }
    mask.apply(&mut out);
    if raw {
        out.push(coord.0 as f32);
        out.push(coord.1 as f32);
    }
    out
}

/// One unflattened INR layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[out, in]`, row-major.
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn unflatten(weights: &WeightVector, arch: &InrArchitecture) -> Result<Vec<Layer>> {
    let expected = arch.param_count();
    if weights.len() != expected {
        return Err(Error::dim("INR weight vector", expected, weights.len()));
    }
    let mut offset = 0;
    let mut layers = Vec::with_capacity(arch.depth);
    for (out, inp) in arch.layer_shapes() {
        let w = weights.0[offset..offset + out * inp].to_vec();
        offset += out * inp;
        let b = weights.0[offset..offset + out].to_vec();
        offset += out;
        layers.push(Layer {
            weight: Tensor::new(vec![out, inp], w),
            bias: Tensor::new(vec![out], b),
        });
    }
    Ok(layers)
}

pub fn flatten(layers: &[Layer]) -> WeightVector {
    let mut v = Vec::new();
    for l in layers {
        v.extend_from_slice(&l.weight.data);
        v.extend_from_slice(&l.bias.data);
    }
    WeightVector(v)
}

/// `H x W x C` image, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        let expected = height * width * channels;
        if pixels.len() != expected {
            return Err(Error::dim("frame pixels", expected, pixels.len()));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.pixels[(row * self.width + col) * self.channels + ch] = v;
    }

    /// Copy with every pixel clamped to `[0, 1]`.
    pub fn clamped(&self) -> Self {
        Self {
            pixels: self.pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// One channel as an `H x W` plane.
    pub fn channel(&self, ch: usize) -> Vec<f32> {
        self.pixels
            .iter()
            .skip(ch)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }
}

const CHUNK: usize = 4096;

/// Evaluates the MLP on `pixels` embedded coordinates. When `saved` is given,
/// it receives each hidden layer's post-activation.
fn mlp_forward(
    layers: &[(&[f32], &[f32], usize, usize)],
    embedding: &[f32],
    pixels: usize,
    out: &mut [f32],
    mut saved: Option<&mut Vec<Vec<f32>>>,
) {
    let mut h = embedding.to_vec();
    for (l, &(w, b, o, i)) in layers.iter().enumerate() {
        let mut next = vec![0.0; pixels * o];
        gemm(pixels, i, o, &h, false, w, true, 0.0, &mut next);
        let last = l + 1 == layers.len();
        for row in next.chunks_exact_mut(o) {
            for (v, bias) in row.iter_mut().zip(b) {
                *v += bias;
                if !last && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        if last {
            out.copy_from_slice(&next);
        } else {
            if let Some(s) = saved.as_deref_mut() {
                s.push(next.clone());
            }
            h = next;
        }
    }
}

fn layer_views<'a>(w: &'a [f32], arch: &InrArchitecture) -> Vec<(&'a [f32], &'a [f32], usize, usize)> {
    let mut views = Vec::with_capacity(arch.depth);
    let mut off = 0;
    for (o, i) in arch.layer_shapes() {
        let wm = &w[off..off + o * i];
        off += o * i;
        let b = &w[off..off + o];
        off += o;
        views.push((wm, b, o, i));
    }
    views
}

/// Renders `weights` on `grid`. Output follows the grid resolution and is not
/// clamped.
pub fn render(
    weights: &WeightVector,
    grid: &CoordinateGrid,
    arch: &InrArchitecture,
    mask: &FrequencyMask,
) -> Result<Frame> {
    let expected = arch.param_count();
    if weights.len() != expected {
        return Err(Error::dim("INR weight vector", expected, weights.len()));
    }
    if mask.bands() != arch.fourier_bands {
        return Err(Error::dim("frequency mask bands", arch.fourier_bands, mask.bands()));
    }
    let views = layer_views(&weights.0, arch);
    let c = arch.out_channels;
    let e = arch.input_dim();
    let mut pixels = vec![0.0; grid.len() * c];
    let coords: Vec<(f64, f64)> = grid.coords().collect();
    let mut emb = Vec::with_capacity(CHUNK * e);
    for (chunk_idx, chunk) in coords.chunks(CHUNK).enumerate() {
        emb.clear();
        for &xy in chunk {
            emb.extend(fourier_embed(xy, arch.fourier_bands, mask, arch.include_raw_coords));
        }
        let start = chunk_idx * CHUNK * c;
        let out = &mut pixels[start..start + chunk.len() * c];
        mlp_forward(&views, &emb, chunk.len(), out, None);
    }
    Frame::new(grid.rows, grid.cols, c, pixels)
}

/// Precomputed embedding for differentiable rendering at a fixed grid.
#[derive(Clone, Debug)]
pub struct RenderPlan {
    pub arch: InrArchitecture,
    pub grid: CoordinateGrid,
    embedding: Rc<Vec<f32>>,
}

impl RenderPlan {
    pub fn new(arch: &InrArchitecture, grid: CoordinateGrid, mask: &FrequencyMask) -> Self {
        Self {
            arch: arch.clone(),
            grid,
            embedding: Rc::new(grid.embedding(arch, mask)),
        }
    }

    /// Renders each row of `weights: [N, d_z]` into `[N, H, W, C]` on the tape.
    pub fn render(&self, tape: &mut Tape, weights: Var) -> Var {
        let d = self.arch.param_count();
        let shape = tape.shape(weights).to_vec();
        assert_eq!(shape.len(), 2, "render: weights must be [N, d_z]");
        assert_eq!(shape[1], d, "render: weight length");
        let n = shape[0];
        let p = self.grid.len();
        let c = self.arch.out_channels;
        let w = tape.value(weights);
        let mut value = vec![0.0; n * p * c];
        let mut acts = Vec::with_capacity(n);
        for f in 0..n {
            let views = layer_views(&w[f * d..(f + 1) * d], &self.arch);
            let mut saved = Vec::with_capacity(self.arch.depth - 1);
            mlp_forward(
                &views,
                &self.embedding,
                p,
                &mut value[f * p * c..(f + 1) * p * c],
                Some(&mut saved),
            );
            acts.push(saved);
        }
        let op = RenderOp {
            arch: self.arch.clone(),
            embedding: Rc::clone(&self.embedding),
            pixels: p,
            acts,
        };
        tape.custom(
            vec![weights],
            value,
            vec![n, self.grid.rows, self.grid.cols, c],
            Box::new(op),
        )
    }
}

struct RenderOp {
    arch: InrArchitecture,
    embedding: Rc<Vec<f32>>,
    pixels: usize,
    acts: Vec<Vec<Vec<f32>>>,
}

impl CustomOp for RenderOp {
    fn backward(
        &self,
        inputs: &[&[f32]],
        _output: &[f32],
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        if !needs[0] {
            return vec![None];
        }
        let d = self.arch.param_count();
        let p = self.pixels;
        let c = self.arch.out_channels;
        let shapes = self.arch.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for &(o, i) in &shapes {
            offsets.push(off);
            off += o * i + o;
        }
        let weights = inputs[0];
        let n = weights.len() / d;
        let mut grad = vec![0.0; weights.len()];
        for f in 0..n {
            let w = &weights[f * d..(f + 1) * d];
            let gw = &mut grad[f * d..(f + 1) * d];
            let mut g = grad_out[f * p * c..(f + 1) * p * c].to_vec();
            for l in (0..shapes.len()).rev() {
                let (o, i) = shapes[l];
                let input: &[f32] = if l == 0 {
                    &self.embedding
                } else {
                    &self.acts[f][l - 1]
                };
                let base = offsets[l];
                gemm(o, p, i, &g, true, input, false, 1.0, &mut gw[base..base + o * i]);
                let gb = &mut gw[base + o * i..base + o * i + o];
                for row in g.chunks_exact(o) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                if l > 0 {
                    let mut prev = vec![0.0; p * i];
                    gemm(p, o, i, &g, false, &w[base..base + o * i], false, 0.0, &mut prev);
                    for (gp, &a) in prev.iter_mut().zip(&self.acts[f][l - 1]) {
                        if a <= 0.0 {
                            *gp = 0.0;
                        }
                    }
                    g = prev;
                }
            }
        }
        vec![Some(grad)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_weights(arch: &InrArchitecture, seed: u64) -> WeightVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WeightVector((0..arch.param_count()).map(|_| rng.gen_range(-0.5..0.5)).collect())
    }

    #[test]
    fn table_dimensions() {
        let mut arch = InrArchitecture::new(6, 12, 1, 6);
        assert_eq!(param_count(&arch), 961);
        arch.out_channels = 3;
        assert_eq!(param_count(&arch), 987);
        let shallow = InrArchitecture::new(2, 12, 1, 6);
        assert_eq!(param_count(&shallow), 26 * 12 + 12 + 12 + 1);
        assert_eq!(param_count(&shallow), 337);
    }

    #[test]
    fn embed_at_origin() {
        let e = fourier_embed((0.0, 0.0), 6, &FrequencyMask::all_pass(6), true);
        assert_eq!(e.len(), 26);
        for k in 0..12 {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
        assert_eq!(&e[24..], &[0.0, 0.0]);
    }

    #[test]
    fn embed_single_band_at_top_edge() {
        let e = fourier_embed((0.0, 1.0), 1, &FrequencyMask::all_pass(1), false);
        assert_eq!(e.len(), 4);
        // y block is entries 2..4: (sin(pi), cos(pi)).
        assert!(e[2].abs() < 1e-7);
        assert_eq!(e[3], -1.0);
    }

    #[test]
    fn masked_y_band_is_exactly_zero() {
        let mut mask = FrequencyMask::all_pass(6);
        mask.y_keep[2] = false;
        let e = fourier_embed((0.3, -0.7), 6, &mask, true);
        let y_block = &e[12..24];
        assert_eq!(y_block[4], 0.0);
        assert_eq!(y_block[5], 0.0);
        assert_ne!(y_block[6], 0.0);
    }

    #[test]
    fn mask_is_idempotent() {
        let mask = nyquist_mask(8, 16, 6);
        let mut once = fourier_embed((0.1, 0.2), 6, &FrequencyMask::all_pass(6), true);
        mask.apply(&mut once);
        let mut twice = once.clone();
        mask.apply(&mut twice);
        assert_eq!(once, twice);
    }

    #[test]
    fn nyquist_worked_examples() {
        let m = nyquist_mask(32, 64, 6);
        assert_eq!(m.kept_y(), vec![0, 1, 2, 3]);
        assert_eq!(m.kept_x(), vec![0, 1, 2, 3, 4]);
        let m = nyquist_mask(72, 72, 6);
        assert_eq!(m.kept_y(), (0..6).collect::<Vec<_>>());
        assert_eq!(m.kept_x(), (0..6).collect::<Vec<_>>());
        let m = nyquist_mask(4, 4, 6);
        assert_eq!(m.kept_y(), vec![0]);
        assert_eq!(m.kept_x(), vec![0]);
    }

    #[test]
    fn nyquist_matches_log_formula() {
        for n in 2..300usize {
            let m = nyquist_mask(n, n, 8);
            for k in 0..8 {
                let want = (k as f64) < (n as f64).log2() - 1.0;
                assert_eq!(m.y_keep[k], want, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn unflatten_shapes_for_961() {
        let arch = InrArchitecture::default();
        let layers = unflatten(&WeightVector::zeros(961), &arch).unwrap();
        let shapes: Vec<_> = layers.iter().map(|l| l.weight.shape.clone()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![12, 26],
                vec![12, 12],
                vec![12, 12],
                vec![12, 12],
                vec![12, 12],
                vec![1, 12]
            ]
        );
        let biases: Vec<_> = layers.iter().map(|l| l.bias.len()).collect();
        assert_eq!(biases, vec![12, 12, 12, 12, 12, 1]);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let arch = InrArchitecture::default();
        match unflatten(&WeightVector::zeros(960), &arch) {
            Err(Error::Dimension {
                expected, actual, ..
            }) => {
                assert_eq!((expected, actual), (961, 960));
            }
            other => panic!("unexpected {other:?}"),
        }
        let grid = CoordinateGrid::new(4, 4);
        assert!(render(&WeightVector::zeros(962), &grid, &arch, &FrequencyMask::all_pass(6)).is_err());
    }

    #[test]
    fn zero_network_renders_zero() {
        let arch = InrArchitecture::default();
        let grid = CoordinateGrid::new(5, 7);
        let f = render(&WeightVector::zeros(961), &grid, &arch, &FrequencyMask::all_pass(6)).unwrap();
        assert_eq!(f.shape(), [5, 7, 1]);
        assert!(f.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_follows_grid_resolution() {
        let mut arch = InrArchitecture::default();
        arch.out_channels = 3;
        let w = random_weights(&arch, 3);
        let mask = FrequencyMask::all_pass(6);
        for n in [8, 16] {
            let f = render(&w, &CoordinateGrid::new(n, n), &arch, &mask).unwrap();
            assert_eq!(f.shape(), [n, n, 3]);
        }
    }

    /// Straight scalar loops over the layer formula, independent of gemm.
    fn scalar_oracle(w: &[f32], arch: &InrArchitecture, x: f64, y: f64) -> Vec<f64> {
        let k = arch.fourier_bands;
        let mut h: Vec<f64> = Vec::new();
        for v in [x, y] {
            for b in 0..k {
                let a = 2f64.powi(b as i32) * PI * v;
                h.push(a.sin() as f32 as f64);
                h.push(a.cos() as f32 as f64);
            }
        }
        if arch.include_raw_coords {
            h.push(x as f32 as f64);
            h.push(y as f32 as f64);
        }
        let mut off = 0;
        for l in 0..arch.depth {
            let fan_in = h.len();
            let out = if l + 1 == arch.depth { arch.out_channels } else { arch.width };
            let mut next = vec![0.0; out];
            for o in 0..out {
                let mut s = 0.0;
                for i in 0..fan_in {
                    s += w[off + o * fan_in + i] as f64 * h[i];
                }
                next[o] = s;
            }
            off += out * fan_in;
            for o in 0..out {
                next[o] += w[off + o] as f64;
                if l + 1 < arch.depth {
                    next[o] = next[o].max(0.0);
                }
            }
            off += out;
            h = next;
        }
        h
    }

    #[test]
    fn render_matches_scalar_oracle() {
        let mut arch = InrArchitecture::default();
        arch.out_channels = 3;
        let w = random_weights(&arch, 11);
        let grid = CoordinateGrid::new(9, 13);
        let f = render(&w, &grid, &arch, &FrequencyMask::all_pass(6)).unwrap();
        for &(i, j) in &[(0usize, 0usize), (4, 7), (8, 12)] {
            let want = scalar_oracle(&w.0, &arch, grid.x(j), grid.y(i));
            for c in 0..3 {
                let got = f.get(i, j, c) as f64;
                assert!((got - want[c]).abs() < 1e-5, "({i},{j},{c}) {got} vs {}", want[c]);
            }
        }
    }

    #[test]
    fn render_is_pure() {
        let arch = InrArchitecture::default();
        let w = random_weights(&arch, 5);
        let grid = CoordinateGrid::new(16, 16);
        let mask = nyquist_mask(8, 8, 6);
        let a = render(&w, &grid, &arch, &mask).unwrap();
        let b = render(&w, &grid, &arch, &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tape_render_matches_and_differentiates() {
        let arch = InrArchitecture::new(3, 5, 2, 2);
        let grid = CoordinateGrid::new(4, 3);
        let mask = FrequencyMask::all_pass(2);
        let plan = RenderPlan::new(&arch, grid, &mask);
        let d = arch.param_count();
        let w0 = random_weights(&arch, 1);
        let w1 = random_weights(&arch, 2);
        let mut data = w0.0.clone();
        data.extend_from_slice(&w1.0);

        let mut tape = Tape::new();
        let wv = tape.param(data.clone(), &[2, d]);
        let out = plan.render(&mut tape, wv);
        assert_eq!(tape.shape(out), &[2, 4, 3, 2]);
        let ref0 = render(&w0, &grid, &arch, &mask).unwrap();
        let ref1 = render(&w1, &grid, &arch, &mask).unwrap();
        let vals = tape.value(out);
        for (a, b) in vals.iter().zip(ref0.pixels.iter().chain(&ref1.pixels)) {
            assert!((a - b).abs() < 1e-6);
        }

        let target = tape.constant((0..vals.len()).map(|i| (i as f32 * 0.3).sin()).collect(), &[2, 4, 3, 2]);
        let loss = tape.mse(out, target);
        let grads = tape.backward(loss);
        let g = grads.get(wv).unwrap().to_vec();

        let loss_at = |d: &[f32]| {
            let mut t = Tape::new();
            let wv = t.constant(d.to_vec(), &[2, arch.param_count()]);
            let out = plan.render(&mut t, wv);
            let tv = t.constant((0..48).map(|i| (i as f32 * 0.3).sin()).collect(), &[2, 4, 3, 2]);
            let l = t.mse(out, tv);
            t.scalar(l) as f64
        };
        let eps = 1e-3;
        for i in (0..data.len()).step_by(7) {
            let mut p = data.clone();
            p[i] += eps;
            let mut m = data.clone();
            m[i] -= eps;
            let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * eps as f64);
            assert!((fd - g[i] as f64).abs() < 1e-2 * (1.0 + fd.abs()), "i={i} fd={fd} g={}", g[i]);
        }
    }

    #[test]
    fn flatten_inverts_unflatten() {
        let arch = InrArchitecture::default();
        let w = random_weights(&arch, 9);
        let layers = unflatten(&w, &arch).unwrap();
        assert_eq!(flatten(&layers), w);
    }
}
