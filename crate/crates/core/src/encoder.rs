//! Strided convolutional encoder mapping frames to weight-space offsets.
//!
//! Each convolution uses zero "same" padding (the odd pixel of padding goes
//! to the bottom/right edge), followed by ReLU. The final feature map is
//! flattened in `H, W, C` order and projected linearly (no activation) to
//! `d_z` values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::inr::Frame;
use crate::nn::{uniform_fan_in, uniform_he, ParamSet, Tensor};
use crate::tape::{CustomOp, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub out_dim: usize,
    /// `(H, W, C)` of accepted frames.
    pub input_shape: (usize, usize, usize),
}

impl EncoderConfig {
    pub fn new(input_shape: (usize, usize, usize), conv_channels: Vec<usize>, out_dim: usize) -> Self {
        Self {
            conv_channels,
            kernel: 3,
            stride: 2,
            out_dim,
            input_shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 || self.kernel < 1 || self.out_dim < 1 {
            return Err(Error::Config("encoder stride, kernel and out_dim must be positive".into()));
        }
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Config("encoder input shape must be non-empty".into()));
        }
        Ok(())
    }

    /// Spatial dims and channel count of every convolution output.
    pub fn feature_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w, _) = self.input_shape;
        self.conv_channels
            .iter()
            .map(|&c| {
                h = h.div_ceil(self.stride);
                w = w.div_ceil(self.stride);
                (h, w, c)
            })
            .collect()
    }

    pub fn flat_dim(&self) -> usize {
        match self.feature_shapes().last() {
            Some(&(h, w, c)) => h * w * c,
            None => self.input_shape.0 * self.input_shape.1 * self.input_shape.2,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut cin = self.input_shape.2;
        let mut total = 0;
        for &c in &self.conv_channels {
            total += c * self.kernel * self.kernel * cin + c;
            cin = c;
        }
        total + self.flat_dim() * self.out_dim + self.out_dim
    }
}

/// Encoded weight-space offset. Stored in `f64` so that sums of `f32`
/// network outputs are formed exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState(pub Vec<f64>);

impl LatentState {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn from_f32(v: &[f32]) -> Self {
        Self(v.iter().map(|&x| x as f64).collect())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&x| x as f32).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

/// Fresh encoder parameters, reproducible from `seed`.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<Encoder> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let k = config.kernel;
    let mut cin = config.input_shape.2;
    for (i, &c) in config.conv_channels.iter().enumerate() {
        let fan_in = k * k * cin;
        params.push(
            format!("conv{i}.weight"),
            Tensor::new(vec![c, k, k, cin], uniform_he(&mut rng, fan_in, c * fan_in)),
        );
        params.push(
            format!("conv{i}.bias"),
            Tensor::new(vec![c], uniform_fan_in(&mut rng, fan_in, c)),
        );
        cin = c;
    }
    let flat = config.flat_dim();
    params.push(
        "proj.weight",
        Tensor::new(
            vec![config.out_dim, flat],
            uniform_fan_in(&mut rng, flat, config.out_dim * flat),
        ),
    );
    params.push(
        "proj.bias",
        Tensor::new(vec![config.out_dim], uniform_fan_in(&mut rng, flat, config.out_dim)),
    );
    Ok(Encoder {
        config: config.clone(),
        params,
    })
}

impl Encoder {
    /// `frames: [N, H, W, C]` to `[N, d_z]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], frames: Var) -> Var {
        let shape = tape.shape(frames).to_vec();
        let (h, w, c) = self.config.input_shape;
        assert_eq!(&shape[1..], &[h, w, c], "encoder input shape");
        let n = shape[0];
        let mut x = frames;
        let mut dims = (h, w, c);
        for i in 0..self.config.conv_channels.len() {
            let geom = ConvGeom::same(dims, self.config.conv_channels[i], self.config.kernel, self.config.stride);
            x = conv2d(tape, x, vars[2 * i], vars[2 * i + 1], n, geom);
            x = tape.relu(x);
            dims = (geom.out_h, geom.out_w, geom.cout);
        }
        let flat = tape.reshape(x, &[n, self.config.flat_dim()]);
        let nconv = self.config.conv_channels.len();
        tape.linear(flat, vars[2 * nconv], vars[2 * nconv + 1])
    }

    fn check_frame(&self, frame: &Frame) -> Result<()> {
        let (h, w, c) = self.config.input_shape;
        if frame.shape() != [h, w, c] {
            return Err(Error::shape("encoder input frame", &[h, w, c], &frame.shape()));
        }
        Ok(())
    }

    /// Encodes a batch of frames without recording gradients.
    pub fn encode_batch(&self, frames: &[Frame]) -> Result<Vec<LatentState>> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(frames.len() * frames[0].pixels.len());
        for f in frames {
            self.check_frame(f)?;
            data.extend_from_slice(&f.pixels);
        }
        let (h, w, c) = self.config.input_shape;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(data, &[frames.len(), h, w, c]);
        let z = self.forward(&mut tape, &vars, x);
        Ok(tape
            .value(z)
            .chunks_exact(self.config.out_dim)
            .map(LatentState::from_f32)
            .collect())
    }
}

pub fn encode(frame: &Frame, encoder: &Encoder) -> Result<LatentState> {
    Ok(encoder.encode_batch(std::slice::from_ref(frame))?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    in_h: usize,
    in_w: usize,
    cin: usize,
    out_h: usize,
    out_w: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn same((h, w, cin): (usize, usize, usize), cout: usize, kernel: usize, stride: usize) -> Self {
        let out_h = h.div_ceil(stride);
        let out_w = w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + kernel).saturating_sub(h);
        let pad_w = ((out_w - 1) * stride + kernel).saturating_sub(w);
        Self {
            in_h: h,
            in_w: w,
            cin,
            out_h,
            out_w,
            cout,
            kernel,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    /// Input pixel feeding output `(oy, ox)` at tap `(ky, kx)`, if inside.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.in_h && ix < self.in_w).then_some((iy, ix))
    }
}

fn im2col(input: &[f32], n: usize, g: &ConvGeom) -> Vec<f32> {
    let patch = g.patch();
    let mut cols = vec![0.0; n * g.out_h * g.out_w * patch];
    let img = g.in_h * g.in_w * g.cin;
    for b in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * patch;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let src = b * img + (iy * g.in_w + ix) * g.cin;
                            let dst = row + (ky * g.kernel + kx) * g.cin;
                            cols[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], n: usize, g: &ConvGeom, out: &mut [f32]) {
    let patch = g.patch();
    let img = g.in_h * g.in_w * g.cin;
    for b in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * patch;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let dst = b * img + (iy * g.in_w + ix) * g.cin;
                            let src = row + (ky * g.kernel + kx) * g.cin;
                            for c in 0..g.cin {
                                out[dst + c] += cols[src + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    geom: ConvGeom,
    batch: usize,
    cols: Vec<f32>,
}

fn conv2d(tape: &mut Tape, input: Var, weight: Var, bias: Var, n: usize, geom: ConvGeom) -> Var {
    let cols = im2col(tape.value(input), n, &geom);
    let rows = n * geom.out_h * geom.out_w;
    let mut out = vec![0.0; rows * geom.cout];
    gemm(rows, geom.patch(), geom.cout, &cols, false, tape.value(weight), true, 0.0, &mut out);
    let b = tape.value(bias);
    for row in out.chunks_exact_mut(geom.cout) {
        row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
    }
    let op = Conv2dOp {
        geom,
        batch: n,
        cols,
    };
    tape.custom(
        vec![input, weight, bias],
        out,
        vec![n, geom.out_h, geom.out_w, geom.cout],
        Box::new(op),
    )
}

impl CustomOp for Conv2dOp {
    fn backward(
        &self,
        inputs: &[&[f32]],
        _output: &[f32],
        g: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let geom = &self.geom;
        let rows = self.batch * geom.out_h * geom.out_w;
        let patch = geom.patch();
        let gin = needs[0].then(|| {
            let mut dcols = vec![0.0; rows * patch];
            gemm(rows, geom.cout, patch, g, false, inputs[1], false, 0.0, &mut dcols);
            let mut dx = vec![0.0; inputs[0].len()];
            col2im(&dcols, self.batch, geom, &mut dx);
            dx
        });
        let gw = needs[1].then(|| {
            let mut dw = vec![0.0; geom.cout * patch];
            gemm(geom.cout, rows, patch, g, true, &self.cols, false, 0.0, &mut dw);
            dw
        });
        let gb = needs[2].then(|| {
            let mut db = vec![0.0; geom.cout];
            for row in g.chunks_exact(geom.cout) {
                db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            db
        });
        vec![gin, gw, gb]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn mnist_config() -> EncoderConfig {
        EncoderConfig::new((64, 64, 1), vec![64, 128, 256, 512], 961)
    }

    #[test]
    fn mnist_shape_arithmetic() {
        let cfg = mnist_config();
        assert_eq!(
            cfg.feature_shapes(),
            vec![(32, 32, 64), (16, 16, 128), (8, 8, 256), (4, 4, 512)]
        );
        assert_eq!(cfg.flat_dim(), 8192);
    }

    #[test]
    fn mnist_parameter_budget() {
        let cfg = mnist_config();
        let enc = init_encoder(&cfg, 0).unwrap();
        assert_eq!(enc.params.numel(), cfg.param_count());
        let budget = 9_423_297f64;
        let rel = (enc.params.numel() as f64 - budget).abs() / budget;
        assert!(rel <= 0.2, "relative deviation {rel}");
        assert_eq!(enc.params.numel(), 9_423_297);
    }

    #[test]
    fn seeds_control_init() {
        let cfg = EncoderConfig::new((16, 16, 1), vec![4, 8], 20);
        let a = init_encoder(&cfg, 7).unwrap();
        let b = init_encoder(&cfg, 7).unwrap();
        let c = init_encoder(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }

    fn random_frame(h: usize, w: usize, c: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(h, w, c, (0..h * w * c).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn encode_is_deterministic_with_right_length() {
        let cfg = EncoderConfig::new((16, 12, 3), vec![4, 8], 37);
        let enc = init_encoder(&cfg, 1).unwrap();
        let f = random_frame(16, 12, 3, 2);
        let a = encode(&f, &enc).unwrap();
        let b = encode(&f, &enc).unwrap();
        assert_eq!(a.len(), 37);
        assert_eq!(a, b);
    }

    #[test]
    fn mnist_encode_runs() {
        let cfg = mnist_config();
        let enc = init_encoder(&cfg, 0).unwrap();
        let z = encode(&random_frame(64, 64, 1, 0), &enc).unwrap();
        assert_eq!(z.len(), 961);
        assert!(z.is_finite());
    }

    #[test]
    fn wrong_frame_shape_rejected() {
        let cfg = EncoderConfig::new((64, 64, 1), vec![2], 5);
        let enc = init_encoder(&cfg, 0).unwrap();
        let err = encode(&random_frame(63, 64, 1, 0), &enc).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    /// Direct convolution loop, independent of im2col/gemm.
    fn conv_oracle(x: &[f32], w: &[f32], b: &[f32], g: &ConvGeom) -> Vec<f32> {
        let mut out = vec![0.0; g.out_h * g.out_w * g.cout];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for co in 0..g.cout {
                    let mut s = b[co] as f64;
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                continue;
                            }
                            for ci in 0..g.cin {
                                let xv = x[((iy as usize) * g.in_w + ix as usize) * g.cin + ci];
                                let wv = w[((co * g.kernel + ky) * g.kernel + kx) * g.cin + ci];
                                s += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[(oy * g.out_w + ox) * g.cout + co] = s as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop_and_gradient() {
        let geom = ConvGeom::same((7, 6, 2), 3, 3, 2);
        assert_eq!((geom.out_h, geom.out_w), (4, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f32> = (0..7 * 6 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..3 * 9 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let xv = tape.param(x.clone(), &[1, 7, 6, 2]);
        let wv = tape.param(w.clone(), &[3, 3, 3, 2]);
        let bv = tape.param(b.clone(), &[3]);
        let y = conv2d(&mut tape, xv, wv, bv, 1, geom);
        let want = conv_oracle(&x, &w, &b, &geom);
        for (a, e) in tape.value(y).iter().zip(&want) {
            assert!((a - e).abs() < 1e-5);
        }
        let sq = tape.square(y);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss);
        let loss_of = |x: &[f32], w: &[f32]| -> f64 {
            conv_oracle(x, w, &b, &geom).iter().map(|v| (*v as f64).powi(2)).sum()
        };
        let eps = 1e-3;
        let gx = grads.get(xv).unwrap();
        for i in (0..x.len()).step_by(5) {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += eps;
            m[i] -= eps;
            let fd = (loss_of(&p, &w) - loss_of(&m, &w)) / (2.0 * eps as f64);
            assert!((fd - gx[i] as f64).abs() < 1e-2 * (1.0 + fd.abs()));
        }
        let gw = grads.get(wv).unwrap();
        for i in (0..w.len()).step_by(3) {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[i] += eps;
            m[i] -= eps;
            let fd = (loss_of(&x, &p) - loss_of(&x, &m)) / (2.0 * eps as f64);
            assert!((fd - gw[i] as f64).abs() < 1e-2 * (1.0 + fd.abs()));
        }
    }
}
