//! Inverse dynamics, forward dynamics, the generative control model and the
//! optional action codebook.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::LatentState;
use crate::error::{Error, Result};
use crate::nn::{uniform_fan_in, MlpShape, ParamSet, Tensor};
use crate::tape::{CustomOp, Tape, Var};

/// Latent control vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Action(pub Vec<f32>);

impl Action {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dim(what, expected, actual))
    }
}

fn row_constant(tape: &mut Tape, v: Vec<f32>) -> Var {
    let n = v.len();
    tape.constant(v, &[1, n])
}

// ---------------------------------------------------------------------------
// IDM

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdmConfig {
    pub latent_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    /// Number of linear layers.
    pub depth: usize,
}

impl IdmConfig {
    pub fn new(latent_dim: usize, action_dim: usize) -> Self {
        Self {
            latent_dim,
            action_dim,
            hidden: latent_dim,
            depth: 3,
        }
    }

    pub fn mlp(&self) -> MlpShape {
        MlpShape::new(2 * self.latent_dim, self.hidden, self.action_dim, self.depth)
    }

    pub fn param_count(&self) -> usize {
        self.mlp().param_count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Idm {
    pub config: IdmConfig,
    pub params: ParamSet,
}

pub fn init_idm(config: &IdmConfig, seed: u64) -> Result<Idm> {
    if config.depth < 1 || config.action_dim < 1 || config.latent_dim < 1 {
        return Err(Error::Config("IDM dimensions must be positive".into()));
    }
    let mut params = ParamSet::new();
    config
        .mlp()
        .init_into(&mut params, "", &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Idm {
        config: config.clone(),
        params,
    })
}

impl Idm {
    /// `[B, d_z] x [B, d_z] -> [B, d_u]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], z: Var, z_next: Var) -> Var {
        let x = tape.concat_cols(&[z, z_next]);
        self.config.mlp().forward(tape, vars, x)
    }

    pub fn infer(&self, z_t: &LatentState, z_next: &LatentState) -> Result<Action> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        self.infer_bound(&mut tape, &vars, z_t, z_next)
    }

    pub(crate) fn infer_bound(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z_t: &LatentState,
        z_next: &LatentState,
    ) -> Result<Action> {
        check_len("IDM z_t", self.config.latent_dim, z_t.len())?;
        check_len("IDM z_next", self.config.latent_dim, z_next.len())?;
        let mark = tape.len();
        let a = row_constant(tape, z_t.to_f32());
        let b = row_constant(tape, z_next.to_f32());
        let u = self.forward(tape, vars, a, b);
        let out = Action(tape.value(u).to_vec());
        tape.truncate(mark);
        Ok(out)
    }
}

pub fn idm_infer(z_t: &LatentState, z_next: &LatentState, idm: &Idm) -> Result<Action> {
    idm.infer(z_t, z_next)
}

// ---------------------------------------------------------------------------
// FDM

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdmMode {
    Additive,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FdmConfig {
    pub mode: FdmMode,
    pub latent_dim: usize,
    pub action_dim: usize,
    pub hidden_width: usize,
    /// Linear layers per network.
    pub depth: usize,
}

impl FdmConfig {
    /// Two depth-4 networks of width `2 d_z`.
    pub fn additive(latent_dim: usize, action_dim: usize) -> Self {
        Self {
            mode: FdmMode::Additive,
            latent_dim,
            action_dim,
            hidden_width: 2 * latent_dim,
            depth: 4,
        }
    }

    /// Joint network with the same depth whose width brings its parameter
    /// count closest to `additive`'s.
    pub fn joint_matched(additive: &FdmConfig) -> Self {
        let target = additive.param_count() as i64;
        let mut cfg = FdmConfig {
            mode: FdmMode::Joint,
            ..additive.clone()
        };
        if cfg.depth < 2 {
            // A single layer has no hidden width to tune.
            return cfg;
        }
        let mut best = (i64::MAX, 1);
        let mut h = 1;
        loop {
            cfg.hidden_width = h;
            let diff = cfg.param_count() as i64 - target;
            if diff.abs() < best.0 {
                best = (diff.abs(), h);
            }
            if diff > 0 {
                break;
            }
            h += 1;
        }
        cfg.hidden_width = best.1;
        cfg
    }

    pub fn content_mlp(&self) -> MlpShape {
        MlpShape::new(self.latent_dim, self.hidden_width, self.latent_dim, self.depth)
    }

    pub fn motion_mlp(&self) -> MlpShape {
        MlpShape::new(self.action_dim, self.hidden_width, self.latent_dim, self.depth)
    }

    pub fn joint_mlp(&self) -> MlpShape {
        MlpShape::new(
            self.latent_dim + self.action_dim,
            self.hidden_width,
            self.latent_dim,
            self.depth,
        )
    }

    pub fn param_count(&self) -> usize {
        match self.mode {
            FdmMode::Additive => self.content_mlp().param_count() + self.motion_mlp().param_count(),
            FdmMode::Joint => self.joint_mlp().param_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fdm {
    pub config: FdmConfig,
    pub params: ParamSet,
}

pub fn init_fdm(config: &FdmConfig, seed: u64) -> Result<Fdm> {
    if config.depth < 1 || config.hidden_width < 1 {
        return Err(Error::Config("FDM depth and width must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    match config.mode {
        FdmMode::Additive => {
            config.content_mlp().init_into(&mut params, "content.", &mut rng);
            config.motion_mlp().init_into(&mut params, "motion.", &mut rng);
        }
        FdmMode::Joint => config.joint_mlp().init_into(&mut params, "joint.", &mut rng),
    }
    Ok(Fdm {
        config: config.clone(),
        params,
    })
}

impl Fdm {
    /// Additive mode: `(A(z), Some(B(u)))`; joint mode: `(f([z, u]), None)`.
    pub fn branches(&self, tape: &mut Tape, vars: &[Var], z: Var, u: Var) -> (Var, Option<Var>) {
        match self.config.mode {
            FdmMode::Additive => {
                let split = 2 * self.config.depth;
                let a = self.config.content_mlp().forward(tape, &vars[..split], z);
                let b = self.config.motion_mlp().forward(tape, &vars[split..], u);
                (a, Some(b))
            }
            FdmMode::Joint => {
                let x = tape.concat_cols(&[z, u]);
                (self.config.joint_mlp().forward(tape, vars, x), None)
            }
        }
    }

    /// Differentiable next state `[B, d_z]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], z: Var, u: Var) -> Var {
        match self.branches(tape, vars, z, u) {
            (a, Some(b)) => tape.add(a, b),
            (y, None) => y,
        }
    }

    pub fn step(&self, z_t: &LatentState, u_t: &Action) -> Result<LatentState> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        self.step_bound(&mut tape, &vars, z_t, u_t)
    }

    pub(crate) fn step_bound(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z_t: &LatentState,
        u_t: &Action,
    ) -> Result<LatentState> {
        check_len("FDM z_t", self.config.latent_dim, z_t.len())?;
        check_len("FDM u_t", self.config.action_dim, u_t.len())?;
        let mark = tape.len();
        let z = row_constant(tape, z_t.to_f32());
        let u = row_constant(tape, u_t.0.clone());
        let out = match self.branches(tape, vars, z, u) {
            // Summed in f64 so the action's contribution cancels exactly.
            (a, Some(b)) => LatentState(
                tape.value(a)
                    .iter()
                    .zip(tape.value(b))
                    .map(|(&x, &y)| x as f64 + y as f64)
                    .collect(),
            ),
            (y, None) => LatentState::from_f32(tape.value(y)),
        };
        tape.truncate(mark);
        Ok(out)
    }
}

pub fn fdm_step(z_t: &LatentState, u_t: &Action, fdm: &Fdm) -> Result<LatentState> {
    fdm.step(z_t, u_t)
}

// ---------------------------------------------------------------------------
// GCM

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcmKind {
    Gru,
    Lstm,
    Transformer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GcmConfig {
    pub kind: GcmKind,
    pub latent_dim: usize,
    pub action_dim: usize,
    /// Recurrent state size, decoder width, or transformer token width.
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_t: usize,
}

const TRANSFORMER_BLOCK_TENSORS: usize = 16;
const LN_EPS: f32 = 1e-5;

impl GcmConfig {
    pub fn new(kind: GcmKind, latent_dim: usize, action_dim: usize) -> Self {
        Self {
            kind,
            latent_dim,
            action_dim,
            hidden: 256,
            blocks: 4,
            heads: 8,
            mlp_ratio: 4,
            max_t: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.max_t == 0 {
            return Err(Error::Config("GCM hidden and max_t must be positive".into()));
        }
        if self.kind == GcmKind::Transformer
            && (self.heads == 0 || self.hidden % self.heads != 0 || self.blocks == 0)
        {
            return Err(Error::Config(format!(
                "transformer width {} not divisible into {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.latent_dim + self.action_dim
    }

    fn gates(&self) -> usize {
        match self.kind {
            GcmKind::Gru => 3,
            GcmKind::Lstm => 4,
            GcmKind::Transformer => 0,
        }
    }

    fn decoder(&self) -> MlpShape {
        MlpShape::new(self.hidden + self.latent_dim, self.hidden, self.action_dim, 2)
    }

    fn token_mlp(&self) -> MlpShape {
        MlpShape::new(self.hidden, self.mlp_ratio * self.hidden, self.hidden, 2)
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        match self.kind {
            GcmKind::Gru | GcmKind::Lstm => {
                let g = self.gates() * h;
                let bias_n = if self.kind == GcmKind::Gru { h } else { 0 };
                g * self.input_dim() + g * h + g + bias_n + self.decoder().param_count()
            }
            GcmKind::Transformer => {
                let block = 4 * (h * h + h) + 4 * h + self.token_mlp().param_count();
                (self.input_dim() + 1) * h
                    + self.max_t * h
                    + self.blocks * block
                    + h * self.action_dim
                    + self.action_dim
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gcm {
    pub config: GcmConfig,
    pub params: ParamSet,
}

fn push_uniform(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: String, shape: Vec<usize>, fan_in: usize) {
    let n = shape.iter().product();
    params.push(name, Tensor::new(shape, uniform_fan_in(rng, fan_in, n)));
}

pub fn init_gcm(config: &GcmConfig, seed: u64) -> Result<Gcm> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let h = config.hidden;
    match config.kind {
        GcmKind::Gru | GcmKind::Lstm => {
            let g = config.gates() * h;
            push_uniform(&mut params, &mut rng, "cell.weight_ih".into(), vec![g, config.input_dim()], h);
            push_uniform(&mut params, &mut rng, "cell.weight_hh".into(), vec![g, h], h);
            push_uniform(&mut params, &mut rng, "cell.bias".into(), vec![g], h);
            if config.kind == GcmKind::Gru {
                push_uniform(&mut params, &mut rng, "cell.bias_n".into(), vec![h], h);
            }
            config.decoder().init_into(&mut params, "decoder.", &mut rng);
        }
        GcmKind::Transformer => {
            let d_in = config.input_dim();
            push_uniform(&mut params, &mut rng, "embed.weight".into(), vec![h, d_in], d_in);
            push_uniform(&mut params, &mut rng, "embed.bias".into(), vec![h], d_in);
            push_uniform(&mut params, &mut rng, "position".into(), vec![config.max_t, h], h);
            for b in 0..config.blocks {
                let p = format!("block{b}.");
                params.push(format!("{p}ln1.gamma"), Tensor::new(vec![h], vec![1.0; h]));
                params.push(format!("{p}ln1.beta"), Tensor::zeros(vec![h]));
                for proj in ["query", "key", "value", "out"] {
                    push_uniform(&mut params, &mut rng, format!("{p}{proj}.weight"), vec![h, h], h);
                    push_uniform(&mut params, &mut rng, format!("{p}{proj}.bias"), vec![h], h);
                }
                params.push(format!("{p}ln2.gamma"), Tensor::new(vec![h], vec![1.0; h]));
                params.push(format!("{p}ln2.beta"), Tensor::zeros(vec![h]));
                config.token_mlp().init_into(&mut params, &format!("{p}mlp."), &mut rng);
            }
            push_uniform(&mut params, &mut rng, "head.weight".into(), vec![config.action_dim, h], h);
            push_uniform(&mut params, &mut rng, "head.bias".into(), vec![config.action_dim], h);
        }
    }
    debug_assert_eq!(params.numel(), config.param_count());
    Ok(Gcm {
        config: config.clone(),
        params,
    })
}

/// Inference-time memory.
#[derive(Clone, Debug, PartialEq)]
pub enum GcmMemory {
    Gru {
        hidden: Vec<f32>,
    },
    Lstm {
        hidden: Vec<f32>,
        cell: Vec<f32>,
    },
    Transformer {
        /// `max_t x width` token buffer; row `t` (1-based) lives at index `t - 1`.
        rows: Vec<f32>,
        width: usize,
        written: Vec<bool>,
        /// Next step expected to be written.
        cursor: usize,
    },
}

impl GcmMemory {
    /// Token row for step `t` (1-based).
    pub fn row(&self, t: usize) -> Option<&[f32]> {
        match self {
            GcmMemory::Transformer { rows, width, .. } if t >= 1 && t * width <= rows.len() => {
                Some(&rows[(t - 1) * width..t * width])
            }
            _ => None,
        }
    }

    pub fn row_mut(&mut self, t: usize) -> Option<&mut [f32]> {
        match self {
            GcmMemory::Transformer { rows, width, .. } if t >= 1 && t * *width <= rows.len() => {
                Some(&mut rows[(t - 1) * *width..t * *width])
            }
            _ => None,
        }
    }
}

pub fn gcm_init(config: &GcmConfig) -> GcmMemory {
    let h = config.hidden;
    match config.kind {
        GcmKind::Gru => GcmMemory::Gru { hidden: vec![0.0; h] },
        GcmKind::Lstm => GcmMemory::Lstm {
            hidden: vec![0.0; h],
            cell: vec![0.0; h],
        },
        GcmKind::Transformer => GcmMemory::Transformer {
            rows: vec![0.0; config.max_t * h],
            width: h,
            written: vec![false; config.max_t],
            cursor: 1,
        },
    }
}

/// Memory recorded on a tape, batched over `B` sequences.
#[derive(Clone, Debug)]
pub enum MemoryVars {
    Gru { hidden: Var },
    Lstm { hidden: Var, cell: Var },
    /// Token rows `1..` written so far, each `[B, width]`.
    Transformer { rows: Vec<Var> },
}

impl Gcm {
    pub fn zero_memory(&self, tape: &mut Tape, batch: usize) -> MemoryVars {
        let h = self.config.hidden;
        match self.config.kind {
            GcmKind::Gru => MemoryVars::Gru {
                hidden: tape.constant(vec![0.0; batch * h], &[batch, h]),
            },
            GcmKind::Lstm => MemoryVars::Lstm {
                hidden: tape.constant(vec![0.0; batch * h], &[batch, h]),
                cell: tape.constant(vec![0.0; batch * h], &[batch, h]),
            },
            GcmKind::Transformer => MemoryVars::Transformer { rows: Vec::new() },
        }
    }

    fn recurrent_decode(&self, tape: &mut Tape, vars: &[Var], hidden: Var, z: Var) -> Var {
        let dec = &vars[vars.len() - 4..];
        let x = tape.concat_cols(&[hidden, z]);
        self.config.decoder().forward(tape, dec, x)
    }

    fn embed(&self, tape: &mut Tape, vars: &[Var], z: Var, u: Var) -> Var {
        let x = tape.concat_cols(&[z, u]);
        tape.linear(x, vars[0], vars[1])
    }

    fn attention(&self, tape: &mut Tape, bv: &[Var], x: Var, batch: usize, len: usize) -> Var {
        let h = self.config.hidden;
        let heads = self.config.heads;
        let hd = h / heads;
        let q = tape.linear(x, bv[2], bv[3]);
        let k = tape.linear(x, bv[4], bv[5]);
        let v = tape.linear(x, bv[6], bv[7]);
        let mut mask = vec![0.0; len * len];
        for i in 0..len {
            for j in i + 1..len {
                mask[i * len + j] = f32::NEG_INFINITY;
            }
        }
        let mask = tape.constant(mask, &[len, len]);
        let scale = 1.0 / (hd as f32).sqrt();
        let mut per_seq = Vec::with_capacity(batch);
        for b in 0..batch {
            let (qb, kb, vb) = (
                tape.slice_rows(q, b * len, len),
                tape.slice_rows(k, b * len, len),
                tape.slice_rows(v, b * len, len),
            );
            let mut per_head = Vec::with_capacity(heads);
            for hh in 0..heads {
                let qh = tape.slice_cols(qb, hh * hd, hd);
                let kh = tape.slice_cols(kb, hh * hd, hd);
                let vh = tape.slice_cols(vb, hh * hd, hd);
                let s = tape.matmul_t(qh, false, kh, true);
                let s = tape.scale(s, scale);
                let s = tape.add(s, mask);
                let p = tape.softmax_rows(s);
                per_head.push(tape.matmul(p, vh));
            }
            per_seq.push(tape.concat_cols(&per_head));
        }
        let o = tape.concat_rows(&per_seq);
        tape.linear(o, bv[8], bv[9])
    }

    fn transformer_decode(&self, tape: &mut Tape, vars: &[Var], rows: &[Var], z: Var, t: usize) -> Var {
        let batch = tape.shape(z)[0];
        let zero_u = tape.constant(
            vec![0.0; batch * self.config.action_dim],
            &[batch, self.config.action_dim],
        );
        let query = self.embed(tape, vars, z, zero_u);
        let len = t;
        let mut seq: Vec<Var> = rows[..t - 1].to_vec();
        seq.push(query);
        // Time-major [len * B, h] to batch-major.
        let stacked = tape.concat_rows(&seq);
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| (0..len).map(move |r| r * batch + b))
            .collect();
        let x = tape.gather_rows(stacked, &order);
        let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let pos = tape.gather_rows(vars[2], &pos_idx);
        let mut x = tape.add(x, pos);
        for b in 0..self.config.blocks {
            let bv = &vars[3 + b * TRANSFORMER_BLOCK_TENSORS..3 + (b + 1) * TRANSFORMER_BLOCK_TENSORS];
            let n1 = tape.layer_norm(x, bv[0], bv[1], LN_EPS);
            let a = self.attention(tape, bv, n1, batch, len);
            x = tape.add(x, a);
            let n2 = tape.layer_norm(x, bv[10], bv[11], LN_EPS);
            let m = tape.linear(n2, bv[12], bv[13]);
            let m = tape.gelu(m);
            let m = tape.linear(m, bv[14], bv[15]);
            x = tape.add(x, m);
        }
        let last: Vec<usize> = (0..batch).map(|b| b * len + len - 1).collect();
        let y = tape.gather_rows(x, &last);
        let n = vars.len();
        tape.linear(y, vars[n - 2], vars[n - 1])
    }

    /// Action at step `t` (1-based) from memory and the current state `[B, d_z]`.
    pub fn decode(&self, tape: &mut Tape, vars: &[Var], memory: &MemoryVars, z: Var, t: usize) -> Var {
        match memory {
            MemoryVars::Gru { hidden } | MemoryVars::Lstm { hidden, .. } => {
                self.recurrent_decode(tape, vars, *hidden, z)
            }
            MemoryVars::Transformer { rows } => {
                assert!(rows.len() + 1 >= t, "transformer decode: rows before {t} missing");
                self.transformer_decode(tape, vars, rows, z, t)
            }
        }
    }

    /// Memory after absorbing `(z_t, u_t)` at step `t`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        memory: MemoryVars,
        z: Var,
        u: Var,
        t: usize,
    ) -> MemoryVars {
        let h = self.config.hidden;
        match memory {
            MemoryVars::Gru { hidden } => {
                let x = tape.concat_cols(&[z, u]);
                let ih = tape.linear(x, vars[0], vars[2]);
                let hh = tape.matmul_t(hidden, false, vars[1], true);
                let (i0, i1, i2) = (tape.slice_cols(ih, 0, h), tape.slice_cols(ih, h, h), tape.slice_cols(ih, 2 * h, h));
                let (h0, h1, h2) = (tape.slice_cols(hh, 0, h), tape.slice_cols(hh, h, h), tape.slice_cols(hh, 2 * h, h));
                let r = tape.add(i0, h0);
                let r = tape.sigmoid(r);
                let zg = tape.add(i1, h1);
                let zg = tape.sigmoid(zg);
                let hn = tape.add_bias(h2, vars[3]);
                let rn = tape.mul(r, hn);
                let n = tape.add(i2, rn);
                let n = tape.tanh(n);
                let diff = tape.sub(hidden, n);
                let zd = tape.mul(zg, diff);
                MemoryVars::Gru {
                    hidden: tape.add(n, zd),
                }
            }
            MemoryVars::Lstm { hidden, cell } => {
                let x = tape.concat_cols(&[z, u]);
                let ih = tape.linear(x, vars[0], vars[2]);
                let hh = tape.matmul_t(hidden, false, vars[1], true);
                let lin = tape.add(ih, hh);
                let gate = |tape: &mut Tape, k: usize| tape.slice_cols(lin, k * h, h);
                let i = gate(tape, 0);
                let f = gate(tape, 1);
                let g = gate(tape, 2);
                let o = gate(tape, 3);
                let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
                let fc = tape.mul(f, cell);
                let ig = tape.mul(i, g);
                let cell = tape.add(fc, ig);
                let tc = tape.tanh(cell);
                MemoryVars::Lstm {
                    hidden: tape.mul(o, tc),
                    cell,
                }
            }
            MemoryVars::Transformer { mut rows } => {
                assert_eq!(rows.len() + 1, t, "transformer rows must be written in order");
                rows.push(self.embed(tape, vars, z, u));
                MemoryVars::Transformer { rows }
            }
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        let max = match self.config.kind {
            GcmKind::Transformer => self.config.max_t,
            _ => usize::MAX,
        };
        if t < 1 || t > max {
            return Err(Error::StepOutOfRange { t, max });
        }
        Ok(())
    }

    fn memory_vars(&self, tape: &mut Tape, memory: &GcmMemory, t: usize) -> Result<MemoryVars> {
        let h = self.config.hidden;
        let check = |v: &[f32]| check_len("GCM memory", h, v.len());
        Ok(match memory {
            GcmMemory::Gru { hidden } if self.config.kind == GcmKind::Gru => {
                check(hidden)?;
                MemoryVars::Gru {
                    hidden: row_constant(tape, hidden.clone()),
                }
            }
            GcmMemory::Lstm { hidden, cell } if self.config.kind == GcmKind::Lstm => {
                check(hidden)?;
                check(cell)?;
                MemoryVars::Lstm {
                    hidden: row_constant(tape, hidden.clone()),
                    cell: row_constant(tape, cell.clone()),
                }
            }
            GcmMemory::Transformer { rows, width, .. } if self.config.kind == GcmKind::Transformer => {
                check_len("GCM token width", h, *width)?;
                check_len("GCM buffer", self.config.max_t * h, rows.len())?;
                // Only rows strictly before t are ever read.
                let rows = (1..t)
                    .map(|r| row_constant(tape, rows[(r - 1) * h..r * h].to_vec()))
                    .collect();
                MemoryVars::Transformer { rows }
            }
            _ => return Err(Error::Config("GCM memory kind does not match model".into())),
        })
    }

    pub fn decode_action(&self, memory: &GcmMemory, z_t: &LatentState, t: usize) -> Result<Action> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        self.decode_bound(&mut tape, &vars, memory, z_t, t)
    }

    pub(crate) fn decode_bound(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        memory: &GcmMemory,
        z_t: &LatentState,
        t: usize,
    ) -> Result<Action> {
        self.check_step(t)?;
        check_len("GCM z_t", self.config.latent_dim, z_t.len())?;
        let mark = tape.len();
        let mem = self.memory_vars(tape, memory, t)?;
        let z = row_constant(tape, z_t.to_f32());
        let u = self.decode(tape, vars, &mem, z, t);
        let out = Action(tape.value(u).to_vec());
        tape.truncate(mark);
        Ok(out)
    }

    pub fn encode_step(&self, memory: GcmMemory, z_t: &LatentState, u_t: &Action, t: usize) -> Result<GcmMemory> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        self.encode_bound(&mut tape, &vars, memory, z_t, u_t, t)
    }

    pub(crate) fn encode_bound(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        memory: GcmMemory,
        z_t: &LatentState,
        u_t: &Action,
        t: usize,
    ) -> Result<GcmMemory> {
        self.check_step(t)?;
        check_len("GCM z_t", self.config.latent_dim, z_t.len())?;
        check_len("GCM u_t", self.config.action_dim, u_t.len())?;
        let mark = tape.len();
        let z = row_constant(tape, z_t.to_f32());
        let u = row_constant(tape, u_t.0.clone());
        let out = match memory {
            GcmMemory::Transformer {
                mut rows,
                width,
                mut written,
                ..
            } => {
                if self.config.kind != GcmKind::Transformer {
                    return Err(Error::Config("GCM memory kind does not match model".into()));
                }
                check_len("GCM buffer", self.config.max_t * width, rows.len())?;
                if written[t - 1] {
                    return Err(Error::RowAlreadyWritten(t));
                }
                let token = self.embed(tape, vars, z, u);
                rows[(t - 1) * width..t * width].copy_from_slice(tape.value(token));
                written[t - 1] = true;
                GcmMemory::Transformer {
                    rows,
                    width,
                    written,
                    cursor: t + 1,
                }
            }
            recurrent => {
                let mem = self.memory_vars(tape, &recurrent, t)?;
                match self.encode(tape, vars, mem, z, u, t) {
                    MemoryVars::Gru { hidden } => GcmMemory::Gru {
                        hidden: tape.value(hidden).to_vec(),
                    },
                    MemoryVars::Lstm { hidden, cell } => GcmMemory::Lstm {
                        hidden: tape.value(hidden).to_vec(),
                        cell: tape.value(cell).to_vec(),
                    },
                    MemoryVars::Transformer { .. } => unreachable!(),
                }
            }
        };
        tape.truncate(mark);
        Ok(out)
    }
}

pub fn gcm_decode(memory: &GcmMemory, z_t: &LatentState, t: usize, gcm: &Gcm) -> Result<Action> {
    gcm.decode_action(memory, z_t, t)
}

pub fn gcm_encode(memory: GcmMemory, z_t: &LatentState, u_t: &Action, t: usize, gcm: &Gcm) -> Result<GcmMemory> {
    gcm.encode_step(memory, z_t, u_t, t)
}

// ---------------------------------------------------------------------------
// Codebook

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `[N, d_u]`.
    pub vectors: Tensor,
    pub ema_counts: Vec<f32>,
    pub ema_sums: Vec<f32>,
    pub decay: f32,
    pub commitment: f32,
}

pub fn init_codebook(size: usize, dim: usize, seed: u64) -> Result<Codebook> {
    if size == 0 {
        return Err(Error::EmptyCodebook);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = Tensor::new(vec![size, dim], uniform_fan_in(&mut rng, dim, size * dim));
    Ok(Codebook {
        ema_sums: vectors.data.clone(),
        ema_counts: vec![1.0; size],
        vectors,
        decay: 0.99,
        commitment: 0.25,
    })
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.vectors.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape[1]
    }

    pub fn entry(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.vectors.data[i * d..(i + 1) * d]
    }

    /// Nearest entry by Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, u: &[f32]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for i in 0..self.size() {
            let d: f64 = self
                .entry(i)
                .iter()
                .zip(u)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Moves each entry towards the mean of the rows assigned to it.
    pub fn ema_update(&mut self, rows: &[f32], assignments: &[usize]) {
        let d = self.dim();
        let n = self.size();
        let mut counts = vec![0.0f32; n];
        let mut sums = vec![0.0f32; n * d];
        for (row, &k) in rows.chunks_exact(d).zip(assignments) {
            counts[k] += 1.0;
            sums[k * d..(k + 1) * d]
                .iter_mut()
                .zip(row)
                .for_each(|(s, &v)| *s += v);
        }
        let g = self.decay;
        for k in 0..n {
            self.ema_counts[k] = g * self.ema_counts[k] + (1.0 - g) * counts[k];
        }
        let total: f32 = self.ema_counts.iter().sum();
        let eps = 1e-5;
        for k in 0..n {
            let smoothed = (self.ema_counts[k] + eps) / (total + n as f32 * eps) * total;
            for j in 0..d {
                let s = &mut self.ema_sums[k * d + j];
                *s = g * *s + (1.0 - g) * sums[k * d + j];
                self.vectors.data[k * d + j] = *s / smoothed;
            }
        }
    }
}

pub fn quantize(u: &Action, codebook: &Codebook) -> Result<(Action, usize)> {
    if codebook.size() == 0 {
        return Err(Error::EmptyCodebook);
    }
    check_len("action", codebook.dim(), u.len())?;
    let i = codebook.nearest(&u.0);
    Ok((Action(codebook.entry(i).to_vec()), i))
}

struct StraightThrough;

impl CustomOp for StraightThrough {
    fn backward(&self, _: &[&[f32]], _: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| g.to_vec())]
    }
}

/// Value of `quantized`, gradient of the identity with respect to `u`.
pub fn straight_through(tape: &mut Tape, u: Var, quantized: Vec<f32>) -> Var {
    let shape = tape.shape(u).to_vec();
    assert_eq!(quantized.len(), tape.value(u).len(), "straight_through length");
    tape.custom(vec![u], quantized, shape, Box::new(StraightThrough))
}

/// Quantizes every row of `u` on the tape, returning the pass-through
/// output and the chosen indices.
pub fn quantize_rows(tape: &mut Tape, u: Var, codebook: &Codebook) -> (Var, Vec<usize>) {
    let d = codebook.dim();
    let values = tape.value(u).to_vec();
    let idx: Vec<usize> = values.chunks_exact(d).map(|r| codebook.nearest(r)).collect();
    let q: Vec<f32> = idx.iter().flat_map(|&i| codebook.entry(i).to_vec()).collect();
    (straight_through(tape, u, q), idx)
}
