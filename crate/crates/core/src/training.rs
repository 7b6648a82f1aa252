//! Training phases, their losses, and the sequence augmentations.
//!
//! * phase 1: frame reconstruction through encoder and base weights.
//! * phase 2: latent transition regression with IDM and FDM; the encoder and
//!   base weights are frozen and the next state is a stop-gradient target.
//! * phase 3: the GCM regresses the frozen IDM's pseudo-actions.
//! * joint12: phases 1 and 2 together, with the transition supervised in
//!   pixel space through the renderer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::config::KvWriter;
use crate::dynamics::quantize_rows;
use crate::error::{Error, Result};
use crate::inr::{Frame, RenderPlan};
use crate::metrics::{gaussian_window, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use crate::model::{parse_bool, parse_num, ModelState};
use crate::nn::{ParamSet, Tensor};
use crate::synthdata::VideoDataset;
use crate::tape::{CustomOp, Gradients, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
    Three,
    Joint12,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::One => "1",
            Phase::Two => "2",
            Phase::Three => "3",
            Phase::Joint12 => "joint12",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(Phase::One),
            "2" => Ok(Phase::Two),
            "3" => Ok(Phase::Three),
            "joint12" => Ok(Phase::Joint12),
            _ => Err(Error::Config(format!("unknown phase `{s}`"))),
        }
    }

    fn trainable(self) -> Trainable {
        match self {
            Phase::One => Trainable { encoder: true, base: true, ..Trainable::NONE },
            Phase::Two => Trainable { idm: true, fdm: true, ..Trainable::NONE },
            Phase::Three => Trainable { gcm: true, ..Trainable::NONE },
            Phase::Joint12 => Trainable {
                encoder: true,
                base: true,
                idm: true,
                fdm: true,
                gcm: false,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub steps: usize,
    pub lambda_ssim: f32,
    pub seed: u64,
    pub augment_reverse: bool,
    pub augment_static: bool,
    /// Probability that a sampled sequence is replaced by its static-padded form.
    pub static_fraction: f64,
    /// Index of the first frame kept by the static augmentation.
    pub static_offset: usize,
    /// Largest whole-sequence shift in pixels; 0 disables translation.
    pub translate_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::One,
            learning_rate: 1e-4,
            batch_size: 8,
            steps: 1000,
            lambda_ssim: 0.1,
            seed: 0,
            augment_reverse: false,
            augment_static: false,
            static_fraction: 0.2,
            static_offset: 0,
            translate_max: 0,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "phase" => self.phase = Phase::parse(v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "lambda_ssim" => self.lambda_ssim = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "augment_reverse" => self.augment_reverse = parse_bool(key, v)?,
            "augment_static" => self.augment_static = parse_bool(key, v)?,
            "static_fraction" => self.static_fraction = parse_num(key, v)?,
            "static_offset" => self.static_offset = parse_num(key, v)?,
            "translate_max" => self.translate_max = parse_num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("phase", self.phase.name());
        w.put("learning_rate", self.learning_rate);
        w.put("batch_size", self.batch_size);
        w.put("steps", self.steps);
        w.put("lambda_ssim", self.lambda_ssim);
        w.put("seed", self.seed);
        w.put("augment_reverse", self.augment_reverse);
        w.put("augment_static", self.augment_static);
        w.put("static_fraction", self.static_fraction);
        w.put("static_offset", self.static_offset);
        w.put("translate_max", self.translate_max);
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size < 1 {
            return Err(Error::Config("learning_rate must be > 0 and batch_size >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.static_fraction) || self.lambda_ssim < 0.0 {
            return Err(Error::Config("static_fraction must lie in [0, 1] and lambda_ssim >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Augmentations

pub fn augment_reverse<T: Clone>(seq: &[T]) -> Vec<T> {
    seq.iter().rev().cloned().collect()
}

/// `(o_1, o_1, o_2, ..., o_P, o_P)` with `P = t - 2` frames from the front.
pub fn augment_static<T: Clone>(seq: &[T], t: usize) -> Result<Vec<T>> {
    augment_static_from(seq, t, 0)
}

/// As [`augment_static`], keeping frames from index `offset` on.
pub fn augment_static_from<T: Clone>(seq: &[T], t: usize, offset: usize) -> Result<Vec<T>> {
    if t < 3 {
        return Err(Error::Config(format!("static augmentation needs T >= 3, got {t}")));
    }
    let p = t - 2;
    if seq.len() < offset + p {
        return Err(Error::InsufficientFrames {
            needed: offset + p,
            available: seq.len(),
        });
    }
    let kept = &seq[offset..offset + p];
    let mut out = Vec::with_capacity(t);
    out.push(kept[0].clone());
    out.extend(kept.iter().cloned());
    out.push(kept[p - 1].clone());
    Ok(out)
}

/// Shifts every frame by `(dy, dx)` pixels, filling uncovered pixels with 0.
pub fn augment_translate(seq: &[Frame], dy: isize, dx: isize) -> Vec<Frame> {
    seq.iter()
        .map(|f| {
            let mut out = Frame::zeros(f.height, f.width, f.channels);
            for i in 0..f.height {
                let si = i as isize - dy;
                if si < 0 || si >= f.height as isize {
                    continue;
                }
                for j in 0..f.width {
                    let sj = j as isize - dx;
                    if sj < 0 || sj >= f.width as isize {
                        continue;
                    }
                    for c in 0..f.channels {
                        out.set(i, j, c, f.get(si as usize, sj as usize, c));
                    }
                }
            }
            out
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Differentiable SSIM

struct BlurValid {
    dims: [usize; 4],
    taps: Vec<f32>,
}

impl BlurValid {
    fn out_dims(&self) -> (usize, usize) {
        let k = self.taps.len();
        (self.dims[1] - k + 1, self.dims[2] - k + 1)
    }

    fn forward(&self, x: &[f32]) -> Vec<f32> {
        let [n, h, w, c] = self.dims;
        let (oh, ow) = self.out_dims();
        let g = &self.taps;
        let mut tmp = vec![0.0f32; n * h * ow * c];
        for b in 0..n {
            for i in 0..h {
                for j in 0..ow {
                    let dst = ((b * h + i) * ow + j) * c;
                    for (t, &gt) in g.iter().enumerate() {
                        let src = ((b * h + i) * w + j + t) * c;
                        for ch in 0..c {
                            tmp[dst + ch] += gt * x[src + ch];
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0f32; n * oh * ow * c];
        for b in 0..n {
            for i in 0..oh {
                for (t, &gt) in g.iter().enumerate() {
                    let src = (b * h + i + t) * ow * c;
                    let dst = (b * oh + i) * ow * c;
                    for k in 0..ow * c {
                        out[dst + k] += gt * tmp[src + k];
                    }
                }
            }
        }
        out
    }
}

impl CustomOp for BlurValid {
    fn backward(&self, _: &[&[f32]], _: &[f32], gout: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        if !needs[0] {
            return vec![None];
        }
        let [n, h, w, c] = self.dims;
        let (oh, ow) = self.out_dims();
        let g = &self.taps;
        let mut gtmp = vec![0.0f32; n * h * ow * c];
        for b in 0..n {
            for i in 0..oh {
                for (t, &gt) in g.iter().enumerate() {
                    let dst = (b * h + i + t) * ow * c;
                    let src = (b * oh + i) * ow * c;
                    for k in 0..ow * c {
                        gtmp[dst + k] += gt * gout[src + k];
                    }
                }
            }
        }
        let mut gx = vec![0.0f32; n * h * w * c];
        for b in 0..n {
            for i in 0..h {
                for j in 0..ow {
                    let src = ((b * h + i) * ow + j) * c;
                    for (t, &gt) in g.iter().enumerate() {
                        let dst = ((b * h + i) * w + j + t) * c;
                        for ch in 0..c {
                            gx[dst + ch] += gt * gtmp[src + ch];
                        }
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

fn blur(tape: &mut Tape, x: Var) -> Var {
    let s = tape.shape(x).to_vec();
    let op = BlurValid {
        dims: [s[0], s[1], s[2], s[3]],
        taps: gaussian_window(SSIM_WINDOW, SSIM_SIGMA).iter().map(|&v| v as f32).collect(),
    };
    let (oh, ow) = op.out_dims();
    let value = op.forward(tape.value(x));
    tape.custom(vec![x], value, vec![s[0], oh, ow, s[3]], Box::new(op))
}

/// Mean SSIM over all frames, valid window positions and channels of two
/// `[N, H, W, C]` tensors.
pub fn ssim_tape(tape: &mut Tape, a: Var, b: Var) -> Var {
    let c1 = (SSIM_K1 * SSIM_K1) as f32;
    let c2 = (SSIM_K2 * SSIM_K2) as f32;
    let aa = tape.square(a);
    let bb = tape.square(b);
    let ab = tape.mul(a, b);
    let mu_a = blur(tape, a);
    let mu_b = blur(tape, b);
    let e_aa = blur(tape, aa);
    let e_bb = blur(tape, bb);
    let e_ab = blur(tape, ab);
    let ma2 = tape.square(mu_a);
    let mb2 = tape.square(mu_b);
    let mab = tape.mul(mu_a, mu_b);
    let var_a = tape.sub(e_aa, ma2);
    let var_b = tape.sub(e_bb, mb2);
    let cov = tape.sub(e_ab, mab);
    let l_num = tape.scale(mab, 2.0);
    let l_num = tape.add_scalar(l_num, c1);
    let s_num = tape.scale(cov, 2.0);
    let s_num = tape.add_scalar(s_num, c2);
    let l_den = tape.add(ma2, mb2);
    let l_den = tape.add_scalar(l_den, c1);
    let s_den = tape.add(var_a, var_b);
    let s_den = tape.add_scalar(s_den, c2);
    let num = tape.mul(l_num, s_num);
    let den = tape.mul(l_den, s_den);
    let map = tape.div(num, den);
    tape.mean(map)
}

// ---------------------------------------------------------------------------
// Loss graphs

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Trainable {
    encoder: bool,
    base: bool,
    idm: bool,
    fdm: bool,
    gcm: bool,
}

impl Trainable {
    const NONE: Trainable = Trainable {
        encoder: false,
        base: false,
        idm: false,
        fdm: false,
        gcm: false,
    };
}

struct Bound {
    encoder: Vec<Var>,
    base: Var,
    idm: Vec<Var>,
    fdm: Vec<Var>,
    gcm: Vec<Var>,
}

fn bind(tape: &mut Tape, state: &ModelState, tr: Trainable) -> Bound {
    let d = state.base.len();
    let base = if tr.base {
        tape.param(state.base.0.clone(), &[d])
    } else {
        tape.constant(state.base.0.clone(), &[d])
    };
    Bound {
        encoder: state.encoder.params.bind(tape, tr.encoder),
        base,
        idm: state.idm.as_ref().map_or(Vec::new(), |m| m.params.bind(tape, tr.idm)),
        fdm: state.fdm.as_ref().map_or(Vec::new(), |m| m.params.bind(tape, tr.fdm)),
        gcm: state.gcm.as_ref().map_or(Vec::new(), |m| m.params.bind(tape, tr.gcm)),
    }
}

/// Batch of `B` sequences of `T` frames as `[B*T, H, W, C]`.
fn batch_tensor(tape: &mut Tape, state: &ModelState, batch: &[Vec<Frame>]) -> Result<(Var, usize, usize)> {
    let (h, w, c) = state.config.frame_shape;
    let t = batch.first().map_or(0, |s| s.len());
    if batch.is_empty() || t == 0 {
        return Err(Error::InsufficientFrames { needed: 1, available: 0 });
    }
    let mut data = Vec::with_capacity(batch.len() * t * h * w * c);
    for seq in batch {
        if seq.len() != t {
            return Err(Error::dim("sequence length", t, seq.len()));
        }
        for f in seq {
            if f.shape() != [h, w, c] {
                return Err(Error::shape("training frame", &[h, w, c], &f.shape()));
            }
            data.extend_from_slice(&f.pixels);
        }
    }
    Ok((tape.constant(data, &[batch.len() * t, h, w, c]), batch.len(), t))
}

fn recon_loss(tape: &mut Tape, plan: &RenderPlan, base: Var, z: Var, target: Var, lambda: f32) -> Var {
    let w = tape.add_bias(z, base);
    let img = plan.render(tape, w);
    let mse = tape.mse(img, target);
    if lambda == 0.0 {
        return mse;
    }
    let s = ssim_tape(tape, img, target);
    let dissim = tape.scale(s, -lambda);
    let dissim = tape.add_scalar(dissim, lambda);
    tape.add(mse, dissim)
}

fn transition_rows(b: usize, t: usize) -> (Vec<usize>, Vec<usize>) {
    let cur = (0..b).flat_map(|s| (0..t - 1).map(move |i| s * t + i)).collect();
    let next = (0..b).flat_map(|s| (1..t).map(move |i| s * t + i)).collect();
    (cur, next)
}

struct Graph {
    loss: Var,
    bound: Bound,
    /// Continuous IDM outputs and their codebook assignments.
    assignments: Option<(Vec<f32>, Vec<usize>)>,
}

fn build_loss(
    tape: &mut Tape,
    state: &ModelState,
    phase: Phase,
    batch: &[Vec<Frame>],
    lambda: f32,
    tr: Trainable,
) -> Result<Graph> {
    let (frames, b, t) = batch_tensor(tape, state, batch)?;
    if phase != Phase::One && t < 2 {
        return Err(Error::InsufficientFrames { needed: 2, available: t });
    }
    match phase {
        Phase::Two | Phase::Joint12 => {
            state.idm()?;
            state.fdm()?;
        }
        Phase::Three => {
            state.idm()?;
            let gcm = state.gcm()?;
            if gcm.config.kind == crate::dynamics::GcmKind::Transformer && gcm.config.max_t < t - 1 {
                return Err(Error::Config(format!(
                    "transformer max_t {} shorter than {} transitions",
                    gcm.config.max_t,
                    t - 1
                )));
            }
        }
        Phase::One => {}
    }
    let bound = bind(tape, state, tr);
    let z = state.encoder.forward(tape, &bound.encoder, frames);
    let plan = || RenderPlan::new(&state.config.inr, state.config.train_grid(), &state.config.train_mask());
    let mut assignments = None;
    let loss = match phase {
        Phase::One => recon_loss(tape, &plan(), bound.base, z, frames, lambda),
        Phase::Two | Phase::Joint12 => {
            let (cur, next) = transition_rows(b, t);
            let zc = tape.gather_rows(z, &cur);
            let zn = tape.gather_rows(z, &next);
            let zn = tape.detach(zn);
            let idm = state.idm()?;
            let mut u = idm.forward(tape, &bound.idm, zc, zn);
            let mut commit = None;
            if let Some(cb) = &state.codebook {
                let raw = u;
                let (q, idx) = quantize_rows(tape, raw, cb);
                assignments = Some((tape.value(raw).to_vec(), idx));
                let target = tape.detach(q);
                let c = tape.mse(raw, target);
                commit = Some(tape.scale(c, cb.commitment));
                u = q;
            }
            let pred = state.fdm()?.forward(tape, &bound.fdm, zc, u);
            let main = if phase == Phase::Two {
                tape.mse(pred, zn)
            } else {
                let p = plan();
                let recon = recon_loss(tape, &p, bound.base, z, frames, lambda);
                let next_frames = tape.gather_rows(frames, &next);
                let predicted = recon_loss(tape, &p, bound.base, pred, next_frames, lambda);
                tape.add(recon, predicted)
            };
            match commit {
                Some(c) => tape.add(main, c),
                None => main,
            }
        }
        Phase::Three => {
            let (cur, next) = transition_rows(b, t);
            let z = tape.detach(z);
            let zc = tape.gather_rows(z, &cur);
            let zn = tape.gather_rows(z, &next);
            let mut pseudo = state.idm()?.forward(tape, &bound.idm, zc, zn);
            if let Some(cb) = &state.codebook {
                pseudo = quantize_rows(tape, pseudo, cb).0;
            }
            let pseudo = tape.detach(pseudo);
            let gcm = state.gcm()?;
            let mut mem = gcm.zero_memory(tape, b);
            let mut total: Option<Var> = None;
            for step in 1..t {
                let rows_z: Vec<usize> = (0..b).map(|s| s * t + step - 1).collect();
                let rows_u: Vec<usize> = (0..b).map(|s| s * (t - 1) + step - 1).collect();
                let z_t = tape.gather_rows(z, &rows_z);
                let u_t = tape.gather_rows(pseudo, &rows_u);
                let u_hat = gcm.decode(tape, &bound.gcm, &mem, z_t, step);
                let term = tape.mse(u_hat, u_t);
                total = Some(match total {
                    Some(acc) => tape.add(acc, term),
                    None => term,
                });
                mem = gcm.encode(tape, &bound.gcm, mem, z_t, u_t, step);
            }
            tape.scale(total.unwrap(), 1.0 / (t - 1) as f32)
        }
    };
    Ok(Graph {
        loss,
        bound,
        assignments,
    })
}

fn eval_loss(batch: &[Vec<Frame>], state: &ModelState, phase: Phase, lambda: f32) -> Result<f32> {
    let mut tape = Tape::new();
    let g = build_loss(&mut tape, state, phase, batch, lambda, Trainable::NONE)?;
    Ok(tape.scalar(g.loss))
}

/// Mean per-frame `MSE + lambda (1 - SSIM)` of reconstructions.
pub fn loss_phase1(batch: &[Vec<Frame>], state: &ModelState, lambda: f32) -> Result<f32> {
    eval_loss(batch, state, Phase::One, lambda)
}

/// Mean squared latent transition error against the stop-gradient target.
pub fn loss_phase2(batch: &[Vec<Frame>], state: &ModelState) -> Result<f32> {
    eval_loss(batch, state, Phase::Two, 0.0)
}

/// Mean squared error between teacher-forced GCM actions and IDM pseudo-actions.
pub fn loss_phase3(batch: &[Vec<Frame>], state: &ModelState) -> Result<f32> {
    eval_loss(batch, state, Phase::Three, 0.0)
}

/// Reconstruction plus pixel-space loss of rendered FDM predictions.
pub fn loss_joint12(batch: &[Vec<Frame>], state: &ModelState, lambda: f32) -> Result<f32> {
    eval_loss(batch, state, Phase::Joint12, lambda)
}

// ---------------------------------------------------------------------------
// Optimisation loop

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub phase: Phase,
    pub loss: f32,
}

impl LogEntry {
    pub fn line(&self) -> String {
        format!("{}\t{}\t{}", self.step, self.phase.name(), self.loss)
    }
}

pub fn format_log(log: &[LogEntry]) -> String {
    log.iter().map(|e| e.line() + "\n").collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<LogEntry>,
}

fn check_prerequisites(phase: Phase, state: &ModelState) -> Result<()> {
    let done = state.meta.phase.as_str();
    match phase {
        Phase::One | Phase::Joint12 => Ok(()),
        Phase::Two if matches!(done, "1" | "2" | "3" | "joint12") => Ok(()),
        Phase::Two => Err(Error::MissingPrerequisite(
            "phase 2 needs a checkpoint with a trained encoder (phase 1 or joint12)".into(),
        )),
        Phase::Three if matches!(done, "2" | "3" | "joint12") && state.idm.is_some() && state.fdm.is_some() => Ok(()),
        Phase::Three => Err(Error::MissingPrerequisite(
            "phase 3 needs a checkpoint with trained dynamics (phase 2 or joint12)".into(),
        )),
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
        };
        s.next_index();
        s.cursor = 0;
        s
    }

    fn next_index(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn batch(&mut self, cfg: &TrainConfig, ds: &VideoDataset) -> Result<Vec<Vec<Frame>>> {
        (0..cfg.batch_size)
            .map(|_| {
                let mut seq = ds.sequence(self.next_index());
                if cfg.augment_static && self.rng.gen_bool(cfg.static_fraction) {
                    seq = augment_static_from(&seq, ds.t, cfg.static_offset)?;
                }
                if cfg.augment_reverse && self.rng.gen_bool(0.5) {
                    seq = augment_reverse(&seq);
                }
                if cfg.translate_max > 0 {
                    let m = cfg.translate_max as isize;
                    let (dy, dx) = (self.rng.gen_range(-m..=m), self.rng.gen_range(-m..=m));
                    seq = augment_translate(&seq, dy, dx);
                }
                Ok(seq)
            })
            .collect()
    }
}

fn grads_for(grads: &mut Gradients, vars: &[Var], params: &ParamSet) -> Vec<Vec<f32>> {
    vars.iter()
        .zip(params.iter())
        .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect()
}

// Adam slots per component.
const SLOT_ENCODER: usize = 0;
const SLOT_BASE: usize = 1;
const SLOT_IDM: usize = 2;
const SLOT_FDM: usize = 3;
const SLOT_GCM: usize = 4;

/// Runs `config.steps` Adam steps of `config.phase` starting from `init`.
pub fn train(config: &TrainConfig, dataset: &VideoDataset, init: ModelState) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.n == 0 || dataset.t == 0 {
        return Err(Error::InsufficientFrames { needed: 1, available: 0 });
    }
    let (h, w, c) = init.config.frame_shape;
    if [dataset.h, dataset.w, dataset.c] != [h, w, c] {
        return Err(Error::shape("dataset frame", &[h, w, c], &[dataset.h, dataset.w, dataset.c]));
    }
    check_prerequisites(config.phase, &init)?;
    let mut state = init;
    match config.phase {
        Phase::Two | Phase::Joint12 => state.ensure_dynamics(config.seed)?,
        Phase::Three => state.ensure_gcm(config.seed)?,
        Phase::One => {}
    }
    let tr = config.phase.trainable();
    let mut sampler = Sampler::new(dataset.n, config.seed ^ 0x5eed);
    let mut opt = Adam::new(config.learning_rate);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sampler.batch(config, dataset)?;
        let mut tape = Tape::new();
        let g = build_loss(&mut tape, &state, config.phase, &batch, config.lambda_ssim, tr)?;
        let loss = tape.scalar(g.loss);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        log.push(LogEntry {
            step,
            phase: config.phase,
            loss,
        });
        let mut grads = tape.backward(g.loss);
        opt.begin_step();
        if tr.encoder {
            let gs = grads_for(&mut grads, &g.bound.encoder, &state.encoder.params);
            opt.update(SLOT_ENCODER, &mut state.encoder.params, &gs);
        }
        if tr.base {
            let gb = grads.take(g.bound.base).unwrap_or_else(|| vec![0.0; state.base.len()]);
            let mut ps = ParamSet::new();
            ps.push("base", Tensor::new(vec![state.base.len()], std::mem::take(&mut state.base.0)));
            opt.update(SLOT_BASE, &mut ps, &[gb]);
            state.base.0 = std::mem::take(&mut ps.tensor_mut(0).data);
        }
        if tr.idm {
            let m = state.idm.as_mut().unwrap();
            let gs = grads_for(&mut grads, &g.bound.idm, &m.params);
            opt.update(SLOT_IDM, &mut m.params, &gs);
        }
        if tr.fdm {
            let m = state.fdm.as_mut().unwrap();
            let gs = grads_for(&mut grads, &g.bound.fdm, &m.params);
            opt.update(SLOT_FDM, &mut m.params, &gs);
        }
        if tr.gcm {
            let m = state.gcm.as_mut().unwrap();
            let gs = grads_for(&mut grads, &g.bound.gcm, &m.params);
            opt.update(SLOT_GCM, &mut m.params, &gs);
        }
        if let (Some((rows, idx)), Some(cb)) = (&g.assignments, state.codebook.as_mut()) {
            cb.ema_update(rows, idx);
        }
    }
    state.meta.phase = config.phase.name().to_string();
    state.meta.step += config.steps as u64;
    state.meta.seed = config.seed;
    Ok(TrainOutcome { state, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::GcmKind;
    use crate::inr::render;
    use crate::model::ModelConfig;
    use crate::synthdata::{gen_sprites, DataGenConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            inr: crate::inr::InrArchitecture::new(3, 8, 1, 3),
            frame_shape: (16, 16, 1),
            encoder_channels: vec![4, 8],
            idm_hidden: 16,
            fdm_hidden: 16,
            gcm_hidden: 16,
            gcm_heads: 4,
            gcm_blocks: 1,
            gcm_max_t: 8,
            ..ModelConfig::default()
        }
    }

    fn tiny_data(n: usize, t: usize) -> VideoDataset {
        gen_sprites(
            &DataGenConfig {
                sequences: n,
                frames: t,
                canvas_height: 16,
                canvas_width: 16,
                ..DataGenConfig::default()
            }
            .sprite_config(),
        )
        .unwrap()
    }

    #[test]
    fn reverse_examples() {
        assert_eq!(augment_reverse(&[1, 2, 3]), vec![3, 2, 1]);
        let s: Vec<i32> = (0..7).collect();
        assert_eq!(augment_reverse(&augment_reverse(&s)), s);
        assert_eq!(augment_reverse(&s).len(), 7);
    }

    #[test]
    fn static_examples() {
        let s = ['a', 'b', 'c', 'd', 'e'];
        assert_eq!(augment_static(&s, 4).unwrap(), vec!['a', 'a', 'b', 'b']);
        assert_eq!(augment_static(&s, 6).unwrap(), vec!['a', 'a', 'b', 'c', 'd', 'd']);
        for t in 3..=7 {
            assert_eq!(augment_static(&s, t).unwrap().len(), t);
        }
        assert!(matches!(augment_static(&s, 8), Err(Error::InsufficientFrames { needed: 6, available: 5 })));
        assert_eq!(augment_static_from(&s, 4, 2).unwrap(), vec!['c', 'c', 'd', 'd']);
    }

    #[test]
    fn translate_examples() {
        let f = Frame::new(2, 3, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let right = augment_translate(&[f.clone()], 0, 1);
        assert_eq!(right[0].pixels, vec![0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
        let up = augment_translate(&[f.clone()], -1, 0);
        assert_eq!(up[0].pixels, vec![4.0, 5.0, 6.0, 0.0, 0.0, 0.0]);
        assert_eq!(augment_translate(&[f.clone()], 0, 0)[0], f);
        assert!(augment_translate(&[f], 2, 0)[0].pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blur_adjoint_matches_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let op = BlurValid {
            dims: [2, 13, 14, 2],
            taps: gaussian_window(SSIM_WINDOW, SSIM_SIGMA).iter().map(|&v| v as f32).collect(),
        };
        let x: Vec<f32> = (0..2 * 13 * 14 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = op.forward(&x);
        let g: Vec<f32> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gx = op.backward(&[&x], &y, &g, &[true]).remove(0).unwrap();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn tape_ssim_matches_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Frame::new(14, 15, 1, (0..210).map(|_| rng.gen()).collect()).unwrap();
        let b = Frame::new(14, 15, 1, (0..210).map(|_| rng.gen()).collect()).unwrap();
        let mut tape = Tape::new();
        let va = tape.constant(a.pixels.clone(), &[1, 14, 15, 1]);
        let vb = tape.constant(b.pixels.clone(), &[1, 14, 15, 1]);
        let s = ssim_tape(&mut tape, va, vb);
        let want = crate::metrics::ssim(&a, &b).unwrap();
        assert!((tape.scalar(s) as f64 - want).abs() < 1e-5);
    }

    #[test]
    fn phase1_gray_frame_matches_hand_computation() {
        let state = ModelState::new(tiny_config(), 4).unwrap();
        let gray = Frame::new(16, 16, 1, vec![0.5; 256]).unwrap();
        for lambda in [0.0, 0.1] {
            let got = loss_phase1(&[vec![gray.clone()]], &state, lambda).unwrap() as f64;
            let z = crate::encoder::encode(&gray, &state.encoder).unwrap();
            let rec = render(
                &state.weights_for(&z).unwrap(),
                &state.config.train_grid(),
                &state.config.inr,
                &state.config.train_mask(),
            )
            .unwrap();
            let mse = rec.pixels.iter().map(|&v| (v as f64 - 0.5).powi(2)).sum::<f64>() / 256.0;
            let want = mse + lambda as f64 * (1.0 - crate::metrics::ssim(&gray, &rec).unwrap());
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn phase2_stop_gradient() {
        let mut state = ModelState::new(tiny_config(), 1).unwrap();
        state.ensure_dynamics(1).unwrap();
        let batch = vec![tiny_data(1, 3).sequence(0)];
        let tr = Trainable { encoder: true, ..Trainable::NONE };
        let mut tape = Tape::new();
        let g = build_loss(&mut tape, &state, Phase::Two, &batch, 0.0, tr).unwrap();
        let grads = tape.backward(g.loss);
        // Encoder gradient through z_t only: the target and IDM input keep
        // the unperturbed encoder.
        let z_all = state.encoder.encode_batch(&batch[0]).unwrap();
        let fixed_loss = |st: &ModelState| -> f64 {
            let z = st.encoder.encode_batch(&batch[0]).unwrap();
            let mut acc = 0.0;
            for t in 0..2 {
                let u = st.idm.as_ref().unwrap().infer(&z[t], &z_all[t + 1]).unwrap();
                let mut tp = Tape::new();
                let vars = st.fdm.as_ref().unwrap().params.bind(&mut tp, false);
                let zc = tp.constant(z[t].to_f32(), &[1, z[t].len()]);
                let uc = tp.constant(u.0.clone(), &[1, u.len()]);
                let pred = st.fdm.as_ref().unwrap().forward(&mut tp, &vars, zc, uc);
                acc += tp
                    .value(pred)
                    .iter()
                    .zip(&z_all[t + 1].0)
                    .map(|(&p, &q)| (p as f64 - q).powi(2))
                    .sum::<f64>();
            }
            acc / (2 * z_all[0].len()) as f64
        };
        // Directional derivative along the projection-layer gradient.
        let n = state.encoder.params.len();
        let dir: Vec<Vec<f32>> = (n - 2..n).map(|i| grads.get(g.bound.encoder[i]).unwrap().to_vec()).collect();
        let norm = dir.iter().flatten().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let shifted = |h: f64| {
            let mut st = state.clone();
            for (k, d) in dir.iter().enumerate() {
                for (p, &v) in st.encoder.params.tensor_mut(n - 2 + k).data.iter_mut().zip(d) {
                    *p += (h * v as f64 / norm) as f32;
                }
            }
            fixed_loss(&st)
        };
        let eps = 1e-3;
        let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        assert!((norm - fd).abs() / norm < 1e-3, "{norm} vs {fd}");
    }

    #[test]
    fn phase2_and_3_need_prerequisites() {
        let ds = tiny_data(2, 4);
        let state = ModelState::new(tiny_config(), 0).unwrap();
        let cfg = TrainConfig { phase: Phase::Three, steps: 1, ..TrainConfig::default() };
        assert!(matches!(train(&cfg, &ds, state.clone()), Err(Error::MissingPrerequisite(_))));
        let cfg = TrainConfig { phase: Phase::Two, steps: 1, ..TrainConfig::default() };
        assert!(matches!(train(&cfg, &ds, state), Err(Error::MissingPrerequisite(_))));
    }

    #[test]
    fn phases_chain_and_reduce_loss() {
        let ds = tiny_data(6, 5);
        let state = ModelState::new(tiny_config(), 0).unwrap();
        let p1 = TrainConfig {
            steps: 40,
            batch_size: 2,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let out = train(&p1, &ds, state).unwrap();
        assert!(out.log.last().unwrap().loss < out.log[0].loss);
        let p2 = TrainConfig { phase: Phase::Two, ..p1.clone() };
        let out = train(&p2, &ds, out.state).unwrap();
        assert!(out.state.idm.is_some() && out.state.fdm.is_some());
        for kind in [GcmKind::Gru, GcmKind::Transformer] {
            let mut st = out.state.clone();
            st.config.gcm_kind = kind;
            let p3 = TrainConfig { phase: Phase::Three, steps: 30, ..p1.clone() };
            let o3 = train(&p3, &ds, st).unwrap();
            assert!(o3.log.last().unwrap().loss < o3.log[0].loss, "{kind:?}");
            assert_eq!(o3.state.meta.phase, "3");
        }
    }

    #[test]
    fn same_seed_same_log() {
        let ds = tiny_data(4, 4);
        let cfg = TrainConfig {
            phase: Phase::Joint12,
            steps: 5,
            batch_size: 2,
            augment_reverse: true,
            augment_static: true,
            static_fraction: 0.5,
            ..TrainConfig::default()
        };
        let a = train(&cfg, &ds, ModelState::new(tiny_config(), 2).unwrap()).unwrap();
        let b = train(&cfg, &ds, ModelState::new(tiny_config(), 2).unwrap()).unwrap();
        assert_eq!(format_log(&a.log), format_log(&b.log));
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn codebook_training_runs() {
        let ds = tiny_data(3, 4);
        let mut cfg = tiny_config();
        cfg.codebook_size = 8;
        cfg.action_dim = 2;
        let st = train(&TrainConfig { steps: 2, batch_size: 2, ..TrainConfig::default() }, &ds, ModelState::new(cfg, 0).unwrap())
            .unwrap()
            .state;
        let out = train(&TrainConfig { phase: Phase::Two, steps: 3, batch_size: 2, ..TrainConfig::default() }, &ds, st).unwrap();
        assert!(out.state.codebook.is_some());
        assert!(out.log.iter().all(|e| e.loss.is_finite()));
    }
}
