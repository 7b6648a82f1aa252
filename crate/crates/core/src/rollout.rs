//! Context-conditioned generation, retargeting and super-resolution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::config::KvWriter;
use crate::dynamics::{gcm_init, Action, GcmMemory};
use crate::encoder::LatentState;
use crate::error::{Error, Result};
use crate::inr::{CoordinateGrid, Frame, FrequencyMask};
use crate::model::{parse_bool, parse_num, ModelState};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    /// Number of rendered frames.
    pub t_inf: usize,
    /// Context ratio: step `t` takes its action from the IDM iff `t / t_inf < rho`.
    pub rho: f64,
    /// Grid scale relative to the training resolution.
    pub scale: f64,
    /// Render with the training-resolution Nyquist mask.
    pub apply_mask: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            t_inf: 10,
            rho: 0.3,
            scale: 1.0,
            apply_mask: true,
        }
    }
}

impl RolloutConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "rollout_steps" => self.t_inf = parse_num(key, v)?,
            "context_ratio" => self.rho = parse_num(key, v)?,
            "scale" => self.scale = parse_num(key, v)?,
            "apply_mask" => self.apply_mask = parse_bool(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("rollout_steps", self.t_inf);
        w.put("context_ratio", self.rho);
        w.put("scale", self.scale);
        w.put("apply_mask", self.apply_mask);
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_inf < 1 {
            return Err(Error::Config("rollout_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("context_ratio {} outside [0, 1]", self.rho)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale {} must be positive", self.scale)));
        }
        Ok(())
    }

    /// Whether step `t` (1-based) draws its action from the IDM.
    pub fn uses_context(&self, t: usize) -> bool {
        (t as f64) / (self.t_inf as f64) < self.rho
    }

    /// Reference frames read by a rollout: `o_1` plus `o_{t+1}` for every
    /// context step.
    pub fn frames_needed(&self) -> usize {
        let last_context = (1..self.t_inf).filter(|&t| self.uses_context(t)).last();
        last_context.map_or(1, |t| t + 1)
    }

    /// Training grid scaled by `scale`.
    pub fn grid(&self, state: &ModelState) -> CoordinateGrid {
        state.config.train_grid().scaled(self.scale)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Intervention {
    pub steps: BTreeSet<usize>,
    pub alien_states: BTreeMap<usize, LatentState>,
    pub alien_actions: BTreeMap<usize, Action>,
}

impl Intervention {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn validate(&self, state: &ModelState) -> Result<()> {
        let keys = self.alien_states.keys().chain(self.alien_actions.keys());
        if let Some(&t) = keys.into_iter().find(|t| !self.steps.contains(t)) {
            return Err(Error::Config(format!("alien value at step {t} outside the intervention set")));
        }
        if self.steps.contains(&0) {
            return Err(Error::Config("intervention steps are 1-based".into()));
        }
        let dz = state.config.latent_dim();
        for z in self.alien_states.values() {
            if z.len() != dz {
                return Err(Error::dim("alien state", dz, z.len()));
            }
        }
        let du = state.config.action_dim;
        for u in self.alien_actions.values() {
            if u.len() != du {
                return Err(Error::dim("alien action", du, u.len()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSource {
    Idm,
    Gcm,
    Alien,
}

impl fmt::Display for ActionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionSource::Idm => "idm",
            ActionSource::Gcm => "gcm",
            ActionSource::Alien => "alien",
        })
    }
}

/// Output of a rollout. Frames and latents have `t_inf` entries; actions
/// have `t_inf - 1`, one per forward-dynamics step.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrace {
    pub frames: Vec<Frame>,
    /// Rendered state offsets `z_t`.
    pub latents: Vec<LatentState>,
    /// Actions fed to the forward model, after any intervention.
    pub actions: Vec<Action>,
    pub action_source: Vec<ActionSource>,
    /// Steps whose state was replaced before the forward step.
    pub content_replaced: Vec<bool>,
}

impl RolloutTrace {
    /// Tab-separated `step source content u_0,u_1,...` lines.
    pub fn action_table(&self) -> String {
        let mut out = String::from("step\tsource\tcontent\taction\n");
        for (i, (u, src)) in self.actions.iter().zip(&self.action_source).enumerate() {
            let vals: Vec<String> = u.0.iter().map(|v| v.to_string()).collect();
            let content = if self.content_replaced[i] { "alien" } else { "-" };
            out.push_str(&format!("{}\t{src}\t{content}\t{}\n", i + 1, vals.join(",")));
        }
        out
    }
}

/// Parameters bound once on a shared tape for a whole rollout.
struct Session<'a> {
    state: &'a ModelState,
    tape: Tape,
    idm: Vec<Var>,
    fdm: Vec<Var>,
    gcm: Vec<Var>,
}

impl<'a> Session<'a> {
    fn new(state: &'a ModelState, need_idm: bool, need_gcm: bool) -> Result<Self> {
        let mut tape = Tape::new();
        let fdm = state.fdm()?.params.bind(&mut tape, false);
        let idm = if need_idm {
            state.idm()?.params.bind(&mut tape, false)
        } else {
            Vec::new()
        };
        let gcm = match (&state.gcm, need_gcm) {
            (Some(g), _) => g.params.bind(&mut tape, false),
            (None, true) => return Err(Error::MissingPrerequisite("GCM".into())),
            (None, false) => Vec::new(),
        };
        Ok(Self {
            state,
            tape,
            idm,
            fdm,
            gcm,
        })
    }

    fn idm(&mut self, z: &LatentState, z_next: &LatentState) -> Result<Action> {
        self.state.idm()?.infer_bound(&mut self.tape, &self.idm, z, z_next)
    }

    fn fdm(&mut self, z: &LatentState, u: &Action) -> Result<LatentState> {
        self.state.fdm()?.step_bound(&mut self.tape, &self.fdm, z, u)
    }

    fn decode(&mut self, m: &GcmMemory, z: &LatentState, t: usize) -> Result<Action> {
        self.state.gcm()?.decode_bound(&mut self.tape, &self.gcm, m, z, t)
    }

    fn encode(&mut self, m: GcmMemory, z: &LatentState, u: &Action, t: usize) -> Result<GcmMemory> {
        self.state.gcm()?.encode_bound(&mut self.tape, &self.gcm, m, z, u, t)
    }
}

fn render_mask(state: &ModelState, apply_mask: bool) -> FrequencyMask {
    if apply_mask {
        state.config.train_mask()
    } else {
        FrequencyMask::all_pass(state.config.inr.fourier_bands)
    }
}

fn run(
    reference: &[Frame],
    config: &RolloutConfig,
    state: &ModelState,
    grid: &CoordinateGrid,
    iv: &Intervention,
) -> Result<RolloutTrace> {
    config.validate()?;
    iv.validate(state)?;
    let needed = config.frames_needed();
    if reference.len() < needed {
        return Err(Error::InsufficientFrames {
            needed,
            available: reference.len(),
        });
    }
    let steps = config.t_inf - 1;
    let context: Vec<bool> = (1..=steps).map(|t| config.uses_context(t)).collect();
    let need_idm = context.iter().any(|&c| c);
    let need_gcm = context.iter().any(|&c| !c);
    let encoded = state.encoder.encode_batch(&reference[..needed])?;
    let mask = render_mask(state, config.apply_mask);

    let mut trace = RolloutTrace {
        frames: Vec::with_capacity(config.t_inf),
        latents: Vec::with_capacity(config.t_inf),
        actions: Vec::with_capacity(steps),
        action_source: Vec::with_capacity(steps),
        content_replaced: Vec::with_capacity(steps),
    };
    let mut z = encoded[0].clone();
    if steps == 0 {
        trace.frames.push(state.render_latent(&z, grid, &mask)?);
        trace.latents.push(z);
        return Ok(trace);
    }
    let mut session = Session::new(state, need_idm, need_gcm)?;
    let mut memory = state.gcm.as_ref().map(|g| gcm_init(&g.config));
    for t in 1..=config.t_inf {
        trace.frames.push(state.render_latent(&z, grid, &mask)?);
        if t == config.t_inf {
            trace.latents.push(z);
            break;
        }
        let (mut u, mut source) = if context[t - 1] {
            (session.idm(&z, &encoded[t])?, ActionSource::Idm)
        } else {
            let m = memory.as_ref().expect("GCM checked when the session was built");
            (session.decode(m, &z, t)?, ActionSource::Gcm)
        };
        if let Some(m) = memory.take() {
            memory = Some(session.encode(m, &z, &u, t)?);
        }
        trace.latents.push(z.clone());
        let mut replaced = false;
        if iv.steps.contains(&t) {
            if let Some(alien) = iv.alien_states.get(&t) {
                z = alien.clone();
                replaced = true;
            }
            if let Some(alien) = iv.alien_actions.get(&t) {
                u = alien.clone();
                source = ActionSource::Alien;
            }
        }
        z = session.fdm(&z, &u)?;
        if !z.is_finite() {
            return Err(Error::Numeric(format!("non-finite latent after step {t}")));
        }
        trace.actions.push(u);
        trace.action_source.push(source);
        trace.content_replaced.push(replaced);
    }
    Ok(trace)
}

/// Rolls out `config.t_inf` frames from `reference`, rendering on `grid`.
pub fn generate(
    reference: &[Frame],
    config: &RolloutConfig,
    state: &ModelState,
    grid: &CoordinateGrid,
) -> Result<RolloutTrace> {
    run(reference, config, state, grid, &Intervention::default())
}

/// As [`generate`], replacing states and/or actions at the intervention steps
/// after the memory update and before the forward step.
pub fn retarget(
    reference: &[Frame],
    config: &RolloutConfig,
    state: &ModelState,
    grid: &CoordinateGrid,
    iv: &Intervention,
) -> Result<RolloutTrace> {
    run(reference, config, state, grid, iv)
}

/// Renders each `z̄ + z` on the training grid scaled by `scale`. The mask, if
/// applied, always comes from the training resolution.
pub fn superresolve(latents: &[LatentState], state: &ModelState, scale: f64, apply_mask: bool) -> Result<Vec<Frame>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("scale {scale} must be positive")));
    }
    let grid = state.config.train_grid().scaled(scale);
    let mask = render_mask(state, apply_mask);
    latents.iter().map(|z| state.render_latent(z, &grid, &mask)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::GcmKind;
    use crate::encoder::encode;
    use crate::inr::{render, InrArchitecture};
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(kind: GcmKind) -> ModelState {
        let cfg = ModelConfig {
            inr: InrArchitecture::new(3, 8, 1, 4),
            frame_shape: (16, 16, 1),
            encoder_channels: vec![4, 8],
            idm_hidden: 16,
            fdm_hidden: 16,
            gcm_hidden: 16,
            gcm_heads: 2,
            gcm_blocks: 1,
            gcm_max_t: 16,
            gcm_kind: kind,
            ..ModelConfig::default()
        };
        let mut st = ModelState::new(cfg, 3).unwrap();
        st.ensure_dynamics(3).unwrap();
        st.ensure_gcm(3).unwrap();
        st
    }

    fn frames(n: usize, seed: u64) -> Vec<Frame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Frame::new(16, 16, 1, (0..256).map(|_| rng.gen()).collect()).unwrap())
            .collect()
    }

    fn cfg(t_inf: usize, rho: f64) -> RolloutConfig {
        RolloutConfig {
            t_inf,
            rho,
            ..RolloutConfig::default()
        }
    }

    #[test]
    fn single_step_renders_first_encoding() {
        let st = model(GcmKind::Gru);
        let refs = frames(1, 0);
        let grid = st.config.train_grid();
        let tr = generate(&refs, &cfg(1, 0.0), &st, &grid).unwrap();
        assert_eq!(tr.frames.len(), 1);
        assert!(tr.actions.is_empty());
        let z = encode(&refs[0], &st.encoder).unwrap();
        let want = render(&st.weights_for(&z).unwrap(), &grid, &st.config.inr, &st.config.train_mask()).unwrap();
        assert_eq!(tr.frames[0], want);
    }

    #[test]
    fn context_ratio_selects_sources() {
        let st = model(GcmKind::Transformer);
        let refs = frames(10, 1);
        let grid = st.config.train_grid();
        let all_idm = generate(&refs, &cfg(10, 1.0), &st, &grid).unwrap();
        assert!(all_idm.action_source.iter().all(|&s| s == ActionSource::Idm));
        let all_gcm = generate(&refs[..1], &cfg(10, 0.0), &st, &grid).unwrap();
        assert!(all_gcm.action_source.iter().all(|&s| s == ActionSource::Gcm));
        let mixed = generate(&refs, &cfg(10, 0.3), &st, &grid).unwrap();
        let want: Vec<ActionSource> = (1..10)
            .map(|t| if t < 3 { ActionSource::Idm } else { ActionSource::Gcm })
            .collect();
        assert_eq!(mixed.action_source, want);
        assert_eq!(mixed.frames.len(), 10);
        assert_eq!(mixed.latents.len(), 10);
        assert_eq!(mixed.actions.len(), 9);
    }

    #[test]
    fn idm_steps_use_next_reference_frame() {
        let st = model(GcmKind::Gru);
        let refs = frames(4, 2);
        let tr = generate(&refs, &cfg(4, 1.0), &st, &st.config.train_grid()).unwrap();
        let enc = st.encoder.encode_batch(&refs).unwrap();
        let u1 = st.idm().unwrap().infer(&enc[0], &enc[1]).unwrap();
        assert_eq!(tr.actions[0], u1);
        let z2 = st.fdm().unwrap().step(&enc[0], &u1).unwrap();
        assert_eq!(tr.latents[1], z2);
        let u2 = st.idm().unwrap().infer(&z2, &enc[2]).unwrap();
        assert_eq!(tr.actions[1], u2);
    }

    #[test]
    fn missing_reference_frames_rejected() {
        let st = model(GcmKind::Gru);
        let refs = frames(3, 3);
        let err = generate(&refs, &cfg(10, 0.5), &st, &st.config.train_grid()).unwrap_err();
        assert!(matches!(err, Error::InsufficientFrames { needed: 5, available: 3 }));
        assert_eq!(cfg(10, 1.0).frames_needed(), 10);
        assert_eq!(cfg(10, 0.0).frames_needed(), 1);
    }

    #[test]
    fn empty_intervention_is_generate() {
        let st = model(GcmKind::Lstm);
        let refs = frames(6, 4);
        let grid = st.config.train_grid();
        let a = generate(&refs, &cfg(8, 0.5), &st, &grid).unwrap();
        let b = retarget(&refs, &cfg(8, 0.5), &st, &grid, &Intervention::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn content_intervention_after_memory_update() {
        let st = model(GcmKind::Transformer);
        let refs = frames(2, 5);
        let grid = st.config.train_grid();
        let base = generate(&refs, &cfg(8, 0.0), &st, &grid).unwrap();
        let alien = encode(&frames(1, 6)[0], &st.encoder).unwrap();
        let iv = Intervention {
            steps: [4].into(),
            alien_states: [(4, alien.clone())].into(),
            ..Intervention::default()
        };
        let tr = retarget(&refs, &cfg(8, 0.0), &st, &grid, &iv).unwrap();
        assert_eq!(tr.actions[..4], base.actions[..4]);
        assert_eq!(tr.frames[..4], base.frames[..4]);
        assert_eq!(tr.latents[4], st.fdm().unwrap().step(&alien, &tr.actions[3]).unwrap());
        assert_ne!(tr.frames[4], base.frames[4]);
        assert!(tr.content_replaced[3]);
        assert_eq!(tr.action_source[3], ActionSource::Gcm);
    }

    #[test]
    fn motion_intervention_substitutes_action() {
        let st = model(GcmKind::Gru);
        let refs = frames(2, 7);
        let grid = st.config.train_grid();
        let zero = Action::zeros(st.config.action_dim);
        let iv = Intervention {
            steps: [2, 3].into(),
            alien_actions: [(2, zero.clone()), (3, zero.clone())].into(),
            ..Intervention::default()
        };
        let tr = retarget(&refs, &cfg(5, 0.0), &st, &grid, &iv).unwrap();
        for t in [2, 3] {
            assert_eq!(tr.actions[t - 1], zero);
            assert_eq!(tr.action_source[t - 1], ActionSource::Alien);
            assert_eq!(tr.latents[t], st.fdm().unwrap().step(&tr.latents[t - 1], &zero).unwrap());
        }
        assert!(tr.action_table().lines().nth(2).unwrap().starts_with("2\talien\t-\t0,0"));
    }

    #[test]
    fn alien_dimension_checked() {
        let st = model(GcmKind::Gru);
        let iv = Intervention {
            steps: [1].into(),
            alien_actions: [(1, Action::zeros(3))].into(),
            ..Intervention::default()
        };
        let err = retarget(&frames(1, 8), &cfg(3, 0.0), &st, &st.config.train_grid(), &iv).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        let stray = Intervention {
            alien_actions: [(2, Action::zeros(4))].into(),
            ..Intervention::default()
        };
        assert!(retarget(&frames(1, 8), &cfg(3, 0.0), &st, &st.config.train_grid(), &stray).is_err());
    }

    #[test]
    fn grid_does_not_affect_dynamics() {
        let st = model(GcmKind::Gru);
        let refs = frames(5, 9);
        let lo = generate(&refs, &cfg(6, 0.5), &st, &CoordinateGrid::new(16, 16)).unwrap();
        let hi = generate(&refs, &cfg(6, 0.5), &st, &CoordinateGrid::new(40, 24)).unwrap();
        assert_eq!(lo.latents, hi.latents);
        assert_eq!(lo.actions, hi.actions);
        assert_eq!(hi.frames[0].shape(), [40, 24, 1]);
    }

    #[test]
    fn superresolve_shapes_and_identity() {
        let mut st = model(GcmKind::Gru);
        let z = encode(&frames(1, 10)[0], &st.encoder).unwrap();
        let at_one = superresolve(&[z.clone()], &st, 1.0, true).unwrap();
        let tr = generate(&frames(1, 10), &cfg(1, 0.0), &st, &st.config.train_grid()).unwrap();
        assert_eq!(at_one[0], tr.frames[0]);
        st.config.frame_shape = (32, 64, 1);
        let big = superresolve(&[z], &st, 4.0, true).unwrap();
        assert_eq!(big[0].shape(), [128, 256, 1]);
    }

    #[test]
    fn phase_one_model_cannot_roll_out() {
        let st = ModelState::new(model(GcmKind::Gru).config, 0).unwrap();
        let err = generate(&frames(2, 0), &cfg(2, 0.0), &st, &st.config.train_grid()).unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite(_)));
    }
}
