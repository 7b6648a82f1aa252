//! Complete world-model state: architecture, perception, base weights and
//! dynamics components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_kv, KvWriter};
use crate::dynamics::{
    init_codebook, init_fdm, init_gcm, init_idm, Codebook, Fdm, FdmConfig, FdmMode, Gcm, GcmConfig,
    GcmKind, Idm, IdmConfig,
};
use crate::encoder::{init_encoder, Encoder, EncoderConfig, LatentState};
use crate::error::{Error, Result};
use crate::inr::{nyquist_mask, render, CoordinateGrid, Frame, FrequencyMask, InrArchitecture, WeightVector};
use crate::nn::uniform_fan_in;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub inr: InrArchitecture,
    /// `(H, W, C)` of training frames.
    pub frame_shape: (usize, usize, usize),
    pub encoder_channels: Vec<usize>,
    pub action_dim: usize,
    /// Zero selects `d_z`.
    pub idm_hidden: usize,
    pub idm_depth: usize,
    pub fdm_mode: FdmMode,
    /// Zero selects `2 d_z` (additive) or the parameter-matched width (joint).
    pub fdm_hidden: usize,
    pub fdm_depth: usize,
    pub gcm_kind: GcmKind,
    pub gcm_hidden: usize,
    pub gcm_blocks: usize,
    pub gcm_heads: usize,
    pub gcm_mlp_ratio: usize,
    pub gcm_max_t: usize,
    /// Zero disables action quantization.
    pub codebook_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            inr: InrArchitecture::default(),
            frame_shape: (64, 64, 1),
            encoder_channels: vec![64, 128, 256, 512],
            action_dim: 4,
            idm_hidden: 0,
            idm_depth: 3,
            fdm_mode: FdmMode::Additive,
            fdm_hidden: 0,
            fdm_depth: 4,
            gcm_kind: GcmKind::Gru,
            gcm_hidden: 256,
            gcm_blocks: 4,
            gcm_heads: 8,
            gcm_mlp_ratio: 4,
            gcm_max_t: 32,
            codebook_size: 0,
        }
    }
}

pub(crate) fn parse_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad integer list `{v}`")))
        })
        .collect()
}

pub(crate) fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

pub fn fdm_mode_name(m: FdmMode) -> &'static str {
    match m {
        FdmMode::Additive => "additive",
        FdmMode::Joint => "joint",
    }
}

pub fn gcm_kind_name(k: GcmKind) -> &'static str {
    match k {
        GcmKind::Gru => "gru",
        GcmKind::Lstm => "lstm",
        GcmKind::Transformer => "transformer",
    }
}

impl ModelConfig {
    pub fn latent_dim(&self) -> usize {
        self.inr.param_count()
    }

    pub fn validate(&self) -> Result<()> {
        self.inr.validate()?;
        if self.inr.out_channels != self.frame_shape.2 {
            return Err(Error::Config(format!(
                "INR has {} output channels but frames have {}",
                self.inr.out_channels, self.frame_shape.2
            )));
        }
        if self.action_dim == 0 {
            return Err(Error::Config("action_dim must be positive".into()));
        }
        self.encoder_config().validate()?;
        self.gcm_config().validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig::new(self.frame_shape, self.encoder_channels.clone(), self.latent_dim())
    }

    pub fn idm_config(&self) -> IdmConfig {
        let mut c = IdmConfig::new(self.latent_dim(), self.action_dim);
        if self.idm_hidden > 0 {
            c.hidden = self.idm_hidden;
        }
        c.depth = self.idm_depth;
        c
    }

    pub fn fdm_config(&self) -> FdmConfig {
        let mut add = FdmConfig::additive(self.latent_dim(), self.action_dim);
        add.depth = self.fdm_depth;
        if self.fdm_hidden > 0 {
            add.hidden_width = self.fdm_hidden;
        }
        match self.fdm_mode {
            FdmMode::Additive => add,
            FdmMode::Joint => FdmConfig::joint_matched(&add),
        }
    }

    pub fn gcm_config(&self) -> GcmConfig {
        GcmConfig {
            hidden: self.gcm_hidden,
            blocks: self.gcm_blocks,
            heads: self.gcm_heads,
            mlp_ratio: self.gcm_mlp_ratio,
            max_t: self.gcm_max_t,
            ..GcmConfig::new(self.gcm_kind, self.latent_dim(), self.action_dim)
        }
    }

    pub fn train_grid(&self) -> CoordinateGrid {
        CoordinateGrid::new(self.frame_shape.0, self.frame_shape.1)
    }

    /// Band mask of the training grid, used in training and masked renders.
    pub fn train_mask(&self) -> FrequencyMask {
        nyquist_mask(self.frame_shape.0, self.frame_shape.1, self.inr.fourier_bands)
    }

    /// Applies one `key = value` pair; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "inr_depth" => self.inr.depth = parse_num(key, v)?,
            "inr_width" => self.inr.width = parse_num(key, v)?,
            "fourier_bands" => self.inr.fourier_bands = parse_num(key, v)?,
            "raw_coords" => self.inr.include_raw_coords = parse_bool(key, v)?,
            "frame_height" => self.frame_shape.0 = parse_num(key, v)?,
            "frame_width" => self.frame_shape.1 = parse_num(key, v)?,
            "channels" => {
                self.frame_shape.2 = parse_num(key, v)?;
                self.inr.out_channels = self.frame_shape.2;
            }
            "encoder_channels" => self.encoder_channels = parse_list(v)?,
            "action_dim" => self.action_dim = parse_num(key, v)?,
            "idm_hidden" => self.idm_hidden = parse_num(key, v)?,
            "idm_depth" => self.idm_depth = parse_num(key, v)?,
            "fdm_mode" => {
                self.fdm_mode = match v.trim() {
                    "additive" => FdmMode::Additive,
                    "joint" => FdmMode::Joint,
                    _ => return Err(Error::Config(format!("unknown fdm_mode `{v}`"))),
                }
            }
            "fdm_hidden" => self.fdm_hidden = parse_num(key, v)?,
            "fdm_depth" => self.fdm_depth = parse_num(key, v)?,
            "gcm_kind" => {
                self.gcm_kind = match v.trim() {
                    "gru" => GcmKind::Gru,
                    "lstm" => GcmKind::Lstm,
                    "transformer" => GcmKind::Transformer,
                    _ => return Err(Error::Config(format!("unknown gcm_kind `{v}`"))),
                }
            }
            "gcm_hidden" => self.gcm_hidden = parse_num(key, v)?,
            "gcm_blocks" => self.gcm_blocks = parse_num(key, v)?,
            "gcm_heads" => self.gcm_heads = parse_num(key, v)?,
            "gcm_mlp_ratio" => self.gcm_mlp_ratio = parse_num(key, v)?,
            "gcm_max_t" => self.gcm_max_t = parse_num(key, v)?,
            "codebook_size" => self.codebook_size = parse_num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        w.put("inr_depth", self.inr.depth);
        w.put("inr_width", self.inr.width);
        w.put("fourier_bands", self.inr.fourier_bands);
        w.put("raw_coords", self.inr.include_raw_coords);
        w.put("frame_height", self.frame_shape.0);
        w.put("frame_width", self.frame_shape.1);
        w.put("channels", self.frame_shape.2);
        w.put("encoder_channels", list(&self.encoder_channels));
        w.put("action_dim", self.action_dim);
        w.put("idm_hidden", self.idm_hidden);
        w.put("idm_depth", self.idm_depth);
        w.put("fdm_mode", fdm_mode_name(self.fdm_mode));
        w.put("fdm_hidden", self.fdm_hidden);
        w.put("fdm_depth", self.fdm_depth);
        w.put("gcm_kind", gcm_kind_name(self.gcm_kind));
        w.put("gcm_hidden", self.gcm_hidden);
        w.put("gcm_blocks", self.gcm_blocks);
        w.put("gcm_heads", self.gcm_heads);
        w.put("gcm_mlp_ratio", self.gcm_mlp_ratio);
        w.put("gcm_max_t", self.gcm_max_t);
        w.put("codebook_size", self.codebook_size);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainingMeta {
    /// Last completed phase: `init`, `1`, `2`, `3` or `joint12`.
    pub phase: String,
    pub step: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub encoder: Encoder,
    /// Shared base weights added to every encoded offset.
    pub base: WeightVector,
    pub idm: Option<Idm>,
    pub fdm: Option<Fdm>,
    pub gcm: Option<Gcm>,
    pub codebook: Option<Codebook>,
    pub meta: TrainingMeta,
}

// Per-component seed offsets so components draw independent streams.
const SEED_BASE: u64 = 0x0b;
const SEED_IDM: u64 = 0x1d;
const SEED_FDM: u64 = 0xfd;
const SEED_GCM: u64 = 0x6c;
const SEED_CODEBOOK: u64 = 0xcb;

/// Fan-in uniform INR weights in the canonical flat layout.
pub fn init_inr_weights(arch: &InrArchitecture, seed: u64) -> WeightVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Vec::with_capacity(arch.param_count());
    for (o, i) in arch.layer_shapes() {
        w.extend(uniform_fan_in(&mut rng, i, o * i));
        w.extend(uniform_fan_in(&mut rng, i, o));
    }
    WeightVector(w)
}

impl ModelState {
    /// Encoder and base weights only; dynamics are added by later phases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = init_encoder(&config.encoder_config(), seed)?;
        let base = init_inr_weights(&config.inr, seed ^ SEED_BASE);
        Ok(Self {
            config,
            encoder,
            base,
            idm: None,
            fdm: None,
            gcm: None,
            codebook: None,
            meta: TrainingMeta {
                phase: "init".into(),
                step: 0,
                seed,
            },
        })
    }

    /// Creates IDM, FDM and (if configured) the codebook when absent.
    pub fn ensure_dynamics(&mut self, seed: u64) -> Result<()> {
        if self.idm.is_none() {
            self.idm = Some(init_idm(&self.config.idm_config(), seed ^ SEED_IDM)?);
        }
        if self.fdm.is_none() {
            self.fdm = Some(init_fdm(&self.config.fdm_config(), seed ^ SEED_FDM)?);
        }
        if self.codebook.is_none() && self.config.codebook_size > 0 {
            self.codebook = Some(init_codebook(
                self.config.codebook_size,
                self.config.action_dim,
                seed ^ SEED_CODEBOOK,
            )?);
        }
        Ok(())
    }

    pub fn ensure_gcm(&mut self, seed: u64) -> Result<()> {
        if self.gcm.is_none() {
            self.gcm = Some(init_gcm(&self.config.gcm_config(), seed ^ SEED_GCM)?);
        }
        Ok(())
    }

    pub fn idm(&self) -> Result<&Idm> {
        self.idm.as_ref().ok_or_else(|| Error::MissingPrerequisite("IDM".into()))
    }

    pub fn fdm(&self) -> Result<&Fdm> {
        self.fdm.as_ref().ok_or_else(|| Error::MissingPrerequisite("FDM".into()))
    }

    pub fn gcm(&self) -> Result<&Gcm> {
        self.gcm.as_ref().ok_or_else(|| Error::MissingPrerequisite("GCM".into()))
    }

    /// `z̄ + z` as INR weights.
    pub fn weights_for(&self, z: &LatentState) -> Result<WeightVector> {
        if z.len() != self.base.len() {
            return Err(Error::dim("latent state", self.base.len(), z.len()));
        }
        Ok(WeightVector(
            self.base
                .0
                .iter()
                .zip(&z.0)
                .map(|(&b, &o)| (b as f64 + o) as f32)
                .collect(),
        ))
    }

    pub fn render_latent(&self, z: &LatentState, grid: &CoordinateGrid, mask: &FrequencyMask) -> Result<Frame> {
        render(&self.weights_for(z)?, grid, &self.config.inr, mask)
    }

    pub(crate) fn config_text(&self) -> String {
        let mut w = KvWriter::default();
        self.config.write_kv(&mut w);
        w.put("phase", &self.meta.phase);
        w.put("step", self.meta.step);
        w.put("seed", self.meta.seed);
        w.put("has_idm", self.idm.is_some());
        w.put("has_fdm", self.fdm.is_some());
        w.put("has_gcm", self.gcm.is_some());
        w.put("has_codebook", self.codebook.is_some());
        w.finish()
    }

    /// Parses the text written by `config_text`, returning the presence flags
    /// `(idm, fdm, gcm, codebook)`.
    pub(crate) fn parse_config_text(text: &str) -> Result<(ModelConfig, TrainingMeta, [bool; 4])> {
        let mut cfg = ModelConfig::default();
        let mut meta = TrainingMeta::default();
        let mut present = [false; 4];
        for (key, value, line) in parse_kv(text)? {
            if cfg.set(&key, &value)? {
                continue;
            }
            match key.as_str() {
                "phase" => meta.phase = value,
                "step" => meta.step = parse_num(&key, &value)?,
                "seed" => meta.seed = parse_num(&key, &value)?,
                "has_idm" => present[0] = parse_bool(&key, &value)?,
                "has_fdm" => present[1] = parse_bool(&key, &value)?,
                "has_gcm" => present[2] = parse_bool(&key, &value)?,
                "has_codebook" => present[3] = parse_bool(&key, &value)?,
                _ => return Err(Error::Format(format!("unknown checkpoint key `{key}` on line {line}"))),
            }
        }
        cfg.validate()?;
        Ok((cfg, meta, present))
    }
}
