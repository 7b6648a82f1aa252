//! Procedural video generators and the `NVDS` dataset container.
//!
//! Container layout (little-endian): magic `NVDS`, `u16` version, `u8` flags
//! (bit 0: truth block present), `u32` N, `u16` T, `u16` H, `u16` W, `u8` C,
//! frames as `f32 [N][T][H][W][C]`, then optionally `f32` radii `[N][2]`,
//! positions `[N][T][2][2]` and velocities `[N][T][2][2]`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvWriter;
use crate::error::{Error, Result};
use crate::inr::Frame;
use crate::model::{parse_bool, parse_num};

pub const DATASET_MAGIC: [u8; 4] = *b"NVDS";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 2 + 2 + 2 + 1;

/// Ground truth of two-ball sequences in normalized canvas units.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    /// `[N][2]`, red then blue.
    pub radii: Vec<f32>,
    /// `[N][T][ball][x, y]`.
    pub positions: Vec<f32>,
    /// `[N][T][ball][x, y]`, units per step.
    pub velocities: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoDataset {
    pub n: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub frames: Vec<f32>,
    pub truth: Option<Truth>,
}

impl VideoDataset {
    pub fn new(dims: [usize; 5], frames: Vec<f32>, truth: Option<Truth>) -> Result<Self> {
        let [n, t, h, w, c] = dims;
        if frames.len() != n * t * h * w * c {
            return Err(Error::dim("dataset frames", n * t * h * w * c, frames.len()));
        }
        if let Some(tr) = &truth {
            if tr.radii.len() != n * 2 || tr.positions.len() != n * t * 4 || tr.velocities.len() != n * t * 4 {
                return Err(Error::Format("truth block does not match dataset dims".into()));
            }
        }
        Ok(Self {
            n,
            t,
            h,
            w,
            c,
            frames,
            truth,
        })
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.n, self.t, self.h, self.w, self.c]
    }

    fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn frame(&self, seq: usize, t: usize) -> Frame {
        let f = self.frame_len();
        let start = (seq * self.t + t) * f;
        Frame::new(self.h, self.w, self.c, self.frames[start..start + f].to_vec())
            .expect("dataset frame dims")
    }

    pub fn sequence(&self, seq: usize) -> Vec<Frame> {
        (0..self.t).map(|t| self.frame(seq, t)).collect()
    }

    /// Builds a dataset from equally long, equally shaped sequences.
    pub fn from_sequences(seqs: &[Vec<Frame>]) -> Result<Self> {
        let first = seqs
            .first()
            .and_then(|s| s.first())
            .ok_or_else(|| Error::Format("no frames".into()))?;
        let [h, w, c] = first.shape();
        let t = seqs[0].len();
        let mut frames = Vec::with_capacity(seqs.len() * t * h * w * c);
        for s in seqs {
            if s.len() != t {
                return Err(Error::dim("sequence length", t, s.len()));
            }
            for f in s {
                if f.shape() != [h, w, c] {
                    return Err(Error::shape("frame", &[h, w, c], &f.shape()));
                }
                frames.extend_from_slice(&f.pixels);
            }
        }
        Self::new([seqs.len(), t, h, w, c], frames, None)
    }

    /// Truth positions of sequence `seq` as `[T][ball] -> (x, y)`.
    pub fn truth_track(&self, seq: usize) -> Option<Vec<[(f64, f64); 2]>> {
        let tr = self.truth.as_ref()?;
        Some(
            (0..self.t)
                .map(|t| {
                    let p = &tr.positions[(seq * self.t + t) * 4..(seq * self.t + t + 1) * 4];
                    [(p[0] as f64, p[1] as f64), (p[2] as f64, p[3] as f64)]
                })
                .collect(),
        )
    }

    pub fn truth_radii(&self, seq: usize) -> Option<(f64, f64)> {
        let r = &self.truth.as_ref()?.radii;
        Some((r[2 * seq] as f64, r[2 * seq + 1] as f64))
    }
}

// ---------------------------------------------------------------------------
// Generator configuration

#[derive(Clone, Debug, PartialEq)]
pub struct DataGenConfig {
    pub sequences: usize,
    pub frames: usize,
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub data_seed: u64,
    pub n_sprites: usize,
    /// Pixels per step.
    pub sprite_speed: (f64, f64),
    /// Canvas widths.
    pub radius: (f64, f64),
    pub ood_radius: (f64, f64),
    /// Canvas widths per step.
    pub speed: (f64, f64),
    pub ood_speed: (f64, f64),
    pub ood: bool,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            sequences: 200,
            frames: 10,
            canvas_height: 32,
            canvas_width: 32,
            data_seed: 0,
            n_sprites: 2,
            sprite_speed: (1.0, 3.0),
            radius: (0.06, 0.10),
            ood_radius: (0.11, 0.14),
            speed: (0.01, 0.03),
            ood_speed: (0.035, 0.05),
            ood: false,
        }
    }
}

impl DataGenConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "sequences" => self.sequences = parse_num(key, v)?,
            "frames" => self.frames = parse_num(key, v)?,
            "canvas_height" => self.canvas_height = parse_num(key, v)?,
            "canvas_width" => self.canvas_width = parse_num(key, v)?,
            "data_seed" => self.data_seed = parse_num(key, v)?,
            "n_sprites" => self.n_sprites = parse_num(key, v)?,
            "sprite_speed_min" => self.sprite_speed.0 = parse_num(key, v)?,
            "sprite_speed_max" => self.sprite_speed.1 = parse_num(key, v)?,
            "radius_min" => self.radius.0 = parse_num(key, v)?,
            "radius_max" => self.radius.1 = parse_num(key, v)?,
            "ood_radius_min" => self.ood_radius.0 = parse_num(key, v)?,
            "ood_radius_max" => self.ood_radius.1 = parse_num(key, v)?,
            "speed_min" => self.speed.0 = parse_num(key, v)?,
            "speed_max" => self.speed.1 = parse_num(key, v)?,
            "ood_speed_min" => self.ood_speed.0 = parse_num(key, v)?,
            "ood_speed_max" => self.ood_speed.1 = parse_num(key, v)?,
            "ood" => self.ood = parse_bool(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("sequences", self.sequences);
        w.put("frames", self.frames);
        w.put("canvas_height", self.canvas_height);
        w.put("canvas_width", self.canvas_width);
        w.put("data_seed", self.data_seed);
        w.put("n_sprites", self.n_sprites);
        w.put("sprite_speed_min", self.sprite_speed.0);
        w.put("sprite_speed_max", self.sprite_speed.1);
        w.put("radius_min", self.radius.0);
        w.put("radius_max", self.radius.1);
        w.put("ood_radius_min", self.ood_radius.0);
        w.put("ood_radius_max", self.ood_radius.1);
        w.put("speed_min", self.speed.0);
        w.put("speed_max", self.speed.1);
        w.put("ood_speed_min", self.ood_speed.0);
        w.put("ood_speed_max", self.ood_speed.1);
        w.put("ood", self.ood);
    }

    pub fn sprite_config(&self) -> SpriteConfig {
        SpriteConfig {
            canvas: (self.canvas_height, self.canvas_width),
            n_sprites: self.n_sprites,
            speed: self.sprite_speed,
            t: self.frames,
            n: self.sequences,
            seed: self.data_seed,
        }
    }

    pub fn collision_config(&self) -> CollisionConfig {
        CollisionConfig {
            radius: self.radius,
            ood_radius: self.ood_radius,
            speed: self.speed,
            ood_speed: self.ood_speed,
            ood: self.ood,
            t: self.frames,
            n: self.sequences,
            seed: self.data_seed,
            canvas: (self.canvas_height, self.canvas_width),
        }
    }
}

// ---------------------------------------------------------------------------
// Sprites

pub const GLYPH_SIZE: usize = 9;

const GLYPHS: [[&str; GLYPH_SIZE]; 8] = [
    [
        "....#....", "....#....", "....#....", "....#....", "....#....", "....#....", "....#....",
        "....#....", "....#....",
    ],
    [
        "....#....", "....#....", "....#....", "....#....", "#########", "....#....", "....#....",
        "....#....", "....#....",
    ],
    [
        "##.......", "##.......", "##.......", "##.......", "##.......", "##.......", "##.......",
        "#########", "#########",
    ],
    [
        "...###...", ".##...##.", ".#.....#.", "#.......#", "#.......#", "#.......#", ".#.....#.",
        ".##...##.", "...###...",
    ],
    [
        "#.......#", ".#.....#.", "..#...#..", "...#.#...", "....#....", "...#.#...", "..#...#..",
        ".#.....#.", "#.......#",
    ],
    [
        "#########", "#.......#", "#.......#", "#.......#", "#.......#", "#.......#", "#.......#",
        "#.......#", "#########",
    ],
    [
        "....#....", "...###...", "..#####..", ".#######.", "#########", ".........", ".........",
        ".........", ".........",
    ],
    [
        "#########", ".......##", "......##.", ".....##..", "....##...", "...##....", "..##.....",
        ".##......", "##.......",
    ],
];

pub fn glyph(kind: usize) -> [[f32; GLYPH_SIZE]; GLYPH_SIZE] {
    let mut g = [[0.0; GLYPH_SIZE]; GLYPH_SIZE];
    for (i, row) in GLYPHS[kind % GLYPHS.len()].iter().enumerate() {
        for (j, ch) in row.bytes().enumerate() {
            if ch == b'#' {
                g[i][j] = 1.0;
            }
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteConfig {
    pub canvas: (usize, usize),
    pub n_sprites: usize,
    pub speed: (f64, f64),
    pub t: usize,
    pub n: usize,
    pub seed: u64,
}

/// One axis of specular motion within `[0, max]`.
pub fn reflect_step(pos: f64, vel: f64, max: f64) -> (f64, f64) {
    let mut p = pos + vel;
    let mut v = vel;
    // Large steps can cross both walls; mirror until inside.
    while p < 0.0 || p > max {
        if p > max {
            p = 2.0 * max - p;
        } else {
            p = -p;
        }
        v = -v;
    }
    (p, v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub kind: usize,
    /// Top-left corner `(row, col)` in pixels.
    pub pos: (f64, f64),
    pub vel: (f64, f64),
}

impl Sprite {
    pub fn step(&mut self, canvas: (usize, usize)) {
        let max_r = (canvas.0 - GLYPH_SIZE) as f64;
        let max_c = (canvas.1 - GLYPH_SIZE) as f64;
        let (r, vr) = reflect_step(self.pos.0, self.vel.0, max_r);
        let (c, vc) = reflect_step(self.pos.1, self.vel.1, max_c);
        self.pos = (r, c);
        self.vel = (vr, vc);
    }
}

/// Composites sprites by per-pixel maximum on a black canvas.
pub fn draw_sprites(sprites: &[Sprite], canvas: (usize, usize)) -> Frame {
    let mut f = Frame::zeros(canvas.0, canvas.1, 1);
    for s in sprites {
        let g = glyph(s.kind);
        let (r0, c0) = (s.pos.0.round() as usize, s.pos.1.round() as usize);
        for (i, row) in g.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let (r, c) = (r0 + i, c0 + j);
                if r < canvas.0 && c < canvas.1 && v > f.get(r, c, 0) {
                    f.set(r, c, 0, v);
                }
            }
        }
    }
    f
}

pub fn gen_sprites(config: &SpriteConfig) -> Result<VideoDataset> {
    let (h, w) = config.canvas;
    if h < GLYPH_SIZE || w < GLYPH_SIZE {
        return Err(Error::Config(format!(
            "{GLYPH_SIZE}x{GLYPH_SIZE} sprites do not fit a {h}x{w} canvas"
        )));
    }
    if !(config.speed.0 > 0.0 && config.speed.1 >= config.speed.0) {
        return Err(Error::Config("sprite speed range must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut frames = Vec::with_capacity(config.n * config.t * h * w);
    for _ in 0..config.n {
        let mut sprites: Vec<Sprite> = (0..config.n_sprites)
            .map(|_| {
                let kind = rng.gen_range(0..GLYPHS.len());
                let pos = (
                    rng.gen_range(0.0..=(h - GLYPH_SIZE) as f64),
                    rng.gen_range(0.0..=(w - GLYPH_SIZE) as f64),
                );
                let speed = rng.gen_range(config.speed.0..=config.speed.1);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                Sprite {
                    kind,
                    pos,
                    vel: (speed * angle.sin(), speed * angle.cos()),
                }
            })
            .collect();
        for _ in 0..config.t {
            frames.extend(draw_sprites(&sprites, config.canvas).pixels);
            sprites.iter_mut().for_each(|s| s.step(config.canvas));
        }
    }
    VideoDataset::new([config.n, config.t, h, w, 1], frames, None)
}

// ---------------------------------------------------------------------------
// Collisions

#[derive(Clone, Debug, PartialEq)]
pub struct CollisionConfig {
    pub radius: (f64, f64),
    pub ood_radius: (f64, f64),
    pub speed: (f64, f64),
    pub ood_speed: (f64, f64),
    pub ood: bool,
    pub t: usize,
    pub n: usize,
    pub seed: u64,
    pub canvas: (usize, usize),
}

impl CollisionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && hi >= lo;
        if !(ok(self.radius) && ok(self.ood_radius) && ok(self.speed) && ok(self.ood_speed)) {
            return Err(Error::Config("radius and speed ranges must be positive".into()));
        }
        let (r, _) = self.active();
        // Start intervals are [r, 0.35] and [0.65, 1 - r]; two maximal balls
        // must still be apart.
        if r.1 >= 0.15 {
            return Err(Error::Config("radius range too large for the canvas".into()));
        }
        if self.canvas.0 < 2 || self.canvas.1 < 2 {
            return Err(Error::Config("canvas too small".into()));
        }
        Ok(())
    }

    fn active(&self) -> ((f64, f64), (f64, f64)) {
        if self.ood {
            (self.ood_radius, self.ood_speed)
        } else {
            (self.radius, self.speed)
        }
    }
}

/// Double-precision state of one two-ball run.
#[derive(Clone, Debug, PartialEq)]
pub struct CollisionRun {
    pub radii: [f64; 2],
    /// Per step, x of each ball; both travel along `y = 0.5`.
    pub x: Vec<[f64; 2]>,
    pub v: Vec<[f64; 2]>,
}

impl CollisionRun {
    pub fn masses(&self) -> [f64; 2] {
        [self.radii[0].powi(2), self.radii[1].powi(2)]
    }

    pub fn momentum(&self, t: usize) -> f64 {
        let m = self.masses();
        m[0] * self.v[t][0] + m[1] * self.v[t][1]
    }

    pub fn kinetic_energy(&self, t: usize) -> f64 {
        let m = self.masses();
        0.5 * m[0] * self.v[t][0].powi(2) + 0.5 * m[1] * self.v[t][1].powi(2)
    }
}

pub const BALL_Y: f64 = 0.5;

/// Post-contact velocities of a 1-D elastic collision.
pub fn elastic(m: [f64; 2], v: [f64; 2]) -> [f64; 2] {
    if m[0] == m[1] {
        return [v[1], v[0]];
    }
    let s = m[0] + m[1];
    [
        ((m[0] - m[1]) * v[0] + 2.0 * m[1] * v[1]) / s,
        ((m[1] - m[0]) * v[1] + 2.0 * m[0] * v[0]) / s,
    ]
}

/// Advances `(x, v)` by one unit step, resolving at most one contact at its
/// exact time inside the step.
pub fn collision_step(x: [f64; 2], v: [f64; 2], radii: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    let gap = x[1] - x[0] - radii[0] - radii[1];
    let closing = v[0] - v[1];
    if closing > 0.0 && gap <= closing {
        let tau = (gap / closing).max(0.0);
        let xc = [x[0] + v[0] * tau, x[1] + v[1] * tau];
        let m = [radii[0].powi(2), radii[1].powi(2)];
        let nv = elastic(m, v);
        let rest = 1.0 - tau;
        return ([xc[0] + nv[0] * rest, xc[1] + nv[1] * rest], nv);
    }
    ([x[0] + v[0], x[1] + v[1]], v)
}

/// Samples and integrates `config.n` runs.
pub fn simulate_collisions(config: &CollisionConfig) -> Result<Vec<CollisionRun>> {
    config.validate()?;
    let (rr, sr) = config.active();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut runs = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let radii = [rng.gen_range(rr.0..=rr.1), rng.gen_range(rr.0..=rr.1)];
        let mut x = [
            rng.gen_range(radii[0] + 0.02..=0.35_f64.max(radii[0] + 0.02)),
            rng.gen_range((0.65_f64).min(0.98 - radii[1])..=0.98 - radii[1]),
        ];
        let mut v = [rng.gen_range(sr.0..=sr.1), -rng.gen_range(sr.0..=sr.1)];
        let mut run = CollisionRun {
            radii,
            x: Vec::with_capacity(config.t),
            v: Vec::with_capacity(config.t),
        };
        for _ in 0..config.t {
            run.x.push(x);
            run.v.push(v);
            (x, v) = collision_step(x, v, radii);
        }
        runs.push(run);
    }
    Ok(runs)
}

pub const RED: [f32; 3] = [1.0, 0.0, 0.0];
pub const BLUE: [f32; 3] = [0.0, 0.0, 1.0];

/// Red and blue discs on white with a one-pixel linear edge ramp. Radii are
/// in canvas widths; the vertical axis keeps the same pixel scale.
pub fn draw_balls(x: [f64; 2], radii: [f64; 2], canvas: (usize, usize)) -> Frame {
    let (h, w) = canvas;
    let mut f = Frame::new(h, w, 3, vec![1.0; h * w * 3]).unwrap();
    for (ball, color) in [RED, BLUE].iter().enumerate() {
        let (cx, cy) = (x[ball] * w as f64, BALL_Y * h as f64);
        let r = radii[ball] * w as f64;
        for i in 0..h {
            for j in 0..w {
                let d = ((j as f64 + 0.5 - cx).powi(2) + (i as f64 + 0.5 - cy).powi(2)).sqrt();
                let cover = (r - d + 0.5).clamp(0.0, 1.0) as f32;
                if cover > 0.0 {
                    for (ch, &col) in color.iter().enumerate() {
                        let old = f.get(i, j, ch);
                        f.set(i, j, ch, old + cover * (col - old));
                    }
                }
            }
        }
    }
    f
}

pub fn gen_collisions(config: &CollisionConfig) -> Result<VideoDataset> {
    let runs = simulate_collisions(config)?;
    let (h, w) = config.canvas;
    let mut frames = Vec::with_capacity(config.n * config.t * h * w * 3);
    let mut truth = Truth {
        radii: Vec::with_capacity(config.n * 2),
        positions: Vec::with_capacity(config.n * config.t * 4),
        velocities: Vec::with_capacity(config.n * config.t * 4),
    };
    for run in &runs {
        truth.radii.extend(run.radii.iter().map(|&r| r as f32));
        for t in 0..config.t {
            frames.extend(draw_balls(run.x[t], run.radii, config.canvas).pixels);
            for b in 0..2 {
                truth.positions.extend([run.x[t][b] as f32, BALL_Y as f32]);
                truth.velocities.extend([run.v[t][b] as f32, 0.0]);
            }
        }
    }
    VideoDataset::new([config.n, config.t, h, w, 3], frames, Some(truth))
}

// ---------------------------------------------------------------------------
// Container I/O

pub(crate) struct Reader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) at: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.at,
                self.buf.len() - self.at
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.reserve(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} exceeds the header field")))
}

pub fn encode_dataset(ds: &VideoDataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + ds.frames.len() * 4);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.push(u8::from(ds.truth.is_some()));
    out.extend_from_slice(&narrow::<u32>(ds.n, "N")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(ds.t, "T")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(ds.h, "H")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(ds.w, "W")?.to_le_bytes());
    out.push(narrow::<u8>(ds.c, "C")?);
    push_f32s(&mut out, &ds.frames);
    if let Some(tr) = &ds.truth {
        push_f32s(&mut out, &tr.radii);
        push_f32s(&mut out, &tr.positions);
        push_f32s(&mut out, &tr.velocities);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<VideoDataset> {
    let mut r = Reader { buf: bytes, at: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let flags = r.u8("flags")?;
    if flags & !1 != 0 {
        return Err(Error::Format(format!("unknown dataset flags {flags:#04x}")));
    }
    let n = r.u32("N")? as usize;
    let t = r.u16("T")? as usize;
    let h = r.u16("H")? as usize;
    let w = r.u16("W")? as usize;
    let c = r.u8("C")? as usize;
    let count = [n, t, h, w, c]
        .iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .ok_or_else(|| Error::Format("dataset dims overflow".into()))?;
    let frames = r.f32s(count, "frames")?;
    let truth = if flags & 1 == 1 {
        Some(Truth {
            radii: r.f32s(n * 2, "truth radii")?,
            positions: r.f32s(n * t * 4, "truth positions")?,
            velocities: r.f32s(n * t * 4, "truth velocities")?,
        })
    } else {
        None
    };
    if r.at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after dataset payload",
            bytes.len() - r.at
        )));
    }
    VideoDataset::new([n, t, h, w, c], frames, truth)
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_dataset(ds: &VideoDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn read_dataset(path: &Path) -> Result<VideoDataset> {
    decode_dataset(&std::fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalize {
    None,
    /// Affine map of the global minimum and maximum onto `[0, 1]`.
    MinMax,
}

/// Converts a raw little-endian `f32 [N][T][H][W][C]` dump into a dataset.
pub fn import_raw(bytes: &[u8], dims: [usize; 5], normalize: Normalize) -> Result<VideoDataset> {
    let count: usize = dims.iter().product();
    if bytes.len() != count * 4 {
        return Err(Error::Truncated(format!(
            "raw input has {} bytes, dims need {}",
            bytes.len(),
            count * 4
        )));
    }
    let mut frames: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("raw input contains non-finite values".into()));
    }
    if normalize == Normalize::MinMax {
        let lo = frames.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = frames.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        for v in frames.iter_mut() {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
    VideoDataset::new(dims, frames, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_at_wall() {
        assert_eq!(reflect_step(10.0, 2.0, 10.0), (8.0, -2.0));
        assert_eq!(reflect_step(1.0, -3.0, 10.0), (2.0, 3.0));
        assert_eq!(reflect_step(4.0, 1.5, 10.0), (5.5, 1.5));
    }

    #[test]
    fn static_sprite_static_frames() {
        let mut s = vec![Sprite {
            kind: 1,
            pos: (5.0, 7.0),
            vel: (0.0, 0.0),
        }];
        let f0 = draw_sprites(&s, (32, 32));
        for _ in 0..5 {
            s[0].step((32, 32));
            assert_eq!(draw_sprites(&s, (32, 32)), f0);
        }
    }

    #[test]
    fn sprites_deterministic_bounded_and_inside() {
        let cfg = DataGenConfig {
            sequences: 4,
            ..DataGenConfig::default()
        }
        .sprite_config();
        let a = gen_sprites(&cfg).unwrap();
        assert_eq!(a, gen_sprites(&cfg).unwrap());
        assert!(a.frames.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.dims(), [4, 10, 32, 32, 1]);
        let other = gen_sprites(&SpriteConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn sprite_too_large_rejected() {
        let cfg = SpriteConfig {
            canvas: (8, 32),
            ..DataGenConfig::default().sprite_config()
        };
        assert!(matches!(gen_sprites(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn max_compositing() {
        let s = vec![
            Sprite { kind: 0, pos: (0.0, 0.0), vel: (0.0, 0.0) },
            Sprite { kind: 1, pos: (0.0, 0.0), vel: (0.0, 0.0) },
        ];
        let f = draw_sprites(&s, (9, 9));
        assert!(f.pixels.iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(f.get(4, 4, 0), 1.0);
    }

    #[test]
    fn equal_masses_swap_velocities() {
        let v = elastic([0.01, 0.01], [0.02, -0.03]);
        assert_eq!(v, [-0.03, 0.02]);
        let (_, nv) = collision_step([0.3, 0.5], [0.05, -0.05], [0.08, 0.08]);
        assert_eq!(nv, [-0.05, 0.05]);
    }

    #[test]
    fn contact_time_resolved_inside_step() {
        // Gap 0.04 closing at 0.1 per step: contact at tau 0.4.
        let r = [0.05, 0.05];
        let (x, v) = collision_step([0.3, 0.44], [0.05, -0.05], r);
        assert_eq!(v, [-0.05, 0.05]);
        assert!((x[0] - (0.3 + 0.02 - 0.03)).abs() < 1e-12);
        assert!((x[1] - (0.44 - 0.02 + 0.03)).abs() < 1e-12);
    }

    #[test]
    fn conservation_in_simulator_truth() {
        let cfg = DataGenConfig {
            sequences: 200,
            frames: 40,
            ..DataGenConfig::default()
        }
        .collision_config();
        let runs = simulate_collisions(&cfg).unwrap();
        let mut collided = 0;
        for run in &runs {
            for t in 0..run.x.len() {
                assert!((run.momentum(t) - run.momentum(0)).abs() < 1e-9);
                assert!((run.kinetic_energy(t) - run.kinetic_energy(0)).abs() < 1e-9);
            }
            if run.v.last().unwrap()[0] < 0.0 {
                collided += 1;
            }
        }
        assert!(collided > 0);
    }

    #[test]
    fn ood_ranges_used() {
        let base = DataGenConfig::default();
        let ood = DataGenConfig { ood: true, ..base.clone() }.collision_config();
        for run in simulate_collisions(&ood).unwrap() {
            for r in run.radii {
                assert!((base.ood_radius.0..=base.ood_radius.1).contains(&r));
            }
            assert!(run.v[0][0] >= base.ood_speed.0 && run.v[0][0] <= base.ood_speed.1);
        }
    }

    #[test]
    fn collision_dataset_layout() {
        let cfg = DataGenConfig {
            sequences: 3,
            frames: 5,
            ..DataGenConfig::default()
        }
        .collision_config();
        let ds = gen_collisions(&cfg).unwrap();
        assert_eq!(ds.dims(), [3, 5, 32, 32, 3]);
        let tr = ds.truth.as_ref().unwrap();
        assert_eq!(tr.positions.len(), 3 * 5 * 4);
        let f = ds.frame(0, 0);
        assert_eq!(&f.pixels[..3], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn container_round_trip_and_errors() {
        let cfg = DataGenConfig {
            sequences: 2,
            frames: 3,
            ..DataGenConfig::default()
        }
        .collision_config();
        let ds = gen_collisions(&cfg).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(Error::Version { found: 9, .. })));
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_dataset(&long), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.nvds");
        let ds = gen_sprites(&SpriteConfig {
            n: 2,
            ..DataGenConfig::default().sprite_config()
        })
        .unwrap();
        write_dataset(&ds, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn raw_import() {
        let vals: Vec<f32> = (0..2 * 2 * 2 * 2).map(|i| i as f32 * 2.0 - 3.0).collect();
        let mut bytes = Vec::new();
        push_f32s(&mut bytes, &vals);
        let ds = import_raw(&bytes, [1, 2, 2, 2, 2], Normalize::MinMax).unwrap();
        assert_eq!(ds.frames[0], 0.0);
        assert_eq!(*ds.frames.last().unwrap(), 1.0);
        let raw = import_raw(&bytes, [1, 2, 2, 2, 2], Normalize::None).unwrap();
        assert_eq!(raw.frames, vals);
        assert!(matches!(import_raw(&bytes[..8], [1, 2, 2, 2, 2], Normalize::None), Err(Error::Truncated(_))));
    }
}
