//! Evaluation metrics: intensity distributions, structural similarity, PSNR,
//! spectral distance and ball-tracking physics errors.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::inr::Frame;
use crate::synthdata::VideoDataset;

pub const DEFAULT_BINS: usize = 64;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const BALL_THRESHOLD: f64 = 0.8;
pub const PHYSICS_DT: f64 = 0.1;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub probs: Vec<f64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.probs.len()
    }

    pub fn centers(&self) -> Vec<f64> {
        let n = self.bins() as f64;
        (0..self.bins()).map(|i| (i as f64 + 0.5) / n).collect()
    }
}

/// Pooled histogram of clamped pixel values over `[0, 1]`.
pub fn intensity_hist(frame: &Frame, n_bins: usize) -> Result<Histogram> {
    if n_bins < 1 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let mut counts = vec![0u64; n_bins];
    for &v in &frame.pixels {
        let v = (v as f64).clamp(0.0, 1.0);
        let b = ((v * n_bins as f64) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    let total = frame.pixels.len().max(1) as f64;
    Ok(Histogram {
        probs: counts.into_iter().map(|c| c as f64 / total).collect(),
    })
}

fn same_bins(p: &Histogram, q: &Histogram) -> Result<()> {
    if p.bins() != q.bins() {
        return Err(Error::dim("histogram bins", p.bins(), q.bins()));
    }
    Ok(())
}

/// Wasserstein-1 distance from the CDF difference at bin centres.
pub fn w1(p: &Histogram, q: &Histogram) -> Result<f64> {
    same_bins(p, q)?;
    let step = 1.0 / p.bins() as f64;
    let (mut fp, mut fq, mut acc) = (0.0, 0.0, 0.0);
    for i in 0..p.bins().saturating_sub(1) {
        fp += p.probs[i];
        fq += q.probs[i];
        acc += (fp - fq).abs() * step;
    }
    Ok(acc)
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

/// Square root of the Jensen-Shannon divergence (natural log).
pub fn jsd(p: &Histogram, q: &Histogram) -> Result<f64> {
    same_bins(p, q)?;
    let m: Vec<f64> = p.probs.iter().zip(&q.probs).map(|(a, b)| 0.5 * (a + b)).collect();
    let d = 0.5 * kl_to_mixture(&p.probs, &m) + 0.5 * kl_to_mixture(&q.probs, &m);
    Ok(d.max(0.0).sqrt())
}

/// Bhattacharyya distance; `+inf` for disjoint supports.
pub fn bhattacharyya(p: &Histogram, q: &Histogram) -> Result<f64> {
    same_bins(p, q)?;
    let bc: f64 = p.probs.iter().zip(&q.probs).map(|(a, b)| (a * b).sqrt()).sum();
    if bc == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((-bc.ln()).max(0.0))
}

fn same_shape(a: &Frame, b: &Frame) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape("frame", &a.shape(), &b.shape()));
    }
    Ok(())
}

/// Separable "valid" Gaussian filtering of one `h x w` plane.
fn blur_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            tmp[i * ow + j] = (0..k).map(|t| g[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| g[t] * tmp[(i + t) * ow + j]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = blur_valid(a, h, w, &g);
    let mu_b = blur_valid(b, h, w, &g);
    let aa = blur_valid(&prod(a, a), h, w, &g);
    let bb = blur_valid(&prod(b, b), h, w, &g);
    let ab = blur_valid(&prod(a, b), h, w, &g);
    let n = mu_a.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    acc / n as f64
}

fn planes(f: &Frame) -> Vec<Vec<f64>> {
    (0..f.channels)
        .map(|c| f.channel(c).into_iter().map(f64::from).collect())
        .collect()
}

/// Mean local SSIM over valid window positions, averaged over channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    same_shape(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::shape(
            "SSIM frame (minimum)",
            &[SSIM_WINDOW, SSIM_WINDOW],
            &[a.height, a.width],
        ));
    }
    let (pa, pb) = (planes(a), planes(b));
    let total: f64 = pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| ssim_plane(x, y, a.height, a.width))
        .sum();
    Ok(total / a.channels as f64)
}

/// Peak signal-to-noise ratio with peak 1, averaged over channels; `+inf`
/// when the frames are identical.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    same_shape(a, b)?;
    let (pa, pb) = (planes(a), planes(b));
    let mut total = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        let mse = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64;
        total += if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() };
    }
    Ok(total / a.channels as f64)
}

fn fft_magnitude(f: &Frame, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let (h, w) = (f.height, f.width);
    let mut data: Vec<Complex<f64>> = f.pixels.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    let row_fft = planner.plan_fft_forward(w);
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = data[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            data[i * w + j] = col[i];
        }
    }
    data.iter().map(|c| c.norm()).collect()
}

/// Frobenius distance between the mean ground-truth FFT magnitude and the
/// prediction's, divided by `H W`.
pub fn fft_distance(gt_frames: &[Frame], pred: &Frame) -> Result<f64> {
    if pred.channels != 1 {
        return Err(Error::dim("FFT distance channels", 1, pred.channels));
    }
    if gt_frames.is_empty() {
        return Err(Error::Format("FFT distance needs ground-truth frames".into()));
    }
    let mut planner = FftPlanner::new();
    let mut mean = vec![0.0; pred.pixels.len()];
    for g in gt_frames {
        same_shape(g, pred)?;
        for (m, v) in mean.iter_mut().zip(fft_magnitude(g, &mut planner)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= gt_frames.len() as f64);
    let p = fft_magnitude(pred, &mut planner);
    let d = mean.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(d / (pred.height * pred.width) as f64)
}

/// Signed DFT frequency of index `k` on `n` samples.
fn signed_freq(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Fraction of spectral energy, pooled over channels, at frequencies a
/// `band_h x band_w` grid cannot represent: `|f_y| >= band_h / 2` or
/// `|f_x| >= band_w / 2` cycles per frame.
pub fn energy_above_band(frame: &Frame, band_h: usize, band_w: usize) -> Result<f64> {
    let (h, w) = (frame.height, frame.width);
    let mut planner = FftPlanner::new();
    let (mut above, mut total) = (0.0, 0.0);
    for ch in 0..frame.channels {
        let plane = Frame::new(h, w, 1, frame.channel(ch))?;
        let mag = fft_magnitude(&plane, &mut planner);
        for ky in 0..h {
            for kx in 0..w {
                let e = mag[ky * w + kx].powi(2);
                total += e;
                let fy = signed_freq(ky, h).unsigned_abs() as f64;
                let fx = signed_freq(kx, w).unsigned_abs() as f64;
                if 2.0 * fy >= band_h as f64 || 2.0 * fx >= band_w as f64 {
                    above += e;
                }
            }
        }
    }
    Ok(if total == 0.0 { 0.0 } else { above / total })
}

/// Red and blue centroids in `[0, 1]` coordinates; `None` when a mask is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BallObservation {
    pub red: Option<(f64, f64)>,
    pub blue: Option<(f64, f64)>,
}

pub fn extract_positions(frame: &Frame, tau: f64) -> Result<BallObservation> {
    if frame.channels != 3 {
        return Err(Error::dim("ball extraction channels", 3, frame.channels));
    }
    let (h, w) = (frame.height, frame.width);
    let mut sums = [(0.0, 0.0, 0usize); 2];
    for i in 0..h {
        for j in 0..w {
            let px = |c| frame.get(i, j, c) as f64;
            let (r, g, b) = (px(0), px(1), px(2));
            let which = if r > tau && g < tau && b < tau {
                Some(0)
            } else if b > tau && r < tau && g < tau {
                Some(1)
            } else {
                None
            };
            if let Some(k) = which {
                sums[k].0 += (j as f64 + 0.5) / w as f64;
                sums[k].1 += (i as f64 + 0.5) / h as f64;
                sums[k].2 += 1;
            }
        }
    }
    let centroid = |(x, y, n): (f64, f64, usize)| (n > 0).then(|| (x / n as f64, y / n as f64));
    Ok(BallObservation {
        red: centroid(sums[0]),
        blue: centroid(sums[1]),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BallTrack {
    /// Per frame, red then blue.
    pub positions: Vec<[(f64, f64); 2]>,
    pub valid: Vec<[bool; 2]>,
}

/// Tracks both balls; a missing ball keeps its last known position, or the
/// canvas centre before its first detection.
pub fn track_balls(frames: &[Frame], tau: f64) -> Result<BallTrack> {
    let mut last = [(0.5, 0.5); 2];
    let mut track = BallTrack {
        positions: Vec::with_capacity(frames.len()),
        valid: Vec::with_capacity(frames.len()),
    };
    for f in frames {
        let obs = extract_positions(f, tau)?;
        let mut valid = [false; 2];
        for (k, o) in [obs.red, obs.blue].into_iter().enumerate() {
            if let Some(p) = o {
                last[k] = p;
                valid[k] = true;
            }
        }
        track.positions.push(last);
        track.valid.push(valid);
    }
    Ok(track)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicsErrors {
    pub pos: f64,
    pub mom: f64,
    pub ke: f64,
}

fn velocities(p: &[[(f64, f64); 2]], t: usize) -> [(f64, f64); 2] {
    let v = |k: usize| {
        (
            (p[t][k].0 - p[t - 1][k].0) / PHYSICS_DT,
            (p[t][k].1 - p[t - 1][k].1) / PHYSICS_DT,
        )
    };
    [v(0), v(1)]
}

/// Time-averaged position, momentum and kinetic-energy errors with masses
/// `r^2` and finite-difference velocities.
pub fn physics_errors(
    track: &[[(f64, f64); 2]],
    truth: &[[(f64, f64); 2]],
    radii: (f64, f64),
) -> Result<PhysicsErrors> {
    if track.len() != truth.len() {
        return Err(Error::dim("track length", truth.len(), track.len()));
    }
    let n = track.len();
    if n == 0 {
        return Ok(PhysicsErrors { pos: 0.0, mom: 0.0, ke: 0.0 });
    }
    let pos = track
        .iter()
        .zip(truth)
        .map(|(a, b)| {
            (0..2)
                .map(|k| ((a[k].0 - b[k].0).powi(2) + (a[k].1 - b[k].1).powi(2)).sqrt())
                .sum::<f64>()
                / 2.0
        })
        .sum::<f64>()
        / n as f64;
    let m = [radii.0 * radii.0, radii.1 * radii.1];
    let (mut mom, mut ke) = (0.0, 0.0);
    for t in 1..n {
        let (va, vb) = (velocities(track, t), velocities(truth, t));
        let p = |v: &[(f64, f64); 2]| (m[0] * v[0].0 + m[1] * v[1].0, m[0] * v[0].1 + m[1] * v[1].1);
        let e = |v: &[(f64, f64); 2]| {
            (0..2)
                .map(|k| 0.5 * m[k] * (v[k].0 * v[k].0 + v[k].1 * v[k].1))
                .sum::<f64>()
        };
        let (pa, pb) = (p(&va), p(&vb));
        mom += ((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt();
        ke += (e(&va) - e(&vb)).abs();
    }
    let steps = (n - 1).max(1) as f64;
    Ok(PhysicsErrors {
        pos,
        mom: mom / steps,
        ke: ke / steps,
    })
}

/// Per-sequence metric values with summary rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<(usize, String, f64)>,
}

impl EvalReport {
    pub fn push(&mut self, seq: usize, metric: &str, value: f64) {
        self.rows.push((seq, metric.to_string(), value));
    }

    /// `(mean, std)` of one metric across sequences (population std).
    pub fn summary(&self, metric: &str) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.1 == metric).map(|r| r.2).collect();
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some((mean, var.sqrt()))
    }

    pub fn metrics(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.1) {
                names.push(r.1.clone());
            }
        }
        names
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("sequence\tmetric\tvalue\n");
        for (s, m, v) in &self.rows {
            out.push_str(&format!("{s}\t{m}\t{v:.6}\n"));
        }
        for m in self.metrics() {
            let (mean, std) = self.summary(&m).unwrap();
            out.push_str(&format!("mean\t{m}\t{mean:.6} ± {std:.6}\n"));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    W1,
    Jsd,
    Bhattacharyya,
    Ssim,
    Psnr,
    Fft,
    Position,
    Momentum,
    Energy,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::W1,
        Metric::Jsd,
        Metric::Bhattacharyya,
        Metric::Ssim,
        Metric::Psnr,
        Metric::Fft,
        Metric::Position,
        Metric::Momentum,
        Metric::Energy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::W1 => "w1",
            Metric::Jsd => "jsd",
            Metric::Bhattacharyya => "bhattacharyya",
            Metric::Ssim => "ssim",
            Metric::Psnr => "psnr",
            Metric::Fft => "fft",
            Metric::Position => "pos_err",
            Metric::Momentum => "mom_err",
            Metric::Energy => "ke_err",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }

    /// Comma-separated list of metric names.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(Metric::parse).collect()
    }
}

fn mean(vals: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in vals {
        sum += v?;
        n += 1;
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Scores every predicted sequence against the reference sequence of the same
/// index over their common length. Frame metrics are averaged over time;
/// predictions are clamped to `[0, 1]` first. Physics metrics need reference
/// ground truth.
pub fn evaluate(pred: &VideoDataset, reference: &VideoDataset, metrics: &[Metric]) -> Result<EvalReport> {
    if pred.n > reference.n {
        return Err(Error::dim("evaluated sequences", reference.n, pred.n));
    }
    let t = pred.t.min(reference.t);
    let mut report = EvalReport::default();
    for seq in 0..pred.n {
        let p: Vec<Frame> = pred.sequence(seq)[..t].iter().map(Frame::clamped).collect();
        let r = &reference.sequence(seq)[..t];
        let pairs = || p.iter().zip(r);
        let hist = |f: fn(&Histogram, &Histogram) -> Result<f64>| {
            mean(pairs().map(|(a, b)| f(&intensity_hist(a, DEFAULT_BINS)?, &intensity_hist(b, DEFAULT_BINS)?)))
        };
        let physics = || -> Result<PhysicsErrors> {
            let truth = reference
                .truth_track(seq)
                .ok_or_else(|| Error::MissingSection("reference ground truth".into()))?;
            let radii = reference.truth_radii(seq).unwrap();
            physics_errors(&track_balls(&p, BALL_THRESHOLD)?.positions, &truth[..t], radii)
        };
        for &m in metrics {
            let v = match m {
                Metric::W1 => hist(w1)?,
                Metric::Jsd => hist(jsd)?,
                Metric::Bhattacharyya => hist(bhattacharyya)?,
                Metric::Ssim => mean(pairs().map(|(a, b)| ssim(a, b)))?,
                Metric::Psnr => mean(pairs().map(|(a, b)| psnr(a, b)))?,
                Metric::Fft => mean(p.iter().map(|a| fft_distance(r, a)))?,
                Metric::Position => physics()?.pos,
                Metric::Momentum => physics()?.mom,
                Metric::Energy => physics()?.ke,
            };
            report.push(seq, m.name(), v);
        }
    }
    Ok(report)
}
