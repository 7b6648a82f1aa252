use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn wsworld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsworld"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = wsworld(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    wsworld(args).status.code().unwrap()
}

const TINY: &str = "\
frame_height = 16
frame_width = 16
canvas_height = 16
canvas_width = 16
encoder_channels = 4,8
inr_depth = 3
inr_width = 8
fourier_bands = 4
idm_hidden = 16
fdm_hidden = 16
gcm_hidden = 16
gcm_heads = 2
gcm_blocks = 1
sequences = 4
frames = 5
batch_size = 2
steps = 3
learning_rate = 0.001
rollout_steps = 5
context_ratio = 0.4
";

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.cfg"), config).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    fn sprites(&self) -> String {
        let out = self.path("data.bin");
        ok(&["data", "gen", "--kind", "sprites", "--config", &self.path("run.cfg"), "--out", &out]);
        out
    }

    fn train(&self, phase: &str, init: Option<&str>, out: &str) -> String {
        let data = self.path("data.bin");
        let cfg = self.path("run.cfg");
        let out = self.path(out);
        let mut args = vec!["train", "--phase", phase, "--config", &cfg, "--data", &data, "--out", &out];
        if let Some(i) = init {
            args.extend(["--init", i]);
        }
        ok(&args);
        out
    }

    /// Phases 1, 2 and 3 in sequence; returns the final checkpoint.
    fn trained(&self) -> String {
        self.sprites();
        let p1 = self.train("1", None, "p1.ckpt");
        let p2 = self.train("2", Some(&p1), "p2.ckpt");
        self.train("3", Some(&p2), "p3.ckpt")
    }
}

fn dims(path: &str) -> [usize; 5] {
    wsworld::synthdata::read_dataset(Path::new(path)).unwrap().dims()
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = wsworld(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn defaults_list_round_trips() {
    let out = ok(&["defaults"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("context_ratio = "));
    assert_eq!(
        wsworld::config::RunConfig::parse(&text).unwrap(),
        wsworld::config::RunConfig::default()
    );
}

#[test]
fn data_gen_and_import() {
    let ws = Workspace::new(TINY);
    assert_eq!(dims(&ws.sprites()), [4, 5, 16, 16, 1]);
    let col = ws.path("col.bin");
    ok(&["data", "gen", "--kind", "collisions", "--config", &ws.path("run.cfg"), "--out", &col]);
    assert_eq!(dims(&col), [4, 5, 16, 16, 3]);

    let raw = ws.path("raw.f32");
    let values: Vec<u8> = (0..2 * 3 * 4 * 4).flat_map(|i| (i as f32 * 2.0).to_le_bytes()).collect();
    std::fs::write(&raw, values).unwrap();
    let imported = ws.path("imp.bin");
    ok(&["data", "import", "--raw", &raw, "--dims", "1,2,4,4,3", "--normalize", "minmax", "--out", &imported]);
    let ds = wsworld::synthdata::read_dataset(Path::new(&imported)).unwrap();
    assert_eq!(ds.dims(), [1, 2, 4, 4, 3]);
    assert_eq!(ds.frames.iter().cloned().fold(f32::MIN, f32::max), 1.0);
    assert_eq!(code(&["data", "import", "--raw", &raw, "--dims", "1,2,4,4", "--out", &imported]), 1);
    assert_eq!(code(&["data", "import", "--raw", &raw, "--dims", "1,2,4,4,4", "--out", &imported]), 2);
}

#[test]
fn bad_config_key_is_usage_error() {
    let ws = Workspace::new("learning_rat = 0.1\n");
    let out = wsworld(&["data", "gen", "--kind", "sprites", "--config", &ws.path("run.cfg"), "--out", &ws.path("x")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn phase_prerequisites_enforced() {
    let ws = Workspace::new(TINY);
    let data = ws.sprites();
    let p1 = ws.train("1", None, "p1.ckpt");
    let log = std::fs::read_to_string(format!("{p1}.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("0\t1\t"));
    let cfg = ws.path("run.cfg");
    let p3 = ws.path("p3.ckpt");
    let args = ["train", "--phase", "3", "--config", &cfg, "--data", &data, "--init", &p1, "--out", &p3];
    assert_eq!(code(&args), 2);
    let roll = ws.path("roll.bin");
    assert_eq!(code(&["rollout", "--ckpt", &p1, "--data", &data, "--out", &roll]), 2);
    // A phase-2 checkpoint is accepted for phase 3.
    let p2 = ws.train("2", Some(&p1), "p2.ckpt");
    ws.train("3", Some(&p2), "p3.ckpt");
    assert_eq!(code(&["train", "--phase", "4", "--config", &cfg, "--data", &data, "--out", &p3]), 1);
}

#[test]
fn empty_retarget_matches_rollout() {
    let ws = Workspace::new(TINY);
    let ckpt = ws.trained();
    let data = ws.path("data.bin");
    let a = ws.path("roll.bin");
    let b = ws.path("ret.bin");
    ok(&["rollout", "--ckpt", &ckpt, "--data", &data, "--context-ratio", "0.4", "--steps", "5", "--out", &a]);
    ok(&[
        "retarget", "--ckpt", &ckpt, "--data", &data, "--context-ratio", "0.4", "--steps", "5",
        "--intervene-at", "", "--out", &b,
    ]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(dims(&a), [4, 5, 16, 16, 1]);
    let table = std::fs::read_to_string(format!("{a}.actions.tsv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4 * 4);
    assert!(table.lines().nth(1).unwrap().starts_with("0\t1\tidm"));

    let c = ws.path("motion.bin");
    ok(&[
        "retarget", "--ckpt", &ckpt, "--data", &data, "--intervene-at", "2,3", "--mode", "motion",
        "--zero-actions", "--alien-seq", "1", "--out", &c,
    ]);
    let table = std::fs::read_to_string(format!("{c}.actions.tsv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("0\t2\talien\t-\t0,0,0,0")));
    let args = ["retarget", "--ckpt", &ckpt, "--data", &data, "--intervene-at", "9", "--out", &c];
    assert_eq!(code(&args), 2);
}

#[test]
fn superres_scales_output() {
    let cfg = TINY
        .replace("frame_width = 16", "frame_width = 32")
        .replace("canvas_width = 16", "canvas_width = 32")
        .replace("frame_height = 16", "frame_height = 16");
    let ws = Workspace::new(&cfg);
    let data = ws.sprites();
    let ckpt = ws.train("1", None, "p1.ckpt");
    let out = ws.path("sr.bin");
    ok(&["superres", "--ckpt", &ckpt, "--data", &data, "--scale", "4", "--sequences", "2", "--out", &out]);
    assert_eq!(dims(&out), [2, 5, 64, 128, 1]);
    let no_mask = ws.path("sr_nomask.bin");
    ok(&["superres", "--ckpt", &ckpt, "--data", &data, "--scale", "2", "--no-mask", "--out", &no_mask]);
    assert_eq!(dims(&no_mask), [4, 5, 32, 64, 1]);
}

#[test]
fn eval_writes_report() {
    let ws = Workspace::new(TINY);
    let data = ws.sprites();
    let report = ws.path("report.txt");
    let out = ok(&["eval", "--pred", &data, "--ref", &data, "--metrics", "ssim,psnr,w1", "--out", &report]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 3 + 3);
    assert!(text.contains("mean\tssim\t1.000000 ± 0.000000"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("w1\t0.000000"));
    assert_eq!(code(&["eval", "--pred", &data, "--ref", &data, "--metrics", "lpips", "--out", &report]), 1);
    let missing: PathBuf = ws.dir.path().join("nope.bin");
    let missing = missing.to_string_lossy();
    assert_eq!(code(&["eval", "--pred", &missing, "--ref", &data, "--out", &report]), 2);
}
