use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use wsworld::checkpoint::{load_checkpoint, save_checkpoint};
use wsworld::config::RunConfig;
use wsworld::dynamics::Action;
use wsworld::encoder::LatentState;
use wsworld::inr::Frame;
use wsworld::metrics::{evaluate, Metric};
use wsworld::model::ModelState;
use wsworld::rollout::{generate, retarget, superresolve, Intervention, RolloutConfig, RolloutTrace};
use wsworld::synthdata::{gen_collisions, gen_sprites, import_raw, read_dataset, write_dataset, Normalize, VideoDataset};
use wsworld::training::{format_log, train, Phase};
use wsworld::Error;

#[derive(Parser)]
#[command(name = "wsworld", version, about = "Weight-space world model over implicit neural representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or import datasets.
    #[command(subcommand)]
    Data(DataCommand),
    /// Run one training phase and write a checkpoint.
    Train(TrainArgs),
    /// Context-conditioned generation for every reference sequence.
    Rollout(RolloutArgs),
    /// Generation with content and/or motion interventions.
    Retarget(RetargetArgs),
    /// Re-render encoded frames on a denser grid.
    Superres(SuperresArgs),
    /// Score predictions against reference sequences.
    Eval(EvalArgs),
    /// Print every configuration key with its default value.
    Defaults,
}

#[derive(Subcommand)]
enum DataCommand {
    /// Procedurally generate a dataset.
    Gen {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wrap a raw little-endian f32 dump.
    Import {
        #[arg(long)]
        raw: PathBuf,
        /// `N,T,H,W,C`.
        #[arg(long)]
        dims: String,
        #[arg(long, value_enum, default_value = "none")]
        normalize: NormalizeArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Sprites,
    Collisions,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizeArg {
    None,
    Minmax,
}

#[derive(Args)]
struct TrainArgs {
    /// `1`, `2`, `3` or `joint12`.
    #[arg(long)]
    phase: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Loss log path; defaults to `<out>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SourceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Supplies rollout defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Only the first N reference sequences.
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RolloutArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    context_ratio: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RetargetMode {
    Content,
    Motion,
    Both,
}

#[derive(Args)]
struct RetargetArgs {
    #[command(flatten)]
    rollout: RolloutArgs,
    /// Comma-separated 1-based steps; empty for none.
    #[arg(long, default_value = "")]
    intervene_at: String,
    /// Reference sequence supplying alien states and actions.
    #[arg(long, default_value_t = 0)]
    alien_seq: usize,
    #[arg(long, value_enum, default_value = "both")]
    mode: RetargetMode,
    /// Use zero alien actions instead of the alien sequence's.
    #[arg(long)]
    zero_actions: bool,
}

#[derive(Args)]
struct SuperresArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    scale: f64,
    #[arg(long)]
    no_mask: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref", value_name = "REF")]
    reference: PathBuf,
    /// Comma-separated: w1,jsd,bhattacharyya,ssim,psnr,fft,pos_err,mom_err,ke_err.
    #[arg(long, default_value = "w1,jsd,ssim,psnr")]
    metrics: String,
    #[arg(long)]
    out: PathBuf,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Data(DataCommand::Gen { kind, config, out }) => {
            let cfg = load_config(config.as_deref())?.data;
            let ds = match kind {
                DataKind::Sprites => gen_sprites(&cfg.sprite_config())?,
                DataKind::Collisions => gen_collisions(&cfg.collision_config())?,
            };
            write_dataset(&ds, &out)?;
            println!("wrote {} sequences of {} frames to {}", ds.n, ds.t, out.display());
        }
        Command::Data(DataCommand::Import {
            raw,
            dims,
            normalize,
            out,
        }) => {
            let dims = parse_dims(&dims)?;
            let normalize = match normalize {
                NormalizeArg::None => Normalize::None,
                NormalizeArg::Minmax => Normalize::MinMax,
            };
            let ds = import_raw(&std::fs::read(&raw)?, dims, normalize)?;
            write_dataset(&ds, &out)?;
        }
        Command::Train(args) => run_train(args)?,
        Command::Rollout(args) => {
            let job = Job::open(&args.source, &args)?;
            let traces = job.run_all(&Intervention::default)?;
            job.write(&args.source.out, &traces)?;
        }
        Command::Retarget(args) => run_retarget(args)?,
        Command::Superres(args) => {
            let state = load_checkpoint(&args.source.ckpt)?;
            let data = read_dataset(&args.source.data)?;
            let n = limit(&data, args.source.sequences);
            let mut seqs = Vec::with_capacity(n);
            for s in 0..n {
                let latents = state.encoder.encode_batch(&data.sequence(s))?;
                let frames = superresolve(&latents, &state, args.scale, !args.no_mask)?;
                seqs.push(frames.iter().map(export_frame).collect());
            }
            write_dataset(&VideoDataset::from_sequences(&seqs)?, &args.source.out)?;
        }
        Command::Eval(args) => {
            let metrics = Metric::parse_list(&args.metrics)?;
            let report = evaluate(&read_dataset(&args.pred)?, &read_dataset(&args.reference)?, &metrics)?;
            std::fs::write(&args.out, report.to_text())?;
            for m in report.metrics() {
                let (mean, std) = report.summary(&m).unwrap();
                println!("{m}\t{mean:.6} ± {std:.6}");
            }
        }
        Command::Defaults => print!("{}", RunConfig::default().to_text()),
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn parse_dims(s: &str) -> Result<[usize; 5], Error> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Config(format!("--dims `{s}` is not N,T,H,W,C")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("--dims `{s}` needs five values")))
}

fn limit(data: &VideoDataset, n: Option<usize>) -> usize {
    n.map_or(data.n, |n| n.min(data.n))
}

fn run_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.train.phase = Phase::parse(&args.phase)?;
    let data = read_dataset(&args.data)?;
    let init = match &args.init {
        Some(p) => load_checkpoint(p)?,
        None => ModelState::new(cfg.model.clone(), cfg.train.seed)?,
    };
    let outcome = train(&cfg.train, &data, init)?;
    save_checkpoint(&outcome.state, &args.out)?;
    let log_path = args.log.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    std::fs::write(&log_path, format_log(&outcome.log))?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!("phase {}: loss {} -> {} over {} steps", cfg.train.phase.name(), first.loss, last.loss, outcome.log.len());
    }
    Ok(())
}

struct Job {
    state: ModelState,
    data: VideoDataset,
    config: RolloutConfig,
    sequences: usize,
}

impl Job {
    fn open(source: &SourceArgs, args: &RolloutArgs) -> Result<Self, Error> {
        let mut config = load_config(source.config.as_deref())?.rollout;
        if let Some(r) = args.context_ratio {
            config.rho = r;
        }
        if let Some(t) = args.steps {
            config.t_inf = t;
        }
        config.validate()?;
        let state = load_checkpoint(&source.ckpt)?;
        let data = read_dataset(&source.data)?;
        let sequences = limit(&data, source.sequences);
        Ok(Self {
            state,
            data,
            config,
            sequences,
        })
    }

    fn run_all(&self, iv: &dyn Fn() -> Intervention) -> Result<Vec<RolloutTrace>, Error> {
        let grid = self.config.grid(&self.state);
        (0..self.sequences)
            .map(|s| {
                let reference = self.data.sequence(s);
                let iv = iv();
                if iv.is_empty() {
                    generate(&reference, &self.config, &self.state, &grid)
                } else {
                    retarget(&reference, &self.config, &self.state, &grid, &iv)
                }
            })
            .collect()
    }

    /// Frames as a dataset plus a `<out>.actions.tsv` sidecar.
    fn write(&self, out: &Path, traces: &[RolloutTrace]) -> Result<(), Error> {
        let seqs: Vec<Vec<Frame>> = traces.iter().map(|t| t.frames.iter().map(export_frame).collect()).collect();
        write_dataset(&VideoDataset::from_sequences(&seqs)?, out)?;
        let mut table = String::new();
        for (s, tr) in traces.iter().enumerate() {
            for line in tr.action_table().lines().skip(1) {
                table.push_str(&format!("{s}\t{line}\n"));
            }
        }
        let mut side = out.to_path_buf().into_os_string();
        side.push(".actions.tsv");
        std::fs::write(PathBuf::from(side), format!("sequence\tstep\tsource\tcontent\taction\n{table}"))?;
        Ok(())
    }
}

fn run_retarget(args: RetargetArgs) -> Result<(), Error> {
    let job = Job::open(&args.rollout.source, &args.rollout)?;
    let steps: Vec<usize> = args
        .intervene_at
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Config(format!("--intervene-at `{}` is not a step list", args.intervene_at)))?;
    if args.alien_seq >= job.data.n {
        return Err(Error::Config(format!("--alien-seq {} outside {} sequences", args.alien_seq, job.data.n)));
    }
    let alien_frames = job.data.sequence(args.alien_seq);
    let alien_z: Vec<LatentState> = job.state.encoder.encode_batch(&alien_frames)?;
    let mut iv = Intervention {
        steps: steps.iter().copied().collect(),
        ..Intervention::default()
    };
    for &t in &steps {
        if t == 0 || t > alien_z.len() {
            return Err(Error::InsufficientFrames {
                needed: t.max(1),
                available: alien_z.len(),
            });
        }
        if args.mode != RetargetMode::Motion {
            iv.alien_states.insert(t, alien_z[t - 1].clone());
        }
        if args.mode != RetargetMode::Content {
            let u = if args.zero_actions {
                Action::zeros(job.state.config.action_dim)
            } else {
                let next = alien_z.get(t).ok_or(Error::InsufficientFrames {
                    needed: t + 1,
                    available: alien_z.len(),
                })?;
                job.state.idm()?.infer(&alien_z[t - 1], next)?
            };
            iv.alien_actions.insert(t, u);
        }
    }
    let traces = job.run_all(&|| iv.clone())?;
    job.write(&args.rollout.source.out, &traces)
}

/// Clamps to `[0, 1]` and quantises to 8 bits.
fn export_frame(f: &Frame) -> Frame {
    let mut out = f.clamped();
    for v in &mut out.pixels {
        *v = (*v * 255.0).round() / 255.0;
    }
    out
}
