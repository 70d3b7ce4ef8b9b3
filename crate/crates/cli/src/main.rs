//! `runseg` command-line interface.
//!
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 for
//! data and numerical errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use runseg::io::{
    emit_loss_curve, emit_solve_trace, load_image, load_mask, parse_config, save_mask, RunConfig,
};
use runseg::metrics::{evaluate, MetricReport};
use runseg::solver::solve_with;
use runseg::synth::{make_suite, read_manifest, scene_checksum, Difficulty, DEFAULT_SIZE};
use runseg::unfolded::{
    forward_from, load_checkpoint, save_checkpoint, train, ParamSet, Sample, UnfoldedConfig,
};
use runseg::Error;

#[derive(Parser)]
#[command(
    name = "runseg",
    version,
    about = "Concealed object segmentation on PGM/PPM images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment one image with the model-based solver, or with a trained
    /// unfolded model when a checkpoint is given.
    Solve(SolveArgs),
    /// Train the unfolded model on a synthetic suite manifest.
    Train(TrainArgs),
    /// Score predicted masks against ground truth, matched by file name.
    Eval(EvalArgs),
    /// Write a synthetic scene suite and its manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Input PGM/PPM; defaults to `paths.input` from the config.
    image: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// External initial mask `M_0`.
    #[arg(long)]
    init_mask: Option<PathBuf>,
    /// Trained unfolded model; defaults to `paths.checkpoint` when set.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ground truth, adds MAE and IoU columns to the trace.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Output mask; defaults to `paths.output`, then `mask.pgm`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-stage trace CSV; defaults to the output path with a `.csv` extension.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Suite manifest; defaults to `paths.manifest` from the config.
    manifest: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write; defaults to `paths.checkpoint`, then `model.ckpt`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss-curve CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    pred_dir: PathBuf,
    gt_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    difficulty: Difficulty,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Side length in pixels.
    #[arg(long, default_value_t = DEFAULT_SIZE)]
    size: usize,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(c) => Failure::Usage(c.to_string()),
            other => Failure::Data(other),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            parse_config(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

/// Command-line value, else a non-empty config path.
fn pick(arg: Option<PathBuf>, from_config: &str) -> Option<PathBuf> {
    arg.or_else(|| (!from_config.is_empty()).then(|| PathBuf::from(from_config)))
}

fn run_solve(args: SolveArgs) -> CliResult {
    let cfg = load_config(args.config.as_deref())?;
    let image_path = pick(args.image, &cfg.paths.input)
        .ok_or_else(|| Failure::Usage("no input image given and `paths.input` is empty".into()))?;
    let out = pick(args.out, &cfg.paths.output).unwrap_or_else(|| PathBuf::from("mask.pgm"));
    let c = load_image(&image_path)?;
    let init = args.init_mask.as_deref().map(load_mask).transpose()?;
    let gt = args.gt.as_deref().map(load_mask).transpose()?;

    if let Some(ckpt) = pick(args.checkpoint, &cfg.paths.checkpoint) {
        let params = load_checkpoint(&ckpt)?;
        let model = UnfoldedConfig {
            stages: params.stages(),
            hidden: params.hidden(),
            ..cfg.unfolded_config()
        };
        let result = forward_from(
            &c,
            gt.as_ref(),
            init.as_ref(),
            &params,
            &model,
            gt.is_some(),
        )?;
        save_mask(&out, result.final_mask())?;
        if let Some(loss) = result.loss {
            eprintln!("loss {:.6}", loss.total);
        }
        eprintln!("wrote {}", out.display());
        return Ok(());
    }

    let result = solve_with(&c, &cfg.solver, init.as_ref(), gt.as_ref())?;
    save_mask(&out, result.final_mask())?;
    let trace = args.trace.unwrap_or_else(|| out.with_extension("csv"));
    emit_solve_trace(&trace, &result)?;
    eprintln!("wrote {} and {}", out.display(), trace.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> CliResult {
    let cfg = load_config(args.config.as_deref())?;
    let manifest_path = pick(args.manifest, &cfg.paths.manifest)
        .ok_or_else(|| Failure::Usage("no manifest given and `paths.manifest` is empty".into()))?;
    let out = pick(args.out, &cfg.paths.checkpoint).unwrap_or_else(|| PathBuf::from("model.ckpt"));
    let manifest = read_manifest(&manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut data = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let c = load_image(root.join(&e.path))?;
        let gt = load_mask(root.join(e.gt_path()))?;
        if scene_checksum(&c, &gt)? != e.checksum {
            return Err(Error::Checksum(e.path.clone()).into());
        }
        data.push(Sample::new(c, gt)?);
    }
    let model = cfg.unfolded_config();
    let tc = cfg.training.train_config();
    let init = ParamSet::init(model.stages, model.hidden, tc.seed)?;
    eprintln!(
        "training {} stages on {} scenes for {} steps",
        model.stages,
        data.len(),
        tc.steps
    );
    let report = train(&data, init, &model, &tc)?;
    save_checkpoint(&out, &report.params)?;
    let curve = args.curve.unwrap_or_else(|| out.with_extension("csv"));
    emit_loss_curve(&curve, &report.curve)?;
    if let Some(last) = report.curve.last() {
        eprintln!("final loss {:.6}", last.loss);
    }
    eprintln!("wrote {} and {}", out.display(), curve.display());
    Ok(())
}

fn mask_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::from)? {
        let path = entry.map_err(Error::from)?.path();
        if matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("pgm" | "ppm")
        ) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Ground truth for a prediction: the same file name, else `<stem>_gt.pgm`.
fn ground_truth_for(pred: &Path, gt_dir: &Path) -> Option<PathBuf> {
    let name = pred.file_name()?;
    let same = gt_dir.join(name);
    if same.is_file() {
        return Some(same);
    }
    let stem = pred.file_stem()?.to_str()?;
    let suffixed = gt_dir.join(format!("{stem}_gt.pgm"));
    suffixed.is_file().then_some(suffixed)
}

fn row(name: &str, r: &MetricReport) -> String {
    format!("{name},{},{},{},{}", r.mae, r.f_beta, r.iou, r.dice)
}

fn run_eval(args: EvalArgs) -> CliResult {
    let preds: Vec<PathBuf> = mask_files(&args.pred_dir)?
        .into_iter()
        .filter(|p| {
            !p.file_stem()
                .and_then(|s| s.to_str())
                .is_some_and(|s| s.ends_with("_gt"))
        })
        .collect();
    if preds.is_empty() {
        return Err(
            Error::InvalidArgument(format!("no masks in {}", args.pred_dir.display())).into(),
        );
    }
    println!("file,mae,f_beta,iou,dice");
    let mut sum = [0.0; 4];
    for p in &preds {
        let gt_path = ground_truth_for(p, &args.gt_dir).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no ground truth for {} in {}",
                p.display(),
                args.gt_dir.display()
            ))
        })?;
        let r = evaluate(&load_mask(p)?, &load_mask(&gt_path)?)?;
        for (s, v) in sum.iter_mut().zip([r.mae, r.f_beta, r.iou, r.dice]) {
            *s += v;
        }
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("?");
        println!("{}", row(name, &r));
    }
    let n = preds.len() as f64;
    println!(
        "mean,{},{},{},{}",
        sum[0] / n,
        sum[1] / n,
        sum[2] / n,
        sum[3] / n
    );
    Ok(())
}

fn run_synth(args: SynthArgs) -> CliResult {
    if args.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let manifest = make_suite(args.n, args.difficulty, args.seed, args.size, &args.out)?;
    eprintln!("wrote {} scenes and {}", args.n, manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Solve(a) => run_solve(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
