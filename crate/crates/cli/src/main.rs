//! `esmstereo`: train, evaluate and run the stereo network from the shell.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure (non-finite loss, failed gradient check).

mod viz;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use esm_stereo::data::image::{write_rgb, write_rgb8};
use esm_stereo::data::pfm::{read_pfm, write_pfm};
use esm_stereo::data::synth::generate_random_dot_pair;
use esm_stereo::data::{evaluation_mask, load_sample, read_manifest, write_atomic, write_manifest, ManifestEntry, StereoSample};
use esm_stereo::gradsuite::run_grad_suite;
use esm_stereo::metrics::{EvalAccumulator, EvalReport};
use esm_stereo::trainer::{self, load_checkpoint, TrainConfig};
use esm_stereo::{Error, EsmStereo, ModelConfig, ParamStore, Variant, VolumeKind};
use esm_tensor::TensorError;
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "esmstereo", version, about = "Lightweight stereo disparity estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch on a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Score predictions against ground truth and write a report.
    Eval(EvalArgs),
    /// Predict disparity for every pair of a manifest.
    Infer(InferArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradArgs),
    /// Write random-dot stereo pairs and their manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Cost volume: gwc or nc.
    #[arg(long)]
    kind: Option<VolumeKind>,
    #[arg(long)]
    dmax: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory to create.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for the loss curve (`losses.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Run this checkpoint on the manifest.
    #[arg(long, conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of `<id>.pfm` predictions to score instead.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Disparity range scored with `--predictions` (a checkpoint brings its own).
    #[arg(long, default_value_t = 32)]
    dmax: usize,
    /// Writes `report.txt` and `report.json` here.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Only cases whose name contains this.
    #[arg(long)]
    filter: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    /// Disparities are drawn from `0..dmax`.
    #[arg(long, default_value_t = 31)]
    dmax: usize,
    /// Side of the constant-disparity tiles.
    #[arg(long, default_value_t = 16)]
    block: usize,
    /// Pair `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 100)]
    seed: u64,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => Failure::Usage(msg),
            Error::Numerical(_) | Error::Tensor(TensorError::NonFinite(_) | TensorError::NonFiniteGradient { .. }) => {
                Failure::Numerical(msg)
            }
            _ => Failure::Data(msg),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

fn load_all(entries: &[ManifestEntry]) -> Result<Vec<StereoSample>, Error> {
    entries.iter().map(load_sample).collect()
}

fn nonempty(entries: Vec<ManifestEntry>, manifest: &Path) -> Result<Vec<ManifestEntry>, Failure> {
    if entries.is_empty() {
        return Err(Failure::Data(format!("{}: no entries", manifest.display())));
    }
    Ok(entries)
}

fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::new(ModelConfig::desk(Variant::S, VolumeKind::Gwc)),
    };
    if a.variant.is_some() || a.kind.is_some() || a.dmax.is_some() {
        let seed = cfg.model.seed;
        cfg.model = ModelConfig::new(
            a.variant.unwrap_or(cfg.model.variant),
            a.kind.unwrap_or(cfg.model.kind),
            a.dmax.unwrap_or(cfg.model.d_max),
        );
        cfg.model.seed = seed;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let entries = nonempty(read_manifest(&a.manifest)?, &a.manifest)?;
    let samples = load_all(&entries)?;
    eprintln!("training {} on {} pairs for {} epochs", cfg.model.name(), samples.len(), cfg.epochs);
    let out = trainer::train::<f32>(&cfg, &samples, Some(a.checkpoint.clone()), |step, loss| {
        if step % 50 == 0 {
            eprintln!("step {step:>6} loss {loss:.5}");
        }
    })?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let mut csv = String::from("step,loss\n");
        for (i, l) in out.losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        write_atomic(&dir.join("losses.csv"), csv.as_bytes())?;
    }
    eprintln!("wrote {}", a.checkpoint.display());
    Ok(())
}

/// Prediction of one pair as plain values, so it can cross threads.
fn predict_values(net: &EsmStereo, store: &ParamStore<f32>, sample: &StereoSample) -> Result<Vec<f32>, Error> {
    Ok(trainer::predict(net, store, sample)?.data.to_vec())
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<(), Error> {
    write_atomic(&dir.join("report.txt"), report.to_text().as_bytes())?;
    write_atomic(&dir.join("report.json"), report.to_json().as_bytes())
}

fn eval(a: EvalArgs) -> CmdResult {
    let entries = nonempty(read_manifest(&a.manifest)?, &a.manifest)?;
    let per_sample: Vec<Result<EvalAccumulator, Error>> = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), None) => {
            let loaded = load_checkpoint::<f32>(ckpt)?;
            let (net, store) = (&loaded.net, &loaded.store);
            entries
                .par_iter()
                .map(|e| {
                    let s = load_sample(e)?;
                    let pred = predict_values(net, store, &s)?;
                    let mut acc = EvalAccumulator::default();
                    let gt: Vec<f64> = s.gt.data.to_f64_vec();
                    let p: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
                    acc.add(&p, &gt, &evaluation_mask(&s.gt, net.config.d_max))?;
                    Ok(acc)
                })
                .collect()
        }
        (None, Some(dir)) => entries
            .par_iter()
            .map(|e| {
                let gt = esm_stereo::data::read_ground_truth(&e.gt)?;
                let path = dir.join(format!("{}.pfm", e.id()));
                let pred = read_pfm(&path)?;
                if (pred.height, pred.width) != (gt.height(), gt.width()) {
                    return Err(Error::Shape(format!("{}: prediction {}x{} vs ground truth {}x{}", path.display(), pred.height, pred.width, gt.height(), gt.width())));
                }
                let mut acc = EvalAccumulator::default();
                let p: Vec<f64> = pred.data.iter().map(|&v| v as f64).collect();
                acc.add(&p, &gt.data.to_f64_vec(), &evaluation_mask(&gt, a.dmax))?;
                Ok(acc)
            })
            .collect(),
        _ => return Err(Failure::Usage("eval needs exactly one of --checkpoint or --predictions".into())),
    };
    let mut total = EvalAccumulator::default();
    for acc in per_sample {
        total.merge(&acc?);
    }
    let report = total.report()?;
    create_dir(&a.out)?;
    write_report(&a.out, &report)?;
    print!("{}", report.to_text());
    Ok(())
}

fn infer(a: InferArgs) -> CmdResult {
    let loaded = load_checkpoint::<f32>(&a.checkpoint)?;
    let (net, store) = (&loaded.net, &loaded.store);
    let d_max = net.config.d_max as f64;
    let entries = nonempty(read_manifest(&a.manifest)?, &a.manifest)?;
    create_dir(&a.out)?;
    entries
        .par_iter()
        .map(|e| -> Result<(), Error> {
            let s = load_sample(e)?;
            let (h, w) = (s.height(), s.width());
            let pred = predict_values(net, store, &s)?;
            write_pfm(a.out.join(format!("{}.pfm", s.id)), &pred, w, h)?;
            write_rgb8(a.out.join(format!("{}_disp.png", s.id)), w, h, viz::colorize_disparity(&pred, d_max))?;
            let mask = evaluation_mask(&s.gt, net.config.d_max);
            write_rgb8(a.out.join(format!("{}_error.png", s.id)), w, h, viz::colorize_error(&pred, s.gt.data.data(), &mask))?;
            Ok(())
        })
        .collect::<Result<Vec<()>, Error>>()?;
    eprintln!("wrote {} predictions to {}", entries.len(), a.out.display());
    Ok(())
}

fn gradcheck(a: GradArgs) -> CmdResult {
    let reports = run_grad_suite(a.seeds, a.filter.as_deref(), |r| {
        let tag = if r.passed() { "ok" } else { "FAILED" };
        println!("{:<22} {:>3} seeds  max rel err {:.2e}  {:.2}s  {tag}", r.name, r.seeds, r.max_rel_err, r.seconds);
        for (seed, msg) in r.failures.iter().take(3) {
            println!("    seed {seed}: {msg}");
        }
    });
    if reports.is_empty() {
        return Err(Failure::Usage("no gradient case matches the filter".into()));
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} of {} gradient cases failed", reports.len())));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CmdResult {
    create_dir(&a.out)?;
    let mut entries = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let s = generate_random_dot_pair(a.height, a.width, a.dmax, a.block, a.seed + i as u64).map_err(|e| Failure::Usage(e.to_string()))?;
        let left = a.out.join(format!("{}_left.png", s.id));
        let right = a.out.join(format!("{}_right.png", s.id));
        let gt = a.out.join(format!("{}_gt.pfm", s.id));
        write_rgb(&left, &s.left)?;
        write_rgb(&right, &s.right)?;
        let gt_values: Vec<f32> = s.gt.data.data().iter().zip(&s.gt.valid).map(|(&d, &v)| if v { d } else { f32::INFINITY }).collect();
        write_pfm(&gt, &gt_values, a.width, a.height)?;
        entries.push(ManifestEntry { left, right, gt });
    }
    let manifest = a.out.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    println!("{}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
