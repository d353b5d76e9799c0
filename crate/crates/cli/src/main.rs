mod plot;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use ijscc::artifacts::{self, Stage2Manifest};
use ijscc::channel_codec::{self, Ablation, Pipeline};
use ijscc::config::{ExperimentConfig, Overrides};
use ijscc::eval::{self, SweepGrid, TrainedModel};
use ijscc::{image, metrics, source, ChannelKind, Error};

#[derive(Parser, Debug)]
#[command(name = "ijscc", version, about = "Split JSCC with a learned BSC interface")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train source codec and interface; writes checkpoint, interface spec and log.
    TrainStage1(TrainStage1),
    /// Train a channel codec against frozen stage-1 artifacts.
    TrainStage2(TrainStage2),
    /// Evaluate one trained pipeline at given SNRs.
    Eval(EvalArgs),
    /// Evaluate a grid of trained pipelines and render plots.
    Sweep(SweepArgs),
    /// Train and compare the ablation arms against shared stage-1 artifacts.
    Ablate(AblateArgs),
    /// Write or describe the interface spec of a stage-1 run.
    ExportInterface(ExportArgs),
    /// Render PSNR-vs-SNR plots from a sweep or ablation table.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct Output {
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainStage1 {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Target bandwidth ratio; sets the symbol count.
    #[arg(long)]
    cbr: Option<f64>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args, Debug)]
struct TrainStage2 {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    stage1_dir: PathBuf,
    #[arg(long, value_parser = parse_channel)]
    channel: Option<ChannelKind>,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    /// Stage-2 seed; the stage-1 seed stays as configured.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cbr: Option<f64>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Stage-2 run directory.
    #[arg(long)]
    model: PathBuf,
    /// Stage-1 run directory; defaults to the one recorded by the stage-2 run.
    #[arg(long)]
    stage1_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_channel)]
    channel: Option<ChannelKind>,
    /// SNR in dB; repeatable. Defaults to the configured evaluation SNRs.
    #[arg(long, allow_negative_numbers = true)]
    snr: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write this many reconstructions (binary PPM) per SNR.
    #[arg(long, default_value_t = 0)]
    save_images: usize,
    #[command(flatten)]
    out: Output,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Stage-2 run directories, one per (channel, cbr) cell.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Config whose `[eval]` section defines the grid; defaults to the first model's.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_channel)]
    channel: Vec<ChannelKind>,
    #[arg(long)]
    cbr: Vec<f64>,
    #[arg(long, allow_negative_numbers = true)]
    snr: Vec<f64>,
    #[arg(long)]
    seed: Vec<u64>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    stage1_dir: PathBuf,
    #[arg(long, value_parser = parse_channel)]
    channel: Option<ChannelKind>,
    /// Arms to run; repeatable. Defaults to all three.
    #[arg(long, value_parser = parse_ablation)]
    ablation: Vec<Ablation>,
    #[arg(long)]
    seed: Vec<u64>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    stage1_dir: PathBuf,
    /// Copy the binary interface spec here.
    #[arg(long)]
    interface: Option<PathBuf>,
    /// Write the JSON description here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// `sweep.csv` or `ablation.csv`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

fn parse_channel(s: &str) -> Result<ChannelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error
            .chain()
            .find_map(|e| e.downcast_ref::<Error>())
            .map(exit_code)
            .unwrap_or(1);
        Self { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::InvalidArgument { .. } => 2,
        Error::Incompatible(_)
        | Error::VersionMismatch { .. }
        | Error::Corrupted { .. }
        | Error::NotFound(_)
        | Error::MissingCells(_)
        | Error::ShapeMismatch { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load_with(path, overrides).map_err(|e| {
        let code = match e {
            Error::NotFound(_) | Error::Io { .. } => 2,
            ref other => exit_code(other),
        };
        Failure {
            code,
            error: anyhow::Error::new(e).context(format!("invalid config {}", path.display())),
        }
    })
}

fn output_dir(out: &Output, default: PathBuf) -> Result<PathBuf, Failure> {
    let dir = out.output.clone().unwrap_or(default);
    artifacts::prepare_output_dir(&dir, out.force)?;
    Ok(dir)
}

fn train_stage1(args: TrainStage1) -> CmdResult {
    let config = load_config(
        &args.config,
        &Overrides {
            seed: args.seed,
            cbr: args.cbr,
            ..Default::default()
        },
    )?;
    let dir = output_dir(&args.out, config.output_dir.join("stage1"))?;
    let data = config.dataset.open(config.seed)?;
    let s1 = config.stage1_config(data.shape());
    eprintln!(
        "stage 1: {} train / {} test images {}, M = {}, L = {}, cbr = {}",
        data.train().len(),
        data.test().len(),
        data.shape(),
        config.bit_count(),
        config.model.symbol_count,
        config.cbr()
    );
    let outcome = source::train_stage1_with(&data, &s1, |r| {
        eprintln!(
            "epoch {:>4}  loss {:.6}  mean_eps {:.4}  psnr_val {:.3} dB",
            r.epoch, r.loss, r.mean_eps, r.psnr_val
        )
    })?;
    let paths = artifacts::save_stage1(&dir, &config, &outcome)?;
    artifacts::write_json(
        &dir.join(artifacts::MANIFEST),
        &json!({
            "command": "train-stage1",
            "config_hash": config.config_hash(),
            "source_hash": config.source_hash(),
            "interface_fingerprint": artifacts::interface_fingerprint(&outcome.spec),
            "training_fingerprint": outcome.spec.training_fingerprint(),
            "seed": config.seed,
            "bit_count": config.bit_count(),
            "cbr": config.cbr(),
        }),
    )?;
    let last = outcome.log.last();
    println!(
        "final loss {:.6}, mean eps {:.4}, val PSNR {:.3} dB",
        last.map_or(f64::NAN, |r| r.loss),
        outcome.spec.mean_epsilon(),
        last.map_or(f64::NAN, |r| r.psnr_val)
    );
    for p in [&paths.checkpoint, &paths.interface, &paths.log] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn train_stage2(args: TrainStage2) -> CmdResult {
    let config = load_config(
        &args.config,
        &Overrides {
            stage2_seed: args.seed,
            cbr: args.cbr,
            channel: args.channel,
            ablation: args.ablation,
            ..Default::default()
        },
    )?;
    let stage1 = artifacts::load_stage1(&args.stage1_dir, &config)
        .with_context(|| format!("loading stage-1 artifacts from {}", args.stage1_dir.display()))?;
    let s2 = config.stage2_config();
    let dir = output_dir(
        &args.out,
        config
            .output_dir
            .join(format!("stage2-{}-{}", s2.channel, s2.codec.ablation)),
    )?;
    let data = config.dataset.open(config.seed)?;
    eprintln!(
        "stage 2: {} channel, arm {}, snr {:?}",
        s2.channel, s2.codec.ablation, s2.snr
    );
    let outcome = channel_codec::train_stage2_with(&data, &stage1.source, &stage1.spec, &s2, |r| {
        let probes: Vec<String> = r
            .psnr_val
            .iter()
            .map(|p| format!("{}dB {:.3}", p.snr_db, p.psnr))
            .collect();
        eprintln!("epoch {:>4}  loss {:.6}  {}", r.epoch, r.loss, probes.join("  "));
    })?;
    let paths = artifacts::save_stage2(&dir, &config, &stage1.spec, &outcome)?;
    let manifest = Stage2Manifest {
        config_hash: config.config_hash(),
        source_hash: config.source_hash(),
        interface_fingerprint: stage1.interface_fingerprint(),
        training_fingerprint: stage1.spec.training_fingerprint().to_string(),
        stage1_dir: std::fs::canonicalize(&args.stage1_dir).unwrap_or(args.stage1_dir.clone()),
        channel: s2.channel,
        ablation: s2.codec.ablation,
        cbr: config.cbr(),
        seed: s2.seed,
    };
    artifacts::write_json(&dir.join(artifacts::MANIFEST), &manifest)?;
    if let Some(last) = outcome.log.last() {
        let probes: Vec<String> = last
            .psnr_val
            .iter()
            .map(|p| format!("{} dB: {:.3}", p.snr_db, p.psnr))
            .collect();
        println!("final loss {:.6}; val PSNR {}", last.loss, probes.join(", "));
    }
    println!("wrote {}", paths.checkpoint.display());
    println!("wrote {}", paths.log.display());
    Ok(())
}

fn write_ppm(path: &Path, img: &image::Image) -> anyhow::Result<()> {
    let shape = img.shape();
    let mut out = format!("P6\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    let px = img.pixels();
    for i in 0..shape.height * shape.width {
        for c in 0..3 {
            let v = px[i * shape.channels + c.min(shape.channels - 1)];
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn eval_cmd(args: EvalArgs) -> CmdResult {
    let run = artifacts::load_run(&args.model, args.stage1_dir.as_deref())?;
    let config = run.config();
    let channel = args.channel.unwrap_or(config.stage2.channel);
    let snrs = if args.snr.is_empty() {
        config.eval.snrs.clone()
    } else {
        args.snr.clone()
    };
    let data = config.dataset.open(config.seed)?;
    let pipeline = Pipeline {
        source: run.stage1.source.codec(),
        channel: &run.stage2.codec,
        spec: &run.stage1.spec,
    };
    let dir = match &args.out.output {
        Some(_) => Some(output_dir(&args.out, PathBuf::new())?),
        None => None,
    };
    let mut rows = Vec::new();
    for &snr in &snrs {
        let cell = eval::SweepCell {
            channel,
            cbr: config.cbr(),
            snr_db: snr,
            seed: args.seed,
        };
        let outcomes = pipeline.evaluate(data.test(), channel, snr, cell.stream_seed(), 256)?;
        let psnr: Vec<f64> = outcomes.iter().map(|o| o.psnr).collect();
        let ber: Vec<f64> = outcomes.iter().map(|o| o.ber).collect();
        println!(
            "{channel} snr {snr:>5} dB: PSNR {:.3} +- {:.3} dB, BER {:.5} over {} images",
            metrics::mean(&psnr),
            metrics::std_dev(&psnr),
            metrics::mean(&ber),
            psnr.len()
        );
        rows.push(json!({
            "channel": channel.to_string(), "snr_db": snr, "seed": args.seed,
            "mean_psnr_db": metrics::mean(&psnr), "std_psnr_db": metrics::std_dev(&psnr),
            "mean_ber": metrics::mean(&ber), "samples": psnr.len(),
        }));
        if let (Some(dir), n) = (&dir, args.save_images) {
            if n > 0 {
                let indices: Vec<usize> = (0..n.min(data.test().len())).collect();
                let x = data.test().batch(&indices)?;
                let mut rng = ChaCha8Rng::seed_from_u64(cell.stream_seed());
                let (recon, _) = pipeline.transmit_batch(&x, channel, snr, &mut rng)?;
                for (i, (orig, rec)) in image::unstack(&x)?.iter().zip(image::unstack(&recon)?).enumerate() {
                    write_ppm(&dir.join(format!("image{i:03}_original.ppm")), orig)?;
                    write_ppm(&dir.join(format!("image{i:03}_{channel}_{snr}dB.ppm")), &rec)?;
                }
            }
        }
    }
    if let Some(dir) = dir {
        artifacts::write_json(
            &dir.join("eval.json"),
            &json!({
                "model": args.model,
                "stage1_dir": run.stage1_dir,
                "interface_fingerprint": run.stage1.interface_fingerprint(),
                "config_hash": config.config_hash(),
                "psnr_cap_db": metrics::PSNR_CAP_DB,
                "results": rows,
            }),
        )?;
    }
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> CmdResult {
    let runs = args
        .models
        .iter()
        .map(|m| artifacts::load_run(m, None).with_context(|| format!("loading {}", m.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let grid_config = match &args.config {
        Some(path) => load_config(path, &Overrides::default())?,
        None => runs[0].config().clone(),
    };
    let dataset = &runs[0].config().dataset;
    if let Some(other) = runs.iter().find(|r| &r.config().dataset != dataset) {
        return Err(Error::Incompatible(format!(
            "models evaluate different datasets ({} differs from {})",
            other.stage1_dir.display(),
            runs[0].stage1_dir.display()
        ))
        .into());
    }
    let data = dataset.open(runs[0].config().seed)?;
    let models: Vec<TrainedModel<'_>> = runs
        .iter()
        .map(|r| TrainedModel {
            channel: r.config().stage2.channel,
            cbr: r.config().cbr(),
            pipeline: Pipeline {
                source: r.stage1.source.codec(),
                channel: &r.stage2.codec,
                spec: &r.stage1.spec,
            },
        })
        .collect();
    let or = |given: &Vec<f64>, default: Vec<f64>| if given.is_empty() { default } else { given.clone() };
    let channels = if args.channel.is_empty() {
        models.iter().map(|m| m.channel).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        args.channel.clone()
    };
    let mut cbrs: Vec<f64> = models.iter().map(|m| m.cbr).collect();
    cbrs.sort_by(f64::total_cmp);
    cbrs.dedup();
    let grid = SweepGrid {
        channels,
        cbrs: or(&args.cbr, cbrs),
        snrs: or(&args.snr, grid_config.eval.snrs.clone()),
        seeds: if args.seed.is_empty() {
            grid_config.eval.seeds.clone()
        } else {
            args.seed.clone()
        },
    };
    let dir = output_dir(&args.out, grid_config.output_dir.join("sweep"))?;
    let result = eval::run_sweep(&models, &grid, data.test())?;
    let table = dir.join("sweep.csv");
    std::fs::write(&table, result.to_csv()?).context("writing sweep.csv")?;
    std::fs::write(dir.join("sweep_records.csv"), result.records_csv()?).context("writing sweep_records.csv")?;
    artifacts::write_json(
        &dir.join(artifacts::MANIFEST),
        &json!({
            "command": "sweep",
            "grid": grid,
            "seeds": grid.seeds,
            "psnr_cap_db": metrics::PSNR_CAP_DB,
            "models": runs.iter().zip(&args.models).map(|(r, m)| json!({
                "stage2_dir": m,
                "stage1_dir": r.stage1_dir,
                "channel": r.config().stage2.channel.to_string(),
                "cbr": r.config().cbr(),
                "ablation": r.stage2.ablation().to_string(),
                "config_hash": r.config().config_hash(),
                "source_hash": r.config().source_hash(),
                "interface_fingerprint": r.stage1.interface_fingerprint(),
                "training_fingerprint": r.stage1.spec.training_fingerprint(),
            })).collect::<Vec<_>>(),
        }),
    )?;
    for c in &result.cells {
        println!(
            "{:<8} cbr {:.4} snr {:>5} seed {:>3}: PSNR {:.3} dB, BER {:.5}",
            c.cell.channel, c.cell.cbr, c.cell.snr_db, c.cell.seed, c.mean_psnr, c.mean_ber
        );
    }
    for p in plot::plot_table(&table, &dir.join("plots"))? {
        println!("wrote {}", p.display());
    }
    println!("wrote {}", table.display());
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> CmdResult {
    let config = load_config(
        &args.config,
        &Overrides {
            channel: args.channel,
            ..Default::default()
        },
    )?;
    let stage1 = artifacts::load_stage1(&args.stage1_dir, &config)
        .with_context(|| format!("loading stage-1 artifacts from {}", args.stage1_dir.display()))?;
    let arms = if args.ablation.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        args.ablation.clone()
    };
    let seeds = if args.seed.is_empty() {
        config.eval.ablation_seeds.clone()
    } else {
        args.seed.clone()
    };
    let dir = output_dir(&args.out, config.output_dir.join("ablation"))?;
    let data = config.dataset.open(config.seed)?;
    let s2 = config.stage2_config();
    let table = eval::run_ablation(
        &data,
        &stage1.source,
        &stage1.spec,
        &s2,
        &arms,
        &seeds,
        &s2.probe_snrs,
    )?;
    let path = dir.join("ablation.csv");
    std::fs::write(&path, table.to_csv()?).context("writing ablation.csv")?;
    artifacts::write_json(
        &dir.join(artifacts::MANIFEST),
        &json!({
            "command": "ablate",
            "config_hash": config.config_hash(),
            "source_hash": config.source_hash(),
            "stage1_dir": args.stage1_dir,
            "stage1_fingerprint": table.stage1_fingerprint,
            "interface_fingerprint": stage1.interface_fingerprint(),
            "channel": table.channel.to_string(),
            "arms": arms.iter().map(|a| a.to_string()).collect::<Vec<_>>(),
            "seeds": seeds,
            "rows": table.rows,
        }),
    )?;
    for arm in table.arms() {
        let cols: Vec<String> = table
            .snrs()
            .iter()
            .map(|&s| format!("{s} dB {:.3}", table.mean_psnr(arm, s)))
            .collect();
        println!("{:<9} {}", arm.to_string(), cols.join("  "));
    }
    for p in plot::plot_table(&path, &dir)? {
        println!("wrote {}", p.display());
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn export_cmd(args: ExportArgs) -> CmdResult {
    let spec = ijscc::interface::load_spec(&args.stage1_dir.join(artifacts::INTERFACE_FILE))?;
    if let Some(path) = &args.interface {
        spec.save(path)?;
        eprintln!("wrote {}", path.display());
    }
    let summary = json!({
        "format_version": spec.format_version(),
        "bit_count": spec.bit_count(),
        "training_fingerprint": spec.training_fingerprint(),
        "interface_fingerprint": artifacts::interface_fingerprint(&spec),
        "mean_epsilon": spec.mean_epsilon(),
        "epsilon": spec.epsilon(),
        "importance": spec.importance_weights(),
        "importance_order": source::importance_order(spec.epsilon()),
    });
    match &args.output {
        Some(path) => artifacts::write_json(path, &summary)?,
        None => println!("{}", serde_json::to_string_pretty(&summary).context("serializing")?),
    }
    Ok(())
}

fn plot_cmd(args: PlotArgs) -> CmdResult {
    for p in plot::plot_table(&args.input, &args.output)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainStage1(a) => train_stage1(a),
        Command::TrainStage2(a) => train_stage2(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::ExportInterface(a) => export_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
