use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nimbus_core::config::{CondKind, RunConfig};
use nimbus_core::forecast::LatentDenoiser;
use nimbus_core::grid::FieldBatch;
use nimbus_core::models::LossCurve;
use nimbus_core::pipeline::{self as pl, Climatology, Layout, Manifest};
use nimbus_core::verify::svg_lines;
use nimbus_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "nimbus",
    version,
    about = "Latent diffusion ensemble forecasting on synthetic gridded fields"
)]
struct Cli {
    /// Run configuration (JSON). Defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Artifact root; each subcommand reads and writes its own subdirectory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads for members and ablation cells (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Validate the configuration and report what would run, writing nothing.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate the synthetic series.
    GenData,
    /// Train the residual autoencoder.
    TrainVae,
    /// Train the conditioning encoder selected by `diffusion.conditioner`.
    TrainMae,
    /// Train the latent denoiser.
    TrainDiffusion,
    /// Roll out ensembles from held-out initial conditions.
    Forecast,
    /// Score the forecasts against the held-out truth.
    Evaluate,
    /// Band energies of encoder versus generated latents.
    Diagnose,
    /// Conditioner x regularizer grid over seeded replicates.
    Ablate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainVae => "train-vae",
            Command::TrainMae => "train-mae",
            Command::TrainDiffusion => "train-diffusion",
            Command::Forecast => "forecast",
            Command::Evaluate => "evaluate",
            Command::Diagnose => "diagnose",
            Command::Ablate => "ablate",
        }
    }

    fn stage_dir(self) -> &'static str {
        match self {
            Command::GenData => "data",
            Command::TrainVae => "vae",
            Command::TrainMae => "mae",
            Command::TrainDiffusion => "diffusion",
            Command::Forecast => "forecast",
            Command::Evaluate => "evaluate",
            Command::Diagnose => "diagnose",
            Command::Ablate => "ablate",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NIMBUS_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nimbus {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.workers == Some(0) {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    if cli.dry_run {
        println!(
            "{}: config {} valid (hash {}), seed {}, would write {}",
            cli.command.name(),
            cli.config
                .as_deref()
                .map_or("<defaults>".into(), |p| p.display().to_string()),
            cfg.hash(),
            cli.seed,
            cli.out.join(cli.command.stage_dir()).display()
        );
        return Ok(());
    }
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    }
    let layout = Layout::new(&cli.out);
    let dir = layout.dir(cli.command.stage_dir());
    let files = match cli.command {
        Command::GenData => gen_data(&cfg, cli.seed, &layout)?,
        Command::TrainVae => train_vae(&cfg, cli.seed, &layout, &dir)?,
        Command::TrainMae => train_mae(&cfg, cli.seed, &layout, &dir)?,
        Command::TrainDiffusion => train_diffusion(&cfg, cli.seed, &layout, &dir)?,
        Command::Forecast => forecast(&cfg, cli.seed, &layout, &dir)?,
        Command::Evaluate => evaluate(&cfg, cli.seed, &layout, &dir)?,
        Command::Diagnose => diagnose(&cfg, cli.seed, &layout, &dir)?,
        Command::Ablate => ablate(&cfg, cli.seed, &dir)?,
    };
    Manifest::new(cli.command.name(), &cfg, cli.seed, files).write(&dir)?;
    log::info!("{} done: {}", cli.command.name(), dir.display());
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_curve(dir: &Path, name: &str, curve: &LossCurve) -> Result<String> {
    curve.write_csv(create(dir, name)?)?;
    Ok(name.to_string())
}

fn datasets(cfg: &RunConfig, layout: &Layout) -> Result<(FieldBatch, FieldBatch)> {
    let series = pl::load_series(&layout.series())?;
    pl::split(cfg, &series)
}

fn gen_data(cfg: &RunConfig, seed: u64, layout: &Layout) -> Result<Vec<String>> {
    let series = pl::gen_data(cfg, seed)?;
    pl::save_series(&series, &layout.series())?;
    Ok(vec!["series.pyld".into()])
}

fn train_vae(cfg: &RunConfig, seed: u64, layout: &Layout, dir: &Path) -> Result<Vec<String>> {
    let (train, _) = datasets(cfg, layout)?;
    let (vae, curve) = pl::train_vae(&cfg.vae, &train, &Climatology::of(&train)?, seed)?;
    pl::save_checkpoint(&vae.params, &layout.vae())?;
    Ok(vec![
        "vae.pypt".into(),
        write_curve(dir, "loss.csv", &curve)?,
    ])
}

fn train_mae(cfg: &RunConfig, seed: u64, layout: &Layout, dir: &Path) -> Result<Vec<String>> {
    let (train, _) = datasets(cfg, layout)?;
    let clim = Climatology::of(&train)?;
    match cfg.diffusion.conditioner {
        CondKind::None => {
            log::info!("conditioner is none; nothing to train");
            std::fs::create_dir_all(dir)?;
            Ok(Vec::new())
        }
        CondKind::Mae => {
            let (mae, curve) = pl::train_mae(&cfg.mae, &train, &clim, seed)?;
            pl::save_checkpoint(&mae.params, &layout.mae())?;
            Ok(vec![
                "mae.pypt".into(),
                write_curve(dir, "loss.csv", &curve)?,
            ])
        }
        CondKind::Frames => {
            let (enc, curve) = pl::train_frames(cfg, &train, &clim, seed)?;
            pl::save_checkpoint(&enc.params, &layout.frames())?;
            Ok(vec![
                "frames.pypt".into(),
                write_curve(dir, "loss_frames.csv", &curve)?,
            ])
        }
    }
}

fn train_diffusion(cfg: &RunConfig, seed: u64, layout: &Layout, dir: &Path) -> Result<Vec<String>> {
    let (train, _) = datasets(cfg, layout)?;
    let models = pl::load_encoders(cfg, layout, &train)?;
    let samples = pl::diffusion_samples(&train, &models)?;
    let (net, curve) = pl::train_denoiser(&cfg.diffusion, &samples, &models, seed)?;
    pl::save_checkpoint(&net.to_params(), &layout.denoiser())?;
    Ok(vec![
        "denoiser.pypt".into(),
        write_curve(dir, "loss.csv", &curve)?,
    ])
}

fn forecast(cfg: &RunConfig, seed: u64, layout: &Layout, dir: &Path) -> Result<Vec<String>> {
    let (train, held_out) = datasets(cfg, layout)?;
    let models = pl::load_models(cfg, layout, &train, seed)?;
    let starts = pl::case_starts(
        held_out.times(),
        cfg.mae.k,
        cfg.forecast.lead_times,
        cfg.verify.cases,
    )?;
    let cases = pl::forecast_cases(
        &models,
        &cfg.sampler,
        &cfg.forecast,
        &held_out,
        &starts,
        seed,
    )?;
    std::fs::create_dir_all(dir)?;
    let mut files = pl::write_cases(dir, &cases, &held_out, cfg)?;
    files.push("cases.json".into());
    Ok(files)
}

fn evaluate(cfg: &RunConfig, seed: u64, layout: &Layout, dir: &Path) -> Result<Vec<String>> {
    let (_, held_out) = datasets(cfg, layout)?;
    let cases = pl::read_cases(&layout.forecast(), &held_out, cfg.mae.k)?;
    let rep = pl::score(&cases, &held_out, cfg, seed)?;
    let mut files = vec!["metrics.csv".to_string(), "metrics.json".to_string()];
    rep.write_csv(create(dir, "metrics.csv")?)?;
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&rep)? + "\n",
    )?;
    for (name, h) in &rep.rank_histograms {
        let f = format!("rank_{name}.csv");
        h.write_csv(create(dir, &f)?)?;
        files.push(f);
    }
    let leads: Vec<f64> = (1..=cfg.forecast.lead_times)
        .map(|l| l as f64 * cfg.data.hours_per_step)
        .collect();
    let series: Vec<(String, Vec<f64>)> = held_out
        .specs()
        .iter()
        .map(|s| {
            let ys = leads
                .iter()
                .map(|&l| rep.get(&s.name, l, "rmse_mean").unwrap_or(f64::NAN))
                .collect();
            (s.name.clone(), ys)
        })
        .collect();
    let refs: Vec<(&str, &[f64])> = series
        .iter()
        .map(|(n, y)| (n.as_str(), y.as_slice()))
        .collect();
    std::fs::write(
        dir.join("rmse.svg"),
        svg_lines("ensemble-mean RMSE by lead (hours)", &leads, &refs),
    )?;
    files.push("rmse.svg".into());
    Ok(files)
}

fn diagnose(cfg: &RunConfig, seed: u64, layout: &Layout, dir: &Path) -> Result<Vec<String>> {
    let (train, held_out) = datasets(cfg, layout)?;
    let models = pl::load_models(cfg, layout, &train, seed)?;
    if matches!(models.denoiser, LatentDenoiser::Zero) {
        return Err(Error::Config(
            "diagnose needs a trained denoiser; unset forecast.persistence".into(),
        ));
    }
    let rep = pl::diagnose(&models, &cfg.sampler, &held_out, &cfg.verify, seed)?;
    rep.write_band_csv(create(dir, "bands.csv")?)?;
    rep.write_mask_csv(create(dir, "masking.csv")?)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&rep)? + "\n",
    )?;
    let mids: Vec<f64> = rep
        .band_edges
        .windows(2)
        .map(|p| 0.5 * (p[0] + p[1]))
        .collect();
    std::fs::write(
        dir.join("bands.svg"),
        svg_lines(
            "latent band energy",
            &mids,
            &[
                ("encoder", &rep.encoder_energy),
                ("generated", &rep.generated_energy),
            ],
        ),
    )?;
    std::fs::write(
        dir.join("masking.svg"),
        svg_lines(
            "decoded RMSE under latent low-pass",
            &rep.mask_radii,
            &[
                ("encoder", &rep.encoder_rmse),
                ("generated", &rep.generated_rmse),
            ],
        ),
    )?;
    Ok([
        "bands.csv",
        "masking.csv",
        "report.json",
        "bands.svg",
        "masking.svg",
    ]
    .map(String::from)
    .to_vec())
}

fn ablate(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<Vec<String>> {
    let table = pl::ablate(cfg, seed)?;
    table.write_csv(create(dir, "ablation.csv")?)?;
    table.write_grid_csv(
        create(dir, "grid.csv")?,
        &cfg.verify.conditioners,
        &cfg.verify.regularizers,
    )?;
    std::fs::write(
        dir.join("ablation.json"),
        serde_json::to_string_pretty(&table)? + "\n",
    )?;
    Ok(["ablation.csv", "grid.csv", "ablation.json"]
        .map(String::from)
        .to_vec())
}
