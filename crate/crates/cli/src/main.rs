use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use faith_cli::render::{self, Window};
use faith_cli::seeds_file::{parse_position, read_seeds};
use faith_cli::server;
use faith_cli::session::{Session, DEFAULT_ENV_SIZE};
use faith_cli::training::{score_table, TrainParams};
use faith_core::segmenter::preview_slice;
use faith_core::synthetic::{Phantom, PhantomSpec};
use faith_core::volume::{write_volume, Axis, Position};
use faith_core::{
    load_volume, mce, segment_to_file, train_from_seeds, FaithModel, SeedSet, SegmentOptions,
    ThresholdRule,
};

#[derive(Parser)]
#[command(name = "faith", version, about = "Adaptive per-voxel thresholding of 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print dimensions, data type and maximal value W of a volume.
    Info {
        volume: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Local minimum cross entropy thresholds around seed voxels.
    Mce {
        volume: PathBuf,
        /// Seed position `x,y,z`; repeatable.
        #[arg(long = "seed", required = true, value_parser = parse_position)]
        seeds: Vec<Position>,
        #[arg(long = "env", default_value_t = DEFAULT_ENV_SIZE)]
        env_size: usize,
    },
    /// Learn feature weights from seeds and write a model.
    Train(TrainArgs),
    /// Segment a whole volume into a uint8 {0,1} volume.
    Segment(SegmentArgs),
    /// Render one slice with the adaptive and global decisions overlaid.
    Preview {
        volume: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_axis)]
        axis: Axis,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write a synthetic test volume (bright sphere, faint sheet, noise).
    Phantom {
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write this many sheet seeds to the given file.
        #[arg(long, requires = "seeds_out")]
        seed_count: Option<usize>,
        #[arg(long = "seeds-out")]
        seeds_out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    volume: PathBuf,
    /// Seed list: JSON triples or one `x,y,z` per line.
    #[arg(long)]
    seeds: PathBuf,
    #[arg(long = "theta-g")]
    theta_g: f64,
    #[arg(long = "env", default_value_t = DEFAULT_ENV_SIZE)]
    env_size: usize,
    /// Comma-separated feature names.
    #[arg(long, default_value = "linearity,planarity")]
    features: String,
    #[arg(long = "kmax")]
    k_max: Option<usize>,
    #[arg(long = "eps-path")]
    eps_path: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long = "fold-seed")]
    fold_seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Cross-validation report; defaults to `<out>.cv.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("rule").required(true).args(["model", "threshold"]))]
struct SegmentArgs {
    volume: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Plain global threshold instead of a model.
    #[arg(long)]
    threshold: Option<f64>,
    /// Window size for the border policy of `--threshold`.
    #[arg(long = "env", default_value_t = DEFAULT_ENV_SIZE, requires = "threshold")]
    env_size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    slab: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).multiple(true).args(["volume", "session"]))]
struct ServeArgs {
    #[arg(long)]
    volume: Option<PathBuf>,
    /// Session file; resumed if it exists and rewritten on every change.
    #[arg(long)]
    session: Option<PathBuf>,
    #[arg(long = "env", default_value_t = DEFAULT_ENV_SIZE)]
    env_size: usize,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, env = "FAITH_PORT", default_value_t = 8080)]
    port: u16,
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    Axis::parse(s).ok_or_else(|| format!("unknown axis {s:?} (expected x, y or z)"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Info { volume, json } => info(&volume, json),
        Command::Mce {
            volume,
            seeds,
            env_size,
        } => local_mce(&volume, &seeds, env_size),
        Command::Train(args) => train(args),
        Command::Segment(args) => segment(args),
        Command::Preview {
            volume,
            model,
            axis,
            index,
            out,
        } => preview(&volume, &model, axis, index, &out),
        Command::Serve(args) => serve(args),
        Command::Phantom {
            size,
            out,
            seed_count,
            seeds_out,
        } => phantom(size, &out, seed_count.zip(seeds_out)),
    }
}

fn open(path: &Path) -> Result<faith_core::Volume> {
    load_volume(path).with_context(|| format!("cannot open volume {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable output")
    );
}

fn info(path: &Path, json: bool) -> Result<()> {
    let report = open(path)?.meta().report();
    if json {
        print_json(&report);
    } else {
        let [x, y, z] = report.dims;
        println!("dims: {x} x {y} x {z}");
        println!("dtype: {}", report.dtype);
        println!("voxels: {}", report.voxel_count);
        println!("W: {}", report.max_value);
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct SeedThreshold {
    position: Position,
    threshold: f64,
    degenerate: bool,
}

fn local_mce(path: &Path, seeds: &[Position], env_size: usize) -> Result<()> {
    let volume = open(path)?;
    let seeds = SeedSet::new(seeds.to_vec(), env_size);
    seeds.validate(volume.meta())?;
    let envs = seeds
        .positions
        .iter()
        .map(|&p| volume.extract_environment(p, env_size))
        .collect::<Result<Vec<_>, _>>()?;
    let thresholds = mce::local_thresholds(&envs)?;
    let rows: Vec<SeedThreshold> = seeds
        .positions
        .iter()
        .zip(thresholds)
        .map(|(&position, t)| SeedThreshold {
            position,
            threshold: t.threshold,
            degenerate: t.degenerate,
        })
        .collect();
    print_json(&rows);
    Ok(())
}

fn default_report_path(model: &Path) -> PathBuf {
    model.with_extension("cv.json")
}

fn train(args: TrainArgs) -> Result<()> {
    let volume = open(&args.volume)?;
    let positions = read_seeds(&args.seeds)?;
    let params = TrainParams {
        theta_g: args.theta_g,
        env_size: Some(args.env_size),
        features: Some(args.features.split(',').map(str::to_string).collect()),
        k_max: args.k_max,
        eps_path: args.eps_path,
        folds: args.folds,
        fold_seed: args.fold_seed,
        workers: args.workers,
    };
    let config = params.config(args.env_size).map_err(anyhow::Error::msg)?;
    let seeds = SeedSet::new(positions, args.env_size);
    let outcome = train_from_seeds(&volume, &seeds, &config)?;
    outcome
        .model
        .save(&args.out)
        .with_context(|| format!("cannot write {}", args.out.display()))?;
    let report_path = args.report.unwrap_or_else(|| default_report_path(&args.out));
    let report = serde_json::json!({
        "report": outcome.report,
        "seed_thresholds": outcome.seed_thresholds,
        "seed_features": outcome.seed_features,
    });
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .with_context(|| format!("cannot write {}", report_path.display()))?;
    print!("{}", score_table(&outcome));
    println!(
        "model: {}\nreport: {}",
        args.out.display(),
        report_path.display()
    );
    Ok(())
}

fn segment(args: SegmentArgs) -> Result<()> {
    let volume = open(&args.volume)?;
    let model = args
        .model
        .as_deref()
        .map(|p| FaithModel::load(p).with_context(|| format!("cannot load model {}", p.display())))
        .transpose()?;
    let rule = match (&model, args.threshold) {
        (Some(m), _) => ThresholdRule::Adaptive(m),
        (None, Some(theta_g)) => {
            mce::check_global_threshold(theta_g, volume.meta().max_value())?;
            ThresholdRule::Global {
                theta_g,
                env_size: args.env_size,
            }
        }
        (None, None) => bail!("either --model or --threshold is required"),
    };
    let options = SegmentOptions {
        slab_thickness: args.slab,
        workers: args.workers,
    };
    let stats = segment_to_file(&volume, rule, options, None, &args.out)?;
    print_json(&stats);
    Ok(())
}

fn preview(path: &Path, model: &Path, axis: Axis, index: usize, out: &Path) -> Result<()> {
    let volume = open(path)?;
    let model = FaithModel::load(model)
        .with_context(|| format!("cannot load model {}", model.display()))?;
    let preview = preview_slice(&volume, &model, axis, index)?;
    let (_, values) = volume.slice_values(axis, index)?;
    let gray = render::window_slice(&values, Window::full(volume.meta().max_value()));
    let rgb = render::composite_rgb(&gray, &render::overlay_pixels(&preview));
    let png = render::rgb_png(preview.width, preview.height, &rgb)?;
    std::fs::write(out, png).with_context(|| format!("cannot write {}", out.display()))?;
    print_json(&serde_json::json!({
        "width": preview.width,
        "height": preview.height,
        "adaptive_set": preview.adaptive.iter().filter(|a| **a).count(),
        "global_set": preview.global.iter().filter(|g| **g).count(),
        "adaptive_only": preview.adaptive_only(),
    }));
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut session = match (&args.session, &args.volume) {
        (Some(file), _) if file.exists() => Session::load(file)?,
        (_, Some(volume)) => Session::open(volume, args.env_size)?,
        (Some(file), None) => bail!(
            "session file {} does not exist; pass --volume to start one",
            file.display()
        ),
        (None, None) => bail!("either --volume or --session is required"),
    };
    if let Some(file) = args.session {
        session.persist_to(file)?;
    }
    eprintln!("session {}", session.id());
    let addr = SocketAddr::new(args.host, args.port);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(server::serve(session, addr))?;
    Ok(())
}

fn phantom(size: usize, out: &Path, seeds: Option<(usize, PathBuf)>) -> Result<()> {
    let phantom = Phantom::generate(PhantomSpec::uint8(size))?;
    write_volume(out, &phantom.volume)?;
    if let Some((count, path)) = seeds {
        let list = phantom.plane_seeds(count);
        std::fs::write(&path, serde_json::to_string(&list).expect("seeds serialize"))
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    print_json(&serde_json::json!({
        "dims": phantom.volume.dims(),
        "plane_z": phantom.plane_z,
        "plane_extent": phantom.plane_extent,
    }));
    Ok(())
}
