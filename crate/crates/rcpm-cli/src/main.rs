//! Command-line surface: training runs, sampling, density-grid export,
//! transport-geodesic traces, gradient checks, and verification oracles.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure
//! (non-finite loss aborts, failed gradient checks, failed verification).

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rcpm::grid::{point_to_chart, quadrature, ChartBins};
use rcpm::manifold::ManifoldPoint;
use rcpm::potential::{DiscretePotential, PotentialComponent};
use rcpm::training::{train, LossKind, TrainConfig, TrainedModel};
use rcpm::{Density, Direction, Flow, LossSpec, PushedDensity};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "rcpm", version, about = "Convex potential flows on spheres and tori")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow from a JSON config; writes model.json, trace.csv,
    /// eval.json, and manifest.json into the output directory.
    Train(TrainArgs),
    /// Export a density grid as CSV (chart coordinates plus density).
    Density(DensityArgs),
    /// Export transport geodesics of a single-block model as CSV.
    Geodesics(GeodesicsArgs),
    /// Draw forward samples from a trained model as CSV.
    Sample(SampleArgs),
    /// Check analytic parameter gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run a verification oracle and emit its JSON report.
    #[command(subcommand)]
    Verify(VerifyCommand),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the training configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config loss ("kl" or "nll").
    #[arg(long)]
    loss: Option<String>,
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long)]
    model: PathBuf,
    /// Grid resolution (colatitude count on the sphere; per-angle count on
    /// tori and circles).
    #[arg(long, default_value_t = 200)]
    grid: usize,
    #[arg(long)]
    out: PathBuf,
    /// Threshold cells at the uniform density instead of exporting raw
    /// values (checkerboard-style visualization).
    #[arg(long, default_value_t = false)]
    binarize: bool,
}

#[derive(Args)]
struct GeodesicsArgs {
    #[arg(long)]
    model: PathBuf,
    /// Number of uniformly sampled starting points.
    #[arg(long, default_value_t = 64)]
    grid_starts: usize,
    /// Segments per geodesic.
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(short, long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Training configuration describing the flow to check (the flow is
    /// freshly initialized from the config seed).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Batch size of the fixed check batch.
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Involution defect `max |phi^cc - phi|` of a random hard discrete
    /// potential on the circle.
    Involution {
        #[arg(long, default_value_t = 512)]
        res: usize,
        #[arg(long, default_value_t = 6)]
        components: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Epsilon-net approximation table against a random hard target on
    /// the circle.
    EpsilonNet {
        #[arg(long, value_delimiter = ',', default_values_t = vec![16usize, 64, 256, 1024])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 4096)]
        res: usize,
        #[arg(long, default_value_t = 6)]
        components: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Total variation between a trained forward model's pushforward
    /// histogram and its configured target.
    Pushforward {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        bins_theta: usize,
        #[arg(long, default_value_t = 64)]
        bins_phi: usize,
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diffeomorphism audit: Jacobian determinant signs over uniform
    /// points.
    LogdetAudit {
        #[arg(long)]
        model: PathBuf,
        #[arg(short, long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<String>,
    seed: u64,
    out: String,
    version: String,
    wallclock_secs: f64,
}

fn main() {
    if let Ok(threads) = std::env::var("RCPM_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Density(args) => cmd_density(args),
        Command::Geodesics(args) => cmd_geodesics(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Verify(v) => cmd_verify(v),
    }
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse config {}", path.display()))
}

fn read_model(path: &Path) -> Result<TrainedModel> {
    TrainedModel::load(path).with_context(|| format!("cannot load model {}", path.display()))
}

/// Writes through a temp file in the same directory, then renames.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json_report<T: Serialize>(report: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    println!("{text}");
    if let Some(path) = out {
        write_atomic(path, &text)?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let start = Instant::now();
    let mut config = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(loss) = &args.loss {
        config.loss = match loss.as_str() {
            "kl" => LossKind::ReverseKl,
            "nll" => LossKind::Nll,
            other => bail!("unknown loss {other:?}; expected \"kl\" or \"nll\""),
        };
    }
    for w in config.validate().map_err(anyhow::Error::from)? {
        eprintln!("warning: {w}");
    }

    let out = match train(&config) {
        Ok(out) => out,
        Err(e @ rcpm::Error::NonFiniteLoss { .. }) => {
            eprintln!("numerical abort: {e}");
            return Ok(2);
        }
        Err(e) => return Err(e.into()),
    };

    std::fs::create_dir_all(&args.out)?;
    write_atomic(&args.out.join("model.json"), &out.model.to_json()?)?;

    let mut trace = String::from("step,loss,wallclock\n");
    for row in &out.trace {
        trace.push_str(&format!("{},{},{}\n", row.step, row.loss, row.wallclock));
    }
    write_atomic(&args.out.join("trace.csv"), &trace)?;
    write_atomic(&args.out.join("eval.json"), &serde_json::to_string_pretty(&out.report)?)?;

    let manifest = RunManifest {
        command: "train".into(),
        config_path: Some(args.config.display().to_string()),
        seed: config.seed,
        out: args.out.display().to_string(),
        version: env!("CARGO_PKG_VERSION").into(),
        wallclock_secs: start.elapsed().as_secs_f64(),
    };
    write_atomic(&args.out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;

    println!(
        "kl_nats = {:.6} (stderr {:.6}), ess = {:.2}%, cut-locus rejections = {}",
        out.report.kl_nats,
        out.report.kl_stderr,
        out.report.ess_percent,
        out.report.rejected_cutlocus
    );
    Ok(0)
}

fn cmd_density(args: DensityArgs) -> Result<i32> {
    let model = read_model(&args.model)?;
    let manifold = model.flow.validate().map_err(anyhow::Error::from)?;
    let base = Density::new(&manifold, model.meta.config.base.clone())?;
    let grid = quadrature(&manifold, args.grid)?;
    let uniform = 1.0 / manifold.volume();

    let chart_dim = grid.chart[0].len();
    let mut header: Vec<String> = (0..chart_dim).map(|k| format!("chart{k}")).collect();
    header.push("density".into());
    let mut csv = header.join(",") + "\n";

    let mut integral = 0.0;
    match model.direction {
        Direction::Backward => {
            let pd = PushedDensity::new(base, model.flow.clone(), Direction::Backward)?;
            for (node, (chart, w)) in
                grid.points.iter().zip(grid.chart.iter().zip(&grid.weights))
            {
                let mut density = pd.log_density(node)?.exp();
                integral += w * density;
                if args.binarize {
                    density = if density > uniform { 1.0 } else { 0.0 };
                }
                push_row(&mut csv, chart, density);
            }
        }
        Direction::Forward => {
            // a forward map has no pointwise inverse; export the density
            // at the pushed grid points via the change of variables
            // nu(s(x)) = mu(x) / |det J(x)|, which integrates to 1 against
            // the pushforward of the quadrature measure
            for (node, w) in grid.points.iter().zip(&grid.weights) {
                let (pushed, logdet) = model.flow.push_logdet(&manifold, node)?;
                let mut density = (base.log_density(node) - logdet).exp();
                integral += w * density * logdet.exp();
                if args.binarize {
                    density = if density > uniform { 1.0 } else { 0.0 };
                }
                let chart = point_to_chart(&manifold, &pushed)?;
                push_row(&mut csv, &chart, density);
            }
        }
    }
    csv.push_str(&format!("# quadrature_integral,{integral}\n"));
    write_atomic(&args.out, &csv)?;
    write_manifest_for(&args.out, "density", None, 0)?;
    println!("integral = {integral:.6}");
    Ok(0)
}

fn push_row(csv: &mut String, chart: &[f64], density: f64) {
    for c in chart {
        csv.push_str(&format!("{c},"));
    }
    csv.push_str(&format!("{density}\n"));
}

fn cmd_geodesics(args: GeodesicsArgs) -> Result<i32> {
    let model = read_model(&args.model)?;
    if model.flow.blocks.len() != 1 {
        eprintln!(
            "error: transport geodesics are exact only for single-block maps; \
             this model has {} blocks",
            model.flow.blocks.len()
        );
        return Ok(1);
    }
    let manifold = model.flow.validate().map_err(anyhow::Error::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let starts: Vec<ManifoldPoint> = manifold.sample_uniform(&mut rng, args.grid_starts);

    let chart_dim = point_to_chart(&manifold, &starts[0])?.len();
    let mut header: Vec<String> = vec!["start".into(), "l".into()];
    header.extend((0..chart_dim).map(|k| format!("chart{k}")));
    header.extend((0..manifold.ambient_dim()).map(|k| format!("x{k}")));
    let mut csv = header.join(",") + "\n";

    for (si, start) in starts.iter().enumerate() {
        let path =
            rcpm::transport_geodesic(&manifold, &model.flow.blocks[0], start, args.steps)?;
        for (k, p) in path.iter().enumerate() {
            let l = k as f64 / args.steps as f64;
            csv.push_str(&format!("{si},{l}"));
            for c in point_to_chart(&manifold, p)? {
                csv.push_str(&format!(",{c}"));
            }
            for c in p.coords() {
                csv.push_str(&format!(",{c}"));
            }
            csv.push('\n');
        }
    }
    write_atomic(&args.out, &csv)?;
    write_manifest_for(&args.out, "geodesics", None, args.seed)?;
    Ok(0)
}

fn cmd_sample(args: SampleArgs) -> Result<i32> {
    let model = read_model(&args.model)?;
    let manifold = model.flow.validate().map_err(anyhow::Error::from)?;
    if model.direction != Direction::Forward {
        eprintln!("error: sampling needs a forward-direction (kl-trained) model");
        return Ok(1);
    }
    let base = Density::new(&manifold, model.meta.config.base.clone())?;
    let pd = PushedDensity::new(base, model.flow.clone(), Direction::Forward)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let batch = pd.sample(&mut rng, args.n)?;

    let mut header: Vec<String> =
        (0..manifold.ambient_dim()).map(|k| format!("x{k}")).collect();
    header.push("log_density".into());
    let mut csv = header.join(",") + "\n";
    for (p, ld) in &batch.points {
        for c in p.coords() {
            csv.push_str(&format!("{c},"));
        }
        csv.push_str(&format!("{ld}\n"));
    }
    write_atomic(&args.out, &csv)?;
    write_manifest_for(&args.out, "sample", None, args.seed)?;
    if batch.rejected_cutlocus > 0 {
        eprintln!("rejected {} cut-locus samples", batch.rejected_cutlocus);
    }
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let config = read_config(&args.config)?;
    let manifold = config.manifold.build().map_err(anyhow::Error::from)?;
    let base = Density::new(&manifold, config.base.clone())?;
    let target = Density::new(&manifold, config.target.clone())?;

    // fresh flow and batch from the config seed
    let mut zero_steps = config.clone();
    zero_steps.steps = 0;
    zero_steps.eval_samples = 1;
    let flow: Flow = train(&zero_steps)?.model.flow;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    // finite differences need cut-locus clearance along the flow
    let batch: Vec<ManifoldPoint> = match config.loss {
        LossKind::ReverseKl => {
            rcpm::fd_safe_batch(&flow, &manifold, || base.sample_one(&mut rng), args.batch, 0.05)?
        }
        LossKind::Nll => {
            rcpm::fd_safe_batch(&flow, &manifold, || target.sample_one(&mut rng), args.batch, 0.05)?
        }
    };
    let spec = match config.loss {
        LossKind::ReverseKl => LossSpec::ReverseKl { base: &base, target: &target },
        LossKind::Nll => LossSpec::Nll { base: &base },
    };
    let report = rcpm::grad_check(&flow, &manifold, spec, &batch, args.tol)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.pass { 0 } else { 2 })
}

fn cmd_verify(v: VerifyCommand) -> Result<i32> {
    match v {
        VerifyCommand::Involution { res, components, seed, out } => {
            let m = rcpm::ManifoldDescriptor::circle().build().map_err(anyhow::Error::from)?;
            let potential = random_hard_potential(&m, components, seed);
            let defect = rcpm::verify::involution_check(&potential, &m, res)?;
            let bound = 2.0 * m.diameter() * (2.0 * std::f64::consts::PI / res as f64);
            #[derive(Serialize)]
            struct Report {
                res: usize,
                defect: f64,
                bound: f64,
                pass: bool,
            }
            let report = Report { res, defect, bound, pass: defect <= bound };
            write_json_report(&report, out.as_deref())?;
            Ok(if report.pass { 0 } else { 2 })
        }
        VerifyCommand::EpsilonNet { sizes, res, components, seed, out } => {
            let m = rcpm::ManifoldDescriptor::circle().build().map_err(anyhow::Error::from)?;
            let target = random_hard_potential(&m, components, seed);
            let rows = rcpm::verify::epsilon_net_approximation(&target, &m, &sizes, res)?;
            let monotone = rows.windows(2).all(|w| w[1].sup_error <= w[0].sup_error + 1e-15);
            let bounded = rows.iter().all(|r| r.sup_error <= r.bound && r.min_error >= -1e-12);
            #[derive(Serialize)]
            struct Report {
                rows: Vec<rcpm::verify::EpsilonNetRow>,
                monotone: bool,
                bounded: bool,
                pass: bool,
            }
            let report = Report { pass: monotone && bounded, rows, monotone, bounded };
            write_json_report(&report, out.as_deref())?;
            Ok(if report.pass { 0 } else { 2 })
        }
        VerifyCommand::Pushforward {
            model,
            samples,
            bins_theta,
            bins_phi,
            threshold,
            seed,
            out,
        } => {
            let model = read_model(&model)?;
            let manifold = model.flow.validate().map_err(anyhow::Error::from)?;
            let base = Density::new(&manifold, model.meta.config.base.clone())?;
            let target = Density::new(&manifold, model.meta.config.target.clone())?;
            let bins = ChartBins::from_log_density(&manifold, &[bins_theta, bins_phi], 8, |p| {
                target.log_density(p)
            })?;
            let inner = rcpm::verify::pushforward_check(&model.flow, &base, &bins, samples, seed)?;
            #[derive(Serialize)]
            struct Report {
                #[serde(flatten)]
                inner: rcpm::verify::PushforwardReport,
                threshold: f64,
                pass: bool,
            }
            let pass = inner.tv <= threshold;
            let report = Report { inner, threshold, pass };
            write_json_report(&report, out.as_deref())?;
            Ok(if report.pass { 0 } else { 2 })
        }
        VerifyCommand::LogdetAudit { model, n, seed, out } => {
            let model = read_model(&model)?;
            let report = rcpm::verify::logdet_positivity_audit(&model.flow, n, seed)?;
            let pass = report.all_positive;
            write_json_report(&report, out.as_deref())?;
            Ok(if pass { 0 } else { 2 })
        }
    }
}

fn random_hard_potential(m: &rcpm::Manifold, components: usize, seed: u64) -> DiscretePotential {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DiscretePotential {
        components: m
            .sample_uniform::<f64, _>(&mut rng, components)
            .into_iter()
            .map(|p| PotentialComponent { y: p.into_coords(), alpha: rng.random_range(-0.4..0.4) })
            .collect(),
        gamma: 0.0,
    }
}

fn write_manifest_for(out: &Path, command: &str, config: Option<&Path>, seed: u64) -> Result<()> {
    let manifest = RunManifest {
        command: command.into(),
        config_path: config.map(|p| p.display().to_string()),
        seed,
        out: out.display().to_string(),
        version: env!("CARGO_PKG_VERSION").into(),
        wallclock_secs: 0.0,
    };
    let name = format!(
        "{}.manifest.json",
        out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    );
    let manifest_path = out.with_file_name(name);
    write_atomic(&manifest_path, &serde_json::to_string_pretty(&manifest)?)
}
