use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pilevol::campaign::{run_campaign, write_report, CampaignConfig, Mode, Scenario, MANIFEST, TIMESERIES, TRAJECTORY};
use pilevol::lidar::{measurements_to_csv, scan_sweep};
use pilevol::localization::{predicted_covariance, predicted_quality, quality_map, LatticeSpec};
use pilevol::planner::{parse_trajectory, Waypoint};
use pilevol::terrain::write_ascii_grid;

#[derive(Parser)]
#[command(name = "pilevol", version, about = "Stockpile volume survey simulator")]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML config or JSON manifest; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fly a campaign and write the report files.
    Run {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Output directory.
        #[arg(long, env = "PILEVOL_OUT", default_value = "pilevol-out")]
        out: PathBuf,
    },
    /// Quality-of-fix field over the domain at fixed altitude and yaw (CSV).
    Qmap {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        z: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        yaw: Option<f64>,
        #[arg(long, default_value_t = 41)]
        nx: usize,
        #[arg(long, default_value_t = 41)]
        ny: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measurement log of one sweep at a pose (CSV).
    Sweep {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, allow_hyphen_values = true)]
        x: f64,
        #[arg(long, allow_hyphen_values = true)]
        y: f64,
        #[arg(long)]
        z: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        yaw: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// True volume of the configured terrain over the domain.
    Truth {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Write the configured terrain as an ASCII grid.
    GenTerrain {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and, optionally, emitted trajectories against the
    /// feasibility and step constraints.
    Validate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Run directory; supplies the manifest, trajectory and time series.
        #[arg(long)]
        run: Vec<PathBuf>,
        /// Extra trajectory files.
        #[arg(long)]
        trajectory: Vec<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Domain(String),
}

impl From<pilevol::Error> for Failure {
    fn from(e: pilevol::Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

type Outcome<T> = Result<T, Failure>;

fn load_config(path: Option<&Path>) -> Outcome<CampaignConfig> {
    match path {
        None => Ok(CampaignConfig::default()),
        Some(p) if !p.is_file() => Err(Failure::Usage(format!("config file not found: {}", p.display()))),
        Some(p) => Ok(CampaignConfig::load(p)?),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Outcome<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Domain(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(
    cfg: &ConfigArg,
    mode: Option<Mode>,
    seed: Option<u64>,
    horizon: Option<usize>,
    out: &Path,
) -> Outcome<()> {
    let mut config = load_config(cfg.config.as_deref())?;
    if let Some(m) = mode {
        config.mode = m;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(h) = horizon {
        config.planner.horizon = h;
    }
    let scenario = Scenario::build(&config)?;
    let report = run_campaign(&scenario, config.mode)?;
    write_report(out, &config, &scenario, &report)?;
    let v = report.final_volume();
    eprintln!(
        "{}: {} steps, mu_V {:.3} m^3, sigma_V {:.3} m^3 ({:.2}%), true {:.3} m^3, error {:.2}%",
        config.mode.name(),
        report.records.len() - 1,
        v.mean,
        v.sigma,
        100.0 * v.relative_sigma(),
        report.true_volume,
        100.0 * report.relative_error(),
    );
    Ok(())
}

fn qmap(cfg: &ConfigArg, z: Option<f64>, yaw: Option<f64>, nx: usize, ny: usize, out: Option<&Path>) -> Outcome<()> {
    let config = load_config(cfg.config.as_deref())?;
    config.validate()?;
    if nx == 0 || ny == 0 {
        return Err(Failure::Usage("--nx and --ny must be >= 1".into()));
    }
    let map = config.features.build()?;
    let d = &config.domain;
    let lattice = LatticeSpec { x: [d.x_min, d.x_max], y: [d.y_min, d.y_max], nx, ny };
    let field = quality_map(
        &map,
        &config.camera,
        &config.feasibility,
        z.unwrap_or(config.planner.z),
        yaw.unwrap_or(config.planner.yaw),
        &lattice,
    );
    emit(&field.to_csv(), out)
}

fn sweep(cfg: &ConfigArg, x: f64, y: f64, z: Option<f64>, yaw: Option<f64>, seed: u64, out: Option<&Path>) -> Outcome<()> {
    let config = load_config(cfg.config.as_deref())?;
    let scenario = Scenario::build(&config)?;
    let w = Waypoint::new(x, y, z.unwrap_or(config.planner.z), yaw.unwrap_or(config.planner.yaw));
    let pose = w.pose();
    let cov = predicted_covariance(&pose, &scenario.map, &config.camera, config.feasibility.n_min)?;
    let ms = scan_sweep(&pose, &pose, &cov, &config.lidar, &scenario.terrain, scenario.kernel.slope_sigma, seed);
    emit(&measurements_to_csv(&ms), out)
}

fn truth(cfg: &ConfigArg) -> Outcome<()> {
    let config = load_config(cfg.config.as_deref())?;
    let scenario = Scenario::build(&config)?;
    println!("{}", scenario.true_volume);
    Ok(())
}

fn gen_terrain(cfg: &ConfigArg, out: Option<&Path>) -> Outcome<()> {
    let config = load_config(cfg.config.as_deref())?;
    config.validate()?;
    let terrain = config.terrain.source.build(&config.domain, config.terrain.margin, config.terrain.spacing)?;
    emit(&write_ascii_grid(&terrain)?, out)
}

fn read(path: &Path) -> Outcome<String> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("file not found: {}", path.display())));
    }
    std::fs::read_to_string(path).map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))
}

/// Checks one trajectory; returns the violation lines.
fn check_trajectory(config: &CampaignConfig, map: &pilevol::localization::FeatureMap, path: &[Waypoint]) -> Vec<String> {
    let mut bad = Vec::new();
    let tau = config.feasibility.tau;
    for (k, w) in path.iter().enumerate() {
        let pose = w.pose();
        if !config.feasibility.bounds.contains(&pose) {
            bad.push(format!("waypoint {k}: outside the configuration bounds"));
        }
        match predicted_quality(&pose, map, &config.camera, &config.feasibility) {
            Ok(q) if q > tau => {}
            Ok(q) => bad.push(format!("waypoint {k}: q_pos {q} <= tau {tau}")),
            Err(e) => bad.push(format!("waypoint {k}: no fix ({e})")),
        }
    }
    let r = config.planner.step_radius;
    for (k, pair) in path.windows(2).enumerate() {
        let d = pair[0].distance(&pair[1]);
        if d > r {
            bad.push(format!("step {k}->{}: length {d} > R {r}", k + 1));
        }
    }
    bad
}

/// Sigma_V column must not increase.
fn check_timeseries(text: &str) -> Vec<String> {
    let sigmas: Vec<f64> = text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(2).and_then(|s| s.parse().ok()))
        .collect();
    sigmas
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0])
        .map(|(k, w)| format!("sigma_V increased at step {}: {} -> {}", k + 1, w[0], w[1]))
        .collect()
}

fn validate(cfg: &ConfigArg, runs: &[PathBuf], trajectories: &[PathBuf]) -> Outcome<bool> {
    let base = match (&cfg.config, runs.first()) {
        (Some(p), _) => load_config(Some(p))?,
        (None, Some(dir)) => CampaignConfig::from_text(&read(&dir.join(MANIFEST))?)?,
        (None, None) => CampaignConfig::default(),
    };
    base.validate()?;
    let mut report = String::new();
    let mut ok = true;
    let _ = writeln!(report, "config: ok");
    let mut check = |label: String, config: &CampaignConfig, traj: &str, series: Option<&str>| -> Outcome<()> {
        let map = config.features.build()?;
        let path = parse_trajectory(traj)?;
        let mut bad = check_trajectory(config, &map, &path);
        if let Some(s) = series {
            bad.extend(check_timeseries(s));
        }
        if bad.is_empty() {
            let _ = writeln!(report, "{label}: ok ({} waypoints)", path.len());
        } else {
            ok = false;
            let _ = writeln!(report, "{label}: {} violations", bad.len());
            for b in bad {
                let _ = writeln!(report, "  {b}");
            }
        }
        Ok(())
    };
    for dir in runs {
        let config = match &cfg.config {
            Some(_) => base.clone(),
            None => CampaignConfig::from_text(&read(&dir.join(MANIFEST))?)?,
        };
        let series = read(&dir.join(TIMESERIES))?;
        check(dir.display().to_string(), &config, &read(&dir.join(TRAJECTORY))?, Some(&series))?;
    }
    for t in trajectories {
        check(t.display().to_string(), &base, &read(t)?, None)?;
    }
    print!("{report}");
    Ok(ok)
}

fn dispatch(cli: Cli) -> Outcome<bool> {
    match &cli.command {
        Command::Run { cfg, mode, seed, horizon, out } => run(cfg, *mode, *seed, *horizon, out).map(|_| true),
        Command::Qmap { cfg, z, yaw, nx, ny, out } => qmap(cfg, *z, *yaw, *nx, *ny, out.as_deref()).map(|_| true),
        Command::Sweep { cfg, x, y, z, yaw, seed, out } => sweep(cfg, *x, *y, *z, *yaw, *seed, out.as_deref()).map(|_| true),
        Command::Truth { cfg } => truth(cfg).map(|_| true),
        Command::GenTerrain { cfg, out } => gen_terrain(cfg, out.as_deref()).map(|_| true),
        Command::Validate { cfg, run, trajectory } => validate(cfg, run, trajectory),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
