//! End-to-end survey campaigns: configuration, the localize/sweep/fuse loop
//! and the report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::frames::CameraModel;
use crate::kernel::KernelConfig;
use crate::lidar::{scan_sweep, LidarModel};
use crate::localization::{
    estimate_pose, predicted_quality, quality_of_fix_weighted, simulate_detections_with, FeasibilityConfig, FeatureMap,
};
use crate::planner::{
    matched_step, plan_next, predict_step_uncertainty, square_wave_trajectory, trajectory_to_csv, PlannerConfig,
    PlanningContext, TrajectoryRow, Waypoint,
};
use crate::surface::{volume, HeightGrid, VolumeEstimate};
use crate::terrain::{slope_sigma, true_volume, Domain, Terrain, TerrainSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Greedy,
    SquareWave,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Greedy => "greedy",
            Mode::SquareWave => "square_wave",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Mode::Greedy),
            "square_wave" | "square-wave" => Ok(Mode::SquareWave),
            _ => Err(Error::InvalidConfig(format!("unknown mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainConfig {
    pub source: TerrainSource,
    /// Extra terrain beyond the domain on every side (m).
    pub margin: f64,
    /// Lattice spacing of synthetic terrains (m).
    pub spacing: f64,
    /// Replace the kernel slope sigma with the one measured on the terrain.
    pub estimate_slope_sigma: bool,
    /// Quadrature refinement relative to the belief grid.
    pub truth_refinement: usize,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        TerrainConfig {
            source: TerrainSource::default(),
            margin: 12.0,
            spacing: 0.25,
            estimate_slope_sigma: true,
            truth_refinement: 16,
        }
    }
}

/// Feature map source: a file, or a rectangular wall of features on the
/// plane `x = wall_x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    pub wall_x: f64,
    pub y: [f64; 2],
    pub z: [f64; 2],
    pub columns: usize,
    pub rows: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { file: None, wall_x: 36.0, y: [0.0, 20.0], z: [1.0, 12.0], columns: 4, rows: 3 }
    }
}

impl FeatureConfig {
    pub fn build(&self) -> Result<FeatureMap> {
        match &self.file {
            Some(path) => FeatureMap::load(Path::new(path)),
            None => {
                if self.columns == 0 || self.rows == 0 {
                    return Err(Error::InvalidConfig("feature wall needs at least one row and column".into()));
                }
                Ok(FeatureMap::wall(self.wall_x, (self.y[0], self.y[1]), (self.z[0], self.z[1]), self.columns, self.rows))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    /// Prior node variance (m^2); the prior mean is the nominal height.
    pub prior_variance: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { nx: 10, ny: 10, prior_variance: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SquareWaveConfig {
    /// Lane spacing (m).
    pub pitch: f64,
}

impl Default for SquareWaveConfig {
    fn default() -> Self {
        SquareWaveConfig { pitch: 8.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationConfig {
    /// Consecutive failed fixes before the campaign aborts.
    pub max_failures: usize,
    /// Let the terrain hide features from the camera.
    pub terrain_occlusion: bool,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig { max_failures: 3, terrain_occlusion: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Steps after which the grid is written out.
    pub snapshots: Vec<usize>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { snapshots: vec![20, 50] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub seed: u64,
    pub mode: Mode,
    pub domain: Domain,
    pub terrain: TerrainConfig,
    pub features: FeatureConfig,
    pub camera: CameraModel,
    pub lidar: LidarModel,
    pub kernel: KernelConfig,
    pub grid: GridConfig,
    pub planner: PlannerConfig,
    pub square_wave: SquareWaveConfig,
    pub feasibility: FeasibilityConfig,
    pub localization: LocalizationConfig,
    pub output: OutputConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        let domain = Domain::new(0.0, 20.0, 0.0, 20.0);
        let mut feasibility = FeasibilityConfig { tau: 1.25, ..FeasibilityConfig::default() };
        feasibility.bounds.x = [domain.x_min + 2.0, domain.x_max];
        feasibility.bounds.y = [domain.y_min, domain.y_max];
        feasibility.bounds.z = [2.0, 15.0];
        CampaignConfig {
            seed: 7,
            mode: Mode::Greedy,
            domain,
            terrain: TerrainConfig::default(),
            features: FeatureConfig::default(),
            camera: CameraModel::default(),
            lidar: LidarModel::default(),
            kernel: KernelConfig::for_domain_width(domain.width()),
            grid: GridConfig::default(),
            planner: PlannerConfig { step_radius: 1.6, start: [2.0, 2.0], ..PlannerConfig::default() },
            square_wave: SquareWaveConfig::default(),
            feasibility,
            localization: LocalizationConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

// Tagged objects (`kind`) replace the default wholesale.
fn overlay(base: &mut serde_json::Value, value: serde_json::Value) {
    match (base, value) {
        (serde_json::Value::Object(b), serde_json::Value::Object(v)) if !v.contains_key("kind") => {
            for (k, val) in v {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, val),
                    None => {
                        b.insert(k, val);
                    }
                }
            }
        }
        (slot, val) => *slot = val,
    }
}

impl CampaignConfig {
    /// Keys left out of a section keep the scenario defaults above, not the
    /// section type's own defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let value = serde_json::to_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Self::from_value(value)
    }

    /// Accepts a TOML config or a JSON manifest (its `config` entry).
    pub fn from_text(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            let mut value: serde_json::Value =
                serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let cfg = value.get_mut("config").map(serde_json::Value::take).unwrap_or(value);
            return Self::from_value(cfg);
        }
        Self::from_toml(text)
    }

    fn from_value(value: serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::default()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        overlay(&mut base, value);
        serde_json::from_value(base).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.camera.validate()?;
        self.lidar.validate()?;
        self.kernel.validate()?;
        self.planner.validate()?;
        self.feasibility.validate()?;
        if self.grid.nx == 0 || self.grid.ny == 0 {
            return Err(Error::InvalidConfig("belief grid needs at least one node per axis".into()));
        }
        if !(self.grid.prior_variance > 0.0 && self.grid.prior_variance.is_finite()) {
            return Err(Error::InvalidConfig("prior variance must be finite and > 0".into()));
        }
        if !(self.square_wave.pitch > 0.0) {
            return Err(Error::InvalidConfig("square wave pitch must be > 0".into()));
        }
        if !(self.terrain.spacing > 0.0 && self.terrain.margin >= 0.0) || self.terrain.truth_refinement == 0 {
            return Err(Error::InvalidConfig("terrain spacing, margin or refinement out of range".into()));
        }
        if self.localization.max_failures == 0 {
            return Err(Error::InvalidConfig("max_failures must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything derived from a config before flying: terrain, features,
/// slope statistic, ground truth and the effective kernel.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: CampaignConfig,
    pub terrain: Terrain,
    pub map: FeatureMap,
    pub kernel: KernelConfig,
    pub true_volume: f64,
}

impl Scenario {
    pub fn build(config: &CampaignConfig) -> Result<Self> {
        config.validate()?;
        let d = &config.domain;
        let terrain = config.terrain.source.build(d, config.terrain.margin, config.terrain.spacing)?;
        if !terrain.covers(d) {
            return Err(Error::InvalidConfig("terrain does not cover the domain".into()));
        }
        let map = config.features.build()?;
        let mut kernel = config.kernel;
        if config.terrain.estimate_slope_sigma {
            kernel.slope_sigma = slope_sigma(&terrain);
        }
        let r = config.terrain.truth_refinement;
        let truth = true_volume(&terrain, d, config.grid.nx * r, config.grid.ny * r)?;
        Ok(Scenario { config: config.clone(), terrain, map, kernel, true_volume: truth })
    }

    pub fn prior_grid(&self) -> Result<HeightGrid> {
        let c = &self.config;
        HeightGrid::new(c.domain, c.grid.nx, c.grid.ny, c.planner.nominal_height, c.grid.prior_variance)
    }

    pub fn context(&self) -> PlanningContext<'_> {
        PlanningContext {
            kernel: &self.kernel,
            lidar: &self.config.lidar,
            map: &self.map,
            camera: &self.config.camera,
            feasibility: &self.config.feasibility,
            nominal_height: self.config.planner.nominal_height,
        }
    }

    /// The benchmark path with as many samples as the planning horizon.
    pub fn square_wave(&self) -> Result<Vec<Waypoint>> {
        let c = &self.config;
        let step = matched_step(&c.domain, c.square_wave.pitch, c.planner.horizon);
        let mut path =
            square_wave_trajectory(&c.domain, c.square_wave.pitch, c.planner.z, c.planner.yaw, step, &c.feasibility.bounds)?;
        path.truncate(c.planner.horizon);
        Ok(path)
    }

    pub fn greedy_start(&self) -> Waypoint {
        let p = &self.config.planner;
        Waypoint::new(p.start[0], p.start[1], p.z, p.yaw)
    }
}

/// State after one waypoint (step 0 is the prior).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub waypoint: Option<Waypoint>,
    pub predicted_sigma: Option<f64>,
    pub volume: VolumeEstimate,
    /// Quality of fix of the realized pose estimate.
    pub q_pos: Option<f64>,
    pub measurements: usize,
}

#[derive(Debug, Clone)]
pub struct CampaignReport {
    pub mode: Mode,
    pub seed: u64,
    pub true_volume: f64,
    pub slope_sigma: f64,
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<(usize, HeightGrid)>,
    pub grid: HeightGrid,
}

impl CampaignReport {
    pub fn final_volume(&self) -> VolumeEstimate {
        self.records.last().expect("prior record always present").volume
    }

    pub fn relative_error(&self) -> f64 {
        (self.final_volume().mean - self.true_volume).abs() / self.true_volume
    }

    pub fn trajectory(&self) -> Vec<TrajectoryRow> {
        self.records
            .iter()
            .filter_map(|r| {
                r.waypoint.map(|w| TrajectoryRow {
                    waypoint: w,
                    predicted_sigma: r.predicted_sigma,
                    realized_sigma: r.volume.sigma,
                    realized_mean: r.volume.mean,
                })
            })
            .collect()
    }

    pub fn timeseries_csv(&self) -> String {
        let mut out = String::from("step,mu_v,sigma_v,q_pos\n");
        for r in &self.records {
            let q = r.q_pos.map(|q| q.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{q}", r.step, r.volume.mean, r.volume.sigma);
        }
        out
    }
}

/// Random stream for one step; independent of how many draws earlier steps made.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Flies the campaign. Each waypoint: detect features, estimate the pose,
/// sweep the true terrain from the true pose, register with the estimate,
/// fuse and evaluate the volume.
pub fn run_campaign(scenario: &Scenario, mode: Mode) -> Result<CampaignReport> {
    let cfg = &scenario.config;
    let kernel = &scenario.kernel;
    let ctx = scenario.context();
    let mut grid = scenario.prior_grid()?;
    let mut records = vec![StepRecord {
        step: 0,
        waypoint: None,
        predicted_sigma: None,
        volume: volume(&grid, kernel)?,
        q_pos: None,
        measurements: 0,
    }];
    let mut snapshots = Vec::new();
    let fixed_path = match mode {
        Mode::SquareWave => Some(scenario.square_wave()?),
        Mode::Greedy => None,
    };
    let occluder = cfg.localization.terrain_occlusion.then_some(&scenario.terrain);
    let mut failures = 0;
    let mut current: Option<Waypoint> = None;

    for k in 0..cfg.planner.horizon {
        let (target, predicted) = match (&fixed_path, current) {
            (Some(path), _) => {
                let Some(w) = path.get(k) else { break };
                (*w, predict_step_uncertainty(&grid, &ctx, w).ok())
            }
            (None, None) => {
                let w = scenario.greedy_start();
                (w, predict_step_uncertainty(&grid, &ctx, &w).ok())
            }
            (None, Some(c)) => {
                let plan = plan_next(&grid, &c, &cfg.planner, &ctx)?;
                (plan.waypoint, Some(plan.predicted_sigma))
            }
        };
        current = Some(target);

        let truth = target.pose();
        let mut rng = step_rng(cfg.seed, k);
        let detections = simulate_detections_with(&truth, &scenario.map, &cfg.camera, occluder, &mut rng);
        let sweep_seed = rng.next_u64();
        let fix = estimate_pose(&detections, &scenario.map, &cfg.camera, &truth, cfg.feasibility.n_min);
        let (q_pos, measurements) = match fix {
            Ok(est) => {
                failures = 0;
                let q = if cfg.camera.pixel_sigma == 0.0 {
                    predicted_quality(&truth, &scenario.map, &cfg.camera, &cfg.feasibility).ok()
                } else {
                    quality_of_fix_weighted(&est.covariance, &cfg.feasibility.trace_weights).ok()
                };
                let sweep = scan_sweep(
                    &truth,
                    &est.pose,
                    &est.covariance,
                    &cfg.lidar,
                    &scenario.terrain,
                    kernel.slope_sigma,
                    sweep_seed,
                );
                grid.update_all(kernel, &sweep);
                (q, sweep.len())
            }
            Err(e) => {
                failures += 1;
                if failures >= cfg.localization.max_failures {
                    return Err(Error::LocalizationLost { count: failures, last: e.to_string() });
                }
                (None, 0)
            }
        };
        let vol = volume(&grid, kernel)?;
        records.push(StepRecord { step: k + 1, waypoint: Some(target), predicted_sigma: predicted, volume: vol, q_pos, measurements });
        if cfg.output.snapshots.contains(&(k + 1)) {
            snapshots.push((k + 1, grid.clone()));
        }
        let t = cfg.planner.target_relative_sigma;
        if t > 0.0 && vol.relative_sigma() < t {
            break;
        }
    }

    Ok(CampaignReport {
        mode,
        seed: cfg.seed,
        true_volume: scenario.true_volume,
        slope_sigma: kernel.slope_sigma,
        records,
        snapshots,
        grid,
    })
}

pub const MANIFEST: &str = "manifest.json";
pub const TIMESERIES: &str = "timeseries.csv";
pub const TRAJECTORY: &str = "trajectory.csv";
pub const FEATURES: &str = "features.csv";
pub const FINAL_GRID: &str = "grid_final.txt";

pub fn snapshot_name(step: usize) -> String {
    format!("grid_step_{step:03}.txt")
}

/// Manifest contents: the full effective config plus derived values and
/// results.
pub fn manifest(config: &CampaignConfig, report: &CampaignReport, files: &[String]) -> serde_json::Value {
    let v = report.final_volume();
    json!({
        "config": config,
        "derived": {
            "slope_sigma": report.slope_sigma,
            "true_volume": report.true_volume,
            "cell_area": report.grid.cell_area(),
        },
        "results": {
            "mode": report.mode,
            "seed": report.seed,
            "steps": report.records.len() - 1,
            "mu_v": v.mean,
            "sigma_v": v.sigma,
            "relative_sigma": v.relative_sigma(),
            "relative_error": report.relative_error(),
        },
        "files": files,
    })
}

/// Writes the manifest, time series, trajectory, feature map and grid
/// snapshots into `dir`. Returns the written paths.
pub fn write_report(dir: &Path, config: &CampaignConfig, scenario: &Scenario, report: &CampaignReport) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files: Vec<(String, String)> = vec![
        (TIMESERIES.into(), report.timeseries_csv()),
        (TRAJECTORY.into(), trajectory_to_csv(&report.trajectory())),
        (FEATURES.into(), scenario.map.to_text()),
        (FINAL_GRID.into(), report.grid.to_snapshot()),
    ];
    for (step, g) in &report.snapshots {
        files.push((snapshot_name(*step), g.to_snapshot()));
    }
    let names: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
    let text = serde_json::to_string_pretty(&manifest(config, report, &names))
        .map_err(|e| Error::Numerical(format!("manifest serialization: {e}")))?;
    files.push((MANIFEST.into(), text + "\n"));
    let mut out = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        out.push(path);
    }
    Ok(out)
}
