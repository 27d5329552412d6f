//! Greedy one-step waypoint selection and the square-wave benchmark path.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{wrap_pi, CameraModel, Pose};
use crate::kernel::KernelConfig;
use crate::lidar::{beam_in_world, measure, LidarModel};
use crate::localization::{in_cfree, predicted_covariance, ConfigBounds, FeasibilityConfig, FeatureMap};
use crate::surface::{volume, HeightGrid};
use crate::terrain::Domain;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// Step radius `R` (m).
    pub step_radius: f64,
    /// Points on the candidate ring.
    pub candidates: usize,
    /// Also consider staying in place.
    pub include_stay: bool,
    pub z: f64,
    pub yaw: f64,
    /// Waypoints per campaign, the start included.
    pub horizon: usize,
    /// Nominal surface height `h0` (m).
    pub nominal_height: f64,
    /// Greedy start position (x, y).
    pub start: [f64; 2],
    /// Stop early once sigma_V / mu_V falls below this; 0 disables.
    pub target_relative_sigma: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            step_radius: 2.5,
            candidates: 16,
            include_stay: true,
            z: 7.0,
            yaw: 0.0,
            horizon: 50,
            nominal_height: 1.0,
            start: [0.0, 0.0],
            target_relative_sigma: 0.0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_radius > 0.0 && self.step_radius.is_finite()) {
            return Err(Error::InvalidConfig("planner step radius must be > 0".into()));
        }
        if self.candidates < 4 {
            return Err(Error::InvalidConfig("planner needs at least 4 ring candidates".into()));
        }
        if !(self.z.is_finite() && self.yaw.is_finite() && self.nominal_height.is_finite()) {
            return Err(Error::InvalidConfig("planner altitude, yaw and nominal height must be finite".into()));
        }
        if !(self.target_relative_sigma >= 0.0) {
            return Err(Error::InvalidConfig("target relative sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Reference `(x, y, z, yaw)` for the position controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Waypoint { x, y, z, yaw }
    }

    /// Level pose at the reference.
    pub fn pose(&self) -> Pose {
        Pose::level(self.x, self.y, self.z, self.yaw)
    }

    /// Euclidean distance over `(x, y, z, yaw)`, yaw difference wrapped.
    pub fn distance(&self, other: &Waypoint) -> f64 {
        let dyaw = wrap_pi(self.yaw - other.yaw);
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2) + dyaw * dyaw).sqrt()
    }
}

/// Everything the uncertainty prediction needs besides the grid.
#[derive(Debug, Clone, Copy)]
pub struct PlanningContext<'a> {
    pub kernel: &'a KernelConfig,
    pub lidar: &'a LidarModel,
    pub map: &'a FeatureMap,
    pub camera: &'a CameraModel,
    pub feasibility: &'a FeasibilityConfig,
    pub nominal_height: f64,
}

/// Ring of `candidates` points at radius `R` around the current position,
/// then the current position itself when enabled. Ring points sit a hair
/// inside the ball so rounding never breaks the step constraint.
pub fn candidate_set(current: &Waypoint, cfg: &PlannerConfig) -> Vec<Waypoint> {
    let r = cfg.step_radius * (1.0 - 1e-12);
    let mut out: Vec<Waypoint> = (0..cfg.candidates)
        .map(|k| {
            let th = std::f64::consts::TAU * k as f64 / cfg.candidates as f64;
            Waypoint::new(current.x + r * th.cos(), current.y + r * th.sin(), current.z, current.yaw)
        })
        .collect();
    if cfg.include_stay {
        out.push(*current);
    }
    out
}

/// sigma_V after a hypothetical sweep at `candidate` over the flat nominal
/// surface, shadows ignored, with the covariance predicted at the candidate.
/// The grid is not modified.
pub fn predict_step_uncertainty(grid: &HeightGrid, ctx: &PlanningContext, candidate: &Waypoint) -> Result<f64> {
    let pose = candidate.pose();
    if !in_cfree(&pose, ctx.map, ctx.camera, ctx.feasibility) {
        return Err(Error::InfeasibleCandidate);
    }
    let cov = predicted_covariance(&pose, ctx.map, ctx.camera, ctx.feasibility.n_min)?;
    let mut scratch = grid.clone();
    for _ in 0..ctx.lidar.revolutions {
        for alpha in ctx.lidar.angles() {
            let (origin, dir) = beam_in_world(&pose, ctx.lidar, alpha);
            if dir.z >= 0.0 {
                continue;
            }
            let d = (ctx.nominal_height - origin.z) / dir.z;
            if !ctx.lidar.in_range(d) {
                continue;
            }
            let m = measure(&pose, &cov, ctx.lidar, alpha, d, ctx.kernel.slope_sigma)?;
            scratch.update(ctx.kernel, &m);
        }
    }
    Ok(volume(&scratch, ctx.kernel)?.sigma)
}

/// Chosen waypoint with its candidate index and predicted sigma_V.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plan {
    pub waypoint: Waypoint,
    pub index: usize,
    pub predicted_sigma: f64,
}

/// Argmin of the predicted sigma_V over the feasible candidates inside the
/// step ball; ties go to the lowest candidate index.
pub fn plan_next(grid: &HeightGrid, current: &Waypoint, cfg: &PlannerConfig, ctx: &PlanningContext) -> Result<Plan> {
    select(grid, current, &candidate_set(current, cfg), cfg.step_radius, ctx)
}

/// `plan_next` over an explicit candidate list.
pub fn select(
    grid: &HeightGrid,
    current: &Waypoint,
    candidates: &[Waypoint],
    step_radius: f64,
    ctx: &PlanningContext,
) -> Result<Plan> {
    let scores: Vec<Option<f64>> = candidates
        .par_iter()
        .map(|c| {
            if current.distance(c) > step_radius {
                return None;
            }
            predict_step_uncertainty(grid, ctx, c).ok()
        })
        .collect();
    let mut best: Option<Plan> = None;
    for (index, score) in scores.into_iter().enumerate() {
        if let Some(s) = score {
            if best.is_none_or(|b| s < b.predicted_sigma) {
                best = Some(Plan { waypoint: candidates[index], index, predicted_sigma: s });
            }
        }
    }
    best.ok_or(Error::NoFeasibleCandidate)
}

/// Boustrophedon over `domain`: lanes along x, `pitch` apart in y and
/// centred in the domain, sampled every `step` of arc length (the final
/// corner always included) and clamped to `bounds`.
pub fn square_wave_trajectory(
    domain: &Domain,
    pitch: f64,
    z: f64,
    yaw: f64,
    step: f64,
    bounds: &ConfigBounds,
) -> Result<Vec<Waypoint>> {
    if !(pitch > 0.0 && step > 0.0) {
        return Err(Error::InvalidConfig("square wave pitch and step must be > 0".into()));
    }
    let corners = lawnmower_corners(domain, pitch);
    let mut points = vec![corners[0]];
    let mut travelled = 0.0;
    let mut next = step;
    for seg in corners.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        while next <= travelled + len + 1e-9 * step {
            let t = ((next - travelled) / len).min(1.0);
            points.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
            next += step;
        }
        travelled += len;
    }
    let last = *corners.last().unwrap();
    let tail = points.last().unwrap();
    if (tail.0 - last.0).hypot(tail.1 - last.1) > 1e-9 * step {
        points.push(last);
    }
    Ok(points
        .into_iter()
        .map(|(x, y)| {
            let (x, y) = bounds.clamp_xy(x, y);
            Waypoint::new(x, y, z.clamp(bounds.z[0], bounds.z[1]), yaw)
        })
        .collect())
}

/// Number of lanes used for `domain` at `pitch`.
pub fn lane_count(domain: &Domain, pitch: f64) -> usize {
    ((domain.height() / pitch).round() as usize).max(1)
}

fn lawnmower_corners(domain: &Domain, pitch: f64) -> Vec<(f64, f64)> {
    let n = lane_count(domain, pitch);
    let yc = 0.5 * (domain.y_min + domain.y_max);
    let mut out = Vec::with_capacity(2 * n);
    for k in 0..n {
        let y = yc + (k as f64 - (n as f64 - 1.0) / 2.0) * pitch;
        if k % 2 == 0 {
            out.extend([(domain.x_min, y), (domain.x_max, y)]);
        } else {
            out.extend([(domain.x_max, y), (domain.x_min, y)]);
        }
    }
    out
}

/// Total path length of the boustrophedon before sampling.
pub fn lawnmower_length(domain: &Domain, pitch: f64) -> f64 {
    let n = lane_count(domain, pitch) as f64;
    n * domain.width() + (n - 1.0) * pitch
}

/// Step length giving exactly `samples` waypoints, both ends included.
pub fn matched_step(domain: &Domain, pitch: f64, samples: usize) -> f64 {
    lawnmower_length(domain, pitch) / (samples.max(2) - 1) as f64
}

/// One executed (or planned) waypoint for the trajectory file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub waypoint: Waypoint,
    pub predicted_sigma: Option<f64>,
    pub realized_sigma: f64,
    pub realized_mean: f64,
}

pub const TRAJECTORY_HEADER: &str = "index,x,y,z,yaw,predicted_sigma_v,realized_sigma_v,realized_mu_v";

pub fn trajectory_to_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = format!("{TRAJECTORY_HEADER}\n");
    for (k, r) in rows.iter().enumerate() {
        let w = &r.waypoint;
        let pred = r.predicted_sigma.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{k},{},{},{},{},{pred},{},{}", w.x, w.y, w.z, w.yaw, r.realized_sigma, r.realized_mean);
    }
    out
}

/// Reads the waypoints back from a trajectory file.
pub fn parse_trajectory(text: &str) -> Result<Vec<Waypoint>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty trajectory file".into()))?;
    if !header.starts_with("index,x,y,z,yaw") {
        return Err(Error::Parse(format!("unexpected trajectory header '{header}'")));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 5 {
                return Err(Error::Parse(format!("short trajectory row '{line}'")));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{s}'")));
            Ok(Waypoint::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?))
        })
        .collect()
}
