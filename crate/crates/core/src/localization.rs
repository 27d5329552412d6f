//! Pose estimation from pixel detections of mapped features, the
//! quality-of-fix metric and the feasible configuration set.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix6, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{numeric_jacobian, pinhole, project, wrap_pi, world_to_camera, CameraModel, Pose, PoseCovariance, JACOBIAN_STEP};
use crate::lm::{self, LmOptions};
use crate::terrain::{raycast, Terrain};

/// Pitch closer than this to +-pi/2 is rejected (Euler singularity).
pub const GIMBAL_MARGIN: f64 = 1e-2;
/// Largest admissible condition number of `J^T J`.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub id: u32,
    pub position: Vector3<f64>,
}

/// Mapped landmarks keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureMap {
    features: BTreeMap<u32, Vector3<f64>>,
}

impl FeatureMap {
    pub fn new(features: impl IntoIterator<Item = Feature>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for f in features {
            if map.insert(f.id, f.position).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate feature id {}", f.id)));
            }
        }
        Ok(FeatureMap { features: map })
    }

    /// Features on the vertical plane `x = wall_x`, laid out as a
    /// `columns x rows` grid spanning `[y_min, y_max] x [z_min, z_max]`.
    pub fn wall(wall_x: f64, y: (f64, f64), z: (f64, f64), columns: usize, rows: usize) -> Self {
        let lerp = |(a, b): (f64, f64), k: usize, n: usize| {
            if n <= 1 {
                0.5 * (a + b)
            } else {
                a + (b - a) * k as f64 / (n - 1) as f64
            }
        };
        let mut features = BTreeMap::new();
        let mut id = 0;
        for r in 0..rows {
            for c in 0..columns {
                features.insert(id, Vector3::new(wall_x, lerp(y, c, columns), lerp(z, r, rows)));
                id += 1;
            }
        }
        FeatureMap { features }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Vector3<f64>> {
        self.features.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = Feature> + '_ {
        self.features.iter().map(|(&id, &position)| Feature { id, position })
    }

    /// Whole-scene translation, used to check translation invariance.
    pub fn translated(&self, t: &Vector3<f64>) -> Self {
        FeatureMap {
            features: self.features.iter().map(|(&id, p)| (id, p + t)).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# features units=m frame=global\nid,x,y,z\n");
        for f in self.iter() {
            let _ = writeln!(out, "{},{},{},{}", f.id, f.position.x, f.position.y, f.position.z);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        match rows.next() {
            Some(h) if h.replace(' ', "").eq_ignore_ascii_case("id,x,y,z") => {}
            other => return Err(Error::Parse(format!("expected header 'id,x,y,z', found {other:?}"))),
        }
        let features = rows
            .map(|line| {
                let cols: Vec<&str> = line.split(',').map(str::trim).collect();
                if cols.len() != 4 {
                    return Err(Error::Parse(format!("bad feature record '{line}'")));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{s}'")));
                Ok(Feature {
                    id: cols[0].parse().map_err(|_| Error::Parse(format!("bad id '{}'", cols[0])))?,
                    position: Vector3::new(num(cols[1])?, num(cols[2])?, num(cols[3])?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureMap::new(features)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        FeatureMap::parse(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub id: u32,
    pub pixel: Vector2<f64>,
}

pub type DetectionSet = Vec<Detection>;

/// Axis-aligned bounds of the configuration space plus a yaw interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigBounds {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
    /// Yaw interval in `[0, 2pi)`; may wrap (`yaw[0] > yaw[1]`).
    pub yaw: [f64; 2],
}

impl ConfigBounds {
    pub fn contains(&self, pose: &Pose) -> bool {
        let p = &pose.position;
        let within = |v: f64, b: [f64; 2]| v >= b[0] && v <= b[1];
        let yaw_ok = if self.yaw[0] <= self.yaw[1] {
            within(pose.yaw, self.yaw)
        } else {
            pose.yaw >= self.yaw[0] || pose.yaw <= self.yaw[1]
        };
        within(p.x, self.x) && within(p.y, self.y) && within(p.z, self.z) && yaw_ok
    }

    pub fn clamp_xy(&self, x: f64, y: f64) -> (f64, f64) {
        (x.clamp(self.x[0], self.x[1]), y.clamp(self.y[0], self.y[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeasibilityConfig {
    /// Minimum quality of fix.
    pub tau: f64,
    pub n_min: usize,
    pub bounds: ConfigBounds,
    /// Diagonal weights applied inside the trace of the quality metric.
    /// All ones reproduces the unweighted trace.
    pub trace_weights: [f64; 6],
}

impl Default for FeasibilityConfig {
    fn default() -> Self {
        FeasibilityConfig {
            tau: 1.0,
            n_min: 4,
            bounds: ConfigBounds {
                x: [-1e6, 1e6],
                y: [-1e6, 1e6],
                z: [-1e6, 1e6],
                yaw: [0.0, std::f64::consts::TAU],
            },
            trace_weights: [1.0; 6],
        }
    }
}

impl FeasibilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig("tau must be > 0".into()));
        }
        if self.n_min < 3 {
            return Err(Error::InvalidConfig("n_min must be >= 3".into()));
        }
        if self.trace_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidConfig("trace weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Pose estimate with its first-order covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub covariance: PoseCovariance,
    /// Sum of squared reprojection errors (px^2) at the solution.
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
}

/// Features that project inside the image. With an occluder, features whose
/// line of sight from the camera centre hits the terrain are dropped too.
pub fn visible_features(pose: &Pose, map: &FeatureMap, camera: &CameraModel, occluder: Option<&Terrain>) -> Vec<Feature> {
    let eye = crate::frames::camera_to_world(pose, camera, &Vector3::zeros());
    map.iter()
        .filter(|f| project(camera, &world_to_camera(pose, camera, &f.position)).visible().is_some())
        .filter(|f| match occluder {
            None => true,
            Some(t) => {
                let ray = f.position - eye;
                let dist = ray.norm();
                dist == 0.0 || raycast(t, &eye, &(ray / dist), dist).is_none()
            }
        })
        .collect()
}

/// Projects every visible feature and adds isotropic pixel noise.
pub fn simulate_detections(pose: &Pose, map: &FeatureMap, camera: &CameraModel, noise_seed: u64) -> DetectionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    simulate_detections_with(pose, map, camera, None, &mut rng)
}

pub fn simulate_detections_with(
    pose: &Pose,
    map: &FeatureMap,
    camera: &CameraModel,
    occluder: Option<&Terrain>,
    rng: &mut ChaCha8Rng,
) -> DetectionSet {
    let noise = Normal::new(0.0, camera.pixel_sigma).expect("pixel sigma is finite and >= 0");
    visible_features(pose, map, camera, occluder)
        .into_iter()
        .filter_map(|f| {
            let px = pinhole(camera, &world_to_camera(pose, camera, &f.position))?;
            let noisy = Vector2::new(px.x + noise.sample(rng), px.y + noise.sample(rng));
            camera.in_bounds(&noisy).then_some(Detection { id: f.id, pixel: noisy })
        })
        .collect()
}

fn stacked_projection(params: &[f64], points: &[Vector3<f64>], camera: &CameraModel) -> Option<DVector<f64>> {
    let pose = Pose::from_raw(params);
    let mut out = DVector::zeros(points.len() * 2);
    for (k, p) in points.iter().enumerate() {
        let px = pinhole(camera, &world_to_camera(&pose, camera, p))?;
        out[2 * k] = px.x;
        out[2 * k + 1] = px.y;
    }
    Some(out)
}

/// `sigma^2 (J^T J)^-1` for the stacked projection of `points` at `pose`.
fn covariance_at(pose: &Pose, points: &[Vector3<f64>], camera: &CameraModel) -> Result<PoseCovariance> {
    let at = DVector::from_column_slice(pose.to_vector().as_slice());
    let j = numeric_jacobian(
        |v| stacked_projection(v.as_slice(), points, camera).unwrap_or_else(|| DVector::from_element(points.len() * 2, f64::NAN)),
        &at,
        JACOBIAN_STEP,
    )?;
    let jtj: DMatrix<f64> = j.transpose() * &j;
    let condition = lm::condition_number(&jtj);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularGeometry { condition });
    }
    let inv = jtj
        .cholesky()
        .ok_or(Error::SingularGeometry { condition })?
        .inverse();
    let s2 = camera.pixel_sigma * camera.pixel_sigma;
    let mut cov = Matrix6::from_fn(|r, c| s2 * inv[(r, c)]);
    cov = (cov + cov.transpose()) * 0.5;
    Ok(PoseCovariance(cov))
}

fn check_gimbal(pose: &Pose) -> Result<()> {
    if wrap_pi(pose.pitch).abs() > FRAC_PI_2 - GIMBAL_MARGIN {
        return Err(Error::GimbalLock { pitch: pose.pitch });
    }
    Ok(())
}

/// Nonlinear least-squares pose from detections (Levenberg-Marquardt), with
/// covariance `sigma^2 (J^T J)^-1` at the solution.
pub fn estimate_pose(
    detections: &[Detection],
    map: &FeatureMap,
    camera: &CameraModel,
    initial_guess: &Pose,
    n_min: usize,
) -> Result<PoseEstimate> {
    if detections.len() < n_min {
        return Err(Error::InsufficientDetections { required: n_min, got: detections.len() });
    }
    check_gimbal(initial_guess)?;
    let mut points = Vec::with_capacity(detections.len());
    let mut measured = DVector::zeros(detections.len() * 2);
    for (k, d) in detections.iter().enumerate() {
        let p = map
            .get(d.id)
            .ok_or_else(|| Error::InvalidConfig(format!("detection of unmapped feature {}", d.id)))?;
        points.push(*p);
        measured[2 * k] = d.pixel.x;
        measured[2 * k + 1] = d.pixel.y;
    }
    let residuals = |v: &DVector<f64>| stacked_projection(v.as_slice(), &points, camera).map(|p| p - &measured);
    let initial = DVector::from_column_slice(initial_guess.to_vector().as_slice());
    let sol = lm::minimize(residuals, initial, &LmOptions::default())?;
    let raw = Pose::from_raw(sol.params.as_slice());
    check_gimbal(&raw)?;
    let covariance = covariance_at(&raw, &points, camera)?;
    Ok(PoseEstimate {
        pose: Pose::from_slice(sol.params.as_slice()),
        covariance,
        cost: sol.cost,
        initial_cost: sol.initial_cost,
        iterations: sol.iterations,
    })
}

/// `1 / sqrt(trace(cov))`.
pub fn quality_of_fix(cov: &PoseCovariance) -> Result<f64> {
    quality_of_fix_weighted(cov, &[1.0; 6])
}

pub fn quality_of_fix_weighted(cov: &PoseCovariance, weights: &[f64; 6]) -> Result<f64> {
    let trace: f64 = (0..6).map(|i| weights[i] * cov.0[(i, i)]).sum();
    if !(trace > 0.0) {
        return Err(Error::InvalidCovariance(trace));
    }
    Ok(1.0 / trace.sqrt())
}

/// Covariance expected at `pose` assuming the estimate equals the truth:
/// Jacobian of the noise-free projections of the visible features.
pub fn predicted_covariance(pose: &Pose, map: &FeatureMap, camera: &CameraModel, n_min: usize) -> Result<PoseCovariance> {
    check_gimbal(pose)?;
    let points: Vec<Vector3<f64>> = visible_features(pose, map, camera, None).into_iter().map(|f| f.position).collect();
    if points.len() < n_min {
        return Err(Error::InsufficientVisibility { required: n_min, got: points.len() });
    }
    covariance_at(pose, &points, camera)
}

/// Quality of fix at `pose`, `+inf` for a noise-free camera.
pub fn predicted_quality(pose: &Pose, map: &FeatureMap, camera: &CameraModel, cfg: &FeasibilityConfig) -> Result<f64> {
    let cov = predicted_covariance(pose, map, camera, cfg.n_min)?;
    if camera.pixel_sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    quality_of_fix_weighted(&cov, &cfg.trace_weights)
}

/// Membership in the feasible set: inside the bounds, enough visible
/// features and quality of fix above `tau`.
pub fn in_cfree(pose: &Pose, map: &FeatureMap, camera: &CameraModel, cfg: &FeasibilityConfig) -> bool {
    cfg.bounds.contains(pose) && predicted_quality(pose, map, camera, cfg).is_ok_and(|q| q > cfg.tau)
}

/// Regular lattice over x and y, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub nx: usize,
    pub ny: usize,
}

impl LatticeSpec {
    fn axis(range: [f64; 2], n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![0.5 * (range[0] + range[1])];
        }
        (0..n).map(|k| range[0] + (range[1] - range[0]) * k as f64 / (n - 1) as f64).collect()
    }

    pub fn xs(&self) -> Vec<f64> {
        Self::axis(self.x, self.nx)
    }

    pub fn ys(&self) -> Vec<f64> {
        Self::axis(self.y, self.ny)
    }
}

/// Scalar field over a lattice; `None` marks points where the quality of
/// fix is undefined (too few features or degenerate geometry).
#[derive(Debug, Clone, PartialEq)]
pub struct QualityField {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major with rows along y.
    pub values: Vec<Option<f64>>,
}

impl QualityField {
    pub fn at(&self, ix: usize, iy: usize) -> Option<f64> {
        self.values[iy * self.xs.len() + ix]
    }

    /// CSV: header row `y\x,x_0,...`; each row starts with its y; undefined
    /// cells are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("y\\x");
        for x in &self.xs {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
        for (iy, y) in self.ys.iter().enumerate() {
            let _ = write!(out, "{y}");
            for ix in 0..self.xs.len() {
                match self.at(ix, iy) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Quality of fix over an xy lattice at fixed altitude and yaw.
pub fn quality_map(
    map: &FeatureMap,
    camera: &CameraModel,
    cfg: &FeasibilityConfig,
    z: f64,
    yaw: f64,
    grid: &LatticeSpec,
) -> QualityField {
    let xs = grid.xs();
    let ys = grid.ys();
    let points: Vec<(f64, f64)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let values = points
        .par_iter()
        .map(|&(x, y)| predicted_quality(&Pose::level(x, y, z, yaw), map, camera, cfg).ok())
        .collect();
    QualityField { xs, ys, values }
}
