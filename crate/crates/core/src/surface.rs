//! Height-grid belief, Kalman fusion of hit points, sparse GP prediction and
//! volume statistics.
//!
//! The grid holds one independent normal per node. Nodes sit at cell
//! centres: node `(i, j)` is at `(x_min + (i + 1/2) dx, y_min + (j + 1/2) dy)`
//! and represents a cell of area `dx * dy`. The nodes double as the inducing
//! points of a zero-mean GP whose per-point noise is the node variance.
//!
//! Prediction is local: a query only sees the inducing points within the
//! kernel support radius `gamma * l`. Within that neighbourhood the Gram
//! matrix uses the untruncated Matérn correlation, so every local system is
//! positive definite.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{matern, matern_full, KernelConfig};
use crate::lidar::SurfaceMeasurement;
use crate::terrain::Domain;

/// Node variances never drop below this (m^2).
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Added to the Gram diagonal.
pub const JITTER: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct HeightGrid {
    pub nx: usize,
    pub ny: usize,
    pub domain: Domain,
    pub dx: f64,
    pub dy: f64,
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl HeightGrid {
    pub fn new(domain: Domain, nx: usize, ny: usize, prior_mean: f64, prior_variance: f64) -> Result<Self> {
        domain.validate()?;
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidConfig("grid needs at least one node per axis".into()));
        }
        if !(prior_variance > 0.0 && prior_variance.is_finite()) {
            return Err(Error::InvalidConfig("prior variance must be finite and > 0".into()));
        }
        Ok(HeightGrid {
            nx,
            ny,
            domain,
            dx: domain.width() / nx as f64,
            dy: domain.height() / ny as f64,
            mean: vec![prior_mean; nx * ny],
            variance: vec![prior_variance; nx * ny],
        })
    }

    /// Grid with explicit node values (row-major, `i` fastest).
    pub fn from_values(domain: Domain, nx: usize, ny: usize, mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        let mut g = HeightGrid::new(domain, nx, ny, 0.0, 1.0)?;
        if mean.len() != nx * ny || variance.len() != nx * ny {
            return Err(Error::InvalidConfig("grid value count does not match its shape".into()));
        }
        if variance.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidConfig("grid variances must be > 0".into()));
        }
        g.mean = mean;
        g.variance = variance;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn node_xy(&self, k: usize) -> (f64, f64) {
        let (i, j) = (k % self.nx, k / self.nx);
        (
            self.domain.x_min + (i as f64 + 0.5) * self.dx,
            self.domain.y_min + (j as f64 + 0.5) * self.dy,
        )
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn mean_mut(&mut self) -> &mut [f64] {
        &mut self.mean
    }

    /// Node indices within `radius` of `(x, y)`, ascending.
    pub fn nodes_within(&self, x: f64, y: f64, radius: f64) -> Vec<usize> {
        let lo_i = ((x - radius - self.domain.x_min) / self.dx - 0.5).floor().max(0.0) as usize;
        let hi_i = (((x + radius - self.domain.x_min) / self.dx - 0.5).ceil().max(-1.0) as i64).min(self.nx as i64 - 1);
        let lo_j = ((y - radius - self.domain.y_min) / self.dy - 0.5).floor().max(0.0) as usize;
        let hi_j = (((y + radius - self.domain.y_min) / self.dy - 0.5).ceil().max(-1.0) as i64).min(self.ny as i64 - 1);
        let mut out = Vec::new();
        if hi_i < 0 || hi_j < 0 {
            return out;
        }
        for j in lo_j..=hi_j as usize {
            for i in lo_i..=hi_i as usize {
                let k = self.index(i, j);
                let (nx, ny) = self.node_xy(k);
                if (nx - x).hypot(ny - y) <= radius {
                    out.push(k);
                }
            }
        }
        out
    }

    /// Scalar Kalman update of every node within the update radius of the
    /// hit point. The measurement variance is inflated with horizontal
    /// distance `s`: `R(s) = var_z + sigma_t^2 (exp(s/l) - 1)`. Returns the
    /// number of nodes touched.
    pub fn update(&mut self, cfg: &KernelConfig, m: &SurfaceMeasurement) -> usize {
        let (x, y, z) = (m.point.x, m.point.y, m.point.z);
        let l = cfg.lengthscale;
        let st2 = cfg.slope_sigma * cfg.slope_sigma;
        let nodes = self.nodes_within(x, y, cfg.update_radius * l);
        for &k in &nodes {
            let (nx, ny) = self.node_xy(k);
            let s = (nx - x).hypot(ny - y);
            let r = m.height_variance + st2 * (s / l).exp_m1();
            let prior = self.variance[k];
            let gain = prior / (prior + r);
            self.mean[k] += gain * (z - self.mean[k]);
            self.variance[k] = ((1.0 - gain) * prior).max(VARIANCE_FLOOR);
        }
        nodes.len()
    }

    pub fn updated(&self, cfg: &KernelConfig, m: &SurfaceMeasurement) -> Self {
        let mut g = self.clone();
        g.update(cfg, m);
        g
    }

    pub fn update_all(&mut self, cfg: &KernelConfig, ms: &[SurfaceMeasurement]) {
        for m in ms {
            self.update(cfg, m);
        }
    }
}

/// Posterior means (m) and variances (m^2) at the query points.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPrediction {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

struct LocalSystem {
    factor: DMatrix<f64>,
    whitened: DVector<f64>,
}

fn factor_neighbourhood(grid: &HeightGrid, cfg: &KernelConfig, nodes: &[usize]) -> Result<LocalSystem> {
    let n = nodes.len();
    let xy: Vec<(f64, f64)> = nodes.iter().map(|&k| grid.node_xy(k)).collect();
    let mut gram = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..a {
            let s = (xy[a].0 - xy[b].0).hypot(xy[a].1 - xy[b].1);
            let v = matern_full(s, cfg.lengthscale, cfg.nu);
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
        gram[(a, a)] = 1.0 + grid.variance[nodes[a]];
    }
    let mut jitter = JITTER;
    loop {
        let mut m = gram.clone();
        for a in 0..n {
            m[(a, a)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            let factor = ch.unpack_dirty();
            let z = DVector::from_iterator(n, nodes.iter().map(|&k| grid.mean[k]));
            let whitened = factor
                .solve_lower_triangular(&z)
                .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
            return Ok(LocalSystem { factor, whitened });
        }
        jitter *= 10.0;
        if jitter > 1e-3 {
            return Err(Error::Numerical("local Gram matrix is not positive definite".into()));
        }
    }
}

/// Sparse GP prediction at arbitrary points inside the grid domain.
pub fn gp_predict(grid: &HeightGrid, cfg: &KernelConfig, query: &[(f64, f64)]) -> Result<GpPrediction> {
    for &(x, y) in query {
        if !grid.domain.contains(x, y, 1e-9) {
            return Err(Error::OutsideDomain { x, y });
        }
    }
    predict_unchecked(grid, cfg, query)
}

fn predict_unchecked(grid: &HeightGrid, cfg: &KernelConfig, query: &[(f64, f64)]) -> Result<GpPrediction> {
    let radius = cfg.support_radius();
    // Queries sharing a neighbourhood share one factorization.
    let mut slot: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut groups: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for (q, &(x, y)) in query.iter().enumerate() {
        let nodes = grid.nodes_within(x, y, radius);
        match slot.get(&nodes) {
            Some(&g) => groups[g].1.push(q),
            None => {
                slot.insert(nodes.clone(), groups.len());
                groups.push((nodes, vec![q]));
            }
        }
    }
    let solved: Vec<Vec<(usize, f64, f64)>> = groups
        .par_iter()
        .map(|(nodes, members)| {
            if nodes.is_empty() {
                return Ok(members.iter().map(|&q| (q, 0.0, 1.0)).collect());
            }
            let sys = factor_neighbourhood(grid, cfg, nodes)?;
            members
                .iter()
                .map(|&q| {
                    let (x, y) = query[q];
                    let k = DVector::from_iterator(
                        nodes.len(),
                        nodes.iter().map(|&n| {
                            let (nx, ny) = grid.node_xy(n);
                            matern((nx - x).hypot(ny - y), cfg)
                        }),
                    );
                    let v = sys
                        .factor
                        .solve_lower_triangular(&k)
                        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
                    Ok((q, v.dot(&sys.whitened), (1.0 - v.norm_squared()).max(0.0)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut means = vec![0.0; query.len()];
    let mut variances = vec![0.0; query.len()];
    for (q, m, v) in solved.into_iter().flatten() {
        means[q] = m;
        variances[q] = v;
    }
    Ok(GpPrediction { means, variances })
}

/// Volume mean and standard deviation (m^3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeEstimate {
    pub mean: f64,
    pub sigma: f64,
}

impl VolumeEstimate {
    pub fn relative_sigma(&self) -> f64 {
        self.sigma / self.mean
    }
}

/// Riemann sums of the GP posterior over the inducing lattice: the mean sums
/// `A * M_ij`, the variance sums `A^2 * Var_ij` (cells treated as
/// independent).
pub fn volume(grid: &HeightGrid, cfg: &KernelConfig) -> Result<VolumeEstimate> {
    let nodes: Vec<(f64, f64)> = (0..grid.len()).map(|k| grid.node_xy(k)).collect();
    volume_on(grid, cfg, &nodes, grid.cell_area())
}

/// Volume statistics on an arbitrary prediction lattice with cell area `area`.
pub fn volume_on(grid: &HeightGrid, cfg: &KernelConfig, points: &[(f64, f64)], area: f64) -> Result<VolumeEstimate> {
    let pred = gp_predict(grid, cfg, points)?;
    let mean = area * pred.means.iter().sum::<f64>();
    let var_sum: f64 = pred.variances.iter().sum();
    Ok(VolumeEstimate { mean, sigma: (area * area * var_sum).sqrt() })
}

impl HeightGrid {
    /// Text snapshot: a key/value header followed by the mean and variance
    /// blocks as CSV, one row per `j`.
    pub fn to_snapshot(&self) -> String {
        let mut out = String::from("# height grid snapshot, nodes at cell centres\n");
        let _ = writeln!(out, "nx,{}", self.nx);
        let _ = writeln!(out, "ny,{}", self.ny);
        let _ = writeln!(out, "origin_x,{}", self.domain.x_min);
        let _ = writeln!(out, "origin_y,{}", self.domain.y_min);
        let _ = writeln!(out, "spacing_x,{}", self.dx);
        let _ = writeln!(out, "spacing_y,{}", self.dy);
        let _ = writeln!(out, "cell_area,{}", self.cell_area());
        for (name, values) in [("mean", &self.mean), ("variance", &self.variance)] {
            let _ = writeln!(out, "[{name}]");
            for row in values.chunks(self.nx) {
                let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                let _ = writeln!(out, "{}", cells.join(","));
            }
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let mut header = HashMap::new();
        let mut blocks: HashMap<String, Vec<f64>> = HashMap::new();
        let mut current: Option<String> = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(name.to_string());
                blocks.entry(name.to_string()).or_default();
                continue;
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{s}'")));
            match &current {
                None => {
                    let (k, v) = line.split_once(',').ok_or_else(|| Error::Parse(format!("bad header '{line}'")))?;
                    header.insert(k.trim().to_string(), parse(v)?);
                }
                Some(name) => {
                    let row = line.split(',').map(parse).collect::<Result<Vec<_>>>()?;
                    blocks.get_mut(name).unwrap().extend(row);
                }
            }
        }
        let get = |k: &str| header.get(k).copied().ok_or_else(|| Error::Parse(format!("missing {k}")));
        let (nx, ny) = (get("nx")? as usize, get("ny")? as usize);
        let (ox, oy) = (get("origin_x")?, get("origin_y")?);
        let domain = Domain::new(ox, ox + nx as f64 * get("spacing_x")?, oy, oy + ny as f64 * get("spacing_y")?);
        let take = |k: &str| blocks.get(k).cloned().ok_or_else(|| Error::Parse(format!("missing block {k}")));
        HeightGrid::from_values(domain, nx, ny, take("mean")?, take("variance")?)
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        HeightGrid::from_snapshot(&text)
    }
}
