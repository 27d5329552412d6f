//! Ground-truth terrain: bilinear heightmap, ray casting, slope statistics
//! and reference volume.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle `[x_min, x_max] x [y_min, y_max]` (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Domain {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Domain { x_min, x_max, y_min, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: f64, y: f64, tol: f64) -> bool {
        x >= self.x_min - tol && x <= self.x_max + tol && y >= self.y_min - tol && y <= self.y_max + tol
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return Err(Error::InvalidConfig(format!("empty domain {self:?}")));
        }
        Ok(())
    }
}

/// Heightmap sampled on a regular lattice with bilinear interpolation.
/// Node `(i, j)` sits at `(x0 + i*dx, y0 + j*dy)`; heights are stored with
/// `i` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Terrain {
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    pub nx: usize,
    pub ny: usize,
    heights: Vec<f64>,
}

impl Terrain {
    pub fn new(x0: f64, y0: f64, dx: f64, dy: f64, nx: usize, ny: usize, heights: Vec<f64>) -> Result<Self> {
        if nx < 2 || ny < 2 || heights.len() != nx * ny {
            return Err(Error::InvalidConfig(format!(
                "terrain lattice {nx}x{ny} with {} samples",
                heights.len()
            )));
        }
        if !(dx > 0.0 && dy > 0.0) {
            return Err(Error::InvalidConfig("terrain spacing must be > 0".into()));
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(Error::InvalidConfig("terrain heights must be finite".into()));
        }
        Ok(Terrain { x0, y0, dx, dy, nx, ny, heights })
    }

    /// Samples `f` on a lattice covering `domain` (plus `margin` on every side).
    pub fn from_fn(domain: &Domain, margin: f64, spacing: f64, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        let x0 = domain.x_min - margin;
        let y0 = domain.y_min - margin;
        let nx = ((domain.width() + 2.0 * margin) / spacing).ceil() as usize + 1;
        let ny = ((domain.height() + 2.0 * margin) / spacing).ceil() as usize + 1;
        let mut heights = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                heights.push(f(x0 + i as f64 * spacing, y0 + j as f64 * spacing));
            }
        }
        Terrain::new(x0, y0, spacing, spacing, nx, ny, heights)
    }

    pub fn flat(domain: &Domain, margin: f64, spacing: f64, height: f64) -> Result<Self> {
        Terrain::from_fn(domain, margin, spacing, |_, _| height)
    }

    pub fn node(&self, i: usize, j: usize) -> f64 {
        self.heights[j * self.nx + i]
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn x_max(&self) -> f64 {
        self.x0 + (self.nx - 1) as f64 * self.dx
    }

    pub fn y_max(&self) -> f64 {
        self.y0 + (self.ny - 1) as f64 * self.dy
    }

    pub fn covers(&self, d: &Domain) -> bool {
        let tol = 1e-9;
        d.x_min >= self.x0 - tol && d.y_min >= self.y0 - tol && d.x_max <= self.x_max() + tol && d.y_max <= self.y_max() + tol
    }

    pub fn min_height(&self) -> f64 {
        self.heights.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_height(&self) -> f64 {
        self.heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Bilinear height; `None` outside the lattice.
    pub fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        let u = (x - self.x0) / self.dx;
        let v = (y - self.y0) / self.dy;
        let (umax, vmax) = ((self.nx - 1) as f64, (self.ny - 1) as f64);
        if !(u >= 0.0 && v >= 0.0 && u <= umax && v <= vmax) {
            return None;
        }
        let i = (u.floor() as usize).min(self.nx - 2);
        let j = (v.floor() as usize).min(self.ny - 2);
        let (fu, fv) = (u - i as f64, v - j as f64);
        let h00 = self.node(i, j);
        let h10 = self.node(i + 1, j);
        let h01 = self.node(i, j + 1);
        let h11 = self.node(i + 1, j + 1);
        Some(h00 * (1.0 - fu) * (1.0 - fv) + h10 * fu * (1.0 - fv) + h01 * (1.0 - fu) * fv + h11 * fu * fv)
    }
}

/// First intersection of the ray with the surface within `d_max`, found by
/// marching at half the lattice spacing and refining by bisection. Rays
/// leaving the lattice or starting below the surface miss.
pub fn raycast(terrain: &Terrain, origin: &Vector3<f64>, direction: &Vector3<f64>, d_max: f64) -> Option<f64> {
    debug_assert!((direction.norm() - 1.0).abs() < 1e-9);
    let gap = |t: f64| -> Option<f64> {
        let p = origin + direction * t;
        terrain.height_at(p.x, p.y).map(|h| p.z - h)
    };
    let step = 0.5 * terrain.dx.min(terrain.dy);
    let mut t_prev = 0.0;
    let g0 = gap(0.0)?;
    if g0 < 0.0 {
        return None;
    }
    if g0 == 0.0 {
        return Some(0.0);
    }
    loop {
        if t_prev >= d_max {
            return None;
        }
        let t = (t_prev + step).min(d_max);
        let g = gap(t)?;
        if g <= 0.0 {
            let (mut lo, mut hi) = (t_prev, t);
            while hi - lo > 1e-7 {
                let mid = 0.5 * (lo + hi);
                match gap(mid) {
                    Some(gm) if gm > 0.0 => lo = mid,
                    _ => hi = mid,
                }
            }
            return Some(hi);
        }
        t_prev = t;
    }
}

/// Standard deviation of a zero-mean normal fitted to the pooled
/// central-difference slopes `dh/dx` and `dh/dy` at interior nodes.
pub fn slope_sigma(terrain: &Terrain) -> f64 {
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for j in 1..terrain.ny.saturating_sub(1) {
        for i in 1..terrain.nx.saturating_sub(1) {
            let sx = (terrain.node(i + 1, j) - terrain.node(i - 1, j)) / (2.0 * terrain.dx);
            let sy = (terrain.node(i, j + 1) - terrain.node(i, j - 1)) / (2.0 * terrain.dy);
            sum_sq += sx * sx + sy * sy;
            count += 2;
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum_sq / count as f64).sqrt()
    }
}

/// Composite midpoint quadrature of the bilinear surface over `domain` with
/// `nx * ny` sub-cells.
pub fn true_volume(terrain: &Terrain, domain: &Domain, nx: usize, ny: usize) -> Result<f64> {
    if !terrain.covers(domain) {
        return Err(Error::InvalidConfig("terrain does not cover the volume domain".into()));
    }
    let hx = domain.width() / nx as f64;
    let hy = domain.height() / ny as f64;
    let mut total = 0.0;
    for j in 0..ny {
        let y = domain.y_min + (j as f64 + 0.5) * hy;
        let mut row = 0.0;
        for i in 0..nx {
            let x = domain.x_min + (i as f64 + 0.5) * hx;
            row += terrain
                .height_at(x, y)
                .ok_or(Error::OutsideDomain { x, y })?;
        }
        total += row;
    }
    Ok(total * hx * hy)
}

/// A single Gaussian mound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
    pub sigma: f64,
}

/// Parameters of the rugged synthetic stockpile: a broad mound plus ridged
/// multi-octave value noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FractalParams {
    pub base: f64,
    pub relief: f64,
    /// Share of the relief carried by the broad mound, rest is noise.
    pub mound_share: f64,
    pub wavelength: f64,
    pub octaves: u32,
    pub persistence: f64,
    pub seed: u64,
}

impl Default for FractalParams {
    fn default() -> Self {
        FractalParams {
            base: 1.0,
            relief: 4.0,
            mound_share: 0.6,
            wavelength: 10.0,
            octaves: 3,
            persistence: 0.45,
            seed: 1,
        }
    }
}

struct ValueNoise {
    period: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, period: usize) -> Self {
        let values = (0..period * period).map(|_| rng.random_range(-1.0..1.0)).collect();
        ValueNoise { period, values }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let p = self.period as i64;
        let (iu, iv) = (u.floor() as i64, v.floor() as i64);
        let (fu, fv) = (u - iu as f64, v - iv as f64);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (su, sv) = (s(fu), s(fv));
        let val = |a: i64, b: i64| self.values[(a.rem_euclid(p) * p + b.rem_euclid(p)) as usize];
        let a = val(iu, iv) * (1.0 - su) + val(iu + 1, iv) * su;
        let b = val(iu, iv + 1) * (1.0 - su) + val(iu + 1, iv + 1) * su;
        a * (1.0 - sv) + b * sv
    }
}

/// Synthetic terrains for tests and scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerrainSource {
    Flat { height: f64 },
    Ramp { base: f64, slope_x: f64, slope_y: f64 },
    Bumps { base: f64, bumps: Vec<Bump> },
    Fractal(FractalParams),
    AsciiGrid { path: String },
}

impl Default for TerrainSource {
    fn default() -> Self {
        TerrainSource::Fractal(FractalParams::default())
    }
}

impl TerrainSource {
    /// Builds the terrain on a lattice of `spacing` covering `domain` plus `margin`.
    pub fn build(&self, domain: &Domain, margin: f64, spacing: f64) -> Result<Terrain> {
        match self {
            TerrainSource::Flat { height } => Terrain::flat(domain, margin, spacing, *height),
            TerrainSource::Ramp { base, slope_x, slope_y } => Terrain::from_fn(domain, margin, spacing, |x, y| {
                base + slope_x * (x - domain.x_min) + slope_y * (y - domain.y_min)
            }),
            TerrainSource::Bumps { base, bumps } => Terrain::from_fn(domain, margin, spacing, |x, y| {
                base + bumps
                    .iter()
                    .map(|b| {
                        let r2 = (x - b.x).powi(2) + (y - b.y).powi(2);
                        b.amplitude * (-r2 / (2.0 * b.sigma * b.sigma)).exp()
                    })
                    .sum::<f64>()
            }),
            TerrainSource::Fractal(p) => fractal(domain, margin, spacing, p),
            TerrainSource::AsciiGrid { path } => read_ascii_grid(Path::new(path)),
        }
    }
}

fn fractal(domain: &Domain, margin: f64, spacing: f64, p: &FractalParams) -> Result<Terrain> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let octaves: Vec<(ValueNoise, f64, f64, f64, f64)> = (0..p.octaves.max(1))
        .map(|o| {
            let noise = ValueNoise::new(&mut rng, 64);
            let wl = p.wavelength / 2f64.powi(o as i32);
            let amp = p.persistence.powi(o as i32);
            let (ou, ov) = (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
            (noise, wl, amp, ou, ov)
        })
        .collect();
    let norm: f64 = octaves.iter().map(|o| o.2).sum();
    let (cx, cy) = (
        0.5 * (domain.x_min + domain.x_max) + rng.random_range(-0.1..0.1) * domain.width(),
        0.5 * (domain.y_min + domain.y_max) + rng.random_range(-0.1..0.1) * domain.height(),
    );
    let spread = 0.35 * domain.width().max(domain.height());
    Terrain::from_fn(domain, margin, spacing, |x, y| {
        let mound = (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * spread * spread)).exp();
        // Ridged noise: sharp crests, rounded valleys.
        let ridged: f64 = octaves
            .iter()
            .map(|(n, wl, amp, ou, ov)| amp * (1.0 - n.at(x / wl + ou, y / wl + ov).abs()))
            .sum::<f64>()
            / norm;
        p.base + p.relief * (p.mound_share * mound + (1.0 - p.mound_share) * ridged * mound.sqrt())
    })
}

/// Reads an ESRI ASCII grid (`ncols`, `nrows`, `xllcorner|xllcenter`,
/// `yllcorner|yllcenter`, `cellsize`, optional `nodata_value`; rows north
/// to south). Cells holding the nodata value are rejected.
pub fn read_ascii_grid(path: &Path) -> Result<Terrain> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_ascii_grid(&text)
}

pub fn parse_ascii_grid(text: &str) -> Result<Terrain> {
    let mut tokens = text.split_whitespace().peekable();
    let mut header = std::collections::HashMap::new();
    while let Some(tok) = tokens.peek() {
        if tok.parse::<f64>().is_ok() {
            break;
        }
        let key = tokens.next().unwrap().to_ascii_lowercase();
        let value: f64 = tokens
            .next()
            .ok_or_else(|| Error::Parse(format!("missing value for {key}")))?
            .parse()
            .map_err(|_| Error::Parse(format!("bad value for {key}")))?;
        header.insert(key, value);
    }
    let get = |k: &str| header.get(k).copied().ok_or_else(|| Error::Parse(format!("missing header {k}")));
    let ncols = get("ncols")? as usize;
    let nrows = get("nrows")? as usize;
    let cell = get("cellsize")?;
    let half = 0.5 * cell;
    let x0 = header.get("xllcenter").copied().or(header.get("xllcorner").map(|v| v + half));
    let y0 = header.get("yllcenter").copied().or(header.get("yllcorner").map(|v| v + half));
    let (x0, y0) = match (x0, y0) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Parse("missing lower-left origin".into())),
    };
    let nodata = header.get("nodata_value").copied();
    let values: Vec<f64> = tokens
        .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("bad height '{t}'"))))
        .collect::<Result<_>>()?;
    if values.len() != ncols * nrows {
        return Err(Error::Parse(format!("expected {} heights, found {}", ncols * nrows, values.len())));
    }
    if let Some(nd) = nodata {
        if values.contains(&nd) {
            return Err(Error::Parse("grid contains nodata cells".into()));
        }
    }
    let mut heights = vec![0.0; ncols * nrows];
    for r in 0..nrows {
        let j = nrows - 1 - r;
        heights[j * ncols..(j + 1) * ncols].copy_from_slice(&values[r * ncols..(r + 1) * ncols]);
    }
    Terrain::new(x0, y0, cell, cell, ncols, nrows, heights)
}

/// Writes the terrain as an ESRI ASCII grid. Requires square cells.
pub fn write_ascii_grid(terrain: &Terrain) -> Result<String> {
    if (terrain.dx - terrain.dy).abs() > 1e-12 * terrain.dx {
        return Err(Error::InvalidConfig("ASCII grids need square cells".into()));
    }
    let mut out = String::new();
    let _ = writeln!(out, "ncols {}", terrain.nx);
    let _ = writeln!(out, "nrows {}", terrain.ny);
    let _ = writeln!(out, "xllcenter {}", terrain.x0);
    let _ = writeln!(out, "yllcenter {}", terrain.y0);
    let _ = writeln!(out, "cellsize {}", terrain.dx);
    let _ = writeln!(out, "nodata_value -9999");
    for j in (0..terrain.ny).rev() {
        let row: Vec<String> = (0..terrain.nx).map(|i| terrain.node(i, j).to_string()).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    Ok(out)
}
