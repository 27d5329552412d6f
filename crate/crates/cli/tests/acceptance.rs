//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use pilevol::campaign::{run_campaign, CampaignConfig, Mode, Scenario, MANIFEST, TIMESERIES};
use pilevol::frames::{wrap_pi, Mount, Pose, PoseCovariance};
use pilevol::kernel::{matern, matern_full, KernelConfig};
use pilevol::lidar::{hit_point, measurement_covariance, LidarModel, SurfaceMeasurement};
use pilevol::localization::{estimate_pose, predicted_covariance, simulate_detections};
use pilevol::surface::{gp_predict, HeightGrid, JITTER, VARIANCE_FLOOR};
use pilevol::terrain::{true_volume, Domain, TerrainSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Verdict = (bool, String);

fn c1_localization_covariance() -> Verdict {
    const SAMPLES: usize = 10_000;
    const TRACE_TOL: f64 = 0.15;
    const DIAG_TOL: f64 = 0.20;
    let start = Instant::now();
    let cfg = CampaignConfig::default();
    let map = cfg.features.build().unwrap();
    let camera = cfg.camera;
    let truth = Pose::level(10.0, 10.0, 7.0, 0.1);
    let predicted = predicted_covariance(&truth, &map, &camera, 4).unwrap();
    let t = truth.to_vector();
    let mut errors = Vec::with_capacity(SAMPLES);
    for i in 0..SAMPLES {
        let det = simulate_detections(&truth, &map, &camera, 1_000 + i as u64);
        let Ok(est) = estimate_pose(&det, &map, &camera, &truth, 4) else { continue };
        let v = est.pose.to_vector();
        let mut e = v - t;
        for a in 3..6 {
            e[a] = wrap_pi(e[a]);
        }
        errors.push(e);
    }
    let n = errors.len() as f64;
    let mean: Vector6<f64> = errors.iter().sum::<Vector6<f64>>() / n;
    let mut sample = Matrix6::zeros();
    for e in &errors {
        let d = e - mean;
        sample += d * d.transpose();
    }
    sample /= n - 1.0;
    let p = predicted.matrix();
    let trace_err = (sample.trace() - p.trace()).abs() / p.trace();
    let diag_err = (0..6).map(|i| (sample[(i, i)] - p[(i, i)]).abs() / p[(i, i)]).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let ok = errors.len() == SAMPLES && trace_err <= TRACE_TOL && diag_err <= DIAG_TOL && secs < 60.0;
    (
        ok,
        format!(
            "{} fixes, trace rel err {:.3} (tol {TRACE_TOL}), worst diagonal rel err {:.3} (tol {DIAG_TOL}), {secs:.1} s",
            errors.len(),
            trace_err,
            diag_err
        ),
    )
}

fn c2_measurement_covariance() -> Verdict {
    const SAMPLES: usize = 100_000;
    const TOL: f64 = 0.10;
    let tilted = Mount { translation: [0.1, 0.0, -0.05], rpy: [0.1, 0.2, 0.0] };
    let configs = [
        (Pose::new(Vector3::new(3.0, 4.0, 7.0), 0.05, -0.03, 0.7), Mount::identity(), 0.3, 6.0),
        (Pose::new(Vector3::new(-2.0, 1.0, 5.0), -0.1, 0.08, 2.4), tilted, -0.7, 9.0),
        (Pose::new(Vector3::new(10.0, 10.0, 8.0), 0.02, 0.15, -1.2), tilted, 1.1, 14.0),
    ];
    // A generic, fully coupled small pose covariance.
    let a = DMatrix::from_fn(6, 6, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
    let spd = &a * a.transpose() + DMatrix::identity(6, 6) * 2.0;
    let scale: [f64; 6] = [1e-4, 1e-4, 1e-4, 1e-6, 1e-6, 1e-6];
    let cov = Matrix6::from_fn(|r, c| spd[(r, c)] * (scale[r] * scale[c]).sqrt() * 0.1);
    let chol = cov.cholesky().unwrap().l();
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (pose, mount, alpha, d) in configs {
        let lidar = LidarModel { mount, ..LidarModel::default() };
        let predicted = measurement_covariance(&pose, &PoseCovariance(cov), &lidar, alpha, d).unwrap();
        let base = pose.to_vector();
        let mut points = Vec::with_capacity(SAMPLES);
        for _ in 0..SAMPLES {
            let z = Vector6::from_fn(|_, _| StandardNormal.sample(&mut rng));
            let v = base + chol * z;
            let p = Pose::new(Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5]);
            let da: f64 = StandardNormal.sample(&mut rng);
            let dd: f64 = StandardNormal.sample(&mut rng);
            let a_s = alpha + da * lidar.angle_variance.sqrt();
            let d_s = d + dd * lidar.range_variance.sqrt();
            points.push(hit_point(&p, &lidar, a_s, d_s).unwrap());
        }
        let n = SAMPLES as f64;
        let mean: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
        let mut sample = Matrix3::zeros();
        for q in &points {
            let dq = q - mean;
            sample += dq * dq.transpose();
        }
        sample /= n - 1.0;
        worst = worst.max((sample - predicted).norm() / predicted.norm());
    }
    (worst <= TOL, format!("worst Frobenius rel err {worst:.4} over 3 configurations (tol {TOL})"))
}

fn c3_kernel() -> Verdict {
    const TOL: f64 = 1e-9;
    let half = KernelConfig { nu: 0.5, lengthscale: 2.3, ..KernelConfig::default() };
    let mut worst_half = 0.0f64;
    for k in 0..100 {
        let s = half.support_radius() * k as f64 / 99.0;
        worst_half = worst_half.max((matern(s, &half) - (-s / half.lengthscale).exp()).abs());
    }
    let three = KernelConfig { nu: 1.5, lengthscale: 2.3, ..KernelConfig::default() };
    let mut worst_three = 0.0f64;
    for k in 0..100 {
        let s = three.support_radius() * k as f64 / 99.0;
        let r = 3f64.sqrt() * s / three.lengthscale;
        worst_three = worst_three.max((matern(s, &three) - (1.0 + r) * (-r).exp()).abs());
    }
    (
        worst_half <= TOL && worst_three <= TOL,
        format!("nu=1/2 max err {worst_half:.2e}, nu=3/2 max err {worst_three:.2e} (tol {TOL:e})"),
    )
}

fn dense_gp(grid: &HeightGrid, cfg: &KernelConfig, query: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    let n = grid.len();
    let nodes: Vec<(f64, f64)> = (0..n).map(|k| grid.node_xy(k)).collect();
    let k = |a: (f64, f64), b: (f64, f64)| matern_full((a.0 - b.0).hypot(a.1 - b.1), cfg.lengthscale, cfg.nu);
    let mut kxx = DMatrix::from_fn(n, n, |i, j| k(nodes[i], nodes[j]));
    for i in 0..n {
        kxx[(i, i)] += grid.variance()[i] + JITTER;
    }
    let lu = kxx.lu();
    let alpha = lu.solve(&DVector::from_column_slice(grid.mean())).unwrap();
    query
        .iter()
        .map(|&q| {
            let ks = DVector::from_fn(n, |i, _| k(q, nodes[i]));
            (ks.dot(&alpha), 1.0 - ks.dot(&lu.solve(&ks).unwrap()))
        })
        .unzip()
}

fn c4_sparse_gp() -> Verdict {
    // Node values are drawn at the scale of the belief prior (std sigma_0),
    // the mean tolerance scales with it. Predictive variances do not depend on
    // the data; their tolerance uses the unit kernel amplitude.
    let sigma0 = CampaignConfig::default().grid.prior_variance.sqrt();
    let mean_tol = 1e-3 * sigma0;
    let var_tol = 1e-3;
    let start = Instant::now();
    let cfg = KernelConfig { gamma: 4.0, ..KernelConfig::for_domain_width(20.0) };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut dm, mut dv) = (0.0f64, 0.0f64);
    for _ in 0..3 {
        let mean = (0..100)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigma0 * z
            })
            .collect();
        let var = (0..100).map(|_| rng.random_range(1e-4..sigma0 * sigma0)).collect();
        let grid = HeightGrid::from_values(Domain::new(0.0, 20.0, 0.0, 20.0), 10, 10, mean, var).unwrap();
        let q: Vec<(f64, f64)> = (0..100).map(|_| (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0))).collect();
        let sparse = gp_predict(&grid, &cfg, &q).unwrap();
        let (m, v) = dense_gp(&grid, &cfg, &q);
        for i in 0..q.len() {
            dm = dm.max((sparse.means[i] - m[i]).abs());
            dv = dv.max((sparse.variances[i] - v[i]).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        dm <= mean_tol && dv <= var_tol && secs < 10.0,
        format!(
            "max|dmean| {dm:.2e} (tol {mean_tol:.0e} = 1e-3 sigma_0), max|dvar| {dv:.2e} (tol {var_tol:e}), 3x100 queries, {secs:.2} s"
        ),
    )
}

fn at(x: f64, y: f64, z: f64, var: f64) -> SurfaceMeasurement {
    SurfaceMeasurement { alpha: 0.0, range: 1.0, point: Vector3::new(x, y, z), covariance: Matrix3::zeros(), height_variance: var }
}

fn c5_kalman() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    let cfg = KernelConfig { lengthscale: 2.0, slope_sigma: 0.3, ..KernelConfig::default() };
    let mut grid = HeightGrid::new(Domain::new(0.0, 10.0, 0.0, 10.0), 10, 10, 1.0, 4.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut increases = 0;
    for _ in 0..5_000 {
        let m = at(rng.random_range(-2.0..12.0), rng.random_range(-2.0..12.0), rng.random_range(0.0..5.0), rng.random_range(0.0..0.5));
        let before = grid.variance().to_vec();
        grid.update(&cfg, &m);
        increases += grid.variance().iter().zip(&before).filter(|(a, b)| a > b).count();
    }
    ok &= increases == 0;
    notes.push(format!("{increases} variance increases in 5000 updates"));

    let mut g = HeightGrid::new(Domain::new(0.0, 10.0, 0.0, 10.0), 10, 10, 1.0, 4.0).unwrap();
    let k = g.index(4, 6);
    let (x, y) = g.node_xy(k);
    g.update(&cfg, &at(x, y, 3.25, 0.0));
    let exact = g.mean()[k] == 3.25 && g.variance()[k] == VARIANCE_FLOOR;
    ok &= exact;
    notes.push(format!("exact observation {}", if exact { "ok" } else { "off" }));

    let g0 = HeightGrid::new(Domain::new(0.0, 10.0, 0.0, 10.0), 10, 10, 1.0, 4.0).unwrap();
    let uninformative = g0.updated(&cfg, &at(x, y, 9.0, f64::INFINITY)) == g0;
    ok &= uninformative;
    notes.push(format!("uninformative {}", if uninformative { "ok" } else { "off" }));

    let hand = KernelConfig { lengthscale: 1.0, slope_sigma: 0.1, update_radius: 1.5, ..KernelConfig::default() };
    let mut h = HeightGrid::new(Domain::new(0.0, 4.0, 0.0, 4.0), 4, 4, 0.0, 1.0).unwrap();
    let k = h.index(1, 1);
    let (x, y) = h.node_xy(k);
    h.update(&hand, &at(x + 1.0, y, 1.0, 0.01));
    // Gain read back from the mean (prior mean 0, measurement 1).
    let gain = h.mean()[k];
    let r = 1.0 / gain - 1.0;
    let r_hand = 0.01 + 0.01 * (std::f64::consts::E - 1.0);
    let k_hand = 1.0 / (1.0 + r_hand);
    let example = (r - r_hand).abs() < 1e-6
        && (gain - k_hand).abs() < 1e-6
        && (h.variance()[k] - (1.0 - k_hand)).abs() < 1e-6
        && (r - 0.02718).abs() < 5e-6
        && (gain - 0.97354).abs() < 5e-6;
    ok &= example;
    notes.push(format!("R {r:.6}, K {gain:.6}, var {:.6}", h.variance()[k]));
    (ok, notes.join("; "))
}

fn c6_volume() -> Verdict {
    let unit = Domain::new(0.0, 1.0, 0.0, 1.0);
    let ramp = TerrainSource::Ramp { base: 0.0, slope_x: 1.0, slope_y: 0.0 }.build(&unit, 0.5, 0.05).unwrap();
    let v = true_volume(&ramp, &unit, 8, 8).unwrap();
    let ramp_ok = (v - 0.5).abs() <= 1e-6;

    let c = 2.5;
    let mut cfg = CampaignConfig::default();
    cfg.terrain.source = TerrainSource::Flat { height: c };
    cfg.camera.pixel_sigma = 0.0;
    cfg.lidar.angle_variance = 0.0;
    cfg.lidar.range_variance = 0.0;
    let s = Scenario::build(&cfg).unwrap();
    let r = run_campaign(&s, Mode::SquareWave).unwrap();
    let area = cfg.domain.area();
    let slab_err = (r.final_volume().mean - c * area).abs() / (c * area);
    (
        ramp_ok && slab_err <= 1e-3,
        format!("ramp volume {v:.9} (0.5 +- 1e-6); slab mu_V {:.4} vs {:.1}, rel err {slab_err:.2e} (tol 1e-3)", r.final_volume().mean, c * area),
    )
}

fn pilevol(args: &[&str], cwd: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_pilevol"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PILEVOL_OUT")
        .output()
        .expect("binary runs");
    let text = format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    (o.status.code().unwrap_or(-1), text)
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST)).unwrap()).unwrap()
}

fn sigma_series(dir: &Path) -> Vec<f64> {
    std::fs::read_to_string(dir.join(TIMESERIES))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect()
}

fn c7_end_to_end(work: &Path) -> Verdict {
    const REL_SIGMA_MAX: f64 = 0.05;
    const REL_ERR_MAX: f64 = 0.05;
    const SIGMA_RATIO_BAND: f64 = 0.30;
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;
    for mode in ["greedy", "square_wave"] {
        let (code, out) = pilevol(&["run", "--mode", mode, "--out", mode], work);
        if code != 0 {
            return (false, format!("{mode} run failed: {out}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut finals = Vec::new();
    for mode in ["greedy", "square_wave"] {
        let dir = work.join(mode);
        let m = manifest(&dir);
        let res = &m["results"];
        let steps = res["steps"].as_u64().unwrap();
        let rel_sigma = res["relative_sigma"].as_f64().unwrap();
        let rel_err = res["relative_error"].as_f64().unwrap();
        let series = sigma_series(&dir);
        let monotone = series.windows(2).all(|w| w[1] <= w[0]);
        ok &= steps == 50 && rel_sigma <= REL_SIGMA_MAX && rel_err <= REL_ERR_MAX && monotone;
        finals.push(res["sigma_v"].as_f64().unwrap());
        notes.push(format!(
            "{mode}: {steps} steps, sigma/mu {:.3}%, error {:.2}%, sigma non-increasing {monotone}",
            100.0 * rel_sigma,
            100.0 * rel_err
        ));
    }
    let ratio = finals[0] / finals[1];
    ok &= (ratio - 1.0).abs() <= SIGMA_RATIO_BAND && secs < 300.0;
    notes.push(format!("greedy/square sigma ratio {ratio:.3} (1 +- {SIGMA_RATIO_BAND}), {secs:.1} s"));
    (ok, notes.join("; "))
}

fn c8_feasibility(work: &Path) -> Verdict {
    let (code, out) = pilevol(&["validate", "--run", "greedy", "--run", "square_wave"], work);
    (code == 0, out.trim().replace('\n', "; "))
}

fn c9_determinism(work: &Path) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for mode in ["greedy", "square_wave"] {
        let original = work.join(mode);
        let manifest_path = original.join(MANIFEST);
        for threads in ["1", "3"] {
            let out_dir = format!("{mode}_rerun_t{threads}");
            let (code, out) =
                pilevol(&["--threads", threads, "run", "--config", manifest_path.to_str().unwrap(), "--out", &out_dir], work);
            if code != 0 {
                return (false, format!("rerun failed: {out}"));
            }
            let mut names: Vec<_> = std::fs::read_dir(&original).unwrap().map(|e| e.unwrap().file_name()).collect();
            names.sort();
            let same = names
                .iter()
                .all(|n| std::fs::read(original.join(n)).ok() == std::fs::read(work.join(&out_dir).join(n)).ok());
            let count = std::fs::read_dir(work.join(&out_dir)).unwrap().count();
            ok &= same && count == names.len();
            notes.push(format!("{mode} threads={threads}: {} files {}", names.len(), if same { "identical" } else { "DIFFER" }));
        }
    }
    (ok, notes.join("; "))
}

fn main() {
    // `cargo test -- --list` and filters: nothing to enumerate.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let work = tempfile::tempdir().unwrap();
    let results: Vec<(&str, Verdict)> = vec![
        ("1 localization covariance law", c1_localization_covariance()),
        ("2 measurement covariance law", c2_measurement_covariance()),
        ("3 kernel correctness", c3_kernel()),
        ("4 sparse GP vs dense oracle", c4_sparse_gp()),
        ("5 Kalman properties", c5_kalman()),
        ("6 volume quadrature", c6_volume()),
        ("7 end-to-end campaign", c7_end_to_end(work.path())),
        ("8 feasibility enforcement", c8_feasibility(work.path())),
        ("9 determinism", c9_determinism(work.path())),
    ];
    let mut failed = 0;
    for (name, (ok, detail)) in &results {
        println!("criterion {name}: {} ({detail})", if *ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
