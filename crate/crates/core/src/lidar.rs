//! 2D LiDAR returns to global hit points with first-order covariance, and
//! their condensation to a scalar height variance.
//!
//! The scan plane is the sensor's x-z plane. A beam at angle `alpha` points
//! along `(sin alpha, 0, -cos alpha)` in the sensor frame, so `alpha = 0` is
//! nadir when the sensor is mounted level.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use nalgebra::{DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{numeric_jacobian, Mount, Pose, PoseCovariance, JACOBIAN_STEP};
use crate::terrain::{raycast, Terrain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarModel {
    /// Sensor frame pose in body coordinates.
    pub mount: Mount,
    /// Angle between consecutive beams (rad).
    pub angular_resolution: f64,
    /// Samples per second; informational, sweeps are taken at a frozen pose.
    pub scan_rate: f64,
    pub d_min: f64,
    pub d_max: f64,
    /// Beam angle variance (rad^2).
    pub angle_variance: f64,
    /// Range variance (m^2).
    pub range_variance: f64,
    /// Revolutions recorded per waypoint.
    pub revolutions: usize,
}

impl Default for LidarModel {
    fn default() -> Self {
        LidarModel {
            mount: Mount::identity(),
            angular_resolution: 0.5f64.to_radians(),
            scan_rate: 10_000.0,
            d_min: 0.2,
            d_max: 20.0,
            angle_variance: 0.1f64.to_radians().powi(2),
            range_variance: 0.02 * 0.02,
            revolutions: 1,
        }
    }
}

impl LidarModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::InvalidConfig("lidar range needs 0 < d_min < d_max".into()));
        }
        if !(self.angle_variance >= 0.0 && self.range_variance >= 0.0) {
            return Err(Error::InvalidConfig("lidar variances must be >= 0".into()));
        }
        if !(self.angular_resolution > 0.0) {
            return Err(Error::InvalidConfig("lidar angular resolution must be > 0".into()));
        }
        Ok(())
    }

    /// Beam angles of one revolution.
    pub fn angles(&self) -> Vec<f64> {
        let n = (TAU / self.angular_resolution).round().max(1.0) as usize;
        (0..n).map(|k| k as f64 * TAU / n as f64).collect()
    }

    pub fn in_range(&self, d: f64) -> bool {
        d >= self.d_min && d <= self.d_max
    }
}

/// Global-frame hit point with its covariance and condensed height variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceMeasurement {
    pub alpha: f64,
    pub range: f64,
    pub point: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub height_variance: f64,
}

pub fn beam_direction_sensor(alpha: f64) -> Vector3<f64> {
    Vector3::new(alpha.sin(), 0.0, -alpha.cos())
}

/// Sensor origin and unit beam direction in the global frame.
pub fn beam_in_world(pose: &Pose, lidar: &LidarModel, alpha: f64) -> (Vector3<f64>, Vector3<f64>) {
    let rb = pose.rotation();
    let rm = lidar.mount.rotation();
    let t = Vector3::from(lidar.mount.translation);
    (pose.position + rb * t, rb * (rm * beam_direction_sensor(alpha)))
}

fn hit_point_raw(params: &[f64], lidar: &LidarModel, alpha: f64, d: f64) -> Vector3<f64> {
    let (origin, dir) = beam_in_world(&Pose::from_raw(params), lidar, alpha);
    origin + dir * d
}

/// Places a range return in global coordinates.
pub fn hit_point(pose: &Pose, lidar: &LidarModel, alpha: f64, d_l: f64) -> Result<Vector3<f64>> {
    if !lidar.in_range(d_l) {
        return Err(Error::OutOfRange { range: d_l, min: lidar.d_min, max: lidar.d_max });
    }
    let (origin, dir) = beam_in_world(pose, lidar, alpha);
    Ok(origin + dir * d_l)
}

/// First-order covariance of the hit point: pose, beam-angle and range
/// terms. The range term is propagated along the global beam direction.
pub fn measurement_covariance(
    pose: &Pose,
    cov: &PoseCovariance,
    lidar: &LidarModel,
    alpha: f64,
    d_l: f64,
) -> Result<Matrix3<f64>> {
    if !lidar.in_range(d_l) {
        return Err(Error::OutOfRange { range: d_l, min: lidar.d_min, max: lidar.d_max });
    }
    let params = pose.to_vector();
    let at = DVector::from_column_slice(params.as_slice());
    let j_pose = numeric_jacobian(
        |v| DVector::from_column_slice(hit_point_raw(v.as_slice(), lidar, alpha, d_l).as_slice()),
        &at,
        JACOBIAN_STEP,
    )?;
    let j_alpha = numeric_jacobian(
        |a| DVector::from_column_slice(hit_point_raw(params.as_slice(), lidar, a[0], d_l).as_slice()),
        &DVector::from_element(1, alpha),
        JACOBIAN_STEP,
    )?;
    let (_, dir) = beam_in_world(pose, lidar, alpha);

    let sigma_pose = &j_pose * cov.matrix() * j_pose.transpose();
    let ja = Vector3::new(j_alpha[(0, 0)], j_alpha[(1, 0)], j_alpha[(2, 0)]);
    let mut out = Matrix3::from_fn(|r, c| sigma_pose[(r, c)]);
    out += ja * ja.transpose() * lidar.angle_variance;
    out += dir * dir.transpose() * lidar.range_variance;
    Ok((out + out.transpose()) * 0.5)
}

/// `[s, s, 1] * cov * [s, s, 1]^T` with `s` the terrain slope standard deviation.
pub fn condense_to_height(cov: &Matrix3<f64>, sigma_t: f64) -> f64 {
    let v = Vector3::new(sigma_t, sigma_t, 1.0);
    (v.transpose() * cov * v)[(0, 0)]
}

/// Builds a measurement from a registered return.
pub fn measure(
    estimate: &Pose,
    cov: &PoseCovariance,
    lidar: &LidarModel,
    alpha: f64,
    d_l: f64,
    sigma_t: f64,
) -> Result<SurfaceMeasurement> {
    let point = hit_point(estimate, lidar, alpha, d_l)?;
    let covariance = measurement_covariance(estimate, cov, lidar, alpha, d_l)?;
    Ok(SurfaceMeasurement {
        alpha,
        range: d_l,
        point,
        covariance,
        height_variance: condense_to_height(&covariance, sigma_t),
    })
}

/// One sweep per configured revolution at a frozen pose. Beams are cast
/// from the true pose at the true (noisy) angle; the reported angle and noisy
/// range are registered with the estimated pose and its covariance.
pub fn scan_sweep(
    truth: &Pose,
    estimate: &Pose,
    cov: &PoseCovariance,
    lidar: &LidarModel,
    terrain: &Terrain,
    sigma_t: f64,
    seed: u64,
) -> Vec<SurfaceMeasurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle_noise = Normal::new(0.0, lidar.angle_variance.sqrt()).expect("finite variance");
    let range_noise = Normal::new(0.0, lidar.range_variance.sqrt()).expect("finite variance");
    let angles = lidar.angles();
    let beams: Vec<(f64, f64, f64)> = (0..lidar.revolutions)
        .flat_map(|_| angles.iter().copied())
        .map(|a| (a, angle_noise.sample(&mut rng), range_noise.sample(&mut rng)))
        .collect();
    beams
        .par_iter()
        .filter_map(|&(alpha, da, dd)| {
            let (origin, dir) = beam_in_world(truth, lidar, alpha + da);
            let d_true = raycast(terrain, &origin, &dir, lidar.d_max)?;
            if d_true < lidar.d_min {
                return None;
            }
            let d_meas = d_true + dd;
            measure(estimate, cov, lidar, alpha, d_meas, sigma_t).ok()
        })
        .collect()
}

/// Measurement log: angle, range, hit point, upper triangle of the
/// covariance (row-major) and the condensed height variance.
pub fn measurements_to_csv(ms: &[SurfaceMeasurement]) -> String {
    let mut out = String::from("alpha,d_l,x,y,z,s_xx,s_xy,s_xz,s_yy,s_yz,s_zz,s_z\n");
    for m in ms {
        let c = &m.covariance;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            m.alpha, m.range, m.point.x, m.point.y, m.point.z,
            c[(0, 0)], c[(0, 1)], c[(0, 2)], c[(1, 1)], c[(1, 2)], c[(2, 2)],
            m.height_variance
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::Domain;
    use nalgebra::{Matrix4, Vector4};
    use proptest::prelude::*;

    fn quiet() -> LidarModel {
        LidarModel { angle_variance: 0.0, range_variance: 0.0, ..LidarModel::default() }
    }

    #[test]
    fn nadir_beam() {
        let p = hit_point(&Pose::identity(), &LidarModel::default(), 0.0, 5.0).unwrap();
        assert!((p - Vector3::new(0.0, 0.0, -5.0)).norm() < 1e-12);
    }

    #[test]
    fn out_of_range_rejected() {
        let l = LidarModel::default();
        assert!(matches!(hit_point(&Pose::identity(), &l, 0.0, 50.0), Err(Error::OutOfRange { .. })));
        assert!(matches!(hit_point(&Pose::identity(), &l, 0.0, 0.01), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn translation_equivariance() {
        let l = LidarModel::default();
        let pose = Pose::new(Vector3::new(1.0, 2.0, 7.0), 0.1, -0.05, 1.2);
        let t = Vector3::new(-4.0, 3.0, 0.5);
        let a = hit_point(&pose, &l, 0.4, 6.0).unwrap();
        let b = hit_point(&pose.translated(&t), &l, 0.4, 6.0).unwrap();
        assert!((b - a - t).norm() < 1e-12);
    }

    fn homogeneous(rpy: [f64; 3], t: [f64; 3]) -> Matrix4<f64> {
        let (sr, cr) = rpy[0].sin_cos();
        let (sp, cp) = rpy[1].sin_cos();
        let (sy, cy) = rpy[2].sin_cos();
        let rx = Matrix4::new(1.0, 0.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, 0.0, sr, cr, 0.0, 0.0, 0.0, 0.0, 1.0);
        let ry = Matrix4::new(cp, 0.0, sp, 0.0, 0.0, 1.0, 0.0, 0.0, -sp, 0.0, cp, 0.0, 0.0, 0.0, 0.0, 1.0);
        let rz = Matrix4::new(cy, -sy, 0.0, 0.0, sy, cy, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let mut tr = Matrix4::identity();
        tr[(0, 3)] = t[0];
        tr[(1, 3)] = t[1];
        tr[(2, 3)] = t[2];
        tr * rz * ry * rx
    }

    #[test]
    fn generic_pose_against_homogeneous_chain() {
        let lidar = LidarModel {
            mount: Mount { translation: [0.1, -0.05, -0.2], rpy: [0.05, 0.3, -0.4] },
            ..LidarModel::default()
        };
        let pose = Pose::new(Vector3::new(3.0, -2.0, 8.0), 0.12, -0.07, 2.1);
        let (alpha, d) = (0.7, 6.5);
        let body = homogeneous([pose.roll, pose.pitch, pose.yaw], pose.position.into());
        let mount = homogeneous(lidar.mount.rpy, lidar.mount.translation);
        let beam = homogeneous([0.0, -alpha, 0.0], [0.0; 3]);
        let p = body * mount * beam * Vector4::new(0.0, 0.0, -d, 1.0);
        let got = hit_point(&pose, &lidar, alpha, d).unwrap();
        assert!((got - p.xyz()).norm() < 1e-12, "{got} vs {}", p.xyz());
    }

    #[test]
    fn covariance_single_range_term() {
        let s = 0.03;
        let lidar = LidarModel { angle_variance: 0.0, range_variance: s * s, ..LidarModel::default() };
        let c = measurement_covariance(&Pose::level(0.0, 0.0, 7.0, 0.3), &PoseCovariance::zeros(), &lidar, 0.0, 5.0).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, s * s));
        assert!((c - expected).abs().max() < 1e-15);
    }

    #[test]
    fn covariance_null_propagation() {
        let c = measurement_covariance(&Pose::level(0.0, 0.0, 7.0, 0.0), &PoseCovariance::zeros(), &quiet(), 0.3, 5.0).unwrap();
        assert_eq!(c, Matrix3::zeros());
    }

    #[test]
    fn condensation_examples() {
        let d = Matrix3::from_diagonal(&Vector3::new(0.2, 0.3, 0.4));
        assert_eq!(condense_to_height(&d, 0.0), 0.4);
        assert!((condense_to_height(&Matrix3::identity(), 1.0) - 3.0).abs() < 1e-15);
        let e = Matrix3::from_diagonal(&Vector3::new(0.04, 0.04, 0.01));
        assert!((condense_to_height(&e, 0.5) - 0.03).abs() < 1e-15);
    }

    fn flat(height: f64) -> Terrain {
        Terrain::flat(&Domain::new(-30.0, 30.0, -30.0, 30.0), 0.0, 0.5, height).unwrap()
    }

    #[test]
    fn flat_sweep_hits_ground() {
        let pose = Pose::level(0.0, 0.0, 7.0, 0.0);
        let ms = scan_sweep(&pose, &pose, &PoseCovariance::zeros(), &quiet(), &flat(0.0), 0.2, 1);
        assert!(!ms.is_empty());
        assert!(ms.iter().all(|m| m.point.z.abs() < 1e-6));
        // Only downward beams return.
        assert!(ms.iter().all(|m| m.alpha.cos() > 0.0));
    }

    #[test]
    fn sweep_beyond_range_is_empty() {
        let pose = Pose::level(0.0, 0.0, 7.0, 0.0);
        let lidar = LidarModel { d_max: 5.0, ..quiet() };
        assert!(scan_sweep(&pose, &pose, &PoseCovariance::zeros(), &lidar, &flat(0.0), 0.2, 1).is_empty());
    }

    #[test]
    fn step_casts_a_shadow() {
        // A 3 m step at x = 2: the ground just behind it is hidden from a
        // sensor hovering at x = 0.
        let d = Domain::new(-30.0, 30.0, -5.0, 5.0);
        let step = Terrain::from_fn(&d, 0.0, 0.05, |x, _| if (2.0..4.0).contains(&x) { 3.0 } else { 0.0 }).unwrap();
        let pose = Pose::level(0.0, 0.0, 7.0, 0.0);
        let ms = scan_sweep(&pose, &pose, &PoseCovariance::zeros(), &quiet(), &step, 0.0, 1);
        let behind: Vec<f64> = ms.iter().filter(|m| m.point.x > 4.0 && m.point.z < 0.5).map(|m| m.point.x).collect();
        let first_visible = behind.iter().cloned().fold(f64::INFINITY, f64::min);
        // Ray-cast oracle: the line from (0,7) over the step corner (4,3)
        // reaches the ground at x = 7.
        assert!((first_visible - 7.0).abs() < 0.1, "{first_visible}");
        assert!(!ms.iter().any(|m| m.point.x > 4.05 && m.point.x < 6.9));
    }

    #[test]
    fn sweep_is_deterministic() {
        let l = LidarModel::default();
        let t = flat(1.0);
        let pose = Pose::level(0.0, 0.0, 7.0, 0.4);
        let cov = PoseCovariance::from_diagonal(&[1e-3, 1e-3, 1e-3, 1e-5, 1e-5, 1e-5]);
        assert_eq!(scan_sweep(&pose, &pose, &cov, &l, &t, 0.2, 9), scan_sweep(&pose, &pose, &cov, &l, &t, 0.2, 9));
    }

    #[test]
    fn log_has_header_and_rows() {
        let pose = Pose::level(0.0, 0.0, 7.0, 0.0);
        let ms = scan_sweep(&pose, &pose, &PoseCovariance::zeros(), &quiet(), &flat(0.0), 0.2, 1);
        let csv = measurements_to_csv(&ms);
        assert_eq!(csv.lines().count(), ms.len() + 1);
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 12);
    }

    fn random_cov(d: [f64; 6], off: f64) -> PoseCovariance {
        let mut m = nalgebra::Matrix6::from_diagonal(&nalgebra::Vector6::from_row_slice(&d));
        m[(0, 5)] = off * (d[0] * d[5]).sqrt();
        m[(5, 0)] = m[(0, 5)];
        PoseCovariance(m)
    }

    proptest! {
        #[test]
        fn covariance_symmetric_psd_and_scaling(
            x in -5.0..5.0f64, yaw in 0.0..6.2f64, alpha in -1.2..1.2f64, d in 1.0..15.0f64,
            dpos in 1e-4..1e-2f64, dang in 1e-6..1e-3f64, off in -0.9..0.9f64,
            lambda in 0.1..10.0f64,
        ) {
            let lidar = LidarModel::default();
            let pose = Pose::new(Vector3::new(x, 2.0, 7.0), 0.05, -0.02, yaw);
            let cov = random_cov([dpos, dpos, dpos, dang, dang, dang], off);
            let s = measurement_covariance(&pose, &cov, &lidar, alpha, d).unwrap();
            prop_assert!((s - s.transpose()).abs().max() <= 1e-12 * s.abs().max());
            let min_eig = s.symmetric_eigenvalues().min();
            prop_assert!(min_eig >= -1e-9 * s.trace());

            let scaled_lidar = LidarModel {
                angle_variance: lidar.angle_variance * lambda,
                range_variance: lidar.range_variance * lambda,
                ..lidar
            };
            let s2 = measurement_covariance(&pose, &cov.scaled(lambda), &scaled_lidar, alpha, d).unwrap();
            prop_assert!((s2 - s * lambda).abs().max() <= 1e-12 * s2.abs().max());

            // Inflating any single input variance never shrinks a diagonal entry.
            let mut bigger = cov;
            let k = (d as usize) % 6;
            bigger.0[(k, k)] *= 2.0;
            let s3 = measurement_covariance(&pose, &bigger, &lidar, alpha, d).unwrap();
            for i in 0..3 {
                prop_assert!(s3[(i, i)] >= s[(i, i)] * (1.0 - 1e-12));
            }
            let noisier = LidarModel { range_variance: lidar.range_variance * 3.0, ..lidar };
            let s4 = measurement_covariance(&pose, &cov, &noisier, alpha, d).unwrap();
            for i in 0..3 {
                prop_assert!(s4[(i, i)] >= s[(i, i)] * (1.0 - 1e-12));
            }
        }

        #[test]
        fn condensation_lower_bound(
            a in 0.0..1.0f64, b in 0.0..1.0f64, c in 0.0..1.0f64,
            r1 in -0.9..0.9f64, r2 in -0.9..0.9f64, st in 0.0..2.0f64,
        ) {
            let mut m = Matrix3::from_diagonal(&Vector3::new(a, b, c));
            m[(0, 2)] = r1 * (a * c).sqrt();
            m[(2, 0)] = m[(0, 2)];
            m[(1, 2)] = r2 * (b * c).sqrt() * (1.0 - r1.abs());
            m[(2, 1)] = m[(1, 2)];
            let h = condense_to_height(&m, st);
            prop_assert!(h >= m[(2, 2)] - 2.0 * st * (m[(0, 2)].abs() + m[(1, 2)].abs()) - 1e-12);
            prop_assert_eq!(condense_to_height(&m, 0.0), m[(2, 2)]);
        }
    }
}
