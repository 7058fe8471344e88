//! Extended Kalman filter over the six-dimensional UAV state.
//!
//! The state is position and velocity; the dynamics are the constant-velocity
//! model from [`crate::kinematics`]; the measurement is the echo observable
//! vector (range, azimuth, zenith, radial velocity) from [`crate::sensing`].
//! The measurement function here *is* [`geometry_observables`] — predicted
//! echoes and synthesized echoes can never drift apart.
//!
//! Numerical care: the update uses the Joseph form so the covariance stays
//! symmetric positive definite under roundoff, azimuth innovations are
//! wrapped so a target crossing the ±π seam does not produce a 2π residual,
//! the analytic Jacobian hands over to central differences near the zenith
//! (where azimuth is ill-conditioned), and an update is refused outright when
//! the innovation covariance is numerically singular.

use nalgebra::{Matrix4, Matrix6, SMatrix, Vector4, Vector6};

use crate::error::{Error, Result};
use crate::kinematics::{MotionModel, UavState};
use crate::sensing::{geometry_observables, wrap_angle, SensingNoise};
use crate::Vec3;

/// 4×6 measurement Jacobian.
pub type Jacobian = SMatrix<f64, 4, 6>;

/// Innovation covariances with condition number above this are too close to
/// singular to invert meaningfully; the update is skipped and the filter
/// coasts on its prediction.
pub const MAX_CONDITION: f64 = 1e12;

/// Per-axis variance floor for the measurement noise, so that noiseless
/// configurations still yield an invertible innovation covariance.
pub const VARIANCE_FLOOR: f64 = 1e-18;

/// Initial position variance (m²) per axis when seeding from one echo.
pub const INIT_POS_VAR: f64 = 100.0;
/// Initial velocity variance (m²/s²) per axis when seeding from one echo.
pub const INIT_VEL_VAR: f64 = 25.0;

/// Gaussian state estimate: mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanBelief {
    pub x: Vector6<f64>,
    pub p: Matrix6<f64>,
}

impl KalmanBelief {
    pub fn new(x: Vector6<f64>, p: Matrix6<f64>) -> Self {
        KalmanBelief { x, p }
    }

    /// Seed a belief from a single echo: back-project the measured range and
    /// angles to a position, assume zero velocity, and start with a broad
    /// diagonal covariance.
    pub fn from_first_measurement(bs: &Vec3, d: f64, phi: f64, theta: f64) -> Self {
        let delta = Vec3::new(
            d * theta.sin() * phi.cos(),
            d * theta.sin() * phi.sin(),
            d * theta.cos(),
        );
        let q = bs + delta;
        let mut x = Vector6::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&q);
        let mut p = Matrix6::zeros();
        for i in 0..3 {
            p[(i, i)] = INIT_POS_VAR;
            p[(i + 3, i + 3)] = INIT_VEL_VAR;
        }
        KalmanBelief { x, p }
    }

    pub fn state(&self) -> UavState {
        UavState::from_vector(&self.x)
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.x[0], self.x[1], self.x[2])
    }
}

/// Time update: push mean and covariance through the constant-velocity model.
pub fn predict(belief: &KalmanBelief, model: &MotionModel) -> KalmanBelief {
    let g = model.evolution_matrix();
    KalmanBelief {
        x: g * belief.x,
        p: g * belief.p * g.transpose() + model.process_noise(),
    }
}

/// Expected observation (d, φ, θ, v_r) for a state vector — the same function
/// that generates echoes, evaluated at the estimate.
pub fn predicted_observation(bs: &Vec3, x: &Vector6<f64>) -> Result<Vector4<f64>> {
    let obs = geometry_observables(bs, &UavState::from_vector(x))?;
    Ok(obs.to_vector())
}

/// Analytic measurement Jacobian. Errors with [`Error::SingularGeometry`]
/// when range or ground-plane distance is too small for the closed form
/// (azimuth and zenith derivatives blow up near the zenith).
pub fn analytic_jacobian(bs: &Vec3, x: &Vector6<f64>) -> Result<Jacobian> {
    let delta = Vec3::new(x[0] - bs.x, x[1] - bs.y, x[2] - bs.z);
    let v = Vec3::new(x[3], x[4], x[5]);
    let d = delta.norm();
    let rho2 = delta.x * delta.x + delta.y * delta.y;
    let rho = rho2.sqrt();
    if d < 1e-6 {
        return Err(Error::SingularGeometry("range too small for measurement Jacobian".into()));
    }
    if rho < 1e-6 {
        return Err(Error::SingularGeometry(
            "target at zenith: azimuth derivatives undefined".into(),
        ));
    }
    let d2 = d * d;
    let d3 = d2 * d;
    let radial = delta.dot(&v);
    let mut h = Jacobian::zeros();
    for i in 0..3 {
        // Range row.
        h[(0, i)] = delta[i] / d;
        // Radial-velocity row: position and velocity blocks.
        h[(3, i)] = v[i] / d - radial * delta[i] / d3;
        h[(3, i + 3)] = delta[i] / d;
    }
    // Azimuth row (independent of z and of velocity).
    h[(1, 0)] = -delta.y / rho2;
    h[(1, 1)] = delta.x / rho2;
    // Zenith row.
    h[(2, 0)] = delta.z * delta.x / (rho * d2);
    h[(2, 1)] = delta.z * delta.y / (rho * d2);
    h[(2, 2)] = -rho / d2;
    Ok(h)
}

/// Central-difference Jacobian of the measurement function, used when the
/// analytic form is singular. The azimuth row differences are wrapped so the
/// ±π seam does not corrupt the derivative.
pub fn numeric_jacobian(bs: &Vec3, x: &Vector6<f64>) -> Result<Jacobian> {
    let step = 1e-4 * x.norm().max(1.0);
    let mut h = Jacobian::zeros();
    for j in 0..6 {
        let mut hi = *x;
        let mut lo = *x;
        hi[j] += step;
        lo[j] -= step;
        let zhi = predicted_observation(bs, &hi)?;
        let zlo = predicted_observation(bs, &lo)?;
        for i in 0..4 {
            let diff = if i == 1 { wrap_angle(zhi[i] - zlo[i]) } else { zhi[i] - zlo[i] };
            h[(i, j)] = diff / (2.0 * step);
        }
    }
    Ok(h)
}

/// Diagonal measurement-noise covariance for one echo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementNoise {
    /// Variances (d, φ, θ, v_r), each floored at [`VARIANCE_FLOOR`].
    pub variances: Vector4<f64>,
}

impl MeasurementNoise {
    pub fn from_stds(sigma_d: f64, sigma_phi: f64, sigma_theta: f64, sigma_v: f64) -> Result<Self> {
        let stds = [sigma_d, sigma_phi, sigma_theta, sigma_v];
        if stds.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidInput(format!("noise stds must be non-negative, got {stds:?}")));
        }
        let variances =
            Vector4::from_iterator(stds.iter().map(|s| (s * s).max(VARIANCE_FLOOR)));
        Ok(MeasurementNoise { variances })
    }

    /// Noise covariance implied by an echo's SNR: the base stds divided by
    /// √SNR, matching how measurement errors are actually generated.
    pub fn from_echo_snr(noise: &SensingNoise, echo_snr: f64) -> Result<Self> {
        if !(echo_snr > 0.0) || !echo_snr.is_finite() {
            return Err(Error::InvalidInput(format!("echo SNR must be positive, got {echo_snr}")));
        }
        let s = echo_snr.sqrt();
        Self::from_stds(noise.sigma_d0 / s, noise.sigma_a0 / s, noise.sigma_a0 / s, noise.sigma_v0 / s)
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&self.variances)
    }
}

/// Innovation and its statistics for one (belief, echo) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationStats {
    /// z − h(x̂) with the azimuth component wrapped to (−π, π].
    pub innovation: Vector4<f64>,
    /// S = H P Hᵀ + R.
    pub innovation_cov: Matrix4<f64>,
    /// Normalized innovation squared νᵀ S⁻¹ ν.
    pub nis: f64,
    /// Jacobian actually used (numeric fallback near the zenith).
    pub jacobian: Jacobian,
    pub used_numeric_jacobian: bool,
    /// Condition number of S (ratio of extreme eigenvalue magnitudes).
    pub condition: f64,
}

fn jacobian_with_fallback(bs: &Vec3, x: &Vector6<f64>) -> Result<(Jacobian, bool)> {
    match analytic_jacobian(bs, x) {
        Ok(h) => Ok((h, false)),
        Err(Error::SingularGeometry(_)) => Ok((numeric_jacobian(bs, x)?, true)),
        Err(e) => Err(e),
    }
}

fn condition_number(s: &Matrix4<f64>) -> f64 {
    let eig = s.symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, &l| a.min(l.abs()));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Compute the innovation, its covariance and NIS for an observation vector
/// against a (typically predicted) belief, without changing the belief.
///
/// This is the quantity the link identifier scores: under a clear sight line
/// the NIS is χ²(4)-distributed; an echo off a blocker lands far outside.
pub fn innovation_stats(
    belief: &KalmanBelief,
    bs: &Vec3,
    z: &Vector4<f64>,
    noise: &MeasurementNoise,
) -> Result<InnovationStats> {
    let predicted = predicted_observation(bs, &belief.x)?;
    let (h, used_numeric) = jacobian_with_fallback(bs, &belief.x)?;
    let mut innovation = z - predicted;
    innovation[1] = wrap_angle(innovation[1]);
    let s = h * belief.p * h.transpose() + noise.matrix();
    let condition = condition_number(&s);
    let nis = if condition.is_finite() && condition <= MAX_CONDITION {
        let chol = nalgebra::Cholesky::new(s).ok_or_else(|| {
            Error::SingularGeometry("innovation covariance not positive definite".into())
        })?;
        innovation.dot(&chol.solve(&innovation))
    } else {
        f64::INFINITY
    };
    Ok(InnovationStats {
        innovation,
        innovation_cov: s,
        nis,
        jacobian: h,
        used_numeric_jacobian: used_numeric,
        condition,
    })
}

/// What the posterior carries after a measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateInfo {
    pub belief: KalmanBelief,
    pub nis: f64,
    pub innovation: Vector4<f64>,
    pub innovation_cov: Matrix4<f64>,
    pub used_numeric_jacobian: bool,
}

/// Outcome of attempting a measurement update.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdateOutcome {
    Applied(UpdateInfo),
    /// Innovation covariance numerically singular; belief left at the prior.
    Skipped { condition: f64 },
}

/// Measurement update in Joseph form. Returns [`UpdateOutcome::Skipped`]
/// instead of inverting a numerically singular innovation covariance.
pub fn update(
    belief: &KalmanBelief,
    bs: &Vec3,
    z: &Vector4<f64>,
    noise: &MeasurementNoise,
) -> Result<UpdateOutcome> {
    let stats = innovation_stats(belief, bs, z, noise)?;
    if !stats.condition.is_finite() || stats.condition > MAX_CONDITION {
        return Ok(UpdateOutcome::Skipped { condition: stats.condition });
    }
    let chol = nalgebra::Cholesky::new(stats.innovation_cov).ok_or_else(|| {
        Error::SingularGeometry("innovation covariance not positive definite".into())
    })?;
    // K = P Hᵀ S⁻¹, via S Kᵀ = H Pᵀ.
    let k = chol.solve(&(stats.jacobian * belief.p.transpose())).transpose();
    let x = belief.x + k * stats.innovation;
    let ikh = Matrix6::identity() - k * stats.jacobian;
    let p = ikh * belief.p * ikh.transpose() + k * noise.matrix() * k.transpose();
    let p = (p + p.transpose()) * 0.5;
    Ok(UpdateOutcome::Applied(UpdateInfo {
        belief: KalmanBelief { x, p },
        nis: stats.nis,
        innovation: stats.innovation,
        innovation_cov: stats.innovation_cov,
        used_numeric_jacobian: stats.used_numeric_jacobian,
    }))
}

/// Normalized estimation error squared against the true state:
/// (x̂ − x)ᵀ P⁻¹ (x̂ − x). Averaged over runs it should sit near the state
/// dimension (6) when the filter is consistent.
pub fn nees(belief: &KalmanBelief, truth: &UavState) -> Result<f64> {
    let e = belief.x - truth.to_vector();
    let chol = nalgebra::Cholesky::new(belief.p)
        .ok_or_else(|| Error::SingularGeometry("state covariance not positive definite".into()))?;
    Ok(e.dot(&chol.solve(&e)))
}

// ---------------------------------------------------------------------------
