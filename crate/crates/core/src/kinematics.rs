//! Ground-truth UAV motion: a constant-velocity model with additive Gaussian
//! process noise per slot, kept inside the region by mirror reflection.
//!
//! Per slot: `q' = q + v·dt + n_d`, `v' = v + n_v` with `n_d ~ N(0, σ_d²I₃)`
//! and `n_v ~ N(0, σ_v²I₃)` — absolute per-slot standard deviations, not
//! dt-scaled. In stacked form `x' = G·x + n_s` with block matrix
//! `G = [[I₃, dt·I₃], [0, I₃]]` and `Q_s = diag(σ_d²I₃, σ_v²I₃)`.

use std::io::Write;

use nalgebra::{Matrix6, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::citymap::Region;
use crate::error::{Error, Result};
use crate::Vec3;

pub const DEFAULT_DT: f64 = 0.02;
pub const DEFAULT_SIGMA_D: f64 = 0.1;
pub const DEFAULT_SIGMA_V: f64 = 0.1;

/// UAV kinematic state: position (m) and velocity (m/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UavState {
    pub q: Vec3,
    pub v: Vec3,
}

impl UavState {
    pub fn new(q: Vec3, v: Vec3) -> Self {
        UavState { q, v }
    }

    /// Stack into the filter's 6-vector layout (position, then velocity).
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.q.x, self.q.y, self.q.z, self.v.x, self.v.y, self.v.z)
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        UavState { q: Vec3::new(x[0], x[1], x[2]), v: Vec3::new(x[3], x[4], x[5]) }
    }
}

/// Constant-velocity motion model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionModel {
    pub dt: f64,
    pub sigma_d: f64,
    pub sigma_v: f64,
}

impl Default for MotionModel {
    fn default() -> Self {
        MotionModel { dt: DEFAULT_DT, sigma_d: DEFAULT_SIGMA_D, sigma_v: DEFAULT_SIGMA_V }
    }
}

impl MotionModel {
    pub fn new(dt: f64, sigma_d: f64, sigma_v: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidInput(format!("slot length dt must be positive, got {dt}")));
        }
        for (name, s) in [("sigma_d", sigma_d), ("sigma_v", sigma_v)] {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be non-negative, got {s}")));
            }
        }
        Ok(MotionModel { dt, sigma_d, sigma_v })
    }

    /// State-evolution matrix `G = [[I₃, dt·I₃], [0, I₃]]`.
    pub fn evolution_matrix(&self) -> Matrix6<f64> {
        evolution_matrix(self.dt).expect("validated dt")
    }

    /// Process-noise covariance `Q_s = diag(σ_d²·I₃, σ_v²·I₃)`.
    pub fn process_noise(&self) -> Matrix6<f64> {
        let mut q = Matrix6::zeros();
        for k in 0..3 {
            q[(k, k)] = self.sigma_d * self.sigma_d;
            q[(k + 3, k + 3)] = self.sigma_v * self.sigma_v;
        }
        q
    }
}

/// `G` for a given slot length; rejects `dt ≤ 0`.
pub fn evolution_matrix(dt: f64) -> Result<Matrix6<f64>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("slot length dt must be positive, got {dt}")));
    }
    let mut g = Matrix6::identity();
    for k in 0..3 {
        g[(k, k + 3)] = dt;
    }
    Ok(g)
}

/// Reflect `x` into `[lo, hi]`, returning the final coordinate and the sign
/// picked up by the paired velocity component (an even number of bounces
/// cancels out).
fn reflect_into(mut x: f64, lo: f64, hi: f64) -> (f64, f64) {
    let mut sign = 1.0;
    for _ in 0..64 {
        if x < lo {
            x = 2.0 * lo - x;
            sign = -sign;
        } else if x > hi {
            x = 2.0 * hi - x;
            sign = -sign;
        } else {
            return (x, sign);
        }
    }
    // Pathological overshoot (velocity many times the region span): clamp.
    (x.clamp(lo, hi), sign)
}

/// One slot of truth dynamics. Noise draw order is fixed (position x,y,z then
/// velocity x,y,z) so trajectories are reproducible from the rng stream; the
/// draws happen even when a sigma is zero, keeping stream alignment identical
/// between noisy and noiseless configurations.
pub fn step<R: Rng + ?Sized>(
    state: &UavState,
    model: &MotionModel,
    region: &Region,
    rng: &mut R,
) -> UavState {
    let mut q = state.q + state.v * model.dt;
    let mut v = state.v;
    for k in 0..3 {
        q[k] += model.sigma_d * rng.sample::<f64, _>(StandardNormal);
    }
    for k in 0..3 {
        v[k] += model.sigma_v * rng.sample::<f64, _>(StandardNormal);
    }
    let lo = region.q_lower();
    let hi = region.q_upper();
    for k in 0..3 {
        let (x, sign) = reflect_into(q[k], lo[k], hi[k]);
        q[k] = x;
        v[k] *= sign;
    }
    UavState { q, v }
}

/// Roll out `slots` steps from `x0`, returning `slots + 1` states (initial
/// state included). The initial position must lie inside the region.
pub fn generate_trajectory<R: Rng + ?Sized>(
    x0: &UavState,
    model: &MotionModel,
    region: &Region,
    slots: usize,
    rng: &mut R,
) -> Result<Vec<UavState>> {
    if slots < 1 {
        return Err(Error::InvalidInput("trajectory needs at least 1 slot".into()));
    }
    if !region.contains(&x0.q) {
        return Err(Error::OutOfRegion(x0.q.x, x0.q.y, x0.q.z));
    }
    if !(x0.v.iter().all(|c| c.is_finite())) {
        return Err(Error::InvalidInput("initial velocity must be finite".into()));
    }
    let mut out = Vec::with_capacity(slots + 1);
    out.push(*x0);
    let mut cur = *x0;
    for _ in 0..slots {
        cur = step(&cur, model, region, rng);
        out.push(cur);
    }
    Ok(out)
}

/// Write states as CSV with header `slot,qx,qy,qz,vx,vy,vz` (slot from 0).
pub fn write_trajectory_csv(states: &[UavState], mut w: impl Write) -> Result<()> {
    writeln!(w, "slot,qx,qy,qz,vx,vy,vz")?;
    for (n, s) in states.iter().enumerate() {
        writeln!(w, "{n},{},{},{},{},{},{}", s.q.x, s.q.y, s.q.z, s.v.x, s.v.y, s.v.z)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
