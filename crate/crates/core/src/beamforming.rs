//! Uniform-planar-array steering and transmit beamforming.
//!
//! The BS carries an upward-facing UPA with half-wavelength element spacing.
//! Element (m, n) of the steering vector (0-based here, row-major with the
//! n-axis innermost) is `exp(-jπ·sinθ·(m·cosφ + n·sinφ)) / √(MN)`, where θ is
//! the zenith angle off the array normal and φ the azimuth.
//!
//! Predictive beamforming points a matched steering vector at the tracker's
//! predicted direction; the training baseline sweeps a uniform angular
//! codebook instead, paying the sweep in zero-rate slots.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::sensing::RadioConfig;
use crate::Vec3;

/// Raw steering vector of an M×N UPA toward (phi, theta), unit norm.
pub fn steering_vector(phi: f64, theta: f64, m: usize, n: usize) -> Vec<Complex64> {
    let norm = 1.0 / ((m * n) as f64).sqrt();
    let s = theta.sin();
    let (cp, sp) = (phi.cos(), phi.sin());
    let mut w = Vec::with_capacity(m * n);
    for mi in 0..m {
        for ni in 0..n {
            let phase = -PI * s * (mi as f64 * cp + ni as f64 * sp);
            w.push(Complex64::from_polar(norm, phase));
        }
    }
    w
}

/// Unit-norm transmit beamforming vector for an Mt×Nt array.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformingVector {
    mt: usize,
    nt: usize,
    weights: Vec<Complex64>,
}

impl BeamformingVector {
    /// Matched (conjugate) beam toward the given direction.
    pub fn steered(phi: f64, theta: f64, mt: usize, nt: usize) -> Result<Self> {
        if mt < 1 || nt < 1 {
            return Err(Error::InvalidInput(format!("array dims must be >= 1, got {mt}x{nt}")));
        }
        if !phi.is_finite() || !theta.is_finite() {
            return Err(Error::InvalidInput(format!("beam angles must be finite, got ({phi}, {theta})")));
        }
        Ok(BeamformingVector { mt, nt, weights: steering_vector(phi, theta, mt, nt) })
    }

    /// Zenith-pointing beam (all elements in phase) — the fallback when no
    /// usable direction estimate exists.
    pub fn boresight(mt: usize, nt: usize) -> Result<Self> {
        Self::steered(0.0, 0.0, mt, nt)
    }

    /// Wrap explicit weights, enforcing the shape and unit-norm invariant.
    pub fn from_weights(mt: usize, nt: usize, weights: Vec<Complex64>) -> Result<Self> {
        if weights.len() != mt * nt {
            return Err(Error::InvalidInput(format!(
                "weight vector length {} does not match {mt}x{nt} array",
                weights.len()
            )));
        }
        let norm2: f64 = weights.iter().map(|w| w.norm_sqr()).sum();
        if (norm2 - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "beamforming vector must have unit norm, got ||f||^2 = {norm2}"
            )));
        }
        Ok(BeamformingVector { mt, nt, weights })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.mt, self.nt)
    }

    pub fn weights(&self) -> &[Complex64] {
        &self.weights
    }
}

/// Transmit array gain `|a(φ,θ)ᴴ f|²` toward a direction; in [0, 1] by
/// Cauchy–Schwarz, and 1 exactly when `f` matches the direction's steering
/// vector up to a global phase.
pub fn beam_gain(f: &BeamformingVector, phi: f64, theta: f64) -> f64 {
    let a = steering_vector(phi, theta, f.mt, f.nt);
    let mut acc = Complex64::new(0.0, 0.0);
    for (ai, wi) in a.iter().zip(&f.weights) {
        acc += ai.conj() * wi;
    }
    acc.norm_sqr().min(1.0)
}

/// Downlink communication SNR (linear): one-way reference path gain
/// `κ_ref/d`, array factor Mt·Nt, beamforming gain toward the true UAV
/// direction, against the UAV receiver noise power.
pub fn comm_snr(cfg: &RadioConfig, d: f64, f: &BeamformingVector, phi: f64, theta: f64) -> Result<f64> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::InvalidInput(format!("distance must be positive, got {d}")));
    }
    if f.dims() != (cfg.mt, cfg.nt) {
        return Err(Error::InvalidInput(format!(
            "beam dims {:?} do not match the radio config's {}x{} transmit array",
            f.dims(),
            cfg.mt,
            cfg.nt
        )));
    }
    let gain = beam_gain(f, phi, theta);
    let kappa2 = cfg.kappa_ref * cfg.kappa_ref / (d * d);
    Ok(cfg.p_n * (cfg.mt * cfg.nt) as f64 * kappa2 * gain / cfg.sigma_c2)
}

/// Beam for the next slot from a predicted UAV position. Degenerate geometry
/// (prediction at or below the array) cannot be pointed at, so the fallback is
/// the boresight beam; the flag reports that the fallback fired.
pub fn predictive_beam(predicted_position: &Vec3, bs: &Vec3, mt: usize, nt: usize) -> (BeamformingVector, bool) {
    let boresight = || BeamformingVector::boresight(mt, nt).expect("array dims validated upstream");
    let delta = predicted_position - bs;
    let d = delta.norm();
    if !d.is_finite() || d < 1e-9 || delta.z < 0.0 {
        return (boresight(), true);
    }
    let theta = (delta.z / d).clamp(-1.0, 1.0).acos();
    let phi = delta.y.atan2(delta.x);
    match BeamformingVector::steered(phi, theta, mt, nt) {
        Ok(beam) => (beam, false),
        Err(_) => (boresight(), true),
    }
}

/// Uniform angular grid codebook over azimuth (−π, π] × zenith (0, π/2).
#[derive(Debug, Clone)]
pub struct Codebook {
    beams: Vec<BeamformingVector>,
    angles: Vec<(f64, f64)>,
}

impl Codebook {
    /// `p_phi × p_theta` grid of steered beams at the cell-centre angles.
    pub fn uniform_grid(p_phi: usize, p_theta: usize, mt: usize, nt: usize) -> Result<Self> {
        if p_phi < 1 || p_theta < 1 {
            return Err(Error::InvalidInput(format!(
                "codebook grid must be at least 1x1, got {p_phi}x{p_theta}"
            )));
        }
        let mut beams = Vec::with_capacity(p_phi * p_theta);
        let mut angles = Vec::with_capacity(p_phi * p_theta);
        for i in 0..p_phi {
            let phi = -PI + (i as f64 + 0.5) * (2.0 * PI / p_phi as f64);
            for j in 0..p_theta {
                let theta = (j as f64 + 0.5) * (PI / 2.0 / p_theta as f64);
                beams.push(BeamformingVector::steered(phi, theta, mt, nt)?);
                angles.push((phi, theta));
            }
        }
        Ok(Codebook { beams, angles })
    }

    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn beam(&self, index: usize) -> &BeamformingVector {
        &self.beams[index]
    }

    pub fn angles(&self, index: usize) -> (f64, f64) {
        self.angles[index]
    }
}

/// Outcome of an exhaustive beam-training sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSelection {
    pub best_index: usize,
    pub best_gain: f64,
    /// Slots consumed by the sweep, during which the data rate is zero.
    pub overhead_slots: usize,
}

/// Exhaustive sweep baseline: evaluate every codebook beam against the true
/// direction and pick the strongest (ties go to the lowest index). The sweep
/// costs `|codebook| * slots_per_beam` zero-rate slots.
pub fn beam_training_baseline(
    codebook: &Codebook,
    true_phi: f64,
    true_theta: f64,
    slots_per_beam: usize,
) -> Result<TrainingSelection> {
    if codebook.is_empty() {
        return Err(Error::InvalidInput("codebook is empty".into()));
    }
    let mut best_index = 0;
    let mut best_gain = f64::NEG_INFINITY;
    for (i, beam) in codebook.beams.iter().enumerate() {
        let g = beam_gain(beam, true_phi, true_theta);
        if g > best_gain {
            best_gain = g;
            best_index = i;
        }
    }
    Ok(TrainingSelection { best_index, best_gain, overhead_slots: codebook.len() * slots_per_beam })
}

// ---------------------------------------------------------------------------
