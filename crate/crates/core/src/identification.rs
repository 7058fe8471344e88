//! Bayesian link-state identification: is the echo off the UAV or a blocker?
//!
//! Each slot combines two sources of evidence. The environment prior comes
//! from the LoS probability map at the *predicted* UAV position. The echo
//! likelihood compares the innovation against its predicted covariance: under
//! a clear sight line the normalized innovation squared follows a χ²(4) law,
//! so the LoS likelihood is the Gaussian innovation density, while an echo
//! off a blocker carries no information about the UAV and is modelled as
//! uniform over the observable volume. A missed echo is direct evidence of
//! blockage and forces an NLoS declaration.

use crate::error::Result;
use crate::lpm::LosProbabilityMap;
use crate::sensing::EchoMeasurement;
use crate::tracking::{innovation_stats, KalmanBelief, MeasurementNoise};

/// Hypothesis about the serving link in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkState {
    Los,
    Nlos,
}

impl LinkState {
    pub fn is_los(&self) -> bool {
        matches!(self, LinkState::Los)
    }
}

/// Tunables of the identifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentificationConfig {
    /// Posterior LoS probability at or above which the link is declared LoS.
    pub threshold: f64,
    /// Probability of receiving no echo despite a clear sight line.
    pub p_miss: f64,
    /// Half-extent of the radial-velocity interval of the uniform
    /// blocker-echo model (m/s).
    pub v_max: f64,
    /// Range extent of the uniform blocker-echo model (m); `None` uses the
    /// map region's diagonal.
    pub d_max: Option<f64>,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        IdentificationConfig { threshold: 0.5, p_miss: 0.01, v_max: 50.0, d_max: None }
    }
}

impl IdentificationConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidInput(format!(
                "identification threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.p_miss > 0.0 && self.p_miss < 1.0) {
            return Err(Error::InvalidInput(format!(
                "p_miss must lie in (0, 1), got {}",
                self.p_miss
            )));
        }
        if !(self.v_max > 0.0) || !self.v_max.is_finite() {
            return Err(Error::InvalidInput(format!("v_max must be positive, got {}", self.v_max)));
        }
        if let Some(d) = self.d_max {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::InvalidInput(format!("d_max must be positive, got {d}")));
            }
        }
        Ok(())
    }

    /// Volume of the observable box (d, φ, θ, v_r) the uniform NLoS echo
    /// model spreads over.
    pub fn observation_volume(&self, region_diagonal: f64) -> f64 {
        let d_max = self.d_max.unwrap_or(region_diagonal);
        d_max * std::f64::consts::TAU * std::f64::consts::FRAC_PI_2 * (2.0 * self.v_max)
    }
}

/// The identifier's verdict for one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkStateDecision {
    pub state: LinkState,
    /// Posterior probability that the sight line is clear.
    pub posterior_los: f64,
    /// Map prior at the predicted position.
    pub prior_los: f64,
    /// LoS-to-NLoS likelihood ratio of the echo evidence (`p_miss` on a miss).
    pub likelihood_ratio: f64,
    /// Normalized innovation squared of the echo, when one was received.
    pub nis: Option<f64>,
    /// The predicted position fell outside the map; the nearest in-region
    /// cell's prior was used.
    pub prior_clamped: bool,
}

/// Decision rule: posteriors at or above the threshold are declared LoS.
pub fn classify(posterior_los: f64, threshold: f64) -> LinkState {
    if posterior_los >= threshold {
        LinkState::Los
    } else {
        LinkState::Nlos
    }
}

/// The no-echo verdict: an absent echo forces NLoS, with the posterior
/// discounted by the probability of missing a clear link's echo.
pub fn decide_missed(prior_los: f64, prior_clamped: bool, cfg: &IdentificationConfig) -> LinkStateDecision {
    LinkStateDecision {
        state: LinkState::Nlos,
        posterior_los: fuse(prior_los, cfg.p_miss),
        prior_los,
        likelihood_ratio: cfg.p_miss,
        nis: None,
        prior_clamped,
    }
}

fn fuse(prior: f64, likelihood_ratio: f64) -> f64 {
    if prior <= 0.0 {
        return 0.0;
    }
    if prior >= 1.0 {
        return 1.0;
    }
    // posterior = prior·L / (prior·L + (1 − prior)), computed via odds so a
    // huge or vanishing likelihood ratio degrades gracefully to 1 or 0.
    let inv = (1.0 - prior) / (prior * likelihood_ratio);
    if inv.is_nan() {
        // 0/0-grade evidence: fall back to the prior alone.
        return prior;
    }
    1.0 / (1.0 + inv)
}

/// Identify the link state of one slot from the predicted belief, the map
/// prior at the predicted position, and the echo (or its absence).
///
/// Out-of-region predictions do not error: the nearest in-region cell
/// supplies the prior and the decision is flagged. A missed echo forces an
/// NLoS declaration with posterior `prior·p_miss / (prior·p_miss + 1 − prior)`.
pub fn identify(
    predicted: &KalmanBelief,
    echo: Option<&EchoMeasurement>,
    lpm: &LosProbabilityMap,
    noise: &MeasurementNoise,
    cfg: &IdentificationConfig,
) -> Result<LinkStateDecision> {
    cfg.validate()?;
    let (link_prob, prior_clamped) = lpm.query_clamped(&predicted.position());
    let prior = link_prob.p_los;

    let echo = match echo {
        Some(m) => m,
        None => return Ok(decide_missed(prior, prior_clamped, cfg)),
    };

    let bs = lpm.bs_position();
    let stats = innovation_stats(predicted, &bs, &echo.observation(), noise)?;
    // log N(ν; 0, S) = −NIS/2 − 2·ln 2π − ½·ln det S, against a uniform
    // density over the observable volume. ln det S comes from the Cholesky
    // factor (2·Σ ln Lᵢᵢ), which cannot underflow the way the raw
    // determinant of a near-singular S does. When S fails the conditioning
    // gate the Gaussian is numerically meaningless in either direction, so
    // the echo is treated as uninformative (ratio 1) and the map prior
    // decides — mirroring the tracker, which skips such updates.
    let volume = cfg.observation_volume(lpm.region().diagonal());
    let likelihood_ratio = if stats.nis.is_finite() {
        match nalgebra::Cholesky::new(stats.innovation_cov) {
            Some(chol) => {
                let ln_det = 2.0 * chol.l().diagonal().map(f64::ln).sum();
                (-0.5 * stats.nis - 2.0 * std::f64::consts::TAU.ln() - 0.5 * ln_det
                    + volume.ln())
                .exp()
            }
            None => 1.0,
        }
    } else {
        1.0
    };
    let posterior = fuse(prior, likelihood_ratio);
    Ok(LinkStateDecision {
        state: classify(posterior, cfg.threshold),
        posterior_los: posterior,
        prior_los: prior,
        likelihood_ratio,
        nis: Some(stats.nis),
        prior_clamped,
    })
}

// ---------------------------------------------------------------------------
