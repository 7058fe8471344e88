//! Base-station association and achievable-rate accounting.
//!
//! The UAV is served by one BS at a time. When the identifier declares the
//! serving link blocked, the predicted UAV position is scored against every
//! other station's LoS probability map and the most promising candidate is
//! nominated; the simulation switches only if the candidate genuinely beats
//! the serving station's own outlook, pays a fixed dead time in slots, and
//! reverts to the primary station once its map has reported the link likely
//! clear for a streak of consecutive slots.
//!
//! Rates follow the link state actually in effect: a clear link earns the
//! full Shannon rate, a blocked link that keeps its station earns the rate
//! at an attenuated SNR, and slots spent switching earn nothing.

use crate::error::{Error, Result};
use crate::lpm::LosProbabilityMap;
use crate::sensing::RadioConfig;
use crate::Vec3;

/// One serving-capable base station: identity, radio constants, and its own
/// LoS probability map (whose stored position is the station's).
#[derive(Debug, Clone)]
pub struct BaseStation {
    pub id: usize,
    pub radio: RadioConfig,
    pub lpm: LosProbabilityMap,
}

impl BaseStation {
    pub fn new(id: usize, radio: RadioConfig, lpm: LosProbabilityMap) -> Result<Self> {
        radio.validate()?;
        Ok(BaseStation { id, radio, lpm })
    }

    pub fn position(&self) -> Vec3 {
        self.lpm.bs_position()
    }
}

/// Handover and rate-penalty policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateConfig {
    /// SNR penalty (dB) while staying on a blocked link.
    pub nlos_penalty_db: f64,
    /// Slots of dead time per handover (zero rate while switching).
    pub handover_delay_slots: usize,
    /// LoS probability the primary station must exhibit to trigger a revert.
    pub revert_threshold: f64,
    /// Consecutive slots above the threshold before reverting.
    pub revert_streak: usize,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            nlos_penalty_db: 20.0,
            handover_delay_slots: 1,
            revert_threshold: 0.9,
            revert_streak: 5,
        }
    }
}

impl RateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nlos_penalty_db >= 0.0) || !self.nlos_penalty_db.is_finite() {
            return Err(Error::InvalidInput(format!(
                "nlos_penalty_db must be non-negative, got {}",
                self.nlos_penalty_db
            )));
        }
        if !(self.revert_threshold > 0.0 && self.revert_threshold <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "revert_threshold must lie in (0, 1], got {}",
                self.revert_threshold
            )));
        }
        if self.revert_streak == 0 {
            return Err(Error::InvalidInput("revert_streak must be at least 1".into()));
        }
        Ok(())
    }
}

/// A nominated handover target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateBs {
    pub id: usize,
    /// The candidate map's LoS probability at the queried position.
    pub p_los: f64,
    /// Distance from the candidate station to the queried position.
    pub distance: f64,
}

/// Nominate the best alternative station for a (predicted) UAV position:
/// highest LoS probability, ties broken by smaller distance, then smaller id.
/// Positions outside a candidate's map are scored at its nearest cell.
pub fn select_bs_on_nlos(
    stations: &[BaseStation],
    serving_id: usize,
    position: &Vec3,
) -> Result<CandidateBs> {
    let mut best: Option<CandidateBs> = None;
    for st in stations.iter().filter(|s| s.id != serving_id) {
        let (prob, _) = st.lpm.query_clamped(position);
        let cand =
            CandidateBs { id: st.id, p_los: prob.p_los, distance: (st.position() - position).norm() };
        best = match best {
            None => Some(cand),
            Some(cur) => {
                let better = cand.p_los > cur.p_los
                    || (cand.p_los == cur.p_los
                        && (cand.distance < cur.distance
                            || (cand.distance == cur.distance && cand.id < cur.id)));
                Some(if better { cand } else { cur })
            }
        };
    }
    best.ok_or_else(|| Error::NoCandidate("no alternative base station to hand over to".into()))
}

/// How a slot's rate is earned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateBranch {
    /// Clear serving link: full Shannon rate.
    Los,
    /// Blocked link, no switch: Shannon rate at the penalized SNR.
    NlosStay,
    /// Switching stations: dead slot.
    Handover,
}

/// Achievable rate (bit/s/Hz) for one slot given the communication SNR the
/// beam would deliver on a clear link.
pub fn achievable_rate(branch: RateBranch, snr: f64, nlos_penalty_db: f64) -> f64 {
    match branch {
        RateBranch::Los => (1.0 + snr).log2(),
        RateBranch::NlosStay => {
            let penalty = 10f64.powf(-nlos_penalty_db / 10.0);
            (1.0 + snr * penalty).log2()
        }
        RateBranch::Handover => 0.0,
    }
}

// ---------------------------------------------------------------------------
