//! Closed-loop simulation: the per-slot sense → identify → track → associate
//! cycle, scenario configuration, record logging, metrics, and Monte-Carlo
//! batches.
//!
//! Every slot runs the same fixed sequence: the true state advances; the beam
//! chosen from the *previous* slot's prediction illuminates the UAV; an echo
//! is synthesized (off the UAV or off the first blocker); the link identifier
//! fuses the map prior at the predicted position with the echo evidence; a
//! LoS verdict lets the filter absorb the echo while NLoS (or a miss) makes
//! it coast and triggers handover evaluation; finally the slot is logged and
//! the next slot's beam is steered at the fresh prediction.
//!
//! Determinism: a run is a pure function of (scenario, seed). Two independent
//! ChaCha streams — one for the true trajectory, one for measurement noise —
//! are derived from the seed by a fixed 64-bit mixing function, so truth is
//! identical across estimator-side variations and Monte-Carlo runs can be
//! derived from one root seed without overlap.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::association::{
    achievable_rate, select_bs_on_nlos, BaseStation, RateBranch, RateConfig,
};
use crate::beamforming::{beam_gain, comm_snr, predictive_beam, BeamformingVector, Codebook};
use crate::citymap::CityMap;
use crate::error::{Error, Result};
use crate::identification::{
    classify, decide_missed, identify, IdentificationConfig, LinkState, LinkStateDecision,
};
use crate::kinematics::{step, MotionModel, UavState};
use crate::lpm::LosProbabilityMap;
use crate::sensing::{
    geometry_observables, synthesize_measurement, BlockerModel, EchoOrigin, RadioConfig,
    SensingNoise, SensingScene,
};
use crate::tracking::{
    predict, update, KalmanBelief, MeasurementNoise, UpdateOutcome, INIT_POS_VAR, INIT_VEL_VAR,
};
use crate::Vec3;

/// Exact header of the per-slot record CSV.
pub const RECORDS_HEADER: &str = "slot,qx,qy,qz,vx,vy,vz,qhx,qhy,qhz,vhx,vhy,vhz,link_true,link_est,posterior_los,bs_id,beam_gain,snr_db,rate,nis";

/// Default outage threshold (bit/s/Hz) for the outage-fraction metric.
pub const DEFAULT_OUTAGE_RATE: f64 = 0.1;

/// Bootstrap resamples behind each batch confidence interval.
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Derive a child seed from a root seed and an index via the splitmix64
/// finalizer. Used for the two per-run noise streams and for per-run seeds in
/// Monte-Carlo batches; documented so external tooling can reproduce any run.
pub fn split_seed(root: u64, index: u64) -> u64 {
    let mut z = root.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Scenario schema

fn default_rcs_scale() -> f64 {
    1.0
}

/// Radio constants, all optional in JSON (missing fields take the defaults).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioSpec {
    pub f_c: f64,
    pub c: f64,
    pub mt: usize,
    pub nt: usize,
    pub mr: usize,
    pub nr: usize,
    pub p_n: f64,
    pub kappa_ref: f64,
    pub sigma_r2: f64,
    pub sigma_c2: f64,
}

impl Default for RadioSpec {
    fn default() -> Self {
        let r = RadioConfig::default();
        RadioSpec {
            f_c: r.f_c,
            c: r.c,
            mt: r.mt,
            nt: r.nt,
            mr: r.mr,
            nr: r.nr,
            p_n: r.p_n,
            kappa_ref: r.kappa_ref,
            sigma_r2: r.sigma_r2,
            sigma_c2: r.sigma_c2,
        }
    }
}

impl RadioSpec {
    pub fn to_config(self) -> RadioConfig {
        RadioConfig {
            f_c: self.f_c,
            c: self.c,
            mt: self.mt,
            nt: self.nt,
            mr: self.mr,
            nr: self.nr,
            p_n: self.p_n,
            kappa_ref: self.kappa_ref,
            sigma_r2: self.sigma_r2,
            sigma_c2: self.sigma_c2,
        }
    }
}

/// One base station: a position, plus an optional radio override.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationSpec {
    pub position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radio: Option<RadioSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub sigma_d0: f64,
    pub sigma_a0: f64,
    pub sigma_v0: f64,
    pub snr_floor: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        let n = SensingNoise::default();
        NoiseSpec {
            sigma_d0: n.sigma_d0,
            sigma_a0: n.sigma_a0,
            sigma_v0: n.sigma_v0,
            snr_floor: n.snr_floor,
        }
    }
}

impl NoiseSpec {
    pub fn to_config(self) -> SensingNoise {
        SensingNoise {
            sigma_d0: self.sigma_d0,
            sigma_a0: self.sigma_a0,
            sigma_v0: self.sigma_v0,
            snr_floor: self.snr_floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionSpec {
    pub dt: f64,
    pub sigma_d: f64,
    pub sigma_v: f64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec {
            dt: crate::kinematics::DEFAULT_DT,
            sigma_d: crate::kinematics::DEFAULT_SIGMA_D,
            sigma_v: crate::kinematics::DEFAULT_SIGMA_V,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialStateSpec {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockerSpec {
    pub rcs_factor: f64,
    pub radial_speed: f64,
}

impl Default for BlockerSpec {
    fn default() -> Self {
        let b = BlockerModel::default();
        BlockerSpec { rcs_factor: b.rcs_factor, radial_speed: b.radial_speed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateSpec {
    pub nlos_penalty_db: f64,
    pub handover_delay_slots: usize,
    pub revert_threshold: f64,
    pub revert_streak: usize,
}

impl Default for RateSpec {
    fn default() -> Self {
        let r = RateConfig::default();
        RateSpec {
            nlos_penalty_db: r.nlos_penalty_db,
            handover_delay_slots: r.handover_delay_slots,
            revert_threshold: r.revert_threshold,
            revert_streak: r.revert_streak,
        }
    }
}

impl RateSpec {
    pub fn to_config(self) -> RateConfig {
        RateConfig {
            nlos_penalty_db: self.nlos_penalty_db,
            handover_delay_slots: self.handover_delay_slots,
            revert_threshold: self.revert_threshold,
            revert_streak: self.revert_streak,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentificationSpec {
    pub threshold: f64,
    pub p_miss: f64,
    pub v_max: f64,
    pub d_max: Option<f64>,
}

impl Default for IdentificationSpec {
    fn default() -> Self {
        let c = IdentificationConfig::default();
        IdentificationSpec { threshold: c.threshold, p_miss: c.p_miss, v_max: c.v_max, d_max: c.d_max }
    }
}

impl IdentificationSpec {
    pub fn to_config(self) -> IdentificationConfig {
        IdentificationConfig {
            threshold: self.threshold,
            p_miss: self.p_miss,
            v_max: self.v_max,
            d_max: self.d_max,
        }
    }
}

/// LoS-probability-map construction parameters (the grid itself comes from
/// the city map's region).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LpmSpec {
    pub height_sigma: f64,
    pub prior_strength: f64,
}

impl Default for LpmSpec {
    fn default() -> Self {
        LpmSpec {
            height_sigma: crate::lpm::DEFAULT_HEIGHT_SIGMA,
            prior_strength: crate::lpm::DEFAULT_PRIOR_STRENGTH,
        }
    }
}

/// Beam-selection policy: predictive steering from the filter (default), or a
/// periodic exhaustive codebook sweep that holds the winning beam between
/// sweeps. Sweep slots carry pilots only and earn zero data rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamSpec {
    /// `"predictive"` or `"training"`.
    pub mode: BeamMode,
    /// Codebook azimuth bins (training mode).
    pub phi_bins: usize,
    /// Codebook zenith bins (training mode).
    pub theta_bins: usize,
    /// Slots spent per codebook entry during a sweep.
    pub slots_per_beam: usize,
    /// Slots between sweep starts; omitted means a single sweep at run start.
    pub period_slots: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamMode {
    Predictive,
    Training,
}

impl Default for BeamSpec {
    fn default() -> Self {
        BeamSpec {
            mode: BeamMode::Predictive,
            phi_bins: 8,
            theta_bins: 4,
            slots_per_beam: 1,
            period_slots: None,
        }
    }
}

/// Contents of the base-station site file consumed by `build-lpm`: where the
/// station sits and how to shape its prior map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub position: [f64; 3],
    #[serde(default)]
    pub lpm: LpmSpec,
}

impl SiteSpec {
    /// Parse and validate a site file. Pure: no filesystem access.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let site: SiteSpec = serde_json::from_str(s)?;
        if site.position.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("position", "must be finite"));
        }
        if !(site.lpm.height_sigma >= 0.0) || !site.lpm.height_sigma.is_finite() {
            return Err(Error::validation("lpm.height_sigma", "must be non-negative"));
        }
        if !(site.lpm.prior_strength > 0.0) || !site.lpm.prior_strength.is_finite() {
            return Err(Error::validation("lpm.prior_strength", "must be positive"));
        }
        Ok(site)
    }
}

/// How the tracker obtains its first belief.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterInit {
    /// Wait for the first detected echo whose back-projected position the map
    /// rates LoS, then seed the filter from that measurement.
    FirstEcho,
    /// The UAV reported its full state during initial access: seed the filter
    /// at the scenario's initial state (broad covariance).
    KnownState,
}

fn default_filter_init() -> FilterInit {
    FilterInit::FirstEcho
}

/// Complete description of one simulation, as stored in a scenario JSON file.
///
/// Stations are identified by their list index (`bs_id` in the records); the
/// first station is the primary, serves at slot 1, and is the revert target.
/// The `map` path is resolved relative to the scenario file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Path to the city-map JSON.
    pub map: String,
    pub stations: Vec<StationSpec>,
    pub initial_state: InitialStateSpec,
    /// Number of slots L; records are logged for slots 1..=L.
    pub slots: usize,
    pub seed: u64,
    #[serde(default)]
    pub radio: RadioSpec,
    #[serde(default)]
    pub sensing_noise: NoiseSpec,
    #[serde(default)]
    pub motion: MotionSpec,
    #[serde(default = "default_rcs_scale")]
    pub rcs_scale: f64,
    #[serde(default)]
    pub blocker: BlockerSpec,
    #[serde(default)]
    pub rate: RateSpec,
    #[serde(default)]
    pub identification: IdentificationSpec,
    #[serde(default)]
    pub lpm: LpmSpec,
    #[serde(default)]
    pub beam: BeamSpec,
    #[serde(default = "default_filter_init")]
    pub filter_init: FilterInit,
}

impl Scenario {
    /// Parse a scenario from JSON and validate everything that does not need
    /// the map file. Pure: no filesystem access.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn resolved_radio(&self, station: usize) -> RadioSpec {
        self.stations[station].radio.unwrap_or(self.radio)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stations.is_empty() {
            return Err(Error::validation("stations", "at least one base station is required"));
        }
        if self.stations.len() > 64 {
            return Err(Error::validation("stations", "more than 64 base stations"));
        }
        if self.slots < 1 {
            return Err(Error::validation("slots", "slot count must be at least 1"));
        }
        if self.slots > 10_000_000 {
            return Err(Error::validation("slots", "slot count above 10^7"));
        }
        if !(self.rcs_scale > 0.0) || !self.rcs_scale.is_finite() {
            return Err(Error::validation("rcs_scale", "must be positive and finite"));
        }
        if !self.blocker.rcs_factor.is_finite()
            || self.blocker.rcs_factor < 0.0
            || !self.blocker.radial_speed.is_finite()
        {
            return Err(Error::validation(
                "blocker",
                "rcs_factor must be non-negative and radial_speed finite",
            ));
        }
        for (i, st) in self.stations.iter().enumerate() {
            if st.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("stations[{i}].position"), "must be finite"));
            }
            self.resolved_radio(i)
                .to_config()
                .validate()
                .map_err(|e| Error::validation(format!("stations[{i}].radio"), e.to_string()))?;
        }
        let init = self.initial_state;
        if init.position.iter().chain(init.velocity.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("initial_state", "position and velocity must be finite"));
        }
        MotionModel::new(self.motion.dt, self.motion.sigma_d, self.motion.sigma_v)
            .map_err(|e| Error::validation("motion", e.to_string()))?;
        self.sensing_noise
            .to_config()
            .validate()
            .map_err(|e| Error::validation("sensing_noise", e.to_string()))?;
        self.rate.to_config().validate().map_err(|e| Error::validation("rate", e.to_string()))?;
        self.identification
            .to_config()
            .validate()
            .map_err(|e| Error::validation("identification", e.to_string()))?;
        if !(self.lpm.height_sigma >= 0.0) || !self.lpm.height_sigma.is_finite() {
            return Err(Error::validation("lpm.height_sigma", "must be non-negative"));
        }
        if !(self.lpm.prior_strength > 0.0) || !self.lpm.prior_strength.is_finite() {
            return Err(Error::validation("lpm.prior_strength", "must be positive"));
        }
        let b = self.beam;
        if b.mode == BeamMode::Training {
            if b.phi_bins < 1 || b.theta_bins < 1 {
                return Err(Error::validation("beam", "codebook bins must be at least 1"));
            }
            if b.phi_bins.saturating_mul(b.theta_bins) > 65_536 {
                return Err(Error::validation("beam", "codebook larger than 65536 entries"));
            }
            if b.slots_per_beam < 1 {
                return Err(Error::validation("beam.slots_per_beam", "must be at least 1"));
            }
            let sweep = b.phi_bins * b.theta_bins * b.slots_per_beam;
            if let Some(p) = b.period_slots {
                if p < sweep {
                    return Err(Error::validation(
                        "beam.period_slots",
                        format!("shorter than one full sweep ({sweep} slots)"),
                    ));
                }
            }
            // One codebook serves every station: array shapes must agree.
            let (mt, nt) = (self.resolved_radio(0).mt, self.resolved_radio(0).nt);
            for i in 1..self.stations.len() {
                let r = self.resolved_radio(i);
                if (r.mt, r.nt) != (mt, nt) {
                    return Err(Error::validation(
                        "beam",
                        "training mode requires all stations to share transmit array dimensions",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Load a scenario file, then its map, and build every station's LoS
    /// probability map. Relative map paths are taken from the scenario file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<LoadedScenario> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let scenario = Scenario::from_json_str(&text)?;
        let map_path = {
            let given = Path::new(&scenario.map);
            if given.is_absolute() {
                given.to_path_buf()
            } else {
                path.parent().unwrap_or_else(|| Path::new(".")).join(given)
            }
        };
        let map = CityMap::load(&map_path)?;
        LoadedScenario::from_parts(scenario, map)
    }
}

/// A scenario joined with its loaded map and derived per-station state,
/// ready to run.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub map: CityMap,
    pub stations: Vec<BaseStation>,
    pub motion: MotionModel,
    pub noise: SensingNoise,
    pub rate_cfg: RateConfig,
    pub ident_cfg: IdentificationConfig,
    pub blocker: BlockerModel,
    pub initial: UavState,
}

impl LoadedScenario {
    /// Validate a scenario against its map and build the per-station LPMs.
    pub fn from_parts(scenario: Scenario, map: CityMap) -> Result<Self> {
        scenario.validate()?;
        let init = scenario.initial_state;
        let initial = UavState::new(Vec3::from(init.position), Vec3::from(init.velocity));
        if !map.region.contains(&initial.q) {
            return Err(Error::validation("initial_state.position", "outside the map region"));
        }
        let mut stations = Vec::with_capacity(scenario.stations.len());
        for (i, st) in scenario.stations.iter().enumerate() {
            let pos = Vec3::from(st.position);
            if !map.region.contains(&pos) {
                return Err(Error::validation(
                    format!("stations[{i}].position"),
                    "outside the map region",
                ));
            }
            let lpm = LosProbabilityMap::build_prior(
                &map,
                pos,
                scenario.lpm.height_sigma,
                scenario.lpm.prior_strength,
            )?;
            stations.push(BaseStation::new(i, scenario.resolved_radio(i).to_config(), lpm)?);
        }
        let motion = MotionModel::new(scenario.motion.dt, scenario.motion.sigma_d, scenario.motion.sigma_v)?;
        let noise = scenario.sensing_noise.to_config();
        let rate_cfg = scenario.rate.to_config();
        let ident_cfg = scenario.identification.to_config();
        let blocker =
            BlockerModel { rcs_factor: scenario.blocker.rcs_factor, radial_speed: scenario.blocker.radial_speed };
        Ok(LoadedScenario {
            scenario,
            map,
            stations,
            motion,
            noise,
            rate_cfg,
            ident_cfg,
            blocker,
            initial,
        })
    }
}

// ---------------------------------------------------------------------------
// Per-slot records

/// Everything logged about one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotRecord {
    /// 1-based slot index.
    pub slot: usize,
    pub truth: UavState,
    pub estimate: UavState,
    pub link_true: LinkState,
    pub link_est: LinkState,
    pub posterior_los: f64,
    /// Station that sensed/served this slot (list index in the scenario).
    pub bs_id: usize,
    /// Gain of this slot's beam toward the *true* UAV direction.
    pub beam_gain: f64,
    /// Effective communication SNR in dB (−inf during handover dead time and
    /// training sweeps).
    pub snr_db: f64,
    /// Achievable rate (bit/s/Hz) actually earned this slot.
    pub rate: f64,
    /// NIS of the applied filter update; NaN on coasting slots.
    pub nis: f64,
}

fn link_code(s: LinkState) -> u8 {
    match s {
        LinkState::Los => 1,
        LinkState::Nlos => 0,
    }
}

fn link_from_code(c: &str) -> Option<LinkState> {
    match c {
        "1" => Some(LinkState::Los),
        "0" => Some(LinkState::Nlos),
        _ => None,
    }
}

/// Write records with the exact documented header. Floats use Rust's shortest
/// round-trip formatting, so identical runs produce identical bytes.
pub fn write_records_csv(records: &[SlotRecord], mut w: impl Write) -> Result<()> {
    let mut buf = String::with_capacity(records.len() * 160 + RECORDS_HEADER.len() + 1);
    buf.push_str(RECORDS_HEADER);
    buf.push('\n');
    for r in records {
        let t = &r.truth;
        let e = &r.estimate;
        writeln!(
            buf,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.slot,
            t.q.x,
            t.q.y,
            t.q.z,
            t.v.x,
            t.v.y,
            t.v.z,
            e.q.x,
            e.q.y,
            e.q.z,
            e.v.x,
            e.v.y,
            e.v.z,
            link_code(r.link_true),
            link_code(r.link_est),
            r.posterior_los,
            r.bs_id,
            r.beam_gain,
            r.snr_db,
            r.rate,
            r.nis
        )
        .expect("writing to a String cannot fail");
    }
    w.write_all(buf.as_bytes())?;
    Ok(())
}

/// Read records back, enforcing the exact header, field count and types, and
/// the slot numbering invariant (1..=L, strictly increasing).
pub fn read_records_csv(mut r: impl Read) -> Result<Vec<SlotRecord>> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == RECORDS_HEADER => {}
        other => {
            return Err(Error::validation(
                "header",
                format!("expected the records header, got {other:?}"),
            ))
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2; // 1-based line number in the file
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 21 {
            return Err(Error::validation(
                format!("line {row}"),
                format!("expected 21 fields, got {}", fields.len()),
            ));
        }
        let parse_f = |idx: usize| -> Result<f64> {
            fields[idx].parse::<f64>().map_err(|_| {
                Error::validation(format!("line {row}, field {}", idx + 1), "not a number")
            })
        };
        let slot: usize = fields[0].parse().map_err(|_| {
            Error::validation(format!("line {row}, field 1"), "not a slot index")
        })?;
        if slot != records.len() + 1 {
            return Err(Error::validation(
                format!("line {row}"),
                format!("slot {slot} breaks the 1..=L sequence"),
            ));
        }
        let truth = UavState::new(
            Vec3::new(parse_f(1)?, parse_f(2)?, parse_f(3)?),
            Vec3::new(parse_f(4)?, parse_f(5)?, parse_f(6)?),
        );
        let estimate = UavState::new(
            Vec3::new(parse_f(7)?, parse_f(8)?, parse_f(9)?),
            Vec3::new(parse_f(10)?, parse_f(11)?, parse_f(12)?),
        );
        let link_true = link_from_code(fields[13]).ok_or_else(|| {
            Error::validation(format!("line {row}, field 14"), "link flags are 0 or 1")
        })?;
        let link_est = link_from_code(fields[14]).ok_or_else(|| {
            Error::validation(format!("line {row}, field 15"), "link flags are 0 or 1")
        })?;
        let bs_id: usize = fields[16].parse().map_err(|_| {
            Error::validation(format!("line {row}, field 17"), "not a station id")
        })?;
        records.push(SlotRecord {
            slot,
            truth,
            estimate,
            link_true,
            link_est,
            posterior_los: parse_f(15)?,
            bs_id,
            beam_gain: parse_f(17)?,
            snr_db: parse_f(18)?,
            rate: parse_f(19)?,
            nis: parse_f(20)?,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// The closed loop

/// A finished run: its records plus any degraded-mode events (numeric
/// Jacobian, skipped updates, boresight beams, prior-only identification).
/// Events do not invalidate the records; the CLI reports them and signals
/// them through its exit code.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<SlotRecord>,
    pub fallback_events: Vec<String>,
    /// Post-update belief per slot (`None` before first acquisition). The
    /// estimate columns come from these; keeping the full belief lets
    /// consistency checks evaluate the filter covariance as well.
    pub beliefs: Vec<Option<KalmanBelief>>,
}

/// Training-sweep bookkeeping (training beam policy only).
struct TrainingState {
    codebook: Codebook,
    slots_per_beam: usize,
    period: usize,
    sweep_len: usize,
    /// Codebook index held between sweeps.
    fixed: usize,
    /// Best (index, measured gain) of the sweep in progress.
    best: Option<(usize, f64)>,
}

impl TrainingState {
    fn phase(&self, slot: usize) -> usize {
        (slot - 1) % self.period
    }

    fn in_sweep(&self, slot: usize) -> bool {
        self.phase(slot) < self.sweep_len
    }

    fn sweep_index(&self, slot: usize) -> usize {
        self.phase(slot) / self.slots_per_beam
    }

    /// Record the measured quality of this sweep slot's beam; on the last
    /// sweep slot, lock in the winner (ties keep the lowest index).
    fn observe(&mut self, slot: usize, gain: f64) {
        if !self.in_sweep(slot) {
            return;
        }
        let idx = self.sweep_index(slot);
        match self.best {
            Some((_, g)) if g >= gain => {}
            _ => self.best = Some((idx, gain)),
        }
        if self.phase(slot) == self.sweep_len - 1 {
            if let Some((i, _)) = self.best.take() {
                self.fixed = i;
            }
        }
    }

    fn beam_for(&self, slot: usize) -> &BeamformingVector {
        if self.in_sweep(slot) {
            self.codebook.beam(self.sweep_index(slot))
        } else {
            self.codebook.beam(self.fixed)
        }
    }
}

/// Run the scenario with its own seed.
pub fn run(ls: &LoadedScenario) -> Result<RunOutput> {
    run_seeded(ls, ls.scenario.seed)
}

/// Run the scenario with an explicit seed (Monte-Carlo batches).
pub fn run_seeded(ls: &LoadedScenario, seed: u64) -> Result<RunOutput> {
    let slots = ls.scenario.slots;
    let mut truth_rng = ChaCha12Rng::seed_from_u64(split_seed(seed, 0));
    let mut meas_rng = ChaCha12Rng::seed_from_u64(split_seed(seed, 1));

    let mut truth = ls.initial;
    // Where the BS last knew the UAV to be, from initial access.
    let access_position = ls.initial.q;

    let mut belief: Option<KalmanBelief> = match ls.scenario.filter_init {
        FilterInit::FirstEcho => None,
        FilterInit::KnownState => {
            let mut p = nalgebra::Matrix6::zeros();
            for i in 0..3 {
                p[(i, i)] = INIT_POS_VAR;
                p[(i + 3, i + 3)] = INIT_VEL_VAR;
            }
            Some(KalmanBelief::new(ls.initial.to_vector(), p))
        }
    };
    // Prediction for the *upcoming* slot, refreshed at the end of each slot.
    let mut predicted: Option<KalmanBelief> = belief.as_ref().map(|b| predict(b, &ls.motion));

    let mut serving = 0usize;
    // (target station, dead slots still to pay).
    let mut pending: Option<(usize, usize)> = None;
    let mut revert_streak = 0usize;
    let mut events: Vec<String> = Vec::new();
    let mut records: Vec<SlotRecord> = Vec::with_capacity(slots);
    let mut beliefs: Vec<Option<KalmanBelief>> = Vec::with_capacity(slots);

    let mut training: Option<TrainingState> = match ls.scenario.beam {
        BeamSpec { mode: BeamMode::Predictive, .. } => None,
        BeamSpec { mode: BeamMode::Training, phi_bins, theta_bins, slots_per_beam, period_slots } => {
            let radio = &ls.stations[0].radio;
            let codebook = Codebook::uniform_grid(phi_bins, theta_bins, radio.mt, radio.nt)?;
            let sweep_len = codebook.len() * slots_per_beam;
            Some(TrainingState {
                codebook,
                slots_per_beam,
                period: period_slots.unwrap_or(usize::MAX),
                sweep_len,
                fixed: 0,
                best: None,
            })
        }
    };

    // Beam applied to slot 1: the first sweep beam in training mode, else a
    // beam at the best position knowledge available before any echo (the
    // prediction from a known-state init, or the initial-access position).
    let mut beam: BeamformingVector = match &training {
        Some(ts) => ts.beam_for(1).clone(),
        None => {
            let radio = &ls.stations[0].radio;
            let target = predicted.as_ref().map(|p| p.position()).unwrap_or(access_position);
            let (b, fell_back) = predictive_beam(&target, &ls.stations[0].position(), radio.mt, radio.nt);
            if fell_back {
                events.push("slot 1: predictive beam fell back to boresight".into());
            }
            b
        }
    };

    for n in 1..=slots {
        truth = step(&truth, &ls.motion, &ls.map.region, &mut truth_rng);
        let station = &ls.stations[serving];
        let bs_pos = station.position();

        // --- sense -------------------------------------------------------
        let scene = SensingScene {
            map: &ls.map,
            bs_position: bs_pos,
            radio: &station.radio,
            noise: &ls.noise,
            rcs_scale: ls.scenario.rcs_scale,
            blocker: ls.blocker,
        };
        let outcome = synthesize_measurement(&scene, &truth, &beam, &mut meas_rng)?;
        let link_true =
            if outcome.origin() == EchoOrigin::Uav { LinkState::Los } else { LinkState::Nlos };
        let echo = outcome.detected().copied();

        // --- identify, then update or coast -------------------------------
        let mut nis_logged = f64::NAN;
        let decision: LinkStateDecision = match predicted.as_ref() {
            Some(pred) => {
                let mnoise = match &echo {
                    Some(m) => MeasurementNoise::from_echo_snr(&ls.noise, m.echo_snr)?,
                    // Unused on a miss; any valid covariance will do.
                    None => MeasurementNoise::from_stds(1.0, 1.0, 1.0, 1.0)?,
                };
                let dec = match identify(pred, echo.as_ref(), &station.lpm, &mnoise, &ls.ident_cfg) {
                    Ok(d) => d,
                    Err(e @ (Error::UnsupportedGeometry(_) | Error::SingularGeometry(_))) => {
                        events.push(format!(
                            "slot {n}: identification fell back to the map prior alone ({e})"
                        ));
                        let (lp, clamped) = station.lpm.query_clamped(&pred.position());
                        decide_missed(lp.p_los, clamped, &ls.ident_cfg)
                    }
                    Err(e) => return Err(e),
                };
                if dec.state.is_los() {
                    if let Some(m) = &echo {
                        match update(pred, &bs_pos, &m.observation(), &mnoise) {
                            Ok(UpdateOutcome::Applied(info)) => {
                                if info.used_numeric_jacobian {
                                    events.push(format!(
                                        "slot {n}: numeric measurement Jacobian (near-zenith geometry)"
                                    ));
                                }
                                nis_logged = info.nis;
                                belief = Some(info.belief);
                            }
                            Ok(UpdateOutcome::Skipped { condition }) => {
                                events.push(format!(
                                    "slot {n}: update skipped, innovation covariance condition {condition:.3e}"
                                ));
                                belief = Some(pred.clone());
                            }
                            Err(e @ (Error::UnsupportedGeometry(_) | Error::SingularGeometry(_))) => {
                                events.push(format!("slot {n}: update fell back to coasting ({e})"));
                                belief = Some(pred.clone());
                            }
                            Err(e) => return Err(e),
                        }
                    } else {
                        // A LoS verdict without an echo cannot arise (misses
                        // force NLoS); coast defensively if it ever did.
                        belief = Some(pred.clone());
                    }
                } else {
                    belief = Some(pred.clone());
                }
                dec
            }
            None => {
                // Still waiting for a usable first echo.
                match &echo {
                    Some(m) => {
                        let cand = KalmanBelief::from_first_measurement(&bs_pos, m.d, m.phi, m.theta);
                        let (lp, clamped) = station.lpm.query_clamped(&cand.position());
                        let state = classify(lp.p_los, ls.ident_cfg.threshold);
                        if state.is_los() {
                            belief = Some(cand);
                        }
                        LinkStateDecision {
                            state,
                            posterior_los: lp.p_los,
                            prior_los: lp.p_los,
                            likelihood_ratio: 1.0,
                            nis: None,
                            prior_clamped: clamped,
                        }
                    }
                    None => {
                        let (lp, clamped) = station.lpm.query_clamped(&access_position);
                        decide_missed(lp.p_los, clamped, &ls.ident_cfg)
                    }
                }
            }
        };

        // --- associate -----------------------------------------------------
        // Dead slots were scheduled by an earlier slot's decision.
        let in_dead_slot = pending.is_some();
        if !in_dead_slot {
            let query_pos = predicted.as_ref().map(|p| p.position()).unwrap_or(access_position);
            if !decision.state.is_los() && ls.stations.len() > 1 {
                if let Ok(c) = select_bs_on_nlos(&ls.stations, serving, &query_pos) {
                    if c.p_los > decision.prior_los {
                        pending = Some((c.id, ls.rate_cfg.handover_delay_slots));
                        revert_streak = 0;
                    }
                }
            }
            if pending.is_none() && serving != 0 {
                let p_primary = ls.stations[0].lpm.query_clamped(&query_pos).0.p_los;
                if p_primary > ls.rate_cfg.revert_threshold {
                    revert_streak += 1;
                } else {
                    revert_streak = 0;
                }
                if revert_streak >= ls.rate_cfg.revert_streak {
                    pending = Some((0, ls.rate_cfg.handover_delay_slots));
                    revert_streak = 0;
                }
            }
        }

        // --- rate and logging ----------------------------------------------
        let (gain_true, snr_los) = match geometry_observables(&bs_pos, &truth) {
            Ok(o) => {
                let g = beam_gain(&beam, o.phi, o.theta);
                (g, comm_snr(&station.radio, o.d, &beam, o.phi, o.theta)?)
            }
            // Below the array plane: out of service for this slot.
            Err(Error::UnsupportedGeometry(_)) | Err(Error::SingularGeometry(_)) => (0.0, 0.0),
            Err(e) => return Err(e),
        };
        let in_sweep = training.as_ref().map(|ts| ts.in_sweep(n)).unwrap_or(false);
        if let Some(ts) = training.as_mut() {
            ts.observe(n, gain_true);
        }
        let branch = if in_dead_slot {
            RateBranch::Handover
        } else if link_true.is_los() {
            RateBranch::Los
        } else {
            RateBranch::NlosStay
        };
        let (mut rate, mut effective_snr) = (
            achievable_rate(branch, snr_los, ls.rate_cfg.nlos_penalty_db),
            match branch {
                RateBranch::Los => snr_los,
                RateBranch::NlosStay => snr_los * 10f64.powf(-ls.rate_cfg.nlos_penalty_db / 10.0),
                RateBranch::Handover => 0.0,
            },
        );
        if in_sweep {
            // Sweep slots carry pilots, not data.
            rate = 0.0;
            effective_snr = 0.0;
        }
        let snr_db =
            if effective_snr > 0.0 { 10.0 * effective_snr.log10() } else { f64::NEG_INFINITY };
        let estimate = belief
            .as_ref()
            .map(|b| b.state())
            .unwrap_or_else(|| UavState::new(access_position, Vec3::zeros()));
        records.push(SlotRecord {
            slot: n,
            truth,
            estimate,
            link_true,
            link_est: decision.state,
            posterior_los: decision.posterior_los,
            bs_id: serving,
            beam_gain: gain_true,
            snr_db,
            rate,
            nis: nis_logged,
        });
        beliefs.push(belief.clone());

        // --- end of slot: pay handover dead time, then pick the next beam ---
        if let Some((target, remaining)) = pending {
            if in_dead_slot {
                if remaining <= 1 {
                    serving = target;
                    pending = None;
                } else {
                    pending = Some((target, remaining - 1));
                }
            } else if remaining == 0 {
                // Zero-delay policy: switch at the trigger slot's end.
                serving = target;
                pending = None;
            }
        }
        predicted = belief.as_ref().map(|b| predict(b, &ls.motion));
        let next_station = &ls.stations[serving];
        beam = match &training {
            Some(ts) => {
                if n < slots {
                    ts.beam_for(n + 1).clone()
                } else {
                    beam
                }
            }
            None => {
                let target = predicted.as_ref().map(|p| p.position()).unwrap_or(access_position);
                let (b, fell_back) = predictive_beam(
                    &target,
                    &next_station.position(),
                    next_station.radio.mt,
                    next_station.radio.nt,
                );
                if fell_back && n < slots {
                    events.push(format!("slot {}: predictive beam fell back to boresight", n + 1));
                }
                b
            }
        };
    }

    Ok(RunOutput { records, fallback_events: events, beliefs })
}

// ---------------------------------------------------------------------------
// Metrics

/// Run-level summary statistics, all computable from the records CSV alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub pos_rmse: f64,
    pub vel_rmse: f64,
    /// Fraction of slots whose link verdict matches the truth.
    pub ident_accuracy: f64,
    /// P(declared NLoS | truly NLoS); `None` when no slot was truly NLoS.
    pub detection_rate: Option<f64>,
    /// P(declared NLoS | truly LoS); `None` when no slot was truly LoS.
    pub false_alarm_rate: Option<f64>,
    pub mean_rate: f64,
    /// Fraction of slots with rate below the outage threshold.
    pub outage_fraction: f64,
    /// Serving-station changes between consecutive slots.
    pub handover_count: usize,
}

/// Compute metrics over one run's records. `r_min` is the outage threshold
/// (see [`DEFAULT_OUTAGE_RATE`]).
pub fn compute_metrics(records: &[SlotRecord], r_min: f64) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::InvalidInput("metrics require at least one record".into()));
    }
    let l = records.len() as f64;
    let mut pos_sq = 0.0;
    let mut vel_sq = 0.0;
    let mut correct = 0usize;
    let mut true_nlos = 0usize;
    let mut detected_nlos = 0usize;
    let mut true_los = 0usize;
    let mut false_alarms = 0usize;
    let mut rate_sum = 0.0;
    let mut outages = 0usize;
    let mut handovers = 0usize;
    for (i, r) in records.iter().enumerate() {
        pos_sq += (r.truth.q - r.estimate.q).norm_squared();
        vel_sq += (r.truth.v - r.estimate.v).norm_squared();
        if r.link_true == r.link_est {
            correct += 1;
        }
        match r.link_true {
            LinkState::Nlos => {
                true_nlos += 1;
                if r.link_est == LinkState::Nlos {
                    detected_nlos += 1;
                }
            }
            LinkState::Los => {
                true_los += 1;
                if r.link_est == LinkState::Nlos {
                    false_alarms += 1;
                }
            }
        }
        rate_sum += r.rate;
        if r.rate < r_min {
            outages += 1;
        }
        if i > 0 && r.bs_id != records[i - 1].bs_id {
            handovers += 1;
        }
    }
    Ok(Metrics {
        pos_rmse: (pos_sq / l).sqrt(),
        vel_rmse: (vel_sq / l).sqrt(),
        ident_accuracy: correct as f64 / l,
        detection_rate: (true_nlos > 0).then(|| detected_nlos as f64 / true_nlos as f64),
        false_alarm_rate: (true_los > 0).then(|| false_alarms as f64 / true_los as f64),
        mean_rate: rate_sum / l,
        outage_fraction: outages as f64 / l,
        handover_count: handovers,
    })
}

/// Names and per-run values of every metric, in a fixed order.
fn metric_columns(per_run: &[Metrics]) -> Vec<(&'static str, Vec<Option<f64>>)> {
    vec![
        ("pos_rmse", per_run.iter().map(|m| Some(m.pos_rmse)).collect()),
        ("vel_rmse", per_run.iter().map(|m| Some(m.vel_rmse)).collect()),
        ("ident_accuracy", per_run.iter().map(|m| Some(m.ident_accuracy)).collect()),
        ("detection_rate", per_run.iter().map(|m| m.detection_rate).collect()),
        ("false_alarm_rate", per_run.iter().map(|m| m.false_alarm_rate).collect()),
        ("mean_rate", per_run.iter().map(|m| Some(m.mean_rate)).collect()),
        ("outage_fraction", per_run.iter().map(|m| Some(m.outage_fraction)).collect()),
        ("handover_count", per_run.iter().map(|m| Some(m.handover_count as f64)).collect()),
    ]
}

/// Mean and bootstrap 95% confidence interval of one metric over a batch.
/// Runs where the metric is undefined are excluded and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub name: &'static str,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub defined_runs: usize,
}

/// A Monte-Carlo batch: per-run metrics and their aggregate summaries.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub per_run: Vec<Metrics>,
    pub summaries: Vec<MetricSummary>,
    /// Runs that reported at least one fallback event.
    pub fallback_run_count: usize,
}

/// Percentile-bootstrap CI of the mean. Values are sorted first so the
/// interval depends only on the multiset of values, not their order.
fn bootstrap_ci(values: &[f64], rng: &mut ChaCha12Rng) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut means = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut s = 0.0;
        for _ in 0..sorted.len() {
            s += sorted[rng.random_range(0..sorted.len())];
        }
        means.push(s / sorted.len() as f64);
    }
    means.sort_by(f64::total_cmp);
    let pick = |p: f64| means[(p * (BOOTSTRAP_RESAMPLES - 1) as f64).round() as usize];
    (pick(0.025), pick(0.975))
}

/// Aggregate per-run metrics into means and 95% bootstrap CIs. Deterministic
/// given the root seed, and invariant to the order of `per_run`.
pub fn summarize_batch(per_run: &[Metrics], root_seed: u64) -> Vec<MetricSummary> {
    let mut rng = ChaCha12Rng::seed_from_u64(split_seed(root_seed, 0xB007_5AD5));
    metric_columns(per_run)
        .into_iter()
        .map(|(name, column)| {
            let mut defined: Vec<f64> = column.into_iter().flatten().collect();
            // Sort so the mean (a float sum) and the CI depend only on the
            // multiset of values, never on run ordering.
            defined.sort_by(f64::total_cmp);
            let mean = if defined.is_empty() {
                f64::NAN
            } else {
                defined.iter().sum::<f64>() / defined.len() as f64
            };
            let (ci_low, ci_high) = bootstrap_ci(&defined, &mut rng);
            MetricSummary { name, mean, ci_low, ci_high, defined_runs: defined.len() }
        })
        .collect()
}

/// Run `runs` Monte-Carlo repetitions with per-run seeds split from
/// `root_seed`, and summarize the metrics.
pub fn run_batch(ls: &LoadedScenario, runs: usize, root_seed: u64, r_min: f64) -> Result<BatchOutput> {
    if runs == 0 {
        return Err(Error::InvalidInput("batch needs at least one run".into()));
    }
    let mut per_run = Vec::with_capacity(runs);
    let mut fallback_run_count = 0usize;
    // Indices 0 and 1 under any seed belong to that seed's own noise streams,
    // so per-run seeds start at index 2.
    for i in 0..runs {
        let out = run_seeded(ls, split_seed(root_seed, 2 + i as u64))?;
        if !out.fallback_events.is_empty() {
            fallback_run_count += 1;
        }
        per_run.push(compute_metrics(&out.records, r_min)?);
    }
    let summaries = summarize_batch(&per_run, root_seed);
    Ok(BatchOutput { per_run, summaries, fallback_run_count })
}
