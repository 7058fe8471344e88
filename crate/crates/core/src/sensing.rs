//! Mono-static echo synthesis at the base station.
//!
//! Each slot the BS transmits a beamformed pulse and receives one echo — from
//! the UAV itself when the sight line is clear, or from the first blocking
//! obstacle when it is not. The echo is abstracted at measurement level:
//! range, azimuth, zenith angle and radial velocity of the reflector, with
//! additive Gaussian errors whose standard deviations shrink as 1/√SNR, and a
//! detection is declared only above an SNR floor. Delay and Doppler stay
//! implicit (`τ = 2d/c`, `μ = 2 f_c v_r / c`); no waveform is modulated.
//!
//! Echo power follows the radar equation: two-way `1/d⁴` path loss, transmit
//! and receive array factors, the beamforming gain toward the reflector, and
//! a reflection-strength scale standing in for RCS.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::beamforming::{beam_gain, BeamformingVector};
use crate::citymap::{CityMap, Occlusion};
use crate::error::{Error, Result};
use crate::kinematics::UavState;
use crate::Vec3;

/// Radio-link and array constants shared by sensing and communication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioConfig {
    /// Carrier frequency (Hz).
    pub f_c: f64,
    /// Propagation speed (m/s).
    pub c: f64,
    /// Transmit array dimensions.
    pub mt: usize,
    pub nt: usize,
    /// Receive array dimensions.
    pub mr: usize,
    pub nr: usize,
    /// Transmit power per slot (linear).
    pub p_n: f64,
    /// Reference path gain at 1 m.
    pub kappa_ref: f64,
    /// BS radar receiver noise power.
    pub sigma_r2: f64,
    /// UAV communication receiver noise power.
    pub sigma_c2: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            f_c: 30e9,
            c: 3e8,
            mt: 8,
            nt: 8,
            mr: 8,
            nr: 8,
            p_n: 1.0,
            kappa_ref: 1e-2,
            sigma_r2: 1e-9,
            sigma_c2: 1e-9,
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("f_c", self.f_c),
            ("c", self.c),
            ("p_n", self.p_n),
            ("kappa_ref", self.kappa_ref),
            ("sigma_r2", self.sigma_r2),
            ("sigma_c2", self.sigma_c2),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("radio config: {name} must be positive, got {v}")));
            }
        }
        for (name, d) in [("mt", self.mt), ("nt", self.nt), ("mr", self.mr), ("nr", self.nr)] {
            if d < 1 {
                return Err(Error::InvalidInput(format!("radio config: {name} must be >= 1, got {d}")));
            }
        }
        Ok(())
    }
}

/// Measurement-noise constants, quoted at SNR = 1 and scaled by 1/√SNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensingNoise {
    /// Range std (m) at SNR 1.
    pub sigma_d0: f64,
    /// Angle std (rad) at SNR 1, shared by azimuth and zenith.
    pub sigma_a0: f64,
    /// Radial-velocity std (m/s) at SNR 1.
    pub sigma_v0: f64,
    /// Echoes below this SNR are not detected at all.
    pub snr_floor: f64,
}

impl Default for SensingNoise {
    fn default() -> Self {
        SensingNoise { sigma_d0: 10.0, sigma_a0: 0.1, sigma_v0: 5.0, snr_floor: 1e-3 }
    }
}

impl SensingNoise {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_d0", self.sigma_d0),
            ("sigma_a0", self.sigma_a0),
            ("sigma_v0", self.sigma_v0),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("sensing noise: {name} must be non-negative, got {v}")));
            }
        }
        if !(self.snr_floor >= 0.0) || !self.snr_floor.is_finite() {
            return Err(Error::InvalidInput(format!(
                "sensing noise: snr_floor must be non-negative, got {}",
                self.snr_floor
            )));
        }
        Ok(())
    }
}

/// How the blocking obstacle reflects: echo strength relative to the UAV's
/// and its (apparent) radial velocity — static by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockerModel {
    pub rcs_factor: f64,
    pub radial_speed: f64,
}

impl Default for BlockerModel {
    fn default() -> Self {
        BlockerModel { rcs_factor: 1.0, radial_speed: 0.0 }
    }
}

/// Who the echo actually bounced off. Ground-truth bookkeeping only: the
/// estimator side (tracking/identification) never reads this tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EchoOrigin {
    Uav,
    Blocker,
}

/// One received echo: noisy reflector observables plus the true echo SNR
/// (reported noiselessly — it sets the measurement noise covariance).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EchoMeasurement {
    pub d: f64,
    pub phi: f64,
    pub theta: f64,
    pub v_r: f64,
    pub echo_snr: f64,
    pub origin: EchoOrigin,
}

impl EchoMeasurement {
    /// The observation vector (d, φ, θ, v_r) the estimator consumes.
    pub fn observation(&self) -> nalgebra::Vector4<f64> {
        nalgebra::Vector4::new(self.d, self.phi, self.theta, self.v_r)
    }
}

/// Per-slot sensing outcome: a detection, or a miss with the SNR that was too
/// weak (0 when the reflector sat outside the field of view entirely).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EchoOutcome {
    Detected(EchoMeasurement),
    Missed { origin: EchoOrigin, echo_snr: f64 },
}

impl EchoOutcome {
    pub fn detected(&self) -> Option<&EchoMeasurement> {
        match self {
            EchoOutcome::Detected(m) => Some(m),
            EchoOutcome::Missed { .. } => None,
        }
    }

    pub fn origin(&self) -> EchoOrigin {
        match self {
            EchoOutcome::Detected(m) => m.origin,
            EchoOutcome::Missed { origin, .. } => *origin,
        }
    }
}

/// Wrap an angle to (−π, π].
pub fn wrap_angle(x: f64) -> f64 {
    let mut r = x % std::f64::consts::TAU;
    if r <= -std::f64::consts::PI {
        r += std::f64::consts::TAU;
    } else if r > std::f64::consts::PI {
        r -= std::f64::consts::TAU;
    }
    r
}

/// Noise-free reflector observables as seen from an upward-facing array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observables {
    /// Range (m).
    pub d: f64,
    /// Azimuth in (−π, π].
    pub phi: f64,
    /// Zenith angle off the array normal, in [0, π/2].
    pub theta: f64,
    /// Radial velocity (m/s), positive receding.
    pub v_r: f64,
}

impl Observables {
    pub fn to_vector(&self) -> nalgebra::Vector4<f64> {
        nalgebra::Vector4::new(self.d, self.phi, self.theta, self.v_r)
    }
}

/// Exact (d, φ, θ, v_r) of a moving point target relative to the array at
/// `bs`. Errors when the target coincides with the array (range undefined) or
/// sits below the array plane (outside an upward-facing UPA's field of view).
pub fn geometry_observables(bs: &Vec3, state: &UavState) -> Result<Observables> {
    let delta = state.q - bs;
    let d = delta.norm();
    if !d.is_finite() {
        return Err(Error::InvalidInput("non-finite target position".into()));
    }
    if d < 1e-9 {
        return Err(Error::SingularGeometry("target coincides with the array".into()));
    }
    if delta.z < 0.0 {
        return Err(Error::UnsupportedGeometry(format!(
            "target {} m below the array plane",
            -delta.z
        )));
    }
    let theta = (delta.z / d).clamp(-1.0, 1.0).acos();
    let phi = wrap_angle(delta.y.atan2(delta.x));
    let v_r = delta.dot(&state.v) / d;
    Ok(Observables { d, phi, theta, v_r })
}

/// Echo SNR from the radar equation: transmit power, both array factors, the
/// beam gain toward the reflector and its reflection strength, against two-way
/// `d⁴` path loss and the radar receiver noise.
pub fn echo_snr(cfg: &RadioConfig, d: f64, beam_gain: f64, rcs_scale: f64) -> Result<f64> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::InvalidInput(format!("distance must be positive, got {d}")));
    }
    if !(beam_gain >= 0.0) || !(rcs_scale >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "beam_gain and rcs_scale must be non-negative, got ({beam_gain}, {rcs_scale})"
        )));
    }
    let arrays = (cfg.mt * cfg.nt * cfg.mr * cfg.nr) as f64;
    let kappa2 = cfg.kappa_ref * cfg.kappa_ref;
    Ok(cfg.p_n * arrays * beam_gain * rcs_scale * kappa2 / (d.powi(4) * cfg.sigma_r2))
}

/// Everything fixed about the sensing scene within one run.
#[derive(Debug, Clone, Copy)]
pub struct SensingScene<'a> {
    pub map: &'a CityMap,
    pub bs_position: Vec3,
    pub radio: &'a RadioConfig,
    pub noise: &'a SensingNoise,
    /// UAV reflection strength scale.
    pub rcs_scale: f64,
    pub blocker: BlockerModel,
}

/// Synthesize one slot's echo for the true UAV state under the current beam.
///
/// The reflector is the UAV when the BS–UAV segment is clear, else the first
/// blocking point (with the blocker's own radial velocity and RCS factor).
/// The beam gain is evaluated at the *reflector's* true direction. Reflectors
/// below the array plane return no usable echo (a miss with SNR 0), as does
/// any echo whose SNR falls below the detection floor. Noise draw order is
/// fixed: range, azimuth, zenith, radial velocity.
pub fn synthesize_measurement<R: Rng + ?Sized>(
    scene: &SensingScene,
    state: &UavState,
    beam: &BeamformingVector,
    rng: &mut R,
) -> Result<EchoOutcome> {
    let occlusion = scene.map.segment_blocked(&scene.bs_position, &state.q)?;
    let (origin, reflector, rcs) = match occlusion {
        Occlusion::Clear => (EchoOrigin::Uav, *state, scene.rcs_scale),
        Occlusion::Blocked { point, .. } => {
            // The blocker reflects from the first obstruction point; its
            // radial velocity is the model's, not derived from UAV motion.
            let pseudo = UavState::new(point, Vec3::zeros());
            (EchoOrigin::Blocker, pseudo, scene.rcs_scale * scene.blocker.rcs_factor)
        }
    };
    let mut obs = match geometry_observables(&scene.bs_position, &reflector) {
        Ok(o) => o,
        // Out of the array's field of view: nothing comes back.
        Err(Error::UnsupportedGeometry(_)) => {
            return Ok(EchoOutcome::Missed { origin, echo_snr: 0.0 })
        }
        Err(e) => return Err(e),
    };
    if origin == EchoOrigin::Blocker {
        obs.v_r = scene.blocker.radial_speed;
    }

    let gain = beam_gain(beam, obs.phi, obs.theta);
    let snr = echo_snr(scene.radio, obs.d, gain, rcs)?;
    if snr < scene.noise.snr_floor {
        return Ok(EchoOutcome::Missed { origin, echo_snr: snr });
    }

    let scale = 1.0 / snr.sqrt();
    let mut draw = || rng.sample::<f64, _>(StandardNormal);
    let d = (obs.d + scene.noise.sigma_d0 * scale * draw()).max(1e-6);
    let phi = wrap_angle(obs.phi + scene.noise.sigma_a0 * scale * draw());
    let theta = (obs.theta + scene.noise.sigma_a0 * scale * draw()).clamp(0.0, std::f64::consts::FRAC_PI_2);
    let v_r = obs.v_r + scene.noise.sigma_v0 * scale * draw();
    Ok(EchoOutcome::Detected(EchoMeasurement { d, phi, theta, v_r, echo_snr: snr, origin }))
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citymap::{BuildingPrism, Region};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn zenith_target() {
        let obs = geometry_observables(
            &Vec3::new(0.0, 0.0, 0.0),
            &UavState::new(Vec3::new(0.0, 0.0, 100.0), Vec3::new(0.0, 0.0, 10.0)),
        )
        .unwrap();
        assert_eq!(obs.d, 100.0);
        assert_eq!(obs.theta, 0.0);
        assert_eq!(obs.v_r, 10.0);
    }

    #[test]
    fn horizon_limit() {
        let obs = geometry_observables(
            &Vec3::new(0.0, 0.0, 0.0),
            &UavState::new(Vec3::new(100.0, 0.0, 1e-9), Vec3::zeros()),
        )
        .unwrap();
        assert!((obs.theta - FRAC_PI_2).abs() < 1e-9);
        assert_eq!(obs.phi, 0.0);
    }

    #[test]
    fn radial_velocity_hand_check() {
        let obs = geometry_observables(
            &Vec3::new(0.0, 0.0, 25.0),
            &UavState::new(Vec3::new(30.0, 40.0, 25.0), Vec3::new(3.0, 4.0, 0.0)),
        )
        .unwrap();
        assert_eq!(obs.d, 50.0);
        assert!((obs.v_r - 5.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_geometry_errors() {
        let bs = Vec3::new(10.0, 10.0, 10.0);
        assert!(matches!(
            geometry_observables(&bs, &UavState::new(bs, Vec3::zeros())),
            Err(Error::SingularGeometry(_))
        ));
        assert!(matches!(
            geometry_observables(&bs, &UavState::new(Vec3::new(20.0, 10.0, 5.0), Vec3::zeros())),
            Err(Error::UnsupportedGeometry(_))
        ));
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-3.0 * PI / 2.0) - PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(7.0 * PI) - PI).abs() < 1e-9);
        for x in [-100.0f64, -3.2, 0.0, 0.1, 55.5] {
            let w = wrap_angle(x);
            assert!(w > -PI && w <= PI, "wrap({x}) = {w}");
            // Same direction modulo 2π.
            assert!(((w - x) / std::f64::consts::TAU).fract().abs() < 1e-9);
        }
    }

    #[test]
    fn echo_snr_hand_value_and_laws() {
        let cfg = RadioConfig::default();
        // 1 * 4096 * 1 * 1 * 1e-4 / (200^4 * 1e-9) = 0.256.
        let snr = echo_snr(&cfg, 200.0, 1.0, 1.0).unwrap();
        assert!((snr - 0.256).abs() < 1e-12, "snr {snr}");
        // d^4 law.
        let snr2 = echo_snr(&cfg, 400.0, 1.0, 1.0).unwrap();
        assert!((snr / snr2 - 16.0).abs() < 1e-9);
        // Linear in beam gain; zero gain kills the echo.
        assert_eq!(echo_snr(&cfg, 200.0, 0.0, 1.0).unwrap(), 0.0);
        let half = echo_snr(&cfg, 200.0, 0.5, 1.0).unwrap();
        assert!((snr / half - 2.0).abs() < 1e-12);
        assert!(matches!(echo_snr(&cfg, -1.0, 1.0, 1.0), Err(Error::InvalidInput(_))));
    }

    fn scene_map(buildings: Vec<BuildingPrism>) -> CityMap {
        let region = Region::new(
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(400.0, 400.0, 200.0),
            Vec3::new(20.0, 20.0, 20.0),
        )
        .unwrap();
        CityMap::new(region, buildings).unwrap()
    }

    #[test]
    fn noiseless_los_echo_equals_geometry() {
        let map = scene_map(vec![]);
        let radio = RadioConfig { p_n: 1000.0, ..RadioConfig::default() };
        let noise = SensingNoise { sigma_d0: 0.0, sigma_a0: 0.0, sigma_v0: 0.0, ..SensingNoise::default() };
        let bs = Vec3::new(200.0, 200.0, 30.0);
        let state = UavState::new(Vec3::new(260.0, 280.0, 90.0), Vec3::new(4.0, -3.0, 1.0));
        let truth = geometry_observables(&bs, &state).unwrap();
        let beam = BeamformingVector::steered(truth.phi, truth.theta, 8, 8).unwrap();
        let scene = SensingScene {
            map: &map,
            bs_position: bs,
            radio: &radio,
            noise: &noise,
            rcs_scale: 1.0,
            blocker: BlockerModel::default(),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        match synthesize_measurement(&scene, &state, &beam, &mut rng).unwrap() {
            EchoOutcome::Detected(m) => {
                assert_eq!(m.origin, EchoOrigin::Uav);
                assert!((m.d - truth.d).abs() < 1e-12);
                assert!((m.phi - truth.phi).abs() < 1e-12);
                assert!((m.theta - truth.theta).abs() < 1e-12);
                assert!((m.v_r - truth.v_r).abs() < 1e-12);
                let expected_snr = echo_snr(&radio, truth.d, 1.0, 1.0).unwrap();
                assert!((m.echo_snr / expected_snr - 1.0).abs() < 1e-9);
            }
            other => panic!("expected detection, got {other:?}"),
        }
    }

    #[test]
    fn blocked_scene_returns_blocker_echo_at_first_hit() {
        let wall = BuildingPrism {
            footprint: vec![[100.0, 180.0], [120.0, 180.0], [120.0, 220.0], [100.0, 220.0]],
            height: 80.0,
        };
        let map = scene_map(vec![wall]);
        let radio = RadioConfig { p_n: 1e6, ..RadioConfig::default() };
        let noise = SensingNoise { sigma_d0: 0.0, sigma_a0: 0.0, sigma_v0: 0.0, ..SensingNoise::default() };
        let bs = Vec3::new(40.0, 200.0, 30.0);
        let state = UavState::new(Vec3::new(200.0, 200.0, 50.0), Vec3::new(0.0, 10.0, 0.0));
        let hit = match map.segment_blocked(&bs, &state.q).unwrap() {
            Occlusion::Blocked { point, .. } => point,
            Occlusion::Clear => panic!("scene should be blocked"),
        };
        assert!((hit.x - 100.0).abs() < 1e-9);
        let truth = geometry_observables(&bs, &UavState::new(hit, Vec3::zeros())).unwrap();
        let beam = BeamformingVector::steered(truth.phi, truth.theta, 8, 8).unwrap();
        let scene = SensingScene {
            map: &map,
            bs_position: bs,
            radio: &radio,
            noise: &noise,
            rcs_scale: 1.0,
            blocker: BlockerModel { rcs_factor: 2.0, radial_speed: 0.0 },
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        match synthesize_measurement(&scene, &state, &beam, &mut rng).unwrap() {
            EchoOutcome::Detected(m) => {
                assert_eq!(m.origin, EchoOrigin::Blocker);
                assert!((m.d - truth.d).abs() < 1e-12, "range {} vs blocker distance {}", m.d, truth.d);
                assert_eq!(m.v_r, 0.0);
                // rcs_factor doubles the echo power.
                let base = echo_snr(&radio, truth.d, 1.0, 1.0).unwrap();
                assert!((m.echo_snr / base - 2.0).abs() < 1e-9);
            }
            other => panic!("expected detection, got {other:?}"),
        }
    }

    #[test]
    fn weak_echo_is_missed_with_snr_reported() {
        let map = scene_map(vec![]);
        let radio = RadioConfig { p_n: 1e-12, ..RadioConfig::default() };
        let noise = SensingNoise::default();
        let bs = Vec3::new(200.0, 200.0, 30.0);
        let state = UavState::new(Vec3::new(300.0, 300.0, 120.0), Vec3::zeros());
        let beam = BeamformingVector::boresight(8, 8).unwrap();
        let scene = SensingScene {
            map: &map,
            bs_position: bs,
            radio: &radio,
            noise: &noise,
            rcs_scale: 1.0,
            blocker: BlockerModel::default(),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        match synthesize_measurement(&scene, &state, &beam, &mut rng).unwrap() {
            EchoOutcome::Missed { origin, echo_snr } => {
                assert_eq!(origin, EchoOrigin::Uav);
                assert!(echo_snr > 0.0 && echo_snr < noise.snr_floor);
            }
            other => panic!("expected miss, got {other:?}"),
        }
    }

    #[test]
    fn range_noise_std_scales_with_snr() {
        // Sample std of range error over 1e4 draws within 5% of sigma_d0/sqrt(SNR).
        let map = scene_map(vec![]);
        let radio = RadioConfig { p_n: 1000.0, ..RadioConfig::default() };
        let noise = SensingNoise::default();
        let bs = Vec3::new(200.0, 200.0, 30.0);
        let state = UavState::new(Vec3::new(260.0, 280.0, 90.0), Vec3::new(4.0, -3.0, 1.0));
        let truth = geometry_observables(&bs, &state).unwrap();
        let beam = BeamformingVector::steered(truth.phi, truth.theta, 8, 8).unwrap();
        let scene = SensingScene {
            map: &map,
            bs_position: bs,
            radio: &radio,
            noise: &noise,
            rcs_scale: 1.0,
            blocker: BlockerModel::default(),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let n = 10_000;
        let mut expected = 0.0;
        for _ in 0..n {
            match synthesize_measurement(&scene, &state, &beam, &mut rng).unwrap() {
                EchoOutcome::Detected(m) => {
                    expected = noise.sigma_d0 / m.echo_snr.sqrt();
                    let e = m.d - truth.d;
                    sum += e;
                    sum2 += e * e;
                }
                other => panic!("unexpected miss: {other:?}"),
            }
        }
        let mean = sum / n as f64;
        let std = (sum2 / n as f64 - mean * mean).sqrt();
        assert!((std / expected - 1.0).abs() < 0.05, "std {std} vs expected {expected}");
    }

    #[test]
    fn angles_stay_in_range_under_noise() {
        let map = scene_map(vec![]);
        let radio = RadioConfig::default(); // modest SNR -> visible noise
        let noise = SensingNoise { snr_floor: 0.0, ..SensingNoise::default() };
        let bs = Vec3::new(200.0, 200.0, 30.0);
        // Near-zenith geometry: theta noise would go negative without the clamp.
        let state = UavState::new(Vec3::new(201.0, 200.0, 150.0), Vec3::zeros());
        let truth = geometry_observables(&bs, &state).unwrap();
        let beam = BeamformingVector::steered(truth.phi, truth.theta, 8, 8).unwrap();
        let scene = SensingScene {
            map: &map,
            bs_position: bs,
            radio: &radio,
            noise: &noise,
            rcs_scale: 1.0,
            blocker: BlockerModel::default(),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..2000 {
            if let EchoOutcome::Detected(m) = synthesize_measurement(&scene, &state, &beam, &mut rng).unwrap()
            {
                assert!(m.theta >= 0.0 && m.theta <= FRAC_PI_2);
                assert!(m.phi > -PI && m.phi <= PI);
                assert!(m.d > 0.0);
            }
        }
    }
}
