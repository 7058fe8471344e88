//! Acceptance suite: one test per release criterion, each at its stated
//! tolerance and wall-clock budget. The harness emits one pass/fail line per
//! criterion; the printed summaries (visible with `--nocapture`) carry the
//! measured numbers.

use nalgebra::{Vector4, Vector6};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use skybeam::beamforming::{beam_gain, steering_vector, BeamformingVector};
use skybeam::citymap::{BuildingPrism, CityMap, Region};
use skybeam::identification::LinkState;
use skybeam::lpm::{LosProbabilityMap, RfMeasurement, PSEUDO_COUNT_FLOOR};
use skybeam::sensing::{echo_snr, wrap_angle};
use skybeam::sim::{
    run_batch, run_seeded, split_seed, BeamMode, BeamSpec, LoadedScenario, Scenario,
    DEFAULT_OUTAGE_RATE,
};
use skybeam::tracking::{analytic_jacobian, nees, predicted_observation};
use skybeam::Vec3;
use std::f64::consts::{FRAC_PI_2, PI};
use std::path::{Path, PathBuf};
use std::time::Instant;

fn workspace_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn load(rel: &str) -> LoadedScenario {
    Scenario::load(workspace_path(rel)).unwrap()
}

/// Wilson-Hilferty approximation of the chi-square quantile; accurate to a
/// fraction of a percent for the large degree-of-freedom counts used here.
fn chi2_quantile(df: f64, upper: bool) -> f64 {
    let z = if upper { 1.959963984540054 } else { -1.959963984540054 };
    let c = 2.0 / (9.0 * df);
    df * (1.0 - c + z * c.sqrt()).powi(3)
}

#[test]
fn criterion_1_steering_identities() {
    let started = Instant::now();
    let (mt, nt) = (8usize, 8usize);
    let mut worst_norm = 0.0f64;
    let mut worst_gain = 0.0f64;
    for i in 0..64 {
        for j in 0..64 {
            let phi = -PI + (i as f64 + 0.5) * 2.0 * PI / 64.0;
            let theta = (j as f64 + 0.5) * FRAC_PI_2 / 64.0;
            let a = steering_vector(phi, theta, mt, nt);
            let norm = a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            worst_norm = worst_norm.max((norm - 1.0).abs());
            let f = BeamformingVector::steered(phi, theta, mt, nt).unwrap();
            worst_gain = worst_gain.max((beam_gain(&f, phi, theta) - 1.0).abs());
        }
    }
    let elapsed = started.elapsed();
    assert!(worst_norm <= 1e-12, "steering norm deviates by {worst_norm:.3e}");
    assert!(worst_gain <= 1e-12, "matched gain deviates by {worst_gain:.3e}");
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}, budget 1 s");
    println!(
        "criterion 1 PASS: max |norm-1| = {worst_norm:.2e}, max |gain-1| = {worst_gain:.2e} \
         over 4096 angles ({:.3} s)",
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_2_jacobian_matches_central_differences() {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x1ACB);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let bs = Vec3::new(
            rng.random_range(0.0..200.0),
            rng.random_range(0.0..200.0),
            rng.random_range(0.0..30.0),
        );
        // Sample away from the zenith line and the array plane, where the
        // observation map is singular by construction.
        let alpha = rng.random_range(-PI..PI);
        let rho = rng.random_range(20.0..200.0);
        let x = Vector6::new(
            bs.x + rho * alpha.cos(),
            bs.y + rho * alpha.sin(),
            bs.z + rng.random_range(10.0..150.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
        );
        let analytic = analytic_jacobian(&bs, &x).unwrap();

        for col in 0..6 {
            let h = 1e-5 * x[col].abs().max(1.0);
            let mut xp = x;
            let mut xm = x;
            xp[col] += h;
            xm[col] -= h;
            let zp: Vector4<f64> = predicted_observation(&bs, &xp).unwrap();
            let zm: Vector4<f64> = predicted_observation(&bs, &xm).unwrap();
            for row in 0..4 {
                let mut dz = zp[row] - zm[row];
                if row == 1 {
                    dz = wrap_angle(dz);
                }
                let fd = dz / (2.0 * h);
                let rel = (analytic[(row, col)] - fd).abs() / fd.abs().max(1.0);
                worst = worst.max(rel);
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(worst < 1e-6, "worst relative Jacobian error {worst:.3e}");
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}, budget 1 s");
    println!(
        "criterion 2 PASS: worst relative error {worst:.2e} over 100 states ({:.3} s)",
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_3_filter_consistency_on_the_nominal_scenario() {
    let started = Instant::now();
    let ls = load("scenarios/nominal.json");
    assert_eq!(ls.scenario.slots, 500);
    let runs = 200usize;
    // Discard the transient where the deliberately broad initial covariance
    // dominates; afterwards the filter is in steady state.
    let warmup = 50usize;

    let mut per_run_nees = Vec::with_capacity(runs);
    let mut pos_sq_sum = 0.0f64;
    let mut pos_samples = 0usize;
    for i in 0..runs {
        let out = run_seeded(&ls, split_seed(ls.scenario.seed, 2 + i as u64)).unwrap();
        let mut acc = 0.0;
        let mut count = 0usize;
        for (k, r) in out.records.iter().enumerate() {
            pos_sq_sum += (r.truth.q - r.estimate.q).norm_squared();
            pos_samples += 1;
            if k >= warmup {
                let belief = out.beliefs[k].as_ref().expect("known-state init always has a belief");
                acc += nees(belief, &r.truth).unwrap();
                count += 1;
            }
        }
        per_run_nees.push(acc / count as f64);
    }
    let grand_nees = per_run_nees.iter().sum::<f64>() / runs as f64;
    let rmse = (pos_sq_sum / pos_samples as f64).sqrt();

    // Mean of 200 independent per-run time averages, each distributed around
    // the chi-square dim-6 mean; the interval treats every run as one
    // effective chi-square(6) draw, which absorbs the within-run correlation
    // of consecutive NEES samples.
    let df = 6.0 * runs as f64;
    let (lo, hi) = (chi2_quantile(df, false) / runs as f64, chi2_quantile(df, true) / runs as f64);

    // The scenario must actually operate at echo SNR >= 20 dB.
    let check = run_seeded(&ls, split_seed(ls.scenario.seed, 2)).unwrap();
    let mut min_echo_snr = f64::INFINITY;
    for r in &check.records {
        let d = (r.truth.q - ls.stations[r.bs_id].position()).norm();
        let snr =
            echo_snr(&ls.stations[r.bs_id].radio, d, r.beam_gain, ls.scenario.rcs_scale).unwrap();
        min_echo_snr = min_echo_snr.min(snr);
    }

    let elapsed = started.elapsed();
    assert!(min_echo_snr >= 100.0, "echo SNR floor {:.1} dB < 20 dB", 10.0 * min_echo_snr.log10());
    assert!(
        (lo..=hi).contains(&grand_nees),
        "time-averaged NEES {grand_nees:.3} outside [{lo:.3}, {hi:.3}]"
    );
    assert!(rmse < 5.0, "position RMSE {rmse:.3} m >= 5 m");
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 60 s");
    println!(
        "criterion 3 PASS: NEES {grand_nees:.3} in [{lo:.3}, {hi:.3}], RMSE {rmse:.3} m, \
         echo SNR >= {:.1} dB over {runs} runs ({:.2} s)",
        10.0 * min_echo_snr.log10(),
        elapsed.as_secs_f64()
    );
}

/// Exact blocked test of the open segment (bs -> p) against an axis-aligned
/// box footprint extruded over (0, h): slab clipping of the open parameter
/// interval. Independent of the production crossing-interval code.
fn rect_prism_blocks(a: &Vec3, b: &Vec3, x0: f64, x1: f64, y0: f64, y1: f64, h: f64) -> bool {
    let dir = b - a;
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut clip = |s0: f64, sd: f64| -> bool {
        if sd.abs() < 1e-300 {
            return s0 > 0.0;
        }
        let t = -s0 / sd;
        if sd > 0.0 {
            lo = lo.max(t);
        } else {
            hi = hi.min(t);
        }
        true
    };
    let ok = clip(a.x - x0, dir.x)
        && clip(x1 - a.x, -dir.x)
        && clip(a.y - y0, dir.y)
        && clip(y1 - a.y, -dir.y)
        && clip(a.z, dir.z)
        && clip(h - a.z, -dir.z);
    ok && lo < hi
}

#[test]
fn criterion_4_lpm_prior_fidelity_and_beta_refinement() {
    let started = Instant::now();
    let region = Region::new(
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(500.0, 500.0, 100.0),
        Vec3::new(10.0, 10.0, 10.0),
    )
    .unwrap();
    assert_eq!(region.counts(), [50, 50, 10]);
    let bs = Vec3::new(250.0, 250.0, 20.0);

    // 20 random rectangular buildings, none over the mast itself.
    let mut rng = StdRng::seed_from_u64(0x1B4);
    let mut rects = Vec::new();
    while rects.len() < 20 {
        let x0 = rng.random_range(10.0..440.0);
        let y0 = rng.random_range(10.0..440.0);
        let w = rng.random_range(15.0..50.0);
        let d = rng.random_range(15.0..50.0);
        let h = rng.random_range(10.0..80.0);
        if (x0..x0 + w).contains(&bs.x) && (y0..y0 + d).contains(&bs.y) {
            continue;
        }
        rects.push((x0, x0 + w, y0, y0 + d, h));
    }
    let buildings: Vec<BuildingPrism> = rects
        .iter()
        .map(|&(x0, x1, y0, y1, h)| BuildingPrism {
            footprint: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
            height: h,
        })
        .collect();
    let map = CityMap::new(region.clone(), buildings).unwrap();

    let strength = 10.0;
    let lpm = LosProbabilityMap::build_prior(&map, bs, 0.0, strength).unwrap();

    // With zero height uncertainty the prior must reproduce the deterministic
    // occlusion oracle, cell for cell, up to the pseudo-count clamp that keeps
    // both Beta counts strictly positive.
    let denom = strength + 2.0 * PSEUDO_COUNT_FLOOR;
    let mut mismatches = 0usize;
    let counts = region.counts();
    for i in 0..counts[0] {
        for j in 0..counts[1] {
            for k in 0..counts[2] {
                let center = region.cell_center([i, j, k]).unwrap();
                let clear = !rects
                    .iter()
                    .any(|&(x0, x1, y0, y1, h)| rect_prism_blocks(&bs, &center, x0, x1, y0, y1, h));
                let p = if clear { 1.0 } else { 0.0 };
                let expected = (PSEUDO_COUNT_FLOOR + strength * p) / denom;
                let actual = lpm.belief_at([i, j, k]).unwrap().p_los();
                if (actual - expected).abs() > 1e-9 {
                    mismatches += 1;
                }
            }
        }
    }
    assert_eq!(mismatches, 0, "{mismatches} of 25000 cells disagree with the occlusion oracle");

    // Beta refinement against a known empirical frequency.
    let mut lpm = lpm;
    let target_index = [5usize, 5, 8];
    let center = region.cell_center(target_index).unwrap();
    let n = 10_000usize;
    let mut hits = 0usize;
    let measurements: Vec<RfMeasurement> = (0..n)
        .map(|_| {
            let los = rng.random::<f64>() < 0.7;
            hits += los as usize;
            RfMeasurement { position: center, los_observed: los }
        })
        .collect();
    lpm.update_with_measurements(&measurements).unwrap();
    let refined = lpm.belief_at(target_index).unwrap().p_los();
    let empirical = hits as f64 / n as f64;

    let elapsed = started.elapsed();
    assert!((refined - 0.7).abs() <= 0.02, "refined {refined:.4} not within 0.7 +/- 0.02");
    assert!(
        (refined - empirical).abs() <= 2e-3,
        "refined {refined:.4} drifted from the empirical frequency {empirical:.4}"
    );
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}, budget 30 s");
    println!(
        "criterion 4 PASS: 25000/25000 prior cells match the oracle; refined {refined:.4} vs \
         empirical {empirical:.4} at n = 10^4 ({:.2} s)",
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_5_identification_quality_in_the_canyon() {
    let started = Instant::now();
    let ls = load("scenarios/canyon.json");
    let runs = 200usize;
    let batch = run_batch(&ls, runs, 7, DEFAULT_OUTAGE_RATE).unwrap();

    let accuracy = batch.summaries.iter().find(|s| s.name == "ident_accuracy").unwrap();
    let false_alarm = batch.summaries.iter().find(|s| s.name == "false_alarm_rate").unwrap();
    assert_eq!(accuracy.defined_runs, runs);
    assert_eq!(false_alarm.defined_runs, runs);

    // The canyon must actually operate at echo SNR >= 20 dB on tracked slots.
    let check = run_seeded(&ls, split_seed(7, 2)).unwrap();
    let mut min_echo_snr = f64::INFINITY;
    for r in &check.records {
        if r.link_true == LinkState::Los {
            let d = (r.truth.q - ls.stations[r.bs_id].position()).norm();
            let snr = echo_snr(&ls.stations[r.bs_id].radio, d, r.beam_gain, ls.scenario.rcs_scale)
                .unwrap();
            if snr > 0.0 {
                min_echo_snr = min_echo_snr.min(snr);
            }
        }
    }

    let elapsed = started.elapsed();
    assert!(
        accuracy.mean > 0.95,
        "identification accuracy {:.4} not above 0.95",
        accuracy.mean
    );
    assert!(false_alarm.mean < 0.05, "false-alarm rate {:.4} not below 0.05", false_alarm.mean);
    assert!(min_echo_snr >= 100.0, "echo SNR floor {:.1} dB < 20 dB", 10.0 * min_echo_snr.log10());
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 60 s");
    println!(
        "criterion 5 PASS: accuracy {:.4}, false-alarm {:.4} over {runs} runs ({:.2} s)",
        accuracy.mean,
        false_alarm.mean,
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_6_predictive_beamforming_beats_the_training_baseline() {
    let started = Instant::now();
    let ls_pred = load("scenarios/nominal.json");
    let mut ls_train = load("scenarios/nominal.json");
    ls_train.scenario.beam = BeamSpec {
        mode: BeamMode::Training,
        phi_bins: 8,
        theta_bins: 4,
        slots_per_beam: 1,
        period_slots: Some(500),
    };
    // Sweep overhead: 32 of every 500 slots spent on pilots.
    let overhead = 32.0 / 500.0;
    assert!(overhead >= 0.05, "training overhead {overhead} below the 5% premise");

    let runs = 200usize;
    let mut pred_rate_sum = 0.0f64;
    let mut train_rate_sum = 0.0f64;
    let mut los_slots = 0usize;
    let mut good_gain_slots = 0usize;
    for i in 0..runs {
        let seed = split_seed(ls_pred.scenario.seed, 2 + i as u64);
        let pred = run_seeded(&ls_pred, seed).unwrap();
        let train = run_seeded(&ls_train, seed).unwrap();
        for r in &pred.records {
            pred_rate_sum += r.rate;
            if r.link_true == LinkState::Los {
                los_slots += 1;
                if r.beam_gain >= 0.4 {
                    good_gain_slots += 1;
                }
            }
        }
        for r in &train.records {
            train_rate_sum += r.rate;
        }
    }
    let gain_fraction = good_gain_slots as f64 / los_slots as f64;

    let elapsed = started.elapsed();
    assert!(
        pred_rate_sum >= train_rate_sum,
        "predictive mean rate {:.4} below the training baseline {:.4}",
        pred_rate_sum / (runs * 500) as f64,
        train_rate_sum / (runs * 500) as f64
    );
    assert!(
        gain_fraction >= 0.9,
        "beam gain >= 0.4 on only {:.2}% of LoS slots",
        gain_fraction * 100.0
    );
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 60 s");
    println!(
        "criterion 6 PASS: predictive {:.3} vs training {:.3} bit/s/Hz mean rate, gain >= 0.4 \
         on {:.1}% of LoS slots over {runs} paired runs ({:.2} s)",
        pred_rate_sum / (runs * 500) as f64,
        train_rate_sum / (runs * 500) as f64,
        gain_fraction * 100.0,
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_7_handover_pays_in_the_canyon_and_never_fires_in_the_open() {
    let started = Instant::now();
    let ls_two = load("scenarios/canyon_two_bs.json");
    // No-handover baseline: the identical scenario with the station list cut
    // to the primary.
    let mut sc_one = ls_two.scenario.clone();
    sc_one.stations.truncate(1);
    let ls_one = LoadedScenario::from_parts(sc_one, ls_two.map.clone()).unwrap();

    let runs = 200usize;
    let root = ls_two.scenario.seed;
    let with_ho = run_batch(&ls_two, runs, root, DEFAULT_OUTAGE_RATE).unwrap();
    let without = run_batch(&ls_one, runs, root, DEFAULT_OUTAGE_RATE).unwrap();
    let rate_with = with_ho.summaries.iter().find(|s| s.name == "mean_rate").unwrap().mean;
    let rate_without = without.summaries.iter().find(|s| s.name == "mean_rate").unwrap().mean;
    let handovers =
        with_ho.per_run.iter().map(|m| m.handover_count).sum::<usize>();

    // The second station's map must call the primary's blocked stretch LoS —
    // otherwise the handover has nothing to offer. Probe the shadowed part of
    // the route.
    let probe = Vec3::new(160.0, 100.0, 45.0);
    let p_primary = ls_two.stations[0].lpm.query_clamped(&probe).0.p_los;
    let p_second = ls_two.stations[1].lpm.query_clamped(&probe).0.p_los;
    assert!(p_primary < 0.5 && p_second > 0.5, "probe priors: {p_primary:.3} vs {p_second:.3}");

    // Open sky: handover must never fire.
    let nominal = load("scenarios/nominal.json");
    let open = run_batch(&nominal, runs, nominal.scenario.seed, DEFAULT_OUTAGE_RATE).unwrap();
    let open_handovers = open.per_run.iter().map(|m| m.handover_count).sum::<usize>();

    let elapsed = started.elapsed();
    assert!(
        rate_with > rate_without,
        "cumulative rate with handover {rate_with:.4} does not exceed baseline {rate_without:.4}"
    );
    assert!(handovers > 0, "the two-station canyon never handed over");
    assert_eq!(open_handovers, 0, "open-sky scenario recorded handovers");
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 60 s");
    println!(
        "criterion 7 PASS: mean rate {rate_with:.3} vs {rate_without:.3} bit/s/Hz \
         ({handovers} handovers across {runs} runs); 0 open-sky handovers ({:.2} s)",
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_8_simulate_is_byte_deterministic_end_to_end() {
    let started = Instant::now();
    let bin = env!("CARGO_BIN_EXE_skybeam");
    let dir = tempfile::tempdir().unwrap();
    let scenario = workspace_path("scenarios/canyon_two_bs.json");

    let mut outputs = Vec::new();
    for name in ["first.csv", "second.csv"] {
        let out = dir.path().join(name);
        let status = std::process::Command::new(bin)
            .arg("simulate")
            .arg(&scenario)
            .arg("-o")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "simulate exited with {status}");
        outputs.push(std::fs::read(&out).unwrap());
    }

    let elapsed = started.elapsed();
    assert!(!outputs[0].is_empty());
    assert_eq!(outputs[0], outputs[1], "two identical invocations diverged");
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 60 s");
    println!(
        "criterion 8 PASS: byte-identical records ({} bytes) from repeated runs ({:.2} s)",
        outputs[0].len(),
        elapsed.as_secs_f64()
    );
}
