//! The RF-measurement CSV reader must reject arbitrary bytes without
//! panicking and must never yield a non-finite sample position.

#![no_main]

use libfuzzer_sys::fuzz_target;
use skybeam::lpm::read_measurements_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(samples) = read_measurements_csv(data) {
        for s in &samples {
            assert!(s.position.iter().all(|v| v.is_finite()));
        }
    }
});
