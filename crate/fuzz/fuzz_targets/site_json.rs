//! Site-file JSON decoder must reject arbitrary input without panicking.

#![no_main]

use libfuzzer_sys::fuzz_target;
use skybeam::sim::SiteSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(site) = SiteSpec::from_json_str(text) {
        // Accepted sites carry only finite, in-range numbers.
        assert!(site.position.iter().all(|v| v.is_finite()));
        assert!(site.lpm.height_sigma >= 0.0 && site.lpm.prior_strength > 0.0);
    }
});
