//! City-map JSON decoder must reject arbitrary input without panicking, and
//! any map it accepts must answer occlusion queries without panicking either.

#![no_main]

use libfuzzer_sys::fuzz_target;
use skybeam::citymap::CityMap;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(map) = CityMap::from_json_str(text) else { return };
    // Accepted maps must be usable: probe a segment inside the region.
    let lo = map.region.q_lower();
    let mid = (lo + map.region.q_upper()) / 2.0;
    let _ = map.segment_blocked(&lo, &mid);
});
