//! The binary map loader must reject arbitrary bytes without panicking, and
//! any map it accepts must serialize back to bytes it accepts again.

#![no_main]

use libfuzzer_sys::fuzz_target;
use skybeam::lpm::LosProbabilityMap;

fuzz_target!(|data: &[u8]| {
    let Ok(lpm) = LosProbabilityMap::from_bytes(data) else { return };
    let bytes = lpm.to_bytes();
    LosProbabilityMap::from_bytes(&bytes).expect("accepted map must round-trip");
});
