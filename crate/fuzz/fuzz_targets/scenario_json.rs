//! Scenario JSON decoder must reject arbitrary input without panicking, and
//! any scenario it accepts must survive validation and re-serialization.

#![no_main]

use libfuzzer_sys::fuzz_target;
use skybeam::sim::Scenario;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(scenario) = Scenario::from_json_str(text) else { return };
    // from_json_str validates, so a round trip must also parse and validate.
    let json = scenario.to_json_string().expect("accepted scenario must re-serialize");
    let again = Scenario::from_json_str(&json).expect("round trip must stay valid");
    assert_eq!(scenario, again, "scenario JSON round trip must be lossless");
});
