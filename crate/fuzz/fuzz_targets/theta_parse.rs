#![no_main]

use declasso::unroll::{theta_from_str, theta_to_string};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(theta) = theta_from_str(text) {
            let back = theta_from_str(&theta_to_string(&theta)).expect("round trip");
            assert_eq!(back.algorithm, theta.algorithm);
            assert_eq!(back.schedule, theta.schedule);
            assert_eq!(back.seed, theta.seed);
            assert_eq!(back.config_hash, theta.config_hash);
        }
    }
});
