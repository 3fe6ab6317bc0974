#![no_main]

use declasso::instance::{dataset_from_str, dataset_to_string};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ds) = dataset_from_str(text) {
            for inst in &ds.samples {
                inst.validate().expect("parsed samples are valid");
            }
            let back = dataset_to_string(&ds);
            let again = dataset_from_str(&back).expect("round trip");
            assert_eq!(again.meta, ds.meta);
            assert_eq!(again.samples.len(), ds.samples.len());
            for (a, b) in ds.samples.iter().zip(again.samples.iter()) {
                assert_eq!(a.x_star, b.x_star);
                assert_eq!(a.a, b.a);
                assert_eq!(a.y, b.y);
            }
        }
    }
});
