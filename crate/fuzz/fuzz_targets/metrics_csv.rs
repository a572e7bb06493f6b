#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use splitlora::harness::{parse_metrics, summarize};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_metrics(data, Path::new("fuzz.csv")) {
        let _ = summarize(&rows);
    }
});
