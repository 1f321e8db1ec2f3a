#![no_main]

use libfuzzer_sys::fuzz_target;
use stepcredit_core::trajectory::{group_records, ParseConfig, TrajectoryRecord};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let records: Vec<TrajectoryRecord> = text
        .lines()
        .filter_map(|line| serde_json::from_str(line).ok())
        .collect();
    if let Ok(groups) = group_records(&records, &ParseConfig::default()) {
        assert_eq!(groups.iter().map(|g| g.size()).sum::<usize>(), records.len());
    }
});
