#![no_main]

use libfuzzer_sys::fuzz_target;
use stepcredit_core::rewards::normalize_sql;

fuzz_target!(|data: &[u8]| {
    let Ok(sql) = std::str::from_utf8(data) else {
        return;
    };
    let once = normalize_sql(sql);
    assert_eq!(normalize_sql(&once), once);
});
