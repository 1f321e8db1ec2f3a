#![no_main]

use libfuzzer_sys::fuzz_target;
use stepcredit_core::trajectory::{decode_tool_payload, encode_tool_payload};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Some(sql) = decode_tool_payload(text) {
        assert!(!sql.is_empty());
        let encoded = encode_tool_payload(&sql);
        assert!(!encoded.contains("</"));
        assert_eq!(decode_tool_payload(&encoded).as_deref(), Some(sql.as_str()));
    }
});
