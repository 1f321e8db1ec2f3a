#![no_main]

use libfuzzer_sys::fuzz_target;
use stepcredit_service::ToolRequest;

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = ToolRequest::from_json(data) {
        assert_eq!(req.name, "sql_executor");
        assert!(!req.arguments.sql.trim().is_empty());
    }
});
