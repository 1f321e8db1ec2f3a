#![no_main]

use libfuzzer_sys::fuzz_target;
use stepcredit_core::trajectory::{check_format, parse_transcript_with, ParseConfig, ReasoningTag};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for reasoning_tag in [ReasoningTag::Reasoning, ReasoningTag::Think, ReasoningTag::Either] {
        let cfg = ParseConfig { reasoning_tag, ..Default::default() };
        let Ok(traj) = parse_transcript_with(text, &cfg) else {
            continue;
        };
        assert!(traj.steps.len() <= cfg.max_turns);
        let mut prev_end = 0;
        for seg in traj.segments() {
            assert!(seg.span.start >= prev_end);
            assert_eq!(seg.span.slice(text), seg.text);
            prev_end = seg.span.end;
        }
        let _ = check_format(&traj);
    }
});
