use proptest::prelude::*;
use stepcredit_core::trajectory::{
    check_format, decode_tool_payload, encode_tool_payload, parse_transcript, parse_transcript_with,
    ParseConfig, SegmentKind, Trajectory,
};

const PIECES: &[&str] = &[
    "<reasoning>",
    "</reasoning>",
    "<think>",
    "</think>",
    "<tool_call>",
    "</tool_call>",
    "<result>",
    "</result>",
    "<answer>",
    "</answer>",
    "<",
    ">",
    "</",
    "plan",
    " ",
    "\n",
    "ü",
    "SELECT 1",
    "{\"name\":\"sql_executor\",\"arguments\":{\"sql\":\"SELECT 2\"}}",
];

fn tag_soup() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(PIECES), 0..40).prop_map(|parts| parts.concat())
}

/// Body text that never contains `<`, so it cannot close a segment early.
fn body() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.éü\n]{0,24}"
}

fn well_formed() -> impl Strategy<Value = (String, usize, bool)> {
    (
        prop::collection::vec((body(), "[a-z ]{1,12}", body()), 0..14),
        body(),
        body(),
        any::<bool>(),
    )
        .prop_map(|(steps, final_reasoning, answer, with_answer)| {
            let mut text = String::new();
            for (reasoning, sql, feedback) in &steps {
                text.push_str(&format!(
                    "<reasoning>{reasoning}</reasoning>\n<tool_call>{}</tool_call>\n<result>{feedback}</result>\n",
                    encode_tool_payload(&format!("SELECT {sql}"))
                ));
            }
            if with_answer {
                text.push_str(&format!("<reasoning>{final_reasoning}</reasoning>\n<answer>{answer}</answer>"));
            }
            (text, steps.len(), with_answer)
        })
}

fn check_invariants(source: &str, traj: &Trajectory, max_turns: usize) {
    assert!(traj.steps.len() <= max_turns);
    if traj.truncated {
        assert!(traj.answer.is_none());
    }
    for (i, step) in traj.steps.iter().enumerate() {
        assert_eq!(step.index, i);
        assert_eq!(step.reasoning.kind, SegmentKind::Reasoning);
        assert_eq!(step.action.kind, SegmentKind::ToolCall);
        assert_eq!(step.feedback.kind, SegmentKind::Feedback);
        assert_eq!(step.parsed_sql, decode_tool_payload(&step.action.text));
    }
    let segments = traj.segments();
    let mut prev_end = 0;
    let mut rebuilt = String::new();
    let mut tagged = String::new();
    for seg in &segments {
        assert!(seg.span.start >= prev_end, "segments overlap or are out of order");
        prev_end = seg.span.end;
        assert_eq!(seg.span.slice(source), seg.text);
        rebuilt.push_str(&seg.wrapped());
        tagged.push_str(seg.outer_span().slice(source));
    }
    assert_eq!(rebuilt, tagged);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn parser_is_total_and_deterministic(text in tag_soup(), max_turns in 0usize..5) {
        let first = parse_transcript(&text, max_turns);
        let second = parse_transcript(&text, max_turns);
        prop_assert_eq!(&first, &second);
        if let Ok(traj) = &first {
            check_invariants(&text, traj, max_turns);
            prop_assert_eq!(&traj.source, &text);
        }
    }

    #[test]
    fn either_reasoning_tag_is_total(text in tag_soup()) {
        let cfg = ParseConfig { reasoning_tag: stepcredit_core::trajectory::ReasoningTag::Either, ..Default::default() };
        if let Ok(traj) = parse_transcript_with(&text, &cfg) {
            check_invariants(&text, &traj, cfg.max_turns);
        }
    }

    #[test]
    fn well_formed_transcripts_round_trip((text, n, with_answer) in well_formed(), max_turns in 1usize..12) {
        let traj = parse_transcript(&text, max_turns).expect("well-formed transcript parses");
        check_invariants(&text, &traj, max_turns);
        prop_assert_eq!(traj.steps.len(), n.min(max_turns));
        prop_assert_eq!(traj.truncated, n > max_turns);
        prop_assert_eq!(traj.answer.is_some(), with_answer && n <= max_turns);
        prop_assert!(traj.steps.iter().all(|s| s.parsed_sql.is_some()));
        let report = check_format(&traj);
        let answer_nonempty = traj.answer.as_ref().is_some_and(|a| !a.text.trim().is_empty());
        prop_assert_eq!(report.ok, answer_nonempty && !traj.truncated);
    }

    #[test]
    fn payload_round_trip(sql in "[ -~]{1,40}") {
        prop_assume!(!sql.trim().is_empty());
        let encoded = encode_tool_payload(&sql);
        prop_assert!(!encoded.contains("</"));
        prop_assert_eq!(decode_tool_payload(&encoded), Some(sql.trim().to_string()));
    }
}
