#![no_main]

use libfuzzer_sys::fuzz_target;
use stepcredit_core::harness::Scenario;

fuzz_target!(|data: &[u8]| {
    if let Ok(scenario) = serde_json::from_slice::<Scenario>(data) {
        for policy in &scenario.policies {
            let _ = policy.validate();
        }
        let again = serde_json::to_string(&scenario).unwrap();
        assert_eq!(serde_json::from_str::<Scenario>(&again).unwrap(), scenario);
    }
});
