#![no_main]

use libfuzzer_sys::fuzz_target;
use stepcredit_core::objective::{surrogate_gradient, surrogate_objective, ObjectiveConfig, TokenTensor};

fuzz_target!(|data: &[u8]| {
    let Ok(tensor) = serde_json::from_slice::<TokenTensor>(data) else {
        return;
    };
    let cfg = ObjectiveConfig::default();
    if let Ok(value) = surrogate_objective(&tensor, &cfg) {
        let grad = surrogate_gradient(&tensor, &cfg).expect("gradient accepts what the objective accepts");
        assert_eq!(grad.len(), tensor.len());
        assert!(value.clipped_fraction >= 0.0 && value.clipped_fraction <= 1.0);
    }
});
