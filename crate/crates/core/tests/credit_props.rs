use proptest::prelude::*;
use stepcredit_core::credit::{
    discount_outcome, grpo_advantages, smooth_process, step_advantages, CreditConfig, TrajectoryRewards,
};

fn trajectory(max_steps: usize) -> impl Strategy<Value = TrajectoryRewards> {
    (
        prop::sample::select(vec![0.0, 1.0, 3.0]),
        prop::collection::vec(prop_oneof![Just(0.0), 1.0..=2.0f64], 0..=max_steps),
    )
        .prop_map(|(outcome, process)| TrajectoryRewards { outcome, process })
}

fn group() -> impl Strategy<Value = Vec<TrajectoryRewards>> {
    prop::collection::vec(trajectory(6), 2..8)
}

fn config() -> impl Strategy<Value = CreditConfig> {
    (0.5..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(gamma, beta_smooth, lambda)| CreditConfig {
        gamma,
        beta_smooth,
        lambda,
        ..Default::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn pooled_means_are_zero(g in group(), cfg in config()) {
        let adv = step_advantages(&g, &cfg).unwrap();
        let outs: Vec<f64> = adv.iter().flat_map(|a| a.a_out_norm.iter().copied()).collect();
        let procs: Vec<f64> = adv.iter().flat_map(|a| a.a_proc_norm.iter().copied()).collect();
        let tol = |n: usize| 1e-9 * n.max(1) as f64;
        prop_assert!(outs.iter().sum::<f64>().abs() / outs.len() as f64 <= tol(outs.len()));
        if !procs.is_empty() {
            prop_assert!(procs.iter().sum::<f64>().abs() / procs.len() as f64 <= tol(procs.len()));
        }
    }

    #[test]
    fn shapes_and_mixing(g in group(), cfg in config()) {
        let adv = step_advantages(&g, &cfg).unwrap();
        prop_assert_eq!(adv.len(), g.len());
        for (a, t) in adv.iter().zip(&g) {
            let n = t.process.len();
            prop_assert_eq!(a.a_mixed.len(), n + 1);
            prop_assert_eq!(a.a_out_norm.len(), n + 1);
            prop_assert_eq!(a.a_proc_norm.len(), n);
            for k in 0..n {
                let expected = cfg.lambda * a.a_out_norm[k] + (1.0 - cfg.lambda) * a.a_proc_norm[k];
                prop_assert!((a.a_mixed[k] - expected).abs() <= 1e-12);
                prop_assert_eq!(a.a_mixed[k] < 0.0, expected < 0.0);
            }
            prop_assert_eq!(a.a_mixed[n], a.a_out_norm[n]);
            prop_assert!(a.a_mixed.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn discount_is_increasing(r in 0.01..=3.0f64, gamma in 0.01..0.999f64, n in 0usize..12) {
        let v = discount_outcome(r, n, gamma);
        prop_assert_eq!(v.len(), n + 1);
        prop_assert_eq!(v[n], r);
        prop_assert!(v.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn smoothing_extremes(r in prop::collection::vec(0.0..=2.0f64, 1..10)) {
        prop_assert_eq!(smooth_process(&r, 0.0), r.clone());
        let last = *r.last().unwrap();
        prop_assert!(smooth_process(&r, 1.0).iter().all(|v| *v == last));
    }

    #[test]
    fn grpo_reduction(outcomes in prop::collection::vec(prop::sample::select(vec![0.0, 1.0, 3.0]), 2..8), n in 0usize..6, seed in prop::collection::vec(0.0..=2.0f64, 6)) {
        let g: Vec<TrajectoryRewards> = outcomes
            .iter()
            .map(|&outcome| TrajectoryRewards { outcome, process: seed[..n].to_vec() })
            .collect();
        let cfg = CreditConfig { gamma: 1.0, lambda: 1.0, ..Default::default() };
        let adv = step_advantages(&g, &cfg).unwrap();
        let grpo = grpo_advantages(&outcomes, cfg.eps);
        for (a, expected) in adv.iter().zip(&grpo) {
            prop_assert!(a.a_mixed.iter().all(|v| (v - expected).abs() <= 1e-9));
        }
    }

    #[test]
    fn grpo_is_uniform_per_trajectory(rewards in prop::collection::vec(0.0..=3.0f64, 2..8)) {
        let adv = grpo_advantages(&rewards, 1e-8);
        prop_assert!(adv.iter().sum::<f64>().abs() < 1e-9 * rewards.len() as f64);
        for (i, j) in (0..rewards.len()).flat_map(|i| (0..rewards.len()).map(move |j| (i, j))) {
            if rewards[i] == rewards[j] {
                prop_assert_eq!(adv[i], adv[j]);
            }
        }
    }
}

#[test]
fn invalid_step_in_winning_trajectory_is_suppressed() {
    let group = [
        TrajectoryRewards { outcome: 3.0, process: vec![2.0, 0.0] },
        TrajectoryRewards { outcome: 1.0, process: vec![2.0, 2.0] },
    ];
    let adv = step_advantages(&group, &CreditConfig::default()).unwrap();
    let winner = &adv[0];
    assert!(winner.a_mixed[1] < 0.0);
    assert!(winner.a_mixed[0] > 0.0);
    assert!(winner.a_mixed[2] > 0.0);

    let grpo = grpo_advantages(&[3.0, 1.0], 1e-8);
    assert!(grpo[0] > 0.0);
}

#[test]
fn config_rejects_out_of_range_values() {
    for cfg in [
        CreditConfig { gamma: 0.0, ..Default::default() },
        CreditConfig { gamma: 1.5, ..Default::default() },
        CreditConfig { beta_smooth: -0.1, ..Default::default() },
        CreditConfig { lambda: f64::NAN, ..Default::default() },
    ] {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    let single = [TrajectoryRewards { outcome: 1.0, process: vec![] }];
    assert!(step_advantages(&single, &CreditConfig::default()).is_err());
}
