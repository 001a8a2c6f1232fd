use magattn::schedule::{alpha_at, ScheduleSpec};
use proptest::prelude::*;

fn any_spec() -> impl Strategy<Value = ScheduleSpec> {
    prop_oneof![
        (0.0f64..=1.0).prop_map(|value| ScheduleSpec::Constant { value }),
        (0.0f64..=1.0, 0.0f64..=1.0, 1usize..500)
            .prop_map(|(start, target, ramp_steps)| ScheduleSpec::Gradual { start, target, ramp_steps }),
        (prop::collection::vec(0.0f64..=1.0, 1..6), 1usize..50)
            .prop_map(|(values, period)| ScheduleSpec::Cyclic { values, period }),
    ]
}

proptest! {
    #[test]
    fn always_in_unit_interval_and_replayable(spec in any_spec(), step in 0usize..100_000) {
        let a = alpha_at(&spec, step).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, alpha_at(&spec.clone(), step).unwrap());
    }

    #[test]
    fn rising_ramp_is_monotone(start in 0.0f64..=1.0, span in 0.0f64..=1.0, ramp in 1usize..300, step in 0usize..400) {
        let target = (start + span).min(1.0);
        let spec = ScheduleSpec::gradual(start, target, ramp).unwrap();
        prop_assert!(alpha_at(&spec, step + 1).unwrap() >= alpha_at(&spec, step).unwrap());
    }
}
