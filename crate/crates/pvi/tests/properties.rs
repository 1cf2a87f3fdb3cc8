use std::path::Path;

use proptest::prelude::*;

use pvi::config::{PhiCfg, Real};
use pvi::csvio::{field_to_string, read_field};
use pvi_core::field::{FieldGrid, SolutionField};

fn value() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6f64..1e6,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE / 8.0),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn field_csv_round_trips_bit_for_bit(
        d in 1usize..3,
        k in 1usize..3,
        nt in 1usize..4,
        np in 1usize..5,
        seed_vals in prop::collection::vec(value(), 64),
    ) {
        let times: Vec<f64> = (0..nt).map(|i| 0.1 * i as f64).collect();
        let points: Vec<Vec<f64>> = (0..np).map(|i| (0..d).map(|a| i as f64 - 0.5 * a as f64).collect()).collect();
        let mut f = SolutionField::from_fn(d, k, FieldGrid::new(times, points), |_, _| vec![0.0; k]);
        for (i, v) in f.values.iter_mut().enumerate() {
            *v = seed_vals[i % seed_vals.len()];
        }
        for (i, s) in f.stderr.iter_mut().enumerate() {
            *s = seed_vals[(i + 7) % seed_vals.len()].abs();
        }
        let text = field_to_string(&f);
        let back = read_field(text.as_bytes(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.grid.clone(), f.grid.clone());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.values), bits(&f.values));
        prop_assert_eq!(bits(&back.stderr), bits(&f.stderr));
        prop_assert_eq!(field_to_string(&back), text);
    }

    #[test]
    fn box_bounds_serialize_with_infinities(lo in prop::collection::vec(prop_oneof![Just(f64::NEG_INFINITY), -5.0f64..0.0], 1..4)) {
        let hi: Vec<Real> = lo.iter().map(|&l| Real(if l == f64::NEG_INFINITY { 1.0 } else { f64::INFINITY })).collect();
        let phi = PhiCfg::IndicatorBox { lo: lo.iter().map(|&v| Real(v)).collect(), hi };
        #[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
        struct Wrap { phi: PhiCfg }
        let text = toml::to_string(&Wrap { phi: phi.clone() }).unwrap();
        prop_assert!(text.contains("inf"));
        let back: Wrap = toml::from_str(&text).unwrap();
        prop_assert_eq!(back.phi.clone(), phi);
        prop_assert!(back.phi.build().is_ok());
    }
}
