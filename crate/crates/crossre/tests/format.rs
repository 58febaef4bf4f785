use crossre::format::{fmt_f64, to_json};
use proptest::prelude::*;

proptest! {
    #[test]
    fn written_floats_parse_back_exactly(bits in any::<u64>()) {
        let x = f64::from_bits(bits);
        prop_assume!(x.is_finite());
        let back: f64 = fmt_f64(x).parse().unwrap();
        prop_assert_eq!(back.to_bits(), x.to_bits());
    }

    #[test]
    fn json_floats_round_trip(v in prop::collection::vec(-1e300f64..1e300, 1..20)) {
        let text = to_json(&v);
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, v);
    }
}

#[test]
fn nonfinite_values_are_spelled_out() {
    assert_eq!(fmt_f64(f64::NAN), "NaN");
    assert_eq!(fmt_f64(f64::INFINITY), "inf");
    assert_eq!(fmt_f64(f64::NEG_INFINITY), "-inf");
    assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
}
