//! Numeric rendering for TSV output.
//!
//! Values are written with at least six significant digits and always in a
//! form that parses back to the identical `f64`.

/// Render `x` with ≥ 6 significant digits, round-trip exact.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        return "NaN".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0.00000".to_string();
    }
    let ax = x.abs();
    let plain = (1e-4..1e15).contains(&ax);
    let exp = format!("{:e}", x);
    let mantissa = exp.split('e').next().unwrap_or("");
    let digits = mantissa.chars().filter(|c| c.is_ascii_digit()).count();
    if digits >= 6 {
        if plain {
            format!("{}", x)
        } else {
            exp
        }
    } else if plain {
        let mag = ax.log10().floor() as i32;
        let decimals = (5 - mag).max(0) as usize;
        format!("{:.*}", decimals, x)
    } else {
        format!("{:.5e}", x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pads_short_values() {
        assert_eq!(fmt_f64(1.0), "1.00000");
        assert_eq!(fmt_f64(0.5), "0.500000");
        assert_eq!(fmt_f64(123.0), "123.000");
        assert_eq!(fmt_f64(-2.5), "-2.50000");
        assert_eq!(fmt_f64(1e-20), "1.00000e-20");
    }

    fn sig_digits(s: &str) -> usize {
        let m = s.split(['e', 'E']).next().unwrap();
        let d: String = m.chars().filter(|c| c.is_ascii_digit()).collect();
        d.trim_start_matches('0').len()
    }

    proptest! {
        #[test]
        fn round_trips_exactly(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            prop_assert_eq!(back.to_bits(), if x == 0.0 { 0.0f64.to_bits() } else { x.to_bits() });
        }

        #[test]
        fn at_least_six_significant(x in -1e6f64..1e6) {
            prop_assume!(x != 0.0);
            prop_assert!(sig_digits(&fmt_f64(x)) >= 6);
        }
    }
}
