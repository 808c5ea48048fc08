/// Format a double like C's `%.17g`: 17 significant digits, fixed or
/// scientific notation chosen by exponent, trailing zeros trimmed.
/// 17 digits are enough for exact f64 round-trips.
pub fn fmt_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x < 0.0 { "-inf" } else { "inf" }.to_string();
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0" } else { "0" }.to_string();
    }
    // Decimal exponent as printf computes it, after rounding to 17 digits.
    let sci = format!("{:.16e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("{:e} always has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if exp < -4 || exp >= 17 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", mantissa, sign, exp.abs())
    } else {
        // 17 significant digits total: exp+1 before the point when exp >= 0.
        let prec = (16 - exp) as usize;
        let fixed = format!("{:.*}", prec, x);
        trim_zeros(&fixed).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Expected strings match glibc printf("%.17g", x).
    #[test]
    fn matches_printf_g17() {
        assert_eq!(fmt_g17(0.0), "0");
        assert_eq!(fmt_g17(-0.0), "-0");
        assert_eq!(fmt_g17(1.0), "1");
        assert_eq!(fmt_g17(-2.5), "-2.5");
        assert_eq!(fmt_g17(0.1), "0.10000000000000001");
        assert_eq!(fmt_g17(3.14), "3.1400000000000001");
        assert_eq!(fmt_g17(1e-5), "1.0000000000000001e-05");
        assert_eq!(fmt_g17(1e16), "10000000000000000");
        assert_eq!(fmt_g17(1e17), "1e+17");
        assert_eq!(fmt_g17(1.5e-300), "1.5000000000000001e-300");
        assert_eq!(fmt_g17(f64::NAN), "nan");
        assert_eq!(fmt_g17(f64::INFINITY), "inf");
        assert_eq!(fmt_g17(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn round_trips_exactly() {
        let xs = [
            1.0 / 3.0,
            std::f64::consts::PI,
            -1.2345678901234567e-123,
            6.02214076e23,
            f64::MIN_POSITIVE,
            f64::MAX,
        ];
        for &x in &xs {
            let parsed: f64 = fmt_g17(x).parse().unwrap();
            assert_eq!(parsed.to_bits(), x.to_bits(), "round trip failed for {x}");
        }
    }
}
