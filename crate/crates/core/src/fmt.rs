//! Numeric formatting for CSV output.

/// Nine significant digits in scientific notation.
pub fn fmt_sig(v: f64) -> String {
    format!("{v:.8e}")
}

/// Empty string for undefined values.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_sig).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_to_nine_digits() {
        let v = 0.123456789123;
        let s = fmt_sig(v);
        assert_eq!(s, "1.23456789e-1");
        assert!((s.parse::<f64>().unwrap() - v).abs() < 1e-9);
        assert_eq!(fmt_opt(None), "");
    }
}
