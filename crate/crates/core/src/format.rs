//! Fixed-precision number rendering shared by every text output.

/// Renders `x` with 9 significant digits. Plain decimal notation is used for
/// magnitudes in `[1e-5, 1e9)`, scientific notation otherwise.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".to_string() } else { x.to_string() };
    }
    // round through scientific notation first so the exponent is exact
    let sci = format!("{x:.8e}");
    let (_, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-5..9).contains(&exp) {
        return sci;
    }
    let rounded: f64 = sci.parse().expect("round trip");
    let decimals = (8 - exp).max(0) as usize;
    let mut s = format!("{rounded:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

/// Rounds `x` to the value its [`sig9`] rendering parses back to.
pub fn round9(x: f64) -> f64 {
    sig9(x).parse().unwrap_or(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_nine_digits() {
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(0.123456789123), "0.123456789");
        assert_eq!(sig9(-2.5), "-2.5");
        assert_eq!(sig9(123456.7891234), "123456.789");
        assert_eq!(sig9(9.9999999999), "10");
        assert_eq!(sig9(1.5e-7), "1.50000000e-7");
    }

    #[test]
    fn round_trips() {
        for &x in &[0.1, 1.0 / 3.0, 12345.678901, 2.0e-3, 7.77e12] {
            let r = round9(x);
            assert_eq!(sig9(r), sig9(x));
            assert!((r - x).abs() <= 1e-8 * x.abs());
        }
    }
}
