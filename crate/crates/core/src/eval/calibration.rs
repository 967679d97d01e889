use crate::error::{Error, Result};

use super::roc::clamp_opt;

/// Piecewise-linear recalibration that maps the operating point `opt` to 0.5:
///
/// ```text
/// f(x) = x / (2 opt)                    if x <= opt
///        1 - (1 - x) / (2 (1 - opt))    otherwise
/// ```
///
/// `opt` in `{0, 1}` is clamped into `[1e-6, 1 - 1e-6]`; anything outside
/// `[0, 1]` is rejected. `x` is clamped into `[0, 1]`.
pub fn calibrate(x: f64, opt: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&opt) {
        return Err(Error::InvalidOperatingPoint(opt));
    }
    let opt = clamp_opt(opt);
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    Ok(if x <= opt {
        x / (2.0 * opt)
    } else {
        1.0 - (1.0 - x) / (2.0 * (1.0 - opt))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(calibrate(0.3, 0.3).unwrap(), 0.5);
        assert!((calibrate(0.1, 0.2).unwrap() - 0.25).abs() < 1e-15);
        assert!((calibrate(0.6, 0.2).unwrap() - 0.75).abs() < 1e-15);
        for x in [0.0, 0.1, 0.37, 0.5, 0.99, 1.0] {
            assert!((calibrate(x, 0.5).unwrap() - x).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_out_of_range_operating_points() {
        assert!(matches!(
            calibrate(0.5, 1.5),
            Err(Error::InvalidOperatingPoint(_))
        ));
        assert!(calibrate(0.5, -0.1).is_err());
        assert!(calibrate(0.5, f64::NAN).is_err());
        assert_eq!(calibrate(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(calibrate(1.0, 1.0).unwrap(), 1.0);
    }
}
