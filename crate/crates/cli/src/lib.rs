//! Experiment orchestration for `far`: dataset files, training runs,
//! variant ladders and diagnostic exports.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use far_core::FarError;

pub use config::Config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] FarError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("worker: {0}")]
    Worker(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// `%g`-style rendering with 9 significant digits; `.` decimal point.
pub fn fmt_float(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let fixed = format!("{:.*}", (8 - exp) as usize, x);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
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
    use super::fmt_float;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_float(0.05), "0.05");
        assert_eq!(fmt_float(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_float(-2.5), "-2.5");
        assert_eq!(fmt_float(123456789.0), "123456789");
        assert_eq!(fmt_float(1.5e-7), "1.5e-7");
        assert_eq!(fmt_float(2.0e12), "2e12");
        assert_eq!(fmt_float(0.0), "0");
    }
}
