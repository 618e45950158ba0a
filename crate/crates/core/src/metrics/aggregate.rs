use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// How the 95% half-width is computed from the sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    /// `z * sd / sqrt(n)`, z ~ 1.96
    #[default]
    Normal,
    /// `t(n-1) * sd / sqrt(n)`
    StudentT,
}

impl std::str::FromStr for CiMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(CiMethod::Normal),
            "t" | "student-t" | "studentt" => Ok(CiMethod::StudentT),
            other => Err(Error::Config(format!("unknown ci method '{other}' (normal | t)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

impl Interval {
    /// A single value has no spread estimate; its half-width is 0.
    pub fn is_degenerate(&self) -> bool {
        self.n < 2
    }

    /// `mean ± half-width` with three decimals.
    pub fn cell(&self) -> String {
        format!("{:.3} ± {:.3}", self.mean, self.half_width)
    }
}

/// Mean and 95% half-width over per-run values.
pub fn aggregate_ci(values: &[f64], method: CiMethod) -> Result<Interval> {
    let n = values.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot aggregate zero runs".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value among {values:?}")));
    }
    // Sorting first makes the sums independent of input order.
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[n - 1] {
        // Covers n = 1; also exact for identical inputs, where summation
        // could round.
        return Ok(Interval {
            mean: sorted[0],
            half_width: 0.0,
            n,
        });
    }
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let q = match method {
        CiMethod::Normal => Normal::standard().inverse_cdf(0.975),
        CiMethod::StudentT => StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| Error::Numeric(e.to_string()))?
            .inverse_cdf(0.975),
    };
    Ok(Interval {
        mean,
        half_width: q * sd / (n as f64).sqrt(),
        n,
    })
}
