//! Named functionals of a rooted space, parsed from short strings such as
//! `degree`, `at_root:phi` or `ball:phi:r=1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{FiniteRmmSpace, MeasureRef, MATRIX_TOL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Observable {
    /// Graph degree of the root.
    Degree,
    /// Largest distance from the root.
    Eccentricity,
    /// Mass of the root.
    AtRoot(MeasureRef),
    /// Total mass.
    Total(MeasureRef),
    /// Mass of the closed ball of radius `r` around the root.
    Ball(MeasureRef, f64),
    /// Distance from the root to the nearest charged point, or
    /// `diameter + 1` when the measure vanishes.
    Nearest(MeasureRef),
}

impl Observable {
    pub fn eval(&self, s: &FiniteRmmSpace) -> Result<f64> {
        let o = s.root();
        Ok(match self {
            Observable::Degree => s.degree(o) as f64,
            Observable::Eccentricity => s.dist_row(o).iter().cloned().fold(0.0, f64::max),
            Observable::AtRoot(m) => m.values(s)?[o],
            Observable::Total(m) => m.values(s)?.iter().sum(),
            Observable::Ball(m, r) => {
                let v = m.values(s)?;
                (0..s.n()).filter(|&y| s.d(o, y) <= r + MATRIX_TOL).map(|y| v[y]).sum()
            }
            Observable::Nearest(m) => {
                let v = m.values(s)?;
                (0..s.n()).filter(|&y| v[y] > 0.0).map(|y| s.d(o, y)).fold(s.diameter() + 1.0, f64::min)
            }
        })
    }

    /// Evaluation for use inside Monte-Carlo loops; errors become NaN so the
    /// resulting report fails.
    pub fn eval_or_nan(&self, s: &FiniteRmmSpace) -> f64 {
        self.eval(s).unwrap_or(f64::NAN)
    }

    /// Measure decoration read by the observable, if any.
    pub fn dependency(&self) -> Option<&MeasureRef> {
        match self {
            Observable::Degree | Observable::Eccentricity => None,
            Observable::AtRoot(m) | Observable::Total(m) | Observable::Ball(m, _) | Observable::Nearest(m) => Some(m),
        }
    }
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observable::Degree => f.write_str("degree"),
            Observable::Eccentricity => f.write_str("eccentricity"),
            Observable::AtRoot(m) => write!(f, "at_root:{m}"),
            Observable::Total(m) => write!(f, "total:{m}"),
            Observable::Ball(m, r) => write!(f, "ball:{m}:r={r}"),
            Observable::Nearest(m) => write!(f, "nearest:{m}"),
        }
    }
}

impl FromStr for Observable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::InvalidParameter(format!("unknown observable {s:?}"));
        let measure = |i: usize| parts.get(i).map(|m| MeasureRef::parse(m)).ok_or_else(bad);
        match parts[0] {
            "degree" if parts.len() == 1 => Ok(Observable::Degree),
            "eccentricity" if parts.len() == 1 => Ok(Observable::Eccentricity),
            "at_root" if parts.len() == 2 => Ok(Observable::AtRoot(measure(1)?)),
            "total" if parts.len() == 2 => Ok(Observable::Total(measure(1)?)),
            "nearest" if parts.len() == 2 => Ok(Observable::Nearest(measure(1)?)),
            "ball" if parts.len() == 3 => {
                let r = parts[2]
                    .strip_prefix("r=")
                    .and_then(|r| r.parse::<f64>().ok())
                    .filter(|r| r.is_finite() && *r >= 0.0)
                    .ok_or_else(bad)?;
                Ok(Observable::Ball(measure(1)?, r))
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Observable {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Observable> for String {
    fn from(o: Observable) -> String {
        o.to_string()
    }
}
