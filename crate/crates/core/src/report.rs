//! Two-sided identity reports.

use serde::Serialize;

/// Default tolerance for identities checked by exact summation.
pub const EXACT_TOL: f64 = 1e-9;
/// Default z-score for Monte-Carlo verdicts.
pub const DEFAULT_Z: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Exact,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Result of comparing the two sides of an identity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MtpReport {
    pub check: String,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
    pub rel_diff: f64,
    pub mode: Mode,
    /// Exact mode: the absolute tolerance. Monte-Carlo mode: the z-score.
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se_lhs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se_rhs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se_combined: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    pub verdict: Verdict,
}

fn rel(lhs: f64, rhs: f64) -> f64 {
    let scale = lhs.abs().max(rhs.abs());
    if scale == 0.0 {
        0.0
    } else {
        (lhs - rhs).abs() / scale
    }
}

impl MtpReport {
    pub fn exact(check: impl Into<String>, lhs: f64, rhs: f64, tol: f64) -> MtpReport {
        let abs_diff = (lhs - rhs).abs();
        MtpReport {
            check: check.into(),
            lhs,
            rhs,
            abs_diff,
            rel_diff: rel(lhs, rhs),
            mode: Mode::Exact,
            tolerance: tol,
            se_lhs: None,
            se_rhs: None,
            se_combined: None,
            trials: None,
            seed: None,
            flags: Vec::new(),
            verdict: if abs_diff <= tol { Verdict::Pass } else { Verdict::Fail },
        }
    }

    /// Monte-Carlo comparison: pass iff `|lhs - rhs| <= z * se_combined`.
    /// A vanishing standard error still admits round-off of `EXACT_TOL`.
    #[allow(clippy::too_many_arguments)]
    pub fn monte_carlo(
        check: impl Into<String>,
        lhs: f64,
        rhs: f64,
        se_lhs: f64,
        se_rhs: f64,
        se_combined: f64,
        z: f64,
        trials: u64,
        seed: u64,
    ) -> MtpReport {
        let abs_diff = (lhs - rhs).abs();
        let ok = abs_diff.is_finite() && abs_diff <= (z * se_combined).max(EXACT_TOL);
        MtpReport {
            check: check.into(),
            lhs,
            rhs,
            abs_diff,
            rel_diff: rel(lhs, rhs),
            mode: Mode::MonteCarlo,
            tolerance: z,
            se_lhs: Some(se_lhs),
            se_rhs: Some(se_rhs),
            se_combined: Some(se_combined),
            trials: Some(trials),
            seed: Some(seed),
            flags: Vec::new(),
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn with_flag(mut self, flag: impl Into<String>) -> MtpReport {
        self.flags.push(flag.into());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_verdicts() {
        assert!(MtpReport::exact("x", 0.75, 0.75, EXACT_TOL).passed());
        let r = MtpReport::exact("x", 1.5, 0.5, EXACT_TOL);
        assert!(!r.passed());
        assert_eq!(r.abs_diff, 1.0);
    }

    #[test]
    fn mc_verdicts() {
        assert!(MtpReport::monte_carlo("x", 1.0, 1.1, 0.02, 0.02, 0.03, 4.0, 100, 0).passed());
        assert!(!MtpReport::monte_carlo("x", 1.0, 1.2, 0.02, 0.02, 0.03, 4.0, 100, 0).passed());
        assert!(!MtpReport::monte_carlo("x", 1.0, 2.0, 0.0, 0.0, 0.0, 4.0, 100, 0).passed());
    }
}
