use std::str::FromStr;

use crate::{Error, Result};

/// Step-size forms with known convergence guarantees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Const,
    /// `a / √K` for horizon `K`.
    InvSqrtHorizon,
    /// `a / k`.
    InvK,
    /// `a / √k`.
    InvSqrtK,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Const => "const",
            ScheduleKind::InvSqrtHorizon => "inv_sqrt_K",
            ScheduleKind::InvK => "inv_k",
            ScheduleKind::InvSqrtK => "inv_sqrt_k",
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "const" => ScheduleKind::Const,
            "inv_sqrt_K" => ScheduleKind::InvSqrtHorizon,
            "inv_k" => ScheduleKind::InvK,
            "inv_sqrt_k" => ScheduleKind::InvSqrtK,
            other => return Err(Error::Argument(format!("unknown schedule {other:?}"))),
        })
    }
}

/// Learning rate at round `k` of `horizon` (both 1-based).
pub fn lr_schedule(kind: ScheduleKind, a: f64, k: u64, horizon: u64) -> Result<f64> {
    if k == 0 || horizon == 0 {
        return Err(Error::Argument(format!(
            "round and horizon must be >= 1, got k={k}, K={horizon}"
        )));
    }
    if k > horizon {
        return Err(Error::Argument(format!("round {k} is past the horizon {horizon}")));
    }
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::Argument(format!("scale a must be > 0, got {a}")));
    }
    Ok(match kind {
        ScheduleKind::Const => a,
        ScheduleKind::InvSqrtHorizon => a / (horizon as f64).sqrt(),
        ScheduleKind::InvK => a / k as f64,
        ScheduleKind::InvSqrtK => a / (k as f64).sqrt(),
    })
}
