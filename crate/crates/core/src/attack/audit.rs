//! Process-wide tally of perturbed samples checked against the l-infinity
//! ball and the pixel range.

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::Tensor;

use crate::nn::ops;
use crate::{Error, Result};

static CHECKED: AtomicU64 = AtomicU64::new(0);
static VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// Slack allowed on the ball radius for floating-point rounding.
pub const BALL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditCounts {
    pub checked: u64,
    pub violations: u64,
}

pub fn counts() -> AuditCounts {
    AuditCounts { checked: CHECKED.load(Ordering::SeqCst), violations: VIOLATIONS.load(Ordering::SeqCst) }
}

/// Per-example check that `‖adv − base‖∞ ≤ ε + tol` and `adv ∈ [0, 1]`.
/// Returns the number of violating examples after recording the tally.
pub fn check_ball(base: &Tensor, adv: &Tensor, eps: f64) -> Result<usize> {
    let b = adv.dim(0)?;
    if b == 0 {
        return Ok(0);
    }
    let dist = ops::linf_per_example(&(adv - base)?)?;
    let px = ops::to_vec_f64(adv)?;
    let per = px.len() / b;
    let mut bad = 0;
    for i in 0..b {
        let in_range = px[i * per..(i + 1) * per].iter().all(|v| (0.0..=1.0).contains(v));
        if !(dist[i] <= eps + BALL_TOLERANCE && in_range) {
            bad += 1;
        }
    }
    CHECKED.fetch_add(b as u64, Ordering::SeqCst);
    VIOLATIONS.fetch_add(bad as u64, Ordering::SeqCst);
    Ok(bad)
}

/// [`check_ball`] that turns any violation into an error.
pub fn enforce_ball(base: &Tensor, adv: &Tensor, eps: f64) -> Result<()> {
    match check_ball(base, adv, eps)? {
        0 => Ok(()),
        n => Err(Error::Invariant(format!("{n} perturbed samples left the ε = {eps} ball or pixel range"))),
    }
}
