//! Per-type embedding counts for multi-embedding heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationScheme {
    /// Same count for every type.
    #[default]
    Equal,
    /// `1 + log_b f_v` with `f_v` the type frequency.
    LogFrequency,
    /// `1 + log_b l_v` with `l_v` the type's base-model loss.
    LogLoss,
}

impl std::str::FromStr for AllocationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(AllocationScheme::Equal),
            "log-frequency" => Ok(AllocationScheme::LogFrequency),
            "log-loss" => Ok(AllocationScheme::LogLoss),
            other => Err(Error::param(format!("unknown allocation scheme `{other}`"))),
        }
    }
}

/// Integer counts `>= 1` summing exactly to `target_total`.
///
/// The log schemes find `t = ln b` by bisection so that
/// `sum_v max(1, 1 + ln s_v / t) = target_total`, then round by largest
/// remainder (smaller id first on equal remainders).
pub fn allocate_embeddings(stats: &[f64], scheme: AllocationScheme, target_total: usize) -> Result<Vec<usize>> {
    let v = stats.len();
    if v == 0 {
        return Err(Error::param("no types to allocate"));
    }
    if target_total < v {
        return Err(Error::param(format!(
            "total {target_total} is below one embedding for each of {v} types"
        )));
    }
    if let Some(s) = stats.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::param(format!("statistics must be positive, got {s}")));
    }
    let all_equal = stats.iter().all(|s| *s == stats[0]);
    if scheme == AllocationScheme::Equal || all_equal || target_total == v {
        return Ok(round_largest_remainder(&vec![target_total as f64 / v as f64; v], target_total));
    }
    let logs: Vec<f64> = stats.iter().map(|s| s.ln()).collect();
    if logs.iter().all(|l| *l <= 0.0) {
        return Err(Error::param(format!(
            "total {target_total} is infeasible: no statistic exceeds 1"
        )));
    }
    let sum_at = |t: f64| -> f64 { logs.iter().map(|l| (1.0 + l / t).max(1.0)).sum() };
    let target = target_total as f64;
    // sum_at is non-increasing in t, tending to V as t grows and to +inf as t -> 0
    let (mut lo, mut hi) = (1e-300f64, 1.0f64);
    while sum_at(hi) > target {
        hi *= 2.0;
    }
    for _ in 0..2000 {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        if sum_at(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = if (sum_at(lo) - target).abs() < (sum_at(hi) - target).abs() {
        lo
    } else {
        hi
    };
    let real: Vec<f64> = logs.iter().map(|l| (1.0 + l / t).max(1.0)).collect();
    Ok(round_largest_remainder(&real, target_total))
}

fn round_largest_remainder(real: &[f64], total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = real.iter().map(|x| (x.floor() as usize).max(1)).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..real.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = real[a] - real[a].floor();
        let rb = real[b] - real[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    if assigned <= total {
        for &i in order.iter().cycle().take(total - assigned) {
            out[i] += 1;
        }
    } else {
        // floors can only overshoot through rounding noise: trim the
        // smallest remainders among types above 1
        let mut excess = assigned - total;
        for &i in order.iter().rev() {
            if excess == 0 {
                break;
            }
            if out[i] > 1 {
                out[i] -= 1;
                excess -= 1;
            }
        }
    }
    out
}
