//! Token allocation across frame groups.
//!
//! Each group's global uniqueness is mean-centred, scaled by `sqrt(K_f)` and
//! turned into a softmax share of the budget. One boundary marker per group
//! is charged up front, every group keeps at least one token, no group
//! exceeds the per-frame cap, and whatever the floors and caps leave over
//! is handed out again in even integer shares.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{norm, pairwise_uniqueness};

/// Per-group token budgets under a total limit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub budgets: Vec<usize>,
    pub token_max: usize,
    /// Markers charged against `token_max`, one per group.
    pub boundary_overhead: usize,
    /// Tokens moved by redistribution after flooring and capping.
    pub waste_redistributed: usize,
    /// Budget left unassigned because every group hit the cap.
    pub unallocated: usize,
}

impl AllocationPlan {
    pub fn total(&self) -> usize {
        self.budgets.iter().sum()
    }
}

/// Which rule splits the budget between groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocVariant {
    #[default]
    Softmax,
    Uniform,
}

/// Mean uniqueness of each group representative against all of them.
pub fn frame_uniqueness(reps: &[Vec<f64>]) -> Result<Vec<f64>> {
    if reps.is_empty() {
        return Err(Error::Shape("no group representatives".into()));
    }
    for (g, r) in reps.iter().enumerate() {
        if norm(r) == 0.0 {
            return Err(Error::DegenerateRepresentative { group: g });
        }
    }
    let k = reps.len();
    let mut u = vec![0.0; k * k];
    for t in 0..k {
        for s in (t + 1)..k {
            let v = pairwise_uniqueness(&reps[t], &reps[s])?;
            u[t * k + s] = v;
            u[s * k + t] = v;
        }
    }
    Ok(u.chunks_exact(k).map(crate::math::row_mean).collect())
}

/// Mean-centres `u` and scales it by `sqrt(K_f)`.
pub fn normalize_uniqueness(u: &[f64]) -> Vec<f64> {
    if u.is_empty() {
        return Vec::new();
    }
    let k = u.len() as f64;
    let mean = u.iter().sum::<f64>() / k;
    let scale = k.sqrt();
    u.iter().map(|v| (v - mean) * scale).collect()
}

/// Numerically stable softmax.
pub fn softmax(u: &[f64]) -> Vec<f64> {
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `floor(softmax(u)_t * budget)` for every group, before any capping.
pub fn softmax_quotas(u_norm: &[f64], budget: usize) -> Vec<usize> {
    softmax(u_norm)
        .into_iter()
        .map(|p| (p * budget as f64).floor() as usize)
        .collect()
}

/// Hands `amount` tokens out in rounds of even shares to eligible groups
/// still below `cap`. Once the amount left is smaller than the number of
/// open groups, one token each goes to the lowest indices. Returns how many
/// tokens were placed.
pub fn redistribute(budgets: &mut [usize], cap: usize, eligible: &[bool], amount: usize) -> usize {
    let mut left = amount;
    while left > 0 {
        let open: Vec<usize> = (0..budgets.len())
            .filter(|&g| eligible[g] && budgets[g] < cap)
            .collect();
        if open.is_empty() {
            break;
        }
        let share = left / open.len();
        if share == 0 {
            // Remainder is placed once so the index tie rule moves at most one token.
            for &g in &open[..left] {
                budgets[g] += 1;
            }
            left = 0;
            break;
        }
        for &g in &open {
            let take = share.min(cap - budgets[g]);
            budgets[g] += take;
            left -= take;
        }
    }
    amount - left
}

fn effective_budget(groups: usize, token_max: usize, cap: usize) -> Result<usize> {
    if groups == 0 {
        return Err(Error::Shape("no groups to allocate".into()));
    }
    if cap == 0 {
        return Err(Error::Config("per-frame cap must be at least 1".into()));
    }
    if token_max < 2 * groups {
        return Err(Error::BudgetTooSmall { token_max, groups });
    }
    Ok(token_max - groups)
}

/// Caps, floors at one token, trims any overshoot from the largest budgets,
/// then redistributes what is left of `budget`.
fn settle(mut budgets: Vec<usize>, budget: usize, token_max: usize, cap: usize) -> AllocationPlan {
    let groups = budgets.len();
    for k in budgets.iter_mut() {
        *k = (*k).clamp(1, cap);
    }
    let mut total: usize = budgets.iter().sum();
    while total > budget {
        // Largest budget gives one back; ties resolved towards the highest index.
        let g = (0..groups)
            .rev()
            .max_by_key(|&g| budgets[g])
            .expect("at least one group");
        budgets[g] -= 1;
        total -= 1;
    }
    let waste = budget - total;
    let placed = redistribute(&mut budgets, cap, &vec![true; groups], waste);
    AllocationPlan {
        budgets,
        token_max,
        boundary_overhead: groups,
        waste_redistributed: placed,
        unallocated: waste - placed,
    }
}

/// Splits `token_max` across groups by softmax of normalized uniqueness.
pub fn allocate(u_norm: &[f64], token_max: usize, per_frame_cap: usize) -> Result<AllocationPlan> {
    let budget = effective_budget(u_norm.len(), token_max, per_frame_cap)?;
    Ok(settle(
        softmax_quotas(u_norm, budget),
        budget,
        token_max,
        per_frame_cap,
    ))
}

/// Equal split across `groups`, remainder to the lowest indices.
pub fn allocate_uniform(groups: usize, token_max: usize, per_frame_cap: usize) -> Result<AllocationPlan> {
    let budget = effective_budget(groups, token_max, per_frame_cap)?;
    let share = budget / groups;
    let extra = budget % groups;
    let quotas = (0..groups).map(|g| share + usize::from(g < extra)).collect();
    Ok(settle(quotas, budget, token_max, per_frame_cap))
}
