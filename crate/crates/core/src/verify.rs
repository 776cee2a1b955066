//! Randomized checks of the reconstruction-error bounds.
//!
//! Three invariants are checked per trial on row-normalized tokens:
//!
//! * nearest identity: nearest-token reconstruction error equals
//!   `2 * sum_j min_{i in S} u_ij` (within 1e-6);
//! * step-2 inequality: softmax reconstruction error is at most
//!   `sum_j 2 (1 - sum_i w_ij s_ij)` (within 1e-6);
//! * monotone bound: growing `S` never raises the uniqueness bound.
//!
//! How often the softmax error exceeds the min-based bound is counted and
//! reported but never treated as a violation: with spread-out weights it
//! legitimately can.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::math::{dot, evaluate_normalized, NormalizedTokens};
use crate::synth::random_unit_frame;
use crate::tensor::TokenMatrix;

pub const IDENTITY_TOL: f64 = 1e-6;
pub const STEP2_TOL: f64 = 1e-6;
pub const MONOTONE_TOL: f64 = 1e-9;

/// Deliberate defects used to show the suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Uses `1 + s` in place of `1 - s` inside the uniqueness bound.
    SignFlip,
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub trials: usize,
    /// Largest token count per trial (at least 1).
    pub max_n: usize,
    /// Largest feature dim per trial for random tokens.
    pub max_d: usize,
    pub seed: u64,
    pub mutation: Mutation,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            max_n: 32,
            max_d: 16,
            seed: 0,
            mutation: Mutation::None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Counterexample {
    pub invariant: &'static str,
    pub trial: usize,
    pub tokens: Vec<Vec<f32>>,
    pub selected: Vec<usize>,
    pub superset: Vec<usize>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyOutcome {
    pub trials: usize,
    pub identity_violations: usize,
    pub step2_violations: usize,
    pub monotone_violations: usize,
    /// Trials where the superset was strictly larger than the selection.
    pub monotone_strict_checks: usize,
    /// Trials where softmax error exceeded the min-based bound.
    pub softmax_above_min_bound: usize,
    pub max_identity_gap: f64,
    pub max_step2_excess: f64,
    pub counterexample: Option<Counterexample>,
}

impl VerifyOutcome {
    pub fn violations(&self) -> usize {
        self.identity_violations + self.step2_violations + self.monotone_violations
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }

    /// Stable, human-readable summary lines.
    pub fn summary_lines(&self) -> Vec<String> {
        vec![
            format!("trials: {}", self.trials),
            format!(
                "nearest-identity: {} violations (max gap {:.1e})",
                self.identity_violations, self.max_identity_gap
            ),
            format!(
                "step2-inequality: {} violations (max excess {:.1e})",
                self.step2_violations,
                self.max_step2_excess.max(0.0)
            ),
            format!(
                "monotone-bound: {} violations ({} strict supersets)",
                self.monotone_violations, self.monotone_strict_checks
            ),
            format!(
                "softmax-above-min-bound: {} of {} trials (reported only)",
                self.softmax_above_min_bound, self.trials
            ),
            format!("result: {}", if self.passed() { "ok" } else { "VIOLATION" }),
        ]
    }
}

fn correct_bound(x: &NormalizedTokens, sel: &[usize]) -> f64 {
    evaluate_normalized(x, sel).uniqueness_bound
}

fn sign_flipped_bound(x: &NormalizedTokens, sel: &[usize]) -> f64 {
    let m = &x.matrix;
    2.0 * (0..m.rows)
        .map(|j| {
            sel.iter()
                .map(|&i| 1.0 + dot(m.row(i), m.row(j)))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
}

fn draw_tokens(rng: &mut ChaCha8Rng, cfg: &VerifyConfig, pool: &[TokenMatrix]) -> TokenMatrix {
    let max_n = cfg.max_n.max(1);
    if pool.is_empty() {
        let n = rng.random_range(1..=max_n);
        let d = rng.random_range(1..=cfg.max_d.max(1));
        return random_unit_frame(rng, n, d);
    }
    let frame = &pool[rng.random_range(0..pool.len())];
    let n = rng.random_range(1..=max_n.min(frame.n()));
    let ids = sample(rng, frame.n(), n).into_vec();
    frame.select_rows(&ids).expect("ids in range")
}

/// Runs the suite on random unit tokens, or on token subsets drawn from
/// `pool` frames when it is non-empty. Zero-norm rows in the pool are
/// skipped by redrawing.
pub fn verify_bounds(cfg: &VerifyConfig, pool: &[TokenMatrix]) -> VerifyOutcome {
    let bound_fn: fn(&NormalizedTokens, &[usize]) -> f64 = match cfg.mutation {
        Mutation::None => correct_bound,
        Mutation::SignFlip => sign_flipped_bound,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = VerifyOutcome {
        trials: cfg.trials,
        ..Default::default()
    };
    let mut trial = 0;
    let mut redraws = 0;
    while trial < cfg.trials {
        let tokens = draw_tokens(&mut rng, cfg, pool);
        let Ok(x) = NormalizedTokens::new(&tokens) else {
            redraws += 1;
            assert!(redraws < 100 * cfg.trials.max(1), "token pool is degenerate");
            continue;
        };
        let n = tokens.n();
        let k = rng.random_range(1..=n);
        let mut order = sample(&mut rng, n, n).into_vec();
        let mut sel: Vec<usize> = order.drain(..k).collect();
        sel.sort_unstable();
        let mut sup = sel.clone();
        if !order.is_empty() {
            let extra = rng.random_range(1..=order.len());
            sup.extend_from_slice(&order[..extra]);
            sup.sort_unstable();
            out.monotone_strict_checks += 1;
        }

        let ev = evaluate_normalized(&x, &sel);
        let bound = bound_fn(&x, &sel);
        let bound_sup = bound_fn(&x, &sup);

        let gap = (ev.error_nearest - bound).abs();
        out.max_identity_gap = out.max_identity_gap.max(gap);
        let excess = ev.error_softmax - ev.step2_bound;
        out.max_step2_excess = out.max_step2_excess.max(excess);
        if ev.error_softmax > bound {
            out.softmax_above_min_bound += 1;
        }

        let record = |name: &'static str, lhs: f64, rhs: f64, out: &mut VerifyOutcome| {
            if out.counterexample.is_none() {
                out.counterexample = Some(Counterexample {
                    invariant: name,
                    trial,
                    tokens: tokens.rows().map(<[f32]>::to_vec).collect(),
                    selected: sel.clone(),
                    superset: sup.clone(),
                    lhs,
                    rhs,
                });
            }
        };
        if gap > IDENTITY_TOL {
            out.identity_violations += 1;
            record("nearest-identity", ev.error_nearest, bound, &mut out);
        }
        if excess > STEP2_TOL {
            out.step2_violations += 1;
            record("step2-inequality", ev.error_softmax, ev.step2_bound, &mut out);
        }
        if bound_sup > bound + MONOTONE_TOL {
            out.monotone_violations += 1;
            record("monotone-bound", bound_sup, bound, &mut out);
        }
        trial += 1;
    }
    out
}
