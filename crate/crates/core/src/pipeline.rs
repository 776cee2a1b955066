//! End-to-end compression: frame grouping, token allocation, per-group
//! selection, surplus re-allocation and boundary markers.
//!
//! In budgeted mode the emitted sequence (retained tokens plus one marker
//! per group) never exceeds `token_max`. When grouping alone already fits
//! the budget, groups are emitted whole and allocation/selection are
//! skipped. Auto mode runs selection with no cap, so each group keeps one
//! token per redundancy cluster.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alloc::{self, AllocVariant, AllocationPlan};
use crate::baselines::{random_select, unique_topk, Selector};
use crate::error::{Error, Result};
use crate::fgf::{group_frames_with, FrameGrouping, FusionVariant, GroupRepresentative};
use crate::math::{evaluate_bounds, SelectionSet};
use crate::sdc::{sdc_parallel, CompressedFrame, EmitOrder, SdcParams};
use crate::tensor::{TokenMatrix, VideoTensor};

/// Default frame-grouping threshold.
pub const DEFAULT_U_F: f64 = 0.005;
/// Default token redundancy threshold.
pub const DEFAULT_U_C: f64 = 0.2;
/// Rounds of surplus re-allocation before leftovers are reported as waste.
pub const SURPLUS_ROUNDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Budgeted,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub u_f: f64,
    pub u_c: f64,
    pub retain_ratio: Option<f64>,
    pub token_max: Option<usize>,
    pub mode: Mode,
    pub order: EmitOrder,
    pub fuse: bool,
    pub fgf_variant: FusionVariant,
    pub alloc_variant: AllocVariant,
    pub selector: Selector,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            u_f: DEFAULT_U_F,
            u_c: DEFAULT_U_C,
            retain_ratio: None,
            token_max: None,
            mode: Mode::Budgeted,
            order: EmitOrder::Ids,
            fuse: true,
            fgf_variant: FusionVariant::Fusion,
            alloc_variant: AllocVariant::Softmax,
            selector: Selector::Sdc,
        }
    }
}

impl CompressionConfig {
    pub fn with_ratio(ratio: f64) -> Self {
        Self {
            retain_ratio: Some(ratio),
            ..Self::default()
        }
    }

    pub fn with_token_max(token_max: usize) -> Self {
        Self {
            token_max: Some(token_max),
            ..Self::default()
        }
    }

    pub fn auto() -> Self {
        Self {
            mode: Mode::Auto,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.u_f >= 0.0 && self.u_f.is_finite()) {
            return Err(Error::Config(format!("U_f must be >= 0, got {}", self.u_f)));
        }
        if !(0.0..=2.0).contains(&self.u_c) {
            return Err(Error::Config(format!("U_c must be in [0, 2], got {}", self.u_c)));
        }
        match (self.mode, self.retain_ratio, self.token_max) {
            (Mode::Budgeted, Some(r), None) if r > 0.0 && r <= 1.0 => Ok(()),
            (Mode::Budgeted, Some(r), None) => {
                Err(Error::Config(format!("retain ratio must be in (0, 1], got {r}")))
            }
            (Mode::Budgeted, None, Some(_)) => Ok(()),
            (Mode::Budgeted, None, None) => {
                Err(Error::Config("budgeted mode needs a retain ratio or a token max".into()))
            }
            (Mode::Budgeted, Some(_), Some(_)) => {
                Err(Error::Config("retain ratio and token max are mutually exclusive".into()))
            }
            (Mode::Auto, None, None) => Ok(()),
            (Mode::Auto, _, _) => {
                Err(Error::Config("auto mode takes no retain ratio or token max".into()))
            }
        }
    }

    /// Total token limit for a video of `total_tokens` tokens, if budgeted.
    pub fn resolve_token_max(&self, total_tokens: usize) -> Option<usize> {
        match self.mode {
            Mode::Auto => None,
            Mode::Budgeted => self
                .token_max
                .or_else(|| self.retain_ratio.map(|r| (r * total_tokens as f64).floor() as usize)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// Frame range `[start, end)`.
    pub range: [usize; 2],
    /// Final budget after surplus re-allocation.
    pub budget: usize,
    /// Budget handed out by the allocator.
    pub initial_budget: usize,
    pub retained: usize,
    pub fused: usize,
    pub dropped: usize,
    /// `2 * sum_j min_{i in S} u_ij` over the group representative.
    pub bound: f64,
    /// Nearest-token reconstruction error over the group representative.
    pub error: f64,
    /// Times selection was re-run after receiving surplus.
    pub reruns: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub mode: Mode,
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub groups: usize,
    pub token_max: Option<usize>,
    /// Retained tokens plus markers.
    pub emitted: usize,
    pub retained: usize,
    pub markers: usize,
    /// `emitted / (frames * tokens_per_frame)`.
    pub retained_ratio: f64,
    /// Whether grouping alone met the budget.
    pub bypassed: bool,
    /// Tokens moved between groups by the allocator and the surplus rounds.
    pub waste_redistributed: usize,
    /// Budget that could not be used by any group.
    pub surplus_unused: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub grouping: f64,
    pub allocation: f64,
    pub selection: f64,
    pub metrics: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub config: CompressionConfig,
    pub groups: Vec<GroupReport>,
    pub totals: Totals,
    pub timings_ms: Timings,
}

impl CompressionReport {
    /// Same report with wall-times zeroed, for comparing runs.
    pub fn without_timings(&self) -> Self {
        Self {
            timings_ms: Timings::default(),
            ..self.clone()
        }
    }

    /// Cross-checks the per-group counts against the totals.
    pub fn is_consistent(&self) -> bool {
        let retained: usize = self.groups.iter().map(|g| g.retained).sum();
        let t = &self.totals;
        retained == t.retained
            && t.markers == t.groups
            && t.groups == self.groups.len()
            && t.emitted == t.retained + t.markers
            && (t.frames * t.tokens_per_frame == 0
                || (t.retained_ratio - t.emitted as f64 / (t.frames * t.tokens_per_frame) as f64)
                    .abs()
                    < 1e-12)
            && t.token_max.is_none_or(|m| t.emitted <= m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedVideo {
    /// One entry per group.
    pub frames: Vec<CompressedFrame>,
    pub grouping: FrameGrouping,
    /// Allocation after surplus re-allocation; absent in auto mode and when
    /// grouping alone met the budget.
    pub plan: Option<AllocationPlan>,
    /// Positions of the boundary markers in the emitted sequence; marker
    /// `g` directly follows group `g`'s tokens.
    pub markers: Vec<usize>,
    pub report: CompressionReport,
}

impl CompressedVideo {
    pub fn emitted(&self) -> usize {
        self.frames.iter().map(CompressedFrame::retained).sum::<usize>() + self.markers.len()
    }

    /// All retained features, group after group, without markers.
    pub fn retained_features(&self) -> TokenMatrix {
        let d = self.frames[0].retained_features.d();
        let data: Vec<f32> = self
            .frames
            .iter()
            .flat_map(|f| f.retained_features.as_slice().iter().copied())
            .collect();
        TokenMatrix::new(data.len() / d, d, data).expect("non-empty and finite")
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn whole_group(rep: &GroupRepresentative) -> CompressedFrame {
    let n = rep.tokens.n();
    CompressedFrame {
        retained_ids: (0..n).collect(),
        retained_features: rep.tokens.clone(),
        redundancy: vec![Vec::new(); n],
        dropped_unclaimed: Vec::new(),
        selection_order: (0..n).collect(),
    }
}

fn select(rep: &GroupRepresentative, group: usize, budget: usize, config: &CompressionConfig) -> Result<CompressedFrame> {
    match config.selector {
        Selector::Sdc => {
            let params = SdcParams {
                budget,
                u_c: config.u_c,
                order: config.order,
                fuse: config.fuse,
            };
            sdc_parallel(&rep.tokens, rep.keys.as_ref(), &params)
        }
        Selector::UniqueTopk => unique_topk(&rep.tokens, rep.keys.as_ref(), budget),
        Selector::Random { seed } => random_select(&rep.tokens, budget, seed.wrapping_add(group as u64)),
    }
}

fn select_groups(
    reps: &[GroupRepresentative],
    budgets: &[usize],
    config: &CompressionConfig,
) -> Result<Vec<CompressedFrame>> {
    reps.par_iter()
        .zip(budgets)
        .enumerate()
        .map(|(g, (rep, &b))| select(rep, g, b, config))
        .collect()
}

struct Selection {
    frames: Vec<CompressedFrame>,
    plan: Option<AllocationPlan>,
    initial_budgets: Vec<usize>,
    reruns: Vec<usize>,
    redistributed: usize,
    surplus_unused: usize,
    bypassed: bool,
}

/// Runs selection, then returns unused budget from exhausted groups to the
/// others and re-runs only the groups that received more.
fn select_with_surplus(
    reps: &[GroupRepresentative],
    mut plan: AllocationPlan,
    cap: usize,
    config: &CompressionConfig,
) -> Result<Selection> {
    let k = reps.len();
    let initial_budgets = plan.budgets.clone();
    let mut frames = select_groups(reps, &plan.budgets, config)?;
    let mut saturated = vec![false; k];
    let mut reruns = vec![0; k];
    let mut redistributed = plan.waste_redistributed;
    let mut surplus_unused = plan.unallocated;

    for _ in 0..SURPLUS_ROUNDS {
        let mut surplus = 0;
        for g in 0..k {
            let got = frames[g].retained();
            if got < plan.budgets[g] {
                surplus += plan.budgets[g] - got;
                plan.budgets[g] = got;
                saturated[g] = true;
            }
        }
        if surplus == 0 {
            break;
        }
        let before = plan.budgets.clone();
        let eligible: Vec<bool> = saturated.iter().map(|s| !s).collect();
        let placed = alloc::redistribute(&mut plan.budgets, cap, &eligible, surplus);
        redistributed += placed;
        surplus_unused += surplus - placed;
        let grown: Vec<usize> = (0..k).filter(|&g| plan.budgets[g] > before[g]).collect();
        let rerun: Vec<CompressedFrame> = grown
            .par_iter()
            .map(|&g| select(&reps[g], g, plan.budgets[g], config))
            .collect::<Result<_>>()?;
        for (g, f) in grown.into_iter().zip(rerun) {
            frames[g] = f;
            reruns[g] += 1;
        }
    }
    // Whatever the last round could not place is reported, not kept.
    for g in 0..k {
        let got = frames[g].retained();
        if got < plan.budgets[g] {
            surplus_unused += plan.budgets[g] - got;
            plan.budgets[g] = got;
        }
    }
    plan.waste_redistributed = redistributed;
    Ok(Selection {
        frames,
        plan: Some(plan),
        initial_budgets,
        reruns,
        redistributed,
        surplus_unused,
        bypassed: false,
    })
}

fn run(video: &VideoTensor, config: &CompressionConfig) -> Result<CompressedVideo> {
    config.validate()?;
    let started = Instant::now();
    let (t, n) = (video.len(), video.tokens_per_frame());
    let token_max = config.resolve_token_max(video.total_tokens());

    let clock = Instant::now();
    let grouping = group_frames_with(video, config.u_f, config.fgf_variant, None)?;
    let grouping_ms = ms(clock);
    let k = grouping.len();
    let reps = &grouping.representatives;

    let clock = Instant::now();
    let plan = match token_max {
        Some(max) if k * (n + 1) > max => Some(match config.alloc_variant {
            AllocVariant::Softmax => {
                let globals: Vec<Vec<f64>> = reps.iter().map(|r| r.global.clone()).collect();
                let u = alloc::normalize_uniqueness(&alloc::frame_uniqueness(&globals)?);
                alloc::allocate(&u, max, n)?
            }
            AllocVariant::Uniform => alloc::allocate_uniform(k, max, n)?,
        }),
        _ => None,
    };
    let allocation_ms = ms(clock);

    let clock = Instant::now();
    let selection = match (config.mode, plan) {
        (Mode::Budgeted, Some(plan)) => select_with_surplus(reps, plan, n, config)?,
        (Mode::Budgeted, None) => Selection {
            frames: reps.iter().map(whole_group).collect(),
            plan: None,
            initial_budgets: vec![n; k],
            reruns: vec![0; k],
            redistributed: 0,
            surplus_unused: 0,
            bypassed: true,
        },
        (Mode::Auto, _) => Selection {
            frames: select_groups(reps, &vec![n; k], config)?,
            plan: None,
            initial_budgets: vec![n; k],
            reruns: vec![0; k],
            redistributed: 0,
            surplus_unused: 0,
            bypassed: false,
        },
    };
    let selection_ms = ms(clock);

    let mut markers = Vec::with_capacity(k);
    let mut pos = 0;
    for f in &selection.frames {
        pos += f.retained();
        markers.push(pos);
        pos += 1;
    }
    let emitted = pos;
    if let Some(max) = token_max {
        assert!(emitted <= max, "emitted {emitted} tokens over the limit {max}");
    }

    let clock = Instant::now();
    let metrics: Vec<(f64, f64)> = reps
        .par_iter()
        .zip(&selection.frames)
        .map(|(rep, f)| {
            let sel = SelectionSet::new(f.retained_ids.clone(), rep.tokens.n())?;
            let ev = evaluate_bounds(&rep.tokens, &sel)?;
            Ok((ev.uniqueness_bound, ev.error_nearest))
        })
        .collect::<Result<_>>()?;
    let metrics_ms = ms(clock);

    let groups = grouping
        .groups
        .iter()
        .enumerate()
        .map(|(g, range)| {
            let f = &selection.frames[g];
            GroupReport {
                range: [range.start, range.end],
                budget: selection
                    .plan
                    .as_ref()
                    .map_or(selection.initial_budgets[g], |p| p.budgets[g]),
                initial_budget: selection.initial_budgets[g],
                retained: f.retained(),
                fused: f.fused(),
                dropped: f.dropped_unclaimed.len(),
                bound: metrics[g].0,
                error: metrics[g].1,
                reruns: selection.reruns[g],
            }
        })
        .collect();
    let retained = emitted - k;
    let report = CompressionReport {
        config: config.clone(),
        groups,
        totals: Totals {
            mode: config.mode,
            frames: t,
            tokens_per_frame: n,
            groups: k,
            token_max,
            emitted,
            retained,
            markers: k,
            retained_ratio: emitted as f64 / (t * n) as f64,
            bypassed: selection.bypassed,
            waste_redistributed: selection.redistributed,
            surplus_unused: selection.surplus_unused,
        },
        timings_ms: Timings {
            grouping: grouping_ms,
            allocation: allocation_ms,
            selection: selection_ms,
            metrics: metrics_ms,
            total: ms(started),
        },
    };
    Ok(CompressedVideo {
        frames: selection.frames,
        grouping,
        plan: selection.plan,
        markers,
        report,
    })
}

/// Compresses a video under `config`.
pub fn compress(video: &VideoTensor, config: &CompressionConfig) -> Result<CompressedVideo> {
    run(video, config)
}

/// Runs the same computation as [`compress`] and keeps only the report.
pub fn analyze(video: &VideoTensor, config: &CompressionConfig) -> Result<CompressionReport> {
    run(video, config).map(|c| c.report)
}

/// [`analyze`] over many videos, in parallel, results in input order.
pub fn analyze_batch(videos: &[VideoTensor], config: &CompressionConfig) -> Vec<Result<CompressionReport>> {
    videos.par_iter().map(|v| analyze(v, config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check(video: &VideoTensor, out: &CompressedVideo) {
        let r = &out.report;
        assert!(r.is_consistent(), "{r:?}");
        assert_eq!(out.emitted(), r.totals.emitted);
        assert_eq!(out.markers.len(), out.frames.len());
        assert_eq!(out.frames.len(), out.grouping.len());
        for f in &out.frames {
            f.check_partition(video.tokens_per_frame()).unwrap();
        }
        if let Some(max) = r.totals.token_max {
            assert!(r.totals.emitted <= max);
        }
    }

    #[test]
    fn config_validation() {
        assert!(CompressionConfig::default().validate().is_err());
        assert!(CompressionConfig::with_ratio(0.2).validate().is_ok());
        assert!(CompressionConfig::with_ratio(0.0).validate().is_err());
        assert!(CompressionConfig::with_ratio(1.5).validate().is_err());
        assert!(CompressionConfig::auto().validate().is_ok());
        let both = CompressionConfig {
            token_max: Some(10),
            ..CompressionConfig::with_ratio(0.3)
        };
        assert!(matches!(both.validate(), Err(Error::Config(_))));
        let auto_ratio = CompressionConfig {
            retain_ratio: Some(0.3),
            ..CompressionConfig::auto()
        };
        assert!(auto_ratio.validate().is_err());
        let bad_uc = CompressionConfig {
            u_c: 3.0,
            ..CompressionConfig::with_ratio(0.3)
        };
        assert!(bad_uc.validate().is_err());
        let d = CompressionConfig::default();
        assert_eq!((d.u_f, d.u_c), (0.005, 0.2));
    }

    #[test]
    fn identical_frames_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = synth::random_frame(&mut rng, 49, 8);
        let v = VideoTensor::new(vec![f; 16], None).unwrap();
        let out = compress(&v, &CompressionConfig::with_ratio(0.2)).unwrap();
        check(&v, &out);
        assert_eq!(out.grouping.len(), 1);
        assert!(out.emitted() as f64 <= 0.2 * 16.0 * 49.0);
    }

    #[test]
    fn full_scale_video_at_10_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = synth::random_video(&mut rng, 32, 196, 16, None);
        let out = compress(&v, &CompressionConfig::with_ratio(0.10)).unwrap();
        check(&v, &out);
        assert_eq!(out.report.totals.token_max, Some(627));
        assert!(out.emitted() <= 627);
        assert_eq!(out.grouping.len(), 32);
    }

    #[test]
    fn bypass_emits_fused_groups_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = synth::scene_video(&mut rng, 20, 10, 6, 2, 0.001);
        let out = compress(&v, &CompressionConfig::with_ratio(0.25)).unwrap();
        check(&v, &out);
        assert!(out.report.totals.bypassed);
        assert!(out.plan.is_none());
        assert_eq!(out.grouping.len(), 2);
        for (f, rep) in out.frames.iter().zip(&out.grouping.representatives) {
            assert_eq!(f.retained_features, rep.tokens);
        }
        assert_eq!(out.markers, vec![10, 21]);
    }

    #[test]
    fn auto_mode_keeps_one_token_per_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (f, _) = synth::clustered_frame(&mut rng, 30, 8, 3, 0.05);
        let v = VideoTensor::new(vec![f.clone(), f], None).unwrap();
        let out = compress(&v, &CompressionConfig::auto()).unwrap();
        check(&v, &out);
        assert_eq!(out.grouping.len(), 1);
        assert_eq!(out.frames[0].retained(), 3);
        assert!((out.report.totals.retained_ratio - 4.0 / 60.0).abs() < 1e-12);
    }

    #[test]
    fn surplus_flows_to_other_groups() {
        // Group 0 is three tight clusters (exhausts at 3), group 1 is noise.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (clustered, _) = synth::clustered_frame(&mut rng, 20, 8, 3, 0.02);
        let noisy = synth::random_frame(&mut rng, 20, 8);
        let v = VideoTensor::new(vec![clustered, noisy], None).unwrap();
        let cfg = CompressionConfig {
            alloc_variant: AllocVariant::Uniform,
            ..CompressionConfig::with_token_max(22)
        };
        let out = compress(&v, &cfg).unwrap();
        check(&v, &out);
        let g = &out.report.groups;
        assert_eq!(g[0].initial_budget, 10);
        assert_eq!(g[0].retained, 3);
        assert_eq!(g[1].initial_budget, 10);
        assert_eq!(g[1].budget, 17);
        assert_eq!(g[1].reruns, 1);
        assert_eq!(out.emitted(), 22);
    }

    #[test]
    fn budget_too_small_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = synth::random_video(&mut rng, 8, 4, 4, None);
        let err = compress(&v, &CompressionConfig::with_token_max(10)).unwrap_err();
        assert!(matches!(err, Error::BudgetTooSmall { .. }));
    }

    #[test]
    fn analyze_matches_compress_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = synth::random_video(&mut rng, 6, 30, 8, Some(4));
        let cfg = CompressionConfig::with_ratio(0.3);
        let a = analyze(&v, &cfg).unwrap().without_timings();
        let c = compress(&v, &cfg).unwrap().report.without_timings();
        assert_eq!(a, c);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = synth::random_video(&mut rng, 12, 150, 8, None);
        let cfg = CompressionConfig::with_ratio(0.15);
        let run_with = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| compress(&v, &cfg).unwrap())
        };
        let a = run_with(1);
        let b = run_with(4);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.plan, b.plan);
        assert_eq!(a.markers, b.markers);
        assert_eq!(a.report.without_timings(), b.report.without_timings());
    }

    #[test]
    fn selectors_and_ablations_respect_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let t = rng.random_range(1..10);
            let v = synth::random_video(&mut rng, t, 20, 4, None);
            let cfg = CompressionConfig {
                selector: [Selector::Sdc, Selector::UniqueTopk, Selector::Random { seed: 3 }]
                    [rng.random_range(0..3)],
                fgf_variant: [FusionVariant::Fusion, FusionVariant::First][rng.random_range(0..2)],
                alloc_variant: [AllocVariant::Softmax, AllocVariant::Uniform][rng.random_range(0..2)],
                order: [EmitOrder::Ids, EmitOrder::Uniqueness][rng.random_range(0..2)],
                fuse: rng.random_bool(0.5),
                ..CompressionConfig::with_ratio(rng.random_range(0.1..0.9))
            };
            match compress(&v, &cfg) {
                Ok(out) => check(&v, &out),
                Err(Error::BudgetTooSmall { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn batch_analyze_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let vids: Vec<_> = (1..5).map(|t| synth::random_video(&mut rng, t, 10, 4, None)).collect();
        let out = analyze_batch(&vids, &CompressionConfig::auto());
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap().totals.frames, i + 1);
        }
    }
}
