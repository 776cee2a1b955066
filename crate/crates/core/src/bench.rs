//! Timing harness for the two spatial-compression implementations.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sdc::{sdc_parallel, sdc_reference, SdcParams};
use crate::synth::random_frame;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub n: usize,
    pub d: usize,
    pub budget: usize,
    pub u_c: f64,
    pub repeat: usize,
    pub seed: u64,
    /// Worker threads for the parallel path; 1 measures single-core speed.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n: 256,
            d: 64,
            budget: 64,
            u_c: 0.2,
            repeat: 20,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub n: usize,
    pub d: usize,
    pub budget: usize,
    pub repeat: usize,
    pub reference_ms: f64,
    pub parallel_ms: f64,
    pub speedup: f64,
    pub mismatches: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

/// Times both implementations on `repeat` seeded random frames and counts
/// frames where their outputs differ.
pub fn bench_sdc(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let params = SdcParams::new(cfg.budget.min(cfg.n), cfg.u_c);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frames: Vec<_> = (0..cfg.repeat).map(|_| random_frame(&mut rng, cfg.n, cfg.d)).collect();

    pool.install(|| {
        let mut ref_ms = Vec::with_capacity(cfg.repeat);
        let mut par_ms = Vec::with_capacity(cfg.repeat);
        let mut mismatches = 0;
        // Warm-up so first-touch allocation is not charged to either side.
        sdc_parallel(&frames[0], None, &params)?;
        for f in &frames {
            let t = Instant::now();
            let a = sdc_reference(f, None, &params)?;
            ref_ms.push(t.elapsed().as_secs_f64() * 1e3);
            let t = Instant::now();
            let b = sdc_parallel(f, None, &params)?;
            par_ms.push(t.elapsed().as_secs_f64() * 1e3);
            if a.mismatch(&b, 1e-6).is_some() {
                mismatches += 1;
            }
        }
        let (reference_ms, parallel_ms) = (median(ref_ms), median(par_ms));
        Ok(BenchReport {
            n: cfg.n,
            d: cfg.d,
            budget: params.budget,
            repeat: cfg.repeat,
            reference_ms,
            parallel_ms,
            speedup: reference_ms / parallel_ms.max(1e-9),
            mismatches,
        })
    })
}
