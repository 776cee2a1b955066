//! Seeded synthetic token data for tests, benches and demos.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{TokenMatrix, VideoTensor};

/// Entries uniform in `[-1, 1)`; an all-zero row (practically impossible)
/// is replaced by a unit vector.
pub fn random_frame<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> TokenMatrix {
    let mut data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    for row in data.chunks_mut(d) {
        if row.iter().all(|&v| v == 0.0) {
            row[0] = 1.0;
        }
    }
    TokenMatrix::new(n, d, data).expect("finite")
}

/// Rows drawn uniformly from the unit sphere.
pub fn random_unit_frame<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> TokenMatrix {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        loop {
            let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nr > 1e-6 {
                data.extend(row.iter().map(|v| (v / nr) as f32));
                break;
            }
        }
    }
    TokenMatrix::new(n, d, data).expect("finite")
}

/// Tokens scattered around `clusters` centres with per-entry noise of at
/// most `spread`. Returns the frame and each token's cluster label.
///
/// With `d >= clusters` the centres are distinct basis vectors, so for a
/// small spread the within-cluster uniqueness stays near 0 and the
/// between-cluster uniqueness near 1. Labels are assigned round-robin.
pub fn clustered_frame<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    d: usize,
    clusters: usize,
    spread: f32,
) -> (TokenMatrix, Vec<usize>) {
    let centres: Vec<Vec<f32>> = if d >= clusters {
        (0..clusters)
            .map(|c| (0..d).map(|k| if k == c { 1.0 } else { 0.0 }).collect())
            .collect()
    } else {
        (0..clusters)
            .map(|_| random_unit_frame(rng, 1, d).into_vec())
            .collect()
    };
    let labels: Vec<usize> = (0..n).map(|i| i % clusters).collect();
    let mut data = Vec::with_capacity(n * d);
    for &l in &labels {
        data.extend(
            centres[l]
                .iter()
                .map(|&c| c + spread * rng.random_range(-1.0f32..1.0)),
        );
    }
    (TokenMatrix::new(n, d, data).expect("finite"), labels)
}

/// Independent random frames, optionally with random keys of dim `dk`.
pub fn random_video<R: Rng + ?Sized>(
    rng: &mut R,
    t: usize,
    n: usize,
    d: usize,
    dk: Option<usize>,
) -> VideoTensor {
    let frames = (0..t).map(|_| random_frame(rng, n, d)).collect();
    let keys = dk.map(|dk| (0..t).map(|_| random_frame(rng, n, dk)).collect());
    VideoTensor::new(frames, keys).expect("uniform shapes")
}

/// A video made of `scenes` static shots: every frame is its scene's base
/// frame plus noise of at most `jitter` per entry. Scene lengths are as
/// even as possible.
pub fn scene_video<R: Rng + ?Sized>(
    rng: &mut R,
    t: usize,
    n: usize,
    d: usize,
    scenes: usize,
    jitter: f32,
) -> VideoTensor {
    let scenes = scenes.clamp(1, t);
    // Offset keeps every frame's mean-pooled feature well away from zero.
    let bases: Vec<TokenMatrix> = (0..scenes)
        .map(|_| {
            let f = random_frame(rng, n, d);
            let shift: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let data = f
                .as_slice()
                .chunks(d)
                .flat_map(|r| r.iter().zip(&shift).map(|(v, s)| v + 2.0 * s).collect::<Vec<_>>())
                .collect();
            TokenMatrix::new(n, d, data).expect("finite")
        })
        .collect();
    let frames = (0..t)
        .map(|i| {
            let base = &bases[i * scenes / t];
            let data = base
                .as_slice()
                .iter()
                .map(|v| v + jitter * rng.random_range(-1.0f32..1.0))
                .collect();
            TokenMatrix::new(n, d, data).expect("finite")
        })
        .collect();
    VideoTensor::new(frames, None).expect("uniform shapes")
}
