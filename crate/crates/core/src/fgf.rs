//! Frame group fusion.
//!
//! Frames are scanned in order. A frame joins the current group while its
//! global feature stays within `u_f` uniqueness of the group's first frame;
//! otherwise it opens a new group. Each group is then fused into one
//! representative frame by token-wise averaging at aligned positions.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{norm, pairwise_uniqueness};
use crate::tensor::{TokenMatrix, VideoTensor};

/// How each group is turned into its representative frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    /// Token-wise mean of the member frames.
    #[default]
    Fusion,
    /// First member frame, unchanged.
    First,
}

/// A fused group: the representative tokens, fused keys if the video had
/// keys, and the mean of the members' global features.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRepresentative {
    pub tokens: TokenMatrix,
    pub keys: Option<TokenMatrix>,
    pub global: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrouping {
    pub groups: Vec<Range<usize>>,
    pub representatives: Vec<GroupRepresentative>,
}

impl FrameGrouping {
    /// Number of groups `K_f`.
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Column mean over all tokens of a frame.
pub fn global_frame_feature(frame: &TokenMatrix) -> Result<Vec<f64>> {
    global_feature_of(frame, 0)
}

fn global_feature_of(frame: &TokenMatrix, index: usize) -> Result<Vec<f64>> {
    let mut mean = vec![0.0f64; frame.d()];
    for r in frame.rows() {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += f64::from(v);
        }
    }
    let inv = 1.0 / frame.n() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    if norm(&mean) == 0.0 {
        return Err(Error::DegenerateFrameFeature { frame: index });
    }
    Ok(mean)
}

/// Global features of every frame by mean pooling.
pub fn global_features(video: &VideoTensor) -> Result<Vec<Vec<f64>>> {
    video
        .frames()
        .iter()
        .enumerate()
        .map(|(t, f)| global_feature_of(f, t))
        .collect()
}

/// Contiguous group boundaries from a sequential scan over global features.
pub fn scan_groups(globals: &[Vec<f64>], u_f: f64) -> Result<Vec<Range<usize>>> {
    if !(u_f >= 0.0) {
        return Err(Error::ThresholdOutOfRange {
            name: "U_f",
            value: u_f,
            min: 0.0,
            max: f64::INFINITY,
        });
    }
    let mut groups = Vec::new();
    let mut start = 0;
    for t in 1..globals.len() {
        let u = pairwise_uniqueness(&globals[t], &globals[start])
            .map_err(|_| Error::DegenerateFrameFeature { frame: t })?;
        if u >= u_f {
            groups.push(start..t);
            start = t;
        }
    }
    if !globals.is_empty() {
        groups.push(start..globals.len());
    }
    Ok(groups)
}

fn mean_frames(frames: &[TokenMatrix]) -> TokenMatrix {
    let first = &frames[0];
    if frames.len() == 1 {
        return first.clone();
    }
    let mut acc = vec![0.0f64; first.as_slice().len()];
    for f in frames {
        for (a, &v) in acc.iter_mut().zip(f.as_slice()) {
            *a += f64::from(v);
        }
    }
    let inv = 1.0 / frames.len() as f64;
    let data = acc.into_iter().map(|a| (a * inv) as f32).collect();
    TokenMatrix::new(first.n(), first.d(), data).expect("mean of finite frames is finite")
}

fn mean_vectors(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; vs[0].len()];
    for v in vs {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let inv = 1.0 / vs.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// Groups frames and builds their representatives.
///
/// `external_globals` replaces the mean-pooled global features, e.g. with a
/// classifier embedding computed upstream; it must hold one vector per frame.
pub fn group_frames_with(
    video: &VideoTensor,
    u_f: f64,
    variant: FusionVariant,
    external_globals: Option<&[Vec<f64>]>,
) -> Result<FrameGrouping> {
    let globals = match external_globals {
        Some(g) => {
            if g.len() != video.len() {
                return Err(Error::Shape(format!(
                    "{} global features for {} frames",
                    g.len(),
                    video.len()
                )));
            }
            for (t, v) in g.iter().enumerate() {
                if v.len() != g[0].len() || norm(v) == 0.0 {
                    return Err(Error::DegenerateFrameFeature { frame: t });
                }
            }
            g.to_vec()
        }
        None => global_features(video)?,
    };
    let groups = scan_groups(&globals, u_f)?;
    let representatives = groups
        .iter()
        .map(|g| {
            let frames = &video.frames()[g.clone()];
            let keys = video.keys().map(|k| &k[g.clone()]);
            match variant {
                FusionVariant::Fusion => GroupRepresentative {
                    tokens: mean_frames(frames),
                    keys: keys.map(mean_frames),
                    global: mean_vectors(&globals[g.clone()]),
                },
                FusionVariant::First => GroupRepresentative {
                    tokens: frames[0].clone(),
                    keys: keys.map(|k| k[0].clone()),
                    global: globals[g.start].clone(),
                },
            }
        })
        .collect();
    Ok(FrameGrouping {
        groups,
        representatives,
    })
}

/// Groups frames with mean-pooled global features and fused representatives.
pub fn group_frames(video: &VideoTensor, u_f: f64) -> Result<FrameGrouping> {
    group_frames_with(video, u_f, FusionVariant::Fusion, None)
}

/// Same grouping, but each representative is the group's first frame.
pub fn group_frames_first_only(video: &VideoTensor, u_f: f64) -> Result<FrameGrouping> {
    group_frames_with(video, u_f, FusionVariant::First, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame_of(row: &[f32], n: usize) -> TokenMatrix {
        TokenMatrix::from_rows(&vec![row.to_vec(); n]).unwrap()
    }

    fn random_frame(rng: &mut ChaCha8Rng, n: usize, d: usize) -> TokenMatrix {
        let data = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0) + 0.05).collect();
        TokenMatrix::new(n, d, data).unwrap()
    }

    fn assert_partition(groups: &[Range<usize>], t: usize) {
        let mut next = 0;
        for g in groups {
            assert_eq!(g.start, next);
            assert!(g.end > g.start);
            next = g.end;
        }
        assert_eq!(next, t);
    }

    #[test]
    fn global_feature_examples() {
        let g = global_frame_feature(&frame_of(&[0.5, -2.0], 4)).unwrap();
        assert_abs_diff_eq!(g[0], 0.5);
        assert_abs_diff_eq!(g[1], -2.0);
        let g = global_frame_feature(&TokenMatrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap())
            .unwrap();
        assert_eq!(g, vec![0.5, 0.5]);
    }

    #[test]
    fn global_feature_matches_column_mean_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_frame(&mut rng, 196, 4);
        let g = global_frame_feature(&f).unwrap();
        for c in 0..4 {
            let mut s = 0.0f64;
            for r in 0..196 {
                s += f.row(r)[c] as f64;
            }
            assert_abs_diff_eq!(g[c], s / 196.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn zero_mean_frame_is_degenerate() {
        let f = TokenMatrix::from_rows(&[[1.0f32, -1.0], [-1.0, 1.0]]).unwrap();
        assert_eq!(
            global_frame_feature(&f),
            Err(Error::DegenerateFrameFeature { frame: 0 })
        );
    }

    #[test]
    fn identical_frames_form_one_group() {
        let f = frame_of(&[0.2, 0.7, -0.1], 5);
        let v = VideoTensor::new(vec![f.clone(); 7], None).unwrap();
        let g = group_frames(&v, 0.005).unwrap();
        assert_eq!(g.groups, vec![0..7]);
        assert_eq!(g.representatives[0].tokens, f);
    }

    #[test]
    fn zero_threshold_gives_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<_> = (0..5).map(|_| random_frame(&mut rng, 3, 2)).collect();
        let v = VideoTensor::new(frames.clone(), None).unwrap();
        let g = group_frames(&v, 0.0).unwrap();
        assert_eq!(g.len(), 5);
        let first = group_frames_first_only(&v, 0.0).unwrap();
        for (rep, f) in first.representatives.iter().zip(&frames) {
            assert_eq!(&rep.tokens, f);
        }
    }

    #[test]
    fn alternating_orthogonal_frames() {
        // Globals alternate between e0 and e1: u = 1 between neighbours,
        // 0 between frames of the same parity.
        let a = frame_of(&[1.0, 0.0], 3);
        let b = frame_of(&[0.0, 1.0], 3);
        let frames = vec![a.clone(), b.clone(), a.clone(), b.clone(), a, b];
        let v = VideoTensor::new(frames, None).unwrap();
        assert_eq!(group_frames(&v, 0.005).unwrap().len(), 6);
        assert_eq!(group_frames(&v, 1.5).unwrap().groups, vec![0..6]);
    }

    #[test]
    fn anchor_is_first_frame_of_group() {
        // Drift: each step is small but the third frame is far from the first.
        let angles = [0.0f32, 0.06, 0.12];
        let frames: Vec<_> = angles
            .iter()
            .map(|a| frame_of(&[a.cos(), a.sin()], 2))
            .collect();
        let v = VideoTensor::new(frames, None).unwrap();
        // u(0, 0.06 rad) ~ 0.0018, u(0, 0.12 rad) ~ 0.0072.
        let g = group_frames(&v, 0.005).unwrap();
        assert_eq!(g.groups, vec![0..2, 2..3]);
    }

    #[test]
    fn first_only_keeps_first_member_verbatim() {
        let frames = vec![
            frame_of(&[1.0, 0.0], 2),
            frame_of(&[1.0, 0.001], 2),
            frame_of(&[1.0, 0.002], 2),
        ];
        let v = VideoTensor::new(frames.clone(), None).unwrap();
        let g = group_frames_first_only(&v, 0.5).unwrap();
        assert_eq!(g.groups, vec![0..3]);
        assert_eq!(g.representatives[0].tokens, frames[0]);
        let fused = group_frames(&v, 0.5).unwrap();
        assert_abs_diff_eq!(fused.representatives[0].tokens.row(0)[1], 0.001, epsilon = 1e-7);
    }

    #[test]
    fn keys_are_fused_alongside() {
        let frames = vec![frame_of(&[1.0, 0.0], 2), frame_of(&[1.0, 0.0], 2)];
        let keys = vec![frame_of(&[2.0, 0.0, 1.0], 2), frame_of(&[4.0, 0.0, 1.0], 2)];
        let v = VideoTensor::new(frames, Some(keys)).unwrap();
        let g = group_frames(&v, 0.005).unwrap();
        let k = g.representatives[0].keys.as_ref().unwrap();
        assert_eq!(k.row(0), &[3.0, 0.0, 1.0]);
    }

    #[test]
    fn external_globals_drive_grouping() {
        let f = frame_of(&[1.0, 1.0], 2);
        let v = VideoTensor::new(vec![f.clone(), f.clone(), f], None).unwrap();
        let ext = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let g = group_frames_with(&v, 0.005, FusionVariant::Fusion, Some(&ext)).unwrap();
        assert_eq!(g.groups, vec![0..1, 1..3]);
        assert!(group_frames_with(&v, 0.005, FusionVariant::Fusion, Some(&ext[..2])).is_err());
    }

    #[test]
    fn negative_threshold_rejected() {
        let v = VideoTensor::new(vec![frame_of(&[1.0], 1)], None).unwrap();
        assert!(group_frames(&v, -0.1).is_err());
    }

    fn video_strategy() -> impl Strategy<Value = VideoTensor> {
        (1usize..=12, 1usize..=4, 1usize..=4, any::<u64>()).prop_map(|(t, n, d, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // A shared base keeps neighbouring frames close enough that
            // non-trivial groups actually form.
            let base = random_frame(&mut rng, n, d);
            let frames = (0..t)
                .map(|_| {
                    let scale = rng.random_range(0.0f32..0.6);
                    let noise = random_frame(&mut rng, n, d);
                    let data = base
                        .as_slice()
                        .iter()
                        .zip(noise.as_slice())
                        .map(|(b, e)| b + scale * e)
                        .collect();
                    TokenMatrix::new(n, d, data).unwrap()
                })
                .collect();
            VideoTensor::new(frames, None).unwrap()
        })
    }

    // Anchoring on a group's first frame makes the count non-monotone in U_f:
    // at 0.005 frames 3..7 all sit close to frame 3, at 0.01 frame 2 absorbs
    // 3 and 4 and the later frames no longer share an anchor.
    #[test]
    fn group_count_can_rise_with_threshold() {
        let rows: [[f32; 4]; 7] = [
            [-0.17576365, 1.1642022, -0.47596568, 0.41824618],
            [-0.44567275, 1.2039979, -0.5612734, 0.70594454],
            [-0.30807218, 0.9232691, -0.76883036, 0.445858],
            [-0.25113374, 0.96020645, -0.66123164, 0.50693923],
            [-0.29650047, 0.90547526, -0.7394184, 0.4838391],
            [-0.262195, 1.1085521, -0.67586094, 0.6602829],
            [-0.25607908, 0.8758458, -0.7549732, 0.46923858],
        ];
        let frames = rows
            .iter()
            .map(|r| TokenMatrix::new(2, 2, r.to_vec()).unwrap())
            .collect();
        let globals = global_features(&VideoTensor::new(frames, None).unwrap()).unwrap();
        assert_eq!(scan_groups(&globals, 0.005).unwrap(), vec![0..2, 2..3, 3..7]);
        assert_eq!(scan_groups(&globals, 0.01).unwrap(), vec![0..2, 2..5, 5..6, 6..7]);
        assert_eq!(scan_groups(&globals, 0.05).unwrap(), vec![0..7]);
    }

    proptest! {
        #[test]
        fn grouping_partitions_and_first_group_grows(v in video_strategy()) {
            let Ok(globals) = global_features(&v) else { return Ok(()); };
            let mut prev_end = 0;
            for u_f in [0.0, 0.001, 0.005, 0.01, 0.05, 0.2, 0.5, 1.0, 2.0, 2.5] {
                let groups = scan_groups(&globals, u_f).unwrap();
                assert_partition(&groups, v.len());
                // Only the first anchor is fixed across thresholds.
                prop_assert!(groups[0].end >= prev_end);
                prev_end = groups[0].end;
                if u_f == 0.0 {
                    prop_assert_eq!(groups.len(), v.len());
                }
                if u_f > 2.0 {
                    prop_assert_eq!(groups.len(), 1);
                }
            }
        }

        #[test]
        fn representatives_are_token_means(v in video_strategy(), u_f in 0.0f64..0.3) {
            let Ok(g) = group_frames(&v, u_f) else { return Ok(()); };
            let first = group_frames_first_only(&v, u_f).unwrap();
            prop_assert_eq!(&g.groups, &first.groups);
            for (range, rep) in g.groups.iter().zip(&g.representatives) {
                for (k, &val) in rep.tokens.as_slice().iter().enumerate() {
                    let mean: f64 = v.frames()[range.clone()]
                        .iter()
                        .map(|f| f.as_slice()[k] as f64)
                        .sum::<f64>() / range.len() as f64;
                    prop_assert!((val as f64 - mean).abs() <= 1e-6);
                }
                let pooled = global_frame_feature(&rep.tokens).unwrap();
                for (a, b) in pooled.iter().zip(&rep.global) {
                    prop_assert!((a - b).abs() <= 1e-6);
                }
            }
            // Regrouping the representatives never fails and stays a partition.
            let reps = VideoTensor::new(
                g.representatives.iter().map(|r| r.tokens.clone()).collect(),
                None,
            ).unwrap();
            if let Ok(again) = group_frames(&reps, u_f) {
                assert_partition(&again.groups, reps.len());
            }
        }
    }
}
