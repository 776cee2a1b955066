use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unicomp::io::{read_container, write_compressed, CompressedLayout};
use unicomp::pipeline::{analyze, analyze_batch, compress, CompressionConfig};
use unicomp::{synth, TokenMatrix, VideoTensor};

fn frame(rows: &[[f32; 2]]) -> TokenMatrix {
    TokenMatrix::from_rows(rows).unwrap()
}

// Worked by hand: two identical frames form one group; with token_max 3
// the marker leaves a budget of 2. U = (1/3, 1/3, 2/3), so token 2 is
// picked first with no neighbours, then token 0 absorbs its duplicate.
#[test]
fn hand_worked_two_frame_video() {
    let f = frame(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
    let video = VideoTensor::new(vec![f.clone(), f], None).unwrap();
    let out = compress(&video, &CompressionConfig::with_token_max(3)).unwrap();

    assert_eq!(out.grouping.groups, vec![0..2]);
    assert_eq!(out.plan.as_ref().unwrap().budgets, vec![2]);
    let g = &out.frames[0];
    assert_eq!(g.selection_order, vec![2, 0]);
    assert_eq!(g.retained_ids, vec![0, 2]);
    assert_eq!(g.redundancy, vec![vec![1], vec![]]);
    assert_eq!(g.retained_features.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(out.markers, vec![2]);
    assert_eq!(out.emitted(), 3);

    let r = &out.report;
    assert_eq!(r.groups[0].bound, 0.0);
    assert_eq!(r.totals.retained_ratio, 0.5);
    assert!(r.is_consistent());
}

#[test]
fn auto_is_leaner_than_quarter_budget_on_redundant_video() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let video = synth::scene_video(&mut rng, 32, 49, 16, 4, 0.01);
    let auto = analyze(&video, &CompressionConfig::auto()).unwrap();
    let budgeted = analyze(&video, &CompressionConfig::with_ratio(0.25)).unwrap();
    assert_eq!(auto.totals.groups, 4);
    assert!(auto.totals.retained_ratio <= budgeted.totals.retained_ratio);
    assert!(budgeted.totals.retained_ratio <= 0.25);
}

#[test]
fn batch_auto_ratios_for_histograms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let videos: Vec<VideoTensor> = (1..=5)
        .map(|s| synth::scene_video(&mut rng, 10, 20, 8, s, 0.01))
        .collect();
    let reports = analyze_batch(&videos, &CompressionConfig::auto());
    for (s, r) in reports.iter().enumerate() {
        let r = r.as_ref().unwrap();
        assert_eq!(r.totals.groups, s + 1);
        assert!(r.totals.retained_ratio > 0.0 && r.totals.retained_ratio <= 1.0);
    }
}

#[test]
fn written_tokens_match_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let video = synth::scene_video(&mut rng, 9, 30, 6, 3, 0.05);
    let out = compress(&video, &CompressionConfig::with_ratio(0.3)).unwrap();
    let (bytes, sidecar) = write_compressed(&out).unwrap();
    let tokens = read_container(&bytes).unwrap();
    let layout: CompressedLayout = serde_json::from_str(&sidecar).unwrap();

    assert_eq!(tokens.len(), 1);
    let rows = &tokens.frames()[0];
    assert_eq!(layout.emitted, out.emitted());
    assert_eq!(rows.n() + layout.groups.len(), layout.emitted);
    for (g, f) in layout.groups.iter().zip(&out.frames) {
        for (k, id) in g.retained_ids.iter().enumerate() {
            let at = f.retained_ids.iter().position(|x| x == id).unwrap();
            assert_eq!(rows.row(g.token_offset + k), f.retained_features.row(at));
        }
    }
    // Markers close each group: position = tokens emitted so far + markers before.
    let mut seen = 0;
    for (i, g) in layout.groups.iter().enumerate() {
        seen += g.retained_ids.len();
        assert_eq!(g.marker, seen + i);
    }
}
