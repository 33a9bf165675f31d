use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trac::features::{FeatureConfig, MultimodalObservation};
use trac::frame::Frame;
use trac::geometry::BoundingBox;
use trac::solver::SolverConfig;
use trac::templates::{
    init_dictionary, long_term_weights, removal_weights, short_term_select, update_dictionary, update_importance,
    CandidateBuffer, Dictionary,
};

fn basis(d: usize, i: usize) -> MultimodalObservation {
    MultimodalObservation {
        vectors: vec![DVector::from_fn(d, |j, _| if j == i { 1.0 } else { 0.0 })],
    }
}

/// `l` candidates split round-robin over `clusters` mutually orthogonal appearances.
fn clustered_buffer(l: usize, clusters: usize) -> CandidateBuffer {
    let mut buf = CandidateBuffer::new(l);
    for f in 0..l {
        buf.push(f, basis(16, f % clusters));
    }
    buf
}

fn blob_frame() -> Frame {
    Frame::from_fn(120, 100, |x, y| {
        let dx = (x as f32 - 60.0) / 14.0;
        let dy = (y as f32 - 50.0) / 18.0;
        let g = (-(dx * dx + dy * dy)).exp();
        [0.2 + 0.7 * g, 0.3 + 0.5 * g * (x as f32 / 120.0), 0.25 + 0.2 * (y as f32 / 100.0)]
    })
}

#[test]
fn identical_candidates_select_one() {
    let buf = clustered_buffer(10, 1);
    let sel = short_term_select(&buf, 10, 0.5, 0.75, &SolverConfig::default()).unwrap();
    assert_eq!(sel.len(), 1);
}

#[test]
fn two_orthogonal_clusters_select_at_least_two() {
    let buf = clustered_buffer(6, 2);
    let sel = short_term_select(&buf, 10, 0.5, 0.75, &SolverConfig::default()).unwrap();
    assert!(sel.len() >= 2, "{sel:?}");
    // one representative from each cluster
    let mut kinds: Vec<usize> = sel.iter().map(|&i| buf.get(i).unwrap().0 % 2).collect();
    kinds.sort();
    kinds.dedup();
    assert_eq!(kinds.len(), 2);
}

#[test]
fn selection_size_grows_with_diversity() {
    let cfg = SolverConfig::default();
    let r: Vec<usize> = (1..=3)
        .map(|c| short_term_select(&clustered_buffer(9, c), 10, 0.5, 0.75, &cfg).unwrap().len())
        .collect();
    assert_eq!(r[0], 1);
    assert!(r[1] >= 2);
    assert!(r[2] >= 3);
}

#[test]
fn tiny_threshold_selects_one() {
    for clusters in 1..=4 {
        let sel = short_term_select(&clustered_buffer(8, clusters), 10, 0.5, 1e-9, &SolverConfig::default()).unwrap();
        assert_eq!(sel.len(), 1);
    }
}

#[test]
fn selection_respects_caps() {
    // eight orthogonal candidates want eight rows; m = 4 allows three
    let sel = short_term_select(&clustered_buffer(8, 8), 4, 0.5, 1.0, &SolverConfig::default()).unwrap();
    assert_eq!(sel.len(), 3);
    let sel = short_term_select(&clustered_buffer(3, 3), 10, 0.5, 1.0, &SolverConfig::default()).unwrap();
    assert_eq!(sel.len(), 2);
}

#[test]
fn identical_templates_concentrate_long_term_weight() {
    let obs: Vec<_> = (0..5).map(|_| basis(8, 2)).collect();
    let d = Dictionary::from_observations(&obs, vec![0; 5]).unwrap();
    let w = long_term_weights(&d, 0.5, &SolverConfig::default()).unwrap();
    assert!(w.iter().cloned().fold(0.0, f64::max) > 0.8, "{w:?}");
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn orthogonal_templates_share_long_term_weight() {
    let obs: Vec<_> = (0..6).map(|i| basis(8, i)).collect();
    let d = Dictionary::from_observations(&obs, vec![0; 6]).unwrap();
    let w = long_term_weights(&d, 1e-4, &SolverConfig::default()).unwrap();
    for v in w {
        assert!((v - 1.0 / 6.0).abs() < 0.1 / 6.0, "{v}");
    }
}

#[test]
fn init_single_template_is_ground_truth_observation() {
    let frame = blob_frame();
    let cfg = FeatureConfig::default();
    let gt = BoundingBox::new(44.0, 30.0, 32.0, 40.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = init_dictionary(&frame, &gt, 1, 1.0, &cfg, &mut rng).unwrap();
    let want = trac::features::observe(&frame, &trac::motion::AffineState::from_box(&gt, cfg.patch_size), &cfg).unwrap();
    assert_eq!(d.column(0), want);
    assert_eq!(d.importance(), &[1.0]);
}

#[test]
fn init_without_jitter_repeats_the_template() {
    let frame = blob_frame();
    let cfg = FeatureConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = init_dictionary(&frame, &BoundingBox::new(44.0, 30.0, 32.0, 40.0), 4, 0.0, &cfg, &mut rng).unwrap();
    for i in 1..4 {
        assert_eq!(d.column(i), d.column(0));
    }
}

#[test]
fn init_jittered_templates_are_highly_correlated() {
    let frame = blob_frame();
    let cfg = FeatureConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = init_dictionary(&frame, &BoundingBox::new(44.0, 30.0, 32.0, 40.0), 10, 1.0, &cfg, &mut rng).unwrap();
    assert_eq!(d.m(), 10);
    for i in 0..10 {
        for j in i + 1..10 {
            let c = d.column(i).correlation(&d.column(j));
            assert!(c > 0.8 && c < 1.0, "({i},{j}) {c}");
        }
    }
    let w: f64 = d.importance().iter().sum();
    assert!((w - 1.0).abs() < 1e-12);
}

#[test]
fn init_rejects_box_outside_frame() {
    let frame = blob_frame();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = init_dictionary(&frame, &BoundingBox::new(100.0, 30.0, 32.0, 40.0), 3, 1.0, &FeatureConfig::default(), &mut rng);
    assert!(r.is_err());
}

#[test]
fn update_keeps_fresh_templates() {
    let obs: Vec<_> = (0..4).map(|i| basis(8, i)).collect();
    let d = Dictionary::from_observations(&obs, vec![0, 1, 2, 3]).unwrap();
    let mut buf = CandidateBuffer::new(5);
    for f in 10..13 {
        buf.push(f, basis(8, f - 6));
    }
    let next = update_dictionary(&d, &buf, &[0, 1, 2], 0.5, 0.5, &SolverConfig::default()).unwrap();
    let frames = next.source_frames();
    for f in 10..13 {
        assert!(frames.contains(&f));
    }
    assert_eq!(next.m(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn weights_stay_normalized(
        imp in prop::collection::vec(0.01f64..1.0, 4),
        z in prop::collection::vec(-2.0f64..2.0, 4),
        beta in 0.0f64..=1.0,
        pick in 0usize..3,
    ) {
        let obs: Vec<_> = (0..4).map(|i| basis(8, i)).collect();
        let mut d = Dictionary::from_observations(&obs, vec![0, 1, 2, 3]).unwrap();
        d.set_importance(imp).unwrap();
        let cfg = SolverConfig::default();
        d.set_representativeness(long_term_weights(&d, 0.5, &cfg).unwrap()).unwrap();
        let sums = |w: &[f64]| (w.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        prop_assert!(sums(d.importance()) && sums(d.representativeness()));
        prop_assert!(sums(&removal_weights(d.representativeness(), d.importance(), beta).unwrap()));
        let imp = update_importance(d.importance(), &[DVector::from_vec(z)]).unwrap();
        prop_assert!(sums(&imp));
        let mut buf = CandidateBuffer::new(3);
        for f in 0..3 {
            buf.push(20 + f, basis(8, 4 + f));
        }
        let next = update_dictionary(&d, &buf, &[pick], beta, 0.5, &cfg).unwrap();
        prop_assert!(sums(next.importance()) && sums(next.representativeness()));
        prop_assert_eq!(next.m(), 4);
        prop_assert!(next.source_frames().contains(&(22 - pick)));
    }
}
