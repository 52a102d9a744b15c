use rethead_core::ablate::{build_mask, MaskKind, MaskStrategy};
use rethead_core::detect::RetrievalScoreTable;
use rethead_core::model::HeadMask;

/// 4 layers of 4 heads with two clear retrieval heads.
fn table() -> RetrievalScoreTable {
    let mut scores = vec![0.01; 16];
    scores[5] = 0.7;
    scores[14] = 0.4;
    RetrievalScoreTable {
        n_layers: 4,
        n_heads: 4,
        scores,
        test_size: 50,
        test_set_hash: "t".into(),
        checkpoint_hash: "c".into(),
        seed: 0,
        tau: None,
        selected: HeadMask::empty(),
    }
    .with_selection(0.1)
    .unwrap()
}

#[test]
fn random_masks_differ_across_seed_pairs() {
    let t = table();
    assert_eq!(t.selected.len(), 2);
    let mut distinct = 0;
    for i in 0..100u64 {
        let a = build_mask(&t, &MaskStrategy::new(MaskKind::Random, 2 * i)).unwrap();
        let b = build_mask(&t, &MaskStrategy::new(MaskKind::Random, 2 * i + 1)).unwrap();
        let again = build_mask(&t, &MaskStrategy::new(MaskKind::Random, 2 * i)).unwrap();
        assert_eq!(a, again);
        assert_eq!(a.len(), 2);
        distinct += (a != b) as usize;
    }
    assert!(distinct >= 95, "{distinct} of 100 pairs differ");
}

#[test]
fn control_masks_match_the_retrieval_size() {
    let t = table();
    for seed in 0..20 {
        for kind in [MaskKind::NonRetrieval, MaskKind::Random] {
            let m = build_mask(&t, &MaskStrategy::new(kind, seed)).unwrap();
            assert_eq!(m.len(), t.selected.len());
            if kind == MaskKind::NonRetrieval {
                assert!(m.is_disjoint(&t.selected));
            }
        }
    }
}
