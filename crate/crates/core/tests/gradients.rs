mod common;

use common::grad::{align_error, backbone_error, modulation_error, scorer_error, AlignTerm};

const TOL: f64 = 1e-4;

#[test]
fn backbone_matches_finite_differences() {
    for seed in 0..3 {
        let (err, name) = backbone_error(seed);
        assert!(err <= TOL, "seed {seed}: {name} rel err {err}");
    }
}

#[test]
fn modulation_bank_matches_finite_differences_through_frozen_history() {
    for seed in 0..3 {
        let (err, name) = modulation_error(seed);
        assert!(err <= TOL, "seed {seed}: {name} rel err {err}");
    }
}

#[test]
fn alignment_terms_match_finite_differences() {
    for term in [AlignTerm::Direct, AlignTerm::Contrastive, AlignTerm::Distribution] {
        for seed in 0..4 {
            let err = align_error(term, seed);
            assert!(err <= TOL, "{term:?} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn scorer_matches_finite_differences() {
    for seed in 0..4 {
        let err = scorer_error(seed);
        assert!(err <= TOL, "seed {seed}: rel err {err}");
    }
}
