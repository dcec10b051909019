mod support;

use support::gradcheck::{check, tiny_scene, Term, TOLERANCE};

fn check_term(term: Term) {
    for seed in 0..5 {
        let scene = tiny_scene(seed);
        let r = check(&scene, term);
        assert!(
            r.max_rel < TOLERANCE,
            "{term:?} seed {seed}: relative error {:.3e} at {:?} (analytic {:.6e}, numeric {:.6e})",
            r.max_rel,
            r.worst,
            r.analytic,
            r.numeric
        );
    }
}

#[test]
fn l1() {
    check_term(Term::L1);
}

#[test]
fn dssim() {
    check_term(Term::Dssim);
}

#[test]
fn soft_depth() {
    check_term(Term::DepthSoft);
}

#[test]
fn hard_depth() {
    check_term(Term::DepthHard);
}

#[test]
fn scale_regularizer() {
    check_term(Term::Scale);
}

#[test]
fn opacity_offset_regularizer() {
    check_term(Term::OpacityOffset);
}

#[test]
fn similarity_regularizer() {
    check_term(Term::Similarity);
}

#[test]
fn composite() {
    check_term(Term::Composite);
}

