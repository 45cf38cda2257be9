use std::time::Instant;

use gzsl::gradcheck::{MicroProblem, ParamCheck};
use gzsl::trainer::{LossWeights, TrainConfig};

fn assert_close(checks: &[ParamCheck], what: &str) {
    for c in checks {
        assert!(
            c.max_rel_error <= 1e-4,
            "{what}, {}: relative error {:e} at {:?}",
            c.name,
            c.max_rel_error,
            c.worst
        );
    }
}

#[test]
fn joint_loss_gradient_matches_finite_differences() {
    let start = Instant::now();
    let problem = MicroProblem::new(3, 3).unwrap();
    let checks = problem
        .check(TrainConfig::default().weights(), 1e-4, 1e-6)
        .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert_close(&checks, "joint");
    for c in &checks {
        assert!(c.nonzero, "{} received an all-zero gradient", c.name);
    }
    assert!(elapsed < 30.0, "took {elapsed:.1}s");
}

#[test]
fn each_term_alone_has_correct_gradient() {
    let none = LossWeights {
        dce: 0.0,
        pl: 0.0,
        attr: 0.0,
        res: 0.0,
    };
    let terms = [
        LossWeights { dce: 1.0, ..none },
        LossWeights { pl: 1.0, ..none },
        LossWeights { attr: 1.0, ..none },
        LossWeights { res: 1.0, ..none },
    ];
    for (i, w) in terms.into_iter().enumerate() {
        let problem = MicroProblem::new(10 + i as u64, 1).unwrap();
        let checks = problem.check(w, 1e-4, 1e-6).unwrap();
        assert_close(&checks, &format!("term {i}"));
        let sae_moved = checks
            .iter()
            .filter(|c| c.name.starts_with("sae."))
            .any(|c| c.nonzero);
        // only the semantic terms reach the SAE
        assert_eq!(sae_moved, i >= 2, "term {i}");
    }
}
