use metavd_core::gradcheck::{run, Fault, GradcheckOptions};

#[test]
fn all_analytic_gradients_match_finite_differences() {
    for seed in 0..6 {
        let report = run(&GradcheckOptions {
            seed,
            ..Default::default()
        })
        .unwrap();
        for c in &report.checks {
            println!("seed {seed} {:<20} cases {:>4} coords {:>6} max rel err {:.3e} (tol {:.0e})", c.name, c.cases, c.coordinates, c.max_rel_err, c.tolerance);
            assert!(c.cases >= 100, "{}", c.name);
        }
        assert!(report.passed());
    }
}

#[test]
fn kl_sign_flip_is_caught() {
    let report = run(&GradcheckOptions {
        fault: Some(Fault::KlSignFlip),
        ..Default::default()
    })
    .unwrap();
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert_eq!(failed, ["kl_gradient", "elbo_full"]);
}
