//! Full suite orchestration at reduced scale: every check runs end to end
//! on a catalog problem through the same entry point the CLI uses.

use exitctrl::hjb::GridConfig;
use exitctrl::paths::{ExitMode, SimConfig};
use exitctrl::problem::{catalog_problem, ProbeConfig};
use exitctrl::regression::RegressionConfig;
use exitctrl::verify::{run_suite, CheckStatus, ExitMomentSpec, SuiteConfig};

#[test]
fn whole_suite_runs_clean_on_the_uncontrolled_benchmark() {
    let p = catalog_problem("poisson1d", &serde_json::Map::new()).unwrap();
    let sim = SimConfig {
        dt: 1e-3,
        t_max: 10.0,
        n_paths: 8_000,
        master_seed: 71,
        exit_correction: ExitMode::BridgeCorrected,
    };
    let suite = SuiteConfig {
        chain_paths: 4_000,
        chain_dt: 1e-3,
        exit_moments: vec![
            ExitMomentSpec {
                mu: 1.0,
                oracle: Some(1.0 / 1f64.cos()),
            },
            ExitMomentSpec {
                mu: 2.5,
                oracle: None,
            },
        ],
        ..SuiteConfig::default()
    };
    let reports = run_suite(
        &p,
        &["all".to_string()],
        &[0.0],
        &sim,
        &RegressionConfig::default(),
        &GridConfig::uniform(101, 1),
        &ProbeConfig::default(),
        &suite,
    )
    .unwrap();
    assert!(reports.len() >= 10, "expected all checks, got {}", reports.len());
    for r in &reports {
        assert!(
            !r.failed(),
            "{}: {:?} — {}",
            r.name,
            r.status,
            r.narrative
        );
        // Reports carry their provenance.
        assert!(!r.seeds.is_empty(), "{} lost its seeds", r.name);
    }
    // Exactly the checks that need an infeasible-theta annotation carry it.
    let xval = reports.iter().find(|r| r.name == "cross-validate").unwrap();
    assert!(xval.narrative.contains("theta"), "{}", xval.narrative);
    // Registry order is fixed.
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    let dpp_pos = names.iter().position(|n| n.starts_with("dpp")).unwrap();
    let xval_pos = names.iter().position(|n| *n == "cross-validate").unwrap();
    assert!(dpp_pos < xval_pos);
}

#[test]
fn unknown_suite_name_is_a_config_error() {
    let p = catalog_problem("poisson1d", &serde_json::Map::new()).unwrap();
    let err = run_suite(
        &p,
        &["nonsense".to_string()],
        &[0.0],
        &SimConfig {
            dt: 1e-3,
            t_max: 1.0,
            n_paths: 10,
            master_seed: 1,
            exit_correction: ExitMode::GridCrossing,
        },
        &RegressionConfig::default(),
        &GridConfig::uniform(11, 1),
        &ProbeConfig::default(),
        &SuiteConfig::default(),
    );
    assert!(err.is_err());
}

#[test]
fn skipped_checks_do_not_fail_the_suite() {
    // The controlled benchmark has an empty theta interval; everything that
    // depends on it must degrade to skip/annotate, never to fail.
    let p = catalog_problem("controlled1d", &serde_json::Map::new()).unwrap();
    let sim = SimConfig {
        dt: 1e-3,
        t_max: 10.0,
        n_paths: 6_000,
        master_seed: 72,
        exit_correction: ExitMode::BridgeCorrected,
    };
    let reports = run_suite(
        &p,
        &["dpp".into(), "supermartingale".into(), "holder".into()],
        &[0.0],
        &sim,
        &RegressionConfig::default(),
        &GridConfig::uniform(101, 1),
        &ProbeConfig::default(),
        &SuiteConfig::default(),
    )
    .unwrap();
    for r in &reports {
        assert!(!r.failed(), "{}: {:?}", r.name, r.status);
        if let CheckStatus::Skipped { reason } = &r.status {
            assert!(!reason.is_empty());
        }
    }
}
