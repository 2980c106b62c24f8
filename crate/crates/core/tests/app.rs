use porodiff::app::{lame_from_E_nu, run, Experiment, Levels, RunConfig, Summary};
use porodiff::constitutive::DiffusionLaw;

#[test]
fn lame_conversion() {
    let (mu, lambda) = lame_from_E_nu(800.0, 0.495).unwrap();
    assert!((mu - 800.0 / 2.99).abs() < 1e-12);
    assert!((lambda - 800.0 * 0.495 / (1.495 * 0.01)).abs() < 1e-8);
    let (mu, lambda) = lame_from_E_nu(1.0, 0.25).unwrap();
    assert!((mu - 0.4).abs() < 1e-15 && (lambda - 0.4).abs() < 1e-15);
    assert!(lame_from_E_nu(1.0, 0.5).is_err());
    assert!(lame_from_E_nu(-1.0, 0.3).is_err());
    assert!(lame_from_E_nu(1.0, -0.1).is_err());
}

#[test]
fn level_sizes() {
    assert_eq!(Levels::Count(3).sizes(4), vec![4, 8, 16]);
    assert_eq!(Levels::List(vec![2, 6]).sizes(4), vec![2, 6]);
}

#[test]
fn toml_round_trip() {
    let cfg = RunConfig::from_toml(
        r#"
        experiment = "slab"
        k = 1
        levels = [2, 4]
        [params]
        young = 1.0
        poisson = 0.25
        [law]
        kind = "Quadratic"
        eta2 = 3.0
        [slab]
        nx = 4
        ny = 2
        "#,
    )
    .unwrap();
    assert_eq!(cfg.experiment, Experiment::Slab);
    assert_eq!(cfg.levels, Levels::List(vec![2, 4]));
    let r = cfg.resolve().unwrap();
    assert!((r.params.mu_s - 0.4).abs() < 1e-15 && (r.params.inv_lambda - 2.5).abs() < 1e-14);
    match r.law {
        DiffusionLaw::Quadratic { eta2, .. } => assert_eq!(eta2, 3.0),
        other => panic!("wrong law {other:?}"),
    }
    assert!(r.scenario.is_some() && r.slab.is_some() && r.levels.is_empty());
}

#[test]
fn config_rejections() {
    for text in [
        "bogus = 1",
        "[params]\nmu = 2.0",
        "k = 2",
        "levels = [8]",
        "[params]\nlambda_s = 1.0\ninv_lambda = 1.0",
        "[params]\nyoung = 1.0",
        "[params]\nlambda_s = 0.0",
        "[law]\nkind = \"magic\"",
        "[law]\nkind = \"constant\"\neta0 = 1.0",
        "[law]\nd0 = -1.0",
    ] {
        let res = RunConfig::from_toml(text).and_then(|c| c.resolve());
        assert!(res.is_err(), "accepted: {text}");
    }
}

#[test]
fn small_convergence_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.levels = Levels::List(vec![2, 4]);
    cfg.output = dir.path().join("out");
    let resolved = cfg.resolve().unwrap();
    let (summary, _) = run(&resolved).unwrap();
    match summary {
        Summary::Convergence(r) => {
            assert_eq!(r.rows.len(), 2);
            assert!(!r.is_partial());
        }
        _ => panic!("expected a convergence summary"),
    }
    let prov = std::fs::read_to_string(dir.path().join("out/provenance.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&prov).unwrap();
    assert!(v.is_object());
}
