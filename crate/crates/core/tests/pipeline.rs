use std::collections::BTreeMap;

use proptest::prelude::*;

use oufield_core::fixture::{generate, quick_mcmc, FixtureSpec};
use oufield_core::forecast::{Forecaster, Scenario};
use oufield_core::inference::{run_chains, Trace};
use oufield_core::io::{load_dataset, load_run_config, read_traces, write_traces, ModelBundle, RunStamp};

#[test]
fn run_directory_to_bundle_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let fx = generate(&FixtureSpec::new(5, 5, 17)).unwrap();
    let mut mcmc = quick_mcmc(6);
    mcmc.iterations = 800;
    mcmc.burn_in = 300;
    let cfg_path = fx.write_run_dir(dir.path(), &mcmc).unwrap();
    let cfg = load_run_config(&cfg_path).unwrap();
    let ds = load_dataset(&cfg).unwrap();
    let traces = run_chains(&cfg.mcmc, &ds.posterior(&cfg).unwrap()).unwrap();
    assert_eq!(traces.len(), 2);
    assert!(traces.iter().all(|t| t.len() == 800 && t.failed_proposals == 0));

    let stamp = RunStamp {
        config_hash: cfg.hash.clone(),
        seed: cfg.mcmc.seed,
    };
    let tdir = dir.path().join("traces");
    write_traces(&tdir, &traces, &stamp).unwrap();
    let back = read_traces(&tdir).unwrap();
    for (a, b) in traces.iter().zip(&back) {
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.logpost, b.logpost);
    }

    let bundle = ModelBundle::build(&ds, &traces, &stamp).unwrap();
    let path = dir.path().join("bundle.json");
    bundle.save(&path).unwrap();
    let loaded = ModelBundle::load(&path).unwrap();
    assert_eq!(loaded.config_hash, cfg.hash);

    // the bundle forecasts exactly like the in-memory fit
    let direct = Forecaster::new(ds.model(cfg.base_theta()).unwrap(), ds.inventory.clone(), &traces).unwrap();
    let served = loaded.forecaster().unwrap();
    let sc = Scenario::single("F01", 0.6, &ds.inventory).unwrap();
    let a = direct.forecast(&sc, 50, 3, &ds.population).unwrap();
    let b = served.forecast(&sc, 50, 3, &loaded.population_grid().unwrap()).unwrap();
    assert_eq!(a.exposure.per_draw, b.exposure.per_draw);
    assert!(a.exposure.mean > 0.0);
}

#[test]
fn data_edit_changes_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let fx = generate(&FixtureSpec::small()).unwrap();
    let cfg_path = fx.write_run_dir(dir.path(), &quick_mcmc(1)).unwrap();
    let before = load_run_config(&cfg_path).unwrap().hash;
    assert_eq!(before, load_run_config(&cfg_path).unwrap().hash);
    let csv = dir.path().join("emissions.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    std::fs::write(&csv, text.replacen("Synthetic plant 1", "Synthetic plant one", 1)).unwrap();
    assert_ne!(before, load_run_config(&cfg_path).unwrap().hash);
}

fn point_mass_forecaster() -> (Forecaster, oufield_core::grid::EmissionsInventory) {
    let fx = generate(&FixtureSpec::new(6, 6, 2)).unwrap();
    let ds = fx.dataset().unwrap();
    let fc = Forecaster::new(fx.model().unwrap(), ds.inventory.clone(), &[Trace::point_mass(&fx.spec.theta, 3)])
        .unwrap()
        .with_noise(false);
    (fc, ds.inventory)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reduction_is_linear_and_additive(f1 in 0.0f64..1.0, f2 in 0.0f64..1.0, seed in 0u64..1000) {
        let (fc, inv) = point_mass_forecaster();
        let run = |pairs: &[(&str, f64)]| {
            let red: BTreeMap<String, f64> = pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
            fc.expected_reduction(&Scenario::new("p", red, &inv).unwrap(), 2, seed).unwrap()
        };
        let a = run(&[("F01", f1)]);
        let b = run(&[("F02", f2)]);
        let ab = run(&[("F01", f1), ("F02", f2)]);
        let unit = run(&[("F01", 1.0)]);
        let scale = ab.iter().chain(&unit).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for k in 0..ab.len() {
            prop_assert!((a[k] + b[k] - ab[k]).abs() <= 1e-10 * scale);
            prop_assert!((f1 * unit[k] - a[k]).abs() <= 1e-10 * scale);
            prop_assert!(ab[k] >= 0.0);
        }
    }
}
