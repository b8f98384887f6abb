mod common;

use std::path::Path;

use ndsweep::checkpoint::load_checkpoint;
use ndsweep::experiment::{
    cmd_brain_damage, cmd_k_sweep, cmd_oracle, cmd_train, CapacityCurve, DatasetConfig,
    ExperimentConfig, FilterOrder, NdConfig, NetworkConfig, OutputConfig,
};
use ndsweep::network::{physically_truncate, EvalMask, Network};
use ndsweep::solver::SolverConfig;
use ndsweep::{Error, select_capacity};

fn small_config(root: &Path, filters: usize, with_nd: bool) -> ExperimentConfig {
    ExperimentConfig {
        network: NetworkConfig {
            preset: Some("mnist-small".into()),
            conv1_filters: Some(filters),
            input_shape: None,
            layers: None,
        },
        dataset: DatasetConfig::Synthetic {
            n_train: 300,
            n_test: 100,
            seed: 99,
            dir: root.join("data"),
            eval_subset: None,
        },
        solver: SolverConfig {
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 20,
            max_iters: 40 * filters,
            sweep_interval: 40,
            rng_seed: 7,
        },
        nested_dropout: with_nd.then_some(NdConfig {
            layer: 0,
            rho: 0.3,
        }),
        layerwise: None,
        output: OutputConfig {
            dir: root.to_path_buf(),
        },
    }
}

#[test]
fn k_sweep_pipeline_identities() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path(), 4, true);
    let run_dir = tmp.path().join("nested");
    let summary = cmd_train(&config, &run_dir).unwrap();
    assert_eq!(summary.total_iters, 160);
    assert_eq!(summary.sweep_checkpoints, 4);

    let (_, eval) = config.dataset.load().unwrap();
    let curve = cmd_k_sweep(&run_dir, &eval).unwrap();
    assert_eq!(
        curve.rows.iter().map(|r| r.k).collect::<Vec<_>>(),
        vec![1, 2, 3, 4]
    );

    // final row must equal a fresh untruncated evaluation of final.ckpt
    let ckpt = load_checkpoint(&run_dir.join("final.ckpt")).unwrap();
    let net = Network::new(ckpt.spec, ckpt.params, ckpt.nd).unwrap();
    let full = net.accuracy(&eval.images, &eval.labels, None).unwrap();
    assert_eq!(curve.rows[3].accuracy, full);

    // every truncated row must equal the physically rebuilt network's
    // evaluation, bit for bit
    for row in &curve.rows[..3] {
        let ckpt =
            load_checkpoint(&run_dir.join(format!("sweep_{:04}.ckpt", row.k))).unwrap();
        let net = Network::new(ckpt.spec, ckpt.params, None).unwrap();
        let masked = net
            .accuracy(
                &eval.images,
                &eval.labels,
                Some(&EvalMask::prefix(0, row.k, 4).unwrap()),
            )
            .unwrap();
        assert_eq!(row.accuracy, masked);
        let rebuilt = physically_truncate(&net, 0, row.k).unwrap();
        let direct = rebuilt.accuracy(&eval.images, &eval.labels, None).unwrap();
        assert_eq!(
            row.accuracy.to_bits(),
            direct.to_bits(),
            "k={} truncated eval differs from rebuilt network",
            row.k
        );
    }

    // curve file round-trips byte-exactly
    let path = run_dir.join("k_sweep.csv");
    curve.write(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let back = CapacityCurve::from_csv(&text).unwrap();
    assert_eq!(back, curve);
    assert_eq!(back.to_csv(), text);
}

#[test]
fn brain_damage_requires_plain_run_and_covers_all_k() {
    let tmp = tempfile::tempdir().unwrap();

    // a nested-dropout run must be rejected
    let nd_config = small_config(tmp.path(), 4, true);
    let nd_dir = tmp.path().join("nested");
    cmd_train(&nd_config, &nd_dir).unwrap();
    let (_, eval) = nd_config.dataset.load().unwrap();
    match cmd_brain_damage(&nd_dir, &eval, 0, FilterOrder::Trained) {
        Err(Error::ProtocolViolation(_)) => {}
        other => panic!("expected protocol violation, got ok={}", other.is_ok()),
    }

    // a plain run produces one row per k
    let config = small_config(tmp.path(), 4, false);
    let dir = tmp.path().join("plain");
    cmd_train(&config, &dir).unwrap();
    let curve = cmd_brain_damage(&dir, &eval, 0, FilterOrder::Trained).unwrap();
    assert_eq!(
        curve.rows.iter().map(|r| r.k).collect::<Vec<_>>(),
        vec![1, 2, 3, 4]
    );
    // keeping everything equals the unmasked evaluation
    let ckpt = load_checkpoint(&dir.join("final.ckpt")).unwrap();
    let net = Network::new(ckpt.spec, ckpt.params, ckpt.nd).unwrap();
    let full = net.accuracy(&eval.images, &eval.labels, None).unwrap();
    assert_eq!(curve.rows[3].accuracy, full);

    // norm ordering is a permutation of the same filters, so k=n agrees
    let by_norm = cmd_brain_damage(&dir, &eval, 0, FilterOrder::Norm).unwrap();
    assert_eq!(by_norm.rows[3].accuracy, full);
}

#[test]
fn oracle_accounts_iterations_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path(), 4, true);
    let out_dir = tmp.path().join("oracle");
    let outcome = cmd_oracle(&config, &[2, 4], Some(30), &out_dir).unwrap();
    assert_eq!(outcome.total_iters, 60);
    assert_eq!(outcome.nested_iters, config.solver.max_iters);
    assert_eq!(
        outcome.curve.rows.iter().map(|r| r.k).collect::<Vec<_>>(),
        vec![2, 4]
    );
    for row in &outcome.curve.rows {
        assert!(out_dir.join(&row.checkpoint).exists());
    }
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, r#"{"network": {"preset": "mnist-small"}, "oops": 1}"#).unwrap();
    match ExperimentConfig::from_file(&path) {
        Err(e @ Error::Config(_)) => assert_eq!(e.exit_code(), 2),
        other => panic!("expected config error, got ok={}", other.is_ok()),
    }
}

#[test]
fn select_capacity_uses_curve_maximum_not_final_point() {
    // a dip at the end must not confuse the selection
    let curve = CapacityCurve::from_csv(
        "k,accuracy,checkpoint\n1,0.4,a\n2,0.8,b\n3,0.79,c\n4,0.78,d\n",
    )
    .unwrap();
    assert_eq!(select_capacity(&curve, 0.0).unwrap(), 2);
    assert_eq!(select_capacity(&curve, 0.5).unwrap(), 1);
}

#[test]
fn layerwise_truncates_to_selected_capacity() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_config(tmp.path(), 4, false);
    config.layerwise = Some(ndsweep::experiment::LayerwiseConfig {
        layers: vec![0],
        rho: Some(0.3),
    });
    let outcome = ndsweep::experiment::cmd_layerwise(&config, 0.02).unwrap();
    assert_eq!(outcome.steps.len(), 1);
    let k_star = outcome.steps[0].k_star;
    assert!((1..=4).contains(&k_star));
    assert_eq!(outcome.filters_before, 4);
    assert_eq!(outcome.filters_after, k_star);
    // the rebuilt network really shrank
    assert!(outcome.params_after <= outcome.params_before);
    let expected = select_capacity(&outcome.steps[0].curve, 0.02).unwrap();
    assert_eq!(k_star, expected);
}

#[test]
fn svg_plot_writes_standalone_file() {
    let tmp = tempfile::tempdir().unwrap();
    let curve = CapacityCurve::from_csv(
        "k,accuracy,checkpoint\n1,0.2,a\n2,0.5,b\n4,0.9,c\n",
    )
    .unwrap();
    let path = tmp.path().join("curve.svg");
    ndsweep::plot::write_svg(&[("nested".into(), curve)], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("<svg xmlns="));
    assert!(text.contains("<polyline"));
}
