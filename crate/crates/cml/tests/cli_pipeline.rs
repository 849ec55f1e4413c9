//! End-to-end CLI pipeline on a small synthetic dataset.

use cml::cli::run_str;

fn demo_config_file(dir: &std::path::Path, seed: u64) -> std::path::PathBuf {
    let config = cml::synth::SyntheticConfig::demo(seed);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn gen_estimate_counterfactual_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let config = demo_config_file(tmp.path(), 42);
    let data = tmp.path().join("data");
    let results = tmp.path().join("results");

    let code = run_str(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    for file in [
        "embeddings.csv",
        "embeddings.emb",
        "reducer.json",
        "market.csv",
        "instruments.csv",
        "entrants.csv",
        "panel.csv",
        "truth.json",
        "manifest.json",
    ] {
        assert!(data.join(file).exists(), "missing {file}");
    }

    let code = run_str(&[
        "estimate-demand",
        "--data",
        data.to_str().unwrap(),
        "--out",
        results.to_str().unwrap(),
        "--skip-gmm",
    ]);
    assert_eq!(code, 0);
    assert!(results.join("params.json").exists());
    assert!(results.join("demand_table.txt").exists());
    assert!(results.join("manifest.json").exists());

    // Counterfactual removal with the true parameters.
    let cf = tmp.path().join("cf");
    let code = run_str(&[
        "counterfactual",
        "--mode",
        "removal",
        "--data",
        data.to_str().unwrap(),
        "--out",
        cf.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(cf.join("welfare.json").exists());

    // Reduced-form pipeline.
    let spatial = tmp.path().join("spatial");
    assert_eq!(
        run_str(&[
            "spatial-reg",
            "--data",
            data.to_str().unwrap(),
            "--out",
            spatial.to_str().unwrap(),
        ]),
        0
    );
    assert!(spatial.join("spatial_reg.csv").exists());

    let events = tmp.path().join("events");
    assert_eq!(
        run_str(&[
            "event-study",
            "--data",
            data.to_str().unwrap(),
            "--out",
            events.to_str().unwrap(),
        ]),
        0
    );
    assert!(events.join("event_study.csv").exists());

    let curve = tmp.path().join("curve");
    assert_eq!(
        run_str(&[
            "diversion-curve",
            "--data",
            data.to_str().unwrap(),
            "--out",
            curve.to_str().unwrap(),
        ]),
        0
    );
    assert!(curve.join("diversion_curve.csv").exists());
}

#[test]
fn heatmap_grid_emits_cell_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let config = demo_config_file(tmp.path(), 5);
    let data = tmp.path().join("data");
    assert_eq!(
        run_str(&[
            "gen-data",
            "--config",
            config.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ]),
        0
    );

    // 2 x 2 grid: two radii, two cost levels.
    let spec = serde_json::json!({
        "policy": {
            "d_bar": 0.0,
            "response_mode": "endogenous_entry",
            "distance_space": "full",
            "start_period": 0,
            "surplus_mode": "Nested"
        },
        "d_bars": [0.0, 0.05],
        "scenarios": [
            { "kind": "assistant", "shift": 0.0, "level_label": "high" },
            { "kind": "assistant", "shift": 200.0, "level_label": "low" }
        ],
        "n_firms_sample": 4,
        "n_candidates": 24
    });
    let spec_path = tmp.path().join("cf.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();

    let out = tmp.path().join("heatmap");
    let code = run_str(&[
        "counterfactual",
        "--mode",
        "heatmap",
        "--data",
        data.to_str().unwrap(),
        "--config",
        spec_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(out.join("heatmap.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    // 4 cells x 8 metrics.
    assert_eq!(rows.len(), 32, "heatmap rows:\n{text}");
}

#[test]
fn usage_errors_exit_one_without_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    // Missing required --config.
    let code = run_str(&["gen-data", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(!out.exists(), "no partial output on usage errors");

    // Unknown flag.
    let code = run_str(&["gen-data", "--config", "x.json", "--out", "y", "--bogus"]);
    assert_eq!(code, 1);

    // Unknown subcommand.
    assert_eq!(run_str(&["frobnicate"]), 1);
}

#[test]
fn io_failures_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let code = run_str(&[
        "gen-data",
        "--config",
        tmp.path().join("missing.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
}

#[test]
fn rerunning_gen_data_reproduces_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let config = demo_config_file(tmp.path(), 9);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        assert_eq!(
            run_str(&[
                "gen-data",
                "--config",
                config.to_str().unwrap(),
                "--seed",
                "31",
                "--out",
                out.to_str().unwrap(),
            ]),
            0
        );
    }
    for file in ["embeddings.csv", "embeddings.emb", "market.csv", "panel.csv"] {
        let bytes_a = std::fs::read(a.join(file)).unwrap();
        let bytes_b = std::fs::read(b.join(file)).unwrap();
        assert_eq!(bytes_a, bytes_b, "{file} differs between identical runs");
    }
    // The manifests agree on every output digest.
    let ma: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let mb: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["seed"], mb["seed"]);
}
