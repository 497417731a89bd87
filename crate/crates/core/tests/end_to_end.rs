use std::fs;

use chartloc::beamfeat::feature_vector;
use chartloc::chartnet;
use chartloc::cli::{self, read_estimates, EXIT_INPUT, EXIT_IO, EXIT_OK, EXIT_USAGE};
use chartloc::dissim;
use chartloc::evalkit::spearman;
use chartloc::pipeline::{self, ChartingConfig, SweepConfig, SweepParam};
use chartloc::scenesim::{generate_dataset, presets};
use chartloc::tensors::{load_dataset, read_matrix};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(args: &[&str]) -> i32 {
    cli::run(args.iter().copied())
}

#[test]
fn cli_pipeline_writes_consistent_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_owned();
    assert_eq!(
        run(&["simulate", "--scene", "factory", "--rows", "4", "--cols", "4", "--samples", "120", "--out", &p("d.bin"), "--scene-out", &p("s.json")]),
        EXIT_OK
    );
    let data = load_dataset(p("d.bin")).unwrap();
    assert_eq!(data.len(), 120);

    assert_eq!(run(&["features", "--data", &p("d.bin"), "--out", &p("f.bin")]), EXIT_OK);
    let (rows, cols, values) = read_matrix(p("f.bin")).unwrap();
    assert_eq!((rows, cols), (120, 8 * 2 * 8 * 8));
    assert!(values.iter().all(|v| v.is_finite()));
    assert!(fs::metadata(p("f.bin.normalizer.json")).is_ok());

    assert_eq!(run(&["dissim", "--data", &p("d.bin"), "--out", &p("g.bin")]), EXIT_OK);
    let (n, m, geo) = read_matrix(p("g.bin")).unwrap();
    assert_eq!((n, m), (120, 120));
    assert!((0..n).all(|i| geo[i * n + i] == 0.0 && (0..n).all(|j| geo[i * n + j] == geo[j * n + i])));

    assert_eq!(run(&["triangulate", "--data", &p("d.bin"), "--scene", &p("s.json"), "--out", &p("t.csv")]), EXIT_OK);
    let text = fs::read_to_string(p("t.csv")).unwrap();
    assert!(text.starts_with("record_index,x,y,z,log_likelihood"));
    let est = read_estimates(&text, 120).unwrap();
    assert!(est.iter().all(|v| v.is_finite()));

    assert_eq!(run(&["eval", "--data", &p("d.bin"), "--estimates", &p("t.csv"), "--out", &p("e")]), EXIT_OK);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("e.json")).unwrap()).unwrap();
    let direct = pipeline::triangulate_dataset(&data, &pipeline::ue_bounds(&serde_json::from_str(&fs::read_to_string(p("s.json")).unwrap()).unwrap()), &Default::default());
    let truth = pipeline::truth_matrix(&data);
    let expected = chartloc::evalkit::mae(direct.positions.view(), truth.view(), None).unwrap().mae;
    // the CSV round trip keeps enough digits to reproduce the MAE closely
    assert!((report["mae"].as_f64().unwrap() - expected).abs() < 1e-6);

    assert_eq!(
        run(&["chart", "--data", &p("d.bin"), "--mode", "conventional", "--region", "0,0,2,16,16,8", "--epochs", "2", "--out-dir", &p("c")]),
        EXIT_OK
    );
    for f in ["manifest.json", "conventional.json", "conventional.csv", "conventional.svg", "conventional.ckpt"] {
        assert!(dir.path().join("c").join(f).exists(), "{f}");
    }
    let (params, _) = chartnet::load_checkpoint::<f32>(dir.path().join("c/conventional.ckpt")).unwrap();
    assert_eq!(params.widths(), chartnet::DEFAULT_WIDTHS.to_vec());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_owned();
    assert_eq!(run(&["nonsense"]), EXIT_USAGE);
    assert_eq!(run(&["features", "--data", &p("missing.bin"), "--out", &p("f.bin")]), EXIT_IO);
    fs::write(p("junk.bin"), b"not a dataset at all").unwrap();
    assert_eq!(run(&["features", "--data", &p("junk.bin"), "--out", &p("f.bin")]), EXIT_INPUT);
    assert_eq!(run(&["simulate", "--scene", "factory", "--rows", "2", "--cols", "2", "--samples", "20", "--out", &p("d.bin")]), EXIT_OK);
    assert_eq!(run(&["triangulate", "--data", &p("d.bin"), "--out", &p("t.csv")]), EXIT_USAGE);
    assert_eq!(run(&["triangulate", "--data", &p("d.bin"), "--region", "1,2,3", "--out", &p("t.csv")]), EXIT_USAGE);
    assert_eq!(run(&["sweep", "--param", "height", "--values", "1", "--out", &p("s.csv")]), EXIT_USAGE);
    assert_eq!(run(&["replay", "--manifest", &p("nope.json")]), EXIT_IO);
}

#[test]
fn single_value_sweep_equals_direct_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    assert_eq!(
        run(&["sweep", "--param", "n_row", "--values", "2", "--n-col", "4", "--samples", "150", "--epochs", "2", "--out", out.to_str().unwrap()]),
        EXIT_OK
    );
    let text = fs::read_to_string(&out).unwrap();
    let charting = ChartingConfig {
        siamese: chartnet::TrainConfig { epochs: 2, ..ChartingConfig::default().siamese },
        augmented: chartnet::TrainConfig { epochs: 2, ..ChartingConfig::default().augmented },
        ..Default::default()
    };
    let config = SweepConfig { param: SweepParam::NRow, values: vec![2.0], n_col: 4, n_row: 8, samples: 150, seed: 7, charting };
    let scene = pipeline::sweep_scene(&config, 2.0);
    let data = generate_dataset(&scene).unwrap();
    let direct = pipeline::run_charting(&data, &pipeline::ue_bounds(&scene), &config.charting).unwrap();
    let expected = pipeline::sweep_csv(&pipeline::sweep_rows(&[(2.0, direct)]));
    assert_eq!(text, expected);
}

/// Upper bound of `u . z` over the rows of `z`.
fn support(z: &Array2<f64>, u: &[f64; 3]) -> f64 {
    z.outer_iter().map(|r| r[0] * u[0] + r[1] * u[1] + r[2] * u[2]).fold(f64::MIN, f64::max)
}

#[test]
fn held_out_records_stay_near_the_training_chart() {
    let scene = presets::factory(4, 4, 400, 11);
    let data = generate_dataset(&scene).unwrap();
    let config = ChartingConfig {
        siamese: chartnet::TrainConfig { epochs: 40, ..ChartingConfig::default().siamese },
        run_augmented: false,
        ..Default::default()
    };
    let res = pipeline::run_charting(&data, &pipeline::ue_bounds(&scene), &config).unwrap();
    let chart = res.conventional_chart.unwrap();
    let params = res.conventional_params.unwrap();
    let (norm, _) = pipeline::dataset_features(&data).unwrap();

    let mut held = scene.clone();
    held.rng_seed = 12;
    held.ue_regions[0].count = 100;
    let test = generate_dataset(&held).unwrap();
    let rows: Vec<Vec<f32>> = test.records.iter().map(|r| feature_vector(&r.csi, &norm).unwrap().values).collect();
    let x = Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j]);
    let z = chartnet::infer(&params, x.view()).unwrap().mapv(f64::from);

    let n = chart.nrows() as f64;
    let centre = [0, 1, 2].map(|k| chart.column(k).sum() / n);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let v: [f64; 3] = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let u = v.map(|c| c / len);
        let c = centre[0] * u[0] + centre[1] * u[1] + centre[2] * u[2];
        // hull of the training chart scaled by 1.2 about its centroid
        let limit = c + 1.2 * (support(&chart, &u) - c);
        assert!(support(&z, &u) <= limit, "direction {u:?}: {} > {limit}", support(&z, &u));
    }
}

#[test]
fn adp_dissimilarity_ranks_with_distance_in_the_factory() {
    let scene = presets::factory(4, 4, 300, 2);
    let data = generate_dataset(&scene).unwrap();
    let raw = dissim::dataset_dissimilarities_aligned(&data, 0.95, Default::default(), Some(1.0)).unwrap();
    let pos = data.positions();
    let truth = Array2::from_shape_fn((pos.len(), pos.len()), |(i, j)| (pos[i] - pos[j]).norm());
    let rho = spearman(&dissim::upper_triangle(&raw), &dissim::upper_triangle(&truth));
    assert!(rho > 0.0, "{rho}");
}
