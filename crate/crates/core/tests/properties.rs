//! Property tests for the module invariants.

use chartloc::beamfeat::{self, beamspace, beam_delay, beam_power, feature_length};
use chartloc::chartnet::{self, siamese_loss, ChartMode, TrainConfig};
use chartloc::classical::{self, aoa_log_likelihood, covariance_azimuth, covariance_elevation, root_music_1d, AoaEstimate, TriangulationOptions};
use chartloc::dissim::{self, adp_dissimilarity_weighted, cir_from_csi, AdpWeighting};
use chartloc::evalkit::{mae, mae_after_affine, optimal_affine, Affine};
use chartloc::multistory::{kmeans, match_clusters_to_floors};
use chartloc::scenesim::{self, Aabb, Axis, Reflector, SceneSpec, UeRegion};
use chartloc::tensors::{decode_dataset, encode_dataset, validate_dataset, ArrayGeometry, CsiDims, CsiTensor, RadioConfig, Record, SceneDataset};
use nalgebra::{DMatrix, Vector3};
use ndarray::Array2;
use num_complex::{Complex32, Complex64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_csi(rng: &mut ChaCha8Rng, d: CsiDims) -> CsiTensor {
    CsiTensor::from_fn(d, |_, _, _, _| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
}

fn random_dataset(seed: u64, arrays: usize, rows: usize, cols: usize, n_sub: usize, len: usize, extras: bool) -> SceneDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = RadioConfig { n_sub, ..RadioConfig::default() };
    let geoms = (0..arrays)
        .map(|b| ArrayGeometry::facing([b as f64, -3.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], rows, cols, 0.04))
        .collect();
    let d = CsiDims { arrays, rows, cols, n_sub };
    let records = (0..len)
        .map(|_| {
            let values = (0..d.len()).map(|_| Complex32::new(rng.gen::<f32>() - 0.5, rng.gen::<f32>() * 1e3)).collect();
            Record {
                csi: CsiTensor::from_values(d, values).unwrap(),
                position: [rng.gen(), rng.gen(), rng.gen()],
                timestamp: extras.then(|| rng.gen::<f64>() * 1e4),
                floor_label: extras.then(|| rng.gen_range(0..3)),
            }
        })
        .collect();
    SceneDataset {
        config,
        arrays: geoms,
        records,
        n_floors: extras.then_some(3),
    }
}

fn free_space(ue_min: [f64; 3], ue_max: [f64; 3], count: usize, seed: u64) -> SceneSpec {
    SceneSpec {
        config: RadioConfig::default(),
        arrays: vec![
            ArrayGeometry::facing([-2.0, 2.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 2, 2, 0.0436),
            ArrayGeometry::facing([2.0, -2.0, 1.5], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], 2, 2, 0.0436),
        ],
        reflectors: vec![Reflector {
            axis: Axis::Z,
            offset: 0.0,
            coefficient: 0.5,
            extent: None,
        }],
        blockers: vec![],
        ue_regions: vec![UeRegion { min: ue_min, max: ue_max, count }],
        noise_std: None,
        snr_db: 20.0,
        inter_array_sync: false,
        max_reflection_order: 1,
        timing_offset_max: 0.1,
        rng_seed: seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dataset_round_trip_is_bit_exact(seed in any::<u64>(), arrays in 1usize..4, rows in 1usize..3, cols in 1usize..4, n_sub in 1usize..9, len in 1usize..6, extras in any::<bool>()) {
        let ds = random_dataset(seed, arrays, rows, cols, n_sub, len, extras);
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
        prop_assert_eq!(validate_dataset(&ds), validate_dataset(&ds));
    }

    #[test]
    fn generation_is_a_pure_function_of_the_scene(seed in any::<u64>(), count in 1usize..6) {
        let scene = free_space([0.0, 0.0, 0.5], [3.0, 3.0, 2.0], count, seed);
        prop_assert_eq!(scenesim::generate_dataset(&scene).unwrap(), scenesim::generate_dataset(&scene).unwrap());
    }

    #[test]
    fn free_space_gain_follows_inverse_square(d in 1.0f64..50.0, az in -1.2f64..1.2) {
        let mut scene = free_space([0.0; 3], [1.0; 3], 1, 0);
        scene.reflectors.clear();
        let array = scene.arrays[0].clone();
        let dir = array.to_global(&Vector3::new(az.cos(), az.sin(), 0.0));
        let near = scenesim::trace_paths(&scene, &(array.position_vec() + dir * d), &array).unwrap();
        let far = scenesim::trace_paths(&scene, &(array.position_vec() + dir * (2.0 * d)), &array).unwrap();
        prop_assert_eq!(near.len(), 1);
        let ratio = near[0].complex_gain.norm_sqr() / far[0].complex_gain.norm_sqr();
        prop_assert!((ratio - 4.0).abs() < 1e-9);
    }

    #[test]
    fn blockage_is_reciprocal(a in prop::array::uniform3(-5.0f64..5.0), b in prop::array::uniform3(-5.0f64..5.0), lo in prop::array::uniform3(-2.0f64..0.0), size in prop::array::uniform3(0.1f64..3.0)) {
        let bx = Aabb::new(lo, [lo[0] + size[0], lo[1] + size[1], lo[2] + size[2]]);
        let (a, b) = (Vector3::from(a), Vector3::from(b));
        prop_assert_eq!(bx.blocks_segment(&a, &b), bx.blocks_segment(&b, &a));
    }

    #[test]
    fn covariances_are_hermitian_psd(seed in any::<u64>(), rows in 1usize..4, cols in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let csi = random_csi(&mut rng, CsiDims { arrays: 1, rows, cols, n_sub: 8 });
        for r in [covariance_azimuth(&csi, 0).unwrap(), covariance_elevation(&csi, 0).unwrap()] {
            let asym = (&r - r.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max);
            prop_assert!(asym < 1e-10);
            let trace: f64 = (0..r.nrows()).map(|i| r[(i, i)].re).sum();
            let herm: DMatrix<Complex64> = (&r + r.adjoint()) * Complex64::new(0.5, 0.0);
            let min_eig = herm.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(min_eig > -1e-9 * trace);
        }
    }

    #[test]
    fn root_music_ignores_phase_and_scale(u in -0.9f64..0.9, phase in -3.0f64..3.0, scale in 0.1f64..10.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 8;
        let snaps: Vec<Vec<Complex64>> = (0..16)
            .map(|_| {
                let s = Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
                (0..m).map(|k| s * Complex64::from_polar(1.0, std::f64::consts::PI * u * k as f64) + Complex64::new(rng.gen::<f64>() * 0.05, rng.gen::<f64>() * 0.05)).collect()
            })
            .collect();
        let cov = |f: Complex64| {
            let mut r = DMatrix::<Complex64>::zeros(m, m);
            for s in &snaps {
                let v = DMatrix::from_iterator(m, 1, s.iter().map(|x| x * f));
                r += &v * v.adjoint();
            }
            r
        };
        let a = root_music_1d(&cov(Complex64::new(1.0, 0.0)), 0.5).unwrap();
        let b = root_music_1d(&cov(Complex64::from_polar(scale, phase)), 0.5).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{} {}", a, b);
    }

    #[test]
    fn likelihood_depends_on_direction_only(t in 0.5f64..20.0, s in 0.1f64..10.0, az in -1.0f64..1.0, el in -0.5f64..0.5) {
        let arrays = vec![
            ArrayGeometry::facing([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 2, 2, 0.04),
        ];
        let est = [AoaEstimate { array_index: 0, azimuth: 0.2, elevation: 0.1, unit_direction: [0.2f64.cos() * 0.1f64.cos(), 0.2f64.sin() * 0.1f64.cos(), 0.1f64.sin()], kappa: 7.0 }];
        let dir = Vector3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin());
        let a = aoa_log_likelihood(&(dir * t), &est, &arrays).unwrap();
        let b = aoa_log_likelihood(&(dir * t * s), &est, &arrays).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn triangulation_is_translation_equivariant(shift in prop::array::uniform3(-20.0f64..20.0), target in prop::array::uniform3(1.0f64..4.0)) {
        let mk = |off: [f64; 3]| {
            vec![
                ArrayGeometry::facing([-3.0 + off[0], 2.5 + off[1], 2.0 + off[2]], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 2, 2, 0.04),
                ArrayGeometry::facing([2.5 + off[0], -3.0 + off[1], 3.0 + off[2]], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], 2, 2, 0.04),
                ArrayGeometry::facing([8.0 + off[0], 2.5 + off[1], 1.0 + off[2]], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 2, 2, 0.04),
            ]
        };
        let arrays = mk([0.0; 3]);
        let x = Vector3::from(target);
        let est: Vec<AoaEstimate> = arrays
            .iter()
            .enumerate()
            .map(|(b, a)| {
                let l = a.to_local(&(x - a.position_vec()).normalize());
                AoaEstimate { array_index: b, azimuth: l[1].atan2(l[0]), elevation: l[2].asin(), unit_direction: l.into(), kappa: 50.0 }
            })
            .collect();
        let region = Aabb::new([0.0; 3], [5.0; 3]);
        let moved = Aabb::new(shift, [5.0 + shift[0], 5.0 + shift[1], 5.0 + shift[2]]);
        let opts = TriangulationOptions::default();
        let p = classical::triangulate(&est, &arrays, &region, &opts).unwrap().position;
        let q = classical::triangulate(&est, &mk(shift), &moved, &opts).unwrap().position;
        prop_assert!((q - p - Vector3::from(shift)).norm() < 1e-6, "{} vs {}", p, q);
    }

    #[test]
    fn beam_features_ignore_global_phase(seed in any::<u64>(), phase in -3.0f64..3.0, scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = CsiDims { arrays: 2, rows: 2, cols: 3, n_sub: 8 };
        let csi = random_csi(&mut rng, d);
        let rot = CsiTensor::from_fn(d, |b, r, c, n| csi.get(b, r, c, n) * Complex64::from_polar(1.0, phase));
        let scaled = CsiTensor::from_fn(d, |b, r, c, n| rot.get(b, r, c, n) * scale);
        let (p0, p1) = (beam_power(&beamspace(&csi)), beam_power(&beamspace(&rot)));
        for (x, y) in p0.iter().zip(&p1) {
            prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(1e-12));
        }
        let (d0, d2) = (beam_delay(&beamspace(&csi)), beam_delay(&beamspace(&scaled)));
        for (x, y) in d0.iter().zip(&d2) {
            let diff = (x - y).rem_euclid(2.0 * std::f64::consts::PI);
            prop_assert!(diff.min(2.0 * std::f64::consts::PI - diff) < 1e-4);
        }
        let raw = beamfeat::raw_features(&csi);
        prop_assert_eq!(raw.power.len() + raw.delay.len(), feature_length(&d));
        prop_assert_eq!(feature_length(&d), 2 * 2 * (2 * 2) * (2 * 3));
    }

    #[test]
    fn adp_dissimilarity_axioms(seed in any::<u64>(), phases in prop::array::uniform3(-3.0f64..3.0), scale in 0.1f64..10.0, per_array in any::<bool>(), window in 1usize..9) {
        let w = if per_array { AdpWeighting::default() } else { AdpWeighting::Global };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = CsiDims { arrays: 3, rows: 2, cols: 2, n_sub: 8 };
        let (x, y) = (random_csi(&mut rng, d), random_csi(&mut rng, d));
        let (a, b) = (cir_from_csi(&x), cir_from_csi(&y));
        prop_assert!(adp_dissimilarity_weighted(&a, &a, window, w).unwrap() < 1e-12);
        let ab = adp_dissimilarity_weighted(&a, &b, window, w).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - adp_dissimilarity_weighted(&b, &a, window, w).unwrap()).abs() < 1e-12);
        let moved = CsiTensor::from_fn(d, |arr, r, c, n| x.get(arr, r, c, n) * Complex64::from_polar(scale, phases[arr]));
        let a2 = cir_from_csi(&moved);
        prop_assert!((adp_dissimilarity_weighted(&a2, &b, window, w).unwrap() - ab).abs() < 1e-5);
        prop_assert!(adp_dissimilarity_weighted(&a2, &a, window, w).unwrap() < 1e-5);
    }

    #[test]
    fn geodesics_are_metric_and_monotone(seed in any::<u64>(), n in 12usize..40, k in 3usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let dm = Array2::from_shape_fn((n, n), |(i, j)| (0..3).map(|c| (pts[i][c] - pts[j][c]).powi(2)).sum::<f64>().sqrt());
        let (geo, k_used) = dissim::geodesic_dissimilarities(&dm, k, true, dissim::GeodesicMode::AllPairs).unwrap();
        for _ in 0..300 {
            let (i, j, l) = (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n));
            prop_assert!(geo[(i, l)] <= geo[(i, j)] + geo[(j, l)] + 1e-12);
            prop_assert!(geo[(i, j)] == geo[(j, i)] && geo[(i, i)] == 0.0);
        }
        let mut g = dissim::knn_graph(&dm, k_used).unwrap();
        let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if i != j {
            g.add_edge(i, j, dm[(i, j)]);
        }
        let geo2 = dissim::geodesic_matrix(&g).unwrap();
        prop_assert!(geo2.iter().zip(geo.iter()).all(|(a, b)| *a <= b + 1e-12));
    }

    #[test]
    fn siamese_loss_is_nonnegative_and_zero_on_match(zi in prop::array::uniform3(-5.0f64..5.0), zj in prop::array::uniform3(-5.0f64..5.0), d in 0.0f64..10.0, beta in 0.01f64..1.0) {
        prop_assert!(siamese_loss(&zi, &zj, d, beta) >= 0.0);
        let dist = (0..3).map(|c| (zi[c] - zj[c]).powi(2)).sum::<f64>().sqrt();
        prop_assert!(siamese_loss(&zi, &zj, dist, beta) < 1e-20);
        if (dist - d).abs() > 1e-6 {
            prop_assert!(siamese_loss(&zi, &zj, d, beta) > 0.0);
        }
    }

    #[test]
    fn kmeans_inertia_never_increases(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = Array2::from_shape_fn((80, 3), |_| rng.gen::<f64>() * 10.0);
        let fa = kmeans(pts.view(), k, seed, 100).unwrap();
        prop_assert!(fa.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs()));
        prop_assert_eq!(fa.centroids.len(), k);
    }

    #[test]
    fn floor_matching_ignores_relabeling(labels in prop::collection::vec(0usize..4, 5..60), shuffle in Just([2usize, 0, 3, 1])) {
        let floors: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| if i % 5 == 0 { (l + 1) % 4 } else { l }).collect();
        let (_, base) = match_clusters_to_floors(&labels, &floors);
        let relabeled: Vec<usize> = labels.iter().map(|&l| shuffle[l]).collect();
        let refloored: Vec<usize> = floors.iter().map(|&f| shuffle[f]).collect();
        prop_assert!((match_clusters_to_floors(&relabeled, &floors).1 - base).abs() < 1e-12);
        prop_assert!((match_clusters_to_floors(&labels, &refloored).1 - base).abs() < 1e-12);
    }

    #[test]
    fn affine_fits_compose_and_never_hurt(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let z = Array2::from_shape_fn((n, 3), |_| rng.gen::<f64>() * 4.0 - 2.0);
        let x = Array2::from_shape_fn((n, 3), |(i, c)| z[(i, c)] * 1.5 + z[(i, (c + 1) % 3)] * 0.3 + rng.gen::<f64>() - 0.5);
        let fit = optimal_affine(z.view(), x.view()).unwrap();
        let outer = Affine { a: (0..3).map(|_| (0..3).map(|_| rng.gen::<f64>() - 0.5).collect()).collect(), b: (0..3).map(|_| rng.gen::<f64>()).collect() };
        let outer = Affine { a: outer.a.iter().enumerate().map(|(i, r)| r.iter().enumerate().map(|(j, v)| v + if i == j { 2.0 } else { 0.0 }).collect()).collect(), ..outer };
        let composed = optimal_affine(z.view(), outer.apply(x.view()).view()).unwrap();
        let direct = outer.apply(fit.apply(z.view()).view());
        let via = composed.apply(z.view());
        prop_assert!(direct.iter().zip(via.iter()).all(|(a, b)| (a - b).abs() < 1e-8));
        let before = mae(z.view(), x.view(), None).unwrap();
        let after = mae_after_affine(z.view(), x.view()).unwrap();
        prop_assert!(after.mae <= before.mae + 1e-12);
        prop_assert!(after.p50 <= after.p90 && after.p90 <= after.p95);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn training_is_reproducible(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((30, 6), |_| rng.gen::<f32>());
        let target = Array2::from_shape_fn((30, 30), |(i, j)| (i as f64 - j as f64).abs() / 30.0);
        let cfg = TrainConfig { mode: ChartMode::Siamese, epochs: 5, batch_pairs: 32, rng_seed: seed, widths: vec![16, 8], ..TrainConfig::default() };
        let a = chartnet::train_fcf(x.view(), &target, &cfg, None, None).unwrap();
        let b = chartnet::train_fcf(x.view(), &target, &cfg, None, None).unwrap();
        prop_assert_eq!(&a.loss_trace, &b.loss_trace);
        prop_assert!(a.loss_trace.iter().all(|v| v.is_finite()));
        prop_assert_eq!(chartnet::encode_checkpoint(&a.params, None, None), chartnet::encode_checkpoint(&b.params, None, None));
    }
}
