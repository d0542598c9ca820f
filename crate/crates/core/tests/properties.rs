mod common;

use common::*;
use modlib::adapters::{compose, flatten_expert, unflatten};
use modlib::libstore::TensorBlob;
use modlib::linalg::{adjusted_rand_index, kmeans, low_rank_svd, Matrix};
use modlib::rng::Rng;
use modlib::router::*;
use modlib::scalar::softmax;
use proptest::prelude::*;

fn check_distribution(d: &RoutingDistribution<f64>, expect_active: Option<usize>) -> Result<(), TestCaseError> {
    prop_assert!(d.weights.iter().all(|w| *w >= 0.0));
    prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
    if let Some(k) = expect_active {
        prop_assert_eq!(d.weights.iter().filter(|w| **w > 0.0).count(), k);
        prop_assert_eq!(d.k_active, k);
    }
    Ok(())
}

fn bank(n: usize, d: usize, seed: u64, source: PrototypeSource) -> PrototypeBank<f64> {
    let mut rng = Rng::new(seed);
    PrototypeBank {
        source,
        layers: vec![gaussian(n, d, &mut rng)],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn arrow_outputs_are_top_k_distributions(
        n in 1usize..12,
        k in 1usize..16,
        seed in any::<u64>(),
        temp in 0.05f64..10.0,
        scale in 1e-3f64..1e3,
    ) {
        let b = bank(n, 8, seed, PrototypeSource::Arrow);
        let mut rng = Rng::new(seed ^ 1);
        let h: Vec<f64> = (0..8).map(|_| scale * rng.normal()).collect();
        let d = arrow_route(&b, 0, &h, k, temp).unwrap();
        check_distribution(&d, Some(k.min(n)))?;
    }

    #[test]
    fn arrow_sign_flips_change_nothing(n in 1usize..10, k in 1usize..10, seed in any::<u64>(), mask in any::<u16>()) {
        let b = bank(n, 6, seed, PrototypeSource::Arrow);
        let mut flipped = b.clone();
        for r in 0..n {
            if mask >> r & 1 == 1 {
                flipped.layers[0].row_mut(r).iter_mut().for_each(|v| *v = -*v);
            }
        }
        let mut rng = Rng::new(seed ^ 2);
        let h: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        prop_assert_eq!(arrow_route(&b, 0, &h, k, 1.0).unwrap(), arrow_route(&flipped, 0, &h, k, 1.0).unwrap());
    }

    #[test]
    fn arrow_ranking_ignores_hidden_scale(n in 2usize..10, k in 1usize..10, seed in any::<u64>(), c in 1e-3f64..1e3) {
        let b = bank(n, 6, seed, PrototypeSource::Arrow);
        let mut rng = Rng::new(seed ^ 3);
        let h: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let hc: Vec<f64> = h.iter().map(|v| v * c).collect();
        let logits = |h: &[f64]| b.layers[0].matvec(h).into_iter().map(f64::abs).collect::<Vec<_>>();
        let order = |w: &[f64]| {
            let mut idx: Vec<usize> = (0..w.len()).collect();
            idx.sort_by(|&x, &y| w[y].partial_cmp(&w[x]).unwrap().then(x.cmp(&y)));
            idx
        };
        prop_assert_eq!(order(&logits(&h)), order(&logits(&hc)));
        let support = |h: &[f64]| arrow_route(&b, 0, h, k, 1.0).unwrap().weights.iter().map(|w| *w > 0.0).collect::<Vec<_>>();
        prop_assert_eq!(support(&h), support(&hc));
    }

    #[test]
    fn cm_outputs_are_distributions(n in 1usize..12, k in proptest::option::of(1usize..16), seed in any::<u64>()) {
        let b = bank(n, 8, seed, PrototypeSource::Cm);
        let mut rng = Rng::new(seed ^ 4);
        let h: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let d = cm_route(&b, 0, &h, k, 1.0).unwrap();
        check_distribution(&d, Some(k.unwrap_or(n).min(n)))?;
    }

    #[test]
    fn mu_and_oracle_are_distributions(n in 1usize..20, t in 0usize..20) {
        check_distribution(&mu_route::<f64>(n).unwrap(), Some(n))?;
        let model = random_model(0);
        let lib = random_library(&model, n, 0);
        match oracle_route::<f64>(t, &lib) {
            Ok(d) => {
                prop_assert!(t < n);
                check_distribution(&d, Some(1))?;
                prop_assert_eq!(d.weights[t], 1.0);
            }
            Err(e) => {
                prop_assert!(t >= n);
                prop_assert_eq!(e, RouteError::UnknownTask(t));
            }
        }
    }

    #[test]
    fn task_predictor_routing_is_a_distribution(seed in any::<u64>(), n_tasks in 2usize..6) {
        let model = random_model(1);
        let lib = random_library(&model, n_tasks, 1);
        let mut rng = Rng::new(seed);
        let tp = TaskPredictor {
            weights: gaussian(n_tasks, model.width() + 1, &mut rng),
            feature_mean: vec![0.0; model.width()],
            feature_std: vec![1.0; model.width()],
            task_ids: (0..n_tasks).collect(),
        };
        let x: Vec<f64> = (0..model.width()).map(|_| rng.normal()).collect();
        check_distribution(&tp_route(&tp, &model, &x, &lib).unwrap(), None)?;
    }

    #[test]
    fn simplex_projection_lands_on_the_simplex(v in proptest::collection::vec(-5.0f64..5.0, 1..12)) {
        let p = project_to_simplex(&v);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // Idempotent.
        let q = project_to_simplex(&p);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_a_distribution(v in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax(&v);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_composition_reproduces_the_expert(n in 1usize..6, pick in 0usize..6, seed in any::<u64>()) {
        let pick = pick % n;
        let model = random_model(2);
        let lib = random_library(&model, n, seed % 1000);
        let mut w = vec![0.0; n];
        w[pick] = 1.0;
        let c = compose(&lib.expert_refs(), &w).unwrap();
        prop_assert_eq!(&c.adapters, &lib.experts[pick].adapters);
    }

    #[test]
    fn flatten_round_trips(seed in any::<u64>(), depth in 1usize..5, rank in 1usize..5) {
        let e = random_expert(8, depth, rank, seed, "e", vec![0]);
        let flat = flatten_expert(&e);
        let back = unflatten(&flat.values, &e.shape(), e.scaling(), e.name.clone(), e.provenance.clone()).unwrap();
        prop_assert_eq!(back, e);
    }

    #[test]
    fn factored_svd_reconstructs_the_product(seed in any::<u64>(), d in 2usize..24, r in 1usize..6) {
        let r = r.min(d);
        let mut rng = Rng::new(seed);
        let (a, b) = (gaussian(d, r, &mut rng), gaussian(d, r, &mut rng));
        let svd = low_rank_svd(&a, &b).unwrap();
        let dense = a.matmul_t(&b).unwrap();
        let diff = svd.reconstruct().sub(&dense).unwrap().max_abs();
        prop_assert!(diff < 1e-9 * (1.0 + dense.max_abs()));
        prop_assert!(svd.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn kmeans_labels_are_valid_and_ari_is_symmetric(seed in any::<u64>(), n in 2usize..30, k in 1usize..6) {
        let k = k.min(n);
        let mut rng = Rng::new(seed);
        let pts = gaussian(n, 3, &mut rng);
        let a = kmeans(&pts, k, seed, 50).unwrap();
        prop_assert_eq!(a.labels.len(), n);
        prop_assert!(a.labels.iter().all(|l| *l < k));
        prop_assert!(a.members().iter().all(|m| !m.is_empty()));
        let other: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let (x, y) = (adjusted_rand_index(&a.labels, &other), adjusted_rand_index(&other, &a.labels));
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!(x <= 1.0 + 1e-12);
        prop_assert_eq!(adjusted_rand_index(&a.labels, &a.labels), 1.0);
    }

    #[test]
    fn tensor_blobs_round_trip(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let m = Matrix::from_fn(rows, cols, |_, _| (rng.normal() as f32) as f64);
        let blob = TensorBlob::from_matrix(&m);
        let back = TensorBlob::from_bytes(&blob.to_bytes()).unwrap();
        prop_assert_eq!(&back, &blob);
        prop_assert_eq!(back.to_matrix::<f64>().unwrap(), m);
    }
}
