mod common;

use common::*;
use modlib::adapters::BuilderTag;
use modlib::evalharness::{evaluate_datasets, Split};
use modlib::librarian::*;
use modlib::linalg::adjusted_rand_index;
use modlib::scalar::dot;
use modlib::synthtasks::TaskDataset;
use modlib::toymodel::{evaluate, AdapterSource};

#[test]
fn private_build_has_one_expert_per_task() {
    let (bench, model) = fixture(&small_config(0));
    let train = bench.train_datasets();
    let cfg = quick_build(0, 40);
    let built = build_private(&model, &train, &cfg).unwrap();
    assert_eq!(built.library.len(), train.len());
    assert_eq!(built.steps, 40 * train.len());
    assert_eq!(built.library.builder, BuilderTag::Private);
    for (e, d) in built.library.experts.iter().zip(&train) {
        assert_eq!(e.provenance.member_tasks, vec![d.task_id]);
        assert_eq!(e.name, format!("task-{}", d.task_id));
    }
}

#[test]
fn private_experts_beat_the_zero_adapter() {
    let (bench, model) = fixture(&small_config(1));
    let train = bench.train_datasets();
    let lib = build_private(&model, &train, &quick_build(1, 150)).unwrap().library;
    for (e, d) in lib.experts.iter().zip(&train) {
        let trained = evaluate(&model, &AdapterSource::Expert(e), &d.valid, None).unwrap();
        let zero = evaluate(&model, &AdapterSource::None, &d.valid, None).unwrap();
        assert!(
            trained.mse < zero.mse,
            "task {}: {} vs {}",
            d.task_id,
            trained.mse,
            zero.mse
        );
    }
}

#[test]
fn reordering_tasks_permutes_identical_experts() {
    let (bench, model) = fixture(&small_config(2));
    let train = bench.train_datasets();
    let cfg = quick_build(2, 30);
    let forward = build_private(&model, &train, &cfg).unwrap().library;
    let reversed: Vec<&TaskDataset<f64>> = train.iter().rev().copied().collect();
    let backward = build_private(&model, &reversed, &cfg).unwrap().library;
    for (e, r) in forward.experts.iter().zip(backward.experts.iter().rev()) {
        assert_eq!(e, r);
    }
}

#[test]
fn shared_build_is_one_expert_and_matches_private_for_one_task() {
    let (bench, model) = fixture(&small_config(3));
    let train = bench.train_datasets();
    let cfg = quick_build(3, 20);
    let shared = build_shared(&model, &train, &cfg).unwrap();
    assert_eq!(shared.library.len(), 1);
    assert_eq!(shared.steps, 20 * train.len());
    assert_eq!(shared.library.experts[0].provenance.member_tasks.len(), train.len());
    let one = &train[4..5];
    let s = build_shared(&model, one, &cfg).unwrap().library;
    let p = build_private(&model, one, &cfg).unwrap().library;
    assert_eq!(s.experts[0].adapters, p.experts[0].adapters);
}

#[test]
fn shared_expert_suffers_interference_against_cluster_experts() {
    let (bench, model) = default_fixture(0);
    let train = bench.train_datasets();
    let cfg = quick_build(0, 150);
    let shared = build_shared(&model, &train, &cfg).unwrap().library;
    let shared_mse: f64 = evaluate_datasets(
        &model,
        &AdapterSource::Expert(&shared.experts[0]),
        &train,
        Split::Valid,
        false,
    )
    .unwrap()
    .iter()
    .map(|m| m.mse)
    .sum::<f64>()
        / train.len() as f64;
    let mut cluster_total = 0.0;
    for c in 0..bench.config.n_clusters {
        let members: Vec<&TaskDataset<f64>> = train.iter().copied().filter(|d| d.cluster_id == c).collect();
        let expert = build_shared(&model, &members, &cfg).unwrap().library.experts.remove(0);
        cluster_total += evaluate_datasets(&model, &AdapterSource::Expert(&expert), &members, Split::Valid, false)
            .unwrap()
            .iter()
            .map(|m| m.mse)
            .sum::<f64>();
    }
    let cluster_mse = cluster_total / train.len() as f64;
    println!("shared {shared_mse:.4} vs per-cluster {cluster_mse:.4}");
    assert!(shared_mse > cluster_mse);
}

#[test]
fn clustering_edge_cases() {
    let (bench, model) = fixture(&small_config(4));
    let train = bench.train_datasets();
    let cfg = quick_build(4, 40);
    let stage1 = stage1_experts(&model, &train, &cfg).unwrap();
    let inputs = ClusterInputs {
        model: &model,
        datasets: &train,
        private: Some(&stage1),
        k_reduce: None,
        kmeans_input: KmeansInput::SimilarityRows,
        kmeans_iters: 100,
    };
    let t = train.len();
    let all = cluster_tasks(ClusterMethod::Mbc, &inputs, t, 4).unwrap();
    let identity: Vec<usize> = (0..t).collect();
    assert_eq!(adjusted_rand_index(&all.assignment.labels, &identity), 1.0);
    assert!(matches!(
        cluster_tasks(ClusterMethod::Mbc, &inputs, t + 1, 4),
        Err(BuildError::TooManyClusters { .. })
    ));
    let no_private = ClusterInputs {
        private: None,
        ..inputs
    };
    assert_eq!(
        cluster_tasks(ClusterMethod::Mbc, &no_private, 2, 4).unwrap_err(),
        BuildError::MissingPrivateExperts(ClusterMethod::Mbc)
    );
    // Random partitions are balanced.
    let r = cluster_tasks(ClusterMethod::RandomTask, &no_private, 3, 4).unwrap();
    assert!(r.assignment.members().iter().all(|m| m.len() == 3));
    let r = cluster_tasks(ClusterMethod::RandomExamples, &no_private, 5, 4).unwrap();
    let n: usize = train.iter().map(|d| d.train.len()).sum();
    assert_eq!(r.assignment.labels.len(), n);
    assert!(r.assignment.members().iter().all(|m| m.len().abs_diff(n / 5) <= 1));
    let e = cluster_tasks(ClusterMethod::Embeddings, &no_private, 3, 4).unwrap();
    assert!((-0.5..=1.0).contains(&e.ari_vs_planted));
}

#[test]
fn mbc_extremes() {
    let (bench, model) = fixture(&small_config(5));
    let train = bench.train_datasets();
    let cfg = quick_build(5, 40);
    let t = train.len();
    let singletons = build_mbc(&model, &train, &cfg, t).unwrap();
    assert_eq!(singletons.built.library.len(), t);
    assert!(singletons
        .built
        .library
        .experts
        .iter()
        .all(|e| e.provenance.member_tasks.len() == 1));
    let one = build_mbc(&model, &train, &cfg, 1).unwrap();
    assert_eq!(one.built.library.len(), 1);
    assert_eq!(one.built.library.experts[0].provenance.member_tasks.len(), t);
    assert_eq!(one.report.mean_pairwise_cluster_similarity, Some(1.0));
    assert!(one.report.similarity_degenerate);
    assert!(!singletons.report.similarity_degenerate);
    let s = singletons.report.mean_pairwise_cluster_similarity.unwrap();
    assert!((-1.0..=1.0).contains(&s));
}

#[test]
fn stage_one_is_the_private_build_at_n_steps() {
    let (bench, model) = fixture(&small_config(6));
    let train = bench.train_datasets();
    let cfg = quick_build(6, 50);
    let n = cfg.budget.clustering_steps();
    assert_eq!(n, 20);
    let stage1 = build_mbc(&model, &train, &cfg, 3).unwrap().stage1;
    let private = build_private(&model, &train, &quick_build(6, n)).unwrap().library;
    assert_eq!(stage1, private.experts);
}

#[test]
fn clustered_builds_match_private_compute() {
    let (bench, model) = fixture(&small_config(7));
    let train = bench.train_datasets();
    let t = train.len();
    let cfg = quick_build(7, 45);
    let private = build_private(&model, &train, &cfg).unwrap().steps;
    for method in ClusterMethod::ALL {
        for k in [1, 2, 4] {
            let steps = build_clustered(method, &model, &train, &cfg, k).unwrap().built.steps;
            assert!(steps.abs_diff(private) <= t, "{method:?} K={k}: {steps} vs {private}");
        }
    }
}

#[test]
fn builders_are_deterministic() {
    let (bench, model) = fixture(&small_config(8));
    let train = bench.train_datasets();
    let cfg = quick_build(8, 30);
    let a = build_mbc(&model, &train, &cfg, 3).unwrap();
    let b = build_mbc(&model, &train, &cfg, 3).unwrap();
    assert_eq!(a.built.library, b.built.library);
    assert_eq!(a.report, b.report);
    let p = build_poly(&model, &train, &cfg, 3).unwrap();
    let q = build_poly(&model, &train, &cfg, 3).unwrap();
    assert_eq!(p.library, q.library);
    let other = build_mbc(&model, &train, &quick_build(9, 30), 3).unwrap();
    assert_ne!(a.built.library, other.built.library);
}

#[test]
fn poly_routing_rows_are_distributions() {
    let (bench, model) = fixture(&small_config(9));
    let train = bench.train_datasets();
    let cfg = quick_build(9, 30);
    let poly = build_poly(&model, &train, &cfg, 3).unwrap();
    assert_eq!(poly.k(), 3);
    assert_eq!(poly.steps, 30 * train.len());
    let z = poly.routing();
    assert_eq!(z.shape(), (train.len(), 3));
    for i in 0..z.rows() {
        assert!(z.row(i).iter().all(|v| *v >= 0.0));
        assert!((z.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let single = build_poly(&model, &train, &cfg, 1).unwrap();
    assert!(single.routing().as_slice().iter().all(|v| *v == 1.0));
    assert!(matches!(
        build_poly(&model, &train, &cfg, 0),
        Err(BuildError::TooManyClusters { .. })
    ));
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

#[test]
fn planted_structure_on_the_default_benchmark() {
    let (bench, model) = default_fixture(0);
    let train = bench.train_datasets();
    let cfg = quick_build(0, 150);
    let stage1 = stage1_experts(&model, &train, &cfg).unwrap();
    let mbc = build_clustered_from_stage1(ClusterMethod::Mbc, &model, &train, &cfg, 4, stage1.clone()).unwrap();
    let random = build_clustered_from_stage1(ClusterMethod::RandomTask, &model, &train, &cfg, 4, stage1).unwrap();
    println!(
        "ARI {:.3}; similarity mbc {:.4} random_task {:.4}",
        mbc.report.ari_vs_planted,
        mbc.report.mean_pairwise_cluster_similarity.unwrap(),
        random.report.mean_pairwise_cluster_similarity.unwrap()
    );
    assert!(mbc.report.ari_vs_planted >= 0.9);
    assert!(mbc.report.mean_pairwise_cluster_similarity < random.report.mean_pairwise_cluster_similarity);

    // Poly's learned routing groups tasks of one planted cluster together.
    let poly = build_poly(&model, &train, &cfg, 4).unwrap();
    let z = poly.routing();
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for i in 0..train.len() {
        for j in i + 1..train.len() {
            let c = cosine(z.row(i), z.row(j));
            if train[i].cluster_id == train[j].cluster_id {
                same.push(c);
            } else {
                cross.push(c);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "Z row cosine: same cluster {:.3}, cross {:.3}",
        mean(&same),
        mean(&cross)
    );
    assert!(mean(&same) > mean(&cross));
}

#[test]
fn budget_validation() {
    let bad = |n: usize, f: f64| {
        BuildBudget {
            total_steps_per_task: n,
            clustering_fraction: f,
        }
        .validate()
        .is_err()
    };
    assert!(bad(0, 0.4));
    assert!(bad(100, 0.0));
    assert!(bad(100, 1.0));
    assert!(bad(1, 0.4));
    assert!(!bad(150, 0.4));
    let b = BuildBudget::default();
    assert_eq!((b.clustering_steps(), b.stage2_steps()), (60, 90));
}
