use proptest::prelude::*;
use rand::Rng as _;

use crowdldl::data::{AnnotationMatrix, DatasetSplit};
use crowdldl::em::{expected_log_likelihood, m_step, SoftAssignments};
use crowdldl::genmodel::{gen_graph, random_assignment, sample_dirichlet, Hyperparams};
use crowdldl::ldlnm::{Combine, Dims, NeuralParams};
use crowdldl::pgm::{log_likelihood, GraphModel, ModelParams, PgmState};
use crowdldl::pipeline::{assign_cluster, snap_labels, Kernel};
use crowdldl::rng::seeded;
use crowdldl::sa::{anneal, AnnealConfig};

fn instance(seed: u64, m: usize, n: usize, k: usize, l: usize, p: usize) -> (AnnotationMatrix, GraphModel) {
    let hp = Hyperparams::new(k, l, 2.0, 2.0, 2.0).unwrap();
    let per_item = 1 + (seed as usize % n);
    let pairs = random_assignment(m, n, per_item, seed).unwrap();
    let (truth, matrix) = gen_graph(&hp, m, n, p, &pairs, seed ^ 0x5a5a).unwrap();
    (matrix, GraphModel::from_ground_truth(hp, &truth).unwrap())
}

fn simplex(v: &[f64]) -> bool {
    v.iter().all(|&x| x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-9
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_models_are_on_the_simplex(seed in any::<u64>(), k in 1usize..4, l in 1usize..4, p in 2usize..6) {
        let (_, model) = instance(seed, 12, 6, k, l, p);
        let params = &model.params;
        for a in 0..k {
            for b in 0..l {
                prop_assert!(simplex(params.theta(a, b)));
            }
        }
        prop_assert!(simplex(params.psi()) && simplex(params.omega()));
        prop_assert!(model.w.iter().all(|&c| c < k) && model.z.iter().all(|&c| c < l));
    }

    #[test]
    fn moves_keep_the_count_cache_and_deltas_exact(
        seed in any::<u64>(), k in 1usize..4, l in 1usize..4, p in 2usize..5, moves in 1usize..40,
    ) {
        let (matrix, model) = instance(seed, 15, 8, k, l, p);
        let mut state = PgmState::new(&matrix, model).unwrap();
        let mut rng = seeded(seed.wrapping_add(1));
        for _ in 0..moves {
            let before = state.log_likelihood();
            let delta = if rng.random_bool(0.5) {
                let (m, c) = (rng.random_range(0..15), rng.random_range(0..k));
                let d = state.delta_w(m, c);
                state.set_w(m, c);
                d
            } else {
                let (n, c) = (rng.random_range(0..8), rng.random_range(0..l));
                let d = state.delta_z(n, c);
                state.set_z(n, c);
                d
            };
            let after = state.log_likelihood();
            prop_assert!((after - before - delta).abs() <= 1e-8 * (after - before).abs().max(1.0));
            prop_assert!(state.cache_is_consistent());
        }
        prop_assert!((state.log_likelihood_cached() - state.log_likelihood()).abs() < 1e-8);
    }

    #[test]
    fn loglik_is_invariant_to_cluster_relabeling(seed in any::<u64>()) {
        let (matrix, model) = instance(seed, 10, 5, 3, 2, 3);
        let perm_k = [2usize, 0, 1];
        let perm_l = [1usize, 0];
        let params = &model.params;
        let mut nested = vec![vec![vec![]; 2]; 3];
        for k in 0..3 {
            for l in 0..2 {
                nested[perm_k[k]][perm_l[l]] = params.theta(k, l).to_vec();
            }
        }
        let mut psi = vec![0.0; 3];
        (0..3).for_each(|k| psi[perm_k[k]] = params.psi()[k]);
        let mut omega = vec![0.0; 2];
        (0..2).for_each(|l| omega[perm_l[l]] = params.omega()[l]);
        let dist = |v: Vec<f64>| crowdldl::data::LabelDistribution::new(v).unwrap();
        let relabeled = ModelParams::new(
            nested.into_iter().map(|row| row.into_iter().map(dist).collect()).collect(),
            dist(psi),
            dist(omega),
        ).unwrap();
        let other = GraphModel {
            hp: model.hp,
            params: relabeled,
            w: model.w.iter().map(|&k| perm_k[k]).collect(),
            z: model.z.iter().map(|&l| perm_l[l]).collect(),
        };
        let (a, b) = (log_likelihood(&model, &matrix), log_likelihood(&other, &matrix));
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn m_step_output_is_on_the_simplex_and_not_improvable(seed in any::<u64>(), k in 1usize..4, l in 1usize..4) {
        let (matrix, model) = instance(seed, 12, 6, k, l, 3);
        let hp = model.hp;
        let soft = SoftAssignments::random(12, k, 6, l, 1.0, seed);
        let params = m_step(&matrix, &hp, &soft).unwrap();
        for a in 0..k {
            for b in 0..l {
                prop_assert!((params.theta(a, b).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!((params.psi().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((params.omega().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let best = expected_log_likelihood(&matrix, &hp, &params, &soft);
        let mut rng = seeded(seed);
        for _ in 0..20 {
            let mut trial = params.clone();
            let u = sample_dirichlet(&mut rng, 1.0, k);
            let psi: Vec<f64> = params.psi().iter().zip(u.probs()).map(|(a, b)| a + 1e-3 * (b - a)).collect();
            trial.set_psi(&psi);
            let (a, b) = (rng.random_range(0..k), rng.random_range(0..l));
            let u = sample_dirichlet(&mut rng, 1.0, 3);
            let t: Vec<f64> = params.theta(a, b).iter().zip(u.probs()).map(|(x, y)| x + 1e-3 * (y - x)).collect();
            trial.set_theta(a, b, &t);
            prop_assert!(expected_log_likelihood(&matrix, &hp, &trial, &soft) <= best + 1e-12);
        }
    }

    #[test]
    fn splits_partition_the_items(num_items in 3usize..300, seed in any::<u64>()) {
        let split = DatasetSplit::random(num_items, None, seed).unwrap();
        let mut all: Vec<usize> = split.train.iter().chain(&split.dev).chain(&split.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..num_items).collect::<Vec<_>>());
    }

    #[test]
    fn decoder_outputs_are_distributions(seed in any::<u64>(), scale in 0.0f64..1e3, concat in any::<bool>()) {
        let combine = if concat { Combine::Concat } else { Combine::Sum };
        let dims = Dims { j: 4, j_i: 3, j_a: 3, j_p: 5, n: 4, p: 3, combine };
        let params = NeuralParams::init(dims, seed).unwrap();
        let mut rng = seeded(seed);
        let x: Vec<f64> = (0..4).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let out = params.forward(&x, rng.random_range(0..4)).unwrap();
        for d in [&out.z_y, &out.z_yi, &out.z_ya] {
            prop_assert!(simplex(d.probs()));
        }
    }

    #[test]
    fn snapped_rows_are_distributions(seed in any::<u64>()) {
        let (_, model) = instance(seed, 10, 5, 3, 2, 4);
        for row in snap_labels(&model.params, &model.w).unwrap() {
            prop_assert!(simplex(row.probs()));
        }
    }

    #[test]
    fn assignment_posterior_is_a_distribution(seed in any::<u64>(), kernel_pick in 0usize..4) {
        let (_, model) = instance(seed, 10, 5, 3, 2, 4);
        let mut rng = seeded(seed);
        let raw = sample_dirichlet(&mut rng, 0.5, 4);
        let kernel = [Kernel::default(), Kernel::GeometricMean, Kernel::ExpNegKl, Kernel::Multinomial { n: 20 }][kernel_pick];
        let (k, post) = assign_cluster(raw.probs(), &model.params, kernel).unwrap();
        prop_assert!(simplex(post.probs()));
        prop_assert!(post.probs().iter().all(|&v| v <= post.probs()[k]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn annealing_reports_a_true_best_and_a_monotone_trace(seed in any::<u64>()) {
        let (matrix, model) = instance(seed, 12, 6, 2, 2, 3);
        let cfg = AnnealConfig { max_iters: 60, restarts: 2, seed, ..AnnealConfig::default() };
        let res = anneal(&matrix, &model.hp, &cfg).unwrap();
        let fresh = log_likelihood(&res.model, &matrix);
        prop_assert!((res.best_loglik - fresh).abs() <= 1e-8 * fresh.abs().max(1.0));
        prop_assert!(res.trace.windows(2).all(|w| w[1].best_loglik >= w[0].best_loglik));
        let again = anneal(&matrix, &model.hp, &cfg).unwrap();
        prop_assert_eq!(again.best_loglik.to_bits(), res.best_loglik.to_bits());
        prop_assert_eq!(again.model.w, res.model.w);
    }
}
