mod common;

use clustcontrast::contrast::{contrast_variance, omega_blocks, ContrastVector};
use clustcontrast::data::{build_design_matrices, column_standardize, load_expression_matrix, ExpressionMatrix};
use clustcontrast::em::{e_step, finalize, log_likelihood};
use clustcontrast::fdr::{benjamini_hochberg, z_scores};
use clustcontrast::lmm::MixtureModel;
use clustcontrast::null::{permute_labels, replicate_statistics, PermutationPlan};
use clustcontrast::pipeline::score;
use clustcontrast::sim::{generate_dataset, SimConfig};
use clustcontrast::ttest::pooled_t;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * (1.0 + a.abs().max(b.abs()))
}

/// Two components with a shared ρ, ĉ drawn at random, and data drawn from them.
fn two_component_setup(seed: u64, n: usize) -> (ExpressionMatrix, MixtureModel) {
    let mut r = rng(seed);
    let classes = two_classes(4, 5);
    let mut comps = vec![random_component(&mut r, 2, 0.4), random_component(&mut r, 2, 0.6)];
    comps[1].rho = comps[0].rho;
    let (data, _) = simulate_mixture(&comps, &classes, n, &mut r);
    let design = build_design_matrices(&classes).unwrap();
    let mut model = MixtureModel::from_components(comps, design).unwrap();
    model.c_hat = (0..2).map(|_| (0..classes.len()).map(|_| 0.3 * normal(&mut r)).collect()).collect();
    (data, model)
}

fn swapped(model: &MixtureModel) -> MixtureModel {
    let mut s = model.clone();
    s.components.reverse();
    s.c_hat.reverse();
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matrix_tsv_round_trip(
        rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 5), 2..8),
    ) {
        let data = ExpressionMatrix::from_rows(&rows, vec![1, 2, 1, 2, 2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (m, l) = (dir.path().join("m.tsv"), dir.path().join("l.tsv"));
        data.write_matrix_tsv(&m).unwrap();
        data.write_labels_tsv(&l).unwrap();
        prop_assert_eq!(load_expression_matrix(&m, &l).unwrap(), data);
    }

    #[test]
    fn standardization_is_idempotent(seed in any::<u64>()) {
        let mut r = rng(seed);
        let rows: Vec<Vec<f64>> = (0..12).map(|_| (0..6).map(|_| 5.0 + 3.0 * normal(&mut r)).collect()).collect();
        let data = ExpressionMatrix::from_rows(&rows, vec![1, 1, 1, 2, 2, 2]).unwrap();
        let once = column_standardize(&data).unwrap();
        let twice = column_standardize(&once).unwrap();
        for (a, b) in once.values().iter().zip(twice.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn design_gram_is_diagonal_class_sizes(labels in prop::collection::vec(1usize..=3, 6..14)) {
        prop_assume!((1..=3).all(|h| labels.iter().filter(|&&l| l == h).count() >= 2));
        let design = build_design_matrices(&labels).unwrap();
        let gram = design.x.transpose() * &design.x;
        let sizes = design.class_sizes();
        for h in 0..3 {
            for k in 0..3 {
                let want = if h == k { sizes[h] as f64 } else { 0.0 };
                prop_assert_eq!(gram[(h, k)], want);
            }
        }
    }

    #[test]
    fn z_order_follows_p_order(p in prop::collection::vec(1e-12f64..1.0, 2..40)) {
        let z = z_scores(&p);
        for a in 0..p.len() {
            for b in 0..p.len() {
                if p[a] < p[b] {
                    prop_assert!(z[a] >= z[b]);
                }
            }
        }
    }

    #[test]
    fn contrast_variance_ignores_slot(seed in any::<u64>(), n_prime in 1usize..40) {
        let mut r = rng(seed);
        let comp = random_component(&mut r, 2, 1.0);
        let design = build_design_matrices(&two_classes(3, 4)).unwrap();
        let blocks = omega_blocks(0, &comp, &design, n_prime).unwrap();
        let first = contrast_variance(&blocks, &ContrastVector::new((1, 2), 1, n_prime, 2).unwrap()).unwrap();
        let slot = r.random_range(1..=n_prime);
        let other = contrast_variance(&blocks, &ContrastVector::new((1, 2), slot, n_prime, 2).unwrap()).unwrap();
        prop_assert!(close(first, other, 1e-12));
        prop_assert!(first > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn row_order_does_not_change_likelihood_or_tau(seed in any::<u64>()) {
        let (data, model) = two_component_setup(seed, 60);
        let mut order: Vec<usize> = (0..data.n_features()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng(seed ^ 1));
        let shuffled = data.permute_rows(&order);

        let a = log_likelihood(&data, &model, &model.c_hat).unwrap();
        let b = log_likelihood(&shuffled, &model, &model.c_hat).unwrap();
        prop_assert!(close(a, b, 1e-10));

        let ea = e_step(&data, &model).unwrap();
        let eb = e_step(&shuffled, &model).unwrap();
        for (r, &j) in order.iter().enumerate() {
            for i in 0..2 {
                prop_assert!(close(eb.tau[r * 2 + i], ea.tau[j * 2 + i], 1e-10));
            }
        }
        for (x, y) in ea.c_hat.iter().flatten().zip(eb.c_hat.iter().flatten()) {
            prop_assert!(close(*x, *y, 1e-9));
        }
    }

    #[test]
    fn relabeling_components_changes_nothing(seed in any::<u64>()) {
        let (data, model) = two_component_setup(seed, 60);
        let a = finalize(&data, model.clone()).unwrap();
        let b = finalize(&data, swapped(&model)).unwrap();
        prop_assert!(close(a.log_likelihood, b.log_likelihood, 1e-12));
        prop_assert!(close(a.bic, b.bic, 1e-12));
        for j in 0..data.n_features() {
            prop_assert!(close(a.tau_row(j)[0], b.tau_row(j)[1], 1e-10));
        }

        let wa = score(&data, &a).unwrap().w;
        let wb = score(&data, &b).unwrap().w;
        for (x, y) in wa.iter().zip(&wb) {
            prop_assert!(close(*x, *y, 1e-8), "{x} vs {y}");
        }
    }

    #[test]
    fn identity_relabeling_reproduces_observed_w(seed in any::<u64>()) {
        let (data, model) = two_component_setup(seed, 40);
        let model = finalize(&data, model).unwrap();
        let scores = score(&data, &model).unwrap();
        let labels = data.class_of_sample().to_vec();
        let plan = PermutationPlan {
            labels: labels.clone(),
            arrangements: vec![labels; 2],
            seed: 0,
            with_replacement: true,
        };
        let reps = replicate_statistics(&data, &scores.engine, &plan).unwrap();
        for j in 0..data.n_features() {
            prop_assert_eq!(reps.get(j, 0).to_bits(), scores.w[j].to_bits());
            prop_assert_eq!(reps.get(j, 1).to_bits(), scores.w[j].to_bits());
        }
    }
}

#[test]
fn permutations_leave_the_engine_untouched() {
    let (data, model) = two_component_setup(11, 50);
    let model = finalize(&data, model).unwrap();
    let scores = score(&data, &model).unwrap();
    let plan = permute_labels(data.class_of_sample(), 30, 5).unwrap();
    let first = replicate_statistics(&data, &scores.engine, &plan).unwrap();
    let second = replicate_statistics(&data, &scores.engine, &plan).unwrap();
    assert_eq!(first, second);
    assert_eq!(scores.engine.evaluate_all(&data), scores.stats);
}

#[test]
fn bh_controls_fdr_on_independent_p_values() {
    let alpha = 0.05;
    let (n_null, n_alt) = (900, 100);
    let mut total = 0.0;
    for seed in 0..20 {
        let mut r = rng(1000 + seed);
        let mut p: Vec<f64> = (0..n_null).map(|_| r.random::<f64>()).collect();
        p.extend((0..n_alt).map(|_| {
            let z = 3.0 + normal(&mut r);
            clustcontrast::ttest::t_two_sided_p(z, 1e9) / 2.0
        }));
        let bh = benjamini_hochberg(&p, alpha).unwrap();
        let false_pos = bh.selected[..n_null].iter().filter(|s| **s).count();
        total += false_pos as f64 / bh.n_selected.max(1) as f64;
    }
    let mean_fdp = total / 20.0;
    assert!(mean_fdp <= alpha + 0.02, "mean FDP {mean_fdp}");
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn simulator_correlates_within_blocks_only() {
    let config = SimConfig {
        p1: 200,
        p2: 200,
        block_size: 20,
        n_blocks: 3,
        rho_sim: 0.6,
        delta: 0.0,
        ..SimConfig::default()
    };
    let (data, _) = generate_dataset(&config, 8).unwrap();
    let (mut within, mut across) = (Vec::new(), Vec::new());
    for a in 0..data.n_features() {
        for b in a + 1..data.n_features() {
            let r = correlation(data.profile(a), data.profile(b));
            if a / 20 == b / 20 {
                within.push(r);
            } else {
                across.push(r);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean(&within) - 0.6).abs() < 0.05, "within {}", mean(&within));
    assert!(mean(&across).abs() < 0.02, "across {}", mean(&across));
}

#[test]
fn t_test_is_calibrated_on_null_data() {
    let config = SimConfig { de_fraction: 0.0, ..SimConfig::default() };
    let mut rejected = 0usize;
    let mut all_p = Vec::new();
    for seed in 0..4 {
        let (data, truth) = generate_dataset(&config, 50 + seed).unwrap();
        assert_eq!(truth.n_de(), 0);
        let p: Vec<f64> = pooled_t(&data).unwrap().iter().map(|r| r.p_value).collect();
        rejected += p.iter().filter(|&&v| v < 0.05).count();
        if seed == 0 {
            let d = ks_uniform(&p);
            assert!(d < 0.035, "KS distance {d}");
        }
        all_p.extend(p);
    }
    let rate = rejected as f64 / all_p.len() as f64;
    assert!((0.04..=0.06).contains(&rate), "rejection rate {rate}");
}
