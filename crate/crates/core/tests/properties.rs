mod common;

use common::*;
use msfr::cv::kfold_split;
use msfr::ecm::{e_step, ecm_cycle, observed_loglik, residualize, BetaUpdate, StudyStats};
use msfr::linalg::{rv_coefficient, spd_log_det};
use msfr::model::marginal_covariance;
use msfr::scores::identify;
use proptest::prelude::*;

prop_compose! {
    fn shape()(p in 3usize..9, p_b in 0usize..3, q in 1usize..3, qs in 0usize..3, studies in 1usize..4, seed in any::<u64>())
        -> (usize, usize, usize, usize, usize, u64) {
        (p, p_b, q, qs, studies, seed)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn marginal_covariance_is_positive_definite((p, p_b, q, qs, studies, seed) in shape()) {
        let mut rng = rng(seed);
        let params = random_params(&mut rng, p, p_b, q, &vec![qs; studies], 1.5);
        let cov = marginal_covariance(&params);
        prop_assert!(cov.is_positive_definite());
        for s in 0..studies {
            prop_assert!(spd_log_det(&params.sigma(s)).is_ok());
        }
    }

    #[test]
    fn posterior_moments_are_symmetric_and_bounded((p, p_b, q, qs, studies, seed) in shape()) {
        let mut rng = rng(seed);
        let params = random_params(&mut rng, p, p_b, q, &vec![qs; studies], 1.0);
        let data = sample_data(&mut rng, &params, &vec![15; studies]);
        let xt = residualize(&data, &params.beta).unwrap();
        let m = e_step(&xt, &params).unwrap();
        for st in &m.studies {
            prop_assert!((&st.e_ff - st.e_ff.transpose()).amax() < 1e-12);
            prop_assert!((&st.e_ll - st.e_ll.transpose()).amax() < 1e-12);
            // posterior variances shrink the prior: 0 ≤ eig(V) ≤ 1
            for e in st.var_f.clone().symmetric_eigen().eigenvalues.iter() {
                prop_assert!(*e > 0.0 && *e <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn ecm_cycles_never_decrease_loglik((p, p_b, q, qs, studies, seed) in shape()) {
        let mut rng = rng(seed);
        let truth = random_params(&mut rng, p, p_b, q, &vec![qs; studies], 1.0);
        let data = sample_data(&mut rng, &truth, &vec![40; studies]);
        let stats = StudyStats::from_data(&data);
        let mut cur = random_params(&mut rng, p, p_b, q, &vec![qs; studies], 0.5);
        let mut prev = observed_loglik(&data, &cur).unwrap();
        for _ in 0..25 {
            cur = ecm_cycle(&stats, &cur, BetaUpdate::PsiWeighted).unwrap().0;
            let next = observed_loglik(&data, &cur).unwrap();
            prop_assert!(next >= prev - 1e-9 * prev.abs(), "{} -> {}", prev, next);
            prev = next;
        }
    }

    #[test]
    fn identify_keeps_every_sigma((p, p_b, q, qs, studies, seed) in shape()) {
        let mut rng = rng(seed);
        let params = random_params(&mut rng, p, p_b, q, &vec![qs; studies], 1.0);
        let ident = identify(&params);
        for s in 0..studies {
            let (a, b) = (params.sigma(s), ident.sigma(s));
            prop_assert!((&a - &b).norm() <= 1e-10 * a.norm());
        }
        prop_assert_eq!(identify(&ident).phi.shape(), ident.phi.shape());
    }

    #[test]
    fn rv_is_in_unit_interval(r in 2usize..10, c1 in 1usize..4, c2 in 1usize..4, seed in any::<u64>()) {
        let mut rng = rng(seed);
        let a = normal_matrix(&mut rng, r, c1);
        let b = normal_matrix(&mut rng, r, c2);
        let v = rv_coefficient(&a, &b).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        prop_assert!((v - rv_coefficient(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn folds_partition_every_study(n in proptest::collection::vec(10usize..40, 1..4), k in 2usize..6, seed in any::<u64>()) {
        let mut rng = rng(seed);
        let params = random_params(&mut rng, 3, 1, 1, &vec![0; n.len()], 1.0);
        let data = sample_data(&mut rng, &params, &n);
        let folds = kfold_split(&data, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        for (s, &ns) in n.iter().enumerate() {
            let mut seen = vec![0usize; ns];
            for f in &folds {
                prop_assert_eq!(f.train[s].len() + f.test[s].len(), ns);
                for &i in &f.test[s] {
                    seen[i] += 1;
                }
                let sizes = f.test[s].len();
                prop_assert!(sizes == ns / k || sizes == ns.div_ceil(k));
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
        prop_assert_eq!(kfold_split(&data, k, seed).unwrap(), folds);
    }
}
