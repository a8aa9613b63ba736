//! Cross-module invariants, property-tested over randomized inputs.

mod common;

use common::{random_voting_matrix, valid_set_one_step};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use riv_core::data_io::{load_csv, write_csv, ColumnSchema, Dataset};
use riv_core::iv_select::{select_relevant, tsht_valid_set, voting_matrix};
use riv_core::reduced_form::fit_ols;
use riv_core::searching::{
    make_grid_with_step, searching_ci, sparsity, RhoMethod, ThresholdSpec,
};

fn spec(rho: f64) -> ThresholdSpec {
    ThresholdSpec {
        rho,
        method: RhoMethod::SqrtLog,
        alpha: 0.05,
        replicates: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Writing any finite dataset to CSV and reloading reproduces it bit for
    /// bit (shortest round-trip float formatting).
    #[test]
    fn csv_round_trip_bit_exact(
        rows in proptest::collection::vec(
            (-1e12f64..1e12, -1e12f64..1e12, -1e12f64..1e12, -1e12f64..1e12),
            4..40,
        )
    ) {
        let n = rows.len();
        let y = DVector::from_fn(n, |i, _| rows[i].0);
        let d = DVector::from_fn(n, |i, _| rows[i].1);
        let z = DMatrix::from_fn(n, 2, |i, j| if j == 0 { rows[i].2 } else { rows[i].3 });
        let data = Dataset::new(y, d, z, DMatrix::zeros(n, 0)).unwrap();
        let schema = ColumnSchema::new("y", "d", vec!["z1".into(), "z2".into()], vec![]);
        let file = tempfile::NamedTempFile::new().unwrap();
        write_csv(&data, file.path(), &schema).unwrap();
        let reloaded = load_csv(file.path(), &schema).unwrap();
        prop_assert_eq!(data, reloaded);
    }

    /// The two-step valid-set construction agrees with the direct one-step
    /// definition on every symmetric unit-diagonal voting matrix, and the
    /// winner / intermediate / valid sets form a chain.
    #[test]
    fn valid_set_definitions_agree(seed in any::<u64>(), m in 1usize..10) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let pi = random_voting_matrix(&mut rng, m);
        let (winners, middle, two_step) = tsht_valid_set(&pi).unwrap();
        prop_assert_eq!(&two_step, &valid_set_one_step(&pi));
        prop_assert!(!two_step.is_empty());
        for j in &winners {
            prop_assert!(middle.contains(j));
        }
        for j in &middle {
            prop_assert!(two_step.contains(j));
        }
    }

    /// Halving the grid step keeps every coarse grid point on the fine grid,
    /// so a non-empty interval can never become empty.
    #[test]
    fn grid_refinement_keeps_nonempty(
        seed in any::<u64>(),
        lower in -2.0f64..0.0,
        span in 0.1f64..2.0,
        step_exp in -7i32..-3,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let fit = common::random_fit(&mut rng, 3);
        let step = 2.0f64.powi(step_exp);
        let upper = lower + span;
        let coarse = make_grid_with_step(lower, upper, step).unwrap();
        let fine = make_grid_with_step(lower, upper, step / 2.0).unwrap();
        for (i, p) in coarse.points.iter().enumerate() {
            // Appended endpoints aside, coarse points reappear bit-exactly.
            if i < coarse.points.len() - 1 {
                prop_assert!(fine.points.contains(p));
            }
        }
        let rho = spec(2.0);
        let active = vec![0, 1, 2];
        let on_coarse = searching_ci(&fit, &active, &coarse, &rho).unwrap();
        let on_fine = searching_ci(&fit, &active, &fine, &rho).unwrap();
        if !on_coarse.empty {
            prop_assert!(!on_fine.empty);
        }
    }

    /// Passing sets are nested in the threshold: raising rho never removes a
    /// passing grid point, so intervals are nested too.
    #[test]
    fn rho_monotone_interval_containment(seed in any::<u64>()) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let fit = common::random_fit(&mut rng, 4);
        let grid = make_grid_with_step(-3.0, 3.0, 0.05).unwrap();
        let active = vec![0, 1, 2, 3];
        let lo = searching_ci(&fit, &active, &grid, &spec(1.0)).unwrap();
        let hi = searching_ci(&fit, &active, &grid, &spec(2.5)).unwrap();
        if !lo.empty {
            prop_assert!(!hi.empty);
            prop_assert!(hi.lo.unwrap() <= lo.lo.unwrap());
            prop_assert!(lo.hi.unwrap() <= hi.hi.unwrap());
        }
    }

    /// The deviation count is nonincreasing in the shrink factor.
    #[test]
    fn lambda_monotone_sparsity(seed in any::<u64>(), beta in -2.0f64..2.0) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let fit = common::random_fit(&mut rng, 5);
        let active = vec![0, 1, 2, 3, 4];
        let mut last = usize::MAX;
        for lambda in [0.25, 0.5, 1.0, 2.0] {
            let count = sparsity(&fit, &active, beta, 1.8, lambda).unwrap();
            prop_assert!(count <= last);
            last = count;
        }
    }

    /// Voting matrices are symmetric with unit diagonal for any fit.
    #[test]
    fn voting_matrix_shape(seed in any::<u64>(), m in 2usize..6) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut fit = common::random_fit(&mut rng, m);
        // Keep treatment coefficients away from zero so every ratio exists.
        for j in 0..m {
            if fit.treatment_coef[j].abs() < 0.05 {
                fit.treatment_coef[j] = 0.5;
            }
        }
        let s: Vec<usize> = (0..m).collect();
        let pi = voting_matrix(&fit, &s).unwrap();
        for a in 0..m {
            prop_assert_eq!(pi[(a, a)], 1);
            for b in 0..m {
                prop_assert_eq!(pi[(a, b)], pi[(b, a)]);
            }
        }
    }
}

/// Eight instruments in three well-separated invalidity groups: the voted
/// valid set recovers exactly the four valid ones at a large sample size.
#[test]
fn well_separated_groups_select_the_valid_block() {
    use riv_core::iv_select::select_tsht;
    use riv_core::sim::{generate, SimSetting};

    let mut pi = DVector::zeros(8);
    // One block of three sharing an invalidity level, one singleton.
    pi[4] = 0.6;
    pi[5] = 0.6;
    pi[6] = 0.6;
    pi[7] = -1.0;
    let setting = SimSetting::assemble(
        "three-groups",
        1.0,
        0.5,
        0.0,
        5000,
        DVector::from_element(8, 0.5),
        pi,
        0,
    )
    .unwrap();
    for seed in [1u64, 2, 3] {
        let data = generate(&setting, seed);
        let fit = fit_ols(&data).unwrap();
        let selection = select_tsht(&fit).unwrap();
        assert_eq!(selection.s_hat.len(), 8, "all instruments are strong");
        assert_eq!(selection.v_hat, vec![0, 1, 2, 3], "seed {seed}");
        assert_eq!(selection.w_hat.as_deref(), Some(&[0usize, 1, 2, 3][..]));
    }
}

/// Relaxing the voting threshold never drops a vote; when the winner set is
/// unchanged the valid set can only grow.
#[test]
fn vote_threshold_relaxation_is_monotone() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    for _ in 0..100 {
        let mut fit = common::random_fit(&mut rng, 5);
        for j in 0..5 {
            if fit.treatment_coef[j].abs() < 0.05 {
                fit.treatment_coef[j] = -0.4;
            }
        }
        let s: Vec<usize> = (0..5).collect();
        let base = (fit.n as f64).ln().sqrt();
        let tight = riv_core::iv_select::voting_matrix_with_threshold(&fit, &s, base).unwrap();
        let loose =
            riv_core::iv_select::voting_matrix_with_threshold(&fit, &s, base * 1.7).unwrap();
        let votes = |pi: &DMatrix<u8>, a: usize| (0..5).filter(|&b| pi[(a, b)] != 0).count();
        for a in 0..5 {
            for b in 0..5 {
                assert!(loose[(a, b)] >= tight[(a, b)]);
            }
            assert!(votes(&loose, a) >= votes(&tight, a));
        }
        let (w_tight, _, v_tight) = tsht_valid_set(&tight).unwrap();
        let (w_loose, _, v_loose) = tsht_valid_set(&loose).unwrap();
        if w_tight == w_loose {
            for j in &v_tight {
                assert!(v_loose.contains(j), "valid set shrank under relaxation");
            }
        }
    }
}

/// Average searching length in the majority-rule setting does not grow with
/// the sample size (one-sided Monte Carlo tolerance).
#[test]
fn searching_length_shrinks_with_sample_size() {
    use riv_core::pipeline::AnalysisConfig;
    use riv_core::sim::{build_setting, run_replications, Method};

    let config = AnalysisConfig::default();
    let mut lengths = Vec::new();
    for n in [500usize, 2000] {
        let setting = build_setting("S1", 0.5, 0.2, n).unwrap();
        let report =
            run_replications(&setting, &[Method::Searching], 200, 314, &config).unwrap();
        lengths.push(report.stats[0].avg_length);
    }
    assert!(
        lengths[1] <= lengths[0] + 0.05,
        "length at n=2000 ({}) exceeds length at n=500 ({}) beyond tolerance",
        lengths[1],
        lengths[0]
    );
}

/// When the voted set coincides with the relevant set, majority and
/// plurality mode produce the same intervals for the same seed.
#[test]
fn modes_agree_when_votes_keep_everyone() {
    use riv_core::pipeline::{analyze, AnalysisConfig, AnalysisInput, Mode};
    use riv_core::sim::{generate, SimSetting};

    let setting = SimSetting::assemble(
        "all-valid",
        1.0,
        0.6,
        0.0,
        1500,
        DVector::from_element(3, 0.6),
        DVector::zeros(3),
        0,
    )
    .unwrap();
    let data = generate(&setting, 5);
    let run = |mode: Mode| {
        analyze(
            AnalysisInput::Data(&data),
            &AnalysisConfig {
                mode,
                m: 150,
                bootstrap_k: 200,
                seed: 17,
                ..AnalysisConfig::default()
            },
        )
        .unwrap()
    };
    let majority = run(Mode::Majority);
    let plurality = run(Mode::Plurality);
    assert_eq!(plurality.selection.v_hat, plurality.selection.s_hat);
    assert_eq!(majority.searching.lo, plurality.searching.lo);
    assert_eq!(majority.searching.hi, plurality.searching.hi);
    assert_eq!(majority.sampling.ci.lo, plurality.sampling.ci.lo);
}

/// Reversing the instrument columns reverses every piece of the selection.
#[test]
fn relabeling_equivariance() {
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    for _ in 0..20 {
        use rand::Rng;
        let n = 300;
        let p_z = 4;
        let mut z = DMatrix::zeros(n, p_z);
        let mut d = DVector::zeros(n);
        let mut y = DVector::zeros(n);
        let gammas = [0.8, 0.9, 1.0, 1.1];
        let pis = [0.0, 0.0, 0.0, rng.random_range(-1.0..1.0)];
        for i in 0..n {
            for j in 0..p_z {
                z[(i, j)] = rng.random_range(-1.5..1.5);
            }
            let e: f64 = rng.random_range(-1.0..1.0);
            let v: f64 = rng.random_range(-1.0..1.0);
            d[i] = (0..p_z).map(|j| gammas[j] * z[(i, j)]).sum::<f64>() + 0.8 * e + 0.6 * v;
            y[i] = d[i] + (0..p_z).map(|j| pis[j] * z[(i, j)]).sum::<f64>() + e;
        }
        let z_rev = DMatrix::from_fn(n, p_z, |i, j| z[(i, p_z - 1 - j)]);
        let data = Dataset::new(y.clone(), d.clone(), z, DMatrix::zeros(n, 0)).unwrap();
        let data_rev = Dataset::new(y, d, z_rev, DMatrix::zeros(n, 0)).unwrap();

        let fit = fit_ols(&data).unwrap();
        let fit_rev = fit_ols(&data_rev).unwrap();
        let map = |j: usize| p_z - 1 - j;

        let s = select_relevant(&fit).unwrap_or_default();
        let mut s_mapped: Vec<usize> = select_relevant(&fit_rev)
            .unwrap_or_default()
            .iter()
            .map(|&j| map(j))
            .collect();
        s_mapped.sort_unstable();
        assert_eq!(s, s_mapped);

        if s.len() == p_z {
            let pi = voting_matrix(&fit, &s).unwrap();
            let s_rev: Vec<usize> = (0..p_z).collect();
            let pi_rev = voting_matrix(&fit_rev, &s_rev).unwrap();
            for a in 0..p_z {
                for b in 0..p_z {
                    assert_eq!(pi[(a, b)], pi_rev[(map(a), map(b))]);
                }
            }
            let (_, _, v) = tsht_valid_set(&pi).unwrap();
            let (_, _, v_rev) = tsht_valid_set(&pi_rev).unwrap();
            let mut v_mapped: Vec<usize> = v_rev.iter().map(|&p| map(p)).collect();
            v_mapped.sort_unstable();
            assert_eq!(v, v_mapped);
        }
    }
}
