//! Shared helpers for the integration suites.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use riv_core::reduced_form::ReducedFormFit;

/// Build a fit directly from coefficient vectors, noise scalars and the
/// design block `omega = n * [(W'W)^-1]_zz`, with homoscedastic covariance
/// blocks derived the standard way.
pub fn fit_from_parts(
    outcome_coef: &[f64],
    treatment_coef: &[f64],
    noise: (f64, f64, f64),
    omega: DMatrix<f64>,
    n: usize,
) -> ReducedFormFit {
    let p_z = outcome_coef.len();
    let nf = n as f64;
    let (s_eps, s_delta, s_cross) = noise;
    ReducedFormFit {
        outcome_coef: DVector::from_row_slice(outcome_coef),
        treatment_coef: DVector::from_row_slice(treatment_coef),
        outcome_cov_coef: DVector::zeros(0),
        treatment_cov_coef: DVector::zeros(0),
        v_outcome: omega.map(|o| s_eps * o / nf),
        v_treatment: omega.map(|o| s_delta * o / nf),
        cross_cov: omega.map(|o| s_cross * o / nf),
        omega,
        outcome_noise_var: s_eps,
        treatment_noise_var: s_delta,
        noise_cov: s_cross,
        n,
        p_z,
        p_x: 0,
        robust: false,
    }
}

/// A random fit with diagonal design block, bounded coefficients and a noise
/// covariance respecting the Cauchy-Schwarz bound.
pub fn random_fit(rng: &mut ChaCha12Rng, p_z: usize) -> ReducedFormFit {
    let n = rng.random_range(200..5000);
    let outcome: Vec<f64> = (0..p_z).map(|_| rng.random_range(-2.0..2.0)).collect();
    let treatment: Vec<f64> = (0..p_z).map(|_| rng.random_range(-2.0..2.0)).collect();
    let s_eps: f64 = rng.random_range(0.1..4.0);
    let s_delta: f64 = rng.random_range(0.1..4.0);
    let bound = (s_eps * s_delta).sqrt();
    let s_cross = rng.random_range(-0.9..0.9) * bound;
    let omega = DMatrix::from_fn(p_z, p_z, |i, j| {
        if i == j {
            rng.random_range(0.5..3.0)
        } else {
            0.0
        }
    });
    fit_from_parts(&outcome, &treatment, (s_eps, s_delta, s_cross), omega, n)
}

/// Arbitrary symmetric binary matrix with unit diagonal.
pub fn random_voting_matrix(rng: &mut ChaCha12Rng, m: usize) -> DMatrix<u8> {
    let mut pi = DMatrix::from_element(m, m, 0u8);
    for a in 0..m {
        pi[(a, a)] = 1;
        for b in (a + 1)..m {
            if rng.random_bool(0.5) {
                pi[(a, b)] = 1;
                pi[(b, a)] = 1;
            }
        }
    }
    pi
}

/// The one-step definition of the valid set: `l` belongs when some chain
/// `winner -> k -> l` of votes exists. Independent of the production
/// two-step construction.
pub fn valid_set_one_step(pi: &DMatrix<u8>) -> Vec<usize> {
    let m = pi.nrows();
    let votes: Vec<usize> = (0..m)
        .map(|a| (0..m).filter(|&b| pi[(a, b)] != 0).count())
        .collect();
    let max_votes = *votes.iter().max().unwrap();
    let winners: Vec<usize> = (0..m).filter(|&a| votes[a] == max_votes).collect();
    (0..m)
        .filter(|&l| {
            winners
                .iter()
                .any(|&j| (0..m).any(|k| pi[(j, k)] == 1 && pi[(k, l)] == 1))
        })
        .collect()
}
