//! Relevance screening and valid-instrument selection by pairwise voting.
//!
//! Candidate instruments first pass a strength screen on the treatment
//! regression. Surviving pairs then test each other: instrument `j` proposes
//! the effect estimate `Gamma_j / gamma_j`, and instrument `k` votes for `j`
//! when neither contradicts the other at the multiplicity-adjusted level. The
//! block of mutually supporting instruments around the top vote-getters is the
//! initial valid-set estimate, following the two-stage hard thresholding idea
//! of Guo, Kang, Cai and Small (2018).

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::reduced_form::ReducedFormFit;

/// How the valid set was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionSource {
    /// Voting-matrix construction.
    Tsht,
    /// Supplied by the caller.
    External,
}

/// Result of instrument selection. All index sets hold 0-based instrument
/// indices (positions in the `Z` columns), ascending.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    /// Relevant instruments.
    pub s_hat: Vec<usize>,
    /// Voting matrix over `s_hat` positions; absent for external sets.
    pub pi_matrix: Option<DMatrix<u8>>,
    /// Votes per row of the voting matrix (diagonal self-vote included).
    pub vote_counts: Option<Vec<usize>>,
    /// Top vote-getters; absent for external sets.
    pub w_hat: Option<Vec<usize>>,
    /// Instruments exchanging votes with a winner (diagnostic intermediate).
    pub v_tilde: Option<Vec<usize>>,
    /// Valid-set estimate used by the interval constructions.
    pub v_hat: Vec<usize>,
    pub source: SelectionSource,
}

/// Strength screen: keep instrument `j` when `|gamma_j|` is at least
/// `sqrt(log n)` standard errors away from zero.
pub fn select_relevant(fit: &ReducedFormFit) -> Result<Vec<usize>> {
    let mult = (fit.n as f64).ln().sqrt();
    let kept: Vec<usize> = (0..fit.p_z)
        .filter(|&j| {
            let threshold = mult * fit.v_treatment[(j, j)].max(0.0).sqrt();
            fit.treatment_coef[j].abs() >= threshold
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::NoRelevantInstruments { p_z: fit.p_z });
    }
    Ok(kept)
}

/// Instrument `j`'s estimate of instrument `k`'s direct effect, together with
/// its standard error: `pi_k^[j] = Gamma_k - (Gamma_j / gamma_j) gamma_k`.
pub fn pair_pi(fit: &ReducedFormFit, j: usize, k: usize) -> Result<(f64, f64)> {
    let beta_j = fit.instrument_ratio(j)?;
    let pi = fit.outcome_coef[k] - beta_j * fit.treatment_coef[k];

    // Noise scalars: the displayed formula is homoscedastic; under the robust
    // covariance option the per-coordinate implied ratios take their place.
    let (s_eps, s_delta, s_cross) = if fit.robust {
        let gii = fit.gram_inv_diag(k);
        (
            fit.v_outcome[(k, k)] / gii,
            fit.v_treatment[(k, k)] / gii,
            fit.cross_cov[(k, k)] / gii,
        )
    } else {
        (fit.outcome_noise_var, fit.treatment_noise_var, fit.noise_cov)
    };

    let noise_term =
        ((s_eps + beta_j * beta_j * s_delta - 2.0 * beta_j * s_cross) / fit.n as f64).max(0.0);
    let ratio = fit.treatment_coef[k] / fit.treatment_coef[j];
    let design_term = (fit.omega[(k, k)] - 2.0 * ratio * fit.omega[(j, k)]
        + ratio * ratio * fit.omega[(j, j)])
        .max(0.0);
    Ok((pi, noise_term.sqrt() * design_term.sqrt()))
}

/// Symmetric voting matrix over the relevant set with the default
/// `sqrt(log n)` multiplicity adjustment.
pub fn voting_matrix(fit: &ReducedFormFit, relevant: &[usize]) -> Result<DMatrix<u8>> {
    voting_matrix_with_threshold(fit, relevant, (fit.n as f64).ln().sqrt())
}

/// Voting matrix with an explicit threshold multiplier: entry `(a, b)` is 1
/// when the instruments at positions `a` and `b` of `relevant` mutually fail
/// to reject each other (`|pi| <= SE * multiplier`, both directions).
pub fn voting_matrix_with_threshold(
    fit: &ReducedFormFit,
    relevant: &[usize],
    multiplier: f64,
) -> Result<DMatrix<u8>> {
    let m = relevant.len();
    let mut pi = DMatrix::from_element(m, m, 0u8);
    for a in 0..m {
        pi[(a, a)] = 1;
        for b in (a + 1)..m {
            let (j, k) = (relevant[a], relevant[b]);
            let (pi_kj, se_kj) = pair_pi(fit, j, k)?;
            let (pi_jk, se_jk) = pair_pi(fit, k, j)?;
            let agree =
                pi_kj.abs() <= se_kj * multiplier && pi_jk.abs() <= se_jk * multiplier;
            if agree {
                pi[(a, b)] = 1;
                pi[(b, a)] = 1;
            }
        }
    }
    Ok(pi)
}

/// Winner set, intermediate set and valid-set estimate from a voting matrix.
///
/// Returns positions into the matrix: the winners are all rows attaining the
/// maximal vote count, the intermediate set collects everyone exchanging votes
/// with a winner, and the valid set collects everyone exchanging votes with
/// the intermediate set.
pub fn tsht_valid_set(pi: &DMatrix<u8>) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let m = pi.nrows();
    if m == 0 {
        return Err(Error::Validation("empty voting matrix".into()));
    }
    if pi.ncols() != m {
        return Err(Error::Matrix("voting matrix must be square".into()));
    }
    debug_assert!((0..m).all(|a| pi[(a, a)] == 1), "unit diagonal expected");
    debug_assert!(
        (0..m).all(|a| (0..m).all(|b| pi[(a, b)] == pi[(b, a)])),
        "symmetric voting matrix expected"
    );

    let votes: Vec<usize> = (0..m)
        .map(|a| (0..m).filter(|&b| pi[(a, b)] != 0).count())
        .collect();
    let max_votes = *votes.iter().max().expect("non-empty");
    let winners: Vec<usize> = (0..m).filter(|&a| votes[a] == max_votes).collect();

    let expand = |seed: &[usize]| -> Vec<usize> {
        let mut member = vec![false; m];
        for &a in seed {
            for b in 0..m {
                if pi[(a, b)] != 0 {
                    member[b] = true;
                }
            }
        }
        (0..m).filter(|&b| member[b]).collect()
    };
    let middle = expand(&winners);
    let valid = expand(&middle);
    Ok((winners, middle, valid))
}

/// Run the full selection pipeline: relevance screen, voting, valid set.
pub fn select_tsht(fit: &ReducedFormFit) -> Result<SelectionResult> {
    let s_hat = select_relevant(fit)?;
    let pi = voting_matrix(fit, &s_hat)?;
    let (winners, middle, valid) = tsht_valid_set(&pi)?;
    let votes: Vec<usize> = (0..pi.nrows())
        .map(|a| (0..pi.ncols()).filter(|&b| pi[(a, b)] != 0).count())
        .collect();
    let to_orig = |positions: Vec<usize>| -> Vec<usize> {
        positions.into_iter().map(|p| s_hat[p]).collect()
    };
    Ok(SelectionResult {
        pi_matrix: Some(pi),
        vote_counts: Some(votes),
        w_hat: Some(to_orig(winners)),
        v_tilde: Some(to_orig(middle)),
        v_hat: to_orig(valid),
        s_hat,
        source: SelectionSource::Tsht,
    })
}

/// Accept a caller-supplied valid set. It must be a non-empty subset of the
/// relevant set; voting diagnostics are absent.
pub fn external_valid_set(relevant: &[usize], v_user: &[usize]) -> Result<SelectionResult> {
    if v_user.is_empty() {
        return Err(Error::Validation("external valid set is empty".into()));
    }
    let mut v_hat: Vec<usize> = v_user.to_vec();
    v_hat.sort_unstable();
    v_hat.dedup();
    for &j in &v_hat {
        if !relevant.contains(&j) {
            return Err(Error::Containment(format!(
                "instrument {} is not in the relevant set {:?}",
                j + 1,
                relevant.iter().map(|v| v + 1).collect::<Vec<_>>()
            )));
        }
    }
    Ok(SelectionResult {
        s_hat: relevant.to_vec(),
        pi_matrix: None,
        vote_counts: None,
        w_hat: None,
        v_tilde: None,
        v_hat,
        source: SelectionSource::External,
    })
}
