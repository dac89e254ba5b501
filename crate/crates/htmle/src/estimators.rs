//! The two-step tilting estimator for two-part outcomes, comparator
//! estimators (standard TMLE, AIPW), influence-function evaluation, and
//! variance estimation.
//!
//! `htmle` tilts the positive-part mean and the hurdle probability with two
//! intercept-only logistic fluctuations whose solved score equations force
//! the empirical mean of the influence function to zero; the reported
//! estimate is the plug-in `n⁻¹ Σ q̂ᵈ·m̂ᵈ` at the tilted fits. The
//! comparators use one combined outcome regression `E[Y | T, X]`: standard
//! TMLE tilts it once and plugs in; AIPW adds the empirical mean of the
//! influence function instead of tilting.

use crate::data::{DataError, OutcomeScaler, TwoPartDataset};
use crate::learners::{expit, fit_intercept_logistic, logit, LearnerError};
use crate::nuisance::{
    fit_combined_regression, fit_m, fit_nuisance_table, fit_q, fit_ratio, CrossFitPlan,
    NuisanceConfig, NuisanceError, NuisanceTable,
};
use crate::policy::Policy;
use crate::seed::{derive, Stream};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::fmt;
use thiserror::Error;

/// Errors from tilting, variance estimation, and orchestration.
#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("no positive outcomes in the {which} tilt subset")]
    NoPositives { which: &'static str },
    #[error("all {which} tilt weights are zero")]
    ZeroTiltWeight { which: &'static str },
    #[error("{which} tilt failed: {source}")]
    Tilt {
        which: &'static str,
        #[source]
        source: LearnerError,
    },
    #[error("bootstrap needs at least 2 replicates, got {0}")]
    BootstrapTooFew(usize),
    #[error("bootstrap replicate {replicate} had no positive outcomes after 10 redraws")]
    BootstrapDegenerate { replicate: usize },
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which estimator produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Htmle,
    Tmle,
    Aipw,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            EstimatorKind::Htmle => "htmle",
            EstimatorKind::Tmle => "tmle",
            EstimatorKind::Aipw => "aipw",
        };
        f.write_str(name)
    }
}

/// How the standard error is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMethod {
    /// Empirical variance of the influence function over n.
    Eif,
    /// Resample observations and rerun the tilting steps on the fixed
    /// nuisance table.
    Bootstrap { replicates: usize },
}

/// Full configuration for a single estimation run.
#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub nuisance: NuisanceConfig,
    pub variance: VarianceMethod,
    /// Pad fraction for the outcome scaler.
    pub pad: f64,
    /// Absolute tolerance on each solved tilting score.
    pub tilt_tol: f64,
    /// Seed for bootstrap resampling streams.
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            nuisance: NuisanceConfig::default(),
            variance: VarianceMethod::Eif,
            pad: crate::data::DEFAULT_PAD,
            tilt_tol: 1e-9,
            seed: 0,
        }
    }
}

/// Run diagnostics attached to every report.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub n: usize,
    pub mean_eif: f64,
    pub sd_eif: f64,
    pub min_r_hat: f64,
    pub max_r_hat: f64,
    pub nuisance_converged: bool,
    pub scaler_upper: f64,
    pub warnings: Vec<String>,
}

/// Point estimate, uncertainty, and influence-function values.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub method: EstimatorKind,
    pub psi_hat: f64,
    pub std_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Tilt coefficient for the positive-part mean (two-step only).
    pub eps_m: Option<f64>,
    /// Tilt coefficient for the hurdle probability (two-step only).
    pub eps_q: Option<f64>,
    /// Single tilt coefficient (standard TMLE only).
    pub eps: Option<f64>,
    pub variance_method: VarianceMethod,
    pub eif_values: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    /// One JSON object per line.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Fixed-width row used by the human-readable table.
    pub fn table_row(&self) -> String {
        format!(
            "{:<6} {:>12.6} {:>10.6} {:>12.6} {:>12.6} {:>11.2e} {:>9} {:>9} {:>8.3} {:>9.3}",
            self.method.to_string(),
            self.psi_hat,
            self.std_err,
            self.ci_low,
            self.ci_high,
            self.diagnostics.mean_eif,
            fmt_opt(self.eps_m.or(self.eps)),
            fmt_opt(self.eps_q),
            self.diagnostics.min_r_hat,
            self.diagnostics.max_r_hat,
        )
    }

    /// Header matching [`EstimateReport::table_row`].
    pub fn table_header() -> String {
        format!(
            "{:<6} {:>12} {:>10} {:>12} {:>12} {:>11} {:>9} {:>9} {:>8} {:>9}",
            "method",
            "psi_hat",
            "std_err",
            "ci_low",
            "ci_high",
            "mean_eif",
            "eps_m",
            "eps_q",
            "min_r",
            "max_r"
        )
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:>9.5}"),
        None => format!("{:>9}", "-"),
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Influence function `D_i = r̂·(Y − q̂·m̂) + q̂ᵈ·m̂ᵈ − ψ`, with the stored
/// scaled `m` values mapped back to outcome units.
pub fn eif(
    table: &NuisanceTable,
    dataset: &TwoPartDataset,
    scaler: &OutcomeScaler,
    psi: f64,
) -> Vec<f64> {
    let upper = scaler.upper();
    (0..dataset.n())
        .map(|i| {
            let m_nat = upper * table.m_nat()[i];
            let m_shift = upper * table.m_shift()[i];
            table.r_hat()[i] * (dataset.y()[i] - table.q_nat()[i] * m_nat)
                + table.q_shift()[i] * m_shift
                - psi
        })
        .collect()
}

/// The algebraically equivalent two-residual form
/// `D_i = r̂·m̂·(Δ − q̂) + Δ·r̂·(S − m̂) + q̂ᵈ·m̂ᵈ − ψ`.
pub fn eif_alt(
    table: &NuisanceTable,
    dataset: &TwoPartDataset,
    scaler: &OutcomeScaler,
    psi: f64,
) -> Vec<f64> {
    let upper = scaler.upper();
    (0..dataset.n())
        .map(|i| {
            let m_nat = upper * table.m_nat()[i];
            let m_shift = upper * table.m_shift()[i];
            let delta = f64::from(dataset.delta()[i]);
            let binary_part = table.r_hat()[i] * m_nat * (delta - table.q_nat()[i]);
            let intensity_part = if dataset.delta()[i] == 1 {
                table.r_hat()[i] * (dataset.s()[i] - m_nat)
            } else {
                0.0
            };
            binary_part + intensity_part + table.q_shift()[i] * m_shift - psi
        })
        .collect()
}

fn tilted(values: &[f64], eps: f64) -> Vec<f64> {
    values.iter().map(|&v| expit(eps + logit(v))).collect()
}

/// Solve the positive-part tilt on pre-gathered vectors.
fn solve_tilt_m(
    y_scaled: &[f64],
    delta: &[u8],
    r_hat: &[f64],
    m_nat: &[f64],
    m_shift: &[f64],
    tol: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>), EstimatorError> {
    let mut response = Vec::new();
    let mut offset = Vec::new();
    let mut weights = Vec::new();
    for i in 0..y_scaled.len() {
        if delta[i] == 1 {
            response.push(y_scaled[i]);
            offset.push(logit(m_nat[i]));
            weights.push(r_hat[i]);
        }
    }
    if response.is_empty() {
        return Err(EstimatorError::NoPositives { which: "m" });
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(EstimatorError::ZeroTiltWeight { which: "m" });
    }
    let fit = fit_intercept_logistic(&response, &offset, &weights, tol)
        .map_err(|source| EstimatorError::Tilt { which: "m", source })?;
    Ok((fit.epsilon, tilted(m_nat, fit.epsilon), tilted(m_shift, fit.epsilon)))
}

/// Solve the hurdle tilt; weights are `r̂ · m̂^ε` at the natural treatment.
fn solve_tilt_q(
    delta: &[u8],
    r_hat: &[f64],
    m_nat_tilted: &[f64],
    q_nat: &[f64],
    q_shift: &[f64],
    tol: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>), EstimatorError> {
    let n = delta.len();
    let response: Vec<f64> = delta.iter().map(|&d| f64::from(d)).collect();
    let offset: Vec<f64> = q_nat.iter().map(|&q| logit(q)).collect();
    let weights: Vec<f64> = (0..n).map(|i| r_hat[i] * m_nat_tilted[i]).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(EstimatorError::ZeroTiltWeight { which: "q" });
    }
    let fit = fit_intercept_logistic(&response, &offset, &weights, tol)
        .map_err(|source| EstimatorError::Tilt { which: "q", source })?;
    Ok((fit.epsilon, tilted(q_nat, fit.epsilon), tilted(q_shift, fit.epsilon)))
}

/// Tilt the positive-part mean: an intercept-only logistic fluctuation of
/// the scaled outcome with offset `logit m̂` and weights `r̂` over `{Δ=1}`.
/// Returns the coefficient and the updated natural/shifted values.
pub fn tilt_m(
    table: &NuisanceTable,
    dataset: &TwoPartDataset,
    scaler: &OutcomeScaler,
    tol: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>), EstimatorError> {
    let (y_scaled, _) = scaler.scale_all(dataset.y());
    solve_tilt_m(
        &y_scaled,
        dataset.delta(),
        table.r_hat(),
        table.m_nat(),
        table.m_shift(),
        tol,
    )
}

/// Tilt the hurdle probability after the m-tilt: intercept-only logistic
/// fluctuation of `Δ` with offset `logit q̂` and weights `r̂ · m̂^ε` over all
/// observations.
pub fn tilt_q(
    table: &NuisanceTable,
    m_nat_tilted: &[f64],
    dataset: &TwoPartDataset,
    tol: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>), EstimatorError> {
    solve_tilt_q(
        dataset.delta(),
        table.r_hat(),
        m_nat_tilted,
        table.q_nat(),
        table.q_shift(),
        tol,
    )
}

fn diagnostics_from(
    dataset: &TwoPartDataset,
    scaler: &OutcomeScaler,
    r_hat: &[f64],
    eif_values: &[f64],
    nuisance_converged: bool,
    warnings: Vec<String>,
) -> Diagnostics {
    let mean_eif = mean(eif_values);
    let sd_eif = sample_sd(eif_values);
    Diagnostics {
        n: dataset.n(),
        mean_eif,
        sd_eif,
        min_r_hat: r_hat.iter().copied().fold(f64::INFINITY, f64::min),
        max_r_hat: r_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        nuisance_converged,
        scaler_upper: scaler.upper(),
        warnings,
    }
}

fn finish_report(
    method: EstimatorKind,
    psi_hat: f64,
    std_err: f64,
    eps_m: Option<f64>,
    eps_q: Option<f64>,
    eps: Option<f64>,
    variance: VarianceMethod,
    eif_values: Vec<f64>,
    mut diagnostics: Diagnostics,
) -> EstimateReport {
    if std_err == 0.0 {
        diagnostics
            .warnings
            .push("standard error is exactly zero; influence function is constant".to_string());
    }
    if diagnostics.sd_eif > 0.0 && diagnostics.mean_eif.abs() > 1e-5 * diagnostics.sd_eif {
        diagnostics.warnings.push(format!(
            "influence-function equation not solved: |mean| = {:.3e} exceeds 1e-5·sd = {:.3e}",
            diagnostics.mean_eif.abs(),
            1e-5 * diagnostics.sd_eif
        ));
    }
    EstimateReport {
        method,
        psi_hat,
        std_err,
        ci_low: psi_hat - 1.96 * std_err,
        ci_high: psi_hat + 1.96 * std_err,
        eps_m,
        eps_q,
        eps,
        variance_method: variance,
        eif_values,
        diagnostics,
    }
}

/// Standard error from the empirical variance of the influence function;
/// the flag marks a degenerate (constant) influence function.
pub fn variance_eif(eif_values: &[f64]) -> (f64, bool) {
    let sd = sample_sd(eif_values);
    let std_err = sd / (eif_values.len() as f64).sqrt();
    (std_err, std_err == 0.0)
}

/// The tilting steps and plug-in evaluated on a row multiset, against a
/// fixed nuisance table. This is one bootstrap replicate's estimate.
pub fn htmle_plugin_for_indices(
    dataset: &TwoPartDataset,
    scaler: &OutcomeScaler,
    table: &NuisanceTable,
    indices: &[usize],
    tol: f64,
) -> Result<f64, EstimatorError> {
    let (y_scaled_all, _) = scaler.scale_all(dataset.y());
    let y_scaled: Vec<f64> = indices.iter().map(|&i| y_scaled_all[i]).collect();
    let delta: Vec<u8> = indices.iter().map(|&i| dataset.delta()[i]).collect();
    let r_hat: Vec<f64> = indices.iter().map(|&i| table.r_hat()[i]).collect();
    let m_nat: Vec<f64> = indices.iter().map(|&i| table.m_nat()[i]).collect();
    let m_shift: Vec<f64> = indices.iter().map(|&i| table.m_shift()[i]).collect();
    let q_nat: Vec<f64> = indices.iter().map(|&i| table.q_nat()[i]).collect();
    let q_shift: Vec<f64> = indices.iter().map(|&i| table.q_shift()[i]).collect();

    let (_, m_nat_t, m_shift_t) = solve_tilt_m(&y_scaled, &delta, &r_hat, &m_nat, &m_shift, tol)?;
    let (_, _, q_shift_t) = solve_tilt_q(&delta, &r_hat, &m_nat_t, &q_nat, &q_shift, tol)?;
    let psi_scaled = (0..indices.len())
        .map(|k| q_shift_t[k] * m_shift_t[k])
        .sum::<f64>()
        / indices.len() as f64;
    Ok(scaler.unscale_value(psi_scaled))
}

fn bootstrap_std_err<F>(
    n: usize,
    delta: &[u8],
    replicates: usize,
    seed: u64,
    needs_positive: bool,
    replicate_psi: F,
) -> Result<f64, EstimatorError>
where
    F: Fn(&[usize]) -> Result<f64, EstimatorError> + Sync,
{
    if replicates < 2 {
        return Err(EstimatorError::BootstrapTooFew(replicates));
    }
    let psis: Result<Vec<f64>, EstimatorError> = (0..replicates as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, Stream::Bootstrap, b));
            let mut indices: Vec<usize> = Vec::with_capacity(n);
            for attempt in 0..=10 {
                indices.clear();
                indices.extend((0..n).map(|_| rng.gen_range(0..n)));
                if !needs_positive || indices.iter().any(|&i| delta[i] == 1) {
                    break;
                }
                if attempt == 10 {
                    return Err(EstimatorError::BootstrapDegenerate {
                        replicate: b as usize,
                    });
                }
            }
            replicate_psi(&indices)
        })
        .collect();
    Ok(sample_sd(&psis?))
}

/// Two-step targeted estimate from a pre-built nuisance table.
///
/// Exposed separately from [`htmle`] so callers can inject modified tables
/// (for example a forced density ratio in robustness experiments).
pub fn htmle_from_table(
    dataset: &TwoPartDataset,
    scaler: &OutcomeScaler,
    table: &NuisanceTable,
    config: &EstimatorConfig,
) -> Result<EstimateReport, EstimatorError> {
    let n = dataset.n();
    let (eps_m, m_nat_t, m_shift_t) = tilt_m(table, dataset, scaler, config.tilt_tol)?;
    let (eps_q, q_nat_t, q_shift_t) = tilt_q(table, &m_nat_t, dataset, config.tilt_tol)?;

    let psi_scaled = (0..n).map(|i| q_shift_t[i] * m_shift_t[i]).sum::<f64>() / n as f64;
    let psi_hat = scaler.unscale_value(psi_scaled);

    let tilted_table = NuisanceTable::from_parts(
        table.r_hat().to_vec(),
        q_nat_t,
        q_shift_t,
        m_nat_t,
        m_shift_t,
    )?;
    let eif_values = eif(&tilted_table, dataset, scaler, psi_hat);

    let std_err = match config.variance {
        VarianceMethod::Eif => variance_eif(&eif_values).0,
        VarianceMethod::Bootstrap { replicates } => bootstrap_std_err(
            n,
            dataset.delta(),
            replicates,
            config.seed,
            true,
            |indices| htmle_plugin_for_indices(dataset, scaler, table, indices, config.tilt_tol),
        )?,
    };

    let diagnostics = diagnostics_from(
        dataset,
        scaler,
        table.r_hat(),
        &eif_values,
        table.flags().all_converged(),
        Vec::new(),
    );
    Ok(finish_report(
        EstimatorKind::Htmle,
        psi_hat,
        std_err,
        Some(eps_m),
        Some(eps_q),
        None,
        config.variance,
        eif_values,
        diagnostics,
    ))
}

/// Fit the two-step targeted estimator end to end.
pub fn htmle(
    dataset: &TwoPartDataset,
    policy: &Policy,
    plan: &CrossFitPlan,
    config: &EstimatorConfig,
) -> Result<EstimateReport, EstimatorError> {
    let scaler = OutcomeScaler::fit(dataset.y(), dataset.delta(), config.pad)?;
    let table = fit_nuisance_table(plan, dataset, &scaler, policy, &config.nuisance)?;
    htmle_from_table(dataset, &scaler, &table, config)
}

/// Standard TMLE from pre-fit components: one tilt of the combined outcome
/// regression with weights `r̂`, then the plug-in at the shifted treatment.
pub fn tmle_from_parts(
    dataset: &TwoPartDataset,
    scaler: &OutcomeScaler,
    r_hat: &[f64],
    mbar_nat: &[f64],
    mbar_shift: &[f64],
    nuisance_converged: bool,
    config: &EstimatorConfig,
) -> Result<EstimateReport, EstimatorError> {
    let n = dataset.n();
    let (y_scaled, _) = scaler.scale_all(dataset.y());
    let eps = solve_single_tilt(&y_scaled, r_hat, mbar_nat, config.tilt_tol)?;
    let mbar_nat_t = tilted(mbar_nat, eps);
    let mbar_shift_t = tilted(mbar_shift, eps);

    let psi_scaled = mean(&mbar_shift_t);
    let psi_hat = scaler.unscale_value(psi_scaled);
    let upper = scaler.upper();
    let eif_values: Vec<f64> = (0..n)
        .map(|i| {
            r_hat[i] * (dataset.y()[i] - upper * mbar_nat_t[i]) + upper * mbar_shift_t[i] - psi_hat
        })
        .collect();

    let std_err = match config.variance {
        VarianceMethod::Eif => variance_eif(&eif_values).0,
        VarianceMethod::Bootstrap { replicates } => bootstrap_std_err(
            n,
            dataset.delta(),
            replicates,
            config.seed,
            true,
            |indices| {
                let y_b: Vec<f64> = indices.iter().map(|&i| y_scaled[i]).collect();
                let r_b: Vec<f64> = indices.iter().map(|&i| r_hat[i]).collect();
                let nat_b: Vec<f64> = indices.iter().map(|&i| mbar_nat[i]).collect();
                let shift_b: Vec<f64> = indices.iter().map(|&i| mbar_shift[i]).collect();
                let eps_b = solve_single_tilt(&y_b, &r_b, &nat_b, config.tilt_tol)?;
                Ok(scaler.unscale_value(mean(&tilted(&shift_b, eps_b))))
            },
        )?,
    };

    let diagnostics = diagnostics_from(
        dataset,
        scaler,
        r_hat,
        &eif_values,
        nuisance_converged,
        Vec::new(),
    );
    Ok(finish_report(
        EstimatorKind::Tmle,
        psi_hat,
        std_err,
        None,
        None,
        Some(eps),
        config.variance,
        eif_values,
        diagnostics,
    ))
}

fn solve_single_tilt(
    y_scaled: &[f64],
    r_hat: &[f64],
    mbar_nat: &[f64],
    tol: f64,
) -> Result<f64, EstimatorError> {
    let offset: Vec<f64> = mbar_nat.iter().map(|&m| logit(m)).collect();
    if r_hat.iter().sum::<f64>() <= 0.0 {
        return Err(EstimatorError::ZeroTiltWeight { which: "combined" });
    }
    let fit = fit_intercept_logistic(y_scaled, &offset, r_hat, tol).map_err(|source| {
        EstimatorError::Tilt {
            which: "combined",
            source,
        }
    })?;
    Ok(fit.epsilon)
}

/// Standard TMLE end to end.
pub fn tmle_standard(
    dataset: &TwoPartDataset,
    policy: &Policy,
    plan: &CrossFitPlan,
    config: &EstimatorConfig,
) -> Result<EstimateReport, EstimatorError> {
    let scaler = OutcomeScaler::fit(dataset.y(), dataset.delta(), config.pad)?;
    let (r_hat, r_flags) = fit_ratio(plan, dataset, policy, &config.nuisance)?;
    let (mbar_nat, mbar_shift, m_flags) =
        fit_combined_regression(plan, dataset, &scaler, policy, &config.nuisance)?;
    let converged =
        r_flags.iter().all(|f| f.converged) && m_flags.iter().all(|f| f.converged);
    tmle_from_parts(dataset, &scaler, &r_hat, &mbar_nat, &mbar_shift, converged, config)
}

/// One-step AIPW estimate from pre-fit components:
/// `ψ̂ = n⁻¹ Σ [r̂·(Y − m̄) + m̄ᵈ]` with the combined outcome regression.
pub fn aipw_from_parts(
    dataset: &TwoPartDataset,
    scaler: &OutcomeScaler,
    r_hat: &[f64],
    mbar_nat: &[f64],
    mbar_shift: &[f64],
    nuisance_converged: bool,
    config: &EstimatorConfig,
) -> Result<EstimateReport, EstimatorError> {
    let n = dataset.n();
    let upper = scaler.upper();
    let contributions: Vec<f64> = (0..n)
        .map(|i| r_hat[i] * (dataset.y()[i] - upper * mbar_nat[i]) + upper * mbar_shift[i])
        .collect();
    let psi_hat = mean(&contributions);
    let eif_values: Vec<f64> = contributions.iter().map(|c| c - psi_hat).collect();

    let std_err = match config.variance {
        VarianceMethod::Eif => variance_eif(&eif_values).0,
        VarianceMethod::Bootstrap { replicates } => bootstrap_std_err(
            n,
            dataset.delta(),
            replicates,
            config.seed,
            false,
            |indices| Ok(mean(&indices.iter().map(|&i| contributions[i]).collect::<Vec<_>>())),
        )?,
    };

    let mut warnings = Vec::new();
    if psi_hat < 0.0 {
        warnings.push(format!(
            "estimate {psi_hat:.6} is negative; the one-step correction is not a substitution estimator"
        ));
    }
    let diagnostics = diagnostics_from(
        dataset,
        scaler,
        r_hat,
        &eif_values,
        nuisance_converged,
        warnings,
    );
    Ok(finish_report(
        EstimatorKind::Aipw,
        psi_hat,
        std_err,
        None,
        None,
        None,
        config.variance,
        eif_values,
        diagnostics,
    ))
}

/// One-step AIPW end to end.
pub fn aipw(
    dataset: &TwoPartDataset,
    policy: &Policy,
    plan: &CrossFitPlan,
    config: &EstimatorConfig,
) -> Result<EstimateReport, EstimatorError> {
    let scaler = OutcomeScaler::fit(dataset.y(), dataset.delta(), config.pad)?;
    let (r_hat, r_flags) = fit_ratio(plan, dataset, policy, &config.nuisance)?;
    let (mbar_nat, mbar_shift, m_flags) =
        fit_combined_regression(plan, dataset, &scaler, policy, &config.nuisance)?;
    let converged =
        r_flags.iter().all(|f| f.converged) && m_flags.iter().all(|f| f.converged);
    aipw_from_parts(dataset, &scaler, &r_hat, &mbar_nat, &mbar_shift, converged, config)
}

/// Fit several estimators on one dataset, sharing the scaler, the density
/// ratio, and (between TMLE and AIPW) the combined outcome regression.
pub fn run_all(
    dataset: &TwoPartDataset,
    policy: &Policy,
    plan: &CrossFitPlan,
    config: &EstimatorConfig,
    kinds: &[EstimatorKind],
) -> Vec<(EstimatorKind, Result<EstimateReport, crate::Error>)> {
    let shared = (|| -> Result<_, crate::Error> {
        let scaler = OutcomeScaler::fit(dataset.y(), dataset.delta(), config.pad)
            .map_err(crate::Error::Data)?;
        let (r_hat, r_flags) =
            fit_ratio(plan, dataset, policy, &config.nuisance).map_err(crate::Error::Nuisance)?;
        Ok((scaler, r_hat, r_flags))
    })();
    let (scaler, r_hat, r_flags) = match shared {
        Ok(parts) => parts,
        Err(e) => {
            let msg = e.to_string();
            return kinds
                .iter()
                .map(|&kind| {
                    (
                        kind,
                        Err(crate::Error::Estimator(EstimatorError::Nuisance(
                            NuisanceError::InvalidTable(msg.clone()),
                        ))),
                    )
                })
                .collect();
        }
    };
    let r_converged = r_flags.iter().all(|f| f.converged);

    let needs_combined = kinds
        .iter()
        .any(|k| matches!(k, EstimatorKind::Tmle | EstimatorKind::Aipw));
    let combined = if needs_combined {
        Some(fit_combined_regression(plan, dataset, &scaler, policy, &config.nuisance))
    } else {
        None
    };

    kinds
        .iter()
        .map(|&kind| {
            let result = match kind {
                EstimatorKind::Htmle => (|| {
                    let (m_nat, m_shift, m_flags) =
                        fit_m(plan, dataset, &scaler, policy, &config.nuisance)?;
                    let (q_nat, q_shift, q_flags) =
                        fit_q(plan, dataset, policy, &config.nuisance)?;
                    let table = NuisanceTable::from_parts(
                        r_hat.clone(),
                        q_nat,
                        q_shift,
                        m_nat,
                        m_shift,
                    )?;
                    let report = htmle_from_table(dataset, &scaler, &table, config)?;
                    let converged = r_converged
                        && m_flags.iter().all(|f| f.converged)
                        && q_flags.iter().all(|f| f.converged);
                    Ok(EstimateReport {
                        diagnostics: Diagnostics {
                            nuisance_converged: converged,
                            ..report.diagnostics
                        },
                        ..report
                    })
                })()
                .map_err(wrap_estimator_error),
                EstimatorKind::Tmle | EstimatorKind::Aipw => match combined.as_ref() {
                    Some(Ok((mbar_nat, mbar_shift, m_flags))) => {
                        let converged = r_converged && m_flags.iter().all(|f| f.converged);
                        let fit = if kind == EstimatorKind::Tmle {
                            tmle_from_parts(
                                dataset, &scaler, &r_hat, mbar_nat, mbar_shift, converged, config,
                            )
                        } else {
                            aipw_from_parts(
                                dataset, &scaler, &r_hat, mbar_nat, mbar_shift, converged, config,
                            )
                        };
                        fit.map_err(crate::Error::Estimator)
                    }
                    Some(Err(e)) => Err(crate::Error::Estimator(EstimatorError::Nuisance(
                        NuisanceError::InvalidTable(e.to_string()),
                    ))),
                    None => unreachable!("combined regression fit when needed"),
                },
            };
            (kind, result)
        })
        .collect()
}

fn wrap_estimator_error(e: EstimatorErrorOrNuisance) -> crate::Error {
    match e {
        EstimatorErrorOrNuisance::Estimator(e) => crate::Error::Estimator(e),
        EstimatorErrorOrNuisance::Nuisance(e) => crate::Error::Nuisance(e),
    }
}

enum EstimatorErrorOrNuisance {
    Estimator(EstimatorError),
    Nuisance(NuisanceError),
}

impl From<EstimatorError> for EstimatorErrorOrNuisance {
    fn from(e: EstimatorError) -> Self {
        Self::Estimator(e)
    }
}

impl From<NuisanceError> for EstimatorErrorOrNuisance {
    fn from(e: NuisanceError) -> Self {
        Self::Nuisance(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::decompose;
    use crate::sim::{self, DgmConfig};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dgm(n: usize, seed: u64) -> TwoPartDataset {
        sim::generate(&DgmConfig {
            n,
            beta_p: 0.0,
            alpha_delta: 0.0,
            seed,
        })
    }

    fn scaler_for(dataset: &TwoPartDataset) -> OutcomeScaler {
        let (delta, _) = decompose(dataset.y()).unwrap();
        OutcomeScaler::fit(dataset.y(), &delta, 0.001).unwrap()
    }

    #[test]
    fn eif_hand_computed_observation() {
        let x = DMatrix::zeros(2, 1);
        let dataset = TwoPartDataset::new(x, vec![1.0, 0.0], vec![3.0, 50.0]).unwrap();
        let scaler = scaler_for(&dataset);
        let upper = scaler.upper();
        let table = NuisanceTable::from_parts(
            vec![2.0, 1.0],
            vec![0.5, 0.5],
            vec![0.6, 0.5],
            vec![4.0 / upper, 0.5],
            vec![5.0 / upper, 0.5],
        )
        .unwrap();
        let d = eif(&table, &dataset, &scaler, 1.0);
        // 2·(3 − 0.5·4) + 0.6·5 − 1 = 4
        assert_relative_eq!(d[0], 4.0, epsilon = 1e-12);
        let d_alt = eif_alt(&table, &dataset, &scaler, 1.0);
        assert_relative_eq!(d_alt[0], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn eif_mean_is_zero_under_identity_cancellation() {
        // With q_shift = q_nat and m_shift = m_nat, the q·m terms cancel and
        // mean(D) = mean(Y) − ψ for any nuisance values and r ≡ 1.
        let dataset = dgm(500, 1);
        let scaler = scaler_for(&dataset);
        let n = dataset.n();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q: Vec<f64> = (0..n).map(|_| 0.05 + 0.9 * rng.gen::<f64>()).collect();
        let m: Vec<f64> = (0..n).map(|_| 0.05 + 0.9 * rng.gen::<f64>()).collect();
        let table =
            NuisanceTable::from_parts(vec![1.0; n], q.clone(), q, m.clone(), m).unwrap();
        let psi = dataset.y().iter().sum::<f64>() / n as f64;
        let d = eif(&table, &dataset, &scaler, psi);
        let mean_d = d.iter().sum::<f64>() / n as f64;
        assert!(mean_d.abs() < 1e-12, "mean eif {mean_d}");
    }

    #[test]
    fn eif_forms_agree_on_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = 20;
            let y: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < 0.4 {
                        0.0
                    } else {
                        rng.gen::<f64>() * 180.0
                    }
                })
                .collect();
            let mut y = y;
            y[0] = 200.0; // anchor the scaler
            let dataset = TwoPartDataset::new(DMatrix::zeros(n, 1), vec![0.0; n], y).unwrap();
            let scaler = scaler_for(&dataset);
            let interior = |rng: &mut ChaCha8Rng| 0.01 + 0.98 * rng.gen::<f64>();
            let table = NuisanceTable::from_parts(
                (0..n).map(|_| rng.gen::<f64>() * 5.0).collect(),
                (0..n).map(|_| interior(&mut rng)).collect(),
                (0..n).map(|_| interior(&mut rng)).collect(),
                (0..n).map(|_| interior(&mut rng)).collect(),
                (0..n).map(|_| interior(&mut rng)).collect(),
            )
            .unwrap();
            let psi = rng.gen::<f64>() * 50.0;
            let a = eif(&table, &dataset, &scaler, psi);
            let b = eif_alt(&table, &dataset, &scaler, psi);
            for (ai, bi) in a.iter().zip(&b) {
                assert!((ai - bi).abs() < 1e-12, "forms differ: {ai} vs {bi}");
            }
        }
    }

    #[test]
    fn tilt_m_fixed_point_is_zero() {
        let n = 50;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m: Vec<f64> = (0..n).map(|_| 0.1 + 0.8 * rng.gen::<f64>()).collect();
        let delta = vec![1u8; n];
        let r = vec![1.0; n];
        // Response equal to the offset-scale fit: score is zero at ε = 0.
        let (eps, _, _) = solve_tilt_m(&m, &delta, &r, &m, &m, 1e-12).unwrap();
        assert_eq!(eps, 0.0);
    }

    #[test]
    fn tilt_m_closed_form_with_constant_offset() {
        let y_scaled = vec![0.2, 0.4, 0.6, 0.8];
        let delta = vec![1u8; 4];
        let r = vec![3.0; 4];
        let m = vec![0.3; 4];
        let (eps, m_t, _) = solve_tilt_m(&y_scaled, &delta, &r, &m, &m, 1e-12).unwrap();
        let expected = logit(0.5) - logit(0.3);
        assert_relative_eq!(eps, expected, epsilon = 1e-9);
        assert_relative_eq!(m_t[0], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn tilt_q_closed_form_with_constant_weights() {
        let delta = vec![1u8, 0, 1, 1];
        let r = vec![2.0; 4];
        let m_t = vec![0.5; 4];
        let q = vec![0.4; 4];
        let (eps, q_t, _) = solve_tilt_q(&delta, &r, &m_t, &q, &q, 1e-12).unwrap();
        let expected = logit(0.75) - logit(0.4);
        assert_relative_eq!(eps, expected, epsilon = 1e-9);
        assert_relative_eq!(q_t[0], 0.75, epsilon = 1e-9);
    }

    #[test]
    fn post_tilt_scores_are_solved_on_generated_data() {
        let dataset = dgm(1000, 21);
        let scaler = scaler_for(&dataset);
        let plan = CrossFitPlan::new(dataset.n(), 10, 22).unwrap();
        let policy = Policy::static_value(1.0);
        let table = fit_nuisance_table(
            &plan,
            &dataset,
            &scaler,
            &policy,
            &NuisanceConfig::default(),
        )
        .unwrap();
        let (eps_m, m_nat_t, _) = tilt_m(&table, &dataset, &scaler, 1e-9).unwrap();
        let (y_scaled, _) = scaler.scale_all(dataset.y());
        let score_m: f64 = (0..dataset.n())
            .filter(|&i| dataset.delta()[i] == 1)
            .map(|i| table.r_hat()[i] * (y_scaled[i] - m_nat_t[i]))
            .sum();
        assert!(score_m.abs() < 1e-6, "m score {score_m} (eps_m {eps_m})");

        let (eps_q, q_nat_t, _) = tilt_q(&table, &m_nat_t, &dataset, 1e-9).unwrap();
        let score_q: f64 = (0..dataset.n())
            .map(|i| {
                table.r_hat()[i]
                    * m_nat_t[i]
                    * (f64::from(dataset.delta()[i]) - q_nat_t[i])
            })
            .sum();
        assert!(score_q.abs() < 1e-6, "q score {score_q} (eps_q {eps_q})");
    }

    #[test]
    fn identity_policy_reduces_to_sample_mean() {
        let dataset = dgm(400, 31);
        let plan = CrossFitPlan::new(dataset.n(), 4, 32).unwrap();
        let policy = Policy::identity();
        let config = EstimatorConfig::default();
        let sample_mean = dataset.y().iter().sum::<f64>() / dataset.n() as f64;

        let h = htmle(&dataset, &policy, &plan, &config).unwrap();
        assert!(
            (h.psi_hat - sample_mean).abs() < 1e-8,
            "htmle {} vs mean {}",
            h.psi_hat,
            sample_mean
        );
        let t = tmle_standard(&dataset, &policy, &plan, &config).unwrap();
        assert!((t.psi_hat - sample_mean).abs() < 1e-8);
        let a = aipw(&dataset, &policy, &plan, &config).unwrap();
        assert!(
            (a.psi_hat - sample_mean).abs() < 1e-12 * sample_mean.max(1.0),
            "aipw {} vs mean {}",
            a.psi_hat,
            sample_mean
        );
    }

    #[test]
    fn tilted_values_stay_in_unit_interval_and_psi_in_range() {
        let dataset = dgm(600, 41);
        let scaler = scaler_for(&dataset);
        let plan = CrossFitPlan::new(dataset.n(), 5, 42).unwrap();
        let policy = Policy::static_value(1.0);
        let table = fit_nuisance_table(
            &plan,
            &dataset,
            &scaler,
            &policy,
            &NuisanceConfig::default(),
        )
        .unwrap();
        let report =
            htmle_from_table(&dataset, &scaler, &table, &EstimatorConfig::default()).unwrap();
        assert!(report.psi_hat >= 0.0 && report.psi_hat <= scaler.upper());
        assert!(report.ci_low <= report.psi_hat && report.psi_hat <= report.ci_high);
        let (_, m_t, m_ts) = tilt_m(&table, &dataset, &scaler, 1e-9).unwrap();
        assert!(m_t.iter().chain(&m_ts).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn variance_eif_matches_known_sd() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma = 2.5;
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let g: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                sigma * g
            })
            .collect();
        let (se, flag) = variance_eif(&values);
        assert!(!flag);
        let expected = sigma / (n as f64).sqrt();
        assert!(
            (se - expected).abs() / expected < 0.01,
            "se {se}, expected {expected}"
        );
    }

    #[test]
    fn variance_eif_constant_input_flags_zero() {
        let (se, flag) = variance_eif(&[3.0; 50]);
        assert_eq!(se, 0.0);
        assert!(flag);
    }

    #[test]
    fn variance_eif_scales_with_sqrt_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base: Vec<f64> = (0..5_000).map(|_| rng.gen::<f64>()).collect();
        let (se1, _) = variance_eif(&base);
        let quadrupled: Vec<f64> = base.iter().cycle().take(20_000).copied().collect();
        let (se2, _) = variance_eif(&quadrupled);
        assert!(
            (se1 / se2 - 2.0).abs() < 0.01,
            "ratio {} should be ~2",
            se1 / se2
        );
    }

    #[test]
    fn bootstrap_is_deterministic_and_degenerate_resamples_have_zero_sd() {
        let dataset = dgm(300, 51);
        let scaler = scaler_for(&dataset);
        let plan = CrossFitPlan::new(dataset.n(), 3, 52).unwrap();
        let table = fit_nuisance_table(
            &plan,
            &dataset,
            &scaler,
            &Policy::static_value(1.0),
            &NuisanceConfig::default(),
        )
        .unwrap();
        let config = EstimatorConfig {
            variance: VarianceMethod::Bootstrap { replicates: 25 },
            seed: 77,
            ..EstimatorConfig::default()
        };
        let a = htmle_from_table(&dataset, &scaler, &table, &config).unwrap();
        let b = htmle_from_table(&dataset, &scaler, &table, &config).unwrap();
        assert_eq!(a.std_err, b.std_err);

        // Identical index multisets give identical replicate estimates.
        let indices: Vec<usize> = (0..dataset.n()).map(|i| (7 * i + 3) % dataset.n()).collect();
        let p1 = htmle_plugin_for_indices(&dataset, &scaler, &table, &indices, 1e-9).unwrap();
        let p2 = htmle_plugin_for_indices(&dataset, &scaler, &table, &indices, 1e-9).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(sample_sd(&[p1, p2]), 0.0);
    }

    #[test]
    fn bootstrap_rejects_single_replicate() {
        let dataset = dgm(100, 61);
        let scaler = scaler_for(&dataset);
        let plan = CrossFitPlan::new(dataset.n(), 3, 62).unwrap();
        let table = fit_nuisance_table(
            &plan,
            &dataset,
            &scaler,
            &Policy::static_value(1.0),
            &NuisanceConfig::default(),
        )
        .unwrap();
        let config = EstimatorConfig {
            variance: VarianceMethod::Bootstrap { replicates: 1 },
            ..EstimatorConfig::default()
        };
        assert!(matches!(
            htmle_from_table(&dataset, &scaler, &table, &config),
            Err(EstimatorError::BootstrapTooFew(1))
        ));
    }

    #[test]
    fn aipw_reports_negative_estimate_with_warning() {
        let n = 4;
        let dataset = TwoPartDataset::new(
            DMatrix::zeros(n, 1),
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0.0, 10.0, 0.0, 0.5],
        )
        .unwrap();
        let scaler = scaler_for(&dataset);
        // Large ratio on a zero-outcome observation drags the mean negative.
        let r = vec![0.0, 0.0, 30.0, 0.0];
        let mbar = vec![0.5, 0.5, 0.5, 0.5];
        let report = aipw_from_parts(
            &dataset,
            &scaler,
            &r,
            &mbar,
            &mbar,
            true,
            &EstimatorConfig::default(),
        )
        .unwrap();
        assert!(report.psi_hat < 0.0);
        assert!(report
            .diagnostics
            .warnings
            .iter()
            .any(|w| w.contains("negative")));
        // One-step construction: the influence-function mean is exactly zero.
        let mean_eif = report.eif_values.iter().sum::<f64>() / n as f64;
        assert!(mean_eif.abs() < 1e-12);
    }

    #[test]
    fn report_serializes_and_renders() {
        let dataset = dgm(200, 71);
        let plan = CrossFitPlan::new(dataset.n(), 4, 72).unwrap();
        let report = htmle(
            &dataset,
            &Policy::static_value(1.0),
            &plan,
            &EstimatorConfig::default(),
        )
        .unwrap();
        let json = report.to_json();
        assert!(json.contains("\"method\":\"htmle\""));
        assert!(json.contains("\"psi_hat\""));
        let row = report.table_row();
        assert!(row.starts_with("htmle"));
        assert_eq!(
            EstimateReport::table_header().split_whitespace().count(),
            row.split_whitespace().count()
        );
    }

    #[test]
    fn run_all_shares_components_and_returns_each_kind() {
        let dataset = dgm(400, 81);
        let plan = CrossFitPlan::new(dataset.n(), 4, 82).unwrap();
        let results = run_all(
            &dataset,
            &Policy::static_value(1.0),
            &plan,
            &EstimatorConfig::default(),
            &[EstimatorKind::Htmle, EstimatorKind::Tmle, EstimatorKind::Aipw],
        );
        assert_eq!(results.len(), 3);
        for (kind, result) in &results {
            let report = result.as_ref().unwrap_or_else(|e| panic!("{kind} failed: {e}"));
            assert_eq!(report.method, *kind);
            assert!(report.psi_hat.is_finite());
        }
        // TMLE and AIPW share r and the combined regression, so their EIFs
        // differ only through the tilt.
        let tmle_report = results[1].1.as_ref().unwrap();
        let aipw_report = results[2].1.as_ref().unwrap();
        assert_eq!(
            tmle_report.diagnostics.max_r_hat,
            aipw_report.diagnostics.max_r_hat
        );
    }
}
