//! Synthetic data generator and Monte Carlo study harness.
//!
//! The generator draws four standard-normal covariates, a binary treatment
//! whose propensity is controlled by `beta_p`, a zero/positive indicator
//! whose frequency is controlled by `alpha_delta`, and a positive part with
//! a log-linear mean plus unit-mean exponential noise. The same closed
//! forms double as truth oracles: [`true_psi`] integrates
//! `q(T^d, X) · m(T^d, X)` by Monte Carlo, and [`run_study`] aggregates
//! bias, variance, MSE, and CI coverage across replicated fits.

use crate::data::TwoPartDataset;
use crate::estimators::{run_all, EstimatorConfig, EstimatorKind};
use crate::learners::expit;
use crate::nuisance::CrossFitPlan;
use crate::policy::{Policy, PolicyError};
use crate::seed::{derive, Stream};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

/// Errors from the oracle and the study harness.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("oracle draws must be positive")]
    NoOracleDraws,
    #[error("a study needs at least 2 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("a study needs at least one estimator")]
    NoEstimators,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgmConfig {
    pub n: usize,
    /// Propensity intercept; strongly negative values make treated units
    /// rare against covariate patterns, stressing positivity.
    pub beta_p: f64,
    /// Hurdle intercept; controls the frequency of zero outcomes.
    pub alpha_delta: f64,
    pub seed: u64,
}

/// True treatment propensity `P(T = 1 | X = x)`.
pub fn true_propensity(beta_p: f64, x: &[f64; 4]) -> f64 {
    expit(beta_p - x[0] + 0.5 * x[1] - 0.25 * x[2] - 0.1 * x[3])
}

/// True hurdle probability `P(Δ = 1 | T = t, X = x)`.
pub fn true_hurdle_probability(alpha_delta: f64, t: f64, x: &[f64; 4]) -> f64 {
    expit(alpha_delta - 0.4 * x[0] * x[0] + 0.1 * x[1] + 0.8 * x[2] - 0.3 * x[3] + 2.0 * t)
}

/// True positive-part mean `E[S | T = t, X = x]`; the exponential noise has
/// unit mean, hence the `+ 1`.
pub fn true_positive_mean(t: f64, x: &[f64; 4]) -> f64 {
    (0.1 + 0.2 * x[0] + 0.4 * x[1] + 0.8 * x[2] + 0.3 * x[3] + 2.0 * t).exp() + 1.0
}

/// Draw a standard-normal 4-vector (exposed for truth oracles in tests).
pub fn draw_standard_normal_4<R: Rng>(rng: &mut R) -> [f64; 4] {
    [
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ]
}

/// Generate a dataset; bit-reproducible given the config.
pub fn generate(config: &DgmConfig) -> TwoPartDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(config.seed, Stream::DataGen, 0));
    let n = config.n;
    let mut x = DMatrix::zeros(n, 4);
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let xi = draw_standard_normal_4(&mut rng);
        for j in 0..4 {
            x[(i, j)] = xi[j];
        }
        let ti = f64::from(rng.gen::<f64>() < true_propensity(config.beta_p, &xi));
        let positive = rng.gen::<f64>() < true_hurdle_probability(config.alpha_delta, ti, &xi);
        let noise: f64 = Exp1.sample(&mut rng);
        let s = (true_positive_mean(ti, &xi) - 1.0) + noise;
        t.push(ti);
        y.push(if positive { s } else { 0.0 });
    }
    TwoPartDataset::new(x, t, y).expect("generator produces valid datasets")
}

/// Monte Carlo truth for `ψ = E[q(T^d, X) · m(T^d, X)]` under the generator,
/// using the closed-form hurdle probability and positive-part mean.
pub fn true_psi(
    policy: &Policy,
    beta_p: f64,
    alpha_delta: f64,
    n_oracle: usize,
    seed: u64,
) -> Result<f64, SimError> {
    if n_oracle == 0 {
        return Err(SimError::NoOracleDraws);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, Stream::Oracle, 0));
    let chunk = 100_000usize;
    let mut total = 0.0;
    let mut done = 0usize;
    let mut chunk_index = 0u64;
    while done < n_oracle {
        let m = chunk.min(n_oracle - done);
        let mut x = DMatrix::zeros(m, 4);
        let mut t = Vec::with_capacity(m);
        let mut xs = Vec::with_capacity(m);
        for i in 0..m {
            let xi = draw_standard_normal_4(&mut rng);
            for j in 0..4 {
                x[(i, j)] = xi[j];
            }
            t.push(f64::from(rng.gen::<f64>() < true_propensity(beta_p, &xi)));
            xs.push(xi);
        }
        // Fresh randomizer stream per chunk so IPSI draws are not recycled.
        let chunk_policy = policy.clone().with_seed(derive(seed, Stream::Oracle, 1 + chunk_index));
        let t_shifted = chunk_policy.apply(&t, &x)?;
        for i in 0..m {
            total += true_hurdle_probability(alpha_delta, t_shifted[i], &xs[i])
                * true_positive_mean(t_shifted[i], &xs[i]);
        }
        done += m;
        chunk_index += 1;
    }
    Ok(total / n_oracle as f64)
}

/// One scenario of the study grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyScenario {
    pub n: usize,
    pub beta_p: f64,
    pub alpha_delta: f64,
}

/// Study-level knobs.
#[derive(Debug, Clone)]
pub struct StudySettings {
    pub replicates: usize,
    pub folds: usize,
    pub base_seed: u64,
    /// Draws used for the truth oracle.
    pub oracle_draws: usize,
    pub estimator: EstimatorConfig,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            replicates: 1000,
            folds: 10,
            base_seed: 1,
            oracle_draws: 10_000_000,
            estimator: EstimatorConfig::default(),
        }
    }
}

/// Aggregated metrics for one estimator within one scenario.
#[derive(Debug, Clone)]
pub struct EstimatorMetrics {
    pub estimator: EstimatorKind,
    pub abs_bias: f64,
    pub mc_variance: f64,
    pub mse: f64,
    pub coverage: f64,
    /// Replicates whose fit failed; excluded from the metrics above.
    pub failures: usize,
}

/// Study output for one scenario.
#[derive(Debug, Clone)]
pub struct StudyResult {
    pub scenario: StudyScenario,
    pub psi_true: f64,
    pub replicates: usize,
    pub metrics: Vec<EstimatorMetrics>,
}

/// Run one replicate: generate data, build the cross-fit plan, and fit the
/// requested estimators with shared nuisance components.
pub fn run_replicate(
    scenario: &StudyScenario,
    policy: &Policy,
    estimators: &[EstimatorKind],
    settings: &StudySettings,
    replicate: u64,
) -> Vec<(EstimatorKind, Result<crate::estimators::EstimateReport, crate::Error>)> {
    let data_seed = derive(settings.base_seed, Stream::DataGen, replicate);
    let plan_seed = derive(settings.base_seed, Stream::FoldSplit, replicate);
    let dataset = generate(&DgmConfig {
        n: scenario.n,
        beta_p: scenario.beta_p,
        alpha_delta: scenario.alpha_delta,
        seed: data_seed,
    });
    let plan = match CrossFitPlan::new(scenario.n, settings.folds, plan_seed) {
        Ok(plan) => plan,
        Err(e) => {
            let msg = crate::Error::from(e);
            return estimators
                .iter()
                .map(|&kind| (kind, Err(clone_error(&msg))))
                .collect();
        }
    };
    let mut config = settings.estimator.clone();
    config.seed = derive(settings.base_seed, Stream::Bootstrap, replicate);
    run_all(&dataset, policy, &plan, &config, estimators)
}

// Errors are not Clone; replicate bookkeeping only needs the message.
fn clone_error(e: &crate::Error) -> crate::Error {
    crate::Error::Sim(SimError::Policy(PolicyError::Parse {
        input: String::new(),
        reason: e.to_string(),
    }))
}

/// Run the full grid: `replicates` fresh datasets per scenario, each fit by
/// every requested estimator, aggregated against the Monte Carlo truth.
/// Estimator failures are excluded from the metrics and surfaced in the
/// per-estimator failure count.
pub fn run_study(
    scenarios: &[StudyScenario],
    estimators: &[EstimatorKind],
    policy: &Policy,
    settings: &StudySettings,
) -> Result<Vec<StudyResult>, SimError> {
    if settings.replicates < 2 {
        return Err(SimError::TooFewReplicates(settings.replicates));
    }
    if estimators.is_empty() {
        return Err(SimError::NoEstimators);
    }
    let mut results = Vec::with_capacity(scenarios.len());
    for (scenario_idx, scenario) in scenarios.iter().enumerate() {
        let psi_true = true_psi(
            policy,
            scenario.beta_p,
            scenario.alpha_delta,
            settings.oracle_draws,
            derive(settings.base_seed, Stream::Oracle, scenario_idx as u64),
        )?;

        let replicate_outputs: Vec<_> = (0..settings.replicates as u64)
            .into_par_iter()
            .map(|b| {
                let replicate = ((scenario_idx as u64) << 32) | b;
                run_replicate(scenario, policy, estimators, settings, replicate)
            })
            .collect();

        let metrics = estimators
            .iter()
            .map(|&kind| {
                let mut psis = Vec::new();
                let mut covered = 0usize;
                let mut failures = 0usize;
                for outputs in &replicate_outputs {
                    match outputs.iter().find(|(k, _)| *k == kind) {
                        Some((_, Ok(report))) => {
                            psis.push(report.psi_hat);
                            if report.ci_low <= psi_true && psi_true <= report.ci_high {
                                covered += 1;
                            }
                        }
                        _ => failures += 1,
                    }
                }
                let r = psis.len().max(1) as f64;
                let mean = psis.iter().sum::<f64>() / r;
                let mc_variance = if psis.len() > 1 {
                    psis.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (r - 1.0)
                } else {
                    0.0
                };
                let mse = psis.iter().map(|p| (p - psi_true).powi(2)).sum::<f64>() / r;
                EstimatorMetrics {
                    estimator: kind,
                    abs_bias: (mean - psi_true).abs(),
                    mc_variance,
                    mse,
                    coverage: covered as f64 / psis.len().max(1) as f64,
                    failures,
                }
            })
            .collect();

        results.push(StudyResult {
            scenario: *scenario,
            psi_true,
            replicates: settings.replicates,
            metrics,
        });
    }
    Ok(results)
}

/// Study results as CSV text.
pub fn study_to_csv(results: &[StudyResult]) -> String {
    let mut out = String::from(
        "n,beta_p,alpha_delta,psi_true,replicates,estimator,abs_bias,mc_variance,mse,coverage,failures\n",
    );
    for result in results {
        for m in &result.metrics {
            out.push_str(&format!(
                "{},{},{},{:.6},{},{},{:.6},{:.6},{:.6},{:.4},{}\n",
                result.scenario.n,
                result.scenario.beta_p,
                result.scenario.alpha_delta,
                result.psi_true,
                result.replicates,
                m.estimator,
                m.abs_bias,
                m.mc_variance,
                m.mse,
                m.coverage,
                m.failures,
            ));
        }
    }
    out
}

/// Study results as a text table: one block per `alpha_delta`, metric rows
/// grouped by sample size, one column per (estimator, `beta_p`) pair.
pub fn study_to_table(results: &[StudyResult]) -> String {
    let mut alphas: Vec<f64> = results.iter().map(|r| r.scenario.alpha_delta).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();

    let mut out = String::new();
    for alpha in alphas {
        let block: Vec<&StudyResult> = results
            .iter()
            .filter(|r| r.scenario.alpha_delta == alpha)
            .collect();
        let mut columns: Vec<(EstimatorKind, f64)> = Vec::new();
        for r in &block {
            for m in &r.metrics {
                if !columns.contains(&(m.estimator, r.scenario.beta_p)) {
                    columns.push((m.estimator, r.scenario.beta_p));
                }
            }
        }
        let mut sizes: Vec<usize> = block.iter().map(|r| r.scenario.n).collect();
        sizes.sort_unstable();
        sizes.dedup();

        out.push_str(&format!(
            "alpha_delta = {alpha} (psi_true per scenario in CSV output)\n"
        ));
        out.push_str(&format!("{:>6} {:>10}", "n", "metric"));
        for (kind, beta_p) in &columns {
            out.push_str(&format!(" {:>16}", format!("{kind} b={beta_p}")));
        }
        out.push('\n');
        for n in sizes {
            for (metric_idx, metric_name) in
                ["|bias|", "var", "mse", "coverage"].iter().enumerate()
            {
                out.push_str(&format!("{n:>6} {metric_name:>10}"));
                for (kind, beta_p) in &columns {
                    let cell = block
                        .iter()
                        .find(|r| r.scenario.n == n && r.scenario.beta_p == *beta_p)
                        .and_then(|r| r.metrics.iter().find(|m| m.estimator == *kind))
                        .map(|m| match metric_idx {
                            0 => m.abs_bias,
                            1 => m.mc_variance,
                            2 => m.mse,
                            _ => m.coverage,
                        });
                    match cell {
                        Some(v) => out.push_str(&format!(" {v:>16.3}")),
                        None => out.push_str(&format!(" {:>16}", "-")),
                    }
                }
                out.push('\n');
            }
        }
        out.push('\n');
    }
    out
}
