//! Cross-fitting orchestration for the nuisance parameters: the density
//! ratio `r`, the positive-outcome probability `q`, and the positive-part
//! mean `m`, each predicted at the natural and policy-shifted treatment.
//!
//! Every entry of a [`NuisanceTable`] built with `J ≥ 2` folds is an
//! out-of-fold prediction: the model that produced it never saw that
//! observation. Randomized policies draw their `ε` once per observation
//! from the policy seed, so the shifted treatments used for density-ratio
//! stacking and for `q`/`m` shifted predictions are the same draws.

use crate::data::{OutcomeScaler, TwoPartDataset};
use crate::learners::{
    clip_probability, cv_select, fit_glm, Basis, Family, GlmSpec, LearnerError, Loss,
};
use crate::policy::{Policy, PolicyError};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Errors from plan construction and nuisance fitting.
#[derive(Debug, Error)]
pub enum NuisanceError {
    #[error("cannot split {n} observations into {j} folds")]
    TooManyFolds { j: usize, n: usize },
    #[error("{j} folds requested; need at least 2 (or use the explicit no-crossfit plan)")]
    TooFewFolds { j: usize },
    #[error("plan covers {plan_n} observations but the dataset has {data_n}")]
    PlanSizeMismatch { plan_n: usize, data_n: usize },
    #[error("training fold {fold} has {count} positive outcomes; needs at least {needed} to fit the intensity model")]
    InsufficientPositives {
        fold: usize,
        count: usize,
        needed: usize,
    },
    #[error("training fold {fold} has a single outcome class; cannot fit the hurdle probability")]
    SingleClassFold { fold: usize },
    #[error("analytic density ratio requested for a policy without one")]
    AnalyticRatioUnavailable,
    #[error("nuisance table: {0}")]
    InvalidTable(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// A partition of `0..n` into J validation folds.
///
/// With `J ≥ 2` the training set for fold `j` is the complement of the
/// validation set. The single-fold plan from [`CrossFitPlan::no_crossfit`]
/// trains and predicts on the full sample.
#[derive(Debug, Clone)]
pub struct CrossFitPlan {
    folds: Vec<Vec<usize>>,
    fold_of: Vec<usize>,
    crossfit: bool,
}

impl CrossFitPlan {
    /// Shuffle indices with the given seed and deal them into `j` folds
    /// whose sizes differ by at most one.
    pub fn new(n: usize, j: usize, seed: u64) -> Result<Self, NuisanceError> {
        if j < 2 {
            return Err(NuisanceError::TooFewFolds { j });
        }
        if j > n {
            return Err(NuisanceError::TooManyFolds { j, n });
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);

        let base = n / j;
        let extra = n % j;
        let mut folds = Vec::with_capacity(j);
        let mut start = 0;
        for fold in 0..j {
            let size = base + usize::from(fold < extra);
            folds.push(order[start..start + size].to_vec());
            start += size;
        }
        let mut fold_of = vec![0usize; n];
        for (fold, members) in folds.iter().enumerate() {
            for &i in members {
                fold_of[i] = fold;
            }
        }
        Ok(Self {
            folds,
            fold_of,
            crossfit: true,
        })
    }

    /// Single-fold plan: every observation is predicted by a model trained
    /// on the full sample. Only for callers that explicitly opt out of
    /// cross-fitting.
    pub fn no_crossfit(n: usize) -> Result<Self, NuisanceError> {
        if n == 0 {
            return Err(NuisanceError::TooManyFolds { j: 1, n: 0 });
        }
        Ok(Self {
            folds: vec![(0..n).collect()],
            fold_of: vec![0; n],
            crossfit: false,
        })
    }

    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    pub fn n_folds(&self) -> usize {
        self.folds.len()
    }

    pub fn is_crossfit(&self) -> bool {
        self.crossfit
    }

    /// Validation indices for fold `j`.
    pub fn validation_set(&self, j: usize) -> &[usize] {
        &self.folds[j]
    }

    /// Training indices for fold `j`: the complement of the validation set,
    /// or the full sample for a no-crossfit plan.
    pub fn training_set(&self, j: usize) -> Vec<usize> {
        if !self.crossfit {
            return (0..self.n()).collect();
        }
        (0..self.n()).filter(|&i| self.fold_of[i] != j).collect()
    }

    /// Fold index `j(i)` containing observation `i`.
    pub fn fold_of(&self, i: usize) -> usize {
        self.fold_of[i]
    }
}

/// How the density ratio is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioMethod {
    /// Closed form for IPSI policies, classification otherwise.
    Auto,
    /// Closed form from a cross-fitted propensity model (IPSI only).
    Analytic,
    /// Odds of a natural-vs-shifted classifier.
    Classification,
}

/// Learner candidates and density-ratio options for nuisance fitting.
#[derive(Debug, Clone)]
pub struct NuisanceConfig {
    /// Candidates for the hurdle probability `q` (log loss).
    pub candidates_q: Vec<GlmSpec>,
    /// Candidates for the positive-part mean `m` on the scaled outcome (MSE).
    pub candidates_m: Vec<GlmSpec>,
    /// Candidates for the density-ratio classifier (log loss).
    pub candidates_r: Vec<GlmSpec>,
    /// Candidates for the propensity model behind the analytic IPSI ratio.
    pub candidates_g: Vec<GlmSpec>,
    /// Folds used by the discrete model selector within each training fold.
    pub selector_folds: usize,
    pub ratio: RatioMethod,
    /// Cap on classifier odds; `None` leaves them uncapped.
    pub odds_cap: Option<f64>,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        let logistic_pair = vec![
            GlmSpec::new(Family::BinomialLogit, Basis::MainEffects),
            GlmSpec::new(Family::BinomialLogit, Basis::MainSquares),
        ];
        // The outcome-mean library also offers log-link least squares: on a
        // positive outcome with roughly constant noise variance its mu^2
        // Fisher weighting is the right one, and the selector can still fall
        // back to the fractional-logistic fits for mixture-shaped targets.
        let mut mean_candidates = logistic_pair.clone();
        mean_candidates.push(GlmSpec::new(Family::GaussianLog, Basis::MainEffects));
        mean_candidates.push(GlmSpec::new(Family::GaussianLog, Basis::MainSquares));
        Self {
            candidates_q: logistic_pair.clone(),
            candidates_m: mean_candidates,
            candidates_r: logistic_pair.clone(),
            candidates_g: logistic_pair,
            selector_folds: 5,
            ratio: RatioMethod::Auto,
            odds_cap: Some(1e3),
        }
    }
}

/// Per-fold fit diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct FoldFit {
    pub fold: usize,
    pub converged: bool,
    pub basis: Basis,
}

/// Convergence and selection diagnostics for each nuisance.
#[derive(Debug, Clone, Default)]
pub struct NuisanceFlags {
    pub m: Vec<FoldFit>,
    pub q: Vec<FoldFit>,
    pub r: Vec<FoldFit>,
}

impl NuisanceFlags {
    pub fn all_converged(&self) -> bool {
        self.m
            .iter()
            .chain(&self.q)
            .chain(&self.r)
            .all(|f| f.converged)
    }

    /// Diagnostics as CSV text (`nuisance,fold,converged,basis`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("nuisance,fold,converged,basis\n");
        for (name, fits) in [("m", &self.m), ("q", &self.q), ("r", &self.r)] {
            for f in fits.iter() {
                let basis = match f.basis {
                    Basis::MainEffects => "main",
                    Basis::MainSquares => "main+squares",
                };
                out.push_str(&format!("{name},{},{},{basis}\n", f.fold, f.converged));
            }
        }
        out
    }
}

/// Cross-fitted nuisance predictions for every observation.
///
/// `m` values live on the scaled `(0, 1)` outcome scale; `q` values are
/// probabilities in `(0, 1)` after clipping; `r` is non-negative. Every
/// entry is finite.
#[derive(Debug, Clone)]
pub struct NuisanceTable {
    r_hat: Vec<f64>,
    q_nat: Vec<f64>,
    q_shift: Vec<f64>,
    m_nat: Vec<f64>,
    m_shift: Vec<f64>,
    flags: NuisanceFlags,
}

impl NuisanceTable {
    /// Assemble a table from raw prediction vectors, validating lengths,
    /// ranges, and finiteness.
    pub fn from_parts(
        r_hat: Vec<f64>,
        q_nat: Vec<f64>,
        q_shift: Vec<f64>,
        m_nat: Vec<f64>,
        m_shift: Vec<f64>,
    ) -> Result<Self, NuisanceError> {
        let n = r_hat.len();
        for (name, v) in [
            ("q_nat", &q_nat),
            ("q_shift", &q_shift),
            ("m_nat", &m_nat),
            ("m_shift", &m_shift),
        ] {
            if v.len() != n {
                return Err(NuisanceError::InvalidTable(format!(
                    "{name} has length {}, expected {n}",
                    v.len()
                )));
            }
            if let Some(i) = v.iter().position(|x| !(x.is_finite() && *x > 0.0 && *x < 1.0)) {
                return Err(NuisanceError::InvalidTable(format!(
                    "{name}[{i}] = {} outside (0, 1)",
                    v[i]
                )));
            }
        }
        if let Some(i) = r_hat.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(NuisanceError::InvalidTable(format!(
                "r_hat[{i}] = {} must be finite and non-negative",
                r_hat[i]
            )));
        }
        Ok(Self {
            r_hat,
            q_nat,
            q_shift,
            m_nat,
            m_shift,
            flags: NuisanceFlags::default(),
        })
    }

    /// Replace the density-ratio column (used to study misspecification).
    pub fn with_r_hat(mut self, r_hat: Vec<f64>) -> Result<Self, NuisanceError> {
        if r_hat.len() != self.r_hat.len() {
            return Err(NuisanceError::InvalidTable(format!(
                "replacement r_hat has length {}, expected {}",
                r_hat.len(),
                self.r_hat.len()
            )));
        }
        if let Some(i) = r_hat.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(NuisanceError::InvalidTable(format!(
                "r_hat[{i}] = {} must be finite and non-negative",
                r_hat[i]
            )));
        }
        self.r_hat = r_hat;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.r_hat.len()
    }

    pub fn r_hat(&self) -> &[f64] {
        &self.r_hat
    }

    pub fn q_nat(&self) -> &[f64] {
        &self.q_nat
    }

    pub fn q_shift(&self) -> &[f64] {
        &self.q_shift
    }

    /// Positive-part mean at the natural treatment, scaled scale.
    pub fn m_nat(&self) -> &[f64] {
        &self.m_nat
    }

    /// Positive-part mean at the shifted treatment, scaled scale.
    pub fn m_shift(&self) -> &[f64] {
        &self.m_shift
    }

    pub fn flags(&self) -> &NuisanceFlags {
        &self.flags
    }
}

/// Feature matrix `[t | x]` used by treatment-conditional regressions.
fn treatment_features(t: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = t.len();
    let p = x.ncols();
    DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { t[i] } else { x[(i, j - 1)] })
}

fn gather<T: Copy>(values: &[T], indices: &[usize]) -> Vec<T> {
    indices.iter().map(|&i| values[i]).collect()
}

/// Cross-fitted positive-part mean regression.
///
/// Per fold: select and fit a learner on the training observations with a
/// positive outcome, regressing the scaled outcome on `(T, X)`; predict for
/// the fold's validation rows at the natural and shifted treatment. Both
/// outputs live on the scaled `(0, 1)` scale.
pub fn fit_m(
    plan: &CrossFitPlan,
    dataset: &TwoPartDataset,
    scaler: &OutcomeScaler,
    policy: &Policy,
    config: &NuisanceConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<FoldFit>), NuisanceError> {
    check_plan(plan, dataset)?;
    let n = dataset.n();
    let t_shifted = policy.apply(dataset.t(), dataset.x())?;
    let (y_scaled, _) = scaler.scale_all(dataset.y());
    let needed = dataset.n_covariates() + 2;

    let mut m_nat = vec![f64::NAN; n];
    let mut m_shift = vec![f64::NAN; n];
    let mut flags = Vec::with_capacity(plan.n_folds());
    for fold in 0..plan.n_folds() {
        let train: Vec<usize> = plan
            .training_set(fold)
            .into_iter()
            .filter(|&i| dataset.delta()[i] == 1)
            .collect();
        if train.len() < needed {
            return Err(NuisanceError::InsufficientPositives {
                fold,
                count: train.len(),
                needed,
            });
        }
        let features =
            treatment_features(&gather(dataset.t(), &train), &dataset.x().select_rows(&train));
        let response = gather(&y_scaled, &train);
        let weights = vec![1.0; train.len()];
        let spec = cv_select(
            &config.candidates_m,
            &features,
            &response,
            &weights,
            config.selector_folds,
            Loss::Mse,
        )?;
        let model = fit_glm(&spec, &features, &response, &weights, None)?;
        flags.push(FoldFit {
            fold,
            converged: model.converged(),
            basis: spec.basis,
        });

        let valid = plan.validation_set(fold);
        let x_valid = dataset.x().select_rows(valid);
        let nat =
            model.predict(&treatment_features(&gather(dataset.t(), valid), &x_valid), None)?;
        let shift =
            model.predict(&treatment_features(&gather(&t_shifted, valid), &x_valid), None)?;
        for (k, &i) in valid.iter().enumerate() {
            m_nat[i] = clip_probability(nat[k]);
            m_shift[i] = clip_probability(shift[k]);
        }
    }
    Ok((m_nat, m_shift, flags))
}

/// Cross-fitted hurdle-probability regression of `Δ` on `(T, X)`.
pub fn fit_q(
    plan: &CrossFitPlan,
    dataset: &TwoPartDataset,
    policy: &Policy,
    config: &NuisanceConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<FoldFit>), NuisanceError> {
    check_plan(plan, dataset)?;
    let n = dataset.n();
    let t_shifted = policy.apply(dataset.t(), dataset.x())?;
    let delta_f: Vec<f64> = dataset.delta().iter().map(|&d| f64::from(d)).collect();

    let mut q_nat = vec![f64::NAN; n];
    let mut q_shift = vec![f64::NAN; n];
    let mut flags = Vec::with_capacity(plan.n_folds());
    for fold in 0..plan.n_folds() {
        let train = plan.training_set(fold);
        let positives = train.iter().filter(|&&i| dataset.delta()[i] == 1).count();
        if positives == 0 || positives == train.len() {
            return Err(NuisanceError::SingleClassFold { fold });
        }
        let features =
            treatment_features(&gather(dataset.t(), &train), &dataset.x().select_rows(&train));
        let response = gather(&delta_f, &train);
        let weights = vec![1.0; train.len()];
        let spec = cv_select(
            &config.candidates_q,
            &features,
            &response,
            &weights,
            config.selector_folds,
            Loss::LogLoss,
        )?;
        let model = fit_glm(&spec, &features, &response, &weights, None)?;
        flags.push(FoldFit {
            fold,
            converged: model.converged(),
            basis: spec.basis,
        });

        let valid = plan.validation_set(fold);
        let x_valid = dataset.x().select_rows(valid);
        let nat =
            model.predict(&treatment_features(&gather(dataset.t(), valid), &x_valid), None)?;
        let shift =
            model.predict(&treatment_features(&gather(&t_shifted, valid), &x_valid), None)?;
        for (k, &i) in valid.iter().enumerate() {
            q_nat[i] = nat[k];
            q_shift[i] = shift[k];
        }
    }
    Ok((q_nat, q_shift, flags))
}

/// Cross-fitted density-ratio estimate by classification.
///
/// Per fold, the training rows are stacked twice — once at the natural
/// treatment labeled 0, once at the shifted treatment labeled 1, interleaved
/// pairwise — and a classifier of the label on `(treatment, X)` is fit. The
/// estimate for a validation row is the classifier's odds at the natural
/// treatment, optionally capped.
pub fn fit_r_classification(
    plan: &CrossFitPlan,
    dataset: &TwoPartDataset,
    policy: &Policy,
    config: &NuisanceConfig,
) -> Result<(Vec<f64>, Vec<FoldFit>), NuisanceError> {
    check_plan(plan, dataset)?;
    let n = dataset.n();
    let t_shifted = policy.apply(dataset.t(), dataset.x())?;
    let p = dataset.n_covariates();

    let mut r_hat = vec![f64::NAN; n];
    let mut flags = Vec::with_capacity(plan.n_folds());
    for fold in 0..plan.n_folds() {
        let train = plan.training_set(fold);
        let m = train.len();
        let mut stacked = DMatrix::zeros(2 * m, p + 1);
        let mut labels = Vec::with_capacity(2 * m);
        for (k, &i) in train.iter().enumerate() {
            stacked[(2 * k, 0)] = dataset.t()[i];
            stacked[(2 * k + 1, 0)] = t_shifted[i];
            for j in 0..p {
                let v = dataset.x()[(i, j)];
                stacked[(2 * k, j + 1)] = v;
                stacked[(2 * k + 1, j + 1)] = v;
            }
            labels.push(0.0);
            labels.push(1.0);
        }
        let weights = vec![1.0; 2 * m];
        let spec = cv_select(
            &config.candidates_r,
            &stacked,
            &labels,
            &weights,
            config.selector_folds,
            Loss::LogLoss,
        )?;
        let model = fit_glm(&spec, &stacked, &labels, &weights, None)?;
        flags.push(FoldFit {
            fold,
            converged: model.converged(),
            basis: spec.basis,
        });

        let valid = plan.validation_set(fold);
        let features =
            treatment_features(&gather(dataset.t(), valid), &dataset.x().select_rows(valid));
        let prob = model.predict(&features, None)?;
        for (k, &i) in valid.iter().enumerate() {
            let odds = prob[k] / (1.0 - prob[k]);
            r_hat[i] = match config.odds_cap {
                Some(cap) => odds.min(cap),
                None => odds,
            };
        }
    }
    Ok((r_hat, flags))
}

/// Cross-fitted propensity model `P(T = 1 | X)` for the analytic IPSI ratio.
pub fn fit_propensity(
    plan: &CrossFitPlan,
    dataset: &TwoPartDataset,
    config: &NuisanceConfig,
) -> Result<Vec<f64>, NuisanceError> {
    check_plan(plan, dataset)?;
    let n = dataset.n();
    let mut g_hat = vec![f64::NAN; n];
    for fold in 0..plan.n_folds() {
        let train = plan.training_set(fold);
        let features = dataset.x().select_rows(&train);
        let response = gather(dataset.t(), &train);
        let weights = vec![1.0; train.len()];
        let spec = cv_select(
            &config.candidates_g,
            &features,
            &response,
            &weights,
            config.selector_folds,
            Loss::LogLoss,
        )?;
        let model = fit_glm(&spec, &features, &response, &weights, None)?;
        let valid = plan.validation_set(fold);
        let pred = model.predict(&dataset.x().select_rows(valid), None)?;
        for (k, &i) in valid.iter().enumerate() {
            g_hat[i] = pred[k];
        }
    }
    Ok(g_hat)
}

/// Density ratio by the configured route: analytic for IPSI policies under
/// `Auto`/`Analytic`, classification otherwise.
pub fn fit_ratio(
    plan: &CrossFitPlan,
    dataset: &TwoPartDataset,
    policy: &Policy,
    config: &NuisanceConfig,
) -> Result<(Vec<f64>, Vec<FoldFit>), NuisanceError> {
    let analytic = match config.ratio {
        RatioMethod::Analytic => {
            if !policy.has_analytic_ratio() {
                return Err(NuisanceError::AnalyticRatioUnavailable);
            }
            true
        }
        RatioMethod::Auto => policy.has_analytic_ratio(),
        RatioMethod::Classification => false,
    };
    if analytic {
        let g_hat = fit_propensity(plan, dataset, config)?;
        let r = policy.analytic_ratio(dataset.t(), &g_hat)?;
        Ok((r, Vec::new()))
    } else {
        fit_r_classification(plan, dataset, policy, config)
    }
}

/// Fit the full nuisance table `(r, q, m)` for the two-step estimator.
pub fn fit_nuisance_table(
    plan: &CrossFitPlan,
    dataset: &TwoPartDataset,
    scaler: &OutcomeScaler,
    policy: &Policy,
    config: &NuisanceConfig,
) -> Result<NuisanceTable, NuisanceError> {
    let (m_nat, m_shift, m_flags) = fit_m(plan, dataset, scaler, policy, config)?;
    let (q_nat, q_shift, q_flags) = fit_q(plan, dataset, policy, config)?;
    let (r_hat, r_flags) = fit_ratio(plan, dataset, policy, config)?;
    let mut table = NuisanceTable::from_parts(r_hat, q_nat, q_shift, m_nat, m_shift)?;
    table.flags = NuisanceFlags {
        m: m_flags,
        q: q_flags,
        r: r_flags,
    };
    Ok(table)
}

/// Cross-fitted single outcome regression `E[Y | T, X]` over all
/// observations (zeros included), on the scaled scale. This is the initial
/// estimate for the comparator estimators that ignore two-part structure.
pub fn fit_combined_regression(
    plan: &CrossFitPlan,
    dataset: &TwoPartDataset,
    scaler: &OutcomeScaler,
    policy: &Policy,
    config: &NuisanceConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<FoldFit>), NuisanceError> {
    check_plan(plan, dataset)?;
    let n = dataset.n();
    let t_shifted = policy.apply(dataset.t(), dataset.x())?;
    let (y_scaled, _) = scaler.scale_all(dataset.y());

    let mut nat_out = vec![f64::NAN; n];
    let mut shift_out = vec![f64::NAN; n];
    let mut flags = Vec::with_capacity(plan.n_folds());
    for fold in 0..plan.n_folds() {
        let train = plan.training_set(fold);
        let features =
            treatment_features(&gather(dataset.t(), &train), &dataset.x().select_rows(&train));
        let response = gather(&y_scaled, &train);
        let weights = vec![1.0; train.len()];
        let spec = cv_select(
            &config.candidates_m,
            &features,
            &response,
            &weights,
            config.selector_folds,
            Loss::Mse,
        )?;
        let model = fit_glm(&spec, &features, &response, &weights, None)?;
        flags.push(FoldFit {
            fold,
            converged: model.converged(),
            basis: spec.basis,
        });

        let valid = plan.validation_set(fold);
        let x_valid = dataset.x().select_rows(valid);
        let nat =
            model.predict(&treatment_features(&gather(dataset.t(), valid), &x_valid), None)?;
        let shift =
            model.predict(&treatment_features(&gather(&t_shifted, valid), &x_valid), None)?;
        for (k, &i) in valid.iter().enumerate() {
            nat_out[i] = clip_probability(nat[k]);
            shift_out[i] = clip_probability(shift[k]);
        }
    }
    Ok((nat_out, shift_out, flags))
}

fn check_plan(plan: &CrossFitPlan, dataset: &TwoPartDataset) -> Result<(), NuisanceError> {
    if plan.n() != dataset.n() {
        return Err(NuisanceError::PlanSizeMismatch {
            plan_n: plan.n(),
            data_n: dataset.n(),
        });
    }
    Ok(())
}
