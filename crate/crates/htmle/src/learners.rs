//! Weighted GLMs with offsets, fit by iteratively reweighted least squares,
//! plus a cross-validated discrete selector over candidate specifications.
//!
//! This is the regression toolkit behind every nuisance fit and tilting
//! model: binomial-logit (fractional responses in `[0, 1]` are allowed, so
//! a scaled outcome can be fit with logistic loss), gaussian-identity, and
//! gaussian-log families, each over a main-effects or main-plus-squares
//! basis expansion. Fits are deterministic: coefficients initialize at zero
//! and there is no internal randomness.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Lower/upper clip applied to binomial predictions before any downstream
/// logit transform.
pub const PROB_CLIP: f64 = 1e-5;

/// Errors from GLM fitting, prediction, and selection.
#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("binomial response[{index}] = {value} outside [0, 1]")]
    InvalidResponse { index: usize, value: f64 },
    #[error("total observation weight is zero")]
    ZeroWeight,
    #[error("weights must be non-negative and finite; weight[{index}] = {value}")]
    InvalidWeight { index: usize, value: f64 },
    #[error("normal equations could not be solved (singular design)")]
    SolveFailed,
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error("cross-validation needs at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("no candidate specification could be fit ({tried} tried)")]
    AllCandidatesFailed { tried: usize },
    #[error("tilt solver failed; last (epsilon, score) iterates: {trace:?}")]
    TiltFailed { trace: Vec<(f64, f64)> },
}

/// Response family and link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Family {
    /// Logistic regression; fractional responses in `[0, 1]` allowed.
    BinomialLogit,
    /// Ordinary least squares.
    GaussianIdentity,
    /// Least squares with a log link (positive mean).
    GaussianLog,
}

/// Basis expansion applied to the raw feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Basis {
    /// Intercept plus the raw columns.
    MainEffects,
    /// Intercept, raw columns, and squares of the non-binary columns.
    MainSquares,
}

/// A candidate model specification.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct GlmSpec {
    pub family: Family,
    pub basis: Basis,
    pub ridge: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl GlmSpec {
    pub fn new(family: Family, basis: Basis) -> Self {
        Self {
            family,
            basis,
            ridge: 1e-8,
            max_iter: 100,
            tol: 1e-8,
        }
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    fn validate(&self) -> Result<(), LearnerError> {
        if !(self.tol > 0.0) {
            return Err(LearnerError::BadSpec(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(LearnerError::BadSpec("max_iter must be >= 1".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(LearnerError::BadSpec(format!(
                "ridge must be non-negative and finite, got {}",
                self.ridge
            )));
        }
        Ok(())
    }
}

/// Loss used by [`cv_select`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    LogLoss,
    Mse,
}

/// Which raw columns the fitted basis squared; fixed at fit time so
/// prediction applies the identical expansion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    n_raw: usize,
    squared: Vec<usize>,
}

impl FeatureLayout {
    fn from_features(features: &DMatrix<f64>, basis: Basis) -> Self {
        let squared = match basis {
            Basis::MainEffects => Vec::new(),
            Basis::MainSquares => (0..features.ncols())
                .filter(|&j| {
                    // Squaring a 0/1 column reproduces it; skip those.
                    !features.column(j).iter().all(|&v| v == 0.0 || v == 1.0)
                })
                .collect(),
        };
        Self {
            n_raw: features.ncols(),
            squared,
        }
    }

    fn n_expanded(&self) -> usize {
        1 + self.n_raw + self.squared.len()
    }

    fn expand(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>, LearnerError> {
        if features.ncols() != self.n_raw {
            return Err(LearnerError::DimensionMismatch {
                what: "feature columns",
                expected: self.n_raw,
                got: features.ncols(),
            });
        }
        let n = features.nrows();
        let mut design = DMatrix::zeros(n, self.n_expanded());
        for i in 0..n {
            design[(i, 0)] = 1.0;
            for j in 0..self.n_raw {
                design[(i, 1 + j)] = features[(i, j)];
            }
            for (k, &j) in self.squared.iter().enumerate() {
                let v = features[(i, j)];
                design[(i, 1 + self.n_raw + k)] = v * v;
            }
        }
        Ok(design)
    }
}

/// A fitted GLM: coefficients in expanded-basis space plus everything needed
/// to reproduce predictions.
#[derive(Debug, Clone)]
pub struct FittedModel {
    coefficients: DVector<f64>,
    spec: GlmSpec,
    layout: FeatureLayout,
    converged: bool,
}

impl FittedModel {
    pub fn coefficients(&self) -> &[f64] {
        self.coefficients.as_slice()
    }

    pub fn spec(&self) -> &GlmSpec {
        &self.spec
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Predict on the response scale. Binomial predictions are clipped to
    /// `[PROB_CLIP, 1 − PROB_CLIP]`.
    pub fn predict(
        &self,
        features: &DMatrix<f64>,
        offset: Option<&[f64]>,
    ) -> Result<Vec<f64>, LearnerError> {
        let design = self.layout.expand(features)?;
        if let Some(o) = offset {
            if o.len() != features.nrows() {
                return Err(LearnerError::DimensionMismatch {
                    what: "offset",
                    expected: features.nrows(),
                    got: o.len(),
                });
            }
        }
        let eta = &design * &self.coefficients;
        Ok((0..design.nrows())
            .map(|i| {
                let lin = eta[i] + offset.map_or(0.0, |o| o[i]);
                match self.spec.family {
                    Family::BinomialLogit => clip_probability(expit(lin)),
                    Family::GaussianIdentity => lin,
                    Family::GaussianLog => lin.clamp(-200.0, 200.0).exp(),
                }
            })
            .collect())
    }
}

/// Fit a weighted GLM with an optional offset by IRLS.
///
/// Convergence means the ridge-penalized score is below `spec.tol` in every
/// coordinate; hitting `max_iter` first yields a usable model flagged
/// non-converged rather than an error.
pub fn fit_glm(
    spec: &GlmSpec,
    features: &DMatrix<f64>,
    response: &[f64],
    weights: &[f64],
    offset: Option<&[f64]>,
) -> Result<FittedModel, LearnerError> {
    spec.validate()?;
    let n = features.nrows();
    if response.len() != n {
        return Err(LearnerError::DimensionMismatch {
            what: "response",
            expected: n,
            got: response.len(),
        });
    }
    if weights.len() != n {
        return Err(LearnerError::DimensionMismatch {
            what: "weights",
            expected: n,
            got: weights.len(),
        });
    }
    if let Some(o) = offset {
        if o.len() != n {
            return Err(LearnerError::DimensionMismatch {
                what: "offset",
                expected: n,
                got: o.len(),
            });
        }
        if o.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NonFinite { what: "offset" });
        }
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(LearnerError::NonFinite { what: "features" });
    }
    if response.iter().any(|v| !v.is_finite()) {
        return Err(LearnerError::NonFinite { what: "response" });
    }
    for (i, &w) in weights.iter().enumerate() {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(LearnerError::InvalidWeight { index: i, value: w });
        }
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(LearnerError::ZeroWeight);
    }
    if spec.family == Family::BinomialLogit {
        for (i, &y) in response.iter().enumerate() {
            if !(0.0..=1.0).contains(&y) {
                return Err(LearnerError::InvalidResponse { index: i, value: y });
            }
        }
    }

    let layout = FeatureLayout::from_features(features, spec.basis);
    let design = layout.expand(features)?;
    let p = design.ncols();
    let mut beta: DVector<f64> = DVector::zeros(p);
    let mut converged = false;

    for _ in 0..spec.max_iter {
        let eta_lin = &design * &beta;
        let eta: Vec<f64> = (0..n)
            .map(|i| {
                let lin = eta_lin[i] + offset.map_or(0.0, |o| o[i]);
                if spec.family == Family::GaussianLog {
                    lin.clamp(-200.0, 200.0)
                } else {
                    lin
                }
            })
            .collect();
        let mu: Vec<f64> = eta
            .iter()
            .map(|&e| match spec.family {
                Family::BinomialLogit => expit(e).clamp(1e-10, 1.0 - 1e-10),
                Family::GaussianIdentity => e,
                Family::GaussianLog => e.exp(),
            })
            .collect();

        // Penalized score: X' PW c (y − μ) − ridge β, with c the chain factor.
        let mut score: DVector<f64> = DVector::zeros(p);
        for i in 0..n {
            let c = match spec.family {
                Family::BinomialLogit | Family::GaussianIdentity => 1.0,
                Family::GaussianLog => mu[i],
            };
            let contrib = weights[i] * c * (response[i] - mu[i]);
            for j in 0..p {
                score[j] += design[(i, j)] * contrib;
            }
        }
        for j in 0..p {
            score[j] -= spec.ridge * beta[j];
        }
        if score.amax() < spec.tol {
            converged = true;
            break;
        }

        // Working weights and response for one Fisher-scoring step.
        let mut xtwx: DMatrix<f64> = DMatrix::zeros(p, p);
        let mut xtwz: DVector<f64> = DVector::zeros(p);
        for i in 0..n {
            let (w_irls, z_minus_offset) = match spec.family {
                Family::BinomialLogit => {
                    let v = (mu[i] * (1.0 - mu[i])).max(1e-10);
                    let w = weights[i] * v;
                    let z = eta[i] + (response[i] - mu[i]) / v - offset.map_or(0.0, |o| o[i]);
                    (w, z)
                }
                Family::GaussianIdentity => {
                    (weights[i], response[i] - offset.map_or(0.0, |o| o[i]))
                }
                Family::GaussianLog => {
                    let m = mu[i].max(1e-10);
                    let w = weights[i] * m * m;
                    let z = eta[i] + (response[i] - m) / m - offset.map_or(0.0, |o| o[i]);
                    (w, z)
                }
            };
            if w_irls <= 0.0 {
                continue;
            }
            for j in 0..p {
                let wx = w_irls * design[(i, j)];
                xtwz[j] += wx * z_minus_offset;
                for k in j..p {
                    xtwx[(j, k)] += wx * design[(i, k)];
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                xtwx[(j, k)] = xtwx[(k, j)];
            }
            xtwx[(j, j)] += spec.ridge;
        }
        beta = solve_spd(&xtwx, &xtwz)?;
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::SolveFailed);
        }
    }

    Ok(FittedModel {
        coefficients: beta,
        spec: *spec,
        layout,
        converged,
    })
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, LearnerError> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or(LearnerError::SolveFailed)
}

/// Weighted cross-validated loss per candidate; `None` marks candidates
/// that failed to fit on some fold. Folds are assigned round-robin by row,
/// so the split is deterministic.
pub fn cv_losses(
    candidates: &[GlmSpec],
    features: &DMatrix<f64>,
    response: &[f64],
    weights: &[f64],
    folds: usize,
    loss: Loss,
) -> Result<Vec<Option<f64>>, LearnerError> {
    if folds < 2 {
        return Err(LearnerError::TooFewFolds(folds));
    }
    let n = features.nrows();
    let fold_of: Vec<usize> = (0..n).map(|i| i % folds).collect();
    let mut out = Vec::with_capacity(candidates.len());
    for spec in candidates {
        let mut total_loss = 0.0;
        let mut total_weight = 0.0;
        let mut ok = true;
        for fold in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
            let valid: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
            if train.is_empty() || valid.is_empty() {
                ok = false;
                break;
            }
            let train_x = features.select_rows(&train);
            let train_y: Vec<f64> = train.iter().map(|&i| response[i]).collect();
            let train_w: Vec<f64> = train.iter().map(|&i| weights[i]).collect();
            match fit_glm(spec, &train_x, &train_y, &train_w, None) {
                Ok(model) => {
                    let valid_x = features.select_rows(&valid);
                    match model.predict(&valid_x, None) {
                        Ok(pred) => {
                            for (k, &i) in valid.iter().enumerate() {
                                let w = weights[i];
                                total_weight += w;
                                total_loss += w * pointwise_loss(loss, response[i], pred[k]);
                            }
                        }
                        Err(_) => {
                            ok = false;
                            break;
                        }
                    }
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok && total_weight > 0.0 {
            out.push(Some(total_loss / total_weight));
        } else {
            out.push(None);
        }
    }
    Ok(out)
}

fn pointwise_loss(loss: Loss, y: f64, p: f64) -> f64 {
    match loss {
        Loss::Mse => (y - p) * (y - p),
        Loss::LogLoss => {
            let p = clip_probability(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        }
    }
}

/// Pick the candidate with the smallest cross-validated loss; ties go to the
/// earlier candidate. A single candidate is returned unchanged without any
/// cross-validation.
pub fn cv_select(
    candidates: &[GlmSpec],
    features: &DMatrix<f64>,
    response: &[f64],
    weights: &[f64],
    folds: usize,
    loss: Loss,
) -> Result<GlmSpec, LearnerError> {
    if candidates.is_empty() {
        return Err(LearnerError::AllCandidatesFailed { tried: 0 });
    }
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    let losses = cv_losses(candidates, features, response, weights, folds, loss)?;
    let mut best: Option<(usize, f64)> = None;
    for (idx, l) in losses.iter().enumerate() {
        if let Some(l) = l {
            if best.is_none_or(|(_, b)| *l < b) {
                best = Some((idx, *l));
            }
        }
    }
    match best {
        Some((idx, _)) => Ok(candidates[idx]),
        None => Err(LearnerError::AllCandidatesFailed {
            tried: candidates.len(),
        }),
    }
}

/// Result of an intercept-only logistic tilt.
#[derive(Debug, Clone, Copy)]
pub struct TiltFit {
    pub epsilon: f64,
    pub iterations: usize,
}

/// Solve the one-dimensional tilting score
/// `Σ w_i (y_i − expit(ε + o_i)) = 0` for `ε`.
///
/// Newton steps (this is IRLS specialized to an intercept-only model) with a
/// golden-section fallback on the weighted log-loss over `[-10, 10]`; if
/// neither drives the score below `tol`, the error carries the last
/// `(ε, score)` iterates.
pub fn fit_intercept_logistic(
    response: &[f64],
    offset: &[f64],
    weights: &[f64],
    tol: f64,
) -> Result<TiltFit, LearnerError> {
    let n = response.len();
    if offset.len() != n {
        return Err(LearnerError::DimensionMismatch {
            what: "offset",
            expected: n,
            got: offset.len(),
        });
    }
    if weights.len() != n {
        return Err(LearnerError::DimensionMismatch {
            what: "weights",
            expected: n,
            got: weights.len(),
        });
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(LearnerError::ZeroWeight);
    }

    let score_and_info = |eps: f64| -> (f64, f64) {
        let mut score = 0.0;
        let mut info = 0.0;
        for i in 0..n {
            let p = expit(eps + offset[i]);
            score += weights[i] * (response[i] - p);
            info += weights[i] * (p * (1.0 - p)).max(1e-12);
        }
        (score, info)
    };

    let mut trace: Vec<(f64, f64)> = Vec::new();
    let mut eps = 0.0;
    for iter in 0..100 {
        let (score, info) = score_and_info(eps);
        trace.push((eps, score));
        if score.abs() < tol {
            return Ok(TiltFit {
                epsilon: eps,
                iterations: iter,
            });
        }
        if info <= 0.0 {
            break;
        }
        let step = (score / info).clamp(-5.0, 5.0);
        eps += step;
    }

    // Golden-section on the weighted log-loss over [-10, 10]; the loss is
    // convex in ε, so the minimizer is the score root when it lies inside.
    let loss = |eps: f64| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let p = clip_probability(expit(eps + offset[i]));
            total -= weights[i] * (response[i] * p.ln() + (1.0 - response[i]) * (1.0 - p).ln());
        }
        total
    };
    let golden: f64 = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (-10.0f64, 10.0f64);
    let mut c = b - golden * (b - a);
    let mut d = a + golden * (b - a);
    let (mut fc, mut fd) = (loss(c), loss(d));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - golden * (b - a);
            fc = loss(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + golden * (b - a);
            fd = loss(d);
        }
        if (b - a).abs() < 1e-13 {
            break;
        }
    }
    eps = 0.5 * (a + b);
    // Polish with a few Newton steps from the golden-section point.
    for iter in 0..50 {
        let (score, info) = score_and_info(eps);
        trace.push((eps, score));
        if score.abs() < tol {
            return Ok(TiltFit {
                epsilon: eps,
                iterations: 100 + iter,
            });
        }
        if info <= 0.0 {
            break;
        }
        eps += (score / info).clamp(-5.0, 5.0);
    }
    let start = trace.len().saturating_sub(8);
    Err(LearnerError::TiltFailed {
        trace: trace[start..].to_vec(),
    })
}

/// Inverse logit.
pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Log-odds; callers must pass p strictly inside (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Clip a probability into `[PROB_CLIP, 1 − PROB_CLIP]`.
pub fn clip_probability(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}
