//! Hypothetical interventions on the treatment.
//!
//! A policy maps each observation's natural treatment value `t` and
//! covariates `x` (and, for randomized policies, a uniform draw `ε`) to a
//! shifted treatment value. Policies are immutable value objects;
//! [`Policy::apply`] is pure given the policy seed, so the same policy
//! applied to the same data always produces the same shifted treatments.

use crate::seed::{derive, Stream};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Errors from policy construction, application, or parsing.
#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("IPSI risk ratio must lie in (0, 1], got {0}")]
    InvalidRiskRatio(f64),
    #[error("IPSI policies require a binary treatment; t[{index}] = {value}")]
    NonBinaryTreatment { index: usize, value: f64 },
    #[error("per-observation shift cap has length {cap_len}, treatment has length {t_len}")]
    CapLengthMismatch { cap_len: usize, t_len: usize },
    #[error("dynamic policy covariate index {index} out of range for {p} covariates")]
    CovariateOutOfRange { index: usize, p: usize },
    #[error("propensity value g[{index}] = {value} violates positivity (must be in (0, 1))")]
    PropensityOutOfRange { index: usize, value: f64 },
    #[error("propensity vector has length {g_len}, treatment has length {t_len}")]
    PropensityLengthMismatch { g_len: usize, t_len: usize },
    #[error("analytic density ratio is only defined for IPSI policies")]
    AnalyticRatioUnsupported,
    #[error("covariate matrix has {x_rows} rows, treatment has length {t_len}")]
    RowMismatch { x_rows: usize, t_len: usize },
    #[error("cannot parse policy '{input}': {reason}")]
    Parse { input: String, reason: String },
    #[error("unknown covariate '{name}' in policy (available: {available})")]
    UnknownCovariate { name: String, available: String },
}

/// Upper bound `u(x)` for an additive shift.
#[derive(Debug, Clone, PartialEq)]
pub enum ShiftCap {
    /// Shift is always feasible.
    None,
    /// A single bound shared by all observations.
    Constant(f64),
    /// Caller-supplied per-observation bounds (must match the data length).
    PerObservation(Vec<f64>),
}

impl ShiftCap {
    fn value_at(&self, i: usize) -> f64 {
        match self {
            ShiftCap::None => f64::INFINITY,
            ShiftCap::Constant(c) => *c,
            ShiftCap::PerObservation(v) => v[i],
        }
    }
}

/// The intervention function itself.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    /// Leave treatment as observed (null intervention).
    Identity,
    /// Assign the same value to everyone.
    Static(f64),
    /// Assign `hi` when `x[covariate] > threshold`, else `lo`.
    DynamicThreshold {
        covariate: usize,
        threshold: f64,
        hi: f64,
        lo: f64,
    },
    /// Add `delta` wherever the result stays at or below the cap; otherwise
    /// keep the natural value.
    AdditiveShift { delta: f64, cap: ShiftCap },
    /// Keep treatment with probability `delta`, otherwise withhold it.
    IpsiDown { delta: f64 },
    /// Keep treatment with probability `delta`, otherwise assign it.
    IpsiUp { delta: f64 },
}

/// An intervention plus the seed for its randomizer stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    kind: PolicyKind,
    seed: u64,
    smooth_invertible: bool,
}

impl Policy {
    /// Build a policy; the seed only matters for randomized (IPSI) kinds.
    pub fn new(kind: PolicyKind, seed: u64) -> Result<Self, PolicyError> {
        if let PolicyKind::IpsiDown { delta } | PolicyKind::IpsiUp { delta } = &kind {
            if !(*delta > 0.0 && *delta <= 1.0) {
                return Err(PolicyError::InvalidRiskRatio(*delta));
            }
        }
        Ok(Self {
            kind,
            seed,
            smooth_invertible: false,
        })
    }

    pub fn identity() -> Self {
        Self::new(PolicyKind::Identity, 0).expect("identity is always valid")
    }

    pub fn static_value(value: f64) -> Self {
        Self::new(PolicyKind::Static(value), 0).expect("static is always valid")
    }

    /// Caller's assertion that the policy is piecewise smooth and invertible
    /// in `t` (relevant for continuous treatments). Documentation only; no
    /// behavior depends on it.
    pub fn assert_smooth_invertible(mut self) -> Self {
        self.smooth_invertible = true;
        self
    }

    /// Same intervention with a different randomizer seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn kind(&self) -> &PolicyKind {
        &self.kind
    }

    pub fn is_smooth_invertible(&self) -> bool {
        self.smooth_invertible
    }

    /// Whether the policy draws a randomizer `ε` per observation.
    pub fn is_randomized(&self) -> bool {
        matches!(
            self.kind,
            PolicyKind::IpsiDown { .. } | PolicyKind::IpsiUp { .. }
        )
    }

    /// Whether [`Policy::analytic_ratio`] is available.
    pub fn has_analytic_ratio(&self) -> bool {
        self.is_randomized()
    }

    /// Compute the shifted treatment for every observation.
    ///
    /// Randomized policies draw one `ε_i ~ U(0,1)` per observation from a
    /// stream seeded by the policy seed, so results are reproducible given
    /// (seed, data order).
    pub fn apply(&self, t: &[f64], x: &DMatrix<f64>) -> Result<Vec<f64>, PolicyError> {
        if x.nrows() != t.len() {
            return Err(PolicyError::RowMismatch {
                x_rows: x.nrows(),
                t_len: t.len(),
            });
        }
        match &self.kind {
            PolicyKind::Identity => Ok(t.to_vec()),
            PolicyKind::Static(value) => Ok(vec![*value; t.len()]),
            PolicyKind::DynamicThreshold {
                covariate,
                threshold,
                hi,
                lo,
            } => {
                if *covariate >= x.ncols() {
                    return Err(PolicyError::CovariateOutOfRange {
                        index: *covariate,
                        p: x.ncols(),
                    });
                }
                Ok((0..t.len())
                    .map(|i| if x[(i, *covariate)] > *threshold { *hi } else { *lo })
                    .collect())
            }
            PolicyKind::AdditiveShift { delta, cap } => {
                if let ShiftCap::PerObservation(v) = cap {
                    if v.len() != t.len() {
                        return Err(PolicyError::CapLengthMismatch {
                            cap_len: v.len(),
                            t_len: t.len(),
                        });
                    }
                }
                Ok(t.iter()
                    .enumerate()
                    .map(|(i, &ti)| {
                        let shifted = ti + delta;
                        if shifted <= cap.value_at(i) {
                            shifted
                        } else {
                            ti
                        }
                    })
                    .collect())
            }
            PolicyKind::IpsiDown { delta } => {
                check_binary(t)?;
                let eps = self.epsilon_draws(t.len());
                Ok(t.iter()
                    .zip(&eps)
                    .map(|(&ti, &e)| if e < *delta { ti } else { 0.0 })
                    .collect())
            }
            PolicyKind::IpsiUp { delta } => {
                check_binary(t)?;
                let eps = self.epsilon_draws(t.len());
                Ok(t.iter()
                    .zip(&eps)
                    .map(|(&ti, &e)| if e < *delta { ti } else { 1.0 })
                    .collect())
            }
        }
    }

    /// Closed-form density ratio `g^d(T, X) / g(T, X)` for IPSI policies,
    /// given estimated propensity values `g_hat[i] = P(T=1 | X_i)`.
    pub fn analytic_ratio(&self, t: &[f64], g_hat: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let delta = match &self.kind {
            PolicyKind::IpsiDown { delta } | PolicyKind::IpsiUp { delta } => *delta,
            _ => return Err(PolicyError::AnalyticRatioUnsupported),
        };
        if g_hat.len() != t.len() {
            return Err(PolicyError::PropensityLengthMismatch {
                g_len: g_hat.len(),
                t_len: t.len(),
            });
        }
        check_binary(t)?;
        for (i, &g) in g_hat.iter().enumerate() {
            if !(g > 0.0 && g < 1.0) {
                return Err(PolicyError::PropensityOutOfRange { index: i, value: g });
            }
        }
        let down = matches!(self.kind, PolicyKind::IpsiDown { .. });
        Ok(t.iter()
            .zip(g_hat)
            .map(|(&ti, &g1)| {
                if down {
                    // g^d(t,x) = t·δ·g(1,x) + (1−t)·(1 − δ·g(1,x))
                    if ti == 1.0 {
                        delta
                    } else {
                        (1.0 - delta * g1) / (1.0 - g1)
                    }
                } else {
                    // g^d(t,x) = t·(1 − δ·g(0,x)) + (1−t)·δ·g(0,x)
                    let g0 = 1.0 - g1;
                    if ti == 1.0 {
                        (1.0 - delta * g0) / g1
                    } else {
                        delta
                    }
                }
            })
            .collect())
    }

    fn epsilon_draws(&self, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(self.seed, Stream::PolicyEpsilon, 0));
        (0..n).map(|_| rng.gen::<f64>()).collect()
    }
}

fn check_binary(t: &[f64]) -> Result<(), PolicyError> {
    for (i, &v) in t.iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(PolicyError::NonBinaryTreatment { index: i, value: v });
        }
    }
    Ok(())
}

/// A parsed policy description whose data references (covariate names, cap
/// columns) are not yet resolved against a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Identity,
    Static(f64),
    Dynamic {
        covariate: String,
        threshold: f64,
        hi: f64,
        lo: f64,
    },
    Shift {
        delta: f64,
        cap: CapSpec,
    },
    IpsiDown(f64),
    IpsiUp(f64),
}

/// Cap reference inside a parsed `shift:` policy.
#[derive(Debug, Clone, PartialEq)]
pub enum CapSpec {
    None,
    Constant(f64),
    Column(String),
}

impl PolicySpec {
    /// Parse the CLI policy mini-language:
    ///
    /// `identity` | `static:1` | `shift:+2` | `shift:+2,cap=5` |
    /// `shift:+2,cap=col:u` | `ipsi-down:0.5` | `ipsi-up:0.5` |
    /// `dynamic:x3>0.2?1:0`
    pub fn parse(input: &str) -> Result<Self, PolicyError> {
        let fail = |reason: &str| PolicyError::Parse {
            input: input.to_string(),
            reason: reason.to_string(),
        };
        let trimmed = input.trim();
        if trimmed == "identity" {
            return Ok(PolicySpec::Identity);
        }
        let (head, rest) = trimmed
            .split_once(':')
            .ok_or_else(|| fail("expected '<kind>:<args>'"))?;
        match head {
            "static" => {
                let value: f64 = rest.parse().map_err(|_| fail("static value must be numeric"))?;
                Ok(PolicySpec::Static(value))
            }
            "ipsi-down" | "ipsi-up" => {
                let delta: f64 = rest.parse().map_err(|_| fail("risk ratio must be numeric"))?;
                if !(delta > 0.0 && delta <= 1.0) {
                    return Err(PolicyError::InvalidRiskRatio(delta));
                }
                if head == "ipsi-down" {
                    Ok(PolicySpec::IpsiDown(delta))
                } else {
                    Ok(PolicySpec::IpsiUp(delta))
                }
            }
            "shift" => {
                let mut parts = rest.split(',');
                let delta_str = parts.next().ok_or_else(|| fail("missing shift amount"))?;
                let delta: f64 = delta_str
                    .parse()
                    .map_err(|_| fail("shift amount must be numeric (e.g. +2 or -1.5)"))?;
                let mut cap = CapSpec::None;
                for part in parts {
                    let (key, value) = part
                        .split_once('=')
                        .ok_or_else(|| fail("shift options look like cap=<value>"))?;
                    if key != "cap" {
                        return Err(fail(&format!("unknown shift option '{key}'")));
                    }
                    cap = if let Some(col) = value.strip_prefix("col:") {
                        CapSpec::Column(col.to_string())
                    } else {
                        CapSpec::Constant(
                            value.parse().map_err(|_| fail("cap must be numeric or col:<name>"))?,
                        )
                    };
                }
                Ok(PolicySpec::Shift { delta, cap })
            }
            "dynamic" => {
                // form: <covariate><cmp><threshold>?<hi>:<lo>, cmp is '>'
                let (cond, branches) = rest
                    .split_once('?')
                    .ok_or_else(|| fail("dynamic policy needs '<cov>><thr>?<hi>:<lo>'"))?;
                let (cov, thr) = cond
                    .split_once('>')
                    .ok_or_else(|| fail("dynamic condition must use '>'"))?;
                let threshold: f64 = thr.parse().map_err(|_| fail("threshold must be numeric"))?;
                let (hi_s, lo_s) = branches
                    .split_once(':')
                    .ok_or_else(|| fail("dynamic branches look like '<hi>:<lo>'"))?;
                let hi: f64 = hi_s.parse().map_err(|_| fail("hi branch must be numeric"))?;
                let lo: f64 = lo_s.parse().map_err(|_| fail("lo branch must be numeric"))?;
                Ok(PolicySpec::Dynamic {
                    covariate: cov.trim().to_string(),
                    threshold,
                    hi,
                    lo,
                })
            }
            other => Err(fail(&format!("unknown policy kind '{other}'"))),
        }
    }

    /// Resolve names against the modeling covariates (for `dynamic`) and an
    /// optional column source (for `shift` caps) to produce a [`Policy`].
    pub fn resolve(
        &self,
        covariate_names: &[String],
        column_lookup: impl Fn(&str) -> Option<Vec<f64>>,
        seed: u64,
    ) -> Result<Policy, PolicyError> {
        let kind = match self {
            PolicySpec::Identity => PolicyKind::Identity,
            PolicySpec::Static(v) => PolicyKind::Static(*v),
            PolicySpec::IpsiDown(d) => PolicyKind::IpsiDown { delta: *d },
            PolicySpec::IpsiUp(d) => PolicyKind::IpsiUp { delta: *d },
            PolicySpec::Dynamic {
                covariate,
                threshold,
                hi,
                lo,
            } => {
                let index = covariate_names
                    .iter()
                    .position(|n| n == covariate)
                    .ok_or_else(|| PolicyError::UnknownCovariate {
                        name: covariate.clone(),
                        available: covariate_names.join(", "),
                    })?;
                PolicyKind::DynamicThreshold {
                    covariate: index,
                    threshold: *threshold,
                    hi: *hi,
                    lo: *lo,
                }
            }
            PolicySpec::Shift { delta, cap } => {
                let cap = match cap {
                    CapSpec::None => ShiftCap::None,
                    CapSpec::Constant(c) => ShiftCap::Constant(*c),
                    CapSpec::Column(name) => {
                        let values =
                            column_lookup(name).ok_or_else(|| PolicyError::UnknownCovariate {
                                name: name.clone(),
                                available: "columns of the loaded data".to_string(),
                            })?;
                        ShiftCap::PerObservation(values)
                    }
                };
                PolicyKind::AdditiveShift { delta: *delta, cap }
            }
        };
        Policy::new(kind, seed)
    }
}
