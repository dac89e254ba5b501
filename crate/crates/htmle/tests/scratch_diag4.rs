//! Temporary diagnostics: pooled vs treatment-arm-stratified intensity fits.

use htmle::data::{decompose, OutcomeScaler, TwoPartDataset};
use htmle::estimators::{htmle_from_table, EstimatorConfig};
use htmle::learners::{clip_probability, cv_select, fit_glm, Basis, Family, GlmSpec, Loss};
use htmle::nuisance::{fit_q, fit_ratio, CrossFitPlan, NuisanceTable};
use htmle::policy::Policy;
use htmle::sim::{generate, DgmConfig};
use nalgebra::DMatrix;
use rayon::prelude::*;

fn var(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (
        m,
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64,
    )
}

// Cross-fitted per-arm intensity fit: within each training fold, fit the
// positive-outcome rows of each treatment arm separately (features x only),
// predict the natural arm's surface and the t=1 surface.
fn fit_m_by_arm(
    plan: &CrossFitPlan,
    dataset: &TwoPartDataset,
    scaler: &OutcomeScaler,
    candidates: &[GlmSpec],
) -> (Vec<f64>, Vec<f64>) {
    let n = dataset.n();
    let (y_scaled, _) = scaler.scale_all(dataset.y());
    let mut m_nat = vec![f64::NAN; n];
    let mut m_shift = vec![f64::NAN; n];
    for fold in 0..plan.n_folds() {
        let train = plan.training_set(fold);
        let mut models = Vec::new();
        for arm in [0.0, 1.0] {
            let rows: Vec<usize> = train
                .iter()
                .copied()
                .filter(|&i| dataset.delta()[i] == 1 && dataset.t()[i] == arm)
                .collect();
            let features = dataset.x().select_rows(&rows);
            let response: Vec<f64> = rows.iter().map(|&i| y_scaled[i]).collect();
            let weights = vec![1.0; rows.len()];
            let spec =
                cv_select(candidates, &features, &response, &weights, 5, Loss::Mse).unwrap();
            models.push(fit_glm(&spec, &features, &response, &weights, None).unwrap());
        }
        let valid = plan.validation_set(fold);
        let x_valid: DMatrix<f64> = dataset.x().select_rows(valid);
        let pred0 = models[0].predict(&x_valid, None).unwrap();
        let pred1 = models[1].predict(&x_valid, None).unwrap();
        for (k, &i) in valid.iter().enumerate() {
            let nat = if dataset.t()[i] == 1.0 { pred1[k] } else { pred0[k] };
            m_nat[i] = clip_probability(nat);
            m_shift[i] = clip_probability(pred1[k]);
        }
    }
    (m_nat, m_shift)
}

#[test]
#[ignore]
fn diag_by_arm_intensity() {
    let mut config = EstimatorConfig::default();
    config.nuisance.odds_cap = None;
    let policy = Policy::static_value(1.0);

    let variants: Vec<(&str, Vec<GlmSpec>)> = vec![
        (
            "per-arm gauss-log main",
            vec![GlmSpec::new(Family::GaussianLog, Basis::MainEffects)],
        ),
        (
            "per-arm gauss-log cv{main,sq}",
            vec![
                GlmSpec::new(Family::GaussianLog, Basis::MainEffects),
                GlmSpec::new(Family::GaussianLog, Basis::MainSquares),
            ],
        ),
    ];
    for (beta_p, scen) in [(-3.0, "severe"), (0.0, "benign")] {
        for (name, cands) in &variants {
            let psis: Vec<f64> = (0..50u64)
                .into_par_iter()
                .map(|b| {
                    let n = 1000;
                    let dataset = generate(&DgmConfig {
                        n,
                        beta_p,
                        alpha_delta: 0.0,
                        seed: 40_000 + b,
                    });
                    let (delta, _) = decompose(dataset.y()).unwrap();
                    let scaler = OutcomeScaler::fit(dataset.y(), &delta, 0.001).unwrap();
                    let plan = CrossFitPlan::new(n, 10, 50_000 + b).unwrap();
                    let (r_hat, _) =
                        fit_ratio(&plan, &dataset, &policy, &config.nuisance).unwrap();
                    let (q_nat, q_shift, _) =
                        fit_q(&plan, &dataset, &policy, &config.nuisance).unwrap();
                    let (m_nat, m_shift) = fit_m_by_arm(&plan, &dataset, &scaler, cands);
                    let table =
                        NuisanceTable::from_parts(r_hat, q_nat, q_shift, m_nat, m_shift).unwrap();
                    htmle_from_table(&dataset, &scaler, &table, &config)
                        .unwrap()
                        .psi_hat
                })
                .collect();
            let (mean, v) = var(&psis);
            println!("{scen} {name}: mean {mean:.3} var {v:.3}");
        }
    }
}
