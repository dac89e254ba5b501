//! Temporary diagnostics for the severe-positivity scenario (not a test of
//! record; remove before release).

use htmle::data::{decompose, OutcomeScaler};
use htmle::estimators::{run_all, EstimatorConfig, EstimatorKind};
use htmle::nuisance::{fit_nuisance_table, CrossFitPlan};
use htmle::policy::Policy;
use htmle::sim::{generate, DgmConfig};
use rayon::prelude::*;

#[test]
#[ignore]
fn diag_severe_positivity() {
    let mut config = EstimatorConfig::default();
    config.nuisance.odds_cap = None;
    let policy = Policy::static_value(1.0);
    let kinds = [EstimatorKind::Htmle, EstimatorKind::Tmle, EstimatorKind::Aipw];

    let rows: Vec<(f64, f64, f64, f64, f64, f64)> = (0..50u64)
        .into_par_iter()
        .map(|b| {
            let dataset = generate(&DgmConfig {
                n: 1000,
                beta_p: -3.0,
                alpha_delta: 0.0,
                seed: 40_000 + b,
            });
            let plan = CrossFitPlan::new(1000, 10, 50_000 + b).unwrap();
            let results = run_all(&dataset, &policy, &plan, &config, &kinds);
            let h = results[0].1.as_ref().unwrap();
            let t = results[1].1.as_ref().unwrap();
            let a = results[2].1.as_ref().unwrap();
            (
                h.psi_hat,
                t.psi_hat,
                a.psi_hat,
                h.diagnostics.max_r_hat,
                h.eps_m.unwrap(),
                h.eps_q.unwrap(),
            )
        })
        .collect();

    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (
            m,
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64,
        )
    };
    let h: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let t: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let a: Vec<f64> = rows.iter().map(|r| r.2).collect();
    println!("htmle mean/var: {:?}", var(&h));
    println!("tmle  mean/var: {:?}", var(&t));
    println!("aipw  mean/var: {:?}", var(&a));
    let mut hs = h.clone();
    hs.sort_by(f64::total_cmp);
    println!("htmle psis sorted: {:?}", hs);
    for r in rows.iter().take(12) {
        println!(
            "h={:8.3} t={:8.3} a={:8.3} max_r={:9.1} eps_m={:7.3} eps_q={:7.3}",
            r.0, r.1, r.2, r.3, r.4, r.5
        );
    }

    // One replicate in depth: weight concentration in the m-tilt.
    let dataset = generate(&DgmConfig {
        n: 1000,
        beta_p: -3.0,
        alpha_delta: 0.0,
        seed: 40_003,
    });
    let (delta, _) = decompose(dataset.y()).unwrap();
    let scaler = OutcomeScaler::fit(dataset.y(), &delta, 0.001).unwrap();
    let plan = CrossFitPlan::new(1000, 10, 50_003).unwrap();
    let table = fit_nuisance_table(&plan, &dataset, &scaler, &policy, &config.nuisance).unwrap();
    let mut weights: Vec<f64> = (0..1000)
        .filter(|&i| dataset.delta()[i] == 1)
        .map(|i| table.r_hat()[i])
        .collect();
    weights.sort_by(f64::total_cmp);
    let total: f64 = weights.iter().sum();
    let top5: f64 = weights.iter().rev().take(5).sum();
    println!(
        "m-tilt weights: n={} total={:.1} top5 share={:.3} max={:.1} treated={}",
        weights.len(),
        total,
        top5 / total,
        weights.last().unwrap(),
        dataset.t().iter().sum::<f64>()
    );
}
