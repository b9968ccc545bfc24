//! Central finite-difference check of end-to-end parameter gradients.

use rand::Rng;
use serde::Serialize;

use crate::classifier::{ClassifierKind, ClassifierMatrix};
use crate::error::Result;
use crate::losses::{composite_loss, parameter_gradient, BaseLoss, GlobalSnapshot, LossSpec, Regularizer};
use crate::model::ModelParams;
use crate::numerics::SeededRng;

pub const STEP: f64 = 1e-6;
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

/// The objectives covered by the check.
pub fn standard_specs() -> Vec<LossSpec> {
    vec![
        LossSpec::new(BaseLoss::Ce),
        LossSpec::new(BaseLoss::Dr),
        LossSpec::new(BaseLoss::Fd),
        LossSpec::drplus(0.9),
        LossSpec::new(BaseLoss::Ce).with_regularizer(Regularizer::Kd { weight: 1.0, tau: 3.0 }),
        LossSpec::new(BaseLoss::Ce).with_regularizer(Regularizer::Ntd { weight: 1.0, tau: 3.0 }),
        LossSpec::new(BaseLoss::Ce).with_regularizer(Regularizer::Ld { weight: 1.0 }),
        LossSpec::new(BaseLoss::Ce).with_regularizer(Regularizer::Prox { mu: 0.1 }),
    ]
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)` over one gradient vector.
///
/// Taken per vector rather than per coordinate: central differences carry
/// roughly `ε·|L|/h ≈ 1e-10` of absolute roundoff, which swamps coordinates
/// of size `1e-6` and below.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(DENOMINATOR_FLOOR)
}

/// One random problem: a small MLP, a perturbed copy serving as the global
/// model, an input and a label.
#[derive(Debug, Clone)]
pub struct Case {
    pub local: ModelParams,
    pub snapshot: GlobalSnapshot,
    pub x: Vec<f64>,
    pub y: usize,
}

/// Draws case `index` from `rng`: 1 to 3 layers of width ≤ 16, 2 to 8
/// classes, and a classifier kind that cycles through all three.
pub fn random_case(rng: &SeededRng, index: u64) -> Result<Case> {
    let key = rng.derive("case", index);
    let mut s = key.stream();
    let classes = s.random_range(2..=8);
    let depth = s.random_range(1..=3);
    let mut sizes = vec![s.random_range(2..=16)];
    for _ in 0..depth - 1 {
        sizes.push(s.random_range(2..=16));
    }
    let d = s.random_range(classes..=16);
    sizes.push(d);
    let kind = [ClassifierKind::Etf, ClassifierKind::Random, ClassifierKind::Trainable][index as usize % 3];
    let v = ClassifierMatrix::build(kind, d, classes, &key.derive("head", 0))?;
    let global = ModelParams::init_mlp(&sizes, v, &key.derive("global", 0))?;
    let noise: Vec<f64> = global
        .flatten()
        .iter()
        .map(|w| w + 0.3 * s.random_range(-1.0..1.0))
        .collect();
    let local = global.unflatten(&noise)?;
    let x = (0..sizes[0]).map(|_| s.random_range(-1.0..1.0)).collect();
    let y = s.random_range(0..classes);
    Ok(Case {
        local,
        snapshot: GlobalSnapshot::new(global),
        x,
        y,
    })
}

/// Analytic and central-difference gradients of `spec` on `case`.
pub fn gradients(spec: &LossSpec, case: &Case, h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let value_at = |theta: &[f64]| -> Result<f64> {
        let m = case.local.unflatten(theta)?;
        let trace = m.forward(&case.x)?;
        Ok(composite_loss(spec, &case.x, case.y, &m, &trace, Some(&case.snapshot))?.value)
    };
    let trace = case.local.forward(&case.x)?;
    let eval = composite_loss(spec, &case.x, case.y, &case.local, &trace, Some(&case.snapshot))?;
    let analytic = parameter_gradient(&case.local, &trace, &eval)?;
    let mut theta = case.local.flatten();
    let mut numeric = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let up = value_at(&theta)?;
        theta[i] = orig - h;
        let down = value_at(&theta)?;
        theta[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    Ok((analytic, numeric))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckResult {
    pub loss: String,
    pub cases: usize,
    pub max_relative_error: f64,
}

/// Runs every spec of [`standard_specs`] on `cases` random problems.
pub fn run(cases: usize, seed: u64) -> Result<Vec<GradcheckResult>> {
    let rng = SeededRng::new(seed);
    let problems = (0..cases as u64).map(|i| random_case(&rng, i)).collect::<Result<Vec<_>>>()?;
    standard_specs()
        .iter()
        .map(|spec| {
            let mut worst = 0.0f64;
            for case in &problems {
                let (a, n) = gradients(spec, case, STEP)?;
                worst = worst.max(relative_error(&a, &n));
            }
            Ok(GradcheckResult {
                loss: spec.label(),
                cases,
                max_relative_error: worst,
            })
        })
        .collect()
}
