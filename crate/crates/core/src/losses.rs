//! Local objectives and regularizers, each with its value and analytic
//! gradient.
//!
//! Feature-space losses (DR, FD) return `∂L/∂f`. Logit-space losses (CE, KD,
//! NTD, LD) return `∂L/∂z`; since `z = f Vᵀ` their feature gradient is
//! `Vᵀ ∂L/∂z`. The parameter-space proximal term returns `∂L/∂θ` directly.

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierMatrix;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, ModelParams};
use crate::numerics::{axpy, checked_norm, cosine, dot, log_softmax, softmax, sub, Matrix};

/// Default Dr+ mixing weight.
pub const DEFAULT_BETA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    /// Cross-entropy on `z = f Vᵀ`.
    Ce,
    /// Dot-regression `½(cos(f, v_y) − 1)²`.
    Dr,
    /// `β·DR + (1 − β)·FD`.
    Drplus,
    /// Feature distillation alone.
    Fd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    Prox { mu: f64 },
    Kd { weight: f64, tau: f64 },
    Ntd { weight: f64, tau: f64 },
    Ld { weight: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub base: BaseLoss,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub regularizer: Option<Regularizer>,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::drplus(DEFAULT_BETA)
    }
}

impl LossSpec {
    pub fn new(base: BaseLoss) -> Self {
        LossSpec {
            base,
            beta: DEFAULT_BETA,
            regularizer: None,
        }
    }

    pub fn drplus(beta: f64) -> Self {
        LossSpec {
            base: BaseLoss::Drplus,
            beta,
            regularizer: None,
        }
    }

    #[must_use]
    pub fn with_regularizer(mut self, reg: Regularizer) -> Self {
        self.regularizer = Some(reg);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        let check_weight = |w: f64| {
            if w >= 0.0 && w.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("regularizer weight must be >= 0, got {w}")))
            }
        };
        let check_tau = |t: f64| {
            if t > 0.0 && t.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("temperature must be > 0, got {t}")))
            }
        };
        match self.regularizer {
            None => Ok(()),
            Some(Regularizer::Prox { mu }) => {
                if mu >= 0.0 && mu.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("prox mu must be >= 0, got {mu}")))
                }
            }
            Some(Regularizer::Kd { weight, tau } | Regularizer::Ntd { weight, tau }) => {
                check_weight(weight)?;
                check_tau(tau)
            }
            Some(Regularizer::Ld { weight }) => check_weight(weight),
        }
    }

    /// Whether any term reads the broadcast global model.
    pub fn needs_snapshot(&self) -> bool {
        matches!(self.base, BaseLoss::Drplus | BaseLoss::Fd) || self.regularizer.is_some()
    }

    /// Whether any per-sample term needs the global model's feature or logits.
    pub fn needs_teacher(&self) -> bool {
        let base = match self.base {
            BaseLoss::Drplus => self.beta < 1.0,
            BaseLoss::Fd => true,
            BaseLoss::Ce | BaseLoss::Dr => false,
        };
        base || matches!(
            self.regularizer,
            Some(Regularizer::Kd { .. } | Regularizer::Ntd { .. } | Regularizer::Ld { .. })
        )
    }

    /// Short label such as `drplus(0.9)+kd(1,3)`.
    pub fn label(&self) -> String {
        let base = match self.base {
            BaseLoss::Ce => "ce".to_string(),
            BaseLoss::Dr => "dr".to_string(),
            BaseLoss::Drplus => format!("drplus({})", self.beta),
            BaseLoss::Fd => "fd".to_string(),
        };
        match self.regularizer {
            None => base,
            Some(Regularizer::Prox { mu }) => format!("{base}+prox({mu})"),
            Some(Regularizer::Kd { weight, tau }) => format!("{base}+kd({weight},{tau})"),
            Some(Regularizer::Ntd { weight, tau }) => format!("{base}+ntd({weight},{tau})"),
            Some(Regularizer::Ld { weight }) => format!("{base}+ld({weight})"),
        }
    }
}

/// The broadcast global model, read-only during a local episode.
#[derive(Debug, Clone)]
pub struct GlobalSnapshot {
    params: ModelParams,
    flat: Vec<f64>,
}

/// The global model's view of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
}

impl GlobalSnapshot {
    pub fn new(params: ModelParams) -> Self {
        let flat = params.flatten();
        GlobalSnapshot { params, flat }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn teacher(&self, x: &[f64]) -> Result<TeacherOutput> {
        let feature = self.params.feature(x)?;
        let logits = self.params.classifier().logits(&feature)?;
        Ok(TeacherOutput { feature, logits })
    }
}

fn check_class(y: usize, classes: usize) -> Result<()> {
    if y < classes {
        Ok(())
    } else {
        Err(Error::Parameter(format!("label {y} out of range for {classes} classes")))
    }
}

fn check_same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what}: lengths {} and {}", a.len(), b.len())))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be > 0, got {tau}")))
    }
}

// ---------------------------------------------------------------------------
// Cross-entropy

/// `−log softmax(z)_y`.
pub fn ce_loss(z: &[f64], y: usize) -> Result<f64> {
    check_class(y, z.len())?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if z[y] == max {
        // log(1 + Σ_{c≠y} e^{z_c − z_y}) keeps precision when p_y ≈ 1.
        let rest: f64 = z
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != y)
            .map(|(_, &zc)| (zc - z[y]).exp())
            .sum();
        return Ok(rest.ln_1p());
    }
    Ok(-log_softmax(z)?[y])
}

/// `softmax(z) − e_y`.
pub fn ce_logit_grad(z: &[f64], y: usize) -> Result<Vec<f64>> {
    check_class(y, z.len())?;
    let mut g = softmax(z)?;
    g[y] -= 1.0;
    Ok(g)
}

/// CE feature gradient and its pulling/pushing parts.
#[derive(Debug, Clone, PartialEq)]
pub struct CeFeatureGrad {
    /// `∇_f L_CE = −pull − push`
    pub full: Vec<f64>,
    /// `(1 − p_y) v_y`, toward the true class.
    pub pull: Vec<f64>,
    /// `−Σ_{c≠y} p_c v_c`, away from the other classes.
    pub push: Vec<f64>,
}

pub fn ce_feature_grad(f: &[f64], v: &ClassifierMatrix, y: usize) -> Result<CeFeatureGrad> {
    check_class(y, v.num_classes())?;
    if f.len() != v.dim() {
        return Err(Error::Dimension(format!(
            "feature length {} != classifier dimension {}",
            f.len(),
            v.dim()
        )));
    }
    let p = softmax(&v.logits(f)?)?;
    let pull: Vec<f64> = v.vector(y).iter().map(|&vy| (1.0 - p[y]) * vy).collect();
    let mut toward_others = vec![0.0; f.len()];
    for (c, &pc) in p.iter().enumerate() {
        if c != y {
            axpy(pc, v.vector(c), &mut toward_others);
        }
    }
    let push: Vec<f64> = toward_others.iter().map(|x| -x).collect();
    let full = pull.iter().zip(&push).map(|(a, b)| -a - b).collect();
    Ok(CeFeatureGrad { full, pull, push })
}

// ---------------------------------------------------------------------------
// Dot regression

/// `½(cos(f, v_y) − 1)²`, in `[0, 2]`.
pub fn dr_loss(f: &[f64], v: &ClassifierMatrix, y: usize) -> Result<f64> {
    check_class(y, v.num_classes())?;
    let c = cosine(f, v.vector(y))?;
    Ok(0.5 * (c - 1.0) * (c - 1.0))
}

/// `(c − 1)(v̂_y − c f̂)/‖f‖` with `c = cos(f, v_y)`; orthogonal to `f`.
pub fn dr_feature_grad(f: &[f64], v: &ClassifierMatrix, y: usize) -> Result<Vec<f64>> {
    check_class(y, v.num_classes())?;
    cosine_pair_grad(f, v.vector(y))
}

/// Gradient of `½(cos(a, b) − 1)²` with respect to `a`.
fn cosine_pair_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let c = cosine(a, b)?;
    let na = checked_norm(a)?;
    let nb = checked_norm(b)?;
    let k = (c - 1.0) / na;
    Ok(a.iter()
        .zip(b)
        .map(|(&ai, &bi)| k * (bi / nb - c * ai / na))
        .collect())
}

/// Gradient of DR with respect to the class vector `v_y` (only meaningful for
/// trainable heads): `(c − 1)(f̂ − c v̂_y)/‖v_y‖`.
pub fn dr_classifier_grad(f: &[f64], v: &ClassifierMatrix, y: usize) -> Result<Vec<f64>> {
    check_class(y, v.num_classes())?;
    cosine_pair_grad(v.vector(y), f)
}

// ---------------------------------------------------------------------------
// Feature distillation and Dr+

/// `(1/d)‖f_local − f_global‖²`.
pub fn fd_loss(f_local: &[f64], f_global: &[f64]) -> Result<f64> {
    check_same_len(f_local, f_global, "feature distillation")?;
    let diff = sub(f_local, f_global);
    Ok(dot(&diff, &diff) / f_local.len() as f64)
}

/// `(2/d)(f_local − f_global)`.
pub fn fd_feature_grad(f_local: &[f64], f_global: &[f64]) -> Result<Vec<f64>> {
    check_same_len(f_local, f_global, "feature distillation")?;
    let k = 2.0 / f_local.len() as f64;
    Ok(f_local.iter().zip(f_global).map(|(a, b)| k * (a - b)).collect())
}

/// `β·L_DR + (1 − β)·L_FD`. A term whose weight is zero is not evaluated,
/// so `β = 1` is exactly DR and `β = 0` is exactly FD.
pub fn drplus_loss(
    f_local: &[f64],
    f_global: &[f64],
    v: &ClassifierMatrix,
    y: usize,
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    check_same_len(f_local, f_global, "dr+")?;
    if beta == 1.0 {
        return dr_loss(f_local, v, y);
    }
    if beta == 0.0 {
        return fd_loss(f_local, f_global);
    }
    Ok(beta * dr_loss(f_local, v, y)? + (1.0 - beta) * fd_loss(f_local, f_global)?)
}

pub fn drplus_feature_grad(
    f_local: &[f64],
    f_global: &[f64],
    v: &ClassifierMatrix,
    y: usize,
    beta: f64,
) -> Result<Vec<f64>> {
    check_beta(beta)?;
    check_same_len(f_local, f_global, "dr+")?;
    if beta == 1.0 {
        return dr_feature_grad(f_local, v, y);
    }
    if beta == 0.0 {
        return fd_feature_grad(f_local, f_global);
    }
    let dr = dr_feature_grad(f_local, v, y)?;
    let fd = fd_feature_grad(f_local, f_global)?;
    Ok(dr
        .iter()
        .zip(&fd)
        .map(|(a, b)| beta * a + (1.0 - beta) * b)
        .collect())
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("beta must lie in [0, 1], got {beta}")))
    }
}

// ---------------------------------------------------------------------------
// Proximal term

/// `(μ/2)‖θ − θ^g‖²`.
pub fn prox_penalty(theta: &[f64], theta_global: &[f64], mu: f64) -> Result<f64> {
    check_same_len(theta, theta_global, "prox")?;
    let diff = sub(theta, theta_global);
    Ok(0.5 * mu * dot(&diff, &diff))
}

/// `μ(θ − θ^g)`.
pub fn prox_grad(theta: &[f64], theta_global: &[f64], mu: f64) -> Result<Vec<f64>> {
    check_same_len(theta, theta_global, "prox")?;
    Ok(theta.iter().zip(theta_global).map(|(a, b)| mu * (a - b)).collect())
}

// ---------------------------------------------------------------------------
// Logit distillation family

/// `τ² · KL(softmax(z_global/τ) ‖ softmax(z_local/τ))`, global model as teacher.
pub fn kd_loss(z_local: &[f64], z_global: &[f64], tau: f64) -> Result<f64> {
    check_same_len(z_local, z_global, "kd")?;
    check_tau(tau)?;
    let log_student = log_softmax(&scaled(z_local, 1.0 / tau))?;
    let log_teacher = log_softmax(&scaled(z_global, 1.0 / tau))?;
    let kl: f64 = log_teacher
        .iter()
        .zip(&log_student)
        .map(|(&lt, &ls)| lt.exp() * (lt - ls))
        .sum();
    Ok(tau * tau * kl.max(0.0))
}

/// `τ(softmax(z_local/τ) − softmax(z_global/τ))`.
pub fn kd_logit_grad(z_local: &[f64], z_global: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_same_len(z_local, z_global, "kd")?;
    check_tau(tau)?;
    let ps = softmax(&scaled(z_local, 1.0 / tau))?;
    let pt = softmax(&scaled(z_global, 1.0 / tau))?;
    Ok(ps.iter().zip(&pt).map(|(s, t)| tau * (s - t)).collect())
}

fn scaled(z: &[f64], k: f64) -> Vec<f64> {
    z.iter().map(|v| v * k).collect()
}

fn without(z: &[f64], y: usize) -> Vec<f64> {
    z.iter()
        .enumerate()
        .filter(|&(c, _)| c != y)
        .map(|(_, &v)| v)
        .collect()
}

/// KD restricted to the not-true classes (index `y` removed before softening).
pub fn ntd_loss(z_local: &[f64], z_global: &[f64], y: usize, tau: f64) -> Result<f64> {
    check_same_len(z_local, z_global, "ntd")?;
    check_class(y, z_local.len())?;
    if z_local.len() < 2 {
        return Err(Error::Parameter("not-true distillation needs >= 2 classes".into()));
    }
    kd_loss(&without(z_local, y), &without(z_global, y), tau)
}

/// NTD logit gradient; the true-class entry is zero.
pub fn ntd_logit_grad(z_local: &[f64], z_global: &[f64], y: usize, tau: f64) -> Result<Vec<f64>> {
    check_same_len(z_local, z_global, "ntd")?;
    check_class(y, z_local.len())?;
    if z_local.len() < 2 {
        return Err(Error::Parameter("not-true distillation needs >= 2 classes".into()));
    }
    let reduced = kd_logit_grad(&without(z_local, y), &without(z_global, y), tau)?;
    let mut out = Vec::with_capacity(z_local.len());
    out.extend_from_slice(&reduced[..y]);
    out.push(0.0);
    out.extend_from_slice(&reduced[y..]);
    Ok(out)
}

/// `(1/C)‖z_local − z_global‖²`.
pub fn ld_loss(z_local: &[f64], z_global: &[f64]) -> Result<f64> {
    check_same_len(z_local, z_global, "ld")?;
    let diff = sub(z_local, z_global);
    Ok(dot(&diff, &diff) / z_local.len() as f64)
}

pub fn ld_logit_grad(z_local: &[f64], z_global: &[f64]) -> Result<Vec<f64>> {
    check_same_len(z_local, z_global, "ld")?;
    let k = 2.0 / z_local.len() as f64;
    Ok(z_local.iter().zip(z_global).map(|(a, b)| k * (a - b)).collect())
}

// ---------------------------------------------------------------------------
// Composition

/// Value and gradients of a composite objective on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    /// Direct `∂L/∂f` from feature-space terms (DR, FD).
    pub feature_grad: Vec<f64>,
    /// `∂L/∂z` from logit-space terms (CE, KD, NTD, LD).
    pub logit_grad: Vec<f64>,
    /// Direct `∂L/∂v_y` from DR, present only for trainable heads.
    pub class_vector_grad: Option<(usize, Vec<f64>)>,
    /// `∂L/∂θ` in flat order, from the proximal term.
    pub param_grad: Option<Vec<f64>>,
}

impl LossEval {
    /// `∂L/∂f` including the paths through the logits.
    pub fn total_feature_grad(&self, v: &ClassifierMatrix) -> Result<Vec<f64>> {
        let mut g = self.feature_grad.clone();
        if self.logit_grad.iter().any(|&x| x != 0.0) {
            let through_logits = v.vectors().t_matvec(&self.logit_grad)?;
            for (a, b) in g.iter_mut().zip(&through_logits) {
                *a += b;
            }
        }
        Ok(g)
    }
}

/// Per-sample terms of `spec`: everything except the proximal penalty.
///
/// `teacher` must be present iff [`LossSpec::needs_teacher`].
pub fn sample_terms(
    spec: &LossSpec,
    y: usize,
    trace: &ForwardTrace,
    v: &ClassifierMatrix,
    teacher: Option<&TeacherOutput>,
) -> Result<LossEval> {
    spec.validate()?;
    let classes = v.num_classes();
    check_class(y, classes)?;
    let f = trace.feature();
    let z = &trace.logits;
    let need_teacher = || {
        teacher.ok_or_else(|| {
            Error::Config(format!("loss {} needs the global model snapshot", spec.label()))
        })
    };

    let mut value;
    let mut feature_grad = vec![0.0; f.len()];
    let mut logit_grad = vec![0.0; classes];
    let mut class_vector_grad = None;

    // Direct ∂/∂v_y of the DR term, only for heads that train.
    let dr_head_grad = |weight: f64| -> Result<Option<(usize, Vec<f64>)>> {
        if v.is_frozen() {
            Ok(None)
        } else {
            Ok(Some((y, scaled(&dr_classifier_grad(f, v, y)?, weight))))
        }
    };

    let beta = match spec.base {
        BaseLoss::Ce => None,
        BaseLoss::Dr => Some(1.0),
        BaseLoss::Drplus => Some(spec.beta),
        BaseLoss::Fd => Some(0.0),
    };
    match beta {
        None => {
            value = ce_loss(z, y)?;
            logit_grad = ce_logit_grad(z, y)?;
        }
        Some(beta) if beta == 1.0 => {
            value = dr_loss(f, v, y)?;
            feature_grad = dr_feature_grad(f, v, y)?;
            class_vector_grad = dr_head_grad(1.0)?;
        }
        Some(beta) if beta == 0.0 => {
            let t = need_teacher()?;
            value = fd_loss(f, &t.feature)?;
            feature_grad = fd_feature_grad(f, &t.feature)?;
        }
        Some(beta) => {
            let t = need_teacher()?;
            value = drplus_loss(f, &t.feature, v, y, beta)?;
            feature_grad = drplus_feature_grad(f, &t.feature, v, y, beta)?;
            class_vector_grad = dr_head_grad(beta)?;
        }
    }

    match spec.regularizer {
        None | Some(Regularizer::Prox { .. }) => {}
        Some(Regularizer::Kd { weight, tau }) => {
            let t = need_teacher()?;
            value += weight * kd_loss(z, &t.logits, tau)?;
            axpy(weight, &kd_logit_grad(z, &t.logits, tau)?, &mut logit_grad);
        }
        Some(Regularizer::Ntd { weight, tau }) => {
            let t = need_teacher()?;
            value += weight * ntd_loss(z, &t.logits, y, tau)?;
            axpy(weight, &ntd_logit_grad(z, &t.logits, y, tau)?, &mut logit_grad);
        }
        Some(Regularizer::Ld { weight }) => {
            let t = need_teacher()?;
            value += weight * ld_loss(z, &t.logits)?;
            axpy(weight, &ld_logit_grad(z, &t.logits)?, &mut logit_grad);
        }
    }

    Ok(LossEval {
        value,
        feature_grad,
        logit_grad,
        class_vector_grad,
        param_grad: None,
    })
}

/// Full objective for one sample `(x, y)` under `local`, including the
/// proximal penalty when configured.
pub fn composite_loss(
    spec: &LossSpec,
    x: &[f64],
    y: usize,
    local: &ModelParams,
    trace: &ForwardTrace,
    snapshot: Option<&GlobalSnapshot>,
) -> Result<LossEval> {
    if spec.needs_snapshot() && snapshot.is_none() {
        return Err(Error::Config(format!(
            "loss {} needs the global model snapshot",
            spec.label()
        )));
    }
    let teacher = match (spec.needs_teacher(), snapshot) {
        (true, Some(s)) => Some(s.teacher(x)?),
        _ => None,
    };
    let mut eval = sample_terms(spec, y, trace, local.classifier(), teacher.as_ref())?;
    if let (Some(Regularizer::Prox { mu }), Some(s)) = (spec.regularizer, snapshot) {
        let theta = local.flatten();
        eval.value += prox_penalty(&theta, s.flat(), mu)?;
        eval.param_grad = Some(prox_grad(&theta, s.flat(), mu)?);
    }
    Ok(eval)
}

/// Full parameter gradient of `eval` in flat order.
pub fn parameter_gradient(
    local: &ModelParams,
    trace: &ForwardTrace,
    eval: &LossEval,
) -> Result<Vec<f64>> {
    let v = local.classifier();
    let dl_df = eval.total_feature_grad(v)?;
    let mut grads = local.backward(trace, &dl_df, Some(&eval.logit_grad))?;
    if let (Some(gv), Some((y, row))) = (grads.classifier.as_mut(), &eval.class_vector_grad) {
        axpy(1.0, row, gv.row_mut(*y));
    }
    let mut flat = grads.flatten();
    if let Some(p) = &eval.param_grad {
        axpy(1.0, p, &mut flat);
    }
    Ok(flat)
}

/// Convenience for tests and tooling: a matrix of zeros shaped like `v`.
pub fn zero_like(v: &ClassifierMatrix) -> Matrix {
    Matrix::zeros(v.num_classes(), v.dim())
}
