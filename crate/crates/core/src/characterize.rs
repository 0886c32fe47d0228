//! Pointwise residual operators for the characterizing equation systems.
//!
//! Path-independence of the exponent couples the model coefficients to a
//! scalar field `v` through a gradient condition (`sigma sigma^* grad v = b`,
//! `gamma = sigma^* grad v`, and with jumps `lambda = exp(v-increment)`) and a
//! time-reversed HJB equation for `v` itself, which gains an integral term and
//! becomes a PIDE when jumps are present. Every operator here evaluates one of
//! those conditions as a residual at a single `(t, x)`: zero residual means
//! the condition holds at that point.
//!
//! [`evaluate_on_domain`] sweeps one operator over an [`EvaluationDomain`] in
//! parallel and aggregates sup norms into a [`ResidualReport`];
//! [`gamma_integrability_check`] is the standalone curl diagnostic that can
//! rule out any `v` existing at all.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use rayon::prelude::*;
use serde_json::json;

use crate::error::{Error, Result};
use crate::fields::{
    FTransform, ScalarField, DEFAULT_FD_STEP_X_ABS, DEFAULT_FD_STEP_X_REL,
};
use crate::linalg;
use crate::model::ModelSpec;
use crate::simulate::{fmt_f64, PathBundle};

/// Finite set of `(t, x)` points the residuals are evaluated on, either a
/// user grid or the nodes visited by simulated paths.
#[derive(Debug, Clone)]
pub struct EvaluationDomain {
    points: Vec<(f64, Vec<f64>)>,
}

impl EvaluationDomain {
    /// Validates that the point set is nonempty, finite, dimensionally
    /// consistent, and has nonnegative times.
    pub fn new(points: Vec<(f64, Vec<f64>)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation(
                "evaluation domain must contain at least one point".into(),
            ));
        }
        let dim = points[0].1.len();
        for (i, (t, x)) in points.iter().enumerate() {
            if !(t.is_finite() && *t >= 0.0) {
                return Err(Error::Validation(format!(
                    "domain point {i} has invalid time {t}"
                )));
            }
            if x.len() != dim {
                return Err(Error::Validation(format!(
                    "domain point {i} has dimension {}, expected {dim}",
                    x.len()
                )));
            }
            if x.iter().any(|c| !c.is_finite()) {
                return Err(Error::Validation(format!(
                    "domain point {i} has a non-finite coordinate: {x:?}"
                )));
            }
        }
        Ok(EvaluationDomain { points })
    }

    /// Cartesian product of a time axis with one coordinate axis per spatial
    /// dimension.
    pub fn grid(times: &[f64], axes: &[Vec<f64>]) -> Result<Self> {
        if times.is_empty() || axes.is_empty() || axes.iter().any(|a| a.is_empty()) {
            return Err(Error::Validation(
                "grid needs at least one time and a nonempty axis per dimension".into(),
            ));
        }
        let d = axes.len();
        let cells: usize = axes.iter().map(|a| a.len()).product();
        let mut points = Vec::with_capacity(times.len() * cells);
        let mut idx = vec![0usize; d];
        'outer: loop {
            let x: Vec<f64> = (0..d).map(|i| axes[i][idx[i]]).collect();
            for &t in times {
                points.push((t, x.clone()));
            }
            let mut i = d;
            loop {
                if i == 0 {
                    break 'outer;
                }
                i -= 1;
                idx[i] += 1;
                if idx[i] < axes[i].len() {
                    continue 'outer;
                }
                idx[i] = 0;
            }
        }
        Self::new(points)
    }

    /// Every `(t_k, X_{t_k})` node of the given paths: the empirical surrogate
    /// for the support of the law of the process.
    pub fn from_paths(paths: &[PathBundle]) -> Result<Self> {
        let mut points = Vec::new();
        for p in paths {
            for k in 0..=p.grid.steps {
                points.push((p.grid.time(k), p.state(k).to_vec()));
            }
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[(f64, Vec<f64>)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Drops points the field or model cannot be evaluated at; errors if
    /// nothing survives.
    pub fn retain_admissible(mut self, v: &ScalarField, model: &ModelSpec) -> Result<Self> {
        self.points
            .retain(|(t, x)| v.admissible(*t, x) && model.check_finite_at(*t, x).is_ok());
        if self.points.is_empty() {
            return Err(Error::Validation(
                "no admissible points remain in the domain".into(),
            ));
        }
        Ok(self)
    }
}

/// Everything the residual formulas need at one `(t, x)`.
struct PointData {
    /// v(t, x)
    val: f64,
    /// time derivative of v
    dtv: f64,
    /// spatial gradient of v, length d
    grad: Vec<f64>,
    /// drift b(t, x), length d
    b: Vec<f64>,
    /// A grad v with A = sigma sigma^*, length d
    av: Vec<f64>,
    /// Tr[A hess v]
    tr: f64,
    /// sigma^* grad v, length m
    w: Vec<f64>,
    /// |sigma^* grad v|^2
    s2: f64,
}

fn eval_point(v: &ScalarField, model: &ModelSpec, t: f64, x: &[f64]) -> Result<PointData> {
    let d = model.dim();
    let m = model.noise_dim();
    if v.dim() != d {
        return Err(Error::Config(format!(
            "field dimension {} does not match model dimension {d}",
            v.dim()
        )));
    }
    if x.len() != d {
        return Err(Error::Config(format!(
            "point dimension {} does not match model dimension {d}",
            x.len()
        )));
    }
    let val = v.value(t, x)?;
    let der = v.derivatives(t, x)?;
    let b = model.drift_vec(t, x);
    let sigma = model.diffusion_mat(t, x);
    let mut a = vec![0.0; d * d];
    linalg::gram(&sigma, d, m, &mut a);
    let mut av = vec![0.0; d];
    linalg::matvec(&a, d, d, &der.grad, &mut av);
    let tr = linalg::trace_product(&a, &der.hess, d);
    let mut w = vec![0.0; m];
    linalg::matvec_t(&sigma, d, m, &der.grad, &mut w);
    let s2 = linalg::dot(&w, &w);
    Ok(PointData {
        val,
        dtv: der.dt,
        grad: der.grad,
        b,
        av,
        tr,
        s2,
        w,
    })
}

/// Shared by [`hjb_residual`] and [`pide_residual`] so the jump-free PIDE
/// reduces to the HJB time residual bit for bit.
fn hjb_time(dtv: f64, tr: f64, s2: f64) -> f64 {
    dtv + 0.5 * (tr + s2)
}

/// Residuals of the time-reversed HJB system at `(t, x)`:
/// `r_grad = sigma sigma^* grad v - b` and
/// `r_time = dv/dt + (Tr[sigma sigma^* hess v] + |sigma^* grad v|^2) / 2`.
/// Both vanish exactly when `v` characterizes a path-independent exponent.
pub fn hjb_residual(
    v: &ScalarField,
    model: &ModelSpec,
    t: f64,
    x: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let p = eval_point(v, model, t, x)?;
    let r_grad: Vec<f64> = p.av.iter().zip(&p.b).map(|(a, b)| a - b).collect();
    Ok((r_grad, hjb_time(p.dtv, p.tr, p.s2)))
}

/// Residuals of the transformed system for a scalar transform `f`:
/// `r_grad = f'(v) sigma sigma^* grad v - b` and
/// `r_time = f'(v) dv/dt + {f'(v) Tr[..] + f''(v) s2 + f'(v)^2 s2} / 2`
/// with `s2 = |sigma^* grad v|^2`. Equal to [`hjb_residual`] of the composed
/// field `f(v)` up to rounding, and equal to it bit for bit when `f` is the
/// identity: 1.0 * y == y, 0.0 * s2 == +0.0 for s2 >= 0, and tr + 0.0 == tr
/// because the trace accumulator never yields -0.0.
pub fn ftransform_residual(
    f: &FTransform,
    v: &ScalarField,
    model: &ModelSpec,
    t: f64,
    x: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let p = eval_point(v, model, t, x)?;
    if !f.contains(p.val) {
        return Err(Error::Domain {
            t,
            x: x.to_vec(),
            message: format!(
                "transform {} requires {}, field value is {}",
                f.label(),
                f.domain_description(),
                p.val
            ),
        });
    }
    let f1 = f.d1(p.val);
    if f1 == 0.0 {
        return Err(Error::DegenerateTransform { t, x: x.to_vec() });
    }
    let f2 = f.d2(p.val);
    let r_grad: Vec<f64> = p.av.iter().zip(&p.b).map(|(a, b)| f1 * a - b).collect();
    let r_time = f1 * p.dtv + 0.5 * ((f1 * p.tr + f2 * p.s2) + (f1 * f1) * p.s2);
    Ok((r_grad, r_time))
}

/// The named special cases of the transformed system. Letters `a`-`d` are
/// accepted as aliases in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NamedCase {
    /// f(v) = v: the plain HJB system.
    Identity,
    /// f(v) = ln v on v > 0: the time-reversed heat-kernel form.
    Log,
    /// f(v) = v^(2k+1); v != 0 required when k >= 1.
    OddPower { k: i32 },
    /// f(v) = tan v on |v| < pi/2.
    Tan,
}

impl NamedCase {
    /// Parses the case letter; `k` is consumed only by the odd-power case.
    pub fn from_letter(letter: &str, k: i32) -> Result<Self> {
        match letter {
            "a" => Ok(NamedCase::Identity),
            "b" => Ok(NamedCase::Log),
            "c" => {
                if k < 0 {
                    return Err(Error::Config(format!(
                        "odd-power case needs k >= 0, got {k}"
                    )));
                }
                Ok(NamedCase::OddPower { k })
            }
            "d" => Ok(NamedCase::Tan),
            other => Err(Error::Config(format!(
                "unknown named case `{other}` (expected a, b, c, or d)"
            ))),
        }
    }

    /// The transform whose generic residual this case restates.
    pub fn transform(&self) -> FTransform {
        match self {
            NamedCase::Identity => FTransform::identity(),
            NamedCase::Log => FTransform::log(),
            NamedCase::OddPower { k } => FTransform::odd_power(*k),
            NamedCase::Tan => FTransform::tan(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            NamedCase::Identity => "a".into(),
            NamedCase::Log => "b".into(),
            NamedCase::OddPower { k } => format!("c,k={k}"),
            NamedCase::Tan => "d".into(),
        }
    }
}

fn assemble_named(p: &PointData, f1: f64, c_named: f64) -> (Vec<f64>, f64) {
    let r_grad: Vec<f64> = p.av.iter().zip(&p.b).map(|(a, b)| f1 * a - b).collect();
    let r_time = f1 * p.dtv + 0.5 * ((f1 * p.tr) + (f1 * c_named) * p.s2);
    (r_grad, r_time)
}

/// Residuals of the named case-specific systems, assembled directly from
/// their closed-form coefficients rather than from `f'`/`f''`: the
/// `|sigma^* grad v|^2` coefficient is `0` for the logarithm,
/// `((2k+1) v^(2k+1) + 2k) / v` for odd powers, and
/// `(cos v + sin v)^2 / cos^2 v` for the tangent. Results are normalized the
/// same way as [`ftransform_residual`], so the two agree up to rounding
/// wherever both are defined; the identity case (and k = 0, whose coefficient
/// collapses to 1) delegates to [`hjb_residual`].
pub fn named_residual(
    case: NamedCase,
    v: &ScalarField,
    model: &ModelSpec,
    t: f64,
    x: &[f64],
) -> Result<(Vec<f64>, f64)> {
    match case {
        NamedCase::Identity | NamedCase::OddPower { k: 0 } => hjb_residual(v, model, t, x),
        NamedCase::Log => {
            let p = eval_point(v, model, t, x)?;
            if !(p.val.is_finite() && p.val > 0.0) {
                return Err(Error::Domain {
                    t,
                    x: x.to_vec(),
                    message: format!("logarithmic case requires v > 0, field value is {}", p.val),
                });
            }
            // Same expression as FTransform::log's first derivative, so the
            // gradient residuals match bit for bit.
            let f1 = 1.0 / p.val;
            Ok(assemble_named(&p, f1, 0.0))
        }
        NamedCase::OddPower { k } => {
            if k < 0 {
                return Err(Error::Config(format!(
                    "odd-power case needs k >= 0, got {k}"
                )));
            }
            let p_exp = 2 * k + 1;
            let p = eval_point(v, model, t, x)?;
            if !p.val.is_finite() || p.val == 0.0 {
                return Err(Error::Domain {
                    t,
                    x: x.to_vec(),
                    message: format!(
                        "odd-power case with k >= 1 requires v != 0, field value is {}",
                        p.val
                    ),
                });
            }
            // Same expression as FTransform::odd_power's first derivative.
            let c1 = p_exp as f64;
            let f1 = c1 * p.val.powi(p_exp - 1);
            if f1 == 0.0 {
                return Err(Error::DegenerateTransform { t, x: x.to_vec() });
            }
            let c_named = (c1 * p.val.powi(p_exp) + (c1 - 1.0)) / p.val;
            Ok(assemble_named(&p, f1, c_named))
        }
        NamedCase::Tan => {
            let p = eval_point(v, model, t, x)?;
            if !(p.val.abs() < FRAC_PI_2) {
                return Err(Error::Domain {
                    t,
                    x: x.to_vec(),
                    message: format!(
                        "tangent case requires |v| < pi/2, field value is {}",
                        p.val
                    ),
                });
            }
            let c = p.val.cos();
            let s = p.val.sin();
            // Same expression as FTransform::tan's first derivative.
            let f1 = 1.0 / (c * c);
            let c_named = ((c + s) * (c + s)) / (c * c);
            Ok(assemble_named(&p, f1, c_named))
        }
    }
}

/// Time residual of the jump-case PIDE at `(t, x)`: the HJB time residual
/// plus the exact atom sum
/// `sum_i [exp(Dv_i) - 1 - <coeff_i, grad v> exp(Dv_i)] nu_i` with
/// `Dv_i = v(t, x + coeff_i) - v(t, x)`. No quadrature error enters: the jump
/// measure is atomic by construction.
pub fn pide_residual(v: &ScalarField, model: &ModelSpec, t: f64, x: &[f64]) -> Result<f64> {
    let jump = model.jump().ok_or_else(|| {
        Error::Config(format!("model `{}` has no jump component", model.name()))
    })?;
    let p = eval_point(v, model, t, x)?;
    // An empty atom list adds nothing, leaving exactly the HJB value.
    let mut r = hjb_time(p.dtv, p.tr, p.s2);
    let mut coeff = vec![0.0; model.dim()];
    for (i, atom) in jump.atoms().iter().enumerate() {
        jump.coeff_into(t, x, &atom.mark, &mut coeff);
        let dv = v.increment(t, x, &coeff)?;
        let ev = dv.exp();
        if !ev.is_finite() {
            return Err(Error::Numeric {
                step: i,
                message: format!("exp of field increment {dv} overflowed at atom {i}"),
            });
        }
        r += (ev - 1.0 - linalg::dot(&coeff, &p.grad) * ev) * atom.weight;
    }
    Ok(r)
}

/// Intensity consistency of one jump atom: the model's `lambda` against the
/// value the field implies.
#[derive(Debug, Clone)]
pub struct LambdaAtomRecord {
    pub atom_index: usize,
    /// lambda(t, u_i) as the model evaluates it.
    pub model_lambda: f64,
    /// exp(v(t, x + coeff_i) - v(t, x)).
    pub implied_lambda: f64,
    /// model_lambda - implied_lambda.
    pub residual: f64,
    /// False flags an implied intensity outside (0, 1], which no thinning
    /// scheme can realize.
    pub implied_in_range: bool,
}

/// Compares the model's jump intensity with the one implied by the field:
/// path-independence forces `lambda(t, u) = exp(v-increment)` at every atom.
pub fn lambda_consistency(
    v: &ScalarField,
    model: &ModelSpec,
    t: f64,
    x: &[f64],
) -> Result<Vec<LambdaAtomRecord>> {
    let jump = model.jump().ok_or_else(|| {
        Error::Config(format!("model `{}` has no jump component", model.name()))
    })?;
    if v.dim() != model.dim() {
        return Err(Error::Config(format!(
            "field dimension {} does not match model dimension {}",
            v.dim(),
            model.dim()
        )));
    }
    let mut out = Vec::with_capacity(jump.atoms().len());
    let mut coeff = vec![0.0; model.dim()];
    for (i, atom) in jump.atoms().iter().enumerate() {
        jump.coeff_into(t, x, &atom.mark, &mut coeff);
        let model_lambda = jump.intensity(t, &atom.mark);
        let dv = v.increment(t, x, &coeff)?;
        let implied_lambda = dv.exp();
        out.push(LambdaAtomRecord {
            atom_index: i,
            model_lambda,
            implied_lambda,
            residual: model_lambda - implied_lambda,
            implied_in_range: implied_lambda > 0.0 && implied_lambda <= 1.0,
        });
    }
    Ok(out)
}

/// Residuals of the gamma gradient condition.
#[derive(Debug, Clone)]
pub struct GammaResidual {
    /// gamma - sigma^* grad v, length m: the form the exponent integrates
    /// against the Brownian increments, authoritative here.
    pub r_star: Vec<f64>,
    /// gamma - sigma sigma^* grad v, length d, reported only when d = m as a
    /// diagnostic for the doubly-lifted variant of the condition.
    pub r_star_star: Option<Vec<f64>>,
}

/// Evaluates `gamma - sigma^* grad v` (and, when square, the lifted
/// `gamma - sigma sigma^* grad v`) at `(t, x)`.
pub fn gamma_consistency(
    v: &ScalarField,
    model: &ModelSpec,
    t: f64,
    x: &[f64],
) -> Result<GammaResidual> {
    let p = eval_point(v, model, t, x)?;
    let gamma = model.gamma_vec(t, x);
    let r_star: Vec<f64> = gamma.iter().zip(&p.w).map(|(g, w)| g - w).collect();
    let r_star_star = if model.dim() == model.noise_dim() {
        Some(gamma.iter().zip(&p.av).map(|(g, a)| g - a).collect())
    } else {
        None
    };
    Ok(GammaResidual { r_star, r_star_star })
}

/// Worst offender in a report: where the largest residual magnitude lives.
#[derive(Debug, Clone)]
pub struct WorstPoint {
    pub index: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub value: f64,
}

/// One point of a curl diagnostic; `defect` is `None` where the candidate
/// gradient could not be solved for.
#[derive(Debug, Clone)]
pub struct CurlPoint {
    pub index: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub defect: Option<f64>,
}

/// Result of [`gamma_integrability_check`].
#[derive(Debug, Clone)]
pub struct CurlReport {
    pub records: Vec<CurlPoint>,
    /// Largest defect over the points that could be solved; `None` when no
    /// point could.
    pub max_defect: Option<f64>,
    pub worst: Option<WorstPoint>,
    /// Indices of points skipped because sigma^* was singular (or the model
    /// non-finite) somewhere on the stencil.
    pub skipped: Vec<usize>,
    pub fd_step_abs: f64,
    pub fd_step_rel: f64,
}

impl CurlReport {
    /// CSV with columns `index, t, x_1.., defect, skipped`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let d = self.records.first().map_or(0, |r| r.x.len());
        write!(out, "index,t")?;
        for i in 1..=d {
            write!(out, ",x_{i}")?;
        }
        writeln!(out, ",defect,skipped")?;
        for r in &self.records {
            write!(out, "{},{}", r.index, fmt_f64(r.t))?;
            for c in &r.x {
                write!(out, ",{}", fmt_f64(*c))?;
            }
            match r.defect {
                Some(v) => writeln!(out, ",{},false", fmt_f64(v))?,
                None => writeln!(out, ",,true")?,
            }
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        json!({
            "points": self.records.len(),
            "skipped": self.skipped.len(),
            "max_defect": self.max_defect,
            "worst": self.worst.as_ref().map(|w| json!({
                "index": w.index,
                "t": w.t,
                "x": w.x,
                "value": w.value,
            })),
            "fd_step_abs": self.fd_step_abs,
            "fd_step_rel": self.fd_step_rel,
        })
    }
}

/// Tests whether any scalar field can satisfy the gamma gradient condition on
/// the domain: solves `sigma^*(t,x) g = gamma(t,x)` for a candidate gradient
/// `g` and measures the antisymmetry defect `c_ij = d_i g_j - d_j g_i` by
/// central differences. A defect bounded away from zero certifies that no C^2
/// field works, hence the exponent cannot be path-independent.
///
/// Requires a square diffusion (`d = m`). Points where `sigma^*` is singular
/// anywhere on the FD stencil are skipped and reported.
pub fn gamma_integrability_check(
    model: &ModelSpec,
    domain: &EvaluationDomain,
) -> Result<CurlReport> {
    let d = model.dim();
    if d != model.noise_dim() {
        return Err(Error::Config(format!(
            "curl check needs a square diffusion (d = m); model `{}` has d = {}, m = {}",
            model.name(),
            d,
            model.noise_dim()
        )));
    }
    if domain.is_empty() {
        return Err(Error::Validation("evaluation domain is empty".into()));
    }

    let solve_g = |t: f64, x: &[f64]| -> Option<Vec<f64>> {
        model.check_finite_at(t, x).ok()?;
        let sigma = model.diffusion_mat(t, x);
        let mut st = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                st[i * d + j] = sigma[j * d + i];
            }
        }
        let gamma = model.gamma_vec(t, x);
        linalg::solve(&st, d, &gamma, 1e-12)
    };

    let records: Vec<CurlPoint> = domain
        .points()
        .par_iter()
        .enumerate()
        .map(|(index, (t, x))| {
            let defect = curl_defect_at(&solve_g, d, *t, x);
            CurlPoint {
                index,
                t: *t,
                x: x.clone(),
                defect,
            }
        })
        .collect();

    let skipped: Vec<usize> = records
        .iter()
        .filter(|r| r.defect.is_none())
        .map(|r| r.index)
        .collect();
    let mut max_defect: Option<f64> = None;
    let mut worst: Option<WorstPoint> = None;
    for r in &records {
        if let Some(v) = r.defect {
            if max_defect.is_none_or(|m| v > m) {
                max_defect = Some(v);
                worst = Some(WorstPoint {
                    index: r.index,
                    t: r.t,
                    x: r.x.clone(),
                    value: v,
                });
            }
        }
    }

    Ok(CurlReport {
        records,
        max_defect,
        worst,
        skipped,
        fd_step_abs: DEFAULT_FD_STEP_X_ABS,
        fd_step_rel: DEFAULT_FD_STEP_X_REL,
    })
}

fn curl_defect_at(
    solve_g: &dyn Fn(f64, &[f64]) -> Option<Vec<f64>>,
    d: usize,
    t: f64,
    x: &[f64],
) -> Option<f64> {
    solve_g(t, x)?;
    if d == 1 {
        // No off-diagonal pairs: the defect is vacuously zero.
        return Some(0.0);
    }
    // jac[i * d + j] = d_i g_j by central differences.
    let mut jac = vec![0.0; d * d];
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    for i in 0..d {
        let h = DEFAULT_FD_STEP_X_ABS.max(DEFAULT_FD_STEP_X_REL * x[i].abs());
        xp[i] = x[i] + h;
        xm[i] = x[i] - h;
        let gp = solve_g(t, &xp)?;
        let gm = solve_g(t, &xm)?;
        xp[i] = x[i];
        xm[i] = x[i];
        for j in 0..d {
            jac[i * d + j] = (gp[j] - gm[j]) / (2.0 * h);
        }
    }
    let mut defect = 0.0f64;
    for i in 0..d {
        for j in (i + 1)..d {
            defect = defect.max((jac[i * d + j] - jac[j * d + i]).abs());
        }
    }
    Some(defect)
}

/// Which residual operator [`evaluate_on_domain`] applies.
#[derive(Debug, Clone)]
pub enum ResidualOp {
    Hjb,
    FTransform(FTransform),
    Named(NamedCase),
    Pide,
    Lambda,
    Gamma,
}

impl ResidualOp {
    pub fn label(&self) -> String {
        match self {
            ResidualOp::Hjb => "hjb".into(),
            ResidualOp::FTransform(f) => format!("ftransform({})", f.label()),
            ResidualOp::Named(c) => format!("named({})", c.label()),
            ResidualOp::Pide => "pide".into(),
            ResidualOp::Lambda => "lambda".into(),
            ResidualOp::Gamma => "gamma".into(),
        }
    }
}

/// Residuals recorded at one domain point. Families the operator does not
/// produce stay `None`; a point-level failure is captured in `error` and the
/// sweep continues.
#[derive(Debug, Clone)]
pub struct PointRecord {
    pub index: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub r_grad: Option<Vec<f64>>,
    pub r_time: Option<f64>,
    pub r_jump: Option<f64>,
    pub r_lambda: Option<Vec<f64>>,
    pub r_gamma: Option<Vec<f64>>,
    /// The lifted gamma diagnostic; excluded from pass/fail and worst-point
    /// selection.
    pub r_gamma_lifted: Option<Vec<f64>>,
    pub error: Option<String>,
}

impl PointRecord {
    /// Largest residual magnitude at this point, over the families that count
    /// toward pass/fail.
    pub fn magnitude(&self) -> Option<f64> {
        let mut mag: Option<f64> = None;
        let mut push = |v: f64| {
            mag = Some(mag.map_or(v, |m: f64| m.max(v)));
        };
        if let Some(g) = &self.r_grad {
            push(linalg::max_abs(g));
        }
        if let Some(v) = self.r_time {
            push(v.abs());
        }
        if let Some(v) = self.r_jump {
            push(v.abs());
        }
        if let Some(l) = &self.r_lambda {
            push(linalg::max_abs(l));
        }
        if let Some(g) = &self.r_gamma {
            push(linalg::max_abs(g));
        }
        mag
    }
}

/// Aggregated residual sweep: per-point records, per-family sup norms, and a
/// pass/fail verdict against the tolerance. Sup norms are the maxima of the
/// recorded per-point magnitudes, so report and records cannot disagree.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub op_label: String,
    pub tolerance: f64,
    pub records: Vec<PointRecord>,
    pub sup_grad: Option<f64>,
    pub sup_time: Option<f64>,
    pub sup_jump: Option<f64>,
    pub sup_lambda: Option<f64>,
    pub sup_gamma: Option<f64>,
    /// Sup of the lifted gamma diagnostic; informational only.
    pub sup_gamma_lifted: Option<f64>,
    pub error_count: usize,
    /// True iff no point errored and every counted sup norm is within
    /// tolerance. The lifted gamma diagnostic is not counted.
    pub pass: bool,
    pub worst: Option<WorstPoint>,
}

impl ResidualReport {
    /// CSV with one row per point and one column per residual component;
    /// cells are empty where a family is absent (e.g. on errored points).
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let d = self.records.first().map_or(0, |r| r.x.len());
        let width = |f: &dyn Fn(&PointRecord) -> Option<usize>| {
            self.records.iter().filter_map(|r| f(r)).max().unwrap_or(0)
        };
        let grad_w = width(&|r| r.r_grad.as_ref().map(Vec::len));
        let has_time = self.records.iter().any(|r| r.r_time.is_some());
        let has_jump = self.records.iter().any(|r| r.r_jump.is_some());
        let lambda_w = width(&|r| r.r_lambda.as_ref().map(Vec::len));
        let gamma_w = width(&|r| r.r_gamma.as_ref().map(Vec::len));
        let lifted_w = width(&|r| r.r_gamma_lifted.as_ref().map(Vec::len));

        write!(out, "index,t")?;
        for i in 1..=d {
            write!(out, ",x_{i}")?;
        }
        for i in 1..=grad_w {
            write!(out, ",r_grad_{i}")?;
        }
        if has_time {
            write!(out, ",r_time")?;
        }
        if has_jump {
            write!(out, ",r_jump")?;
        }
        for i in 1..=lambda_w {
            write!(out, ",r_lambda_{i}")?;
        }
        for i in 1..=gamma_w {
            write!(out, ",r_gamma_{i}")?;
        }
        for i in 1..=lifted_w {
            write!(out, ",r_gamma_lifted_{i}")?;
        }
        writeln!(out, ",error")?;

        let write_vec =
            |out: &mut W, v: &Option<Vec<f64>>, w: usize| -> std::io::Result<()> {
                for i in 0..w {
                    match v.as_ref().and_then(|v| v.get(i)) {
                        Some(c) => write!(out, ",{}", fmt_f64(*c))?,
                        None => write!(out, ",")?,
                    }
                }
                Ok(())
            };

        for r in &self.records {
            write!(out, "{},{}", r.index, fmt_f64(r.t))?;
            for c in &r.x {
                write!(out, ",{}", fmt_f64(*c))?;
            }
            write_vec(out, &r.r_grad, grad_w)?;
            if has_time {
                match r.r_time {
                    Some(v) => write!(out, ",{}", fmt_f64(v))?,
                    None => write!(out, ",")?,
                }
            }
            if has_jump {
                match r.r_jump {
                    Some(v) => write!(out, ",{}", fmt_f64(v))?,
                    None => write!(out, ",")?,
                }
            }
            write_vec(out, &r.r_lambda, lambda_w)?;
            write_vec(out, &r.r_gamma, gamma_w)?;
            write_vec(out, &r.r_gamma_lifted, lifted_w)?;
            match &r.error {
                Some(e) => writeln!(out, ",\"{}\"", e.replace('"', "\"\""))?,
                None => writeln!(out, ",")?,
            }
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        json!({
            "op": self.op_label,
            "tolerance": self.tolerance,
            "points": self.records.len(),
            "errors": self.error_count,
            "pass": self.pass,
            "sup": {
                "r_grad": self.sup_grad,
                "r_time": self.sup_time,
                "r_jump": self.sup_jump,
                "r_lambda": self.sup_lambda,
                "r_gamma": self.sup_gamma,
                "r_gamma_lifted": self.sup_gamma_lifted,
            },
            "worst": self.worst.as_ref().map(|w| json!({
                "index": w.index,
                "t": w.t,
                "x": w.x,
                "value": w.value,
            })),
        })
    }
}

fn apply_op(
    op: &ResidualOp,
    v: &ScalarField,
    model: &ModelSpec,
    index: usize,
    t: f64,
    x: &[f64],
) -> PointRecord {
    let mut rec = PointRecord {
        index,
        t,
        x: x.to_vec(),
        r_grad: None,
        r_time: None,
        r_jump: None,
        r_lambda: None,
        r_gamma: None,
        r_gamma_lifted: None,
        error: None,
    };
    let outcome: Result<()> = (|| {
        match op {
            ResidualOp::Hjb => {
                let (g, rt) = hjb_residual(v, model, t, x)?;
                rec.r_grad = Some(g);
                rec.r_time = Some(rt);
            }
            ResidualOp::FTransform(f) => {
                let (g, rt) = ftransform_residual(f, v, model, t, x)?;
                rec.r_grad = Some(g);
                rec.r_time = Some(rt);
            }
            ResidualOp::Named(c) => {
                let (g, rt) = named_residual(*c, v, model, t, x)?;
                rec.r_grad = Some(g);
                rec.r_time = Some(rt);
            }
            ResidualOp::Pide => {
                rec.r_jump = Some(pide_residual(v, model, t, x)?);
            }
            ResidualOp::Lambda => {
                let atoms = lambda_consistency(v, model, t, x)?;
                rec.r_lambda = Some(atoms.iter().map(|a| a.residual).collect());
            }
            ResidualOp::Gamma => {
                let g = gamma_consistency(v, model, t, x)?;
                rec.r_gamma = Some(g.r_star);
                rec.r_gamma_lifted = g.r_star_star;
            }
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        rec.error = Some(e.to_string());
    }
    rec
}

/// Applies one residual operator at every domain point (in parallel, with
/// deterministic point-index ordering) and aggregates the results. Point
/// failures are recorded, not fatal.
pub fn evaluate_on_domain(
    op: &ResidualOp,
    v: &ScalarField,
    model: &ModelSpec,
    domain: &EvaluationDomain,
    tolerance: f64,
) -> Result<ResidualReport> {
    if domain.is_empty() {
        return Err(Error::Validation("evaluation domain is empty".into()));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::Validation(format!(
            "tolerance must be nonnegative, got {tolerance}"
        )));
    }

    let records: Vec<PointRecord> = domain
        .points()
        .par_iter()
        .enumerate()
        .map(|(index, (t, x))| apply_op(op, v, model, index, *t, x))
        .collect();

    let mut sup_grad: Option<f64> = None;
    let mut sup_time: Option<f64> = None;
    let mut sup_jump: Option<f64> = None;
    let mut sup_lambda: Option<f64> = None;
    let mut sup_gamma: Option<f64> = None;
    let mut sup_gamma_lifted: Option<f64> = None;
    let mut worst: Option<WorstPoint> = None;
    let mut error_count = 0usize;

    let fold = |sup: &mut Option<f64>, v: f64| {
        *sup = Some(sup.map_or(v, |s: f64| s.max(v)));
    };
    for r in &records {
        if r.error.is_some() {
            error_count += 1;
        }
        if let Some(g) = &r.r_grad {
            fold(&mut sup_grad, linalg::max_abs(g));
        }
        if let Some(v) = r.r_time {
            fold(&mut sup_time, v.abs());
        }
        if let Some(v) = r.r_jump {
            fold(&mut sup_jump, v.abs());
        }
        if let Some(l) = &r.r_lambda {
            fold(&mut sup_lambda, linalg::max_abs(l));
        }
        if let Some(g) = &r.r_gamma {
            fold(&mut sup_gamma, linalg::max_abs(g));
        }
        if let Some(g) = &r.r_gamma_lifted {
            fold(&mut sup_gamma_lifted, linalg::max_abs(g));
        }
        if let Some(mag) = r.magnitude() {
            if worst.as_ref().is_none_or(|w| mag > w.value) {
                worst = Some(WorstPoint {
                    index: r.index,
                    t: r.t,
                    x: r.x.clone(),
                    value: mag,
                });
            }
        }
    }

    let counted = [sup_grad, sup_time, sup_jump, sup_lambda, sup_gamma];
    let pass = error_count == 0 && counted.iter().flatten().all(|s| *s <= tolerance);

    Ok(ResidualReport {
        op_label: op.label(),
        tolerance,
        records,
        sup_grad,
        sup_time,
        sup_jump,
        sup_lambda,
        sup_gamma,
        sup_gamma_lifted,
        error_count,
        pass,
        worst,
    })
}

/// Default sweep tolerance: tight for fields with analytic derivatives, and
/// scaled by the expected differencing noise floor otherwise.
pub fn default_tolerance(v: &ScalarField, scale_hint: f64) -> f64 {
    if v.has_analytic_derivatives() {
        1e-10
    } else {
        1e-6 * (1.0 + scale_hint.abs())
    }
}
