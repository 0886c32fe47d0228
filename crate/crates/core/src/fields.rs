//! Scalar fields `v(t, x)` on `[0, oo) x R^d` and scalar transforms `f`.
//!
//! A [`ScalarField`] carries a value map plus optional analytic derivative
//! maps. [`ScalarField::derivatives`] uses the analytic maps when present and
//! falls back to central finite differences otherwise, component by
//! component. Composition with an [`FTransform`] propagates derivatives by the
//! chain rule, so a composed field is as analytic as its inner field.
//!
//! Conventions:
//! - gradients are `d`-vectors, hessians row-major `d x d` and always
//!   symmetrized as `(H + H^T)/2` before being returned;
//! - FD steps default to `h_t = 1e-5` and `h_x = max(1e-5, 1e-7 |x|)`;
//!   the time stencil switches to a one-sided second-order formula at the
//!   `t = 0` boundary;
//! - a domain predicate guards every evaluation; FD stencils must stay inside
//!   the admissible set or the evaluation fails with a domain error.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg;

pub type ScalarMap = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type VectorMap = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
pub type MatrixMap = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
pub type DomainMap = Arc<dyn Fn(f64, &[f64]) -> bool + Send + Sync>;
/// Exact increment `v(t, x + dx) - v(t, x)` as a function of `(t, x, dx)`.
pub type IncrementMap = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;

pub const DEFAULT_FD_STEP_T: f64 = 1e-5;
pub const DEFAULT_FD_STEP_X_ABS: f64 = 1e-5;
pub const DEFAULT_FD_STEP_X_REL: f64 = 1e-7;

/// All derivatives of a scalar field at one point.
#[derive(Debug, Clone)]
pub struct FieldDerivatives {
    pub dt: f64,
    /// Spatial gradient, length `d`.
    pub grad: Vec<f64>,
    /// Symmetrized hessian, row-major `d x d`.
    pub hess: Vec<f64>,
}

#[derive(Clone)]
enum Repr {
    Closures {
        value: ScalarMap,
        dt: Option<ScalarMap>,
        grad: Option<VectorMap>,
        hess: Option<MatrixMap>,
        domain: Option<DomainMap>,
        increment: Option<IncrementMap>,
    },
    Composed {
        transform: FTransform,
        inner: Box<ScalarField>,
    },
}

/// A scalar field `v(t, x)` with optional analytic derivatives and an
/// admissible domain.
#[derive(Clone)]
pub struct ScalarField {
    dim: usize,
    repr: Repr,
    fd_step_t: f64,
    fd_step_x: Option<f64>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.repr {
            Repr::Closures {
                dt, grad, hess, domain, ..
            } => f
                .debug_struct("ScalarField")
                .field("dim", &self.dim)
                .field("analytic_dt", &dt.is_some())
                .field("analytic_grad", &grad.is_some())
                .field("analytic_hess", &hess.is_some())
                .field("restricted_domain", &domain.is_some())
                .finish(),
            Repr::Composed { transform, inner } => f
                .debug_struct("ComposedField")
                .field("transform", &transform.label())
                .field("inner", inner)
                .finish(),
        }
    }
}

impl ScalarField {
    /// Field defined by a value map alone; all derivatives fall back to FD.
    pub fn from_closure<F>(dim: usize, value: F) -> Self
    where
        F: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        ScalarField {
            dim,
            repr: Repr::Closures {
                value: Arc::new(value),
                dt: None,
                grad: None,
                hess: None,
                domain: None,
                increment: None,
            },
            fd_step_t: DEFAULT_FD_STEP_T,
            fd_step_x: None,
        }
    }

    /// Attaches an analytic time derivative. Panics if called on a composed
    /// field: attach derivative maps before composing.
    pub fn with_time_derivative<F>(mut self, map: F) -> Self
    where
        F: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        match &mut self.repr {
            Repr::Closures { dt, .. } => *dt = Some(Arc::new(map)),
            Repr::Composed { .. } => panic!("attach derivatives before composing"),
        }
        self
    }

    /// Attaches an analytic gradient writing into a `d` buffer.
    pub fn with_gradient<F>(mut self, map: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        match &mut self.repr {
            Repr::Closures { grad, .. } => *grad = Some(Arc::new(map)),
            Repr::Composed { .. } => panic!("attach derivatives before composing"),
        }
        self
    }

    /// Attaches an analytic hessian writing into a row-major `d x d` buffer.
    pub fn with_hessian<F>(mut self, map: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        match &mut self.repr {
            Repr::Closures { hess, .. } => *hess = Some(Arc::new(map)),
            Repr::Composed { .. } => panic!("attach derivatives before composing"),
        }
        self
    }

    /// Restricts the admissible domain. Points outside fail evaluation with a
    /// domain error rather than producing garbage.
    pub fn with_domain<F>(mut self, predicate: F) -> Self
    where
        F: Fn(f64, &[f64]) -> bool + Send + Sync + 'static,
    {
        match &mut self.repr {
            Repr::Closures { domain, .. } => *domain = Some(Arc::new(predicate)),
            Repr::Composed { .. } => panic!("attach the domain before composing"),
        }
        self
    }

    /// Attaches an exact increment map `(t, x, dx) -> v(t, x + dx) - v(t, x)`.
    /// Affine fields can supply `<grad, dx>` here so jump increments carry no
    /// cancellation error. Panics if called on a composed field.
    pub fn with_increment<F>(mut self, map: F) -> Self
    where
        F: Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        match &mut self.repr {
            Repr::Closures { increment, .. } => *increment = Some(Arc::new(map)),
            Repr::Composed { .. } => panic!("attach the increment map before composing"),
        }
        self
    }

    /// Overrides the FD steps (`h_t`, `h_x`). The spatial step is used as
    /// given instead of the `max(1e-5, 1e-7 |x|)` default.
    pub fn with_fd_steps(mut self, h_t: f64, h_x: f64) -> Self {
        assert!(h_t > 0.0 && h_x > 0.0, "FD steps must be positive");
        self.fd_step_t = h_t;
        self.fd_step_x = Some(h_x);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_analytic_derivatives(&self) -> bool {
        match &self.repr {
            Repr::Closures { dt, grad, hess, .. } => {
                dt.is_some() && grad.is_some() && hess.is_some()
            }
            Repr::Composed { inner, .. } => inner.has_analytic_derivatives(),
        }
    }

    /// True when `(t, x)` lies in the admissible domain.
    pub fn admissible(&self, t: f64, x: &[f64]) -> bool {
        if t < 0.0 || x.len() != self.dim {
            return false;
        }
        match &self.repr {
            Repr::Closures { domain, .. } => domain.as_ref().map_or(true, |d| d(t, x)),
            Repr::Composed { transform, inner } => {
                inner.admissible(t, x) && transform.contains((inner.raw_value(t, x)).unwrap_or(f64::NAN))
            }
        }
    }

    fn check_point(&self, t: f64, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Config(format!(
                "field expects dimension {}, got point of dimension {}",
                self.dim,
                x.len()
            )));
        }
        if t < 0.0 {
            return Err(Error::Domain {
                t,
                x: x.to_vec(),
                message: "fields are defined for t >= 0".into(),
            });
        }
        if !self.admissible(t, x) {
            return Err(Error::Domain {
                t,
                x: x.to_vec(),
                message: "point outside the field's admissible domain".into(),
            });
        }
        Ok(())
    }

    /// Raw value without the final domain check on composed output (used
    /// internally so `admissible` does not recurse).
    fn raw_value(&self, t: f64, x: &[f64]) -> Result<f64> {
        match &self.repr {
            Repr::Closures { value, .. } => Ok(value(t, x)),
            Repr::Composed { transform, inner } => {
                let v = inner.raw_value(t, x)?;
                Ok(transform.value(v))
            }
        }
    }

    /// Evaluates the field, enforcing the domain.
    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.check_point(t, x)?;
        match &self.repr {
            Repr::Closures { value, .. } => Ok(value(t, x)),
            Repr::Composed { transform, inner } => {
                let v = inner.value(t, x)?;
                if !transform.contains(v) {
                    return Err(Error::Domain {
                        t,
                        x: x.to_vec(),
                        message: format!(
                            "transform {} requires {}, inner value is {v}",
                            transform.label(),
                            transform.domain_description()
                        ),
                    });
                }
                Ok(transform.value(v))
            }
        }
    }

    /// Increment `v(t, x + dx) - v(t, x)`, enforcing the domain at both ends.
    /// Uses the exact increment map when one is attached, otherwise the value
    /// difference.
    pub fn increment(&self, t: f64, x: &[f64], dx: &[f64]) -> Result<f64> {
        if dx.len() != self.dim {
            return Err(Error::Config(format!(
                "field expects dimension {}, got increment of dimension {}",
                self.dim,
                dx.len()
            )));
        }
        self.check_point(t, x)?;
        let shifted: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a + b).collect();
        if let Repr::Closures {
            increment: Some(map),
            ..
        } = &self.repr
        {
            self.check_point(t, &shifted)?;
            return Ok(map(t, x, dx));
        }
        Ok(self.value(t, &shifted)? - self.value(t, x)?)
    }

    /// All derivatives at `(t, x)`: analytic maps where available, central FD
    /// otherwise. The hessian is symmetrized before returning.
    pub fn derivatives(&self, t: f64, x: &[f64]) -> Result<FieldDerivatives> {
        self.check_point(t, x)?;
        match &self.repr {
            Repr::Closures {
                dt, grad, hess, ..
            } => {
                let dt_val = match dt {
                    Some(map) => map(t, x),
                    None => self.fd_time_derivative(t, x)?,
                };
                let mut grad_val = vec![0.0; self.dim];
                match grad {
                    Some(map) => map(t, x, &mut grad_val),
                    None => self.fd_gradient(t, x, &mut grad_val)?,
                }
                let mut hess_val = vec![0.0; self.dim * self.dim];
                match hess {
                    Some(map) => map(t, x, &mut hess_val),
                    None => self.fd_hessian(t, x, &mut hess_val)?,
                }
                symmetrize(&mut hess_val, self.dim);
                Ok(FieldDerivatives {
                    dt: dt_val,
                    grad: grad_val,
                    hess: hess_val,
                })
            }
            Repr::Composed { transform, inner } => {
                let v = inner.value(t, x)?;
                if !transform.contains(v) {
                    return Err(Error::Domain {
                        t,
                        x: x.to_vec(),
                        message: format!(
                            "transform {} requires {}, inner value is {v}",
                            transform.label(),
                            transform.domain_description()
                        ),
                    });
                }
                let d = inner.derivatives(t, x)?;
                let f1 = transform.d1(v);
                let f2 = transform.d2(v);
                let dt_val = f1 * d.dt;
                let grad_val: Vec<f64> = d.grad.iter().map(|g| f1 * g).collect();
                let mut hess_val = vec![0.0; self.dim * self.dim];
                for i in 0..self.dim {
                    for j in 0..self.dim {
                        let mut h = f1 * d.hess[i * self.dim + j];
                        // Skipping the outer-product term when f'' = 0 keeps
                        // identity composition bit-identical to the inner field.
                        if f2 != 0.0 {
                            h += f2 * (d.grad[i] * d.grad[j]);
                        }
                        hess_val[i * self.dim + j] = h;
                    }
                }
                symmetrize(&mut hess_val, self.dim);
                Ok(FieldDerivatives {
                    dt: dt_val,
                    grad: grad_val,
                    hess: hess_val,
                })
            }
        }
    }

    /// Derivatives computed purely by finite differences of the value map,
    /// ignoring any analytic maps. Used to validate analytic derivatives.
    pub fn fd_derivatives(&self, t: f64, x: &[f64]) -> Result<FieldDerivatives> {
        self.check_point(t, x)?;
        let dt = self.fd_time_derivative(t, x)?;
        let mut grad = vec![0.0; self.dim];
        self.fd_gradient(t, x, &mut grad)?;
        let mut hess = vec![0.0; self.dim * self.dim];
        self.fd_hessian(t, x, &mut hess)?;
        symmetrize(&mut hess, self.dim);
        Ok(FieldDerivatives { dt, grad, hess })
    }

    fn value_for_fd(&self, t: f64, x: &[f64]) -> Result<f64> {
        if !self.admissible(t, x) {
            return Err(Error::Domain {
                t,
                x: x.to_vec(),
                message: "finite-difference stencil leaves the admissible domain".into(),
            });
        }
        self.raw_value(t, x)
    }

    fn step_x(&self, x: &[f64]) -> f64 {
        self.fd_step_x
            .unwrap_or_else(|| DEFAULT_FD_STEP_X_ABS.max(DEFAULT_FD_STEP_X_REL * linalg::norm(x)))
    }

    fn check_step(&self, h: f64, scale: f64, t: f64, x: &[f64]) -> Result<()> {
        // A step that vanishes against the point's magnitude produces a zero
        // or catastrophically cancelled difference; refuse rather than return
        // noise.
        if h <= 16.0 * f64::EPSILON * scale.abs().max(1.0) {
            return Err(Error::Config(format!(
                "finite-difference step {h} underflows at t = {t}, x = {x:?}"
            )));
        }
        Ok(())
    }

    fn fd_time_derivative(&self, t: f64, x: &[f64]) -> Result<f64> {
        let h = self.fd_step_t;
        self.check_step(h, t, t, x)?;
        if t >= h {
            let fp = self.value_for_fd(t + h, x)?;
            let fm = self.value_for_fd(t - h, x)?;
            Ok((fp - fm) / (2.0 * h))
        } else {
            // One-sided second-order stencil at the t = 0 boundary.
            let f0 = self.value_for_fd(t, x)?;
            let f1 = self.value_for_fd(t + h, x)?;
            let f2 = self.value_for_fd(t + 2.0 * h, x)?;
            Ok((-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h))
        }
    }

    fn fd_gradient(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let h = self.step_x(x);
        let mut xp = x.to_vec();
        for i in 0..self.dim {
            self.check_step(h, x[i], t, x)?;
            xp[i] = x[i] + h;
            let fp = self.value_for_fd(t, &xp)?;
            xp[i] = x[i] - h;
            let fm = self.value_for_fd(t, &xp)?;
            xp[i] = x[i];
            out[i] = (fp - fm) / (2.0 * h);
        }
        Ok(())
    }

    fn fd_hessian(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let h = self.step_x(x);
        let d = self.dim;
        let mut xp = x.to_vec();
        let f0 = self.value_for_fd(t, x)?;
        for i in 0..d {
            self.check_step(h, x[i], t, x)?;
            xp[i] = x[i] + h;
            let fp = self.value_for_fd(t, &xp)?;
            xp[i] = x[i] - h;
            let fm = self.value_for_fd(t, &xp)?;
            xp[i] = x[i];
            out[i * d + i] = (fp - 2.0 * f0 + fm) / (h * h);
            for j in (i + 1)..d {
                // Four-point stencil for mixed partials; assigning both
                // triangles makes the FD hessian symmetric by construction.
                xp[i] = x[i] + h;
                xp[j] = x[j] + h;
                let fpp = self.value_for_fd(t, &xp)?;
                xp[j] = x[j] - h;
                let fpm = self.value_for_fd(t, &xp)?;
                xp[i] = x[i] - h;
                xp[j] = x[j] + h;
                let fmp = self.value_for_fd(t, &xp)?;
                xp[j] = x[j] - h;
                let fmm = self.value_for_fd(t, &xp)?;
                xp[i] = x[i];
                xp[j] = x[j];
                let mixed = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
                out[i * d + j] = mixed;
                out[j * d + i] = mixed;
            }
        }
        Ok(())
    }
}

fn symmetrize(hess: &mut [f64], d: usize) {
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (hess[i * d + j] + hess[j * d + i]);
            hess[i * d + j] = avg;
            hess[j * d + i] = avg;
        }
    }
}

/// Composes `f` with `v`, producing the field `f(v(t, x))` whose derivatives
/// follow the chain rule:
/// `dt(f.v) = f'(v) dt v`, `grad(f.v) = f'(v) grad v`,
/// `hess(f.v) = f'(v) hess v + f''(v) grad v (grad v)^T`.
pub fn compose(f: &FTransform, v: &ScalarField) -> ScalarField {
    ScalarField {
        dim: v.dim,
        repr: Repr::Composed {
            transform: f.clone(),
            inner: Box::new(v.clone()),
        },
        fd_step_t: v.fd_step_t,
        fd_step_x: v.fd_step_x,
    }
}

/// Which scalar transform a value represents; used by the characterization
/// routines to select the closed-form per-case coefficients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransformKind {
    Identity,
    Log,
    /// `f(v) = v^(2k+1)`.
    OddPower { k: i32 },
    Tan,
    Custom,
}

/// A scalar transform `f` with first and second derivatives and an admissible
/// domain for its argument.
#[derive(Clone)]
pub struct FTransform {
    kind: TransformKind,
    label: String,
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    df: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    d2f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    domain: Arc<dyn Fn(f64) -> bool + Send + Sync>,
    domain_desc: String,
}

impl fmt::Debug for FTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FTransform({})", self.label)
    }
}

impl FTransform {
    pub fn identity() -> Self {
        FTransform {
            kind: TransformKind::Identity,
            label: "identity".into(),
            f: Arc::new(|v| v),
            df: Arc::new(|_| 1.0),
            d2f: Arc::new(|_| 0.0),
            domain: Arc::new(|_| true),
            domain_desc: "all of R".into(),
        }
    }

    pub fn log() -> Self {
        FTransform {
            kind: TransformKind::Log,
            label: "log".into(),
            f: Arc::new(|v| v.ln()),
            df: Arc::new(|v| 1.0 / v),
            d2f: Arc::new(|v| -1.0 / (v * v)),
            domain: Arc::new(|v| v > 0.0),
            domain_desc: "v > 0".into(),
        }
    }

    /// `f(v) = v^(2k+1)` for integer `k`. Negative `k` gives negative odd
    /// powers, admissible away from `v = 0`.
    pub fn odd_power(k: i32) -> Self {
        let p = 2 * k + 1;
        let c1 = p as f64;
        let c2 = (p * (p - 1)) as f64;
        // v^p is entire for p >= 0; only negative powers have a pole at 0.
        let needs_nonzero = p < 0;
        FTransform {
            kind: TransformKind::OddPower { k },
            label: format!("x^{p}"),
            f: Arc::new(move |v| v.powi(p)),
            df: Arc::new(move |v| c1 * v.powi(p - 1)),
            d2f: Arc::new(move |v| if c2 == 0.0 { 0.0 } else { c2 * v.powi(p - 2) }),
            domain: Arc::new(move |v| !needs_nonzero || v != 0.0),
            domain_desc: if needs_nonzero {
                "v != 0".into()
            } else {
                "all of R".into()
            },
        }
    }

    pub fn tan() -> Self {
        FTransform {
            kind: TransformKind::Tan,
            label: "tan".into(),
            f: Arc::new(|v| v.tan()),
            df: Arc::new(|v| {
                let c = v.cos();
                1.0 / (c * c)
            }),
            d2f: Arc::new(|v| {
                let c = v.cos();
                2.0 * v.tan() / (c * c)
            }),
            domain: Arc::new(|v| v.abs() < FRAC_PI_2),
            domain_desc: "|v| < pi/2".into(),
        }
    }

    /// A user-supplied transform with explicit derivatives and domain.
    pub fn custom<F, D1, D2, P>(
        label: impl Into<String>,
        domain_desc: impl Into<String>,
        f: F,
        df: D1,
        d2f: D2,
        domain: P,
    ) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D1: Fn(f64) -> f64 + Send + Sync + 'static,
        D2: Fn(f64) -> f64 + Send + Sync + 'static,
        P: Fn(f64) -> bool + Send + Sync + 'static,
    {
        FTransform {
            kind: TransformKind::Custom,
            label: label.into(),
            f: Arc::new(f),
            df: Arc::new(df),
            d2f: Arc::new(d2f),
            domain: Arc::new(domain),
            domain_desc: domain_desc.into(),
        }
    }

    /// Parses a transform name as used in configs: `identity`, `log`, `tan`,
    /// or `x^p` with odd `p` (e.g. `x^3`, `x^5`).
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(Self::identity()),
            "log" => Ok(Self::log()),
            "tan" => Ok(Self::tan()),
            _ => {
                if let Some(p) = name.strip_prefix("x^").and_then(|s| s.parse::<i32>().ok()) {
                    if p.rem_euclid(2) == 1 {
                        return Ok(Self::odd_power((p - 1) / 2));
                    }
                }
                Err(Error::Config(format!(
                    "unknown transform `{name}` (expected identity, log, tan, or x^p with odd p)"
                )))
            }
        }
    }

    pub fn kind(&self) -> &TransformKind {
        &self.kind
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn domain_description(&self) -> &str {
        &self.domain_desc
    }

    /// True when `v` is an admissible argument.
    pub fn contains(&self, v: f64) -> bool {
        v.is_finite() && (self.domain)(v)
    }

    /// `f(v)`. Callers check [`contains`](Self::contains) first.
    pub fn value(&self, v: f64) -> f64 {
        (self.f)(v)
    }

    /// `f'(v)`.
    pub fn d1(&self, v: f64) -> f64 {
        (self.df)(v)
    }

    /// `f''(v)`.
    pub fn d2(&self, v: f64) -> f64 {
        (self.d2f)(v)
    }
}

/// `v(t, x) = <a, x> - c t`: the affine field whose gradient is constant.
pub fn linear(a: Vec<f64>, c: f64) -> ScalarField {
    let dim = a.len();
    let a_val = a.clone();
    let a_inc = a.clone();
    let a_grad = a;
    ScalarField::from_closure(dim, move |t, x| linalg::dot(&a_val, x) - c * t)
        .with_time_derivative(move |_, _| -c)
        .with_gradient(move |_, _, out| out.copy_from_slice(&a_grad))
        .with_hessian(|_, _, out| out.fill(0.0))
        .with_increment(move |_, _, dx| linalg::dot(&a_inc, dx))
}

/// `v(t, x) = |x|^2 / 2`.
pub fn quadratic(dim: usize) -> ScalarField {
    ScalarField::from_closure(dim, |_, x| 0.5 * linalg::dot(x, x))
        .with_time_derivative(|_, _| 0.0)
        .with_gradient(|_, x, out| out.copy_from_slice(x))
        .with_hessian(move |_, _, out| {
            out.fill(0.0);
            for i in 0..dim {
                out[i * dim + i] = 1.0;
            }
        })
}

/// `v(t, x) = exp(<a, x> - c t)`.
pub fn exp_linear(a: Vec<f64>, c: f64) -> ScalarField {
    let dim = a.len();
    let a0 = a.clone();
    let a1 = a.clone();
    let a2 = a;
    let val = move |t: f64, x: &[f64]| (linalg::dot(&a0, x) - c * t).exp();
    let val_g = val.clone();
    let val_h = val.clone();
    ScalarField::from_closure(dim, val.clone())
        .with_time_derivative(move |t, x| -c * val(t, x))
        .with_gradient(move |t, x, out| {
            let v = val_g(t, x);
            for i in 0..dim {
                out[i] = a1[i] * v;
            }
        })
        .with_hessian(move |t, x, out| {
            let v = val_h(t, x);
            for i in 0..dim {
                for j in 0..dim {
                    out[i * dim + j] = a2[i] * a2[j] * v;
                }
            }
        })
}

/// Constant field.
pub fn constant(dim: usize, c: f64) -> ScalarField {
    ScalarField::from_closure(dim, move |_, _| c)
        .with_time_derivative(|_, _| 0.0)
        .with_gradient(|_, _, out| out.fill(0.0))
        .with_hessian(|_, _, out| out.fill(0.0))
}

/// `v(t, x) = log sum_i c_i exp(a_i x_j - a_i^2 t / 2)` over the coordinate
/// `j = coord`: the logarithm of a heat-equation solution, evaluated with the
/// usual max-shift for stability. Each weight `c_i` must be positive.
pub fn log_sum_exp(dim: usize, coord: usize, modes: Vec<(f64, f64)>) -> Result<ScalarField> {
    if modes.is_empty() {
        return Err(Error::Config("log_sum_exp needs at least one mode".into()));
    }
    if coord >= dim {
        return Err(Error::Config(format!(
            "log_sum_exp coordinate {coord} out of range for dimension {dim}"
        )));
    }
    for &(_, c) in &modes {
        if !(c > 0.0) {
            return Err(Error::Config(format!(
                "log_sum_exp weights must be positive, got {c}"
            )));
        }
    }

    // theta_i = ln c_i + a_i x - a_i^2 t / 2; softmax weights p_i.
    let softmax = move |modes: &[(f64, f64)], t: f64, s: f64| -> (f64, Vec<f64>) {
        let theta: Vec<f64> = modes
            .iter()
            .map(|&(a, c)| c.ln() + a * s - 0.5 * a * a * t)
            .collect();
        let m = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = theta.iter().map(|&th| (th - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        let value = m + total.ln();
        let p = exps.iter().map(|&e| e / total).collect();
        (value, p)
    };

    let m_val = modes.clone();
    let m_dt = modes.clone();
    let m_grad = modes.clone();
    let m_hess = modes;
    let sm_val = softmax;
    let sm_dt = softmax;
    let sm_grad = softmax;
    let sm_hess = softmax;

    Ok(ScalarField::from_closure(dim, move |t, x| {
        sm_val(&m_val, t, x[coord]).0
    })
    .with_time_derivative(move |t, x| {
        let (_, p) = sm_dt(&m_dt, t, x[coord]);
        -0.5 * p
            .iter()
            .zip(&m_dt)
            .map(|(pi, &(a, _))| pi * a * a)
            .sum::<f64>()
    })
    .with_gradient(move |t, x, out| {
        let (_, p) = sm_grad(&m_grad, t, x[coord]);
        out.fill(0.0);
        out[coord] = p.iter().zip(&m_grad).map(|(pi, &(a, _))| pi * a).sum();
    })
    .with_hessian(move |t, x, out| {
        let (_, p) = sm_hess(&m_hess, t, x[coord]);
        let mean: f64 = p.iter().zip(&m_hess).map(|(pi, &(a, _))| pi * a).sum();
        let second: f64 = p.iter().zip(&m_hess).map(|(pi, &(a, _))| pi * a * a).sum();
        out.fill(0.0);
        out[coord * dim + coord] = second - mean * mean;
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn sin_cos() -> ScalarField {
        ScalarField::from_closure(2, |_, x| x[0].sin() * x[1].cos())
            .with_time_derivative(|_, _| 0.0)
            .with_gradient(|_, x, out| {
                out[0] = x[0].cos() * x[1].cos();
                out[1] = -x[0].sin() * x[1].sin();
            })
            .with_hessian(|_, x, out| {
                let (s0, c0) = x[0].sin_cos();
                let (s1, c1) = x[1].sin_cos();
                out[0] = -s0 * c1;
                out[1] = -c0 * s1;
                out[2] = -c0 * s1;
                out[3] = -s0 * c1;
            })
    }

    #[test]
    fn fd_matches_analytic_on_smooth_field() {
        let v = sin_cos().with_fd_steps(1e-4, 1e-4);
        let (t, x) = (0.3, [0.3, 0.7]);
        let a = v.derivatives(t, &x).unwrap();
        let f = v.fd_derivatives(t, &x).unwrap();
        assert_abs_diff_eq!(a.dt, f.dt, epsilon = 1e-8);
        for i in 0..2 {
            assert_abs_diff_eq!(a.grad[i], f.grad[i], epsilon = 1e-7);
        }
        for i in 0..4 {
            assert_abs_diff_eq!(a.hess[i], f.hess[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn fd_error_is_second_order() {
        // Halving h should cut the error by about 4; the acceptance bound on
        // the ratio is [3.2, 4.8].
        let (t, x) = (0.3, [0.3, 0.7]);
        let exact = sin_cos().derivatives(t, &x).unwrap();
        let err_at = |h: f64| {
            let fd = sin_cos()
                .with_fd_steps(h, h)
                .fd_derivatives(t, &x)
                .unwrap();
            let mut e = 0.0f64;
            for i in 0..2 {
                e = e.max((fd.grad[i] - exact.grad[i]).abs());
            }
            for i in 0..4 {
                e = e.max((fd.hess[i] - exact.hess[i]).abs());
            }
            e
        };
        let ratio = err_at(1e-3) / err_at(5e-4);
        assert!(
            (3.2..=4.8).contains(&ratio),
            "second-order ratio out of range: {ratio}"
        );
    }

    #[test]
    fn one_sided_time_stencil_at_zero() {
        let v = ScalarField::from_closure(1, |t, x| (t * t + t) * x[0]);
        let d = v.fd_derivatives(0.0, &[2.0]).unwrap();
        // d/dt of (t^2 + t) x at t = 0 is x; the one-sided stencil is exact
        // for quadratics up to roundoff.
        assert_abs_diff_eq!(d.dt, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn domain_violation_in_stencil_is_an_error() {
        let v = ScalarField::from_closure(1, |_, x| x[0].ln()).with_domain(|_, x| x[0] > 0.0);
        // The point itself is admissible but x - h is not.
        let err = v.fd_derivatives(0.5, &[5e-6]).unwrap_err();
        assert!(matches!(err, Error::Domain { .. }), "got {err:?}");
        // Far from the boundary the same field differentiates fine.
        let d = v.fd_derivatives(0.5, &[2.0]).unwrap();
        assert_abs_diff_eq!(d.grad[0], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn fd_step_underflow_is_a_config_error() {
        let v = ScalarField::from_closure(1, |_, x| x[0] * x[0]).with_fd_steps(1e-5, 1e-14);
        let err = v.fd_derivatives(0.0, &[1e4]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn hessian_is_symmetrized() {
        // Deliberately asymmetric analytic hessian; derivatives() must return
        // the symmetric part.
        let v = ScalarField::from_closure(2, |_, x| x[0] * x[1]).with_hessian(|_, _, out| {
            out.copy_from_slice(&[0.0, 1.0, 3.0, 0.0]);
        });
        let d = v.derivatives(0.0, &[1.0, 1.0]).unwrap();
        assert_eq!(d.hess[1], 2.0);
        assert_eq!(d.hess[2], 2.0);
    }

    #[test]
    fn compose_identity_is_bit_identical() {
        let v = sin_cos();
        let composed = compose(&FTransform::identity(), &v);
        let (t, x) = (0.7, [0.4, -1.1]);
        assert_eq!(
            v.value(t, &x).unwrap().to_bits(),
            composed.value(t, &x).unwrap().to_bits()
        );
        let dv = v.derivatives(t, &x).unwrap();
        let dc = composed.derivatives(t, &x).unwrap();
        assert_eq!(dv.dt.to_bits(), dc.dt.to_bits());
        for i in 0..2 {
            assert_eq!(dv.grad[i].to_bits(), dc.grad[i].to_bits());
        }
        for i in 0..4 {
            assert_eq!(dv.hess[i].to_bits(), dc.hess[i].to_bits());
        }
    }

    #[test]
    fn compose_log_chain_rule() {
        // v = exp(<a, x> - c t) > 0, so log . v is the affine field back.
        let a = vec![0.5, -0.25];
        let c = 0.125;
        let inner = exp_linear(a.clone(), c);
        let composed = compose(&FTransform::log(), &inner);
        let (t, x) = (0.3, [0.2, 0.9]);
        let d = composed.derivatives(t, &x).unwrap();
        assert_relative_eq!(d.dt, -c, max_relative = 1e-12);
        for i in 0..2 {
            assert_relative_eq!(d.grad[i], a[i], max_relative = 1e-12);
            for j in 0..2 {
                assert_abs_diff_eq!(d.hess[i * 2 + j], 0.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn compose_respects_transform_domain() {
        let v = linear(vec![1.0], 0.0); // v = x, takes negative values
        let composed = compose(&FTransform::log(), &v);
        assert!(composed.value(0.0, &[2.0]).is_ok());
        let err = composed.value(0.0, &[-1.0]).unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
        assert!(!composed.admissible(0.0, &[-1.0]));
    }

    #[test]
    fn transform_derivatives_match_fd() {
        let cases = [
            FTransform::identity(),
            FTransform::log(),
            FTransform::odd_power(1),
            FTransform::odd_power(2),
            FTransform::tan(),
        ];
        let h = 1e-5;
        for f in &cases {
            for &v in &[0.4, 0.9, 1.3] {
                let d1_fd = (f.value(v + h) - f.value(v - h)) / (2.0 * h);
                let d2_fd = (f.value(v + h) - 2.0 * f.value(v) + f.value(v - h)) / (h * h);
                assert_relative_eq!(f.d1(v), d1_fd, max_relative = 1e-7);
                assert_abs_diff_eq!(f.d2(v), d2_fd, epsilon = 1e-4 * (1.0 + f.d2(v).abs()));
            }
        }
    }

    #[test]
    fn transform_domains() {
        assert!(!FTransform::log().contains(0.0));
        assert!(!FTransform::log().contains(-1.0));
        assert!(FTransform::log().contains(1e-9));
        assert!(!FTransform::tan().contains(FRAC_PI_2));
        assert!(FTransform::tan().contains(1.5));
        assert!(FTransform::odd_power(1).contains(0.0));
        assert!(!FTransform::odd_power(-1).contains(0.0));
        assert!(!FTransform::identity().contains(f64::NAN));
    }

    #[test]
    fn transform_by_name() {
        assert_eq!(*FTransform::by_name("x^3").unwrap().kind(), TransformKind::OddPower { k: 1 });
        assert_eq!(*FTransform::by_name("x^5").unwrap().kind(), TransformKind::OddPower { k: 2 });
        assert_eq!(*FTransform::by_name("log").unwrap().kind(), TransformKind::Log);
        assert!(FTransform::by_name("x^4").is_err());
        assert!(FTransform::by_name("sinh").is_err());
    }

    #[test]
    fn log_sum_exp_derivatives_match_fd() {
        let v = log_sum_exp(2, 0, vec![(1.0, 1.0), (2.0, 1.0)]).unwrap();
        let (t, x) = (0.4, [0.3, -0.8]);
        let a = v.derivatives(t, &x).unwrap();
        let f = v.fd_derivatives(t, &x).unwrap();
        assert_abs_diff_eq!(a.dt, f.dt, epsilon = 1e-8);
        assert_abs_diff_eq!(a.grad[0], f.grad[0], epsilon = 1e-8);
        assert_abs_diff_eq!(a.grad[1], 0.0);
        assert_abs_diff_eq!(a.hess[0], f.hess[0], epsilon = 1e-5);
    }

    #[test]
    fn log_sum_exp_is_stable_far_out() {
        // Naive evaluation would overflow exp(800).
        let v = log_sum_exp(1, 0, vec![(1.0, 1.0), (2.0, 1.0)]).unwrap();
        let val = v.value(0.0, &[400.0]).unwrap();
        assert_relative_eq!(val, 800.0, max_relative = 1e-12);
        let d = v.derivatives(0.0, &[400.0]).unwrap();
        assert_relative_eq!(d.grad[0], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn log_sum_exp_rejects_bad_modes() {
        assert!(log_sum_exp(1, 0, vec![]).is_err());
        assert!(log_sum_exp(1, 0, vec![(1.0, -1.0)]).is_err());
        assert!(log_sum_exp(1, 3, vec![(1.0, 1.0)]).is_err());
    }

    #[test]
    fn negative_time_rejected() {
        let v = constant(1, 1.0);
        assert!(v.value(-0.1, &[0.0]).is_err());
        assert!(!v.admissible(-0.1, &[0.0]));
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let v = constant(2, 1.0);
        let err = v.value(0.0, &[1.0]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn linear_increment_is_exact() {
        // The attached increment map returns <a, dx> directly, so the result
        // is one dot product, not a difference of two values.
        let v = linear(vec![2.0, -3.0], 0.7);
        let inc = v.increment(0.3, &[0.1, 0.2], &[0.5, -1.0]).unwrap();
        assert_eq!(inc, 2.0 * 0.5 + (-3.0) * (-1.0));
    }

    #[test]
    fn increment_falls_back_to_value_difference() {
        let v = ScalarField::from_closure(1, |_, x| x[0] * x[0]);
        let inc = v.increment(0.0, &[1.0], &[0.5]).unwrap();
        assert_abs_diff_eq!(inc, 2.25 - 1.0, epsilon = 1e-15);
    }

    #[test]
    fn increment_checks_domain_at_both_ends() {
        let v = ScalarField::from_closure(1, |_, x| x[0].ln())
            .with_domain(|_, x| x[0] > 0.0)
            .with_increment(|_, x, dx| ((x[0] + dx[0]) / x[0]).ln());
        assert!(v.increment(0.0, &[1.0], &[1.0]).is_ok());
        // Landing point outside the domain.
        assert!(v.increment(0.0, &[1.0], &[-2.0]).is_err());
        // Start point outside the domain.
        assert!(v.increment(0.0, &[-1.0], &[3.0]).is_err());
    }
}
