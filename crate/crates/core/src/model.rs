//! SDE coefficient bundles `(b, sigma, gamma)` with optional jump data, the
//! built-in example models, and numeric probes for the standing growth and
//! monotonicity hypotheses.
//!
//! The drift image condition `b = sigma gamma` is central: models that claim
//! it construct the drift either through the same matrix-vector product used
//! by [`drift_image_residual`] or through expressions that cancel exactly in
//! floating point, so the residual is exactly zero on probe grids rather than
//! merely small.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{self, ScalarField};
use crate::linalg;

pub type CoeffMap = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
pub type JumpCoeffMap = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type IntensityMap = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// One atom of the finite jump measure: mark `u` with weight `nu > 0`.
#[derive(Debug, Clone)]
pub struct JumpAtom {
    pub mark: Vec<f64>,
    pub weight: f64,
}

/// Finite-activity jump data: an atomic measure `nu` on marks, the jump
/// coefficient map (the `f` of the jump SDE; named `jump_coeff` here to avoid
/// clashing with the scalar transform `f`), and the thinning intensity
/// `lambda(t, u)` with values in (0, 1].
#[derive(Clone)]
pub struct JumpSpec {
    atoms: Vec<JumpAtom>,
    mark_dim: usize,
    coeff: JumpCoeffMap,
    intensity: IntensityMap,
}

impl JumpSpec {
    /// An empty atom list is allowed (the jump integrals all vanish); the
    /// simulator separately requires positive total mass.
    pub fn new<C, L>(atoms: Vec<JumpAtom>, coeff: C, intensity: L) -> Result<Self>
    where
        C: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        L: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        let mark_dim = atoms.first().map_or(0, |a| a.mark.len());
        for (i, atom) in atoms.iter().enumerate() {
            if atom.mark.len() != mark_dim {
                return Err(Error::Config(format!(
                    "jump atom {i} has mark dimension {}, expected {mark_dim}",
                    atom.mark.len()
                )));
            }
            if !(atom.weight > 0.0 && atom.weight.is_finite()) {
                return Err(Error::Validation(format!(
                    "jump atom {i} weight must be positive and finite, got {}",
                    atom.weight
                )));
            }
        }
        Ok(JumpSpec {
            atoms,
            mark_dim,
            coeff: Arc::new(coeff),
            intensity: Arc::new(intensity),
        })
    }

    pub fn atoms(&self) -> &[JumpAtom] {
        &self.atoms
    }

    pub fn mark_dim(&self) -> usize {
        self.mark_dim
    }

    /// Total mass of the atomic measure.
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    /// Writes `jump_coeff(t, x, u)` into `out` (length d).
    pub fn coeff_into(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.coeff)(t, x, u, out);
    }

    /// Raw intensity value, unvalidated.
    pub fn intensity(&self, t: f64, u: &[f64]) -> f64 {
        (self.intensity)(t, u)
    }

    /// Intensity with the (0, 1] contract enforced.
    pub fn intensity_checked(&self, t: f64, u: &[f64]) -> Result<f64> {
        let lam = self.intensity(t, u);
        if lam > 0.0 && lam <= 1.0 {
            Ok(lam)
        } else {
            Err(Error::Validation(format!(
                "intensity lambda = {lam} outside (0, 1] at t = {t}, u = {u:?}"
            )))
        }
    }
}

/// Coefficient bundle of a (jump-)diffusion: drift `b: R^d`, diffusion
/// `sigma: d x m`, Girsanov kernel `gamma: R^m`, optional jumps.
#[derive(Clone)]
pub struct ModelSpec {
    name: String,
    d: usize,
    m: usize,
    drift: CoeffMap,
    diffusion: CoeffMap,
    gamma: CoeffMap,
    jump: Option<JumpSpec>,
    reference_field: Option<ScalarField>,
    default_x0: Vec<f64>,
    drift_in_image: bool,
    notes: String,
}

impl ModelSpec {
    pub fn new<B, S, G>(
        name: impl Into<String>,
        d: usize,
        m: usize,
        drift: B,
        diffusion: S,
        gamma: G,
    ) -> Self
    where
        B: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        S: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        G: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        assert!(d > 0 && m > 0, "state and noise dimensions must be positive");
        ModelSpec {
            name: name.into(),
            d,
            m,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            gamma: Arc::new(gamma),
            jump: None,
            reference_field: None,
            default_x0: vec![0.0; d],
            drift_in_image: false,
            notes: String::new(),
        }
    }

    pub fn with_jump(mut self, jump: JumpSpec) -> Self {
        self.jump = Some(jump);
        self
    }

    pub fn with_reference_field(mut self, field: ScalarField) -> Self {
        assert_eq!(field.dim(), self.d, "reference field dimension mismatch");
        self.reference_field = Some(field);
        self
    }

    pub fn with_default_x0(mut self, x0: Vec<f64>) -> Self {
        assert_eq!(x0.len(), self.d, "x0 dimension mismatch");
        self.default_x0 = x0;
        self
    }

    /// Declares that `b = sigma gamma` holds on the admissible domain.
    pub fn with_drift_in_image(mut self, yes: bool) -> Self {
        self.drift_in_image = yes;
        self
    }

    pub fn with_notes(mut self, notes: impl Into<String>) -> Self {
        self.notes = notes.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn jump(&self) -> Option<&JumpSpec> {
        self.jump.as_ref()
    }

    pub fn reference_field(&self) -> Option<&ScalarField> {
        self.reference_field.as_ref()
    }

    pub fn default_x0(&self) -> &[f64] {
        &self.default_x0
    }

    pub fn claims_drift_in_image(&self) -> bool {
        self.drift_in_image
    }

    pub fn notes(&self) -> &str {
        &self.notes
    }

    /// Writes `b(t, x)` into `out` (length d).
    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.d);
        assert_eq!(out.len(), self.d, "drift buffer length");
        (self.drift)(t, x, out);
    }

    /// Writes `sigma(t, x)` row-major into `out` (length d*m).
    pub fn diffusion_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.d);
        assert_eq!(out.len(), self.d * self.m, "diffusion buffer length");
        (self.diffusion)(t, x, out);
    }

    /// Writes `gamma(t, x)` into `out` (length m).
    pub fn gamma_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.d);
        assert_eq!(out.len(), self.m, "gamma buffer length");
        (self.gamma)(t, x, out);
    }

    pub fn drift_vec(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.drift_into(t, x, &mut out);
        out
    }

    pub fn diffusion_mat(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d * self.m];
        self.diffusion_into(t, x, &mut out);
        out
    }

    pub fn gamma_vec(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        self.gamma_into(t, x, &mut out);
        out
    }

    /// Checks that every coefficient is finite at `(t, x)`.
    pub fn check_finite_at(&self, t: f64, x: &[f64]) -> Result<()> {
        let all = |v: &[f64]| v.iter().all(|c| c.is_finite());
        if all(&self.drift_vec(t, x)) && all(&self.diffusion_mat(t, x)) && all(&self.gamma_vec(t, x))
        {
            Ok(())
        } else {
            Err(Error::Domain {
                t,
                x: x.to_vec(),
                message: "coefficient evaluation produced non-finite values".into(),
            })
        }
    }
}

/// `b(t,x) - sigma(t,x) gamma(t,x)`: the zero vector exactly when the drift
/// lies in the image of the diffusion with kernel gamma at this point.
pub fn drift_image_residual(model: &ModelSpec, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.d {
        return Err(Error::Config(format!(
            "point dimension {} does not match model dimension {}",
            x.len(),
            model.d
        )));
    }
    model.check_finite_at(t, x)?;
    let b = model.drift_vec(t, x);
    let sigma = model.diffusion_mat(t, x);
    let gamma = model.gamma_vec(t, x);
    let mut sg = vec![0.0; model.d];
    linalg::matvec(&sigma, model.d, model.m, &gamma, &mut sg);
    Ok(b.iter().zip(&sg).map(|(bi, si)| bi - si).collect())
}

/// Parameters accepted by [`builtin`]; each model uses the subset it
/// documents and rejects the rest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuiltinParams {
    /// Degeneracy order for the Gruschin-type geometries (k >= 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u32>,
    /// Constant drift/kernel vector for heat_kernel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<f64>>,
    /// Slope of the linear reference field in the jump models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Jump measure atoms for the jump models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<AtomParam>>,
    /// Exponential modes for two_exponential.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<ModeParam>>,
    /// Initial state override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomParam {
    pub mark: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeParam {
    pub rate: f64,
    pub weight: f64,
}

impl BuiltinParams {
    fn reject_unused(&self, model: &str, allowed: &[&str]) -> Result<()> {
        let mut present: Vec<&str> = Vec::new();
        if self.k.is_some() {
            present.push("k");
        }
        if self.a.is_some() {
            present.push("a");
        }
        if self.beta.is_some() {
            present.push("beta");
        }
        if self.atoms.is_some() {
            present.push("atoms");
        }
        if self.modes.is_some() {
            present.push("modes");
        }
        if self.x0.is_some() {
            present.push("x0");
        }
        for p in present {
            if !allowed.contains(&p) {
                return Err(Error::Validation(format!(
                    "model `{model}` does not take parameter `{p}`"
                )));
            }
        }
        Ok(())
    }
}

/// Catalog row for one built-in model.
#[derive(Debug, Clone, Serialize)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub d: usize,
    pub m: usize,
    pub has_jumps: bool,
    pub summary: &'static str,
}

pub fn catalog() -> Vec<CatalogEntry> {
    vec![
        CatalogEntry {
            name: "gruschin",
            d: 2,
            m: 2,
            has_jumps: false,
            summary: "Gruschin geometry sigma = diag(1, x^k); gamma = -t x fails the gradient condition (curl obstruction)",
        },
        CatalogEntry {
            name: "kohn",
            d: 3,
            m: 3,
            has_jumps: false,
            summary: "Heisenberg-group fields whose third drift component is NOT in Im(sigma) (diagnostic model)",
        },
        CatalogEntry {
            name: "kohn_corrected",
            d: 3,
            m: 3,
            has_jumps: false,
            summary: "Heisenberg-group fields with the inconsistent third drift component replaced by 0, restoring b = sigma gamma",
        },
        CatalogEntry {
            name: "degenerate_exp",
            d: 2,
            m: 2,
            has_jumps: false,
            summary: "(B_t, exp(B_t)) diffusion: degenerate without a bracket-generating frame; reference field t/8 + log(y)/2 on y > 0",
        },
        CatalogEntry {
            name: "heat_kernel",
            d: 2,
            m: 2,
            has_jumps: false,
            summary: "sigma = Id, b = gamma = a constant; reference field <a,x> - |a|^2 t/2 makes the exponent identity exact",
        },
        CatalogEntry {
            name: "two_exponential",
            d: 2,
            m: 2,
            has_jumps: false,
            summary: "Gruschin geometry with v = log of a two-mode heat solution; genuinely nonlinear consistent model for convergence studies",
        },
        CatalogEntry {
            name: "manufactured_jump",
            d: 1,
            m: 1,
            has_jumps: true,
            summary: "sigma = 1 jump-diffusion with atomic marks, lambda = exp(beta u), linear reference field solving the jump residual equation exactly",
        },
        CatalogEntry {
            name: "pure_jump",
            d: 1,
            m: 1,
            has_jumps: true,
            summary: "sigma = 0, b = 0 pure-jump model; the exponent identity is exact at any step count",
        },
    ]
}

/// Softmax statistics of the two-exponential reference solution along its
/// active coordinate: returns `sum_i p_i a_i` with
/// `p_i  propto  c_i exp(a_i s - a_i^2 t / 2)`.
fn lse_mean(modes: &[(f64, f64)], t: f64, s: f64) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for &(a, c) in modes {
        let th = c.ln() + a * s - 0.5 * a * a * t;
        if th > mx {
            mx = th;
        }
    }
    let mut total = 0.0;
    let mut num = 0.0;
    for &(a, c) in modes {
        let e = (c.ln() + a * s - 0.5 * a * a * t - mx).exp();
        total += e;
        num += e * a;
    }
    num / total
}

fn jump_reference_constant(beta: f64, atoms: &[JumpAtom], with_diffusion: bool) -> f64 {
    // Substituting v = beta x - c t into the jump residual equation and
    // solving for c: each atom contributes exp(beta u) - 1 - beta u exp(beta u).
    let mut c = if with_diffusion { 0.5 * beta * beta } else { 0.0 };
    for atom in atoms {
        let bu = beta * atom.mark[0];
        c += (bu.exp() - 1.0 - bu * bu.exp()) * atom.weight;
    }
    c
}

fn jump_atoms_from_params(params: &BuiltinParams) -> Result<Vec<JumpAtom>> {
    let atoms = match &params.atoms {
        Some(list) => list
            .iter()
            .map(|a| JumpAtom {
                mark: a.mark.clone(),
                weight: a.weight,
            })
            .collect(),
        None => vec![JumpAtom {
            mark: vec![-1.0],
            weight: 1.0,
        }],
    };
    Ok(atoms)
}

fn jump_spec_exponential_intensity(beta: f64, atoms: Vec<JumpAtom>) -> Result<JumpSpec> {
    if atoms.is_empty() {
        return Err(Error::Validation("jump models need at least one atom".into()));
    }
    for atom in &atoms {
        if atom.mark.len() != 1 {
            return Err(Error::Validation(format!(
                "jump marks must be one-dimensional, got {:?}",
                atom.mark
            )));
        }
        let bu = beta * atom.mark[0];
        if bu > 0.0 {
            return Err(Error::Validation(format!(
                "intensity exp(beta u) = exp({bu}) exceeds 1 at mark {:?}; thinning requires lambda in (0, 1]",
                atom.mark
            )));
        }
    }
    JumpSpec::new(
        atoms,
        |_t, _x, u, out| out[0] = u[0],
        move |_t, u| (beta * u[0]).exp(),
    )
}

/// Constructs one of the built-in models. Names: `gruschin`, `kohn`,
/// `kohn_corrected`, `degenerate_exp`, `heat_kernel`, `two_exponential`,
/// `manufactured_jump`, `pure_jump`.
pub fn builtin(name: &str, params: &BuiltinParams) -> Result<ModelSpec> {
    let model = match name {
        "gruschin" => {
            params.reject_unused(name, &["k", "x0"])?;
            let k = params.k.unwrap_or(1);
            if k == 0 {
                return Err(Error::Validation("gruschin requires k >= 1".into()));
            }
            let ki = k as i32;
            let gamma_fn = move |t: f64, x: &[f64], out: &mut [f64]| {
                out[0] = -(x[0] * t);
                out[1] = -(x[1] * t);
            };
            let sigma_fn = move |_t: f64, x: &[f64], out: &mut [f64]| {
                out[0] = 1.0;
                out[1] = 0.0;
                out[2] = 0.0;
                out[3] = x[0].powi(ki);
            };
            // Drift defined literally as sigma gamma, through the same
            // product code the residual check uses.
            let drift_fn = move |t: f64, x: &[f64], out: &mut [f64]| {
                let mut s = [0.0; 4];
                let mut g = [0.0; 2];
                sigma_fn(t, x, &mut s);
                gamma_fn(t, x, &mut g);
                linalg::matvec(&s, 2, 2, &g, out);
            };
            ModelSpec::new(name, 2, 2, drift_fn, sigma_fn, gamma_fn)
                .with_drift_in_image(true)
                .with_default_x0(params.x0.clone().unwrap_or(vec![2.0, 3.0]))
                .with_notes(
                    "b = sigma gamma holds, but gamma is not of the form sigma^T grad v for any scalar v: \
                     the candidate gradient has a nonzero curl (see gamma_integrability_check)",
                )
        }
        "kohn" | "kohn_corrected" => {
            params.reject_unused(name, &["x0"])?;
            let corrected = name == "kohn_corrected";
            let gamma_fn = |t: f64, x: &[f64], out: &mut [f64]| {
                out[0] = x[0] * t;
                out[1] = x[1] * t;
                out[2] = x[2] * t;
            };
            let sigma_fn = |_t: f64, x: &[f64], out: &mut [f64]| {
                out.fill(0.0);
                out[0] = 1.0;
                out[4] = 1.0;
                out[6] = -x[1] / 2.0;
                out[7] = x[0] / 2.0;
            };
            let drift_fn = move |t: f64, x: &[f64], out: &mut [f64]| {
                out[0] = x[0] * t;
                out[1] = x[1] * t;
                // z(x - y)t/2 is not in the image of sigma (the third row of
                // sigma gamma is identically zero); kept on purpose as the
                // defect this model exists to exhibit. The corrected variant
                // zeroes it.
                out[2] = if corrected {
                    0.0
                } else {
                    x[2] * (x[0] - x[1]) * t / 2.0
                };
            };
            let notes = if corrected {
                "third drift component replaced by 0; on dyadic grids the drift image residual vanishes exactly"
            } else {
                "third drift component z(x-y)t/2 cannot equal (sigma gamma)_3 = 0; kept as a diagnostic model"
            };
            ModelSpec::new(name, 3, 3, drift_fn, sigma_fn, gamma_fn)
                .with_drift_in_image(corrected)
                .with_default_x0(params.x0.clone().unwrap_or(vec![1.0, 2.0, 3.0]))
                .with_notes(notes)
        }
        "degenerate_exp" => {
            params.reject_unused(name, &["x0"])?;
            let drift_fn = |_t: f64, x: &[f64], out: &mut [f64]| {
                out[0] = 0.0;
                out[1] = 0.5 * x[1].max(0.0);
            };
            let sigma_fn = |_t: f64, x: &[f64], out: &mut [f64]| {
                out[0] = 1.0;
                out[1] = 0.0;
                out[2] = 0.0;
                out[3] = x[1].max(0.0);
            };
            let gamma_fn = |_t: f64, x: &[f64], out: &mut [f64]| {
                out[0] = 0.0;
                out[1] = if x[1] > 0.0 { 0.5 } else { 0.0 };
            };
            let reference = ScalarField::from_closure(2, |t, x: &[f64]| t / 8.0 + 0.5 * x[1].ln())
                .with_time_derivative(|_, _| 0.125)
                .with_gradient(|_, x, out| {
                    out[0] = 0.0;
                    out[1] = 0.5 / x[1];
                })
                .with_hessian(|_, x, out| {
                    out.fill(0.0);
                    out[3] = -0.5 / (x[1] * x[1]);
                })
                .with_domain(|_, x| x[1] > 0.0);
            ModelSpec::new(name, 2, 2, drift_fn, sigma_fn, gamma_fn)
                .with_drift_in_image(true)
                .with_reference_field(reference)
                .with_default_x0(params.x0.clone().unwrap_or(vec![0.0, 1.0]))
                .with_notes(
                    "law of (B, exp(B)); degenerate on y <= 0 and not bracket-generating; \
                     gamma = (0, 1/2) on y > 0 is the unique solution of sigma gamma = b there",
                )
        }
        "heat_kernel" => {
            params.reject_unused(name, &["a", "x0"])?;
            let a = params.a.clone().unwrap_or(vec![1.0, 0.0]);
            if a.is_empty() {
                return Err(Error::Validation("heat_kernel needs a nonempty vector a".into()));
            }
            let d = a.len();
            let a_drift = a.clone();
            let a_gamma = a.clone();
            let drift_fn = move |_t: f64, _x: &[f64], out: &mut [f64]| {
                out.copy_from_slice(&a_drift);
            };
            let sigma_fn = move |_t: f64, _x: &[f64], out: &mut [f64]| {
                out.fill(0.0);
                for i in 0..d {
                    out[i * d + i] = 1.0;
                }
            };
            let gamma_fn = move |_t: f64, _x: &[f64], out: &mut [f64]| {
                out.copy_from_slice(&a_gamma);
            };
            let reference = fields::linear(a.clone(), 0.5 * linalg::dot(&a, &a));
            ModelSpec::new(name, d, d, drift_fn, sigma_fn, gamma_fn)
                .with_drift_in_image(true)
                .with_reference_field(reference)
                .with_default_x0(params.x0.clone().unwrap_or(vec![0.0; d]))
                .with_notes("identity diffusion with constant kernel; the exponent identity is exact at any step count")
        }
        "two_exponential" => {
            params.reject_unused(name, &["k", "modes", "x0"])?;
            let k = params.k.unwrap_or(1);
            if k == 0 {
                return Err(Error::Validation("two_exponential requires k >= 1".into()));
            }
            let ki = k as i32;
            let modes: Vec<(f64, f64)> = match &params.modes {
                Some(list) => list.iter().map(|m| (m.rate, m.weight)).collect(),
                None => vec![(1.0, 1.0), (2.0, 1.0)],
            };
            let field = fields::log_sum_exp(2, 0, modes.clone())?;
            let modes_arc = Arc::new(modes);
            let m_gamma = modes_arc.clone();
            let gamma_fn = move |t: f64, x: &[f64], out: &mut [f64]| {
                out[0] = lse_mean(&m_gamma, t, x[0]);
                out[1] = 0.0;
            };
            let sigma_fn = move |_t: f64, x: &[f64], out: &mut [f64]| {
                out[0] = 1.0;
                out[1] = 0.0;
                out[2] = 0.0;
                out[3] = x[0].powi(ki);
            };
            let g2 = gamma_fn.clone();
            let drift_fn = move |t: f64, x: &[f64], out: &mut [f64]| {
                let mut s = [0.0; 4];
                let mut g = [0.0; 2];
                sigma_fn(t, x, &mut s);
                g2(t, x, &mut g);
                linalg::matvec(&s, 2, 2, &g, out);
            };
            ModelSpec::new(name, 2, 2, drift_fn, sigma_fn, gamma_fn)
                .with_drift_in_image(true)
                .with_reference_field(field)
                .with_default_x0(params.x0.clone().unwrap_or(vec![0.0, 0.0]))
                .with_notes(
                    "v = log(sum_i c_i exp(a_i x_1 - a_i^2 t/2)): e^v solves the time-reversed heat equation, \
                     so v satisfies the nonlinear residual equations exactly",
                )
        }
        "manufactured_jump" => {
            params.reject_unused(name, &["beta", "atoms", "x0"])?;
            let beta = params.beta.unwrap_or(1.0);
            let atoms = jump_atoms_from_params(params)?;
            let c = jump_reference_constant(beta, &atoms, true);
            let jump = jump_spec_exponential_intensity(beta, atoms)?;
            let drift_fn = move |_t: f64, _x: &[f64], out: &mut [f64]| out[0] = beta;
            let sigma_fn = |_t: f64, _x: &[f64], out: &mut [f64]| out[0] = 1.0;
            let gamma_fn = move |_t: f64, _x: &[f64], out: &mut [f64]| out[0] = beta;
            ModelSpec::new(name, 1, 1, drift_fn, sigma_fn, gamma_fn)
                .with_drift_in_image(true)
                .with_jump(jump)
                .with_reference_field(fields::linear(vec![beta], c))
                .with_default_x0(params.x0.clone().unwrap_or(vec![0.0]))
                .with_notes("unit diffusion plus atomic jumps with lambda = exp(beta u); v = beta x - c t solves the jump residual equation exactly")
        }
        "pure_jump" => {
            params.reject_unused(name, &["beta", "atoms", "x0"])?;
            let beta = params.beta.unwrap_or(1.0);
            let atoms = jump_atoms_from_params(params)?;
            let c = jump_reference_constant(beta, &atoms, false);
            let jump = jump_spec_exponential_intensity(beta, atoms)?;
            let drift_fn = |_t: f64, _x: &[f64], out: &mut [f64]| out[0] = 0.0;
            let sigma_fn = |_t: f64, _x: &[f64], out: &mut [f64]| out[0] = 0.0;
            let gamma_fn = |_t: f64, _x: &[f64], out: &mut [f64]| out[0] = 0.0;
            ModelSpec::new(name, 1, 1, drift_fn, sigma_fn, gamma_fn)
                .with_drift_in_image(true)
                .with_jump(jump)
                .with_reference_field(fields::linear(vec![beta], c))
                .with_default_x0(params.x0.clone().unwrap_or(vec![0.0]))
                .with_notes("no diffusion, no drift: jump times are exact, so the exponent identity holds at machine precision for any grid")
        }
        _ => return Err(Error::UnknownModel(name.to_string())),
    };
    model.check_finite_at(0.0, &model.default_x0.clone())?;
    Ok(model)
}

/// Probe triple `(t, x, y)` for the hypothesis estimates.
pub type ProbeTriple = (f64, Vec<f64>, Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// Options for [`hypothesis_probe`]: the modulus kappa and the pass/fail
/// thresholds for the estimated constants.
#[derive(Clone)]
pub struct ProbeOptions {
    pub kappa: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub lambda0_max: f64,
    pub lambda1_max: f64,
    pub hf_max: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            kappa: Arc::new(default_kappa),
            lambda0_max: 1e3,
            lambda1_max: 1e3,
            hf_max: 1e3,
        }
    }
}

/// Default modulus: `kappa(r) = max(1, log(1/r))` for `r < 1`, `1` for
/// `r >= 1` (bounded away from zero, log-divergent at small distances).
pub fn default_kappa(r: f64) -> f64 {
    if r < 1.0 {
        (1.0 / r).ln().max(1.0)
    } else {
        1.0
    }
}

/// Numeric probe report for the monotonicity and growth hypotheses; all
/// estimates are suprema over the probe set, so enlarging the set never
/// decreases them.
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisProbeReport {
    /// sup of [2<x-y, b(x)-b(y)> + |sigma(x)-sigma(y)|_F^2] / (|x-y|^2 kappa(|x-y|)).
    pub lambda0_est: f64,
    /// sup of (|b|^2 + |sigma|_F^2) / (1 + |x|)^2.
    pub lambda1_est: f64,
    /// (distance, kappa(distance)) per probe pair.
    pub kappa_profile: Vec<(f64, f64)>,
    /// sup of sum_i |jump_coeff(t,x,u_i)|^q nu_i / (1 + |x|)^q for q = 2.
    pub hf_q2: f64,
    /// Same with q = 4.
    pub hf_q4: f64,
    /// Number of distinct-point pairs that contributed.
    pub sample_count: usize,
    pub monotonicity: Verdict,
    pub growth: Verdict,
    pub jump_growth: Verdict,
}

/// Evaluates the hypothesis quotients over probe triples `(t, x, y)`. Pairs
/// with `x = y` are skipped (zero denominator), never divided by.
pub fn hypothesis_probe(
    model: &ModelSpec,
    probes: &[ProbeTriple],
    opts: &ProbeOptions,
) -> Result<HypothesisProbeReport> {
    if probes.is_empty() {
        return Err(Error::Validation("hypothesis probe set is empty".into()));
    }
    let d = model.dim();
    let mut lambda0 = f64::NEG_INFINITY;
    let mut lambda1 = f64::NEG_INFINITY;
    let mut hf2 = 0.0f64;
    let mut hf4 = 0.0f64;
    let mut kappa_profile = Vec::new();
    let mut sample_count = 0usize;

    let mut diff = vec![0.0; d];
    for (t, x, y) in probes {
        let t = *t;
        if x.len() != d || y.len() != d {
            return Err(Error::Config(format!(
                "probe point dimension mismatch: expected {d}, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        model.check_finite_at(t, x)?;
        for point in [x, y] {
            let b = model.drift_vec(t, point);
            let s = model.diffusion_mat(t, point);
            let q2 = (linalg::dot(&b, &b) + linalg::frobenius_sq(&s))
                / (1.0 + linalg::norm(point)).powi(2);
            lambda1 = lambda1.max(q2);
            if let Some(jump) = model.jump() {
                let mut f = vec![0.0; d];
                let (mut s2, mut s4) = (0.0, 0.0);
                for atom in jump.atoms() {
                    jump.coeff_into(t, point, &atom.mark, &mut f);
                    let n2 = linalg::dot(&f, &f);
                    s2 += n2 * atom.weight;
                    s4 += n2 * n2 * atom.weight;
                }
                let denom = 1.0 + linalg::norm(point);
                hf2 = hf2.max(s2 / denom.powi(2));
                hf4 = hf4.max(s4 / denom.powi(4));
            }
        }
        for i in 0..d {
            diff[i] = x[i] - y[i];
        }
        let r = linalg::norm(&diff);
        if r == 0.0 {
            continue;
        }
        sample_count += 1;
        let kap = (opts.kappa)(r);
        kappa_profile.push((r, kap));
        let bx = model.drift_vec(t, x);
        let by = model.drift_vec(t, y);
        let sx = model.diffusion_mat(t, x);
        let sy = model.diffusion_mat(t, y);
        let mut num = 0.0;
        for i in 0..d {
            num += 2.0 * diff[i] * (bx[i] - by[i]);
        }
        for i in 0..sx.len() {
            let ds = sx[i] - sy[i];
            num += ds * ds;
        }
        lambda0 = lambda0.max(num / (r * r * kap));
    }

    let verdict = |est: f64, bound: f64, applicable: bool| {
        if !applicable || sample_count == 0 {
            Verdict::Inconclusive
        } else if est <= bound {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    };
    let has_jump_atoms = model.jump().map_or(false, |j| !j.atoms().is_empty());
    Ok(HypothesisProbeReport {
        lambda0_est: lambda0,
        lambda1_est: lambda1,
        kappa_profile,
        hf_q2: hf2,
        hf_q4: hf4,
        sample_count,
        monotonicity: verdict(lambda0, opts.lambda0_max, true),
        growth: verdict(lambda1, opts.lambda1_max, true),
        jump_growth: if has_jump_atoms {
            verdict(hf2.max(hf4), opts.hf_max, true)
        } else {
            // No jump part: the jump-growth hypothesis holds vacuously.
            Verdict::Pass
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dyadic_grid(model: &ModelSpec) -> Vec<(f64, Vec<f64>)> {
        // 10 dyadic times and 10 dyadic coordinates per dimension; dyadic
        // values keep the exact-cancellation claims testable bitwise.
        let times: Vec<f64> = (0..10).map(|i| 0.25 * i as f64).collect();
        let coords: Vec<f64> = (0..10).map(|i| -2.0 + 0.5 * i as f64).collect();
        let mut points = Vec::new();
        for &t in &times {
            let mut idx = vec![0usize; model.dim()];
            loop {
                let x: Vec<f64> = idx.iter().map(|&i| coords[i]).collect();
                points.push((t, x));
                let mut carry = 0;
                while carry < idx.len() {
                    idx[carry] += 1;
                    if idx[carry] < coords.len() {
                        break;
                    }
                    idx[carry] = 0;
                    carry += 1;
                }
                if carry == idx.len() {
                    break;
                }
            }
        }
        points
    }

    #[test]
    fn gruschin_coefficients_evaluate_as_documented() {
        let model = builtin("gruschin", &BuiltinParams { k: Some(2), ..Default::default() }).unwrap();
        let (t, x) = (1.0, [2.0, 3.0]);
        assert_eq!(model.gamma_vec(t, &x), vec![-2.0, -3.0]);
        assert_eq!(model.diffusion_mat(t, &x), vec![1.0, 0.0, 0.0, 4.0]);
        assert_eq!(model.drift_vec(t, &x), vec![-2.0, -12.0]);
    }

    #[test]
    fn gruschin_k1_drift_lies_in_image() {
        let model = builtin("gruschin", &Default::default()).unwrap();
        let r = drift_image_residual(&model, 1.0, &[2.0, 3.0]).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);
        assert_eq!(model.drift_vec(1.0, &[2.0, 3.0]), vec![-2.0, -6.0]);
    }

    #[test]
    fn kohn_third_drift_component_misses_image() {
        let model = builtin("kohn", &Default::default()).unwrap();
        let r = drift_image_residual(&model, 1.0, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r[0], 0.0);
        assert_eq!(r[1], 0.0);
        assert_eq!(r[2], -1.5);
        assert!(!model.claims_drift_in_image());
    }

    #[test]
    fn kohn_corrected_residual_vanishes_on_dyadic_grid() {
        let model = builtin("kohn_corrected", &Default::default()).unwrap();
        for (t, x) in dyadic_grid(&model) {
            let r = drift_image_residual(&model, t, &x).unwrap();
            assert!(r.iter().all(|c| *c == 0.0), "nonzero residual {r:?} at t={t}, x={x:?}");
        }
    }

    #[test]
    fn drift_in_image_models_have_exact_zero_residual_on_grid() {
        for entry in catalog() {
            let model = builtin(entry.name, &Default::default()).unwrap();
            if !model.claims_drift_in_image() {
                continue;
            }
            let mut max_abs = 0.0f64;
            for (t, x) in dyadic_grid(&model) {
                let r = drift_image_residual(&model, t, &x).unwrap();
                max_abs = max_abs.max(linalg::max_abs(&r));
            }
            assert_eq!(max_abs, 0.0, "model {} residual {max_abs}", entry.name);
        }
    }

    #[test]
    fn heat_kernel_reference_field_attached() {
        let model = builtin("heat_kernel", &Default::default()).unwrap();
        let v = model.reference_field().expect("reference field");
        // v = x_1 - t/2 for a = (1,0).
        assert_relative_eq!(v.value(1.0, &[0.3, 7.0]).unwrap(), 0.3 - 0.5);
        let r = drift_image_residual(&model, 0.7, &[1.3, -0.2]).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn degenerate_exp_coefficients() {
        let model = builtin("degenerate_exp", &Default::default()).unwrap();
        assert_eq!(model.drift_vec(0.5, &[1.0, 4.0]), vec![0.0, 2.0]);
        assert_eq!(model.drift_vec(0.5, &[1.0, -4.0]), vec![0.0, 0.0]);
        assert_eq!(model.gamma_vec(0.5, &[1.0, 4.0]), vec![0.0, 0.5]);
        assert_eq!(model.gamma_vec(0.5, &[1.0, 0.0]), vec![0.0, 0.0]);
        let r = drift_image_residual(&model, 2.0, &[0.7, 3.3]).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn unknown_model_and_bad_params() {
        assert!(matches!(
            builtin("unknown", &Default::default()),
            Err(Error::UnknownModel(_))
        ));
        let bad_k = BuiltinParams { k: Some(0), ..Default::default() };
        assert!(matches!(builtin("gruschin", &bad_k), Err(Error::Validation(_))));
        let stray = BuiltinParams { beta: Some(1.0), ..Default::default() };
        assert!(matches!(builtin("heat_kernel", &stray), Err(Error::Validation(_))));
    }

    #[test]
    fn jump_intensity_above_one_rejected() {
        // beta u > 0 would make lambda = exp(beta u) > 1.
        let params = BuiltinParams {
            beta: Some(1.0),
            atoms: Some(vec![AtomParam { mark: vec![0.5], weight: 1.0 }]),
            ..Default::default()
        };
        assert!(matches!(
            builtin("manufactured_jump", &params),
            Err(Error::Validation(_))
        ));
        // beta u = 0 gives lambda = 1, which is allowed.
        let edge = BuiltinParams {
            beta: Some(0.0),
            atoms: Some(vec![AtomParam { mark: vec![0.5], weight: 1.0 }]),
            ..Default::default()
        };
        assert!(builtin("manufactured_jump", &edge).is_ok());
    }

    #[test]
    fn manufactured_jump_reference_constant() {
        let model = builtin("manufactured_jump", &Default::default()).unwrap();
        let v = model.reference_field().unwrap();
        // c = 1/2 + (e^{-1} - 1 + e^{-1}) = 2 e^{-1} - 1/2.
        let e1 = (-1.0f64).exp();
        let expected_c = 2.0 * e1 - 0.5;
        let val = v.value(1.0, &[0.0]).unwrap();
        assert_relative_eq!(val, -expected_c, max_relative = 1e-15);
        let jump = model.jump().unwrap();
        assert_relative_eq!(jump.intensity(0.3, &[-1.0]), e1);
        assert_eq!(jump.total_mass(), 1.0);
    }

    #[test]
    fn pure_jump_reference_constant() {
        let model = builtin("pure_jump", &Default::default()).unwrap();
        let v = model.reference_field().unwrap();
        let e1 = (-1.0f64).exp();
        let expected_c = 2.0 * e1 - 1.0;
        assert_relative_eq!(v.value(1.0, &[0.0]).unwrap(), -expected_c, max_relative = 1e-12);
    }

    #[test]
    fn two_exponential_gamma_matches_field_gradient() {
        let model = builtin("two_exponential", &Default::default()).unwrap();
        let v = model.reference_field().unwrap();
        for &(t, x1) in &[(0.0, 0.0), (0.5, 1.0), (1.0, -2.0), (0.25, 3.0)] {
            let x = [x1, 0.7];
            let g = model.gamma_vec(t, &x);
            let d = v.derivatives(t, &x).unwrap();
            assert_relative_eq!(g[0], d.grad[0], max_relative = 1e-13);
            assert_eq!(g[1], 0.0);
        }
    }

    #[test]
    fn catalog_lists_all_builtins() {
        let names: Vec<&str> = catalog().iter().map(|e| e.name).collect();
        assert_eq!(names.len(), 8);
        for name in &names {
            assert!(builtin(name, &Default::default()).is_ok(), "{name}");
        }
    }

    #[test]
    fn constant_coefficients_have_zero_monotonicity_estimate() {
        let model = builtin("heat_kernel", &Default::default()).unwrap();
        let probes: Vec<ProbeTriple> = vec![
            (0.0, vec![0.0, 0.0], vec![1.0, 1.0]),
            (0.5, vec![-1.0, 2.0], vec![0.5, 0.5]),
        ];
        let report = hypothesis_probe(&model, &probes, &Default::default()).unwrap();
        assert_eq!(report.lambda0_est, 0.0);
        assert_eq!(report.sample_count, 2);
        assert_eq!(report.monotonicity, Verdict::Pass);
    }

    #[test]
    fn heat_kernel_growth_estimate_attained_at_origin() {
        let model = builtin("heat_kernel", &Default::default()).unwrap();
        // (|b|^2 + |Id|_F^2) / (1 + |x|)^2 = 3 at x = 0.
        let probes: Vec<ProbeTriple> = vec![
            (0.0, vec![0.0, 0.0], vec![2.0, 0.0]),
            (0.0, vec![5.0, 5.0], vec![-3.0, 1.0]),
        ];
        let report = hypothesis_probe(&model, &probes, &Default::default()).unwrap();
        assert_relative_eq!(report.lambda1_est, 3.0);
        assert_eq!(report.growth, Verdict::Pass);
        assert_eq!(report.jump_growth, Verdict::Pass);
    }

    #[test]
    fn probe_estimates_are_monotone_in_the_probe_set() {
        let model = builtin("gruschin", &Default::default()).unwrap();
        let small: Vec<ProbeTriple> = vec![
            (0.5, vec![1.0, 1.0], vec![2.0, 3.0]),
            (1.0, vec![0.5, -1.0], vec![1.5, 2.0]),
        ];
        let mut large = small.clone();
        large.push((1.0, vec![4.0, 4.0], vec![-4.0, 2.0]));
        large.push((0.25, vec![3.0, -3.0], vec![3.0, -2.0]));
        let r_small = hypothesis_probe(&model, &small, &Default::default()).unwrap();
        let r_large = hypothesis_probe(&model, &large, &Default::default()).unwrap();
        assert!(r_large.lambda0_est >= r_small.lambda0_est);
        assert!(r_large.lambda1_est >= r_small.lambda1_est);
        assert!(r_large.sample_count > r_small.sample_count);
    }

    #[test]
    fn coincident_probe_pairs_are_skipped() {
        let model = builtin("heat_kernel", &Default::default()).unwrap();
        let probes: Vec<ProbeTriple> = vec![(0.0, vec![1.0, 1.0], vec![1.0, 1.0])];
        let report = hypothesis_probe(&model, &probes, &Default::default()).unwrap();
        assert_eq!(report.sample_count, 0);
        assert_eq!(report.monotonicity, Verdict::Inconclusive);
    }

    #[test]
    fn jump_growth_quotients_for_manufactured_jump() {
        let model = builtin("manufactured_jump", &Default::default()).unwrap();
        // jump_coeff = u = -1, nu = 1: quotient = 1/(1+|x|)^q, sup at x = 0.
        let probes: Vec<ProbeTriple> = vec![(0.0, vec![0.0], vec![1.0])];
        let report = hypothesis_probe(&model, &probes, &Default::default()).unwrap();
        assert_relative_eq!(report.hf_q2, 1.0);
        assert_relative_eq!(report.hf_q4, 1.0);
        assert_eq!(report.jump_growth, Verdict::Pass);
    }

    #[test]
    fn default_kappa_profile() {
        assert_eq!(default_kappa(2.0), 1.0);
        assert_eq!(default_kappa(1.0), 1.0);
        assert_relative_eq!(default_kappa(0.01), 100f64.ln());
        // Between e^{-1} and 1 the log is below 1, so the max clamps.
        assert_eq!(default_kappa(0.5), 1.0);
    }
}
