//! Running ledger of the change-of-measure exponent
//! `Y_t = int <gamma, dW> + 1/2 int |gamma|^2 ds + sum log lambda + int (1-lambda) nu ds`
//! and the density `Z_t = exp(-Y_t)`, plus a Monte Carlo probe of the
//! exponential-moment (Novikov-type) conditions.
//!
//! All integrals are left-endpoint Ito sums on the path's own grid, matching
//! the simulator's non-anticipating convention. The quadratic term carries
//! the factor 1/2 of the standard Girsanov density.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::ModelSpec;
use crate::simulate::{fmt_f64, PathBundle};

/// Node-indexed running terms of the exponent; every series has length
/// `steps + 1` and starts at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GirsanovLedger {
    pub times: Vec<f64>,
    /// Running `sum_k <gamma(t_k, X_k), dW_k>`.
    pub stoch_integral: Vec<f64>,
    /// Running `1/2 sum_k |gamma(t_k, X_k)|^2 dt`.
    pub quad_term: Vec<f64>,
    /// Running `sum log lambda(tau_j, u_j)` over accepted jumps.
    pub jump_log_term: Vec<f64>,
    /// Running `sum_k dt sum_i (1 - lambda(t_k, u_i)) nu_i`.
    pub compensator_term: Vec<f64>,
    /// `Y = stoch_integral + quad_term + jump_log_term + compensator_term`.
    pub y: Vec<f64>,
    /// `Z = exp(-Y)`, the density candidate.
    pub z: Vec<f64>,
    /// Diagnostic local-martingale part:
    /// `-stoch_integral + sum_{accepted} (1-lambda)/lambda - compensator_term`.
    pub m: Vec<f64>,
    /// Running `sum_k dt sum_i ((1-lambda)/lambda)^2 lambda nu_i` at t_final,
    /// the jump addend of the exponential-moment probe.
    pub jump_moment_addend: f64,
}

impl GirsanovLedger {
    pub fn y_final(&self) -> f64 {
        *self.y.last().expect("nonempty series")
    }

    pub fn z_final(&self) -> f64 {
        *self.z.last().expect("nonempty series")
    }

    /// Writes the series as CSV with columns
    /// `t, stoch_integral, quad_term, jump_log_term, compensator_term, Y, Z`.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "t,stoch_integral,quad_term,jump_log_term,compensator_term,Y,Z")?;
        for k in 0..self.times.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                fmt_f64(self.times[k]),
                fmt_f64(self.stoch_integral[k]),
                fmt_f64(self.quad_term[k]),
                fmt_f64(self.jump_log_term[k]),
                fmt_f64(self.compensator_term[k]),
                fmt_f64(self.y[k]),
                fmt_f64(self.z[k]),
            )?;
        }
        Ok(())
    }
}

fn check_dims(path: &PathBundle, model: &ModelSpec) -> Result<()> {
    if model.noise_dim() != path.noise_dim() {
        return Err(Error::Config(format!(
            "gamma dimension {} does not match the path's noise dimension {}",
            model.noise_dim(),
            path.noise_dim()
        )));
    }
    if model.dim() != path.dim() {
        return Err(Error::Config(format!(
            "model dimension {} does not match the path's state dimension {}",
            model.dim(),
            path.dim()
        )));
    }
    Ok(())
}

fn accumulate(path: &PathBundle, model: &ModelSpec, include_jumps: bool) -> Result<GirsanovLedger> {
    check_dims(path, model)?;
    let n = path.grid.steps;
    let m = model.noise_dim();
    let dt = path.grid.dt();
    let jump = if include_jumps { model.jump() } else { None };

    let mut times = Vec::with_capacity(n + 1);
    let mut stoch = Vec::with_capacity(n + 1);
    let mut quad = Vec::with_capacity(n + 1);
    let mut jlog = Vec::with_capacity(n + 1);
    let mut comp = Vec::with_capacity(n + 1);
    let mut y = Vec::with_capacity(n + 1);
    let mut z = Vec::with_capacity(n + 1);
    let mut mart = Vec::with_capacity(n + 1);

    let (mut s, mut q, mut jl, mut co, mut jm) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut moment_addend = 0.0f64;
    let mut gamma = vec![0.0; m];
    let mut next_jump = 0usize;

    times.push(0.0);
    stoch.push(s);
    quad.push(q);
    jlog.push(jl);
    comp.push(co);
    y.push(s + q + jl + co);
    z.push((-(s + q + jl + co)).exp());
    mart.push(-s + jm - co);

    for k in 0..n {
        let t_k = path.grid.time(k);
        let x_k = path.state(k);
        model.gamma_into(t_k, x_k, &mut gamma);
        let dw = path.increment(k);
        s += linalg::dot(&gamma, dw);
        q += 0.5 * linalg::dot(&gamma, &gamma) * dt;
        if let Some(jump) = jump {
            let mut comp_rate = 0.0;
            let mut moment_rate = 0.0;
            for atom in jump.atoms() {
                let lam = jump.intensity_checked(t_k, &atom.mark)?;
                comp_rate += (1.0 - lam) * atom.weight;
                let ratio = (1.0 - lam) / lam;
                moment_rate += ratio * ratio * lam * atom.weight;
            }
            co += comp_rate * dt;
            moment_addend += moment_rate * dt;
            while next_jump < path.jumps.len() && path.jumps[next_jump].step_index == k {
                let ev = &path.jumps[next_jump];
                next_jump += 1;
                if !ev.accepted {
                    continue;
                }
                let mark = &jump.atoms()[ev.atom_index].mark;
                let lam = jump.intensity(ev.time, mark);
                if lam <= 0.0 {
                    return Err(Error::Domain {
                        t: ev.time,
                        x: ev.pre_state.clone(),
                        message: "accepted jump with lambda = 0: log undefined".into(),
                    });
                }
                if lam > 1.0 {
                    return Err(Error::Validation(format!(
                        "intensity lambda = {lam} outside (0, 1] at accepted jump, t = {}",
                        ev.time
                    )));
                }
                jl += lam.ln();
                jm += (1.0 - lam) / lam;
            }
        }
        times.push(path.grid.time(k + 1));
        stoch.push(s);
        quad.push(q);
        jlog.push(jl);
        comp.push(co);
        let yk = s + q + jl + co;
        y.push(yk);
        z.push((-yk).exp());
        mart.push(-s + jm - co);
    }

    Ok(GirsanovLedger {
        times,
        stoch_integral: stoch,
        quad_term: quad,
        jump_log_term: jlog,
        compensator_term: comp,
        y,
        z,
        m: mart,
        jump_moment_addend: moment_addend,
    })
}

/// Exponent ledger for a continuous path. Rejects paths that carry jump
/// events; use [`exponent_jump`] for those, or
/// [`exponent_continuous_ignoring_jumps`] to drop them deliberately.
pub fn exponent_continuous(path: &PathBundle, model: &ModelSpec) -> Result<GirsanovLedger> {
    if !path.jumps.is_empty() {
        return Err(Error::Validation(format!(
            "path carries {} jump events; use exponent_jump or ignore them explicitly",
            path.jumps.len()
        )));
    }
    accumulate(path, model, false)
}

/// Continuous-terms-only ledger on a path that may carry jump events; the
/// events are deliberately ignored.
pub fn exponent_continuous_ignoring_jumps(
    path: &PathBundle,
    model: &ModelSpec,
) -> Result<GirsanovLedger> {
    accumulate(path, model, false)
}

/// Full exponent ledger for a jump path: continuous terms plus
/// `sum log lambda` at accepted jumps and the thinning compensator.
pub fn exponent_jump(path: &PathBundle, model: &ModelSpec) -> Result<GirsanovLedger> {
    if model.jump().is_none() {
        return Err(Error::Config(format!(
            "model `{}` has no jump data; use exponent_continuous",
            model.name()
        )));
    }
    accumulate(path, model, true)
}

/// Monte Carlo estimates of the exponential-moment conditions.
#[derive(Debug, Clone, Serialize)]
pub struct MomentProbe {
    /// Estimate of `E[exp(1/2 int |gamma|^2 ds)]`.
    pub continuous_moment_est: f64,
    /// Estimate of `E[exp(1/2 int |gamma|^2 ds + int ((1-lambda)/lambda)^2 lambda nu ds)]`.
    pub jump_moment_est: f64,
    /// Some path's exponential overflowed to infinity.
    pub overflow: bool,
    /// Fewer than 1% of paths dominate (contribute more than half of) an
    /// estimate: the Monte Carlo mean is untrustworthy.
    pub heavy_tail: bool,
    /// True when both estimates are finite.
    pub finite_verdict: bool,
}

fn mean_and_tail(contributions: &mut [f64]) -> (f64, bool, bool) {
    let n = contributions.len() as f64;
    let total: f64 = contributions.iter().sum();
    let overflow = contributions.iter().any(|c| !c.is_finite());
    // Top 1% of paths (at least one) against the rest.
    contributions.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let top = ((contributions.len() + 99) / 100).max(1);
    let top_sum: f64 = contributions[..top].iter().sum();
    let heavy = overflow || (total > 0.0 && top_sum / total > 0.5 && contributions.len() > top);
    (total / n, overflow, heavy)
}

/// Probes the Novikov-type integrability conditions over a set of ledgers
/// from one experiment. Overflow is reported in the verdict, never thrown.
pub fn exponential_moment_probe(ledgers: &[GirsanovLedger]) -> Result<MomentProbe> {
    if ledgers.is_empty() {
        return Err(Error::Validation("moment probe needs at least one ledger".into()));
    }
    let mut cont: Vec<f64> = ledgers
        .iter()
        .map(|l| l.quad_term.last().copied().unwrap_or(0.0).exp())
        .collect();
    let mut jumpy: Vec<f64> = ledgers
        .iter()
        .map(|l| (l.quad_term.last().copied().unwrap_or(0.0) + l.jump_moment_addend).exp())
        .collect();
    let (c_mean, c_over, c_heavy) = mean_and_tail(&mut cont);
    let (j_mean, j_over, j_heavy) = mean_and_tail(&mut jumpy);
    Ok(MomentProbe {
        continuous_moment_est: c_mean,
        jump_moment_est: j_mean,
        overflow: c_over || j_over,
        heavy_tail: c_heavy || j_heavy,
        finite_verdict: c_mean.is_finite() && j_mean.is_finite(),
    })
}
