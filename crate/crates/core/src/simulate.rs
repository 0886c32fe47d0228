//! Euler-Maruyama trajectories for the continuous and jump SDEs, with
//! counter-based reproducible randomness.
//!
//! Stream layout: path `i` owns two ChaCha streams derived from the global
//! seed, stream `2 i` for Brownian increments and `2 i + 1` for jump
//! candidates. Draws never depend on worker scheduling, so pooled results
//! are a pure function of `(config, seed)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Uniform grid on `[0, t_final]` with `steps` Euler steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub t_final: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, steps: usize) -> Result<Self> {
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(Error::Validation(format!(
                "final time must be positive and finite, got {t_final}"
            )));
        }
        if steps == 0 {
            return Err(Error::Validation("step count must be at least 1".into()));
        }
        Ok(TimeGrid { t_final, steps })
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    /// t_k = k * dt, exactly the value used inside the integrators.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }
}

/// Identifies the random streams a path was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SeedInfo {
    pub seed: u64,
    pub path_index: u64,
}

/// One candidate or accepted jump. `pre_state` is the state just before the
/// jump (node state plus any earlier in-step jump increments; the step's
/// diffusion increment is booked at the node, not mid-step).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpEvent {
    pub time: f64,
    pub step_index: usize,
    pub atom_index: usize,
    pub pre_state: Vec<f64>,
    pub accepted: bool,
}

/// One simulated trajectory with everything the exponent ledger needs.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub grid: TimeGrid,
    /// Flat (steps+1) x d row-major states; `state(k)` slices row k.
    pub states: Vec<f64>,
    /// Flat steps x m row-major Brownian increments.
    pub bm_increments: Vec<f64>,
    pub jumps: Vec<JumpEvent>,
    pub seed_info: SeedInfo,
    dim: usize,
    noise_dim: usize,
}

impl PathBundle {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// State at grid node k (k = 0..=steps).
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    /// Brownian increment over step k (k = 0..steps).
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.bm_increments[k * self.noise_dim..(k + 1) * self.noise_dim]
    }

    /// Accepted jump count.
    pub fn accepted_jumps(&self) -> usize {
        self.jumps.iter().filter(|j| j.accepted).count()
    }

    /// Writes the trajectory as CSV with columns `t, X_1..X_d`.
    pub fn write_states_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(out, "t")?;
        for i in 1..=self.dim {
            write!(out, ",X_{i}")?;
        }
        writeln!(out)?;
        for k in 0..=self.grid.steps {
            write!(out, "{}", fmt_f64(self.grid.time(k)))?;
            for v in self.state(k) {
                write!(out, ",{}", fmt_f64(*v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Writes jump events as CSV with columns
    /// `time, atom_index, accepted, pre_1..pre_d`.
    pub fn write_jumps_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(out, "time,atom_index,accepted")?;
        for i in 1..=self.dim {
            write!(out, ",pre_{i}")?;
        }
        writeln!(out)?;
        for ev in &self.jumps {
            write!(out, "{},{},{}", fmt_f64(ev.time), ev.atom_index, ev.accepted)?;
            for v in &ev.pre_state {
                write!(out, ",{}", fmt_f64(*v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Shortest decimal form that round-trips to the same f64 (`{}` on f64
/// guarantees this), so artifacts are byte-stable across runs and workers.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic, collision-resistant stream derivation: the 256-bit ChaCha
/// key is expanded from the seed, the 64-bit stream counter selects the
/// stream. Identical arguments give bit-identical draws on every platform
/// and worker count.
pub fn derive_stream(seed: u64, stream_index: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    let mut s = seed;
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    let mut rng = ChaCha12Rng::from_seed(key);
    rng.set_stream(stream_index);
    rng
}

/// Brownian stream of one path.
pub fn brownian_stream(seed: u64, path_index: u64) -> ChaCha12Rng {
    derive_stream(seed, 2 * path_index)
}

/// Jump-candidate stream of one path.
pub fn jump_stream(seed: u64, path_index: u64) -> ChaCha12Rng {
    derive_stream(seed, 2 * path_index + 1)
}

/// Draws the flat steps x m Brownian increment table for one path.
pub fn draw_increments(seed: u64, path_index: u64, grid: &TimeGrid, m: usize) -> Vec<f64> {
    let mut rng = brownian_stream(seed, path_index);
    let scale = grid.dt().sqrt();
    (0..grid.steps * m)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
        .collect()
}

/// Sums consecutive groups of `factor` fine increments into coarse ones, so
/// a coarse grid sees exactly the same Brownian path as the fine grid.
pub fn coarsen_increments(fine: &[f64], m: usize, factor: usize) -> Vec<f64> {
    assert!(factor > 0 && fine.len() % (m * factor) == 0, "grid sizes not nested");
    let coarse_steps = fine.len() / (m * factor);
    let mut out = vec![0.0; coarse_steps * m];
    for k in 0..coarse_steps {
        for f in 0..factor {
            let row = (k * factor + f) * m;
            for j in 0..m {
                out[k * m + j] += fine[row + j];
            }
        }
    }
    out
}

fn check_x0(model: &ModelSpec, x0: &[f64]) -> Result<()> {
    if x0.len() != model.dim() {
        return Err(Error::Config(format!(
            "initial state dimension {} does not match model dimension {}",
            x0.len(),
            model.dim()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("initial state must be finite, got {x0:?}")));
    }
    Ok(())
}

fn check_finite_state(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            step,
            message: format!("state became non-finite: {x:?}"),
        })
    }
}

/// One Euler node update with coefficients frozen at the left endpoint:
/// `x += drift_eff * dt; x += sigma dw`. Both integrators share this exact
/// arithmetic so their trajectories coincide when jumps are inert.
fn euler_node_update(
    x: &mut [f64],
    drift_eff: &[f64],
    sigma: &[f64],
    dw: &[f64],
    dt: f64,
    scratch: &mut [f64],
) {
    let d = x.len();
    let m = dw.len();
    for i in 0..d {
        x[i] += drift_eff[i] * dt;
    }
    crate::linalg::matvec(sigma, d, m, dw, scratch);
    for i in 0..d {
        x[i] += scratch[i];
    }
}

/// Euler-Maruyama for the continuous SDE, drawing increments from the
/// path's Brownian stream.
pub fn simulate_diffusion(
    model: &ModelSpec,
    x0: &[f64],
    grid: &TimeGrid,
    seed: u64,
    path_index: u64,
) -> Result<PathBundle> {
    let increments = draw_increments(seed, path_index, grid, model.noise_dim());
    simulate_diffusion_with_increments(model, x0, grid, increments, SeedInfo { seed, path_index })
}

/// Euler-Maruyama on caller-supplied increments (used by the nested-grid
/// convergence studies, which reuse one fine Brownian path on every level).
pub fn simulate_diffusion_with_increments(
    model: &ModelSpec,
    x0: &[f64],
    grid: &TimeGrid,
    increments: Vec<f64>,
    seed_info: SeedInfo,
) -> Result<PathBundle> {
    check_x0(model, x0)?;
    let (d, m) = (model.dim(), model.noise_dim());
    if increments.len() != grid.steps * m {
        return Err(Error::Config(format!(
            "increment table has {} entries, expected {} ({} steps x {} components)",
            increments.len(),
            grid.steps * m,
            grid.steps,
            m
        )));
    }
    let dt = grid.dt();
    let mut states = vec![0.0; (grid.steps + 1) * d];
    states[..d].copy_from_slice(x0);
    let mut drift = vec![0.0; d];
    let mut sigma = vec![0.0; d * m];
    let mut scratch = vec![0.0; d];
    for k in 0..grid.steps {
        let t_k = grid.time(k);
        let (head, tail) = states.split_at_mut((k + 1) * d);
        let x_k = &head[k * d..];
        let x_next = &mut tail[..d];
        x_next.copy_from_slice(x_k);
        model.drift_into(t_k, x_k, &mut drift);
        model.diffusion_into(t_k, x_k, &mut sigma);
        let dw = &increments[k * m..(k + 1) * m];
        euler_node_update(x_next, &drift, &sigma, dw, dt, &mut scratch);
        check_finite_state(x_next, k + 1)?;
    }
    Ok(PathBundle {
        grid: *grid,
        states,
        bm_increments: increments,
        jumps: Vec::new(),
        seed_info,
        dim: d,
        noise_dim: m,
    })
}

struct Candidate {
    time: f64,
    atom_index: usize,
    u_accept: f64,
}

/// Candidate jump times are a Poisson process of rate `total_mass`; each
/// candidate picks atom i with probability nu_i / total_mass and carries the
/// uniform later compared against lambda (thinning).
fn draw_jump_candidates(
    rng: &mut ChaCha12Rng,
    weights: &[f64],
    total_mass: f64,
    t_final: f64,
) -> Vec<Candidate> {
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        // Inverse-CDF exponential gap; u in [0,1) keeps 1-u in (0,1].
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / total_mass;
        if !(t <= t_final) {
            return out;
        }
        let pick: f64 = rng.random::<f64>() * total_mass;
        let mut acc = 0.0;
        let mut atom_index = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if pick < acc {
                atom_index = i;
                break;
            }
        }
        let u_accept: f64 = rng.random();
        out.push(Candidate { time: t, atom_index, u_accept });
    }
}

/// Euler-Maruyama for the jump SDE: per step the drift is
/// `b - sum_i jump_coeff(t_k, X_k, u_i) lambda(t_k, u_i) nu_i` (the
/// compensator of the thinned jump measure, left-endpoint rule), and
/// candidates landing in `(t_k, t_{k+1}]` are thinned with probability
/// `lambda(tau, u)` and applied at their exact times.
pub fn simulate_jump_diffusion(
    model: &ModelSpec,
    x0: &[f64],
    grid: &TimeGrid,
    seed: u64,
    path_index: u64,
) -> Result<PathBundle> {
    let increments = draw_increments(seed, path_index, grid, model.noise_dim());
    simulate_jump_diffusion_with_increments(
        model,
        x0,
        grid,
        increments,
        SeedInfo { seed, path_index },
    )
}

/// Jump Euler-Maruyama on caller-supplied Brownian increments. Jump
/// candidates are still drawn from the path's jump stream, and that draw
/// depends only on the horizon, never on the step count, so nested-grid
/// studies see the same candidate sequence on every refinement level.
pub fn simulate_jump_diffusion_with_increments(
    model: &ModelSpec,
    x0: &[f64],
    grid: &TimeGrid,
    increments: Vec<f64>,
    seed_info: SeedInfo,
) -> Result<PathBundle> {
    check_x0(model, x0)?;
    let jump = model
        .jump()
        .ok_or_else(|| Error::Config(format!("model `{}` has no jump data", model.name())))?;
    let total_mass = jump.total_mass();
    if !(total_mass > 0.0 && total_mass.is_finite()) {
        return Err(Error::Validation(format!(
            "jump measure must have positive finite total mass, got {total_mass}"
        )));
    }
    let (d, m) = (model.dim(), model.noise_dim());
    if increments.len() != grid.steps * m {
        return Err(Error::Config(format!(
            "increment table has {} entries, expected {} ({} steps x {} components)",
            increments.len(),
            grid.steps * m,
            grid.steps,
            m
        )));
    }
    let dt = grid.dt();
    let weights: Vec<f64> = jump.atoms().iter().map(|a| a.weight).collect();
    let mut jump_rng = jump_stream(seed_info.seed, seed_info.path_index);
    let candidates = draw_jump_candidates(&mut jump_rng, &weights, total_mass, grid.t_final);

    let mut states = vec![0.0; (grid.steps + 1) * d];
    states[..d].copy_from_slice(x0);
    let mut jumps = Vec::with_capacity(candidates.len());
    let mut drift = vec![0.0; d];
    let mut sigma = vec![0.0; d * m];
    let mut scratch = vec![0.0; d];
    let mut coeff = vec![0.0; d];
    let mut next_candidate = 0usize;

    for k in 0..grid.steps {
        let t_k = grid.time(k);
        // The last node is t_final itself: n * (T/n) can round below T, and
        // candidates are drawn on (0, T].
        let t_next = if k + 1 == grid.steps { grid.t_final } else { grid.time(k + 1) };
        let (head, tail) = states.split_at_mut((k + 1) * d);
        let x_k = &head[k * d..];
        let x_next = &mut tail[..d];
        x_next.copy_from_slice(x_k);

        // Jumps inside (t_k, t_{k+1}], in time order; pre_state tracks the
        // running state so stacked jumps within one step compose.
        while next_candidate < candidates.len() && candidates[next_candidate].time <= t_next {
            let c = &candidates[next_candidate];
            next_candidate += 1;
            let atom = &jump.atoms()[c.atom_index];
            let lam = jump.intensity_checked(c.time, &atom.mark)?;
            let accepted = c.u_accept < lam;
            let pre_state = x_next.to_vec();
            if accepted {
                jump.coeff_into(c.time, &pre_state, &atom.mark, &mut coeff);
                for i in 0..d {
                    x_next[i] += coeff[i];
                }
            }
            jumps.push(JumpEvent {
                time: c.time,
                step_index: k,
                atom_index: c.atom_index,
                pre_state,
                accepted,
            });
        }

        // Coefficients frozen at the left endpoint, before in-step jumps.
        model.drift_into(t_k, x_k, &mut drift);
        model.diffusion_into(t_k, x_k, &mut sigma);
        for atom in jump.atoms() {
            let lam = jump.intensity_checked(t_k, &atom.mark)?;
            jump.coeff_into(t_k, x_k, &atom.mark, &mut coeff);
            for i in 0..d {
                drift[i] -= coeff[i] * lam * atom.weight;
            }
        }
        let dw = &increments[k * m..(k + 1) * m];
        euler_node_update(x_next, &drift, &sigma, dw, dt, &mut scratch);
        check_finite_state(x_next, k + 1)?;
    }

    Ok(PathBundle {
        grid: *grid,
        states,
        bm_increments: increments,
        jumps,
        seed_info,
        dim: d,
        noise_dim: m,
    })
}
