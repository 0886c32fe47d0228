//! Run configuration for the `pathindep` binary.
//!
//! A run is described by a single JSON document. Every key has a default, so
//! the binary works without a config file; repeated `--set a.b.c=value`
//! assignments are applied to the document before it is parsed, and unknown
//! keys are rejected with the offending path. The fully resolved document
//! (defaults filled in) is echoed into every JSON artifact next to its
//! SHA-256 hash, so an artifact always records exactly what produced it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use pathindep::characterize::{EvaluationDomain, NamedCase, ResidualOp};
use pathindep::error::{Error, Result};
use pathindep::fields::{self, FTransform, ScalarField};
use pathindep::model::{self, BuiltinParams, ModeParam, ModelSpec, ProbeOptions, ProbeTriple};
use pathindep::simulate::TimeGrid;
use pathindep::verify::{ExperimentConfig, DEFAULT_EXCLUSION_LIMIT};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub field: FieldSpec,
    pub transform: Option<TransformSpec>,
    pub grid: GridSection,
    pub monte_carlo: MonteCarloSection,
    pub tolerances: ToleranceSection,
    /// Evaluation grid for residual, curl, and probe commands. When absent, a
    /// box around the model's default initial state is filled in at resolve
    /// time so the echoed config always shows concrete bounds.
    pub domain: Option<DomainSection>,
    /// Residual system for `check-residuals`; defaults to the integro version
    /// when the model carries jumps and the continuous one otherwise.
    pub residual_op: Option<ResidualOpSpec>,
    pub convergence: ConvergenceSection,
    pub probe: ProbeSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub name: String,
    pub params: BuiltinParams,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            name: "heat_kernel".into(),
            params: BuiltinParams::default(),
        }
    }
}

/// Which scalar field plays the role of v(t, x).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    /// The model's own reference field.
    Reference,
    /// Borrow another built-in model's reference field.
    ReferenceOf(String),
    /// `<a, x> - c t`.
    Linear { a: Vec<f64>, c: f64 },
    /// `exp(<a, x> - c t)`.
    ExpLinear { a: Vec<f64>, c: f64 },
    /// `|x|^2 / 2`.
    Quadratic { dim: usize },
    /// Constant `c`.
    Constant { dim: usize, c: f64 },
    /// `ln sum_i w_i exp(r_i x_coord - r_i^2 t / 2)`.
    LogSumExp {
        dim: usize,
        coord: usize,
        modes: Vec<ModeParam>,
    },
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec::Reference
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    Identity,
    Log,
    Tan,
    OddPower { k: i32 },
}

impl TransformSpec {
    pub fn build(&self) -> FTransform {
        match self {
            TransformSpec::Identity => FTransform::identity(),
            TransformSpec::Log => FTransform::log(),
            TransformSpec::Tan => FTransform::tan(),
            TransformSpec::OddPower { k } => FTransform::odd_power(*k),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub t_final: f64,
    pub steps: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            t_final: 1.0,
            steps: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloSection {
    pub paths: usize,
    pub seed: u64,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        MonteCarloSection {
            paths: 1000,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceSection {
    /// Identity runs fail when the max per-path error exceeds this. No bound
    /// is asserted when absent; the stats are still reported.
    pub error: Option<f64>,
    /// Fraction of paths allowed to be excluded before a run fails.
    pub exclusion_limit: f64,
    /// Residual sup-norm tolerance; when absent the library default applies
    /// (tighter for fields with analytic derivatives).
    pub residual: Option<f64>,
    /// Largest antisymmetry defect `curl-check` accepts.
    pub curl: f64,
}

impl Default for ToleranceSection {
    fn default() -> Self {
        ToleranceSection {
            error: None,
            exclusion_limit: DEFAULT_EXCLUSION_LIMIT,
            residual: None,
            curl: 1e-6,
        }
    }
}

/// Uniformly spaced axis: `count` values from `min` to `max` inclusive.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub times: AxisSpec,
    /// One axis per state coordinate.
    pub axes: Vec<AxisSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ResidualOpSpec {
    Hjb,
    Pide,
    Lambda,
    Gamma,
    /// One of the case-specific closed-form systems (a, b, c, d); `k` is the
    /// odd-power index for case c.
    Named { case: String, k: Option<i32> },
    /// The transformed system for an arbitrary f.
    Ftransform(TransformSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssertMode {
    /// Expect the identity error to shrink under refinement.
    Convergence,
    /// Expect it not to: the run passes only when the error stays large and
    /// flat relative to an exact control.
    Divergence,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceSection {
    /// Step counts per refinement level; each must divide the finest so the
    /// coarse Brownian increments are exact sums of the fine ones.
    pub levels: Vec<usize>,
    pub assert: AssertMode,
    /// Multiply the jump intensity by this factor before the run (divergence
    /// mode only): a deliberate model/exponent mismatch.
    pub intensity_scale: Option<f64>,
    /// Bounds on the fitted log-log slope, checked when the study is not in
    /// the exact regime.
    pub min_slope: Option<f64>,
    pub max_slope: Option<f64>,
    /// Require median(finest) <= max_ratio * median(coarsest). Without any
    /// explicit threshold, convergence mode requires a strict decrease.
    pub max_ratio: Option<f64>,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        ConvergenceSection {
            levels: vec![256, 512, 1024],
            assert: AssertMode::Convergence,
            intensity_scale: None,
            min_slope: None,
            max_slope: None,
            max_ratio: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaSpec {
    /// max(1, ln(1/r)) for r < 1, else 1.
    Default,
    /// Constant 1 (plain Lipschitz-type quotients).
    One,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub kappa: KappaSpec,
    pub lambda0_max: f64,
    pub lambda1_max: f64,
    pub hf_max: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            kappa: KappaSpec::Default,
            lambda0_max: 1e3,
            lambda1_max: 1e3,
            hf_max: 1e3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Artifact directory; `out` when absent.
    pub dir: Option<String>,
    /// Also write the term-by-term exponent ledger of path 0 as ledger.csv.
    pub ledger: bool,
}

/// Reads the config file (when given), applies `--set` overrides, and parses.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut root: Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read config file `{}`: {e}", p.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                Error::Config(format!("config file `{}` is not valid JSON: {e}", p.display()))
            })?
        }
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(Error::Config("config root must be a JSON object".into()));
    }
    for assignment in sets {
        apply_set(&mut root, assignment)?;
    }
    match serde_path_to_error::deserialize::<_, RunConfig>(root) {
        Ok(cfg) => Ok(cfg),
        Err(e) => Err(Error::Config(format!(
            "config error at `{}`: {}",
            e.path(),
            e.inner()
        ))),
    }
}

/// Applies one `key.path=value` assignment to the JSON document. The value is
/// parsed as JSON when possible and kept as a string otherwise, so
/// `--set grid.steps=4096` and `--set model.name=gruschin` both do the
/// expected thing. Paths create intermediate objects; to change a value
/// inside an array or an enum variant, set the whole key to a JSON literal.
fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        return Err(Error::Config(format!(
            "--set expects key.path=value, got `{assignment}`"
        )));
    };
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::Config(format!(
            "--set assignment `{assignment}` has an empty key path"
        )));
    }
    let value: Value = serde_json::from_str(raw.trim())
        .unwrap_or_else(|_| Value::String(raw.trim().to_string()));

    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!(
            "--set path `{path}` has an empty segment"
        )));
    }
    let (last, parents) = segments.split_last().expect("path is nonempty");
    let mut node = root;
    let mut walked: Vec<&str> = Vec::new();
    for seg in parents {
        walked.push(seg);
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "--set path `{path}` descends into the non-object value at `{}`",
                walked[..walked.len() - 1].join(".")
            ))
        })?;
        node = obj
            .entry((*seg).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| {
        Error::Config(format!(
            "--set path `{path}` descends into the non-object value at `{}`",
            walked.join(".")
        ))
    })?;
    obj.insert((*last).to_string(), value);
    Ok(())
}

/// A parsed config resolved against the model catalog: defaults materialized,
/// model and grid constructed, the echo document and its hash fixed.
pub struct Resolved {
    pub config: RunConfig,
    pub model: ModelSpec,
    pub grid: TimeGrid,
    /// The resolved config as a JSON value, embedded in every artifact.
    pub echo: Value,
    /// SHA-256 of the canonical echo text.
    pub hash: String,
}

pub fn resolve(mut cfg: RunConfig) -> Result<Resolved> {
    let model = model::builtin(&cfg.model.name, &cfg.model.params)?;
    let grid = TimeGrid::new(cfg.grid.t_final, cfg.grid.steps)?;
    if cfg.domain.is_none() {
        cfg.domain = Some(default_domain(&model));
    }
    if cfg.output.dir.is_none() {
        cfg.output.dir = Some("out".into());
    }
    let mut echo = serde_json::to_value(&cfg)?;
    // The echo pins down the experiment. Where artifacts land (and whether
    // the optional ledger is added next to them) changes no artifact's
    // bytes, so the output section stays out of the echo and the hash;
    // otherwise two runs into different directories could never compare
    // byte-identical.
    if let Some(obj) = echo.as_object_mut() {
        obj.remove("output");
    }
    // serde_json maps are sorted, so this text is canonical for the document.
    let hash = sha256_hex(&echo.to_string());
    Ok(Resolved {
        config: cfg,
        model,
        grid,
        echo,
        hash,
    })
}

impl Resolved {
    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.config.output.dir.as_deref().unwrap_or("out"))
    }

    pub fn seed(&self) -> u64 {
        self.config.monte_carlo.seed
    }

    pub fn domain_section(&self) -> &DomainSection {
        self.config
            .domain
            .as_ref()
            .expect("domain is materialized at resolve time")
    }

    /// Builds the evaluation grid, checking its dimension against the model.
    pub fn build_domain(&self) -> Result<EvaluationDomain> {
        let sec = self.domain_section();
        if sec.axes.len() != self.model.dim() {
            return Err(Error::Config(format!(
                "domain has {} axes but model `{}` has dimension {}",
                sec.axes.len(),
                self.model.name(),
                self.model.dim()
            )));
        }
        let times = axis_values(&sec.times)?;
        let axes: Vec<Vec<f64>> = sec.axes.iter().map(axis_values).collect::<Result<_>>()?;
        EvaluationDomain::grid(&times, &axes)
    }

    /// Assembles the experiment inputs for the given model (usually
    /// `self.model`, possibly rebuilt with a scaled intensity). Identity-type
    /// experiments need a field; martingale runs work without one.
    pub fn experiment(&self, model: &ModelSpec, need_field: bool) -> Result<ExperimentConfig> {
        let field = if need_field || !matches!(self.config.field, FieldSpec::Reference) {
            Some(build_field(&self.config.field, model)?)
        } else {
            None
        };
        let mc = &self.config.monte_carlo;
        let mut ec = ExperimentConfig::new(model.clone(), self.grid.clone(), mc.paths, mc.seed)?;
        if let Some(f) = field {
            ec = ec.with_field(f);
        }
        if let Some(t) = &self.config.transform {
            ec = ec.with_transform(t.build());
        }
        if let Some(tol) = self.config.tolerances.error {
            ec = ec.with_error_tolerance(tol);
        }
        ec.exclusion_limit = self.config.tolerances.exclusion_limit;
        ec.config_hash = Some(self.hash.clone());
        Ok(ec)
    }
}

/// A box around the model's default initial state: four interior times and
/// five points per axis within +-0.75 of the start. Kept clear of t = 0 and
/// sized so every built-in model's coefficients stay finite on it.
fn default_domain(model: &ModelSpec) -> DomainSection {
    DomainSection {
        times: AxisSpec {
            min: 0.25,
            max: 1.0,
            count: 4,
        },
        axes: model
            .default_x0()
            .iter()
            .map(|&c| AxisSpec {
                min: c - 0.75,
                max: c + 0.75,
                count: 5,
            })
            .collect(),
    }
}

pub fn axis_values(axis: &AxisSpec) -> Result<Vec<f64>> {
    if !(axis.min.is_finite() && axis.max.is_finite()) {
        return Err(Error::Config(format!(
            "axis bounds must be finite, got [{}, {}]",
            axis.min, axis.max
        )));
    }
    if axis.count == 0 {
        return Err(Error::Config("axis count must be at least 1".into()));
    }
    if axis.max < axis.min {
        return Err(Error::Config(format!(
            "axis max {} is below min {}",
            axis.max, axis.min
        )));
    }
    if axis.count == 1 {
        return Ok(vec![axis.min]);
    }
    let step = (axis.max - axis.min) / (axis.count - 1) as f64;
    Ok((0..axis.count)
        .map(|i| axis.min + step * i as f64)
        .collect())
}

pub fn build_field(spec: &FieldSpec, model: &ModelSpec) -> Result<ScalarField> {
    match spec {
        FieldSpec::Reference => model.reference_field().cloned().ok_or_else(|| {
            Error::Config(format!(
                "model `{}` has no reference field; pick one in the `field` section",
                model.name()
            ))
        }),
        FieldSpec::ReferenceOf(name) => {
            let donor = model::builtin(name, &BuiltinParams::default())?;
            donor.reference_field().cloned().ok_or_else(|| {
                Error::Config(format!("model `{name}` has no reference field to borrow"))
            })
        }
        FieldSpec::Linear { a, c } => Ok(fields::linear(a.clone(), *c)),
        FieldSpec::ExpLinear { a, c } => Ok(fields::exp_linear(a.clone(), *c)),
        FieldSpec::Quadratic { dim } => Ok(fields::quadratic(*dim)),
        FieldSpec::Constant { dim, c } => Ok(fields::constant(*dim, *c)),
        FieldSpec::LogSumExp { dim, coord, modes } => fields::log_sum_exp(
            *dim,
            *coord,
            modes.iter().map(|m| (m.rate, m.weight)).collect(),
        ),
    }
}

pub fn build_op(spec: Option<&ResidualOpSpec>, model: &ModelSpec) -> Result<ResidualOp> {
    match spec {
        None => Ok(if model.jump().is_some() {
            ResidualOp::Pide
        } else {
            ResidualOp::Hjb
        }),
        Some(ResidualOpSpec::Hjb) => Ok(ResidualOp::Hjb),
        Some(ResidualOpSpec::Pide) => Ok(ResidualOp::Pide),
        Some(ResidualOpSpec::Lambda) => Ok(ResidualOp::Lambda),
        Some(ResidualOpSpec::Gamma) => Ok(ResidualOp::Gamma),
        Some(ResidualOpSpec::Named { case, k }) => {
            Ok(ResidualOp::Named(NamedCase::from_letter(case, k.unwrap_or(0))?))
        }
        Some(ResidualOpSpec::Ftransform(t)) => Ok(ResidualOp::FTransform(t.build())),
    }
}

pub fn build_probe_options(p: &ProbeSection) -> ProbeOptions {
    let mut opts = ProbeOptions::default();
    if p.kappa == KappaSpec::One {
        opts.kappa = Arc::new(|_| 1.0);
    }
    opts.lambda0_max = p.lambda0_max;
    opts.lambda1_max = p.lambda1_max;
    opts.hf_max = p.hf_max;
    opts
}

/// Probe pairs read off the evaluation grid: at each time, every pair of
/// neighbouring space points plus one long-range pair, giving the modulus
/// profile both small and order-one separations.
pub fn build_probes(domain: &EvaluationDomain, n_times: usize) -> Result<Vec<ProbeTriple>> {
    let pts = domain.points();
    if n_times == 0 || pts.len() % n_times != 0 {
        return Err(Error::Validation(
            "probe domain is not a full time-space product grid".into(),
        ));
    }
    // grid() orders points space-major: all times for one x sit together.
    let n_space = pts.len() / n_times;
    if n_space < 2 {
        return Err(Error::Validation(
            "hypothesis probes need at least two space points in the domain".into(),
        ));
    }
    let at = |s: usize, k: usize| &pts[s * n_times + k];
    let mut probes = Vec::new();
    for k in 0..n_times {
        for s in 0..n_space - 1 {
            let (t, x) = at(s, k);
            let (_, y) = at(s + 1, k);
            probes.push((*t, x.clone(), y.clone()));
        }
        if n_space > 2 {
            let (t, x) = at(0, k);
            let (_, y) = at(n_space - 1, k);
            probes.push((*t, x.clone(), y.clone()));
        }
    }
    Ok(probes)
}

pub fn sha256_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(json: &str, sets: &[&str]) -> Result<RunConfig> {
        let mut root: Value = serde_json::from_str(json).unwrap();
        let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
        for s in &sets {
            apply_set(&mut root, s)?;
        }
        match serde_path_to_error::deserialize::<_, RunConfig>(root) {
            Ok(cfg) => Ok(cfg),
            Err(e) => Err(Error::Config(format!(
                "config error at `{}`: {}",
                e.path(),
                e.inner()
            ))),
        }
    }

    #[test]
    fn empty_document_parses_to_defaults() {
        let cfg = parse("{}", &[]).unwrap();
        assert_eq!(cfg.model.name, "heat_kernel");
        assert_eq!(cfg.grid.steps, 64);
        assert_eq!(cfg.monte_carlo.paths, 1000);
        assert!(matches!(cfg.field, FieldSpec::Reference));
        assert!(cfg.transform.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = parse(r#"{"grid": {"stepz": 16}}"#, &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stepz"), "message should name the bad key: {msg}");
        assert!(msg.contains("grid"), "message should locate the section: {msg}");
    }

    #[test]
    fn set_overrides_parse_json_values_and_bare_strings() {
        let cfg = parse(
            "{}",
            &[
                "model.name=gruschin",
                "model.params.k=2",
                "grid.steps=128",
                "output.ledger=true",
                r#"field={"quadratic":{"dim":2}}"#,
            ],
        )
        .unwrap();
        assert_eq!(cfg.model.name, "gruschin");
        assert_eq!(cfg.model.params.k, Some(2));
        assert_eq!(cfg.grid.steps, 128);
        assert!(cfg.output.ledger);
        assert!(matches!(cfg.field, FieldSpec::Quadratic { dim: 2 }));
    }

    #[test]
    fn set_rejects_malformed_assignments() {
        let mut root = Value::Object(Default::default());
        assert!(apply_set(&mut root, "no_equals_sign").is_err());
        assert!(apply_set(&mut root, "=5").is_err());
        assert!(apply_set(&mut root, "a..b=5").is_err());
        apply_set(&mut root, "grid.steps=16").unwrap();
        // grid.steps is now a number; descending through it must fail.
        assert!(apply_set(&mut root, "grid.steps.deeper=1").is_err());
    }

    #[test]
    fn resolve_materializes_domain_and_output_defaults() {
        let res = resolve(parse("{}", &[]).unwrap()).unwrap();
        let sec = res.domain_section();
        assert_eq!(sec.axes.len(), res.model.dim());
        assert_eq!(res.config.output.dir.as_deref(), Some("out"));
        // The echo must reflect the materialized values, not the input.
        assert!(res.echo.pointer("/domain/times/count").is_some());
        // ... but never the output section: artifact bytes must not depend
        // on where they are written.
        assert!(res.echo.get("output").is_none());
        assert_eq!(res.hash.len(), 64);
    }

    #[test]
    fn resolved_hash_is_stable_for_equal_configs_and_differs_across_seeds() {
        let a = resolve(parse("{}", &[]).unwrap()).unwrap();
        let b = resolve(parse("{}", &[]).unwrap()).unwrap();
        let c = resolve(parse("{}", &["monte_carlo.seed=7"]).unwrap()).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, c.hash);
    }

    #[test]
    fn axis_values_cover_the_range_inclusively() {
        let vals = axis_values(&AxisSpec {
            min: -1.0,
            max: 1.0,
            count: 5,
        })
        .unwrap();
        assert_eq!(vals, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(
            axis_values(&AxisSpec {
                min: 2.0,
                max: 2.0,
                count: 1
            })
            .unwrap(),
            vec![2.0]
        );
        assert!(axis_values(&AxisSpec {
            min: 1.0,
            max: 0.0,
            count: 3
        })
        .is_err());
        assert!(axis_values(&AxisSpec {
            min: 0.0,
            max: 1.0,
            count: 0
        })
        .is_err());
    }

    #[test]
    fn default_domain_stays_admissible_for_every_builtin() {
        for entry in model::catalog() {
            let m = model::builtin(entry.name, &BuiltinParams::default()).unwrap();
            let res = resolve(
                parse("{}", &[&format!("model.name={}", entry.name)]).unwrap(),
            )
            .unwrap();
            let domain = res.build_domain().unwrap();
            assert!(domain.len() > 0, "{}: empty default domain", entry.name);
            for (t, x) in domain.points() {
                assert!(
                    m.check_finite_at(*t, x).is_ok(),
                    "{}: default domain leaves the finite region at t={t}, x={x:?}",
                    entry.name
                );
            }
        }
    }

    #[test]
    fn probes_pair_distinct_space_points_at_equal_times() {
        let domain = EvaluationDomain::grid(
            &[0.5, 1.0],
            &[vec![0.0, 1.0, 2.0]],
        )
        .unwrap();
        let probes = build_probes(&domain, 2).unwrap();
        // two neighbour pairs plus one long-range pair, per time
        assert_eq!(probes.len(), 6);
        for (t, x, y) in &probes {
            assert!(*t == 0.5 || *t == 1.0);
            assert_ne!(x, y);
        }
        let single = EvaluationDomain::grid(&[0.5], &[vec![1.0]]).unwrap();
        assert!(build_probes(&single, 1).is_err());
    }

    #[test]
    fn field_spec_resolves_against_the_model_catalog() {
        let gruschin = model::builtin("gruschin", &BuiltinParams::default()).unwrap();
        assert!(build_field(&FieldSpec::Reference, &gruschin).is_err());
        let borrowed = build_field(
            &FieldSpec::ReferenceOf("two_exponential".into()),
            &gruschin,
        )
        .unwrap();
        // same Gruschin geometry, so the donor field matches gruschin's state dim
        assert_eq!(borrowed.dim(), gruschin.dim());
        let quad = build_field(&FieldSpec::Quadratic { dim: 2 }, &gruschin).unwrap();
        assert_eq!(quad.dim(), 2);
    }
}
