//! Declarative experiment configuration (TOML).

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::argmin::BaseGrid;
use crate::error::{Error, Result};
use crate::field::BoxDomain;
use crate::jets::{BlockSplit, Jet2, JetOptions};
use crate::linalg::{matrix_from_rows, operator_norm, SymMatrix};
use crate::subequations::Subequation;
use crate::supconv::SupConvOptions;

use super::contact::ContactCheckOptions;
use super::families::{generate_field, FamilyConfig, GeneratedField};
use super::pipeline::{admissible_base, PipelineOptions};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random draw; there is no other source of randomness.
    pub seed: u64,
    pub subequation: Option<SubequationConfig>,
    pub family: FamilyConfig,
    pub domain: DomainConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub prox: ProxSection,
    #[serde(default)]
    pub argmin: ArgminSection,
    #[serde(default)]
    pub supconv: SupconvSection,
    #[serde(default)]
    pub check_sub: CheckSubSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub assertions: Assertions,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubequationConfig {
    pub name: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

/// A box given either as a cube radius or by explicit bounds.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoxSpec {
    Radius(f64),
    Bounds { lower: Vec<f64>, upper: Vec<f64> },
}

impl BoxSpec {
    pub fn to_domain(&self, dim: usize) -> Result<BoxDomain> {
        match self {
            BoxSpec::Radius(r) if *r > 0.0 => Ok(BoxDomain::cube(dim, *r)),
            BoxSpec::Radius(r) => Err(Error::Config(format!("box radius must be positive, got {r}"))),
            BoxSpec::Bounds { lower, upper } => {
                if lower.len() != dim {
                    return Err(Error::Config(format!("box has dimension {}, expected {dim}", lower.len())));
                }
                BoxDomain::new(lower.clone(), upper.clone()).map_err(|e| Error::Config(e.to_string()))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub base: BoxSpec,
    /// Defaults to a cube that holds the fiber minimizers over the base box
    /// with room to spare.
    pub fiber: Option<BoxSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub per_axis: usize,
    /// Region covered by the base grid; defaults to the largest admissible one.
    pub region: Option<BoxSpec>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            per_axis: 20,
            region: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxSection {
    /// When nonempty, sweep the coupled quadratic family over these σ
    /// instead of testing the configured family.
    pub sigmas: Vec<f64>,
    pub pairs: usize,
    pub radius: f64,
    pub tol: f64,
    pub resolvent_tol: f64,
    /// Points `ζ` at which `H(ζ)` of the configured family is reported.
    pub points: Vec<Vec<f64>>,
}

impl Default for ProxSection {
    fn default() -> Self {
        ProxSection {
            sigmas: Vec::new(),
            pairs: 1000,
            radius: 5.0,
            tol: 1e-7,
            resolvent_tol: 1e-9,
            points: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArgminSection {
    pub tol: f64,
    pub flag_factor: f64,
    /// Also check `J(x, ∇g, γ(x)) = 0` when the field is certified convex.
    pub functional: bool,
    pub functional_tol: f64,
}

impl Default for ArgminSection {
    fn default() -> Self {
        ArgminSection {
            tol: 1e-10,
            flag_factor: 10.0,
            functional: true,
            functional_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupconvSection {
    /// Strictly decreasing.
    pub epsilons: Vec<f64>,
    pub points: usize,
    pub segments: usize,
    pub tol: f64,
    pub fiber_step: f64,
    pub strict_localization: bool,
}

impl Default for SupconvSection {
    fn default() -> Self {
        SupconvSection {
            epsilons: vec![1.0, 0.1],
            points: 100,
            segments: 100,
            tol: 1e-8,
            fiber_step: 1e-2,
            strict_localization: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSubSection {
    pub samples: usize,
    pub jet_step: f64,
    pub positivity_trials: usize,
    pub gamma_samples: usize,
    pub gamma_radius: f64,
    pub use_reducer: bool,
}

impl Default for CheckSubSection {
    fn default() -> Self {
        CheckSubSection {
            samples: 100,
            jet_step: 1e-3,
            positivity_trials: 200,
            gamma_samples: 256,
            gamma_radius: 10.0,
            use_reducer: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub js: Vec<u64>,
    pub epsilons: Vec<f64>,
    pub membership_slack: f64,
    pub jet_step: f64,
    pub stability_factor: f64,
    pub argmin_tol: f64,
    pub supconv_tol: f64,
    pub contact: bool,
    pub contact_radius: f64,
    pub contact_samples: usize,
    pub contact_epsilon: f64,
    pub contact_tol: f64,
    pub monotone_tol: f64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineOptions::default();
        PipelineSection {
            js: p.js,
            epsilons: p.epsilons,
            membership_slack: p.membership_slack,
            jet_step: p.jet.step,
            stability_factor: p.jet.stability_factor,
            argmin_tol: p.argmin.tol,
            supconv_tol: p.supconv.tol,
            contact: p.check_contact,
            contact_radius: p.contact.radius,
            contact_samples: p.contact.samples,
            contact_epsilon: p.contact_epsilon,
            contact_tol: p.contact.tol,
            monotone_tol: p.monotone_tol,
        }
    }
}

/// Optional thresholds; each subcommand also has built-in checks.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Assertions {
    /// `minprin`: violations among stable points (default 0).
    pub max_violation_rate: Option<f64>,
    pub min_violation_rate: Option<f64>,
    /// `minprin`: fraction of points whose solves failed.
    pub max_error_rate: Option<f64>,
    /// `argmin`: fraction of grid points flagged non-differentiable.
    pub max_flagged_fraction: Option<f64>,
    pub min_flagged_fraction: Option<f64>,
    /// `check-sub`: expected verdict of every sampled jet (default member).
    pub expect_member: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Relative paths resolve against the config file's directory.
    pub report: PathBuf,
    pub points: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            report: PathBuf::from("report.json"),
            points: PathBuf::from("points.csv"),
        }
    }
}

impl OutputConfig {
    pub fn resolve(&self, base: &Path) -> (PathBuf, PathBuf) {
        (base.join(&self.report), base.join(&self.points))
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) | Error::Io(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Checks that do not need the generated field.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.grid.per_axis < 2 {
            return bad("grid.per_axis must be at least 2".into());
        }
        let p = &self.pipeline;
        if p.js.is_empty() || p.js.contains(&0) {
            return bad("pipeline.js must be nonempty with every j ≥ 1".into());
        }
        if p.epsilons.is_empty() || p.epsilons.iter().any(|e| !(*e > 0.0)) {
            return bad("pipeline.epsilons must be nonempty and positive".into());
        }
        if !(p.jet_step > 0.0) || !(p.contact_radius > 0.0) || !(p.contact_epsilon > 0.0) || p.membership_slack < 0.0 {
            return bad("pipeline steps, radii and slacks must be positive".into());
        }
        let s = &self.supconv;
        if s.epsilons.is_empty() || s.epsilons.windows(2).any(|w| w[1] >= w[0]) || s.epsilons.iter().any(|e| !(*e > 0.0)) {
            return bad("supconv.epsilons must be positive and strictly decreasing".into());
        }
        if self.prox.sigmas.iter().any(|s| !(*s > 0.0)) || self.prox.pairs == 0 || !(self.prox.radius > 0.0) {
            return bad("prox needs positive sigmas, pairs and radius".into());
        }
        if self.check_sub.samples == 0 || !(self.check_sub.jet_step > 0.0) {
            return bad("check_sub needs samples ≥ 1 and a positive jet step".into());
        }
        self.family.dims().map_err(config_err)?;
        Ok(())
    }

    pub fn dims(&self) -> Result<(usize, usize)> {
        self.family.dims()
    }

    pub fn subequation(&self) -> Result<Option<Subequation>> {
        let Some(s) = &self.subequation else {
            return Ok(None);
        };
        let (n, _) = self.dims()?;
        Subequation::catalog(&s.name, n, &s.params).map(Some).map_err(config_err)
    }

    pub fn require_subequation(&self) -> Result<Subequation> {
        self.subequation()?
            .ok_or_else(|| Error::Config("this command needs a [subequation] section".into()))
    }

    /// Working box: the configured base box times the configured or automatic fiber box.
    pub fn domain(&self) -> Result<BoxDomain> {
        let (n, m) = self.dims()?;
        let base = self.domain.base.to_domain(n)?;
        let fiber = match &self.domain.fiber {
            Some(spec) => spec.to_domain(m)?,
            None => BoxDomain::cube(m, self.auto_fiber_radius(&base)?),
        };
        Ok(BoxDomain::product(&base, &fiber))
    }

    /// `1.25 · sup ‖γ‖ + 0.5` for families with a linear or explicit argmin.
    fn auto_fiber_radius(&self, base: &BoxDomain) -> Result<f64> {
        let r = base.max_norm();
        let slope = match &self.family {
            FamilyConfig::Zero { .. } => 0.0,
            FamilyConfig::KinkedBase => 2.0 / 3.0,
            FamilyConfig::CoupledQuadratic { sigma } => 1.0 / (1.0 + sigma),
            FamilyConfig::BlockQuadratic { c, d, .. } | FamilyConfig::QuadraticPlusCosine { c, d, .. } => {
                let d = SymMatrix::from_rows(d).map_err(config_err)?;
                let c = matrix_from_rows(c, d.dim()).map_err(config_err)?;
                argmin_slope(&c, &d)?
            }
            FamilyConfig::RandomBlockQuadratic { .. } => {
                // the draw does not depend on the box; generate once on a placeholder
                let (_, m) = self.dims()?;
                let probe = BoxDomain::product(base, &BoxDomain::cube(m, 1.0));
                let g = generate_field(&self.family, self.subequation()?.as_ref(), &probe, self.seed)
                    .map_err(config_err)?;
                let blocks = BlockSplit::new(base.dim(), m)
                    .blocks(&Jet2::from_hessian(g.hessian.expect("quadratic family")))?;
                argmin_slope(&blocks.c, &blocks.d)?
            }
        };
        Ok(1.25 * slope * r + 0.5)
    }

    pub fn field(&self) -> Result<GeneratedField> {
        generate_field(&self.family, self.subequation()?.as_ref(), &self.domain()?, self.seed).map_err(config_err)
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        let p = &self.pipeline;
        let mut opts = PipelineOptions {
            js: p.js.clone(),
            epsilons: p.epsilons.clone(),
            membership_slack: p.membership_slack,
            jet: JetOptions {
                step: p.jet_step,
                stability_factor: p.stability_factor,
            },
            supconv: SupConvOptions {
                tol: p.supconv_tol,
                ..Default::default()
            },
            check_contact: p.contact,
            contact: ContactCheckOptions {
                radius: p.contact_radius,
                samples: p.contact_samples,
                seed: self.seed,
                tol: p.contact_tol,
            },
            contact_epsilon: p.contact_epsilon,
            monotone_tol: p.monotone_tol,
            ..Default::default()
        };
        opts.argmin.tol = p.argmin_tol;
        opts
    }

    /// Base grid over the configured region, or over `default_region` when
    /// none is given. A configured region must lie inside `allowed`.
    pub fn base_grid(&self, default_region: &BoxDomain, allowed: &BoxDomain) -> Result<BaseGrid> {
        let region = match &self.grid.region {
            Some(spec) => {
                let r = spec.to_domain(default_region.dim())?;
                let inside = r.lower.iter().zip(&allowed.lower).all(|(a, b)| a >= b)
                    && r.upper.iter().zip(&allowed.upper).all(|(a, b)| a <= b);
                if !inside {
                    return Err(Error::Config(format!(
                        "grid region {:?}..{:?} leaves the admissible box {:?}..{:?}",
                        r.lower, r.upper, allowed.lower, allowed.upper
                    )));
                }
                r
            }
            None => default_region.clone(),
        };
        BaseGrid::uniform(&region, self.grid.per_axis).map_err(config_err)
    }

    /// The `minprin` grid: inside `U` shrunk by the largest `δ` and probe radius.
    pub fn pipeline_grid(&self, generated: &GeneratedField) -> Result<BaseGrid> {
        let opts = self.pipeline_options();
        let admissible = admissible_base(&generated.field, &opts)
            .map_err(config_err)?
            .ok_or_else(|| Error::Config("the base box does not contain U(δ) for the largest ε".into()))?;
        self.base_grid(&admissible, &admissible)
    }
}

fn argmin_slope(c: &DMatrix<f64>, d: &SymMatrix) -> Result<f64> {
    if d.dim() == 0 {
        return Ok(0.0);
    }
    let d_inv = d
        .as_matrix()
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Config("singular fiber block: give domain.fiber explicitly".into()))?;
    Ok(operator_norm(&(d_inv * c.transpose())))
}

#[cfg(test)]
mod tests {
    use super::*;

    const POSITIVE: &str = r#"
seed = 3

[subequation]
name = "trace"

[family]
name = "block-quadratic"
b = [[1.0, 0.0], [0.0, 1.0]]
c = [[1.0], [0.0]]
d = [[1.0]]

[domain]
base = 1.0

[grid]
per_axis = 5
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str(POSITIVE).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.pipeline.js, vec![100]);
        assert_eq!(cfg.output.report, PathBuf::from("report.json"));
        let dom = cfg.domain().unwrap();
        // ‖D⁻¹Cᵗ‖ = 1 and max ‖x‖ = √2
        assert!((dom.upper[2] - (1.25 * 2f64.sqrt() + 0.5)).abs() < 1e-12);
        let g = cfg.field().unwrap();
        let grid = cfg.pipeline_grid(&g).unwrap();
        assert_eq!(grid.len(), 25);
    }

    #[test]
    fn rejects_bad_configs() {
        let missing_seed = POSITIVE.replace("seed = 3", "");
        assert!(matches!(ExperimentConfig::from_toml_str(&missing_seed), Err(Error::Config(_))));
        let unknown_key = POSITIVE.replace("per_axis = 5", "per_axis = 5\ncolor = 1");
        assert!(matches!(ExperimentConfig::from_toml_str(&unknown_key), Err(Error::Config(_))));
        let zero_j = format!("{POSITIVE}\n[pipeline]\njs = [0]\n");
        assert!(matches!(ExperimentConfig::from_toml_str(&zero_j), Err(Error::Config(_))));
    }

    #[test]
    fn grid_region_must_fit_inside_localization_box() {
        let wide = POSITIVE.replace("per_axis = 5", "per_axis = 5\nregion = 1.0");
        let cfg = ExperimentConfig::from_toml_str(&wide).unwrap();
        let g = cfg.field().unwrap();
        assert!(matches!(cfg.pipeline_grid(&g), Err(Error::Config(_))));
        let narrow = POSITIVE.replace("per_axis = 5", "per_axis = 5\nregion = 0.2");
        let cfg = ExperimentConfig::from_toml_str(&narrow).unwrap();
        assert!(cfg.pipeline_grid(&cfg.field().unwrap()).is_ok());
    }

    #[test]
    fn unknown_subequation_is_a_config_error() {
        let cfg = ExperimentConfig::from_toml_str(&POSITIVE.replace("\"trace\"", "\"nope\"")).unwrap();
        assert!(matches!(cfg.subequation(), Err(Error::Config(_))));
    }
}
