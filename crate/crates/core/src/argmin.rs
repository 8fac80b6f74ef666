//! The fiber argmin map `γ`, the marginal `g(x) = inf_y f(x,y)`, lower support
//! vectors of `g`, the implicit equation `J(x, u, y) = 0` characterizing `γ`,
//! and sampled calmness/differentiability diagnostics for `γ`.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{BoxDomain, Certificates, ScalarField};
use crate::jets::sample_ball;
use crate::linalg::concat;
use crate::optim::{minimize, MinimizeOptions, SolveReport};
use crate::prox::{contraction_mu, resolvent_base, resolvent_full, ResolventOptions};

/// Cells of the nominal fiber grid; the boundary margin is two of its cells.
pub const FIBER_GRID_CELLS: f64 = 100.0;

#[derive(Clone, Debug)]
pub struct ArgminOptions {
    /// Fiber stationarity tolerance.
    pub tol: f64,
    pub max_iter: usize,
    /// Minimizers closer than this to the fiber box boundary are rejected.
    /// `None` means two cells of a [`FIBER_GRID_CELLS`] grid.
    pub boundary_margin: Option<f64>,
    /// Starting fiber point; the box center when absent.
    pub start: Option<DVector<f64>>,
}

impl Default for ArgminOptions {
    fn default() -> Self {
        ArgminOptions {
            tol: 1e-10,
            max_iter: 100_000,
            boundary_margin: None,
            start: None,
        }
    }
}

impl ArgminOptions {
    pub fn with_tol(tol: f64) -> Self {
        ArgminOptions {
            tol,
            ..Default::default()
        }
    }

    fn margin(&self, fiber: &BoxDomain) -> f64 {
        self.boundary_margin.unwrap_or_else(|| {
            let w = fiber.widths().into_iter().fold(f64::INFINITY, f64::min);
            2.0 * w / FIBER_GRID_CELLS
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ArgminResult {
    pub x: Vec<f64>,
    pub gamma: Vec<f64>,
    pub g_value: f64,
    pub report: SolveReport,
}

impl ArgminResult {
    pub fn gamma_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.gamma)
    }
}

/// Minimizes `y ↦ f(x, y)` over the fiber box. Needs a fiber strong
/// convexity certificate `σ > 0`, which makes the minimizer unique.
pub fn solve_argmin(f: &ScalarField, x: &DVector<f64>, opts: &ArgminOptions) -> Result<ArgminResult> {
    let n = f.base_dim();
    let m = f.fiber_dim();
    if x.len() != n {
        return Err(Error::DimensionMismatch(format!("base point has length {}, expected {n}", x.len())));
    }
    let sigma = f.certificates().sigma().ok_or_else(|| {
        Error::MissingCertificate(format!("argmin of `{}` needs fiber convexity σ > 0", f.name()))
    })?;
    if !f.base_domain().contains(x) {
        return Err(Error::OutsideDomain {
            point: x.iter().copied().collect(),
            what: "base box".into(),
        });
    }
    let fiber = f.fiber_domain();
    let mut start = opts.start.clone().unwrap_or_else(|| fiber.center());
    if start.len() != m {
        return Err(Error::DimensionMismatch("argmin start point".into()));
    }
    fiber.project(&mut start);

    let objective = |y: &DVector<f64>| f.value_and_partial_gradient(&concat(x, y), n, m);
    let projection = |y: &mut DVector<f64>| fiber.project(y);
    let min_opts = MinimizeOptions {
        tol: opts.tol,
        max_iter: opts.max_iter,
        strong_convexity: Some(sigma),
        initial_lipschitz: f.certificates().fiber_semiconcavity.unwrap_or(sigma).max(sigma),
        check_kinks: false,
    };
    let report = minimize(objective, &start, Some(&projection), &min_opts)?;
    if !report.converged {
        return Err(Error::NonConvergence {
            iterations: report.iterations,
            residual: report.residual,
        });
    }
    let gamma = report.point_vector();
    let margin = opts.margin(&fiber);
    if !fiber.contains_with_margin(&gamma, margin) {
        return Err(Error::BoundaryMinimizer {
            gamma: report.point.clone(),
            margin,
        });
    }
    Ok(ArgminResult {
        x: x.iter().copied().collect(),
        gamma: report.point.clone(),
        g_value: report.value,
        report,
    })
}

/// The marginal `g` as a field on the base box. Its gradient comes from the
/// envelope formula `∇g(x) = ∇ₓf(x, γ(x))`, which is insensitive to the inner
/// solve tolerance. `g` inherits the semiconvexity certificate of `f`.
pub fn marginal_field(f: &ScalarField, opts: &ArgminOptions) -> Result<ScalarField> {
    if f.certificates().sigma().is_none() {
        return Err(Error::MissingCertificate(format!(
            "marginal of `{}` needs fiber convexity σ > 0",
            f.name()
        )));
    }
    let n = f.base_dim();
    let src = f.clone();
    let eval_src = f.clone();
    let eval_opts = opts.clone();
    let grad_opts = opts.clone();
    let certs = Certificates {
        semiconvexity: f.certificates().semiconvexity,
        sup_norm: f.certificates().sup_norm,
        ..Default::default()
    };
    Ok(ScalarField::fallible(format!("marginal({})", f.name()), n, 0, f.base_domain(), move |x| {
        Ok(solve_argmin(&eval_src, x, &eval_opts)?.g_value)
    })?
    .with_value_and_gradient(move |x| {
        let r = solve_argmin(&src, x, &grad_opts)?;
        let z = concat(x, &r.gamma_vector());
        let (_, gx) = src.value_and_partial_gradient(&z, 0, n)?;
        Ok((r.g_value, gx))
    })
    .with_certificates(certs))
}

/// A lower `κ`-support vector `u` of `g` at `x`.
#[derive(Clone, Debug, Serialize)]
pub struct SupportVector {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub kappa: f64,
    /// One-sided derivatives disagreed at `x`.
    pub nonsmooth: bool,
}

impl SupportVector {
    pub fn u_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.u)
    }

    /// `g(x′) − g(x) − u·(x′−x) + (κ/2)‖x′−x‖²`; nonnegative for a valid vector.
    pub fn gap(&self, g: &ScalarField, x_prime: &DVector<f64>) -> Result<f64> {
        let x = DVector::from_column_slice(&self.x);
        let d = x_prime - &x;
        Ok(g.value(x_prime)? - g.value(&x)? - self.u_vector().dot(&d) + 0.5 * self.kappa * d.norm_squared())
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ProbeOptions {
    /// One-sided difference step, scaled by `1 + ‖x‖`.
    pub step: f64,
    /// Validation samples in the ball of radius `radius` around `x`.
    pub samples: usize,
    pub radius: f64,
    pub seed: u64,
    /// Absolute slack of the validation inequality, scaled by `1 + |g(x)|`.
    pub tol: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            step: 1e-6,
            samples: 32,
            radius: 1e-2,
            seed: 0,
            tol: 1e-8,
        }
    }
}

/// Finite-difference support vector of the `κ`-semiconvex `g` at `x`.
///
/// Differentiates the convexified `g + (κ/2)‖·‖²` coordinatewise. Where the
/// one-sided quotients jump, the coordinate takes the point of `[bwd, fwd]`
/// nearest 0. The result is shifted back by `−κx` and checked against the
/// support inequality on a seeded neighborhood sample.
pub fn subdifferential_probe(g: &ScalarField, x: &DVector<f64>, kappa: f64, opts: &ProbeOptions) -> Result<SupportVector> {
    if g.fiber_dim() != 0 {
        return Err(Error::DimensionMismatch(format!(
            "support vectors are taken on the base; `{}` has a fiber",
            g.name()
        )));
    }
    if !(kappa >= 0.0) {
        return Err(Error::InvalidParameter(format!("κ must be nonnegative, got {kappa}")));
    }
    let n = x.len();
    let t = opts.step * (1.0 + x.norm());
    let h = |z: &DVector<f64>| -> Result<f64> { Ok(g.value(z)? + 0.5 * kappa * z.norm_squared()) };
    let h0 = h(x)?;
    let mut u = DVector::zeros(n);
    let mut nonsmooth = false;
    let mut probe = x.clone();
    for i in 0..n {
        probe[i] = x[i] + t;
        let fwd = (h(&probe)? - h0) / t;
        probe[i] = x[i] - t;
        let bwd = (h0 - h(&probe)?) / t;
        probe[i] = x[i];
        let jump = 1e-4 * (1.0 + fwd.abs() + bwd.abs());
        u[i] = if fwd - bwd > jump {
            nonsmooth = true;
            0.0_f64.clamp(bwd, fwd)
        } else {
            0.5 * (fwd + bwd)
        };
    }
    let sv = SupportVector {
        x: x.iter().copied().collect(),
        u: (u - x * kappa).iter().copied().collect(),
        kappa,
        nonsmooth,
    };

    let g0 = g.value(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let domain = g.domain();
    for _ in 0..opts.samples {
        let mut xp = x + sample_ball(&mut rng, n, opts.radius);
        domain.project(&mut xp);
        let d = (&xp - x).norm();
        // first-order error of the difference quotients is O(t) per unit distance
        let slack = opts.tol * (1.0 + g0.abs()) + 1e2 * t * d;
        let gap = sv.gap(g, &xp)?;
        if gap < -slack {
            return Err(Error::ValidationFailed(format!(
                "support vector of `{}` at {:?} violates the κ={kappa} inequality by {:.3e}",
                g.name(),
                sv.x,
                -gap
            )));
        }
    }
    Ok(sv)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FunctionalOptions {
    /// Residual tolerance of both resolvent solves.
    pub tol: f64,
}

impl Default for FunctionalOptions {
    fn default() -> Self {
        FunctionalOptions { tol: 1e-11 }
    }
}

fn check_convex(field: &ScalarField, role: &str) -> Result<()> {
    if !field.certificates().is_convex() {
        return Err(Error::MissingCertificate(format!(
            "{role} `{}` must be certified convex; apply the tilde shift first",
            field.name()
        )));
    }
    Ok(())
}

/// `v = H₁(x + u) + u`, the base argument of `J` that does not depend on `y`.
pub fn base_argument(g: &ScalarField, x: &DVector<f64>, u: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    let h1 = resolvent_base(g, &(x + u), &ResolventOptions::with_tol(tol))?;
    Ok(h1.point_vector() + u)
}

fn fiber_step(f: &ScalarField, v: &DVector<f64>, y: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    let h = resolvent_full(f, &concat(v, y), &ResolventOptions::with_tol(tol))?;
    Ok(h.point_vector().rows(f.base_dim(), f.fiber_dim()).into_owned())
}

/// `J(x, u, y) = y − π₂H(H₁(x+u) + u, y)` for convex `f` with convex marginal `g`.
#[allow(non_snake_case)]
pub fn functional_J(
    f: &ScalarField,
    g: &ScalarField,
    x: &DVector<f64>,
    u: &DVector<f64>,
    y: &DVector<f64>,
    opts: &FunctionalOptions,
) -> Result<DVector<f64>> {
    check_convex(f, "field")?;
    check_convex(g, "marginal")?;
    if x.len() != f.base_dim() || u.len() != f.base_dim() || y.len() != f.fiber_dim() {
        return Err(Error::DimensionMismatch("J arguments".into()));
    }
    let v = base_argument(g, x, u, opts.tol)?;
    Ok(y - fiber_step(f, &v, y, opts.tol)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct FunctionalPoint {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub gamma: Vec<f64>,
    pub residual: f64,
    pub nonsmooth: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct FunctionalReport {
    pub points: Vec<FunctionalPoint>,
    pub max_residual: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Evaluates `‖J(x, u, γ(x))‖` over `grid` with `u` from
/// [`subdifferential_probe`] and `γ` from [`solve_argmin`].
pub fn verify_functional_equation(
    f: &ScalarField,
    g: &ScalarField,
    grid: &[DVector<f64>],
    tol: f64,
    argmin: &ArgminOptions,
    probe: &ProbeOptions,
    functional: &FunctionalOptions,
) -> Result<FunctionalReport> {
    let points = grid
        .par_iter()
        .map(|x| {
            let sv = subdifferential_probe(g, x, 0.0, probe)?;
            let gamma = solve_argmin(f, x, argmin)?.gamma_vector();
            let j = functional_J(f, g, x, &sv.u_vector(), &gamma, functional)?;
            Ok(FunctionalPoint {
                x: sv.x.clone(),
                u: sv.u.clone(),
                gamma: gamma.iter().copied().collect(),
                residual: j.norm(),
                nonsmooth: sv.nonsmooth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_residual = points.iter().map(|p| p.residual).fold(0.0, f64::max);
    Ok(FunctionalReport {
        passed: max_residual <= tol,
        max_residual,
        tol,
        points,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FixedPointOptions {
    /// Stop once `‖J(x, u, y)‖ ≤ tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Resolvent residual tolerance; `None` means `tol/10`.
    pub resolvent_tol: Option<f64>,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            tol: 1e-10,
            max_iter: 500,
            resolvent_tol: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ContractionSample {
    pub iteration: usize,
    pub ratio: f64,
    /// Bound on the ratio error caused by inexact resolvents.
    pub noise: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FixedPointResult {
    pub y: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub mu: f64,
    pub ratios: Vec<ContractionSample>,
}

impl FixedPointResult {
    pub fn y_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }

    pub fn worst_ratio(&self) -> Option<f64> {
        self.ratios.iter().map(|s| s.ratio).reduce(f64::max)
    }
}

/// Banach iteration `y ← π₂H(H₁(x+u) + u, y)`, a `μ(σ)`-contraction in `y`.
///
/// Successive step ratios are logged whenever their resolvent-noise bound is
/// below `1e-3`; a ratio exceeding `μ + tol` beyond that noise means the σ
/// certificate is wrong.
#[allow(non_snake_case)]
pub fn solve_J_fixed_point(
    f: &ScalarField,
    g: &ScalarField,
    x: &DVector<f64>,
    u: &DVector<f64>,
    y0: &DVector<f64>,
    opts: &FixedPointOptions,
) -> Result<FixedPointResult> {
    check_convex(f, "field")?;
    check_convex(g, "marginal")?;
    if x.len() != f.base_dim() || u.len() != f.base_dim() || y0.len() != f.fiber_dim() {
        return Err(Error::DimensionMismatch("fixed-point arguments".into()));
    }
    let sigma = f.certificates().sigma().ok_or_else(|| {
        Error::MissingCertificate(format!("fixed-point solve on `{}` needs σ > 0", f.name()))
    })?;
    let mu = contraction_mu(sigma)?;
    let rtol = opts.resolvent_tol.unwrap_or(0.1 * opts.tol);
    let v = base_argument(g, x, u, rtol)?;

    let mut y = y0.clone();
    let mut ratios = Vec::new();
    let mut prev_step: Option<f64> = None;
    for k in 0..=opts.max_iter {
        let next = fiber_step(f, &v, &y, rtol)?;
        let step = (&y - &next).norm();
        if step <= opts.tol {
            return Ok(FixedPointResult {
                y: y.iter().copied().collect(),
                iterations: k,
                residual: step,
                mu,
                ratios,
            });
        }
        if let Some(prev) = prev_step {
            let noise = 2.0 * rtol / prev;
            let ratio = step / prev;
            if noise < 1e-3 {
                ratios.push(ContractionSample {
                    iteration: k,
                    ratio,
                    noise,
                });
            }
            if ratio - noise > mu + opts.tol {
                return Err(Error::ContractionViolated { ratio, bound: mu });
            }
        }
        prev_step = Some(step);
        y = next;
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual: prev_step.unwrap_or(f64::NAN),
    })
}

/// `f̃ = f + (κ/2)‖x‖²` with the matching reindexing of support vectors:
/// `u` is a `κ`-support vector of `g` at `x` iff `u + κx` supports `g̃`.
#[derive(Clone, Debug)]
pub struct TildeShift {
    pub field: ScalarField,
    pub kappa: f64,
}

impl TildeShift {
    pub fn to_shifted(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        u + x * self.kappa
    }

    pub fn from_shifted(&self, x: &DVector<f64>, u_tilde: &DVector<f64>) -> DVector<f64> {
        u_tilde - x * self.kappa
    }
}

/// Convexifies a `κ`-semiconvex field in the base variable. The fiber argmin is
/// unchanged since the added term does not depend on `y`.
pub fn tilde_shift(f: &ScalarField) -> Result<TildeShift> {
    let kappa = f.certificates().semiconvexity.ok_or_else(|| {
        Error::MissingCertificate(format!("tilde shift of `{}` needs a semiconvexity certificate", f.name()))
    })?;
    if kappa == 0.0 {
        return Ok(TildeShift { field: f.clone(), kappa });
    }
    let base = f.base_domain();
    let r2 = base.max_norm().powi(2);
    let certs = f.certificates();
    let shifted = Certificates {
        semiconvexity: Some(0.0),
        fiber_convexity: certs.fiber_convexity,
        semiconcavity: certs.semiconcavity.map(|c| c + kappa),
        fiber_semiconcavity: certs.fiber_semiconcavity,
        sup_norm: certs.sup_norm.map(|m| m + 0.5 * kappa * r2),
        lipschitz: certs.lipschitz.map(|l| l + kappa * r2.sqrt()),
    };
    let field = f
        .add_quadratic(0.5 * kappa, 0.0, format!("tilde({})", f.name()))
        .with_certificates(shifted);
    Ok(TildeShift { field, kappa })
}

/// A tensor grid on the base box.
#[derive(Clone, Debug, Serialize)]
pub struct BaseGrid {
    pub points: Vec<Vec<f64>>,
    /// Spacing along each axis (the smallest one when axes differ).
    pub step: f64,
}

impl BaseGrid {
    /// `per_axis` equally spaced points per coordinate, including both ends.
    pub fn uniform(domain: &BoxDomain, per_axis: usize) -> Result<Self> {
        if per_axis < 2 {
            return Err(Error::InvalidParameter("a grid needs at least 2 points per axis".into()));
        }
        let n = domain.dim();
        let steps: Vec<f64> = domain.widths().iter().map(|w| w / (per_axis - 1) as f64).collect();
        let total = per_axis.checked_pow(n as u32).ok_or_else(|| Error::InvalidParameter("grid too large".into()))?;
        let points = (0..total)
            .map(|mut idx| {
                (0..n)
                    .map(|i| {
                        let k = idx % per_axis;
                        idx /= per_axis;
                        // the last node is the upper bound exactly, not lower + (k−1)·step
                        if k + 1 == per_axis {
                            domain.upper[i]
                        } else {
                            domain.lower[i] + k as f64 * steps[i]
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(BaseGrid {
            points,
            step: steps.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }

    pub fn vectors(&self) -> Vec<DVector<f64>> {
        self.points.iter().map(|p| DVector::from_column_slice(p)).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct CalmnessOptions {
    /// Secant radii; the two smallest decide differentiability.
    pub radii: Vec<f64>,
    /// Grid spacing entering the flag threshold.
    pub grid_step: f64,
    /// Flag when secants disagree by more than `flag_factor · grid_step`.
    pub flag_factor: f64,
    pub argmin: ArgminOptions,
}

impl CalmnessOptions {
    /// Radii a quarter and a half of the grid step plus one full step, so the
    /// finest secants never reach a neighboring grid point.
    pub fn for_grid(grid_step: f64) -> Self {
        CalmnessOptions {
            radii: vec![0.25 * grid_step, 0.5 * grid_step, grid_step],
            grid_step,
            flag_factor: 10.0,
            argmin: ArgminOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CalmnessPoint {
    pub x: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Largest sampled `‖γ(x) − γ(x₀)‖ / ‖x − x₀‖`.
    pub calmness: f64,
    pub secant_disagreement: f64,
    pub nondifferentiable: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CalmnessReport {
    pub points: Vec<CalmnessPoint>,
    pub flagged_fraction: f64,
    pub threshold: f64,
}

fn calmness_at(f: &ScalarField, x0: &DVector<f64>, opts: &CalmnessOptions, fine: &[f64; 2]) -> Result<CalmnessPoint> {
    let base = f.base_domain();
    let mut argmin = opts.argmin.clone();
    let center = solve_argmin(f, x0, &argmin)?;
    let g0 = center.gamma_vector();
    argmin.start = Some(g0.clone());
    let mut calmness = 0.0_f64;
    let mut disagreement = 0.0_f64;
    for i in 0..x0.len() {
        // one-sided secants per sign, indexed by fine-radius position
        let mut secants: [[Option<DVector<f64>>; 2]; 2] = Default::default();
        for &r in &opts.radii {
            for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut x = x0.clone();
                x[i] += sign * r;
                if !base.contains(&x) {
                    continue;
                }
                let gamma = solve_argmin(f, &x, &argmin)?.gamma_vector();
                let secant = (&gamma - &g0) * (sign / r);
                calmness = calmness.max(secant.norm());
                if let Some(k) = fine.iter().position(|fr| *fr == r) {
                    secants[s][k] = Some(secant);
                }
            }
        }
        let present: Vec<&DVector<f64>> = secants.iter().flatten().flatten().collect();
        for a in &present {
            for b in &present {
                disagreement = disagreement.max((*a - *b).norm());
            }
        }
    }
    let threshold = opts.flag_factor * opts.grid_step;
    Ok(CalmnessPoint {
        x: x0.iter().copied().collect(),
        gamma: center.gamma,
        calmness,
        secant_disagreement: disagreement,
        nondifferentiable: disagreement > threshold,
    })
}

/// Sampled calmness constants of `γ` at each grid point and a two-scale
/// secant test for differentiability.
pub fn calmness_scan(f: &ScalarField, grid: &[DVector<f64>], opts: &CalmnessOptions) -> Result<CalmnessReport> {
    let mut radii = opts.radii.clone();
    radii.sort_by(f64::total_cmp);
    if radii.len() < 2 || !(radii[0] > 0.0) {
        return Err(Error::InvalidParameter("calmness needs at least two positive radii".into()));
    }
    let fine = [radii[0], radii[1]];
    let points = grid
        .par_iter()
        .map(|x| calmness_at(f, x, opts, &fine))
        .collect::<Result<Vec<_>>>()?;
    let flagged = points.iter().filter(|p| p.nondifferentiable).count();
    Ok(CalmnessReport {
        flagged_fraction: if points.is_empty() { 0.0 } else { flagged as f64 / points.len() as f64 },
        threshold: opts.flag_factor * opts.grid_step,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::vector;

    fn certs(kappa: f64, sigma: f64) -> Certificates {
        Certificates {
            semiconvexity: Some(kappa),
            fiber_convexity: Some(sigma),
            ..Default::default()
        }
    }

    /// ½(x−y)² + (σ/2)y².
    fn coupled(sigma: f64) -> ScalarField {
        ScalarField::new("coupled", 1, 1, BoxDomain::cube(2, 10.0), move |z| {
            0.5 * (z[0] - z[1]).powi(2) + 0.5 * sigma * z[1] * z[1]
        })
        .unwrap()
        .with_gradient(move |z| vector(&[z[0] - z[1], (1.0 + sigma) * z[1] - z[0]]))
        .with_certificates(certs(0.0, sigma))
    }

    fn quarter_square() -> ScalarField {
        ScalarField::new("quarter", 1, 0, BoxDomain::cube(1, 10.0), |z| 0.25 * z[0] * z[0])
            .unwrap()
            .with_gradient(|z| vector(&[0.5 * z[0]]))
            .with_certificates(certs(0.0, 0.0))
    }

    fn kinked() -> ScalarField {
        ScalarField::new("kinked", 1, 1, BoxDomain::cube(2, 4.0), |z| (z[1] - z[0].abs()).powi(2) + 0.5 * z[1] * z[1])
            .unwrap()
            .with_certificates(Certificates {
                fiber_convexity: Some(3.0),
                ..Default::default()
            })
    }

    #[test]
    fn argmin_examples() {
        let opts = ArgminOptions::default();
        for x in [-2.0, 0.0, 1.0, 3.0] {
            let r = solve_argmin(&coupled(1.0), &vector(&[x]), &opts).unwrap();
            assert!((r.gamma[0] - x / 2.0).abs() < 1e-9);
            assert!((r.g_value - x * x / 4.0).abs() < 1e-12);
        }
        let half = ScalarField::new("half", 1, 1, BoxDomain::cube(2, 3.0), |z| 0.5 * z[1] * z[1])
            .unwrap()
            .with_certificates(certs(0.0, 1.0));
        let r = solve_argmin(&half, &vector(&[0.7]), &opts).unwrap();
        assert!(r.gamma[0].abs() < 1e-9 && r.g_value.abs() < 1e-18);

        let wave = ScalarField::new("wave", 1, 1, BoxDomain::cube(2, 3.0), |z| {
            0.5 * (z[1] - z[0].sin()).powi(2) + 0.5 * z[1] * z[1]
        })
        .unwrap()
        .with_certificates(certs(1.0, 2.0));
        for x in [-1.2, 0.3, 2.0] {
            let r = solve_argmin(&wave, &vector(&[x]), &opts).unwrap();
            assert!((r.gamma[0] - x.sin() / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn argmin_errors() {
        let opts = ArgminOptions::default();
        // minimizer y = 2.99 sits inside the 0.12 boundary margin of [−3, 3]
        let edge = ScalarField::new("edge", 1, 1, BoxDomain::cube(2, 3.0), |z| 0.5 * (z[1] - 2.99).powi(2))
            .unwrap()
            .with_certificates(certs(0.0, 1.0));
        let r = solve_argmin(&edge, &vector(&[0.0]), &opts);
        assert!(matches!(r, Err(Error::BoundaryMinimizer { .. })), "{r:?}");
        let mut no_sigma = coupled(1.0);
        no_sigma.certificates_mut().fiber_convexity = None;
        assert!(matches!(
            solve_argmin(&no_sigma, &vector(&[1.0]), &opts),
            Err(Error::MissingCertificate(_))
        ));
        let starved = ArgminOptions {
            max_iter: 1,
            tol: 1e-14,
            ..Default::default()
        };
        assert!(matches!(
            solve_argmin(&kinked(), &vector(&[1.0]), &starved),
            Err(Error::NonConvergence { .. })
        ));
    }

    #[test]
    fn marginal_matches_closed_form() {
        let g = marginal_field(&coupled(1.0), &ArgminOptions::default()).unwrap();
        let x = vector(&[1.6]);
        assert!((g.value(&x).unwrap() - 0.64).abs() < 1e-12);
        assert!((g.gradient(&x).unwrap()[0] - 0.8).abs() < 1e-9);
        assert_eq!(g.certificates().semiconvexity, Some(0.0));
    }

    #[test]
    fn functional_equation_examples() {
        let f = coupled(1.0);
        let g = quarter_square();
        let opts = FunctionalOptions::default();
        let x = vector(&[2.0]);
        let u = vector(&[1.0]);
        let j = functional_J(&f, &g, &x, &u, &vector(&[1.0]), &opts).unwrap();
        assert!(j[0].abs() < 1e-10);
        let j = functional_J(&f, &g, &x, &u, &vector(&[2.0]), &opts).unwrap();
        assert!((j[0] - 0.6).abs() < 1e-10);

        let ball = ScalarField::new("ball", 1, 1, BoxDomain::cube(2, 5.0), |z| 0.5 * z.norm_squared())
            .unwrap()
            .with_certificates(certs(0.0, 1.0));
        let ball_marginal = ScalarField::new("ball-marginal", 1, 0, BoxDomain::cube(1, 5.0), |z| 0.5 * z.norm_squared())
            .unwrap()
            .with_certificates(certs(0.0, 0.0));
        let zero = vector(&[0.0]);
        let j = functional_J(&ball, &ball_marginal, &zero, &zero, &zero, &opts).unwrap();
        assert_eq!(j[0], 0.0);

        let grid: Vec<_> = [-1.0, 0.0, 1.0].iter().map(|v| vector(&[*v])).collect();
        let report = verify_functional_equation(
            &f,
            &g,
            &grid,
            1e-6,
            &ArgminOptions::default(),
            &ProbeOptions::default(),
            &opts,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn fixed_point_examples() {
        let f = coupled(1.0);
        let g = quarter_square();
        let x = vector(&[2.0]);
        let u = vector(&[1.0]);
        let opts = FixedPointOptions::default();
        let r = solve_J_fixed_point(&f, &g, &x, &u, &vector(&[5.0]), &opts).unwrap();
        assert!((r.y[0] - 1.0).abs() <= 1e-9, "{r:?}");
        assert!(r.iterations <= 30);
        assert!((r.mu - 0.5f64.sqrt()).abs() < 1e-15);
        for s in &r.ratios {
            assert!((s.ratio - 0.4).abs() <= 1e-6 + s.noise, "{s:?}");
        }
        assert!(!r.ratios.is_empty());

        let r = solve_J_fixed_point(&f, &g, &x, &u, &vector(&[1.0]), &opts).unwrap();
        assert_eq!(r.iterations, 0);

        let ball = ScalarField::new("ball", 1, 1, BoxDomain::cube(2, 50.0), |z| 0.5 * z.norm_squared())
            .unwrap()
            .with_gradient(|z| z.clone())
            .with_certificates(certs(0.0, 1.0));
        let ball_marginal = ScalarField::new("ball-marginal", 1, 0, BoxDomain::cube(1, 50.0), |z| 0.5 * z.norm_squared())
            .unwrap()
            .with_gradient(|z| z.clone())
            .with_certificates(certs(0.0, 0.0));
        let zero = vector(&[0.0]);
        let r = solve_J_fixed_point(&ball, &ball_marginal, &zero, &zero, &vector(&[7.0]), &opts).unwrap();
        assert!(r.y[0].abs() < 1e-9);
        assert!(r.ratios.iter().all(|s| (s.ratio - 0.5).abs() <= 1e-6 + s.noise));
    }

    #[test]
    fn false_sigma_is_caught() {
        // the iteration slope is 1/(1.5 + 0.1) ≈ 0.625, above μ(50) ≈ 0.5
        let mut f = coupled(0.1);
        f.certificates_mut().fiber_convexity = Some(50.0);
        let r = solve_J_fixed_point(&f, &quarter_square(), &vector(&[2.0]), &vector(&[1.0]), &vector(&[5.0]), &FixedPointOptions::default());
        assert!(matches!(r, Err(Error::ContractionViolated { .. })), "{r:?}");
    }

    #[test]
    fn tilde_shift_examples() {
        let f = coupled(1.0);
        let same = tilde_shift(&f).unwrap();
        assert_eq!(same.kappa, 0.0);
        let z = vector(&[0.3, -0.2]);
        assert_eq!(same.field.value(&z).unwrap(), f.value(&z).unwrap());

        let semi = ScalarField::new("semi", 1, 1, BoxDomain::cube(2, 5.0), |z| {
            -z[0] * z[0] + (z[1] - z[0]).powi(2) + z[1] * z[1]
        })
        .unwrap()
        .with_certificates(certs(2.0, 2.0));
        let shifted = tilde_shift(&semi).unwrap();
        assert!(shifted.field.certificates().is_convex());
        let report = crate::field::validate_certificates(&shifted.field, 64, 3, 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
        for x in [-1.0, 0.5, 2.0] {
            let a = solve_argmin(&semi, &vector(&[x]), &ArgminOptions::default()).unwrap();
            let b = solve_argmin(&shifted.field, &vector(&[x]), &ArgminOptions::default()).unwrap();
            assert!((a.gamma[0] - b.gamma[0]).abs() < 1e-9);
        }
        let x = vector(&[1.0]);
        let u = vector(&[0.25]);
        assert_eq!(shifted.to_shifted(&x, &u)[0], 2.25);
        assert_eq!(shifted.from_shifted(&x, &shifted.to_shifted(&x, &u)), u);
    }

    #[test]
    fn probe_examples() {
        let opts = ProbeOptions::default();
        let sv = subdifferential_probe(&quarter_square(), &vector(&[2.0]), 0.0, &opts).unwrap();
        assert!((sv.u[0] - 1.0).abs() < 1e-6 && !sv.nonsmooth);

        let abs = ScalarField::new("abs", 1, 0, BoxDomain::cube(1, 3.0), |z| z[0].abs()).unwrap();
        let sv = subdifferential_probe(&abs, &vector(&[0.0]), 0.0, &opts).unwrap();
        assert_eq!(sv.u[0], 0.0);
        assert!(sv.nonsmooth);

        let zero = ScalarField::new("zero", 2, 0, BoxDomain::cube(2, 3.0), |_| 0.0).unwrap();
        let sv = subdifferential_probe(&zero, &vector(&[0.4, -1.0]), 0.0, &opts).unwrap();
        assert_eq!(sv.u, vec![0.0, 0.0]);

        // −x² is 2-semiconvex; u = −2x
        let cap = ScalarField::new("cap", 1, 0, BoxDomain::cube(1, 3.0), |z| -z[0] * z[0]).unwrap();
        let sv = subdifferential_probe(&cap, &vector(&[1.0]), 2.0, &opts).unwrap();
        assert!((sv.u[0] + 2.0).abs() < 1e-6);
        assert!(matches!(
            subdifferential_probe(&cap, &vector(&[1.0]), 0.0, &ProbeOptions { radius: 0.5, ..opts }),
            Err(Error::ValidationFailed(_))
        ));
    }

    #[test]
    fn calmness_examples() {
        let base = BoxDomain::cube(1, 1.0);
        let grid = BaseGrid::uniform(&base, 21).unwrap();
        let opts = CalmnessOptions::for_grid(grid.step);

        let f = coupled(1.0);
        let report = calmness_scan(&f, &grid.vectors(), &opts).unwrap();
        assert_eq!(report.flagged_fraction, 0.0);
        assert!(report.points.iter().all(|p| (p.calmness - 0.5).abs() < 1e-6));

        let report = calmness_scan(&kinked(), &grid.vectors(), &opts).unwrap();
        for p in &report.points {
            if p.x[0].abs() < 1e-12 {
                assert!(p.nondifferentiable);
            } else {
                assert!(!p.nondifferentiable, "{p:?}");
                assert!((p.calmness - 2.0 / 3.0).abs() < 0.1 * 2.0 / 3.0);
            }
        }

        let flat = ScalarField::new("flat", 1, 1, BoxDomain::cube(2, 3.0), |z| z[0].powi(3) + 0.5 * (z[1] - 0.5).powi(2))
            .unwrap()
            .with_certificates(certs(0.0, 1.0));
        let report = calmness_scan(&flat, &grid.vectors(), &opts).unwrap();
        assert!(report.points.iter().all(|p| p.calmness < 1e-8));
    }

    #[test]
    fn grid_layout() {
        let grid = BaseGrid::uniform(&BoxDomain::cube(2, 1.0), 3).unwrap();
        assert_eq!(grid.len(), 9);
        assert_eq!(grid.step, 1.0);
        assert_eq!(grid.points[1], vec![0.0, -1.0]);
    }
}
