//! The minimum-principle sweep: for each `(j, ε)`, regularize, sup-convolve,
//! minimize over the fiber on a base grid and test the finite-difference
//! jets of the marginal against `F`.

use std::cell::RefCell;
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::argmin::{solve_argmin, ArgminOptions};
use crate::error::{Error, Result};
use crate::field::{BoxDomain, ScalarField};
use crate::jets::{estimate_jet_with, JetOptions};
use crate::subequations::Subequation;
use crate::supconv::{build_f_epsilon, localization_radius, SupConvOptions};

use super::contact::{build_contact_quadratic, check_contact, ContactCheckOptions};
use super::families::regularize_j;

pub const DEFAULT_MEMBERSHIP_SLACK: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    /// Regularization indices; `g_j` is compared along increasing `j`.
    pub js: Vec<u64>,
    /// Sup-convolution parameters; `g_ε` is compared along decreasing `ε`.
    pub epsilons: Vec<f64>,
    /// Jets are tested as `A + slack·I ∈ F`.
    pub membership_slack: f64,
    pub jet: JetOptions,
    pub argmin: ArgminOptions,
    pub supconv: SupConvOptions,
    pub check_contact: bool,
    pub contact: ContactCheckOptions,
    /// Base relaxation `ε` inside the contact quadratic.
    pub contact_epsilon: f64,
    /// Relative slack of the monotonicity comparisons.
    pub monotone_tol: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            js: vec![100],
            epsilons: vec![4e-3],
            membership_slack: DEFAULT_MEMBERSHIP_SLACK,
            jet: JetOptions::default(),
            argmin: ArgminOptions::default(),
            supconv: SupConvOptions::default(),
            check_contact: true,
            contact: ContactCheckOptions::default(),
            contact_epsilon: 1e-2,
            monotone_tol: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Member,
    Violation,
    /// A stage failed; see the record's `error`.
    Error,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Member => "member",
            Verdict::Violation => "violation",
            Verdict::Error => "error",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PointRecord {
    pub run: usize,
    pub index: usize,
    pub j: u64,
    pub epsilon: f64,
    pub x: Vec<f64>,
    pub gamma: Vec<f64>,
    pub g: Option<f64>,
    pub gradient: Vec<f64>,
    /// Upper triangle of the estimated Hessian, row-major.
    pub hessian: Vec<f64>,
    /// Secant estimate of `Dγ`, row-major `m x n`.
    pub slope: Vec<f64>,
    pub verdict: Verdict,
    /// Jet or slope estimates disagree across the two stencil scales.
    pub unstable: bool,
    pub jet_disagreement: f64,
    pub slope_disagreement: f64,
    /// Worst `f_ε − q` on the contact samples; absent when skipped.
    pub contact_excess: Option<f64>,
    pub contact_holds: Option<bool>,
    pub pullback_defect: Option<f64>,
    pub error: Option<String>,
}

impl PointRecord {
    pub fn is_stable(&self) -> bool {
        self.verdict != Verdict::Error && !self.unstable
    }

    pub fn is_violation(&self) -> bool {
        self.is_stable() && self.verdict == Verdict::Violation
    }

    /// Full symmetric Hessian rebuilt from the stored upper triangle.
    pub fn hessian_matrix(&self) -> DMatrix<f64> {
        let n = self.x.len();
        let mut h = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                h[(i, j)] = self.hessian[k];
                h[(j, i)] = self.hessian[k];
                k += 1;
            }
        }
        h
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub run: usize,
    pub j: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub points: usize,
    pub stable: usize,
    pub unstable: usize,
    pub errors: usize,
    /// Violations among stable points.
    pub violations: usize,
    /// Points that are not stable members: violations, unstable points and errors.
    pub exceptions: usize,
    pub violation_rate: f64,
    pub exception_rate: f64,
    pub contact_checked: usize,
    pub contact_failures: usize,
    pub worst_contact_excess: Option<f64>,
    pub max_pullback_defect: Option<f64>,
    /// Largest secant slope `‖Dγ‖` seen, a sampled calmness constant.
    pub max_slope_norm: f64,
    pub max_jet_disagreement: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MonotonicityCheck {
    pub comparisons: usize,
    /// Largest `g_next − g_prev`; nonpositive when the sequence decreases.
    pub worst_increase: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MinimumPrincipleReport {
    pub subequation: String,
    pub field: String,
    pub runs: Vec<RunSummary>,
    pub epsilon_monotonicity: MonotonicityCheck,
    pub j_monotonicity: MonotonicityCheck,
    pub points: Vec<PointRecord>,
}

impl MinimumPrincipleReport {
    pub fn violations(&self) -> usize {
        self.runs.iter().map(|r| r.violations).sum()
    }

    pub fn stable(&self) -> usize {
        self.runs.iter().map(|r| r.stable).sum()
    }

    pub fn violation_rate(&self) -> f64 {
        ratio(self.violations(), self.stable())
    }

    pub fn contact_failures(&self) -> usize {
        self.runs.iter().map(|r| r.contact_failures).sum()
    }

    pub fn max_pullback_defect(&self) -> Option<f64> {
        self.runs.iter().filter_map(|r| r.max_pullback_defect).reduce(f64::max)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Largest localization radius `δ = 2√(εM)` over the runs, using the
/// sup-norm certificate of each `f_j`.
pub fn max_localization_radius(f: &ScalarField, js: &[u64], epsilons: &[f64]) -> Result<f64> {
    let mut delta: f64 = 0.0;
    for &j in js {
        let fj = regularize_j(f, j)?;
        let m = fj.certificates().sup_norm.ok_or_else(|| {
            Error::MissingCertificate(format!("`{}` needs a sup-norm certificate", f.name()))
        })?;
        for &eps in epsilons {
            delta = delta.max(localization_radius(eps, m));
        }
    }
    Ok(delta)
}

/// The part of the base box where every stencil, contact ball and
/// sup-convolution window fits: `U` shrunk by `δ_max` plus the probe radii.
pub fn admissible_base(f: &ScalarField, opts: &PipelineOptions) -> Result<Option<BoxDomain>> {
    let delta = max_localization_radius(f, &opts.js, &opts.epsilons)?;
    let probe = opts.jet.step.max(if opts.check_contact { opts.contact.radius } else { 0.0 });
    Ok(f.base_domain().shrink(delta + probe))
}

/// Runs the sweep. Setup problems (dimensions, missing certificates, a grid
/// outside the admissible region) are errors; failures at individual points
/// are recorded and never abort the sweep.
pub fn verify_minimum_principle(
    f: &ScalarField,
    sub: &Subequation,
    grid: &[DVector<f64>],
    opts: &PipelineOptions,
) -> Result<MinimumPrincipleReport> {
    let n = f.base_dim();
    if sub.dim() != n {
        return Err(Error::DimensionMismatch(format!("F lives on ℝ^{}, the base is ℝ^{n}", sub.dim())));
    }
    if opts.js.is_empty() || opts.epsilons.is_empty() {
        return Err(Error::InvalidParameter("need at least one j and one ε".into()));
    }
    let admissible = admissible_base(f, opts)?
        .ok_or_else(|| Error::InvalidParameter("the base box is smaller than the localization radius".into()))?;
    if let Some(x) = grid.iter().find(|x| x.len() != n || !admissible.contains(x)) {
        return Err(Error::OutsideDomain {
            point: x.iter().copied().collect(),
            what: "admissible grid region (base box shrunk by δ and the probe radius)".into(),
        });
    }

    let mut js = opts.js.clone();
    js.sort_unstable();
    js.dedup();
    let mut epsilons = opts.epsilons.clone();
    epsilons.sort_by(|a, b| b.total_cmp(a));
    epsilons.dedup();

    let mut runs = Vec::new();
    let mut points = Vec::new();
    for &j in &js {
        let fj = regularize_j(f, j)?;
        let sigma_j = fj.certificates().fiber_convexity.unwrap_or(0.0);
        for &eps in &epsilons {
            let run = runs.len();
            let mut fe = build_f_epsilon(&fj, eps, &opts.supconv)?;
            // y ↦ f^ε(x, y) is a sup of σ_j-convex functions, so σ_j + ε is also a
            // valid fiber modulus and makes the inner solves far better conditioned
            fe.certificates_mut().fiber_convexity = Some(sigma_j + eps);
            let kappa2 = fe
                .certificates()
                .fiber_semiconcavity
                .ok_or_else(|| Error::MissingCertificate("f_ε has no fiber semiconcavity".into()))?;
            let delta = localization_radius(eps, fj.certificates().sup_norm.unwrap_or(0.0));
            let records: Vec<PointRecord> = grid
                .par_iter()
                .enumerate()
                .map(|(index, x)| point_record(&fe, sub, x, kappa2, opts, run, index, j, eps))
                .collect();
            runs.push(summarize(run, j, eps, delta, &records));
            points.extend(records);
        }
    }

    let epsilon_monotonicity = monotonicity(&runs, &points, grid.len(), opts.monotone_tol, |a, b| {
        a.j == b.j && b.epsilon < a.epsilon
    });
    let j_monotonicity = monotonicity(&runs, &points, grid.len(), opts.monotone_tol, |a, b| {
        a.epsilon == b.epsilon && b.j > a.j
    });
    Ok(MinimumPrincipleReport {
        subequation: sub.name().to_string(),
        field: f.name().to_string(),
        runs,
        epsilon_monotonicity,
        j_monotonicity,
        points,
    })
}

/// Compares `g` between consecutive runs (in run order) that `follows` relates.
fn monotonicity(
    runs: &[RunSummary],
    points: &[PointRecord],
    per_run: usize,
    tol: f64,
    follows: impl Fn(&RunSummary, &RunSummary) -> bool,
) -> MonotonicityCheck {
    let mut check = MonotonicityCheck {
        passed: true,
        ..Default::default()
    };
    for (a, ra) in runs.iter().enumerate() {
        // the nearest later run that follows `ra`
        let Some(rb) = runs[a + 1..].iter().find(|rb| follows(ra, rb)) else {
            continue;
        };
        for i in 0..per_run {
            let (pa, pb) = (&points[ra.run * per_run + i], &points[rb.run * per_run + i]);
            if let (Some(ga), Some(gb)) = (pa.g, pb.g) {
                let increase = gb - ga;
                check.comparisons += 1;
                check.worst_increase = Some(check.worst_increase.map_or(increase, |w: f64| w.max(increase)));
                if increase > tol * (1.0 + ga.abs()) {
                    check.passed = false;
                }
            }
        }
    }
    check
}

fn summarize(run: usize, j: u64, epsilon: f64, delta: f64, records: &[PointRecord]) -> RunSummary {
    let errors = records.iter().filter(|r| r.verdict == Verdict::Error).count();
    let unstable = records.iter().filter(|r| r.verdict != Verdict::Error && r.unstable).count();
    let stable = records.len() - errors - unstable;
    let violations = records.iter().filter(|r| r.is_violation()).count();
    let contact: Vec<&PointRecord> = records.iter().filter(|r| r.contact_holds.is_some()).collect();
    RunSummary {
        run,
        j,
        epsilon,
        delta,
        points: records.len(),
        stable,
        unstable,
        errors,
        violations,
        exceptions: violations + unstable + errors,
        violation_rate: ratio(violations, stable),
        exception_rate: ratio(violations + unstable + errors, records.len()),
        contact_checked: contact.len(),
        contact_failures: contact.iter().filter(|r| r.contact_holds == Some(false)).count(),
        worst_contact_excess: contact.iter().filter_map(|r| r.contact_excess).reduce(f64::max),
        max_pullback_defect: records.iter().filter_map(|r| r.pullback_defect).reduce(f64::max),
        max_slope_norm: records
            .iter()
            .map(|r| DVector::from_column_slice(&r.slope).norm())
            .fold(0.0, f64::max),
        max_jet_disagreement: records
            .iter()
            .filter(|r| r.verdict != Verdict::Error)
            .map(|r| r.jet_disagreement)
            .fold(0.0, f64::max),
    }
}

#[allow(clippy::too_many_arguments)]
fn point_record(
    fe: &ScalarField,
    sub: &Subequation,
    x: &DVector<f64>,
    kappa2: f64,
    opts: &PipelineOptions,
    run: usize,
    index: usize,
    j: u64,
    epsilon: f64,
) -> PointRecord {
    let mut record = PointRecord {
        run,
        index,
        j,
        epsilon,
        x: x.iter().copied().collect(),
        gamma: Vec::new(),
        g: None,
        gradient: Vec::new(),
        hessian: Vec::new(),
        slope: Vec::new(),
        verdict: Verdict::Error,
        unstable: false,
        jet_disagreement: 0.0,
        slope_disagreement: 0.0,
        contact_excess: None,
        contact_holds: None,
        pullback_defect: None,
        error: None,
    };
    if let Err(e) = fill_record(&mut record, fe, sub, x, kappa2, opts) {
        record.verdict = Verdict::Error;
        record.error = Some(e.to_string());
    }
    record
}

fn bits(x: &DVector<f64>) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

fn fill_record(
    record: &mut PointRecord,
    fe: &ScalarField,
    sub: &Subequation,
    x0: &DVector<f64>,
    kappa2: f64,
    opts: &PipelineOptions,
) -> Result<()> {
    let center = solve_argmin(fe, x0, &opts.argmin)?;
    let gamma0 = center.gamma_vector();
    record.gamma = center.gamma.clone();
    record.g = Some(center.g_value);

    // stencil solves start from γ(x₀) and leave their minimizers behind for the slope
    let warm = ArgminOptions {
        start: Some(gamma0.clone()),
        ..opts.argmin.clone()
    };
    let memo: RefCell<HashMap<Vec<u64>, DVector<f64>>> = RefCell::new(HashMap::new());
    let gamma_at = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let r = solve_argmin(fe, x, &warm)?;
        let gamma = r.gamma_vector();
        memo.borrow_mut().insert(bits(x), gamma.clone());
        Ok((r.g_value, gamma))
    };
    let est = estimate_jet_with(|x| Ok(gamma_at(x)?.0), x0, Some(&fe.base_domain()), &opts.jet)?;
    record.gradient = est.jet.gradient.iter().copied().collect();
    record.hessian = est.jet.hessian.upper_triangle();
    record.jet_disagreement = est.disagreement;

    // central secants of γ at the two stencil scales
    let (n, m) = (fe.base_dim(), fe.fiber_dim());
    let h = opts.jet.step;
    let slope_at = |step: f64| -> Result<DMatrix<f64>> {
        let mut s = DMatrix::zeros(m, n);
        for i in 0..n {
            let mut ends = [DVector::zeros(m), DVector::zeros(m)];
            for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut z = x0.clone();
                z[i] += sign * step;
                let cached = memo.borrow().get(&bits(&z)).cloned();
                ends[k] = match cached {
                    Some(g) => g,
                    None => gamma_at(&z)?.1,
                };
            }
            s.set_column(i, &((&ends[0] - &ends[1]) / (2.0 * step)));
        }
        Ok(s)
    };
    let slope = slope_at(h)?;
    let slope_half = slope_at(0.5 * h)?;
    record.slope_disagreement = (&slope - &slope_half).abs().max();
    record.slope = slope.transpose().iter().copied().collect();
    record.unstable = est.unstable || record.slope_disagreement > opts.jet.stability_factor * h;

    record.verdict = if sub.contains(&est.jet.relax(opts.membership_slack))? {
        Verdict::Member
    } else {
        Verdict::Violation
    };

    if opts.check_contact && !record.unstable {
        let q = build_contact_quadratic(x0, &gamma0, &est.jet, &slope, kappa2, opts.contact_epsilon)?;
        record.pullback_defect = Some(q.pullback_defect()?);
        let check = check_contact(fe, &q, &opts.contact)?;
        record.contact_excess = Some(check.worst_excess);
        record.contact_holds = Some(check.holds);
    }
    Ok(())
}
