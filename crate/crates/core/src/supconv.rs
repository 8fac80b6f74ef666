//! Partial sup-convolution in the base variable,
//! `f^ε(x,y) = sup_{z∈U} f(z,y) − ‖z−x‖²/(2ε)`, and the regularized
//! `f_ε = f^ε + (ε/2)‖y‖²`.
//!
//! For `x` at distance at least `δ = 2√(εM)` from `∂U` the maximizer satisfies
//! `‖z* − x‖ < δ`. Evaluation maximizes over the whole box `U`, which agrees with
//! the localized supremum wherever the latter is defined; the strict mode
//! additionally rejects base points outside `U(δ)`.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{BoxDomain, Certificates, ScalarField};
use crate::linalg::concat;
use crate::optim::{minimize, MinimizeOptions};

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SupConvOptions {
    /// Residual tolerance of the inner maximization.
    pub tol: f64,
    pub max_iter: usize,
    /// Reject base points outside `U(δ)` instead of maximizing over all of `U`.
    pub strict_localization: bool,
    /// Always use center plus `2n` axis starts. Otherwise extra starts are
    /// used only when no semiconcavity certificate makes the inner problem
    /// strongly concave.
    pub multi_start: bool,
    /// Spacing of the memo lattice; points with all coordinates on it are cached.
    pub lattice_step: Option<f64>,
}

impl Default for SupConvOptions {
    fn default() -> Self {
        SupConvOptions {
            tol: 1e-10,
            max_iter: 50_000,
            strict_localization: false,
            multi_start: false,
            lattice_step: None,
        }
    }
}

/// `δ = 2√(εM)`.
pub fn localization_radius(epsilon: f64, sup_norm: f64) -> f64 {
    2.0 * (epsilon * sup_norm).sqrt()
}

/// One evaluation of `f^ε` with its maximizer offset `τ* = z* − x`.
#[derive(Clone, Debug, Serialize)]
pub struct SupConvPoint {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub tau: Vec<f64>,
    pub iterations: usize,
}

type Memo = RwLock<HashMap<Vec<i64>, SupConvPoint>>;

struct Inner {
    source: ScalarField,
    epsilon: f64,
    delta: f64,
    opts: SupConvOptions,
    /// Strong concavity of the inner objective when certified.
    concavity: Option<f64>,
    memo: Memo,
}

impl Inner {
    fn lattice_key(&self, z: &DVector<f64>) -> Option<Vec<i64>> {
        let step = self.opts.lattice_step?;
        z.iter()
            .map(|v| {
                let k = (v / step).round();
                ((v / step - k).abs() < 1e-9 && k.abs() < 1e15).then_some(k as i64)
            })
            .collect()
    }

    fn evaluate(&self, z: &DVector<f64>) -> Result<SupConvPoint> {
        let key = self.lattice_key(z);
        if let Some(k) = &key {
            if let Some(hit) = self.memo.read().expect("memo lock").get(k) {
                return Ok(hit.clone());
            }
        }
        let out = self.solve(z)?;
        if let Some(k) = key {
            self.memo.write().expect("memo lock").insert(k, out.clone());
        }
        Ok(out)
    }

    fn solve(&self, z: &DVector<f64>) -> Result<SupConvPoint> {
        let n = self.source.base_dim();
        let m = self.source.fiber_dim();
        let x = z.rows(0, n).into_owned();
        let y = z.rows(n, m).into_owned();
        let base = self.source.base_domain();
        if !self.source.domain().contains(z) {
            return Err(Error::OutsideDomain {
                point: z.iter().copied().collect(),
                what: "sup-convolution domain".into(),
            });
        }
        if self.opts.strict_localization && !base.contains_with_margin(&x, self.delta) {
            return Err(Error::OutsideDomain {
                point: x.iter().copied().collect(),
                what: format!("U(δ) with δ = {}", self.delta),
            });
        }
        let eps = self.epsilon;
        // minimize −f(w, y) + ‖w − x‖²/(2ε) over w ∈ U
        let objective = |w: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
            let (v, g) = self.source.value_and_partial_gradient(&concat(w, &y), 0, n)?;
            let d = w - &x;
            Ok((-v + d.norm_squared() / (2.0 * eps), -g + d / eps))
        };
        let projection = |w: &mut DVector<f64>| base.project(w);
        let min_opts = MinimizeOptions {
            tol: self.opts.tol,
            max_iter: self.opts.max_iter,
            strong_convexity: self.concavity,
            initial_lipschitz: 1.0 / eps,
            check_kinks: false,
        };
        let mut starts = vec![x.clone()];
        if self.opts.multi_start || self.concavity.is_none() {
            let reach = 0.5 * self.delta;
            for i in 0..n {
                for sign in [1.0, -1.0] {
                    let mut s = x.clone();
                    s[i] += sign * reach;
                    base.project(&mut s);
                    starts.push(s);
                }
            }
        }
        let mut best: Option<crate::optim::SolveReport> = None;
        let mut iterations = 0;
        for s in &starts {
            let r = minimize(objective, s, Some(&projection), &min_opts)?;
            iterations += r.iterations;
            if !r.converged {
                return Err(Error::NonConvergence {
                    iterations: r.iterations,
                    residual: r.residual,
                });
            }
            if best.as_ref().map_or(true, |b| r.value < b.value) {
                best = Some(r);
            }
        }
        let best = best.expect("at least one start");
        let w = best.point_vector();
        let tau = &w - &x;
        // Danskin: ∇ₓ = τ*/ε, ∇_y = ∇_y f(z*, y)
        let gy = self.source.partial_gradient(&concat(&w, &y), n, m)?;
        let gradient = concat(&(&tau / eps), &gy);
        Ok(SupConvPoint {
            value: -best.value,
            gradient: gradient.iter().copied().collect(),
            tau: tau.iter().copied().collect(),
            iterations,
        })
    }
}

/// `f^ε` for a bounded source, with its localization radius.
#[derive(Clone)]
pub struct SupConvField {
    inner: Arc<Inner>,
    field: ScalarField,
}

impl std::fmt::Debug for SupConvField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SupConvField")
            .field("source", &self.inner.source.name())
            .field("epsilon", &self.inner.epsilon)
            .field("delta", &self.inner.delta)
            .finish()
    }
}

impl SupConvField {
    pub fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.inner.delta
    }

    pub fn source(&self) -> &ScalarField {
        &self.inner.source
    }

    /// `U(δ) = {x : B_δ(x) ⊂ U}`, `None` when empty.
    pub fn shrunken_base(&self) -> Option<BoxDomain> {
        self.inner.source.base_domain().shrink(self.inner.delta)
    }

    pub fn evaluate(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<SupConvPoint> {
        self.inner.evaluate(&concat(x, y))
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn memo_len(&self) -> usize {
        self.inner.memo.read().expect("memo lock").len()
    }
}

/// Builds `f^ε`. Needs the sup-norm certificate `M` (it fixes `δ`).
///
/// Certificates of the result: base semiconvexity `1/ε` with the source's
/// fiber convexity, joint semiconcavity `c/(1 − εc)` and fiber semiconcavity
/// `c` for a `c`-semiconcave source, and sup-norm `M`.
pub fn partial_sup_convolve(f: &ScalarField, epsilon: f64, opts: &SupConvOptions) -> Result<SupConvField> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidParameter(format!("ε must be positive, got {epsilon}")));
    }
    let certs = f.certificates();
    let sup_norm = certs.sup_norm.ok_or_else(|| {
        Error::MissingCertificate(format!("sup-convolution of `{}` needs a sup-norm bound", f.name()))
    })?;
    let delta = localization_radius(epsilon, sup_norm);
    let mut domain = f.domain().clone();
    if opts.strict_localization {
        let shrunk = f.base_domain().shrink(delta).ok_or_else(|| {
            Error::InvalidParameter(format!("U(δ) is empty for ε = {epsilon}, δ = {delta}"))
        })?;
        domain = BoxDomain::product(&shrunk, &f.fiber_domain());
    }
    let concavity = certs
        .semiconcavity
        .map(|c| 1.0 / epsilon - c)
        .filter(|s| *s > 0.0);
    let derived = Certificates {
        semiconvexity: certs.fiber_convexity.map(|_| 1.0 / epsilon),
        fiber_convexity: certs.fiber_convexity,
        semiconcavity: certs
            .semiconcavity
            .filter(|c| epsilon * c < 1.0)
            .map(|c| c / (1.0 - epsilon * c)),
        fiber_semiconcavity: certs.semiconcavity.filter(|c| epsilon * c < 1.0),
        sup_norm: Some(sup_norm),
        lipschitz: None,
    };
    let inner = Arc::new(Inner {
        source: f.clone(),
        epsilon,
        delta,
        opts: *opts,
        concavity,
        memo: RwLock::new(HashMap::new()),
    });
    let for_value = inner.clone();
    let for_grad = inner.clone();
    let field = ScalarField::fallible(
        format!("supconv({}, ε={epsilon})", f.name()),
        f.base_dim(),
        f.fiber_dim(),
        domain,
        move |z| Ok(for_value.evaluate(z)?.value),
    )?
    .with_value_and_gradient(move |z| {
        let p = for_grad.evaluate(z)?;
        Ok((p.value, DVector::from_vec(p.gradient)))
    })
    .with_certificates(derived);
    Ok(SupConvField { inner, field })
}

/// `f_ε = f^ε + (ε/2)‖y‖²` for a `κ`-semiconcave, fiber-convex, bounded `f`
/// and `ε < 1/κ`. Certificates: base semiconvexity `1/ε`, `σ = ε`,
/// `κ₂ = κ + ε`.
pub fn build_f_epsilon(f: &ScalarField, epsilon: f64, opts: &SupConvOptions) -> Result<ScalarField> {
    let certs = f.certificates();
    let kappa = certs.semiconcavity.ok_or_else(|| {
        Error::MissingCertificate(format!("`{}` needs a semiconcavity certificate", f.name()))
    })?;
    if certs.fiber_convexity.is_none() {
        return Err(Error::MissingCertificate(format!("`{}` must be certified fiber-convex", f.name())));
    }
    if !(epsilon > 0.0) || epsilon * kappa >= 1.0 {
        return Err(Error::InvalidParameter(format!("need 0 < ε < 1/κ, got ε = {epsilon}, κ = {kappa}")));
    }
    let sc = partial_sup_convolve(f, epsilon, opts)?;
    let base = sc.field();
    let y_max = f.fiber_domain().max_norm();
    let certs = Certificates {
        semiconvexity: Some(1.0 / epsilon),
        fiber_convexity: Some(epsilon),
        semiconcavity: base.certificates().semiconcavity.map(|c| c + epsilon),
        fiber_semiconcavity: Some(kappa + epsilon),
        sup_norm: certs.sup_norm.map(|m| m + 0.5 * epsilon * y_max * y_max),
        lipschitz: None,
    };
    Ok(base
        .add_quadratic(0.0, 0.5 * epsilon, format!("f_eps({}, ε={epsilon})", f.name()))
        .with_certificates(certs))
}

#[derive(Clone, Debug, Serialize)]
pub struct SupConvPropertyReport {
    pub epsilons: Vec<f64>,
    /// Largest violation of `f ≤ f^{ε′} ≤ f^{ε}` for `ε′ < ε`.
    pub worst_order_violation: f64,
    /// Most negative midpoint second difference of `f^ε + ‖x‖²/(2ε)`;
    /// `None` when the source is not fiber-convex.
    pub worst_convexity: Option<f64>,
    /// `max |f^ε − f|` per ε, in list order.
    pub approximation_errors: Vec<f64>,
    pub approximation_monotone: bool,
    /// Largest `‖τ*‖/δ` observed.
    pub worst_localization: f64,
    pub passed: bool,
}

/// Order, base semiconvexity, convergence as `ε → 0` and localization of the
/// maximizer, sampled on `points` (full `(x, y)` points). `epsilons` must be
/// strictly decreasing.
pub fn verify_supconv_properties(
    f: &ScalarField,
    epsilons: &[f64],
    points: &[DVector<f64>],
    segments: usize,
    seed: u64,
    tol: f64,
    opts: &SupConvOptions,
) -> Result<SupConvPropertyReport> {
    if epsilons.is_empty() || epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParameter("ε list must be nonempty and strictly decreasing".into()));
    }
    let n = f.base_dim();
    let fields = epsilons
        .iter()
        .map(|e| partial_sup_convolve(f, *e, opts))
        .collect::<Result<Vec<_>>>()?;

    let mut worst_order = 0.0_f64;
    let mut worst_localization = 0.0_f64;
    let mut errors = vec![0.0_f64; epsilons.len()];
    for z in points {
        let (x, y) = f.split(z);
        let base = f.value(z)?;
        let mut above = f64::INFINITY;
        for (k, sc) in fields.iter().enumerate() {
            let p = sc.evaluate(&x, &y)?;
            worst_order = worst_order.max(base - p.value).max(p.value - above);
            above = p.value;
            errors[k] = errors[k].max(p.value - base);
            let tau = DVector::from_vec(p.tau).norm();
            worst_localization = worst_localization.max(tau / sc.delta());
        }
    }
    let approximation_monotone = errors.windows(2).all(|w| w[1] <= w[0] + tol);

    let worst_convexity = if f.certificates().fiber_convexity.is_some() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = f64::INFINITY;
        for sc in &fields {
            let dom = sc.field().domain();
            let reach = 0.1 * dom.widths().into_iter().fold(f64::INFINITY, f64::min);
            let shifted = |z: &DVector<f64>| -> Result<f64> {
                let x = z.rows(0, n);
                Ok(sc.field().value(z)? + x.norm_squared() / (2.0 * sc.epsilon()))
            };
            for _ in 0..segments {
                let a = dom.sample(&mut rng);
                let dir = DVector::from_fn(a.len(), |_, _| rng.gen_range(-1.0..1.0));
                let mut b = &a + dir * reach;
                dom.project(&mut b);
                let mid = (&a + &b) * 0.5;
                let second = shifted(&a)? + shifted(&b)? - 2.0 * shifted(&mid)?;
                worst = worst.min(second);
            }
        }
        Some(worst)
    } else {
        None
    };

    let passed = worst_order <= tol
        && worst_localization < 1.0
        && approximation_monotone
        && worst_convexity.map_or(true, |w| w >= -tol);
    Ok(SupConvPropertyReport {
        epsilons: epsilons.to_vec(),
        worst_order_violation: worst_order,
        worst_convexity,
        approximation_errors: errors,
        approximation_monotone,
        worst_localization,
        passed,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct FiberSemiconcavityReport {
    /// Largest second difference of `field − (κ₂/2)‖y‖²` along fiber segments.
    pub worst_second_difference: f64,
    /// `(x, y)` and fiber direction of the worst sample.
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
    pub passed: bool,
}

/// Second differences of `y ↦ field(x, y) − (κ₂/2)‖y‖²` in random fiber
/// directions through each of `points`, with step `step` (shortened to stay
/// inside the fiber box).
pub fn verify_fiber_semiconcavity(
    field: &ScalarField,
    kappa2: f64,
    points: &[DVector<f64>],
    step: f64,
    seed: u64,
    tol: f64,
) -> Result<FiberSemiconcavityReport> {
    let m = field.fiber_dim();
    let fiber = field.fiber_domain();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    let mut witness = None;
    for z in points {
        let (x, y) = field.split(z);
        let mut dir = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        if dir.norm() == 0.0 {
            continue;
        }
        dir /= dir.norm();
        let room = fiber.boundary_distance(&y);
        let t = step.min(0.99 * room);
        if !(t > 0.0) {
            continue;
        }
        let g = |yy: &DVector<f64>| -> Result<f64> { Ok(field.value_at(&x, yy)? - 0.5 * kappa2 * yy.norm_squared()) };
        let second = (g(&(&y + &dir * t))? - 2.0 * g(&y)? + g(&(&y - &dir * t))?) / (t * t);
        if second > worst {
            worst = second;
            witness = Some((z.iter().copied().collect(), dir.iter().copied().collect()));
        }
    }
    Ok(FiberSemiconcavityReport {
        passed: worst <= tol,
        worst_second_difference: worst,
        witness,
    })
}
