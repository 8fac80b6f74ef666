//! Black-box scalar fields on a product space `ℝⁿ × ℝᵐ` with regularity certificates.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::concat;

pub type EvalFn = Arc<dyn Fn(&DVector<f64>) -> Result<f64> + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync>;
pub type ValueGradFn = Arc<dyn Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + Send + Sync>;

/// Relative step used by central-difference gradients: `h = 1e-5 · (1 + ‖z‖)`.
pub const GRADIENT_STEP: f64 = 1e-5;

/// Axis-aligned box `[lower, upper]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::InvalidParameter(
                "box bounds must be finite with lower < upper".into(),
            ));
        }
        Ok(BoxDomain { lower, upper })
    }

    /// The cube `[-r, r]^d`.
    pub fn cube(d: usize, r: f64) -> Self {
        BoxDomain {
            lower: vec![-r; d],
            upper: vec![r; d],
        }
    }

    pub fn product(a: &BoxDomain, b: &BoxDomain) -> BoxDomain {
        BoxDomain {
            lower: a.lower.iter().chain(&b.lower).copied().collect(),
            upper: a.upper.iter().chain(&b.upper).copied().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Coordinates `[start, start + len)` as a box of their own.
    pub fn slice(&self, start: usize, len: usize) -> BoxDomain {
        BoxDomain {
            lower: self.lower[start..start + len].to_vec(),
            upper: self.upper[start..start + len].to_vec(),
        }
    }

    pub fn contains(&self, z: &DVector<f64>) -> bool {
        self.contains_with_margin(z, 0.0)
    }

    /// True when every coordinate keeps at least `margin` away from the faces.
    pub fn contains_with_margin(&self, z: &DVector<f64>, margin: f64) -> bool {
        z.len() == self.dim()
            && z.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= l + margin && *v <= u - margin)
    }

    /// Distance from `z` to the nearest face (negative when outside).
    pub fn boundary_distance(&self, z: &DVector<f64>) -> f64 {
        z.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| (v - l).min(u - v))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)),
        )
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    /// Box shrunk by `margin` on every face, or `None` when nothing is left.
    pub fn shrink(&self, margin: f64) -> Option<BoxDomain> {
        let lower: Vec<f64> = self.lower.iter().map(|l| l + margin).collect();
        let upper: Vec<f64> = self.upper.iter().map(|u| u - margin).collect();
        if lower.iter().zip(&upper).all(|(l, u)| l < u) {
            Some(BoxDomain { lower, upper })
        } else {
            None
        }
    }

    pub fn project(&self, z: &mut DVector<f64>) {
        for (i, v) in z.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    /// Largest Euclidean norm attained on the box.
    pub fn max_norm(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l.abs().max(u.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower.iter().zip(&self.upper).map(|(l, u)| rng.gen_range(*l..*u)),
        )
    }
}

/// Regularity certificates attached to a field.
///
/// * `semiconvexity` κ: `f(x,y) + (κ/2)‖x‖² − (σ/2)‖y‖²` is jointly convex, with σ the
///   `fiber_convexity` certificate (or 0 when absent).
/// * `fiber_convexity` σ: `y ↦ f(x,y) − (σ/2)‖y‖²` is convex for every fixed x.
/// * `semiconcavity`: `f − (c/2)‖(x,y)‖²` is jointly concave.
/// * `fiber_semiconcavity` κ₂: `y ↦ f(x,y) − (κ₂/2)‖y‖²` is concave for every fixed x.
/// * `sup_norm` M: `|f| ≤ M` on the working box.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Certificates {
    pub semiconvexity: Option<f64>,
    pub fiber_convexity: Option<f64>,
    pub semiconcavity: Option<f64>,
    pub fiber_semiconcavity: Option<f64>,
    pub sup_norm: Option<f64>,
    pub lipschitz: Option<f64>,
}

impl Certificates {
    /// True when the field is certified jointly convex.
    pub fn is_convex(&self) -> bool {
        self.semiconvexity == Some(0.0)
    }

    pub fn sigma(&self) -> Option<f64> {
        self.fiber_convexity.filter(|s| *s > 0.0)
    }
}

/// An evaluable scalar function on `ℝⁿ × ℝᵐ` (`m` may be zero) together with
/// its working box and certificates.
#[derive(Clone)]
pub struct ScalarField {
    name: String,
    base_dim: usize,
    fiber_dim: usize,
    domain: BoxDomain,
    certificates: Certificates,
    eval: EvalFn,
    grad: Option<GradFn>,
    value_grad: Option<ValueGradFn>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("name", &self.name)
            .field("base_dim", &self.base_dim)
            .field("fiber_dim", &self.fiber_dim)
            .field("domain", &self.domain)
            .field("certificates", &self.certificates)
            .field("analytic_gradient", &self.has_analytic_gradient())
            .finish()
    }
}

impl ScalarField {
    pub fn new<F>(
        name: impl Into<String>,
        base_dim: usize,
        fiber_dim: usize,
        domain: BoxDomain,
        eval: F,
    ) -> Result<Self>
    where
        F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        Self::fallible(name, base_dim, fiber_dim, domain, move |z| Ok(eval(z)))
    }

    pub fn fallible<F>(
        name: impl Into<String>,
        base_dim: usize,
        fiber_dim: usize,
        domain: BoxDomain,
        eval: F,
    ) -> Result<Self>
    where
        F: Fn(&DVector<f64>) -> Result<f64> + Send + Sync + 'static,
    {
        if domain.dim() != base_dim + fiber_dim {
            return Err(Error::DimensionMismatch(format!(
                "domain has dimension {} but the field lives on {}+{}",
                domain.dim(),
                base_dim,
                fiber_dim
            )));
        }
        Ok(ScalarField {
            name: name.into(),
            base_dim,
            fiber_dim,
            domain,
            certificates: Certificates::default(),
            eval: Arc::new(eval),
            grad: None,
            value_grad: None,
        })
    }

    pub fn with_gradient<G>(mut self, grad: G) -> Self
    where
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.grad = Some(Arc::new(move |z| Ok(grad(z))));
        self
    }

    pub fn with_fallible_gradient<G>(mut self, grad: G) -> Self
    where
        G: Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'static,
    {
        self.grad = Some(Arc::new(grad));
        self
    }

    /// Installs a combined value-and-gradient routine, used when both come out
    /// of the same inner computation.
    pub fn with_value_and_gradient<G>(mut self, vg: G) -> Self
    where
        G: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + Send + Sync + 'static,
    {
        let vg: ValueGradFn = Arc::new(vg);
        let for_grad = vg.clone();
        self.grad = Some(Arc::new(move |z| for_grad(z).map(|(_, g)| g)));
        self.value_grad = Some(vg);
        self
    }

    pub fn with_certificates(mut self, certificates: Certificates) -> Self {
        self.certificates = certificates;
        self
    }

    pub fn with_domain(mut self, domain: BoxDomain) -> Result<Self> {
        if domain.dim() != self.dim() {
            return Err(Error::DimensionMismatch("replacement domain".into()));
        }
        self.domain = domain;
        Ok(self)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn fiber_dim(&self) -> usize {
        self.fiber_dim
    }

    pub fn dim(&self) -> usize {
        self.base_dim + self.fiber_dim
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn base_domain(&self) -> BoxDomain {
        self.domain.slice(0, self.base_dim)
    }

    pub fn fiber_domain(&self) -> BoxDomain {
        self.domain.slice(self.base_dim, self.fiber_dim)
    }

    pub fn certificates(&self) -> &Certificates {
        &self.certificates
    }

    pub fn certificates_mut(&mut self) -> &mut Certificates {
        &mut self.certificates
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.grad.is_some()
    }

    fn check_dim(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "field `{}` expects points of dimension {}, got {}",
                self.name,
                self.dim(),
                z.len()
            )));
        }
        Ok(())
    }

    pub fn value(&self, z: &DVector<f64>) -> Result<f64> {
        self.check_dim(z)?;
        (self.eval)(z)
    }

    /// Value at `(x, y)`.
    pub fn value_at(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        self.value(&concat(x, y))
    }

    /// Gradient: analytic when installed, central differences otherwise.
    pub fn gradient(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(z)?;
        match &self.grad {
            Some(g) => g(z),
            None => self.fd_partial_gradient(z, 0, self.dim()),
        }
    }

    /// Gradient restricted to coordinates `[start, start + len)`.
    pub fn partial_gradient(&self, z: &DVector<f64>, start: usize, len: usize) -> Result<DVector<f64>> {
        self.check_dim(z)?;
        match &self.grad {
            Some(g) => Ok(g(z)?.rows(start, len).into_owned()),
            None => self.fd_partial_gradient(z, start, len),
        }
    }

    pub fn value_and_gradient(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.check_dim(z)?;
        if let Some(vg) = &self.value_grad {
            return vg(z);
        }
        Ok((self.value(z)?, self.gradient(z)?))
    }

    /// Value together with the gradient in coordinates `[start, start + len)`;
    /// avoids differencing the other coordinates when no analytic gradient exists.
    pub fn value_and_partial_gradient(&self, z: &DVector<f64>, start: usize, len: usize) -> Result<(f64, DVector<f64>)> {
        self.check_dim(z)?;
        if self.grad.is_some() {
            let (v, g) = self.value_and_gradient(z)?;
            return Ok((v, g.rows(start, len).into_owned()));
        }
        Ok((self.value(z)?, self.fd_partial_gradient(z, start, len)?))
    }

    fn fd_partial_gradient(&self, z: &DVector<f64>, start: usize, len: usize) -> Result<DVector<f64>> {
        let h = GRADIENT_STEP * (1.0 + z.norm());
        let mut out = DVector::zeros(len);
        let mut probe = z.clone();
        for k in 0..len {
            let i = start + k;
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = (self.eval)(&probe)?;
            probe[i] = orig - h;
            let fm = (self.eval)(&probe)?;
            probe[i] = orig;
            out[k] = (fp - fm) / (2.0 * h);
        }
        Ok(out)
    }

    pub fn split(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (
            z.rows(0, self.base_dim).into_owned(),
            z.rows(self.base_dim, self.fiber_dim).into_owned(),
        )
    }

    /// `f(z) + base_coef·‖x‖² + fiber_coef·‖y‖²`, keeping an analytic gradient
    /// if the source has one. Certificates are copied unchanged; callers update them.
    pub fn add_quadratic(&self, base_coef: f64, fiber_coef: f64, name: impl Into<String>) -> ScalarField {
        let n = self.base_dim;
        let src = self.clone();
        let weight = move |z: &DVector<f64>| {
            z.iter()
                .enumerate()
                .map(|(i, v)| if i < n { base_coef * v * v } else { fiber_coef * v * v })
                .sum::<f64>()
        };
        let eval_src = src.clone();
        let mut out = ScalarField {
            name: name.into(),
            base_dim: self.base_dim,
            fiber_dim: self.fiber_dim,
            domain: self.domain.clone(),
            certificates: self.certificates.clone(),
            eval: Arc::new(move |z| Ok(eval_src.value(z)? + weight(z))),
            grad: None,
            value_grad: None,
        };
        if self.has_analytic_gradient() {
            let shift = move |z: &DVector<f64>| {
                DVector::from_iterator(
                    z.len(),
                    z.iter().enumerate().map(|(i, v)| {
                        2.0 * v * if i < n { base_coef } else { fiber_coef }
                    }),
                )
            };
            out = out.with_value_and_gradient(move |z| {
                let (v, g) = src.value_and_gradient(z)?;
                Ok((v + weight(z), g + shift(z)))
            });
        }
        out
    }
}

/// Outcome of sampled certificate validation.
#[derive(Clone, Debug, Default, Serialize)]
pub struct CertificateReport {
    pub checked: Vec<String>,
    /// Most negative second difference of the convexity-type certificates.
    pub worst_convexity: f64,
    /// Most positive second difference of the concavity-type certificates.
    pub worst_concavity: f64,
    /// Largest |f| seen, compared against the sup-norm certificate.
    pub max_abs_value: f64,
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Checks every present certificate with second differences along seeded random segments.
///
/// Tolerances are relative: a second difference `d` of a function with magnitude `s`
/// at the three stencil points passes when `d ≥ −tol·(1 + s)` (convexity) or
/// `d ≤ tol·(1 + s)` (concavity).
pub fn validate_certificates(field: &ScalarField, segments: usize, seed: u64, tol: f64) -> Result<CertificateReport> {
    let certs = field.certificates().clone();
    let n = field.base_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domain = field.domain().clone();
    let widths = domain.widths();
    let min_width = widths.iter().copied().fold(f64::INFINITY, f64::min);
    let mut report = CertificateReport {
        passed: true,
        ..Default::default()
    };

    let norm_sq = |z: &DVector<f64>, from: usize, to: usize| z.rows(from, to - from).norm_squared();
    let d = field.dim();

    let second_difference = |rng: &mut ChaCha8Rng,
                             fiber_only: bool,
                             h: &dyn Fn(&DVector<f64>) -> Result<f64>|
     -> Result<(f64, f64)> {
        let mid = domain.sample(rng);
        let mut dir: DVector<f64> = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        if fiber_only {
            dir.rows_mut(0, n).fill(0.0);
        }
        if dir.norm() == 0.0 {
            return Ok((0.0, 0.0));
        }
        dir /= dir.norm();
        // keep both endpoints inside the box
        let room = (0..d)
            .filter(|i| dir[*i] != 0.0)
            .map(|i| (domain.upper[i] - mid[i]).min(mid[i] - domain.lower[i]) / dir[i].abs())
            .fold(f64::INFINITY, f64::min);
        let len = (rng.gen_range(1e-3..0.25) * min_width).min(room);
        if !(len > 1e-6 * min_width) {
            return Ok((0.0, 1.0));
        }
        let a = &mid - &dir * len;
        let b = &mid + &dir * len;
        let (ha, hm, hb) = (h(&a)?, h(&mid)?, h(&b)?);
        let scale = 1.0 + ha.abs().max(hm.abs()).max(hb.abs());
        Ok((ha - 2.0 * hm + hb, scale))
    };

    if let Some(kappa) = certs.semiconvexity {
        report.checked.push("semiconvexity".into());
        let sigma = certs.fiber_convexity.unwrap_or(0.0);
        let h = |z: &DVector<f64>| -> Result<f64> {
            Ok(field.value(z)? + 0.5 * kappa * norm_sq(z, 0, n) - 0.5 * sigma * norm_sq(z, n, d))
        };
        for _ in 0..segments {
            let (dd, scale) = second_difference(&mut rng, false, &h)?;
            report.worst_convexity = report.worst_convexity.min(dd / scale);
            if dd < -tol * scale {
                report.passed = false;
                report.failures.push(format!("semiconvexity second difference {dd:e}"));
            }
        }
    } else if let Some(sigma) = certs.fiber_convexity {
        report.checked.push("fiber_convexity".into());
        let h = |z: &DVector<f64>| -> Result<f64> { Ok(field.value(z)? - 0.5 * sigma * norm_sq(z, n, d)) };
        for _ in 0..segments {
            let (dd, scale) = second_difference(&mut rng, true, &h)?;
            report.worst_convexity = report.worst_convexity.min(dd / scale);
            if dd < -tol * scale {
                report.passed = false;
                report.failures.push(format!("fiber convexity second difference {dd:e}"));
            }
        }
    }
    if let Some(c) = certs.semiconcavity {
        report.checked.push("semiconcavity".into());
        let h = |z: &DVector<f64>| -> Result<f64> { Ok(field.value(z)? - 0.5 * c * z.norm_squared()) };
        for _ in 0..segments {
            let (dd, scale) = second_difference(&mut rng, false, &h)?;
            report.worst_concavity = report.worst_concavity.max(dd / scale);
            if dd > tol * scale {
                report.passed = false;
                report.failures.push(format!("semiconcavity second difference {dd:e}"));
            }
        }
    }
    if let Some(k2) = certs.fiber_semiconcavity {
        report.checked.push("fiber_semiconcavity".into());
        let h = |z: &DVector<f64>| -> Result<f64> { Ok(field.value(z)? - 0.5 * k2 * norm_sq(z, n, d)) };
        for _ in 0..segments {
            let (dd, scale) = second_difference(&mut rng, true, &h)?;
            report.worst_concavity = report.worst_concavity.max(dd / scale);
            if dd > tol * scale {
                report.passed = false;
                report.failures.push(format!("fiber semiconcavity second difference {dd:e}"));
            }
        }
    }
    if let Some(m) = certs.sup_norm {
        report.checked.push("sup_norm".into());
        for _ in 0..segments {
            let z = domain.sample(&mut rng);
            let v = field.value(&z)?.abs();
            report.max_abs_value = report.max_abs_value.max(v);
            if v > m * (1.0 + tol) + tol {
                report.passed = false;
                report.failures.push(format!("|f| = {v} exceeds sup-norm bound {m}"));
            }
        }
    }
    report.failures.truncate(16);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::vector;

    fn coupled() -> ScalarField {
        // ½(x − y)² + ½y²
        ScalarField::new("coupled", 1, 1, BoxDomain::cube(2, 3.0), |z| {
            0.5 * (z[0] - z[1]).powi(2) + 0.5 * z[1] * z[1]
        })
        .unwrap()
    }

    #[test]
    fn fd_gradient_exact_on_quadratic() {
        let f = coupled();
        let g = f.gradient(&vector(&[2.0, 1.0])).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8);
        assert!((g[1] - 0.0).abs() < 1e-8);
    }

    #[test]
    fn domain_dimension_checked() {
        let err = ScalarField::new("bad", 1, 1, BoxDomain::cube(3, 1.0), |_| 0.0).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn correct_certificates_validate() {
        let f = coupled().with_certificates(Certificates {
            semiconvexity: Some(0.0),
            fiber_convexity: Some(1.0),
            fiber_semiconcavity: Some(2.0),
            sup_norm: Some(0.5 * 36.0 + 0.5 * 9.0),
            ..Default::default()
        });
        let report = validate_certificates(&f, 500, 3, 1e-8).unwrap();
        assert!(report.passed, "{:?}", report.failures);
    }

    #[test]
    fn overstated_sigma_is_caught() {
        // ∂²_y f = 2, but the joint condition only holds with σ ≤ 1.
        let f = coupled().with_certificates(Certificates {
            semiconvexity: Some(0.0),
            fiber_convexity: Some(1.9),
            ..Default::default()
        });
        let report = validate_certificates(&f, 2000, 3, 1e-8).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn add_quadratic_updates_gradient() {
        let f = coupled().with_gradient(|z| vector(&[z[0] - z[1], 2.0 * z[1] - z[0]]));
        let g = f.add_quadratic(0.0, 1.0, "reg");
        let z = vector(&[1.0, 2.0]);
        assert_eq!(g.value(&z).unwrap(), f.value(&z).unwrap() + 4.0);
        let grad = g.gradient(&z).unwrap();
        assert_eq!(grad[1], 3.0 + 4.0);
    }

    #[test]
    fn box_helpers() {
        let b = BoxDomain::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(b.center(), vector(&[0.0, 1.0]));
        assert!(b.shrink(0.9).is_some());
        assert!(b.shrink(1.0).is_none());
        assert!((b.max_norm() - 5.0_f64.sqrt()).abs() < 1e-15);
        assert!(BoxDomain::new(vec![1.0], vec![1.0]).is_err());
    }
}
