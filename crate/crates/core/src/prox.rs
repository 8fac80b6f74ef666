//! Resolvents of `p ↦ p + ∇f(p)`.
//!
//! For convex `f`, `G(p) = p + ∇f(p)` is non-contractive and onto, so it has a
//! single-valued 1-Lipschitz inverse `H` (the proximal map of `f`). `H(ζ)` is
//! computed as the minimizer of the 1-strongly convex `φ(p) = f(p) + ½‖p‖² − p·ζ`.
//! When `f(x,y) − (σ/2)‖y‖²` is also convex, the fiber component of `H`
//! contracts with the factor returned by [`contraction_mu`].

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::optim::{minimize, MinimizeOptions};

pub use crate::optim::SolveReport as ResolventSolveReport;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ResolventOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ResolventOptions {
    fn default() -> Self {
        ResolventOptions {
            tol: 1e-9,
            max_iter: 100_000,
        }
    }
}

impl ResolventOptions {
    pub fn with_tol(tol: f64) -> Self {
        ResolventOptions {
            tol,
            ..Default::default()
        }
    }
}

fn resolvent(f: &ScalarField, zeta: &DVector<f64>, opts: &ResolventOptions) -> Result<ResolventSolveReport> {
    if zeta.len() != f.dim() {
        return Err(Error::DimensionMismatch(format!(
            "resolvent argument has length {}, field dimension is {}",
            zeta.len(),
            f.dim()
        )));
    }
    if !f.certificates().is_convex() {
        return Err(Error::MissingCertificate(format!(
            "resolvent of `{}` needs a convexity certificate (semiconvexity = 0)",
            f.name()
        )));
    }
    if zeta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("resolvent argument must be finite".into()));
    }
    let phi = |p: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let (v, g) = f.value_and_gradient(p)?;
        Ok((v + 0.5 * p.norm_squared() - p.dot(zeta), g + p - zeta))
    };
    let min_opts = MinimizeOptions {
        tol: opts.tol,
        max_iter: opts.max_iter,
        strong_convexity: Some(1.0),
        initial_lipschitz: 2.0,
        check_kinks: true,
    };
    let report = minimize(phi, zeta, None, &min_opts)?;
    if !report.converged {
        return Err(Error::NonConvergence {
            iterations: report.iterations,
            residual: report.residual,
        });
    }
    Ok(report)
}

/// `H(ζ)` for a convex field on `ℝ^{n+m}`: the unique `p` with `ζ ∈ p + ∇f(p)`.
pub fn resolvent_full(f: &ScalarField, zeta: &DVector<f64>, opts: &ResolventOptions) -> Result<ResolventSolveReport> {
    resolvent(f, zeta, opts)
}

/// `H₁(u)` for a convex field on the base space alone (`m = 0`).
pub fn resolvent_base(g: &ScalarField, u: &DVector<f64>, opts: &ResolventOptions) -> Result<ResolventSolveReport> {
    if g.fiber_dim() != 0 {
        return Err(Error::DimensionMismatch(format!(
            "base resolvent expects a field on ℝⁿ, `{}` has fiber dimension {}",
            g.name(),
            g.fiber_dim()
        )));
    }
    resolvent(g, u, opts)
}

/// Fiber contraction factor `μ(σ) = 1 / min{√(1+σ²), 1 + σ/√(1+σ²)}`.
pub fn contraction_mu(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("contraction factor needs σ > 0, got {sigma}")));
    }
    let root = (1.0 + sigma * sigma).sqrt();
    Ok(1.0 / root.min(1.0 + sigma / root))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct NonexpansiveConfig {
    pub pairs: usize,
    pub seed: u64,
    /// Slack on the ratio bounds.
    pub tol: f64,
    /// ζ is drawn uniformly from `[−radius, radius]^{n+m}`.
    pub radius: f64,
    /// Also test the fiber bound `μ(σ)`; needs a σ certificate.
    pub test_fiber: bool,
    pub resolvent: ResolventOptions,
}

impl Default for NonexpansiveConfig {
    fn default() -> Self {
        NonexpansiveConfig {
            pairs: 1000,
            seed: 0,
            tol: 1e-7,
            radius: 5.0,
            test_fiber: true,
            resolvent: ResolventOptions::with_tol(1e-9),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NonexpansiveReport {
    pub pairs: usize,
    pub worst_full_ratio: f64,
    pub worst_fiber_ratio: Option<f64>,
    pub mu: Option<f64>,
    pub passed: bool,
}

/// Samples pairs `ζ₁, ζ₂`, solves `H` at both and records the worst
/// `‖H(ζ₁)−H(ζ₂)‖/‖ζ₁−ζ₂‖` (bound 1) and fiber ratio (bound `μ(σ)`).
///
/// Pairs closer than `radius/100` are redrawn so resolvent tolerance cannot
/// dominate the ratio.
pub fn verify_nonexpansive(f: &ScalarField, cfg: &NonexpansiveConfig) -> Result<NonexpansiveReport> {
    let d = f.dim();
    let n = f.base_dim();
    let m = f.fiber_dim();
    let mu = if cfg.test_fiber && m > 0 {
        let sigma = f.certificates().sigma().ok_or_else(|| {
            Error::MissingCertificate(format!("fiber contraction test on `{}` needs σ > 0", f.name()))
        })?;
        Some(contraction_mu(sigma)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = cfg.radius;
    let mut worst_full = 0.0_f64;
    let mut worst_fiber: Option<f64> = mu.map(|_| 0.0);
    for _ in 0..cfg.pairs {
        let (z1, z2) = loop {
            let z1 = DVector::from_fn(d, |_, _| rng.gen_range(-r..r));
            let z2 = DVector::from_fn(d, |_, _| rng.gen_range(-r..r));
            if (&z1 - &z2).norm() >= 0.01 * r {
                break (z1, z2);
            }
        };
        let h1 = resolvent_full(f, &z1, &cfg.resolvent)?.point_vector();
        let h2 = resolvent_full(f, &z2, &cfg.resolvent)?.point_vector();
        let dz = (&z1 - &z2).norm();
        worst_full = worst_full.max((&h1 - &h2).norm() / dz);
        if let Some(w) = worst_fiber.as_mut() {
            let fiber = (h1.rows(n, m) - h2.rows(n, m)).norm() / dz;
            *w = w.max(fiber);
        }
    }
    let passed = worst_full <= 1.0 + cfg.tol
        && match (worst_fiber, mu) {
            (Some(w), Some(mu)) => w <= mu + cfg.tol,
            _ => true,
        };
    Ok(NonexpansiveReport {
        pairs: cfg.pairs,
        worst_full_ratio: worst_full,
        worst_fiber_ratio: worst_fiber,
        mu,
        passed,
    })
}

/// Smallest value of `(∇f(p₂) − ∇f(p₁))·(p₂−p₁) − σ‖y₂−y₁‖²` over sampled pairs
/// in the field's box; nonnegative (up to tolerance) for a correct σ certificate.
pub fn monotonicity_gap(f: &ScalarField, sigma: f64, pairs: usize, seed: u64) -> Result<f64> {
    let n = f.base_dim();
    let m = f.fiber_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..pairs {
        let p1 = f.domain().sample(&mut rng);
        let p2 = f.domain().sample(&mut rng);
        let g1 = f.gradient(&p1)?;
        let g2 = f.gradient(&p2)?;
        let dy = (p2.rows(n, m) - p1.rows(n, m)).norm_squared();
        worst = worst.min((g2 - g1).dot(&(&p2 - &p1)) - sigma * dy);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{BoxDomain, Certificates};
    use crate::linalg::vector;

    fn convex(name: &str, base: usize, fiber: usize, sigma: Option<f64>, f: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static) -> ScalarField {
        ScalarField::new(name, base, fiber, BoxDomain::cube(base + fiber, 10.0), f)
            .unwrap()
            .with_certificates(Certificates {
                semiconvexity: Some(0.0),
                fiber_convexity: sigma,
                ..Default::default()
            })
    }

    /// ½(x − y)² + ½y², whose resolvent solves (2a − b, 3b − a) = ζ.
    fn coupled() -> ScalarField {
        convex("coupled", 1, 1, Some(1.0), |z| 0.5 * (z[0] - z[1]).powi(2) + 0.5 * z[1] * z[1])
            .with_gradient(|z| vector(&[z[0] - z[1], 2.0 * z[1] - z[0]]))
    }

    #[test]
    fn resolvent_examples() {
        let opts = ResolventOptions::with_tol(1e-11);
        let zeta = vector(&[1.5, -2.0, 0.25]);
        let zero = convex("zero", 3, 0, None, |_| 0.0);
        let r = resolvent_full(&zero, &zeta, &opts).unwrap();
        assert_eq!(r.point_vector(), zeta);
        assert_eq!(r.iterations, 0);

        let half = convex("half-norm", 3, 0, None, |z| 0.5 * z.norm_squared());
        let r = resolvent_full(&half, &zeta, &opts).unwrap();
        assert!((r.point_vector() - &zeta / 2.0).norm() < 1e-10);

        let b = vector(&[0.5, 1.0, -1.0]);
        let bb = b.clone();
        let lin = convex("linear", 3, 0, None, move |z| bb.dot(z));
        let r = resolvent_full(&lin, &zeta, &opts).unwrap();
        assert!((r.point_vector() - (&zeta - &b)).norm() < 1e-10);
    }

    #[test]
    fn coupled_resolvent_matches_linear_solve() {
        let r = resolvent_full(&coupled(), &vector(&[3.0, 1.0]), &ResolventOptions::with_tol(1e-12)).unwrap();
        // x = (3a + b)/5, y = (a + 2b)/5
        assert!((r.point[0] - 2.0).abs() < 1e-11);
        assert!((r.point[1] - 1.0).abs() < 1e-11);
        assert!(r.residual <= 1e-12);
    }

    #[test]
    fn soft_threshold_of_abs() {
        let g = convex("abs", 1, 0, None, |z| z[0].abs());
        let opts = ResolventOptions::default();
        for u in [-1.0, -0.5, 0.0, 0.3, 1.0, 2.0, -3.5] {
            let r = resolvent_base(&g, &vector(&[u]), &opts);
            let r = r.unwrap();
            let expected = u.signum() * (u.abs() - 1.0).max(0.0);
            assert!((r.point[0] - expected).abs() < 1e-8, "u={u}: {r:?}");
        }
    }

    #[test]
    fn base_resolvent_of_quarter_square() {
        let g = convex("quarter", 1, 0, None, |z| 0.25 * z[0] * z[0]);
        let r = resolvent_base(&g, &vector(&[1.2]), &ResolventOptions::with_tol(1e-11)).unwrap();
        assert!((r.point[0] - 0.8).abs() < 1e-10);
        let zero = convex("zero", 2, 0, None, |_| 0.0);
        let r = resolvent_base(&zero, &vector(&[0.1, 0.2]), &ResolventOptions::default()).unwrap();
        assert_eq!(r.point, vec![0.1, 0.2]);
    }

    #[test]
    fn resolvent_errors() {
        let unc = ScalarField::new("uncertified", 1, 0, BoxDomain::cube(1, 1.0), |z| z[0] * z[0]).unwrap();
        assert!(matches!(
            resolvent_full(&unc, &vector(&[1.0]), &ResolventOptions::default()),
            Err(Error::MissingCertificate(_))
        ));
        assert!(matches!(
            resolvent_base(&coupled(), &vector(&[1.0, 1.0]), &ResolventOptions::default()),
            Err(Error::DimensionMismatch(_))
        ));
        let tight = ResolventOptions { tol: 1e-9, max_iter: 1 };
        let quartic = convex("quartic", 1, 0, None, |z| z[0].powi(4));
        assert!(matches!(
            resolvent_full(&quartic, &vector(&[100.0]), &tight),
            Err(Error::NonConvergence { .. })
        ));
    }

    #[test]
    fn mu_formula() {
        assert!((contraction_mu(1.0).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let s3 = 1.0 / (1.0 + 3.0 / 10f64.sqrt());
        assert!((contraction_mu(3.0).unwrap() - s3).abs() < 1e-15);
        assert!((s3 - 0.51317).abs() < 1e-5);
        assert!(contraction_mu(1e-9).unwrap() > 1.0 - 1e-8);
        assert!(contraction_mu(0.0).is_err());
        assert!(contraction_mu(-1.0).is_err());
    }

    #[test]
    fn mu_sweep_is_monotone_and_below_one() {
        let sigmas: Vec<f64> = (-30..=30).map(|k| 10f64.powf(k as f64 / 10.0)).collect();
        let mus: Vec<f64> = sigmas.iter().map(|s| contraction_mu(*s).unwrap()).collect();
        assert!(mus.iter().all(|m| *m < 1.0));
        assert!(mus.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn nonexpansive_examples() {
        let cfg = NonexpansiveConfig {
            pairs: 200,
            ..Default::default()
        };
        let report = verify_nonexpansive(&coupled(), &cfg).unwrap();
        assert!(report.passed);
        assert!(report.worst_fiber_ratio.unwrap() <= 0.5f64.sqrt());
        // exact fiber operator norm is ‖(1, 2)‖/5
        assert!(report.worst_fiber_ratio.unwrap() <= 5f64.sqrt() / 5.0 + 1e-9);

        let zero = convex("zero", 1, 1, None, |_| 0.0);
        let report = verify_nonexpansive(&zero, &NonexpansiveConfig { test_fiber: false, ..cfg }).unwrap();
        assert_eq!(report.worst_full_ratio, 1.0);
        assert!(report.mu.is_none());

        let half = convex("half", 2, 0, None, |z| 0.5 * z.norm_squared());
        let report = verify_nonexpansive(&half, &cfg).unwrap();
        assert!((report.worst_full_ratio - 0.5).abs() < 1e-9);
    }

    #[test]
    fn gradient_monotonicity_inequality() {
        let gap = monotonicity_gap(&coupled(), 1.0, 500, 9).unwrap();
        assert!(gap >= -1e-6, "{gap}");
        let gap = monotonicity_gap(&coupled(), 3.0, 500, 9).unwrap();
        assert!(gap < 0.0);
    }
}
