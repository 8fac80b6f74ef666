//! Constant-coefficient subequations on the Hessian part of 2-jets, the product
//! construction `F#P`, and structural self-tests.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::jets::{pullback_slice, BlockSplit, Jet2};
use crate::linalg::SymMatrix;

/// Absolute slack applied to every membership threshold.
pub const MEMBERSHIP_SLACK: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SubequationFlags {
    pub constant_coefficient: bool,
    pub hessian_only: bool,
    /// Closed under lowering the value slot. Hessian-only sets have it vacuously.
    pub has_negativity: bool,
    /// Whether the fiber `F_x` is a convex set.
    pub convex: bool,
}

impl SubequationFlags {
    const HESSIAN_ONLY_CONVEX: SubequationFlags = SubequationFlags {
        constant_coefficient: true,
        hessian_only: true,
        has_negativity: true,
        convex: true,
    };
}

#[derive(Clone)]
enum Condition {
    /// `A ⪰ 0`.
    SemiPositive,
    /// `tr A ≥ θ`.
    Trace { theta: f64 },
    /// `λ_k(A) ≥ θ` with eigenvalues sorted ascending, `k` one-based.
    Eigen { k: usize, theta: f64 },
    /// `λ_min(A) ≥ −c`.
    ShiftedMin { c: f64 },
    Custom(Arc<dyn Fn(&Jet2) -> bool + Send + Sync>),
}

/// A subequation `F ⊂ J²(ℝⁿ)` given by a membership predicate and structural flags.
#[derive(Clone)]
pub struct Subequation {
    name: String,
    dim: usize,
    condition: Condition,
    flags: SubequationFlags,
}

impl fmt::Debug for Subequation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Subequation")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("flags", &self.flags)
            .finish()
    }
}

impl Subequation {
    /// Looks up a catalog entry.
    ///
    /// * `P`: semipositive Hessian.
    /// * `trace`, params `[θ]`: `tr A ≥ θ`.
    /// * `eig-k` (e.g. `eig-2`), params `[θ]`, or `eig` with params `[k, θ]`:
    ///   `λ_k(A) ≥ θ`. Non-convex for `k ≥ 2`.
    /// * `shifted-min`, params `[c]` with `c ≥ 0`: `λ_min(A) ≥ −c`.
    ///
    /// Missing θ and c default to 0.
    pub fn catalog(name: &str, n: usize, params: &[f64]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("subequation dimension must be positive".into()));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("subequation parameters must be finite".into()));
        }
        let param = |i: usize| params.get(i).copied().unwrap_or(0.0);
        let lower = name.trim().to_ascii_lowercase();
        let (condition, convex, max_params) = match lower.as_str() {
            "p" => (Condition::SemiPositive, true, 0),
            "trace" => (Condition::Trace { theta: param(0) }, true, 1),
            "shifted-min" => {
                let c = param(0);
                if c < 0.0 {
                    return Err(Error::InvalidParameter(format!("shifted-min needs c ≥ 0, got {c}")));
                }
                (Condition::ShiftedMin { c }, true, 1)
            }
            "eig" => {
                let k = param(0);
                if params.is_empty() || k.fract() != 0.0 {
                    return Err(Error::InvalidParameter("eig needs an integer k as first parameter".into()));
                }
                let k = k as usize;
                (Condition::Eigen { k, theta: param(1) }, k <= 1, 2)
            }
            other => match other.strip_prefix("eig-").map(str::parse::<usize>) {
                Some(Ok(k)) => (Condition::Eigen { k, theta: param(0) }, k <= 1, 1),
                _ => return Err(Error::UnknownSubequation(name.to_string())),
            },
        };
        if params.len() > max_params {
            return Err(Error::InvalidParameter(format!(
                "`{name}` takes at most {max_params} parameter(s), got {}",
                params.len()
            )));
        }
        if let Condition::Eigen { k, .. } = condition {
            if k == 0 || k > n {
                return Err(Error::InvalidParameter(format!("eigenvalue index k={k} outside 1..={n}")));
            }
        }
        Ok(Subequation {
            name: name.to_string(),
            dim: n,
            condition,
            flags: SubequationFlags {
                convex,
                ..SubequationFlags::HESSIAN_ONLY_CONVEX
            },
        })
    }

    /// A subequation given by an arbitrary predicate. No product reducer is attached.
    pub fn custom<F>(name: impl Into<String>, dim: usize, flags: SubequationFlags, predicate: F) -> Self
    where
        F: Fn(&Jet2) -> bool + Send + Sync + 'static,
    {
        Subequation {
            name: name.into(),
            dim,
            condition: Condition::Custom(Arc::new(predicate)),
            flags,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn flags(&self) -> SubequationFlags {
        self.flags
    }

    pub fn contains(&self, jet: &Jet2) -> Result<bool> {
        if jet.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "subequation `{}` lives in dimension {}, jet has {}",
                self.name,
                self.dim,
                jet.dim()
            )));
        }
        Ok(match &self.condition {
            Condition::Custom(pred) => pred(jet),
            _ => self.hessian_condition(&jet.hessian),
        })
    }

    /// Membership of `(0, 0, A)`.
    pub fn contains_hessian(&self, a: &SymMatrix) -> Result<bool> {
        self.contains(&Jet2::from_hessian(a.clone()))
    }

    fn hessian_condition(&self, a: &SymMatrix) -> bool {
        match self.condition {
            Condition::SemiPositive => a.min_eigenvalue() >= -MEMBERSHIP_SLACK,
            Condition::Trace { theta } => a.trace() >= theta - MEMBERSHIP_SLACK,
            Condition::Eigen { k, theta } => a.eigenvalues()[k - 1] >= theta - MEMBERSHIP_SLACK,
            Condition::ShiftedMin { c } => a.min_eigenvalue() >= -c - MEMBERSHIP_SLACK,
            Condition::Custom(_) => unreachable!("custom predicates see the whole jet"),
        }
    }

    pub fn has_reducer(&self) -> bool {
        !matches!(self.condition, Condition::Custom(_))
    }

    /// Closed-form `F#P` membership of a jet on `ℝ^{n+m}`.
    ///
    /// Every slice Hessian dominates the generalized Schur complement
    /// `S = B − C D⁺ Cᵗ` (with equality at `Γ = −D⁺Cᵗ`) as soon as `D ⪰ 0` and the
    /// columns of `Cᵗ` lie in the range of `D`; catalog entries are upward closed,
    /// so membership reduces to `S ∈ F`. When the range condition fails, some slice
    /// Hessian has an eigenvalue (and the trace) unbounded below; that settles
    /// every entry except `eig-k` with `k ≥ 2`, for which `None` is returned.
    pub fn reduce_product(&self, jet: &Jet2, split: &BlockSplit) -> Result<Option<bool>> {
        if !self.has_reducer() {
            return Ok(None);
        }
        if split.base != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "F lives in dimension {}, split base is {}",
                self.dim, split.base
            )));
        }
        let blocks = split.blocks(jet)?;
        if !blocks.d.is_semipositive(MEMBERSHIP_SLACK) {
            return Ok(Some(false));
        }
        let c = &blocks.c;
        let d = blocks.d.as_matrix();
        let scale = 1.0 + blocks.d.max_abs();
        let d_pinv = blocks.d.pseudo_inverse(1e-12 * scale);
        let residual = (c.transpose() - d * d_pinv.as_matrix() * c.transpose()).abs().max();
        if split.fiber > 0 && residual > 1e-10 * (1.0 + c.abs().max()) {
            return Ok(match self.condition {
                Condition::Eigen { k, .. } if k >= 2 => None,
                _ => Some(false),
            });
        }
        let schur = blocks.b.as_matrix() - c * d_pinv.as_matrix() * c.transpose();
        Ok(Some(self.hessian_condition(&SymMatrix::from_upper(&schur)?)))
    }
}

#[derive(Clone, Debug)]
pub struct PositivityWitness {
    pub jet: Jet2,
    pub added: SymMatrix,
}

#[derive(Clone, Debug)]
pub struct PositivityReport {
    pub passed: bool,
    pub trials: usize,
    pub witness: Option<PositivityWitness>,
}

fn random_symmetric(rng: &mut impl Rng, n: usize, scale: f64) -> SymMatrix {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-scale..scale));
    SymMatrix::symmetrize(&m).expect("square")
}

fn random_gram(rng: &mut impl Rng, n: usize) -> SymMatrix {
    let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    SymMatrix::from_upper(&(g.transpose() * g)).expect("square")
}

/// Draws a random member jet of `F`, shifting the Hessian up by multiples of the
/// identity when the raw draw is not a member.
fn random_member(f: &Subequation, rng: &mut impl Rng) -> Result<Option<Jet2>> {
    let n = f.dim();
    for _ in 0..64 {
        let r = rng.gen_range(-1.0..1.0);
        let p = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let a = random_symmetric(rng, n, 1.0);
        let mut shift = 0.0;
        while shift <= 1024.0 {
            let jet = Jet2::new(r, p.clone(), a.add_identity(shift))?;
            if f.contains(&jet)? {
                return Ok(Some(jet));
            }
            shift = if shift == 0.0 { 1.0 } else { 2.0 * shift };
        }
    }
    Ok(None)
}

/// Samples member jets and random Gram matrices `P = GᵗG` (scaled by 10⁻², 1, 10²)
/// and fails on the first `(r, p, A + P)` that leaves `F`.
pub fn check_positivity(f: &Subequation, trials: usize, seed: u64) -> Result<PositivityReport> {
    if trials == 0 {
        return Err(Error::InvalidParameter("positivity check needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = 0;
    for _ in 0..trials {
        let Some(jet) = random_member(f, &mut rng)? else {
            continue;
        };
        run += 1;
        let gram = random_gram(&mut rng, f.dim());
        for scale in [1e-2, 1.0, 1e2] {
            let added = gram.scale(scale);
            let shifted = Jet2::new(jet.value, jet.gradient.clone(), jet.hessian.add(&added)?)?;
            if !f.contains(&shifted)? {
                return Ok(PositivityReport {
                    passed: false,
                    trials: run,
                    witness: Some(PositivityWitness { jet, added }),
                });
            }
        }
    }
    Ok(PositivityReport {
        passed: true,
        trials: run,
        witness: None,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ProductMembershipConfig {
    pub gamma_samples: usize,
    pub gamma_radius: f64,
    pub seed: u64,
    pub use_reducer: bool,
}

impl Default for ProductMembershipConfig {
    fn default() -> Self {
        ProductMembershipConfig {
            gamma_samples: 256,
            gamma_radius: 10.0,
            seed: 0,
            use_reducer: true,
        }
    }
}

impl ProductMembershipConfig {
    fn validate(&self) -> Result<()> {
        if self.gamma_samples == 0 || !(self.gamma_radius > 0.0) {
            return Err(Error::InvalidParameter(
                "product membership needs gamma_samples ≥ 1 and gamma_radius > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Three-valued verdict; `MemberSampled` only says no sampled slope found a violation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProductVerdict {
    Member,
    NotMember,
    MemberSampled,
}

/// Membership of a jet on `ℝ^{n+m}` in `F#P`.
pub fn product_membership(
    f: &Subequation,
    split: &BlockSplit,
    jet: &Jet2,
    cfg: &ProductMembershipConfig,
) -> Result<ProductVerdict> {
    cfg.validate()?;
    let flags = f.flags();
    if !flags.hessian_only || !flags.constant_coefficient {
        return Err(Error::PreconditionViolated(format!(
            "`{}` must be Hessian-only and constant-coefficient",
            f.name()
        )));
    }
    if split.base != f.dim() {
        return Err(Error::DimensionMismatch(format!(
            "F lives in dimension {}, split base is {}",
            f.dim(),
            split.base
        )));
    }
    let blocks = split.blocks(jet)?;
    if !blocks.d.is_semipositive(MEMBERSHIP_SLACK) {
        return Ok(ProductVerdict::NotMember);
    }
    if cfg.use_reducer {
        if let Some(member) = f.reduce_product(jet, split)? {
            return Ok(if member {
                ProductVerdict::Member
            } else {
                ProductVerdict::NotMember
            });
        }
    }

    let (n, m) = (split.base, split.fiber);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut candidates: Vec<DMatrix<f64>> = Vec::with_capacity(cfg.gamma_samples + 1);
    if m > 0 && blocks.d.min_eigenvalue() > 1e-12 * (1.0 + blocks.d.max_abs()) {
        if let Some(d_inv) = blocks.d.as_matrix().clone().try_inverse() {
            candidates.push(-(d_inv * blocks.c.transpose()));
        }
    }
    let r = cfg.gamma_radius;
    candidates.extend((0..cfg.gamma_samples).map(|_| DMatrix::from_fn(m, n, |_, _| rng.gen_range(-r..=r))));
    for gamma in &candidates {
        if !f.contains(&pullback_slice(jet, split, gamma)?)? {
            return Ok(ProductVerdict::NotMember);
        }
    }
    Ok(ProductVerdict::MemberSampled)
}

/// Jet-level check that adding a convex quadratic keeps an `F` jet inside `F`.
///
/// Returns membership of `f_jet + q_jet`; errors when `F` is not Hessian-only,
/// the quadratic is not convex, or `f_jet` is not in `F` to begin with.
pub fn add_convex_quadratic(f: &Subequation, f_jet: &Jet2, q_jet: &Jet2) -> Result<bool> {
    if !f.flags().hessian_only {
        return Err(Error::PreconditionViolated(format!("`{}` is not Hessian-only", f.name())));
    }
    if !q_jet.hessian.is_semipositive(MEMBERSHIP_SLACK) {
        return Err(Error::PreconditionViolated("quadratic Hessian is not semipositive".into()));
    }
    if !f.contains(f_jet)? {
        return Err(Error::PreconditionViolated("the base jet is not a member".into()));
    }
    f.contains(&f_jet.add(q_jet)?)
}

/// Largest `t` with `A − t·I ∈ F#P`, found by bisection on the closed-form reducer
/// (`None` when the reducer cannot decide or no `t` in the search bracket works).
pub fn product_margin(f: &Subequation, split: &BlockSplit, a: &SymMatrix) -> Result<Option<f64>> {
    let member = |t: f64| -> Result<Option<bool>> { f.reduce_product(&Jet2::from_hessian(a.add_identity(-t)), split) };
    let scale = 1.0 + a.max_abs();
    let (mut lo, mut hi) = (-64.0 * scale, 64.0 * scale);
    match (member(lo)?, member(hi)?) {
        (Some(true), Some(false)) => {}
        _ => return Ok(None),
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        match member(mid)? {
            Some(true) => lo = mid,
            Some(false) => hi = mid,
            None => return Ok(None),
        }
        if hi - lo <= 1e-13 * scale {
            break;
        }
    }
    Ok(Some(lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jets::assemble_jet;

    fn hess(rows: &[&[f64]]) -> Jet2 {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        Jet2::from_hessian(SymMatrix::from_rows(&rows).unwrap())
    }

    #[test]
    fn catalog_examples() {
        let p = Subequation::catalog("P", 2, &[]).unwrap();
        assert!(p.contains(&hess(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap());

        let eig2 = Subequation::catalog("eig-2", 2, &[0.0]).unwrap();
        assert!(eig2.contains(&hess(&[&[-1.0, 0.0], &[0.0, 5.0]])).unwrap());
        assert!(!eig2.contains(&hess(&[&[-1.0, 0.0], &[0.0, -2.0]])).unwrap());
        assert!(!eig2.flags().convex);

        let tr = Subequation::catalog("trace", 2, &[0.0]).unwrap();
        assert!(tr.contains(&hess(&[&[3.0, 0.0], &[0.0, -2.0]])).unwrap());
    }

    #[test]
    fn catalog_errors() {
        assert!(matches!(
            Subequation::catalog("laplace", 2, &[]),
            Err(Error::UnknownSubequation(_))
        ));
        assert!(Subequation::catalog("eig-3", 2, &[]).is_err());
        assert!(Subequation::catalog("shifted-min", 2, &[-1.0]).is_err());
        assert!(Subequation::catalog("trace", 2, &[f64::NAN]).is_err());
        assert!(Subequation::catalog("P", 2, &[1.0]).is_err());
    }

    #[test]
    fn eig_with_explicit_k() {
        let f = Subequation::catalog("eig", 3, &[2.0, -1.0]).unwrap();
        assert!(f.contains(&Jet2::from_hessian(SymMatrix::from_diagonal(&[-5.0, -1.0, 3.0]))).unwrap());
        assert!(!f.contains(&Jet2::from_hessian(SymMatrix::from_diagonal(&[-5.0, -1.5, 3.0]))).unwrap());
    }

    #[test]
    fn positivity_of_catalog_entries() {
        for (name, params) in [("P", vec![]), ("trace", vec![0.0]), ("eig-2", vec![0.0]), ("shifted-min", vec![1.0])] {
            let f = Subequation::catalog(name, 3, &params).unwrap();
            let report = check_positivity(&f, 200, 11).unwrap();
            assert!(report.passed, "{name}");
            assert!(report.trials > 0);
        }
    }

    #[test]
    fn broken_predicate_fails_positivity() {
        let broken = Subequation::custom("neg-trace", 2, SubequationFlags::HESSIAN_ONLY_CONVEX, |j| j.hessian.trace() <= 0.0);
        let report = check_positivity(&broken, 1, 5).unwrap();
        assert!(!report.passed);
        let w = report.witness.unwrap();
        assert!(w.jet.hessian.trace() <= 0.0);
        assert!(w.jet.hessian.add(&w.added).unwrap().trace() > 0.0);
    }

    #[test]
    fn product_reducer_examples() {
        let cfg = ProductMembershipConfig::default();
        let p1 = Subequation::catalog("P", 1, &[]).unwrap();
        let split = BlockSplit::new(1, 1);
        assert_eq!(
            product_membership(&p1, &split, &hess(&[&[1.0, 1.0], &[1.0, 1.0]]), &cfg).unwrap(),
            ProductVerdict::Member
        );
        assert_eq!(
            product_membership(&p1, &split, &hess(&[&[1.0, 2.0], &[2.0, 1.0]]), &cfg).unwrap(),
            ProductVerdict::NotMember
        );

        let tr = Subequation::catalog("trace", 2, &[0.0]).unwrap();
        let jet = assemble_jet(
            0.0,
            &DVector::zeros(2),
            &DVector::zeros(1),
            &SymMatrix::identity(2),
            &DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            &SymMatrix::identity(1),
        )
        .unwrap();
        assert_eq!(
            product_membership(&tr, &BlockSplit::new(2, 1), &jet, &cfg).unwrap(),
            ProductVerdict::Member
        );
    }

    #[test]
    fn sampled_verdicts() {
        let p1 = Subequation::catalog("P", 1, &[]).unwrap();
        let split = BlockSplit::new(1, 1);
        let cfg = ProductMembershipConfig {
            use_reducer: false,
            ..Default::default()
        };
        assert_eq!(
            product_membership(&p1, &split, &hess(&[&[1.0, 1.0], &[1.0, 1.0]]), &cfg).unwrap(),
            ProductVerdict::MemberSampled
        );
        assert_eq!(
            product_membership(&p1, &split, &hess(&[&[1.0, 2.0], &[2.0, 1.0]]), &cfg).unwrap(),
            ProductVerdict::NotMember
        );
        // negative fiber block fails before any slope is tried
        assert_eq!(
            product_membership(&p1, &split, &hess(&[&[1.0, 0.0], &[0.0, -1.0]]), &cfg).unwrap(),
            ProductVerdict::NotMember
        );
    }

    #[test]
    fn singular_fiber_block_range_condition() {
        let p1 = Subequation::catalog("P", 1, &[]).unwrap();
        let split = BlockSplit::new(1, 1);
        // D = 0 with C ≠ 0: b + 2cγ is unbounded below
        assert_eq!(p1.reduce_product(&hess(&[&[1.0, 1.0], &[1.0, 0.0]]), &split).unwrap(), Some(false));
        // D = 0 with C = 0: only B matters
        assert_eq!(p1.reduce_product(&hess(&[&[1.0, 0.0], &[0.0, 0.0]]), &split).unwrap(), Some(true));
    }

    #[test]
    fn product_precondition() {
        let custom = Subequation::custom(
            "value-dependent",
            1,
            SubequationFlags {
                hessian_only: false,
                ..SubequationFlags::HESSIAN_ONLY_CONVEX
            },
            |j| j.value <= 0.0,
        );
        let err = product_membership(
            &custom,
            &BlockSplit::new(1, 1),
            &hess(&[&[1.0, 0.0], &[0.0, 1.0]]),
            &ProductMembershipConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::PreconditionViolated(_)));
    }

    #[test]
    fn convex_quadratic_sums() {
        let p = Subequation::catalog("P", 2, &[]).unwrap();
        let id = Jet2::from_hessian(SymMatrix::identity(2));
        assert!(add_convex_quadratic(&p, &id, &id).unwrap());

        let eig2 = Subequation::catalog("eig-2", 2, &[0.0]).unwrap();
        let f = Jet2::from_hessian(SymMatrix::from_diagonal(&[-1.0, 0.0]));
        let q = Jet2::from_hessian(SymMatrix::from_diagonal(&[0.0, 1.0]));
        assert!(add_convex_quadratic(&eig2, &f, &q).unwrap());

        let tr = Subequation::catalog("trace", 2, &[0.0]).unwrap();
        let f = Jet2::from_hessian(SymMatrix::from_diagonal(&[1.0, -1.0]));
        let zero = Jet2::from_hessian(SymMatrix::zeros(2));
        assert!(add_convex_quadratic(&tr, &f, &zero).unwrap());

        let concave = Jet2::from_hessian(SymMatrix::from_diagonal(&[-1.0, 0.0]));
        assert!(add_convex_quadratic(&tr, &f, &concave).is_err());
    }

    #[test]
    fn margin_by_bisection() {
        let tr = Subequation::catalog("trace", 2, &[0.0]).unwrap();
        let a = assemble_jet(
            0.0,
            &DVector::zeros(2),
            &DVector::zeros(1),
            &SymMatrix::identity(2),
            &DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            &SymMatrix::identity(1),
        )
        .unwrap()
        .hessian;
        // A − tI has Schur trace 2(1 − t) − 1/(1 − t), which vanishes at t = 1 − 1/√2
        let m = product_margin(&tr, &BlockSplit::new(2, 1), &a).unwrap().unwrap();
        let exact = 1.0 - 0.5f64.sqrt();
        assert!((m - exact).abs() < 1e-9, "{m} vs {exact}");
    }
}
