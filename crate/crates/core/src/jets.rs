//! Second-order jets, block splittings, slice pullbacks and finite-difference
//! jet estimation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{BoxDomain, ScalarField};
use crate::linalg::SymMatrix;

/// A 2-jet `(r, p, A)`: value, gradient and symmetric Hessian.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet2 {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: SymMatrix,
}

impl Jet2 {
    pub fn new(value: f64, gradient: DVector<f64>, hessian: SymMatrix) -> Result<Self> {
        if gradient.len() != hessian.dim() {
            return Err(Error::DimensionMismatch(format!(
                "jet gradient has length {} but the Hessian is {}x{}",
                gradient.len(),
                hessian.dim(),
                hessian.dim()
            )));
        }
        Ok(Jet2 {
            value,
            gradient,
            hessian,
        })
    }

    /// Jet with zero value and gradient.
    pub fn from_hessian(hessian: SymMatrix) -> Self {
        let n = hessian.dim();
        Jet2 {
            value: 0.0,
            gradient: DVector::zeros(n),
            hessian,
        }
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn add(&self, other: &Jet2) -> Result<Jet2> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch("adding jets of different dimension".into()));
        }
        Jet2::new(
            self.value + other.value,
            &self.gradient + &other.gradient,
            self.hessian.add(&other.hessian)?,
        )
    }

    /// Same jet with `s·I` added to the Hessian.
    pub fn relax(&self, s: f64) -> Jet2 {
        Jet2 {
            value: self.value,
            gradient: self.gradient.clone(),
            hessian: self.hessian.add_identity(s),
        }
    }
}

/// Partition of `ℝ^{n+m}` into base (first `n`) and fiber (last `m`) coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BlockSplit {
    pub base: usize,
    pub fiber: usize,
}

/// The blocks `p = (p₁, p₂)`, `A = [[B, C], [Cᵗ, D]]` of a jet.
#[derive(Clone, Debug)]
pub struct JetBlocks {
    pub p1: DVector<f64>,
    pub p2: DVector<f64>,
    pub b: SymMatrix,
    pub c: DMatrix<f64>,
    pub d: SymMatrix,
}

impl BlockSplit {
    pub fn new(base: usize, fiber: usize) -> Self {
        BlockSplit { base, fiber }
    }

    pub fn total(&self) -> usize {
        self.base + self.fiber
    }

    pub fn blocks(&self, jet: &Jet2) -> Result<JetBlocks> {
        self.check(jet)?;
        let (n, m) = (self.base, self.fiber);
        let a = jet.hessian.as_matrix();
        Ok(JetBlocks {
            p1: jet.gradient.rows(0, n).into_owned(),
            p2: jet.gradient.rows(n, m).into_owned(),
            b: jet.hessian.principal_block(0, n),
            c: a.view((0, n), (n, m)).into_owned(),
            d: jet.hessian.principal_block(n, m),
        })
    }

    fn check(&self, jet: &Jet2) -> Result<()> {
        if jet.dim() != self.total() {
            return Err(Error::DimensionMismatch(format!(
                "jet of dimension {} does not split as {}+{}",
                jet.dim(),
                self.base,
                self.fiber
            )));
        }
        Ok(())
    }
}

/// Assembles a jet on `ℝ^{n+m}` from its blocks.
pub fn assemble_jet(value: f64, p1: &DVector<f64>, p2: &DVector<f64>, b: &SymMatrix, c: &DMatrix<f64>, d: &SymMatrix) -> Result<Jet2> {
    let (n, m) = (b.dim(), d.dim());
    if p1.len() != n || p2.len() != m || c.nrows() != n || c.ncols() != m {
        return Err(Error::DimensionMismatch("inconsistent jet blocks".into()));
    }
    let mut a = DMatrix::zeros(n + m, n + m);
    a.view_mut((0, 0), (n, n)).copy_from(b.as_matrix());
    a.view_mut((0, n), (n, m)).copy_from(c);
    a.view_mut((n, 0), (m, n)).copy_from(&c.transpose());
    a.view_mut((n, n), (m, m)).copy_from(d.as_matrix());
    let mut p = DVector::zeros(n + m);
    p.rows_mut(0, n).copy_from(p1);
    p.rows_mut(n, m).copy_from(p2);
    Jet2::new(value, p, SymMatrix::from_upper(&a)?)
}

/// Pullback along the graph of the linear map `Γ: ℝⁿ → ℝᵐ` (an `m x n` matrix):
/// `(r, p₁ + Γᵗp₂, B + CΓ + ΓᵗCᵗ + ΓᵗDΓ)`.
pub fn pullback_slice(jet: &Jet2, split: &BlockSplit, gamma: &DMatrix<f64>) -> Result<Jet2> {
    let blocks = split.blocks(jet)?;
    if gamma.nrows() != split.fiber || gamma.ncols() != split.base {
        return Err(Error::DimensionMismatch(format!(
            "Γ must be {}x{}, got {}x{}",
            split.fiber,
            split.base,
            gamma.nrows(),
            gamma.ncols()
        )));
    }
    let c_gamma = &blocks.c * gamma;
    let hess = blocks.b.as_matrix() + &c_gamma + c_gamma.transpose() + gamma.transpose() * blocks.d.as_matrix() * gamma;
    Jet2::new(
        jet.value,
        &blocks.p1 + gamma.transpose() * &blocks.p2,
        SymMatrix::from_upper(&hess)?,
    )
}

/// Restriction to the fiber: `(r, p₂, D)`.
pub fn pullback_fiber(jet: &Jet2, split: &BlockSplit) -> Result<Jet2> {
    let blocks = split.blocks(jet)?;
    Jet2::new(jet.value, blocks.p2, blocks.d)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct JetOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// A jet is flagged unstable when `‖H_h − H_{h/2}‖_∞ > stability_factor · h`.
    pub stability_factor: f64,
}

impl Default for JetOptions {
    fn default() -> Self {
        JetOptions {
            step: 1e-3,
            stability_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct JetEstimate {
    pub jet: Jet2,
    /// Two-scale Hessian disagreement exceeded the threshold.
    pub unstable: bool,
    pub disagreement: f64,
}

/// Central-difference jet of `f` at `x` with a two-scale stability check.
pub fn estimate_jet(f: &ScalarField, x: &DVector<f64>, opts: &JetOptions) -> Result<JetEstimate> {
    estimate_jet_with(|z| f.value(z), x, Some(f.domain()), opts)
}

/// Same as [`estimate_jet`] for an arbitrary evaluation routine.
pub fn estimate_jet_with<F>(eval: F, x: &DVector<f64>, domain: Option<&BoxDomain>, opts: &JetOptions) -> Result<JetEstimate>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let h = opts.step;
    if !(h > 0.0) {
        return Err(Error::InvalidParameter("finite-difference step must be positive".into()));
    }
    if let Some(dom) = domain {
        if !dom.contains_with_margin(x, h) {
            return Err(Error::OutsideDomain {
                point: x.iter().copied().collect(),
                what: format!("jet stencil of radius {h}"),
            });
        }
    }
    let f0 = eval(x)?;
    let (grad, hess) = stencil(&eval, x, f0, h)?;
    let (_, hess_half) = stencil(&eval, x, f0, 0.5 * h)?;
    let disagreement = (&hess - &hess_half).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    Ok(JetEstimate {
        jet: Jet2::new(f0, grad, SymMatrix::symmetrize(&hess)?)?,
        unstable: !(disagreement <= opts.stability_factor * h),
        disagreement,
    })
}

fn stencil<F>(eval: &F, x: &DVector<f64>, f0: f64, h: f64) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let n = x.len();
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    let shifted = |i: usize, si: f64, j: Option<(usize, f64)>| {
        let mut z = x.clone();
        z[i] += si * h;
        if let Some((j, sj)) = j {
            z[j] += sj * h;
        }
        z
    };
    for i in 0..n {
        let fp = eval(&shifted(i, 1.0, None))?;
        let fm = eval(&shifted(i, -1.0, None))?;
        grad[i] = (fp - fm) / (2.0 * h);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let fpp = eval(&shifted(i, 1.0, Some((j, 1.0))))?;
            let fpm = eval(&shifted(i, 1.0, Some((j, -1.0))))?;
            let fmp = eval(&shifted(i, -1.0, Some((j, 1.0))))?;
            let fmm = eval(&shifted(i, -1.0, Some((j, -1.0))))?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok((grad, hess))
}

#[derive(Clone, Copy, Debug)]
pub struct ContactTestConfig {
    pub radius: f64,
    /// Seeded uniform points added to the fixed ring pattern.
    pub samples: usize,
    pub seed: u64,
    /// Allowed excess, relative to `1 + |f(x)|`.
    pub tol: f64,
}

impl Default for ContactTestConfig {
    fn default() -> Self {
        ContactTestConfig {
            radius: 1e-2,
            samples: 64,
            seed: 0,
            tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ContactVerdict {
    /// The quadratic model dominates `f` at every sampled point.
    Contact,
    /// A sampled point where `f` exceeds the model by `excess`.
    Counterexample { point: DVector<f64>, excess: f64 },
}

impl ContactVerdict {
    pub fn holds(&self) -> bool {
        matches!(self, ContactVerdict::Contact)
    }
}

/// The fixed ring pattern: `2n` axis points and `2n(n−1)` diagonal points at distance `radius`.
pub fn ring_pattern(n: usize, radius: f64) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut v = DVector::zeros(n);
            v[i] = s * radius;
            out.push(v);
        }
    }
    let diag = radius / 2f64.sqrt();
    for i in 0..n {
        for j in (i + 1)..n {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut v = DVector::zeros(n);
                v[i] = si * diag;
                v[j] = sj * diag;
                out.push(v);
            }
        }
    }
    out
}

/// Uniform sample from the ball of the given radius.
pub fn sample_ball(rng: &mut impl Rng, n: usize, radius: f64) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let norm = v.norm();
        if norm <= 1.0 && norm > 0.0 {
            return v * radius;
        }
    }
}

/// Tests `f(y) ≤ f(x) + p·(y−x) + ½(y−x)ᵗA(y−x)` on the ring pattern plus seeded
/// uniform points of the ball `B_radius(x)`.
pub fn is_upper_contact_jet(
    f: &ScalarField,
    x: &DVector<f64>,
    p: &DVector<f64>,
    a: &SymMatrix,
    cfg: &ContactTestConfig,
) -> Result<ContactVerdict> {
    let n = x.len();
    if p.len() != n || a.dim() != n || f.dim() != n {
        return Err(Error::DimensionMismatch("contact test dimensions".into()));
    }
    if !(cfg.radius > 0.0) {
        return Err(Error::InvalidParameter("contact radius must be positive".into()));
    }
    if !f.domain().contains_with_margin(x, cfg.radius) {
        return Err(Error::OutsideDomain {
            point: x.iter().copied().collect(),
            what: format!("contact ball of radius {}", cfg.radius),
        });
    }
    let fx = f.value(x)?;
    let slack = cfg.tol * (1.0 + fx.abs());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let offsets = ring_pattern(n, cfg.radius)
        .into_iter()
        .chain((0..cfg.samples).map(|_| sample_ball(&mut rng, n, cfg.radius)));
    for d in offsets {
        let y = x + &d;
        let model = fx + p.dot(&d) + 0.5 * a.quad_form(&d);
        let excess = f.value(&y)? - model;
        if excess > slack {
            return Ok(ContactVerdict::Counterexample { point: y, excess });
        }
    }
    Ok(ContactVerdict::Contact)
}
