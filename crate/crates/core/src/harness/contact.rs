//! The quadratic that touches `f_ε` from above at `(x₀, γ(x₀))`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::jets::{pullback_slice, sample_ball, BlockSplit, Jet2};
use crate::linalg::{concat, SymMatrix};

/// `q(x,y) = g₀ + ∇g·dx + ½dxᵗ(H + εI)dx + κ₂‖y − y₀ − Γdx‖²` with `dx = x − x₀`.
#[derive(Clone, Debug)]
pub struct ContactQuadratic {
    pub x0: DVector<f64>,
    pub y0: DVector<f64>,
    pub g_jet: Jet2,
    pub gamma: DMatrix<f64>,
    pub kappa2: f64,
    pub epsilon: f64,
    /// Second-order jet of `q` at `(x₀, y₀)`.
    pub jet: Jet2,
}

impl ContactQuadratic {
    pub fn split(&self) -> BlockSplit {
        BlockSplit::new(self.x0.len(), self.y0.len())
    }

    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let dx = x - &self.x0;
        let d = y - &self.y0 - &self.gamma * &dx;
        self.g_jet.value
            + self.g_jet.gradient.dot(&dx)
            + 0.5 * self.g_jet.hessian.quad_form(&dx)
            + 0.5 * self.epsilon * dx.norm_squared()
            + self.kappa2 * d.norm_squared()
    }

    /// `max |i_Γ*(J²q) − (Hess g + εI)|`; zero up to rounding.
    pub fn pullback_defect(&self) -> Result<f64> {
        let pulled = pullback_slice(&self.jet, &self.split(), &self.gamma)?;
        let target = self.g_jet.hessian.add_identity(self.epsilon);
        Ok((pulled.hessian.as_matrix() - target.as_matrix()).abs().max())
    }
}

pub fn build_contact_quadratic(
    x0: &DVector<f64>,
    y0: &DVector<f64>,
    g_jet: &Jet2,
    gamma: &DMatrix<f64>,
    kappa2: f64,
    epsilon: f64,
) -> Result<ContactQuadratic> {
    let (n, m) = (x0.len(), y0.len());
    if g_jet.dim() != n || gamma.nrows() != m || gamma.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "contact quadratic on {n}+{m} needs an n-jet and an {m}x{n} Γ"
        )));
    }
    let mut h = DMatrix::zeros(n + m, n + m);
    let base = g_jet.hessian.as_matrix() + DMatrix::identity(n, n) * epsilon + gamma.transpose() * gamma * (2.0 * kappa2);
    h.view_mut((0, 0), (n, n)).copy_from(&base);
    let off = gamma * (-2.0 * kappa2);
    h.view_mut((n, 0), (m, n)).copy_from(&off);
    h.view_mut((0, n), (n, m)).copy_from(&off.transpose());
    h.view_mut((n, n), (m, m)).copy_from(&(DMatrix::identity(m, m) * (2.0 * kappa2)));
    let jet = Jet2::new(
        g_jet.value,
        concat(&g_jet.gradient, &DVector::zeros(m)),
        SymMatrix::symmetrize(&h)?,
    )?;
    Ok(ContactQuadratic {
        x0: x0.clone(),
        y0: y0.clone(),
        g_jet: g_jet.clone(),
        gamma: gamma.clone(),
        kappa2,
        epsilon,
        jet,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ContactCheckOptions {
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
    /// Allowed `f − q` excess, relative to `1 + |q(x₀,y₀)|`.
    pub tol: f64,
}

impl Default for ContactCheckOptions {
    fn default() -> Self {
        ContactCheckOptions {
            radius: 1e-2,
            samples: 32,
            seed: 0,
            tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ContactCheck {
    /// Largest `f − q` over the samples (negative means strict domination).
    pub worst_excess: f64,
    pub samples: usize,
    pub holds: bool,
}

/// Samples the ball around `(x₀, y₀)` (clipped to the field's box) and
/// checks `f ≤ q` there.
pub fn check_contact(f: &ScalarField, q: &ContactQuadratic, opts: &ContactCheckOptions) -> Result<ContactCheck> {
    let (n, m) = (q.x0.len(), q.y0.len());
    if f.base_dim() != n || f.fiber_dim() != m {
        return Err(Error::DimensionMismatch("contact check dimensions".into()));
    }
    let center = concat(&q.x0, &q.y0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let slack = opts.tol * (1.0 + q.g_jet.value.abs());
    let mut worst = f64::NEG_INFINITY;
    let mut count = 0;
    for _ in 0..opts.samples {
        let mut z = &center + sample_ball(&mut rng, n + m, opts.radius);
        f.domain().project(&mut z);
        let (x, y) = f.split(&z);
        worst = worst.max(f.value(&z)? - q.eval(&x, &y));
        count += 1;
    }
    Ok(ContactCheck {
        worst_excess: worst,
        samples: count,
        holds: worst <= slack,
    })
}
