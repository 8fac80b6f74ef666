//! Test-field generators with exact certificates on their working box.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{BoxDomain, Certificates, ScalarField};
use crate::jets::{BlockSplit, Jet2};
use crate::linalg::{matrix_from_rows, SymMatrix};
use crate::subequations::{product_margin, Subequation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Control {
    /// Reducer margin `+margin`: the field is `F#P`-subharmonic.
    Positive,
    /// Reducer margin `−margin`: every jet violates `F#P`.
    Negative,
}

/// Field family selection, as written in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FamilyConfig {
    Zero {
        base_dim: usize,
        fiber_dim: usize,
    },
    /// `½(x − y)² + (σ/2)y²` on `ℝ × ℝ`.
    CoupledQuadratic { sigma: f64 },
    /// `½ zᵗ [[B, C], [Cᵗ, D]] z`.
    BlockQuadratic {
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        d: Vec<Vec<f64>>,
    },
    /// Seeded block quadratic whose Schur complement has `F`-margin `±margin`.
    RandomBlockQuadratic {
        base_dim: usize,
        fiber_dim: usize,
        control: Control,
        margin: f64,
    },
    /// Block quadratic plus `a·cos(w·z)`; admitted iff `margin(F#P) ≥ a‖w‖²`.
    QuadraticPlusCosine {
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        d: Vec<Vec<f64>>,
        amplitude: f64,
        frequency: Vec<f64>,
    },
    /// `(y − |x|)² + ½y²` on `ℝ × ℝ`, whose argmin is `2|x|/3`.
    KinkedBase,
}

impl FamilyConfig {
    pub fn dims(&self) -> Result<(usize, usize)> {
        Ok(match self {
            FamilyConfig::Zero { base_dim, fiber_dim } => (*base_dim, *fiber_dim),
            FamilyConfig::CoupledQuadratic { .. } | FamilyConfig::KinkedBase => (1, 1),
            FamilyConfig::BlockQuadratic { b, d, .. } | FamilyConfig::QuadraticPlusCosine { b, d, .. } => (b.len(), d.len()),
            FamilyConfig::RandomBlockQuadratic { base_dim, fiber_dim, .. } => (*base_dim, *fiber_dim),
        })
    }
}

/// A generated field with the data the oracles need.
#[derive(Clone, Debug)]
pub struct GeneratedField {
    pub field: ScalarField,
    /// Constant Hessian for quadratic families.
    pub hessian: Option<SymMatrix>,
    /// Largest `t` with `H − tI ∈ F#P`, when `F` and `H` are available.
    pub reducer_margin: Option<f64>,
}

/// Assembles `[[B, C], [Cᵗ, D]]`.
pub fn block_hessian(b: &SymMatrix, c: &DMatrix<f64>, d: &SymMatrix) -> Result<SymMatrix> {
    let (n, m) = (b.dim(), d.dim());
    if c.nrows() != n || c.ncols() != m {
        return Err(Error::DimensionMismatch(format!("C must be {n}x{m}, got {}x{}", c.nrows(), c.ncols())));
    }
    let mut h = DMatrix::zeros(n + m, n + m);
    h.view_mut((0, 0), (n, n)).copy_from(b.as_matrix());
    h.view_mut((0, n), (n, m)).copy_from(c);
    h.view_mut((n, 0), (m, n)).copy_from(&c.transpose());
    h.view_mut((n, n), (m, m)).copy_from(d.as_matrix());
    SymMatrix::from_upper(&h)
}

/// `B − C D⁻¹ Cᵗ`.
pub fn schur_complement(hessian: &SymMatrix, split: &BlockSplit) -> Result<SymMatrix> {
    let blocks = split.blocks(&Jet2::from_hessian(hessian.clone()))?;
    let d_inv = blocks
        .d
        .as_matrix()
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("fiber block D is singular".into()))?;
    SymMatrix::symmetrize(&(blocks.b.as_matrix() - &blocks.c * d_inv * blocks.c.transpose()))
}

/// Largest `t` with `A − tI ∈ F` for a Hessian-only `F`, by bisection.
pub fn hessian_margin(f: &Subequation, a: &SymMatrix) -> Result<f64> {
    let scale = 1.0 + a.max_abs();
    let (mut lo, mut hi) = (-64.0 * scale, 64.0 * scale);
    if !f.contains_hessian(&a.add_identity(-lo))? || f.contains_hessian(&a.add_identity(-hi))? {
        return Err(Error::InvalidParameter(format!("`{}` is not shift-monotone on this Hessian", f.name())));
    }
    while hi - lo > 1e-14 * scale {
        let mid = 0.5 * (lo + hi);
        if f.contains_hessian(&a.add_identity(-mid))? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// `½ Σ |H_ij| r_i r_j` with `r_i` the largest coordinate magnitude: a bound
/// on `|½ zᵗHz|` over the box.
fn quadratic_sup_bound(h: &SymMatrix, domain: &BoxDomain) -> f64 {
    let r: Vec<f64> = domain.lower.iter().zip(&domain.upper).map(|(l, u)| l.abs().max(u.abs())).collect();
    let d = h.dim();
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            total += h.get(i, j).abs() * r[i] * r[j];
        }
    }
    0.5 * total
}

/// Certificates of `½ zᵗHz` on `domain` under the joint semiconvexity convention.
pub fn quadratic_certificates(h: &SymMatrix, split: &BlockSplit, domain: &BoxDomain) -> Result<Certificates> {
    let blocks = split.blocks(&Jet2::from_hessian(h.clone()))?;
    let (n, m) = (split.base, split.fiber);
    let d_min = if m == 0 { f64::INFINITY } else { blocks.d.min_eigenvalue() };
    let d_max = if m == 0 { 0.0 } else { blocks.d.max_eigenvalue() };
    let scale = 1.0 + h.max_abs();
    let (semiconvexity, fiber_convexity) = if h.min_eigenvalue() >= -1e-14 * scale {
        // convex: keep κ = 0 and take the largest σ with H − diag(0, σI) ⪰ 0
        let sigma = if m == 0 {
            None
        } else if n == 0 {
            Some(d_min.max(0.0))
        } else if blocks.b.min_eigenvalue() > 1e-12 * scale {
            let b_inv = blocks.b.as_matrix().clone().try_inverse().expect("positive definite");
            let s = SymMatrix::symmetrize(&(blocks.d.as_matrix() - blocks.c.transpose() * b_inv * &blocks.c))?;
            Some(s.min_eigenvalue().max(0.0))
        } else {
            Some(0.0)
        };
        (Some(0.0), sigma)
    } else if m > 0 && d_min > 1e-12 * scale {
        let sigma = 0.5 * d_min;
        let shifted = SymMatrix::symmetrize(&(blocks.d.as_matrix() - DMatrix::identity(m, m) * sigma))?;
        let inv = shifted.as_matrix().clone().try_inverse().expect("positive definite");
        let s = SymMatrix::symmetrize(&(blocks.b.as_matrix() - &blocks.c * inv * blocks.c.transpose()))?;
        (Some((-s.min_eigenvalue()).max(0.0)), Some(sigma))
    } else if m > 0 && d_min >= -1e-14 * scale && blocks.c.abs().max() == 0.0 {
        (Some((-blocks.b.min_eigenvalue()).max(0.0)), Some(0.0))
    } else {
        (None, None)
    };
    let r = domain.max_norm();
    Ok(Certificates {
        semiconvexity,
        fiber_convexity,
        semiconcavity: Some(h.max_eigenvalue().max(0.0)),
        fiber_semiconcavity: (m > 0).then_some(d_max.max(0.0)),
        sup_norm: Some(quadratic_sup_bound(h, domain)),
        lipschitz: Some(h.as_matrix().norm() * r),
    })
}

fn quadratic_field(name: &str, h: &SymMatrix, split: &BlockSplit, domain: &BoxDomain) -> Result<ScalarField> {
    let certs = quadratic_certificates(h, split, domain)?;
    let hv = h.as_matrix().clone();
    let hg = hv.clone();
    Ok(ScalarField::new(name, split.base, split.fiber, domain.clone(), move |z| 0.5 * z.dot(&(&hv * z)))?
        .with_gradient(move |z| &hg * z)
        .with_certificates(certs))
}

fn check_domain(domain: &BoxDomain, n: usize, m: usize) -> Result<()> {
    if domain.dim() != n + m {
        return Err(Error::DimensionMismatch(format!(
            "working box has dimension {}, family lives on {n}+{m}",
            domain.dim()
        )));
    }
    Ok(())
}

fn reducer_margin(sub: Option<&Subequation>, h: &SymMatrix, split: &BlockSplit) -> Result<Option<f64>> {
    match sub {
        Some(f) if f.dim() == split.base && f.has_reducer() => product_margin(f, split, h),
        _ => Ok(None),
    }
}

/// Random `D ⪰ I`, `C` and a Schur complement `S` with `F`-margin `target`;
/// returns `[[S + C D⁻¹ Cᵗ, C], [Cᵗ, D]]`.
fn random_block_hessian(f: &Subequation, n: usize, m: usize, target: f64, rng: &mut ChaCha8Rng) -> Result<SymMatrix> {
    let a = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
    let d = SymMatrix::symmetrize(&(DMatrix::identity(m, m) + &a * a.transpose() * (0.5 / m as f64)))?;
    let c = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-0.7..0.7));
    let s0 = SymMatrix::symmetrize(&DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)))?;
    let s = s0.add_identity(target - hessian_margin(f, &s0)?);
    let d_inv = d.as_matrix().clone().try_inverse().expect("D ⪰ I");
    let b = SymMatrix::symmetrize(&(s.as_matrix() + &c * d_inv * c.transpose()))?;
    block_hessian(&b, &c, &d)
}

/// Builds the field for `family` on `domain`. Families whose construction
/// depends on the subequation (random controls, the cosine admission test)
/// need `subequation`.
pub fn generate_field(
    family: &FamilyConfig,
    subequation: Option<&Subequation>,
    domain: &BoxDomain,
    seed: u64,
) -> Result<GeneratedField> {
    let (n, m) = family.dims()?;
    check_domain(domain, n, m)?;
    let split = BlockSplit::new(n, m);
    match family {
        FamilyConfig::Zero { .. } => {
            let zero = Certificates {
                semiconvexity: Some(0.0),
                fiber_convexity: Some(0.0),
                semiconcavity: Some(0.0),
                fiber_semiconcavity: Some(0.0),
                sup_norm: Some(0.0),
                lipschitz: Some(0.0),
            };
            let d = n + m;
            let field = ScalarField::new("zero", n, m, domain.clone(), |_| 0.0)?
                .with_gradient(move |_| DVector::zeros(d))
                .with_certificates(zero);
            let h = SymMatrix::zeros(d);
            Ok(GeneratedField {
                reducer_margin: reducer_margin(subequation, &h, &split)?,
                field,
                hessian: Some(h),
            })
        }
        FamilyConfig::CoupledQuadratic { sigma } => {
            if !(*sigma > 0.0) {
                return Err(Error::InvalidParameter(format!("coupled quadratic needs σ > 0, got {sigma}")));
            }
            let h = SymMatrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0 + sigma]])?;
            let mut field = quadratic_field("coupled-quadratic", &h, &split, domain)?;
            // H − diag(0, σ) = [[1, −1], [−1, 1]] ⪰ 0
            field.certificates_mut().fiber_convexity = Some(*sigma);
            field.certificates_mut().semiconvexity = Some(0.0);
            Ok(GeneratedField {
                field,
                hessian: Some(h),
                reducer_margin: None,
            })
        }
        FamilyConfig::BlockQuadratic { b, c, d } => {
            let h = explicit_block(b, c, d, n, m)?;
            let field = quadratic_field("block-quadratic", &h, &split, domain)?;
            Ok(GeneratedField {
                reducer_margin: reducer_margin(subequation, &h, &split)?,
                field,
                hessian: Some(h),
            })
        }
        FamilyConfig::RandomBlockQuadratic { control, margin, .. } => {
            let f = subequation.ok_or_else(|| {
                Error::InvalidParameter("random-block-quadratic needs a subequation to certify against".into())
            })?;
            if f.dim() != n {
                return Err(Error::DimensionMismatch(format!("subequation on ℝ^{} for base ℝ^{n}", f.dim())));
            }
            if !(*margin > 0.0) || m == 0 {
                return Err(Error::InvalidParameter("random controls need margin > 0 and a fiber".into()));
            }
            let target = match control {
                Control::Positive => *margin,
                Control::Negative => -*margin,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_block_hessian(f, n, m, target, &mut rng)?;
            let certified = f.reduce_product(&Jet2::from_hessian(h.clone()), &split)?;
            let expected = *control == Control::Positive;
            if certified != Some(expected) {
                return Err(Error::ValidationFailed(format!(
                    "reducer verdict {certified:?} disagrees with the requested {control:?} control"
                )));
            }
            let name = format!("random-block-quadratic({control:?}, seed={seed})").to_lowercase();
            let field = quadratic_field(&name, &h, &split, domain)?;
            Ok(GeneratedField {
                reducer_margin: reducer_margin(Some(f), &h, &split)?,
                field,
                hessian: Some(h),
            })
        }
        FamilyConfig::QuadraticPlusCosine {
            b,
            c,
            d,
            amplitude,
            frequency,
        } => {
            let f = subequation.ok_or_else(|| {
                Error::InvalidParameter("quadratic-plus-cosine needs a subequation for its admission test".into())
            })?;
            if frequency.len() != n + m {
                return Err(Error::DimensionMismatch(format!("frequency needs {} entries", n + m)));
            }
            let h = explicit_block(b, c, d, n, m)?;
            let w = DVector::from_column_slice(frequency);
            let a = amplitude.abs();
            let bump = a * w.norm_squared();
            let margin = reducer_margin(Some(f), &h, &split)?
                .ok_or_else(|| Error::InvalidParameter("no reducer margin for the quadratic part".into()))?;
            if margin - bump < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "perturbation a‖w‖² = {bump} exceeds the F#P margin {margin}"
                )));
            }
            let lower = h.add_identity(-bump);
            let lower_certs = quadratic_certificates(&lower, &split, domain)?;
            let upper_certs = quadratic_certificates(&h.add_identity(bump), &split, domain)?;
            let certs = Certificates {
                semiconvexity: lower_certs.semiconvexity,
                fiber_convexity: lower_certs.fiber_convexity,
                semiconcavity: upper_certs.semiconcavity,
                fiber_semiconcavity: upper_certs.fiber_semiconcavity,
                sup_norm: Some(quadratic_sup_bound(&h, domain) + a),
                lipschitz: Some(h.as_matrix().norm() * domain.max_norm() + a * w.norm()),
            };
            let amp = *amplitude;
            let hv = h.as_matrix().clone();
            let hg = hv.clone();
            let (wv, wg) = (w.clone(), w.clone());
            let field = ScalarField::new("quadratic-plus-cosine", n, m, domain.clone(), move |z| {
                0.5 * z.dot(&(&hv * z)) + amp * wv.dot(z).cos()
            })?
            .with_gradient(move |z| &hg * z - &wg * (amp * wg.dot(z).sin()))
            .with_certificates(certs);
            Ok(GeneratedField {
                field,
                hessian: None,
                reducer_margin: Some(margin - bump),
            })
        }
        FamilyConfig::KinkedBase => {
            let rx = domain.lower[0].abs().max(domain.upper[0].abs());
            let ry = domain.lower[1].abs().max(domain.upper[1].abs());
            let certs = Certificates {
                fiber_convexity: Some(3.0),
                fiber_semiconcavity: Some(3.0),
                sup_norm: Some((rx + ry).powi(2) + 0.5 * ry * ry),
                ..Default::default()
            };
            let field = ScalarField::new("kinked-base", 1, 1, domain.clone(), |z| {
                (z[1] - z[0].abs()).powi(2) + 0.5 * z[1] * z[1]
            })?
            .with_gradient(|z| {
                let r = z[1] - z[0].abs();
                let sign = if z[0] > 0.0 {
                    1.0
                } else if z[0] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                DVector::from_vec(vec![-2.0 * r * sign, 2.0 * r + z[1]])
            })
            .with_certificates(certs);
            Ok(GeneratedField {
                field,
                hessian: None,
                reducer_margin: None,
            })
        }
    }
}

fn explicit_block(b: &[Vec<f64>], c: &[Vec<f64>], d: &[Vec<f64>], n: usize, m: usize) -> Result<SymMatrix> {
    let b = SymMatrix::from_rows(b)?;
    let d = if m == 0 { SymMatrix::zeros(0) } else { SymMatrix::from_rows(d)? };
    let c = if n == 0 || m == 0 {
        DMatrix::zeros(n, m)
    } else {
        matrix_from_rows(c, m)?
    };
    block_hessian(&b, &c, &d)
}

/// `f + (1/j)‖y‖²`; raises σ, κ₂ and the joint semiconcavity by `2/j`.
pub fn regularize_j(f: &ScalarField, j: u64) -> Result<ScalarField> {
    if j == 0 {
        return Err(Error::InvalidParameter("regularization index j must be at least 1".into()));
    }
    let w = 1.0 / j as f64;
    let y_max = f.fiber_domain().max_norm();
    let src = f.certificates();
    let certs = Certificates {
        semiconvexity: src.semiconvexity,
        fiber_convexity: src.fiber_convexity.map(|s| s + 2.0 * w),
        semiconcavity: src.semiconcavity.map(|c| c + 2.0 * w),
        fiber_semiconcavity: src.fiber_semiconcavity.map(|k| k + 2.0 * w),
        sup_norm: src.sup_norm.map(|m| m + w * y_max * y_max),
        lipschitz: src.lipschitz.map(|l| l + 2.0 * w * y_max),
    };
    Ok(f
        .add_quadratic(0.0, w, format!("{}+|y|²/{j}", f.name()))
        .with_certificates(certs))
}
