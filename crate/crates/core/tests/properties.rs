//! Randomized invariants.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use semiconvex::argmin::BaseGrid;
use semiconvex::field::BoxDomain;
use semiconvex::harness::contact::build_contact_quadratic;
use semiconvex::harness::families::{generate_field, regularize_j, schur_complement, FamilyConfig};
use semiconvex::harness::pipeline::{admissible_base, verify_minimum_principle, PipelineOptions};
use semiconvex::jets::{estimate_jet, BlockSplit, Jet2, JetOptions};
use semiconvex::linalg::{vector, SymMatrix};
use semiconvex::prox::{contraction_mu, resolvent_full, ResolventOptions};
use semiconvex::subequations::{product_membership, ProductMembershipConfig, ProductVerdict, Subequation};

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

fn sym(n: usize, range: f64) -> impl Strategy<Value = SymMatrix> {
    matrix(n, n, range).prop_map(|a| SymMatrix::symmetrize(&a).unwrap())
}

/// `(n, m, H)` with the fiber block `D ⪰ 0.2·I`.
fn split_hessian() -> impl Strategy<Value = (usize, usize, SymMatrix)> {
    (1usize..=3, 1usize..=2).prop_flat_map(|(n, m)| {
        (sym(n, 2.0), matrix(n, m, 1.5), matrix(m, m, 1.0)).prop_map(move |(b, c, e)| {
            let d = &e * e.transpose() + DMatrix::identity(m, m) * 0.2;
            let mut h = DMatrix::zeros(n + m, n + m);
            h.view_mut((0, 0), (n, n)).copy_from(b.as_matrix());
            h.view_mut((0, n), (n, m)).copy_from(&c);
            h.view_mut((n, 0), (m, n)).copy_from(&c.transpose());
            h.view_mut((n, n), (m, m)).copy_from(&d);
            (n, m, SymMatrix::symmetrize(&h).unwrap())
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contact_pullback_is_hg_plus_eps(
        (n, m) in (1usize..=3, 1usize..=3),
        seed in any::<u64>(),
        kappa2 in 0.0..5.0f64,
        eps in 1e-4..1.0f64,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-3.0..3.0));
        let gamma = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-2.0..2.0));
        let grad = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let jet = Jet2::new(rng.gen_range(-1.0..1.0), grad, SymMatrix::symmetrize(&a).unwrap()).unwrap();
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let y0 = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        let q = build_contact_quadratic(&x0, &y0, &jet, &gamma, kappa2, eps).unwrap();
        prop_assert!(q.pullback_defect().unwrap() <= 1e-12);
        // q touches the graph y = y0 + Γ(x − x0) in the same way as g + (ε/2)‖x − x0‖²
        let dx = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
        let along = q.eval(&(&x0 + &dx), &(&y0 + &gamma * &dx));
        let expected = jet.value + jet.gradient.dot(&dx) + 0.5 * jet.hessian.quad_form(&dx) + 0.5 * eps * dx.norm_squared();
        prop_assert!((along - expected).abs() <= 1e-10 * (1.0 + expected.abs()));
    }

    #[test]
    fn product_verdict_matches_schur_membership(
        (n, m, h) in split_hessian(),
        name in prop::sample::select(vec!["trace", "P", "eig-2"]),
    ) {
        prop_assume!(!(name == "eig-2" && n < 2));
        let sub = Subequation::catalog(name, n, &[]).unwrap();
        let split = BlockSplit::new(n, m);
        let schur = schur_complement(&h, &split).unwrap();
        // stay clear of the boundary, where slack decides
        let margin = |t: f64| sub.contains_hessian(&schur.add_identity(t)).unwrap();
        prop_assume!(margin(-1e-6) == margin(1e-6));
        let expected = margin(0.0);
        let jet = Jet2::from_hessian(h);
        prop_assert_eq!(sub.reduce_product(&jet, &split).unwrap(), Some(expected));
        let sampled = product_membership(
            &sub,
            &split,
            &jet,
            &ProductMembershipConfig { use_reducer: false, gamma_samples: 16, ..Default::default() },
        )
        .unwrap();
        let expected_verdict = if expected { ProductVerdict::MemberSampled } else { ProductVerdict::NotMember };
        prop_assert_eq!(sampled, expected_verdict);
    }

    #[test]
    fn catalog_members_stay_members_under_psd_shifts(
        n in 2usize..=3,
        a in sym(3, 3.0),
        p in matrix(3, 3, 1.0),
        name in prop::sample::select(vec!["trace", "P", "eig-2", "shifted-min"]),
    ) {
        let a = a.principal_block(0, n);
        let p = p.view((0, 0), (n, n)).into_owned();
        let sub = Subequation::catalog(name, n, &[]).unwrap();
        if sub.contains_hessian(&a).unwrap() {
            let shifted = a.add(&SymMatrix::symmetrize(&(&p * p.transpose())).unwrap()).unwrap();
            prop_assert!(sub.contains_hessian(&shifted).unwrap());
        }
    }

    #[test]
    fn mu_is_a_decreasing_contraction_factor(s in 1e-3..50.0f64, ds in 1e-3..5.0f64) {
        let mu = contraction_mu(s).unwrap();
        prop_assert!(mu > 0.0 && mu < 1.0);
        prop_assert!(contraction_mu(s + ds).unwrap() <= mu + 1e-15);
    }

    #[test]
    fn coupled_resolvent_is_nonexpansive(
        sigma in 0.05..5.0f64,
        a in prop::collection::vec(-4.0..4.0f64, 2),
        b in prop::collection::vec(-4.0..4.0f64, 2),
    ) {
        let f = generate_field(&FamilyConfig::CoupledQuadratic { sigma }, None, &BoxDomain::cube(2, 20.0), 0)
            .unwrap()
            .field;
        let opts = ResolventOptions::default();
        let (za, zb) = (vector(&a), vector(&b));
        let ha = resolvent_full(&f, &za, &opts).unwrap().point_vector();
        let hb = resolvent_full(&f, &zb, &opts).unwrap().point_vector();
        prop_assert!((&ha - &hb).norm() <= (&za - &zb).norm() + 1e-8);
        // fiber component at fixed base coordinate: contraction by μ(σ)
        let (zc, zd) = (vector(&[a[0], a[1]]), vector(&[a[0], b[1]]));
        let hc = resolvent_full(&f, &zc, &opts).unwrap().point_vector();
        let hd = resolvent_full(&f, &zd, &opts).unwrap().point_vector();
        let mu = contraction_mu(sigma).unwrap();
        prop_assert!((hc[1] - hd[1]).abs() <= mu * (a[1] - b[1]).abs() + 1e-8);
    }

    #[test]
    fn regularization_adds_the_fiber_quadratic(j in 1u64..1000, x in -1.0..1.0f64, y in -1.0..1.0f64) {
        let f = generate_field(&FamilyConfig::CoupledQuadratic { sigma: 0.5 }, None, &BoxDomain::cube(2, 2.0), 0)
            .unwrap()
            .field;
        let fj = regularize_j(&f, j).unwrap();
        let z = vector(&[x, y]);
        let w = 1.0 / j as f64;
        prop_assert!((fj.value(&z).unwrap() - f.value(&z).unwrap() - w * y * y).abs() <= 1e-12);
        let (c, cj) = (f.certificates(), fj.certificates());
        prop_assert!((cj.fiber_convexity.unwrap() - c.fiber_convexity.unwrap() - 2.0 * w).abs() <= 1e-12);
        prop_assert!(cj.sup_norm.unwrap() >= c.sup_norm.unwrap());
        let coarser = regularize_j(&f, j + 1).unwrap();
        prop_assert!(coarser.certificates().fiber_convexity.unwrap() <= cj.fiber_convexity.unwrap());
    }

    #[test]
    fn jets_of_quadratics_are_exact((n, m, h) in split_hessian(), seed in any::<u64>()) {
        let d = n + m;
        let hm = h.as_matrix().clone();
        let f = semiconvex::field::ScalarField::new("q", d, 0, BoxDomain::cube(d, 2.0), move |z| 0.5 * z.dot(&(&hm * z)))
            .unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let est = estimate_jet(&f, &z, &JetOptions::default()).unwrap();
        prop_assert!((est.jet.hessian.as_matrix() - h.as_matrix()).abs().max() <= 1e-6);
        prop_assert!((&est.jet.gradient - h.as_matrix() * &z).norm() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn pipeline_exception_accounting(b in 0.05..1.5f64, c in -1.0..1.0f64) {
        let family = FamilyConfig::BlockQuadratic {
            b: vec![vec![b, 0.0], vec![0.0, b]],
            c: vec![vec![c], vec![0.0]],
            d: vec![vec![1.0]],
        };
        let domain = BoxDomain::product(&BoxDomain::cube(2, 1.0), &BoxDomain::cube(1, 2.0));
        let sub = Subequation::catalog("trace", 2, &[]).unwrap();
        let f = generate_field(&family, Some(&sub), &domain, 0).unwrap().field;
        let opts = PipelineOptions::default();
        let region = admissible_base(&f, &opts).unwrap().unwrap();
        let grid = BaseGrid::uniform(&region, 4).unwrap().vectors();
        let report = verify_minimum_principle(&f, &sub, &grid, &opts).unwrap();
        for r in &report.runs {
            prop_assert_eq!(r.points, grid.len());
            prop_assert_eq!(r.stable + r.unstable + r.errors, r.points);
            prop_assert!(r.violations <= r.stable);
            prop_assert_eq!(r.exceptions, r.violations + r.unstable + r.errors);
            prop_assert!(r.contact_checked <= r.stable);
        }
        // closed-form verdict: tr(B − C D⁻¹ Cᵗ) = 2b − c²
        let member = 2.0 * b - c * c;
        if member > 0.05 {
            prop_assert_eq!(report.violations(), 0);
        } else if member < -0.05 {
            prop_assert_eq!(report.violations(), report.stable());
        }
    }
}
