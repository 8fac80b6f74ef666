//! One function per subcommand: run the configured experiment and return the
//! summary, the assertion verdicts and the per-point table.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::argmin::{
    calmness_scan, verify_functional_equation, ArgminOptions, CalmnessOptions, FunctionalOptions,
    ProbeOptions,
};
use crate::error::{Error, Result};
use crate::field::{BoxDomain, Certificates, ScalarField};
use crate::jets::{estimate_jet, BlockSplit, JetOptions};
use crate::linalg::SymMatrix;
use crate::prox::{contraction_mu, resolvent_full, verify_nonexpansive, NonexpansiveConfig, ResolventOptions};
use crate::subequations::{check_positivity, product_membership, ProductMembershipConfig, ProductVerdict};
use crate::supconv::{
    localization_radius, partial_sup_convolve, verify_fiber_semiconcavity, verify_supconv_properties, SupConvOptions,
};

use super::config::ExperimentConfig;
use super::families::{generate_field, schur_complement, FamilyConfig};
use super::pipeline::verify_minimum_principle;
use super::report::{indexed, num, nums, nums_padded, opt_num, AssertionRecord, PointTable};

/// Contact quadratics are pure algebra; their pullback identity is exact up to rounding.
pub const PULLBACK_TOL: f64 = 1e-12;

pub struct Outcome {
    pub summary: Value,
    pub assertions: Vec<AssertionRecord>,
    pub table: PointTable,
}

fn to_value(v: impl Serialize) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

pub fn run_prox(cfg: &ExperimentConfig) -> Result<Outcome> {
    let p = &cfg.prox;
    let nonexp = |sigma_label: Option<f64>, f: &ScalarField| -> Result<(Value, AssertionRecord, Vec<String>)> {
        let rcfg = NonexpansiveConfig {
            pairs: p.pairs,
            seed: cfg.seed,
            tol: p.tol,
            radius: p.radius,
            test_fiber: f.fiber_dim() > 0 && f.certificates().sigma().is_some(),
            resolvent: ResolventOptions::with_tol(p.resolvent_tol),
        };
        let r = verify_nonexpansive(f, &rcfg)?;
        let sigma = sigma_label.or(f.certificates().sigma());
        let name = match sigma {
            Some(s) => format!("nonexpansive[σ={s}]"),
            None => "nonexpansive".to_string(),
        };
        let expected = match r.mu {
            Some(mu) => format!("full ≤ 1 + {0}, fiber ≤ μ + {0} = {1}", p.tol, mu + p.tol),
            None => format!("full ≤ 1 + {}", p.tol),
        };
        let assertion = AssertionRecord::new(
            name,
            r.passed,
            json!({"worst_full_ratio": r.worst_full_ratio, "worst_fiber_ratio": r.worst_fiber_ratio}),
            expected,
        );
        let row = vec![
            f.name().to_string(),
            opt_num(sigma),
            opt_num(r.mu),
            num(r.worst_full_ratio),
            opt_num(r.worst_fiber_ratio),
            r.passed.to_string(),
        ];
        let mut summary = to_value(&r);
        summary["sigma"] = to_value(sigma);
        summary["field"] = Value::String(f.name().to_string());
        Ok((summary, assertion, row))
    };

    let mut table = PointTable::new(
        ["field", "sigma", "mu", "worst_full_ratio", "worst_fiber_ratio", "passed"]
            .map(String::from)
            .to_vec(),
    );
    let mut sweeps = Vec::new();
    let mut assertions = Vec::new();
    if p.sigmas.is_empty() {
        let f = cfg.field()?.field;
        let (s, a, row) = nonexp(None, &f)?;
        sweeps.push(s);
        assertions.push(a);
        table.push(row);
    } else {
        for &sigma in &p.sigmas {
            let dom = BoxDomain::cube(2, 2.0 * p.radius);
            let f = generate_field(&FamilyConfig::CoupledQuadratic { sigma }, None, &dom, cfg.seed)?.field;
            let (s, a, row) = nonexp(Some(sigma), &f)?;
            sweeps.push(s);
            assertions.push(a);
            table.push(row);
        }
    }

    let mut evaluations = Vec::new();
    if !p.points.is_empty() {
        let f = cfg.field()?.field;
        for zeta in &p.points {
            let z = DVector::from_column_slice(zeta);
            let r = resolvent_full(&f, &z, &ResolventOptions::with_tol(p.resolvent_tol))?;
            evaluations.push(json!({"zeta": zeta, "h": r.point, "residual": r.residual}));
        }
    }
    let mus: Vec<Value> = p
        .sigmas
        .iter()
        .map(|s| json!({"sigma": s, "mu": contraction_mu(*s).ok()}))
        .collect();
    Ok(Outcome {
        summary: json!({"sweeps": sweeps, "mu": mus, "resolvents": evaluations}),
        assertions,
        table,
    })
}

pub fn run_argmin(cfg: &ExperimentConfig) -> Result<Outcome> {
    let generated = cfg.field()?;
    let f = &generated.field;
    let (n, m) = cfg.dims()?;
    let base = f.base_domain();
    let probe = ProbeOptions::default();
    // the subdifferential probe samples a ball around each grid point
    let region = base
        .shrink(probe.radius + probe.step)
        .ok_or_else(|| Error::Config("base box too small for the subdifferential probe".into()))?;
    let grid = cfg.base_grid(&region, &region)?;
    let points = grid.vectors();
    let argmin = ArgminOptions::with_tol(cfg.argmin.tol);
    let copts = CalmnessOptions {
        flag_factor: cfg.argmin.flag_factor,
        argmin: argmin.clone(),
        ..CalmnessOptions::for_grid(grid.step)
    };
    let calm = calmness_scan(f, &points, &copts)?;

    // the base resolvent inside J leaves the base box, so g must be defined on
    // all of ℝⁿ: only families with a constant Hessian qualify
    let marginal = match &generated.hessian {
        Some(h) if cfg.argmin.functional && f.certificates().is_convex() && m > 0 => {
            Some(closed_form_marginal(&schur_complement(h, &BlockSplit::new(n, m))?)?)
        }
        _ => None,
    };
    let functional = if let Some(g) = &marginal {
        Some(verify_functional_equation(
            f,
            g,
            &points,
            cfg.argmin.functional_tol,
            &argmin,
            &probe,
            &FunctionalOptions::default(),
        )?)
    } else {
        None
    };

    let mut assertions = Vec::new();
    if let Some(fr) = &functional {
        assertions.push(AssertionRecord::new(
            "functional_equation",
            fr.passed,
            fr.max_residual,
            format!("max ‖J‖ ≤ {}", fr.tol),
        ));
    }
    if let Some(max) = cfg.assertions.max_flagged_fraction {
        assertions.push(AssertionRecord::new(
            "max_flagged_fraction",
            calm.flagged_fraction <= max,
            calm.flagged_fraction,
            format!("≤ {max}"),
        ));
    }
    if let Some(min) = cfg.assertions.min_flagged_fraction {
        assertions.push(AssertionRecord::new(
            "min_flagged_fraction",
            calm.flagged_fraction >= min,
            calm.flagged_fraction,
            format!("≥ {min}"),
        ));
    }

    let mut header = indexed("x", n);
    header.extend(indexed("gamma", m));
    header.extend(["calmness", "secant_disagreement", "nondifferentiable", "functional_residual"].map(String::from));
    let mut table = PointTable::new(header);
    for (i, p) in calm.points.iter().enumerate() {
        let mut row = nums(&p.x);
        row.extend(nums(&p.gamma));
        row.push(num(p.calmness));
        row.push(num(p.secant_disagreement));
        row.push(p.nondifferentiable.to_string());
        row.push(opt_num(functional.as_ref().map(|fr| fr.points[i].residual)));
        table.push(row);
    }
    let max_calmness = calm.points.iter().map(|p| p.calmness).fold(0.0, f64::max);
    Ok(Outcome {
        summary: json!({
            "points": calm.points.len(),
            "grid_step": grid.step,
            "flagged_fraction": calm.flagged_fraction,
            "flag_threshold": calm.threshold,
            "max_calmness": max_calmness,
            "functional_max_residual": functional.as_ref().map(|fr| fr.max_residual),
            "functional_checked": functional.is_some(),
        }),
        assertions,
        table,
    })
}

/// `½ xᵗSx` on `ℝⁿ`, certified convex.
fn closed_form_marginal(s: &SymMatrix) -> Result<ScalarField> {
    let n = s.dim();
    let (sv, sg) = (s.as_matrix().clone(), s.as_matrix().clone());
    Ok(
        ScalarField::new("marginal", n, 0, BoxDomain::cube(n, 1e6), move |x| 0.5 * x.dot(&(&sv * x)))?
            .with_gradient(move |x| &sg * x)
            .with_certificates(Certificates {
                semiconvexity: Some(0.0),
                fiber_convexity: Some(0.0),
                ..Default::default()
            }),
    )
}

pub fn run_supconv(cfg: &ExperimentConfig) -> Result<Outcome> {
    let s = &cfg.supconv;
    let f = cfg.field()?.field;
    let sup = f
        .certificates()
        .sup_norm
        .ok_or_else(|| Error::MissingCertificate("sup-convolution needs a sup-norm certificate".into()))?;
    let opts = SupConvOptions {
        tol: (s.tol * 1e-2).max(1e-12),
        strict_localization: s.strict_localization,
        ..Default::default()
    };
    let delta_max = localization_radius(s.epsilons[0], sup);
    let base = f.base_domain();
    let base_region = base.shrink(delta_max).unwrap_or(base);
    let region = BoxDomain::product(&base_region, &f.fiber_domain());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let points: Vec<DVector<f64>> = (0..s.points).map(|_| region.sample(&mut rng)).collect();
    let props = verify_supconv_properties(&f, &s.epsilons, &points, s.segments, cfg.seed, s.tol, &opts)?;

    let mut assertions = vec![AssertionRecord::new(
        "supconv_properties",
        props.passed,
        json!({
            "worst_order_violation": props.worst_order_violation,
            "worst_convexity": props.worst_convexity,
            "approximation_monotone": props.approximation_monotone,
            "worst_localization": props.worst_localization,
        }),
        format!("order and convexity within {}, errors monotone, ‖τ‖ < δ", s.tol),
    )];
    let mut table = PointTable::new(
        ["epsilon", "delta", "approximation_error", "fiber_worst_second_difference", "fiber_passed"]
            .map(String::from)
            .to_vec(),
    );
    for (k, &eps) in s.epsilons.iter().enumerate() {
        // f^ε inherits the joint constant κ in y only while εκ < 1; otherwise nothing is claimed
        let sc = partial_sup_convolve(&f, eps, &opts)?;
        let fiber = match sc.field().certificates().fiber_semiconcavity {
            Some(k2) => Some(verify_fiber_semiconcavity(sc.field(), k2, &points, s.fiber_step, cfg.seed, s.tol)?),
            None => None,
        };
        if let Some(fr) = &fiber {
            assertions.push(AssertionRecord::new(
                format!("fiber_semiconcavity[ε={eps}]"),
                fr.passed,
                fr.worst_second_difference,
                format!("≤ {}", s.tol),
            ));
        }
        table.push(vec![
            num(eps),
            num(localization_radius(eps, sup)),
            opt_num(props.approximation_errors.get(k).copied()),
            opt_num(fiber.as_ref().map(|fr| fr.worst_second_difference)),
            fiber.as_ref().map(|fr| fr.passed.to_string()).unwrap_or_default(),
        ]);
    }
    Ok(Outcome {
        summary: json!({"sup_norm": sup, "points": points.len(), "properties": props}),
        assertions,
        table,
    })
}

pub fn run_check_sub(cfg: &ExperimentConfig) -> Result<Outcome> {
    let c = &cfg.check_sub;
    let sub = cfg.require_subequation()?;
    let f = cfg.field()?.field;
    let (n, m) = cfg.dims()?;
    let split = BlockSplit::new(n, m);
    let jet_opts = JetOptions {
        step: c.jet_step,
        ..Default::default()
    };
    let region = f
        .domain()
        .shrink(2.0 * c.jet_step)
        .ok_or_else(|| Error::Config("domain too small for the jet stencil".into()))?;
    let mcfg = ProductMembershipConfig {
        gamma_samples: c.gamma_samples,
        gamma_radius: c.gamma_radius,
        seed: cfg.seed,
        use_reducer: c.use_reducer,
    };
    let expect_member = cfg.assertions.expect_member.unwrap_or(true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut header = indexed("z", n + m);
    header.extend(hessian_header(n + m));
    header.extend(["verdict", "unstable"].map(String::from));
    let mut table = PointTable::new(header);
    let (mut stable, mut mismatches, mut sampled) = (0usize, 0usize, 0usize);
    for _ in 0..c.samples {
        let z = region.sample(&mut rng);
        let est = estimate_jet(&f, &z, &jet_opts)?;
        let verdict = product_membership(&sub, &split, &est.jet, &mcfg)?;
        if !est.unstable {
            stable += 1;
            let member = verdict != ProductVerdict::NotMember;
            sampled += (verdict == ProductVerdict::MemberSampled) as usize;
            mismatches += (member != expect_member) as usize;
        }
        let mut row = nums(z.as_slice());
        row.extend(nums(&est.jet.hessian.upper_triangle()));
        row.push(verdict_name(verdict).to_string());
        row.push(est.unstable.to_string());
        table.push(row);
    }
    let positivity = check_positivity(&sub, c.positivity_trials, cfg.seed)?;
    let assertions = vec![
        AssertionRecord::new("positivity", positivity.passed, positivity.trials, "no member jet leaves F when P ⪰ 0 is added"),
        AssertionRecord::new(
            "jet_membership",
            mismatches == 0 && stable > 0,
            json!({"stable": stable, "mismatches": mismatches}),
            if expect_member { "every stable jet in F#P" } else { "no stable jet in F#P" },
        ),
    ];
    Ok(Outcome {
        summary: json!({
            "subequation": sub.name(),
            "flags": sub.flags(),
            "samples": c.samples,
            "stable": stable,
            "mismatches": mismatches,
            "member_sampled": sampled,
            "positivity_trials": positivity.trials,
        }),
        assertions,
        table,
    })
}

fn verdict_name(v: ProductVerdict) -> &'static str {
    match v {
        ProductVerdict::Member => "member",
        ProductVerdict::NotMember => "not_member",
        ProductVerdict::MemberSampled => "member_sampled",
    }
}

fn hessian_header(d: usize) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..d {
        for j in i..d {
            out.push(format!("h_{i}{j}"));
        }
    }
    out
}

pub fn run_minprin(cfg: &ExperimentConfig) -> Result<Outcome> {
    let sub = cfg.require_subequation()?;
    let generated = cfg.field()?;
    let grid = cfg.pipeline_grid(&generated)?;
    let opts = cfg.pipeline_options();
    let report = verify_minimum_principle(&generated.field, &sub, &grid.vectors(), &opts)?;
    let (n, m) = cfg.dims()?;

    let total: usize = report.runs.iter().map(|r| r.points).sum();
    let errors: usize = report.runs.iter().map(|r| r.errors).sum();
    let rate = report.violation_rate();
    let a = &cfg.assertions;
    let max_rate = a.max_violation_rate.unwrap_or(0.0);
    let mut assertions = vec![
        AssertionRecord::new("stable_points", report.stable() > 0, report.stable(), "> 0"),
        AssertionRecord::new("max_violation_rate", rate <= max_rate, rate, format!("≤ {max_rate}")),
    ];
    if let Some(min) = a.min_violation_rate {
        assertions.push(AssertionRecord::new("min_violation_rate", rate >= min, rate, format!("≥ {min}")));
    }
    if let Some(max) = a.max_error_rate {
        let er = if total == 0 { 0.0 } else { errors as f64 / total as f64 };
        assertions.push(AssertionRecord::new("max_error_rate", er <= max, er, format!("≤ {max}")));
    }
    if opts.check_contact {
        assertions.push(AssertionRecord::new(
            "contact_domination",
            report.contact_failures() == 0,
            report.contact_failures(),
            "q ≥ f_ε at every checked stable point",
        ));
        let defect = report.max_pullback_defect();
        assertions.push(AssertionRecord::new(
            "pullback_identity",
            defect.is_none_or(|d| d <= PULLBACK_TOL),
            defect,
            format!("≤ {PULLBACK_TOL:e}"),
        ));
    }
    for (name, check) in [
        ("epsilon_monotonicity", &report.epsilon_monotonicity),
        ("j_monotonicity", &report.j_monotonicity),
    ] {
        if check.comparisons > 0 {
            assertions.push(AssertionRecord::new(name, check.passed, check.worst_increase, "g nonincreasing"));
        }
    }

    let mut header: Vec<String> = ["run", "j", "epsilon", "index"].map(String::from).to_vec();
    header.extend(indexed("x", n));
    header.extend(indexed("gamma", m));
    header.push("g".into());
    header.extend(indexed("grad", n));
    header.extend(hessian_header(n));
    header.extend((0..m).flat_map(|r| (0..n).map(move |c| format!("slope_{r}{c}"))));
    header.extend(
        [
            "verdict",
            "unstable",
            "jet_disagreement",
            "slope_disagreement",
            "contact_excess",
            "pullback_defect",
            "error",
        ]
        .map(String::from),
    );
    let mut table = PointTable::new(header);
    for p in &report.points {
        let mut row = vec![p.run.to_string(), p.j.to_string(), num(p.epsilon), p.index.to_string()];
        row.extend(nums(&p.x));
        row.extend(nums_padded(&p.gamma, m));
        row.push(opt_num(p.g));
        row.extend(nums_padded(&p.gradient, n));
        row.extend(nums_padded(&p.hessian, n * (n + 1) / 2));
        row.extend(nums_padded(&p.slope, n * m));
        row.push(p.verdict.as_str().to_string());
        row.push(p.unstable.to_string());
        row.push(num(p.jet_disagreement));
        row.push(num(p.slope_disagreement));
        row.push(opt_num(p.contact_excess));
        row.push(opt_num(p.pullback_defect));
        row.push(p.error.clone().unwrap_or_default());
        table.push(row);
    }
    Ok(Outcome {
        summary: json!({
            "subequation": report.subequation,
            "field": report.field,
            "reducer_margin": generated.reducer_margin,
            "certificates": generated.field.certificates(),
            "grid_points": grid.len(),
            "violations": report.violations(),
            "stable": report.stable(),
            "violation_rate": rate,
            "runs": report.runs,
            "epsilon_monotonicity": report.epsilon_monotonicity,
            "j_monotonicity": report.j_monotonicity,
        }),
        assertions,
        table,
    })
}
