use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nbafl_core::audit::{audit, check_pl, StepId, StepStatus};
use nbafl_core::constants::{derive_constants, DerivedConstants, Lambda1Variant, PrivacyConfig};
use nbafl_core::flsim::{
    calibrate_clip_radius, make_quadratic, run_seeds, sphere_point, Problem, TrainOptions, Trajectory,
};
use nbafl_core::noise::{make_noise_model, NoiseKind};

struct Run {
    problem: Problem,
    privacy: PrivacyConfig,
    constants: DerivedConstants,
    trajectories: Vec<Trajectory>,
}

fn run(curvature: (f64, f64), c: f64, b: f64, seeds: u64) -> Run {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let problem = make_quadratic(5, 4, 1.0, curvature.0, curvature.1, &mut rng).unwrap();
    let init = sphere_point(5, 2.0, &mut rng);
    let problem = problem.with_initial_model(init).unwrap();
    let opts = TrainOptions::for_problem(&problem);
    let clip = calibrate_clip_radius(&problem, 15, &opts, 1.5).unwrap();
    let privacy = PrivacyConfig { epsilon: 5.0, delta: None, c, clip, m: 50, n_clients: 4, rounds: 15 };
    let a = problem.certified.assumptions(b, 2.0, clip).unwrap();
    let theta = problem.loss_gap(&problem.initial_model);
    let constants = derive_constants(&a, &privacy, theta, Lambda1Variant::Corrected).unwrap();
    let noise = make_noise_model(NoiseKind::AggregateMatched, &constants, &privacy, 5).unwrap();
    let seeds: Vec<u64> = (0..seeds).collect();
    let trajectories = run_seeds(&problem, &privacy, &noise, &opts, &seeds, "runs").unwrap();
    Run { problem, privacy, constants, trajectories }
}

#[test]
fn report_is_complete_and_well_formed() {
    let r = run((0.5, 2.0), 1.0, 0.5, 20);
    let report = audit(&r.trajectories, &r.constants, &r.privacy, r.problem.certified.l, "runs").unwrap();
    assert_eq!(report.entries.len(), StepId::ALL.len());
    for step in StepId::ALL {
        let e = report.entry(step).unwrap_or_else(|| panic!("{step:?} missing"));
        assert!(e.margin.is_finite(), "{step:?} margin {}", e.margin);
        assert!((0.0..=1.0).contains(&e.fraction), "{step:?} fraction {}", e.fraction);
    }
    assert_eq!(report.entry(StepId::Eq2Pl).unwrap().status, StepStatus::Holds);
    for t in &r.trajectories {
        assert!(t.records.iter().all(|rec| rec.loss_gap >= 0.0));
    }
}

#[test]
fn repeated_audits_agree_bitwise() {
    let r = run((0.5, 2.0), 1.0, 0.5, 5);
    let a = audit(&r.trajectories, &r.constants, &r.privacy, r.problem.certified.l, "runs").unwrap();
    let b = audit(&r.trajectories, &r.constants, &r.privacy, r.problem.certified.l, "runs").unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn pl_margins_track_curvature() {
    let iso = run((1.5, 1.5), 1.0, 0.0, 5);
    let tight = check_pl(&iso.trajectories, 1.5).unwrap();
    assert_eq!(tight.status, StepStatus::Holds);
    assert!(tight.margin.abs() < 1e-9, "isotropic margin {}", tight.margin);

    let aniso = run((0.5, 2.0), 1.0, 0.0, 5);
    let loose = check_pl(&aniso.trajectories, 0.25).unwrap();
    assert_eq!(loose.status, StepStatus::Holds);
    assert!(loose.margin > 0.0);
    let wrong = check_pl(&aniso.trajectories, 20.0).unwrap();
    assert_eq!(wrong.status, StepStatus::Violated);
}

#[test]
fn noiseless_run_checks_are_evaluable() {
    let r = run((0.5, 2.0), 0.0, 0.5, 3);
    let b = r.trajectories.iter().map(|t| t.divergence_estimate).fold(0.0, f64::max);
    let a = r.problem.certified.assumptions(b, 2.0, r.privacy.clip).unwrap();
    let d = derive_constants(&a, &r.privacy, r.constants.theta, Lambda1Variant::Corrected).unwrap();
    let report = audit(&r.trajectories, &d, &r.privacy, r.problem.certified.l, "runs").unwrap();
    let lemma = report.entry(StepId::Eq3Lemma2).unwrap();
    assert!((0.0..=1.0).contains(&lemma.fraction));
    assert!(lemma.detail.contains("transitions"));
}

#[test]
fn negative_lambda2_favours_pl_substitution() {
    let r = run((0.5, 2.0), 1.0, 0.0, 5);
    assert!(r.constants.lambda2 < 0.0);
    let report = audit(&r.trajectories, &r.constants, &r.privacy, r.problem.certified.l, "runs").unwrap();
    assert_eq!(report.entry(StepId::Eq4To5).unwrap().status, StepStatus::Holds);
    assert_eq!(serde_json::to_value(report.lambda2_sign).unwrap(), "negative");
}
