//! Numerical audit of each inequality step of the convergence argument.
//!
//! Every check reports an absolute slack (`rhs − lhs`); a step holds when the
//! slack is at least `−HOLD_TOLERANCE`. Trajectory checks are evaluated both
//! per realization and on seed averages, and each entry labels which view its
//! headline numbers come from.
//!
//! The two substitutions out of the summed recursion depend on the sign of
//! `λ₂`: replacing `‖∇F‖²` by `2l(F − F*)` preserves the inequality only when
//! `λ₂ ≤ 0`, and replacing it by `β²` only when `λ₂ ≥ 0`. The auditor reports
//! what the samples show and records `sign(λ₂)` next to the verdicts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{corrected_series, original_series, BoundSeries, BoundVariant};
use crate::constants::{derive_constants, AssumptionParams, DerivedConstants, Lambda1Variant, PrivacyConfig};
use crate::error::{domain, Error, Result};
use crate::flsim::{mean_gap_per_round, Trajectory, TrajectoryRecord};

/// Slack above `-HOLD_TOLERANCE` counts as holding.
pub const HOLD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepId {
    /// PL inequality on each model.
    Eq2Pl,
    /// Per-round loss-increment bound.
    Eq3Lemma2,
    /// Increment bound with the current gap added to both sides.
    Eq4Add,
    /// `λ₂‖∇F‖² ≤ λ₂ 2l(F − F*)`.
    #[serde(rename = "eq4_to_5")]
    Eq4To5,
    /// `λ₂‖∇F‖² ≤ λ₂β²`.
    #[serde(rename = "eq4_to_6")]
    Eq4To6,
    FinalOrigBound,
    FinalCorrBound,
}

impl StepId {
    pub const ALL: [StepId; 7] = [
        StepId::Eq2Pl,
        StepId::Eq3Lemma2,
        StepId::Eq4Add,
        StepId::Eq4To5,
        StepId::Eq4To6,
        StepId::FinalOrigBound,
        StepId::FinalCorrBound,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Holds,
    Violated,
    /// Not decidable on the given data (nothing to check, or a singular bound).
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda2Sign {
    Negative,
    Zero,
    Positive,
}

impl Lambda2Sign {
    pub fn of(lambda2: f64) -> Self {
        if lambda2 < 0.0 {
            Lambda2Sign::Negative
        } else if lambda2 > 0.0 {
            Lambda2Sign::Positive
        } else {
            Lambda2Sign::Zero
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditView {
    /// Each (seed, round) pair is checked separately.
    PerRealization,
    /// Quantities are averaged over seeds before the check.
    SeedAverage,
    /// Independent (gradient norm, gap) samples.
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewSummary {
    pub view: AuditView,
    pub status: StepStatus,
    pub margin: f64,
    pub fraction: f64,
}

/// Sample attaining the smallest slack of a substitution check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub grad_norm: f64,
    pub gap: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEntry {
    pub step_id: StepId,
    pub status: StepStatus,
    /// Smallest absolute slack (`rhs − lhs`).
    pub margin: f64,
    /// Fraction of checked rounds or samples that hold.
    pub fraction: f64,
    pub detail: String,
    pub view: AuditView,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub other_view: Option<ViewSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub lambda2_sign: Lambda2Sign,
    pub entries: Vec<StepEntry>,
    pub config_fingerprint: String,
}

impl AuditReport {
    pub fn entry(&self, step: StepId) -> Option<&StepEntry> {
        self.entries.iter().find(|e| e.step_id == step)
    }
}

/// Running minimum slack and hold count.
#[derive(Debug, Clone, Copy)]
struct Tally {
    checked: usize,
    holding: usize,
    margin: f64,
    argmin: usize,
}

impl Tally {
    fn new() -> Self {
        Self { checked: 0, holding: 0, margin: f64::INFINITY, argmin: 0 }
    }

    fn push(&mut self, slack: f64) {
        if slack >= -HOLD_TOLERANCE {
            self.holding += 1;
        }
        if slack < self.margin {
            self.margin = slack;
            self.argmin = self.checked;
        }
        self.checked += 1;
    }

    fn summary(&self, view: AuditView) -> ViewSummary {
        if self.checked == 0 {
            return ViewSummary { view, status: StepStatus::Conditional, margin: 0.0, fraction: 0.0 };
        }
        let status = if self.holding == self.checked { StepStatus::Holds } else { StepStatus::Violated };
        ViewSummary { view, status, margin: self.margin, fraction: self.holding as f64 / self.checked as f64 }
    }
}

fn entry(step_id: StepId, primary: ViewSummary, other: Option<ViewSummary>, detail: String) -> StepEntry {
    StepEntry {
        step_id,
        status: primary.status,
        margin: primary.margin,
        fraction: primary.fraction,
        detail,
        view: primary.view,
        other_view: other,
        witness: None,
    }
}

/// Indices of trajectories sharing the first trajectory's length, for the
/// seed-averaged view.
fn equal_length(trajectories: &[Trajectory]) -> bool {
    trajectories.windows(2).all(|w| w[0].records.len() == w[1].records.len())
}

fn seed_mean(trajectories: &[Trajectory], round: usize, f: impl Fn(&TrajectoryRecord) -> Option<f64>) -> Option<f64> {
    let mut sum = 0.0;
    for t in trajectories {
        sum += f(&t.records[round])?;
    }
    Some(sum / trajectories.len() as f64)
}

/// `F(w̃ᵗ) − F* ≤ ‖∇F(w̃ᵗ)‖² / (2l)` at every record.
pub fn check_pl(trajectories: &[Trajectory], l: f64) -> Result<StepEntry> {
    if !(l.is_finite() && l > 0.0) {
        return Err(domain(format!("l must be > 0, got {l}")));
    }
    let mut per = Tally::new();
    for r in trajectories.iter().flat_map(|t| &t.records) {
        per.push(r.grad_norm * r.grad_norm / (2.0 * l) - r.loss_gap);
    }
    let mut avg = Tally::new();
    if !trajectories.is_empty() && equal_length(trajectories) {
        for i in 0..trajectories[0].records.len() {
            let gap = seed_mean(trajectories, i, |r| Some(r.loss_gap)).unwrap_or(0.0);
            let sq = seed_mean(trajectories, i, |r| Some(r.grad_norm * r.grad_norm)).unwrap_or(0.0);
            avg.push(sq / (2.0 * l) - gap);
        }
    }
    let primary = per.summary(AuditView::PerRealization);
    let detail = format!(
        "PL with l = {l:e} over {} records; rhs - lhs min = {:e}",
        per.checked, primary.margin
    );
    Ok(entry(StepId::Eq2Pl, primary, Some(avg.summary(AuditView::SeedAverage)), detail))
}

fn increment_rhs(d: &DerivedConstants, grad: f64, noise: f64, noise_sq: f64) -> f64 {
    d.lambda2 * grad * grad + d.lambda1 * noise * grad + d.lambda0 * noise_sq
}

/// Which side of the per-round bound is compared.
#[derive(Clone, Copy)]
enum IncrementForm {
    /// observed increment vs `λ₂‖∇F‖² + λ₁‖n‖‖∇F‖ + λ₀‖n‖²`
    Increment,
    /// next gap vs current gap plus the same right-hand side
    AddedGap,
}

fn increment_check(trajectories: &[Trajectory], d: &DerivedConstants, form: IncrementForm) -> (Tally, Tally) {
    let slack = |gap: f64, next_gap: f64, inc: f64, rhs: f64| match form {
        IncrementForm::Increment => rhs - inc,
        IncrementForm::AddedGap => gap + rhs - next_gap,
    };
    let mut per = Tally::new();
    for t in trajectories {
        for w in t.records.windows(2) {
            let (r, next) = (&w[0], &w[1]);
            let (Some(n), Some(n2), Some(inc)) = (r.noise_norm, r.noise_sq_norm, r.increment) else {
                continue;
            };
            per.push(slack(r.loss_gap, next.loss_gap, inc, increment_rhs(d, r.grad_norm, n, n2)));
        }
    }
    let mut avg = Tally::new();
    if !trajectories.is_empty() && equal_length(trajectories) {
        let len = trajectories[0].records.len();
        for i in 0..len.saturating_sub(1) {
            let means = (
                seed_mean(trajectories, i, |r| Some(r.loss_gap)),
                seed_mean(trajectories, i + 1, |r| Some(r.loss_gap)),
                seed_mean(trajectories, i, |r| r.increment),
                seed_mean(trajectories, i, |r| Some(r.grad_norm * r.grad_norm)),
                seed_mean(trajectories, i, |r| r.noise_norm.map(|n| n * r.grad_norm)),
                seed_mean(trajectories, i, |r| r.noise_sq_norm),
            );
            if let (Some(gap), Some(next), Some(inc), Some(sq), Some(cross), Some(n2)) = means {
                let rhs = d.lambda2 * sq + d.lambda1 * cross + d.lambda0 * n2;
                avg.push(slack(gap, next, inc, rhs));
            }
        }
    }
    (per, avg)
}

/// Observed increment `F(w̃ᵗ⁺¹) − F(w̃ᵗ)` against the increment bound with
/// realized noise norms.
pub fn check_lemma2(trajectories: &[Trajectory], d: &DerivedConstants) -> StepEntry {
    let (per, avg) = increment_check(trajectories, d, IncrementForm::Increment);
    let primary = per.summary(AuditView::PerRealization);
    let detail = if per.checked == 0 {
        "no round transitions to check: every trajectory has a single record".to_string()
    } else {
        format!(
            "{} of {} transitions within the increment bound; worst slack {:e}",
            per.holding, per.checked, primary.margin
        )
    };
    entry(StepId::Eq3Lemma2, primary, Some(avg.summary(AuditView::SeedAverage)), detail)
}

/// `F(w̃ᵗ⁺¹) − F* ≤ F(w̃ᵗ) − F* + increment bound`.
pub fn check_added_gap(trajectories: &[Trajectory], d: &DerivedConstants) -> StepEntry {
    let (per, avg) = increment_check(trajectories, d, IncrementForm::AddedGap);
    let primary = per.summary(AuditView::PerRealization);
    let detail = if per.checked == 0 {
        "no round transitions to check".to_string()
    } else {
        format!("gap recursion before substitution; {} of {} transitions hold", per.holding, per.checked)
    };
    entry(StepId::Eq4Add, primary, Some(avg.summary(AuditView::SeedAverage)), detail)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionAudit {
    pub eq4_to_5: StepEntry,
    pub eq4_to_6: StepEntry,
    pub lambda2_sign: Lambda2Sign,
    pub accepted: usize,
    /// Samples failing `x² ≥ 2lg ≥ 0` or `0 ≤ x ≤ β`.
    pub rejected: usize,
}

/// Checks both substitutions on `(grad_norm, gap)` samples.
///
/// Only samples with `x² ≥ 2lg ≥ 0` and `0 ≤ x ≤ β` are used; the rest are
/// counted in [`SubstitutionAudit::rejected`].
pub fn check_substitution(lambda2: f64, l: f64, beta: f64, samples: &[(f64, f64)]) -> Result<SubstitutionAudit> {
    if samples.is_empty() {
        return Err(Error::EmptySamples("substitution check needs samples".into()));
    }
    let accepted: Vec<(f64, f64)> = samples
        .iter()
        .copied()
        .filter(|&(x, g)| x.is_finite() && g.is_finite() && g >= 0.0 && (0.0..=beta).contains(&x) && x * x >= 2.0 * l * g)
        .collect();
    let rejected = samples.len() - accepted.len();
    if accepted.is_empty() {
        return Err(Error::EmptySamples(format!("all {rejected} samples violate x^2 >= 2lg or 0 <= x <= beta")));
    }
    let sign = Lambda2Sign::of(lambda2);

    let mut to5 = Tally::new();
    let mut to6 = Tally::new();
    for &(x, g) in &accepted {
        to5.push(lambda2 * (2.0 * l * g) - lambda2 * (x * x));
        to6.push(lambda2 * (beta * beta) - lambda2 * (x * x));
    }
    let witness = |t: &Tally, slack: f64| {
        let (x, g) = accepted[t.argmin];
        Witness { grad_norm: x, gap: g, slack }
    };
    let sign_note = match sign {
        Lambda2Sign::Negative => "lambda2 < 0",
        Lambda2Sign::Zero => "lambda2 = 0",
        Lambda2Sign::Positive => "lambda2 > 0",
    };

    let s5 = to5.summary(AuditView::PerSample);
    let mut eq4_to_5 = entry(
        StepId::Eq4To5,
        s5,
        None,
        format!(
            "replace |grad|^2 by 2l(F-F*): valid iff lambda2 <= 0 on PL points; {sign_note}; {} of {} samples hold",
            to5.holding, to5.checked
        ),
    );
    let s6 = to6.summary(AuditView::PerSample);
    let mut eq4_to_6 = entry(
        StepId::Eq4To6,
        s6,
        None,
        format!(
            "replace |grad|^2 by beta^2: valid iff lambda2 >= 0 when |grad| <= beta; {sign_note}; {} of {} samples hold",
            to6.holding, to6.checked
        ),
    );
    eq4_to_5.witness = Some(witness(&to5, s5.margin));
    eq4_to_6.witness = Some(witness(&to6, s6.margin));
    Ok(SubstitutionAudit { eq4_to_5, eq4_to_6, lambda2_sign: sign, accepted: accepted.len(), rejected })
}

fn check_fingerprints(trajectories: &[Trajectory], expected: &str) -> Result<()> {
    match trajectories.iter().find(|t| t.fingerprint != expected) {
        Some(t) => Err(Error::FingerprintMismatch { expected: expected.to_string(), found: t.fingerprint.clone() }),
        None => Ok(()),
    }
}

fn final_step(variant: BoundVariant) -> Option<StepId> {
    match variant {
        BoundVariant::OriginalThm2 => Some(StepId::FinalOrigBound),
        BoundVariant::CorrectedClosed => Some(StepId::FinalCorrBound),
        _ => None,
    }
}

/// Seed-mean loss gap per round against each bound series. Coverage is the
/// fraction of rounds where the bound is at least the mean gap. Only the
/// geometric and corrected closed forms are accepted.
pub fn compare_final(trajectories: &[Trajectory], bounds: &[BoundSeries], fingerprint: &str) -> Result<Vec<StepEntry>> {
    check_fingerprints(trajectories, fingerprint)?;
    let mean = mean_gap_per_round(trajectories)?;
    let mut entries = Vec::new();
    for series in bounds {
        let step = final_step(series.variant)
            .ok_or_else(|| domain(format!("{} is not a final bound", series.variant.column())))?;
        if series.values.len() != mean.len() {
            return Err(domain(format!(
                "bound series has {} rounds, trajectories have {}",
                series.values.len(),
                mean.len()
            )));
        }
        let mut avg = Tally::new();
        for (&(_, bound), gap) in series.values.iter().zip(&mean) {
            avg.push(bound - gap);
        }
        let mut per = Tally::new();
        for t in trajectories {
            for (&(_, bound), r) in series.values.iter().zip(&t.records) {
                per.push(bound - r.loss_gap);
            }
        }
        let primary = avg.summary(AuditView::SeedAverage);
        let detail = format!(
            "{}: bound >= mean gap on {} of {} rounds over {} seeds",
            series.variant.column(),
            avg.holding,
            avg.checked,
            trajectories.len()
        );
        entries.push(entry(step, primary, Some(per.summary(AuditView::PerRealization)), detail));
    }
    Ok(entries)
}

fn conditional(step_id: StepId, detail: String) -> StepEntry {
    StepEntry {
        step_id,
        status: StepStatus::Conditional,
        margin: 0.0,
        fraction: 0.0,
        detail,
        view: AuditView::PerSample,
        other_view: None,
        witness: None,
    }
}

/// Runs every check on one configuration's trajectories.
pub fn audit(
    trajectories: &[Trajectory],
    d: &DerivedConstants,
    p: &PrivacyConfig,
    l: f64,
    fingerprint: &str,
) -> Result<AuditReport> {
    if trajectories.is_empty() {
        return Err(Error::EmptySamples("no trajectories to audit".into()));
    }
    check_fingerprints(trajectories, fingerprint)?;
    if let Some(t) = trajectories.iter().find(|t| t.rounds() != p.rounds) {
        return Err(domain(format!(
            "trajectory for seed {} has {} rounds, config has T = {}",
            t.seed,
            t.rounds(),
            p.rounds
        )));
    }

    let mut entries = vec![check_pl(trajectories, l)?, check_lemma2(trajectories, d), check_added_gap(trajectories, d)];

    let samples: Vec<(f64, f64)> =
        trajectories.iter().flat_map(|t| t.records.iter().map(|r| (r.grad_norm, r.loss_gap))).collect();
    match check_substitution(d.lambda2, l, d.beta, &samples) {
        Ok(s) => {
            let note = format!("; {} trajectory points used, {} rejected", s.accepted, s.rejected);
            let (mut e5, mut e6) = (s.eq4_to_5, s.eq4_to_6);
            e5.detail.push_str(&note);
            e6.detail.push_str(&note);
            entries.push(e5);
            entries.push(e6);
        }
        Err(Error::EmptySamples(why)) => {
            entries.push(conditional(StepId::Eq4To5, why.clone()));
            entries.push(conditional(StepId::Eq4To6, why));
        }
        Err(e) => return Err(e),
    }

    match original_series(d, p) {
        Ok(series) => entries.extend(compare_final(trajectories, &[series], fingerprint)?),
        Err(Error::Singular { distance, .. }) => entries.push(conditional(
            StepId::FinalOrigBound,
            format!("geometric bound undefined: |1 - P| = {distance:e}"),
        )),
        Err(e) => return Err(e),
    }
    entries.extend(compare_final(trajectories, &[corrected_series(d, p)?], fingerprint)?);

    Ok(AuditReport { lambda2_sign: Lambda2Sign::of(d.lambda2), entries, config_fingerprint: fingerprint.to_string() })
}

/// Input for one self-test case.
#[derive(Debug, Clone, PartialEq)]
pub enum SuiteProbe {
    Pl { trajectory: Trajectory, l: f64 },
    Lemma2 { trajectory: Trajectory, constants: DerivedConstants },
    Substitution { lambda2: f64, l: f64, beta: f64, samples: Vec<(f64, f64)> },
    Final { trajectories: Vec<Trajectory>, bound: BoundSeries },
}

/// Synthetic input with a ground-truth verdict for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCase {
    pub name: String,
    pub step_id: StepId,
    pub probe: SuiteProbe,
    pub expected: StepStatus,
    /// Margin the construction guarantees, when it pins one.
    pub expected_margin: Option<f64>,
}

const SUITE_FINGERPRINT: &str = "violation-suite";

fn synthetic(records: Vec<TrajectoryRecord>) -> Trajectory {
    Trajectory {
        seed: 0,
        fingerprint: SUITE_FINGERPRINT.to_string(),
        records,
        max_upload_norms: Vec::new(),
        divergence_estimate: 0.0,
    }
}

fn static_records(points: &[(f64, f64)]) -> Vec<TrajectoryRecord> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(gap, grad))| TrajectoryRecord {
            round: i as u64,
            loss_gap: gap,
            grad_norm: grad,
            noise_norm: None,
            noise_sq_norm: None,
            increment: None,
        })
        .collect()
}

/// Trajectory whose increments sit `offset` above the increment bound
/// (negative offset: below it) at the rounds selected by `shifted`.
fn increment_trajectory<R: Rng + ?Sized>(
    d: &DerivedConstants,
    rounds: usize,
    rng: &mut R,
    offset: f64,
    shifted: impl Fn(usize) -> bool,
) -> Trajectory {
    let mut records = Vec::with_capacity(rounds + 1);
    let mut gap = 1e3;
    for t in 0..rounds {
        let grad: f64 = rng.random_range(0.0..2.0);
        let noise: f64 = rng.random_range(0.0..1.0);
        let rhs = increment_rhs(d, grad, noise, noise * noise);
        let inc = if shifted(t) { rhs + offset } else { rhs - rng.random_range(0.0..0.5) - 0.1 };
        records.push(TrajectoryRecord {
            round: t as u64,
            loss_gap: gap,
            grad_norm: grad,
            noise_norm: Some(noise),
            noise_sq_norm: Some(noise * noise),
            increment: Some(inc),
        });
        gap += inc;
    }
    records.push(TrajectoryRecord {
        round: rounds as u64,
        loss_gap: gap,
        grad_norm: 0.0,
        noise_norm: None,
        noise_sq_norm: None,
        increment: None,
    });
    synthetic(records)
}

/// PL-consistent samples `x² ≥ 2lg` with `x ≤ β`.
fn pl_samples<R: Rng + ?Sized>(l: f64, beta: f64, count: usize, rng: &mut R) -> Vec<(f64, f64)> {
    (0..count)
        .map(|_| {
            let x: f64 = rng.random_range(0.0..=beta);
            let g = rng.random_range(0.0..=1.0) * x * x / (2.0 * l);
            (x, g)
        })
        .collect()
}

pub fn make_violation_suite<R: Rng + ?Sized>(rng: &mut R) -> Vec<SuiteCase> {
    let mut cases = Vec::new();
    let mut case = |name: &str, step_id, probe, expected, expected_margin| {
        cases.push(SuiteCase { name: name.to_string(), step_id, probe, expected, expected_margin });
    };

    // PL
    case(
        "pl_zero_gradient_positive_gap",
        StepId::Eq2Pl,
        SuiteProbe::Pl { trajectory: synthetic(static_records(&[(1.0, 0.0)])), l: 1.0 },
        StepStatus::Violated,
        Some(-1.0),
    );
    let l: f64 = rng.random_range(0.5..3.0);
    let points: Vec<(f64, f64)> = (0..20)
        .map(|_| {
            let gap: f64 = rng.random_range(0.0..5.0);
            let grad = (2.0 * l * gap).sqrt() * rng.random_range(1.0..2.0) + 0.01;
            (gap, grad)
        })
        .collect();
    case(
        "pl_points_above_curve",
        StepId::Eq2Pl,
        SuiteProbe::Pl { trajectory: synthetic(static_records(&points)), l },
        StepStatus::Holds,
        None,
    );
    let mut bad = points.clone();
    let k = rng.random_range(0..bad.len());
    bad[k] = (bad[k].0 + 1.0, (2.0 * l * (bad[k].0 + 1.0) * 0.5).sqrt());
    case(
        "pl_one_point_below_curve",
        StepId::Eq2Pl,
        SuiteProbe::Pl { trajectory: synthetic(static_records(&bad)), l },
        StepStatus::Violated,
        None,
    );

    // Increment bound
    let a = AssumptionParams::new(
        rng.random_range(0.5..3.0),
        rng.random_range(0.0..1.0),
        rng.random_range(0.5..3.0),
        rng.random_range(0.1..2.0),
        rng.random_range(0.5..3.0),
    )
    .expect("sampled parameters are valid");
    let p = PrivacyConfig { epsilon: 1.0, delta: None, c: 1.0, clip: 1.0, m: 10, n_clients: 5, rounds: 10 };
    let d = derive_constants(&a, &p, 1.0, Lambda1Variant::Corrected).expect("valid constants");
    case(
        "increment_rhs_minus_0.1",
        StepId::Eq3Lemma2,
        SuiteProbe::Lemma2 { trajectory: increment_trajectory(&d, 8, rng, -0.1, |t| t == 3), constants: d },
        StepStatus::Holds,
        Some(0.1),
    );
    let bad_round = rng.random_range(0..8);
    case(
        "increment_rhs_plus_1",
        StepId::Eq3Lemma2,
        SuiteProbe::Lemma2 { trajectory: increment_trajectory(&d, 8, rng, 1.0, |t| t == bad_round), constants: d },
        StepStatus::Violated,
        Some(-1.0),
    );
    case(
        "increment_single_record",
        StepId::Eq3Lemma2,
        SuiteProbe::Lemma2 { trajectory: increment_trajectory(&d, 0, rng, 0.0, |_| false), constants: d },
        StepStatus::Conditional,
        None,
    );

    // Substitutions
    let (l, beta) = (2.0, 3.0);
    let mut samples = pl_samples(l, beta, 200, rng);
    samples.push((2.0, 0.25));
    case(
        "eq4_to_5_negative_lambda2",
        StepId::Eq4To5,
        SuiteProbe::Substitution { lambda2: -0.125, l, beta, samples: samples.clone() },
        StepStatus::Holds,
        None,
    );
    case(
        "eq4_to_5_positive_lambda2",
        StepId::Eq4To5,
        SuiteProbe::Substitution { lambda2: 0.125, l, beta, samples: samples.clone() },
        StepStatus::Violated,
        None,
    );
    case(
        "eq4_to_6_positive_lambda2",
        StepId::Eq4To6,
        SuiteProbe::Substitution { lambda2: 0.125, l, beta, samples: samples.clone() },
        StepStatus::Holds,
        None,
    );
    case(
        "eq4_to_6_negative_lambda2",
        StepId::Eq4To6,
        SuiteProbe::Substitution { lambda2: -0.125, l, beta, samples: samples.clone() },
        StepStatus::Violated,
        None,
    );
    case(
        "eq4_to_5_zero_lambda2",
        StepId::Eq4To5,
        SuiteProbe::Substitution { lambda2: 0.0, l, beta, samples: samples.clone() },
        StepStatus::Holds,
        Some(0.0),
    );
    case(
        "eq4_to_6_zero_lambda2",
        StepId::Eq4To6,
        SuiteProbe::Substitution { lambda2: 0.0, l, beta, samples },
        StepStatus::Holds,
        Some(0.0),
    );

    // Final bounds
    let rounds = 6;
    let theta: f64 = rng.random_range(1.0..4.0);
    let decreasing: Vec<Trajectory> = (0..3)
        .map(|s| {
            let mut t = synthetic(static_records(
                &(0..=rounds).map(|i| (theta * 0.7f64.powi(i) * (1.0 - 0.01 * s as f64), 1.0)).collect::<Vec<_>>(),
            ));
            t.seed = s;
            t
        })
        .collect();
    let flat = BoundSeries {
        variant: BoundVariant::CorrectedClosed,
        values: (0..=rounds as u64).map(|t| (t, theta)).collect(),
    };
    case(
        "final_flat_bound_covers_decreasing_gap",
        StepId::FinalCorrBound,
        SuiteProbe::Final { trajectories: decreasing.clone(), bound: flat },
        StepStatus::Holds,
        None,
    );
    let undershoot = BoundSeries {
        variant: BoundVariant::OriginalThm2,
        values: (0..=rounds as u64).map(|t| (t, if t == 2 { 0.0 } else { theta })).collect(),
    };
    case(
        "final_bound_dips_below_gap",
        StepId::FinalOrigBound,
        SuiteProbe::Final { trajectories: decreasing, bound: undershoot },
        StepStatus::Violated,
        None,
    );
    cases
}

/// Runs the auditor on one suite case.
pub fn evaluate_case(case: &SuiteCase) -> Result<StepEntry> {
    match &case.probe {
        SuiteProbe::Pl { trajectory, l } => check_pl(std::slice::from_ref(trajectory), *l),
        SuiteProbe::Lemma2 { trajectory, constants } => Ok(check_lemma2(std::slice::from_ref(trajectory), constants)),
        SuiteProbe::Substitution { lambda2, l, beta, samples } => {
            let s = check_substitution(*lambda2, *l, *beta, samples)?;
            match case.step_id {
                StepId::Eq4To5 => Ok(s.eq4_to_5),
                StepId::Eq4To6 => Ok(s.eq4_to_6),
                other => Err(domain(format!("{other:?} is not a substitution step"))),
            }
        }
        SuiteProbe::Final { trajectories, bound } => compare_final(trajectories, std::slice::from_ref(bound), SUITE_FINGERPRINT)?
            .into_iter()
            .next()
            .ok_or_else(|| domain("no final-bound entry produced")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTestOutcome {
    pub name: String,
    pub step_id: StepId,
    pub expected: StepStatus,
    pub observed: StepStatus,
    pub margin: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTestReport {
    pub cases: Vec<SelfTestOutcome>,
    pub accuracy: f64,
}

/// Classifies every suite case and scores the verdicts against the labels.
pub fn run_self_test<R: Rng + ?Sized>(rng: &mut R) -> Result<SelfTestReport> {
    let suite = make_violation_suite(rng);
    let mut cases = Vec::with_capacity(suite.len());
    for case in &suite {
        let e = evaluate_case(case)?;
        let margin_ok = case.expected_margin.is_none_or(|m| (e.margin - m).abs() < 1e-9);
        cases.push(SelfTestOutcome {
            name: case.name.clone(),
            step_id: case.step_id,
            expected: case.expected,
            observed: e.status,
            margin: e.margin,
            correct: e.status == case.expected && margin_ok,
        });
    }
    let accuracy = cases.iter().filter(|c| c.correct).count() as f64 / cases.len() as f64;
    Ok(SelfTestReport { cases, accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn substitution_reference_sample() {
        let s = check_substitution(-0.125, 2.0, 3.0, &[(2.0, 0.25)]).unwrap();
        assert_eq!(s.eq4_to_5.status, StepStatus::Holds);
        assert!((s.eq4_to_5.margin - 0.375).abs() < 1e-15);
        assert_eq!(s.lambda2_sign, Lambda2Sign::Negative);

        let s = check_substitution(0.125, 2.0, 3.0, &[(2.0, 0.25)]).unwrap();
        assert_eq!(s.eq4_to_5.status, StepStatus::Violated);
        assert!((s.eq4_to_5.margin + 0.375).abs() < 1e-15);
        assert_eq!(s.eq4_to_6.status, StepStatus::Holds);
        let w = s.eq4_to_5.witness.unwrap();
        assert_eq!((w.grad_norm, w.gap), (2.0, 0.25));

        let s = check_substitution(0.0, 2.0, 3.0, &[(2.0, 0.25)]).unwrap();
        assert_eq!((s.eq4_to_5.status, s.eq4_to_5.margin), (StepStatus::Holds, 0.0));
        assert_eq!((s.eq4_to_6.status, s.eq4_to_6.margin), (StepStatus::Holds, 0.0));
    }

    #[test]
    fn substitution_filters_and_errors() {
        assert!(matches!(check_substitution(0.1, 1.0, 1.0, &[]), Err(Error::EmptySamples(_))));
        // x^2 < 2lg and x > beta are both rejected.
        assert!(check_substitution(0.1, 1.0, 1.0, &[(0.1, 1.0), (5.0, 0.0)]).is_err());
        let s = check_substitution(0.1, 1.0, 1.0, &[(0.1, 1.0), (0.5, 0.1)]).unwrap();
        assert_eq!((s.accepted, s.rejected), (1, 1));
    }

    #[test]
    fn pl_violation_and_degenerate_increment() {
        let t = synthetic(static_records(&[(1.0, 0.0)]));
        let e = check_pl(std::slice::from_ref(&t), 1.0).unwrap();
        assert_eq!(e.status, StepStatus::Violated);
        let e = check_lemma2(std::slice::from_ref(&t), &DerivedConstants {
            lambda0: 1.0,
            lambda1: 1.0,
            lambda2: -1.0,
            p: 0.0,
            delta_s: 1.0,
            sigma_agg: 1.0,
            k0_orig: None,
            k1_orig: None,
            k0_corr: 0.0,
            k1_corr: 0.0,
            k2_corr: 0.0,
            theta: 0.0,
            beta: 1.0,
        });
        assert_eq!(e.status, StepStatus::Conditional);
        assert!(e.detail.contains("single record"));
        assert!(check_pl(&[t], 0.0).is_err());
    }

    #[test]
    fn self_test_is_perfect() {
        for seed in 0..20 {
            let report = run_self_test(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let wrong: Vec<_> = report.cases.iter().filter(|c| !c.correct).collect();
            assert!(wrong.is_empty(), "seed {seed}: {wrong:?}");
            assert_eq!(report.accuracy, 1.0);
        }
    }

    #[test]
    fn compare_final_rejects_foreign_fingerprint() {
        let t = synthetic(static_records(&[(1.0, 1.0), (0.5, 1.0)]));
        let series = BoundSeries { variant: BoundVariant::CorrectedClosed, values: vec![(0, 1.0), (1, 1.0)] };
        assert!(matches!(compare_final(std::slice::from_ref(&t), std::slice::from_ref(&series), "other"), Err(Error::FingerprintMismatch { .. })));
        let e = compare_final(&[t], &[series], SUITE_FINGERPRINT).unwrap();
        assert_eq!(e[0].fraction, 1.0);
        assert_eq!(e[0].view, AuditView::SeedAverage);
    }
}
