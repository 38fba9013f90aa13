//! Convergence-bound evaluators.
//!
//! Two closed forms are provided: the geometric bound
//! `P^t Θ + (k1 t/ε + k0 t²/ε²)(1 − P^t)` and the corrected polynomial bound
//! `Θ + k2 t + k1 t²/ε + k0 t³/ε²`. The corrected form is also reachable by
//! unrolling a per-round recursion, either gap-by-gap or by summing the
//! per-round loss increments; [`unroll`] exposes both routes so they can be
//! checked against each other.
//!
//! The noise moments entering the recursions are frozen per horizon: a run of
//! `T` rounds uses the moments computed for `T` at every round.

use serde::{Deserialize, Serialize};

use crate::constants::{DerivedConstants, PrivacyConfig, SINGULARITY_TOLERANCE};
use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundVariant {
    OriginalThm2,
    CorrectedClosed,
    CorrectedUnrolledEq6,
    CorrectedUnrolledEq3,
    /// Recursion obtained by substituting the PL inequality in the wrong
    /// direction. Not a valid upper bound in general.
    ErroneousEq5Unrolled,
}

impl BoundVariant {
    pub const ALL: [BoundVariant; 5] = [
        BoundVariant::OriginalThm2,
        BoundVariant::CorrectedClosed,
        BoundVariant::CorrectedUnrolledEq6,
        BoundVariant::CorrectedUnrolledEq3,
        BoundVariant::ErroneousEq5Unrolled,
    ];

    /// Column name used in `bounds.csv`.
    pub fn column(self) -> &'static str {
        match self {
            BoundVariant::OriginalThm2 => "original_thm2",
            BoundVariant::CorrectedClosed => "corrected_closed",
            BoundVariant::CorrectedUnrolledEq6 => "corrected_unrolled_eq6",
            BoundVariant::CorrectedUnrolledEq3 => "corrected_unrolled_eq3",
            BoundVariant::ErroneousEq5Unrolled => "erroneous_eq5_unrolled",
        }
    }

    pub fn is_valid_bound(self) -> bool {
        self != BoundVariant::ErroneousEq5Unrolled
    }
}

/// Bound values for rounds `0..=T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundSeries {
    pub variant: BoundVariant,
    pub values: Vec<(u64, f64)>,
}

impl BoundSeries {
    fn from_values(variant: BoundVariant, values: Vec<f64>) -> Self {
        Self {
            variant,
            values: values.into_iter().enumerate().map(|(t, v)| (t as u64, v)).collect(),
        }
    }

    pub fn final_value(&self) -> f64 {
        self.values.last().map(|&(_, v)| v).unwrap_or(f64::NAN)
    }

    pub fn value_at(&self, t: u64) -> Option<f64> {
        self.values.get(t as usize).map(|&(_, v)| v)
    }
}

/// First and second moments of the aggregate noise norm, as modelled by the
/// closed-form bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseMoments {
    pub mean_norm: f64,
    pub mean_sq_norm: f64,
}

impl NoiseMoments {
    pub const ZERO: NoiseMoments = NoiseMoments { mean_norm: 0.0, mean_sq_norm: 0.0 };
}

/// Noise moments for the configured horizon `p.rounds`.
pub fn paper_noise_moments(d: &DerivedConstants, p: &PrivacyConfig) -> NoiseMoments {
    noise_moments_for_horizon(d, p, p.rounds)
}

/// `E‖n‖ = Δs T c / ε · sqrt(2N/π)` and `E‖n‖² = Δs² T² c² N / ε²` with `T = rounds`.
pub fn noise_moments_for_horizon(d: &DerivedConstants, p: &PrivacyConfig, rounds: u64) -> NoiseMoments {
    let scale = d.delta_s * rounds as f64 * p.c / p.epsilon;
    let n = p.n_clients as f64;
    NoiseMoments {
        mean_norm: scale * (2.0 * n / std::f64::consts::PI).sqrt(),
        mean_sq_norm: scale * scale * n,
    }
}

fn check_round(t: u64, p: &PrivacyConfig) -> Result<()> {
    if t > p.rounds {
        return Err(Error::RoundOutOfRange { round: t, horizon: p.rounds });
    }
    Ok(())
}

/// Geometric bound after `t` rounds.
pub fn original_bound(t: u64, d: &DerivedConstants, p: &PrivacyConfig) -> Result<f64> {
    check_round(t, p)?;
    let distance = (1.0 - d.p).abs();
    let singular = Error::Singular { distance, tolerance: SINGULARITY_TOLERANCE };
    if distance < SINGULARITY_TOLERANCE {
        return Err(singular);
    }
    let (Some(k0), Some(k1)) = (d.k0_orig, d.k1_orig) else {
        return Err(singular);
    };
    let pt = powu(d.p, t);
    let tf = t as f64;
    let eps = p.epsilon;
    Ok(pt * d.theta + (k1 * tf / eps + k0 * tf * tf / (eps * eps)) * (1.0 - pt))
}

/// Corrected polynomial bound after `t` rounds.
pub fn corrected_bound(t: u64, d: &DerivedConstants, p: &PrivacyConfig) -> Result<f64> {
    check_round(t, p)?;
    let tf = t as f64;
    let eps = p.epsilon;
    Ok(d.theta + d.k2_corr * tf + d.k1_corr * tf * tf / eps + d.k0_corr * tf * tf * tf / (eps * eps))
}

/// Expected per-round loss increment bound `λ₂β² + λ₁β E‖n‖ + λ₀ E‖n‖²`.
pub fn round_increment(d: &DerivedConstants, nm: &NoiseMoments) -> f64 {
    d.lambda2 * d.beta * d.beta + d.lambda1 * d.beta * nm.mean_norm + d.lambda0 * nm.mean_sq_norm
}

/// One step of the corrected recursion (no PL substitution).
pub fn one_round_step(gap: f64, d: &DerivedConstants, nm: &NoiseMoments) -> f64 {
    gap + round_increment(d, nm)
}

/// One step of the recursion that contracts the gap by `P`. Kept for
/// contrast only; its output is not an upper bound in general.
pub fn erroneous_step(gap: f64, d: &DerivedConstants, nm: &NoiseMoments) -> f64 {
    d.p * gap + d.lambda1 * d.beta * nm.mean_norm + d.lambda0 * nm.mean_sq_norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnrollRoute {
    /// Iterate [`one_round_step`] from `Θ`.
    #[serde(rename = "via_eq6")]
    GapRecursion,
    /// Sum `T` identical increments, then add `Θ`.
    #[serde(rename = "via_eq3")]
    IncrementSum,
}

pub fn unroll(route: UnrollRoute, rounds: u64, d: &DerivedConstants, p: &PrivacyConfig) -> Result<BoundSeries> {
    if rounds == 0 {
        return Err(domain("unroll needs at least one round"));
    }
    let nm = noise_moments_for_horizon(d, p, rounds);
    let series = match route {
        UnrollRoute::GapRecursion => {
            let mut values = Vec::with_capacity(rounds as usize + 1);
            let mut gap = d.theta;
            values.push(gap);
            for _ in 0..rounds {
                gap = one_round_step(gap, d, &nm);
                values.push(gap);
            }
            BoundSeries::from_values(BoundVariant::CorrectedUnrolledEq6, values)
        }
        UnrollRoute::IncrementSum => {
            let inc = round_increment(d, &nm);
            let values = (0..=rounds).map(|t| t as f64 * inc + d.theta).collect();
            BoundSeries::from_values(BoundVariant::CorrectedUnrolledEq3, values)
        }
    };
    Ok(series)
}

/// Iterates [`erroneous_step`] from `Θ` with moments frozen at `rounds`.
pub fn erroneous_unroll(rounds: u64, d: &DerivedConstants, p: &PrivacyConfig) -> BoundSeries {
    let nm = noise_moments_for_horizon(d, p, rounds);
    let mut values = Vec::with_capacity(rounds as usize + 1);
    let mut gap = d.theta;
    values.push(gap);
    for _ in 0..rounds {
        gap = erroneous_step(gap, d, &nm);
        values.push(gap);
    }
    BoundSeries::from_values(BoundVariant::ErroneousEq5Unrolled, values)
}

/// `original_bound(t)` for `t = 0..=T`.
pub fn original_series(d: &DerivedConstants, p: &PrivacyConfig) -> Result<BoundSeries> {
    let values = (0..=p.rounds).map(|t| original_bound(t, d, p)).collect::<Result<Vec<_>>>()?;
    Ok(BoundSeries::from_values(BoundVariant::OriginalThm2, values))
}

/// `corrected_bound(t)` for `t = 0..=T`.
pub fn corrected_series(d: &DerivedConstants, p: &PrivacyConfig) -> Result<BoundSeries> {
    let values = (0..=p.rounds).map(|t| corrected_bound(t, d, p)).collect::<Result<Vec<_>>>()?;
    Ok(BoundSeries::from_values(BoundVariant::CorrectedClosed, values))
}

/// One row of the bound table: every variant evaluated with horizon `t`.
///
/// The unrolled columns use moments frozen at `t`, so each of them equals the
/// closed form at `t` up to rounding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundRow {
    pub t: u64,
    pub original_thm2: f64,
    pub corrected_closed: f64,
    pub corrected_unrolled_eq6: f64,
    pub corrected_unrolled_eq3: f64,
    pub erroneous_eq5_unrolled: f64,
}

impl BoundRow {
    pub fn get(&self, variant: BoundVariant) -> f64 {
        match variant {
            BoundVariant::OriginalThm2 => self.original_thm2,
            BoundVariant::CorrectedClosed => self.corrected_closed,
            BoundVariant::CorrectedUnrolledEq6 => self.corrected_unrolled_eq6,
            BoundVariant::CorrectedUnrolledEq3 => self.corrected_unrolled_eq3,
            BoundVariant::ErroneousEq5Unrolled => self.erroneous_eq5_unrolled,
        }
    }
}

/// Every variant evaluated with horizon `t`: the privacy config's own `T` is
/// replaced by `t`.
pub fn bound_row(t: u64, d: &DerivedConstants, p: &PrivacyConfig) -> Result<BoundRow> {
    let horizon = PrivacyConfig { rounds: t.max(1), ..*p };
    let (eq6, eq3, eq5) = if t == 0 {
        (d.theta, d.theta, d.theta)
    } else {
        (
            unroll(UnrollRoute::GapRecursion, t, d, &horizon)?.final_value(),
            unroll(UnrollRoute::IncrementSum, t, d, &horizon)?.final_value(),
            erroneous_unroll(t, d, &horizon).final_value(),
        )
    };
    Ok(BoundRow {
        t,
        original_thm2: original_bound(t, d, &horizon)?,
        corrected_closed: corrected_bound(t, d, &horizon)?,
        corrected_unrolled_eq6: eq6,
        corrected_unrolled_eq3: eq3,
        erroneous_eq5_unrolled: eq5,
    })
}

/// [`bound_row`] for `t = 0..=t_max`.
pub fn bound_table(t_max: u64, d: &DerivedConstants, p: &PrivacyConfig) -> Result<Vec<BoundRow>> {
    (0..=t_max).map(|t| bound_row(t, d, p)).collect()
}

fn powu(base: f64, exp: u64) -> f64 {
    match i32::try_from(exp) {
        Ok(e) => base.powi(e),
        Err(_) => base.powf(exp as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{derive_constants, AssumptionParams, Lambda1Variant};

    fn privacy(rounds: u64) -> PrivacyConfig {
        PrivacyConfig { epsilon: 1.0, delta: None, c: 1.0, clip: 1.0, m: 10, n_clients: 5, rounds }
    }

    fn reference(theta: f64) -> DerivedConstants {
        let a = AssumptionParams::new(1.0, 1.0, 2.0, 2.0, 1.0).unwrap();
        derive_constants(&a, &privacy(10), theta, Lambda1Variant::Corrected).unwrap()
    }

    fn handmade() -> DerivedConstants {
        DerivedConstants {
            lambda0: 0.5,
            lambda1: 1.5,
            lambda2: -0.125,
            p: 0.5,
            delta_s: 0.04,
            sigma_agg: 0.4,
            k0_orig: Some(0.1),
            k1_orig: Some(0.2),
            k0_corr: 0.004,
            k1_corr: 0.107_05,
            k2_corr: -0.125,
            theta: 1.0,
            beta: 1.0,
        }
    }

    #[test]
    fn modelled_moments_reference() {
        let nm = paper_noise_moments(&reference(1.0), &privacy(10));
        assert!((nm.mean_norm - 0.713_649).abs() < 1e-6, "{}", nm.mean_norm);
        assert!((nm.mean_sq_norm - 0.8).abs() < 1e-12);
    }

    #[test]
    fn modelled_moments_scaling() {
        let p = privacy(10);
        let d = reference(1.0);
        let base = paper_noise_moments(&d, &p);
        let wide = PrivacyConfig { epsilon: 2.0, ..p };
        let d2 = derive_constants(
            &AssumptionParams::new(1.0, 1.0, 2.0, 2.0, 1.0).unwrap(),
            &wide,
            1.0,
            Lambda1Variant::Corrected,
        )
        .unwrap();
        let halved = paper_noise_moments(&d2, &wide);
        assert!((halved.mean_norm * 2.0 - base.mean_norm).abs() < 1e-12);
        assert!((halved.mean_sq_norm * 4.0 - base.mean_sq_norm).abs() < 1e-12);

        let single = PrivacyConfig { n_clients: 1, ..p };
        let nm = noise_moments_for_horizon(&d, &single, 10);
        let s = d.delta_s * 10.0 * single.c / single.epsilon;
        assert!((nm.mean_norm - s * (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn original_bound_values() {
        let d = handmade();
        let p = privacy(10);
        assert_eq!(original_bound(0, &d, &p).unwrap(), d.theta);
        assert!((original_bound(2, &d, &p).unwrap() - 0.85).abs() < 1e-15);
        let flat = DerivedConstants { p: 0.0, ..d };
        assert!((original_bound(3, &flat, &p).unwrap() - (0.2 * 3.0 + 0.1 * 9.0)).abs() < 1e-15);
        assert!(matches!(original_bound(11, &d, &p), Err(Error::RoundOutOfRange { .. })));
    }

    #[test]
    fn original_bound_singular() {
        let d = DerivedConstants { p: 1.0, ..handmade() };
        assert!(matches!(original_bound(1, &d, &privacy(10)), Err(Error::Singular { .. })));
        let d = DerivedConstants { k0_orig: None, ..handmade() };
        assert!(matches!(original_bound(1, &d, &privacy(10)), Err(Error::Singular { .. })));
    }

    #[test]
    fn corrected_bound_values() {
        let d = reference(1.0);
        let p = privacy(10);
        assert_eq!(corrected_bound(0, &d, &p).unwrap(), 1.0);
        assert!((d.k1_corr - 0.107_047).abs() < 1e-6);
        assert!((d.k0_corr - 0.004).abs() < 1e-15);
        let v = corrected_bound(10, &d, &p).unwrap();
        assert!((v - 14.454_745).abs() < 1e-5, "{v}");
        // Large epsilon: noise terms vanish.
        let quiet = PrivacyConfig { epsilon: 1e12, ..p };
        let v = corrected_bound(4, &d, &quiet).unwrap();
        assert!((v - (1.0 - 0.125 * 4.0)).abs() < 1e-9);
    }

    #[test]
    fn steps() {
        let d = handmade();
        let nm = NoiseMoments { mean_norm: 0.1, mean_sq_norm: 0.01 };
        assert!((one_round_step(1.0, &d, &nm) - 1.03).abs() < 1e-15);
        let still = DerivedConstants { beta: 0.0, ..d };
        assert_eq!(one_round_step(0.7, &still, &NoiseMoments::ZERO), 0.7);

        assert_eq!(erroneous_step(1.0, &d, &NoiseMoments::ZERO), 0.5);
        assert!((erroneous_step(1.0, &d, &nm) - 0.655).abs() < 1e-15);
        // Fixed point of the contracting recursion.
        let c = d.lambda1 * d.beta * nm.mean_norm + d.lambda0 * nm.mean_sq_norm;
        let fixed = c / (1.0 - d.p);
        assert!((erroneous_step(fixed, &d, &nm) - fixed).abs() < 1e-15);
    }

    #[test]
    fn single_round_unroll() {
        let d = reference(2.0);
        let p = privacy(1);
        let nm = paper_noise_moments(&d, &p);
        let expected = 2.0 + d.lambda2 * d.beta * d.beta + d.lambda1 * d.beta * nm.mean_norm + d.lambda0 * nm.mean_sq_norm;
        for route in [UnrollRoute::GapRecursion, UnrollRoute::IncrementSum] {
            let s = unroll(route, 1, &d, &p).unwrap();
            assert_eq!(s.values.len(), 2);
            assert!((s.final_value() - expected).abs() < 1e-14);
        }
        assert!(unroll(UnrollRoute::GapRecursion, 0, &d, &p).is_err());
    }

    #[test]
    fn noiseless_flat_series() {
        let d = DerivedConstants { beta: 0.0, ..reference(3.0) };
        let p = PrivacyConfig { c: 0.0, ..privacy(6) };
        for route in [UnrollRoute::GapRecursion, UnrollRoute::IncrementSum] {
            let s = unroll(route, 6, &d, &p).unwrap();
            assert!(s.values.iter().all(|&(_, v)| v == 3.0));
        }
    }

    #[test]
    fn table_columns_agree() {
        let d = reference(1.0);
        let p = privacy(10);
        let rows = bound_table(12, &d, &p).unwrap();
        assert_eq!(rows.len(), 13);
        assert_eq!(rows[0].original_thm2, 1.0);
        assert_eq!(rows[0].corrected_closed, 1.0);
        for row in &rows {
            let scale = row.corrected_closed.abs().max(1.0);
            assert!((row.corrected_unrolled_eq6 - row.corrected_closed).abs() / scale < 1e-10);
            assert!((row.corrected_unrolled_eq3 - row.corrected_closed).abs() / scale < 1e-10);
        }
    }

    #[test]
    fn series_anchor() {
        let d = reference(1.5);
        let p = privacy(8);
        assert_eq!(original_series(&d, &p).unwrap().values[0], (0, 1.5));
        assert_eq!(corrected_series(&d, &p).unwrap().values[0], (0, 1.5));
        assert_eq!(corrected_series(&d, &p).unwrap().values.len(), 9);
    }
}
