//! Iteration ladders and sharp lifespan constants for the two ordinary
//! differential inequality systems.
//!
//! Critical class (`H(0) = H'(0) = 0`):
//!
//! ```text
//! H'' >= A (t+1)^-1                                  t >= 0
//! H'' >= (t+1)^-(p+1) ln^-(p-1)(t+1) H^p             t >= T0
//! ```
//!
//! Subcritical class, `1 < p < (n+1)/(n-1)`:
//!
//! ```text
//! H'' >= A                                           t >= 0
//! H'' >= (t+1)^(-(n+3)p/2 + (n+1)/2) H^p             t >= T0
//! ```
//!
//! The ladders iterate lower bounds `H >= C_k (t+1) ln^{q_k}(t+1)` (critical)
//! and `H >= C_k (t+1)^{q_k}` (subcritical). `C_k` underflows and `T_k`
//! overflows double precision after a handful of steps, so every ladder is
//! stored as `(ln C_k, ln(T_k + 1))`.

use serde::Serialize;

use crate::error::{domain_err, LabError, Result};

/// Hard cap on ladder length.
pub const LADDER_CAP: usize = 60;

/// Exponents within this distance of 1 or of the critical power are rejected.
pub const ENDPOINT_GUARD: f64 = 1e-6;

/// Critical power `(n+1)/(n-1)`; `f64::INFINITY` when `n = 1`.
pub fn critical_exponent(n: u32) -> Result<f64> {
    match n {
        0 => Err(domain_err!("dimension must be >= 1, got 0")),
        1 => Ok(f64::INFINITY),
        _ => {
            let n = n as f64;
            Ok((n + 1.0) / (n - 1.0))
        }
    }
}

/// Volume of the unit ball in `R^d`.
pub fn unit_ball_volume(d: u32) -> f64 {
    // V_d = 2 pi / d * V_{d-2}, which is pi^{d/2} / Gamma(d/2 + 1)
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * std::f64::consts::PI / d as f64 * unit_ball_volume(d - 2),
    }
}

/// Surface measure of the unit sphere `S^d` in `R^{d+1}`; `S^0` is the two-point set.
pub fn unit_sphere_area(d: u32) -> f64 {
    (d + 1) as f64 * unit_ball_volume(d + 1)
}

fn check_power(p: f64) -> Result<()> {
    if !p.is_finite() || p <= 1.0 + ENDPOINT_GUARD {
        return Err(domain_err!(
            "power p must exceed 1 (with guard {ENDPOINT_GUARD}), got {p}"
        ));
    }
    Ok(())
}

/// `true` when `p` lies strictly inside `(1, p_c(n))` with the endpoint guard applied.
pub fn is_subcritical(n: u32, p: f64) -> bool {
    match critical_exponent(n) {
        Ok(pc) => p > 1.0 + ENDPOINT_GUARD && p < pc - ENDPOINT_GUARD,
        Err(_) => false,
    }
}

/// `true` when `p` equals `p_c(n)` up to the endpoint guard (requires `n >= 2`).
pub fn is_critical(n: u32, p: f64) -> bool {
    n >= 2 && (p - critical_exponent(n).unwrap_or(f64::INFINITY)).abs() <= ENDPOINT_GUARD
}

fn require_subcritical(n: u32, p: f64) -> Result<()> {
    check_power(p)?;
    if !is_subcritical(n, p) {
        let pc = critical_exponent(n)?;
        return Err(domain_err!(
            "p = {p} is not strictly subcritical for n = {n} (p_c = {pc})"
        ));
    }
    Ok(())
}

/// Parameters of the critical inequality class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriticalOdiParams {
    /// Forcing amplitude.
    pub a: f64,
    pub p: f64,
    /// Activation time of the nonlinear inequality.
    pub t0: f64,
}

impl CriticalOdiParams {
    pub fn new(a: f64, p: f64, t0: f64) -> Result<Self> {
        let params = Self { a, p, t0 };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) || !self.a.is_finite() {
            return Err(domain_err!(
                "forcing amplitude A must be positive, got {}",
                self.a
            ));
        }
        if !(self.t0 > 0.0) || !self.t0.is_finite() {
            return Err(domain_err!(
                "activation time T0 must be positive, got {}",
                self.t0
            ));
        }
        check_power(self.p)
    }
}

/// Parameters of the subcritical inequality class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubcriticalOdiParams {
    pub a: f64,
    pub p: f64,
    pub n: u32,
    pub t0: f64,
}

impl SubcriticalOdiParams {
    pub fn new(a: f64, p: f64, n: u32, t0: f64) -> Result<Self> {
        let params = Self { a, p, n, t0 };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) || !self.a.is_finite() {
            return Err(domain_err!(
                "forcing amplitude A must be positive, got {}",
                self.a
            ));
        }
        if !(self.t0 > 0.0) || !self.t0.is_finite() {
            return Err(domain_err!(
                "activation time T0 must be positive, got {}",
                self.t0
            ));
        }
        require_subcritical(self.n, self.p)
    }
}

/// Constants attached to a pair `(n, p)`.
///
/// Subcritical-only fields are `None` when `p` is not strictly below `p_c(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SharpConstants {
    pub n: u32,
    pub p: f64,
    /// Hölder conjugate `p / (p - 1)`.
    pub p_prime: f64,
    pub b0: Option<f64>,
    pub b1: Option<f64>,
    pub c_tilde_crit: f64,
    pub c_tilde_sub: Option<f64>,
    /// Upper bound on `limsup ln(T_crit(A)) A^{p-1}`.
    pub remark_crit_bound: f64,
    /// Upper bound on `limsup T_sub(A) A^{2(p-1)/(2-(n-1)(p-1))}`.
    pub remark_sub_bound: Option<f64>,
}

/// `(p-1)^3 / max{p, 2(p-1)}`, the contraction factor of the critical ladder.
fn critical_ratio(p: f64) -> f64 {
    (p - 1.0).powi(3) / p.max(2.0 * (p - 1.0))
}

fn c_tilde_crit(p: f64) -> f64 {
    let pm1 = p - 1.0;
    0.5 * critical_ratio(p).powf(1.0 / pm1) * p.powf(-(2.0 * p - 1.0) / (pm1 * pm1))
}

/// `(b0, b1)` of the subcritical ladder (defined for any `p > 1`).
pub(crate) fn b0_b1(n: u32, p: f64) -> (f64, f64) {
    let n = n as f64;
    let base = 1.0 / (p - 1.0) - (n - 1.0) / 2.0;
    let b0 = base + ((n + 3.0) / 2.0 - 1.0 / (p - 1.0)).max(0.0) / p;
    let b1 = base + ((n + 1.0) / 2.0 - 1.0 / (p - 1.0)).max(0.0) / p;
    (b0, b1)
}

/// Subcritical lifespan exponent `2(p-1) / (2 - (n-1)(p-1))`.
pub fn subcritical_exponent(n: u32, p: f64) -> f64 {
    2.0 * (p - 1.0) / (2.0 - (n as f64 - 1.0) * (p - 1.0))
}

pub fn sharp_constants(n: u32, p: f64) -> Result<SharpConstants> {
    critical_exponent(n)?;
    check_power(p)?;
    let pm1 = p - 1.0;
    let c_tilde_crit = c_tilde_crit(p);
    let remark_crit_bound =
        2f64.powf(pm1) * p.max(2.0 * pm1) / pm1.powi(3) * p.powf((2.0 * p - 1.0) / pm1);

    let (b0, b1, c_tilde_sub, remark_sub_bound) = if is_subcritical(n, p) {
        let (b0, b1) = b0_b1(n, p);
        let c_sub = 0.125 * (4.0 * b0 * b1).powf(-1.0 / pm1) * p.powf(-2.0 * p / (pm1 * pm1));
        let denom = 2.0 - (n as f64 - 1.0) * pm1;
        let remark = (4f64.powf(3.0 * p - 1.0) * (b0 * b1).powi(2) * p.powf(4.0 * p / pm1))
            .powf(1.0 / denom);
        (Some(b0), Some(b1), Some(c_sub), Some(remark))
    } else {
        (None, None, None, None)
    };

    Ok(SharpConstants {
        n,
        p,
        p_prime: p / pm1,
        b0,
        b1,
        c_tilde_crit,
        c_tilde_sub,
        remark_crit_bound,
        remark_sub_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LadderVariant {
    Critical,
    Subcritical,
}

/// One rung `(k, q_k, ln C_k, ln(T_k + 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LadderEntry {
    pub k: usize,
    pub q: f64,
    pub ln_c: f64,
    pub ln_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationLadder {
    pub variant: LadderVariant,
    pub entries: Vec<LadderEntry>,
    /// `ln(T~ + 1)`, the limit of `ln(T_k + 1)` (subcritical only).
    pub tilde_t: Option<f64>,
}

fn check_ladder_len(k_max: usize) -> Result<()> {
    if k_max == 0 || k_max > LADDER_CAP {
        return Err(LabError::Parameter(format!(
            "ladder length must be in 1..={LADDER_CAP}, got {k_max}"
        )));
    }
    Ok(())
}

/// Critical ladder `k = 1..=k_max`.
pub fn critical_ladder(params: &CriticalOdiParams, k_max: usize) -> Result<IterationLadder> {
    params.validate()?;
    check_ladder_len(k_max)?;
    let p = params.p;
    let ln_p = p.ln();
    let ln_ratio = critical_ratio(p).ln();
    let ln_t1 = [
        2.0,
        (params.t0 + 1.0).ln(),
        2.0 * (2.0 / p).sqrt(),
        (2.0 * p).sqrt() / (p - 1.0),
    ]
    .into_iter()
    .fold(f64::NEG_INFINITY, f64::max);

    let mut entries = Vec::with_capacity(k_max);
    let mut rung = LadderEntry {
        k: 1,
        q: 1.0,
        ln_c: (params.a / 2.0).ln(),
        ln_t: ln_t1,
    };
    entries.push(rung);
    for k in 1..k_max {
        let q = p * rung.q - p + 2.0;
        let ln_c = p * rung.ln_c + ln_ratio - (k as f64 + 1.0) * ln_p;
        let ln_t = (2.0 * p).powf(1.0 / q) * p * rung.ln_t;
        rung = LadderEntry {
            k: k + 1,
            q,
            ln_c,
            ln_t,
        };
        entries.push(rung);
    }
    Ok(IterationLadder {
        variant: LadderVariant::Critical,
        entries,
        tilde_t: None,
    })
}

/// Subcritical ladder `k = 1..=k_max`, including the limit `ln(T~ + 1)`.
pub fn subcritical_ladder(params: &SubcriticalOdiParams, k_max: usize) -> Result<IterationLadder> {
    params.validate()?;
    check_ladder_len(k_max)?;
    let (p, n) = (params.p, params.n as f64);
    let ln_p = p.ln();
    let (b0, b1) = b0_b1(params.n, p);
    let ln_4b0b1 = (4.0 * b0 * b1).ln();
    let ln_t1 = (params.t0.max(1.0) + 1.0).ln();

    let mut entries = Vec::with_capacity(k_max);
    let mut rung = LadderEntry {
        k: 1,
        q: 2.0,
        ln_c: (params.a / 8.0).ln(),
        ln_t: ln_t1,
    };
    entries.push(rung);
    for k in 1..k_max {
        let q = p * (rung.q - (n + 3.0) / 2.0) + (n + 5.0) / 2.0;
        let ln_t = rung.ln_t + std::f64::consts::LN_2 * (1.0 / (q - 1.0) + 1.0 / q);
        let ln_c = p * rung.ln_c - ln_4b0b1 - 2.0 * k as f64 * ln_p;
        rung = LadderEntry {
            k: k + 1,
            q,
            ln_c,
            ln_t,
        };
        entries.push(rung);
    }
    let tilde_t = Some(subcritical_tilde_t(params.n, p, ln_t1)?);
    Ok(IterationLadder {
        variant: LadderVariant::Subcritical,
        entries,
        tilde_t,
    })
}

const TAIL_TOLERANCE: f64 = 1e-15;
const SERIES_MAX_TERMS: usize = 1_000_000_000;

/// `ln(T~ + 1) = ln 2 * sum_{k>=1} (1/q_{k+1} + 1/(q_{k+1} - 1)) + ln(T_1 + 1)`.
fn subcritical_tilde_t(n: u32, p: f64, ln_t1: f64) -> Result<f64> {
    let nf = n as f64;
    let mut q = 2.0;
    let mut sum = 0.0;
    let mut prev = f64::NAN;
    for k in 1..=SERIES_MAX_TERMS {
        q = p * (q - (nf + 3.0) / 2.0) + (nf + 5.0) / 2.0;
        let term = 1.0 / q + 1.0 / (q - 1.0);
        sum += term;
        if k >= 2 {
            let ratio = term / prev;
            if ratio < 1.0 {
                let tail = term * ratio / (1.0 - ratio);
                if tail < TAIL_TOLERANCE {
                    return Ok(std::f64::consts::LN_2 * (sum + tail) + ln_t1);
                }
            }
        }
        prev = term;
    }
    Err(LabError::Runtime(format!(
        "T~ series did not converge within {SERIES_MAX_TERMS} terms (n = {n}, p = {p})"
    )))
}

/// Asymptotic bound on `ln(T + 1)` for the critical class: `(C~_crit A)^{-(p-1)}`.
pub fn predict_lifespan_critical(a: f64, p: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(domain_err!("A must be positive, got {a}"));
    }
    check_power(p)?;
    Ok((c_tilde_crit(p) * a).powf(-(p - 1.0)))
}

/// Asymptotic bound on `T + 1` for the subcritical class:
/// `(C~_sub A)^{-2(p-1)/(2-(n-1)(p-1))}`.
pub fn predict_lifespan_subcritical(a: f64, n: u32, p: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(domain_err!("A must be positive, got {a}"));
    }
    require_subcritical(n, p)?;
    let c = sharp_constants(n, p)?
        .c_tilde_sub
        .expect("subcritical constants exist for subcritical p");
    Ok((c * a).powf(-subcritical_exponent(n, p)))
}

/// The two limsup constants of the main lifespan theorems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremConstants {
    /// Bound on `limsup ln(T/R) eps^{p-1}` at `p = p_c(n)`.
    pub crit: Option<f64>,
    /// Bound on `limsup T eps^{2(p-1)/(2-(n-1)(p-1))}` for `p < p_c(n)`.
    pub sub: Option<f64>,
}

pub fn theorem_constant_critical(n: u32, r: f64, a_f: f64) -> Result<f64> {
    check_theorem_inputs(n, r, a_f)?;
    let nf = n as f64;
    let alpha = unit_ball_volume(n - 1);
    Ok(4f64.powf(-(nf + 1.0) / (nf - 1.0))
        * r.powf((nf + 3.0) / (nf - 1.0))
        * (nf + 1.0).max(4.0)
        * (nf + 1.0).powf((nf + 3.0) / 2.0)
        * (nf - 1.0).powf(-(nf - 1.0) / 2.0)
        * (alpha / a_f).powf(2.0 / (nf + 1.0)))
}

pub fn theorem_constant_subcritical(n: u32, p: f64, r: f64, a_f: f64) -> Result<f64> {
    check_theorem_inputs(n, r, a_f)?;
    require_subcritical(n, p)?;
    let nf = n as f64;
    let pm1 = p - 1.0;
    let (b0, b1) = b0_b1(n, p);
    let alpha = unit_ball_volume(n - 1);
    let inner = r.powf((nf + 3.0) / 2.0) / a_f * alpha / (nf + 1.0);
    let base = 2f64.powf(-(nf - 1.0) * p + nf + 5.0)
        * (b0 * b1).powi(2)
        * p.powf(4.0 * p / pm1)
        * inner.powf(2.0 * pm1);
    Ok(base.powf(1.0 / (2.0 - (nf - 1.0) * pm1)))
}

/// Evaluates whichever theorem constant applies to `p`.
pub fn theorem_constants(n: u32, p: f64, r: f64, a_f: f64) -> Result<TheoremConstants> {
    check_theorem_inputs(n, r, a_f)?;
    if is_critical(n, p) {
        Ok(TheoremConstants {
            crit: Some(theorem_constant_critical(n, r, a_f)?),
            sub: None,
        })
    } else if is_subcritical(n, p) {
        Ok(TheoremConstants {
            crit: None,
            sub: Some(theorem_constant_subcritical(n, p, r, a_f)?),
        })
    } else {
        Err(domain_err!(
            "p = {p} is neither critical nor subcritical for n = {n}"
        ))
    }
}

fn check_theorem_inputs(n: u32, r: f64, a_f: f64) -> Result<()> {
    if n < 2 {
        return Err(domain_err!("theorem constants need n >= 2, got {n}"));
    }
    if !(r > 0.0) || !(a_f > 0.0) {
        return Err(domain_err!(
            "R and A_f must be positive (R = {r}, A_f = {a_f})"
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn critical_exponent_values() {
        assert_eq!(critical_exponent(3).unwrap(), 2.0);
        assert_eq!(critical_exponent(2).unwrap(), 3.0);
        assert!(critical_exponent(1).unwrap().is_infinite());
        assert!(matches!(critical_exponent(0), Err(LabError::Domain(_))));
    }

    #[test]
    fn ball_and_sphere_measures() {
        assert_relative_eq!(unit_ball_volume(1), 2.0);
        assert_relative_eq!(unit_ball_volume(2), PI);
        assert_relative_eq!(unit_ball_volume(3), 4.0 * PI / 3.0, max_relative = 1e-15);
        assert_relative_eq!(unit_sphere_area(0), 2.0);
        assert_relative_eq!(unit_sphere_area(1), 2.0 * PI);
        assert_relative_eq!(unit_sphere_area(2), 4.0 * PI, max_relative = 1e-15);
    }

    #[test]
    fn sharp_constants_spot_values() {
        let c = sharp_constants(2, 2.0).unwrap();
        assert_relative_eq!(c.c_tilde_crit, 1.0 / 32.0, max_relative = 1e-14);
        assert_relative_eq!(c.remark_crit_bound, 32.0, max_relative = 1e-14);
        assert_relative_eq!(c.b0.unwrap(), 1.25, max_relative = 1e-14);
        assert_relative_eq!(c.b1.unwrap(), 0.75, max_relative = 1e-14);
        assert_relative_eq!(c.c_tilde_sub.unwrap(), 1.0 / 480.0, max_relative = 1e-14);
        assert_relative_eq!(c.remark_sub_bound.unwrap(), 230_400.0, max_relative = 1e-13);
        assert_relative_eq!(c.p_prime * (c.p - 1.0), c.p);
    }

    #[test]
    fn subcritical_fields_absent_at_and_above_critical_power() {
        let c = sharp_constants(3, 2.0).unwrap();
        assert!(c.c_tilde_sub.is_none() && c.b0.is_none() && c.remark_sub_bound.is_none());
        assert!(sharp_constants(3, 2.5).unwrap().c_tilde_sub.is_none());
        assert!(matches!(sharp_constants(2, 1.0), Err(LabError::Domain(_))));
        assert!(matches!(
            sharp_constants(2, 1.0 + 1e-7),
            Err(LabError::Domain(_))
        ));
    }

    #[test]
    fn critical_ladder_examples() {
        let lad = critical_ladder(&CriticalOdiParams::new(1.0, 2.0, 0.125).unwrap(), 5).unwrap();
        let qs: Vec<f64> = lad.entries.iter().map(|e| e.q).collect();
        assert_eq!(qs, vec![1.0, 2.0, 4.0, 8.0, 16.0]);
        assert_relative_eq!(
            lad.entries[1].ln_c,
            (1.0f64 / 32.0).ln(),
            max_relative = 1e-14
        );
        assert_relative_eq!(lad.entries[0].ln_t, 2.0);
    }

    #[test]
    fn subcritical_ladder_examples() {
        let params = SubcriticalOdiParams::new(1.0, 2.0, 2, 0.125).unwrap();
        let lad = subcritical_ladder(&params, 4).unwrap();
        assert_eq!(lad.entries[0].q, 2.0);
        assert_relative_eq!(lad.entries[1].q, 2.5);
        assert_relative_eq!(
            lad.entries[1].ln_c,
            (1.0f64 / 960.0).ln(),
            max_relative = 1e-14
        );
        assert_relative_eq!(lad.entries[0].ln_t, 2f64.ln());
        let tilde = lad.tilde_t.unwrap();
        assert!(tilde.is_finite() && lad.entries.iter().all(|e| e.ln_t < tilde));
    }

    #[test]
    fn ladder_cap_and_domain_checks() {
        let crit = CriticalOdiParams::new(1.0, 2.0, 1.0).unwrap();
        assert!(matches!(
            critical_ladder(&crit, 61),
            Err(LabError::Parameter(_))
        ));
        assert!(matches!(
            critical_ladder(&crit, 0),
            Err(LabError::Parameter(_))
        ));
        assert!(critical_ladder(&crit, 60).is_ok());
        assert!(matches!(
            SubcriticalOdiParams::new(1.0, 2.0, 3, 1.0),
            Err(LabError::Domain(_))
        ));
        assert!(SubcriticalOdiParams::new(1.0, 5.0, 1, 1.0).is_ok());
        assert!(CriticalOdiParams::new(0.0, 2.0, 1.0).is_err());
        assert!(CriticalOdiParams::new(1.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn lifespan_predictions() {
        assert_relative_eq!(
            predict_lifespan_critical(1.0, 2.0).unwrap(),
            32.0,
            max_relative = 1e-13
        );
        assert_relative_eq!(
            predict_lifespan_critical(0.5, 2.0).unwrap(),
            64.0,
            max_relative = 1e-13
        );
        let one = predict_lifespan_subcritical(1.0, 2, 2.0).unwrap();
        assert_relative_eq!(one, 230_400.0, max_relative = 1e-13);
        assert_relative_eq!(
            predict_lifespan_subcritical(0.5, 2, 2.0).unwrap(),
            4.0 * one,
            max_relative = 1e-13
        );
        assert_relative_eq!(subcritical_exponent(3, 1.5), 1.0);
        let a = predict_lifespan_subcritical(0.2, 3, 1.5).unwrap();
        let b = predict_lifespan_subcritical(0.1, 3, 1.5).unwrap();
        assert_relative_eq!(b / a, 2.0, max_relative = 1e-13);
        assert!(predict_lifespan_subcritical(1.0, 3, 2.0).is_err());
    }

    #[test]
    fn theorem_constant_spot_values() {
        let crit = theorem_constants(3, 2.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(crit.crit.unwrap(), 8.0 * PI.sqrt(), max_relative = 1e-13);
        assert!(crit.sub.is_none());
        // 2^5 (15/16)^2 2^8 (2/3)^2 with alpha_1 = 2
        let sub = theorem_constants(2, 2.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(sub.sub.unwrap(), 3200.0, max_relative = 1e-13);
        assert!(theorem_constants(2, 3.5, 1.0, 1.0).is_err());
        assert!(theorem_constants(1, 1.5, 1.0, 1.0).is_err());
    }
}
