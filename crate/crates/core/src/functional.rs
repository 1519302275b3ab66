//! Star transform, the functional `U(t)` and its two lower bounds.
//!
//! For radial `u` the star transform is the integral over the hyperplane
//! `x_1 = r`:
//!
//! ```text
//! u*(t, r) = σ_{n-2} ∫_0^{ρmax} u(t, sqrt(r^2 + ρ^2)) ρ^{n-2} dρ,   ρmax = sqrt(s^2 - r^2),
//! ```
//!
//! with `s` the support radius and `σ_{n-2}` the measure of the unit
//! `(n-2)`-sphere (`σ_0 = 2`). The functional is
//!
//! ```text
//! U''(t) = ∫_{t+R0}^{t+R} r^{-β} u*(t, r) dr,     U(0) = U'(0) = 0,
//! ```
//!
//! and along a solution it obeys
//!
//! ```text
//! U'' >= ε (t+R)^{-β} A_f
//! U'' >= ½ c^{-(p-1)} (1 - 2β R1/R0)^p (t+R)^{-β-1} J̄^{-(p-1)} U^p     (t >= R1)
//! ```

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain_err, LabError, Result};
use crate::odi::{unit_ball_volume, unit_sphere_area};
use crate::quad::gauss_composite;
use crate::wave::{
    run_wave, DataProfile, LifespanEstimate, RadialField, SnapshotPolicy, WaveConfig, WaveStatus,
};

/// `A_f` smaller than this is treated as degenerate.
pub const A_F_FLOOR: f64 = 1e-12;

/// Star transform of a radial function `f` at `r`, for `f` supported in `r <= s`.
pub fn star_transform_fn<F: Fn(f64) -> f64>(f: F, n: u32, r: f64, s: f64, panels: usize) -> f64 {
    if r.abs() >= s {
        return 0.0;
    }
    let rho_max = (s * s - r * r).sqrt();
    let k = n as i32 - 2;
    unit_sphere_area(n - 2)
        * gauss_composite(|rho| f(r.hypot(rho)) * rho.powi(k), 0.0, rho_max, panels)
}

/// `A_f` over `[3R/4, R]` and the conservative `½ ∫_{R0}^{R} f*` used by the
/// linear lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AfValues {
    pub a_f: f64,
    pub a_f_conservative: f64,
    pub r0: f64,
    /// Change under doubled quadrature panels.
    pub error_estimate: f64,
}

fn a_f_raw<F: Fn(f64) -> f64 + Copy>(
    f: F,
    n: u32,
    r_support: f64,
    r0: f64,
    panels: usize,
) -> (f64, f64) {
    let star = |r: f64| star_transform_fn(f, n, r, r_support, panels);
    let a_f = gauss_composite(star, 0.75 * r_support, r_support, panels);
    let cons = 0.5 * gauss_composite(star, r0, r_support, panels);
    (a_f, cons)
}

/// `A_f` of an arbitrary radial `f` supported in `r <= r_support`.
pub fn compute_a_f_fn<F: Fn(f64) -> f64 + Copy>(
    f: F,
    n: u32,
    r_support: f64,
    r0: f64,
) -> Result<AfValues> {
    if n < 2 {
        return Err(domain_err!("dimension must be at least 2, got {n}"));
    }
    if !(r0 >= 0.0 && r0 < r_support) {
        return Err(domain_err!(
            "R0 must lie in [0, R), got R0 = {r0}, R = {r_support}"
        ));
    }
    let coarse = a_f_raw(f, n, r_support, r0, 32);
    let fine = a_f_raw(f, n, r_support, r0, 64);
    let err = (fine.0 - coarse.0).abs().max((fine.1 - coarse.1).abs());
    if !(fine.0 > A_F_FLOOR.max(err)) || !(fine.1 > A_F_FLOOR.max(err)) {
        return Err(LabError::Data(format!(
            "A_f = {} is not positive beyond quadrature tolerance",
            fine.0
        )));
    }
    Ok(AfValues {
        a_f: fine.0,
        a_f_conservative: fine.1,
        r0,
        error_estimate: err,
    })
}

/// `A_f` of a data profile with `R0 = 3R/4`.
pub fn compute_a_f(profile: &DataProfile, n: u32) -> Result<AfValues> {
    compute_a_f_with_r0(profile, n, 0.75 * profile.r_support)
}

pub fn compute_a_f_with_r0(profile: &DataProfile, n: u32, r0: f64) -> Result<AfValues> {
    profile.validate()?;
    let prof = *profile;
    compute_a_f_fn(move |r| prof.f(r), n, profile.r_support, r0)
}

/// Quadrature resolution: panels are `2 dr / refine` wide in `ρ` and
/// `4 dr / refine` wide in `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadOptions {
    pub refine: f64,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self { refine: 1.0 }
    }
}

fn panels_for(length: f64, width: f64) -> usize {
    ((length / width).ceil() as usize).max(2)
}

/// `u*(t, r)` of a stored field.
pub fn star_value(field: &RadialField, n: u32, r: f64, quad: QuadOptions) -> Result<f64> {
    if n < 2 {
        return Err(domain_err!("dimension must be at least 2, got {n}"));
    }
    let s = field.support_radius;
    if r >= s {
        return Ok(0.0);
    }
    if r < field.r_start() - 1e-12 {
        return Err(LabError::Data(format!(
            "u* at r = {r} needs data below the stored range (from r = {})",
            field.r_start()
        )));
    }
    let rho_max = (s * s - r * r).sqrt();
    let panels = panels_for(rho_max, 2.0 * field.dr / quad.refine);
    Ok(star_transform_fn(|x| field.u_at(x), n, r, s, panels))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StarSlice {
    pub t: f64,
    pub r_grid: Vec<f64>,
    pub u_star: Vec<f64>,
}

/// `u*` at the stored nodes up to the support radius.
pub fn star_transform(field: &RadialField, n: u32) -> Result<StarSlice> {
    let radii: Vec<f64> = field
        .r_grid()
        .into_iter()
        .filter(|r| *r <= field.support_radius)
        .collect();
    star_transform_at(field, n, &radii)
}

pub fn star_transform_at(field: &RadialField, n: u32, radii: &[f64]) -> Result<StarSlice> {
    let u_star = radii
        .iter()
        .map(|&r| star_value(field, n, r, QuadOptions::default()))
        .collect::<Result<_>>()?;
    Ok(StarSlice {
        t: field.t,
        r_grid: radii.to_vec(),
        u_star,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FunctionalConfig {
    pub beta: f64,
    pub r0: f64,
    pub r_support: f64,
}

impl FunctionalConfig {
    pub fn new(beta: f64, r0: f64, r_support: f64) -> Result<Self> {
        let c = Self {
            beta,
            r0,
            r_support,
        };
        c.validate()?;
        Ok(c)
    }

    /// `R0 = 3R/4`.
    pub fn with_default_r0(beta: f64, r_support: f64) -> Result<Self> {
        Self::new(beta, 0.75 * r_support, r_support)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(domain_err!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.r_support > 0.0) || !(self.r0 >= 0.0 && self.r0 < self.r_support) {
            return Err(domain_err!(
                "need 0 <= R0 < R, got R0 = {}, R = {}",
                self.r0,
                self.r_support
            ));
        }
        if self.beta > 0.0 && self.r0 == 0.0 {
            return Err(domain_err!("beta > 0 needs R0 > 0"));
        }
        Ok(())
    }

    pub fn r1(&self) -> f64 {
        0.5 * (self.r_support - self.r0)
    }

    pub fn p_prime(p: f64) -> f64 {
        p / (p - 1.0)
    }

    /// `1 - 2 β R1 / R0` (one when `β = 0`).
    pub fn holder_factor(&self) -> f64 {
        if self.beta == 0.0 {
            1.0
        } else {
            1.0 - 2.0 * self.beta * self.r1() / self.r0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionalTrace {
    pub times: Vec<f64>,
    pub u: Vec<f64>,
    pub u_second: Vec<f64>,
}

/// `U''` from a star-transform evaluator `ustar(i, r)` at `times[i]`, and `U`
/// by the trapezoid rule with kernel `(t - τ)`.
pub fn functional_from_star<F>(
    times: &[f64],
    config: &FunctionalConfig,
    r_panels: usize,
    ustar: F,
) -> Result<FunctionalTrace>
where
    F: Fn(usize, f64) -> Result<f64> + Sync,
{
    config.validate()?;
    if times.is_empty() {
        return Err(LabError::Data("no snapshot times".into()));
    }
    if times[0].abs() > 1e-12 {
        return Err(LabError::Data(format!(
            "the first snapshot must be at t = 0 (U(0) = U'(0) = 0), got {}",
            times[0]
        )));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LabError::Data("snapshot times must increase".into()));
    }
    let beta = config.beta;
    let (r0, rr) = (config.r0, config.r_support);
    let u_second: Vec<f64> = (0..times.len())
        .into_par_iter()
        .map(|i| {
            let t = times[i];
            let mut err = None;
            let v = gauss_composite(
                |r| match ustar(i, r) {
                    Ok(s) => r.powf(-beta) * s,
                    Err(e) => {
                        err.get_or_insert(e);
                        0.0
                    }
                },
                t + r0,
                t + rr,
                r_panels,
            );
            err.map_or(Ok(v), Err)
        })
        .collect::<Result<_>>()?;

    // U(t_i) = t_i ∫ g - ∫ τ g, both by cumulative trapezoid
    let mut u = Vec::with_capacity(times.len());
    let (mut g0, mut g1) = (0.0, 0.0);
    u.push(0.0);
    for i in 1..times.len() {
        let (ta, tb) = (times[i - 1], times[i]);
        let h = tb - ta;
        g0 += 0.5 * h * (u_second[i - 1] + u_second[i]);
        g1 += 0.5 * h * (ta * u_second[i - 1] + tb * u_second[i]);
        u.push(tb * g0 - g1);
    }
    Ok(FunctionalTrace {
        times: times.to_vec(),
        u,
        u_second,
    })
}

/// Number of samples required at or before the first check time.
pub const MIN_EARLY_SAMPLES: usize = 16;

/// `U` and `U''` along stored snapshots of an `n`-dimensional run.
pub fn compute_functional(
    snapshots: &[RadialField],
    n: u32,
    config: &FunctionalConfig,
    quad: QuadOptions,
) -> Result<FunctionalTrace> {
    config.validate()?;
    let early = snapshots
        .iter()
        .filter(|s| s.t <= config.r1() + 1e-12)
        .count();
    if early < MIN_EARLY_SAMPLES {
        return Err(LabError::Data(format!(
            "snapshot spacing too coarse: {early} samples in [0, R1 = {}], need {MIN_EARLY_SAMPLES}",
            config.r1()
        )));
    }
    let dr = snapshots[0].dr;
    let width = config.r_support - config.r0;
    let r_panels = panels_for(width, 4.0 * dr / quad.refine);
    let times: Vec<f64> = snapshots.iter().map(|s| s.t).collect();
    functional_from_star(&times, config, r_panels, |i, r| {
        star_value(&snapshots[i], n, r, quad)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelBranch {
    /// `(n-1)/2 - β p' < -1`
    Decaying,
    /// `(n-1)/2 - β p' = -1`
    Logarithmic,
    /// `(n-1)/2 - β p' > -1`
    Growing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelConstants {
    pub c: f64,
    pub branch: KernelBranch,
    /// `(n-1)/2 - β p' + 1`.
    pub exponent_plus_one: f64,
    pub r_support: f64,
}

impl KernelConstants {
    /// `J̄_p(t)`.
    pub fn jbar(&self, t: f64) -> f64 {
        let x = t + self.r_support;
        match self.branch {
            KernelBranch::Decaying => x,
            KernelBranch::Logarithmic => x * (x / self.r_support).ln(),
            KernelBranch::Growing => x.powf(self.exponent_plus_one + 1.0),
        }
    }
}

/// Relative tolerance of the branch test against zero.
pub const BRANCH_TOLERANCE: f64 = 1e-9;

pub fn kernel_constants(n: u32, p: f64, config: &FunctionalConfig) -> Result<KernelConstants> {
    config.validate()?;
    if n < 2 || !(p > 1.0) {
        return Err(domain_err!("need n >= 2 and p > 1, got n = {n}, p = {p}"));
    }
    let nf = n as f64;
    let bp = config.beta * FunctionalConfig::p_prime(p);
    let e = (nf - 1.0) / 2.0 - bp;
    let d = e + 1.0;
    let rr = config.r_support;
    let prefactor = unit_ball_volume(n - 1)
        * config.r1().powf((nf + 3.0) / 2.0)
        * 2f64.powi(n as i32 + 1)
        * (config.r0 / rr).powf(-bp);
    let (branch, factor) = if d.abs() <= BRANCH_TOLERANCE * e.abs().max(1.0) {
        (KernelBranch::Logarithmic, 1.0)
    } else if d < 0.0 {
        (KernelBranch::Decaying, rr.powf(d) / (-d))
    } else {
        (KernelBranch::Growing, 1.0 / d)
    };
    Ok(KernelConstants {
        c: prefactor * factor,
        branch,
        exponent_plus_one: d,
        r_support: rr,
    })
}

/// `J(t) = α_{n-1} ∫_0^t ∫_{τ+R0}^{τ+R} (t-τ)(λ-τ-R0) λ^{-βp'} ((τ+R)^2 - λ^2)^{(n-1)/2} dλ dτ`.
///
/// The inner integral uses `λ = τ + R - y^2`, which removes the square-root
/// endpoint behavior.
pub fn compute_j(t: f64, n: u32, config: &FunctionalConfig, p: f64, refine: usize) -> Result<f64> {
    config.validate()?;
    if !(t >= 0.0) {
        return Err(domain_err!("t must be nonnegative, got {t}"));
    }
    if n < 2 || !(p > 1.0) {
        return Err(domain_err!("need n >= 2 and p > 1, got n = {n}, p = {p}"));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let refine = refine.max(1);
    let half_n = (n as f64 - 1.0) / 2.0;
    let bp = config.beta * FunctionalConfig::p_prime(p);
    let (r0, rr) = (config.r0, config.r_support);
    let y_max = (rr - r0).sqrt();
    let y_panels = 4 * refine;
    let tau_panels = ((t / 0.5).ceil() as usize).max(4) * refine;
    let inner = |tau: f64| {
        let top = tau + rr;
        gauss_composite(
            |y| {
                let lam = top - y * y;
                2.0 * y
                    * (rr - r0 - y * y)
                    * lam.powf(-bp)
                    * (y * y * (2.0 * top - y * y)).powf(half_n)
            },
            0.0,
            y_max,
            y_panels,
        )
    };
    let outer = gauss_composite(|tau| (t - tau) * inner(tau), 0.0, t, tau_panels);
    Ok(unit_ball_volume(n - 1) * outer)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub epsilon: f64,
    pub n: u32,
    pub p: f64,
    pub config: FunctionalConfig,
    pub a_f_conservative: f64,
    pub kernel: KernelConstants,
    /// Residuals are evaluated for trace times in `[0, t_max]`.
    pub t_max: f64,
    pub times: Vec<f64>,
    pub residual_linear: Vec<f64>,
    /// `None` before `R1` or when the check is skipped.
    pub residual_nonlinear: Vec<Option<f64>>,
    pub min_residual_linear: f64,
    pub min_residual_nonlinear: Option<f64>,
    pub first_violation_linear: Option<f64>,
    pub first_violation_nonlinear: Option<f64>,
    pub errors: ResidualErrors,
    pub tolerance_linear: f64,
    pub tolerance_nonlinear: f64,
    pub notice: Option<String>,
}

/// Estimated discretization error of each residual.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ResidualErrors {
    pub linear: f64,
    pub nonlinear: f64,
}

impl ResidualErrors {
    fn sum(self, other: Self) -> Self {
        Self {
            linear: self.linear + other.linear,
            nonlinear: self.nonlinear + other.nonlinear,
        }
    }
}

impl ResidualReport {
    pub fn passed(&self) -> bool {
        self.first_violation_linear.is_none() && self.first_violation_nonlinear.is_none()
    }
}

/// Residuals of both lower bounds along `trace`, each with
/// `tol = max(1e-8, 3 * estimated error)`.
pub fn verify_lower_bounds(
    trace: &FunctionalTrace,
    inputs: &CheckInputs,
    config: &FunctionalConfig,
    errors: ResidualErrors,
) -> Result<ResidualReport> {
    let CheckInputs {
        n,
        p,
        epsilon,
        a_f_conservative,
        t_max,
    } = *inputs;
    config.validate()?;
    let kernel = kernel_constants(n, p, config)?;
    let tolerance_linear = (3.0 * errors.linear).max(1e-8);
    let tolerance_nonlinear = (3.0 * errors.nonlinear).max(1e-8);
    let holder = config.holder_factor();
    let notice = (holder <= 0.0)
        .then(|| format!("1 - 2 beta R1/R0 = {holder} is not positive; nonlinear check skipped"));
    let r1 = config.r1();
    let rr = config.r_support;
    let beta = config.beta;

    let mut report = ResidualReport {
        epsilon,
        n,
        p,
        config: *config,
        a_f_conservative,
        kernel,
        t_max,
        times: Vec::new(),
        residual_linear: Vec::new(),
        residual_nonlinear: Vec::new(),
        min_residual_linear: f64::INFINITY,
        min_residual_nonlinear: None,
        first_violation_linear: None,
        first_violation_nonlinear: None,
        errors,
        tolerance_linear,
        tolerance_nonlinear,
        notice,
    };
    for ((&t, &u), &u2) in trace.times.iter().zip(&trace.u).zip(&trace.u_second) {
        if t > t_max {
            break;
        }
        let lin = u2 - epsilon * a_f_conservative * (t + rr).powf(-beta);
        report.min_residual_linear = report.min_residual_linear.min(lin);
        if lin < -tolerance_linear && report.first_violation_linear.is_none() {
            report.first_violation_linear = Some(t);
        }
        let nl = (holder > 0.0 && t >= r1).then(|| {
            let rhs = 0.5
                * kernel.c.powf(-(p - 1.0))
                * holder.powf(p)
                * (t + rr).powf(-beta - 1.0)
                * kernel.jbar(t).powf(-(p - 1.0))
                * u.max(0.0).powf(p);
            u2 - rhs
        });
        if let Some(r) = nl {
            report.min_residual_nonlinear =
                Some(report.min_residual_nonlinear.map_or(r, |m: f64| m.min(r)));
            if r < -tolerance_nonlinear && report.first_violation_nonlinear.is_none() {
                report.first_violation_nonlinear = Some(t);
            }
        }
        report.times.push(t);
        report.residual_linear.push(lin);
        report.residual_nonlinear.push(nl);
    }
    Ok(report)
}

/// Options for [`verify_wave_run`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyOptions {
    /// Residuals are checked up to `fraction * T_num` (or the horizon).
    pub t_fraction: f64,
    /// Grid spacing of a companion run used to estimate the solver error.
    pub companion_dr: Option<f64>,
    pub snapshot_target: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            t_fraction: 0.8,
            companion_dr: None,
            snapshot_target: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub estimate: LifespanEstimate,
    pub residuals: ResidualReport,
    /// Error contributions: quadrature, time integration of `U`, solver grid.
    pub error_quadrature: ResidualErrors,
    pub error_time: ResidualErrors,
    pub error_grid: Option<ResidualErrors>,
    #[serde(skip)]
    pub trace: FunctionalTrace,
}

/// Linear interpolation of `(xs, ys)` at `x` (clamped to the ends).
fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    match xs.partition_point(|v| *v < x) {
        0 => ys[0],
        k if k == xs.len() => ys[k - 1],
        k => {
            let w = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
            ys[k - 1] + w * (ys[k] - ys[k - 1])
        }
    }
}

/// Largest change of each residual between `main` and `other` at the times of `main`.
fn residual_gap(main: &ResidualReport, other: &ResidualReport) -> ResidualErrors {
    let mut gap = ResidualErrors::default();
    let Some(&t_end) = other.times.last() else {
        return gap;
    };
    let (nl_t, nl_v): (Vec<f64>, Vec<f64>) = other
        .times
        .iter()
        .zip(&other.residual_nonlinear)
        .filter_map(|(t, r)| r.map(|v| (*t, v)))
        .unzip();
    for (i, &t) in main.times.iter().enumerate() {
        if t > t_end {
            break;
        }
        let lin = interp(&other.times, &other.residual_linear, t);
        gap.linear = gap.linear.max((main.residual_linear[i] - lin).abs());
        if let (Some(r), false) = (main.residual_nonlinear[i], nl_t.is_empty()) {
            if t >= nl_t[0] {
                gap.nonlinear = gap.nonlinear.max((r - interp(&nl_t, &nl_v, t)).abs());
            }
        }
    }
    gap
}

/// Problem data for checking the lower bounds on stored snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckInputs {
    pub n: u32,
    pub p: f64,
    pub epsilon: f64,
    pub a_f_conservative: f64,
    /// Residuals are evaluated up to this time.
    pub t_max: f64,
}

/// Residuals of stored snapshots with their error estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotCheck {
    pub residuals: ResidualReport,
    pub error_quadrature: ResidualErrors,
    pub error_time: ResidualErrors,
    pub error_grid: Option<ResidualErrors>,
    #[serde(skip)]
    pub trace: FunctionalTrace,
}

/// Checks both lower bounds on `snapshots`.
///
/// The error estimate of each residual sums its change under doubled
/// quadrature resolution, under halved snapshot density and, if given,
/// against the snapshots of a `companion` run on another grid.
pub fn verify_snapshots(
    snapshots: &[RadialField],
    inputs: &CheckInputs,
    fconfig: &FunctionalConfig,
    companion: Option<&[RadialField]>,
) -> Result<SnapshotCheck> {
    let residuals_of =
        |trace: &FunctionalTrace, errors| verify_lower_bounds(trace, inputs, fconfig, errors);
    let zero = ResidualErrors::default();
    let n = inputs.n;

    let trace = compute_functional(snapshots, n, fconfig, QuadOptions::default())?;
    let base = residuals_of(&trace, zero)?;
    let fine = compute_functional(snapshots, n, fconfig, QuadOptions { refine: 2.0 })?;
    let error_quadrature = residual_gap(&base, &residuals_of(&fine, zero)?);

    let mut half: Vec<RadialField> = snapshots.iter().step_by(2).cloned().collect();
    let r1 = fconfig.r1();
    if half.iter().filter(|s| s.t <= r1 + 1e-12).count() < MIN_EARLY_SAMPLES {
        // too few early samples after thinning: thin only past R1
        let early = snapshots.iter().filter(|s| s.t <= r1 + 1e-12);
        let late = snapshots.iter().filter(|s| s.t > r1 + 1e-12).step_by(2);
        half = early.chain(late).cloned().collect();
    }
    let error_time = match compute_functional(&half, n, fconfig, QuadOptions::default()) {
        Ok(coarse) => residual_gap(&base, &residuals_of(&coarse, zero)?),
        Err(e) => {
            log::warn!("time-step error estimate skipped: {e}");
            zero
        }
    };
    let error_grid = match companion {
        Some(comp) => {
            let comp_trace = compute_functional(comp, n, fconfig, QuadOptions::default())?;
            Some(residual_gap(&base, &residuals_of(&comp_trace, zero)?))
        }
        None => None,
    };
    let estimated = error_quadrature
        .sum(error_time)
        .sum(error_grid.unwrap_or(zero));
    Ok(SnapshotCheck {
        residuals: residuals_of(&trace, estimated)?,
        error_quadrature,
        error_time,
        error_grid,
        trace,
    })
}

/// Runs `wave` with snapshots of the strip `r >= t + R0` and checks both
/// lower bounds up to `t_fraction * T_num`.
pub fn verify_wave_run(
    wave: &WaveConfig,
    fconfig: &FunctionalConfig,
    opts: VerifyOptions,
) -> Result<VerificationReport> {
    if (fconfig.r_support - wave.profile.r_support).abs() > 1e-12 * wave.profile.r_support {
        return Err(domain_err!(
            "functional R must match the profile support radius"
        ));
    }
    let policy = |dr: f64| SnapshotPolicy {
        target: opts.snapshot_target,
        depth: Some(wave.profile.r_support - fconfig.r0 + 4.0 * dr),
    };
    let run = run_wave(&WaveConfig {
        snapshots: Some(policy(wave.dr)),
        ..wave.clone()
    })?;
    let companion = match opts.companion_dr {
        Some(dr) => Some(run_wave(&WaveConfig {
            dr,
            snapshots: Some(policy(dr)),
            ..wave.clone()
        })?),
        None => None,
    };
    let a_f = compute_a_f_with_r0(&wave.profile, wave.n, fconfig.r0)?;
    let t_max = match run.estimate.status {
        WaveStatus::BlewUp => opts.t_fraction * run.estimate.t_num,
        WaveStatus::HorizonReached => wave.horizon,
    };
    let inputs = CheckInputs {
        n: wave.n,
        p: wave.p,
        epsilon: wave.epsilon,
        a_f_conservative: a_f.a_f_conservative,
        t_max,
    };
    let check = verify_snapshots(
        &run.snapshots,
        &inputs,
        fconfig,
        companion.as_ref().map(|c| c.snapshots.as_slice()),
    )?;
    Ok(VerificationReport {
        estimate: run.estimate,
        residuals: check.residuals,
        error_quadrature: check.error_quadrature,
        error_time: check.error_time,
        error_grid: check.error_grid,
        trace: check.trace,
    })
}
