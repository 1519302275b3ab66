//! Adaptive integration of the equality models of the inequality classes,
//! with blow-up detection.
//!
//! The equality model sums forcing and (activated) nonlinear term:
//!
//! ```text
//! critical:     H'' = A (t+1)^-1 + 1{t >= T0} (t+1)^-(p+1) ln^-(p-1)(t+1) H^p
//! subcritical:  H'' = A          + 1{t >= T0} (t+1)^(-(n+3)p/2 + (n+1)/2) H^p
//! ```
//!
//! Both terms are nonnegative, so every solution is a member of the matching
//! inequality class. The integrator is a Dormand-Prince 5(4) pair with a PI
//! step controller. Blow-up is surrogated by the first time `H` crosses a
//! large threshold.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain_err, LabError, Result};
use crate::fit::{fit_line, ExcludedRow, FitResult};
use crate::odi::{self, CriticalOdiParams, SubcriticalOdiParams};

/// Right-hand side `(t, H) -> H''`.
pub type RhsFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OdeVariant {
    Critical,
    Subcritical,
}

/// An equality model, or a custom right-hand side measured against the
/// inequalities of `variant`.
#[derive(Clone)]
pub struct OdeSpec {
    pub variant: OdeVariant,
    pub a: f64,
    pub p: f64,
    /// Spatial dimension (subcritical kernel only).
    pub n: u32,
    pub t0: f64,
    pub custom_rhs: Option<RhsFn>,
}

impl fmt::Debug for OdeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeSpec")
            .field("variant", &self.variant)
            .field("a", &self.a)
            .field("p", &self.p)
            .field("n", &self.n)
            .field("t0", &self.t0)
            .field("custom_rhs", &self.custom_rhs.is_some())
            .finish()
    }
}

impl OdeSpec {
    pub fn critical(a: f64, p: f64, t0: f64) -> Result<Self> {
        CriticalOdiParams::new(a, p, t0)?;
        Ok(Self {
            variant: OdeVariant::Critical,
            a,
            p,
            n: 2,
            t0,
            custom_rhs: None,
        })
    }

    pub fn subcritical(a: f64, p: f64, n: u32, t0: f64) -> Result<Self> {
        SubcriticalOdiParams::new(a, p, n, t0)?;
        Ok(Self {
            variant: OdeVariant::Subcritical,
            a,
            p,
            n,
            t0,
            custom_rhs: None,
        })
    }

    /// Replaces the right-hand side; the inequalities of `variant` still
    /// drive [`membership_residuals`].
    pub fn with_custom_rhs<F>(mut self, rhs: F) -> Self
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        self.custom_rhs = Some(Arc::new(rhs));
        self
    }

    pub fn is_custom(&self) -> bool {
        self.custom_rhs.is_some()
    }

    pub fn label(&self) -> &'static str {
        match (self.is_custom(), self.variant) {
            (true, _) => "custom",
            (false, OdeVariant::Critical) => "critical",
            (false, OdeVariant::Subcritical) => "subcritical",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.variant {
            OdeVariant::Critical => CriticalOdiParams::new(self.a, self.p, self.t0).map(|_| ()),
            OdeVariant::Subcritical => {
                SubcriticalOdiParams::new(self.a, self.p, self.n, self.t0).map(|_| ())
            }
        }
    }

    /// Forcing lower bound on `H''`.
    pub fn forcing(&self, t: f64) -> f64 {
        match self.variant {
            OdeVariant::Critical => self.a / (t + 1.0),
            OdeVariant::Subcritical => self.a,
        }
    }

    /// Coefficient of `H^p` in the nonlinear lower bound (meaningful for `t >= T0`).
    pub fn kernel(&self, t: f64) -> f64 {
        let p = self.p;
        match self.variant {
            OdeVariant::Critical => (t + 1.0).powf(-(p + 1.0)) * (t + 1.0).ln().powf(-(p - 1.0)),
            OdeVariant::Subcritical => {
                let n = self.n as f64;
                (t + 1.0).powf(-(n + 3.0) * p / 2.0 + (n + 1.0) / 2.0)
            }
        }
    }

    fn eval(&self, t: f64, h: f64, nonlinear_active: bool) -> f64 {
        if let Some(rhs) = &self.custom_rhs {
            return rhs(t, h);
        }
        let mut value = self.forcing(t);
        if nonlinear_active {
            value += self.kernel(t) * h.abs().powf(self.p);
        }
        value
    }

    fn breakpoints(&self) -> Vec<f64> {
        if self.is_custom() {
            Vec::new()
        } else {
            vec![self.t0]
        }
    }
}

/// The right-hand side of `spec` as a standalone evaluator.
pub fn make_rhs(spec: &OdeSpec) -> Result<RhsFn> {
    spec.validate()?;
    if let Some(rhs) = &spec.custom_rhs {
        return Ok(Arc::clone(rhs));
    }
    let spec = spec.clone();
    Ok(Arc::new(move |t, h| spec.eval(t, h, t >= spec.t0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeCoordinate {
    Physical,
    /// `s = ln(1 + t)`.
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegratorControls {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub blowup_threshold: f64,
    pub max_steps: usize,
    pub time_coordinate: TimeCoordinate,
    /// Rerun at 10x looser tolerances to estimate the error in `t_blow`.
    pub estimate_error: bool,
}

impl Default for IntegratorControls {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            blowup_threshold: 1e30,
            max_steps: 2_000_000,
            time_coordinate: TimeCoordinate::Physical,
            estimate_error: true,
        }
    }
}

impl IntegratorControls {
    /// Log time for critical models, physical time otherwise.
    pub fn for_variant(variant: OdeVariant) -> Self {
        let time_coordinate = match variant {
            OdeVariant::Critical => TimeCoordinate::Log,
            OdeVariant::Subcritical => TimeCoordinate::Physical,
        };
        Self {
            time_coordinate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) || !(self.abs_tol > 0.0) {
            return Err(LabError::Parameter("tolerances must be positive".into()));
        }
        if !(self.blowup_threshold > 1.0) || self.blowup_threshold > OVERFLOW_GUARD {
            return Err(LabError::Parameter(format!(
                "blow-up threshold must lie in (1, {OVERFLOW_GUARD:e}], got {}",
                self.blowup_threshold
            )));
        }
        if self.max_steps == 0 {
            return Err(LabError::Parameter("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// `H` beyond this is treated as overflow.
pub const OVERFLOW_GUARD: f64 = 1e300;
/// Maximum number of stored trace samples.
pub const TRACE_CAPACITY: usize = 4096;
/// Factor applied to the threshold for the sensitivity continuation.
const SENSITIVITY_FACTOR: f64 = 1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlowupStatus {
    BlewUp,
    HorizonReached,
    StepFailure,
}

impl BlowupStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlowupStatus::BlewUp => "blew_up",
            BlowupStatus::HorizonReached => "horizon_reached",
            BlowupStatus::StepFailure => "step_failure",
        }
    }
}

/// `(t, H, H')` in physical time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceSample {
    pub t: f64,
    pub h: f64,
    pub dh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlowupDiagnostics {
    pub steps: usize,
    pub rejected_steps: usize,
    /// Final step size in the integration coordinate.
    pub final_step: f64,
    /// Relative change of `t_blow` when the threshold is raised by 1e30 (capped at the overflow guard).
    pub threshold_sensitivity: f64,
    /// Estimated absolute error of `t_blow` (tolerance rerun plus threshold gap).
    pub error_estimate: Option<f64>,
    /// Overflow forced the blow-up classification.
    pub overflow_guard: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlowupResult {
    pub status: BlowupStatus,
    /// Physical crossing time (or final time when no blow-up).
    pub t_blow: f64,
    /// `ln(t_blow)`.
    pub ln_t_blow: f64,
    pub trace: Vec<TraceSample>,
    pub diagnostics: BlowupDiagnostics,
}

impl BlowupResult {
    pub fn blew_up(&self) -> bool {
        self.status == BlowupStatus::BlewUp
    }
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// b - b* (the 7th stage is FSAL and carries E7)
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

type State = [f64; 2];

fn axpy(y: &State, h: f64, terms: &[(f64, &State)]) -> State {
    let mut out = *y;
    for (c, k) in terms {
        out[0] += h * c * k[0];
        out[1] += h * c * k[1];
    }
    out
}

/// The first-order system in the chosen coordinate: `x` is `t` or `s`,
/// state is `(H, dH/dx)`.
struct System<'a> {
    spec: &'a OdeSpec,
    coord: TimeCoordinate,
    active: bool,
}

impl System<'_> {
    fn deriv(&self, x: f64, y: &State) -> State {
        match self.coord {
            TimeCoordinate::Physical => [y[1], self.spec.eval(x, y[0], self.active)],
            TimeCoordinate::Log => {
                let t = x.exp_m1();
                let e2s = (2.0 * x).exp();
                [y[1], y[1] + e2s * self.spec.eval(t, y[0], self.active)]
            }
        }
    }

    /// One DP5 step; returns the 5th-order solution and the error vector.
    fn step(&self, x: f64, y: &State, k1: &State, h: f64) -> (State, State, State) {
        let k2 = self.deriv(x + C2 * h, &axpy(y, h, &[(A21, k1)]));
        let k3 = self.deriv(x + C3 * h, &axpy(y, h, &[(A31, k1), (A32, &k2)]));
        let k4 = self.deriv(
            x + C4 * h,
            &axpy(y, h, &[(A41, k1), (A42, &k2), (A43, &k3)]),
        );
        let k5 = self.deriv(
            x + C5 * h,
            &axpy(y, h, &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
        );
        let k6 = self.deriv(
            x + h,
            &axpy(
                y,
                h,
                &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            ),
        );
        let y_new = axpy(
            y,
            h,
            &[(B1, k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)],
        );
        let k7 = self.deriv(x + h, &y_new);
        let mut err = [0.0; 2];
        for i in 0..2 {
            err[i] =
                h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        (y_new, err, k7)
    }
}

fn error_norm(err: &State, y0: &State, y1: &State, ctrl: &IntegratorControls) -> f64 {
    let mut acc = 0.0;
    for i in 0..2 {
        let scale = ctrl.abs_tol + ctrl.rel_tol * y0[i].abs().max(y1[i].abs());
        acc += (err[i] / scale).powi(2);
    }
    (acc / 2.0).sqrt()
}

fn to_physical(coord: TimeCoordinate, x: f64) -> f64 {
    match coord {
        TimeCoordinate::Physical => x,
        TimeCoordinate::Log => x.exp_m1(),
    }
}

fn to_coord(coord: TimeCoordinate, t: f64) -> f64 {
    match coord {
        TimeCoordinate::Physical => t,
        TimeCoordinate::Log => t.ln_1p(),
    }
}

/// Physical `(t, H, H')` from a coordinate state.
fn physical_sample(coord: TimeCoordinate, x: f64, y: &State) -> TraceSample {
    match coord {
        TimeCoordinate::Physical => TraceSample {
            t: x,
            h: y[0],
            dh: y[1],
        },
        TimeCoordinate::Log => TraceSample {
            t: x.exp_m1(),
            h: y[0],
            dh: y[1] * (-x).exp(),
        },
    }
}

/// Geometrically thinned trace in `(1 + t)`.
struct TraceBuffer {
    samples: Vec<TraceSample>,
    min_gap: f64,
    last_log: f64,
}

impl TraceBuffer {
    fn new() -> Self {
        Self {
            samples: Vec::new(),
            min_gap: 1e-6,
            last_log: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, s: TraceSample, force: bool) {
        let lg = s.t.ln_1p();
        if let Some(last) = self.samples.last() {
            if s.t <= last.t {
                return;
            }
        }
        if !force && lg - self.last_log < self.min_gap {
            return;
        }
        self.samples.push(s);
        self.last_log = lg;
        if self.samples.len() >= TRACE_CAPACITY {
            let kept: Vec<_> = self.samples.iter().copied().step_by(2).collect();
            self.samples = kept;
            self.min_gap *= 2.0;
        }
    }
}

struct RawRun {
    status: BlowupStatus,
    t_cross: f64,
    t_sensitivity: Option<f64>,
    trace: Vec<TraceSample>,
    steps: usize,
    rejected: usize,
    final_step: f64,
    overflow: bool,
}

/// Finds `h* in (0, h]` with `H(x + h*) = target` by bisection on single steps.
fn locate_crossing(sys: &System, x: f64, y: &State, k1: &State, h: f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, h);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let (y_mid, _, _) = sys.step(x, y, k1, mid);
        if y_mid[0].is_finite() && y_mid[0] < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 4.0 * f64::EPSILON * (x.abs() + hi) {
            break;
        }
    }
    x + 0.5 * (lo + hi)
}

fn integrate_raw(
    spec: &OdeSpec,
    init: (f64, f64),
    ctrl: &IntegratorControls,
    horizon: f64,
    record_trace: bool,
) -> RawRun {
    let coord = ctrl.time_coordinate;
    let x_end = to_coord(coord, horizon);
    let mut y: State = [init.0, init.1];
    let mut x = 0.0;
    let mut breaks: Vec<f64> = spec
        .breakpoints()
        .into_iter()
        .filter(|&b| b > 0.0 && b < horizon)
        .map(|b| to_coord(coord, b))
        .collect();
    breaks.push(x_end);
    // segments end exactly on the breakpoint, so the switch is sharp
    let x_t0 = if spec.is_custom() {
        f64::NEG_INFINITY
    } else {
        to_coord(coord, spec.t0)
    };

    let threshold = ctrl.blowup_threshold;
    let sens_target = (threshold * SENSITIVITY_FACTOR).min(OVERFLOW_GUARD);
    let beta = 0.04;
    let alpha = 0.2 - 0.75 * beta;

    let mut trace = TraceBuffer::new();
    if record_trace {
        trace.push(physical_sample(coord, x, &y), true);
    }
    let mut steps = 0usize;
    let mut rejected = 0usize;
    let mut h = 1e-6 * x_end.abs().clamp(1e-3, 1.0);
    let mut err_prev: f64 = 1e-4;
    let mut t_cross: Option<f64> = None;
    let mut overflow = false;
    let mut seg = 0usize;

    let finish =
        |status, t_cross: f64, t_sens, trace: TraceBuffer, steps, rejected, h, overflow| RawRun {
            status,
            t_cross,
            t_sensitivity: t_sens,
            trace: trace.samples,
            steps,
            rejected,
            final_step: h,
            overflow,
        };

    loop {
        let seg_end = breaks[seg];
        let sys = System {
            spec,
            coord,
            active: x >= x_t0,
        };
        let k1 = sys.deriv(x, &y);
        if steps >= ctrl.max_steps {
            let t = to_physical(coord, x);
            return match t_cross {
                Some(tc) => finish(
                    BlowupStatus::BlewUp,
                    tc,
                    None,
                    trace,
                    steps,
                    rejected,
                    h,
                    overflow,
                ),
                None => finish(
                    BlowupStatus::StepFailure,
                    t,
                    None,
                    trace,
                    steps,
                    rejected,
                    h,
                    overflow,
                ),
            };
        }
        let remaining = seg_end - x;
        let mut last_in_seg = false;
        if h >= remaining {
            h = remaining;
            last_in_seg = true;
        }
        let min_step = 64.0 * f64::EPSILON * x.abs().max(1e-300);
        if h <= min_step {
            let t = to_physical(coord, x);
            return match t_cross {
                Some(tc) => finish(
                    BlowupStatus::BlewUp,
                    tc,
                    Some(t),
                    trace,
                    steps,
                    rejected,
                    h,
                    overflow,
                ),
                None if y[0] > threshold.sqrt() => finish(
                    BlowupStatus::BlewUp,
                    t,
                    None,
                    trace,
                    steps,
                    rejected,
                    h,
                    true,
                ),
                None => finish(
                    BlowupStatus::StepFailure,
                    t,
                    None,
                    trace,
                    steps,
                    rejected,
                    h,
                    overflow,
                ),
            };
        }
        let (y_new, err, _) = sys.step(x, &y, &k1, h);
        let finite = y_new.iter().chain(err.iter()).all(|v| v.is_finite())
            && y_new[0].abs() < OVERFLOW_GUARD;
        if !finite {
            overflow = true;
            rejected += 1;
            h *= 0.25;
            continue;
        }
        let en = error_norm(&err, &y, &y_new, ctrl);
        if en > 1.0 {
            rejected += 1;
            h *= (0.9 * en.powf(-alpha)).max(0.2);
            continue;
        }
        steps += 1;

        if t_cross.is_none() && y_new[0] >= threshold {
            let xc = locate_crossing(&sys, x, &y, &k1, h, threshold);
            t_cross = Some(to_physical(coord, xc));
        }
        if let Some(tc) = t_cross {
            if y_new[0] >= sens_target {
                let xs = locate_crossing(&sys, x, &y, &k1, h, sens_target);
                if record_trace {
                    trace.push(physical_sample(coord, x, &y), true);
                }
                return finish(
                    BlowupStatus::BlewUp,
                    tc,
                    Some(to_physical(coord, xs)),
                    trace,
                    steps,
                    rejected,
                    h,
                    overflow,
                );
            }
        }

        x = if last_in_seg { seg_end } else { x + h };
        y = y_new;
        if record_trace && t_cross.is_none() {
            trace.push(physical_sample(coord, x, &y), false);
        }

        let factor = (0.9 * en.max(1e-10).powf(-alpha) * err_prev.powf(beta)).clamp(0.2, 10.0);
        err_prev = en.max(1e-4);
        h *= factor;

        if last_in_seg {
            seg += 1;
            if seg == breaks.len() {
                let t = to_physical(coord, x);
                if record_trace {
                    trace.push(physical_sample(coord, x, &y), true);
                }
                return match t_cross {
                    Some(tc) => finish(
                        BlowupStatus::BlewUp,
                        tc,
                        Some(t),
                        trace,
                        steps,
                        rejected,
                        h,
                        overflow,
                    ),
                    None => finish(
                        BlowupStatus::HorizonReached,
                        t,
                        None,
                        trace,
                        steps,
                        rejected,
                        h,
                        overflow,
                    ),
                };
            }
        }
    }
}

/// Integrates `spec` from `init = (H(0), H'(0))` until the threshold or `horizon`.
pub fn integrate_blowup(
    spec: &OdeSpec,
    init: (f64, f64),
    ctrl: &IntegratorControls,
    horizon: f64,
) -> Result<BlowupResult> {
    spec.validate()?;
    ctrl.validate()?;
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(domain_err!(
            "horizon must be positive and finite, got {horizon}"
        ));
    }
    if !init.0.is_finite() || !init.1.is_finite() {
        return Err(domain_err!("initial data must be finite"));
    }
    // dH/ds = dH/dt at t = 0, so the initial data carry over unchanged
    let init_coord = init;
    let run = integrate_raw(spec, init_coord, ctrl, horizon, true);
    let threshold_sensitivity = match (run.status, run.t_sensitivity) {
        (BlowupStatus::BlewUp, Some(ts)) => {
            ((ts - run.t_cross) / run.t_cross.abs().max(1e-300)).abs()
        }
        _ => 0.0,
    };
    let error_estimate = if ctrl.estimate_error && run.status == BlowupStatus::BlewUp {
        let loose = IntegratorControls {
            rel_tol: ctrl.rel_tol * 10.0,
            abs_tol: ctrl.abs_tol * 10.0,
            ..*ctrl
        };
        let rerun = integrate_raw(spec, init_coord, &loose, horizon, false);
        (rerun.status == BlowupStatus::BlewUp).then(|| {
            (rerun.t_cross - run.t_cross).abs() + threshold_sensitivity * run.t_cross.abs()
        })
    } else {
        None
    };
    Ok(BlowupResult {
        status: run.status,
        t_blow: run.t_cross,
        ln_t_blow: run.t_cross.ln(),
        trace: run.trace,
        diagnostics: BlowupDiagnostics {
            steps: run.steps,
            rejected_steps: run.rejected,
            final_step: run.final_step,
            threshold_sensitivity,
            error_estimate,
            overflow_guard: run.overflow,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MembershipResiduals {
    /// `min (H'' - forcing)` over the trace.
    pub min_forcing: f64,
    /// `min (H'' - kernel H^p)` over trace samples with `t >= T0`; `None` if there are none.
    pub min_nonlinear: Option<f64>,
    pub samples: usize,
}

/// Evaluates how far a trajectory sits above each lower bound of its class.
pub fn membership_residuals(result: &BlowupResult, spec: &OdeSpec) -> Result<MembershipResiduals> {
    if result.trace.is_empty() {
        return Err(LabError::Data("result carries no trace".into()));
    }
    let rhs = make_rhs(spec)?;
    let mut min_forcing = f64::INFINITY;
    let mut min_nonlinear: Option<f64> = None;
    for s in &result.trace {
        let second = rhs(s.t, s.h);
        min_forcing = min_forcing.min(second - spec.forcing(s.t));
        if s.t >= spec.t0 {
            let r = second - spec.kernel(s.t) * s.h.abs().powf(spec.p);
            min_nonlinear = Some(min_nonlinear.map_or(r, |m: f64| m.min(r)));
        }
    }
    Ok(MembershipResiduals {
        min_forcing,
        min_nonlinear,
        samples: result.trace.len(),
    })
}

/// Default physical horizon for an equality-model run: twice the asymptotic bound.
pub fn default_horizon(spec: &OdeSpec) -> Result<f64> {
    match spec.variant {
        OdeVariant::Critical => {
            let ln_bound = odi::predict_lifespan_critical(spec.a, spec.p)?;
            Ok((2.0 * ln_bound).min(700.0).exp_m1())
        }
        OdeVariant::Subcritical => {
            Ok(2.0 * odi::predict_lifespan_subcritical(spec.a, spec.n, spec.p)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OdeSweepRow {
    pub variant: String,
    pub n: u32,
    pub p: f64,
    pub a: f64,
    pub t0: f64,
    pub t_blow: f64,
    pub ln_t_blow: f64,
    pub status: BlowupStatus,
    /// Critical: `ln(t_blow) A^{p-1}`. Subcritical: fit residual of `ln t_blow`.
    pub product_or_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OdeSweep {
    pub rows: Vec<OdeSweepRow>,
    /// Subcritical runs: `ln t_blow` against `ln A`.
    pub fit: Option<FitResult>,
    /// Target slope `-2(p-1)/(2-(n-1)(p-1))` (subcritical only).
    pub target_slope: Option<f64>,
    /// Critical runs: `ln(t_blow) A^{p-1}` ordered by decreasing `A`.
    pub products: Option<Vec<f64>>,
    /// Products nondecreasing as `A` decreases.
    pub products_monotone: Option<bool>,
    pub warnings: Vec<String>,
}

/// Runs the equality model of `base` at every `A` in `a_values` (in parallel).
///
/// `horizon` defaults to [`default_horizon`] per member.
pub fn sweep_ode(
    base: &OdeSpec,
    a_values: &[f64],
    ctrl: &IntegratorControls,
    horizon: Option<f64>,
) -> Result<OdeSweep> {
    if a_values.len() < 3 {
        return Err(LabError::Parameter(format!(
            "an ODE sweep needs at least 3 A values, got {}",
            a_values.len()
        )));
    }
    let specs: Vec<OdeSpec> = a_values
        .iter()
        .map(|&a| {
            let spec = OdeSpec { a, ..base.clone() };
            spec.validate().map(|_| spec)
        })
        .collect::<Result<_>>()?;
    let results: Vec<Result<BlowupResult>> = specs
        .par_iter()
        .map(|spec| {
            let h = match horizon {
                Some(h) => h,
                None => default_horizon(spec)?,
            };
            integrate_blowup(spec, (0.0, 0.0), ctrl, h)
        })
        .collect();

    let mut rows = Vec::with_capacity(specs.len());
    let mut warnings = Vec::new();
    let mut excluded = Vec::new();
    for (i, (spec, res)) in specs.iter().zip(results).enumerate() {
        let res = res?;
        if !res.blew_up() {
            let msg = format!("A = {} did not blow up ({})", spec.a, res.status.as_str());
            log::warn!("{msg}");
            warnings.push(msg.clone());
            excluded.push(ExcludedRow {
                index: i,
                reason: msg,
            });
        }
        rows.push(OdeSweepRow {
            variant: spec.label().to_string(),
            n: spec.n,
            p: spec.p,
            a: spec.a,
            t0: spec.t0,
            t_blow: res.t_blow,
            ln_t_blow: res.ln_t_blow,
            status: res.status,
            product_or_residual: f64::NAN,
        });
    }

    let mut sweep = OdeSweep {
        rows,
        fit: None,
        target_slope: None,
        products: None,
        products_monotone: None,
        warnings,
    };
    match base.variant {
        OdeVariant::Subcritical => {
            let pts: Vec<(f64, f64)> = sweep
                .rows
                .iter()
                .filter(|r| r.status == BlowupStatus::BlewUp)
                .map(|r| (r.a.ln(), r.ln_t_blow))
                .collect();
            let mut fit = fit_line(&pts)?;
            fit.excluded = excluded;
            for row in sweep
                .rows
                .iter_mut()
                .filter(|r| r.status == BlowupStatus::BlewUp)
            {
                row.product_or_residual = row.ln_t_blow - fit.predict(row.a.ln());
            }
            sweep.target_slope = Some(-odi::subcritical_exponent(base.n, base.p));
            sweep.fit = Some(fit);
        }
        OdeVariant::Critical => {
            for row in sweep
                .rows
                .iter_mut()
                .filter(|r| r.status == BlowupStatus::BlewUp)
            {
                row.product_or_residual = row.ln_t_blow * row.a.powf(row.p - 1.0);
            }
            let mut ordered: Vec<&OdeSweepRow> = sweep
                .rows
                .iter()
                .filter(|r| r.status == BlowupStatus::BlewUp)
                .collect();
            ordered.sort_by(|a, b| b.a.total_cmp(&a.a));
            let products: Vec<f64> = ordered.iter().map(|r| r.product_or_residual).collect();
            sweep.products_monotone = Some(products.windows(2).all(|w| w[1] >= w[0]));
            sweep.products = Some(products);
        }
    }
    Ok(sweep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cubic_spec() -> OdeSpec {
        OdeSpec::critical(1.0, 2.0, 1.0)
            .unwrap()
            .with_custom_rhs(|_, h| 2.0 * h * h * h)
    }

    #[test]
    fn custom_cubic_blows_up_at_one() {
        let ctrl = IntegratorControls {
            blowup_threshold: 1e12,
            ..Default::default()
        };
        let res = integrate_blowup(&cubic_spec(), (1.0, 1.0), &ctrl, 10.0).unwrap();
        assert!(res.blew_up());
        // H = 1/(1-t) crosses 1e12 at 1 - 1e-12
        assert!((res.t_blow - 1.0).abs() < 1e-3, "t_blow = {}", res.t_blow);
        assert!(res.trace.windows(2).all(|w| w[0].t < w[1].t));
        // compare in t, which stays well conditioned near the singularity
        for s in &res.trace {
            assert!(
                (s.t - (1.0 - 1.0 / s.h)).abs() < 1e-7,
                "t = {}, H = {}",
                s.t,
                s.h
            );
        }
    }

    #[test]
    fn subcritical_forcing_phase_is_quadratic() {
        // t < T0: H = A t^2 / 2
        let spec = OdeSpec::subcritical(0.7, 2.0, 2, 5.0).unwrap();
        let res = integrate_blowup(&spec, (0.0, 0.0), &Default::default(), 4.0).unwrap();
        assert_eq!(res.status, BlowupStatus::HorizonReached);
        for s in res.trace.iter().filter(|s| s.t > 0.0) {
            assert_relative_eq!(s.h, 0.35 * s.t * s.t, max_relative = 1e-7);
        }
    }

    #[test]
    fn critical_forcing_phase_closed_form() {
        // t < T0: H = A((t+1) ln(t+1) - t)
        let spec = OdeSpec::critical(0.3, 2.0, 50.0).unwrap();
        for coord in [TimeCoordinate::Physical, TimeCoordinate::Log] {
            let ctrl = IntegratorControls {
                time_coordinate: coord,
                ..Default::default()
            };
            let res = integrate_blowup(&spec, (0.0, 0.0), &ctrl, 40.0).unwrap();
            assert_eq!(res.status, BlowupStatus::HorizonReached);
            let last = res.trace.last().unwrap();
            assert_relative_eq!(last.t, 40.0, max_relative = 1e-12);
            for s in res.trace.iter().filter(|s| s.t > 1e-3) {
                let exact = 0.3 * ((s.t + 1.0) * s.t.ln_1p() - s.t);
                assert_relative_eq!(s.h, exact, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn make_rhs_matches_model() {
        let spec = OdeSpec::subcritical(1.0, 2.0, 2, 0.125).unwrap();
        let rhs = make_rhs(&spec).unwrap();
        assert_eq!(rhs(0.1, 3.0), 1.0);
        assert_relative_eq!(
            rhs(1.0, 3.0),
            1.0 + 2f64.powf(-3.5) * 9.0,
            max_relative = 1e-15
        );
        let crit = OdeSpec::critical(2.0, 2.0, 0.5).unwrap();
        let rhs = make_rhs(&crit).unwrap();
        let t = 1.5f64;
        assert_relative_eq!(
            rhs(t, 4.0),
            2.0 / 2.5 + 2.5f64.powi(-3) / 2.5f64.ln() * 16.0,
            max_relative = 1e-15
        );
    }

    #[test]
    fn short_horizon_reaches_horizon() {
        let spec = OdeSpec::subcritical(1e-3, 2.0, 2, 0.125).unwrap();
        let res = integrate_blowup(&spec, (0.0, 0.0), &Default::default(), 0.001).unwrap();
        assert_eq!(res.status, BlowupStatus::HorizonReached);
        let crit = OdeSpec::critical(1e-3, 2.0, 0.125).unwrap();
        let ctrl = IntegratorControls::for_variant(OdeVariant::Critical);
        let res = integrate_blowup(&crit, (0.0, 0.0), &ctrl, 0.001).unwrap();
        assert_eq!(res.status, BlowupStatus::HorizonReached);
    }

    #[test]
    fn input_validation() {
        let spec = OdeSpec::subcritical(1.0, 2.0, 2, 0.125).unwrap();
        let ctrl = IntegratorControls::default();
        assert!(integrate_blowup(&spec, (0.0, 0.0), &ctrl, 0.0).is_err());
        assert!(integrate_blowup(&spec, (f64::NAN, 0.0), &ctrl, 1.0).is_err());
        let bad = IntegratorControls {
            blowup_threshold: 0.5,
            ..ctrl
        };
        assert!(integrate_blowup(&spec, (0.0, 0.0), &bad, 1.0).is_err());
        assert!(sweep_ode(&spec, &[1.0], &ctrl, None).is_err());
    }

    #[test]
    fn equality_model_is_a_class_member() {
        let spec = OdeSpec::subcritical(1.0, 2.0, 2, 0.125).unwrap();
        let res = integrate_blowup(&spec, (0.0, 0.0), &Default::default(), 1e6).unwrap();
        assert!(res.blew_up());
        assert!(res.t_blow + 1.0 <= 230_400.0);
        let m = membership_residuals(&res, &spec).unwrap();
        assert!(m.min_forcing >= -1e-12);
        assert!(m.min_nonlinear.unwrap() >= -1e-12);
    }

    #[test]
    fn residuals_detect_violations() {
        let spec = OdeSpec::critical(1.0, 2.0, 0.5)
            .unwrap()
            .with_custom_rhs(|_, _| 0.0);
        let res = integrate_blowup(&spec, (0.0, 0.0), &Default::default(), 2.0).unwrap();
        let m = membership_residuals(&res, &spec).unwrap();
        // H'' = 0 sits below A/(t+1); the gap is largest at t = 0
        assert_relative_eq!(m.min_forcing, -1.0, max_relative = 1e-12);
    }

    #[test]
    fn nonlinear_residual_only_after_activation() {
        let spec = OdeSpec::critical(1.0, 2.0, 50.0).unwrap();
        let ctrl = IntegratorControls::for_variant(OdeVariant::Critical);
        let res = integrate_blowup(&spec, (0.0, 0.0), &ctrl, 10.0).unwrap();
        let m = membership_residuals(&res, &spec).unwrap();
        assert!(m.min_nonlinear.is_none());
    }
}
