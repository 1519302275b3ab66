//! Method-of-lines solver for radial solutions of `u_tt - Δu = |∂_r u|^p`.
//!
//! In radial form the equation reads
//!
//! ```text
//! u_tt = u_rr + (n-1)/r u_r + |u_r|^p,      u_tt = n u_rr at r = 0,
//! ```
//!
//! discretized with centered differences on a uniform grid and advanced by
//! classical RK4 with `dt = cfl * dr`. Only nodes inside the discrete light
//! cone `r <= t + R + 2 dr` are updated; the rest stay exactly zero.
//!
//! With [`DomainPolicy::FrontWindow`] the nodes more than `width` behind the
//! front are frozen and dropped from storage. The strip `[t - width, t + R]`
//! is a domain of determinacy of the front and the semi-discrete group
//! velocity is at most one, so the front evolves exactly as on the full grid.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain_err, LabError, Result};
use crate::fit::{fit_line, ExcludedRow, FitResult};
use crate::functional;
use crate::odi;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileShape {
    /// `exp(-1 / (1 - (r/R)^2))` on `r < R`.
    StandardBump,
    /// The same bump rescaled to the shell `R/2 < r < R`.
    ShellBump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GMode {
    Zero,
    EqualToF,
}

/// Radial initial profile `f` (and `g`) supported in `r <= R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DataProfile {
    pub shape: ProfileShape,
    pub r_support: f64,
    pub amplitude: f64,
    pub g_mode: GMode,
}

impl DataProfile {
    pub fn standard(r_support: f64, amplitude: f64) -> Self {
        Self {
            shape: ProfileShape::StandardBump,
            r_support,
            amplitude,
            g_mode: GMode::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_support > 0.0) || !self.r_support.is_finite() {
            return Err(domain_err!(
                "support radius must be positive, got {}",
                self.r_support
            ));
        }
        if !(self.amplitude > 0.0) || !self.amplitude.is_finite() {
            return Err(domain_err!(
                "amplitude must be positive, got {}",
                self.amplitude
            ));
        }
        Ok(())
    }

    pub fn f(&self, r: f64) -> f64 {
        let r = r.abs();
        let s = match self.shape {
            ProfileShape::StandardBump => r / self.r_support,
            ProfileShape::ShellBump => (4.0 * r - 3.0 * self.r_support) / self.r_support,
        };
        if s.abs() >= 1.0 {
            0.0
        } else {
            self.amplitude * (-1.0 / (1.0 - s * s)).exp()
        }
    }

    pub fn g(&self, r: f64) -> f64 {
        match self.g_mode {
            GMode::Zero => 0.0,
            GMode::EqualToF => self.f(r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainPolicy {
    /// Evolve every node inside the light cone.
    Full,
    /// Evolve only nodes with `r >= t - width`.
    FrontWindow { width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SnapshotPolicy {
    /// Minimum number of stored snapshots over a run (main tier).
    pub target: usize,
    /// Store only nodes with `r >= t + R - depth` (plus a stencil margin).
    pub depth: Option<f64>,
}

impl Default for SnapshotPolicy {
    fn default() -> Self {
        Self {
            target: 256,
            depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaveConfig {
    pub n: u32,
    pub p: f64,
    pub epsilon: f64,
    pub profile: DataProfile,
    pub dr: f64,
    pub cfl: f64,
    /// Applied to `max |∂_r u|`.
    pub blowup_threshold: f64,
    pub horizon: f64,
    pub domain: DomainPolicy,
    /// Test hook: `false` drops `|u_r|^p`.
    pub nonlinear: bool,
    pub snapshots: Option<SnapshotPolicy>,
}

impl WaveConfig {
    /// Full domain, `cfl = 0.5`, threshold `1e6`, no snapshots.
    pub fn new(n: u32, p: f64, epsilon: f64, profile: DataProfile, dr: f64, horizon: f64) -> Self {
        Self {
            n,
            p,
            epsilon,
            profile,
            dr,
            cfl: 0.5,
            blowup_threshold: 1e6,
            horizon,
            domain: DomainPolicy::Full,
            nonlinear: true,
            snapshots: None,
        }
    }

    pub fn r_max(&self) -> f64 {
        self.horizon + self.profile.r_support + 4.0 * self.dr
    }

    pub fn dt(&self) -> f64 {
        self.cfl * self.dr
    }

    fn node_count(&self) -> usize {
        (self.r_max() / self.dr).ceil() as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(domain_err!("dimension must be at least 2, got {}", self.n));
        }
        let pc = odi::critical_exponent(self.n)?;
        if !(self.p > 1.0) || self.p > pc * (1.0 + 1e-12) {
            return Err(domain_err!(
                "p must lie in (1, {pc}] for n = {}, got {}",
                self.n,
                self.p
            ));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(domain_err!(
                "epsilon must be positive, got {}",
                self.epsilon
            ));
        }
        self.profile.validate()?;
        if !(self.dr > 0.0) || self.profile.r_support / self.dr < 50.0 - 1e-9 {
            return Err(LabError::Parameter(format!(
                "grid must resolve the support (R/dr >= 50), got R/dr = {}",
                self.profile.r_support / self.dr
            )));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(LabError::Parameter(format!(
                "cfl must lie in (0, 1], got {}",
                self.cfl
            )));
        }
        if !(self.blowup_threshold > 0.0) || !self.blowup_threshold.is_finite() {
            return Err(LabError::Parameter(
                "blow-up threshold must be positive".into(),
            ));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(LabError::Parameter(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if let DomainPolicy::FrontWindow { width } = self.domain {
            if !(width >= 2.0 * self.profile.r_support) {
                return Err(LabError::Parameter(format!(
                    "front window must be at least 2R wide, got {width}"
                )));
            }
        }
        if let Some(s) = &self.snapshots {
            if s.target < 2 {
                return Err(LabError::Parameter(
                    "snapshot target must be at least 2".into(),
                ));
            }
            if let Some(d) = s.depth {
                if !(d > 0.0) {
                    return Err(LabError::Parameter(
                        "snapshot depth must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Radial field on the uniform grid `r_i = i dr`.
///
/// Storage covers global nodes `offset .. offset + u.len()`. Nodes past the
/// end are zero; nodes below `offset` are unknown (frozen or not stored).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialField {
    pub dr: f64,
    pub offset: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub t: f64,
    pub support_radius: f64,
}

impl RadialField {
    /// Samples `u = fu(r)`, `v = fv(r)` on `0..=r_max`, zeroing `r > support_radius`.
    pub fn from_fn(
        dr: f64,
        r_max: f64,
        t: f64,
        support_radius: f64,
        fu: impl Fn(f64) -> f64,
        fv: impl Fn(f64) -> f64,
    ) -> Self {
        let count = (r_max / dr).floor() as usize + 1;
        let (mut u, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for i in 0..count {
            let r = i as f64 * dr;
            if r <= support_radius * (1.0 + 1e-14) {
                u.push(fu(r));
                v.push(fv(r));
            } else {
                u.push(0.0);
                v.push(0.0);
            }
        }
        Self {
            dr,
            offset: 0,
            u,
            v,
            t,
            support_radius,
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Smallest radius with stored data.
    pub fn r_start(&self) -> f64 {
        self.offset as f64 * self.dr
    }

    pub fn r_grid(&self) -> Vec<f64> {
        (0..self.u.len())
            .map(|j| (self.offset + j) as f64 * self.dr)
            .collect()
    }

    /// `u` at global node `i` (zero past storage).
    pub fn u_node(&self, i: usize) -> f64 {
        i.checked_sub(self.offset)
            .and_then(|j| self.u.get(j))
            .copied()
            .unwrap_or(0.0)
    }

    /// Cubic Lagrange interpolation of `u`; stencils never cross the support
    /// node or the storage start, and `u = 0` from `support_radius` on.
    pub fn u_at(&self, r: f64) -> f64 {
        if r >= self.support_radius || self.u.is_empty() {
            return 0.0;
        }
        let x = r / self.dr;
        let last = ((self.support_radius / self.dr + 1e-9).floor() as usize)
            .min(self.offset + self.u.len() - 1);
        let first = self.offset;
        if last < first + 3 {
            return self.u_node((x.round() as usize).clamp(first, last));
        }
        let base = (x.floor() as isize - 1).clamp(first as isize, last as isize - 3) as usize;
        let s = x - base as f64;
        let j = base - self.offset;
        let (u0, u1, u2, u3) = (self.u[j], self.u[j + 1], self.u[j + 2], self.u[j + 3]);
        let (a, b, c, d) = (s, s - 1.0, s - 2.0, s - 3.0);
        -u0 * b * c * d / 6.0 + u1 * a * c * d / 2.0 - u2 * a * b * d / 2.0 + u3 * a * b * c / 6.0
    }

    /// Copy restricted to nodes with `r >= r_from` (rounded down to a node).
    pub fn restricted(&self, r_from: f64) -> RadialField {
        let i_from = ((r_from / self.dr).floor().max(0.0) as usize).max(self.offset);
        let j = (i_from - self.offset).min(self.u.len());
        RadialField {
            dr: self.dr,
            offset: self.offset + j,
            u: self.u[j..].to_vec(),
            v: self.v[j..].to_vec(),
            t: self.t,
            support_radius: self.support_radius,
        }
    }
}

/// Discrete energy `∫ (v^2 + u_r^2) r^{n-1} dr` (trapezoid, centered `u_r`).
///
/// Requires storage from the origin.
pub fn discrete_energy(field: &RadialField, n: u32) -> Result<f64> {
    if field.offset != 0 {
        return Err(LabError::Data(
            "energy needs a field stored from r = 0".into(),
        ));
    }
    let dr = field.dr;
    let m = field.u.len();
    let mut e = 0.0;
    for i in 1..m {
        let up = if i + 1 < m { field.u[i + 1] } else { 0.0 };
        let ur = (up - field.u[i - 1]) / (2.0 * dr);
        let w = if i + 1 == m { 0.5 } else { 1.0 };
        e += w * (field.v[i].powi(2) + ur * ur) * (i as f64 * dr).powi(n as i32 - 1);
    }
    Ok(e * dr)
}

/// `t = 0` field `u = ε f`, `v = ε g`, after checking `A_f > 0`.
pub fn make_initial_data(config: &WaveConfig) -> Result<RadialField> {
    config.validate()?;
    let af = functional::compute_a_f(&config.profile, config.n)?;
    log::debug!("A_f = {} (conservative {})", af.a_f, af.a_f_conservative);
    let prof = config.profile;
    let eps = config.epsilon;
    let r_max = (prof.r_support + 4.0 * config.dr).min(config.r_max());
    Ok(RadialField::from_fn(
        config.dr,
        r_max,
        0.0,
        prof.r_support,
        |r| eps * prof.f(r),
        |r| eps * prof.g(r),
    ))
}

#[derive(Debug, Clone, Copy)]
enum Power {
    Two,
    OneHalf,
    Three,
    General(f64),
    Off,
}

impl Power {
    fn new(p: f64, nonlinear: bool) -> Self {
        if !nonlinear {
            Power::Off
        } else if p == 2.0 {
            Power::Two
        } else if p == 1.5 {
            Power::OneHalf
        } else if p == 3.0 {
            Power::Three
        } else {
            Power::General(p)
        }
    }
}

/// RK4 stepper with reusable buffers. Buffers with ghosts hold nodes
/// `lo-1 ..= hi+1`; the others hold `lo ..= hi`.
pub struct Stepper {
    n: f64,
    dr: f64,
    dt: f64,
    r_support: f64,
    node_count: usize,
    domain: DomainPolicy,
    power: Power,
    yu: Vec<f64>,
    yv: Vec<f64>,
    tu: Vec<f64>,
    tv: Vec<f64>,
    ku: Vec<f64>,
    kv: Vec<f64>,
    au: Vec<f64>,
    av: Vec<f64>,
}

/// Diagnostics of the state at the start of a step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub max_grad: f64,
    pub min_u: f64,
    /// The state after the step is finite.
    pub finite: bool,
}

const DRAIN_CHUNK: usize = 4096;

impl Stepper {
    pub fn new(config: &WaveConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            n: config.n as f64,
            dr: config.dr,
            dt: config.dt(),
            r_support: config.profile.r_support,
            node_count: config.node_count(),
            domain: config.domain,
            power: Power::new(config.p, config.nonlinear),
            yu: Vec::new(),
            yv: Vec::new(),
            tu: Vec::new(),
            tv: Vec::new(),
            ku: Vec::new(),
            kv: Vec::new(),
            au: Vec::new(),
            av: Vec::new(),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn deriv(&mut self, from_tmp: bool, lo: usize) -> f64 {
        match self.power {
            Power::Two => self.deriv_with(from_tmp, lo, |a| a * a),
            Power::OneHalf => self.deriv_with(from_tmp, lo, |a| a * a.sqrt()),
            Power::Three => self.deriv_with(from_tmp, lo, |a| a * a * a),
            Power::General(p) => self.deriv_with(from_tmp, lo, |a| a.powf(p)),
            Power::Off => self.deriv_with(from_tmp, lo, |_| 0.0),
        }
    }

    /// Fills `ku, kv` and returns `max |u_r|`.
    #[inline(always)]
    fn deriv_with<F: Fn(f64) -> f64>(&mut self, from_tmp: bool, lo: usize, pow: F) -> f64 {
        let (u, v) = if from_tmp {
            (&self.tu, &self.tv)
        } else {
            (&self.yu, &self.yv)
        };
        let m = self.ku.len();
        let inv_dr2 = 1.0 / (self.dr * self.dr);
        let inv_2dr = 0.5 / self.dr;
        let geo = (self.n - 1.0) / self.dr;
        let mut max_grad: f64 = 0.0;
        let mut start = 0;
        if lo == 0 {
            self.ku[0] = v[1];
            self.kv[0] = self.n * 2.0 * (u[2] - u[1]) * inv_dr2;
            start = 1;
        }
        let ku = &mut self.ku[start..m];
        let kv = &mut self.kv[start..m];
        for (k, (dku, dkv)) in ku.iter_mut().zip(kv.iter_mut()).enumerate() {
            let j = start + k;
            let e = j + 1;
            let (um, u0, up) = (u[e - 1], u[e], u[e + 1]);
            let ur = (up - um) * inv_2dr;
            let a = ur.abs();
            if a > max_grad {
                max_grad = a;
            }
            *dku = v[e];
            *dkv = (up - 2.0 * u0 + um) * inv_dr2 + geo / (lo + j) as f64 * ur + pow(a);
        }
        max_grad
    }

    /// Advances `field` by one step.
    pub fn step(&mut self, field: &mut RadialField) -> StepInfo {
        let dr = self.dr;
        let dt = self.dt;
        let t_end = field.t + dt;
        let hi = (((t_end + self.r_support) / dr).floor() as usize + 2).min(self.node_count - 2);
        let mut lo = match self.domain {
            DomainPolicy::Full => 0,
            DomainPolicy::FrontWindow { width } => {
                ((field.t - width) / dr).floor().max(0.0) as usize
            }
        };
        if field.offset > 0 {
            lo = lo.max(field.offset + 1);
        }
        lo = lo.min(hi);
        let m = hi - lo + 1;
        let end = hi + 2 - field.offset;
        if field.u.len() < end {
            field.u.resize(end, 0.0);
            field.v.resize(end, 0.0);
        }

        for buf in [&mut self.yu, &mut self.yv, &mut self.tu, &mut self.tv] {
            buf.resize(m + 2, 0.0);
        }
        for buf in [&mut self.ku, &mut self.kv, &mut self.au, &mut self.av] {
            buf.resize(m, 0.0);
        }
        let j0 = lo - field.offset;
        self.yu[1..=m].copy_from_slice(&field.u[j0..j0 + m]);
        self.yv[1..=m].copy_from_slice(&field.v[j0..j0 + m]);
        self.yu[m + 1] = field.u[j0 + m];
        self.yv[m + 1] = field.v[j0 + m];
        if lo > 0 {
            self.yu[0] = field.u[j0 - 1];
            self.yv[0] = field.v[j0 - 1];
        } else {
            self.yu[0] = 0.0;
            self.yv[0] = 0.0;
        }
        self.tu[0] = self.yu[0];
        self.tv[0] = self.yv[0];
        self.tu[m + 1] = self.yu[m + 1];
        self.tv[m + 1] = self.yv[m + 1];
        let min_u = self.yu[1..=m].iter().copied().fold(f64::INFINITY, f64::min);

        let max_grad = self.deriv(false, lo);
        self.au.copy_from_slice(&self.ku);
        self.av.copy_from_slice(&self.kv);
        for (c, w) in [(0.5, 2.0), (0.5, 2.0), (1.0, 1.0)] {
            for j in 0..m {
                self.tu[j + 1] = self.yu[j + 1] + c * dt * self.ku[j];
                self.tv[j + 1] = self.yv[j + 1] + c * dt * self.kv[j];
            }
            self.deriv(true, lo);
            for j in 0..m {
                self.au[j] += w * self.ku[j];
                self.av[j] += w * self.kv[j];
            }
        }
        let mut check = 0.0;
        let h6 = dt / 6.0;
        for j in 0..m {
            let nu = self.yu[j + 1] + h6 * self.au[j];
            let nv = self.yv[j + 1] + h6 * self.av[j];
            field.u[j0 + j] = nu;
            field.v[j0 + j] = nv;
            check += nu + nv;
        }
        field.t = t_end;

        // support: scan down from the top of the update range
        let top = (hi - field.offset).min(field.u.len() - 1);
        let last = (0..=top)
            .rev()
            .find(|&j| field.u[j] != 0.0 || field.v[j] != 0.0);
        field.support_radius = last.map_or(field.r_start(), |j| (field.offset + j) as f64 * dr);

        if lo > field.offset + DRAIN_CHUNK {
            let cut = lo - 1 - field.offset;
            field.u.drain(..cut);
            field.v.drain(..cut);
            field.offset += cut;
        }
        StepInfo {
            max_grad,
            min_u,
            finite: check.is_finite(),
        }
    }
}

/// Applies one step to `field` (allocates a fresh stepper).
pub fn step(field: &mut RadialField, config: &WaveConfig) -> Result<StepInfo> {
    let mut stepper = Stepper::new(config)?;
    Ok(stepper.step(field))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveStatus {
    BlewUp,
    HorizonReached,
}

impl WaveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            WaveStatus::BlewUp => "blew_up",
            WaveStatus::HorizonReached => "horizon_reached",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LifespanEstimate {
    pub status: WaveStatus,
    pub t_num: f64,
    /// Relative change of `T_num` when the threshold is raised tenfold.
    pub threshold_sensitivity: f64,
    /// Relative change of `T_num` when `dr` is halved (when computed).
    pub resolution_sensitivity: Option<f64>,
    /// Non-finite values appeared before the threshold; `t_num` is the last stable time.
    pub step_failure: bool,
    pub steps: u64,
    /// Minimum of `u` over all updated nodes and times.
    pub min_u: f64,
    /// Maximum of `support_radius - (t + R)` over the run.
    pub max_support_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaveRun {
    pub estimate: LifespanEstimate,
    #[serde(skip)]
    pub snapshots: Vec<RadialField>,
    pub a_f: functional::AfValues,
}

/// Snapshot store: every step while `t <= R`, then a uniform stride thinned
/// by two whenever it holds `2 * target` entries.
struct SnapshotStore {
    policy: SnapshotPolicy,
    r_support: f64,
    early: Vec<RadialField>,
    main: Vec<(u64, RadialField)>,
    stride: u64,
}

impl SnapshotStore {
    fn new(policy: SnapshotPolicy, r_support: f64) -> Self {
        Self {
            policy,
            r_support,
            early: Vec::new(),
            main: Vec::new(),
            stride: 1,
        }
    }

    fn take(&self, field: &RadialField) -> RadialField {
        match self.policy.depth {
            Some(d) => field.restricted(field.t + self.r_support - d - 4.0 * field.dr),
            None => field.clone(),
        }
    }

    fn offer(&mut self, step: u64, field: &RadialField) {
        if field.t <= self.r_support {
            self.early.push(self.take(field));
            return;
        }
        if !step.is_multiple_of(self.stride) {
            return;
        }
        self.main.push((step, self.take(field)));
        if self.main.len() >= 2 * self.policy.target {
            self.stride *= 2;
            let stride = self.stride;
            self.main.retain(|(s, _)| s % stride == 0);
        }
    }

    fn finish(self) -> Vec<RadialField> {
        let mut out = self.early;
        out.extend(self.main.into_iter().map(|(_, f)| f));
        out
    }
}

/// Evolves `config` and estimates the lifespan, storing snapshots if requested.
pub fn run_wave(config: &WaveConfig) -> Result<WaveRun> {
    let a_f = functional::compute_a_f(&config.profile, config.n)?;
    let mut field = make_initial_data(config)?;
    let mut stepper = Stepper::new(config)?;
    let dt = stepper.dt();
    let r_support = config.profile.r_support;
    let threshold = config.blowup_threshold;
    let mut store = config.snapshots.map(|p| SnapshotStore::new(p, r_support));

    let mut steps: u64 = 0;
    let mut min_u = f64::INFINITY;
    let mut max_excess = field.support_radius - r_support;
    let mut prev: Option<(f64, f64)> = None;
    let mut crossing: Option<f64> = None;
    let mut step_failure = false;
    let mut t_sens: Option<f64> = None;

    let log_cross = |(t0, m0): (f64, f64), (t1, m1): (f64, f64), level: f64| -> f64 {
        if m0 <= 0.0 || m1 <= m0 {
            return t1;
        }
        let w = ((level.ln() - m0.ln()) / (m1.ln() - m0.ln())).clamp(0.0, 1.0);
        t0 + w * (t1 - t0)
    };

    let mut last_stable = 0.0;
    loop {
        if let Some(s) = store.as_mut() {
            s.offer(steps, &field);
        }
        let t = field.t;
        let info = stepper.step(&mut field);
        let m = info.max_grad;
        min_u = min_u.min(info.min_u);
        if crossing.is_none() && m >= threshold {
            crossing = Some(prev.map_or(t, |p| log_cross(p, (t, m), threshold)));
        }
        if crossing.is_some() && m >= 10.0 * threshold {
            t_sens = Some(prev.map_or(t, |p| log_cross(p, (t, m), 10.0 * threshold)));
            break;
        }
        if !info.finite {
            // the state at t was the last finite one
            if crossing.is_none() {
                step_failure = true;
                last_stable = t;
            } else {
                t_sens = Some(t);
            }
            break;
        }
        steps += 1;
        prev = Some((t, m));
        max_excess = max_excess.max(field.support_radius - (field.t + r_support));
        if crossing.is_none() && field.t >= config.horizon - 0.5 * dt {
            break;
        }
    }

    let (status, t_num) = match (crossing, step_failure) {
        (Some(tc), _) => (WaveStatus::BlewUp, tc),
        (None, true) => {
            log::warn!("non-finite state before the threshold after t = {last_stable}");
            (WaveStatus::BlewUp, last_stable)
        }
        (None, false) => (WaveStatus::HorizonReached, field.t.min(config.horizon)),
    };
    let threshold_sensitivity = match (status, t_sens) {
        (WaveStatus::BlewUp, Some(ts)) => ((ts - t_num) / t_num).abs(),
        _ => 0.0,
    };
    Ok(WaveRun {
        estimate: LifespanEstimate {
            status,
            t_num,
            threshold_sensitivity,
            resolution_sensitivity: None,
            step_failure,
            steps,
            min_u,
            max_support_excess: max_excess,
        },
        snapshots: store.map(SnapshotStore::finish).unwrap_or_default(),
        a_f,
    })
}

/// Lifespan estimate without snapshots.
pub fn detect_lifespan(config: &WaveConfig) -> Result<LifespanEstimate> {
    let cfg = WaveConfig {
        snapshots: None,
        ..config.clone()
    };
    Ok(run_wave(&cfg)?.estimate)
}

/// Runs at `dr` and `dr/2` and fills `resolution_sensitivity`.
pub fn detect_lifespan_with_resolution(config: &WaveConfig) -> Result<LifespanEstimate> {
    let fine = WaveConfig {
        dr: config.dr / 2.0,
        snapshots: None,
        ..config.clone()
    };
    let (base, refined) = rayon::join(|| detect_lifespan(config), || detect_lifespan(&fine));
    let (mut base, refined) = (base?, refined?);
    if base.status == WaveStatus::BlewUp && refined.status == WaveStatus::BlewUp {
        base.resolution_sensitivity = Some(((refined.t_num - base.t_num) / base.t_num).abs());
    }
    Ok(base)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdeSweepRow {
    pub n: u32,
    pub p: f64,
    pub epsilon: f64,
    pub t_num: f64,
    pub status: WaveStatus,
    pub threshold_sensitivity: f64,
    pub step_failure: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Critical,
    Subcritical,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdeSweep {
    pub regime: Regime,
    pub rows: Vec<PdeSweepRow>,
    /// Subcritical: `ln T` against `ln ε`. Critical: `ln T` against `ε^{-(p-1)}`.
    pub fit: FitResult,
    /// Subcritical only: `-2(p-1)/(2-(n-1)(p-1))`.
    pub target_slope: Option<f64>,
    /// Critical only: `ln(T) ε^{p-1}` in input order.
    pub products: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Runs `base` at every `ε` (in parallel) and fits the lifespan law.
pub fn pde_sweep(base: &WaveConfig, epsilons: &[f64]) -> Result<PdeSweep> {
    if epsilons.len() < 4 {
        return Err(LabError::Parameter(format!(
            "a PDE sweep needs at least 4 epsilon values, got {}",
            epsilons.len()
        )));
    }
    let configs: Vec<WaveConfig> = epsilons
        .iter()
        .map(|&epsilon| {
            let c = WaveConfig {
                epsilon,
                snapshots: None,
                ..base.clone()
            };
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    let regime = if odi::is_critical(base.n, base.p) {
        Regime::Critical
    } else {
        Regime::Subcritical
    };
    let estimates: Vec<Result<LifespanEstimate>> =
        configs.par_iter().map(detect_lifespan).collect();

    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut excluded = Vec::new();
    let mut points = Vec::new();
    let mut products = Vec::new();
    for (i, (cfg, est)) in configs.iter().zip(estimates).enumerate() {
        let est = est?;
        rows.push(PdeSweepRow {
            n: cfg.n,
            p: cfg.p,
            epsilon: cfg.epsilon,
            t_num: est.t_num,
            status: est.status,
            threshold_sensitivity: est.threshold_sensitivity,
            step_failure: est.step_failure,
        });
        if est.status != WaveStatus::BlewUp {
            let msg = format!(
                "epsilon = {} reached the horizon without blow-up",
                cfg.epsilon
            );
            log::warn!("{msg}");
            warnings.push(msg.clone());
            excluded.push(ExcludedRow {
                index: i,
                reason: msg,
            });
            continue;
        }
        let ln_t = est.t_num.ln();
        match regime {
            Regime::Subcritical => points.push((cfg.epsilon.ln(), ln_t)),
            Regime::Critical => {
                points.push((cfg.epsilon.powf(-(cfg.p - 1.0)), ln_t));
                products.push(ln_t * cfg.epsilon.powf(cfg.p - 1.0));
            }
        }
    }
    let mut fit = fit_line(&points)?;
    fit.excluded = excluded;
    Ok(PdeSweep {
        regime,
        rows,
        fit,
        target_slope: (regime == Regime::Subcritical)
            .then(|| -odi::subcritical_exponent(base.n, base.p)),
        products: (regime == Regime::Critical).then_some(products),
        warnings,
    })
}

/// Snapshot metadata carried in the CSV header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotMeta {
    pub t: f64,
    pub n: u32,
    pub p: f64,
    pub epsilon: f64,
    pub dr: f64,
    pub support_radius: f64,
}

/// Writes `r,u,v` rows after a `# schema=1` line and a metadata comment.
pub fn write_snapshot_csv<W: Write>(
    out: &mut W,
    field: &RadialField,
    n: u32,
    p: f64,
    epsilon: f64,
) -> Result<()> {
    writeln!(out, "# schema=1")?;
    writeln!(
        out,
        "# t={:.16e} n={} p={:.16e} epsilon={:.16e} dr={:.16e} support_radius={:.16e}",
        field.t, n, p, epsilon, field.dr, field.support_radius
    )?;
    writeln!(out, "r,u,v")?;
    for (j, (u, v)) in field.u.iter().zip(&field.v).enumerate() {
        let r = (field.offset + j) as f64 * field.dr;
        writeln!(out, "{r:.16e},{u:.16e},{v:.16e}")?;
    }
    Ok(())
}

/// Reads a snapshot written by [`write_snapshot_csv`].
pub fn read_snapshot_csv<R: BufRead>(input: R) -> Result<(RadialField, SnapshotMeta)> {
    let mut meta: Option<SnapshotMeta> = None;
    let mut first_r: Option<f64> = None;
    let (mut u, mut v) = (Vec::new(), Vec::new());
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line == "# schema=1" || line == "r,u,v" {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut m = SnapshotMeta {
                t: 0.0,
                n: 0,
                p: 0.0,
                epsilon: 0.0,
                dr: 0.0,
                support_radius: 0.0,
            };
            for kv in rest.split_whitespace() {
                let (k, val) = kv
                    .split_once('=')
                    .ok_or_else(|| LabError::Data(format!("bad snapshot header item {kv}")))?;
                let num = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|_| LabError::Data(format!("bad number {s}")))
                };
                match k {
                    "t" => m.t = num(val)?,
                    "n" => {
                        m.n = val
                            .parse()
                            .map_err(|_| LabError::Data(format!("bad n {val}")))?
                    }
                    "p" => m.p = num(val)?,
                    "epsilon" => m.epsilon = num(val)?,
                    "dr" => m.dr = num(val)?,
                    "support_radius" => m.support_radius = num(val)?,
                    _ => {}
                }
            }
            meta = Some(m);
            continue;
        }
        let cols: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| LabError::Data(format!("bad snapshot row: {line}")))?;
        if cols.len() != 3 {
            return Err(LabError::Data(format!(
                "expected 3 columns, got {}",
                cols.len()
            )));
        }
        first_r.get_or_insert(cols[0]);
        u.push(cols[1]);
        v.push(cols[2]);
    }
    let meta = meta.ok_or_else(|| LabError::Data("snapshot header missing".into()))?;
    if !(meta.dr > 0.0) {
        return Err(LabError::Data("snapshot header lacks dr".into()));
    }
    let offset = (first_r.unwrap_or(0.0) / meta.dr).round() as usize;
    let field = RadialField {
        dr: meta.dr,
        offset,
        u,
        v,
        t: meta.t,
        support_radius: meta.support_radius,
    };
    Ok((field, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(eps: f64) -> WaveConfig {
        WaveConfig::new(2, 2.0, eps, DataProfile::standard(1.0, 1.0), 0.02, 5.0)
    }

    #[test]
    fn profile_shapes() {
        let p = DataProfile::standard(1.0, 2.0);
        assert_relative_eq!(p.f(0.0), 2.0 * (-1f64).exp());
        assert_eq!(p.f(1.0), 0.0);
        assert_eq!(p.f(1.5), 0.0);
        let s = DataProfile {
            shape: ProfileShape::ShellBump,
            ..p
        };
        assert_eq!(s.f(0.4), 0.0);
        assert_relative_eq!(s.f(0.75), 2.0 * (-1f64).exp());
        assert_eq!(s.g(0.75), 0.0);
        let g = DataProfile {
            g_mode: GMode::EqualToF,
            ..s
        };
        assert_eq!(g.g(0.75), g.f(0.75));
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1.0).validate().is_ok());
        assert!(WaveConfig {
            dr: 0.05,
            ..cfg(1.0)
        }
        .validate()
        .is_err());
        assert!(WaveConfig { p: 3.5, ..cfg(1.0) }.validate().is_err());
        assert!(WaveConfig { p: 3.0, ..cfg(1.0) }.validate().is_ok());
        assert!(WaveConfig {
            cfl: 1.5,
            ..cfg(1.0)
        }
        .validate()
        .is_err());
        assert!(WaveConfig {
            epsilon: 0.0,
            ..cfg(1.0)
        }
        .validate()
        .is_err());
        let w = WaveConfig {
            domain: DomainPolicy::FrontWindow { width: 1.0 },
            ..cfg(1.0)
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn initial_data_scaling_and_support() {
        let a = make_initial_data(&cfg(1.0)).unwrap();
        let b = make_initial_data(&cfg(2.0)).unwrap();
        for (x, y) in a.u.iter().zip(&b.u) {
            assert_eq!(2.0 * x, *y);
        }
        for (j, u) in a.u.iter().enumerate() {
            if j as f64 * a.dr >= 1.0 {
                assert_eq!(*u, 0.0);
            }
        }
        assert_eq!(a.support_radius, 1.0);
    }

    #[test]
    fn zero_field_is_fixed() {
        let c = cfg(1.0);
        let mut f = RadialField::from_fn(c.dr, 2.0, 0.0, 1.0, |_| 0.0, |_| 0.0);
        for _ in 0..10 {
            step(&mut f, &c).unwrap();
        }
        assert!(f.u.iter().chain(&f.v).all(|x| *x == 0.0));
    }

    #[test]
    fn interpolation_exact_for_cubics() {
        let f = RadialField::from_fn(0.1, 3.0, 0.0, 3.0, |r| r * r * r - r, |_| 0.0);
        for r in [0.05, 0.33, 1.27, 2.91] {
            assert_relative_eq!(f.u_at(r), r * r * r - r, epsilon = 1e-12);
        }
        assert_eq!(f.u_at(3.0), 0.0);
    }

    #[test]
    fn snapshot_csv_roundtrip() {
        let f = make_initial_data(&cfg(0.5)).unwrap().restricted(0.3);
        let mut buf = Vec::new();
        write_snapshot_csv(&mut buf, &f, 2, 2.0, 0.5).unwrap();
        let (g, meta) = read_snapshot_csv(buf.as_slice()).unwrap();
        assert_eq!(g, f);
        assert_eq!(meta.n, 2);
        assert_eq!(meta.epsilon, 0.5);
    }

    #[test]
    fn large_data_blows_up_quickly() {
        let est = detect_lifespan(&WaveConfig {
            horizon: 50.0,
            ..cfg(2.0)
        })
        .unwrap();
        assert_eq!(est.status, WaveStatus::BlewUp);
        assert!(est.t_num < 50.0);
    }

    #[test]
    fn sweep_needs_four_values() {
        assert!(pde_sweep(&cfg(1.0), &[1.0, 2.0, 3.0]).is_err());
    }
}
