//! Driving stimuli: generators, standardization and time-axis rescaling.
//!
//! Generators return a [`RawSeries`] on a uniform dense grid. Several raw
//! series are merged by [`standardize_and_rescale`] into a [`Stimulus`] whose
//! components are z-scored and whose time axis is stretched so the geometric
//! mean of the per-component spectral peaks sits at 1 Hz.

use rand::RngExt;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{self, SeedScheme};

/// Periodograms longer than this are computed on a decimated series.
pub const MAX_FFT_LEN: usize = 1 << 21;

/// Fraction of leading samples ignored by the peak-frequency estimate.
pub const TRANSIENT_FRACTION: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StimError {
    #[error("integration failed: non-finite state at t = {time}")]
    IntegrationFailure { time: f64 },
    #[error("delay {delta} is shorter than the grid step {dt}")]
    InvalidDelay { delta: f64, dt: f64 },
    #[error("NARMA sequence diverged at step {step} (|u| = {value:e})")]
    Unstable { step: usize, value: f64 },
    #[error("component {component} has zero variance")]
    ZeroVariance { component: usize },
    #[error("component {component} has no non-zero spectral peak")]
    RescaleFailure { component: usize },
    #[error("series do not share a grid: {0}")]
    GridMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Generator tag plus the parameters needed to regenerate a series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum SeriesSource {
    Lorenz {
        params: LorenzParams,
        tolerance: Tolerance,
    },
    MackeyGlass {
        params: MackeyGlassParams,
        history: MgHistory,
    },
    Narma {
        params: NarmaParams,
        noise_seed: u64,
    },
    AbsSine,
    External {
        label: String,
    },
}

/// Multi-component series on a uniform grid starting at t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    values: Vec<Vec<f64>>,
    dt: f64,
    source: SeriesSource,
}

impl RawSeries {
    pub fn new(values: Vec<Vec<f64>>, dt: f64, source: SeriesSource) -> Result<Self, StimError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(StimError::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let len = values.first().map_or(0, Vec::len);
        if values.is_empty() || len < 2 {
            return Err(StimError::InvalidParameter("series needs at least two samples".into()));
        }
        if values.iter().any(|c| c.len() != len) {
            return Err(StimError::GridMismatch("components differ in length".into()));
        }
        if let Some((i, _)) = values
            .iter()
            .flat_map(|c| c.iter())
            .enumerate()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(StimError::IntegrationFailure { time: (i % len) as f64 * dt });
        }
        Ok(Self { values, dt, source })
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn source(&self) -> &SeriesSource {
        &self.source
    }

    /// Drops the first `count` samples of every component.
    pub fn discard_leading(&mut self, count: usize) {
        let count = count.min(self.len().saturating_sub(2));
        for c in &mut self.values {
            c.drain(..count);
        }
    }

    fn into_parts(self) -> (Vec<Vec<f64>>, f64, SeriesSource) {
        (self.values, self.dt, self.source)
    }
}

fn grid_len(duration: f64, dt: f64) -> Result<usize, StimError> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(StimError::InvalidParameter(format!("duration must be positive, got {duration}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(StimError::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    // Tolerate representation error when duration is an integer multiple of dt.
    Ok((duration / dt + 1e-9).floor() as usize + 1)
}

// ---------------------------------------------------------------------------
// Lorenz

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub x0: [f64; 3],
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            x0: [-1.96582031, -1.08886719, 2.17578125],
        }
    }
}

impl LorenzParams {
    pub fn rhs(&self, y: &[f64; 3]) -> [f64; 3] {
        [
            self.sigma * (y[1] - y[0]),
            y[0] * (self.rho - y[2]) - y[1],
            y[0] * y[1] - self.beta * y[2],
        ]
    }
}

/// Error control for the adaptive Dormand–Prince integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10 }
    }
}

// Dormand–Prince 5(4) tableau; the node row is unused for autonomous systems.
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// One Dormand–Prince step of an autonomous system; returns the fifth-order
/// solution and the embedded error estimate.
fn dopri_step<const D: usize>(
    f: &impl Fn(&[f64; D]) -> [f64; D],
    y: &[f64; D],
    h: f64,
) -> ([f64; D], [f64; D]) {
    let mut k = [[0.0; D]; 7];
    k[0] = f(y);
    for s in 1..7 {
        let mut ys = *y;
        for (j, kj) in k.iter().enumerate().take(s) {
            let a = DP_A[s][j];
            if a != 0.0 {
                for d in 0..D {
                    ys[d] += h * a * kj[d];
                }
            }
        }
        k[s] = f(&ys);
    }
    let mut y5 = *y;
    let mut err = [0.0; D];
    for s in 0..7 {
        for d in 0..D {
            if s < 6 {
                y5[d] += h * DP_A[6][s] * k[s][d];
            }
            err[d] += h * DP_E[s] * k[s][d];
        }
    }
    (y5, err)
}

/// Integrates an autonomous ODE adaptively and records it every `dt`.
fn integrate_adaptive<const D: usize>(
    f: impl Fn(&[f64; D]) -> [f64; D],
    y0: [f64; D],
    n: usize,
    dt: f64,
    tol: Tolerance,
) -> Result<Vec<Vec<f64>>, StimError> {
    let mut out: Vec<Vec<f64>> = (0..D).map(|_| Vec::with_capacity(n)).collect();
    let mut y = y0;
    for d in 0..D {
        out[d].push(y[d]);
    }
    let mut t = 0.0;
    let mut h = dt.min(1e-2);
    for i in 1..n {
        let target = i as f64 * dt;
        while target - t > 1e-12 * dt {
            let step = h.min(target - t);
            let (y_new, err) = dopri_step(&f, &y, step);
            let mut norm = 0.0;
            for d in 0..D {
                let scale = tol.atol + tol.rtol * y[d].abs().max(y_new[d].abs());
                norm += (err[d] / scale).powi(2);
            }
            let norm = (norm / D as f64).sqrt();
            if !norm.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
                if step < 1e-14 {
                    return Err(StimError::IntegrationFailure { time: t });
                }
                h = step * 0.2;
                continue;
            }
            if norm <= 1.0 {
                t += step;
                y = y_new;
            }
            let factor = if norm == 0.0 { 5.0 } else { (0.9 * norm.powf(-0.2)).clamp(0.2, 5.0) };
            let proposal = step * factor;
            // Do not let a step clipped by the output grid shrink the next one.
            h = if norm <= 1.0 && step < h { h.max(proposal) } else { proposal };
            if h < 1e-14 {
                return Err(StimError::IntegrationFailure { time: t });
            }
        }
        t = target;
        for d in 0..D {
            out[d].push(y[d]);
        }
    }
    Ok(out)
}

pub fn gen_lorenz(
    params: &LorenzParams,
    duration: f64,
    dt_dense: f64,
    tol: Tolerance,
) -> Result<RawSeries, StimError> {
    let n = grid_len(duration, dt_dense)?;
    let p = *params;
    let values = integrate_adaptive(move |y| p.rhs(y), params.x0, n, dt_dense, tol)?;
    RawSeries::new(values, dt_dense, SeriesSource::Lorenz { params: *params, tolerance: tol })
}

// ---------------------------------------------------------------------------
// Mackey–Glass

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MackeyGlassParams {
    pub a: f64,
    pub b: f64,
    pub n: f64,
    pub delta: f64,
    pub x0: f64,
}

impl Default for MackeyGlassParams {
    fn default() -> Self {
        Self { a: 0.2, b: 0.1, n: 10.0, delta: 17.0, x0: 1.2 }
    }
}

impl MackeyGlassParams {
    pub fn rhs(&self, x: f64, delayed: f64) -> f64 {
        self.a * delayed / (1.0 + delayed.powf(self.n)) - self.b * x
    }
}

/// Initial function on [−δ, 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MgHistory {
    Constant { value: f64 },
    /// Independent uniform draws at each grid point, linearly interpolated.
    Uniform { lo: f64, hi: f64, seed: u64 },
}

/// Piecewise-linear history sampled at `t = -j·dt`, `j = 1..=count`, joined to
/// `x0` at `t = 0`.
struct HistoryFn {
    dt: f64,
    // values[j] is the value at t = -j·dt; values[0] = x0.
    values: Vec<f64>,
}

impl HistoryFn {
    fn new(history: &MgHistory, delta: f64, dt: f64, x0: f64) -> Self {
        let count = (delta / dt - 1e-9).ceil().max(1.0) as usize;
        let mut values = Vec::with_capacity(count + 1);
        values.push(x0);
        match *history {
            MgHistory::Constant { value } => values.extend(std::iter::repeat_n(value, count)),
            MgHistory::Uniform { lo, hi, seed } => {
                let mut rng = seed::rng(seed);
                values.extend((0..count).map(|_| rng.random_range(lo..=hi)));
            }
        }
        Self { dt, values }
    }

    fn eval(&self, t: f64) -> f64 {
        let x = (-t / self.dt).max(0.0);
        let j = (x.floor() as usize).min(self.values.len() - 2);
        let frac = x - j as f64;
        self.values[j] + (self.values[j + 1] - self.values[j]) * frac
    }
}

/// Mackey–Glass trajectory by classical RK4 with `substeps` steps per output
/// interval. Delayed values come from linear interpolation of stored samples.
pub fn integrate_mackey_glass(
    params: &MackeyGlassParams,
    history: &MgHistory,
    duration: f64,
    dt_dense: f64,
    substeps: usize,
) -> Result<RawSeries, StimError> {
    let n = grid_len(duration, dt_dense)?;
    if !(params.delta >= dt_dense) {
        return Err(StimError::InvalidDelay { delta: params.delta, dt: dt_dense });
    }
    if substeps == 0 {
        return Err(StimError::InvalidParameter("substeps must be positive".into()));
    }
    let hist = HistoryFn::new(history, params.delta, dt_dense, params.x0);
    let h = dt_dense / substeps as f64;
    let total = (n - 1) * substeps + 1;
    let mut traj = Vec::with_capacity(total);
    traj.push(params.x0);
    let delayed = |traj: &[f64], s: f64| -> f64 {
        if s < 0.0 {
            hist.eval(s)
        } else {
            let x = s / h;
            let j = (x.floor() as usize).min(traj.len().saturating_sub(2));
            let frac = x - j as f64;
            traj[j] + (traj[j + 1] - traj[j]) * frac
        }
    };
    for step in 0..total - 1 {
        let t = step as f64 * h;
        let x = traj[step];
        let d0 = delayed(&traj, t - params.delta);
        let dm = delayed(&traj, t + 0.5 * h - params.delta);
        let d1 = delayed(&traj, t + h - params.delta);
        let k1 = params.rhs(x, d0);
        let k2 = params.rhs(x + 0.5 * h * k1, dm);
        let k3 = params.rhs(x + 0.5 * h * k2, dm);
        let k4 = params.rhs(x + h * k3, d1);
        let next = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !next.is_finite() {
            return Err(StimError::IntegrationFailure { time: t + h });
        }
        traj.push(next);
    }
    let values: Vec<f64> = traj.into_iter().step_by(substeps).collect();
    RawSeries::new(
        vec![values],
        dt_dense,
        SeriesSource::MackeyGlass { params: *params, history: *history },
    )
}

pub fn gen_mackey_glass(
    params: &MackeyGlassParams,
    history: &MgHistory,
    duration: f64,
    dt_dense: f64,
) -> Result<RawSeries, StimError> {
    integrate_mackey_glass(params, history, duration, dt_dense, 1)
}

// ---------------------------------------------------------------------------
// NARMA

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NarmaParams {
    pub order: usize,
    pub a1: f64,
    pub a2: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for NarmaParams {
    fn default() -> Self {
        Self { order: 30, a1: 0.2, a2: 0.04, b: 1.5, c: 0.001 }
    }
}

pub const NARMA_DIVERGENCE: f64 = 1e6;

/// Runs the NARMA recursion on a given driving sequence `xi`, producing
/// `xi.len()` outputs from zero initial conditions.
pub fn narma_recursion(params: &NarmaParams, xi: &[f64]) -> Result<Vec<f64>, StimError> {
    let n = params.order;
    if n == 0 {
        return Err(StimError::InvalidParameter("NARMA order must be at least 1".into()));
    }
    let len = xi.len();
    let mut u = vec![0.0; len];
    // Running sum of u[t-n+1 ..= t].
    let mut window = 0.0;
    for t in 0..len.saturating_sub(1) {
        window += u[t];
        if t >= n {
            window -= u[t - n];
        }
        let lagged = if t + 1 >= n { xi[t + 1 - n] } else { 0.0 };
        let next = params.a1 * u[t] + params.a2 * u[t] * window + params.b * lagged * xi[t] + params.c;
        if !next.is_finite() || next.abs() > NARMA_DIVERGENCE {
            return Err(StimError::Unstable { step: t + 1, value: next.abs() });
        }
        u[t + 1] = next;
    }
    Ok(u)
}

pub fn gen_narma(
    params: &NarmaParams,
    length: usize,
    noise_seed: u64,
    dt_dense: f64,
) -> Result<RawSeries, StimError> {
    if length <= params.order {
        return Err(StimError::InvalidParameter(format!(
            "length {length} must exceed the model order {}",
            params.order
        )));
    }
    let mut rng = seed::rng(noise_seed);
    let xi: Vec<f64> = (0..length).map(|_| rng.random_range(0.0..=0.5)).collect();
    let u = narma_recursion(params, &xi)?;
    RawSeries::new(vec![u], dt_dense, SeriesSource::Narma { params: *params, noise_seed })
}

// ---------------------------------------------------------------------------
// |sin t|

pub fn gen_abs_sine(duration: f64, dt_dense: f64) -> Result<RawSeries, StimError> {
    let n = grid_len(duration, dt_dense)?;
    let values = (0..n).map(|i| (i as f64 * dt_dense).sin().abs()).collect();
    RawSeries::new(vec![values], dt_dense, SeriesSource::AbsSine)
}

// ---------------------------------------------------------------------------
// Standardization and rescaling

/// Frequency of the largest peak of `values` sampled every `dt`, measured as
/// power per unit log-frequency (`f·S(f)` of a Hann-windowed periodogram after
/// removing the mean). For a line spectrum this is the line itself; for a red
/// spectrum such as the Lorenz x component the plain argmax sits on the
/// low-frequency plateau and wanders with record length, while this one stays
/// at the characteristic oscillation. `None` if the unweighted periodogram
/// peaks at DC or the series carries no power.
pub fn peak_frequency(values: &[f64], dt: f64) -> Option<f64> {
    let stride = values.len().div_ceil(MAX_FFT_LEN).max(1);
    let data: Vec<f64> = values.iter().step_by(stride).copied().collect();
    let m = data.len();
    if m < 4 {
        return None;
    }
    let mean = data.iter().sum::<f64>() / m as f64;
    let denom = (m - 1) as f64;
    let mut buf: Vec<Complex<f64>> = data
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * j as f64 / denom).cos();
            Complex::new((x - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    let argmax = |weight: fn(usize) -> f64| {
        buf[..=m / 2]
            .iter()
            .enumerate()
            .map(|(k, c)| (k, weight(k) * c.norm_sqr()))
            .fold((0, f64::NEG_INFINITY), |acc, (k, p)| if p > acc.1 { (k, p) } else { acc })
    };
    // A series dominated by its offset has no usable peak.
    if argmax(|_| 1.0).0 == 0 {
        return None;
    }
    let (best, power) = argmax(|k| k as f64);
    if best == 0 || !(power > 0.0) {
        return None;
    }
    Some(best as f64 / (m as f64 * dt * stride as f64))
}

/// Spectral resolution of [`peak_frequency`] for a series of `len` samples.
pub fn spectral_bin_width(len: usize, dt: f64) -> f64 {
    let stride = len.div_ceil(MAX_FFT_LEN).max(1);
    let m = len.div_ceil(stride);
    1.0 / (m as f64 * dt * stride as f64)
}

fn post_transient(len: usize) -> usize {
    (len as f64 * TRANSIENT_FRACTION).floor() as usize
}

/// K standardized components on a common, rescaled time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Stimulus {
    components: Vec<Vec<f64>>,
    dt: f64,
    compound_freq: f64,
    time_scale: f64,
    peak_freqs: Vec<f64>,
    sources: Vec<SeriesSource>,
}

/// Merges raw series into a standardized stimulus. Each component is
/// z-scored; time is multiplied by the geometric mean of the components'
/// peak frequencies so the compound frequency becomes 1.
pub fn standardize_and_rescale(raw: Vec<RawSeries>) -> Result<Stimulus, StimError> {
    standardize(raw, None)
}

/// Like [`standardize_and_rescale`] but with a time scale fixed in advance.
/// Peak frequencies are still measured and reported relative to it.
pub fn standardize_with_scale(raw: Vec<RawSeries>, scale: f64) -> Result<Stimulus, StimError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(StimError::InvalidParameter(format!("time scale must be positive, got {scale}")));
    }
    standardize(raw, Some(scale))
}

fn standardize(raw: Vec<RawSeries>, fixed_scale: Option<f64>) -> Result<Stimulus, StimError> {
    let first = raw
        .first()
        .ok_or_else(|| StimError::InvalidParameter("no series given".into()))?;
    let (dt, len) = (first.dt(), first.len());
    for r in &raw {
        if (r.dt() - dt).abs() > 1e-12 * dt || r.len() != len {
            return Err(StimError::GridMismatch(format!(
                "expected {len} samples at dt {dt}, got {} at dt {}",
                r.len(),
                r.dt()
            )));
        }
    }
    let mut components = Vec::new();
    let mut sources = Vec::new();
    for r in raw {
        let (values, _, source) = r.into_parts();
        components.extend(values);
        sources.push(source);
    }
    let skip = post_transient(len);
    let mut peak_freqs = Vec::with_capacity(components.len());
    for (idx, c) in components.iter_mut().enumerate() {
        let n = c.len() as f64;
        let mean = c.iter().sum::<f64>() / n;
        let var = c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if !(var > f64::EPSILON * mean.abs().max(1.0).powi(2)) {
            return Err(StimError::ZeroVariance { component: idx });
        }
        let sd = var.sqrt();
        c.iter_mut().for_each(|x| *x = (*x - mean) / sd);
        let f = peak_frequency(&c[skip..], dt).ok_or(StimError::RescaleFailure { component: idx })?;
        peak_freqs.push(f);
    }
    let scale = fixed_scale
        .unwrap_or_else(|| (peak_freqs.iter().map(|f| f.ln()).sum::<f64>() / peak_freqs.len() as f64).exp());
    let rescaled: Vec<f64> = peak_freqs.iter().map(|f| f / scale).collect();
    let compound = (rescaled.iter().map(|f| f.ln()).sum::<f64>() / rescaled.len() as f64).exp();
    Ok(Stimulus {
        components,
        dt: dt * scale,
        compound_freq: compound,
        time_scale: scale,
        peak_freqs: rescaled,
        sources,
    })
}

impl Stimulus {
    /// Wraps already-standardized components, e.g. when loading from disk.
    pub fn from_parts(
        components: Vec<Vec<f64>>,
        dt: f64,
        compound_freq: f64,
        time_scale: f64,
        peak_freqs: Vec<f64>,
        sources: Vec<SeriesSource>,
    ) -> Result<Self, StimError> {
        let len = components.first().map_or(0, Vec::len);
        if components.is_empty() || len < 2 || components.iter().any(|c| c.len() != len) {
            return Err(StimError::GridMismatch("components must share a length of at least 2".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(StimError::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { components, dt, compound_freq, time_scale, peak_freqs, sources })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn len(&self) -> usize {
        self.components[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn duration(&self) -> f64 {
        (self.len() - 1) as f64 * self.dt
    }

    pub fn compound_freq(&self) -> f64 {
        self.compound_freq
    }

    /// Factor by which the original time axis was multiplied.
    pub fn time_scale(&self) -> f64 {
        self.time_scale
    }

    /// Per-component peak frequencies after rescaling.
    pub fn peak_freqs(&self) -> &[f64] {
        &self.peak_freqs
    }

    pub fn sources(&self) -> &[SeriesSource] {
        &self.sources
    }

    pub fn component(&self, k: usize) -> &[f64] {
        &self.components[k]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    /// Resolution of the peak-frequency estimate in rescaled units.
    pub fn spectral_bin_width(&self) -> f64 {
        let len = self.len() - post_transient(self.len());
        spectral_bin_width(len, self.dt)
    }

    /// Linear interpolation of component `k` (0-based) at time `t`, clamped
    /// to the first and last samples outside the grid.
    pub fn sample(&self, t: f64, k: usize) -> f64 {
        let (j, frac) = self.locate(t);
        let c = &self.components[k];
        if frac == 0.0 {
            c[j]
        } else {
            c[j] + (c[j + 1] - c[j]) * frac
        }
    }

    /// Samples every component at `t` into `out`.
    pub fn sample_all(&self, t: f64, out: &mut [f64]) {
        let (j, frac) = self.locate(t);
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = if frac == 0.0 { c[j] } else { c[j] + (c[j + 1] - c[j]) * frac };
        }
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let last = self.len() - 1;
        let x = t / self.dt;
        if !(x > 0.0) {
            return (0, 0.0);
        }
        if x >= last as f64 {
            return (last, 0.0);
        }
        let nearest = x.round();
        if (x - nearest).abs() < 1e-9 {
            return ((nearest as usize).min(last), 0.0);
        }
        let j = x.floor() as usize;
        (j, x - j as f64)
    }
}

// ---------------------------------------------------------------------------
// Recipes

/// Declarative description of a stimulus, resolved by [`synthesize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StimulusRecipe {
    Lorenz {
        #[serde(default)]
        params: LorenzParams,
        #[serde(default)]
        tolerance: Tolerance,
    },
    MackeyGlass {
        #[serde(default = "default_mg_delays")]
        delays: Vec<f64>,
        #[serde(default = "default_mg_a")]
        a: f64,
        #[serde(default = "default_mg_b")]
        b: f64,
        #[serde(default = "default_mg_n")]
        n: f64,
        #[serde(default = "default_mg_x0")]
        x0: f64,
        #[serde(default = "default_mg_history")]
        history_range: [f64; 2],
    },
    Narma {
        #[serde(default)]
        params: NarmaParams,
    },
    AbsSine,
}

fn default_mg_delays() -> Vec<f64> {
    vec![10.0, 50.0, 80.0]
}
fn default_mg_a() -> f64 {
    0.2
}
fn default_mg_b() -> f64 {
    0.1
}
fn default_mg_n() -> f64 {
    10.0
}
fn default_mg_x0() -> f64 {
    1.2
}
fn default_mg_history() -> [f64; 2] {
    [1.1, 1.3]
}

impl Default for StimulusRecipe {
    fn default() -> Self {
        Self::Lorenz { params: LorenzParams::default(), tolerance: Tolerance::default() }
    }
}

impl StimulusRecipe {
    pub fn dim(&self) -> usize {
        match self {
            Self::Lorenz { .. } => 3,
            Self::MackeyGlass { delays, .. } => delays.len(),
            Self::Narma { .. } | Self::AbsSine => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Lorenz { .. } => "lorenz",
            Self::MackeyGlass { .. } => "mackey-glass",
            Self::Narma { .. } => "narma",
            Self::AbsSine => "abs-sine",
        }
    }

    /// Raw series over `duration` raw time units at spacing `dt` (raw units).
    /// NARMA is a discrete map and always uses one raw unit per sample.
    fn generate(&self, duration: f64, dt: f64, seeds: &SeedScheme) -> Result<Vec<RawSeries>, StimError> {
        match self {
            Self::Lorenz { params, tolerance } => Ok(vec![gen_lorenz(params, duration, dt, *tolerance)?]),
            Self::MackeyGlass { delays, a, b, n, x0, history_range } => delays
                .iter()
                .enumerate()
                .map(|(i, &delta)| {
                    let params = MackeyGlassParams { a: *a, b: *b, n: *n, delta, x0: *x0 };
                    let history = MgHistory::Uniform {
                        lo: history_range[0],
                        hi: history_range[1],
                        seed: seeds.derive(&format!("stimgen/mackey-glass/history/{i}")),
                    };
                    gen_mackey_glass(&params, &history, duration, dt)
                })
                .collect(),
            Self::Narma { params } => {
                let length = duration.ceil() as usize + 1;
                Ok(vec![gen_narma(params, length, seeds.derive("stimgen/narma/noise"), 1.0)?])
            }
            Self::AbsSine => Ok(vec![gen_abs_sine(duration, dt)?]),
        }
    }

    fn pilot(&self) -> (f64, f64) {
        match self {
            Self::Lorenz { .. } => (2000.0, 0.01),
            Self::MackeyGlass { delays, .. } => {
                let longest = delays.iter().copied().fold(1.0, f64::max);
                (100.0 * longest, 0.1)
            }
            Self::Narma { .. } => (50_000.0, 1.0),
            Self::AbsSine => (200.0, 0.01),
        }
    }
}

/// Builds a standardized stimulus covering at least `duration` rescaled time
/// units with dense spacing `dt`. The time scale comes from a fixed-length
/// pilot run, so it does not depend on `duration`; the first
/// [`TRANSIENT_FRACTION`] of the raw series is discarded.
pub fn synthesize(
    recipe: &StimulusRecipe,
    duration: f64,
    dt: f64,
    seeds: &SeedScheme,
) -> Result<Stimulus, StimError> {
    if !(duration > 0.0 && dt > 0.0) {
        return Err(StimError::InvalidParameter("duration and dt must be positive".into()));
    }
    let (pilot_duration, pilot_dt) = recipe.pilot();
    let scale = standardize_and_rescale(recipe.generate(pilot_duration, pilot_dt, seeds)?)?.time_scale();
    let raw_dt = match recipe {
        StimulusRecipe::Narma { .. } => 1.0,
        _ => dt / scale,
    };
    let mut raw_duration = (duration / scale) / (1.0 - TRANSIENT_FRACTION) + 10.0 * raw_dt;
    for _ in 0..4 {
        let mut raw = recipe.generate(raw_duration, raw_dt, seeds)?;
        for r in &mut raw {
            let drop = post_transient(r.len());
            r.discard_leading(drop);
        }
        let stim = standardize_with_scale(raw, scale)?;
        if stim.duration() >= duration {
            return Ok(stim);
        }
        raw_duration *= 1.25;
    }
    Err(StimError::InvalidParameter(format!("could not synthesize {duration} time units")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn rk4_lorenz(p: &LorenzParams, y0: [f64; 3], t: f64, h: f64) -> [f64; 3] {
        let steps = (t / h).round() as usize;
        let mut y = y0;
        let add = |a: [f64; 3], b: [f64; 3], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
        for _ in 0..steps {
            let k1 = p.rhs(&y);
            let k2 = p.rhs(&add(y, k1, h / 2.0));
            let k3 = p.rhs(&add(y, k2, h / 2.0));
            let k4 = p.rhs(&add(y, k3, h));
            for d in 0..3 {
                y[d] += h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
            }
        }
        y
    }

    #[test]
    fn lorenz_is_bounded_and_aperiodic() {
        let raw = gen_lorenz(&LorenzParams::default(), 100.0, 0.01, Tolerance::default()).unwrap();
        let max = raw.components().iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 60.0, "max |x| = {max}");
        assert!(max > 10.0);
    }

    #[test]
    fn lorenz_origin_is_fixed() {
        let p = LorenzParams { x0: [0.0; 3], ..Default::default() };
        let raw = gen_lorenz(&p, 10.0, 0.01, Tolerance::default()).unwrap();
        assert!(raw.components().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn lorenz_step_matches_fine_rk4() {
        let p = LorenzParams::default();
        let dt = 0.01;
        let raw = gen_lorenz(&p, dt, dt, Tolerance::default()).unwrap();
        let oracle = rk4_lorenz(&p, p.x0, dt, 1e-5);
        for d in 0..3 {
            assert!((raw.components()[d][1] - oracle[d]).abs() < 1e-6);
        }
    }

    #[test]
    fn lorenz_longer_window_matches_fine_rk4() {
        let p = LorenzParams::default();
        let raw = gen_lorenz(&p, 1.0, 0.01, Tolerance::default()).unwrap();
        let oracle = rk4_lorenz(&p, p.x0, 1.0, 1e-4);
        for d in 0..3 {
            assert!((raw.components()[d][100] - oracle[d]).abs() < 1e-5);
        }
    }

    #[test]
    fn mackey_glass_zero_history_stays_zero() {
        let p = MackeyGlassParams { delta: 10.0, x0: 0.0, ..Default::default() };
        let raw = gen_mackey_glass(&p, &MgHistory::Constant { value: 0.0 }, 100.0, 0.1).unwrap();
        assert!(raw.components()[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mackey_glass_rejects_short_delay() {
        let p = MackeyGlassParams { delta: 0.01, ..Default::default() };
        let err = gen_mackey_glass(&p, &MgHistory::Constant { value: 1.0 }, 10.0, 0.1).unwrap_err();
        assert!(matches!(err, StimError::InvalidDelay { .. }));
    }

    #[test]
    fn mackey_glass_half_step_converges() {
        let p = MackeyGlassParams { delta: 50.0, ..Default::default() };
        let hist = MgHistory::Uniform { lo: 1.1, hi: 1.3, seed: 11 };
        let coarse = integrate_mackey_glass(&p, &hist, 50.0, 0.05, 1).unwrap();
        let fine = integrate_mackey_glass(&p, &hist, 50.0, 0.05, 2).unwrap();
        let dev = coarse.components()[0]
            .iter()
            .zip(&fine.components()[0])
            .map(|(a, b)| ((a - b) / b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-3, "deviation {dev}");
    }

    #[test]
    fn narma_zero_forcing_is_zero() {
        let p = NarmaParams { b: 0.0, c: 0.0, ..Default::default() };
        let raw = gen_narma(&p, 500, 3, 1.0).unwrap();
        assert!(raw.components()[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn narma_matches_unrolled_recursion() {
        let p = NarmaParams::default();
        let xi: Vec<f64> = (0..35).map(|i| 0.5 * ((i * 37 % 11) as f64) / 11.0).collect();
        let got = narma_recursion(&p, &xi).unwrap();
        let mut u = vec![0.0f64; 35];
        for t in 0..34 {
            let mut s = 0.0;
            for i in 0..30 {
                if t >= i {
                    s += u[t - i];
                }
            }
            let lag = if t >= 29 { xi[t - 29] } else { 0.0 };
            u[t + 1] = 0.2 * u[t] + 0.04 * u[t] * s + 1.5 * lag * xi[t] + 0.001;
        }
        for t in 0..35 {
            assert!((got[t] - u[t]).abs() <= 1e-15 * u[t].abs().max(1.0), "t={t}");
        }
    }

    #[test]
    fn narma_detects_divergence() {
        let p = NarmaParams { a1: 2.0, a2: 1.0, ..Default::default() };
        assert!(matches!(gen_narma(&p, 1000, 1, 1.0), Err(StimError::Unstable { .. })));
    }

    #[test]
    fn abs_sine_endpoints_and_period() {
        let dt = 0.001;
        let raw = gen_abs_sine(20.0, dt).unwrap();
        let v = &raw.components()[0];
        assert_eq!(v[0], 0.0);
        let quarter = gen_abs_sine(PI / 2.0, PI / 2.0).unwrap();
        assert!((quarter.components()[0][1] - 1.0).abs() < 1e-15);
        for (i, x) in v.iter().enumerate() {
            assert!((x - (i as f64 * dt).sin().abs()).abs() < 1e-12);
        }
        let half = (PI / dt).round() as usize;
        assert!(v.iter().zip(&v[half..]).all(|(a, b)| (a - b).abs() < 2e-3));
    }

    fn sinusoid(freq: f64, len: usize, dt: f64) -> Vec<f64> {
        (0..len)
            .map(|i| (2.0 * PI * freq * i as f64 * dt).sin() * std::f64::consts::SQRT_2)
            .collect()
    }

    #[test]
    fn unit_sinusoid_keeps_its_time_axis() {
        let dt = 0.01;
        let raw = RawSeries::new(vec![sinusoid(1.0, 20001, dt)], dt, SeriesSource::AbsSine).unwrap();
        let stim = standardize_and_rescale(vec![raw]).unwrap();
        assert!((stim.time_scale() - 1.0).abs() <= stim.spectral_bin_width());
    }

    #[test]
    fn geometric_mean_rescaling() {
        // 4 Hz and 1 Hz on a grid where both are exact bins.
        let dt = 0.01;
        let len = 100_001;
        let skip = post_transient(len);
        let t_post = (len - skip) as f64 * dt;
        let f_hi = (4.0 * t_post).round() / t_post;
        let f_lo = (1.0 * t_post).round() / t_post;
        let raw_hi = RawSeries::new(vec![sinusoid(f_hi, len, dt)], dt, SeriesSource::AbsSine).unwrap();
        let raw_lo = RawSeries::new(vec![sinusoid(f_lo, len, dt)], dt, SeriesSource::AbsSine).unwrap();
        let stim = standardize_and_rescale(vec![raw_hi, raw_lo]).unwrap();
        assert!((stim.time_scale() - 2.0).abs() < 1e-3, "scale {}", stim.time_scale());
        assert!((stim.dt() - 2.0 * dt).abs() < 1e-5);
        assert!((stim.compound_freq() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_component_is_rejected() {
        let raw = RawSeries::new(vec![vec![3.0; 100]], 0.1, SeriesSource::AbsSine).unwrap();
        assert_eq!(standardize_and_rescale(vec![raw]).unwrap_err(), StimError::ZeroVariance { component: 0 });
    }

    #[test]
    fn step_component_has_no_peak() {
        let mut v = vec![0.0; 1000];
        v[..50].iter_mut().for_each(|x| *x = 1.0);
        let raw = RawSeries::new(vec![v], 0.1, SeriesSource::AbsSine).unwrap();
        assert_eq!(
            standardize_and_rescale(vec![raw]).unwrap_err(),
            StimError::RescaleFailure { component: 0 }
        );
    }

    #[test]
    fn lorenz_stimulus_is_standardized() {
        let raw = gen_lorenz(&LorenzParams::default(), 400.0, 0.005, Tolerance::default()).unwrap();
        let stim = standardize_and_rescale(vec![raw]).unwrap();
        assert!((stim.compound_freq() - 1.0).abs() <= stim.spectral_bin_width());
        for k in 0..3 {
            let c = stim.component(k);
            let n = c.len() as f64;
            let mean = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sampling_at_nodes_midpoints_and_edges() {
        let stim = Stimulus::from_parts(vec![vec![0.0, 2.0, -1.0, 5.0]], 0.1, 1.0, 1.0, vec![1.0], vec![]).unwrap();
        for j in 0..4 {
            assert_eq!(stim.sample(j as f64 * 0.1, 0), stim.component(0)[j]);
        }
        assert_eq!(stim.sample(0.05, 0), 1.0);
        assert_eq!(stim.sample(0.25, 0), 2.0);
        assert_eq!(stim.sample(-3.0, 0), 0.0);
        assert_eq!(stim.sample(9.0, 0), 5.0);
    }

    #[test]
    fn lorenz_peaks_sit_at_the_lobe_oscillation() {
        // The plain periodogram argmax of x and y lands near 0.02 Hz on this
        // record, on the lobe-switching plateau.
        let raw = gen_lorenz(&LorenzParams::default(), 2000.0, 0.01, Tolerance::default()).unwrap();
        for c in raw.components() {
            let f = peak_frequency(&c[c.len() / 10..], 0.01).unwrap();
            assert!(f > 0.8 && f < 1.6, "{f}");
        }
    }

    #[test]
    fn synthesize_covers_requested_duration() {
        let seeds = SeedScheme::new(1);
        let stim = synthesize(&StimulusRecipe::default(), 50.0, 0.001, &seeds).unwrap();
        assert!(stim.duration() >= 50.0);
        assert!((stim.dt() - 0.001).abs() < 1e-12);
        let short = synthesize(&StimulusRecipe::default(), 10.0, 0.001, &seeds).unwrap();
        assert_eq!(short.time_scale(), stim.time_scale());
        assert_eq!(stim.dim(), 3);
        let again = synthesize(&StimulusRecipe::default(), 50.0, 0.001, &seeds).unwrap();
        assert_eq!(stim, again);
    }
}
