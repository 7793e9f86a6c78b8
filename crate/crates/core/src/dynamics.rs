//! Rate (LI) and spiking (LIF) network dynamics.
//!
//! Both models are advanced one grid step at a time by an integrator object
//! so callers can stream states without materializing the full trajectory;
//! [`simulate_li`] and [`simulate_lif`] are the collecting wrappers.
//!
//! Time convention: update `n` uses the stimulus at `t_n = n·dt` and produces
//! the state at `t_{n+1}`. Sample `l` of a [`StateMatrix`] therefore sits at
//! `(l + 1)·dt`.

use half::f16;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::stimgen::Stimulus;
use crate::topology::{CsrMatrix, Network};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("integration failed: non-finite state at step {step}")]
    IntegrationFailure { step: usize },
    #[error("step {dt} exceeds half the smallest time constant {tau_min}")]
    Unstable { dt: f64, tau_min: f64 },
    #[error("rate {nu} Hz is not below the refractory ceiling {max} Hz")]
    InfeasibleRate { nu: f64, max: f64 },
    #[error("stimulus has {got} components but the network expects {expected}")]
    InputMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Logistic activation.
pub fn activation(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Neuron trajectories on a uniform grid, stored sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix {
    n: usize,
    dt: f64,
    t0: f64,
    data: Vec<f64>,
}

impl StateMatrix {
    pub fn new(n: usize, dt: f64, t0: f64, data: Vec<f64>) -> Result<Self, DynamicsError> {
        if n == 0 || data.len() % n != 0 {
            return Err(DynamicsError::InvalidParameter(format!(
                "{} values do not form rows of {n} neurons",
                data.len()
            )));
        }
        Ok(Self { n, dt, t0, data })
    }

    pub fn with_capacity(n: usize, dt: f64, t0: f64, samples: usize) -> Self {
        Self { n, dt, t0, data: Vec::with_capacity(n * samples) }
    }

    pub fn push_sample(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.n, "sample width");
        self.data.extend_from_slice(x);
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Time of sample 0.
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn time(&self, l: usize) -> f64 {
        self.t0 + l as f64 * self.dt
    }

    pub fn sample(&self, l: usize) -> &[f64] {
        &self.data[l * self.n..(l + 1) * self.n]
    }

    pub fn get(&self, neuron: usize, l: usize) -> f64 {
        self.data[l * self.n + neuron]
    }

    pub fn trace(&self, neuron: usize) -> Vec<f64> {
        self.data.iter().skip(neuron).step_by(self.n).copied().collect()
    }

    /// Sample-major values.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Samples `range` as a new matrix.
    pub fn slice(&self, range: std::ops::Range<usize>) -> StateMatrix {
        StateMatrix {
            n: self.n,
            dt: self.dt,
            t0: self.time(range.start),
            data: self.data[range.start * self.n..range.end * self.n].to_vec(),
        }
    }
}

/// One standard-normal draw per neuron per step from per-neuron streams.
pub struct NoiseSource {
    streams: Vec<ChaCha8Rng>,
}

impl NoiseSource {
    pub fn new(seed: u64, n: usize) -> Self {
        Self { streams: seed::stream_family(seed, n) }
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for (o, rng) in out.iter_mut().zip(&mut self.streams) {
            *o = StandardNormal.sample(rng);
        }
    }
}

/// Feedforward drive `Wu·u(t)`.
struct InputDrive<'a> {
    stim: Option<&'a Stimulus>,
    w_in: &'a [f64],
    k: usize,
    u: Vec<f64>,
}

impl<'a> InputDrive<'a> {
    fn new(net: &'a Network, stim: Option<&'a Stimulus>) -> Result<Self, DynamicsError> {
        if let Some(s) = stim {
            if s.dim() != net.k() {
                return Err(DynamicsError::InputMismatch { expected: net.k(), got: s.dim() });
            }
        }
        Ok(Self { stim, w_in: &net.w_in, k: net.k(), u: vec![0.0; net.k()] })
    }

    /// Writes the drive at time `t` into `out`, or zeros without a stimulus.
    fn eval(&mut self, t: f64, out: &mut [f64]) {
        match self.stim {
            None => out.iter_mut().for_each(|o| *o = 0.0),
            Some(s) => {
                s.sample_all(t, &mut self.u);
                for (i, o) in out.iter_mut().enumerate() {
                    let row = &self.w_in[i * self.k..(i + 1) * self.k];
                    *o = row.iter().zip(&self.u).map(|(w, u)| w * u).sum();
                }
            }
        }
    }
}

/// Integration scheme for rate networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RateScheme {
    /// Explicit Euler–Maruyama at the grid step.
    #[default]
    Euler,
    /// Fixed-step exponential Euler: the leak and the noise are integrated
    /// exactly over each grid step with the drive held constant. Stable for
    /// any time constant at the cost of one drive evaluation per step.
    ExponentialEuler,
    /// Adaptive second-order exponential Runge–Kutta (ETD2RK) with
    /// step-doubling error control, noise held constant within each grid
    /// interval. Stable for any time constant.
    ExponentialRk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for StepTolerance {
    fn default() -> Self {
        Self { rtol: 1e-5, atol: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub substeps: u64,
    pub rejected: u64,
}

/// Step-by-step LI integrator.
pub struct RateIntegrator<'a> {
    w: &'a CsrMatrix,
    tau: &'a [f64],
    j_n: f64,
    input: InputDrive<'a>,
    dt: f64,
    scheme: RateScheme,
    tol: StepTolerance,
    /// Per-neuron `e^{−dt/τ}` and the matching gain `(1 − e^{−dt/τ})/√dt` of
    /// the held noise sample, for the exponential Euler scheme.
    decay: Vec<f64>,
    noise_sd: Vec<f64>,
    v: Vec<f64>,
    r: Vec<f64>,
    noise: NoiseSource,
    xi: Vec<f64>,
    ff: Vec<f64>,
    rec: Vec<f64>,
    scratch: EtdScratch,
    h: f64,
    step: usize,
    stats: IntegrationStats,
}

#[derive(Default)]
struct EtdScratch {
    eta: Vec<f64>,
    g0: Vec<f64>,
    g: Vec<f64>,
    a: Vec<f64>,
    big: Vec<f64>,
    half: Vec<f64>,
    gm: Vec<f64>,
    fine: Vec<f64>,
    r: Vec<f64>,
    ff: Vec<f64>,
}

impl<'a> RateIntegrator<'a> {
    pub fn new(
        net: &'a Network,
        stim: Option<&'a Stimulus>,
        dt: f64,
        noise_seed: u64,
        scheme: RateScheme,
    ) -> Result<Self, DynamicsError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(DynamicsError::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let tau_min = net.tau_min();
        if scheme == RateScheme::Euler && dt > tau_min / 2.0 {
            return Err(DynamicsError::Unstable { dt, tau_min });
        }
        let n = net.n();
        let zeros = || vec![0.0; n];
        let (decay, noise_sd) = if scheme == RateScheme::ExponentialEuler {
            let j_n = net.spec.j_n;
            (
                net.tau.iter().map(|t| (-dt / t).exp()).collect(),
                // Noise is held over the step, as in the adaptive scheme, so
                // the fallback never changes the noise model.
                net.tau.iter().map(|t| j_n * -(-dt / t).exp_m1() / dt.sqrt()).collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Self {
            w: &net.w,
            tau: &net.tau,
            j_n: net.spec.j_n,
            input: InputDrive::new(net, stim)?,
            dt,
            scheme,
            tol: StepTolerance::default(),
            decay,
            noise_sd,
            v: zeros(),
            r: vec![0.5; n],
            noise: NoiseSource::new(noise_seed, n),
            xi: zeros(),
            ff: zeros(),
            rec: zeros(),
            scratch: EtdScratch {
                eta: zeros(),
                g0: zeros(),
                g: zeros(),
                a: zeros(),
                big: zeros(),
                half: zeros(),
                gm: zeros(),
                fine: zeros(),
                r: zeros(),
                ff: zeros(),
            },
            h: dt,
            step: 0,
            stats: IntegrationStats::default(),
        })
    }

    pub fn with_tolerance(mut self, tol: StepTolerance) -> Self {
        self.tol = tol;
        self
    }

    /// Replaces the initial voltage (default all zero).
    pub fn with_initial_voltage(mut self, v0: &[f64]) -> Result<Self, DynamicsError> {
        if v0.len() != self.v.len() {
            return Err(DynamicsError::InvalidParameter("initial voltage has the wrong length".into()));
        }
        self.v.copy_from_slice(v0);
        for (r, &v) in self.r.iter_mut().zip(&self.v) {
            *r = activation(v);
        }
        Ok(self)
    }

    pub fn voltage(&self) -> &[f64] {
        &self.v
    }

    pub fn rates(&self) -> &[f64] {
        &self.r
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn stats(&self) -> IntegrationStats {
        self.stats
    }

    /// Advances one grid step and returns the new rates.
    pub fn advance(&mut self) -> Result<&[f64], DynamicsError> {
        self.noise.fill(&mut self.xi);
        match self.scheme {
            RateScheme::Euler => self.euler_step(),
            RateScheme::ExponentialEuler => self.exp_euler_step(),
            RateScheme::ExponentialRk => self.etd_interval(),
        }
        self.step += 1;
        for (r, &v) in self.r.iter_mut().zip(&self.v) {
            if !v.is_finite() {
                return Err(DynamicsError::IntegrationFailure { step: self.step });
            }
            *r = activation(v);
        }
        Ok(&self.r)
    }

    fn euler_step(&mut self) {
        let t = self.time();
        self.input.eval(t, &mut self.ff);
        self.w.mul_vec(&self.r, &mut self.rec);
        let sq = self.dt.sqrt();
        for i in 0..self.v.len() {
            let tau = self.tau[i];
            let drift = -self.v[i] + self.rec[i] + self.ff[i];
            self.v[i] += self.dt / tau * drift + self.j_n / tau * sq * self.xi[i];
        }
    }

    fn exp_euler_step(&mut self) {
        let t = self.time();
        self.input.eval(t, &mut self.ff);
        self.w.mul_vec(&self.r, &mut self.rec);
        for i in 0..self.v.len() {
            let g = self.rec[i] + self.ff[i];
            let e = self.decay[i];
            self.v[i] = g + (self.v[i] - g) * e + self.noise_sd[i] * self.xi[i];
        }
    }

    /// Drive `W·r(x) + Wu·u(t) + η` into `out`.
    fn drive(w: &CsrMatrix, input: &mut InputDrive, s: &mut EtdScratch, x: &[f64], t: f64, out: &mut [f64]) {
        for (r, &v) in s.r.iter_mut().zip(x) {
            *r = activation(v);
        }
        w.mul_vec(&s.r, out);
        input.eval(t, &mut s.ff);
        for ((o, f), e) in out.iter_mut().zip(&s.ff).zip(&s.eta) {
            *o += f + e;
        }
    }

    fn etd_interval(&mut self) {
        let t_start = self.time();
        let t_end = t_start + self.dt;
        let inv_sq = 1.0 / self.dt.sqrt();
        for (e, &x) in self.scratch.eta.iter_mut().zip(&self.xi) {
            *e = self.j_n * x * inv_sq;
        }
        let h_min = self.dt * 1e-9;
        let mut t = t_start;
        while t_end - t > h_min {
            let h = self.h.min(t_end - t);
            let s = &mut self.scratch;
            let mut g0 = std::mem::take(&mut s.g0);
            Self::drive(self.w, &mut self.input, s, &self.v, t, &mut g0);
            // One full step.
            let mut big = std::mem::take(&mut s.big);
            Self::etd2(self.w, &mut self.input, s, self.tau, &self.v, &g0, t, h, &mut big);
            // Two half steps.
            let mut half = std::mem::take(&mut s.half);
            Self::etd2(self.w, &mut self.input, s, self.tau, &self.v, &g0, t, 0.5 * h, &mut half);
            let mut gm = std::mem::take(&mut s.gm);
            Self::drive(self.w, &mut self.input, s, &half, t + 0.5 * h, &mut gm);
            let mut fine = std::mem::take(&mut s.fine);
            Self::etd2(self.w, &mut self.input, s, self.tau, &half, &gm, t + 0.5 * h, 0.5 * h, &mut fine);
            let mut err: f64 = 0.0;
            for (f, b) in fine.iter().zip(&big) {
                let scale = self.tol.atol + self.tol.rtol * f.abs();
                err = err.max((f - b).abs() / (3.0 * scale));
            }
            if !err.is_finite() {
                err = f64::INFINITY;
            }
            self.stats.substeps += 1;
            let accept = err <= 1.0 || h <= h_min * 10.0;
            if accept {
                self.v.copy_from_slice(&fine);
                t += h;
            } else {
                self.stats.rejected += 1;
            }
            let factor = if err == 0.0 { 4.0 } else { (0.9 * err.powf(-1.0 / 3.0)).clamp(0.2, 4.0) };
            let proposal = (h * factor).min(self.dt);
            self.h = if accept && h < self.h { self.h.max(proposal) } else { proposal };
            let s = &mut self.scratch;
            s.g0 = g0;
            s.big = big;
            s.half = half;
            s.gm = gm;
            s.fine = fine;
        }
    }

    /// One ETD2RK step of length `h` from `v` with drive `g0` at `t`.
    #[allow(clippy::too_many_arguments)]
    fn etd2(
        w: &CsrMatrix,
        input: &mut InputDrive,
        s: &mut EtdScratch,
        tau: &[f64],
        v: &[f64],
        g0: &[f64],
        t: f64,
        h: f64,
        out: &mut [f64],
    ) {
        let mut a = std::mem::take(&mut s.a);
        for i in 0..v.len() {
            let e = (-h / tau[i]).exp();
            a[i] = g0[i] + (v[i] - g0[i]) * e;
        }
        let mut g1 = std::mem::take(&mut s.g);
        Self::drive(w, input, s, &a, t + h, &mut g1);
        for i in 0..v.len() {
            out[i] = a[i] + (g1[i] - g0[i]) * phi2(h / tau[i]);
        }
        s.a = a;
        s.g = g1;
    }
}

/// `(x − 1 + e^{−x}) / x`, accurate for small `x`.
fn phi2(x: f64) -> f64 {
    if x < 1e-3 {
        x * (0.5 - x * (1.0 / 6.0 - x * (1.0 / 24.0 - x / 120.0)))
    } else {
        (x + (-x).exp_m1()) / x
    }
}

/// Tracks saturation and non-finite values in LI states.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AnomalyMonitor {
    pub observed: u64,
    pub saturated: u64,
    pub non_finite: u64,
}

impl AnomalyMonitor {
    pub const SATURATION_MARGIN: f64 = 1e-6;
    pub const SATURATION_FRACTION: f64 = 0.01;

    pub fn observe(&mut self, rates: &[f64]) {
        for &r in rates {
            self.observed += 1;
            if !r.is_finite() {
                self.non_finite += 1;
            } else if r < Self::SATURATION_MARGIN || r > 1.0 - Self::SATURATION_MARGIN {
                self.saturated += 1;
            }
        }
    }

    pub fn saturation_fraction(&self) -> f64 {
        if self.observed == 0 {
            0.0
        } else {
            self.saturated as f64 / self.observed as f64
        }
    }

    pub fn is_anomalous(&self) -> bool {
        self.non_finite > 0 || self.saturation_fraction() > Self::SATURATION_FRACTION
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LiOptions {
    pub scheme: RateScheme,
    pub tolerance: StepTolerance,
    pub initial_voltage: Option<Vec<f64>>,
}

/// Collects `steps` LI states with explicit Euler.
pub fn simulate_li(
    net: &Network,
    stim: Option<&Stimulus>,
    steps: usize,
    dt: f64,
    noise_seed: u64,
) -> Result<StateMatrix, DynamicsError> {
    simulate_li_with(net, stim, steps, dt, noise_seed, &LiOptions::default())
}

pub fn simulate_li_with(
    net: &Network,
    stim: Option<&Stimulus>,
    steps: usize,
    dt: f64,
    noise_seed: u64,
    opts: &LiOptions,
) -> Result<StateMatrix, DynamicsError> {
    let mut integ = RateIntegrator::new(net, stim, dt, noise_seed, opts.scheme)?.with_tolerance(opts.tolerance);
    if let Some(v0) = &opts.initial_voltage {
        integ = integ.with_initial_voltage(v0)?;
    }
    let mut out = StateMatrix::with_capacity(net.n(), dt, dt, steps);
    for _ in 0..steps {
        out.push_sample(integ.advance()?);
    }
    Ok(out)
}

/// Picks Euler when it is stable for the network's time constants and
/// exponential Euler otherwise.
pub fn preferred_scheme(net: &Network, dt: f64) -> RateScheme {
    if dt <= net.tau_min() / 2.0 {
        RateScheme::Euler
    } else {
        RateScheme::ExponentialEuler
    }
}

/// Scheme used to reintegrate a run whose states looked anomalous.
pub const FALLBACK_SCHEME: RateScheme = RateScheme::ExponentialRk;

// ---------------------------------------------------------------------------
// LIF

/// Leaky integrate-and-fire parameters (potentials in mV, times in seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub e: f64,
    pub v_reset: f64,
    pub v_thr: f64,
    pub tau_ref: f64,
    pub nu0: f64,
    /// Per-neuron `v_bg − v_thr`; empty means no background drive beyond
    /// holding the resting potential, i.e. `v_bg = E`.
    #[serde(default)]
    pub bg_offset: Vec<f64>,
}

impl Default for LifParams {
    fn default() -> Self {
        Self { e: -70.0, v_reset: -70.0, v_thr: -69.0, tau_ref: 0.002, nu0: 5.0, bg_offset: Vec::new() }
    }
}

impl LifParams {
    pub fn new(e: f64, v_reset: f64, v_thr: f64, tau_ref: f64) -> Result<Self, DynamicsError> {
        let p = Self { e, v_reset, v_thr, tau_ref, ..Default::default() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.v_thr > self.v_reset) {
            return Err(DynamicsError::InvalidParameter(format!(
                "threshold {} must exceed reset {}",
                self.v_thr, self.v_reset
            )));
        }
        if !(self.tau_ref >= 0.0) {
            return Err(DynamicsError::InvalidParameter("refractory period must be non-negative".into()));
        }
        Ok(())
    }

    /// Sets each neuron's background drive so it fires at `nu` when isolated.
    pub fn with_background_rate(mut self, nu: f64, taus: &[f64]) -> Result<Self, DynamicsError> {
        self.bg_offset = taus.iter().map(|&t| background_offset(nu, t, &self)).collect::<Result<_, _>>()?;
        self.nu0 = nu;
        Ok(self)
    }

    pub fn v_bg(&self, i: usize) -> f64 {
        self.v_thr + self.offset(i)
    }

    fn offset(&self, i: usize) -> f64 {
        self.bg_offset.get(i).copied().unwrap_or(self.e - self.v_thr)
    }

    /// Refractory hold in grid steps.
    pub fn hold_steps(&self, dt: f64) -> usize {
        ((self.tau_ref / dt).round() as usize).max(1)
    }
}

/// `v_bg − v_thr` for an isolated neuron with time constant `tau` to fire
/// at `nu`: the drive whose charging time from reset to threshold equals
/// `1/nu − tau_ref`.
pub fn background_offset(nu: f64, tau: f64, params: &LifParams) -> Result<f64, DynamicsError> {
    if !(nu > 0.0) || !(tau > 0.0) {
        return Err(DynamicsError::InvalidParameter(format!("need nu > 0 and tau > 0, got {nu}, {tau}")));
    }
    let max = if params.tau_ref > 0.0 { 1.0 / params.tau_ref } else { f64::INFINITY };
    if nu >= max {
        return Err(DynamicsError::InfeasibleRate { nu, max });
    }
    let charge = (1.0 / nu - params.tau_ref) / tau;
    Ok((params.v_thr - params.v_reset) / charge.exp_m1())
}

/// Absolute background potential (mV) producing rate `nu`.
pub fn background_voltage(nu: f64, tau: f64, params: &LifParams) -> Result<f64, DynamicsError> {
    Ok(params.v_thr + background_offset(nu, tau, params)?)
}

/// Per-neuron ordered spike times.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeRaster {
    duration: f64,
    spikes: Vec<Vec<f64>>,
}

impl SpikeRaster {
    pub fn new(n: usize, duration: f64) -> Self {
        Self { duration, spikes: vec![Vec::new(); n] }
    }

    /// Builds from `(neuron, time)` pairs in any order.
    pub fn from_pairs(n: usize, duration: f64, pairs: &[(usize, f64)]) -> Result<Self, DynamicsError> {
        let mut r = Self::new(n, duration);
        let mut sorted = pairs.to_vec();
        sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for (i, t) in sorted {
            if i >= n {
                return Err(DynamicsError::InvalidParameter(format!("neuron {i} out of range")));
            }
            r.push(i, t)?;
        }
        Ok(r)
    }

    pub fn push(&mut self, neuron: usize, t: f64) -> Result<(), DynamicsError> {
        let list = &mut self.spikes[neuron];
        if list.last().is_some_and(|&last| t <= last) {
            return Err(DynamicsError::InvalidParameter(format!("spike times of neuron {neuron} must increase")));
        }
        list.push(t);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.spikes.len()
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn set_duration(&mut self, duration: f64) {
        self.duration = duration;
    }

    pub fn times(&self, neuron: usize) -> &[f64] {
        &self.spikes[neuron]
    }

    pub fn total_spikes(&self) -> usize {
        self.spikes.iter().map(Vec::len).sum()
    }

    pub fn rates(&self) -> Vec<f64> {
        self.spikes.iter().map(|s| s.len() as f64 / self.duration).collect()
    }

    pub fn mean_rate(&self) -> f64 {
        self.total_spikes() as f64 / (self.duration * self.n() as f64)
    }

    /// All spikes as `(neuron, time)` sorted by time, then neuron.
    pub fn pairs(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> =
            self.spikes.iter().enumerate().flat_map(|(i, s)| s.iter().map(move |&t| (i, t))).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    /// Union of two rasters over the same neurons.
    pub fn merge(&self, other: &SpikeRaster) -> Result<SpikeRaster, DynamicsError> {
        if self.n() != other.n() {
            return Err(DynamicsError::InvalidParameter("rasters differ in neuron count".into()));
        }
        let mut pairs = self.pairs();
        pairs.extend(other.pairs());
        Self::from_pairs(self.n(), self.duration.max(other.duration), &pairs)
    }
}

/// Step-by-step LIF integrator in threshold-relative coordinates
/// (`u = v − v_thr`, spike when `u ≥ 0`).
pub struct SpikingIntegrator<'a> {
    tau: &'a [f64],
    j_n: f64,
    input: InputDrive<'a>,
    wt: CsrMatrix,
    dt: f64,
    hold: u32,
    reset: f64,
    offset: Vec<f64>,
    syn_gain: Vec<f64>,
    u: Vec<f64>,
    refractory: Vec<u32>,
    noise: NoiseSource,
    xi: Vec<f64>,
    ff: Vec<f64>,
    incoming: Vec<f64>,
    pending: Vec<usize>,
    fired: Vec<usize>,
    step: usize,
}

impl<'a> SpikingIntegrator<'a> {
    pub fn new(
        net: &'a Network,
        stim: Option<&'a Stimulus>,
        params: &LifParams,
        dt: f64,
        noise_seed: u64,
    ) -> Result<Self, DynamicsError> {
        params.validate()?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(DynamicsError::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let tau_min = net.tau_min();
        if dt > tau_min / 2.0 {
            return Err(DynamicsError::Unstable { dt, tau_min });
        }
        let n = net.n();
        if !params.bg_offset.is_empty() && params.bg_offset.len() != n {
            return Err(DynamicsError::InvalidParameter("background drive length differs from N".into()));
        }
        let reset = params.v_reset - params.v_thr;
        Ok(Self {
            tau: &net.tau,
            j_n: net.spec.j_n,
            input: InputDrive::new(net, stim)?,
            wt: net.w.transpose(),
            dt,
            hold: params.hold_steps(dt) as u32,
            reset,
            offset: (0..n).map(|i| params.offset(i)).collect(),
            syn_gain: net.tau.iter().map(|t| params.tau_ref / t).collect(),
            u: vec![reset; n],
            refractory: vec![0; n],
            noise: NoiseSource::new(noise_seed, n),
            xi: vec![0.0; n],
            ff: vec![0.0; n],
            incoming: vec![0.0; n],
            pending: Vec::new(),
            fired: Vec::new(),
            step: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Membrane potential relative to threshold.
    pub fn relative_voltage(&self) -> &[f64] {
        &self.u
    }

    /// Advances one step; returns the neurons that fired at the new time.
    pub fn advance(&mut self) -> Result<&[usize], DynamicsError> {
        let t = self.time();
        self.input.eval(t, &mut self.ff);
        self.noise.fill(&mut self.xi);
        self.incoming.iter_mut().for_each(|x| *x = 0.0);
        for &j in &self.pending {
            for (i, w) in self.wt.row(j) {
                self.incoming[i] += w;
            }
        }
        self.fired.clear();
        let sq = self.dt.sqrt();
        self.step += 1;
        for i in 0..self.u.len() {
            if self.refractory[i] > 0 {
                self.refractory[i] -= 1;
                self.u[i] = self.reset;
                continue;
            }
            let tau = self.tau[i];
            let u = &mut self.u[i];
            *u += self.dt / tau * (-*u + self.offset[i] + self.ff[i])
                + self.j_n / tau * sq * self.xi[i]
                + self.syn_gain[i] * self.incoming[i];
            if !u.is_finite() {
                return Err(DynamicsError::IntegrationFailure { step: self.step });
            }
            if *u >= 0.0 {
                *u = self.reset;
                self.refractory[i] = self.hold;
                self.fired.push(i);
            }
        }
        std::mem::swap(&mut self.pending, &mut self.fired);
        Ok(&self.pending)
    }
}

pub fn simulate_lif(
    net: &Network,
    stim: Option<&Stimulus>,
    params: &LifParams,
    steps: usize,
    dt: f64,
    noise_seed: u64,
) -> Result<SpikeRaster, DynamicsError> {
    let mut integ = SpikingIntegrator::new(net, stim, params, dt, noise_seed)?;
    let mut raster = SpikeRaster::new(net.n(), steps as f64 * dt);
    for _ in 0..steps {
        let t = (integ.step + 1) as f64 * dt;
        for &i in integ.advance()? {
            raster.spikes[i].push(t);
        }
    }
    Ok(raster)
}

/// Exponentially filtered spike trains on the grid `t_l = (l + 1)·dt`.
pub fn spikes_to_state(raster: &SpikeRaster, dt: f64, tau_phi: f64) -> Result<StateMatrix, DynamicsError> {
    if !(tau_phi > 0.0 && dt > 0.0) {
        return Err(DynamicsError::InvalidParameter("dt and tau_phi must be positive".into()));
    }
    let n = raster.n();
    let len = (raster.duration() / dt + 1e-9).floor() as usize;
    let mut data = vec![0.0; n * len];
    let decay = (-dt / tau_phi).exp();
    for i in 0..n {
        let times = raster.times(i);
        let mut next = 0;
        let mut x = 0.0;
        for l in 0..len {
            let t = (l + 1) as f64 * dt;
            x *= decay;
            while next < times.len() && times[next] <= t + 1e-9 * dt {
                x += (-(t - times[next]).max(0.0) / tau_phi).exp();
                next += 1;
            }
            data[l * n + i] = x;
        }
    }
    StateMatrix::new(n, dt, dt, data)
}

/// Streaming version of [`spikes_to_state`].
#[derive(Debug, Clone)]
pub struct SpikeFilter {
    tau_phi: f64,
    decay: f64,
    x: Vec<f64>,
}

impl SpikeFilter {
    pub fn new(n: usize, dt: f64, tau_phi: f64) -> Self {
        Self { tau_phi, decay: (-dt / tau_phi).exp(), x: vec![0.0; n] }
    }

    /// Decays by one grid step and adds the spikes `(neuron, time)` that
    /// occurred within it, evaluated at `t_now`.
    pub fn step(&mut self, spikes: &[(usize, f64)], t_now: f64) -> &[f64] {
        self.x.iter_mut().for_each(|x| *x *= self.decay);
        for &(i, t) in spikes {
            self.x[i] += (-(t_now - t).max(0.0) / self.tau_phi).exp();
        }
        &self.x
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }
}

// ---------------------------------------------------------------------------
// Rate-curve matching

/// Equilibrium LIF rate normalized by `1/tau_ref` for input current `i`.
pub fn lif_rate_curve(i: f64, r: f64, params: &LifParams, tau_m: f64) -> f64 {
    curve(r * i, params.v_thr - params.e, params.v_reset - params.e, params.tau_ref, tau_m)
}

fn curve(x: f64, theta: f64, rho: f64, tau_ref: f64, tau_m: f64) -> f64 {
    if x <= theta {
        return 0.0;
    }
    1.0 / (1.0 + tau_m / tau_ref * ((x - rho) / (x - theta)).ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub params: LifParams,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit before the step size collapsed.
    pub converged: bool,
}

pub const MATCH_ITERATION_CAP: usize = 20_000;

/// Sum of squared differences between the logistic curve and the LIF
/// rate curve with rheobase `theta` and reset offset `rho` (both relative to
/// E) over `grid`.
pub fn matching_objective(grid: &[f64], r: f64, theta: f64, rho: f64, tau_ref: f64, tau_m: f64) -> f64 {
    if !(rho < theta) {
        return f64::INFINITY;
    }
    grid.iter()
        .map(|&i| (activation(i * r) - curve(r * i, theta, rho, tau_ref, tau_m)).powi(2))
        .sum()
}

/// Fits `v_thr` and `v_reset` so the LIF equilibrium curve matches the
/// logistic activation on `domain`. The reversal potential stays fixed:
/// only the offsets of threshold and reset from it enter the curve.
pub fn match_lif_to_li(
    domain: (f64, f64),
    points: usize,
    params: &LifParams,
    tau_m: f64,
    r: f64,
    constrain_midpoint: bool,
) -> Result<MatchResult, DynamicsError> {
    if points < 100 || !(domain.1 > domain.0) || !domain.0.is_finite() || !domain.1.is_finite() {
        return Err(DynamicsError::InvalidParameter("domain must be finite with at least 100 points".into()));
    }
    if !(params.tau_ref > 0.0 && tau_m > 0.0) {
        return Err(DynamicsError::InvalidParameter("tau_ref and tau_m must be positive".into()));
    }
    let grid: Vec<f64> =
        (0..points).map(|j| domain.0 + (domain.1 - domain.0) * j as f64 / (points - 1) as f64).collect();
    let (tr, tm) = (params.tau_ref, tau_m);
    let theta0 = params.v_thr - params.e;
    let rho0 = params.v_reset - params.e;
    let initial_objective = matching_objective(&grid, r, theta0, rho0, tr, tm);

    let (theta, rho, objective, iterations, converged) = if constrain_midpoint {
        let ratio = (tr / tm).exp();
        let f = |x: &[f64]| matching_objective(&grid, r, x[0], x[0] * ratio, tr, tm);
        let start = if theta0 < 0.0 { theta0 } else { -theta0.abs().max(1.0) };
        let (x, obj, it, ok) = multi_start_compass(&f, &[start]);
        (x[0], x[0] * ratio, obj, it, ok)
    } else {
        let f = |x: &[f64]| matching_objective(&grid, r, x[0], x[1], tr, tm);
        let (x, obj, it, ok) = multi_start_compass(&f, &[theta0, rho0]);
        (x[0], x[1], obj, it, ok)
    };
    let mut out = params.clone();
    out.v_thr = params.e + theta;
    out.v_reset = params.e + rho;
    if !converged {
        log::warn!("rate matching stopped at the iteration cap with objective {objective}");
    }
    Ok(MatchResult { params: out, objective, initial_objective, iterations, converged })
}

fn multi_start_compass(f: &impl Fn(&[f64]) -> f64, start: &[f64]) -> (Vec<f64>, f64, usize, bool) {
    let scale = start.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut starts = vec![start.to_vec()];
    for shift in [-4.0, -2.0, -1.0, 1.0] {
        starts.push(start.iter().map(|v| v + shift * scale).collect());
    }
    let mut best: Option<(Vec<f64>, f64, usize, bool)> = None;
    let mut total = 0;
    for s in starts {
        if !f(&s).is_finite() {
            continue;
        }
        let (x, obj, it, ok) = compass_search(f, &s, 0.25 * scale);
        total += it;
        if best.as_ref().is_none_or(|b| obj < b.1) {
            best = Some((x, obj, it, ok));
        }
    }
    match best {
        Some((x, obj, _, ok)) => (x, obj, total, ok),
        None => (start.to_vec(), f(start), 0, false),
    }
}

/// Derivative-free pattern search along coordinate directions.
fn compass_search(f: &impl Fn(&[f64]) -> f64, start: &[f64], step: f64) -> (Vec<f64>, f64, usize, bool) {
    let mut x = start.to_vec();
    let mut fx = f(&x);
    let mut step = step;
    for it in 0..MATCH_ITERATION_CAP {
        if step < 1e-10 {
            return (x, fx, it, true);
        }
        let mut best: Option<(Vec<f64>, f64)> = None;
        for d in 0..x.len() {
            for sign in [1.0, -1.0] {
                let mut y = x.clone();
                y[d] += sign * step;
                let fy = f(&y);
                if fy < best.as_ref().map_or(fx, |b| b.1) {
                    best = Some((y, fy));
                }
            }
        }
        match best {
            Some((y, fy)) => {
                x = y;
                fx = fy;
            }
            None => step *= 0.5,
        }
    }
    (x, fx, MATCH_ITERATION_CAP, false)
}

// ---------------------------------------------------------------------------
// Storage precision

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Half,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub state: StateMatrix,
    /// Entries clamped to the largest finite half-precision value.
    pub saturated: usize,
}

/// Rounds a value through half precision, saturating out-of-range values.
/// Returns the rounded value and whether it saturated.
pub fn round_half(v: f64) -> (f64, bool) {
    let max = f16::MAX.to_f64();
    if v.is_finite() && v.abs() > max {
        (max.copysign(v), true)
    } else {
        (f16::from_f64(v).to_f64(), false)
    }
}

pub fn quantize_state(x: &StateMatrix, mode: Precision) -> Quantized {
    match mode {
        Precision::Full => Quantized { state: x.clone(), saturated: 0 },
        Precision::Half => {
            let mut saturated = 0;
            let data = x
                .as_slice()
                .iter()
                .map(|&v| {
                    let (q, sat) = round_half(v);
                    saturated += sat as usize;
                    q
                })
                .collect();
            Quantized { state: StateMatrix { n: x.n, dt: x.dt, t0: x.t0, data }, saturated }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::NetworkSpec;

    fn single_neuron(tau: f64, j_n: f64) -> Network {
        let spec = NetworkSpec { n: 2, p: 0.0, k: 1, j_n, ..Default::default() };
        Network::from_parts(spec, CsrMatrix::empty(2, 2), vec![1.0, 1.0], vec![tau, tau]).unwrap()
    }

    fn constant_stimulus(c: f64, duration: f64) -> Stimulus {
        Stimulus::from_parts(vec![vec![c; 2]], duration, 1.0, 1.0, vec![1.0], vec![]).unwrap()
    }

    #[test]
    fn activation_values() {
        assert_eq!(activation(0.0), 0.5);
        assert!((activation(40.0) - 1.0).abs() < 1e-15);
        assert!((activation(1.0) - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn silent_network_sits_at_half() {
        let spec = NetworkSpec { n: 20, j: 0.0, j_u: 0.0, j_n: 0.0, ..Default::default() };
        let net = Network::build(&spec).unwrap();
        let x = simulate_li(&net, None, 100, 0.01, 1).unwrap();
        assert!(x.as_slice().iter().all(|&r| r == 0.5));
    }

    #[test]
    fn first_order_filter_response() {
        let net = single_neuron(1.0, 0.0);
        let stim = constant_stimulus(0.7, 100.0);
        for scheme in [RateScheme::Euler, RateScheme::ExponentialEuler, RateScheme::ExponentialRk] {
            let opts = LiOptions { scheme, ..Default::default() };
            let mut integ = RateIntegrator::new(&net, Some(&stim), 0.01, 0, opts.scheme).unwrap();
            for step in 1..=500 {
                integ.advance().unwrap();
                let t = step as f64 * 0.01;
                // Euler reproduces its own discrete recursion; the exponential
                // scheme is exact for constant drive.
                let exact = match scheme {
                    RateScheme::Euler => 0.7 * (1.0 - 0.99f64.powi(step)),
                    RateScheme::ExponentialEuler | RateScheme::ExponentialRk => 0.7 * (1.0 - (-t).exp()),
                };
                assert!((integ.voltage()[0] - exact).abs() < 1e-9, "{scheme:?} t={t}");
            }
        }
    }

    #[test]
    fn euler_rejects_stiff_networks() {
        let net = single_neuron(0.01, 0.0);
        assert!(matches!(
            RateIntegrator::new(&net, None, 0.01, 0, RateScheme::Euler),
            Err(DynamicsError::Unstable { .. })
        ));
        assert!(RateIntegrator::new(&net, None, 0.01, 0, RateScheme::ExponentialRk).is_ok());
        assert!(RateIntegrator::new(&net, None, 0.01, 0, RateScheme::ExponentialEuler).is_ok());
        assert_eq!(preferred_scheme(&net, 0.01), RateScheme::ExponentialEuler);
        assert_eq!(preferred_scheme(&net, 0.005), RateScheme::Euler);
    }

    #[test]
    fn exponential_schemes_handle_tiny_time_constants() {
        let net = single_neuron(1e-9, 0.0);
        let stim = constant_stimulus(2.0, 10.0);
        for scheme in [RateScheme::ExponentialEuler, RateScheme::ExponentialRk] {
            let mut integ = RateIntegrator::new(&net, Some(&stim), 0.01, 0, scheme).unwrap();
            for _ in 0..10 {
                integ.advance().unwrap();
            }
            assert!((integ.voltage()[0] - 2.0).abs() < 1e-9, "{scheme:?}");
        }
    }

    #[test]
    fn exponential_schemes_share_the_held_noise_model() {
        // A sample held over each step gives the AR(1) variance
        // Jn²/dt·(1−e)/(1+e), e = exp(−dt/τ), for both exponential schemes.
        for tau in [1.0, 0.004] {
            let e = (-0.01f64 / tau).exp();
            let expected = 0.09 / 0.01 * (1.0 - e) / (1.0 + e);
            for scheme in [RateScheme::ExponentialEuler, RateScheme::ExponentialRk] {
                let net = single_neuron(tau, 0.3);
                let mut integ = RateIntegrator::new(&net, None, 0.01, 9, scheme).unwrap();
                let (mut acc, mut count) = (0.0, 0.0);
                for step in 0..200_000 {
                    integ.advance().unwrap();
                    if step > 1000 {
                        acc += integ.voltage()[0].powi(2);
                        count += 1.0;
                    }
                }
                let var = acc / count;
                assert!((var / expected - 1.0).abs() < 0.05, "{scheme:?} tau {tau}: variance {var}, expected {expected}");
            }
        }
    }

    #[test]
    fn noise_matches_euler_maruyama_statistics() {
        // With no drift input the stationary variance of an OU process is
        // Jn²/(2τ); check the exponential scheme lands near it.
        let net = single_neuron(1.0, 1.0);
        let mut integ = RateIntegrator::new(&net, None, 0.01, 3, RateScheme::ExponentialRk).unwrap();
        let mut acc = 0.0;
        let mut count = 0.0;
        for step in 0..200_000 {
            integ.advance().unwrap();
            if step > 1000 {
                acc += integ.voltage()[0].powi(2);
                count += 1.0;
            }
        }
        let var = acc / count;
        assert!((var - 0.5).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn background_offset_limits_and_monotonicity() {
        let p = LifParams::new(0.0, 0.0, 1.0, 0.002).unwrap();
        let lo = background_voltage(1e-3, 1.0, &p).unwrap();
        assert!((lo - 1.0).abs() < 1e-12, "vanishing rate tends to rheobase, got {lo}");
        let five = background_voltage(5.0, 1.0, &p).unwrap();
        let ten = background_voltage(10.0, 1.0, &p).unwrap();
        assert!(ten > five && five > 1.0);
        assert!(matches!(background_voltage(500.0, 1.0, &p), Err(DynamicsError::InfeasibleRate { .. })));
    }

    #[test]
    fn spike_kernel_single_and_superposition() {
        let tau_phi = 0.1;
        let dt = 0.01;
        let a = SpikeRaster::from_pairs(1, 1.0, &[(0, 0.2)]).unwrap();
        let x = spikes_to_state(&a, dt, tau_phi).unwrap();
        for l in 0..x.len() {
            let t = x.time(l);
            let expected = if t + 1e-12 >= 0.2 { (-(t - 0.2) / tau_phi).exp() } else { 0.0 };
            assert!((x.get(0, l) - expected).abs() < 1e-12);
        }
        let b = SpikeRaster::from_pairs(1, 1.0, &[(0, 0.55)]).unwrap();
        let xb = spikes_to_state(&b, dt, tau_phi).unwrap();
        let xab = spikes_to_state(&a.merge(&b).unwrap(), dt, tau_phi).unwrap();
        for l in 0..x.len() {
            assert!((xab.get(0, l) - x.get(0, l) - xb.get(0, l)).abs() < 1e-12);
        }
        let empty = spikes_to_state(&SpikeRaster::new(3, 1.0), dt, tau_phi).unwrap();
        assert!(empty.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn subthreshold_drive_is_silent() {
        let net = single_neuron(0.5, 0.0);
        let mut p = LifParams::default();
        p.bg_offset = vec![-0.1, -0.5];
        let raster = simulate_lif(&net, None, &p, 10_000, 1e-3, 0).unwrap();
        assert_eq!(raster.total_spikes(), 0);
    }

    #[test]
    fn rate_curve_shape() {
        let mut p = LifParams::new(0.0, 2.5, 2.8, 0.002).unwrap();
        p.e = 0.0;
        assert_eq!(lif_rate_curve(2.8, 1.0, &p, 0.01), 0.0);
        let mut prev = 0.0;
        for j in 1..200 {
            let r = lif_rate_curve(2.8 + j as f64 * 0.5, 1.0, &p, 0.01);
            assert!(r > prev && r < 1.0);
            prev = r;
        }
    }

    #[test]
    fn midpoint_constraint_centres_the_curve() {
        let p = LifParams::new(0.0, -2.0, -1.0, 0.002).unwrap();
        let m = match_lif_to_li((-3.0, 3.0), 200, &p, 0.01, 1.0, true).unwrap();
        assert!((lif_rate_curve(0.0, 1.0, &m.params, 0.01) - 0.5).abs() < 1e-12);
        assert!(m.objective <= m.initial_objective);
    }

    #[test]
    fn half_precision_rounding() {
        let x = StateMatrix::new(2, 0.1, 0.1, vec![0.5, 0.123456789, 1e6, -1e6]).unwrap();
        let q = quantize_state(&x, Precision::Half);
        assert_eq!(q.state.get(0, 0), 0.5);
        assert!((q.state.get(1, 0) - 0.123456789).abs() <= 2f64.powi(-11) * 0.123456789);
        assert_eq!(q.saturated, 2);
        assert_eq!(q.state.get(0, 1), 65504.0);
        assert_eq!(quantize_state(&x, Precision::Full).state, x);
    }
}
