//! Noise generation and fixed-step integration of the stochastic,
//! controlled and deterministic (skeleton) equations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FadeError, Result};
use crate::fading_memory::{grid_index, History, PathBuilder, PathOnGrid, Segment};
use crate::model::{dissipativity_report, CoefficientModel, CompiledModel};
use crate::rng::GaussianStream;
use crate::stats::fit_line;

/// Largest noise dimension served by [`GaussianStream`].
pub const MAX_NOISE_DIM: usize = 8;

/// Brownian increments addressed by absolute grid index `k`, covering
/// `[k·h, (k + 1)·h]`.
pub trait Noise: Sync {
    fn m(&self) -> usize;
    fn h(&self) -> f64;
    fn increment(&self, k: i64, out: &mut [f64]) -> Result<()>;
}

/// Increments generated on demand; identical to those stored by
/// [`WienerPath`] for the same seed, stream and step.
#[derive(Debug, Clone, Copy)]
pub struct StreamNoise {
    gauss: GaussianStream,
    h: f64,
    sqrt_h: f64,
    m: usize,
}

impl StreamNoise {
    pub fn new(h: f64, m: usize, seed: u64, stream_id: u64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(FadeError::InvalidParams(format!("h must be positive, got {h}")));
        }
        if m == 0 || m > MAX_NOISE_DIM {
            return Err(FadeError::InvalidParams(format!(
                "noise dimension must be in 1..={MAX_NOISE_DIM}, got {m}"
            )));
        }
        Ok(StreamNoise {
            gauss: GaussianStream::new(seed, stream_id),
            h,
            sqrt_h: h.sqrt(),
            m,
        })
    }
}

impl Noise for StreamNoise {
    fn m(&self) -> usize {
        self.m
    }

    fn h(&self) -> f64 {
        self.h
    }

    #[inline]
    fn increment(&self, k: i64, out: &mut [f64]) -> Result<()> {
        self.gauss.fill(k, out);
        for v in out.iter_mut() {
            *v *= self.sqrt_h;
        }
        Ok(())
    }
}

/// A stored two-sided Wiener path with `W(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    h: f64,
    m: usize,
    k_min: i64,
    increments: Vec<f64>,
    seed: u64,
    stream_id: u64,
}

impl WienerPath {
    /// Increments on the grid cells covering `[t_min, t_max]`.
    pub fn sample(t_min: f64, t_max: f64, h: f64, m: usize, seed: u64, stream_id: u64) -> Result<Self> {
        let noise = StreamNoise::new(h, m, seed, stream_id)?;
        if !(t_min < 0.0 && 0.0 < t_max) {
            return Err(FadeError::InvalidParams(format!(
                "need t_min < 0 < t_max, got [{t_min}, {t_max}]"
            )));
        }
        let k_min = grid_index(t_min, h).unwrap_or_else(|| (t_min / h).floor() as i64);
        let k_max = grid_index(t_max, h).unwrap_or_else(|| (t_max / h).ceil() as i64);
        let mut increments = vec![0.0; (k_max - k_min) as usize * m];
        for (i, chunk) in increments.chunks_mut(m).enumerate() {
            noise.increment(k_min + i as i64, chunk)?;
        }
        Ok(WienerPath {
            h,
            m,
            k_min,
            increments,
            seed,
            stream_id,
        })
    }

    pub fn t_min(&self) -> f64 {
        self.k_min as f64 * self.h
    }

    pub fn t_max(&self) -> f64 {
        (self.k_min + self.n_cells() as i64) as f64 * self.h
    }

    pub fn n_cells(&self) -> usize {
        self.increments.len() / self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `W(k·h)` for a grid index inside the covered range.
    pub fn value_at_index(&self, k: i64) -> Result<Vec<f64>> {
        let k_max = self.k_min + self.n_cells() as i64;
        if k < self.k_min || k > k_max {
            return Err(FadeError::OutOfRange {
                time: k as f64 * self.h,
                lo: self.t_min(),
                hi: self.t_max(),
            });
        }
        let mut w = vec![0.0; self.m];
        let (lo, hi, sign) = if k >= 0 { (0, k, 1.0) } else { (k, 0, -1.0) };
        for j in lo..hi {
            let i = (j - self.k_min) as usize;
            for (acc, v) in w.iter_mut().zip(&self.increments[i * self.m..(i + 1) * self.m]) {
                *acc += sign * v;
            }
        }
        Ok(w)
    }
}

impl Noise for WienerPath {
    fn m(&self) -> usize {
        self.m
    }

    fn h(&self) -> f64 {
        self.h
    }

    #[inline]
    fn increment(&self, k: i64, out: &mut [f64]) -> Result<()> {
        let i = k - self.k_min;
        if i < 0 || i as usize >= self.n_cells() {
            return Err(FadeError::OutOfRange {
                time: k as f64 * self.h,
                lo: self.t_min(),
                hi: self.t_max(),
            });
        }
        let i = i as usize;
        out.copy_from_slice(&self.increments[i * self.m..(i + 1) * self.m]);
        Ok(())
    }
}

/// `θ_s W = W(s + ·) − W(s)`; `s` must lie on the grid.
pub fn shift_wiener(w: &WienerPath, s: f64) -> Result<WienerPath> {
    let q = grid_index(s, w.h)
        .ok_or_else(|| FadeError::InvalidParams(format!("shift {s} is off the grid")))?;
    let mut out = w.clone();
    out.k_min = w.k_min - q;
    Ok(out)
}

/// A piecewise-constant control on `[start, start + n·h]`, zero outside.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Control {
    start: f64,
    h: f64,
    m: usize,
    values: Vec<f64>,
    energy: f64,
}

impl Control {
    pub fn new(start: f64, h: f64, m: usize, values: Vec<f64>) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() || !start.is_finite() {
            return Err(FadeError::InvalidParams("control grid must be finite with h > 0".into()));
        }
        if m == 0 || !values.len().is_multiple_of(m) {
            return Err(FadeError::InvalidParams(format!(
                "control values length {} is not a multiple of m = {m}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FadeError::InvalidParams("non-finite control value".into()));
        }
        let energy = 0.5 * h * values.iter().map(|v| v * v).sum::<f64>();
        Ok(Control {
            start,
            h,
            m,
            values,
            energy,
        })
    }

    pub fn zero(start: f64, end: f64, h: f64, m: usize) -> Result<Self> {
        let n = ((end - start) / h).round().max(0.0) as usize;
        Control::new(start, h, m, vec![0.0; n * m])
    }

    /// Samples `f` at cell midpoints.
    pub fn from_fn<F: FnMut(f64, &mut [f64])>(start: f64, end: f64, h: f64, m: usize, mut f: F) -> Result<Self> {
        let n = ((end - start) / h).round().max(0.0) as usize;
        let mut values = vec![0.0; n * m];
        for (i, chunk) in values.chunks_mut(m.max(1)).enumerate() {
            f(start + (i as f64 + 0.5) * h, chunk);
        }
        Control::new(start, h, m, values)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.start + self.n_cells() as f64 * self.h
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_cells(&self) -> usize {
        self.values.len() / self.m
    }

    /// `½ ∫ |v|²`.
    pub fn energy(&self) -> f64 {
        self.energy
    }

    /// Membership in `S_M = {v : ∫|v|² < M}`.
    pub fn in_ball(&self, m_bound: f64) -> bool {
        2.0 * self.energy < m_bound
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn value_at(&self, t: f64, out: &mut [f64]) {
        let x = (t - self.start) / self.h;
        if x < 0.0 || x >= self.n_cells() as f64 {
            out.iter_mut().for_each(|o| *o = 0.0);
        } else {
            out.copy_from_slice(self.cell(x.floor() as usize));
        }
    }

    /// Mean of the control over `[lo, hi]`.
    pub fn cell_average(&self, lo: f64, hi: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let len = hi - lo;
        if !(len > 0.0) || self.n_cells() == 0 {
            return;
        }
        let tol = 1e-9 * self.h;
        let x_lo = (lo - self.start) / self.h;
        let x_hi = (hi - self.start) / self.h;
        let i_lo = (x_lo + 1e-9).floor();
        let i_hi = (x_hi - 1e-9).ceil();
        // Entirely inside one cell: copy it exactly.
        if i_hi - i_lo <= 1.0 {
            if i_lo >= 0.0 && (i_lo as usize) < self.n_cells() {
                out.copy_from_slice(self.cell(i_lo as usize));
            }
            return;
        }
        let first = i_lo.max(0.0) as usize;
        let last = (i_hi.min(self.n_cells() as f64)).max(0.0) as usize;
        for i in first..last {
            let a = self.start + i as f64 * self.h;
            let b = a + self.h;
            let overlap = (b.min(hi) - a.max(lo)).max(0.0);
            if overlap > tol {
                for (o, v) in out.iter_mut().zip(self.cell(i)) {
                    *o += v * overlap / len;
                }
            }
        }
    }

    /// `v + c·w` on this control's grid (w averaged onto it).
    pub fn axpy(&self, c: f64, w: &Control) -> Result<Control> {
        let mut values = self.values.clone();
        let mut buf = vec![0.0; self.m];
        for i in 0..self.n_cells() {
            let a = self.start + i as f64 * self.h;
            w.cell_average(a, a + self.h, &mut buf);
            for (v, b) in values[i * self.m..(i + 1) * self.m].iter_mut().zip(&buf) {
                *v += c * b;
            }
        }
        Control::new(self.start, self.h, self.m, values)
    }

    pub fn scaled(&self, c: f64) -> Control {
        let values = self.values.iter().map(|v| c * v).collect();
        Control::new(self.start, self.h, self.m, values).expect("scaling keeps values finite")
    }

    /// The same control on a grid refined by `factor`.
    pub fn refined(&self, factor: usize) -> Control {
        let factor = factor.max(1);
        let mut values = Vec::with_capacity(self.values.len() * factor);
        for i in 0..self.n_cells() {
            for _ in 0..factor {
                values.extend_from_slice(self.cell(i));
            }
        }
        Control::new(self.start, self.h / factor as f64, self.m, values).expect("finite")
    }

    /// Per-step cell averages over the integration grid `t0 + k·h`.
    pub(crate) fn on_grid(&self, t0: f64, h: f64, n_steps: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_steps * self.m];
        for k in 0..n_steps {
            let a = t0 + k as f64 * h;
            self.cell_average(a, a + h, &mut out[k * self.m..(k + 1) * self.m]);
        }
        out
    }

    /// Writes `s,v_0,…` rows at cell starts.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        write!(w, "s")?;
        for i in 0..self.m {
            write!(w, ",v_{i}")?;
        }
        writeln!(w)?;
        for i in 0..self.n_cells() {
            write!(w, "{}", self.start + i as f64 * self.h)?;
            for v in self.cell(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Euler,
    Heun,
}

/// Step, horizon, scheme and seed of one integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub h: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub seed: u64,
    pub t0: f64,
    pub t_end: f64,
    #[serde(default = "default_blowup")]
    pub blowup: f64,
}

fn default_blowup() -> f64 {
    1e6
}

impl SimConfig {
    pub fn new(h: f64, t0: f64, t_end: f64) -> Self {
        SimConfig {
            h,
            scheme: Scheme::Euler,
            seed: 0,
            t0,
            t_end,
            blowup: default_blowup(),
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_span(mut self, t0: f64, t_end: f64) -> Self {
        self.t0 = t0;
        self.t_end = t_end;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(FadeError::InvalidParams(format!("h must be positive, got {}", self.h)));
        }
        if !(self.t_end > self.t0) {
            return Err(FadeError::InvalidParams(format!(
                "need t_end > t0, got [{}, {}]",
                self.t0, self.t_end
            )));
        }
        if !(self.blowup > 0.0) {
            return Err(FadeError::InvalidParams("blow-up ceiling must be positive".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> Result<usize> {
        self.validate()?;
        let x = (self.t_end - self.t0) / self.h;
        let n = x.round();
        if (x - n).abs() > 1e-6 {
            return Err(FadeError::InvalidParams(format!(
                "horizon {} is not a multiple of h = {}",
                self.t_end - self.t0,
                self.h
            )));
        }
        Ok(n as usize)
    }

    fn start_index(&self) -> Result<i64> {
        grid_index(self.t0, self.h)
            .ok_or_else(|| FadeError::InvalidParams(format!("t0 = {} is off the grid", self.t0)))
    }
}

/// Noise, control and importance-weight options for the Euler core.
pub(crate) struct Drive<'a> {
    pub(crate) eps: f64,
    pub(crate) noise: Option<&'a dyn Noise>,
    /// Per-step control averages, `n_steps·m` values.
    pub(crate) control: Option<&'a [f64]>,
    pub(crate) log_weight: bool,
}

pub(crate) struct RunOutput {
    pub(crate) path: PathOnGrid,
    pub(crate) log_weight: f64,
}

fn check_inputs(model: &CoefficientModel, xi: &Segment, cfg: &SimConfig) -> Result<Segment> {
    cfg.validate()?;
    if xi.dim() != model.d() {
        return Err(FadeError::DimensionMismatch {
            expected: model.d(),
            got: xi.dim(),
        });
    }
    if (xi.params().h - cfg.h).abs() > 1e-12 * cfg.h {
        return Err(FadeError::InvalidParams(format!(
            "segment grid step {} differs from integration step {}",
            xi.params().h,
            cfg.h
        )));
    }
    Ok(xi.at_time(cfg.t0))
}

fn diverged(y: &[f64], blowup: f64) -> bool {
    y.iter().any(|v| !v.is_finite() || v.abs() > blowup)
}

/// Euler recursion shared by the stochastic, controlled and tilted runs.
pub(crate) fn euler_core(
    compiled: &CompiledModel,
    xi: Segment,
    cfg: &SimConfig,
    drive: &Drive<'_>,
) -> Result<RunOutput> {
    let n_steps = cfg.n_steps()?;
    let k0 = cfg.start_index()?;
    let (d, m, h) = (compiled.d, compiled.m, cfg.h);
    let t0 = cfg.t0;
    let sqrt_eps = drive.eps.sqrt();
    let noisy = drive.eps > 0.0 && drive.noise.is_some();
    let mut builder = PathBuilder::new(xi, n_steps + 1);
    let mut b = vec![0.0; d];
    let mut sig = vec![0.0; d * m];
    let mut scratch = vec![0.0; d];
    let mut dw = vec![0.0; m];
    let mut y = vec![0.0; d];
    let mut log_w = 0.0;
    let additive = compiled.additive();
    if additive {
        compiled.diffusion_into(&builder.view(), &mut sig, &mut scratch);
    }
    for k in 0..n_steps {
        let u = drive.control.map(|c| &c[k * m..(k + 1) * m]);
        let u_active = u.is_some_and(|u| u.iter().any(|v| *v != 0.0));
        {
            let view = builder.view();
            compiled.drift_into(&view, &mut b, &mut scratch);
            if !additive && (noisy || u_active) {
                compiled.diffusion_into(&view, &mut sig, &mut scratch);
            }
            let head = view.grid_value(0);
            for i in 0..d {
                y[i] = b[i] * h;
            }
            if noisy {
                if let Some(noise) = drive.noise {
                    noise.increment(k0 + k as i64, &mut dw)?;
                }
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += sig[i * m + j] * dw[j];
                    }
                    y[i] += sqrt_eps * acc;
                }
            }
            if u_active {
                let u = u.unwrap_or(&[]);
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += sig[i * m + j] * u[j];
                    }
                    y[i] += acc * h;
                }
                if drive.log_weight && noisy {
                    let uw: f64 = u.iter().zip(&dw).map(|(a, b)| a * b).sum();
                    let uu: f64 = u.iter().map(|a| a * a).sum();
                    log_w -= uw / sqrt_eps + 0.5 * uu * h / drive.eps;
                }
            }
            for i in 0..d {
                y[i] += head[i];
            }
        }
        if diverged(&y, cfg.blowup) {
            return Err(FadeError::Diverged {
                step: k + 1,
                time: t0 + (k + 1) as f64 * h,
            });
        }
        builder.push_state(&y);
    }
    Ok(RunOutput {
        path: builder.finish(t0),
        log_weight: log_w,
    })
}

pub(crate) fn heun_core(compiled: &CompiledModel, xi: Segment, cfg: &SimConfig, control: Option<&[f64]>) -> Result<PathOnGrid> {
    let n_steps = cfg.n_steps()?;
    let (d, m, h) = (compiled.d, compiled.m, cfg.h);
    let mut builder = PathBuilder::new(xi, n_steps + 1);
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut sig = vec![0.0; d * m];
    let mut scratch = vec![0.0; d];
    let mut pred = vec![0.0; d];
    let mut tail = vec![0.0; d];
    let mut y = vec![0.0; d];
    let field = |hist: &dyn History, u: Option<&[f64]>, out: &mut [f64], sig: &mut [f64], scratch: &mut [f64]| {
        compiled.drift_into(hist, out, scratch);
        if let Some(u) = u {
            compiled.diffusion_into(hist, sig, scratch);
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += sig[i * m + j] * u[j];
                }
                out[i] += acc;
            }
        }
    };
    for k in 0..n_steps {
        let u = control
            .map(|c| &c[k * m..(k + 1) * m])
            .filter(|u| u.iter().any(|v| *v != 0.0));
        let sup = builder.next_tail(&mut tail);
        {
            let view = builder.view();
            field(&view, u, &mut k1, &mut sig, &mut scratch);
            let head = view.grid_value(0);
            for i in 0..d {
                pred[i] = head[i] + h * k1[i];
            }
            let next = builder.view_next(&pred, &tail);
            field(&next, u, &mut k2, &mut sig, &mut scratch);
            for i in 0..d {
                y[i] = head[i] + 0.5 * h * (k1[i] + k2[i]);
            }
        }
        if diverged(&y, cfg.blowup) {
            return Err(FadeError::Diverged {
                step: k + 1,
                time: cfg.t0 + (k + 1) as f64 * h,
            });
        }
        builder.push(&y, &tail, sup);
    }
    Ok(builder.finish(cfg.t0))
}

/// Euler–Maruyama solution of `dY = b(Y_t)dt + √ε σ(Y_t)dW` from `xi` at
/// `cfg.t0`; refuses models without a positive dissipativity margin.
pub fn integrate_sfde(
    model: &CoefficientModel,
    xi: &Segment,
    eps: f64,
    cfg: &SimConfig,
    noise: &dyn Noise,
) -> Result<PathOnGrid> {
    integrate_controlled(model, xi, eps, None, cfg, noise)
}

/// Euler–Maruyama for the controlled equation
/// `dY = (b(Y_t) + σ(Y_t)v(t))dt + √ε σ(Y_t)dW`.
pub fn integrate_controlled(
    model: &CoefficientModel,
    xi: &Segment,
    eps: f64,
    v: Option<&Control>,
    cfg: &SimConfig,
    noise: &dyn Noise,
) -> Result<PathOnGrid> {
    let xi = prepare(model, xi, eps, cfg)?;
    if noise.m() != model.m() || (noise.h() - cfg.h).abs() > 1e-12 * cfg.h {
        return Err(FadeError::InvalidParams("noise grid does not match the model or step".into()));
    }
    let compiled = model.compile(xi.params())?;
    let cells = control_cells(model, v, cfg)?;
    let drive = Drive {
        eps,
        noise: Some(noise),
        control: cells.as_deref(),
        log_weight: false,
    };
    Ok(euler_core(&compiled, xi, cfg, &drive)?.path)
}

/// Deterministic solution of `Y' = b(Y_t) + σ(Y_t)v(t)` with the scheme
/// in `cfg`.
pub fn integrate_skeleton(
    model: &CoefficientModel,
    xi: &Segment,
    v: Option<&Control>,
    cfg: &SimConfig,
) -> Result<PathOnGrid> {
    let xi = prepare(model, xi, 0.0, cfg)?;
    let compiled = model.compile(xi.params())?;
    let cells = control_cells(model, v, cfg)?;
    match cfg.scheme {
        Scheme::Euler => {
            let drive = Drive {
                eps: 0.0,
                noise: None,
                control: cells.as_deref(),
                log_weight: false,
            };
            Ok(euler_core(&compiled, xi, cfg, &drive)?.path)
        }
        Scheme::Heun => heun_core(&compiled, xi, cfg, cells.as_deref()),
    }
}

pub(crate) fn prepare(model: &CoefficientModel, xi: &Segment, eps: f64, cfg: &SimConfig) -> Result<Segment> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(FadeError::InvalidParams(format!("eps must be ≥ 0, got {eps}")));
    }
    let xi = check_inputs(model, xi, cfg)?;
    model.ensure_stable(xi.params().r, eps)?;
    Ok(xi)
}

pub(crate) fn control_cells(model: &CoefficientModel, v: Option<&Control>, cfg: &SimConfig) -> Result<Option<Vec<f64>>> {
    match v {
        None => Ok(None),
        Some(v) => {
            if v.m() != model.m() {
                return Err(FadeError::DimensionMismatch {
                    expected: model.m(),
                    got: v.m(),
                });
            }
            Ok(Some(v.on_grid(cfg.t0, cfg.h, cfg.n_steps()?)))
        }
    }
}

/// Runs `f` for replica indices `0..n` (in parallel) and collects in order.
pub(crate) fn replicate<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Monte Carlo moment and contraction estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckReport {
    pub times: Vec<f64>,
    /// `E|Y¹(t)|²`
    pub mean_sq_state: Vec<f64>,
    /// `E‖Y¹_t‖_r²`
    pub mean_sq_norm: Vec<f64>,
    /// `E‖Y¹_t − Y²_t‖_r²`
    pub mean_sq_diff: Vec<f64>,
    /// Decay rate of `E‖Y¹_t − Y²_t‖_r²` (squared-norm convention).
    pub fitted_rate: Option<f64>,
    pub r2: Option<f64>,
    pub degenerate: bool,
    pub lambda_max: f64,
    pub n_replicas: usize,
}

impl BoundCheckReport {
    pub fn rate_fraction_of_lambda_max(&self) -> Option<f64> {
        self.fitted_rate.map(|r| r / self.lambda_max)
    }
}

/// Moment bounds and the contraction rate of two solutions driven by the
/// same noise from `xi1` and `xi2`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_bounds(
    model: &CoefficientModel,
    xi1: &Segment,
    xi2: &Segment,
    eps: f64,
    cfg: &SimConfig,
    n_replicas: usize,
    seed: u64,
) -> Result<BoundCheckReport> {
    if n_replicas < 1 {
        return Err(FadeError::InvalidParams("need at least one replica".into()));
    }
    let n_steps = cfg.n_steps()?;
    let every = (n_steps / 100).max(1);
    let idx: Vec<usize> = (0..=n_steps).step_by(every).collect();
    let r = xi1.params().r;
    let lambda_max = dissipativity_report(model, r, eps, 1, seed)?.lambda_max;
    let per_rep = replicate(n_replicas, |i| {
        let noise = StreamNoise::new(cfg.h, model.m(), seed, i as u64)?;
        let p1 = integrate_sfde(model, xi1, eps, cfg, &noise)?;
        let p2 = integrate_sfde(model, xi2, eps, cfg, &noise)?;
        let diff = p1.difference(&p2)?;
        let mut out = Vec::with_capacity(3 * idx.len());
        for &k in &idx {
            let y: f64 = p1.state(k).iter().map(|v| v * v).sum();
            let n = p1.norm_at_index(k);
            let dn = diff.norm_at_index(k);
            out.extend_from_slice(&[y, n * n, dn * dn]);
        }
        Ok(out)
    })?;
    let nt = idx.len();
    let mut sums = vec![0.0; 3 * nt];
    for rep in &per_rep {
        for (s, v) in sums.iter_mut().zip(rep) {
            *s += v;
        }
    }
    let nr = n_replicas as f64;
    let col = |c: usize| -> Vec<f64> { (0..nt).map(|j| sums[3 * j + c] / nr).collect() };
    let times: Vec<f64> = idx.iter().map(|&k| cfg.t0 + k as f64 * cfg.h).collect();
    let mean_sq_diff = col(2);
    let (tx, ly): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&mean_sq_diff)
        .filter(|(_, v)| **v > 1e-250)
        .map(|(t, v)| (*t, v.ln()))
        .unzip();
    let fit = if tx.len() >= 3 { fit_line(&tx, &ly).ok() } else { None };
    Ok(BoundCheckReport {
        times,
        mean_sq_state: col(0),
        mean_sq_norm: col(1),
        degenerate: fit.is_none(),
        fitted_rate: fit.map(|f| -f.slope),
        r2: fit.map(|f| f.r2),
        mean_sq_diff,
        lambda_max,
        n_replicas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fading_memory::{DelayMeasure, MemoryParams};
    use crate::model::Nonlinearity;

    fn ou(a: f64, s: f64) -> CoefficientModel {
        CoefficientModel::scalar(a, 0.0, Nonlinearity::Zero, s, 0.0, DelayMeasure::atom(0.0), DelayMeasure::atom(0.0))
            .unwrap()
    }

    #[test]
    fn wiener_path_anchor_and_extension() {
        let w = WienerPath::sample(-1.0, 1.0, 0.1, 2, 5, 0).unwrap();
        assert_eq!(w.value_at_index(0).unwrap(), vec![0.0, 0.0]);
        let wide = WienerPath::sample(-3.0, 1.0, 0.1, 2, 5, 0).unwrap();
        let mut a = [0.0; 2];
        let mut b = [0.0; 2];
        for k in -10..10 {
            w.increment(k, &mut a).unwrap();
            wide.increment(k, &mut b).unwrap();
            assert_eq!(a, b);
        }
        assert!(w.increment(-11, &mut a).is_err());
        assert!(WienerPath::sample(0.0, 1.0, 0.1, 1, 0, 0).is_err());
        assert!(WienerPath::sample(-1.0, 1.0, 0.0, 1, 0, 0).is_err());
    }

    #[test]
    fn stream_noise_matches_stored_path() {
        let w = WienerPath::sample(-2.0, 2.0, 0.05, 3, 11, 4).unwrap();
        let s = StreamNoise::new(0.05, 3, 11, 4).unwrap();
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        for k in -40..40 {
            w.increment(k, &mut a).unwrap();
            s.increment(k, &mut b).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_coefficients_freeze_the_state() {
        let model = CoefficientModel::scalar(1e-300, 0.0, Nonlinearity::Zero, 0.0, 0.0, DelayMeasure::atom(0.0), DelayMeasure::atom(0.0))
            .unwrap();
        let p = MemoryParams::new(1.0, 0.01, 1.0, 1e-6).unwrap();
        let xi = Segment::constant(p, 0.0, &[0.7]).unwrap();
        let cfg = SimConfig::new(0.01, 0.0, 1.0);
        let noise = StreamNoise::new(0.01, 1, 0, 0).unwrap();
        let path = integrate_sfde(&model, &xi, 0.3, &cfg, &noise).unwrap();
        assert!(path.states().iter().all(|v| (*v - 0.7).abs() < 1e-290));
    }

    #[test]
    fn controlled_with_zero_control_is_bit_exact() {
        let model = ou(1.0, 1.0);
        let p = MemoryParams::new(1.0, 0.01, 1.0, 1e-6).unwrap();
        let xi = Segment::constant(p, 0.0, &[0.3]).unwrap();
        let cfg = SimConfig::new(0.01, 0.0, 2.0);
        let noise = StreamNoise::new(0.01, 1, 3, 0).unwrap();
        let a = integrate_sfde(&model, &xi, 0.2, &cfg, &noise).unwrap();
        let v = Control::zero(0.0, 2.0, 0.1, 1).unwrap();
        let b = integrate_controlled(&model, &xi, 0.2, Some(&v), &cfg, &noise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_control_linear_response() {
        let (a, c, t) = (1.0, 0.5, 2.0);
        let model = ou(a, 1.0);
        let err = |h: f64| {
            let p = MemoryParams::new(1.0, h, 1.0, 1e-6).unwrap();
            let xi = Segment::zeros(p, 0.0, 1).unwrap();
            let cfg = SimConfig::new(h, 0.0, t);
            let v = Control::new(0.0, t, 1, vec![c]).unwrap();
            let noise = StreamNoise::new(h, 1, 0, 0).unwrap();
            let path = integrate_controlled(&model, &xi, 0.0, Some(&v), &cfg, &noise).unwrap();
            (path.last()[0] - c / a * (1.0 - (-a * t).exp())).abs()
        };
        let (e1, e2) = (err(0.01), err(0.005));
        assert!(e1 < 0.01);
        assert!((e1 / e2 - 2.0).abs() < 0.2);
    }

    #[test]
    fn unstable_model_is_refused() {
        let model = CoefficientModel::scalar(0.1, 2.0, Nonlinearity::Zero, 1.0, 0.0, DelayMeasure::atom(-1.0), DelayMeasure::atom(0.0))
            .unwrap();
        let p = MemoryParams::new(1.0, 0.01, 1.0, 1e-6).unwrap();
        let xi = Segment::zeros(p, 0.0, 1).unwrap();
        let noise = StreamNoise::new(0.01, 1, 0, 0).unwrap();
        let r = integrate_sfde(&model, &xi, 0.1, &SimConfig::new(0.01, 0.0, 1.0), &noise);
        assert!(matches!(r, Err(FadeError::UnstableModel { .. })));
    }

    #[test]
    fn blow_up_guard_names_the_step() {
        let model = ou(1.0, 1.0);
        let p = MemoryParams::new(1.0, 0.5, 1.0, 1e-6).unwrap();
        let xi = Segment::constant(p, 0.0, &[1.0]).unwrap();
        // explicit Euler with a·h = 5 is unstable
        let model_fast = CoefficientModel::scalar(10.0, 0.0, Nonlinearity::Zero, 1.0, 0.0, DelayMeasure::atom(0.0), DelayMeasure::atom(0.0))
            .unwrap();
        let cfg = SimConfig::new(0.5, 0.0, 50.0);
        let r = integrate_skeleton(&model_fast, &xi, None, &cfg);
        assert!(matches!(r, Err(FadeError::Diverged { step, .. }) if step > 1 && step < 100));
        assert!(integrate_skeleton(&model, &xi, None, &cfg).is_ok());
    }

    #[test]
    fn control_cell_average_and_energy() {
        let v = Control::new(0.0, 0.5, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(v.energy(), 0.5 * 0.5 * 10.0);
        let mut out = [0.0];
        v.cell_average(0.25, 0.75, &mut out);
        assert!((out[0] - 2.0).abs() < 1e-15);
        v.cell_average(0.5, 0.6, &mut out);
        assert_eq!(out[0], 3.0);
        v.cell_average(2.0, 3.0, &mut out);
        assert_eq!(out[0], 0.0);
        assert!(v.in_ball(5.1) && !v.in_ball(5.0));
    }
}
