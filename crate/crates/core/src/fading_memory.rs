//! Finite representation of the fading-memory phase space.
//!
//! A history φ on (−∞, 0] is stored as its values on the grid
//! `0, −h, …, −L` plus a tail coefficient `g` such that φ(τ) ≈ g·e^{−rτ}
//! for τ < −L. The weighted sup-norm is
//!
//! ```text
//! ‖φ‖_r = sup_{τ ≤ 0} e^{rτ} |φ(τ)|
//! ```
//!
//! and a path Φ is a sequence of such segments linked by
//! `Φ(t)(τ) = Φ(t + τ)(0)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{FadeError, Result};

const GRID_TOL: f64 = 1e-9;

/// Euclidean norm of a small vector.
pub fn euclid(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn grid_count(length: f64, h: f64) -> Option<usize> {
    let x = length / h;
    let n = x.round();
    if (x - n).abs() <= GRID_TOL * x.max(1.0) {
        Some(n as usize)
    } else {
        None
    }
}

/// Integer index of `t` on the absolute grid `h·ℤ`, if aligned.
pub fn grid_index(t: f64, h: f64) -> Option<i64> {
    let x = t / h;
    let n = x.round();
    if (x - n).abs() <= 1e-6 {
        Some(n as i64)
    } else {
        None
    }
}

/// Time `k` steps after `t0`; computed on the absolute grid when `t0` is
/// aligned so that shifted segments and path segments agree bit for bit.
pub(crate) fn grid_time(t0: f64, h: f64, k: usize) -> f64 {
    match grid_index(t0, h) {
        Some(i) => (i + k as i64) as f64 * h,
        None => t0 + k as f64 * h,
    }
}

/// Discretization of the phase space: fading rate, grid step, window and
/// the tolerance allowed for the extrapolated tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryParams {
    pub r: f64,
    pub h: f64,
    pub window: f64,
    pub tail_tol: f64,
}

impl MemoryParams {
    pub fn new(r: f64, h: f64, window: f64, tail_tol: f64) -> Result<Self> {
        let p = MemoryParams {
            r,
            h,
            window,
            tail_tol,
        };
        p.validate()?;
        Ok(p)
    }

    /// Like [`MemoryParams::new`] but rounds the window up to the grid.
    pub fn aligned(r: f64, h: f64, min_window: f64, tail_tol: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(FadeError::InvalidParams(format!("h must be positive, got {h}")));
        }
        let k = ((min_window / h) - GRID_TOL).ceil().max(1.0);
        Self::new(r, h, k * h, tail_tol)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FadeError::InvalidParams(msg));
        if !(self.r > 0.0) || !self.r.is_finite() {
            return bad(format!("r must be positive, got {}", self.r));
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return bad(format!("h must be positive, got {}", self.h));
        }
        if !(self.window >= self.h * (1.0 - GRID_TOL)) || !self.window.is_finite() {
            return bad(format!("window {} must be at least h = {}", self.window, self.h));
        }
        if grid_count(self.window, self.h).is_none() {
            return bad(format!(
                "window {} is not an integer multiple of h = {}",
                self.window, self.h
            ));
        }
        if !(self.tail_tol > 0.0) {
            return bad(format!("tail_tol must be positive, got {}", self.tail_tol));
        }
        Ok(())
    }

    /// Number of grid intervals in the window, `L / h`.
    pub fn n_lags(&self) -> usize {
        grid_count(self.window, self.h).unwrap_or(1).max(1)
    }

    pub fn lag(&self, j: usize) -> f64 {
        -(j as f64) * self.h
    }

    /// The same window regridded at a new step (window rounded up).
    pub fn with_step(&self, h: f64) -> Result<Self> {
        Self::aligned(self.r, h, self.window, self.tail_tol)
    }

    pub(crate) fn tail_rule(&self) -> TailRule {
        let decay = (-self.r * self.h).exp();
        TailRule {
            decay,
            blend: self.h / self.window,
            drop_weight: (-self.r * self.window).exp(),
        }
    }
}

/// Update applied to the tail when a value leaves the window.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TailRule {
    decay: f64,
    blend: f64,
    drop_weight: f64,
}

impl TailRule {
    /// `g' = e^{−rh}·((1 − h/L)·g + (h/L)·e^{−rL}·dropped)` and the
    /// discounted supremum of everything that has left the window.
    pub(crate) fn absorb(&self, tail: &[f64], tail_sup: f64, dropped: &[f64], out: &mut [f64]) -> f64 {
        let keep = 1.0 - self.blend;
        for ((o, g), x) in out.iter_mut().zip(tail).zip(dropped) {
            *o = self.decay * (keep * g + self.blend * self.drop_weight * x);
        }
        let dropped_weighted = self.decay * self.drop_weight * euclid(dropped);
        (self.decay * tail_sup).max(dropped_weighted)
    }
}

/// Read access to a history on the lag grid.
pub trait History {
    fn dim(&self) -> usize;
    /// Value at lag `−j·h`, `0 ≤ j ≤ n_lags`.
    fn grid_value(&self, j: usize) -> &[f64];
    fn tail(&self) -> &[f64];
}

/// A discretized element of the phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    head_time: f64,
    dim: usize,
    values: Vec<f64>,
    tail: Vec<f64>,
    tail_sup: f64,
    params: MemoryParams,
}

impl Segment {
    /// Builds a segment from grid values (lag-major, `(L/h + 1)·dim`
    /// entries, lag 0 first) and a tail coefficient.
    pub fn new(
        params: MemoryParams,
        head_time: f64,
        dim: usize,
        values: Vec<f64>,
        tail: Vec<f64>,
    ) -> Result<Self> {
        params.validate()?;
        if dim == 0 {
            return Err(FadeError::InvalidSegment("dimension must be positive".into()));
        }
        let expected = (params.n_lags() + 1) * dim;
        if values.len() != expected {
            return Err(FadeError::InvalidSegment(format!(
                "expected {expected} grid values, got {}",
                values.len()
            )));
        }
        if tail.len() != dim {
            return Err(FadeError::DimensionMismatch {
                expected: dim,
                got: tail.len(),
            });
        }
        if !head_time.is_finite() || values.iter().chain(tail.iter()).any(|v| !v.is_finite()) {
            return Err(FadeError::InvalidSegment("non-finite value".into()));
        }
        let tail_sup = euclid(&tail);
        let seg = Segment {
            head_time,
            dim,
            values,
            tail,
            tail_sup,
            params,
        };
        let grid = seg.grid_norm();
        if tail_sup > grid * (1.0 + params.tail_tol) {
            return Err(FadeError::InvalidSegment(format!(
                "tail coefficient {tail_sup} exceeds the grid norm {grid} by more than tail_tol"
            )));
        }
        Ok(seg)
    }

    pub fn constant(params: MemoryParams, head_time: f64, value: &[f64]) -> Result<Self> {
        let n = params.n_lags() + 1;
        let values = value.iter().copied().cycle().take(n * value.len()).collect();
        Segment::new(params, head_time, value.len(), values, vec![0.0; value.len()])
    }

    pub fn zeros(params: MemoryParams, head_time: f64, dim: usize) -> Result<Self> {
        Segment::constant(params, head_time, &vec![0.0; dim])
    }

    /// Samples `f(τ)` on the lag grid; the tail coefficient is zero.
    pub fn from_fn<F>(params: MemoryParams, head_time: f64, dim: usize, f: F) -> Result<Self>
    where
        F: FnMut(f64, &mut [f64]),
    {
        Segment::from_fn_with_tail(params, head_time, dim, f, vec![0.0; dim])
    }

    pub fn from_fn_with_tail<F>(
        params: MemoryParams,
        head_time: f64,
        dim: usize,
        mut f: F,
        tail: Vec<f64>,
    ) -> Result<Self>
    where
        F: FnMut(f64, &mut [f64]),
    {
        params.validate()?;
        let n = params.n_lags() + 1;
        let mut values = vec![0.0; n * dim];
        for (j, chunk) in values.chunks_mut(dim.max(1)).enumerate() {
            f(params.lag(j), chunk);
        }
        Segment::new(params, head_time, dim, values, tail)
    }

    /// Internal constructor that skips the tail-size check; used for
    /// segments produced by shifting, where the tail is inherited history.
    pub(crate) fn from_parts(
        params: MemoryParams,
        head_time: f64,
        dim: usize,
        values: Vec<f64>,
        tail: Vec<f64>,
        tail_sup: f64,
    ) -> Self {
        Segment {
            head_time,
            dim,
            values,
            tail,
            tail_sup,
            params,
        }
    }

    pub fn head_time(&self) -> f64 {
        self.head_time
    }

    /// The same history re-anchored at another head time.
    pub fn at_time(&self, head_time: f64) -> Segment {
        let mut s = self.clone();
        s.head_time = head_time;
        s
    }

    pub fn params(&self) -> &MemoryParams {
        &self.params
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Weighted supremum of the history beyond the window.
    pub fn tail_sup(&self) -> f64 {
        self.tail_sup
    }

    pub fn n_lags(&self) -> usize {
        self.params.n_lags()
    }

    pub fn head(&self) -> &[f64] {
        &self.values[..self.dim]
    }

    /// Value at an arbitrary lag `τ ≤ 0`: linear interpolation inside the
    /// window, `g·e^{−rτ}` beyond it.
    pub fn value_at_lag(&self, lag: f64, out: &mut [f64]) -> Result<()> {
        if out.len() != self.dim {
            return Err(FadeError::DimensionMismatch {
                expected: self.dim,
                got: out.len(),
            });
        }
        if !(lag <= 0.0) {
            return Err(FadeError::InvalidParams(format!("lag must be ≤ 0, got {lag}")));
        }
        let n = self.n_lags();
        let x = -lag / self.params.h;
        if x > n as f64 + GRID_TOL {
            let factor = (-self.params.r * lag).exp();
            for (o, g) in out.iter_mut().zip(&self.tail) {
                *o = g * factor;
            }
            return Ok(());
        }
        let j0 = (x.floor() as usize).min(n);
        let frac = x - j0 as f64;
        if frac <= GRID_TOL || j0 == n {
            out.copy_from_slice(self.grid_value(j0));
        } else {
            let a = self.grid_value(j0);
            let b = self.grid_value(j0 + 1);
            for ((o, x0), x1) in out.iter_mut().zip(a).zip(b) {
                *o = (1.0 - frac) * x0 + frac * x1;
            }
        }
        Ok(())
    }

    fn grid_norm(&self) -> f64 {
        let mut best = 0.0f64;
        let mut weight = 1.0;
        let step = (-self.params.r * self.params.h).exp();
        for chunk in self.values.chunks(self.dim) {
            best = best.max(weight * euclid(chunk));
            weight *= step;
        }
        best
    }

    /// `sup_{τ ≤ 0} e^{rτ}|φ(τ)|` over the grid and the history beyond it.
    pub fn cr_norm(&self) -> f64 {
        self.grid_norm().max(self.tail_sup)
    }

    /// Advances the segment by one grid step with `new_head` at lag 0.
    pub fn shift(&self, new_head: &[f64]) -> Result<Segment> {
        if new_head.len() != self.dim {
            return Err(FadeError::DimensionMismatch {
                expected: self.dim,
                got: new_head.len(),
            });
        }
        if new_head.iter().any(|v| !v.is_finite()) {
            return Err(FadeError::InvalidSegment("non-finite head".into()));
        }
        let n = self.n_lags();
        let rule = self.params.tail_rule();
        let mut tail = vec![0.0; self.dim];
        let tail_sup = rule.absorb(&self.tail, self.tail_sup, self.grid_value(n), &mut tail);
        let mut values = Vec::with_capacity(self.values.len());
        values.extend_from_slice(new_head);
        values.extend_from_slice(&self.values[..n * self.dim]);
        Ok(Segment::from_parts(
            self.params,
            grid_time(self.head_time, self.params.h, 1),
            self.dim,
            values,
            tail,
            tail_sup,
        ))
    }

    /// Pointwise difference; the tail supremum of the result is that of
    /// the extrapolated tail difference.
    pub fn sub(&self, other: &Segment) -> Result<Segment> {
        self.combine(other, 1.0, -1.0)
    }

    pub fn add(&self, other: &Segment) -> Result<Segment> {
        self.combine(other, 1.0, 1.0)
    }

    pub fn scale(&self, c: f64) -> Segment {
        let values = self.values.iter().map(|v| c * v).collect();
        let tail: Vec<f64> = self.tail.iter().map(|v| c * v).collect();
        Segment::from_parts(
            self.params,
            self.head_time,
            self.dim,
            values,
            tail,
            c.abs() * self.tail_sup,
        )
    }

    fn combine(&self, other: &Segment, a: f64, b: f64) -> Result<Segment> {
        if self.dim != other.dim || self.values.len() != other.values.len() {
            return Err(FadeError::DimensionMismatch {
                expected: self.values.len(),
                got: other.values.len(),
            });
        }
        if self.params != other.params {
            return Err(FadeError::InvalidParams("segments use different memory grids".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        let tail: Vec<f64> = self.tail.iter().zip(&other.tail).map(|(x, y)| a * x + b * y).collect();
        let tail_sup = euclid(&tail);
        Ok(Segment::from_parts(
            self.params,
            self.head_time,
            self.dim,
            values,
            tail,
            tail_sup,
        ))
    }

    /// Writes `head_time,lag,value_0,…` rows.
    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> Result<()> {
        if header {
            write!(w, "head_time,lag")?;
            for i in 0..self.dim {
                write!(w, ",value_{i}")?;
            }
            writeln!(w)?;
        }
        for j in 0..=self.n_lags() {
            write!(w, "{},{}", self.head_time, self.params.lag(j))?;
            for v in self.grid_value(j) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

impl History for Segment {
    fn dim(&self) -> usize {
        self.dim
    }

    fn grid_value(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    fn tail(&self) -> &[f64] {
        &self.tail
    }
}

/// Probability measure on (−∞, 0]: point masses plus an optional
/// exponential density `c·β·e^{βτ}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayMeasure {
    pub atoms: Vec<(f64, f64)>,
    #[serde(default)]
    pub expo: Option<ExpoPart>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpoPart {
    pub mass: f64,
    pub beta: f64,
}

impl DelayMeasure {
    pub fn new(atoms: Vec<(f64, f64)>, expo: Option<ExpoPart>) -> Result<Self> {
        let mu = DelayMeasure { atoms, expo };
        mu.validate()?;
        Ok(mu)
    }

    pub fn atom(lag: f64) -> Self {
        DelayMeasure {
            atoms: vec![(lag, 1.0)],
            expo: None,
        }
    }

    pub fn exponential(beta: f64) -> Self {
        DelayMeasure {
            atoms: Vec::new(),
            expo: Some(ExpoPart { mass: 1.0, beta }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FadeError::InvalidMeasure(m));
        let mut total = 0.0;
        for &(lag, w) in &self.atoms {
            if !(lag <= 0.0) || !lag.is_finite() {
                return bad(format!("atom lag {lag} must be finite and ≤ 0"));
            }
            if !(w > 0.0) || !w.is_finite() {
                return bad(format!("atom weight {w} must be positive"));
            }
            total += w;
        }
        if let Some(e) = self.expo {
            if !(e.mass >= 0.0) || !e.mass.is_finite() {
                return bad(format!("density mass {} must be ≥ 0", e.mass));
            }
            if !(e.beta > 0.0) || !e.beta.is_finite() {
                return bad(format!("density decay {} must be positive", e.beta));
            }
            total += e.mass;
        }
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("total mass is {total}, expected 1"));
        }
        Ok(())
    }

    /// `μ^{(κ)} = ∫ e^{−κτ} μ(dτ)`.
    pub fn moment(&self, kappa: f64) -> Result<f64> {
        let mut acc: f64 = self.atoms.iter().map(|&(lag, w)| w * (-kappa * lag).exp()).sum();
        if let Some(e) = self.expo {
            if e.mass > 0.0 {
                if e.beta <= kappa {
                    return Err(FadeError::DivergentMoment { kappa, beta: e.beta });
                }
                acc += e.mass * e.beta / (e.beta - kappa);
            }
        }
        Ok(acc)
    }

    /// `∫_{−∞}^{−L} e^{−κτ} μ(dτ)`; atoms exactly at `−L` are inside.
    pub fn weighted_tail(&self, window: f64, kappa: f64) -> Result<f64> {
        let mut acc: f64 = self
            .atoms
            .iter()
            .filter(|&&(lag, _)| lag < -window * (1.0 + GRID_TOL) - GRID_TOL)
            .map(|&(lag, w)| w * (-kappa * lag).exp())
            .sum();
        if let Some(e) = self.expo {
            if e.mass > 0.0 {
                if e.beta <= kappa {
                    return Err(FadeError::DivergentMoment { kappa, beta: e.beta });
                }
                acc += e.mass * e.beta / (e.beta - kappa) * (-(e.beta - kappa) * window).exp();
            }
        }
        Ok(acc)
    }

    /// Membership in `M_κ` with a strictly finite moment.
    pub fn has_moment(&self, kappa: f64) -> bool {
        self.moment(kappa).is_ok()
    }

    /// Deepest atom lag magnitude (0 if none).
    pub fn deepest_atom(&self) -> f64 {
        self.atoms.iter().map(|&(lag, _)| -lag).fold(0.0, f64::max)
    }

    /// Shallowest non-zero atom lag magnitude.
    pub fn shortest_delay(&self) -> Option<f64> {
        self.atoms
            .iter()
            .map(|&(lag, _)| -lag)
            .filter(|&d| d > 0.0)
            .min_by(|a, b| a.total_cmp(b))
    }
}

/// `μ^{(κ)}`; see [`DelayMeasure::moment`].
pub fn measure_moment(mu: &DelayMeasure, kappa: f64) -> Result<f64> {
    mu.moment(kappa)
}

#[derive(Debug, Clone, Copy)]
enum AtomPoint {
    Grid { j0: usize, j1: usize, frac: f64, mass: f64 },
    Tail { factor: f64, mass: f64 },
}

/// A delay measure compiled against a lag grid.
#[derive(Debug, Clone)]
pub(crate) struct DelayStencil {
    atoms: Vec<AtomPoint>,
    density: Vec<(usize, f64)>,
    tail_linear: f64,
    tail_square: f64,
    dim_hint: usize,
}

impl DelayStencil {
    pub(crate) fn new(mu: &DelayMeasure, params: &MemoryParams) -> Result<Self> {
        let n = params.n_lags();
        let h = params.h;
        let r = params.r;
        let mut atoms = Vec::with_capacity(mu.atoms.len());
        for &(lag, mass) in &mu.atoms {
            let x = -lag / h;
            if x > n as f64 + GRID_TOL {
                atoms.push(AtomPoint::Tail {
                    factor: (-r * lag).exp(),
                    mass,
                });
                continue;
            }
            let mut j0 = x.floor() as usize;
            let mut frac = x - j0 as f64;
            if 1.0 - frac <= GRID_TOL {
                j0 += 1;
                frac = 0.0;
            }
            if frac <= GRID_TOL || j0 >= n {
                atoms.push(AtomPoint::Grid {
                    j0: j0.min(n),
                    j1: j0.min(n),
                    frac: 0.0,
                    mass,
                });
            } else {
                atoms.push(AtomPoint::Grid {
                    j0,
                    j1: j0 + 1,
                    frac,
                    mass,
                });
            }
        }
        let mut density = Vec::new();
        let mut tail_linear = 0.0;
        let mut tail_square = 0.0;
        if let Some(e) = mu.expo {
            if e.mass > 0.0 {
                if e.beta <= 2.0 * r {
                    return Err(FadeError::DivergentMoment {
                        kappa: 2.0 * r,
                        beta: e.beta,
                    });
                }
                let l = params.window;
                let mut raw: Vec<(usize, f64)> = (0..=n)
                    .map(|j| {
                        let end = if j == 0 || j == n { 0.5 } else { 1.0 };
                        (j, end * h * (-e.beta * j as f64 * h).exp())
                    })
                    .collect();
                // Rescale so the rule integrates the window mass exactly.
                let exact = 1.0 - (-e.beta * l).exp();
                let approx: f64 = raw.iter().map(|&(_, w)| w).sum::<f64>() * e.beta;
                let scale = e.mass * e.beta * exact / approx;
                for w in raw.iter_mut() {
                    w.1 *= scale;
                }
                density = raw;
                tail_linear = e.mass * e.beta / (e.beta - r) * (-(e.beta - r) * l).exp();
                tail_square =
                    e.mass * e.beta / (e.beta - 2.0 * r) * (-(e.beta - 2.0 * r) * l).exp();
            }
        }
        Ok(DelayStencil {
            atoms,
            density,
            tail_linear,
            tail_square,
            dim_hint: 0,
        })
    }

    /// `∫ φ(τ) μ(dτ)` written into `out`.
    pub(crate) fn linear<H: History + ?Sized>(&self, hist: &H, out: &mut [f64]) {
        let _ = self.dim_hint;
        out.iter_mut().for_each(|o| *o = 0.0);
        for atom in &self.atoms {
            match *atom {
                AtomPoint::Grid { j0, j1, frac, mass } => {
                    let a = hist.grid_value(j0);
                    if frac == 0.0 {
                        for (o, x) in out.iter_mut().zip(a) {
                            *o += mass * x;
                        }
                    } else {
                        let b = hist.grid_value(j1);
                        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                            *o += mass * ((1.0 - frac) * x + frac * y);
                        }
                    }
                }
                AtomPoint::Tail { factor, mass } => {
                    for (o, g) in out.iter_mut().zip(hist.tail()) {
                        *o += mass * factor * g;
                    }
                }
            }
        }
        for &(j, w) in &self.density {
            for (o, x) in out.iter_mut().zip(hist.grid_value(j)) {
                *o += w * x;
            }
        }
        if self.tail_linear != 0.0 {
            for (o, g) in out.iter_mut().zip(hist.tail()) {
                *o += self.tail_linear * g;
            }
        }
    }

    /// `∫ |φ(τ)|² μ(dτ)`.
    pub(crate) fn square<H: History + ?Sized>(&self, hist: &H) -> f64 {
        let mut acc = 0.0;
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        for atom in &self.atoms {
            match *atom {
                AtomPoint::Grid { j0, j1, frac, mass } => {
                    let a = hist.grid_value(j0);
                    if frac == 0.0 {
                        acc += mass * sq(a);
                    } else {
                        let b = hist.grid_value(j1);
                        let s: f64 = a
                            .iter()
                            .zip(b)
                            .map(|(x, y)| {
                                let v = (1.0 - frac) * x + frac * y;
                                v * v
                            })
                            .sum();
                        acc += mass * s;
                    }
                }
                AtomPoint::Tail { factor, mass } => {
                    acc += mass * factor * factor * sq(hist.tail());
                }
            }
        }
        for &(j, w) in &self.density {
            acc += w * sq(hist.grid_value(j));
        }
        if self.tail_square != 0.0 {
            acc += self.tail_square * sq(hist.tail());
        }
        acc
    }
}

/// `∫ φ(τ) μ(dτ)` for a segment.
pub fn delay_integral_linear(seg: &Segment, mu: &DelayMeasure) -> Result<Vec<f64>> {
    let stencil = DelayStencil::new(mu, seg.params())?;
    let mut out = vec![0.0; seg.dim];
    stencil.linear(seg, &mut out);
    Ok(out)
}

/// `∫ |φ(τ)|² μ(dτ)` for a segment.
pub fn delay_integral_square(seg: &Segment, mu: &DelayMeasure) -> Result<f64> {
    let stencil = DelayStencil::new(mu, seg.params())?;
    Ok(stencil.square(seg))
}

/// Smallest grid-aligned window `L ≥ h` with
/// `bound² · ∫_{−∞}^{−L} e^{−2rτ} μ(dτ) ≤ tail_tol` for every measure.
pub fn choose_window(
    r: f64,
    h: f64,
    bound_on_norm: f64,
    measures: &[&DelayMeasure],
    tail_tol: f64,
) -> Result<f64> {
    if !(r > 0.0) || !(h > 0.0) || !(bound_on_norm > 0.0) || !(tail_tol > 0.0) {
        return Err(FadeError::InvalidParams(
            "choose_window needs positive r, h, bound and tolerance".into(),
        ));
    }
    if tail_tol.is_infinite() {
        return Ok(h);
    }
    if !bound_on_norm.is_finite() {
        return Err(FadeError::NoWindow { tol: tail_tol });
    }
    let kappa = 2.0 * r;
    let b2 = bound_on_norm * bound_on_norm;
    for mu in measures {
        mu.moment(kappa).map_err(|_| FadeError::NoWindow { tol: tail_tol })?;
    }
    let ok = |l: f64| -> Result<bool> {
        for mu in measures {
            if b2 * mu.weighted_tail(l, kappa)? > tail_tol {
                return Ok(false);
            }
        }
        Ok(true)
    };
    // Lower bound from the densities alone, then walk up through atoms.
    let mut k_min = 1.0f64;
    for mu in measures {
        if let Some(e) = mu.expo {
            if e.mass > 0.0 {
                let c = b2 * e.mass * e.beta / (e.beta - kappa);
                if c > tail_tol {
                    let l = (c / tail_tol).ln() / (e.beta - kappa);
                    k_min = k_min.max((l / h - GRID_TOL).ceil());
                }
            }
        }
    }
    let mut k = k_min;
    for _ in 0..100_000 {
        let l = k * h;
        if ok(l)? {
            return Ok(l);
        }
        // Jump to the next atom depth if one is still outside.
        let next_atom = measures
            .iter()
            .flat_map(|mu| mu.atoms.iter())
            .map(|&(lag, _)| -lag)
            .filter(|&d| d > l * (1.0 + GRID_TOL) + GRID_TOL)
            .fold(f64::INFINITY, f64::min);
        let k_atom = (next_atom / h - GRID_TOL).ceil();
        k = if k_atom.is_finite() { k_atom.max(k + 1.0) } else { k + 1.0 };
    }
    Err(FadeError::NoWindow { tol: tail_tol })
}

/// View of step `k` of a path under construction.
pub(crate) struct PathView<'a> {
    pub(crate) initial: &'a Segment,
    pub(crate) states: &'a [f64],
    pub(crate) k: usize,
    pub(crate) head: Option<&'a [f64]>,
    pub(crate) tail: &'a [f64],
}

impl History for PathView<'_> {
    fn dim(&self) -> usize {
        self.initial.dim
    }

    #[inline]
    fn grid_value(&self, j: usize) -> &[f64] {
        let d = self.initial.dim;
        if j == 0 {
            if let Some(head) = self.head {
                return head;
            }
        }
        if j <= self.k {
            let idx = self.k - j;
            &self.states[idx * d..(idx + 1) * d]
        } else {
            self.initial.grid_value(j - self.k)
        }
    }

    fn tail(&self) -> &[f64] {
        self.tail
    }
}

/// Incremental construction of a [`PathOnGrid`] that keeps the segment
/// tail in step with the states.
pub(crate) struct PathBuilder {
    initial: Segment,
    rule: TailRule,
    n_lags: usize,
    states: Vec<f64>,
    tails: Vec<f64>,
    tail_sups: Vec<f64>,
}

impl PathBuilder {
    pub(crate) fn new(initial: Segment, capacity: usize) -> Self {
        let d = initial.dim;
        let mut states = Vec::with_capacity(capacity * d);
        states.extend_from_slice(initial.head());
        let mut tails = Vec::with_capacity(capacity * d);
        tails.extend_from_slice(&initial.tail);
        let mut tail_sups = Vec::with_capacity(capacity);
        tail_sups.push(initial.tail_sup);
        PathBuilder {
            rule: initial.params.tail_rule(),
            n_lags: initial.n_lags(),
            initial,
            states,
            tails,
            tail_sups,
        }
    }

    pub(crate) fn dim(&self) -> usize {
        self.initial.dim
    }

    /// Index of the last stored state.
    pub(crate) fn k(&self) -> usize {
        self.tail_sups.len() - 1
    }

    pub(crate) fn view(&self) -> PathView<'_> {
        let d = self.dim();
        let k = self.k();
        PathView {
            initial: &self.initial,
            states: &self.states,
            k,
            head: None,
            tail: &self.tails[k * d..(k + 1) * d],
        }
    }

    /// View of step `k + 1` with a provisional head and tail.
    pub(crate) fn view_next<'a>(&'a self, head: &'a [f64], tail: &'a [f64]) -> PathView<'a> {
        PathView {
            initial: &self.initial,
            states: &self.states,
            k: self.k() + 1,
            head: Some(head),
            tail,
        }
    }

    /// Tail of step `k + 1` (independent of the new head).
    pub(crate) fn next_tail(&self, out: &mut [f64]) -> f64 {
        let d = self.dim();
        let k = self.k();
        let view = self.view();
        let dropped = view.grid_value(self.n_lags);
        self.rule
            .absorb(&self.tails[k * d..(k + 1) * d], self.tail_sups[k], dropped, out)
    }

    pub(crate) fn push(&mut self, state: &[f64], tail: &[f64], tail_sup: f64) {
        self.states.extend_from_slice(state);
        self.tails.extend_from_slice(tail);
        self.tail_sups.push(tail_sup);
    }

    /// Computes the next tail and appends `state`.
    pub(crate) fn push_state(&mut self, state: &[f64]) {
        let mut tail = vec![0.0; self.dim()];
        let sup = self.next_tail(&mut tail);
        self.push(state, &tail, sup);
    }

    pub(crate) fn finish(self, t0: f64) -> PathOnGrid {
        PathOnGrid {
            t0,
            h: self.initial.params.h,
            dim: self.initial.dim,
            initial: self.initial,
            states: self.states,
            tails: self.tails,
            tail_sups: self.tail_sups,
        }
    }
}

/// `|||Φ|||_r²` truncated at `n_max` terms, with the bound on the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathNorm {
    pub squared: f64,
    pub remainder: f64,
}

/// A path in the fading-memory path space, sampled on `t0 + k·h`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOnGrid {
    t0: f64,
    h: f64,
    dim: usize,
    initial: Segment,
    states: Vec<f64>,
    tails: Vec<f64>,
    tail_sups: Vec<f64>,
}

impl PathOnGrid {
    /// Builds a path from its initial segment and the states at
    /// `t0, t0 + h, …`; `states` must start with the initial head.
    pub fn from_states(initial: Segment, states: Vec<f64>) -> Result<Self> {
        let d = initial.dim;
        if states.len() < d || !states.len().is_multiple_of(d) {
            return Err(FadeError::InvalidSegment(format!(
                "states length {} is not a positive multiple of {d}",
                states.len()
            )));
        }
        if states[..d] != *initial.head() {
            return Err(FadeError::InvalidSegment(
                "first state must equal the initial head".into(),
            ));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(FadeError::InvalidSegment("non-finite state".into()));
        }
        let t0 = initial.head_time;
        let n = states.len() / d;
        let mut builder = PathBuilder::new(initial, n);
        for chunk in states[d..].chunks(d) {
            builder.push_state(chunk);
        }
        Ok(builder.finish(t0))
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &MemoryParams {
        &self.initial.params
    }

    pub fn initial(&self) -> &Segment {
        &self.initial
    }

    pub fn n_points(&self) -> usize {
        self.tail_sups.len()
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.n_points() - 1)
    }

    pub fn time(&self, k: usize) -> f64 {
        grid_time(self.t0, self.h, k)
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.n_points() - 1)
    }

    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = (t - self.t0) / self.h;
        let k = x.round();
        if (x - k).abs() > 1e-6 || k < 0.0 || k as usize >= self.n_points() {
            return Err(FadeError::OutOfRange {
                time: t,
                lo: self.t0,
                hi: self.t_end(),
            });
        }
        Ok(k as usize)
    }

    pub(crate) fn view_at(&self, k: usize) -> PathView<'_> {
        PathView {
            initial: &self.initial,
            states: &self.states[..(k + 1) * self.dim],
            k,
            head: None,
            tail: &self.tails[k * self.dim..(k + 1) * self.dim],
        }
    }

    pub fn segment_at_index(&self, k: usize) -> Segment {
        let view = self.view_at(k);
        let n = self.initial.n_lags();
        let mut values = Vec::with_capacity((n + 1) * self.dim);
        for j in 0..=n {
            values.extend_from_slice(view.grid_value(j));
        }
        Segment::from_parts(
            self.initial.params,
            self.time(k),
            self.dim,
            values,
            view.tail.to_vec(),
            self.tail_sups[k],
        )
    }

    pub fn segment_at(&self, t: f64) -> Result<Segment> {
        Ok(self.segment_at_index(self.index_of(t)?))
    }

    /// `‖Φ(t_k)‖_r` without materializing the segment.
    pub fn norm_at_index(&self, k: usize) -> f64 {
        let view = self.view_at(k);
        let step = (-self.initial.params.r * self.h).exp();
        let mut w = 1.0;
        let mut best = self.tail_sups[k];
        for j in 0..=self.initial.n_lags() {
            best = best.max(w * euclid(view.grid_value(j)));
            w *= step;
        }
        best
    }

    /// Φ(t) for any `t ≤ t_end`, reading the initial segment (and its
    /// tail) before `t0`; linear interpolation between grid points.
    pub fn value_at_time(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if t > self.t_end() + 1e-9 * self.h {
            return Err(FadeError::OutOfRange {
                time: t,
                lo: f64::NEG_INFINITY,
                hi: self.t_end(),
            });
        }
        if t <= self.t0 {
            return self.initial.value_at_lag((t - self.t0).min(0.0), out);
        }
        let x = (t - self.t0) / self.h;
        let k = (x.floor() as usize).min(self.n_points() - 1);
        let frac = x - k as f64;
        if frac <= 1e-9 || k + 1 >= self.n_points() {
            out.copy_from_slice(self.state(k));
        } else {
            let a = self.state(k);
            let b = self.state(k + 1);
            for ((o, x0), x1) in out.iter_mut().zip(a).zip(b) {
                *o = (1.0 - frac) * x0 + frac * x1;
            }
        }
        Ok(())
    }

    /// Sub-path on `[t_lo, t_hi]`, restarted from `segment_at(t_lo)`.
    pub fn restrict(&self, t_lo: f64, t_hi: f64) -> Result<PathOnGrid> {
        let k_lo = self.index_of(t_lo)?;
        let k_hi = self.index_of(t_hi)?;
        if k_hi < k_lo {
            return Err(FadeError::InvalidParams("restrict: t_hi < t_lo".into()));
        }
        let initial = self.segment_at_index(k_lo);
        let d = self.dim;
        let mut builder = PathBuilder::new(initial, k_hi - k_lo + 1);
        for k in k_lo + 1..=k_hi {
            let tail = &self.tails[k * d..(k + 1) * d];
            builder.push(self.state(k), tail, self.tail_sups[k]);
        }
        Ok(builder.finish(self.time(k_lo)))
    }

    /// Pointwise difference of two paths on the same grid and start time.
    pub fn difference(&self, other: &PathOnGrid) -> Result<PathOnGrid> {
        if self.dim != other.dim || self.n_points() != other.n_points() {
            return Err(FadeError::DimensionMismatch {
                expected: self.states.len(),
                got: other.states.len(),
            });
        }
        if (self.t0 - other.t0).abs() > 1e-9 * self.h {
            return Err(FadeError::InvalidParams("paths start at different times".into()));
        }
        let initial = self.initial.sub(&other.initial)?;
        let states = self.states.iter().zip(&other.states).map(|(a, b)| a - b).collect();
        PathOnGrid::from_states(initial, states)
    }

    /// `|||Φ|||_r² ≈ Σ_{n=1}^{n_max} 2^{−n} (‖Φ(t0 + n)‖_r² ∧ 1)`; the
    /// integer grid of the definition is re-centred on the path start.
    pub fn path_norm(&self, n_max: usize) -> Result<PathNorm> {
        if n_max < 1 {
            return Err(FadeError::InvalidParams("n_max must be at least 1".into()));
        }
        let mut acc = 0.0;
        let mut w = 1.0;
        for n in 1..=n_max {
            w *= 0.5;
            let k = self.index_of(self.t0 + n as f64)?;
            let norm = self.norm_at_index(k);
            acc += w * (norm * norm).min(1.0);
        }
        Ok(PathNorm {
            squared: acc,
            remainder: 0.5f64.powi(n_max as i32),
        })
    }

    /// Writes `t,y_0,…` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for i in 0..self.dim {
            write!(w, ",y_{i}")?;
        }
        writeln!(w)?;
        for k in 0..self.n_points() {
            write!(w, "{}", self.time(k))?;
            for v in self.state(k) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Binary layout: magic `FADELDP1`, `u64` dim, `u64` point count,
    /// `f64` t0, `f64` h, then the states row-major; all little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"FADELDP1")?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.n_points() as u64).to_le_bytes())?;
        w.write_all(&self.t0.to_le_bytes())?;
        w.write_all(&self.h.to_le_bytes())?;
        for v in &self.states {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn raw_value(&self, grid_idx: i64, out: &mut [f64]) {
        // grid_idx is relative to t0 in units of h.
        if grid_idx >= 0 {
            out.copy_from_slice(self.state(grid_idx as usize));
            return;
        }
        let j = (-grid_idx) as usize;
        if j <= self.initial.n_lags() {
            out.copy_from_slice(self.initial.grid_value(j));
        } else {
            let factor = (self.initial.params.r * j as f64 * self.h).exp();
            for (o, g) in out.iter_mut().zip(&self.initial.tail) {
                *o = g * factor;
            }
        }
    }
}

/// Exact weighted distance `sup_{s ≤ t} e^{−r(t−s)} |Φ_a(s) − Φ_b(s)|`
/// at each requested time, using both paths' full grid histories (the
/// initial segments' analytic tails beyond their windows).
pub fn history_distances(a: &PathOnGrid, b: &PathOnGrid, times: &[f64]) -> Result<Vec<f64>> {
    if a.dim != b.dim || a.initial.params != b.initial.params {
        return Err(FadeError::InvalidParams("paths use different grids".into()));
    }
    let h = a.h;
    let p = a.initial.params;
    let ia = grid_index(a.t0, h)
        .ok_or_else(|| FadeError::InvalidParams("path start is off the absolute grid".into()))?;
    let ib = grid_index(b.t0, h)
        .ok_or_else(|| FadeError::InvalidParams("path start is off the absolute grid".into()))?;
    let end = ((a.n_points() as i64 - 1) + ia).min((b.n_points() as i64 - 1) + ib);
    let mut wanted = Vec::with_capacity(times.len());
    for &t in times {
        let g = grid_index(t, h)
            .ok_or_else(|| FadeError::InvalidParams(format!("time {t} is off the grid")))?;
        if g > end || g < ia.max(ib) {
            return Err(FadeError::OutOfRange {
                time: t,
                lo: a.t0.max(b.t0),
                hi: end as f64 * h,
            });
        }
        wanted.push(g);
    }
    let Some(&last) = wanted.iter().max() else {
        return Ok(Vec::new());
    };
    let start = ia.min(ib) - p.n_lags() as i64 - 1;
    let step = (-p.r * h).exp();
    let d = a.dim;
    let mut va = vec![0.0; d];
    let mut vb = vec![0.0; d];
    let mut series = Vec::with_capacity((last - start + 1) as usize);
    let mut w = 0.0f64;
    for s in start..=last {
        a.raw_value(s - ia, &mut va);
        b.raw_value(s - ib, &mut vb);
        let diff = va
            .iter()
            .zip(&vb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        w = if s == start { diff } else { (step * w).max(diff) };
        series.push(w);
    }
    Ok(wanted.iter().map(|&g| series[(g - start) as usize]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(r: f64, h: f64, l: f64) -> MemoryParams {
        MemoryParams::new(r, h, l, 1e-6).unwrap()
    }

    #[test]
    fn constant_segment_norm() {
        let seg = Segment::constant(params(1.0, 0.1, 2.0), 0.0, &[2.0]).unwrap();
        assert_eq!(seg.cr_norm(), 2.0);
    }

    #[test]
    fn exponential_segment_norm_is_one() {
        for alpha in [0.0, 0.5, 3.0] {
            let seg = Segment::from_fn(params(1.0, 0.01, 5.0), 0.0, 1, |t, o| o[0] = (alpha * t).exp())
                .unwrap();
            assert!((seg.cr_norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_peak_norm() {
        // oracle: dense search of e^{τ}·|τ|e^{2τ} on [−5, 0] at step 1e−5
        let mut oracle = 0.0f64;
        let mut t = 0.0f64;
        while t >= -5.0 {
            oracle = oracle.max(t.exp() * t.abs() * (2.0 * t).exp());
            t -= 1e-5;
        }
        assert!((oracle - (1.0f64 / 3.0) * (-1.0f64).exp()).abs() < 1e-9);
        let seg = Segment::from_fn(params(1.0, 1e-3, 5.0), 0.0, 1, |t, o| {
            o[0] = t.abs() * (2.0 * t).exp()
        })
        .unwrap();
        assert!((seg.cr_norm() - oracle).abs() < 1e-6);
    }

    #[test]
    fn non_finite_segment_rejected() {
        let p = params(1.0, 0.5, 1.0);
        let err = Segment::new(p, 0.0, 1, vec![0.0, f64::NAN, 1.0], vec![0.0]);
        assert!(matches!(err, Err(FadeError::InvalidSegment(_))));
    }

    #[test]
    fn oversized_tail_rejected() {
        let p = params(1.0, 0.5, 1.0);
        let err = Segment::new(p, 0.0, 1, vec![1.0, 1.0, 1.0], vec![5.0]);
        assert!(matches!(err, Err(FadeError::InvalidSegment(_))));
    }

    #[test]
    fn misaligned_window_rejected() {
        assert!(MemoryParams::new(1.0, 0.3, 1.0, 1e-6).is_err());
        assert!(MemoryParams::new(1.0, 0.25, 1.0, 1e-6).is_ok());
        assert!(MemoryParams::new(0.0, 0.25, 1.0, 1e-6).is_err());
    }

    #[test]
    fn shift_constant_is_fixed_point() {
        let seg = Segment::constant(params(1.0, 0.1, 1.0), 0.0, &[3.0]).unwrap();
        let next = seg.shift(&[3.0]).unwrap();
        assert_eq!(next.values(), seg.values());
        assert!((next.head_time() - 0.1).abs() < 1e-15);
        assert_eq!(next.cr_norm(), 3.0);
    }

    #[test]
    fn shift_zero_with_unit_head() {
        let seg = Segment::zeros(params(1.0, 0.1, 1.0), 0.0, 1).unwrap();
        let next = seg.shift(&[1.0]).unwrap();
        assert_eq!(next.cr_norm(), 1.0);
        assert!(seg.shift(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn pure_tail_shape_is_transported_exactly() {
        // φ(τ) = g e^{−rτ} everywhere: the shifted limit is g e^{−rh}.
        let p = params(1.0, 0.1, 1.0);
        let g = 0.3;
        let seg = Segment::from_fn_with_tail(p, 0.0, 1, |t, o| o[0] = g * (-t).exp(), vec![g])
            .unwrap();
        let next = seg.shift(&[g * (-0.1f64).exp()]).unwrap();
        let mut out = [0.0];
        next.value_at_lag(-3.0, &mut out).unwrap();
        let want = g * (3.0f64 - 0.1).exp();
        assert!((out[0] - want).abs() < 1e-12 * want);
    }

    #[test]
    fn repeated_shift_matches_path_segments() {
        let p = params(1.0, 0.1, 0.5);
        let f = |t: f64| (3.0 * t).sin() + 0.2 * t;
        let initial = Segment::from_fn(p, 0.0, 1, |t, o| o[0] = f(t)).unwrap();
        let states: Vec<f64> = (0..40).map(|k| f(k as f64 * 0.1)).collect();
        let path = PathOnGrid::from_states(initial.clone(), states.clone()).unwrap();
        let mut seg = initial;
        for k in 1..40 {
            seg = seg.shift(&[states[k]]).unwrap();
            assert_eq!(seg, path.segment_at_index(k));
        }
    }

    #[test]
    fn moments_closed_form() {
        let e2 = DelayMeasure::atom(-1.0).moment(2.0).unwrap();
        assert!((e2 - 2.0f64.exp()).abs() < 1e-12 * e2);
        assert_eq!(DelayMeasure::atom(0.0).moment(3.7).unwrap(), 1.0);
        let m = DelayMeasure::exponential(5.0).moment(2.0).unwrap();
        assert!((m - 5.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            DelayMeasure::exponential(2.0).moment(2.0),
            Err(FadeError::DivergentMoment { .. })
        ));
    }

    #[test]
    fn measure_must_be_probability() {
        assert!(DelayMeasure::new(vec![(-1.0, 0.5)], None).is_err());
        assert!(DelayMeasure::new(vec![(1.0, 1.0)], None).is_err());
        assert!(DelayMeasure::new(vec![(-1.0, 0.5)], Some(ExpoPart { mass: 0.5, beta: 3.0 })).is_ok());
    }

    #[test]
    fn delay_integral_examples() {
        let p = params(1.0, 0.01, 8.0);
        let c = Segment::constant(p, 0.0, &[1.5]).unwrap();
        let mixed = DelayMeasure::new(
            vec![(-0.3, 0.25), (-1.234, 0.25)],
            Some(ExpoPart { mass: 0.5, beta: 5.0 }),
        )
        .unwrap();
        let v = delay_integral_linear(&c, &mixed).unwrap();
        assert!((v[0] - 1.5).abs() < 1e-12);

        let lin = Segment::from_fn(p, 0.0, 1, |t, o| o[0] = t).unwrap();
        let v = delay_integral_linear(&lin, &DelayMeasure::atom(-1.0)).unwrap();
        assert!((v[0] + 1.0).abs() < 1e-12);
        let v = delay_integral_linear(&lin, &DelayMeasure::atom(-1.005)).unwrap();
        assert!((v[0] + 1.005).abs() < 1e-12);
        let sq = delay_integral_square(&lin, &DelayMeasure::atom(-1.0)).unwrap();
        assert!((sq - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delay_integral_density_matches_quadrature_oracle() {
        // oracle: composite Simpson on [−40, 0] at step 1e−4
        let f = |t: f64| t.exp() * 5.0 * (5.0 * t).exp();
        let n = 400_000;
        let step = 40.0 / n as f64;
        let mut acc = f(-40.0) + f(0.0);
        for i in 1..n {
            let t = -40.0 + i as f64 * step;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(t);
        }
        let oracle = acc * step / 3.0;
        assert!((oracle - 5.0 / 6.0).abs() < 1e-10);
        let p = params(1.0, 1e-3, 8.0);
        let seg = Segment::from_fn(p, 0.0, 1, |t, o| o[0] = t.exp()).unwrap();
        let v = delay_integral_linear(&seg, &DelayMeasure::exponential(5.0)).unwrap();
        assert!((v[0] - oracle).abs() < 1e-6);
    }

    #[test]
    fn delay_integral_rejects_divergent_tail() {
        let seg = Segment::zeros(params(1.0, 0.1, 1.0), 0.0, 1).unwrap();
        assert!(delay_integral_linear(&seg, &DelayMeasure::exponential(1.5)).is_err());
    }

    #[test]
    fn window_choices() {
        let atom = DelayMeasure::atom(-1.0);
        let l = choose_window(1.0, 0.01, 1.0, &[&atom], 1e-12).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        let l = choose_window(1.0, 0.01, 1.0, &[&atom], 10.0).unwrap();
        assert!((l - 1.0).abs() < 1e-12 || l < 1.0);

        // (5/3) e^{−3L} ≤ 1e−6  ⇔  L ≥ ln(5/3·1e6)/3 ≈ 4.7754
        let expo = DelayMeasure::exponential(5.0);
        let l = choose_window(1.0, 0.01, 1.0, &[&expo], 1e-6).unwrap();
        let l_star = ((5.0 / 3.0) * 1e6f64).ln() / 3.0;
        assert!(l >= l_star && l < l_star + 0.01 + 1e-9, "L = {l}, L* = {l_star}");
        assert!((l - 4.78).abs() < 1e-9);

        let l = choose_window(1.0, 0.01, 1.0, &[&expo], f64::INFINITY).unwrap();
        assert_eq!(l, 0.01);
        assert!(choose_window(1.0, 0.01, 1.0, &[&DelayMeasure::exponential(2.0)], 1e-3).is_err());
    }

    #[test]
    fn path_norm_examples() {
        let p = params(1.0, 0.1, 1.0);
        let c = 0.6;
        let seg = Segment::constant(p, 0.0, &[c]).unwrap();
        let path = PathOnGrid::from_states(seg, vec![c; 81]).unwrap();
        let n = path.path_norm(8).unwrap();
        assert!((n.squared - c * c * (1.0 - 0.5f64.powi(8))).abs() < 1e-14);
        assert_eq!(n.remainder, 0.5f64.powi(8));

        let zero = PathOnGrid::from_states(Segment::zeros(p, 0.0, 1).unwrap(), vec![0.0; 81]).unwrap();
        assert_eq!(zero.path_norm(8).unwrap().squared, 0.0);

        let big = PathOnGrid::from_states(Segment::constant(p, 0.0, &[3.0]).unwrap(), vec![3.0; 81])
            .unwrap();
        assert!((big.path_norm(8).unwrap().squared - (1.0 - 0.5f64.powi(8))).abs() < 1e-15);
        assert!(big.path_norm(0).is_err());
        assert!(big.path_norm(9).is_err());
    }

    #[test]
    fn history_distance_matches_norm_of_difference() {
        let p = params(1.0, 0.1, 0.5);
        let a0 = Segment::constant(p, 0.0, &[1.0]).unwrap();
        let b0 = Segment::constant(p, 0.0, &[-0.5]).unwrap();
        let sa: Vec<f64> = (0..30).map(|k| if k == 0 { 1.0 } else { (k as f64 * 0.7).sin() }).collect();
        let sb: Vec<f64> = (0..30).map(|k| if k == 0 { -0.5 } else { (k as f64 * 0.3).cos() }).collect();
        let a = PathOnGrid::from_states(a0, sa).unwrap();
        let b = PathOnGrid::from_states(b0, sb).unwrap();
        let diff = a.difference(&b).unwrap();
        let times: Vec<f64> = (0..30).map(|k| k as f64 * 0.1).collect();
        let dist = history_distances(&a, &b, &times).unwrap();
        for (k, d) in dist.iter().enumerate() {
            let n = diff.norm_at_index(k);
            assert!((n - d).abs() < 1e-12, "k={k}: {n} vs {d}");
        }
    }
}
