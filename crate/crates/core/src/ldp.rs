//! Monte Carlo checks of the large-deviation asymptotics: plain and
//! Girsanov-tilted rare-event estimators, ε·log p slopes, and a small-grid
//! check of the Boué–Dupuis variational formula.

use serde::{Deserialize, Serialize};

use crate::error::{FadeError, Result};
use crate::fading_memory::{euclid, history_distances, PathOnGrid, Segment};
use crate::model::CoefficientModel;
use crate::optim::nelder_mead;
use crate::pullback::pullback_solve;
use crate::rate::RateResult;
use crate::rng::GaussianStream;
use crate::simulate::{control_cells, euler_core, prepare, replicate, Control, Drive, SimConfig, StreamNoise};
use crate::stats::{clopper_pearson_upper, fit_line_weighted, gauss_hermite, LineFit};

/// Shape of an event on the solution path.
#[derive(Debug, Clone)]
pub enum EventKind {
    /// `|Y(T) − center| ≤ radius`.
    TerminalBall { center: Vec<f64>, radius: f64, time: f64 },
    /// `|Y(T)| ≥ threshold`.
    TerminalExceed { threshold: f64, time: f64 },
    /// `‖Y_t − Φ(t)‖_r ≤ radius` for every grid time of the reference.
    PathTube { reference: PathOnGrid, radius: f64 },
}

#[derive(Debug, Clone)]
pub struct EventSpec {
    pub kind: EventKind,
    pub complemented: bool,
}

impl EventSpec {
    pub fn new(kind: EventKind) -> Self {
        EventSpec {
            kind,
            complemented: false,
        }
    }

    pub fn complement(mut self) -> Self {
        self.complemented = !self.complemented;
        self
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let ok = match &self.kind {
            EventKind::TerminalBall { center, radius, time } => {
                if center.len() != d {
                    return Err(FadeError::DimensionMismatch {
                        expected: d,
                        got: center.len(),
                    });
                }
                *radius > 0.0 && time.is_finite()
            }
            EventKind::TerminalExceed { threshold, time } => threshold.is_finite() && time.is_finite(),
            EventKind::PathTube { reference, radius } => *radius > 0.0 && reference.dim() == d,
        };
        if ok {
            Ok(())
        } else {
            Err(FadeError::InvalidParams("event radius must be positive and times finite".into()))
        }
    }

    /// Last time the event looks at.
    pub fn horizon(&self) -> f64 {
        match &self.kind {
            EventKind::TerminalBall { time, .. } | EventKind::TerminalExceed { time, .. } => *time,
            EventKind::PathTube { reference, .. } => reference.t_end(),
        }
    }

    pub fn contains(&self, path: &PathOnGrid) -> Result<bool> {
        let mut buf = vec![0.0; path.dim()];
        let inside = match &self.kind {
            EventKind::TerminalBall { center, radius, time } => {
                path.value_at_time(*time, &mut buf)?;
                let diff: Vec<f64> = buf.iter().zip(center).map(|(a, b)| a - b).collect();
                euclid(&diff) <= *radius
            }
            EventKind::TerminalExceed { threshold, time } => {
                path.value_at_time(*time, &mut buf)?;
                euclid(&buf) >= *threshold
            }
            EventKind::PathTube { reference, radius } => {
                if radius.is_infinite() {
                    true
                } else {
                    let times: Vec<f64> = (0..reference.n_points()).map(|k| reference.time(k)).collect();
                    history_distances(path, reference, &times)?.iter().all(|d| d <= radius)
                }
            }
        };
        Ok(inside != self.complemented)
    }
}

/// Initial condition of the Monte Carlo runs.
#[derive(Debug, Clone)]
pub enum StartSpec {
    FromInitial { t0: f64, xi: Segment },
    /// Run from `xi` at `−burn_in` so that time 0 is (approximately)
    /// stationary; the burn-in is certified by a pull-back difference.
    Stationary { xi: Segment, burn_in: f64 },
}

impl StartSpec {
    fn xi(&self) -> &Segment {
        match self {
            StartSpec::FromInitial { xi, .. } | StartSpec::Stationary { xi, .. } => xi,
        }
    }

    fn t_start(&self) -> f64 {
        match self {
            StartSpec::FromInitial { t0, .. } => *t0,
            StartSpec::Stationary { burn_in, .. } => -burn_in,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub h: f64,
    pub seed: u64,
    /// Level of the one-sided Clopper–Pearson bound used when no hits occur.
    pub alpha: f64,
    pub burn_tol: f64,
}

impl McOptions {
    pub fn new(h: f64, seed: u64) -> Self {
        McOptions {
            h,
            seed,
            alpha: 0.05,
            burn_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Method {
    Plain,
    /// Tilted by a control of energy `½∫|v|²`.
    Tilted { energy: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct MCEstimate {
    pub eps: f64,
    pub n_samples: usize,
    pub hits: usize,
    pub p_hat: f64,
    pub stderr: f64,
    /// `ε·log p̂`, or `ε·log p_upper` when no hit was observed.
    pub eps_log_p: f64,
    /// One-sided Clopper–Pearson upper bound, reported when `hits = 0`.
    pub p_upper: Option<f64>,
    pub method: Method,
    /// `(Σ w 1_A)² / Σ (w 1_A)²` over the hits (tilted only).
    pub ess: Option<f64>,
    pub mean_weight: Option<f64>,
    pub weight_stderr: Option<f64>,
    pub log_weight_var: Option<f64>,
    pub burn_certificate: Option<f64>,
}

impl MCEstimate {
    pub fn relative_stderr(&self) -> f64 {
        if self.p_hat > 0.0 {
            self.stderr / self.p_hat
        } else {
            f64::INFINITY
        }
    }
}

struct Replica {
    inside: Vec<bool>,
    log_w: f64,
}

fn certify_burn_in(model: &CoefficientModel, start: &StartSpec, eps: f64, opts: &McOptions) -> Result<Option<f64>> {
    let StartSpec::Stationary { xi, burn_in } = start else {
        return Ok(None);
    };
    let half = (burn_in / 2.0 / opts.h).round() * opts.h;
    let cfg = SimConfig::new(opts.h, -burn_in, 0.0);
    let run = pullback_solve(model, xi, eps, (0.0, 0.0), &[half, *burn_in], &cfg, opts.seed)?;
    let diff = run.sup_diffs[0];
    if !(diff <= opts.burn_tol) {
        return Err(FadeError::Insufficient(format!(
            "burn-in {burn_in} not certified: pull-back difference {diff} exceeds {}",
            opts.burn_tol
        )));
    }
    Ok(Some(diff))
}

/// Runs `n` replicas on streams `1..=n` and evaluates every event on each
/// path; with `v` the paths are tilted and log-weights accumulated.
fn simulate_events(
    model: &CoefficientModel,
    start: &StartSpec,
    eps: f64,
    events: &[EventSpec],
    v: Option<&Control>,
    n: usize,
    opts: &McOptions,
) -> Result<Vec<Replica>> {
    if n == 0 {
        return Err(FadeError::InvalidParams("need at least one sample".into()));
    }
    if events.is_empty() {
        return Err(FadeError::InvalidParams("no events".into()));
    }
    for e in events {
        e.validate(model.d())?;
    }
    let t_end = events.iter().map(EventSpec::horizon).fold(f64::NEG_INFINITY, f64::max);
    let cfg = SimConfig::new(opts.h, start.t_start(), t_end);
    let xi = prepare(model, start.xi(), eps, &cfg)?;
    let compiled = model.compile(xi.params())?;
    let cells = control_cells(model, v, &cfg)?;
    replicate(n, |i| {
        let noise = StreamNoise::new(opts.h, model.m(), opts.seed, 1 + i as u64)?;
        let drive = Drive {
            eps,
            noise: Some(&noise),
            control: cells.as_deref(),
            log_weight: true,
        };
        let out = euler_core(&compiled, xi.clone(), &cfg, &drive)?;
        if out.log_weight > 700.0 {
            return Err(FadeError::WeightOverflow {
                log_weight: out.log_weight,
            });
        }
        let inside = events.iter().map(|e| e.contains(&out.path)).collect::<Result<Vec<_>>>()?;
        Ok(Replica {
            inside,
            log_w: out.log_weight,
        })
    })
}

fn summarize(reps: &[Replica], j: usize, eps: f64, tilt: Option<&Control>, alpha: f64, cert: Option<f64>) -> Result<MCEstimate> {
    let n = reps.len();
    let nf = n as f64;
    let hits = reps.iter().filter(|r| r.inside[j]).count();
    let (p_hat, stderr, method, ess, mean_weight, weight_stderr, log_weight_var) = match tilt {
        None => {
            let p = hits as f64 / nf;
            let se = if n > 1 { (p * (1.0 - p) / (nf - 1.0)).sqrt() } else { 0.0 };
            (p, se, Method::Plain, None, None, None, None)
        }
        Some(v) => {
            let w: Vec<f64> = reps.iter().map(|r| r.log_w.exp()).collect();
            let x: Vec<f64> = reps.iter().zip(&w).map(|(r, w)| if r.inside[j] { *w } else { 0.0 }).collect();
            let (p, se) = mean_and_se(&x);
            let (mw, mw_se) = mean_and_se(&w);
            let lw: Vec<f64> = reps.iter().map(|r| r.log_w).collect();
            let lw_var = crate::stats::variance(&lw);
            let s1: f64 = x.iter().sum();
            let s2: f64 = x.iter().map(|a| a * a).sum();
            let ess = if s2 > 0.0 { s1 * s1 / s2 } else { 0.0 };
            (
                p,
                se,
                Method::Tilted { energy: v.energy() },
                Some(ess),
                Some(mw),
                Some(mw_se),
                Some(lw_var),
            )
        }
    };
    let (eps_log_p, p_upper) = if hits == 0 || p_hat <= 0.0 {
        let up = clopper_pearson_upper(0, n, alpha);
        (eps * up.ln(), Some(up))
    } else {
        (eps * p_hat.ln(), None)
    };
    Ok(MCEstimate {
        eps,
        n_samples: n,
        hits,
        p_hat,
        stderr,
        eps_log_p,
        p_upper,
        method,
        ess,
        mean_weight,
        weight_stderr,
        log_weight_var,
        burn_certificate: cert,
    })
}

fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Plain Monte Carlo for several events on common random numbers.
pub fn rare_event_mc_many(
    model: &CoefficientModel,
    start: &StartSpec,
    eps: f64,
    events: &[EventSpec],
    n: usize,
    opts: &McOptions,
) -> Result<Vec<MCEstimate>> {
    let cert = certify_burn_in(model, start, eps, opts)?;
    let reps = simulate_events(model, start, eps, events, None, n, opts)?;
    (0..events.len()).map(|j| summarize(&reps, j, eps, None, opts.alpha, cert)).collect()
}

/// Plain Monte Carlo estimate of `P(event)` with binomial standard error.
pub fn rare_event_mc(
    model: &CoefficientModel,
    start: &StartSpec,
    eps: f64,
    event: &EventSpec,
    n: usize,
    opts: &McOptions,
) -> Result<MCEstimate> {
    Ok(rare_event_mc_many(model, start, eps, std::slice::from_ref(event), n, opts)?.remove(0))
}

/// Importance sampling under the drift `σ v`, reweighted by
/// `exp(−ε^{−1/2}∫v·dW − (2ε)⁻¹∫|v|²)`. With `v = 0` the paths, and hence
/// the estimate, coincide with [`rare_event_mc`] on the same seed.
pub fn tilted_mc(
    model: &CoefficientModel,
    start: &StartSpec,
    eps: f64,
    event: &EventSpec,
    v_star: &Control,
    n: usize,
    opts: &McOptions,
) -> Result<MCEstimate> {
    if !(eps > 0.0) {
        return Err(FadeError::InvalidParams("tilting needs eps > 0".into()));
    }
    if v_star.end() > event.horizon() + 1e-9 || v_star.start() < start.t_start() - 1e-9 {
        return Err(FadeError::InvalidParams(format!(
            "tilt support [{}, {}] leaves the simulated horizon",
            v_star.start(),
            v_star.end()
        )));
    }
    let cert = certify_burn_in(model, start, eps, opts)?;
    let reps = simulate_events(model, start, eps, std::slice::from_ref(event), Some(v_star), n, opts)?;
    summarize(&reps, 0, eps, Some(v_star), opts.alpha, cert)
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopePoint {
    pub estimate: MCEstimate,
    pub reliable: bool,
    /// 95% band on `ε·log p̂` from the delta method.
    pub band: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeReport {
    pub points: Vec<SlopePoint>,
    pub fit: Option<LineFit>,
    /// Intercept of the fit at `ε = 0`.
    pub limit: f64,
    pub limit_ci: (f64, f64),
    pub predicted: f64,
    /// `|limit + I| / I`, or the absolute error when `I = 0`.
    pub rel_error: f64,
    pub excluded: Vec<f64>,
}

impl SlopeReport {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "eps,p_hat,stderr,eps_log_p,ess,reliable")?;
        for p in &self.points {
            let e = &p.estimate;
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.eps,
                e.p_hat,
                e.stderr,
                e.eps_log_p,
                e.ess.unwrap_or(f64::NAN),
                p.reliable
            )?;
        }
        Ok(())
    }
}

/// Tilted estimates of `ε·log P(event)` over `eps_list`, fitted linearly
/// in `ε` by weighted least squares and extrapolated to `ε = 0` for
/// comparison with `−rate_pred.value`.
pub fn ldp_slope(
    model: &CoefficientModel,
    start: &StartSpec,
    event: &EventSpec,
    eps_list: &[f64],
    n_per_eps: usize,
    rate_pred: &RateResult,
    opts: &McOptions,
) -> Result<SlopeReport> {
    if eps_list.windows(2).any(|w| !(w[1] < w[0])) || eps_list.is_empty() {
        return Err(FadeError::InvalidParams("eps_list must be nonempty and decreasing".into()));
    }
    if !rate_pred.feasible {
        return Err(FadeError::Infeasible("rate prediction is not feasible".into()));
    }
    let mut points = Vec::with_capacity(eps_list.len());
    let mut excluded = Vec::new();
    for (i, &eps) in eps_list.iter().enumerate() {
        let o = McOptions {
            seed: opts.seed.wrapping_add(i as u64 * 0x9E37_79B9),
            ..*opts
        };
        let est = tilted_mc(model, start, eps, event, &rate_pred.control, n_per_eps, &o)?;
        let reliable = est.hits > 0 && est.ess.unwrap_or(0.0) >= 30.0;
        if !reliable {
            excluded.push(eps);
        }
        let half = if est.p_hat > 0.0 { 1.96 * eps * est.stderr / est.p_hat } else { f64::INFINITY };
        points.push(SlopePoint {
            band: (est.eps_log_p - half, est.eps_log_p + half),
            estimate: est,
            reliable,
        });
    }
    let good: Vec<&SlopePoint> = points.iter().filter(|p| p.reliable).collect();
    let predicted = -rate_pred.value;
    let (fit, limit, limit_ci) = match good.len() {
        0 => {
            return Err(FadeError::Insufficient(
                "no eps level produced a reliable estimate (ESS ≥ 30)".into(),
            ))
        }
        1 => {
            let e = good[0].estimate.eps_log_p;
            (None, e, good[0].band)
        }
        _ => {
            let x: Vec<f64> = good.iter().map(|p| p.estimate.eps).collect();
            let y: Vec<f64> = good.iter().map(|p| p.estimate.eps_log_p).collect();
            let w: Vec<f64> = good
                .iter()
                .map(|p| {
                    let e = &p.estimate;
                    let sd = e.eps * e.stderr / e.p_hat;
                    1.0 / (sd * sd).max(1e-12)
                })
                .collect();
            let fit = fit_line_weighted(&x, &y, &w, true)?;
            let ci = (fit.intercept - 1.96 * fit.intercept_se, fit.intercept + 1.96 * fit.intercept_se);
            (Some(fit), fit.intercept, ci)
        }
    };
    let rel_error = if rate_pred.value > 0.0 {
        (limit - predicted).abs() / rate_pred.value
    } else {
        (limit - predicted).abs()
    };
    Ok(SlopeReport {
        points,
        fit,
        limit,
        limit_ci,
        predicted,
        rel_error,
        excluded,
    })
}

/// Bounded functionals of the Brownian values `W(t_1), …, W(t_k)` on the
/// grid `t_i = iT/k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FSpec {
    Zero,
    /// `clamp(Σ c_i W(t_i), −clip, clip)`.
    ClippedLinear { coeffs: Vec<f64>, clip: f64 },
    /// `clamp(q·(Σ c_i W(t_i) − center)², −clip, clip)`.
    ClippedQuadratic {
        coeffs: Vec<f64>,
        center: f64,
        q: f64,
        clip: f64,
    },
}

impl FSpec {
    fn check(&self, k: usize) -> Result<()> {
        match self {
            FSpec::Zero => Ok(()),
            FSpec::ClippedLinear { coeffs, clip } | FSpec::ClippedQuadratic { coeffs, clip, .. } => {
                if coeffs.len() != k {
                    return Err(FadeError::DimensionMismatch {
                        expected: k,
                        got: coeffs.len(),
                    });
                }
                if !(*clip > 0.0) {
                    return Err(FadeError::InvalidParams("clip level must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// Evaluates `f` at grid values `w`.
    pub fn eval(&self, w: &[f64]) -> f64 {
        match self {
            FSpec::Zero => 0.0,
            FSpec::ClippedLinear { coeffs, clip } => {
                let l: f64 = coeffs.iter().zip(w).map(|(c, x)| c * x).sum();
                l.clamp(-clip, *clip)
            }
            FSpec::ClippedQuadratic { coeffs, center, q, clip } => {
                let l: f64 = coeffs.iter().zip(w).map(|(c, x)| c * x).sum();
                (q * (l - center) * (l - center)).clamp(-clip, *clip)
            }
        }
    }

    /// True when the deterministic controls attain the infimum.
    pub fn optimum_is_deterministic(&self) -> bool {
        matches!(self, FSpec::Zero | FSpec::ClippedLinear { .. })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VariationalReport {
    pub k: usize,
    pub t: f64,
    /// `−log E e^{−f(W)}`.
    pub lhs: f64,
    /// Zero for quadrature, Monte Carlo standard error otherwise.
    pub lhs_stderr: f64,
    /// Infimum over deterministic piecewise-constant controls.
    pub rhs_det: f64,
    pub control: Vec<f64>,
    pub equality_expected: bool,
    pub method: String,
}

impl VariationalReport {
    pub fn gap(&self) -> f64 {
        self.rhs_det - self.lhs
    }

    /// `lhs ≤ rhs_det + tol`, and equality within `tol` when the optimum is
    /// deterministic.
    pub fn passes(&self, tol: f64) -> bool {
        let slack = tol + 3.0 * self.lhs_stderr;
        let upper = self.lhs <= self.rhs_det + slack;
        if self.equality_expected {
            upper && (self.rhs_det - self.lhs).abs() <= slack
        } else {
            upper
        }
    }
}

/// Largest `k` handled by [`variational_check`].
pub const MAX_VARIATIONAL_K: usize = 6;
const GH_NODES: usize = 24;
const GH_MAX_K: usize = 4;

/// Expectation of `g(W(t_1), …, W(t_k))` for Brownian `W` on the grid
/// `iT/k`, by tensor Gauss–Hermite quadrature (k ≤ 4) or Monte Carlo.
/// Returns the estimate and its standard error.
struct GaussianExpectation {
    k: usize,
    sd: f64,
    /// Quadrature nodes (increments in units of `sd`) with weights, or
    /// Monte Carlo increment draws with equal weights.
    points: Vec<(Vec<f64>, f64)>,
    mc: bool,
}

impl GaussianExpectation {
    fn new(k: usize, t: f64, n_mc: usize, seed: u64) -> Self {
        let sd = (t / k as f64).sqrt();
        if k <= GH_MAX_K {
            let (nodes, weights) = gauss_hermite(GH_NODES);
            let total = GH_NODES.pow(k as u32);
            let mut points = Vec::with_capacity(total);
            let mut idx = vec![0usize; k];
            for _ in 0..total {
                let z: Vec<f64> = idx.iter().map(|&i| nodes[i]).collect();
                let w: f64 = idx.iter().map(|&i| weights[i]).product();
                points.push((z, w));
                for slot in idx.iter_mut() {
                    *slot += 1;
                    if *slot < GH_NODES {
                        break;
                    }
                    *slot = 0;
                }
            }
            GaussianExpectation { k, sd, points, mc: false }
        } else {
            let g = GaussianStream::new(seed, 0);
            let mut buf = vec![0.0; k];
            let w = 1.0 / n_mc as f64;
            let points = (0..n_mc)
                .map(|i| {
                    g.fill(i as i64, &mut buf);
                    (buf.clone(), w)
                })
                .collect();
            GaussianExpectation { k, sd, points, mc: true }
        }
    }

    /// `E g(W + shift)` where `shift` is added to the grid values.
    fn expect<G: Fn(&[f64]) -> f64>(&self, shift: &[f64], g: G) -> (f64, f64) {
        let mut w = vec![0.0; self.k];
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for (z, wt) in &self.points {
            let mut acc = 0.0;
            for i in 0..self.k {
                acc += self.sd * z[i];
                w[i] = acc + shift[i];
            }
            let v = g(&w);
            s1 += wt * v;
            s2 += wt * v * v;
        }
        if self.mc {
            let n = self.points.len() as f64;
            let var = (s2 - s1 * s1).max(0.0) * n / (n - 1.0).max(1.0);
            (s1, (var / n).sqrt())
        } else {
            (s1, 0.0)
        }
    }
}

/// Compares `−log E e^{−f(W)}` with the infimum of `½∫|u|² + E f(W + ∫u)`
/// over controls constant on each of the `k` grid cells of `[0, T]`.
pub fn variational_check(f: &FSpec, t: f64, k: usize, n_mc: usize, seed: u64) -> Result<VariationalReport> {
    if k == 0 {
        return Err(FadeError::InvalidParams("k must be positive".into()));
    }
    if k > MAX_VARIATIONAL_K {
        return Err(FadeError::Unsupported(format!(
            "variational check supports k ≤ {MAX_VARIATIONAL_K}, got {k}"
        )));
    }
    if !(t > 0.0) {
        return Err(FadeError::InvalidParams("T must be positive".into()));
    }
    f.check(k)?;
    if k > GH_MAX_K && n_mc < 2 {
        return Err(FadeError::InvalidParams("Monte Carlo needs n_mc ≥ 2".into()));
    }
    let ge = GaussianExpectation::new(k, t, n_mc, seed);
    let zero = vec![0.0; k];
    let (m, se) = ge.expect(&zero, |w| (-f.eval(w)).exp());
    let lhs = -m.ln();
    let lhs_stderr = se / m;
    let dt = t / k as f64;
    let shift_of = |u: &[f64]| -> Vec<f64> {
        let mut acc = 0.0;
        u.iter()
            .map(|ui| {
                acc += ui * dt;
                acc
            })
            .collect()
    };
    let objective = |u: &[f64]| -> f64 {
        let energy = 0.5 * dt * u.iter().map(|x| x * x).sum::<f64>();
        energy + ge.expect(&shift_of(u), |w| f.eval(w)).0
    };
    let mut best = nelder_mead(&zero, 0.5, objective, 4000, 1e-13);
    // A restart from the first optimum guards against simplex collapse.
    let again = nelder_mead(&best.x.clone(), 0.1, objective, 4000, 1e-13);
    if again.f < best.f {
        best = again;
    }
    Ok(VariationalReport {
        k,
        t,
        lhs,
        lhs_stderr,
        rhs_det: best.f,
        control: best.x,
        equality_expected: f.optimum_is_deterministic(),
        method: if ge.mc { "monte-carlo".into() } else { "gauss-hermite".into() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fading_memory::{DelayMeasure, MemoryParams};
    use crate::model::Nonlinearity;
    use crate::stats::normal_cdf;

    fn ou() -> CoefficientModel {
        CoefficientModel::scalar(1.0, 0.0, Nonlinearity::Zero, 1.0, 0.0, DelayMeasure::atom(0.0), DelayMeasure::atom(0.0))
            .unwrap()
    }

    fn start(h: f64) -> StartSpec {
        let p = MemoryParams::new(1.0, h, h, 1e-8).unwrap();
        StartSpec::FromInitial {
            t0: 0.0,
            xi: Segment::zeros(p, 0.0, 1).unwrap(),
        }
    }

    #[test]
    fn whole_space_has_probability_one() {
        let e = EventSpec::new(EventKind::TerminalBall {
            center: vec![0.0],
            radius: f64::INFINITY,
            time: 1.0,
        });
        let est = rare_event_mc(&ou(), &start(0.01), 0.5, &e, 200, &McOptions::new(0.01, 1)).unwrap();
        assert_eq!(est.p_hat, 1.0);
        assert_eq!(est.eps_log_p, 0.0);
    }

    #[test]
    fn exceedance_matches_gaussian_marginal() {
        let (eps, t) = (0.5, 4.0);
        let e = EventSpec::new(EventKind::TerminalExceed { threshold: 1.0, time: t });
        let est = rare_event_mc(&ou(), &start(0.01), eps, &e, 20_000, &McOptions::new(0.01, 3)).unwrap();
        let sd = (eps * (1.0 - (-2.0 * t).exp()) / 2.0).sqrt();
        let exact = 2.0 * (1.0 - normal_cdf(1.0 / sd, 0.0, 1.0));
        assert!((est.p_hat - exact).abs() < 3.0 * est.stderr + 0.005, "{} vs {exact}", est.p_hat);
    }

    #[test]
    fn zero_tilt_is_plain_mc() {
        let e = EventSpec::new(EventKind::TerminalExceed { threshold: 0.5, time: 1.0 });
        let o = McOptions::new(0.01, 9);
        let plain = rare_event_mc(&ou(), &start(0.01), 0.3, &e, 500, &o).unwrap();
        let zero = Control::zero(0.0, 1.0, 0.1, 1).unwrap();
        let tilted = tilted_mc(&ou(), &start(0.01), 0.3, &e, &zero, 500, &o).unwrap();
        assert_eq!(plain.hits, tilted.hits);
        assert_eq!(plain.p_hat.to_bits(), tilted.p_hat.to_bits());
        assert_eq!(tilted.mean_weight, Some(1.0));
    }

    #[test]
    fn tilting_resolves_a_rare_ball() {
        let (eps, t, h, n) = (0.05, 2.0, 0.005, 20_000);
        let e = EventSpec::new(EventKind::TerminalBall {
            center: vec![1.0],
            radius: 0.1,
            time: t,
        });
        // minimum-energy control steering OU from 0 to 1 at T
        let v = Control::from_fn(0.0, t, 0.05, 1, |s, out| {
            out[0] = 2.0 * (-(t - s)).exp() / (1.0 - (-2.0 * t).exp());
        })
        .unwrap();
        let o = McOptions::new(h, 4);
        let tilted = tilted_mc(&ou(), &start(h), eps, &e, &v, n, &o).unwrap();
        let plain = rare_event_mc(&ou(), &start(h), eps, &e, n, &o).unwrap();
        // the Euler chain is exactly Gaussian with this variance
        let steps = (t / h).round() as i32;
        let q = (1.0 - h) * (1.0 - h);
        let sd = (eps * h * (1.0 - q.powi(steps)) / (1.0 - q)).sqrt();
        let exact = normal_cdf(1.1 / sd, 0.0, 1.0) - normal_cdf(0.9 / sd, 0.0, 1.0);
        assert!((tilted.p_hat - exact).abs() <= 3.0 * tilted.stderr, "{} vs {exact}", tilted.p_hat);
        assert!(plain.relative_stderr() >= 5.0 * tilted.relative_stderr());
        let expected = 2.0 * v.energy() / eps;
        let lwv = tilted.log_weight_var.unwrap();
        assert!((lwv - expected).abs() <= 0.2 * expected, "{lwv} vs {expected}");
    }

    #[test]
    fn no_hits_gives_upper_bound() {
        let e = EventSpec::new(EventKind::TerminalExceed { threshold: 50.0, time: 1.0 });
        let est = rare_event_mc(&ou(), &start(0.01), 0.1, &e, 100, &McOptions::new(0.01, 2)).unwrap();
        assert_eq!(est.hits, 0);
        let up = est.p_upper.unwrap();
        assert!((up - (1.0 - 0.05f64.powf(0.01))).abs() < 1e-12);
        assert!(est.eps_log_p.is_finite());
    }

    #[test]
    fn variational_linear_equality() {
        let f = FSpec::ClippedLinear {
            coeffs: vec![0.0, 0.0, 1.0],
            clip: 60.0,
        };
        let rep = variational_check(&f, 1.0, 3, 0, 0).unwrap();
        assert!((rep.lhs + 0.5).abs() < 1e-9, "{}", rep.lhs);
        assert!(rep.passes(1e-3), "{rep:?}");
        assert!(rep.control.iter().all(|u| (u + 1.0).abs() < 1e-3));
    }

    #[test]
    fn variational_zero_and_limits() {
        let rep = variational_check(&FSpec::Zero, 1.0, 2, 0, 0).unwrap();
        assert!(rep.lhs.abs() < 1e-14 && rep.rhs_det.abs() < 1e-12);
        assert!(matches!(
            variational_check(&FSpec::Zero, 1.0, 7, 10, 0),
            Err(FadeError::Unsupported(_))
        ));
    }
}
