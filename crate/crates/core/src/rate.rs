//! Freidlin–Wentzell action functionals of the skeleton equation: direct
//! inversion for invertible diffusions, penalized energy minimization over
//! piecewise-constant controls, quasipotentials from a pulled-back start,
//! and the Lipschitz/continuity probe of the skeleton solution map.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{FadeError, Result};
use crate::fading_memory::{euclid, grid_time, history_distances, History, PathOnGrid, Segment};
use crate::model::{CoefficientModel, CompiledModel};
use crate::optim::{lbfgs, LbfgsOptions};
use crate::simulate::{euler_core, heun_core, integrate_skeleton, Control, Drive, Scheme, SimConfig};

/// One N(0, 1) draw by Box–Muller.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Smallest singular value of σ accepted by [`direct_rate`].
pub const SIGMA_FLOOR: f64 = 1e-10;

/// Where the controlled skeleton starts.
#[derive(Debug, Clone)]
pub enum StartMode {
    /// From `xi` at time `t0`.
    FromInitial { t0: f64, xi: Segment },
    /// From the uncontrolled pull-back limit at time 0, obtained by
    /// integrating from `xi` at time `-depth`.
    Stationary { xi: Segment, depth: f64 },
}

/// What the controlled skeleton has to hit.
#[derive(Debug, Clone)]
pub enum Target {
    /// `Y(T) = y`.
    Point(Vec<f64>),
    /// `Y_T = φ★` on the history grid, measured in the weighted norm.
    Segment(Segment),
    /// `Y(t_k) = Φ(t_k)` at every grid time.
    Path(PathOnGrid),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateOptions {
    /// Feasibility threshold on the mismatch.
    pub tol: f64,
    pub rho0: f64,
    pub rho_growth: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Number of random starts in addition to zero and the direct seed.
    pub n_random: usize,
    pub random_scale: f64,
    pub seed: u64,
    pub fd_step: f64,
}

impl Default for RateOptions {
    fn default() -> Self {
        RateOptions {
            tol: 1e-4,
            rho0: 10.0,
            rho_growth: 10.0,
            max_outer: 12,
            max_inner: 300,
            n_random: 1,
            random_scale: 0.5,
            seed: 0,
            fd_step: 1e-6,
        }
    }
}

/// A discretized rate problem: controls live on `[t0, t_end]` with step
/// `h_v`, and the skeleton is integrated with step `h` (which must divide
/// `h_v`).
#[derive(Debug, Clone)]
pub struct RateProblem {
    pub model: CoefficientModel,
    pub start: Segment,
    pub t_end: f64,
    pub target: Target,
    pub h: f64,
    pub h_v: f64,
    pub scheme: Scheme,
    pub options: RateOptions,
    /// Extra initial guesses tried after the standard starts.
    pub warm_starts: Vec<Control>,
    /// Pull-back certificate for stationary starts:
    /// `‖Y_{0;−depth} − Y_{0;−depth/2}‖_r`.
    pub start_certificate: Option<f64>,
}

impl RateProblem {
    pub fn new(model: &CoefficientModel, mode: StartMode, target: Target, t_end: f64, h: f64, h_v: f64) -> Result<Self> {
        let (start, cert) = match mode {
            StartMode::FromInitial { t0, xi } => (xi.at_time(t0), None),
            StartMode::Stationary { xi, depth } => {
                let (s, c) = stationary_start(model, &xi, depth, h, Scheme::Euler)?;
                (s, Some(c))
            }
        };
        let p = RateProblem {
            model: model.clone(),
            start,
            t_end,
            target,
            h,
            h_v,
            scheme: Scheme::Euler,
            options: RateOptions::default(),
            warm_starts: Vec::new(),
            start_certificate: cert,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_options(mut self, options: RateOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn t0(&self) -> f64 {
        self.start.head_time()
    }

    fn steps_per_cell(&self) -> Result<usize> {
        let q = self.h_v / self.h;
        let qr = q.round();
        if qr < 1.0 || (q - qr).abs() > 1e-6 {
            return Err(FadeError::InvalidParams(format!(
                "control step {} must be a positive multiple of the skeleton step {}",
                self.h_v, self.h
            )));
        }
        Ok(qr as usize)
    }

    fn n_cells(&self) -> Result<usize> {
        let x = (self.t_end - self.t0()) / self.h_v;
        let n = x.round();
        if n < 1.0 || (x - n).abs() > 1e-6 {
            return Err(FadeError::InvalidParams(format!(
                "horizon [{}, {}] is not a positive multiple of h_v = {}",
                self.t0(),
                self.t_end,
                self.h_v
            )));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !(self.h_v > 0.0) {
            return Err(FadeError::InvalidParams("steps must be positive".into()));
        }
        if (self.start.params().h - self.h).abs() > 1e-12 * self.h {
            return Err(FadeError::InvalidParams("start segment grid differs from the skeleton step".into()));
        }
        if self.start.dim() != self.model.d() {
            return Err(FadeError::DimensionMismatch {
                expected: self.model.d(),
                got: self.start.dim(),
            });
        }
        self.steps_per_cell()?;
        self.n_cells()?;
        let o = &self.options;
        if !(o.tol > 0.0) || !(o.rho0 > 0.0) || !(o.rho_growth > 1.0) || !(o.fd_step > 0.0) {
            return Err(FadeError::InvalidParams("invalid optimizer options".into()));
        }
        match &self.target {
            Target::Point(y) => {
                if y.len() != self.model.d() {
                    return Err(FadeError::DimensionMismatch {
                        expected: self.model.d(),
                        got: y.len(),
                    });
                }
            }
            Target::Segment(s) => {
                if s.params() != self.start.params() || s.dim() != self.model.d() {
                    return Err(FadeError::InvalidParams(
                        "target segment must share the start segment's grid".into(),
                    ));
                }
            }
            Target::Path(p) => {
                let n_steps = self.n_cells()? * self.steps_per_cell()?;
                if p.n_points() != n_steps + 1
                    || (p.t0() - self.t0()).abs() > 1e-9
                    || (p.h() - self.h).abs() > 1e-12
                    || p.dim() != self.model.d()
                {
                    return Err(FadeError::InvalidParams("target path is not on the problem grid".into()));
                }
            }
        }
        Ok(())
    }
}

/// Outcome of a rate evaluation or minimization.
#[derive(Debug, Clone, Serialize)]
pub struct RateResult {
    /// `½ ∫ |v|²` of the returned control.
    pub value: f64,
    pub control: Control,
    pub mismatch: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub feasible: bool,
    pub penalty: f64,
    pub start_index: usize,
    pub warning: Option<String>,
    #[serde(skip)]
    pub path: Option<PathOnGrid>,
}

fn sigma_matrix(compiled: &CompiledModel, hist: &dyn History, buf: &mut [f64], scratch: &mut [f64]) -> DMatrix<f64> {
    compiled.diffusion_into(hist, buf, scratch);
    DMatrix::from_row_slice(compiled.d, compiled.m, buf)
}

/// Action of a given path by inverting the skeleton equation
/// `v = σ(Φ_s)⁻¹(Φ'(s) − b(Φ_s))`. The value uses second-order differences
/// and the trapezoid rule; the returned control is the exact inverse of the
/// Euler step on each cell, so re-integrating it reproduces `phi`.
pub fn direct_rate(model: &CoefficientModel, phi: &PathOnGrid) -> Result<RateResult> {
    direct_rate_with_floor(model, phi, SIGMA_FLOOR)
}

pub fn direct_rate_with_floor(model: &CoefficientModel, phi: &PathOnGrid, floor: f64) -> Result<RateResult> {
    let (d, m) = (model.d(), model.m());
    if d != m {
        return Err(FadeError::Unsupported(format!(
            "direct inversion needs a square diffusion, got {d}×{m}"
        )));
    }
    if phi.dim() != d {
        return Err(FadeError::DimensionMismatch { expected: d, got: phi.dim() });
    }
    let n = phi.n_points() - 1;
    if n < 2 {
        return Err(FadeError::Insufficient("direct_rate needs at least three grid points".into()));
    }
    let compiled = model.compile(phi.params())?;
    let h = phi.h();
    let mut b = vec![0.0; d];
    let mut buf = vec![0.0; d * m];
    let mut scratch = vec![0.0; d];
    let mut deriv = vec![0.0; d];
    let mut value = 0.0;
    let mut cells = vec![0.0; n * m];
    for k in 0..=n {
        let view = phi.view_at(k);
        compiled.drift_into(&view, &mut b, &mut scratch);
        let sig = sigma_matrix(&compiled, &view, &mut buf, &mut scratch);
        let svd = sig.clone().svd(false, false);
        let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(smin >= floor) {
            return Err(FadeError::SingularDiffusion {
                time: phi.time(k),
                min_singular: smin,
            });
        }
        let lu = sig.lu();
        for i in 0..d {
            deriv[i] = if k == 0 {
                (-3.0 * phi.state(0)[i] + 4.0 * phi.state(1)[i] - phi.state(2)[i]) / (2.0 * h)
            } else if k == n {
                (3.0 * phi.state(n)[i] - 4.0 * phi.state(n - 1)[i] + phi.state(n - 2)[i]) / (2.0 * h)
            } else {
                (phi.state(k + 1)[i] - phi.state(k - 1)[i]) / (2.0 * h)
            };
        }
        let rhs = DMatrix::from_iterator(d, 1, deriv.iter().zip(&b).map(|(p, q)| p - q));
        let v = lu
            .solve(&rhs)
            .ok_or(FadeError::SingularDiffusion { time: phi.time(k), min_singular: smin })?;
        let w = if k == 0 || k == n { 0.5 * h } else { h };
        value += 0.5 * w * v.iter().map(|x| x * x).sum::<f64>();
        if k < n {
            let rhs = DMatrix::from_iterator(
                d,
                1,
                (0..d).map(|i| (phi.state(k + 1)[i] - phi.state(k)[i]) / h - b[i]),
            );
            let u = lu
                .solve(&rhs)
                .ok_or(FadeError::SingularDiffusion { time: phi.time(k), min_singular: smin })?;
            cells[k * m..(k + 1) * m].copy_from_slice(u.as_slice());
        }
    }
    Ok(RateResult {
        value,
        control: Control::new(phi.t0(), h, m, cells)?,
        mismatch: 0.0,
        iterations: 0,
        grad_norm: 0.0,
        converged: true,
        feasible: true,
        penalty: 0.0,
        start_index: 0,
        warning: None,
        path: Some(phi.clone()),
    })
}

/// The uncontrolled skeleton pulled back from time `-depth` to 0, with the
/// certificate `‖Y_{0;−depth} − Y_{0;−depth/2}‖_r`.
pub fn stationary_start(
    model: &CoefficientModel,
    xi: &Segment,
    depth: f64,
    h: f64,
    scheme: Scheme,
) -> Result<(Segment, f64)> {
    if !(depth > 0.0) {
        return Err(FadeError::InvalidParams(format!("pull-back depth must be positive, got {depth}")));
    }
    let half = (depth / (2.0 * h)).round() * h;
    let deep = integrate_skeleton(model, xi, None, &SimConfig::new(h, -depth, 0.0).with_scheme(scheme))?;
    let shallow = integrate_skeleton(model, xi, None, &SimConfig::new(h, -half, 0.0).with_scheme(scheme))?;
    let cert = history_distances(&deep, &shallow, &[0.0])?[0];
    Ok((deep.segment_at_index(deep.n_points() - 1), cert))
}

/// Integrates the skeleton for one candidate control, optionally
/// restarting from grid index `k_start` of an earlier run.
struct Solver<'a> {
    compiled: CompiledModel,
    problem: &'a RateProblem,
    n_steps: usize,
    q: usize,
    m: usize,
}

impl<'a> Solver<'a> {
    fn new(problem: &'a RateProblem) -> Result<Self> {
        problem.validate()?;
        problem.model.ensure_stable(problem.start.params().r, 0.0)?;
        let q = problem.steps_per_cell()?;
        Ok(Solver {
            compiled: problem.model.compile(problem.start.params())?,
            n_steps: problem.n_cells()? * q,
            q,
            m: problem.model.m(),
            problem,
        })
    }

    fn cells(&self, x: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut out = vec![0.0; self.n_steps * m];
        for k in 0..self.n_steps {
            let c = k / self.q;
            out[k * m..(k + 1) * m].copy_from_slice(&x[c * m..(c + 1) * m]);
        }
        out
    }

    fn run_from(&self, init: Segment, k_start: usize, cells: &[f64]) -> Result<PathOnGrid> {
        let p = self.problem;
        let t0 = grid_time(p.t0(), p.h, k_start);
        let cfg = SimConfig::new(p.h, t0, grid_time(p.t0(), p.h, self.n_steps)).with_scheme(p.scheme);
        let cells = &cells[k_start * self.m..];
        match p.scheme {
            Scheme::Euler => {
                let drive = Drive {
                    eps: 0.0,
                    noise: None,
                    control: Some(cells),
                    log_weight: false,
                };
                Ok(euler_core(&self.compiled, init, &cfg, &drive)?.path)
            }
            Scheme::Heun => heun_core(&self.compiled, init, &cfg, Some(cells)),
        }
    }

    fn run(&self, x: &[f64]) -> Result<PathOnGrid> {
        self.run_from(self.problem.start.clone(), 0, &self.cells(x))
    }

    /// Constraint residual vector of a run that started at `k_start`;
    /// entries before `k_start` are copied from `base`.
    fn residual(&self, run: &PathOnGrid, k_start: usize, base: Option<&[f64]>) -> Vec<f64> {
        let p = self.problem;
        let d = p.model.d();
        match &p.target {
            Target::Point(y) => run.last().iter().zip(y).map(|(a, b)| a - b).collect(),
            Target::Segment(target) => {
                let seg = run.segment_at_index(run.n_points() - 1);
                let step = (-p.start.params().r * p.h).exp();
                let mut w = 1.0;
                let mut out = Vec::with_capacity(seg.values().len());
                for (ca, cb) in seg.values().chunks(d).zip(target.values().chunks(d)) {
                    out.extend(ca.iter().zip(cb).map(|(a, b)| w * (a - b)));
                    w *= step;
                }
                out
            }
            Target::Path(phi) => {
                let sq = p.h.sqrt();
                let mut out = match base {
                    Some(b) => b.to_vec(),
                    None => vec![0.0; self.n_steps * d],
                };
                for k in (k_start + 1)..=self.n_steps {
                    let local = k - k_start;
                    for i in 0..d {
                        out[(k - 1) * d + i] = sq * (run.state(local)[i] - phi.state(k)[i]);
                    }
                }
                out
            }
        }
    }

    fn mismatch(&self, c: &[f64]) -> f64 {
        let d = self.problem.model.d();
        match &self.problem.target {
            Target::Point(_) => euclid(c),
            Target::Segment(_) => c.chunks(d).map(euclid).fold(0.0, f64::max),
            Target::Path(_) => c.chunks(d).map(euclid).fold(0.0, f64::max) / self.problem.h.sqrt(),
        }
    }

    /// Residual and its forward-difference Jacobian (column per control
    /// coordinate), restarting each perturbed run where the perturbed
    /// cell begins.
    fn residual_and_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>, PathOnGrid)> {
        let cells = self.cells(x);
        let base = self.run_from(self.problem.start.clone(), 0, &cells)?;
        let c = self.residual(&base, 0, None);
        let m = self.m;
        let delta = self.problem.options.fd_step;
        let mut jac = Vec::with_capacity(x.len());
        let mut pert = cells.clone();
        for idx in 0..x.len() {
            let cell = idx / m;
            let comp = idx % m;
            let step = delta * x[idx].abs().max(1.0);
            let k_start = cell * self.q;
            for k in k_start..k_start + self.q {
                pert[k * m + comp] = x[idx] + step;
            }
            let init = base.segment_at_index(k_start);
            let run = self.run_from(init, k_start, &pert)?;
            let cp = self.residual(&run, k_start, Some(&c));
            jac.push(cp.iter().zip(&c).map(|(a, b)| (a - b) / step).collect());
            for k in k_start..k_start + self.q {
                pert[k * m + comp] = cells[k * m + comp];
            }
        }
        Ok((c, jac, base))
    }
}

struct StartOutcome {
    x: Vec<f64>,
    energy: f64,
    mismatch: f64,
    iterations: usize,
    grad_norm: f64,
    inner_converged: bool,
    rho: f64,
    path: PathOnGrid,
}

fn optimize_from(solver: &Solver<'_>, x0: Vec<f64>) -> Result<StartOutcome> {
    let o = solver.problem.options;
    let h_v = solver.problem.h_v;
    let mut x = x0;
    let mut rho = o.rho0;
    let path0 = solver.run(&x)?;
    let c0 = solver.residual(&path0, 0, None);
    let mut lam = vec![0.0; c0.len()];
    let mut mis = solver.mismatch(&c0);
    let mut iterations = 0;
    let mut grad_norm = f64::NAN;
    let mut inner_converged = false;
    let mut path = path0;
    for _ in 0..o.max_outer {
        if mis <= o.tol && iterations > 0 {
            break;
        }
        let lam_now = lam.clone();
        let out = lbfgs(
            x.clone(),
            |x, g| {
                let (c, jac, _) = solver.residual_and_jacobian(x)?;
                let w: Vec<f64> = c.iter().zip(&lam_now).map(|(ci, li)| li + rho * ci).collect();
                let mut f = 0.0;
                for (i, gi) in g.iter_mut().enumerate() {
                    f += 0.5 * h_v * x[i] * x[i];
                    *gi = h_v * x[i] + jac[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                }
                f += c.iter().zip(&lam_now).map(|(a, b)| a * b).sum::<f64>();
                f += 0.5 * rho * c.iter().map(|a| a * a).sum::<f64>();
                Ok::<f64, FadeError>(f)
            },
            &LbfgsOptions {
                max_iter: o.max_inner,
                grad_tol: 1e-10,
                ..Default::default()
            },
        )?;
        iterations += out.iterations.max(1);
        grad_norm = out.grad_norm;
        inner_converged = out.converged;
        x = out.x;
        path = solver.run(&x)?;
        let c = solver.residual(&path, 0, None);
        let new_mis = solver.mismatch(&c);
        for (l, ci) in lam.iter_mut().zip(&c) {
            *l += rho * ci;
        }
        if new_mis > 0.25 * mis {
            rho *= o.rho_growth;
        }
        mis = new_mis;
        if mis <= o.tol {
            break;
        }
    }
    let energy = 0.5 * h_v * x.iter().map(|v| v * v).sum::<f64>();
    Ok(StartOutcome {
        x,
        energy,
        mismatch: mis,
        iterations,
        grad_norm,
        inner_converged,
        rho,
        path,
    })
}

/// Straight-line (or given-path) direct inversion, averaged onto the
/// control grid.
fn direct_seed(problem: &RateProblem) -> Option<Vec<f64>> {
    let model = &problem.model;
    if model.d() != model.m() {
        return None;
    }
    let n_steps = problem.n_cells().ok()? * problem.steps_per_cell().ok()?;
    let phi = match &problem.target {
        Target::Point(y) => {
            let y0 = problem.start.head().to_vec();
            let d = y0.len();
            let mut states = Vec::with_capacity((n_steps + 1) * d);
            for k in 0..=n_steps {
                let s = k as f64 / n_steps as f64;
                states.extend(y0.iter().zip(y).map(|(a, b)| a + s * (b - a)));
            }
            PathOnGrid::from_states(problem.start.clone(), states).ok()?
        }
        Target::Path(p) => p.clone(),
        Target::Segment(_) => return None,
    };
    let res = direct_rate(model, &phi).ok()?;
    let m = model.m();
    let n_cells = problem.n_cells().ok()?;
    let mut x = vec![0.0; n_cells * m];
    for i in 0..n_cells {
        let a = problem.t0() + i as f64 * problem.h_v;
        res.control.cell_average(a, a + problem.h_v, &mut x[i * m..(i + 1) * m]);
    }
    Some(x)
}

fn control_to_grid(problem: &RateProblem, v: &Control) -> Result<Vec<f64>> {
    if v.m() != problem.model.m() {
        return Err(FadeError::DimensionMismatch {
            expected: problem.model.m(),
            got: v.m(),
        });
    }
    let m = v.m();
    let n_cells = problem.n_cells()?;
    let mut x = vec![0.0; n_cells * m];
    for i in 0..n_cells {
        let a = problem.t0() + i as f64 * problem.h_v;
        v.cell_average(a, a + problem.h_v, &mut x[i * m..(i + 1) * m]);
    }
    Ok(x)
}

/// Minimizes `½∫|v|²` subject to the target constraint with an augmented
/// Lagrangian penalty, from several starts; the lowest feasible energy wins
/// (ties go to the lowest start index).
pub fn minimize_rate(problem: &RateProblem) -> Result<RateResult> {
    let solver = Solver::new(problem)?;
    let m = problem.model.m();
    let n_x = problem.n_cells()? * m;
    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; n_x]];
    if let Some(seed) = direct_seed(problem) {
        starts.push(seed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(problem.options.seed);
    for _ in 0..problem.options.n_random {
        starts.push((0..n_x).map(|_| problem.options.random_scale * standard_normal(&mut rng)).collect());
    }
    for w in &problem.warm_starts {
        starts.push(control_to_grid(problem, w)?);
    }
    let outcomes: Vec<Result<StartOutcome>> = starts
        .into_par_iter()
        .map(|x0| {
            let solver = Solver::new(problem)?;
            optimize_from(&solver, x0)
        })
        .collect();
    drop(solver);
    let mut best: Option<(usize, StartOutcome)> = None;
    let mut first_err = None;
    for (i, o) in outcomes.into_iter().enumerate() {
        let o = match o {
            Ok(o) => o,
            Err(e) => {
                first_err.get_or_insert(e);
                continue;
            }
        };
        let tol = problem.options.tol;
        let better = match &best {
            None => true,
            Some((_, b)) => {
                let (fa, fb) = (o.mismatch <= tol, b.mismatch <= tol);
                match (fa, fb) {
                    (true, false) => true,
                    (false, true) => false,
                    (true, true) => o.energy < b.energy,
                    (false, false) => o.mismatch < b.mismatch,
                }
            }
        };
        if better {
            best = Some((i, o));
        }
    }
    let Some((idx, o)) = best else {
        return Err(first_err.unwrap_or_else(|| FadeError::Infeasible("no start produced a result".into())));
    };
    let feasible = o.mismatch <= problem.options.tol;
    let warning = (!feasible).then(|| {
        format!(
            "mismatch {:.3e} above tolerance {:.1e} after the penalty schedule; the infimum may be +∞",
            o.mismatch, problem.options.tol
        )
    });
    Ok(RateResult {
        value: o.energy,
        control: Control::new(problem.t0(), problem.h_v, m, o.x)?,
        mismatch: o.mismatch,
        iterations: o.iterations,
        grad_norm: o.grad_norm,
        converged: feasible && o.inner_converged,
        feasible,
        penalty: o.rho,
        start_index: idx,
        warning,
        path: Some(o.path),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonPoint {
    pub t: f64,
    pub value: f64,
    pub mismatch: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct QuasipotentialResult {
    /// Minimum over feasible horizons; `None` stands for +∞.
    pub value: Option<f64>,
    pub best_t: Option<f64>,
    pub curve: Vec<HorizonPoint>,
    pub start_certificate: f64,
    #[serde(skip)]
    pub results: Vec<RateResult>,
}

impl QuasipotentialResult {
    pub fn value_or_inf(&self) -> f64 {
        self.value.unwrap_or(f64::INFINITY)
    }

    pub fn best(&self) -> Option<&RateResult> {
        let t = self.best_t?;
        self.curve
            .iter()
            .position(|p| p.t == t)
            .map(|i| &self.results[i])
    }
}

/// Settings shared by [`quasipotential`] and [`contraction_project`].
#[derive(Debug, Clone)]
pub struct HorizonSweep {
    pub t_list: Vec<f64>,
    pub depth: f64,
    pub h: f64,
    pub h_v: f64,
    pub scheme: Scheme,
    pub options: RateOptions,
}

/// Cost of reaching `target` from the uncontrolled pull-back limit,
/// minimized over the horizons in `sweep.t_list`. Each horizon is
/// warm-started with the previous optimum delayed to end at the new
/// horizon, so the curve can only go down when the start is an
/// equilibrium.
pub fn quasipotential(model: &CoefficientModel, xi: &Segment, target: Target, sweep: &HorizonSweep) -> Result<QuasipotentialResult> {
    if sweep.t_list.is_empty() || sweep.t_list.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(FadeError::InvalidParams("T_list must be nonempty and increasing".into()));
    }
    if matches!(target, Target::Path(_)) {
        return Err(FadeError::Unsupported("quasipotential targets are points or segments".into()));
    }
    model.ensure_stable(xi.params().r, 0.0)?;
    let (start, cert) = stationary_start(model, xi, sweep.depth, sweep.h, sweep.scheme)?;
    let mut curve = Vec::with_capacity(sweep.t_list.len());
    let mut results: Vec<RateResult> = Vec::with_capacity(sweep.t_list.len());
    let mut prev: Option<(f64, Control)> = None;
    for &t in &sweep.t_list {
        let mut problem = RateProblem {
            model: model.clone(),
            start: start.clone(),
            t_end: t,
            target: target.clone(),
            h: sweep.h,
            h_v: sweep.h_v,
            scheme: sweep.scheme,
            options: sweep.options,
            warm_starts: Vec::new(),
            start_certificate: Some(cert),
        };
        if let Some((t_prev, v)) = &prev {
            let shifted = Control::new(v.start() + (t - t_prev), v.h(), v.m(), v.values().to_vec())?;
            problem.warm_starts.push(shifted);
        }
        let res = minimize_rate(&problem)?;
        curve.push(HorizonPoint {
            t,
            value: res.value,
            mismatch: res.mismatch,
            feasible: res.feasible,
        });
        if res.feasible {
            prev = Some((t, res.control.clone()));
        }
        results.push(res);
    }
    let mut value = None;
    let mut best_t = None;
    for p in curve.iter().filter(|p| p.feasible) {
        if value.is_none_or(|v| p.value < v) {
            value = Some(p.value);
            best_t = Some(p.t);
        }
    }
    Ok(QuasipotentialResult {
        value,
        best_t,
        curve,
        start_certificate: cert,
        results,
    })
}

/// The invariant-measure rate of a terminal segment: the quasipotential
/// with the whole history window constrained.
pub fn contraction_project(
    model: &CoefficientModel,
    xi: &Segment,
    phi_star: &Segment,
    sweep: &HorizonSweep,
) -> Result<QuasipotentialResult> {
    quasipotential(model, xi, Target::Segment(phi_star.clone()), sweep)
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractionCheck {
    pub times: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub holds: bool,
    /// `rhs / lhs` at the last time (infinite when lhs = 0).
    pub final_slack: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationCheck {
    pub n: usize,
    pub l2_distance: f64,
    pub output_distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuityReport {
    pub lambda: f64,
    /// `M = ∫|v|²`.
    pub m_energy: f64,
    pub pairs: Vec<ContractionCheck>,
    pub perturbations: Vec<PerturbationCheck>,
    pub perturbations_decrease: bool,
}

impl ContinuityReport {
    pub fn all_hold(&self) -> bool {
        self.pairs.iter().all(|p| p.holds)
    }
}

/// Checks `‖Y_t(ξ1) − Y_t(ξ2)‖² ≤ 2e^{−λ(t−t0)+M}‖ξ1 − ξ2‖²` for the
/// controlled skeleton along the grid of `cfg`, with
/// `λ = 0.99·min(margin(ε = 1), 2r)` and `M = ∫|v|²`, and measures the
/// sup-window response to the oscillating perturbations
/// `v + sin(n·)/n` for each `n` in `ns`.
pub fn continuity_probe(
    model: &CoefficientModel,
    xi_pairs: &[(Segment, Segment)],
    v: &Control,
    ns: &[usize],
    cfg: &SimConfig,
) -> Result<ContinuityReport> {
    let r = match xi_pairs.first() {
        Some((a, _)) => a.params().r,
        None => return Err(FadeError::InvalidParams("need at least one initial pair".into())),
    };
    let lambda = 0.99 * model.margin(r, 1.0)?.min(2.0 * r).max(0.0);
    let m_energy = 2.0 * v.energy();
    let n_steps = cfg.n_steps()?;
    let times: Vec<f64> = (0..=n_steps).map(|k| grid_time(cfg.t0, cfg.h, k)).collect();
    let mut pairs = Vec::with_capacity(xi_pairs.len());
    for (a, b) in xi_pairs {
        let pa = integrate_skeleton(model, a, Some(v), cfg)?;
        let pb = integrate_skeleton(model, b, Some(v), cfg)?;
        let dist = history_distances(&pa, &pb, &times)?;
        let d0 = a.at_time(cfg.t0).sub(&b.at_time(cfg.t0))?.cr_norm();
        let lhs: Vec<f64> = dist.iter().map(|x| x * x).collect();
        let rhs: Vec<f64> = times
            .iter()
            .map(|t| 2.0 * (-lambda * (t - cfg.t0) + m_energy).exp() * d0 * d0)
            .collect();
        let holds = lhs.iter().zip(&rhs).all(|(l, r)| *l <= *r * (1.0 + 1e-12) + 1e-300);
        let (l_end, r_end) = (lhs[lhs.len() - 1], rhs[rhs.len() - 1]);
        pairs.push(ContractionCheck {
            times: times.clone(),
            lhs,
            rhs,
            holds,
            final_slack: if l_end > 0.0 { r_end / l_end } else { f64::INFINITY },
        });
    }
    let xi = &xi_pairs[0].0;
    let base = integrate_skeleton(model, xi, Some(v), cfg)?;
    let m = model.m();
    let mut buf = vec![0.0; m];
    let mut perturbations = Vec::with_capacity(ns.len());
    for &n in ns {
        let nf = n.max(1) as f64;
        let pert = Control::from_fn(cfg.t0, cfg.t_end, cfg.h, m, |t, out| {
            v.value_at(t, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o = b + (nf * t).sin() / nf;
            }
        })?;
        let l2 = {
            let diff = pert.axpy(-1.0, v)?;
            (2.0 * diff.energy()).sqrt()
        };
        let path = integrate_skeleton(model, xi, Some(&pert), cfg)?;
        let out = history_distances(&path, &base, &times)?.into_iter().fold(0.0, f64::max);
        perturbations.push(PerturbationCheck {
            n,
            l2_distance: l2,
            output_distance: out,
        });
    }
    let perturbations_decrease = perturbations.windows(2).all(|w| w[1].output_distance < w[0].output_distance);
    Ok(ContinuityReport {
        lambda,
        m_energy,
        pairs,
        perturbations,
        perturbations_decrease,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fading_memory::{DelayMeasure, MemoryParams};
    use crate::model::Nonlinearity;

    fn ou(a: f64) -> CoefficientModel {
        CoefficientModel::scalar(a, 0.0, Nonlinearity::Zero, 1.0, 0.0, DelayMeasure::atom(0.0), DelayMeasure::atom(0.0))
            .unwrap()
    }

    fn params(h: f64) -> MemoryParams {
        MemoryParams::new(1.0, h, h, 1e-8).unwrap()
    }

    /// Minimal energy to move a scalar Euler recursion
    /// `y_{k+1} = (1 − a h) y_k + h u_{⌊k/q⌋}` from 0 to `y` with `n_c`
    /// piecewise-constant controls: `y² / (2 Σ g_i² / h_v)` where `g_i` is
    /// the terminal response to a unit control on cell `i`.
    fn euler_min_energy(a: f64, h: f64, q: usize, n_c: usize, y: f64) -> f64 {
        let n = q * n_c;
        let rho = 1.0 - a * h;
        let mut s = 0.0;
        for i in 0..n_c {
            let g: f64 = (i * q..(i + 1) * q).map(|k| h * rho.powi((n - 1 - k) as i32)).sum();
            s += g * g;
        }
        y * y / (2.0 * s / (q as f64 * h))
    }

    #[test]
    fn direct_rate_linear_path() {
        let h = 1e-3;
        let model = ou(1.0);
        let xi = Segment::zeros(params(h), 0.0, 1).unwrap();
        let states: Vec<f64> = (0..=1000).map(|k| k as f64 * h).collect();
        let phi = PathOnGrid::from_states(xi, states).unwrap();
        let res = direct_rate(&model, &phi).unwrap();
        assert!((res.value - 7.0 / 6.0).abs() < 1e-6, "{}", res.value);
    }

    #[test]
    fn direct_rate_of_free_flow_is_small_and_round_trips() {
        let h = 1e-3;
        let model = ou(1.0);
        let xi = Segment::constant(params(h), 0.0, &[1.0]).unwrap();
        let cfg = SimConfig::new(h, 0.0, 2.0);
        let free = integrate_skeleton(&model, &xi, None, &cfg).unwrap();
        let res = direct_rate(&model, &free).unwrap();
        assert!(res.value <= 1e-6, "{}", res.value);
        let states: Vec<f64> = (0..=2000).map(|k| (k as f64 * h * 3.0).sin()).collect();
        let xi0 = Segment::zeros(params(h), 0.0, 1).unwrap();
        let phi = PathOnGrid::from_states(xi0.clone(), states).unwrap();
        let res = direct_rate(&model, &phi).unwrap();
        let back = integrate_skeleton(&model, &xi0, Some(&res.control), &cfg).unwrap();
        let err = back
            .states()
            .iter()
            .zip(phi.states())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn direct_rate_rejects_nonsquare() {
        let model = CoefficientModel::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            Nonlinearity::Zero,
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            vec![DMatrix::zeros(1, 2)],
            DelayMeasure::atom(0.0),
            DelayMeasure::atom(0.0),
        )
        .unwrap();
        let xi = Segment::zeros(params(0.01), 0.0, 1).unwrap();
        let phi = PathOnGrid::from_states(xi, vec![0.0, 0.1, 0.2]).unwrap();
        assert!(matches!(direct_rate(&model, &phi), Err(FadeError::Unsupported(_))));
    }

    fn ou_problem(y: f64, t: f64, h: f64, h_v: f64) -> RateProblem {
        let xi = Segment::zeros(params(h), 0.0, 1).unwrap();
        RateProblem::new(&ou(1.0), StartMode::FromInitial { t0: 0.0, xi }, Target::Point(vec![y]), t, h, h_v).unwrap()
    }

    #[test]
    fn minimize_matches_discrete_oracle() {
        let (h, h_v) = (0.005, 0.125);
        let res = minimize_rate(&ou_problem(1.0, 2.0, h, h_v)).unwrap();
        let oracle = euler_min_energy(1.0, h, 25, 16, 1.0);
        assert!(res.feasible);
        assert!((res.value - oracle).abs() < 1e-3 * oracle, "{} vs {oracle}", res.value);
        let gramian = 1.0 / (1.0 - (-4.0f64).exp());
        assert!((res.value - gramian).abs() < 0.01 * gramian);
    }

    #[test]
    fn free_endpoint_costs_nothing() {
        let h = 0.01;
        let model = ou(1.0);
        let xi = Segment::constant(params(h), 0.0, &[1.0]).unwrap();
        let free = integrate_skeleton(&model, &xi, None, &SimConfig::new(h, 0.0, 1.0)).unwrap();
        let p = RateProblem::new(
            &model,
            StartMode::FromInitial { t0: 0.0, xi },
            Target::Point(free.last().to_vec()),
            1.0,
            h,
            0.1,
        )
        .unwrap();
        let res = minimize_rate(&p).unwrap();
        assert!(res.value <= 1e-6 && res.control.is_zero());
    }

    #[test]
    fn doubling_target_quadruples_value() {
        let a = minimize_rate(&ou_problem(0.5, 1.0, 0.01, 0.1)).unwrap();
        let b = minimize_rate(&ou_problem(1.0, 1.0, 0.01, 0.1)).unwrap();
        assert!((b.value / a.value - 4.0).abs() < 0.08);
    }

    #[test]
    fn quasipotential_decreases_toward_a_y_squared() {
        let h = 0.01;
        let xi = Segment::constant(params(h), 0.0, &[0.3]).unwrap();
        let sweep = HorizonSweep {
            t_list: vec![1.0, 2.0, 4.0],
            depth: 20.0,
            h,
            h_v: 0.25,
            scheme: Scheme::Euler,
            options: RateOptions::default(),
        };
        let q = quasipotential(&ou(1.0), &xi, Target::Point(vec![1.0]), &sweep).unwrap();
        let vals: Vec<f64> = q.curve.iter().map(|p| p.value).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-6), "{vals:?}");
        assert!((q.value.unwrap() - 1.0).abs() < 0.03, "{vals:?}");
        assert!(q.start_certificate < 1e-4, "{}", q.start_certificate);
    }

    #[test]
    fn continuity_bound_with_delay_atom() {
        let h = 0.01;
        let model = CoefficientModel::scalar(
            2.0,
            0.5,
            Nonlinearity::Zero,
            1.0,
            0.0,
            DelayMeasure::atom(-0.1),
            DelayMeasure::atom(0.0),
        )
        .unwrap();
        let p = MemoryParams::new(1.0, h, 0.2, 1e-8).unwrap();
        let a = Segment::constant(p, 0.0, &[1.0]).unwrap();
        let b = Segment::constant(p, 0.0, &[-0.5]).unwrap();
        let v = Control::from_fn(0.0, 5.0, 0.1, 1, |t, o| o[0] = t.cos()).unwrap();
        let rep = continuity_probe(&model, &[(a.clone(), b), (a.clone(), a)], &v, &[4, 16, 64], &SimConfig::new(h, 0.0, 5.0))
            .unwrap();
        assert!(rep.all_hold());
        assert!(rep.pairs[0].final_slack >= 10.0, "{}", rep.pairs[0].final_slack);
        assert!(rep.pairs[1].lhs.iter().all(|x| *x == 0.0));
        assert!(rep.perturbations_decrease, "{:?}", rep.perturbations);
    }
}
