//! Remote-start construction of stationary solutions and distributional
//! tests of their shift invariance.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FadeError, Result};
use crate::fading_memory::{history_distances, History, PathOnGrid, Segment};
use crate::model::{dissipativity_report, CoefficientModel};
use crate::simulate::{
    control_cells, euler_core, integrate_skeleton, prepare, replicate, Control, Drive, Noise, SimConfig,
    StreamNoise,
};
use crate::stats::{
    energy_test, fit_line, fit_line_weighted, ks_one_sample, ks_two_sample, mean, median, normal_cdf,
    normal_quantile, variance, KsResult, LineFit,
};

/// Runs started at `−n` for each `n` in `n_list`, compared on a window.
#[derive(Debug, Clone)]
pub struct PullbackRun {
    pub n_list: Vec<f64>,
    pub window: (f64, f64),
    pub times: Vec<f64>,
    /// `diffs[i][j]`: r-norm distance of the runs from `−n_i` and
    /// `−n_{i+1}` at `times[j]`.
    pub diffs: Vec<Vec<f64>>,
    /// Supremum of each row of `diffs` over the window.
    pub sup_diffs: Vec<f64>,
    pub fit: Option<LineFit>,
    /// Decay rate of the sup differences in `n` (norm convention).
    pub fitted_rate: Option<f64>,
    pub limit_path: PathOnGrid,
    pub(crate) runs: Vec<PathOnGrid>,
}

/// Serializable part of a [`PullbackRun`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullbackSummary {
    pub n_list: Vec<f64>,
    pub window: (f64, f64),
    pub sup_diffs: Vec<f64>,
    pub fitted_rate: Option<f64>,
    pub r2: Option<f64>,
    pub intercept: Option<f64>,
}

impl PullbackRun {
    pub fn summary(&self) -> PullbackSummary {
        PullbackSummary {
            n_list: self.n_list.clone(),
            window: self.window,
            sup_diffs: self.sup_diffs.clone(),
            fitted_rate: self.fitted_rate,
            r2: self.fit.map(|f| f.r2),
            intercept: self.fit.map(|f| f.intercept),
        }
    }

    pub fn r2(&self) -> Option<f64> {
        self.fit.map(|f| f.r2)
    }

    /// Difference between the two deepest starts.
    pub fn terminal_diff(&self) -> f64 {
        self.sup_diffs.last().copied().unwrap_or(0.0)
    }

    /// Every individual run, shallowest start first.
    pub fn runs(&self) -> &[PathOnGrid] {
        &self.runs
    }

    /// Writes `t,diff_0,…` rows.
    pub fn write_diffs_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for i in 0..self.diffs.len() {
            write!(w, ",n{}_vs_n{}", self.n_list[i], self.n_list[i + 1])?;
        }
        writeln!(w)?;
        for (j, t) in self.times.iter().enumerate() {
            write!(w, "{t}")?;
            for row in &self.diffs {
                write!(w, ",{}", row[j])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn check_layout(window: (f64, f64), n_list: &[f64]) -> Result<()> {
    if !(window.1 >= window.0) {
        return Err(FadeError::InvalidParams("window must satisfy t_lo ≤ t_hi".into()));
    }
    if n_list.len() < 2 {
        return Err(FadeError::InvalidParams("n_list needs at least two starts".into()));
    }
    if n_list.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(FadeError::InvalidParams("n_list must be strictly increasing".into()));
    }
    if n_list[0] < -window.0 {
        return Err(FadeError::InvalidParams(format!(
            "shallowest start −{} is after the window start {}",
            n_list[0], window.0
        )));
    }
    Ok(())
}

pub(crate) fn window_times(cfg: &SimConfig, window: (f64, f64)) -> Vec<f64> {
    let n = ((window.1 - window.0) / cfg.h).round() as usize;
    (0..=n).map(|k| window.0 + k as f64 * cfg.h).collect()
}

/// Integration from `−n` for each start, either stochastic (Euler with
/// the given noise) or deterministic (skeleton with `cfg.scheme`).
#[allow(clippy::too_many_arguments)]
fn run_starts(
    model: &CoefficientModel,
    xi: &Segment,
    eps: f64,
    v: Option<&Control>,
    window: (f64, f64),
    n_list: &[f64],
    cfg: &SimConfig,
    noise: Option<&dyn Noise>,
) -> Result<PullbackRun> {
    check_layout(window, n_list)?;
    let mut runs = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let c = cfg.with_span(-n, window.1);
        let result = match noise {
            Some(noise) if eps > 0.0 => {
                let xi = prepare(model, xi, eps, &c)?;
                let compiled = model.compile(xi.params())?;
                let cells = control_cells(model, v, &c)?;
                let drive = Drive {
                    eps,
                    noise: Some(noise),
                    control: cells.as_deref(),
                    log_weight: false,
                };
                euler_core(&compiled, xi, &c, &drive).map(|o| o.path)
            }
            _ => integrate_skeleton(model, xi, v, &c),
        };
        match result {
            Ok(p) => runs.push(p),
            Err(FadeError::Diverged { step, time }) => {
                return Err(FadeError::StartDiverged { start: n, step, time })
            }
            Err(e) => return Err(e),
        }
    }
    let times = window_times(cfg, window);
    let mut diffs = Vec::with_capacity(runs.len() - 1);
    for pair in runs.windows(2) {
        diffs.push(history_distances(&pair[0], &pair[1], &times)?);
    }
    let sup_diffs: Vec<f64> = diffs.iter().map(|row| row.iter().copied().fold(0.0, f64::max)).collect();
    let (x, y): (Vec<f64>, Vec<f64>) = n_list
        .iter()
        .zip(&sup_diffs)
        .filter(|(_, d)| **d > 1e-300)
        .map(|(n, d)| (*n, d.ln()))
        .unzip();
    let fit = if x.len() >= 2 { fit_line(&x, &y).ok() } else { None };
    let deepest = runs.last().expect("at least two runs");
    let limit_path = deepest.restrict(window.0, window.1)?;
    Ok(PullbackRun {
        n_list: n_list.to_vec(),
        window,
        times,
        diffs,
        sup_diffs,
        fitted_rate: fit.map(|f| -f.slope),
        fit,
        limit_path,
        runs,
    })
}

/// Pull-back on one shared noise path (`seed`, stream 0).
pub fn pullback_solve(
    model: &CoefficientModel,
    xi: &Segment,
    eps: f64,
    window: (f64, f64),
    n_list: &[f64],
    cfg: &SimConfig,
    seed: u64,
) -> Result<PullbackRun> {
    let noise = StreamNoise::new(cfg.h, model.m(), seed, 0)?;
    run_starts(model, xi, eps, None, window, n_list, cfg, Some(&noise))
}

/// Pull-back on the noise stream `stream_id` with an optional control.
#[allow(clippy::too_many_arguments)]
pub fn pullback_on_stream(
    model: &CoefficientModel,
    xi: &Segment,
    eps: f64,
    v: Option<&Control>,
    window: (f64, f64),
    n_list: &[f64],
    cfg: &SimConfig,
    seed: u64,
    stream_id: u64,
) -> Result<PullbackRun> {
    let noise = StreamNoise::new(cfg.h, model.m(), seed, stream_id)?;
    run_starts(model, xi, eps, v, window, n_list, cfg, Some(&noise))
}

/// Normal law per coordinate used as an optional reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalReference {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityOptions {
    pub n_burn: f64,
    pub times: Vec<f64>,
    pub n_replicas: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Maximal pull-back difference accepted as a certified burn-in.
    pub burn_tol: f64,
    pub energy_subsample: usize,
    pub energy_permutations: usize,
    pub reference: Option<NormalReference>,
}

impl StationarityOptions {
    pub fn new(n_burn: f64, times: Vec<f64>, n_replicas: usize, alpha: f64, seed: u64) -> Self {
        StationarityOptions {
            n_burn,
            times,
            n_replicas,
            alpha,
            seed,
            burn_tol: 1e-3,
            energy_subsample: 200,
            energy_permutations: 199,
            reference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalStats {
    pub time: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Standard error of each sample variance (normal approximation).
    pub var_stderr: Vec<f64>,
    pub mean_sq_norm: f64,
    pub mean_sq_norm_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub t_a: f64,
    pub t_b: f64,
    pub ks: Vec<KsResult>,
    pub energy: KsResult,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTest {
    pub time: f64,
    pub coord: usize,
    pub ks: KsResult,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBound {
    pub max_mean_sq_norm: f64,
    pub median_mean_sq_norm: f64,
    pub slope: f64,
    pub slope_ci: (f64, f64),
    pub flat: bool,
    pub bounded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub times: Vec<f64>,
    pub n_burn: f64,
    pub burn_diff: f64,
    pub alpha: f64,
    pub n_replicas: usize,
    pub marginals: Vec<MarginalStats>,
    pub pairs: Vec<PairTest>,
    pub reference: Vec<ReferenceTest>,
    pub reference_pass_fraction: Option<f64>,
    pub uniform_bound: UniformBound,
}

impl StationarityReport {
    pub fn pairs_pass(&self) -> bool {
        self.pairs.iter().all(|p| p.pass)
    }
}

struct ReplicaSample {
    head: Vec<f64>,
    sq_norm: f64,
    segment: Option<Segment>,
}

/// Distributional stationarity: independent replicas started at
/// `−n_burn`, observed at each time in `opts.times`.
pub fn stationarity_test(
    model: &CoefficientModel,
    xi: &Segment,
    eps: f64,
    cfg: &SimConfig,
    opts: &StationarityOptions,
) -> Result<StationarityReport> {
    if opts.n_replicas < 100 {
        return Err(FadeError::Insufficient(format!(
            "stationarity test needs at least 100 replicas, got {}",
            opts.n_replicas
        )));
    }
    if opts.times.is_empty() {
        return Err(FadeError::InvalidParams("no test times".into()));
    }
    let t_lo = opts.times.iter().copied().fold(f64::INFINITY, f64::min);
    let t_hi = opts.times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let half = (opts.n_burn / 2.0 / cfg.h).round() * cfg.h;
    let cert = pullback_solve(model, xi, eps, (t_lo, t_hi), &[half, opts.n_burn], cfg, opts.seed)?;
    let burn_diff = cert.sup_diffs[0];
    if !(burn_diff <= opts.burn_tol) {
        return Err(FadeError::Insufficient(format!(
            "burn-in {} not certified: pull-back difference {burn_diff} exceeds {}",
            opts.n_burn, opts.burn_tol
        )));
    }
    let d = model.d();
    let nt = opts.times.len();
    let nr = opts.n_replicas;
    let keep = opts.energy_subsample.min(nr);
    let mut per_time: Vec<Vec<ReplicaSample>> = Vec::with_capacity(nt);
    for (j, &t) in opts.times.iter().enumerate() {
        let c = cfg.with_span(-opts.n_burn, t);
        let samples = replicate(nr, |i| {
            let stream = 1 + (j * nr + i) as u64;
            let noise = StreamNoise::new(cfg.h, model.m(), opts.seed, stream)?;
            let xi = prepare(model, xi, eps, &c)?;
            let compiled = model.compile(xi.params())?;
            let drive = Drive {
                eps,
                noise: Some(&noise),
                control: None,
                log_weight: false,
            };
            let path = euler_core(&compiled, xi, &c, &drive)?.path;
            let k = path.n_points() - 1;
            let norm = path.norm_at_index(k);
            Ok(ReplicaSample {
                head: path.state(k).to_vec(),
                sq_norm: norm * norm,
                segment: (i < keep).then(|| path.segment_at_index(k)),
            })
        })?;
        per_time.push(samples);
    }

    let coord = |s: &[ReplicaSample], c: usize| -> Vec<f64> { s.iter().map(|x| x.head[c]).collect() };
    let mut marginals = Vec::with_capacity(nt);
    for (j, samples) in per_time.iter().enumerate() {
        let mut means = Vec::with_capacity(d);
        let mut vars = Vec::with_capacity(d);
        let mut var_se = Vec::with_capacity(d);
        for c in 0..d {
            let x = coord(samples, c);
            let m = mean(&x);
            let v = variance(&x);
            let m4 = x.iter().map(|y| (y - m).powi(4)).sum::<f64>() / x.len() as f64;
            means.push(m);
            vars.push(v);
            var_se.push(((m4 - v * v * (x.len() as f64 - 3.0) / (x.len() as f64 - 1.0)) / x.len() as f64).max(0.0).sqrt());
        }
        let sq: Vec<f64> = samples.iter().map(|s| s.sq_norm).collect();
        marginals.push(MarginalStats {
            time: opts.times[j],
            mean: means,
            var: vars,
            var_stderr: var_se,
            mean_sq_norm: mean(&sq),
            mean_sq_norm_stderr: (variance(&sq) / sq.len() as f64).sqrt(),
        });
    }

    let mut pairs = Vec::new();
    for a in 0..nt {
        for b in a + 1..nt {
            let ks: Vec<KsResult> = (0..d)
                .map(|c| ks_two_sample(&coord(&per_time[a], c), &coord(&per_time[b], c)))
                .collect::<Result<_>>()?;
            let segs: Vec<&Segment> = per_time[a]
                .iter()
                .chain(per_time[b].iter())
                .filter_map(|s| s.segment.as_ref())
                .collect();
            let n = segs.len();
            let mut dist = DMatrix::zeros(n, n);
            for i in 0..n {
                for k in i + 1..n {
                    let dd = segs[i].at_time(0.0).sub(&segs[k].at_time(0.0))?.cr_norm();
                    dist[(i, k)] = dd;
                    dist[(k, i)] = dd;
                }
            }
            let energy = energy_test(&dist, keep, opts.energy_permutations, opts.seed ^ (a * nt + b) as u64)?;
            let pass = ks.iter().all(|k| k.passes(opts.alpha)) && energy.passes(opts.alpha);
            pairs.push(PairTest {
                t_a: opts.times[a],
                t_b: opts.times[b],
                ks,
                energy,
                pass,
            });
        }
    }

    let mut reference = Vec::new();
    if let Some(r) = &opts.reference {
        if r.mean.len() != d || r.var.len() != d {
            return Err(FadeError::DimensionMismatch {
                expected: d,
                got: r.mean.len(),
            });
        }
        for (j, samples) in per_time.iter().enumerate() {
            for c in 0..d {
                let sd = r.var[c].sqrt();
                let ks = ks_one_sample(&coord(samples, c), |x| normal_cdf(x, r.mean[c], sd))?;
                reference.push(ReferenceTest {
                    time: opts.times[j],
                    coord: c,
                    pass: ks.passes(opts.alpha),
                    ks,
                });
            }
        }
    }
    let reference_pass_fraction = (!reference.is_empty())
        .then(|| reference.iter().filter(|r| r.pass).count() as f64 / reference.len() as f64);

    let levels: Vec<f64> = marginals.iter().map(|m| m.mean_sq_norm).collect();
    let ses: Vec<f64> = marginals.iter().map(|m| m.mean_sq_norm_stderr).collect();
    let max_level = levels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let med = median(&levels);
    let z = normal_quantile(1.0 - opts.alpha / 2.0);
    let (slope, slope_ci) = if nt < 2 {
        (0.0, (0.0, 0.0))
    } else if ses.iter().all(|s| *s > 0.0) {
        let w: Vec<f64> = ses.iter().map(|s| 1.0 / (s * s)).collect();
        let f = fit_line_weighted(&opts.times, &levels, &w, true)?;
        (f.slope, (f.slope - z * f.slope_se, f.slope + z * f.slope_se))
    } else {
        let f = fit_line(&opts.times, &levels)?;
        (f.slope, (f.slope - z * f.slope_se, f.slope + z * f.slope_se))
    };
    let uniform_bound = UniformBound {
        max_mean_sq_norm: max_level,
        median_mean_sq_norm: med,
        slope,
        slope_ci,
        flat: slope_ci.0 <= 1e-12 && slope_ci.1 >= -1e-12,
        bounded: max_level.is_finite() && max_level <= 3.0 * med + 1e-300,
    };
    Ok(StationarityReport {
        times: opts.times.clone(),
        n_burn: opts.n_burn,
        burn_diff,
        alpha: opts.alpha,
        n_replicas: nr,
        marginals,
        pairs,
        reference,
        reference_pass_fraction,
        uniform_bound,
    })
}

/// Deterministic pull-back with the residual of the limit's integral
/// identity `Φ(t2)(τ) − Φ(t1)(τ) = ∫_{t1+τ}^{t2+τ} (b + σv)`.
#[derive(Debug, Clone)]
pub struct SkeletonPullback {
    pub run: PullbackRun,
    pub residual_max: f64,
    pub residual_tol: f64,
    pub residual_ok: bool,
    pub n_triples: usize,
}

pub fn skeleton_pullback(
    model: &CoefficientModel,
    xi: &Segment,
    v: Option<&Control>,
    window: (f64, f64),
    n_list: &[f64],
    cfg: &SimConfig,
) -> Result<SkeletonPullback> {
    let run = run_starts(model, xi, 0.0, v, window, n_list, cfg, None)?;
    let deepest = run.runs.last().expect("at least two runs");
    let compiled = model.compile(deepest.params())?;
    let (d, m, h) = (model.d(), model.m(), cfg.h);
    let n_pts = deepest.n_points();
    // Vector field on each interval [t_k, t_{k+1}] at both ends, with the
    // interval's control.
    let cells = control_cells(model, v, &cfg.with_span(deepest.t0(), deepest.t_end()))?;
    let mut f_left = vec![0.0; (n_pts - 1) * d];
    let mut f_right = vec![0.0; (n_pts - 1) * d];
    let mut b = vec![0.0; d];
    let mut sig = vec![0.0; d * m];
    let mut scratch = vec![0.0; d];
    let mut eval = |k: usize, u: Option<&[f64]>, out: &mut [f64]| {
        let view = deepest.view_at(k);
        compiled.drift_into(&view, &mut b, &mut scratch);
        out.copy_from_slice(&b);
        if let Some(u) = u {
            compiled.diffusion_into(&view as &dyn History, &mut sig, &mut scratch);
            for i in 0..d {
                for j in 0..m {
                    out[i] += sig[i * m + j] * u[j];
                }
            }
        }
    };
    for k in 0..n_pts - 1 {
        let u = cells.as_ref().map(|c| &c[k * m..(k + 1) * m]);
        eval(k, u, &mut f_left[k * d..(k + 1) * d]);
        eval(k + 1, u, &mut f_right[k * d..(k + 1) * d]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_window = ((window.1 - window.0) / h).round() as usize;
    let k_win = deepest.index_of(window.0)?;
    let n_triples = 64;
    let mut residual_max = 0.0f64;
    for _ in 0..n_triples {
        let (mut i1, mut i2) = (rng.random_range(0..=steps_window), rng.random_range(0..=steps_window));
        if i1 > i2 {
            std::mem::swap(&mut i1, &mut i2);
        }
        let max_lag = (k_win + i1).min((1.0 / h).round() as usize);
        let lag = rng.random_range(0..=max_lag);
        let a = k_win + i1 - lag;
        let c = k_win + i2 - lag;
        let mut res = vec![0.0; d];
        for i in 0..d {
            res[i] = deepest.state(c)[i] - deepest.state(a)[i];
        }
        for k in a..c {
            for i in 0..d {
                res[i] -= 0.5 * h * (f_left[k * d + i] + f_right[k * d + i]);
            }
        }
        residual_max = residual_max.max(crate::fading_memory::euclid(&res));
    }
    let residual_tol = 5.0 * h;
    Ok(SkeletonPullback {
        run,
        residual_max,
        residual_tol,
        residual_ok: residual_max <= residual_tol,
        n_triples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsPullback {
    pub eps: f64,
    pub n_list: Vec<f64>,
    /// Replica mean of the squared sup differences.
    pub mean_sq_diffs: Vec<f64>,
    /// Decay rate of `mean_sq_diffs` in `n` (squared-norm convention).
    pub fitted_rate: Option<f64>,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformPullbackReport {
    pub per_eps: Vec<EpsPullback>,
    pub min_rate: Option<f64>,
    pub eps0: f64,
    pub lambda_max: f64,
}

/// Controlled pull-back for each `eps`, averaged over replicas; the
/// smallest fitted rate is the uniform lower bound across `eps`.
#[allow(clippy::too_many_arguments)]
pub fn controlled_pullback_uniform(
    model: &CoefficientModel,
    xi: &Segment,
    eps_list: &[f64],
    v: Option<&Control>,
    window: (f64, f64),
    n_list: &[f64],
    cfg: &SimConfig,
    n_replicas: usize,
) -> Result<UniformPullbackReport> {
    let rep = dissipativity_report(model, xi.params().r, 0.0, 1, cfg.seed)?;
    if n_replicas < 1 {
        return Err(FadeError::InvalidParams("need at least one replica".into()));
    }
    let mut per_eps = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        if eps > 0.0 && eps >= rep.eps0 {
            return Err(FadeError::InvalidParams(format!(
                "eps = {eps} is not below the admissible bound {}",
                rep.eps0
            )));
        }
        let reps = if eps == 0.0 { 1 } else { n_replicas };
        let sups = replicate(reps, |i| {
            let run = if eps == 0.0 {
                run_starts(model, xi, 0.0, v, window, n_list, cfg, None)?
            } else {
                pullback_on_stream(model, xi, eps, v, window, n_list, cfg, cfg.seed, i as u64)?
            };
            Ok(run.sup_diffs)
        })?;
        let np = n_list.len() - 1;
        let mean_sq: Vec<f64> = (0..np)
            .map(|j| sups.iter().map(|s| s[j] * s[j]).sum::<f64>() / reps as f64)
            .collect();
        let (x, y): (Vec<f64>, Vec<f64>) = n_list
            .iter()
            .zip(&mean_sq)
            .filter(|(_, d)| **d > 1e-300)
            .map(|(n, d)| (*n, d.ln()))
            .unzip();
        let fit = if x.len() >= 2 { fit_line(&x, &y).ok() } else { None };
        per_eps.push(EpsPullback {
            eps,
            n_list: n_list.to_vec(),
            mean_sq_diffs: mean_sq,
            fitted_rate: fit.map(|f| -f.slope),
            r2: fit.map(|f| f.r2),
        });
    }
    let min_rate = per_eps
        .iter()
        .map(|p| p.fitted_rate)
        .try_fold(f64::INFINITY, |acc, r| r.map(|r| acc.min(r)));
    Ok(UniformPullbackReport {
        per_eps,
        min_rate,
        eps0: rep.eps0,
        lambda_max: rep.lambda_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fading_memory::{DelayMeasure, MemoryParams};
    use crate::model::Nonlinearity;

    fn linear(a: f64) -> CoefficientModel {
        CoefficientModel::scalar(a, 0.0, Nonlinearity::Zero, 1.0, 0.0, DelayMeasure::atom(0.0), DelayMeasure::atom(0.0))
            .unwrap()
    }

    #[test]
    fn deterministic_linear_rate() {
        let h = 0.005;
        let p = MemoryParams::new(1.0, h, 1.0, 1e-6).unwrap();
        let xi = Segment::constant(p, 0.0, &[1.0]).unwrap();
        let cfg = SimConfig::new(h, 0.0, 1.0);
        let run = pullback_solve(&linear(0.5), &xi, 0.0, (0.0, 1.0), &[2.0, 4.0, 6.0, 8.0], &cfg, 1).unwrap();
        let rate = run.fitted_rate.unwrap();
        assert!((rate - 0.5).abs() < 0.005, "rate {rate}");
    }

    #[test]
    fn identical_starts_are_rejected_and_equal_runs_agree() {
        let h = 0.01;
        let p = MemoryParams::new(1.0, h, 1.0, 1e-6).unwrap();
        let xi = Segment::constant(p, 0.0, &[1.0]).unwrap();
        let cfg = SimConfig::new(h, 0.0, 1.0);
        assert!(pullback_solve(&linear(1.0), &xi, 0.1, (0.0, 1.0), &[2.0, 2.0], &cfg, 1).is_err());
        let a = pullback_solve(&linear(1.0), &xi, 0.1, (0.0, 1.0), &[2.0, 3.0], &cfg, 1).unwrap();
        let b = pullback_solve(&linear(1.0), &xi, 0.1, (0.0, 1.0), &[2.0, 3.0], &cfg, 1).unwrap();
        assert_eq!(a.runs[0], b.runs[0]);
        let d = history_distances(&a.runs[0], &b.runs[0], &a.times).unwrap();
        assert!(d.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn deterministic_stationarity_is_a_point_mass() {
        let h = 0.01;
        let p = MemoryParams::new(1.0, h, 0.5, 1e-6).unwrap();
        let xi = Segment::zeros(p, 0.0, 1).unwrap();
        let cfg = SimConfig::new(h, 0.0, 1.0);
        let mut opts = StationarityOptions::new(4.0, vec![0.0, 1.0], 100, 0.01, 3);
        opts.energy_subsample = 20;
        opts.energy_permutations = 19;
        let rep = stationarity_test(&linear(1.0), &xi, 0.0, &cfg, &opts).unwrap();
        assert!(rep.pairs_pass());
        assert_eq!(rep.pairs[0].ks[0].statistic, 0.0);
        assert_eq!(rep.pairs[0].energy.statistic, 0.0);
        assert!(rep.marginals.iter().all(|m| m.var[0] == 0.0));
        opts.n_replicas = 99;
        assert!(stationarity_test(&linear(1.0), &xi, 0.0, &cfg, &opts).is_err());
    }
}
