//! Affine-plus-bounded drift and affine diffusion functionals with
//! certified dissipativity constants.
//!
//! ```text
//! b(φ) = −A φ(0) + B ∫ φ(τ) μ1(dτ) + f(φ(0))
//! σ(φ) = Σ0 + Σ1 · ∫ φ(τ) μ2(dτ)
//! ```

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FadeError, Result};
use crate::fading_memory::{
    choose_window, euclid, DelayMeasure, DelayStencil, History, MemoryParams, Segment,
};

/// Bounded, globally Lipschitz nonlinearity applied componentwise to φ(0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Nonlinearity {
    Zero,
    /// `scale · tanh(x)`
    Tanh { scale: f64 },
    /// `scale · clamp(x, −cap, cap)³`
    SaturatedCubic { scale: f64, cap: f64 },
}

impl Nonlinearity {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Tanh { scale } => scale * x.tanh(),
            Nonlinearity::SaturatedCubic { scale, cap } => {
                let c = x.clamp(-cap, cap);
                scale * c * c * c
            }
        }
    }

    /// Global Lipschitz constant.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Tanh { scale } => scale.abs(),
            Nonlinearity::SaturatedCubic { scale, cap } => 3.0 * scale.abs() * cap * cap,
        }
    }

    /// Smallest `L ≥ 0` with `(x − y)(f(x) − f(y)) ≤ L (x − y)²`.
    pub fn one_sided_lipschitz(&self) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Tanh { scale } => scale.max(0.0),
            Nonlinearity::SaturatedCubic { scale, cap } => (3.0 * scale * cap * cap).max(0.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Nonlinearity::Zero => true,
            Nonlinearity::Tanh { scale } => scale.is_finite(),
            Nonlinearity::SaturatedCubic { scale, cap } => {
                scale.is_finite() && cap.is_finite() && cap > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(FadeError::InvalidParams(format!("bad nonlinearity {self:?}")))
        }
    }
}

/// Drift and diffusion coefficients of the equation.
#[derive(Debug, Clone)]
pub struct CoefficientModel {
    d: usize,
    m: usize,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    f: Nonlinearity,
    sigma0: DMatrix<f64>,
    /// `Σ1 · x = Σ_k x_k S_k` with each `S_k` of shape d×m.
    sigma1: Vec<DMatrix<f64>>,
    mu1: DelayMeasure,
    mu2: DelayMeasure,
    lambda_min_a_sym: f64,
    norm_a: f64,
    norm_b: f64,
    norm_sigma1: f64,
}

impl CoefficientModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        f: Nonlinearity,
        sigma0: DMatrix<f64>,
        sigma1: Vec<DMatrix<f64>>,
        mu1: DelayMeasure,
        mu2: DelayMeasure,
    ) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return Err(FadeError::InvalidParams("A must be a non-empty square matrix".into()));
        }
        if b.shape() != (d, d) {
            return Err(FadeError::InvalidParams(format!("B must be {d}×{d}")));
        }
        let m = sigma0.ncols();
        if sigma0.nrows() != d || m == 0 {
            return Err(FadeError::InvalidParams(format!("Σ0 must be {d}×m with m ≥ 1")));
        }
        if sigma1.len() != d || sigma1.iter().any(|s| s.shape() != (d, m)) {
            return Err(FadeError::InvalidParams(format!(
                "Σ1 must consist of {d} matrices of shape {d}×{m}"
            )));
        }
        let finite = |x: &DMatrix<f64>| x.iter().all(|v| v.is_finite());
        if !finite(&a) || !finite(&b) || !finite(&sigma0) || !sigma1.iter().all(finite) {
            return Err(FadeError::InvalidParams("non-finite coefficient".into()));
        }
        f.validate()?;
        mu1.validate()?;
        mu2.validate()?;
        let a_sym = (&a + a.transpose()) * 0.5;
        let lambda_min_a_sym = a_sym.symmetric_eigenvalues().min();
        if !(lambda_min_a_sym > 0.0) {
            return Err(FadeError::InvalidParams(format!(
                "A must be positive definite (smallest eigenvalue of its symmetric part is {lambda_min_a_sym})"
            )));
        }
        let norm_a = spectral_norm(&a);
        let norm_b = spectral_norm(&b);
        // Σ1 as a (d·m)×d matrix: column k is vec(S_k).
        let mut stacked = DMatrix::zeros(d * m, d);
        for (k, s) in sigma1.iter().enumerate() {
            for (i, v) in s.iter().enumerate() {
                stacked[(i, k)] = *v;
            }
        }
        let norm_sigma1 = spectral_norm(&stacked);
        Ok(CoefficientModel {
            d,
            m,
            a,
            b,
            f,
            sigma0,
            sigma1,
            mu1,
            mu2,
            lambda_min_a_sym,
            norm_a,
            norm_b,
            norm_sigma1,
        })
    }

    /// One-dimensional model `b = −aφ(0) + b∫φdμ1 + f`, `σ = s0 + s1∫φdμ2`.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(
        a: f64,
        b: f64,
        f: Nonlinearity,
        s0: f64,
        s1: f64,
        mu1: DelayMeasure,
        mu2: DelayMeasure,
    ) -> Result<Self> {
        CoefficientModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            f,
            DMatrix::from_element(1, 1, s0),
            vec![DMatrix::from_element(1, 1, s1)],
            mu1,
            mu2,
        )
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.f
    }

    pub fn sigma0(&self) -> &DMatrix<f64> {
        &self.sigma0
    }

    pub fn sigma1(&self) -> &[DMatrix<f64>] {
        &self.sigma1
    }

    pub fn mu1(&self) -> &DelayMeasure {
        &self.mu1
    }

    pub fn mu2(&self) -> &DelayMeasure {
        &self.mu2
    }

    /// True when σ does not depend on the state.
    pub fn additive_noise(&self) -> bool {
        self.norm_sigma1 == 0.0
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda_min_a_sym - self.norm_b / 2.0 - self.f.one_sided_lipschitz()
    }

    pub fn lambda2(&self) -> f64 {
        self.norm_b / 2.0
    }

    pub fn lambda3(&self) -> f64 {
        self.norm_sigma1 * self.norm_sigma1
    }

    /// `2λ1 − 2λ2 μ1^{(2r)} − ε λ3 μ2^{(2r)}`.
    pub fn margin(&self, r: f64, eps: f64) -> Result<f64> {
        let m1 = self.mu1.moment(2.0 * r)?;
        let m2 = self.mu2.moment(2.0 * r)?;
        Ok(2.0 * self.lambda1() - 2.0 * self.lambda2() * m1 - eps * self.lambda3() * m2)
    }

    /// Refuses models whose dissipativity margin is not positive.
    pub fn ensure_stable(&self, r: f64, eps: f64) -> Result<()> {
        let margin = self.margin(r, eps)?;
        if margin > 0.0 {
            Ok(())
        } else {
            Err(FadeError::UnstableModel { margin, eps })
        }
    }

    /// Global Lipschitz constant of `b` in `‖·‖_r`, valid on every ball.
    pub fn drift_lipschitz(&self, r: f64) -> Result<f64> {
        Ok(self.norm_a + self.norm_b * self.mu1.moment(r)? + self.f.lipschitz())
    }

    /// Default grid step: `min(0.01, deepest atom / 10)`.
    pub fn default_step(&self) -> f64 {
        let deepest = self.mu1.deepest_atom().max(self.mu2.deepest_atom());
        if deepest > 0.0 {
            0.01f64.min(deepest / 10.0)
        } else {
            0.01
        }
    }

    pub(crate) fn compile(&self, params: &MemoryParams) -> Result<CompiledModel> {
        CompiledModel::new(self, params)
    }

    pub fn eval_drift(&self, seg: &Segment) -> Result<Vec<f64>> {
        self.check_dim(seg)?;
        let c = self.compile(seg.params())?;
        let mut out = vec![0.0; self.d];
        let mut scratch = vec![0.0; self.d];
        c.drift_into(seg, &mut out, &mut scratch);
        Ok(out)
    }

    pub fn eval_diffusion(&self, seg: &Segment) -> Result<DMatrix<f64>> {
        self.check_dim(seg)?;
        let c = self.compile(seg.params())?;
        let mut out = vec![0.0; self.d * self.m];
        let mut scratch = vec![0.0; self.d];
        c.diffusion_into(seg, &mut out, &mut scratch);
        Ok(DMatrix::from_row_slice(self.d, self.m, &out))
    }

    fn check_dim(&self, seg: &Segment) -> Result<()> {
        if seg.dim() != self.d {
            return Err(FadeError::DimensionMismatch {
                expected: self.d,
                got: seg.dim(),
            });
        }
        Ok(())
    }
}

fn spectral_norm(x: &DMatrix<f64>) -> f64 {
    if x.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    x.clone().svd(false, false).singular_values.max()
}

/// A model bound to a memory grid, evaluated without allocation.
#[derive(Debug, Clone)]
pub(crate) struct CompiledModel {
    pub(crate) d: usize,
    pub(crate) m: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    b_zero: bool,
    f: Nonlinearity,
    sigma0: Vec<f64>,
    /// `sigma1[k]` row-major d×m.
    sigma1: Vec<Vec<f64>>,
    additive: bool,
    mu1: DelayStencil,
    mu2: DelayStencil,
}

impl CompiledModel {
    fn new(model: &CoefficientModel, params: &MemoryParams) -> Result<Self> {
        let row_major = |x: &DMatrix<f64>| -> Vec<f64> {
            let mut v = Vec::with_capacity(x.len());
            for i in 0..x.nrows() {
                for j in 0..x.ncols() {
                    v.push(x[(i, j)]);
                }
            }
            v
        };
        Ok(CompiledModel {
            d: model.d,
            m: model.m,
            a: row_major(&model.a),
            b: row_major(&model.b),
            b_zero: model.norm_b == 0.0,
            f: model.f,
            sigma0: row_major(&model.sigma0),
            sigma1: model.sigma1.iter().map(row_major).collect(),
            additive: model.additive_noise(),
            mu1: DelayStencil::new(&model.mu1, params)?,
            mu2: DelayStencil::new(&model.mu2, params)?,
        })
    }

    pub(crate) fn additive(&self) -> bool {
        self.additive
    }

    /// `b(φ)`; `scratch` has length d.
    #[inline]
    pub(crate) fn drift_into<H: History + ?Sized>(&self, hist: &H, out: &mut [f64], scratch: &mut [f64]) {
        let d = self.d;
        let head = hist.grid_value(0);
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc -= self.a[i * d + j] * head[j];
            }
            out[i] = acc + self.f.eval(head[i]);
        }
        if !self.b_zero {
            self.mu1.linear(hist, scratch);
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += self.b[i * d + j] * scratch[j];
                }
                out[i] += acc;
            }
        }
    }

    /// `σ(φ)` row-major d×m.
    #[inline]
    pub(crate) fn diffusion_into<H: History + ?Sized>(
        &self,
        hist: &H,
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        out.copy_from_slice(&self.sigma0);
        if self.additive {
            return;
        }
        self.mu2.linear(hist, scratch);
        for (k, s) in self.sigma1.iter().enumerate() {
            let x = scratch[k];
            if x != 0.0 {
                for (o, v) in out.iter_mut().zip(s) {
                    *o += x * v;
                }
            }
        }
    }

    pub(crate) fn square_mu1<H: History + ?Sized>(&self, hist: &H) -> f64 {
        self.mu1.square(hist)
    }

    pub(crate) fn square_mu2<H: History + ?Sized>(&self, hist: &H) -> f64 {
        self.mu2.square(hist)
    }
}

/// Analytic and sampled dissipativity constants of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipativityReport {
    pub r: f64,
    pub eps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub mu1_2r: f64,
    pub mu2_2r: f64,
    pub margin: f64,
    pub lambda_max: f64,
    pub eps0: f64,
    pub stable: bool,
    /// Largest λ1 consistent with every sampled pair given the analytic λ2.
    pub empirical_lambda1: f64,
    /// Smallest λ2 consistent with every sampled pair given the analytic λ1.
    pub empirical_lambda2: f64,
    /// Smallest λ3 consistent with every sampled pair.
    pub empirical_lambda3: f64,
    /// Largest sampled `|b(φ) − b(ϕ)| / ‖φ − ϕ‖_r`.
    pub empirical_lipschitz: f64,
    pub lipschitz_bound: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl DissipativityReport {
    pub fn margin_at(&self, eps: f64) -> f64 {
        2.0 * self.lambda1 - 2.0 * self.lambda2 * self.mu1_2r - eps * self.lambda3 * self.mu2_2r
    }

    pub fn stable_at(&self, eps: f64) -> bool {
        self.margin_at(eps) > 0.0
    }

    pub fn lambda_max_at(&self, eps: f64) -> f64 {
        self.margin_at(eps).min(2.0 * self.r)
    }
}

/// Random segment pair sampler used for the empirical constants.
pub(crate) fn random_segment(
    rng: &mut ChaCha8Rng,
    params: &MemoryParams,
    dim: usize,
    amplitude: f64,
) -> Result<Segment> {
    let n = params.n_lags();
    let r = params.r;
    let h = params.h;
    let mut values = vec![0.0; (n + 1) * dim];
    if rng.random_bool(0.5) {
        // rough: independent values inside the weighted ball
        for j in 0..=n {
            let w = (r * j as f64 * h).exp() * amplitude / (dim as f64).sqrt();
            for i in 0..dim {
                values[j * dim + i] = w * rng.random_range(-1.0..=1.0);
            }
        }
    } else {
        // smooth: a few random sinusoids times a random exponential
        let freq: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..6.0)).collect();
        let phase: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..6.3)).collect();
        let growth = rng.random_range(0.0..r);
        for j in 0..=n {
            let t = -(j as f64) * h;
            for i in 0..dim {
                values[j * dim + i] =
                    amplitude / (dim as f64).sqrt() * (-growth * t).exp() * (freq[i] * t + phase[i]).sin();
            }
        }
    }
    let decay = (-r * params.window).exp();
    let tail = values[n * dim..].iter().map(|v| v * decay).collect();
    Segment::new(*params, 0.0, dim, values, tail)
}

/// Analytic constants plus sampled quotients over `n_samples` random pairs.
pub fn dissipativity_report(
    model: &CoefficientModel,
    r: f64,
    eps: f64,
    n_samples: usize,
    seed: u64,
) -> Result<DissipativityReport> {
    if n_samples < 1 {
        return Err(FadeError::InvalidParams("n_samples must be at least 1".into()));
    }
    let mu1_2r = model.mu1.moment(2.0 * r)?;
    let mu2_2r = model.mu2.moment(2.0 * r)?;
    let lambda1 = model.lambda1();
    let lambda2 = model.lambda2();
    let lambda3 = model.lambda3();
    let margin = 2.0 * lambda1 - 2.0 * lambda2 * mu1_2r - eps * lambda3 * mu2_2r;
    let eps0 = if lambda3 * mu2_2r == 0.0 {
        1.0
    } else {
        ((2.0 * lambda1 - 2.0 * lambda2 * mu1_2r) / (lambda3 * mu2_2r) - 1.0).min(1.0)
    };

    let h = model.default_step().min(0.02);
    let deepest = model.mu1.deepest_atom().max(model.mu2.deepest_atom());
    let window = choose_window(r, h, 1.0, &[&model.mu1, &model.mu2], 1e-10)?.max(deepest);
    let params = MemoryParams::aligned(r, h, window, 1e-6)?;
    let compiled = model.compile(&params)?;
    let d = model.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut emp1 = f64::INFINITY;
    let mut emp2 = f64::NEG_INFINITY;
    let mut emp3 = f64::NEG_INFINITY;
    let mut emp_lip = 0.0f64;
    let mut b1 = vec![0.0; d];
    let mut b2 = vec![0.0; d];
    let mut s1 = vec![0.0; d * model.m];
    let mut s2 = vec![0.0; d * model.m];
    let mut scratch = vec![0.0; d];
    for _ in 0..n_samples {
        let amp = rng.random_range(0.01..5.0);
        let x = random_segment(&mut rng, &params, d, amp)?;
        let y = if rng.random_bool(0.3) {
            let z = random_segment(&mut rng, &params, d, amp * 1e-2)?;
            x.add(&z)?
        } else {
            let amp2 = rng.random_range(0.01..5.0);
            random_segment(&mut rng, &params, d, amp2)?
        };
        let diff = x.sub(&y)?;
        compiled.drift_into(&x, &mut b1, &mut scratch);
        compiled.drift_into(&y, &mut b2, &mut scratch);
        compiled.diffusion_into(&x, &mut s1, &mut scratch);
        compiled.diffusion_into(&y, &mut s2, &mut scratch);
        let d0 = diff.head();
        let q: f64 = d0.iter().zip(b1.iter().zip(&b2)).map(|(u, (p, s))| u * (p - s)).sum();
        let n0: f64 = d0.iter().map(|v| v * v).sum();
        let i1 = compiled.square_mu1(&diff);
        let i2 = compiled.square_mu2(&diff);
        if n0 > 0.0 {
            emp1 = emp1.min((lambda2 * i1 - q) / n0);
        }
        if i1 > 0.0 {
            emp2 = emp2.max((q + lambda1 * n0) / i1);
        }
        let ds: f64 = s1.iter().zip(&s2).map(|(p, s)| (p - s) * (p - s)).sum();
        if i2 > 0.0 {
            emp3 = emp3.max(ds / i2);
        }
        let norm = diff.cr_norm();
        if norm > 0.0 {
            let db: Vec<f64> = b1.iter().zip(&b2).map(|(p, s)| p - s).collect();
            emp_lip = emp_lip.max(euclid(&db) / norm);
        }
    }
    Ok(DissipativityReport {
        r,
        eps,
        lambda1,
        lambda2,
        lambda3,
        mu1_2r,
        mu2_2r,
        margin,
        lambda_max: margin.min(2.0 * r),
        eps0,
        stable: margin > 0.0,
        empirical_lambda1: emp1,
        empirical_lambda2: emp2.max(0.0),
        empirical_lambda3: emp3.max(0.0),
        empirical_lipschitz: emp_lip,
        lipschitz_bound: model.drift_lipschitz(r)?,
        n_samples,
        seed,
    })
}
