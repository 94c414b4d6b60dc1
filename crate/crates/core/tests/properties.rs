use fadeldp::config::RunConfig;
use fadeldp::fading_memory::{
    delay_integral_square, history_distances, measure_moment, DelayMeasure, ExpoPart, MemoryParams, PathOnGrid,
    Segment,
};
use fadeldp::model::{dissipativity_report, CoefficientModel, Nonlinearity};
use fadeldp::rate::direct_rate;
use fadeldp::simulate::{integrate_sfde, integrate_skeleton, SimConfig, StreamNoise};
use proptest::prelude::*;

fn params() -> MemoryParams {
    MemoryParams::new(1.0, 0.1, 1.0, 1e-9).unwrap()
}

/// Values inside the weighted unit-ish ball with a tail no larger than the
/// last grid value allows.
fn segment() -> impl Strategy<Value = Segment> {
    let n = params().n_lags() + 1;
    (prop::collection::vec(-3.0..3.0f64, n), 0.0..=1.0f64, -2.0..2.0f64).prop_map(move |(raw, frac, t)| {
        let p = params();
        let values: Vec<f64> = raw.iter().enumerate().map(|(j, v)| v * (p.r * p.lag(j).abs()).exp()).collect();
        let tail = vec![values[n - 1] * (-p.r * p.window).exp() * frac];
        Segment::new(p, (t / p.h).round() * p.h, 1, values, tail).unwrap()
    })
}

fn path() -> impl Strategy<Value = PathOnGrid> {
    (segment(), prop::collection::vec(-1.0..1.0f64, 40)).prop_map(|(xi, steps)| {
        let mut states = vec![xi.head()[0]];
        for s in steps {
            let last = *states.last().unwrap();
            states.push(last + s);
        }
        PathOnGrid::from_states(xi, states).unwrap()
    })
}

fn measure() -> impl Strategy<Value = DelayMeasure> {
    let n = params().n_lags();
    prop_oneof![
        (0..=n, 0..=n, 0.0..=1.0f64).prop_map(|(j1, j2, w)| {
            let h = params().h;
            DelayMeasure::new(vec![(-(j1 as f64) * h, w), (-(j2 as f64) * h, 1.0 - w)], None).unwrap()
        }),
        (2.5..8.0f64, 0.0..1.0f64).prop_map(|(beta, w)| {
            DelayMeasure::new(vec![(0.0, w)], Some(ExpoPart { mass: 1.0 - w, beta })).unwrap()
        }),
    ]
}

fn stable_model() -> impl Strategy<Value = CoefficientModel> {
    (1.0..3.0f64, -0.4..0.4f64, 0.0..0.5f64, 0.1..1.0f64, 0.0..0.2f64, 0usize..=10).prop_map(
        |(a, b, tanh, s0, s1, lag)| {
            CoefficientModel::scalar(
                a,
                b,
                Nonlinearity::Tanh { scale: tanh },
                s0,
                s1,
                DelayMeasure::atom(-(lag as f64) * params().h),
                DelayMeasure::exponential(6.0),
            )
            .unwrap()
        },
    )
    .prop_filter("positive margin", |m| m.margin(1.0, 0.1).is_ok_and(|x| x > 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn norm_is_a_norm(x in segment(), y in segment(), c in -4.0..4.0f64) {
        let y = y.at_time(x.head_time());
        prop_assert!(x.cr_norm() >= 0.0);
        prop_assert!((x.scale(c).cr_norm() - c.abs() * x.cr_norm()).abs() <= 1e-12 * (1.0 + x.cr_norm()));
        let sum = x.add(&y).unwrap();
        prop_assert!(sum.cr_norm() <= x.cr_norm() + y.cr_norm() + 1e-12);
        prop_assert_eq!(x.sub(&x).unwrap().cr_norm(), 0.0);
    }

    #[test]
    fn shift_bound_on_paths(p in path(), i in 0usize..41, j in 0usize..41) {
        let (t, big_t) = (i.min(j), i.max(j));
        let dt = (big_t - t) as f64 * p.h();
        let lhs = p.norm_at_index(t).powi(2);
        let rhs = (2.0 * dt).exp() * p.norm_at_index(big_t).powi(2);
        prop_assert!(lhs <= rhs * (1.0 + 1e-12));
    }

    #[test]
    fn split_bound_on_paths(p in path(), k in 0usize..41, lambda in 0.01..=2.0f64) {
        let t = p.time(k);
        let sup = (0..=k)
            .map(|j| (lambda * (p.time(j) - t)).exp() * p.state(j)[0].powi(2))
            .fold(0.0, f64::max);
        let rhs = (-2.0 * (t - p.t0())).exp() * p.norm_at_index(0).powi(2) + sup;
        prop_assert!(p.norm_at_index(k).powi(2) <= rhs * (1.0 + 1e-12));
    }

    #[test]
    fn integral_inequality(p in path(), mu in measure(), lambda in 0.01..1.99f64) {
        let h = p.h();
        let m2r = measure_moment(&mu, 2.0).unwrap();
        let (mut lhs, mut inner) = (0.0, 0.0);
        for j in 0..p.n_points() - 1 {
            let w = (lambda * (p.time(j) - p.t0())).exp();
            lhs += h * w * delay_integral_square(&p.segment_at_index(j), &mu).unwrap();
            inner += h * w * p.state(j)[0].powi(2);
        }
        let c = 2.0 - lambda;
        let riemann = c * h / (1.0 - (-c * h).exp());
        let rhs = m2r / c * p.norm_at_index(0).powi(2) * riemann + m2r * inner;
        prop_assert!(lhs <= rhs * (1.0 + 2.0 * h) + 1e-12, "{} > {}", lhs, rhs);
    }

    #[test]
    fn moments_increase_with_kappa(mu in measure(), k1 in 0.0..2.4f64, k2 in 0.0..2.4f64) {
        let (lo, hi) = (k1.min(k2), k1.max(k2));
        let (a, b) = (measure_moment(&mu, lo).unwrap(), measure_moment(&mu, hi).unwrap());
        prop_assert!(a >= 1.0 - 1e-12 && a <= b * (1.0 + 1e-12));
        prop_assert!((measure_moment(&mu, 0.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn segments_agree_with_path_states(p in path(), k in 0usize..41) {
        let seg = p.segment_at_index(k);
        prop_assert_eq!(seg.head(), p.state(k));
        let mut out = [0.0];
        for j in 0..=k.min(params().n_lags()) {
            seg.value_at_lag(-(j as f64) * p.h(), &mut out).unwrap();
            prop_assert_eq!(out[0], p.state(k - j)[0]);
        }
        prop_assert_eq!(p.norm_at_index(k), seg.cr_norm());
    }

    #[test]
    fn history_distance_dominates_pointwise_gap(p in path(), q in path()) {
        let q = PathOnGrid::from_states(q.initial().at_time(p.t0()), q.states().to_vec()).unwrap();
        let times: Vec<f64> = (0..p.n_points()).step_by(5).map(|k| p.time(k)).collect();
        let d = history_distances(&p, &q, &times).unwrap();
        for (t, dist) in times.iter().zip(d) {
            let k = p.index_of(*t).unwrap();
            prop_assert!(dist + 1e-12 >= (p.state(k)[0] - q.state(k)[0]).abs());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sampled_pairs_respect_analytic_constants(m in stable_model(), seed in 0u64..1000) {
        let rep = dissipativity_report(&m, 1.0, 0.0, 200, seed).unwrap();
        prop_assert!(rep.empirical_lambda1 >= rep.lambda1 - 1e-9);
        prop_assert!(rep.empirical_lambda2 <= rep.lambda2 + 1e-9);
        prop_assert!(rep.empirical_lambda3 <= rep.lambda3 + 1e-9);
        prop_assert!(rep.empirical_lipschitz <= rep.lipschitz_bound + 1e-9);
    }

    #[test]
    fn restart_is_bit_exact(m in stable_model(), seed in 0u64..1000, cut in 1usize..20) {
        let h = params().h;
        let xi = Segment::constant(params(), 0.0, &[0.5]).unwrap();
        let noise = StreamNoise::new(h, 1, seed, 3).unwrap();
        let eps = 0.1;
        let full = integrate_sfde(&m, &xi, eps, &SimConfig::new(h, 0.0, 2.0), &noise).unwrap();
        let t1 = cut as f64 * h;
        let first = integrate_sfde(&m, &xi, eps, &SimConfig::new(h, 0.0, t1), &noise).unwrap();
        let mid = first.segment_at_index(first.n_points() - 1);
        let second = integrate_sfde(&m, &mid, eps, &SimConfig::new(h, t1, 2.0), &noise).unwrap();
        prop_assert_eq!(second.states(), &full.states()[cut..]);
        let again = integrate_sfde(&m, &xi, eps, &SimConfig::new(h, 0.0, 2.0), &noise).unwrap();
        prop_assert_eq!(again, full);
    }

    #[test]
    fn direct_rate_is_nonnegative_and_quadratic(c in 0.1..3.0f64, steps in prop::collection::vec(-0.5..0.5f64, 20)) {
        let m = CoefficientModel::scalar(1.0, 0.0, Nonlinearity::Zero, 1.0, 0.0, DelayMeasure::atom(0.0), DelayMeasure::atom(0.0)).unwrap();
        let xi = Segment::zeros(params(), 0.0, 1).unwrap();
        let mut states = vec![0.0];
        for s in &steps {
            let last = *states.last().unwrap();
            states.push(last + s);
        }
        let phi = PathOnGrid::from_states(xi.clone(), states.clone()).unwrap();
        let scaled = PathOnGrid::from_states(xi, states.iter().map(|v| c * v).collect()).unwrap();
        let (a, b) = (direct_rate(&m, &phi).unwrap(), direct_rate(&m, &scaled).unwrap());
        prop_assert!(a.value >= 0.0);
        prop_assert!((b.value - c * c * a.value).abs() <= 1e-9 * (1.0 + b.value));
        // the returned control reproduces the path
        let replay = integrate_skeleton(&m, phi.initial(), Some(&a.control), &SimConfig::new(params().h, 0.0, 2.0)).unwrap();
        for (x, y) in replay.states().iter().zip(phi.states()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), eps in 0.01..1.0f64, t_end in 0.5..5.0f64) {
        let text = format!(
            "seed = {seed}\nscenario = \"delay-ou\"\n[experiment]\nkind = \"simulate\"\neps = {eps}\nt_end = {t_end}\n"
        );
        let cfg = RunConfig::from_toml(&text).unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}
