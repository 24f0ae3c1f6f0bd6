use censorlab::metrics::{compare_arms, mode_occupancy, wilson, ArmReport, Proportion, TrialReport};
use censorlab::mixture::{presets, Component, Label, LabeledMixture};
use censorlab::nn::{Example, Head, Loss, Mlp};
use censorlab::reward::{ExactReward, RewardEnsemble, RewardNet};
use censorlab::sampler::{
    guided_eps_timedep, reverse_drift, reverse_step, AnalyticEps, GuidanceConfig, NoisePredictor, Sampler,
};
use censorlab::schedule::{DiffusionGrid, Level, NoiseSchedule};
use proptest::prelude::*;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::default()
}

/// Composite Gauss–Legendre (5 point) quadrature of β on [0, t].
fn quad_beta(s: &NoiseSchedule, t: f64) -> f64 {
    const X: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let panels = 16;
    let h = t / panels as f64;
    (0..panels)
        .map(|p| {
            let mid = (p as f64 + 0.5) * h;
            X.iter()
                .zip(&W)
                .map(|(x, w)| w * s.beta(mid + 0.5 * h * x).unwrap())
                .sum::<f64>()
                * 0.5
                * h
        })
        .sum()
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0..8.0f64, 2)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn alpha_bar_matches_quadrature(t in 0.0..1.0f64) {
        let s = schedule();
        let want = (-quad_beta(&s, t)).exp();
        prop_assert!((s.alpha_bar(t).unwrap() - want).abs() <= 1e-8);
    }

    #[test]
    fn forward_noise_is_affine(
        t in 0.0..1.0f64,
        a in -3.0..3.0f64,
        x0 in point(), x1 in point(), e0 in point(), e1 in point(),
    ) {
        let s = schedule();
        let comb = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(u, v)| a * u + (1.0 - a) * v).collect::<Vec<_>>();
        let lhs = s.forward_noise(&comb(&x0, &x1), t, &comb(&e0, &e1)).unwrap();
        let rhs = comb(&s.forward_noise(&x0, t, &e0).unwrap(), &s.forward_noise(&x1, t, &e1).unwrap());
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - r).abs() <= 1e-12 * (1.0 + r.abs()));
        }
        let clean = s.forward_noise(&x0, t, &[0.0, 0.0]).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm(&clean) - s.alpha_bar(t).unwrap().sqrt() * norm(&x0)).abs() <= 1e-12 * (1.0 + norm(&x0)));
    }

    #[test]
    fn censoring_identity_in_log_domain(x in point(), t in 0.0..1.0f64) {
        let s = schedule();
        for world in [presets::benign_dominant(), presets::malign_dominant(), presets::bedroom_like()] {
            let benign = world.censored_reference();
            let lhs = world.log_density_t(&x, t, &s).unwrap() + world.log_reward_exact_t(&x, t, &s).unwrap();
            let rhs = benign.log_density_t(&x, t, &s).unwrap() + world.benign_mass().ln();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn relabeling_components_changes_nothing(x in point(), t in 0.0..1.0f64, shift in 1usize..5) {
        let s = schedule();
        let world = presets::benign_dominant();
        let mut comps = world.components().to_vec();
        comps.rotate_left(shift);
        let permuted = LabeledMixture::new(comps).unwrap();
        prop_assert!(rel_err(&permuted.score_t(&x, t, &s).unwrap(), &world.score_t(&x, t, &s).unwrap()) <= 1e-12);
        let (a, b) = (permuted.reward_exact_t(&x, t, &s).unwrap(), world.reward_exact_t(&x, t, &s).unwrap());
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn exact_reward_strictly_inside_unit_interval(x in prop::collection::vec(-4.0..4.0f64, 2), t in 0.0..1.0f64) {
        let s = schedule();
        // r rounds to 1.0 in f64 deep inside a benign mode, so strictness is
        // checked on log r.
        let log_r = presets::symmetric_pair().log_reward_exact_t(&x, t, &s).unwrap();
        prop_assert!(log_r < 0.0 && log_r.is_finite());
    }

    #[test]
    fn ensemble_product_bounded_and_monotone(x in point(), t in 0.0..1.0f64, seed in 0u64..1000) {
        let members: Vec<RewardNet> = (0..3)
            .map(|k| RewardNet::new(Mlp::new(2, &[6], 1, Head::Sigmoid, true, 1.0, seed * 7 + k)).unwrap())
            .collect();
        let level = Level::at(&schedule(), t).unwrap();
        let ens = RewardEnsemble::new(members.clone()).unwrap();
        let p = ens.product(&x, level);
        let factors: Vec<f64> = members.iter().map(|m| m.reward(&x, level)).collect();
        prop_assert!(p > 0.0);
        prop_assert!(p <= factors.iter().cloned().fold(1.0, f64::min));
        // raising one factor's logit raises the product
        let mut boosted = members;
        let last = boosted[0].net.params.len() - 1;
        boosted[0].net.params[last] += 0.5;
        prop_assert!(RewardEnsemble::new(boosted).unwrap().product(&x, level) > p);
    }

    #[test]
    fn zero_weight_guidance_is_bit_identical(x in point(), k in 1usize..=1000) {
        let world = presets::symmetric_pair();
        let grid = DiffusionGrid::new(schedule(), 1000).unwrap();
        let eps = AnalyticEps::new(world.clone());
        let td = ExactReward { world: world.clone(), time_dependent: true };
        let ti = ExactReward { world, time_dependent: false };
        let level = grid.level(k);
        let plain = eps.eps(&x, level);
        let a = Sampler::guided(&eps, &grid, &td, GuidanceConfig::time_dependent(0.0)).unwrap();
        let b = Sampler::guided(&eps, &grid, &ti, GuidanceConfig::time_independent(0.0)).unwrap();
        prop_assert_eq!(a.guided_eps(&x, level).unwrap(), plain.clone());
        prop_assert_eq!(b.guided_eps(&x, level).unwrap(), plain);
    }

    #[test]
    fn exact_guidance_drift_equals_benign_drift(x in point(), k in 1usize..=1000) {
        let grid = DiffusionGrid::new(schedule(), 1000).unwrap();
        for world in [presets::symmetric_pair(), presets::benign_dominant(), presets::malign_dominant()] {
            let eps = AnalyticEps::new(world.clone());
            let benign = AnalyticEps::new(world.censored_reference());
            let reward = ExactReward { world, time_dependent: true };
            let level = grid.level(k);
            let beta = grid.schedule().beta(level.t).unwrap();
            let guided = guided_eps_timedep(eps.eps(&x, level), &x, level, &reward, 1.0);
            let a = reverse_drift(&guided, &x, level, beta);
            let b = reverse_drift(&benign.eps(&x, level), &x, level, beta);
            prop_assert!(rel_err(&a, &b) <= 1e-8, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn copy_ensemble_equals_scaled_single(x in point(), k in 1usize..=1000, omega in 0.0..10.0f64, seed in 0u64..1000) {
        let grid = DiffusionGrid::new(schedule(), 1000).unwrap();
        let eps = AnalyticEps::new(presets::benign_dominant());
        let net = RewardNet::new(Mlp::new(2, &[8, 8], 1, Head::Sigmoid, true, 1.0, seed)).unwrap();
        let ens = RewardEnsemble::new(vec![net.clone(); 5]).unwrap();
        let level = grid.level(k);
        let a = Sampler::guided(&eps, &grid, &ens, GuidanceConfig::time_dependent(omega)).unwrap();
        let b = Sampler::guided(&eps, &grid, &net, GuidanceConfig::time_dependent(5.0 * omega)).unwrap();
        prop_assert_eq!(a.guided_eps(&x, level).unwrap(), b.guided_eps(&x, level).unwrap());
    }

    #[test]
    fn wilson_bounds_stay_in_unit_interval(n in 1usize..5000, frac in 0.0..=1.0f64) {
        let k = ((n as f64) * frac).floor() as usize;
        let ci = wilson(k, n, 0.95).unwrap();
        prop_assert!(0.0 <= ci.lower && ci.lower <= ci.upper && ci.upper <= 1.0);
        prop_assert!(ci.contains(k as f64 / n as f64));
    }

    #[test]
    fn occupancies_sum_to_at_most_one(pts in prop::collection::vec(point(), 1..50)) {
        for world in [presets::benign_dominant(), presets::symmetric_pair()] {
            let occ = mode_occupancy(&pts, &world).unwrap();
            let total: f64 = occ.occupancy.iter().sum();
            prop_assert!(total <= 1.0 + 1e-12);
            prop_assert!((total + occ.malign - 1.0).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&occ.tv));
        }
    }

    #[test]
    fn report_csv_is_deterministic(counts in prop::collection::vec(0usize..=500, 2..6)) {
        let arms: Vec<ArmReport> = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| ArmReport {
                arm: format!("arm{i}"),
                trials: vec![TrialReport {
                    trial: 0,
                    malign_fraction: Proportion::new(c, 500).unwrap(),
                    occupancy_tv: Some(c as f64 / 1000.0),
                    acceptance_ratio: None,
                    oracle_labels: 20,
                    human_labels: 0,
                    label_seconds: 0.0,
                    wall_seconds: 1.0,
                }],
            })
            .collect();
        let a = compare_arms(&arms).unwrap().to_csv().unwrap();
        let b = compare_arms(&arms).unwrap().to_csv().unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn network_gradients_match_finite_differences(
        seed in 0u64..10_000,
        x in prop::collection::vec(-2.0..2.0f64, 2),
        t in 0.0..1.0f64,
        v in prop::collection::vec(-1.0..1.0f64, 3),
        y in 0u8..=1,
    ) {
        let h = 1e-6;
        let tol = 1e-4;
        let check = |analytic: f64, fd: f64, scale: f64| (analytic - fd).abs() <= tol * scale.max(1e-2);

        // parameters, weighted BCE
        let mut net = Mlp::new(2, &[5, 4], 1, Head::Sigmoid, true, 1.0, seed);
        let batch = [Example { x: x.clone(), t: Some(t), target: vec![f64::from(y)] }];
        let loss = Loss::WeightedBce { alpha: 0.7 };
        let (_, grad) = net.grad_params(&batch, loss).unwrap();
        let gscale = grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
        for i in (0..net.params.len()).step_by(3) {
            let p = net.params[i];
            net.params[i] = p + h;
            let up = net.mean_loss(&batch, loss).unwrap();
            net.params[i] = p - h;
            let down = net.mean_loss(&batch, loss).unwrap();
            net.params[i] = p;
            let fd = (up - down) / (2.0 * h);
            prop_assert!(check(grad[i], fd, gscale), "param {i}: {} vs {fd}", grad[i]);
        }

        // input gradient of log r
        let g = net.grad_input(&x, Some(t)).unwrap();
        let scale = g.iter().map(|g| g.abs()).fold(0.0, f64::max);
        for i in 0..2 {
            let mut p = x.clone();
            let mut m = x.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (net.log_reward(&p, Some(t)).unwrap() - net.log_reward(&m, Some(t)).unwrap()) / (2.0 * h);
            prop_assert!(check(g[i], fd, scale));
        }

        // vjp of a vector-valued linear-head net
        let eps_net = Mlp::new(3, &[6], 3, Head::Linear, true, 1.0, seed + 1);
        let x3 = [x[0], x[1], 0.3];
        let vjp = eps_net.vjp_input(&x3, Some(t), &v).unwrap();
        let scale = vjp.iter().map(|g| g.abs()).fold(0.0, f64::max);
        for i in 0..3 {
            let mut p = x3.to_vec();
            let mut m = x3.to_vec();
            p[i] += h;
            m[i] -= h;
            let fp = eps_net.forward(&p, Some(t)).unwrap();
            let fm = eps_net.forward(&m, Some(t)).unwrap();
            let fd: f64 = v.iter().zip(fp.iter().zip(&fm)).map(|(v, (a, b))| v * (a - b) / (2.0 * h)).sum();
            prop_assert!(check(vjp[i], fd, scale));
        }
    }

    #[test]
    fn forward_is_pure(seed in 0u64..1000, x in point()) {
        let net = Mlp::new(2, &[4], 1, Head::Sigmoid, false, 1.0, seed);
        let a = net.forward(&x, None).unwrap();
        let _ = net.grad_input(&x, None).unwrap();
        prop_assert_eq!(net.forward(&x, None).unwrap(), a);
    }

    #[test]
    fn input_gradient_is_continuous(seed in 0u64..1000, x in prop::collection::vec(-3.0..3.0f64, 2)) {
        let net = Mlp::new(2, &[8, 8], 1, Head::Sigmoid, false, 1.0, seed);
        let g0 = net.grad_input(&x, None).unwrap();
        let g1 = net.grad_input(&[x[0] + 1e-6, x[1] - 1e-6], None).unwrap();
        for (a, b) in g0.iter().zip(&g1) {
            prop_assert!((a - b).abs() <= 1e-4);
        }
    }
}

#[test]
fn grid_refinement_is_stable() {
    let coarse = DiffusionGrid::new(schedule(), 500).unwrap();
    let fine = DiffusionGrid::new(schedule(), 1000).unwrap();
    for k in 0..=500 {
        let (a, b) = (coarse.alpha_bar(k), fine.alpha_bar(2 * k));
        assert!((a - b).abs() <= 1e-4 * b, "k = {k}: {a} vs {b}");
    }
}

#[test]
fn guided_step_points_toward_benign_mode_at_midpoint() {
    let world = presets::symmetric_pair();
    let grid = DiffusionGrid::new(schedule(), 1000).unwrap();
    let eps = AnalyticEps::new(world.clone());
    let reward = ExactReward {
        world,
        time_dependent: true,
    };
    let sampler = Sampler::guided(&eps, &grid, &reward, GuidanceConfig::time_dependent(1.0)).unwrap();
    let x = [0.0, 0.0];
    for k in (1..=1000).step_by(10) {
        let e = sampler.guided_eps(&x, grid.level(k)).unwrap();
        let next = reverse_step(&grid, k, &x, &e, &[0.0, 0.0]);
        assert!(next[0] > 0.0, "k = {k}: {next:?}");
    }
}

#[test]
fn overlapping_world_is_soft_assigned() {
    let world = LabeledMixture::new(vec![
        Component::isotropic(0.5, vec![1.0, 0.0], 1.0, Label::Benign),
        Component::isotropic(0.5, vec![-1.0, 0.0], 1.0, Label::Malign),
    ])
    .unwrap();
    assert!(mode_occupancy(&[vec![0.0, 0.0]], &world).unwrap().soft);
}
