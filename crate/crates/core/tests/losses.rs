use proptest::prelude::*;
use skd::attention::CrossAttention;
use skd::losses::*;
use skd::tensor::Tensor;
use skd::Graph64;

fn vec_t(v: &[f64]) -> Tensor {
    Tensor::from_f64(&[v.len()], v).unwrap()
}

fn gk(x: &[f64], y: &[f64], sigma: f64, mode: GkMode) -> f64 {
    gaussian_kernel_distance_value(&vec_t(x), &vec_t(y), sigma, mode).unwrap()
}

fn contrastive(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let mut g = Graph64::new();
    let a = g.constant(vec_t(anchor));
    let p = g.constant(vec_t(positive));
    let n: Vec<_> = negatives.iter().map(|v| g.constant(vec_t(v))).collect();
    let l = contrastive_loss(&mut g, a, p, &n, tau).unwrap();
    g.value(l).item()
}

#[test]
fn gk_closed_forms() {
    let x = [0.3, -1.2, 4.0];
    assert_eq!(gk(&x, &x, 0.7, GkMode::Raw), 0.0);
    assert_eq!(gk(&x, &x, 0.7, GkMode::PerElementMean), 0.0);
    let target = 1.0 - (-1.0f64).exp();
    // raw: squared distance 2 sigma^2 with sigma = 1.5 -> 4.5
    let y = [x[0] + 4.5f64.sqrt(), x[1], x[2]];
    assert!((gk(&x, &y, 1.5, GkMode::Raw) - target).abs() < 1e-12);
    // per-element mean: squared norm / 3 = 2 sigma^2 with sigma = 1
    let d = 2.0f64.sqrt();
    let y = [x[0] + d, x[1] + d, x[2] + d];
    assert!((gk(&x, &y, 1.0, GkMode::PerElementMean) - target).abs() < 1e-12);
}

#[test]
fn contrastive_closed_forms() {
    let a = [0.2, -0.5, 0.9];
    for b in [1usize, 3, 8] {
        let negs = vec![a.to_vec(); b];
        for tau in [0.5, 1e-6] {
            let expect = ((1 + b) as f64).ln();
            assert!(
                (contrastive(&a, &a, &negs, tau) - expect).abs() < 1e-12,
                "b={b} tau={tau}"
            );
        }
    }
    let opposed = contrastive(&[1.0, 0.0], &[2.0, 0.0], &[vec![-1.0, 0.0]], 0.5);
    let expect = -(2f64.exp() / (2f64.exp() + (-2f64).exp())).ln();
    assert!((opposed - expect).abs() < 1e-12);
}

#[test]
fn total_loss_is_exact_weighted_sum() {
    let w = LossWeights::default();
    assert_eq!(
        total_loss_value(1.0, 0.5, 2.0, &w).unwrap(),
        1.0 + 0.2 * 0.5 + 0.2 * 2.0
    );
    assert_eq!(total_loss_value(0.37, 0.0, 0.0, &w).unwrap(), 0.37);
    let off = LossWeights {
        alpha2: 0.0,
        alpha3: 0.0,
        ..w
    };
    assert_eq!(total_loss_value(0.37, 1e3, -7.0, &off).unwrap(), 0.37);
    assert!(total_loss_value(f64::NAN, 0.0, 0.0, &w).is_err());
}

/// Block loss by hand on the 2x2 case: T = I, S = [[1, 2], [3, 4]], lambda = sqrt 2.
#[test]
fn gk_block_hand_case() {
    let t = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let s = Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = LossWeights::default();

    let p = 1.0 / (1.0 + 2f64.sqrt().exp());
    let fc = [p + 3.0 * (1.0 - p), 2.0 * p + 4.0 * (1.0 - p)];
    let fc = [fc[0], fc[1], fc[0], fc[1]];
    let ft = [
        1.0 * p + 2.0 * (1.0 - p),
        1.0 * p + 2.0 * (1.0 - p),
        3.0 * p + 4.0 * (1.0 - p),
        3.0 * p + 4.0 * (1.0 - p),
    ];
    let tf = [1.0, 0.0, 0.0, 1.0];
    let gk_ref = |a: &[f64]| {
        let sq: f64 = a.iter().zip(&tf).map(|(x, y)| (x - y).powi(2)).sum();
        1.0 - (-(sq / 4.0) / 2.0).exp()
    };
    let expect = gk_ref(&[1.0, 2.0, 3.0, 4.0]) + 0.5 * (gk_ref(&fc) + gk_ref(&ft));

    let mut g = Graph64::new();
    let (tv, sv) = (g.constant(t), g.constant(s));
    let loss = gk_feature_loss(&mut g, &[sv], &[tv], &w).unwrap();
    assert!((g.value(loss).item() - expect).abs() < 1e-12);
}

#[test]
fn gk_feature_loss_sums_blocks() {
    let w = LossWeights::default();
    let blocks = [
        (vec_t(&[0.1, 0.4, -0.3, 0.8]), vec_t(&[0.5, -0.1, 0.2, 0.0])),
        (vec_t(&[1.0, -2.0]), vec_t(&[0.3, 0.3])),
    ];
    let one = |i: usize| {
        let mut g = Graph64::new();
        let (s, t) = (&blocks[i].0, &blocks[i].1);
        let c = s.numel() / 2;
        let sv = g.constant(s.reshape(&[2, c]).unwrap());
        let tv = g.constant(t.reshape(&[2, c]).unwrap());
        let l = gk_feature_loss(&mut g, &[sv], &[tv], &w).unwrap();
        g.value(l).item()
    };
    let mut g = Graph64::new();
    let mut ss = Vec::new();
    let mut ts = Vec::new();
    for (s, t) in &blocks {
        let c = s.numel() / 2;
        ss.push(g.constant(s.reshape(&[2, c]).unwrap()));
        ts.push(g.constant(t.reshape(&[2, c]).unwrap()));
    }
    let both = gk_feature_loss(&mut g, &ss, &ts, &w).unwrap();
    assert!((g.value(both).item() - (one(0) + one(1))).abs() < 1e-15);
    assert!(g.value(both).item() >= 0.0);
}

#[test]
fn identical_scalar_features_give_zero_block_loss() {
    let mut g = Graph64::new();
    let s = g.constant(Tensor::from_f64(&[1, 1], &[0.4]).unwrap());
    let t = g.constant(Tensor::from_f64(&[1, 1], &[0.4]).unwrap());
    let l = gk_feature_loss(&mut g, &[s], &[t], &LossWeights::default()).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn contrastive_decreases_with_positive_alignment() {
    let anchor = [1.0, 0.0, 0.0];
    let negs = vec![vec![0.0, 1.0, 0.0], vec![-0.3, 0.2, 0.9]];
    for tau in [0.1, 0.5, 2.0] {
        let mut last = f64::INFINITY;
        for k in 0..=20 {
            let theta = std::f64::consts::PI * (1.0 - k as f64 / 20.0);
            let pos = [theta.cos(), 0.0, theta.sin()];
            let l = contrastive(&anchor, &pos, &negs, tau);
            assert!(l < last, "tau {tau} step {k}: {l} !< {last}");
            last = l;
        }
    }
}

#[test]
fn contrastive_gradient_reaches_anchor() {
    let phi = PhiExtractor::<f64>::new(1, 5);
    let img = |v: f64| {
        Tensor::from_f64(
            &[1, 8, 8],
            &(0..64).map(|i| ((i as f64) * v).sin()).collect::<Vec<_>>(),
        )
        .unwrap()
    };
    let pos = phi.features(&img(0.3)).unwrap();
    let negs = vec![phi.features(&img(0.7)).unwrap()];
    let mut g = Graph64::new();
    let a = g.param(img(0.1));
    let l = contrastive_image_loss(&mut g, &phi, a, &pos, &negs, 0.5).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(a).unwrap().iter().any(|v| *v != 0.0));
}

fn vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, n)
}

proptest! {
    #[test]
    fn gk_symmetric_and_bounded(
        (x, y) in (1usize..12).prop_flat_map(|n| (vector(n), vector(n))),
        sigma in 0.05..5.0f64,
        raw in any::<bool>(),
    ) {
        let mode = if raw { GkMode::Raw } else { GkMode::PerElementMean };
        let a = gk(&x, &y, sigma, mode);
        prop_assert_eq!(a.to_bits(), gk(&y, &x, sigma, mode).to_bits());
        // exp underflow can round a far-apart pair to exactly 1
        prop_assert!((0.0..1.0).contains(&a) || a == 1.0 && x != y);
    }

    #[test]
    fn contrastive_ignores_feature_rescaling(
        (a, p, n1, n2) in (2usize..8).prop_flat_map(|n| (vector(n), vector(n), vector(n), vector(n))),
        c in 0.01..100.0f64,
        which in 0usize..4,
        tau in prop_oneof![Just(0.5), Just(0.05)],
    ) {
        let nonzero = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>() > 1e-6;
        prop_assume!([&a, &p, &n1, &n2].iter().all(|v| nonzero(v)));
        let base = contrastive(&a, &p, &[n1.clone(), n2.clone()], tau);
        let mut vs = [a, p, n1, n2];
        vs[which].iter_mut().for_each(|v| *v *= c);
        let scaled = contrastive(&vs[0], &vs[1], &[vs[2].clone(), vs[3].clone()], tau);
        prop_assert!((base - scaled).abs() <= 1e-9 * base.abs().max(1.0), "{base} vs {scaled}");
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn total_loss_linear_in_each_component(
        rec in -5.0..5.0f64, gk in -5.0..5.0f64, cl in -5.0..5.0f64,
        a2 in 0.0..2.0f64, a3 in 0.0..2.0f64,
    ) {
        let w = LossWeights { alpha2: a2, alpha3: a3, ..LossWeights::default() };
        let v = total_loss_value(rec, gk, cl, &w).unwrap();
        prop_assert_eq!(v, rec + a2 * gk + a3 * cl);
        let mut g = Graph64::new();
        let (r, k, c) = (g.constant(Tensor::scalar(rec)), g.constant(Tensor::scalar(gk)), g.constant(Tensor::scalar(cl)));
        let t = total_loss(&mut g, r, k, c, &w).unwrap();
        prop_assert_eq!(g.value(t).item(), v);
    }

    #[test]
    fn reconstruction_zero_iff_equal(v in vector(9), shift in prop::collection::vec(-1.0..1.0f64, 9)) {
        let mut g = Graph64::new();
        let a = g.constant(Tensor::from_f64(&[1, 3, 3], &v).unwrap());
        let shifted: Vec<f64> = v.iter().zip(&shift).map(|(x, d)| x + d).collect();
        let b = g.constant(Tensor::from_f64(&[1, 3, 3], &shifted).unwrap());
        let same = reconstruction_loss(&mut g, a, a).unwrap();
        let diff = reconstruction_loss(&mut g, a, b).unwrap();
        prop_assert_eq!(g.value(same).item(), 0.0);
        let expect = v.iter().zip(&shifted).map(|(x, y)| (x - y).abs()).sum::<f64>() / 9.0;
        prop_assert!((g.value(diff).item() - expect).abs() < 1e-12);
    }
}

#[test]
fn attention_default_matches_loss_weights_default() {
    assert_eq!(LossWeights::default().attention, CrossAttention::default());
}
