use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rom_core::closure::{ChannelNorm, ClosureDataset, ClosureSample, Normalization, SplitSpec};
use rom_core::nn::dense::param_count;
use rom_core::nn::{
    grad_check, load_weights, loss_and_grad, loss_g, loss_m, loss_mg, loss_star, save_weights, train, Architecture,
    Batch, ClosureNets, DenseNet, LossKind, NetKind, OperatorNet, TrainConfig, TrainMode,
};
use rom_core::operators::Dims;
use rom_core::RomError;

const NU: usize = 3;
const NP: usize = 2;
const NNUT: usize = 2;
const NMU: usize = 2;
const NOUT: usize = NU + NP;

/// Random dataset with a consistent sensitivity, two parameter groups.
fn synthetic_dataset(n: usize, seed: u64) -> ClosureDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |k: usize, s: f64| -> Vec<f64> { (0..k).map(|_| s * rng.random_range(-1.0..1.0)).collect() };
    let samples: Vec<ClosureSample> = (0..n)
        .map(|_| ClosureSample {
            a_proj: r(NU, 2.0),
            g_proj: r(NNUT, 0.1),
            mu: r(NMU, 1.0),
            tau_exact: r(NOUT, 5.0),
            sensitivity: r(NOUT * NNUT, 3.0),
        })
        .collect();
    let group: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let fit = |f: &dyn Fn(&ClosureSample) -> &[f64], w: usize| ChannelNorm::fit(samples.iter().map(f), w);
    let norm = Normalization {
        a: fit(&|s| &s.a_proj, NU),
        g: fit(&|s| &s.g_proj, NNUT),
        mu: fit(&|s| &s.mu, NMU),
        tau: fit(&|s| &s.tau_exact, NOUT),
    };
    ClosureDataset {
        dims: Dims::new(NU, NP, NNUT),
        k: 2.0,
        samples,
        group,
        split: SplitSpec { train: vec![0], test: vec![1] },
        norm,
    }
}

fn nets(seed: u64) -> (OperatorNet, OperatorNet) {
    let arch = Architecture::default();
    (
        OperatorNet::deeponet(NU, NMU, NNUT, &arch, seed).unwrap(),
        OperatorNet::mionet(NU, NNUT, NMU, NOUT, &arch, seed + 1).unwrap(),
    )
}

fn all(ds: &ClosureDataset) -> Batch {
    Batch::from_dataset(ds, &(0..ds.samples.len()).collect::<Vec<_>>()).unwrap()
}

fn softplus_ref(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Forward pass of one dense net, one sample, plain loops.
fn dense_ref(net: &DenseNet, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut o = 0;
    let nl = net.widths.len() - 1;
    for l in 0..nl {
        let (ni, no) = (net.widths[l], net.widths[l + 1]);
        let mut z = vec![0.0; no];
        for r in 0..no {
            let mut s = net.params[o + ni * no + r];
            for c in 0..ni {
                s += net.params[o + r * ni + c] * h[c];
            }
            z[r] = if l + 1 < nl { softplus_ref(s) } else { s };
        }
        o += ni * no + no;
        h = z;
    }
    h
}

fn operator_ref(net: &OperatorNet, inputs: &[&[f64]]) -> Vec<f64> {
    let mut cat = Vec::new();
    for (s, x) in net.subnets.iter().zip(inputs) {
        cat.extend(dense_ref(s, x));
    }
    dense_ref(&net.reduction, &cat)
}

fn row(m: &DMatrix<f64>, r: usize) -> Vec<f64> {
    m.row(r).iter().copied().collect()
}

#[test]
fn layout_and_initialization() {
    let (g, m) = nets(5);
    let sub = |n: usize| param_count(&[n, 20, 20, 20, 20]);
    assert_eq!(g.param_count(), sub(NU) + sub(NMU) + param_count(&[40, 20, 20, 20, NNUT]));
    assert_eq!(m.param_count(), sub(NU) + sub(NNUT) + sub(NMU) + param_count(&[60, 20, 20, 20, NOUT]));
    assert_eq!(g.kind, NetKind::DeepOnet);
    assert_eq!(m.input_widths(), vec![NU, NNUT, NMU]);
    for net in g.subnets.iter().chain(std::iter::once(&g.reduction)) {
        let mut o = 0;
        for w in net.widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            assert!(net.params[o..o + w[0] * w[1]].iter().all(|v| v.abs() <= bound));
            assert!(net.params[o + w[0] * w[1]..o + w[0] * w[1] + w[1]].iter().all(|&v| v == 0.0));
            o += w[0] * w[1] + w[1];
        }
    }
    assert_eq!(nets(5).0, g);
    assert_ne!(nets(6).0.flat_params(), g.flat_params());
    assert!(OperatorNet::new(NetKind::MioNet, &[NU, NMU], NOUT, &Architecture::default(), 0).is_err());
}

#[test]
fn forward_matches_scalar_loops() {
    let ds = synthetic_dataset(7, 1);
    let b = all(&ds);
    let (g, m) = nets(2);
    let yg = g.forward(&[&b.a, &b.mu]).unwrap();
    let ym = m.forward(&[&b.a, &b.g, &b.mu]).unwrap();
    for r in 0..b.len() {
        let eg = operator_ref(&g, &[&row(&b.a, r), &row(&b.mu, r)]);
        let em = operator_ref(&m, &[&row(&b.a, r), &row(&b.g, r), &row(&b.mu, r)]);
        for (x, y) in row(&yg, r).iter().zip(&eg).chain(row(&ym, r).iter().zip(&em)) {
            assert!((x - y).abs() <= 1e-14 * y.abs().max(1.0), "{x} vs {y}");
        }
    }
    assert!(g.forward(&[&b.a]).is_err());
    assert!(g.forward(&[&b.mu, &b.a]).is_err());
}

/// Losses from raw samples: normalize, run the scalar forward, compare.
#[test]
fn losses_match_independent_evaluation() {
    let ds = synthetic_dataset(6, 3);
    let b = all(&ds);
    let (g, m) = nets(4);
    let n = &ds.norm;
    let (mut lg, mut lm, mut lmg) = (0.0, 0.0, 0.0);
    for s in &ds.samples {
        let (a, gp, mu) = (n.a.normalize(&s.a_proj), n.g.normalize(&s.g_proj), n.mu.normalize(&s.mu));
        let gh = operator_ref(&g, &[&a, &mu]);
        lg += gh.iter().zip(&gp).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let tau = n.tau.normalize(&s.tau_exact);
        let out = operator_ref(&m, &[&a, &gp, &mu]);
        lm += out.iter().zip(&tau).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        // correction re-evaluated in raw units at the predicted coefficients
        let target = n.tau.normalize(&s.tau_at(&n.g.denormalize(&gh)));
        let out = operator_ref(&m, &[&a, &gh, &mu]);
        lmg += out.iter().zip(&target).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    let k = ds.samples.len() as f64;
    let (lg, lm, lmg) = (lg / k, lm / k, lmg / k);
    let near = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
    assert!(near(loss_g(&g, &b).unwrap(), lg));
    assert!(near(loss_m(&m, &b).unwrap(), lm));
    assert!(near(loss_mg(&m, &g, &b).unwrap(), lmg), "{} vs {lmg}", loss_mg(&m, &g, &b).unwrap());
    assert!(near(loss_star(&m, &g, &b).unwrap(), lg + lm + lmg));
}

#[test]
fn coupled_loss_reduces_to_m_loss_at_projected_coefficients() {
    let ds = synthetic_dataset(4, 8);
    let b = Batch::from_dataset(&ds, &[2]).unwrap();
    let (mut g, m) = nets(9);
    // constant G that returns the projected coefficients of the sample
    g.zero_output_layer();
    let len = g.reduction.params.len();
    for c in 0..NNUT {
        g.reduction.params[len - NNUT + c] = b.g[(0, c)];
    }
    assert_eq!(g.forward(&[&b.a, &b.mu]).unwrap(), b.g);
    assert_eq!(loss_mg(&m, &g, &b).unwrap(), loss_m(&m, &b).unwrap());
}

#[test]
fn star_gradient_is_the_sum_of_its_parts() {
    let ds = synthetic_dataset(5, 10);
    let b = all(&ds);
    let (g, m) = nets(11);
    let s = loss_and_grad(LossKind::Star, Some(&g), Some(&m), &b).unwrap();
    let pg = loss_and_grad(LossKind::G, Some(&g), None, &b).unwrap();
    let pm = loss_and_grad(LossKind::M, None, Some(&m), &b).unwrap();
    let pmg = loss_and_grad(LossKind::MG, Some(&g), Some(&m), &b).unwrap();
    assert!((s.loss - (pg.loss + pm.loss + pmg.loss)).abs() <= 1e-14 * s.loss);
    let parts = loss_g(&g, &b).unwrap() + loss_m(&m, &b).unwrap() + loss_mg(&m, &g, &b).unwrap();
    assert!((loss_star(&m, &g, &b).unwrap() - parts).abs() <= 1e-14 * parts);
    let sum_g: Vec<f64> = pg.grad_g.unwrap().iter().zip(pmg.grad_g.as_ref().unwrap()).map(|(a, b)| a + b).collect();
    let sum_m: Vec<f64> = pm.grad_m.unwrap().iter().zip(pmg.grad_m.as_ref().unwrap()).map(|(a, b)| a + b).collect();
    for (x, y) in s.grad_g.unwrap().iter().zip(&sum_g).chain(s.grad_m.unwrap().iter().zip(&sum_m)) {
        assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-6));
    }
    assert!(loss_and_grad(LossKind::MG, Some(&g), None, &b).is_err());
}

fn small_nets(seed: u64) -> (OperatorNet, OperatorNet) {
    let arch = Architecture { hidden: vec![4, 4], sub_output: 4 };
    (
        OperatorNet::deeponet(NU, NMU, NNUT, &arch, seed).unwrap(),
        OperatorNet::mionet(NU, NNUT, NMU, NOUT, &arch, seed + 1).unwrap(),
    )
}

#[test]
fn gradients_pass_finite_difference_checks() {
    let ds = synthetic_dataset(4, 12);
    let b = all(&ds);
    let (g, m) = small_nets(13);
    for kind in [LossKind::G, LossKind::M, LossKind::MG, LossKind::Star] {
        let dev = grad_check(kind, Some(&g), Some(&m), &b, 1e-4).unwrap();
        assert!(dev <= 1e-5, "{kind:?}: {dev:e}");
        assert_eq!(dev, grad_check(kind, Some(&g), Some(&m), &b, 1e-4).unwrap());
    }
    for kind in [LossKind::G, LossKind::M] {
        assert!(grad_check(kind, Some(&g), Some(&m), &b, 1e-6).unwrap() <= 1e-5);
    }
    assert!(grad_check(LossKind::G, Some(&g), None, &b, 1e-2).is_err());
    assert!(grad_check(LossKind::G, Some(&g), None, &b, 1e-9).is_err());
}

/// Largest relative deviation between backprop and central differences of
/// a squared loss on one dense net.
fn dense_deviation(widths: &[usize], eps: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = DenseNet::init(widths, &mut rng).unwrap();
    let (ni, no) = (widths[0], *widths.last().unwrap());
    let x = DMatrix::from_fn(5, ni, |_, _| rng.random_range(-1.0..1.0));
    let y = DMatrix::from_fn(5, no, |_, _| rng.random_range(-1.0..1.0));
    let loss = |n: &DenseNet| {
        let r = n.forward(&x).unwrap() - &y;
        r.iter().map(|v| v * v).sum::<f64>() / 5.0
    };
    let (out, cache) = net.forward_cached(&x).unwrap();
    let mut grad = vec![0.0; net.params.len()];
    net.backward(&cache, &((out - &y) * (2.0 / 5.0)), &mut grad);
    let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst: f64 = 0.0;
    for k in 0..grad.len() {
        let (mut p, mut q) = (net.clone(), net.clone());
        p.params[k] += eps;
        q.params[k] -= eps;
        let fd = (loss(&p) - loss(&q)) / (2.0 * eps);
        worst = worst.max((fd - grad[k]).abs() / grad[k].abs().max(fd.abs()).max(1e-4 * scale));
    }
    worst
}

#[test]
fn dense_gradients_match_differences() {
    // affine layer under a squared loss: exact up to roundoff
    assert!(dense_deviation(&[3, 2], 1e-4, 30) <= 1e-9);
    assert!(dense_deviation(&[3, 4, 2], 1e-6, 31) <= 1e-5);
}

#[test]
fn trivial_forward_values() {
    assert_eq!(rom_core::nn::dense::softplus(0.0), std::f64::consts::LN_2);
    let z = DenseNet::zeros(&[3, 4, 2]).unwrap();
    let x = DMatrix::from_element(2, 3, 0.7);
    assert!(z.forward(&x).unwrap().iter().all(|&v| v == 0.0));

    let ds = synthetic_dataset(5, 31);
    let b = all(&ds);
    let (mut g, mut m) = nets(32);
    g.zero_output_layer();
    m.zero_output_layer();
    assert!(g.forward(&[&b.a, &b.mu]).unwrap().iter().all(|&v| v == 0.0));
    // zero predictors give the mean squared targets
    let msq = |t: &DMatrix<f64>| t.iter().map(|v| v * v).sum::<f64>() / t.nrows() as f64;
    assert_eq!(loss_g(&g, &b).unwrap(), msq(&b.g));
    assert_eq!(loss_m(&m, &b).unwrap(), msq(&b.tau));
}

#[test]
fn sample_order_does_not_matter() {
    let ds = synthetic_dataset(6, 33);
    let fwd = Batch::from_dataset(&ds, &[0, 1, 2, 3, 4, 5]).unwrap();
    let rev = Batch::from_dataset(&ds, &[5, 4, 3, 2, 1, 0]).unwrap();
    let (_, m) = nets(34);
    let y1 = m.forward(&[&fwd.a, &fwd.g, &fwd.mu]).unwrap();
    let y2 = m.forward(&[&rev.a, &rev.g, &rev.mu]).unwrap();
    for r in 0..6 {
        assert_eq!(y1.row(r), y2.row(5 - r));
    }
}

#[test]
fn single_sample_is_memorized() {
    let ds = synthetic_dataset(3, 14);
    let b = Batch::from_dataset(&ds, &[0]).unwrap();
    let (mut g, mut m) = nets(15);
    let cfg = TrainConfig { epochs: 3000, n_step: 1000, gamma: 0.5, ..Default::default() };
    let rg = train(TrainMode::StandardG, Some(&mut g), None, &b, None, &cfg).unwrap();
    let rm = train(TrainMode::StandardM, None, Some(&mut m), &b, None, &cfg).unwrap();
    assert!(rg.final_train < 1e-6, "{}", rg.final_train);
    assert!(rm.final_train < 1e-6, "{}", rm.final_train);
    assert_eq!(rg.loss_history.len(), 3000);
    assert!(rg.running_min().windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn training_is_deterministic() {
    let ds = synthetic_dataset(8, 16);
    let tr = Batch::from_dataset(&ds, &ds.train_indices()).unwrap();
    let te = Batch::from_dataset(&ds, &ds.test_indices()).unwrap();
    let cfg = TrainConfig { epochs: 50, coupled_epochs: 30, n_step: 20, ..Default::default() };
    let run = || {
        let (mut g, mut m) = nets(17);
        train(TrainMode::StandardG, Some(&mut g), None, &tr, Some(&te), &cfg).unwrap();
        let r = train(TrainMode::CoupledStar, Some(&mut g), Some(&mut m), &tr, Some(&te), &cfg).unwrap();
        (g.flat_params(), m.flat_params(), r)
    };
    let (g1, m1, r1) = run();
    let (g2, m2, r2) = run();
    assert_eq!(g1, g2);
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
    assert_eq!(r1.epochs, 30);
    assert!(r1.final_test.is_some());
}

#[test]
fn training_rejects_bad_inputs() {
    let ds = synthetic_dataset(4, 18);
    let mut b = all(&ds);
    let (mut g, _) = nets(19);
    let cfg = TrainConfig { epochs: 5, ..Default::default() };
    assert!(train(TrainMode::CoupledStar, Some(&mut g), None, &b, None, &cfg).is_err());
    b.a[(0, 0)] = f64::NAN;
    let r = train(TrainMode::StandardG, Some(&mut g), None, &b, None, &cfg);
    assert!(matches!(r, Err(RomError::NonFiniteLoss { epoch: 0 })));
    assert!(Batch::from_dataset(&ds, &[]).is_err());
}

#[test]
fn schedule_values() {
    let cfg = TrainConfig::default();
    assert_eq!((cfg.epochs, cfg.n_step, cfg.gamma, cfg.lr), (20000, 3000, 0.2, 1e-3));
    assert_eq!(cfg.learning_rate(3000), 1e-3 * 0.2);
    assert_eq!(cfg.learning_rate(0), 1e-3);
    assert_eq!(cfg.learning_rate(2999), 1e-3);
    assert_eq!(cfg.learning_rate(6000), 1e-3 * 0.2 * 0.2);
    assert_eq!(cfg.learning_rate(9000), 1e-3 * 0.2 * 0.2 * 0.2);
    assert_eq!(cfg.learning_rate(19999), 1e-3 * 0.2 * 0.2 * 0.2 * 0.2 * 0.2 * 0.2);
}

#[test]
fn weights_round_trip() {
    let ds = synthetic_dataset(4, 20);
    let (g, m) = nets(21);
    let dir = tempfile::tempdir().unwrap();
    save_weights(&g, &dir.path().join("g"), None).unwrap();
    save_weights(&m, &dir.path().join("m"), Some(&ds.norm)).unwrap();
    let (g2, n2) = load_weights(&dir.path().join("g")).unwrap();
    let (m2, n3) = load_weights(&dir.path().join("m")).unwrap();
    assert_eq!(g2, g);
    assert_eq!(m2, m);
    let b = all(&ds);
    assert_eq!(m2.forward(&[&b.a, &b.g, &b.mu]).unwrap(), m.forward(&[&b.a, &b.g, &b.mu]).unwrap());
    assert!(n2.is_none());
    assert_eq!(n3.unwrap(), ds.norm);
    let expected = 4 * (g.subnets.len() + 1);
    let layer_files = std::fs::read_dir(dir.path().join("g"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains("_layer"));
    assert_eq!(layer_files.count(), expected);

    let f = dir.path().join("g").join("sub0_layer0.bin");
    let mut bytes = std::fs::read(&f).unwrap();
    bytes[0] = b'X';
    std::fs::write(&f, bytes).unwrap();
    assert!(load_weights(&dir.path().join("g")).is_err());
}

#[test]
fn closure_nets_work_in_raw_units() {
    let ds = synthetic_dataset(4, 22);
    let (g, m) = nets(23);
    let cn = ClosureNets { g: g.clone(), m: m.clone(), norm: ds.norm.clone() };
    let s = &ds.samples[1];
    let n = &ds.norm;
    let gp = cn.predict_g(&s.a_proj, &s.mu).unwrap();
    let expect = n.g.denormalize(&operator_ref(&g, &[&n.a.normalize(&s.a_proj), &n.mu.normalize(&s.mu)]));
    for (x, y) in gp.iter().zip(&expect) {
        assert!((x - y).abs() <= 1e-13 * y.abs().max(1.0));
    }
    let tp = cn.predict_tau(&s.a_proj, &s.g_proj, &s.mu).unwrap();
    let expect = n.tau.denormalize(&operator_ref(
        &m,
        &[&n.a.normalize(&s.a_proj), &n.g.normalize(&s.g_proj), &n.mu.normalize(&s.mu)],
    ));
    for (x, y) in tp.iter().zip(&expect) {
        assert!((x - y).abs() <= 1e-13 * y.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn flat_parameters_round_trip(seed in 0u64..10_000) {
        let (g, _) = nets(seed);
        let mut h = nets(seed + 100).0;
        h.set_flat_params(&g.flat_params());
        prop_assert_eq!(h.flat_params(), g.flat_params());
        prop_assert_eq!(h.subnets, g.subnets);
    }

    #[test]
    fn losses_are_nonnegative(seed in 0u64..10_000) {
        let ds = synthetic_dataset(3, seed);
        let b = all(&ds);
        let (g, m) = nets(seed);
        let l = loss_and_grad(LossKind::Star, Some(&g), Some(&m), &b).unwrap();
        prop_assert!(l.loss >= 0.0 && l.loss.is_finite());
    }
}
