use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slnet_core::tensor::gradcheck::{check_store_gradients, finite_diff_grad, relative_error};
use slnet_core::tensor::{AffineOrder, BnConfig, BnStats};
use slnet_core::{AllocStats, Graph, Mode, ParamStore, Result, Tensor, Var};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Uniform entries bounded away from zero, so no finite-difference probe
/// crosses a ReLU kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Entries separated by at least 0.01, so no probe changes an argmax.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| order[i] as f64 * 0.02 - 0.5)
}

/// `sum(v * r)` for a fixed random `r`, so every output entry carries a
/// distinct upstream gradient.
fn probe_loss(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = uniform(&mut rng, g.shape(v));
    let r = g.constant(r);
    let p = g.mul(v, r)?;
    Ok(g.sum(p))
}

fn assert_checks(store: &mut ParamStore<f64>, seed: u64, f: impl Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>) {
    let report = check_store_gradients(store, 16, H, seed, f).unwrap();
    for c in report {
        assert!(
            c.rel_error < TOL,
            "seed {seed}: param {} rel error {:.3e}",
            c.name,
            c.rel_error
        );
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..5))
}

#[test]
fn linear_identity_and_zero_weights() {
    let mut g = Graph::<f64>::new(Mode::Eval, 0);
    let x = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let eye = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let zero_b = g.constant(Tensor::zeros(&[2]));
    let y = g.linear(x, eye, Some(zero_b)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    let zw = g.constant(Tensor::zeros(&[2, 2]));
    let b = g.constant(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
    let y = g.linear(x, zw, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 4.0]);
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Tensor<f32> = Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0));
    let w: Tensor<f32> = Tensor::from_fn(&[3, 5], |_| rng.random_range(-1.0..1.0));
    let b: Tensor<f32> = Tensor::from_fn(&[5], |_| rng.random_range(-1.0..1.0));
    let mut g = Graph::<f32>::new(Mode::Eval, 0);
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.linear(xv, wv, Some(bv)).unwrap();
    for i in 0..4 {
        for j in 0..5 {
            let mut acc = b.data()[j] as f64;
            for k in 0..3 {
                acc += x.data()[i * 3 + k] as f64 * w.data()[k * 5 + j] as f64;
            }
            let got = g.value(y).data()[i * 5 + j] as f64;
            assert!((got - acc).abs() <= 1e-6 * acc.abs().max(1.0), "{got} vs {acc}");
        }
    }
}

#[test]
fn linear_rejects_nonconforming_shapes() {
    let mut g = Graph::<f64>::new(Mode::Eval, 0);
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[4, 5]));
    assert!(g.linear(x, w, None).is_err());
    let w = g.constant(Tensor::zeros(&[3, 5]));
    let b = g.constant(Tensor::zeros(&[4]));
    assert!(g.linear(x, w, Some(b)).is_err());
}

#[test]
fn relu_examples() {
    let mut g = Graph::<f64>::new(Mode::Eval, 0);
    let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let x = g.constant(Tensor::full(&[4], -0.5));
    let y = g.relu(x);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_gradient_is_positive_indicator() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = off_zero(&mut rng, &[3, 4]);
    let mut store = ParamStore::new();
    let id = store.add_param("x", x.clone());
    let mut g = Graph::new(Mode::Train, 0);
    let xv = g.param(&store, id);
    let y = g.relu(xv);
    let l = g.sum(y);
    g.backward(l, &mut store).unwrap();
    let fd = finite_diff_grad(&x, H, |t| t.data().iter().map(|&v| v.max(0.0)).sum()).unwrap();
    for ((&gr, &f), &v) in store.param(id).grad.data().iter().zip(fd.data()).zip(x.data()) {
        let mask = if v > 0.0 { 1.0 } else { 0.0 };
        assert_eq!(gr, mask);
        assert!((f - mask).abs() < 1e-8);
    }
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add_param("x", Tensor::zeros(&[2]));
    let mut g = Graph::new(Mode::Train, 0);
    let xv = g.param(&store, id);
    let y = g.relu(xv);
    let l = g.sum(y);
    g.backward(l, &mut store).unwrap();
    assert_eq!(store.param(id).grad.data(), &[0.0, 0.0]);
}

fn bn_setup(c: usize) -> (ParamStore<f64>, BnStats, slnet_core::ParamId, slnet_core::ParamId) {
    let mut store = ParamStore::new();
    let gamma = store.add_param("gamma", Tensor::ones(&[c]));
    let beta = store.add_param("beta", Tensor::zeros(&[c]));
    let stats = BnStats {
        mean: store.add_buffer("mean", Tensor::zeros(&[c])),
        var: store.add_buffer("var", Tensor::ones(&[c])),
    };
    (store, stats, gamma, beta)
}

#[test]
fn batch_norm_train_output_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[64, 3], |i| rng.random_range(-2.0..5.0) * (1 + i % 3) as f64);
    let (store, stats, gamma, beta) = bn_setup(3);
    let mut g = Graph::new(Mode::Train, 0);
    let xv = g.constant(x);
    let (gv, bv) = (g.param(&store, gamma), g.param(&store, beta));
    let y = g.batch_norm(xv, gv, bv, &store, stats, BnConfig::default()).unwrap();
    let y = g.value(y);
    for c in 0..3 {
        let col: Vec<f64> = (0..64).map(|r| y.data()[r * 3 + c]).collect();
        let mean = col.iter().sum::<f64>() / 64.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_constant_column_yields_beta() {
    let (mut store, stats, gamma, beta) = bn_setup(2);
    store.param_mut(beta).value = Tensor::new(&[2], vec![0.25, -3.0]).unwrap();
    let x = Tensor::from_fn(&[5, 2], |i| if i % 2 == 0 { 7.0 } else { i as f64 });
    let mut g = Graph::new(Mode::Train, 0);
    let xv = g.constant(x);
    let (gv, bv) = (g.param(&store, gamma), g.param(&store, beta));
    let y = g.batch_norm(xv, gv, bv, &store, stats, BnConfig::default()).unwrap();
    for r in 0..5 {
        assert!((g.value(y).data()[r * 2] - 0.25).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_identity_on_standard_input() {
    let x = Tensor::new(&[4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
    let (store, stats, gamma, beta) = bn_setup(1);
    let mut g = Graph::new(Mode::Train, 0);
    let xv = g.constant(x.clone());
    let (gv, bv) = (g.param(&store, gamma), g.param(&store, beta));
    let y = g.batch_norm(xv, gv, bv, &store, stats, BnConfig::default()).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_running_stats_follow_momentum() {
    let x = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (mut store, stats, gamma, beta) = bn_setup(1);
    let mut g = Graph::new(Mode::Train, 0);
    let xv = g.constant(x.clone());
    let (gv, bv) = (g.param(&store, gamma), g.param(&store, beta));
    g.batch_norm(xv, gv, bv, &store, stats, BnConfig::default()).unwrap();
    g.commit_stats(&mut store);
    // batch mean 2.5, unbiased var 5/3
    let mean = store.buffer(stats.mean).value.data()[0];
    let var = store.buffer(stats.var).value.data()[0];
    assert!((mean - 0.25).abs() < 1e-12);
    assert!((var - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);

    let mut g = Graph::new(Mode::Eval, 0);
    let xv = g.constant(x);
    let (gv, bv) = (g.param(&store, gamma), g.param(&store, beta));
    let y = g.batch_norm(xv, gv, bv, &store, stats, BnConfig::default()).unwrap();
    let expect = (1.0 - mean) / (var + 1e-5).sqrt();
    assert!((g.value(y).data()[0] - expect).abs() < 1e-12);
}

#[test]
fn batch_norm_single_row_is_finite() {
    let (store, stats, gamma, beta) = bn_setup(3);
    let mut g = Graph::new(Mode::Train, 0);
    let xv = g.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let (gv, bv) = (g.param(&store, gamma), g.param(&store, beta));
    let y = g.batch_norm(xv, gv, bv, &store, stats, BnConfig::default()).unwrap();
    assert!(g.value(y).is_finite());
}

#[test]
fn max_reduce_examples_and_ties() {
    let mut g = Graph::<f64>::new(Mode::Eval, 0);
    let x = g.constant(Tensor::new(&[2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
    let m = g.max_reduce(x, 1).unwrap();
    assert_eq!(g.value(m).data(), &[5.0, 3.0]);
    assert_eq!(g.argmax(m).unwrap(), &[1, 0]);
    let x = g.constant(Tensor::full(&[1, 4], 2.0));
    let m = g.max_reduce(x, 1).unwrap();
    assert_eq!(g.argmax(m).unwrap(), &[0]);
    let x = g.constant(Tensor::zeros(&[2, 0]));
    assert!(g.max_reduce(x, 1).is_err());
    let x = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.max_reduce(x, 2).is_err());
}

#[test]
fn max_reduce_gradient_hits_argmax_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = distinct(&mut rng, &[3, 4, 2]);
    let mut store = ParamStore::new();
    let id = store.add_param("x", x.clone());
    let mut g = Graph::new(Mode::Train, 0);
    let xv = g.param(&store, id);
    let m = g.max_reduce(xv, 1).unwrap();
    let l = g.sum(m);
    g.backward(l, &mut store).unwrap();
    let fd = finite_diff_grad(&x, H, |t| {
        let mut s = 0.0;
        for o in 0..3 {
            for i in 0..2 {
                s += (0..4).map(|k| t.data()[(o * 4 + k) * 2 + i]).fold(f64::MIN, f64::max);
            }
        }
        s
    })
    .unwrap();
    let grad = store.param(id).grad.data();
    assert!(grad.iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(grad.iter().sum::<f64>(), 6.0);
    assert!(relative_error(grad, fd.data()) < 1e-8);
}

#[test]
fn backward_of_scaled_sum_gives_channel_sums() {
    let x = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let mut store = ParamStore::new();
    let alpha = store.add_param("alpha", Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
    let zero = store.add_param("zero", Tensor::zeros(&[2]));
    let mut g = Graph::new(Mode::Train, 0);
    let xv = g.constant(x);
    let (a, z) = (g.param(&store, alpha), g.param(&store, zero));
    let y = g.channel_affine(xv, a, z, AffineOrder::ScaleShift).unwrap();
    let l = g.sum(y);
    g.backward(l, &mut store).unwrap();
    assert_eq!(store.param(alpha).grad.data(), &[9.0, 12.0]);
}

#[test]
fn constant_loss_leaves_gradients_zero() {
    let mut store = ParamStore::new();
    let p = store.add_param("p", Tensor::ones(&[3]));
    let mut g = Graph::new(Mode::Train, 0);
    let _unused = g.param(&store, p);
    let c = g.constant(Tensor::scalar(4.0));
    g.backward(c, &mut store).unwrap();
    assert!(store.param(p).grad.data().iter().all(|&v| v == 0.0));
}

#[test]
fn unreachable_gradients_are_untouched() {
    let mut store = ParamStore::new();
    let used = store.add_param("used", Tensor::ones(&[2]));
    let other = store.add_param("other", Tensor::ones(&[2]));
    store.param_mut(other).grad = Tensor::full(&[2], 7.0);
    let mut g = Graph::new(Mode::Train, 0);
    let u = g.param(&store, used);
    let _o = g.param(&store, other);
    let l = g.sum(u);
    g.backward(l, &mut store).unwrap();
    assert_eq!(store.param(other).grad.data(), &[7.0, 7.0]);
    assert_eq!(store.param(used).grad.data(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add_param("p", Tensor::ones(&[3]));
    let mut g = Graph::new(Mode::Train, 0);
    let v = g.param(&store, p);
    assert!(g.backward(v, &mut store).is_err());
}

/// Two-layer perceptron on constant input with a cross-entropy loss.
fn mlp_forward(store: &ParamStore<f64>, x: &Tensor<f64>, targets: &[usize]) -> Result<(Graph<f64>, Var)> {
    let ids: Vec<_> = store.param_ids().collect();
    let mut g = Graph::new(Mode::Train, 1);
    let xv = g.constant(x.clone());
    let w1 = g.param(store, ids[0]);
    let b1 = g.param(store, ids[1]);
    let w2 = g.param(store, ids[2]);
    let b2 = g.param(store, ids[3]);
    let h = g.linear(xv, w1, Some(b1))?;
    let h = g.relu(h);
    let y = g.linear(h, w2, Some(b2))?;
    let l = g.cross_entropy(y, targets, 0.0, None)?;
    Ok((g, l))
}

fn mlp_store(rng: &mut ChaCha8Rng, din: usize, hidden: usize, dout: usize) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.add_param("w1", uniform(rng, &[din, hidden]));
    store.add_param("b1", uniform(rng, &[hidden]));
    store.add_param("w2", uniform(rng, &[hidden, dout]));
    store.add_param("b2", uniform(rng, &[dout]));
    store
}

#[test]
fn finite_differences_agree_with_backward_on_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = uniform(&mut rng, &[5, 4]);
    let targets = [0, 2, 1, 2, 0];
    let mut store = mlp_store(&mut rng, 4, 6, 3);
    let (g, l) = mlp_forward(&store, &x, &targets).unwrap();
    g.backward(l, &mut store).unwrap();
    let w1 = store.param_ids().next().unwrap();
    let analytic = store.param(w1).grad.clone();
    let fd = finite_diff_grad(&store.param(w1).value.clone(), H, |t| {
        let mut s = store.clone();
        s.param_mut(w1).value = t.clone();
        let (g, l) = mlp_forward(&s, &x, &targets).unwrap();
        g.value(l).data()[0]
    })
    .unwrap();
    assert!(relative_error(analytic.data(), fd.data()) < TOL);
}

#[test]
fn gradients_are_bit_identical_across_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(&mut rng, &[6, 3]);
    let targets = [0, 1, 2, 0, 1, 2];
    let base = mlp_store(&mut rng, 3, 5, 3);
    let run = || {
        let mut s = base.clone();
        let (g, l) = mlp_forward(&s, &x, &targets).unwrap();
        g.backward(l, &mut s).unwrap();
        s.params().iter().map(|p| p.grad.clone()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}

#[test]
fn two_backward_passes_accumulate_twice() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = uniform(&mut rng, &[4, 3]);
    let targets = [2, 1, 0, 1];
    let mut store = mlp_store(&mut rng, 3, 4, 3);
    let (g, l) = mlp_forward(&store, &x, &targets).unwrap();
    store.zero_grad();
    g.backward(l, &mut store).unwrap();
    let once: Vec<Tensor<f64>> = store.params().iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();
    g.backward(l, &mut store).unwrap();
    g.backward(l, &mut store).unwrap();
    for (p, o) in store.params().iter().zip(&once) {
        for (&a, &b) in p.grad.data().iter().zip(o.data()) {
            assert_eq!(a, 2.0 * b);
        }
    }
}

#[test]
fn gradient_suite_linear_relu_add_mul_scale() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, din, dout) = dims(&mut rng);
        let mut store = ParamStore::new();
        store.add_param("x", uniform(&mut rng, &[n, din]));
        store.add_param("w", uniform(&mut rng, &[din, dout]));
        store.add_param("b", uniform(&mut rng, &[dout]));
        store.add_param("z", off_zero(&mut rng, &[n, dout]));
        store.add_param("m", uniform(&mut rng, &[n, dout]));
        assert_checks(&mut store, seed, |s| {
            let ids: Vec<_> = s.param_ids().collect();
            let mut g = Graph::new(Mode::Train, 0);
            let v: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            let r = g.relu(v[3]);
            let y = g.add(y, r)?;
            let y = g.mul(y, v[4])?;
            let y = g.scale(y, -1.5);
            let l = probe_loss(&mut g, y, seed)?;
            Ok((g, l))
        });
    }
}

#[test]
fn gradient_suite_batch_norm_both_modes() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..8);
        let c = rng.random_range(1..5);
        let mut store = ParamStore::new();
        store.add_param("x", uniform(&mut rng, &[n, 2, c]));
        store.add_param("gamma", uniform(&mut rng, &[c]));
        store.add_param("beta", uniform(&mut rng, &[c]));
        let stats = BnStats {
            mean: store.add_buffer("mean", uniform(&mut rng, &[c])),
            var: store.add_buffer("var", Tensor::from_fn(&[c], |i| 0.5 + i as f64)),
        };
        for mode in [Mode::Train, Mode::Eval] {
            assert_checks(&mut store, seed, |s| {
                let ids: Vec<_> = s.param_ids().collect();
                let mut g = Graph::new(mode, 0);
                let v: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
                let y = g.batch_norm(v[0], v[1], v[2], s, stats, BnConfig::default())?;
                let l = probe_loss(&mut g, y, seed)?;
                Ok((g, l))
            });
        }
    }
}

#[test]
fn gradient_suite_max_reduce_any_axis() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = dims(&mut rng);
        let axis = rng.random_range(0..3);
        let mut store = ParamStore::new();
        store.add_param("x", distinct(&mut rng, &[a, b, c]));
        assert_checks(&mut store, seed, |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let x = g.param(s, s.param_ids().next().unwrap());
            let y = g.max_reduce(x, axis)?;
            let l = probe_loss(&mut g, y, seed)?;
            Ok((g, l))
        });
    }
}

#[test]
fn gradient_suite_gather_group_concat_repeat_reshape() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..8);
        let c = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let m = rng.random_range(1..4);
        let centers: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
        let neighbors: Vec<usize> = (0..m * k).map(|_| rng.random_range(0..n)).collect();
        let mut store = ParamStore::new();
        store.add_param("x", uniform(&mut rng, &[n, c]));
        store.add_param("extra", uniform(&mut rng, &[m, k, 2]));
        assert_checks(&mut store, seed, |s| {
            let ids: Vec<_> = s.param_ids().collect();
            let mut g = Graph::new(Mode::Train, 0);
            let x = g.param(s, ids[0]);
            let e = g.param(s, ids[1]);
            let grp = g.group_relative(x, &centers, &neighbors, k)?;
            let cat = g.concat(&[grp, e])?;
            let flat = g.reshape(cat, &[m * k, c + 2])?;
            let rows = g.gather_rows(flat, &[0, m * k - 1, 0])?;
            let rep = g.repeat_rows(rows, 2)?;
            let l1 = probe_loss(&mut g, rep, seed)?;
            let l2 = probe_loss(&mut g, flat, seed + 1)?;
            let l = g.add(l1, l2)?;
            Ok((g, l))
        });
    }
}

#[test]
fn gradient_suite_affine_dropout_weighted_gather() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..7);
        let c = rng.random_range(1..5);
        let k = rng.random_range(1..4);
        let r = rng.random_range(1..5);
        let idx: Vec<usize> = (0..r * k).map(|_| rng.random_range(0..n)).collect();
        let weights: Vec<f64> = (0..r * k).map(|_| rng.random_range(0.0..1.0)).collect();
        let order = if seed % 2 == 0 {
            AffineOrder::ScaleShift
        } else {
            AffineOrder::ShiftScale
        };
        let mut store = ParamStore::new();
        store.add_param("x", uniform(&mut rng, &[n, c]));
        store.add_param("alpha", uniform(&mut rng, &[c]));
        store.add_param("beta", uniform(&mut rng, &[c]));
        assert_checks(&mut store, seed, |s| {
            let ids: Vec<_> = s.param_ids().collect();
            let mut g = Graph::new(Mode::Train, seed);
            let v: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let y = g.channel_affine(v[0], v[1], v[2], order)?;
            let y = g.dropout(y, 0.3)?;
            let y = g.weighted_gather(y, &idx, &weights, k)?;
            let l = probe_loss(&mut g, y, seed)?;
            Ok((g, l))
        });
    }
}

#[test]
fn gradient_suite_losses() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..6);
        let c = rng.random_range(2..6);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let weights: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
        let mut store = ParamStore::new();
        store.add_param("logits", uniform(&mut rng, &[n, c]).map(|v| 3.0 * v));
        assert_checks(&mut store, seed, |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let x = g.param(s, s.param_ids().next().unwrap());
            let a = g.cross_entropy(x, &targets, 0.0, None)?;
            let b = g.cross_entropy(x, &targets, 0.2, Some(&weights))?;
            let f = g.focal_loss(x, &targets, 2.0)?;
            let f0 = g.focal_loss(x, &targets, 0.0)?;
            let ab = g.add(a, b)?;
            let ff = g.add(f, f0)?;
            let l = g.add(ab, ff)?;
            Ok((g, l))
        });
    }
}

#[test]
fn alloc_peak_covers_live_activations() {
    let before = AllocStats::snapshot();
    AllocStats::reset_peak();
    assert_eq!(AllocStats::snapshot().peak_bytes, before.current_bytes);
    let mut g = Graph::<f32>::new(Mode::Eval, 0);
    let x = g.constant(Tensor::zeros(&[128, 16]));
    let w = g.constant(Tensor::zeros(&[16, 64]));
    let y = g.linear(x, w, None).unwrap();
    let _z = g.relu(y);
    let live = (128 * 16 + 16 * 64 + 2 * 128 * 64) * 4;
    let after = AllocStats::snapshot();
    assert!(after.peak_bytes >= before.current_bytes + live);
    assert!(after.peak_bytes >= after.current_bytes);
    drop(g);
    let dropped = AllocStats::snapshot();
    assert_eq!(dropped.peak_bytes, after.peak_bytes);
    AllocStats::reset_peak();
    let reset = AllocStats::snapshot();
    assert_eq!(reset.peak_bytes, reset.current_bytes);
}
