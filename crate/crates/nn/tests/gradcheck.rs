//! Central finite-difference checks of every differentiable operation.

use fluxsteg_nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Graph, Linear, Mode, ParamStore, Tensor, Unary};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Net {
    store: ParamStore,
    c1: Conv2d,
    bn: BatchNorm2d,
    c2: Conv2d,
    up: ConvTranspose2d,
    fc: Linear,
}

impl Net {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c1 = Conv2d::new(&mut store, "c1", 2, 3, 3, 2, 1, true, &mut rng);
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        let c2 = Conv2d::new(&mut store, "c2", 6, 4, 1, 1, 0, false, &mut rng);
        let up = ConvTranspose2d::new(&mut store, "up", 4, 2, 4, 2, 1, true, &mut rng);
        let fc = Linear::new(&mut store, "fc", 2, 2, &mut rng);
        // Non-trivial affine parameters so their gradients are exercised.
        for (i, v) in store.get_mut(bn.gamma).data_mut().iter_mut().enumerate() {
            *v = 0.7 + 0.2 * i as f64;
        }
        Self { store, c1, bn, c2, up, fc }
    }

    fn loss(&self, g: &mut Graph, x: &Tensor) -> fluxsteg_nn::Var {
        let x = g.input(x.clone());
        self.loss_from(g, x)
    }

    fn loss_from(&self, g: &mut Graph, x: fluxsteg_nn::Var) -> fluxsteg_nn::Var {
        let p = g.bind(&self.store);
        let h = self.c1.forward(g, &p, x);
        let h = self.bn.forward(g, &p, h, Mode::Train);
        let h = g.leaky_relu(h, 0.2);
        let t = g.tanh(h);
        let cat = g.concat(&[h, t], 1);
        let h = self.c2.forward(g, &p, cat);
        let h = g.abs(h);
        let h = self.up.forward(g, &p, h);
        let (_, _, hh, ww) = g.value(h).dims4();
        let h = g.crop(h, 1, 0, hh - 1, ww - 1);
        let u = g.upsample2x(h);
        let pooled = g.avg_pool(u, 3, 2, 1);
        let s = g.sigmoid(pooled);
        let ent = g.unary(s, Unary::SymTernaryEntropy);
        let per = g.sum_per_sample(ent);
        let gp = g.global_avg_pool(pooled);
        let logits = self.fc.forward(g, &p, gp);
        let probs = g.softmax(logits);
        let probs = g.clamp(probs, 1e-7, 1.0);
        let lp = g.ln(probs);
        let first = g.narrow0(lp, 0, 1);
        let second = g.narrow0(lp, 1, 1);
        let d = g.sub(first, second);
        let sq = g.unary(d, Unary::Square);
        let a = g.sum(sq);
        let b = g.sum(per);
        let b = g.scale(b, 0.01);
        let prod = g.mul(a, b);
        g.add(prod, a)
    }
}

fn input(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    Tensor::new(&[2, 2, 6, 5], (0..120).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

#[test]
fn parameter_gradients_match_central_differences() {
    let mut net = Net::new(7);
    let x = input(3);
    let mut g = Graph::new();
    let loss = net.loss(&mut g, &x);
    let grads = g.backward(loss, &[]);
    let analytic = grads.for_store(&g, &net.store);
    drop(g);
    let step = 1e-6;
    let mut checked = 0;
    for id in net.store.ids().collect::<Vec<_>>() {
        let Some(ga) = analytic[id.0].clone() else { continue };
        for k in 0..ga.numel() {
            let orig = net.store.get(id).data()[k];
            net.store.get_mut(id).data_mut()[k] = orig + step;
            let mut g1 = Graph::new();
            let l1 = net.loss(&mut g1, &x);
            let up = g1.value(l1).item();
            net.store.get_mut(id).data_mut()[k] = orig - step;
            let mut g2 = Graph::new();
            let l2 = net.loss(&mut g2, &x);
            let down = g2.value(l2).item();
            net.store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let e = rel_err(ga.data()[k], numeric);
            assert!(
                e < 1e-4,
                "{} [{k}]: analytic {} numeric {numeric} rel {e}",
                net.store.entries()[id.0].name,
                ga.data()[k]
            );
            checked += 1;
        }
    }
    assert!(checked > 100, "only {checked} parameters checked");
}

#[test]
fn input_gradient_matches_central_differences() {
    let net = Net::new(11);
    let x = input(5);
    let mut g = Graph::new();
    let xin = g.input(x.clone());
    let loss = net.loss_from(&mut g, xin);
    let grads = g.backward(loss, &[]);
    let ga = grads.get(xin).expect("input grad").clone();
    for k in (0..x.numel()).step_by(7) {
        let mut xp = x.clone();
        xp.data_mut()[k] += 1e-6;
        let mut xm = x.clone();
        xm.data_mut()[k] -= 1e-6;
        let mut g1 = Graph::new();
        let l1 = net.loss(&mut g1, &xp);
        let mut g2 = Graph::new();
        let l2 = net.loss(&mut g2, &xm);
        let numeric = (g1.value(l1).item() - g2.value(l2).item()) / 2e-6;
        assert!(rel_err(ga.data()[k], numeric) < 1e-4, "x[{k}]");
    }
}

#[test]
fn stop_blocks_gradient_flow() {
    let net = Net::new(1);
    let mut g = Graph::new();
    let p = g.bind(&net.store);
    let x = g.input(input(2));
    let h = net.c1.forward(&mut g, &p, x);
    let s = g.sum(h);
    let grads = g.backward(s, &[h]);
    assert!(grads.get(x).is_none());
    assert!(grads.for_store(&g, &net.store)[net.c1.weight.0].is_none());
}

#[test]
fn eval_mode_batch_norm_uses_running_stats() {
    let mut net = Net::new(2);
    let x = input(9);
    for _ in 0..3 {
        let mut g = Graph::new();
        net.loss(&mut g, &x);
        let updates = g.bn_updates().to_vec();
        drop(g);
        net.store.apply_bn_updates(&updates, 0.5);
    }
    let mean = net.store.get(net.bn.running_mean).data().to_vec();
    assert!(mean.iter().any(|m| m.abs() > 1e-6));
    let mut g = Graph::new();
    let p = g.bind(&net.store);
    let xi = g.constant(x.clone());
    let h = net.c1.forward(&mut g, &p, xi);
    let out = net.bn.forward(&mut g, &p, h, Mode::Eval);
    assert!(g.bn_updates().is_empty());
    let hv = g.value(h).data().to_vec();
    let ov = g.value(out).data();
    let gamma = net.store.get(net.bn.gamma).data();
    let var = net.store.get(net.bn.running_var).data();
    let (_, c, hh, ww) = g.value(h).dims4();
    for (i, (&a, &b)) in hv.iter().zip(ov).enumerate() {
        let ch = (i / (hh * ww)) % c;
        let expect = gamma[ch] * (a - mean[ch]) / (var[ch] + 1e-5).sqrt();
        assert!((expect - b).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 2..20)) {
        let rows = vals.len() / 2;
        let t = Tensor::new(&[rows, 2], vals[..rows * 2].to_vec());
        let mut g = Graph::new();
        let x = g.constant(t);
        let p = g.softmax(x);
        for r in g.value(p).data().chunks(2) {
            prop_assert!((r[0] + r[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let net = Net::new(seed);
        let x = input(seed + 1);
        let mut a = Graph::new();
        let la = net.loss(&mut a, &x);
        let mut b = Graph::new();
        let lb = net.loss(&mut b, &x);
        prop_assert_eq!(a.value(la).item().to_bits(), b.value(lb).item().to_bits());
    }
}
