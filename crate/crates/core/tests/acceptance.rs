//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p fluxsteg-core --test acceptance` runs everything at the
//! toy scale (64×64 procedural sets). The adversarial runs dominate the
//! runtime; on one core expect about 20 minutes.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use fluxsteg_core::adversary::{choose, cross_entropy, DiscriminatorId, LossPair};
use fluxsteg_core::dataset::{build_fluctuation_set, default_sweep, mse, FluctuationSet, ProceduralBackend};
use fluxsteg_core::embedding::{
    capacity, costs_to_probs, double_tanh, double_tanh_grad, double_tanh_modify, piecewise_modify, probs_to_costs,
    stc_embed, stc_extract, CostMap, NoiseField, ProbabilityMap, StcCode, StcParams,
};
use fluxsteg_core::evaluation::{
    baseline_costs, compute_pe, embed_random, train_steganalyzer, BaselineScheme, PairSet, SteganalyzerConfig,
};
use fluxsteg_core::generator::Generator;
use fluxsteg_core::image::ImageGray;
use fluxsteg_core::stats::{median, spearman};
use fluxsteg_core::training::{generator_loss, texture_correlation, IterationRecord, TrainConfig, Trainer};
use fluxsteg_core::volatility::{combine_costs, estimate_volatility_cost, vc_alpha, CombineConfig};
use fluxsteg_nn::Mode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const SIDE: usize = 64;
const Q: f64 = 0.4;
const SMOKE_ITERS: u64 = 200;
const SEEDS: [u64; 3] = [0, 1, 2];

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

// ---------------------------------------------------------------- formulas

fn formula_suite() -> Outcome {
    let start = Instant::now();

    let a = ImageGray::new(2, 2, vec![10, 20, 30, 40]).unwrap();
    let b = ImageGray::new(2, 2, vec![13, 16, 30, 41]).unwrap();
    ensure!(mse(&a, &b).unwrap() == (9.0 + 16.0 + 0.0 + 1.0) / 4.0, "mse");

    let p = ProbabilityMap::symmetric(1, 3, &[0.0, 0.3, 0.9]).unwrap();
    ensure!(p.plus() == p.minus() && p.plus()[1] == 0.15 && p.max_asymmetry() == 0.0, "symmetric split");

    let pm = ProbabilityMap::symmetric(1, 4, &[0.4; 4]).unwrap();
    let r = NoiseField { height: 1, width: 4, seed: 0, r: vec![0.1, 0.2, 0.5, 0.95] };
    ensure!(piecewise_modify(&pm, &r).unwrap().m == vec![-1.0, 0.0, 0.0, 1.0], "piecewise branches");

    let gamma = 60.0;
    let oracle = |pp: f64, pn: f64, r: f64| 0.5 * (gamma * (pp - (1.0 - r))).tanh() - 0.5 * (gamma * (pn - r)).tanh();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_fd: f64 = 0.0;
    for _ in 0..2000 {
        let (pp, pn, r) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.5), rng.random::<f64>());
        ensure!(double_tanh(pp, pn, r, gamma) == oracle(pp, pn, r), "double tanh value");
        let (gp, gn) = double_tanh_grad(pp, pn, r, gamma);
        let h = 1e-6;
        let fp = (oracle(pp + h, pn, r) - oracle(pp - h, pn, r)) / (2.0 * h);
        let fnn = (oracle(pp, pn + h, r) - oracle(pp, pn - h, r)) / (2.0 * h);
        for (an, fd) in [(gp, fp), (gn, fnn)] {
            if an.abs() > 1e-4 {
                worst_fd = worst_fd.max((an - fd).abs() / an.abs());
            }
        }
    }
    ensure!(worst_fd < 1e-3, "double tanh gradient rel err {worst_fd:.2e}");

    let mut worst_rt: f64 = 0.0;
    let plus: Vec<f64> = (0..5000).map(|_| rng.random_range(1e-6..0.499)).collect();
    let pmap = ProbabilityMap::from_planes(1, 5000, plus.clone(), plus).unwrap();
    let costs = probs_to_costs(&pmap).unwrap();
    for (i, &v) in pmap.plus().iter().enumerate() {
        ensure!((costs.plus()[i] - (1.0 / v - 2.0).ln()).abs() < 1e-12, "cost conversion");
    }
    let back = costs_to_probs(&costs);
    for (x, y) in back.plus().iter().chain(back.minus()).zip(pmap.plus().iter().chain(pmap.minus())) {
        worst_rt = worst_rt.max((x - y).abs());
    }
    ensure!(worst_rt < 1e-9, "Gibbs round trip {worst_rt:.2e}");

    let ce = cross_entropy(&[[0.8, 0.2], [0.6, 0.4]], &[[0.3, 0.7]]);
    let hand = (-(0.8f64).ln() - (0.6f64).ln()) / 2.0 - (0.7f64).ln();
    ensure!((ce - hand).abs() < 1e-15, "cross entropy");
    ensure!(cross_entropy(&[[0.0, 1.0]], &[[1.0, 0.0]]) == -2.0 * (1e-7f64).ln(), "probability floor");
    ensure!(choose(LossPair { e1: 0.5, e2: 0.5 }) == DiscriminatorId::D2, "tie rule");
    ensure!(choose(LossPair { e1: 0.6, e2: 0.5 }) == DiscriminatorId::D1, "larger loss");
    let cfg = TrainConfig { beta: 1e-3, lambda: 2.0, ..TrainConfig::default() };
    let (l_g, l_a) = generator_loss(0.3, 0.9, 100.0, &cfg);
    ensure!(close(l_a, 0.3 + 2.0 * 0.9, 1e-15) && close(l_g, -l_a + 0.1, 1e-15), "generator loss");

    let labels = [false, false, false, false, true, true, true, true];
    let preds = [true, false, false, false, true, true, false, false];
    let rep = compute_pe(&labels, &preds).unwrap();
    ensure!(rep.p_fa == 0.25 && rep.p_md == 0.5 && rep.p_e == 0.375, "P_E arithmetic");

    let o = CostMap::new(1, 3, vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]).unwrap();
    let v = CostMap::new(1, 3, vec![4.0, 0.5, 7.5], vec![0.5, 4.0, 7.5]).unwrap();
    let alpha = vc_alpha(&o, &v).unwrap();
    ensure!(alpha == 24.0 / 12.0, "vc_alpha {alpha}");
    let (c0, _) = combine_costs(&o, &v, &CombineConfig { vc_beta: 0.0 }).unwrap();
    let (c1, _) = combine_costs(&o, &v, &CombineConfig { vc_beta: 1.0 }).unwrap();
    ensure!(c0.plus().iter().zip(o.plus()).all(|(c, o)| *c == alpha * o), "vc_beta 0 endpoint");
    ensure!(c1.plus() == v.plus() && c1.minus() == v.minus(), "vc_beta 1 endpoint");

    let t = start.elapsed();
    ensure!(t < Duration::from_secs(60), "runtime {t:?}");
    Ok(format!("FD rel err {worst_fd:.1e}, round trip {worst_rt:.1e}, {:.1}s", t.as_secs_f64()))
}

// --------------------------------------------------------------------- STC

fn brute_force(hm: &[Vec<u8>], x: &[u8], costs: &[f64], msg: &[u8]) -> f64 {
    let n = x.len();
    let mut best = f64::INFINITY;
    for pattern in 0u32..(1 << n) {
        let ok = msg.iter().enumerate().all(|(k, &bit)| {
            (0..n).fold(0u8, |acc, j| acc ^ (hm[k][j] & ((pattern >> j) & 1) as u8)) == bit
        });
        if ok {
            let cost: f64 = (0..n).filter(|&j| ((pattern >> j) & 1) as u8 != x[j]).map(|j| costs[j]).sum();
            best = best.min(cost);
        }
    }
    best
}

fn stc_codec() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut instances = 0;
    while instances < 250 {
        let n = rng.random_range(4..=16usize);
        let m = rng.random_range(1..=n / 2);
        let h = rng.random_range(1..=4usize);
        let code = StcCode::new(n, m, h).unwrap();
        let x: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let costs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let msg: Vec<u8> = (0..m).map(|_| rng.random_range(0..2)).collect();
        let oracle = brute_force(&code.parity_check_matrix(), &x, &costs, &msg);
        match code.embed(&x, &costs, &msg) {
            Ok((_, cost)) => ensure!((cost - oracle).abs() < 1e-9, "n={n} m={m} h={h}: {cost} vs {oracle}"),
            Err(e) => ensure!(oracle.is_infinite(), "failed on feasible coset: {e}"),
        }
        instances += 1;
    }
    let mut trips = 0;
    for q in [0.1, 0.4] {
        let params = StcParams::new(7, q);
        for _ in 0..1000 {
            let cover = ImageGray::new(16, 16, (0..256).map(|_| rng.random()).collect()).unwrap();
            let rho: Vec<f64> = (0..256).map(|_| rng.random_range(0.05..5.0)).collect();
            let costs = CostMap::symmetric(16, 16, rho).unwrap();
            let msg: Vec<u8> = (0..params.capacity_bits(256)).map(|_| rng.random_range(0..2)).collect();
            let stego = stc_embed(&cover, &costs, &msg, &params).unwrap();
            ensure!(stc_extract(&stego, &params).unwrap() == msg, "round trip failed at q={q}");
            trips += 1;
        }
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(300), "runtime {t:?}");
    Ok(format!("{instances} exhaustive instances, {trips}/2000 round trips, {:.1}s", t.as_secs_f64()))
}

// --------------------------------------------------------------- simulator

fn simulator_statistics() -> Outcome {
    let n = 100_000;
    let p = ProbabilityMap::symmetric(1, n, &vec![0.3; n]).unwrap();
    let m = piecewise_modify(&p, &NoiseField::generate(1, n, 2024)).unwrap();
    let plus = m.m.iter().filter(|&&v| v == 1.0).count() as f64 / n as f64;
    let minus = m.m.iter().filter(|&&v| v == -1.0).count() as f64 / n as f64;
    ensure!((plus - 0.15).abs() <= 0.0034 && (minus - 0.15).abs() <= 0.0034, "frequencies {plus} {minus}");

    let gamma = 60.0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 50_000;
    let pp: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.45)).collect();
    let pn: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.45)).collect();
    let map = ProbabilityMap::from_planes(1, n, pp, pn).unwrap();
    let r = NoiseField::generate(1, n, 9);
    let d = piecewise_modify(&map, &r).unwrap();
    let c = double_tanh_modify(&map, &r, gamma).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let ri = r.r[i];
        if (ri - map.minus()[i]).abs() > 5.0 / gamma && (ri - (1.0 - map.plus()[i])).abs() > 5.0 / gamma {
            worst = worst.max((c.m[i] - d.m[i]).abs());
        }
    }
    ensure!(worst < 1e-3, "surrogate gap {worst:.2e}");
    Ok(format!("+1 {plus:.4}, -1 {minus:.4}, max gap {worst:.1e}"))
}

// ------------------------------------------------------- adversarial runs

struct Run {
    history: Vec<IterationRecord>,
    one_update_each: bool,
    /// Signed mean `capacity − H·W·q` on probe covers at 0, T/2 and T.
    signed_dev: [f64; 3],
    texture: [f64; 2],
    generator: Generator,
    elapsed: Duration,
}

fn signed_deviation(g: &Generator, covers: &[ImageGray]) -> f64 {
    let maps = g.probability_maps(covers, Mode::Eval).unwrap();
    let target = (SIDE * SIDE) as f64 * Q;
    maps.iter().map(|m| capacity(m) - target).sum::<f64>() / maps.len() as f64
}

fn smoke_config(seed: u64, beta: f64) -> TrainConfig {
    TrainConfig {
        iterations: SMOKE_ITERS,
        batch_size: 4,
        lr: 1e-3,
        d_lr: 1e-3,
        beta,
        payload: Q,
        seed,
        ..TrainConfig::default()
    }
}

fn smoke_run(sets: &[FluctuationSet], probe: &[ImageGray], seed: u64, beta: f64) -> Run {
    let start = Instant::now();
    let mut t = Trainer::new(smoke_config(seed, beta), sets.to_vec()).unwrap();
    let mut signed_dev = [signed_deviation(&t.state.generator, probe), 0.0, 0.0];
    let tex0 = texture_correlation(&t.state.generator, probe).unwrap();
    let mut one_update_each = true;
    for it in 1..=SMOKE_ITERS {
        let d1 = t.state.d1.store.trainable_fingerprint();
        let d2 = t.state.d2.store.trainable_fingerprint();
        let rec = t.step().unwrap().clone();
        let changed = (t.state.d1.store.trainable_fingerprint() != d1, t.state.d2.store.trainable_fingerprint() != d2);
        let expected = choose(LossPair { e1: rec.e1, e2: rec.e2 });
        one_update_each &= rec.updated == expected
            && changed == (expected == DiscriminatorId::D1, expected == DiscriminatorId::D2);
        if it == SMOKE_ITERS / 2 {
            signed_dev[1] = signed_deviation(&t.state.generator, probe);
        }
    }
    signed_dev[2] = signed_deviation(&t.state.generator, probe);
    let tex1 = texture_correlation(&t.state.generator, probe).unwrap();
    Run {
        history: t.state.history.clone(),
        one_update_each,
        signed_dev,
        texture: [tex0, tex1],
        generator: t.state.generator.clone(),
        elapsed: start.elapsed(),
    }
}

fn finite(h: &[IterationRecord]) -> bool {
    h.iter().all(|r| [r.l_g, r.l_a, r.l_e, r.e1, r.e2, r.payload_dev].iter().all(|v| v.is_finite()))
}

fn bitwise_equal(a: &[IterationRecord], b: &[IterationRecord]) -> bool {
    let key = |r: &IterationRecord| {
        (
            [r.l_g, r.l_a, r.l_e, r.e1, r.e2, r.payload_dev, r.lr].map(f64::to_bits),
            r.updated,
            r.batch.clone(),
            r.flu_index.clone(),
        )
    };
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| key(x) == key(y))
}

fn algorithm_contract(base: &Run, rerun: &Run) -> Outcome {
    ensure!(base.history.len() == SMOKE_ITERS as usize, "history length {}", base.history.len());
    ensure!(base.one_update_each, "an iteration updated the wrong discriminator or both");
    ensure!(finite(&base.history), "non-finite loss in history");
    ensure!(bitwise_equal(&base.history, &rerun.history), "rerun diverged");
    ensure!(base.elapsed < Duration::from_secs(1200), "runtime {:?}", base.elapsed);
    let d1 = base.history.iter().filter(|r| r.updated == DiscriminatorId::D1).count();
    Ok(format!(
        "{SMOKE_ITERS} iterations, D1 updated {d1}x, D2 {}x, rerun bit-identical, {:.0}s per run",
        SMOKE_ITERS as usize - d1,
        base.elapsed.as_secs_f64()
    ))
}

fn payload_convergence(with: &Run, without: &Run) -> Outcome {
    let reduction = 1.0 - with.signed_dev[2].abs() / with.signed_dev[0].abs();
    ensure!(reduction >= 0.5, "deviation {:.0} -> {:.0} bits", with.signed_dev[0], with.signed_dev[2]);
    // Without the entropy term nothing holds the capacity at the target:
    // over the second half it keeps drifting instead of settling.
    let drift = |r: &Run| r.signed_dev[2] - r.signed_dev[1];
    let target = (SIDE * SIDE) as f64 * Q;
    let (d_with, d_without) = (drift(with), drift(without));
    ensure!(
        d_without.abs() > 2.0 * d_with.abs() && d_without.abs() > 0.1 * target,
        "second-half drift beta=0 {d_without:.0} vs beta>0 {d_with:.0} bits"
    );
    Ok(format!(
        "|dev| {:.0} -> {:.0} bits ({:.0}% less); second-half drift {d_with:+.0} vs {d_without:+.0} with beta=0",
        with.signed_dev[0].abs(),
        with.signed_dev[2].abs(),
        100.0 * reduction
    ))
}

fn texture_trend(runs: &[Run]) -> Outcome {
    let ends: Vec<f64> = runs.iter().map(|r| r.texture[1]).collect();
    let rising = runs.iter().all(|r| r.texture[1] > r.texture[0]);
    let m = median(&ends).unwrap();
    let detail = runs.iter().map(|r| format!("{:.3}->{:.3}", r.texture[0], r.texture[1])).collect::<Vec<_>>().join(", ");
    ensure!(rising && m > 0.0, "spearman per seed {detail}");
    Ok(format!("spearman per seed {detail}; median end {m:.3}"))
}

fn security_ordering(runs: &[Run], covers: &[ImageGray]) -> Outcome {
    let start = Instant::now();
    let params = StcParams::new(7, Q);
    let split = |st: &[ImageGray], a: usize, b: usize| PairSet { covers: covers[a..b].to_vec(), stegos: st[a..b].to_vec() };
    let mut learned = Vec::new();
    let mut uniform = Vec::new();
    for (run, &seed) in runs.iter().zip(&SEEDS) {
        let maps = run.generator.probability_maps(covers, Mode::Eval).unwrap();
        let stegos = |costs: &dyn Fn(usize) -> CostMap| -> Vec<ImageGray> {
            (0..covers.len())
                .map(|k| embed_random(&covers[k], &costs(k), &params, 1000 * seed + k as u64).unwrap())
                .collect()
        };
        let learned_st = stegos(&|k| probs_to_costs(&maps[k]).unwrap());
        let flat = stegos(&|k| baseline_costs(&covers[k], BaselineScheme::Uniform));
        let cfg = SteganalyzerConfig { epochs: 20, seed, ..SteganalyzerConfig::default() };
        for (st, out) in [(&learned_st, &mut learned), (&flat, &mut uniform)] {
            let (_, rep) = train_steganalyzer(&split(st, 0, 200), &split(st, 200, 250), &split(st, 250, 500), &cfg).unwrap();
            out.push(rep.p_e);
        }
    }
    let (ml, mu) = (median(&learned).unwrap(), median(&uniform).unwrap());
    let t = start.elapsed() + runs.iter().map(|r| r.elapsed).sum::<Duration>();
    let detail = format!("p_e learned {learned:.3?} (median {ml:.3}), uniform {uniform:.3?} (median {mu:.3}), {:.0}s", t.as_secs_f64());
    ensure!(ml > mu && t < Duration::from_secs(7200), "{detail}");
    Ok(detail)
}

// -------------------------------------------------------------- volatility

fn volatility_concentration() -> Outcome {
    let side = 48;
    let n = side * side;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let base = ProceduralBackend::new(side, side).scene("volatility", 3).0;
    let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..6.0)).collect();
    let draw = |rng: &mut ChaCha8Rng| {
        let px = (0..n)
            .map(|i| {
                let z: f64 = StandardNormal.sample(rng);
                (base[i].clamp(20.0, 235.0) + sigma[i] * z).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        ImageGray::new(side, side, px).unwrap()
    };
    let cover = draw(&mut rng);
    let fluctuations = (0..24).map(|_| draw(&mut rng)).collect();
    let set = FluctuationSet {
        prompt: "volatility".into(),
        seed: 3,
        cover,
        fluctuations,
        cfg_values: (0..25).map(|k| 7.5 + 0.001 * k as f64).collect(),
        tau: 25.0,
        rejected_cfgs: vec![],
    };
    let vol = estimate_volatility_cost(&set).unwrap();
    let original = baseline_costs(&set.cover, BaselineScheme::HillLike);
    let (combined, _) = combine_costs(&original, &vol.costs, &CombineConfig::default()).unwrap();
    let mut freq = vec![0.0; n];
    let trials = 200;
    for t in 0..trials {
        let params = StcParams { key: t, ..StcParams::new(7, Q) };
        let stego = embed_random(&set.cover, &combined, &params, 5000 + t).unwrap();
        for (f, (a, b)) in freq.iter_mut().zip(set.cover.pixels().iter().zip(stego.pixels())) {
            if a != b {
                *f += 1.0 / trials as f64;
            }
        }
    }
    let rho = spearman(&vol.sigma, &freq).unwrap();
    let (c0, a0) = combine_costs(&original, &vol.costs, &CombineConfig { vc_beta: 0.0 }).unwrap();
    let (c1, _) = combine_costs(&original, &vol.costs, &CombineConfig { vc_beta: 1.0 }).unwrap();
    let exact0 = (0..n).all(|i| {
        let want = if c0.is_wet_at(i) { c0.plus()[i] } else { a0 * original.plus()[i].max(0.0) };
        c0.plus()[i] == want
    });
    let exact1 = (0..n).all(|i| vol.costs.is_wet_at(i) || original.is_wet_at(i) || c1.plus()[i] == vol.costs.plus()[i]);
    ensure!(rho > 0.0 && exact0 && exact1, "spearman(sigma, change rate) {rho:.3}, endpoints {exact0} {exact1}");
    Ok(format!("spearman(sigma, change rate) {rho:.3} over {trials} embeddings; endpoints exact"))
}

// -------------------------------------------------------------------- main

fn report(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    match &outcome {
        Ok(d) => println!("PASS {name}: {d}"),
        Err(d) => println!("FAIL {name}: {d}"),
    }
    outcome.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= report("formula suite", formula_suite);
    ok &= report("stc codec", stc_codec);
    ok &= report("simulator statistics", simulator_statistics);
    ok &= report("volatility combination", volatility_concentration);

    let backend = ProceduralBackend::new(SIDE, SIDE);
    let sets: Vec<FluctuationSet> = (0..500u64)
        .map(|k| build_fluctuation_set(&backend, &format!("prompt {k}"), k, 7.5, &default_sweep(), 25.0, 5).unwrap())
        .collect();
    let covers: Vec<ImageGray> = sets.iter().map(|s| s.cover.clone()).collect();
    let train = &sets[..200];
    let probe = &covers[250..282];

    let runs: Vec<Run> = SEEDS.iter().map(|&s| smoke_run(train, probe, s, 1e-7)).collect();
    let rerun = smoke_run(train, probe, SEEDS[0], 1e-7);
    let no_entropy = smoke_run(train, probe, SEEDS[0], 0.0);

    ok &= report("algorithm contract", || algorithm_contract(&runs[0], &rerun));
    ok &= report("payload convergence", || payload_convergence(&runs[0], &no_entropy));
    ok &= report("texture adaptivity", || texture_trend(&runs));
    ok &= report("security ordering", || security_ordering(&runs, &covers));

    if !ok {
        std::process::exit(1);
    }
}
