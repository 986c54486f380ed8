//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the verdicts always reach the console.

use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::Instant;

use arp_core::autorep::{
    accuracy, next_indicator, penalty_grad_aux, train_replace, train_supervised, History, IndicatorOptimizer, ReplacementConfig,
    TrainConfig,
};
use arp_core::dapa::{fit_closed_form, fit_monte_carlo, min_approx_loss, min_approx_loss_with, ChannelPolys, GaussianStats, LossForm, PolyCoeffs};
use arp_core::data::{two_spirals, Dataset};
use arp_core::nn::{Mode as NnMode, Model};
use arp_core::{FixedConfig, IndicatorState64, ProductOp, RingTensor, Tensor};
use arp_mpc::dealer::{Planner, Tape};
use arp_mpc::protocol::ulp_tolerance as tol;
use arp_mpc::{BinaryShareTensor, Channel, Counters, Dealer, PartyId, Phase, ProtocolError, Session, ShareTensor};
use arp_runtime::model_file::{ModelFile, Provenance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(u8, &str, Check); 11] = [
        (1, "DaPa closed form at (0, 2)", c1_closed_form),
        (2, "DaPa optimality over the grid", c2_optimality),
        (3, "minimum-loss correction", c3_loss_correction),
        (4, "exhaustive ltz / a2b at L=8", c4_exhaustive),
        (5, "plaintext/secure equivalence", c5_equivalence),
        (6, "round and byte accounting", c6_accounting),
        (7, "hysteresis truth table and log audit", c7_hysteresis),
        (8, "gradient checks", c8_gradients),
        (9, "end-to-end replacement on spirals", c9_replacement),
        (10, "two-process private inference", c10_private_inference),
        (11, "sensitivity sweeps", c11_sweeps),
    ];
    let mut failed = 0;
    for (id, name, f) in checks {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS [{id:>2}] {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{id:>2}] {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal_samples(mean: f64, sd: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(mean, sd).unwrap();
    (0..n).map(|_| d.sample(&mut rng)).collect()
}

fn c1_closed_form() -> Result<String, String> {
    let c = fit_closed_form(&GaussianStats::<f64>::new(0.0, 2.0).unwrap());
    let want = [0.28, 0.5, 0.14];
    let dev = (0..3).map(|i| (c.get(i) - want[i]).abs()).fold(0.0, f64::max);
    ensure(dev <= 0.005, || format!("coefficients {:?}", c.coeffs()))?;
    Ok(format!("({:.4}, {:.4}, {:.4}), max deviation {dev:.4}", c.get(0), c.get(1), c.get(2)))
}

/// Empirical loss change from moving coefficient `k` by `delta`, summed per
/// sample as `(p' - p)(p' + p - 2 relu)` to avoid cancellation.
fn loss_delta(xs: &[f64], c: &PolyCoeffs<f64>, k: usize, delta: f64) -> f64 {
    let mut acc = 0.0;
    for &z in xs {
        let p = c.eval(z);
        let d = delta * z.powi(k as i32);
        acc += d * (2.0 * p + d - 2.0 * z.max(0.0));
    }
    acc / xs.len() as f64
}

fn c2_optimality() -> Result<String, String> {
    let mus = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
    let sds = [0.25, 0.5, 1.0, 2.0, 4.0];
    let mut worst = 0.0f64;
    let mut perturbations = 0;
    let mut skipped = 0;
    for (a, &mu) in mus.iter().enumerate() {
        for (b, &sd) in sds.iter().enumerate() {
            let xs = normal_samples(mu, sd, 1_000_000, (a * 16 + b) as u64);
            let cf = fit_closed_form(&GaussianStats::new(mu, sd * sd).unwrap());
            let mc = fit_monte_carlo(&xs, 2).map_err(|e| e.to_string())?;
            for i in 0..3 {
                let d = (mc.get(i) - cf.get(i)).abs();
                worst = worst.max(d);
                ensure(d <= 1e-2, || format!("mu {mu} sd {sd} c{i}: mc {} vs closed {}", mc.get(i), cf.get(i)))?;
            }
            for k in 0..3 {
                let c = cf.get(k);
                // A coefficient that is zero to working precision has no
                // 10% neighbourhood to compare against.
                if c.abs() < 1e-9 {
                    skipped += 2;
                    continue;
                }
                for f in [0.1, -0.1] {
                    let d = loss_delta(&xs, &cf, k, f * c);
                    ensure(d > 0.0, || format!("mu {mu} sd {sd}: c{k} x{} lowers loss by {:e}", 1.0 + f, -d))?;
                    perturbations += 1;
                }
            }
        }
    }
    Ok(format!(
        "35 cells, max |mc - closed| {worst:.2e}, {perturbations} perturbations all raise loss ({skipped} on coefficients below 1e-9 skipped)"
    ))
}

fn c3_loss_correction() -> Result<String, String> {
    let g = GaussianStats::new(0.0, 2.0).unwrap();
    let want = 2.0 * (0.25 - 3.0 / (4.0 * std::f64::consts::PI));
    let closed = min_approx_loss(&g);
    let printed = min_approx_loss_with(&g, LossForm::AsPrinted);
    ensure((closed - want).abs() < 1e-12, || format!("closed form {closed} vs {want}"))?;
    let p = fit_closed_form(&g);
    let n = 10_000_000;
    let xs = normal_samples(0.0, 2f64.sqrt(), n, 314);
    let (mut s, mut s2) = (0.0, 0.0);
    for &z in &xs {
        let e = (z.max(0.0) - p.eval(z)).powi(2);
        s += e;
        s2 += e * e;
    }
    let mean = s / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    let z_closed = (closed - mean).abs() / se;
    let z_printed = (printed - mean).abs() / se;
    ensure(z_closed <= 3.0, || format!("corrected form {z_closed:.2} standard errors from {mean}"))?;
    ensure(z_printed > 5.0, || format!("as-printed form only {z_printed:.2} standard errors away"))?;
    Ok(format!(
        "MC {mean:.5} ± {se:.1e}; corrected {closed:.5} at {z_closed:.2} SE, as printed {printed:.4} at {z_printed:.0} SE"
    ))
}

/// Plans `op` on a dry session, deals, and runs both parties in memory on the
/// given per-party input shares. Returns both output payloads and party 0's
/// per-phase counters.
fn secure_run(
    cfg: FixedConfig,
    parts: [Vec<ShareTensor>; 2],
    plan: &dyn Fn(&mut Session<Planner>, &[ShareTensor]) -> Result<ShareTensor, ProtocolError>,
    run: &(dyn Fn(&mut Session<Tape>, &[ShareTensor]) -> Result<ShareTensor, ProtocolError> + Sync),
) -> ([RingTensor; 2], [Counters; 5]) {
    let bits = cfg.total_bits();
    let mut dry = Session::new(Channel::dry(PartyId::P0, bits), Planner::new(bits), cfg);
    plan(&mut dry, &parts[0]).unwrap();
    let (t0, t1) = Dealer::new(cfg, 21).deal(&dry.into_parts().1.into_requests()).unwrap();
    let (c0, c1) = Channel::memory_pair(bits);
    let go = |chan: Channel, tape: Tape, xs: &[ShareTensor]| {
        let mut s = Session::new(chan, tape, cfg);
        let y = run(&mut s, xs).unwrap();
        (y.payload, Phase::ALL.map(|p| s.channel().counters(p)))
    };
    let ((y0, k0), (y1, _)) = std::thread::scope(|sc| {
        let h = sc.spawn(|| go(c1, t1, &parts[1]));
        (go(c0, t0, &parts[0]), h.join().unwrap())
    });
    ([y0, y1], k0)
}

fn split(cfg: FixedConfig, inputs: &[(RingTensor, u32)], seed: u64) -> [Vec<ShareTensor>; 2] {
    let mut d = Dealer::new(cfg, seed);
    let mut parts = [Vec::new(), Vec::new()];
    for (x, s) in inputs {
        let (a, b) = d.gen_shares(x);
        parts[0].push(ShareTensor { party: PartyId::P0, payload: a, scale: *s });
        parts[1].push(ShareTensor { party: PartyId::P1, payload: b, scale: *s });
    }
    parts
}

macro_rules! both {
    (|$s:ident, $x:ident| $body:expr) => {
        (
            &|$s: &mut Session<Planner>, $x: &[ShareTensor]| -> Result<ShareTensor, ProtocolError> { $body },
            &|$s: &mut Session<Tape>, $x: &[ShareTensor]| -> Result<ShareTensor, ProtocolError> { $body },
        )
    };
}

fn to_binary(b: BinaryShareTensor) -> ShareTensor {
    ShareTensor { party: b.party, payload: b.payload, scale: 0 }
}

fn c4_exhaustive() -> Result<String, String> {
    let cfg = FixedConfig::new(8, 4).unwrap();
    let all = RingTensor::new(&[256], 8, (0..256).collect()).unwrap();
    let mut checked = 0;
    for seed in 0..8 {
        let parts = split(cfg, &[(all.clone(), 4)], seed);
        let (p, r) = both!(|s, x| s.ltz(&x[0]));
        let (out, _) = secure_run(cfg, parts.clone(), p, r);
        let bits = out[0].add(&out[1]);
        for (w, b) in all.data().iter().zip(bits.data()) {
            ensure(*b == u64::from(cfg.to_signed(*w) < 0), || format!("ltz({w:#04x}) = {b}"))?;
        }
        let (p, r) = both!(|s, x| Ok(to_binary(s.a2b(&x[0])?)));
        let (out, _) = secure_run(cfg, parts, p, r);
        ensure(out[0].xor(&out[1]) == all, || "a2b does not reconstruct".into())?;
        checked += 256;
    }
    Ok(format!("{checked} ltz and {checked} a2b cases over 8 share splits, all exact"))
}

fn encoded(cfg: &FixedConfig, v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| cfg.decode_scalar(cfg.encode_scalar(x).unwrap())).collect()
}

fn words(cfg: &FixedConfig, shape: &[usize], v: &[f64]) -> RingTensor {
    RingTensor::new(shape, cfg.total_bits(), v.iter().map(|&x| cfg.encode_scalar(x).unwrap()).collect()).unwrap()
}

fn c5_equivalence() -> Result<String, String> {
    const N: usize = 10_000;
    let cfg = FixedConfig::default();
    let ulp = cfg.ulp();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut uni = |n: usize, r: f64| encoded(&cfg, &(0..n).map(|_| rng.random_range(-r..r)).collect::<Vec<_>>());
    let mut report = Vec::new();
    let compare = |name: &str, out: [RingTensor; 2], want: &[f64], tols: &dyn Fn(usize) -> f64| -> Result<String, String> {
        let got: Vec<f64> = out[0].add(&out[1]).data().iter().map(|&w| cfg.decode_scalar(w)).collect();
        ensure(got.len() >= N, || format!("{name}: {} cases", got.len()))?;
        let mut worst = 0.0f64;
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            let e = (g - w).abs() / ulp;
            ensure(e <= tols(i) + 1e-6, || format!("{name}[{i}]: {g} vs {w}, {e:.2} ulp > {}", tols(i)))?;
            worst = worst.max(e);
        }
        Ok(format!("{name} {worst:.2}"))
    };

    let (x, y) = (uni(N, 1e3), uni(N, 1e3));
    let a = encoded(&cfg, &[0.615])[0];
    let (p, r) = both!(|s, v| s.lin_combine(0.615, &v[0], &v[1]));
    let (out, _) = secure_run(cfg, split(cfg, &[(words(&cfg, &[N], &x), 16), (words(&cfg, &[N], &y), 16)], 1), p, r);
    report.push(compare("lin_combine", out, &x.iter().zip(&y).map(|(p, q)| a * p + q).collect::<Vec<_>>(), &|_| tol::LIN_COMBINE)?);

    let (rows, k, m) = (N / 4, 8, 4);
    let (xm, wm) = (uni(rows * k, 50.0), uni(k * m, 2.0));
    let wt = words(&cfg, &[k, m], &wm);
    let (p, r) = both!(|s, v| s.mul_public(&v[0], &v[1].payload, 16, ProductOp::Matmul));
    // The public weight rides along as a second input whose payload both
    // parties hold in full.
    let mut parts = split(cfg, &[(words(&cfg, &[rows, k], &xm), 16)], 2);
    for part in &mut parts {
        let party = part[0].party;
        part.push(ShareTensor { party, payload: wt.clone(), scale: 16 });
    }
    let (out, _) = secure_run(cfg, parts, p, r);
    let want: Vec<f64> = (0..rows * m).map(|o| (0..k).map(|t| xm[(o / m) * k + t] * wm[t * m + o % m]).sum()).collect();
    report.push(compare("mul_public", out, &want, &|_| tol::MUL_PUBLIC)?);

    let (x, y) = (uni(N, 100.0), uni(N, 100.0));
    let (p, r) = both!(|s, v| s.mul_beaver(&v[0], &v[1], ProductOp::Elementwise));
    let (out, _) = secure_run(cfg, split(cfg, &[(words(&cfg, &[N], &x), 16), (words(&cfg, &[N], &y), 16)], 3), p, r);
    report.push(compare("mul_beaver", out, &x.iter().zip(&y).map(|(p, q)| p * q).collect::<Vec<_>>(), &|_| tol::MUL_BEAVER)?);

    let x = uni(N, 300.0);
    let (p, r) = both!(|s, v| s.square(&v[0]));
    let (out, _) = secure_run(cfg, split(cfg, &[(words(&cfg, &[N], &x), 16)], 4), p, r);
    report.push(compare("square", out, &x.iter().map(|p| p * p).collect::<Vec<_>>(), &|_| tol::SQUARE)?);

    let bits: Vec<u64> = (0..N).map(|i| (i as u64 * 2_654_435_761 >> 7) & 1).collect();
    let (p, r) = both!(|s, v| s.b2a(&BinaryShareTensor {
        party: v[0].party,
        payload: v[0].payload.map(|w| w & 1),
    }));
    let (out, _) = secure_run(cfg, split(cfg, &[(RingTensor::new(&[N], 64, bits.clone()).unwrap(), 0)], 5), p, r);
    let got = out[0].add(&out[1]);
    ensure(got.data() == &bits[..], || "b2a output differs from the shared bits".into())?;
    report.push(format!("b2a {:.2}", tol::B2A));

    let x = uni(N, 1e4);
    let (p, r) = both!(|s, v| s.relu(&v[0]));
    let (out, _) = secure_run(cfg, split(cfg, &[(words(&cfg, &[N], &x), 16)], 6), p, r);
    report.push(compare("relu", out, &x.iter().map(|p| p.max(0.0)).collect::<Vec<_>>(), &|_| tol::RELU)?);

    let ch = 4;
    let polys = ChannelPolys::new(
        (0..ch)
            .map(|i| fit_closed_form(&GaussianStats::new(i as f64 * 0.5 - 1.0, 0.5 + i as f64).unwrap()))
            .collect(),
    );
    let kc: Vec<Vec<f64>> = polys.rows().iter().map(|q| encoded(&cfg, &[q.get(0), q.get(1), q.get(2)])).collect();
    let poly_at = |c: usize, v: f64| kc[c][0] + kc[c][1] * v + kc[c][2] * v * v;
    let poly_tol = |c: usize| tol::POLY + kc[c][2].abs() * tol::SQUARE;
    let x = uni(N, 8.0);
    let pp = polys.clone();
    let plan = |s: &mut Session<Planner>, v: &[ShareTensor]| s.dapa_eval(&v[0], &pp);
    let run = |s: &mut Session<Tape>, v: &[ShareTensor]| s.dapa_eval(&v[0], &polys);
    let (out, _) = secure_run(cfg, split(cfg, &[(words(&cfg, &[N / ch, ch], &x), 16)], 7), &plan, &run);
    let want: Vec<f64> = x.iter().enumerate().map(|(i, &v)| poly_at(i % ch, v)).collect();
    report.push(compare("dapa_eval", out, &want, &|i| poly_tol(i % ch))?);

    let side = 5;
    let per = ch * side;
    let mask = Tensor::from_vec(&[ch, side], (0..per).map(|i| u8::from(i % 3 != 0)).collect());
    let x = uni(N, 8.0);
    let (pp, mm) = (polys.clone(), mask.clone());
    let plan = |s: &mut Session<Planner>, v: &[ShareTensor]| s.hybrid_activation(&v[0], &mm, &pp);
    let run = |s: &mut Session<Tape>, v: &[ShareTensor]| s.hybrid_activation(&v[0], &mask, &polys);
    let (out, _) = secure_run(cfg, split(cfg, &[(words(&cfg, &[N / per, ch, side], &x), 16)], 8), &plan, &run);
    let relu_at = |i: usize| mask.data()[i % per] == 1;
    let want: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| if relu_at(i) { v.max(0.0) } else { poly_at((i / side) % ch, v) })
        .collect();
    report.push(compare("hybrid_activation", out, &want, &|i| if relu_at(i) { tol::RELU } else { poly_tol((i / side) % ch) })?);

    Ok(format!("{N} cases per op; worst ulp: {}", report.join(", ")))
}

fn total(k: &[Counters; 5]) -> Counters {
    k.iter().fold(Counters::default(), |a, c| Counters {
        bytes_sent: a.bytes_sent + c.bytes_sent,
        bytes_received: a.bytes_received + c.bytes_received,
        rounds: a.rounds + c.rounds,
        words_sent: a.words_sent + c.words_sent,
    })
}

fn c6_accounting() -> Result<String, String> {
    let mut lines = Vec::new();
    for bits in [8u32, 16, 32, 64] {
        let cfg = FixedConfig::new(bits, 4).unwrap();
        let x = RingTensor::new(&[3, 5], bits, (0..15).map(|i| i * 977).collect()).unwrap();
        let parts = split(cfg, &[(x.clone(), 4), (x.clone(), 4)], 9);
        let run = |p: &dyn Fn(&mut Session<Planner>, &[ShareTensor]) -> Result<ShareTensor, ProtocolError>,
                   r: &(dyn Fn(&mut Session<Tape>, &[ShareTensor]) -> Result<ShareTensor, ProtocolError> + Sync)| {
            total(&secure_run(cfg, parts.clone(), p, r).1)
        };
        let (p, r) = both!(|s, v| {
            let y = s.add(&v[0], &v[1])?;
            let y = s.lin_combine(0.5, &y, &v[1])?;
            let y = s.add_public(&y, &v[0].payload)?;
            Ok(to_binary(s.msb(&BinaryShareTensor { party: y.party, payload: y.payload })))
        });
        let local = run(p, r);
        let (p, r) = both!(|s, v| s.mul_beaver(&v[0], &v[1], ProductOp::Elementwise));
        let mul = run(p, r);
        let (p, r) = both!(|s, v| s.square(&v[0]));
        let sq = run(p, r);
        let (p, r) = both!(|s, v| s.b2a(&BinaryShareTensor { party: v[0].party, payload: v[0].payload.map(|w| w & 1) }));
        let b2a = run(p, r);
        let (p, r) = both!(|s, v| Ok(to_binary(s.a2b(&v[0])?)));
        let a2b = run(p, r);
        let levels = 1 + (bits as f64).log2().ceil() as u64;
        ensure(local == Counters::default(), || format!("L={bits}: local ops cost {local:?}"))?;
        for (name, c) in [("mul", mul), ("square", sq), ("b2a", b2a)] {
            ensure(c.rounds == 1, || format!("L={bits}: {name} took {} rounds", c.rounds))?;
        }
        ensure(a2b.rounds == levels, || format!("L={bits}: a2b took {} rounds, want {levels}", a2b.rounds))?;
        ensure(2 * sq.words_sent == mul.words_sent, || format!("L={bits}: square {} vs mul {} words", sq.words_sent, mul.words_sent))?;
        let wire = x.wire_len() as u64;
        ensure(mul.bytes_sent == 4 + 2 * wire && sq.bytes_sent == 4 + wire, || format!("L={bits}: frame bytes {mul:?} {sq:?}"))?;
        lines.push(format!("L={bits}: a2b {levels}"));
    }
    Ok(format!("local 0, mul/square/b2a 1 round, square opens half the words; {}", lines.join(", ")))
}

/// Shared two-spiral setup: data and a trained all-ReLU baseline.
struct Spiral {
    train: Dataset<f64>,
    test: Dataset<f64>,
    baseline: Model<f64>,
    train_acc: f64,
    test_acc: f64,
}

const SPIRAL_TURNS: f64 = 2.0;

fn spiral() -> &'static Spiral {
    static S: OnceLock<Spiral> = OnceLock::new();
    S.get_or_init(|| {
        let train = two_spirals::<f64>(500, SPIRAL_TURNS, 0.08, 100);
        let test = two_spirals::<f64>(200, SPIRAL_TURNS, 0.08, 101);
        let mut baseline = Model::mlp(&[2, 64, 64, 2], 102);
        let cfg = TrainConfig {
            epochs: 200,
            lr: 1e-2,
            seed: 103,
            ..TrainConfig::default()
        };
        train_supervised(&mut baseline, &train, &cfg).unwrap();
        let train_acc = accuracy(&baseline, &train).unwrap();
        let test_acc = accuracy(&baseline, &test).unwrap();
        Spiral {
            train,
            test,
            baseline,
            train_acc,
            test_acc,
        }
    })
}

fn replace_cfg(budget: usize) -> ReplacementConfig {
    ReplacementConfig {
        budget,
        lr_weights: 1e-3,
        epochs: 60,
        seed: 104,
        ..ReplacementConfig::default()
    }
}

fn replaced(cfg: &ReplacementConfig) -> (Model<f64>, History) {
    let s = spiral();
    let mut m = s.baseline.clone();
    let (_, h) = train_replace(&mut m, &s.train, Some(&s.test), cfg).unwrap();
    (m, h)
}

fn half_model() -> &'static (Model<f64>, History) {
    static M: OnceLock<(Model<f64>, History)> = OnceLock::new();
    M.get_or_init(|| {
        let elements = spiral().baseline.activation_elements();
        replaced(&ReplacementConfig {
            log_transitions: true,
            ..replace_cfg(elements / 2)
        })
    })
}

fn c7_hysteresis() -> Result<String, String> {
    let th = 0.003;
    let rows = [(true, 0.01, true), (true, -0.01, false), (false, 0.01, true), (false, -0.01, false)];
    let band = [(true, 0.001, true), (true, -0.001, true), (false, 0.001, false), (false, -0.001, false)];
    for (prev, aux, want) in rows.iter().chain(&band) {
        ensure(next_indicator(*prev, *aux, th) == *want, || format!("prev {prev} aux {aux}"))?;
    }
    // Constructed states driven through an update step.
    let mask = Tensor::from_vec(&[4], vec![1u8, 1, 0, 0]);
    let aux = Tensor::from_vec(&[4], vec![0.002, 0.002, -0.002, -0.002]);
    let mut st = IndicatorState64::from_parts(mask, aux, th).map_err(|e| e.to_string())?;
    let grad = Tensor::from_vec(&[4], vec![-1.0, 1.0, -1.0, 1.0]);
    st.hysteresis_step(&grad, &mut IndicatorOptimizer::Sgd, 0.01).map_err(|e| e.to_string())?;
    ensure(st.mask().data() == [1, 0, 1, 0], || format!("constructed rows gave {:?}", st.mask().data()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100_000 {
        let prev = rng.random_bool(0.5);
        let aux: f64 = rng.random_range(-0.01..0.01);
        ensure(next_indicator(prev, aux, 0.0) == (aux > 0.0), || format!("t_h = 0 at prev {prev}, aux {aux}"))?;
    }

    let (_, h) = half_model();
    ensure(!h.transitions.is_empty(), || "no transitions logged".into())?;
    ensure(h.first_violation().is_none(), || format!("transition {:?} breaks the table", h.first_violation()))?;
    let flips = h.transitions.iter().filter(|t| t.before != t.after).count();

    let zero = replaced(&ReplacementConfig {
        log_transitions: true,
        threshold: 0.0,
        epochs: 10,
        finetune_epochs: 0,
        ..replace_cfg(spiral().baseline.activation_elements() / 2)
    })
    .1;
    let bad = zero.transitions.iter().filter(|t| t.after != (t.aux > 0.0)).count();
    ensure(bad == 0, || format!("{bad} t_h = 0 transitions differ from the sign rule"))?;
    Ok(format!(
        "8 table rows, 4 constructed updates, {} logged transitions ({flips} flips) obey the table; {} t_h=0 transitions follow sign(m_W)",
        h.transitions.len(),
        zero.transitions.len()
    ))
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn c8_gradients() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut m = Model::<f64>::mlp(&[2, 16, 2], 8);
    for act in m.activations_mut() {
        for i in 0..act.indicator.len() {
            act.indicator.set(i, i % 2 == 0);
        }
    }
    let x = random(&[8, 2], &mut rng);
    let (y, trace) = m.forward(&x, NnMode::Train).unwrap();
    let r = random(y.shape(), &mut rng);
    m.backward(&trace, &r).unwrap();
    let grads: Vec<Vec<f64>> = m.params_mut().iter().map(|p| p.grad.data().to_vec()).collect();
    let loss = |m: &mut Model<f64>| -> f64 {
        let (y, _) = m.forward(&x, NnMode::Train).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let h = 1e-6;
    let (mut worst, mut worst_abs) = (0.0f64, 0.0f64);
    let mut n = 0;
    for (pi, g) in grads.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let (mut plus, mut minus) = (m.clone(), m.clone());
            plus.params_mut()[pi].value.data_mut()[i] += h;
            minus.params_mut()[pi].value.data_mut()[i] -= h;
            let num = (loss(&mut plus) - loss(&mut minus)) / (2.0 * h);
            let d = (a - num).abs();
            worst_abs = worst_abs.max(d);
            // Central differences carry ~1e-10 absolute noise.
            if d >= 1e-8 {
                worst = worst.max(d / a.abs().max(num.abs()));
            }
            n += 1;
        }
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:e}"))?;

    let mut st = IndicatorState64::new(&[32], 0.1, 0.003);
    for i in 0..12 {
        st.set(i, false);
    }
    for budget in [20, 25, 32] {
        let g = penalty_grad_aux(&st, 20, budget, 1.0);
        ensure(g.data().iter().all(|&v| v == 0.0), || format!("penalty gradient nonzero at count 20, budget {budget}"))?;
    }
    let over = penalty_grad_aux(&st, 20, 19, 1.0);
    ensure(over.data().iter().all(|&v| v > 0.0), || "penalty gradient not active above budget".into())?;
    Ok(format!("{n} parameters, max relative error {worst:.1e} (max absolute {worst_abs:.1e}); penalty gradient exactly zero at count <= N"))
}

fn c9_replacement() -> Result<String, String> {
    let s = spiral();
    ensure(s.train_acc >= 0.97, || format!("baseline train accuracy {:.4}", s.train_acc))?;
    let elements = s.baseline.activation_elements();
    let mut parts = vec![format!("baseline train {:.3} test {:.3}", s.train_acc, s.test_acc)];
    for (pct, band) in [(50usize, 0.02), (10, 0.06)] {
        let budget = (elements * pct + 50) / 100;
        let (m, h) = if pct == 50 { half_model().clone() } else { replaced(&replace_cfg(budget)) };
        let count = m.relu_count();
        let acc = accuracy(&m, &s.test).unwrap();
        ensure(count.abs_diff(budget) as f64 <= 0.02 * budget as f64, || format!("{pct}%: count {count} vs budget {budget}"))?;
        ensure(acc >= s.test_acc - band, || format!("{pct}%: test {acc:.4} vs baseline {:.4}", s.test_acc))?;
        parts.push(format!(
            "{pct}%: {count}/{elements} ReLUs (joint phase ended at {}), test {acc:.3}",
            h.joint_count
        ));
    }
    Ok(parts.join("; "))
}

fn arp(dir: &Path, args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_arp"));
    c.current_dir(dir).env_remove("ARP_SEED").args(args);
    c
}

fn checked(o: Output) -> Result<String, String> {
    let out = String::from_utf8_lossy(&o.stdout).into_owned();
    ensure(o.status.success(), || format!("arp failed: {}", String::from_utf8_lossy(&o.stderr)))?;
    Ok(out)
}

fn field<'a>(summary: &'a str, key: &str) -> &'a str {
    summary.split(key).nth(1).unwrap_or("").split_whitespace().next().unwrap_or("")
}

fn comparison_bytes(report: &Path) -> u64 {
    let text = std::fs::read_to_string(report).unwrap();
    let row = text.lines().find(|l| l.starts_with("comparison,")).unwrap();
    row.split(',').nth(1).unwrap().parse().unwrap()
}

fn c10_private_inference() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let s = spiral();
    let (m, _) = half_model();
    ModelFile::new(FixedConfig::default(), m.clone(), Provenance::new(104, "acceptance 50%"))
        .save(&d.join("half.arpm"))
        .map_err(|e| e.to_string())?;
    s.test.take(256).write_csv(&d.join("inputs.csv")).map_err(|e| e.to_string())?;
    checked(arp(d, &["export", "--model", "half.arpm", "--out", "relu.arpm", "--mask", "relu"]).output().unwrap())?;

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let common = ["--seed", "7", "infer-private", "--model", "half.arpm", "--inputs", "inputs.csv"];
    let p0 = arp(d, &common)
        .args(["--listen", &addr, "--party", "0", "--logits", "l0.csv", "--report", "r0.csv"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let p1 = arp(d, &common)
        .args(["--connect", &addr, "--party", "1", "--logits", "l1.csv", "--report", "r1.csv"])
        .output()
        .unwrap();
    let s0 = checked(p0.wait_with_output().unwrap())?;
    let s1 = checked(p1)?;
    let mem = checked(arp(d, &common).args(["--logits", "lm.csv", "--report", "rm.csv"]).output().unwrap())?;
    let relu = checked(arp(d, &["--seed", "7", "infer-private", "--model", "relu.arpm", "--inputs", "inputs.csv", "--report", "rr.csv"]).output().unwrap())?;

    let agreement: f64 = field(&s0, "agreement ").parse().map_err(|_| format!("no agreement in {s0:?}"))?;
    ensure(agreement >= 0.99, || format!("agreement {agreement}"))?;
    let (t0, t1, tm) = (field(&s0, "transcript "), field(&s1, "transcript "), field(&mem, "transcript "));
    ensure(t0 == t1 && t0 == tm && !t0.is_empty(), || format!("transcripts {t0} / {t1} / {tm}"))?;
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    ensure(read("l0.csv") == read("l1.csv") && read("l0.csv") == read("lm.csv"), || "logits differ between runs".into())?;
    let tcp_total: u64 = field(&s0, "bytes ").parse::<u64>().unwrap() + field(&s1, "bytes ").parse::<u64>().unwrap();
    let mem_total: u64 = field(&mem, "bytes ").parse().unwrap();
    ensure(tcp_total == mem_total, || format!("TCP bytes {tcp_total} vs memory {mem_total}"))?;
    let (half_cmp, relu_cmp) = (comparison_bytes(&d.join("rm.csv")), comparison_bytes(&d.join("rr.csv")));
    ensure(half_cmp < relu_cmp, || format!("comparison bytes {half_cmp} vs all-ReLU {relu_cmp}"))?;
    let relu_agree = field(&relu, "agreement ");
    Ok(format!(
        "256 inputs over TCP, agreement {agreement:.4}; transcript {}… identical in memory and TCP; comparison bytes {half_cmp} vs {relu_cmp} all-ReLU (agreement {relu_agree})",
        &t0[..16]
    ))
}

fn c11_sweeps() -> Result<String, String> {
    let s = spiral();
    let budget = s.baseline.activation_elements() / 2;
    let mut late = std::collections::BTreeMap::new();
    let mut cells = Vec::new();
    for th in [0.0, 0.003, 0.01] {
        for mu in [0.5, 1.0, 2.0] {
            let (m, h) = replaced(&ReplacementConfig {
                threshold: th,
                mu,
                ..replace_cfg(budget)
            });
            let diverged = h.epochs.iter().any(|r| !r.loss.is_finite());
            let acc = accuracy(&m, &s.test).unwrap();
            ensure(!diverged && acc > 0.6, || format!("t_h {th}, mu {mu}: diverged or test accuracy {acc:.3}"))?;
            if mu == 1.0 {
                late.insert((th * 1e4) as u32, h.late_flips());
            }
            cells.push(format!("{th}/{mu}:{acc:.3}"));
        }
    }
    let (f0, f3) = (late[&0], late[&30]);
    ensure(f0 > 0 && f0 >= 2 * f3, || format!("late flips t_h=0 {f0} vs t_h=0.003 {f3}"))?;
    Ok(format!(
        "9 runs finite (t_h/mu:test acc {}); late flips at mu=1: t_h=0 {f0}, 0.003 {f3}, 0.01 {}",
        cells.join(" "),
        late[&100]
    ))
}

