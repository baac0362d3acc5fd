//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Every expected value here is recomputed by code in this file (finite
//! differences, naive counting loops, closed-form schedules) rather than
//! taken from the library under test.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use banet::data::{synth_generate, Sample, SynthConfig};
use banet::loss::{total_loss, DEFAULT_LAMBDAS};
use banet::metrics::{confusion, metrics, REPORT_HEADER};
use banet::model::heads::pyramid_differences;
use banet::model::{cff_forward, interactive_attention, Ablation, BaNet, ModelConfig};
use banet::params::{BoundParams, ParameterStore};
use banet::tensor::kernels::ConvGeom;
use banet::tensor::{Shape, Tape, Tensor, TensorError, Var};
use banet::train::checkpoint::{load_checkpoint, save_checkpoint};
use banet::train::trainer::{CHECKPOINT_FILE, LOG_FILE, OPTIMIZER_FILE, STATE_FILE};
use banet::train::{evaluate, evaluate_csv, poly_lr, sgd_step, OptimizerState, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-6;
const OP_TOL: f64 = 1e-5;
const NET_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;

type Objective<'a> = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError> + 'a>;

/// Scalar `sum(f(inputs) * proj)` and, when asked, its tape gradients.
fn project(f: &Objective, inputs: &[Tensor<f64>], proj: &Tensor<f64>, grads: bool) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).expect("objective evaluates");
    let value: f64 = tape.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum();
    if !grads {
        return (value, Vec::new());
    }
    let r = tape.constant(proj.clone());
    let weighted = tape.mul(out, r).unwrap();
    let loss = tape.sum(weighted).unwrap();
    tape.backward(loss).unwrap();
    (value, vars.iter().map(|&v| tape.grad(v).unwrap().clone()).collect())
}

/// Worst `|analytic - numeric| / max(1, |analytic|, |numeric|)` over the
/// checked coordinates, using central differences with a fixed step.
fn fd_error(f: &Objective, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, coords: Option<usize>) -> f64 {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("objective evaluates");
        tape.shape(out)
    };
    let proj = Tensor::from_fn(out_shape, |_| rng.random_range(-1.0..1.0));
    let (_, analytic) = project(f, inputs, &proj, true);
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picked: Vec<usize> = match coords {
            Some(m) if m < n => (0..m).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in picked {
            let x = input.data()[i];
            work[k].data_mut()[i] = x + FD_STEP;
            let (hi, _) = project(f, &work, &proj, false);
            work[k].data_mut()[i] = x - FD_STEP;
            let (lo, _) = project(f, &work, &proj, false);
            work[k].data_mut()[i] = x;
            let numeric = (hi - lo) / (2.0 * FD_STEP);
            let a = analytic[k].data()[i];
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
    }
    worst
}

fn gauss(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> Tensor<f64> {
    // Sum of uniforms: cheap, symmetric, unbounded enough for these checks.
    Tensor::from_fn(shape, |_| (0..4).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>() * scale * 0.87)
}

fn op_case<'a>(op: &str, rng: &mut ChaCha8Rng) -> (Objective<'a>, Vec<Tensor<f64>>) {
    let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(5..=8), rng.random_range(5..=8));
    let s = Shape::new(n, c, h, w);
    match op {
        "conv2d" => {
            let co = rng.random_range(1..=3);
            let k = [1, 3, 5][rng.random_range(0..3)];
            let geom = ConvGeom::new(rng.random_range(1..=2), rng.random_range(0..=k / 2), 1);
            let ins = vec![gauss(rng, s, 1.0), gauss(rng, Shape::new(co, c, k, k), 0.5), gauss(rng, Shape::new(co, 1, 1, 1), 0.5)];
            (Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), geom)), ins)
        }
        "conv2d dilation 2" => {
            let co = rng.random_range(1..=3);
            let geom = ConvGeom::new(rng.random_range(1..=2), rng.random_range(0..=2), 2);
            let ins = vec![gauss(rng, s, 1.0), gauss(rng, Shape::new(co, c, 3, 3), 0.5)];
            (Box::new(move |t, v| t.conv2d(v[0], v[1], None, geom)), ins)
        }
        "avg_pool2d" => {
            let k = [3, 5, 7][rng.random_range(0..3)];
            let stride = rng.random_range(1..=2);
            (Box::new(move |t, v| t.avg_pool2d(v[0], k, stride, k / 2)), vec![gauss(rng, s, 1.0)])
        }
        "global_avg_pool" => (Box::new(|t, v| t.global_avg_pool(v[0])), vec![gauss(rng, s, 1.0)]),
        "bilinear_resize" => {
            let (oh, ow) = (rng.random_range(2..=16), rng.random_range(2..=16));
            (Box::new(move |t, v| t.bilinear_resize(v[0], oh, ow)), vec![gauss(rng, s, 1.0)])
        }
        "sigmoid" => (Box::new(|t, v| t.sigmoid(v[0])), vec![gauss(rng, s, 2.0)]),
        "relu" => {
            // Keep every input at least 0.05 from the kink.
            let x = Tensor::from_fn(s, |_| {
                let m = rng.random_range(0.05..2.0);
                if rng.random_bool(0.5) { m } else { -m }
            });
            (Box::new(|t, v| t.relu(v[0])), vec![x])
        }
        "add" => (Box::new(|t, v| t.add(v[0], v[1])), vec![gauss(rng, s, 1.0), gauss(rng, s, 1.0)]),
        "sub" => (Box::new(|t, v| t.sub(v[0], v[1])), vec![gauss(rng, s, 1.0), gauss(rng, s, 1.0)]),
        "mul" => (Box::new(|t, v| t.mul(v[0], v[1])), vec![gauss(rng, s, 1.0), gauss(rng, s, 1.0)]),
        "scalar_rsub" => (Box::new(|t, v| t.scalar_rsub(1.0, v[0])), vec![gauss(rng, s, 1.0)]),
        "sum" => (Box::new(|t, v| t.sum(v[0])), vec![gauss(rng, s, 1.0)]),
        "concat" => {
            let k = rng.random_range(2..=4);
            let parts = (0..k)
                .map(|_| {
                    let ci = rng.random_range(1..=3);
                    gauss(rng, Shape::new(n, ci, h, w), 1.0)
                })
                .collect();
            (Box::new(|t, v| t.concat_channels(v)), parts)
        }
        "bce_loss" => {
            let target = Tensor::from_fn(s, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
            let logits = gauss(rng, s, 3.0);
            (
                Box::new(move |t, v| {
                    let g = t.constant(target.clone());
                    t.bce_loss(v[0], g)
                }),
                vec![logits],
            )
        }
        _ => unreachable!(),
    }
}

const OPS: [&str; 14] = [
    "conv2d",
    "conv2d dilation 2",
    "avg_pool2d",
    "global_avg_pool",
    "bilinear_resize",
    "sigmoid",
    "relu",
    "add",
    "sub",
    "mul",
    "scalar_rsub",
    "sum",
    "concat",
    "bce_loss",
];

fn network_case(seed: u64) -> (BaNet, Vec<Tensor<f64>>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::<f64>::new();
    let net = BaNet::new(&ModelConfig::tiny(2), &mut store, &mut rng).unwrap();
    store.randomize(0.5, &mut rng);
    let image = Tensor::from_fn(Shape::new(1, 3, 8, 8), |_| rng.random_range(0.0..1.0));
    // A filled rectangle, so the edge target is its one-pixel outline.
    let (y0, x0) = (rng.random_range(0..3), rng.random_range(0..3));
    let (y1, x1) = (rng.random_range(y0 + 3..8), rng.random_range(x0 + 3..8));
    let inside = |y: usize, x: usize| (y0..=y1).contains(&y) && (x0..=x1).contains(&x);
    let seg = Tensor::from_fn(Shape::new(1, 1, 8, 8), |[_, _, y, x]| inside(y, x) as u8 as f64);
    let edge = Tensor::from_fn(Shape::new(1, 1, 8, 8), |[_, _, y, x]| {
        (inside(y, x) && (y == y0 || y == y1 || x == x0 || x == x1)) as u8 as f64
    });
    let mut inputs = vec![image];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    (net, inputs, seg, edge)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_op = ("", 0.0f64);
    for op in OPS {
        for _ in 0..GRAD_INSTANCES {
            let (f, inputs) = op_case(op, &mut rng);
            let e = fd_error(&f, &inputs, &mut rng, None);
            if e > worst_op.1 {
                worst_op = (op, e);
            }
        }
    }
    let mut worst_net = 0.0f64;
    for i in 0..GRAD_INSTANCES {
        let (net, inputs, seg, edge) = network_case(500 + i as u64);
        let f: Objective = Box::new(|tape, v| {
            let params = BoundParams::from_vars(v[1..].to_vec());
            let out = net.forward(tape, &params, v[0])?;
            let (gs, ge) = (tape.constant(seg.clone()), tape.constant(edge.clone()));
            Ok(total_loss(tape, &out, gs, ge, DEFAULT_LAMBDAS)?.0)
        });
        worst_net = worst_net.max(fd_error(&f, &inputs, &mut rng, Some(4)));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "worst op error {:.2e} ({}), end-to-end {:.2e}, {} instances each, {secs:.1}s",
        worst_op.1, worst_op.0, worst_net, GRAD_INSTANCES
    );
    ensure(worst_op.1 <= OP_TOL, format!("op tolerance exceeded: {detail}"))?;
    ensure(worst_net <= NET_TOL, format!("network tolerance exceeded: {detail}"))?;
    ensure(secs < 300.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

// ------------------------------------------------------------------ metrics

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let shape = Shape::new(1, 1, 16, 16);
    let mut worst_di = 0.0f64;
    for pair in 0..1000 {
        let density: f64 = rng.random_range(0.0..1.0);
        let gt = Tensor::<f64>::from_fn(shape, |_| if rng.random_bool(density) { 1.0 } else { 0.0 });
        let pred = Tensor::<f64>::from_fn(shape, |_| rng.random_range(0.0..1.0));
        let c = confusion(&pred, &gt, 0.5).map_err(e2s)?;
        let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..16 {
            for x in 0..16 {
                let p = pred.at([0, 0, y, x]) >= 0.5;
                let g = gt.at([0, 0, y, x]) > 0.5;
                match (p, g) {
                    (true, true) => tp += 1,
                    (false, false) => tn += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                }
            }
        }
        ensure((c.tp, c.tn, c.fp, c.fn_) == (tp, tn, fp, fn_), format!("pair {pair}: counts differ from the naive loop"))?;
        let r = metrics(c);
        worst_di = worst_di.max((r.di - 2.0 * r.ja / (1.0 + r.ja)).abs());

        let hard = pred.map(|p| if p >= 0.5 { 1.0 } else { 0.0 });
        let a = metrics(confusion(&hard, &gt, 0.5).map_err(e2s)?);
        let b = metrics(confusion(&hard.map(|p| 1.0 - p), &gt.map(|g| 1.0 - g), 0.5).map_err(e2s)?);
        ensure(a.se == b.sp && a.sp == b.se, format!("pair {pair}: inversion did not swap SE and SP"))?;
        ensure(a.ac == b.ac, format!("pair {pair}: inversion changed AC"))?;
    }
    ensure(worst_di <= 1e-12, format!("DI identity off by {worst_di:.2e}"))?;

    // tp=2, fn=1, fp=1, tn=4.
    let gt = Tensor::<f64>::from_f64(Shape::new(1, 1, 2, 4), &[1., 1., 1., 0., 0., 0., 0., 0.]).map_err(e2s)?;
    let pred = Tensor::<f64>::from_f64(Shape::new(1, 1, 2, 4), &[0.9, 0.6, 0.2, 0.7, 0.1, 0.4, 0.0, 0.3]).map_err(e2s)?;
    let r = metrics(confusion(&pred, &gt, 0.5).map_err(e2s)?);
    let want = [4.0 / 6.0, 2.0 / 4.0, 6.0 / 8.0, 2.0 / 3.0, 4.0 / 5.0];
    let got = [r.di, r.ja, r.ac, r.se, r.sp];
    let off = got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    ensure(off <= 1e-15, format!("8-pixel example gave {got:?}"))?;
    Ok(format!("1000 pairs exact, DI identity {worst_di:.1e}, inversion ok, 8-pixel example ok"))
}

// ------------------------------------------------------------------ modules

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut pee_worst = 0.0f64;
    for i in 0..100 {
        let sizes: Vec<usize> = match i % 3 {
            0 => vec![3, 5],
            1 => vec![5, 7],
            _ => vec![3, 5, 7],
        };
        let r = sizes.iter().max().unwrap() / 2;
        let (h, w) = (rng.random_range(2 * r + 1..2 * r + 9), rng.random_range(2 * r + 1..2 * r + 9));
        let value = rng.random_range(-10.0..10.0);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 3, h, w), value));
        for d in pyramid_differences(&mut tape, x, &sizes).map_err(e2s)? {
            let t = tape.value(d);
            for c in 0..3 {
                for y in r..h - r {
                    for xx in r..w - r {
                        pee_worst = pee_worst.max(t.at([0, c, y, xx]).abs());
                    }
                }
            }
        }
    }
    ensure(pee_worst <= 1e-7, format!("PEE interior of a constant map reached {pee_worst:.2e}"))?;

    for i in 0..100 {
        let shape = Shape::new(rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..9), rng.random_range(1..9));
        let a = gauss(&mut rng, shape, 3.0);
        let b = gauss(&mut rng, shape, 3.0);
        let mut tape = Tape::<f64>::new();
        let (va, vb, z) = (tape.constant(a.clone()), tape.constant(b), tape.constant(Tensor::zeros(shape)));
        let (e, s) = interactive_attention(&mut tape, va, z).map_err(e2s)?;
        let half: Vec<f64> = a.data().iter().map(|v| v * 0.5).collect();
        ensure(tape.value(e).data() == a.data(), format!("instance {i}: IA(x,0) edge output is not x"))?;
        ensure(tape.value(s).data() == half.as_slice(), format!("instance {i}: IA(x,0) seg output is not x/2"))?;
        let (e1, s1) = interactive_attention(&mut tape, va, vb).map_err(e2s)?;
        let (e2, s2) = interactive_attention(&mut tape, vb, va).map_err(e2s)?;
        ensure(
            tape.value(e1).data() == tape.value(s2).data() && tape.value(s1).data() == tape.value(e2).data(),
            format!("instance {i}: IA is not symmetric"),
        )?;
    }

    for i in 0..100 {
        let c = rng.random_range(1..4);
        let base = 8 * rng.random_range(1..3);
        let sizes = [base, base / 2, base / 2, base / 2];
        let target = rng.random_range(0..4);
        let mut tape = Tape::<f64>::new();
        let feats: Vec<Var> = (0..4)
            .map(|j| {
                let s = Shape::new(1, c, sizes[j], sizes[j]);
                tape.constant(if j == target { gauss(&mut rng, s, 2.0) } else { Tensor::zeros(s) })
            })
            .collect();
        let out = cff_forward(&mut tape, &feats, target).map_err(e2s)?;
        ensure(tape.value(out).data() == tape.value(feats[target]).data(), format!("instance {i}: CFF changed its input"))?;
    }
    Ok(format!("PEE interior max {pee_worst:.1e}, IA identities bitwise, CFF identity bitwise, 100 instances each"))
}

// ------------------------------------------------------------- architecture

fn criterion_4() -> Outcome {
    let cfg = ModelConfig::desk();
    let mut store = ParameterStore::<f32>::new();
    let net = BaNet::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(4)).map_err(e2s)?;
    for size in [64usize, 96] {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let img = tape.constant(Tensor::full(Shape::new(1, 3, size, size), 0.3));
        let out = net.forward(&mut tape, &p, img).map_err(e2s)?;
        let strides: Vec<(usize, usize)> = out
            .stages
            .iter()
            .map(|s| {
                let sh = tape.shape(s.raw);
                (size / sh.h(), size / sh.w())
            })
            .collect();
        ensure(strides == [(4, 4), (8, 8), (8, 8), (8, 8)], format!("{size}x{size}: strides {strides:?}"))?;
        for (i, s) in out.stages.iter().enumerate() {
            let c = tape.shape(s.reduced).c();
            ensure(c == cfg.backbone.reduce_channels, format!("{size}x{size}: stage {} reduced width {c}", i + 1))?;
        }
        let logits = out.all_logits();
        ensure(logits.len() == 9, format!("{size}x{size}: {} logit maps", logits.len()))?;
        for v in logits {
            ensure(tape.shape(v) == Shape::new(1, 1, size, size), format!("{size}x{size}: logit map {}", tape.shape(v)))?;
        }
    }
    for s in 0..4 {
        let want = if s >= 2 { 2 } else { 1 };
        let specs: Vec<_> = net.backbone().stage_specs(s).into_iter().filter(|c| c.kernel == 3).collect();
        ensure(!specs.is_empty(), format!("stage {} has no 3x3 convs", s + 1))?;
        for c in specs {
            ensure(c.dilation == want, format!("{} has dilation {}, expected {want}", c.name, c.dilation))?;
            // Same-size padding for a dilated 3x3.
            ensure(c.stride > 1 || c.padding == c.dilation, format!("{} padding {} with dilation {}", c.name, c.padding, c.dilation))?;
        }
    }
    Ok("strides 4/8/8/8, reduced widths 32, 9 maps at input size for 64 and 96, stages 3-4 dilation 2".into())
}

// ---------------------------------------------------------------- optimizer

fn criterion_5() -> Outcome {
    let (base, power, t) = (1e-4, 0.9, 1500);
    let lr0 = poly_lr(0, base, power, t).map_err(e2s)?;
    let lr_t = poly_lr(t, base, power, t).map_err(e2s)?;
    let lr_half = poly_lr(t / 2, base, power, t).map_err(e2s)?;
    ensure(lr0 == 1e-4, format!("poly_lr(0) = {lr0:e}"))?;
    ensure(lr_t == 0.0, format!("poly_lr(T) = {lr_t:e}"))?;
    ensure((lr_half - 5.3589e-5).abs() <= 1e-9, format!("poly_lr(T/2) = {lr_half:e}"))?;

    // Two steps with constant gradient g and rates a then b:
    // v1 = g, x1 = x0 - a g; v2 = m g + g, x2 = x1 - b (1 + m) g.
    let (m, a, b) = (0.9, 0.02, 0.015);
    let x0 = Tensor::<f64>::from_f64(Shape::new(1, 2, 1, 3), &[0.5, -1.0, 2.25, 0.0, 3.5, -0.75]).unwrap();
    let g = Tensor::<f64>::from_f64(Shape::new(1, 2, 1, 3), &[1.5, -0.25, 0.125, -2.0, 0.0, 0.75]).unwrap();
    let mut store = ParameterStore::<f64>::new();
    let id = store.register("w", x0.clone()).map_err(e2s)?;
    let mut state = OptimizerState::new(&store, m, a, power, 10);
    for lr in [a, b] {
        store.set_grads(vec![g.clone()]).map_err(e2s)?;
        sgd_step(&mut store, &mut state, lr).map_err(e2s)?;
    }
    let worst = (0..6)
        .map(|i| {
            let want = x0.data()[i] - a * g.data()[i] - b * (1.0 + m) * g.data()[i];
            (store.value(id).data()[i] - want).abs()
        })
        .fold(0.0, f64::max);
    ensure(worst <= 1e-12, format!("momentum unroll off by {worst:.2e}"))?;

    let dir = tempfile::tempdir().map_err(e2s)?;
    let mut a_store = ParameterStore::<f32>::new();
    BaNet::new(&ModelConfig::desk(), &mut a_store, &mut ChaCha8Rng::seed_from_u64(55)).map_err(e2s)?;
    let mut b_store = ParameterStore::<f32>::new();
    BaNet::new(&ModelConfig::desk(), &mut b_store, &mut ChaCha8Rng::seed_from_u64(56)).map_err(e2s)?;
    let (p1, p2) = (dir.path().join("a.banc"), dir.path().join("b.banc"));
    save_checkpoint(&a_store, &p1).map_err(e2s)?;
    load_checkpoint(&mut b_store, &p1).map_err(e2s)?;
    save_checkpoint(&b_store, &p2).map_err(e2s)?;
    let same_values = a_store
        .iter()
        .zip(b_store.iter())
        .all(|((na, ta), (nb, tb))| na == nb && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(same_values, "checkpoint reload changed parameter values")?;
    ensure(std::fs::read(&p1).map_err(e2s)? == std::fs::read(&p2).map_err(e2s)?, "checkpoint bytes changed on round trip")?;
    Ok(format!("poly_lr(T/2) = {lr_half:.6e}, momentum unroll {worst:.1e}, checkpoint round trip bitwise"))
}

// ----------------------------------------------------------------- training

const TRAIN_IMAGES: usize = 200;

fn smoke_data() -> Result<(Vec<Sample>, Vec<Sample>), String> {
    let cfg = SynthConfig {
        n_images: 250,
        image_size: 64,
        contrast: 0.4,
        noise_sigma: 0.05,
        seed: 7,
        ..SynthConfig::default()
    };
    let mut all: Vec<Sample> = synth_generate(&cfg).map_err(e2s)?.into_iter().map(|(s, _)| s).collect();
    let test = all.split_off(TRAIN_IMAGES);
    Ok((all, test))
}

fn smoke_train_config() -> TrainConfig {
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 4,
        workers: 1,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.augment.out_size, 64);
    cfg
}

struct Run {
    trainer: Trainer,
    losses: Vec<f64>,
    elapsed: Duration,
}

fn train_run(model: &ModelConfig, train: &[Sample], dir: &Path) -> Result<Run, String> {
    let cfg = smoke_train_config();
    let start = Instant::now();
    let mut trainer = Trainer::new(model, &cfg, train.len()).map_err(e2s)?;
    let records = trainer.fit(train, dir, |_, _| {}).map_err(e2s)?;
    let losses = records.iter().map(|r| r.loss.total).collect();
    Ok(Run {
        trainer,
        losses,
        elapsed: start.elapsed(),
    })
}

fn mean_ja(trainer: &Trainer, data: &[Sample]) -> Result<f64, String> {
    let rows = evaluate(trainer.net(), trainer.store(), data, 0.5, 64).map_err(e2s)?;
    Ok(rows.iter().map(|(_, r)| r.ja).sum::<f64>() / rows.len() as f64)
}

fn criterion_6(train: &[Sample], test: &[Sample], dir: &Path) -> Outcome {
    let run = train_run(&ModelConfig::desk(), train, dir)?;
    ensure(run.losses.len() == 30, format!("{} epochs logged", run.losses.len()))?;
    ensure(run.losses.iter().all(|l| l.is_finite()), "non-finite epoch loss")?;
    let (first, last) = (run.losses[0], *run.losses.last().unwrap());
    let ja = mean_ja(&run.trainer, test)?;
    let secs = run.elapsed.as_secs_f64();
    let detail = format!(
        "loss {first:.4} -> {last:.4} (ratio {:.3}), held-out mean JA {ja:.4}, {secs:.0}s",
        last / first
    );
    ensure(last < 0.5 * first, format!("loss did not halve: {detail}"))?;
    ensure(ja >= 0.70, format!("held-out JA below 0.70: {detail}"))?;
    ensure(secs < 1800.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

fn criterion_7(train: &[Sample], test: &[Sample], root: &Path) -> Outcome {
    let full_params = {
        let mut s = ParameterStore::<f32>::new();
        BaNet::new(&ModelConfig::desk(), &mut s, &mut ChaCha8Rng::seed_from_u64(0)).map_err(e2s)?;
        s.iter().map(|(n, t)| (n.to_string(), t.shape())).collect::<Vec<_>>()
    };
    let variants = [
        ("w/o PEE", Ablation { pee: false, ..Ablation::full() }),
        ("w/o MTL", Ablation { mtl: false, ..Ablation::full() }),
        ("w/o CFF", Ablation { cff: false, ..Ablation::full() }),
        ("w/o IA", Ablation { ia: false, ..Ablation::full() }),
    ];
    let mut summary = Vec::new();
    let mut ids: Option<Vec<String>> = None;
    for (label, ablation) in variants {
        let model = ModelConfig {
            ablation,
            ..ModelConfig::desk()
        };
        let dir = root.join(label.replace("w/o ", "without_").to_lowercase());
        let run = train_run(&model, train, &dir)?;
        ensure(run.trainer.epochs_done() == 30, format!("{label}: stopped after {} epochs", run.trainer.epochs_done()))?;
        ensure(run.losses.iter().all(|l| l.is_finite()), format!("{label}: non-finite loss"))?;
        let csv = evaluate_csv(run.trainer.net(), run.trainer.store(), test, 0.5, 64).map_err(e2s)?;
        std::fs::write(dir.join("metrics.csv"), &csv).map_err(e2s)?;
        let lines: Vec<&str> = csv.lines().collect();
        ensure(lines.first() == Some(&REPORT_HEADER), format!("{label}: unexpected header"))?;
        ensure(lines.len() == test.len() + 2, format!("{label}: {} report lines", lines.len()))?;
        let row_ids: Vec<String> = lines[1..].iter().map(|l| l.split(',').next().unwrap().to_string()).collect();
        match &ids {
            Some(prev) => ensure(prev == &row_ids, format!("{label}: report rows differ from the other ablations"))?,
            None => ids = Some(row_ids),
        }
        let mean_ja: f64 = lines.last().unwrap().split(',').nth(6).unwrap().parse().map_err(e2s)?;
        if label == "w/o IA" {
            let params: Vec<_> = run.trainer.store().iter().map(|(n, t)| (n.to_string(), t.shape())).collect();
            ensure(params == full_params, "w/o IA parameters differ from the full model")?;
        }
        summary.push(format!("{label} JA {mean_ja:.3} ({:.0}s)", run.elapsed.as_secs_f64()));
    }
    let full_count: usize = full_params.iter().map(|(_, s)| s.numel()).sum();
    Ok(format!("{}; w/o IA has the full {full_count} parameters", summary.join(", ")))
}

fn criterion_8(train: &[Sample], first: &Path, second: &Path) -> Outcome {
    ensure(first.join(CHECKPOINT_FILE).exists(), "criterion 6 run left no checkpoint")?;
    train_run(&ModelConfig::desk(), train, second)?;
    for f in [CHECKPOINT_FILE, OPTIMIZER_FILE, STATE_FILE, LOG_FILE] {
        let a = std::fs::read(first.join(f)).map_err(e2s)?;
        let b = std::fs::read(second.join(f)).map_err(e2s)?;
        ensure(a == b, format!("{f} differs between identical runs"))?;
    }
    Ok("checkpoint, optimizer state, train state and log bitwise identical across two runs".into())
}

// --------------------------------------------------------------------- main

fn run(n: usize, what: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    match outcome {
        Ok(d) => {
            println!("PASS criterion {n} ({what}): {d}");
            true
        }
        Err(d) => {
            println!("FAIL criterion {n} ({what}): {d}");
            false
        }
    }
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let (train, test) = smoke_data().expect("synthetic dataset");
    let first = root.path().join("smoke_a");
    let second = root.path().join("smoke_b");
    let results = [
        run(1, "gradient suite", criterion_1),
        run(2, "metric oracle", criterion_2),
        run(3, "module identities", criterion_3),
        run(4, "architecture contract", criterion_4),
        run(5, "schedule and optimizer", criterion_5),
        run(6, "smoke training", || criterion_6(&train, &test, &first)),
        run(7, "ablation harness", || criterion_7(&train, &test, &root.path().join("ablations"))),
        run(8, "determinism", || criterion_8(&train, &first, &second)),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
