//! Self-check suites: gradient checks, metric oracle, module identities,
//! architecture contract and optimizer arithmetic.
//!
//! Each suite returns one [`Check`] per property. The `verify` command prints
//! them and fails if any check fails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::derive_edge_mask;
use crate::loss::{total_loss, DEFAULT_LAMBDAS};
use crate::metrics::{confusion, metrics, Confusion};
use crate::model::backbone::{STAGE_DILATIONS, STAGE_OUTPUT_STRIDES};
use crate::model::heads::pyramid_differences;
use crate::model::{cff_forward, interactive_attention, BaNet, ModelConfig};
use crate::params::{BoundParams, ParameterStore};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{grad_check, GradCheckOptions, Shape, Tape, Tensor, TensorError, Var};
use crate::train::checkpoint::{read_named, write_named};
use crate::train::{poly_lr, sgd_step, OptimizerState};

/// Outcome of one property.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn bound(name: impl Into<String>, worst: f64, tol: f64, instances: usize) -> Check {
        Check::new(
            name,
            worst <= tol,
            format!("max error {worst:.3e} (tol {tol:.0e}) over {instances} instances"),
        )
    }
}

/// Tolerance for single-op gradient checks.
pub const OP_GRAD_TOL: f64 = 1e-5;
/// Tolerance for the end-to-end gradient check.
pub const NET_GRAD_TOL: f64 = 1e-4;

fn normal(rng: &mut ChaCha8Rng, shape: Shape, sigma: f64) -> Tensor<f64> {
    let d = Normal::new(0.0, sigma).expect("positive sigma");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// Values bounded away from zero, so relu has no kink within the FD step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn binary(rng: &mut ChaCha8Rng, shape: Shape, p: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

type OpCase = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

/// One random instance of the named op: the function and its inputs.
fn op_instance(op: &str, rng: &mut ChaCha8Rng) -> (OpCase, Vec<Tensor<f64>>) {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let h = rng.random_range(4..=7);
    let w = rng.random_range(4..=7);
    let s = Shape::new(n, c, h, w);
    match op {
        "conv2d" => {
            let cout = rng.random_range(1..=3);
            let k = [1, 3][rng.random_range(0..2)];
            let dilation = rng.random_range(1..=2);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=dilation);
            let geom = ConvGeom::new(stride, padding, dilation);
            let (x, wt, b) = (normal(rng, s, 1.0), normal(rng, Shape::new(cout, c, k, k), 0.5), normal(rng, Shape::new(cout, 1, 1, 1), 0.5));
            (Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), geom)), vec![x, wt, b])
        }
        "conv2d_dilation2" => {
            let cout = rng.random_range(1..=3);
            let geom = ConvGeom::new(1, 2, 2);
            let (x, wt) = (normal(rng, s, 1.0), normal(rng, Shape::new(cout, c, 3, 3), 0.5));
            (Box::new(move |t, v| t.conv2d(v[0], v[1], None, geom)), vec![x, wt])
        }
        "avg_pool2d" => {
            let k = [3, 5][rng.random_range(0..2)];
            let stride = rng.random_range(1..=2);
            let pad = if rng.random_bool(0.5) { (k - 1) / 2 } else { k / 2 - 1 };
            let big = Shape::new(n, c, h + 2, w + 2);
            (Box::new(move |t, v| t.avg_pool2d(v[0], k, stride, pad)), vec![normal(rng, big, 1.0)])
        }
        "global_avg_pool" => (Box::new(|t, v| t.global_avg_pool(v[0])), vec![normal(rng, s, 1.0)]),
        "bilinear_resize" => {
            let (oh, ow) = (rng.random_range(1..=11), rng.random_range(1..=11));
            (Box::new(move |t, v| t.bilinear_resize(v[0], oh, ow)), vec![normal(rng, s, 1.0)])
        }
        "sigmoid" => (Box::new(|t, v| t.sigmoid(v[0])), vec![normal(rng, s, 2.0)]),
        "relu" => (Box::new(|t, v| t.relu(v[0])), vec![away_from_zero(rng, s)]),
        "add" => (Box::new(|t, v| t.add(v[0], v[1])), vec![normal(rng, s, 1.0), normal(rng, s, 1.0)]),
        "sub" => (Box::new(|t, v| t.sub(v[0], v[1])), vec![normal(rng, s, 1.0), normal(rng, s, 1.0)]),
        "mul" => (Box::new(|t, v| t.mul(v[0], v[1])), vec![normal(rng, s, 1.0), normal(rng, s, 1.0)]),
        "scalar_rsub" => (Box::new(|t, v| t.scalar_rsub(1.0, v[0])), vec![normal(rng, s, 1.0)]),
        "sum" => (Box::new(|t, v| t.sum(v[0])), vec![normal(rng, s, 1.0)]),
        "concat" => {
            let parts: Vec<Tensor<f64>> = (0..rng.random_range(2..=3))
                .map(|_| {
                    let ci = rng.random_range(1..=3);
                    normal(rng, Shape::new(n, ci, h, w), 1.0)
                })
                .collect();
            (Box::new(|t, v| t.concat_channels(v)), parts)
        }
        "bce_loss" => {
            let target = binary(rng, s, 0.4);
            (
                Box::new(move |t, v| {
                    let g = t.constant(target.clone());
                    t.bce_loss(v[0], g)
                }),
                vec![normal(rng, s, 2.0)],
            )
        }
        other => panic!("no gradient case for {other}"),
    }
}

/// Every differentiable op of the tape.
pub const GRAD_OPS: &[&str] = &[
    "conv2d",
    "conv2d_dilation2",
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

/// Worst relative gradient error of `op` over `instances` random cases.
pub fn op_gradient_error(op: &str, instances: usize, seed: u64) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (f, inputs) = op_instance(op, &mut rng);
        let opts = GradCheckOptions {
            seed: seed ^ i as u64,
            ..GradCheckOptions::default()
        };
        worst = worst.max(grad_check(f, &inputs, opts)?);
    }
    Ok(worst)
}

/// Worst relative error of the full loss gradient of a tiny network on 8x8
/// inputs, with respect to the image and a sample of every parameter tensor.
pub fn network_gradient_error(instances: usize, seed: u64, coords_per_tensor: usize) -> Result<f64, crate::Error> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let mut store = ParameterStore::<f64>::new();
        let net = BaNet::new(&ModelConfig::tiny(2), &mut store, &mut rng)?;
        store.randomize(0.6, &mut rng);
        let shape = Shape::new(1, 3, 8, 8);
        let image = Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));
        let seg = binary(&mut rng, Shape::new(1, 1, 8, 8), 0.4);
        let edge = derive_edge_mask(&seg, 1)?;
        let mut inputs = vec![image];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let f = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var, TensorError> {
            let params = BoundParams::from_vars(v[1..].to_vec());
            let out = net.forward(tape, &params, v[0])?;
            let gs = tape.constant(seg.clone());
            let ge = tape.constant(edge.clone());
            Ok(total_loss(tape, &out, gs, ge, DEFAULT_LAMBDAS)?.0)
        };
        let opts = GradCheckOptions {
            seed: seed ^ (i as u64) << 8,
            max_coords: Some(coords_per_tensor),
            ..GradCheckOptions::default()
        };
        worst = worst.max(grad_check(f, &inputs, opts)?);
    }
    Ok(worst)
}

pub fn gradient_suite(instances: usize, seed: u64) -> Vec<Check> {
    let mut out: Vec<Check> = GRAD_OPS
        .iter()
        .enumerate()
        .map(|(k, op)| match op_gradient_error(op, instances, seed.wrapping_add(k as u64 * 1000)) {
            Ok(e) => Check::bound(format!("grad {op}"), e, OP_GRAD_TOL, instances),
            Err(e) => Check::new(format!("grad {op}"), false, e.to_string()),
        })
        .collect();
    out.push(match network_gradient_error(instances, seed, 3) {
        Ok(e) => Check::bound("grad end-to-end network", e, NET_GRAD_TOL, instances),
        Err(e) => Check::new("grad end-to-end network", false, e.to_string()),
    });
    out
}

fn naive_confusion(pred: &Tensor<f64>, gt: &Tensor<f64>, thr: f64) -> Confusion {
    let mut c = Confusion::default();
    for i in 0..pred.numel() {
        let p = pred.data()[i] >= thr;
        let g = gt.data()[i] == 1.0;
        if p && g {
            c.tp += 1;
        } else if !p && !g {
            c.tn += 1;
        } else if p {
            c.fp += 1;
        } else {
            c.fn_ += 1;
        }
    }
    c
}

pub fn metric_suite(pairs: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, 1, 16, 16);
    let (mut counts_ok, mut worst_dice, mut swap_ok) = (true, 0.0f64, true);
    for _ in 0..pairs {
        let density = rng.random_range(0.0..1.0);
        let gt = binary(&mut rng, shape, density);
        let pred = Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));
        let c = match confusion(&pred, &gt, 0.5) {
            Ok(c) => c,
            Err(e) => return vec![Check::new("metric oracle", false, e.to_string())],
        };
        counts_ok &= c == naive_confusion(&pred, &gt, 0.5);
        let r = metrics(c);
        worst_dice = worst_dice.max((r.di - 2.0 * r.ja / (1.0 + r.ja)).abs());
        // Label inversion on hard masks: predicted and true labels both flip.
        let hard = pred.map(|p| if p >= 0.5 { 1.0 } else { 0.0 });
        let a = metrics(confusion(&hard, &gt, 0.5).expect("binary"));
        let b = metrics(confusion(&hard.map(|p| 1.0 - p), &gt.map(|g| 1.0 - g), 0.5).expect("binary"));
        swap_ok &= a.se == b.sp && a.sp == b.se && a.ac == b.ac;
    }
    let worked = {
        let gt = Tensor::<f64>::from_f64(Shape::new(1, 1, 1, 8), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).expect("8 values");
        let pred = Tensor::<f64>::from_f64(Shape::new(1, 1, 1, 8), &[1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).expect("8 values");
        let r = metrics(confusion(&pred, &gt, 0.5).expect("binary"));
        (r.di, r.ja, r.ac, r.se, r.sp) == (2.0 / 3.0, 0.5, 0.75, 2.0 / 3.0, 0.8)
    };
    vec![
        Check::new("metric counts match naive loop", counts_ok, format!("{pairs} random 16x16 pairs")),
        Check::bound("metric DI = 2JA/(1+JA)", worst_dice, 1e-12, pairs),
        Check::new("metric inversion swaps SE and SP", swap_ok, format!("{pairs} pairs")),
        Check::new("metric 8-pixel example", worked, "DI 2/3, JA 1/2, AC 3/4, SE 2/3, SP 4/5"),
    ]
}

pub fn module_suite(instances: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pee_worst, mut ia_zero, mut ia_sym, mut cff_id) = (0.0f64, true, true, true);
    for _ in 0..instances {
        // Edge extraction vanishes on constant maps away from the border.
        let k_max = [3, 5, 7][rng.random_range(0..3)];
        let sizes: Vec<usize> = (3..=k_max).step_by(2).collect();
        let (h, w) = (rng.random_range(k_max..=k_max + 6), rng.random_range(k_max..=k_max + 6));
        let value = rng.random_range(-3.0..3.0);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 2, h, w), value));
        let r = k_max / 2;
        for d in pyramid_differences(&mut tape, x, &sizes).expect("odd sizes") {
            let t = tape.value(d);
            for c in 0..2 {
                for y in r..h - r {
                    for xx in r..w - r {
                        pee_worst = pee_worst.max(t.at([0, c, y, xx]).abs());
                    }
                }
            }
        }

        let shape = Shape::new(1, 2, rng.random_range(1..6), rng.random_range(1..6));
        let a = normal(&mut rng, shape, 3.0);
        let b = normal(&mut rng, shape, 3.0);
        let mut tape = Tape::<f64>::new();
        let (va, vb, z) = (tape.constant(a.clone()), tape.constant(b), tape.constant(Tensor::zeros(shape)));
        let (e, s) = interactive_attention(&mut tape, va, z).expect("same shapes");
        ia_zero &= tape.value(e) == &a && tape.value(s) == &a.map(|v| 0.5 * v);
        let (e1, s1) = interactive_attention(&mut tape, va, vb).expect("same shapes");
        let (e2, s2) = interactive_attention(&mut tape, vb, va).expect("same shapes");
        ia_sym &= tape.value(e1) == tape.value(s2) && tape.value(s1) == tape.value(e2);

        let sizes = [(8, 8), (4, 4), (4, 4), (4, 4)];
        let i = rng.random_range(0..4);
        let feats: Vec<Var> = (0..4)
            .map(|j| {
                let s = Shape::new(1, 2, sizes[j].0, sizes[j].1);
                let t = if j == i { normal(&mut rng, s, 2.0) } else { Tensor::zeros(s) };
                tape.constant(t)
            })
            .collect();
        let out = cff_forward(&mut tape, &feats, i).expect("matching channels");
        cff_id &= tape.value(out) == tape.value(feats[i]);
    }
    vec![
        Check::bound("edge extraction zero on constant interior", pee_worst, 1e-7, instances),
        Check::new("interactive attention IA(x,0) = (x, x/2)", ia_zero, format!("{instances} instances, bitwise")),
        Check::new("interactive attention symmetry", ia_sym, format!("{instances} instances, bitwise")),
        Check::new("cross fusion identity with zero complements", cff_id, format!("{instances} instances, bitwise")),
    ]
}

pub fn architecture_suite(seed: u64) -> Vec<Check> {
    let cfg = ModelConfig::desk();
    let mut store = ParameterStore::<f32>::new();
    let net = match BaNet::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)) {
        Ok(n) => n,
        Err(e) => return vec![Check::new("architecture build", false, e.to_string())],
    };
    let mut checks = Vec::new();
    for size in [64usize, 96] {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let img = tape.constant(Tensor::full(Shape::new(1, 3, size, size), 0.5));
        let out = match net.forward(&mut tape, &p, img) {
            Ok(o) => o,
            Err(e) => {
                checks.push(Check::new(format!("architecture {size}x{size}"), false, e.to_string()));
                continue;
            }
        };
        let strides: Vec<usize> = out.stages.iter().map(|s| size / tape.shape(s.raw).h()).collect();
        checks.push(Check::new(
            format!("stage strides at {size}x{size}"),
            strides == STAGE_OUTPUT_STRIDES,
            format!("{strides:?}"),
        ));
        let widths: Vec<usize> = out.stages.iter().map(|s| tape.shape(s.reduced).c()).collect();
        checks.push(Check::new(
            format!("reduced widths at {size}x{size}"),
            widths.iter().all(|&c| c == cfg.backbone.reduce_channels),
            format!("{widths:?}"),
        ));
        let logits = out.all_logits();
        let ok = logits.len() == 9 && logits.iter().all(|&v| tape.shape(v) == Shape::new(1, 1, size, size));
        checks.push(Check::new(format!("9 logit maps at {size}x{size}"), ok, format!("{} maps", logits.len())));
    }
    let dilations: Vec<Vec<usize>> = (0..4)
        .map(|s| {
            net.backbone()
                .stage_specs(s)
                .iter()
                .filter(|c| c.kernel == 3)
                .map(|c| c.dilation)
                .collect()
        })
        .collect();
    let ok = dilations
        .iter()
        .zip(STAGE_DILATIONS)
        .all(|(d, want)| !d.is_empty() && d.iter().all(|&x| x == want))
        && STAGE_DILATIONS[2] == 2
        && STAGE_DILATIONS[3] == 2;
    checks.push(Check::new("stages 3-4 dilated by 2", ok, format!("{dilations:?}")));
    checks
}

pub fn optimizer_suite() -> Vec<Check> {
    let t = 1000;
    let lr0 = poly_lr(0, 1e-4, 0.9, t).unwrap_or(f64::NAN);
    let lr_t = poly_lr(t, 1e-4, 0.9, t).unwrap_or(f64::NAN);
    let lr_half = poly_lr(t / 2, 1e-4, 0.9, t).unwrap_or(f64::NAN);
    let monotone = (0..t).all(|i| poly_lr(i + 1, 1e-4, 0.9, t).unwrap_or(f64::NAN) < poly_lr(i, 1e-4, 0.9, t).unwrap_or(f64::NAN));

    // Two momentum steps with a constant gradient move by lr * g * (1 + 1.9).
    let (p0, g, lr) = (0.75, -1.25, 0.01);
    let mut store = ParameterStore::<f64>::new();
    let id = store.register("w", Tensor::scalar(p0)).expect("fresh store");
    let mut state = OptimizerState::new(&store, 0.9, lr, 0.9, 10);
    let mut ok = true;
    for _ in 0..2 {
        ok &= store.set_grads(vec![Tensor::scalar(g)]).is_ok() && sgd_step(&mut store, &mut state, lr).is_ok();
    }
    let moved = store.value(id).item() - p0;
    let expected = -lr * g * (1.0 + 1.9);
    let unroll = (moved - expected).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::<f32>::from_fn(Shape::new(2, 3, 3, 3), |_| rng.random_range(-1.0..1.0));
    let b = Tensor::<f32>::from_fn(Shape::new(2, 1, 1, 1), |_| rng.random_range(-1.0..1.0));
    let mut first = Vec::new();
    let mut second = Vec::new();
    let round_trip = write_named(&mut first, &[("a", &a), ("b", &b)]).is_ok()
        && read_named::<f32, _>(&mut first.as_slice())
            .ok()
            .map(|back| {
                let refs: Vec<(&str, &Tensor<f32>)> = back.iter().map(|(n, t)| (n.as_str(), t)).collect();
                write_named(&mut second, &refs).is_ok()
            })
            .unwrap_or(false)
        && first == second;

    vec![
        Check::new("poly_lr(0) = 1e-4", lr0 == 1e-4, format!("{lr0:e}")),
        Check::new("poly_lr(T) = 0", lr_t == 0.0, format!("{lr_t:e}")),
        Check::bound("poly_lr(T/2) = 5.3589e-5", (lr_half - 5.3589e-5).abs(), 1e-9, 1),
        Check::new("poly_lr strictly decreasing", monotone, format!("T = {t}")),
        Check::new("momentum two-step unroll", ok && unroll <= 1e-12, format!("error {unroll:.3e}")),
        Check::new("checkpoint round trip bitwise", round_trip, format!("{} bytes", first.len())),
    ]
}

/// Settings of a full verification run.
#[derive(Debug, Clone, Copy)]
pub struct VerifyConfig {
    /// Random instances per gradient check and per module identity.
    pub instances: usize,
    pub metric_pairs: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            instances: 20,
            metric_pairs: 1000,
            seed: 2024,
        }
    }
}

/// All suites in order.
pub fn run_all(cfg: &VerifyConfig) -> Vec<Check> {
    let mut out = gradient_suite(cfg.instances, cfg.seed);
    out.extend(metric_suite(cfg.metric_pairs, cfg.seed));
    out.extend(module_suite(cfg.instances.max(100), cfg.seed));
    out.extend(architecture_suite(cfg.seed));
    out.extend(optimizer_suite());
    out
}
