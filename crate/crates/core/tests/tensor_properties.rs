use banet::tensor::io::{read_tensor, write_tensor};
use banet::tensor::kernels::{conv2d_forward, ConvGeom};
use banet::tensor::{Shape, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct seven-loop cross-correlation with zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h() + 2 * g.padding - g.dilation * (ws.h() - 1) - 1) / g.stride + 1;
    let ow = (xs.w() + 2 * g.padding - g.dilation * (ws.w() - 1) - 1) / g.stride + 1;
    Tensor::from_fn(Shape::new(xs.n(), ws.n(), oh, ow), |[n, o, y, xo]| {
        let mut acc = 0.0;
        for c in 0..xs.c() {
            for ky in 0..ws.h() {
                for kx in 0..ws.w() {
                    let iy = (y * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let ix = (xo * g.stride + kx * g.dilation) as isize - g.padding as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h() && (ix as usize) < xs.w() {
                        acc += x.at([n, c, iy as usize, ix as usize]) * w.at([o, c, ky, kx]);
                    }
                }
            }
        }
        acc
    })
}

fn geom_strategy() -> impl Strategy<Value = (usize, ConvGeom)> {
    (prop::sample::select(vec![1usize, 3, 5]), 1usize..=2, 1usize..=2, 0usize..=3)
        .prop_map(|(k, s, d, p)| (k, ConvGeom::new(s, p, d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_loops(seed in any::<u64>(), (k, g) in geom_strategy(), cin in 1usize..4, cout in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = g.dilation * (k - 1) + 1 + rng.random_range(0..5);
        let x = random(&mut rng, Shape::new(2, cin, side, side + 1));
        let w = random(&mut rng, Shape::new(cout, cin, k, k));
        let fast = conv2d_forward(&x, &w, None, g).unwrap();
        let slow = naive_conv(&x, &w, g);
        prop_assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn conv_is_linear_in_its_input(seed in any::<u64>(), (k, g) in geom_strategy(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = g.dilation * (k - 1) + 1 + rng.random_range(0..6);
        let s = Shape::new(1, 2, side, side);
        let (x, y, w) = (random(&mut rng, s), random(&mut rng, s), random(&mut rng, Shape::new(3, 2, k, k)));
        let mix = Tensor::from_fn(s, |i| a * x.at(i) + b * y.at(i));
        let lhs = conv2d_forward(&mix, &w, None, g).unwrap();
        let (cx, cy) = (conv2d_forward(&x, &w, None, g).unwrap(), conv2d_forward(&y, &w, None, g).unwrap());
        let scale = lhs.max_abs().max(1.0);
        for i in 0..lhs.numel() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-5 * scale);
        }
    }

    #[test]
    fn tensor_files_round_trip(seed in any::<u64>(), n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f32>::from_fn(Shape::new(n, c, h, w), |_| rng.random_range(-1e3..1e3));
        let mut bytes = Vec::new();
        write_tensor(&mut bytes, &t).unwrap();
        let back: Tensor<f32> = read_tensor(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }
}

#[test]
fn conv_output_shapes_follow_the_closed_form() {
    let weight = |k| Tensor::<f64>::zeros(Shape::new(2, 1, k, k));
    for k in [1usize, 3, 5, 7] {
        for stride in 1..=2 {
            for dilation in 1..=2 {
                for padding in 0..=3 {
                    for side in 1..=12usize {
                        let x = Tensor::<f64>::zeros(Shape::new(1, 1, side, side + 2));
                        let got = conv2d_forward(&x, &weight(k), None, ConvGeom::new(stride, padding, dilation));
                        let extent = |n: usize| {
                            let num = n as i64 + 2 * padding as i64 - dilation as i64 * (k as i64 - 1) - 1;
                            (num >= 0).then(|| (num / stride as i64 + 1) as usize)
                        };
                        match (extent(side), extent(side + 2)) {
                            (Some(h), Some(w)) => assert_eq!(got.unwrap().shape(), Shape::new(1, 2, h, w)),
                            _ => assert!(got.is_err(), "k{k} s{stride} d{dilation} p{padding} side {side} should fail"),
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn shared_inputs_accumulate_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let s = Shape::new(1, 2, 4, 4);
    let x0 = random(&mut rng, s);
    let w = random(&mut rng, Shape::new(2, 2, 3, 3));
    let r = random(&mut rng, s);
    let g = ConvGeom::new(1, 1, 1);

    // Consumer A: sum(conv(x) * r). Consumer B: sum(sigmoid(x)).
    let consumer_a = |tape: &mut Tape<f64>, x| {
        let wv = tape.constant(w.clone());
        let c = tape.conv2d(x, wv, None, g).unwrap();
        let rv = tape.constant(r.clone());
        let m = tape.mul(c, rv).unwrap();
        tape.sum(m).unwrap()
    };
    let consumer_b = |tape: &mut Tape<f64>, x| {
        let sg = tape.sigmoid(x).unwrap();
        tape.sum(sg).unwrap()
    };
    let grad_of = |build: &dyn Fn(&mut Tape<f64>, banet::tensor::Var) -> banet::tensor::Var| {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y = build(&mut tape, x);
        tape.backward(y).unwrap();
        tape.grad(x).unwrap().clone()
    };
    let both = grad_of(&|t, x| {
        let a = consumer_a(t, x);
        let b = consumer_b(t, x);
        t.add(a, b).unwrap()
    });
    let ga = grad_of(&|t, x| consumer_a(t, x));
    let gb = grad_of(&|t, x| consumer_b(t, x));
    for i in 0..both.numel() {
        assert!((both.data()[i] - (ga.data()[i] + gb.data()[i])).abs() <= 1e-14);
    }
}

#[test]
fn repeated_passes_are_bitwise_identical() {
    use banet::model::{BaNet, ModelConfig};
    use banet::params::ParameterStore;
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::<f32>::new();
        let net = BaNet::new(&ModelConfig::tiny(3), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn(Shape::new(1, 3, 16, 16), |_| rng.random_range(0.0..1.0)));
        let out = net.forward(&mut tape, &p, x).unwrap();
        let loss = tape.sum(out.seg_logits).unwrap();
        tape.backward(loss).unwrap();
        let grads = store.collect_grads(&tape, &p).unwrap();
        let mut bits: Vec<u32> = tape.value(out.seg_logits).data().iter().map(|v| v.to_bits()).collect();
        bits.extend(grads.iter().flat_map(|g| g.data().iter().map(|v| v.to_bits())));
        bits
    };
    assert_eq!(run(), run());
}
