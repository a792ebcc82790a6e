//! Shared helpers: seeded random tensors, central-difference gradient
//! checks and the per-op check list.
#![allow(dead_code)]

use extremec3::autodiff::{Tape, Var};
use extremec3::kernels::{Kernel, Mode, RunningStats};
use extremec3::loss::{composite_loss, BinaryMask, LossConfig};
use extremec3::network::{ExtremeC3Net, Head, NetworkSpec, ParamScope};
use extremec3::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).unwrap()
}

pub fn rand_tensor(s: Shape, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(s, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn rand_mask(h: usize, w: usize, density: f64, rng: &mut impl Rng) -> BinaryMask {
    let bits: Vec<u8> = (0..h * w).map(|_| rng.random_bool(density) as u8).collect();
    BinaryMask::new(h, w, bits).unwrap()
}

/// `Σ r_i y_i` with fixed random `r`, so every output element carries a
/// distinct weight.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = rng(seed ^ 0xabcdef);
    let r: Vec<f64> = (0..tape.value(y).data().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let value = tape.value(y).data().iter().zip(&r).map(|(a, b)| a * b).sum();
    tape.scalar_with_grads(value, vec![(y, r)]).unwrap()
}

/// Largest `|analytic − numeric|` over all input elements, divided by the
/// largest numeric magnitude (floored at 1e-8).
pub fn gradcheck(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.data().len()]))
        .collect();

    let mut max_diff: f64 = 0.0;
    let mut max_mag: f64 = 1e-8;
    let mut values = inputs.to_vec();
    for k in 0..inputs.len() {
        for j in 0..inputs[k].data().len() {
            let orig = values[k].data()[j];
            values[k].data_mut()[j] = orig + STEP;
            let plus = eval(&values);
            values[k].data_mut()[j] = orig - STEP;
            let minus = eval(&values);
            values[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            max_diff = max_diff.max((analytic[k][j] - numeric).abs());
            max_mag = max_mag.max(numeric.abs());
        }
    }
    max_diff / max_mag
}

fn conv_case(kernel: Kernel, x: Shape, seed: u64) -> f64 {
    let mut r = rng(seed);
    let ws = kernel.weight_shape();
    let mut inputs = vec![rand_tensor(x, &mut r), rand_tensor(shape(ws[0], ws[1], ws[2], ws[3]), &mut r)];
    if kernel.bias {
        inputs.push(rand_tensor(shape(1, kernel.out_channels, 1, 1), &mut r));
    }
    gradcheck(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], v.get(2).copied(), kernel).unwrap();
        project(t, y, seed)
    })
}

fn bn_case(mode: Mode, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut running = RunningStats::<f64>::new(3);
    running.mean = vec![0.1, -0.2, 0.3];
    running.var = vec![0.5, 1.5, 2.0];
    let inputs = [
        rand_tensor(shape(2, 3, 3, 4), &mut r),
        rand_tensor(shape(1, 3, 1, 1), &mut r),
        rand_tensor(shape(1, 3, 1, 1), &mut r),
    ];
    gradcheck(&inputs, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], &running, mode).unwrap();
        project(t, y, seed)
    })
}

fn unary_case(x: Shape, seed: u64, op: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let mut r = rng(seed);
    gradcheck(&[rand_tensor(x, &mut r)], |t, v| {
        let y = op(t, v[0]);
        project(t, y, seed)
    })
}

/// Composite boundary loss on random `2×2×8×8` logits.
pub fn composite_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let logits = rand_tensor(shape(2, 2, 8, 8), &mut r).map(|v| 3.0 * v);
    let masks: Vec<BinaryMask> = (0..2)
        .map(|_| {
            let (cy, cx) = (r.random_range(2.0..6.0), r.random_range(2.0..6.0));
            BinaryMask::from_fn(8, 8, |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) < 6.0)
        })
        .collect();
    let cfg = LossConfig { se_side: 3.try_into().unwrap(), ..Default::default() };
    gradcheck(&[logits], |t, v| composite_loss(t, v[0], &masks, &cfg).unwrap())
}

/// Whole network in train mode, composite loss, gradient with respect to the
/// input image.
pub fn network_case(seed: u64) -> f64 {
    let net = ExtremeC3Net::build(&NetworkSpec::default().with_input_size(16, 16), seed).unwrap();
    let mut r = rng(seed);
    let image = rand_tensor(shape(2, 3, 16, 16), &mut r);
    let masks: Vec<BinaryMask> = (0..2).map(|_| rand_mask(16, 16, 0.4, &mut r)).collect();
    let cfg = LossConfig::default();
    gradcheck(&[image], |t, v| {
        let exec = net
            .forward_on_tape(t, v[0], Head::Full, Mode::Train, ParamScope::All)
            .unwrap();
        composite_loss(t, exec.outputs[0], &masks, &cfg).unwrap()
    })
}

/// Relative gradient error of every differentiable op on random inputs.
pub fn op_cases() -> Vec<(&'static str, f64)> {
    vec![
        ("conv dense 3x3", conv_case(Kernel::square(3, 4, 3, 1), shape(2, 3, 5, 6), 1)),
        ("conv strided 3x3 s2 + bias", conv_case(Kernel::square(2, 3, 3, 2).with_bias(true), shape(1, 2, 7, 6), 2)),
        ("conv pointwise + bias", conv_case(Kernel::pointwise(4, 3).with_bias(true), shape(2, 4, 3, 3), 3)),
        ("conv depthwise 3x1", conv_case(Kernel::depthwise(3, 3, 1, 1), shape(1, 3, 5, 4), 4)),
        ("conv depthwise 1x3", conv_case(Kernel::depthwise(3, 1, 3, 1), shape(1, 3, 4, 5), 5)),
        ("conv depthwise 3x3 dilation 2", conv_case(Kernel::depthwise(2, 3, 3, 2), shape(2, 2, 6, 7), 6)),
        ("batch norm train", bn_case(Mode::Train, 7)),
        ("batch norm eval", bn_case(Mode::Eval, 8)),
        ("prelu", {
            let mut r = rng(9);
            let inputs = [rand_tensor(shape(2, 3, 3, 3), &mut r), rand_tensor(shape(1, 3, 1, 1), &mut r)];
            gradcheck(&inputs, |t, v| {
                let y = t.prelu(v[0], v[1]).unwrap();
                project(t, y, 9)
            })
        }),
        ("avg pool 2x2", unary_case(shape(2, 2, 4, 6), 10, |t, x| t.avg_pool(x, 2, 2).unwrap())),
        ("bilinear x2", unary_case(shape(1, 2, 3, 4), 11, |t, x| t.upsample(x, 2).unwrap())),
        ("bilinear x4", unary_case(shape(1, 2, 3, 3), 12, |t, x| t.upsample(x, 4).unwrap())),
        ("softmax", unary_case(shape(2, 3, 2, 3), 13, |t, x| t.softmax(x).unwrap())),
        ("scale", unary_case(shape(1, 2, 2, 2), 14, |t, x| t.scale(x, -1.7).unwrap())),
        ("add", {
            let mut r = rng(15);
            let inputs = [rand_tensor(shape(1, 2, 3, 3), &mut r), rand_tensor(shape(1, 2, 3, 3), &mut r)];
            gradcheck(&inputs, |t, v| {
                let y = t.add(v[0], v[1]).unwrap();
                project(t, y, 15)
            })
        }),
        ("concat", {
            let mut r = rng(16);
            let inputs = [rand_tensor(shape(2, 2, 3, 3), &mut r), rand_tensor(shape(2, 1, 3, 3), &mut r)];
            gradcheck(&inputs, |t, v| {
                let y = t.concat(&[v[0], v[1]]).unwrap();
                project(t, y, 16)
            })
        }),
        ("sum", unary_case(shape(1, 2, 2, 3), 17, |t, x| {
            let y = t.scale(x, 2.0).unwrap();
            t.sum(y).unwrap()
        })),
        ("lovasz softmax", {
            let mut r = rng(18);
            let logits = rand_tensor(shape(2, 3, 4, 4), &mut r).map(|v| 2.0 * v);
            let labels: Vec<usize> = (0..32).map(|_| r.random_range(0..3)).collect();
            gradcheck(&[logits], |t, v| {
                let p = t.softmax(v[0]).unwrap();
                let (value, grad) = extremec3::loss::lovasz_softmax_with_grad(
                    t.value(p),
                    &labels,
                    None,
                    extremec3::loss::ClassRule::ClassesPresent,
                )
                .unwrap();
                t.scalar_with_grads(value, vec![(p, grad)]).unwrap()
            })
        }),
    ]
}
