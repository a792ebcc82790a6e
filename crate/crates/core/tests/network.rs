use extremec3::complexity::{count_flops, count_parameters};
use extremec3::kernels::Mode;
use extremec3::network::{ExtremeC3Net, Head, NetworkSpec, ParamScope};
use extremec3::graph::Branch;
use extremec3::tensor::{Shape, Tensor};

fn shapes(net: &ExtremeC3Net) -> Vec<[usize; 3]> {
    net.module_input_shapes()
        .unwrap()
        .iter()
        .map(|s| [s.c, s.h, s.w])
        .collect()
}

#[test]
fn layer_inputs_reproduce_the_table() {
    let net = ExtremeC3Net::build(&NetworkSpec::default(), 0).unwrap();
    assert_eq!(
        shapes(&net),
        vec![
            [27, 112, 112],
            [48, 56, 56],
            [99, 56, 56],
            [56, 56, 56],
            [56, 56, 56],
            [56, 56, 56],
            [56, 56, 56],
            [56, 56, 56],
        ]
    );
}

#[test]
fn budgets() {
    let net = ExtremeC3Net::build(&NetworkSpec::default(), 0).unwrap();
    let (params, rows) = count_parameters(net.graph());
    assert_eq!(params, 45_870);
    assert_eq!(params as usize, net.param_count());
    assert_eq!(rows.iter().find(|(n, _)| n == "coarse.head").unwrap().1, 114);
    let r = count_flops(net.graph(), Shape::new(1, 3, 224, 224).unwrap()).unwrap();
    assert_eq!((r.flops_all, r.flops_conv_bn), (312_555_712, 158_684_736));
    assert_eq!(r.params, params);
    assert_eq!(r.layer("coarse.stem.conv").unwrap().flops_all, 16_257_024);
    assert_eq!(r.layer("coarse.stem.bn").unwrap().flops_all, 602_112);
    assert_eq!(r.layer("coarse.up4").unwrap().flops_all, 18_816);
    let big = count_flops(net.graph(), Shape::new(1, 3, 448, 448).unwrap()).unwrap();
    assert_eq!(big.flops_all, 4 * r.flops_all);
    assert_eq!(big.flops_conv_bn, 4 * r.flops_conv_bn);
    assert_eq!(big.params, r.params);
}

#[test]
fn fusion_is_additive_and_shapes_hold() {
    let mut net = ExtremeC3Net::build(&NetworkSpec::default().with_input_size(64, 64), 3).unwrap();
    let img = Tensor::<f32>::from_fn(Shape::new(2, 3, 64, 48).unwrap(), |n, c, y, x| {
        ((n * 7 + c * 3 + y * 5 + x) % 11) as f32 / 11.0 - 0.5
    });
    let [coarse, fine, fused] = net.infer_parts(&img).unwrap();
    assert_eq!(fused.shape(), Shape::new(2, 2, 64, 48).unwrap());
    for i in 0..fused.data().len() {
        assert!((fused.data()[i] - (coarse.data()[i] + fine.data()[i])).abs() <= 1e-6);
    }
    let a = net.forward(&img, Mode::Eval).unwrap();
    let b = net.forward(&img, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, fused);
    assert_eq!(net.coarse_forward(&img, Mode::Eval).unwrap(), coarse);
    assert!(net.is_deconvolution_free());
}

#[test]
fn coarse_scope_marks_only_coarse_params() {
    let net = ExtremeC3Net::build(&NetworkSpec::default().with_input_size(32, 32), 1).unwrap();
    let mut tape = extremec3::autodiff::Tape::<f32>::new();
    let x = tape.constant(Tensor::full(Shape::new(1, 3, 32, 32).unwrap(), 0.1));
    let exec = net.forward_on_tape(&mut tape, x, Head::Coarse, Mode::Train, ParamScope::Coarse).unwrap();
    for (id, _) in &exec.params {
        assert_eq!(net.graph().param(*id).branch, Branch::Coarse);
    }
    let exec = net.forward_on_tape(&mut tape, x, Head::Full, Mode::Train, ParamScope::All).unwrap();
    assert!(exec.params.iter().any(|(id, _)| net.graph().param(*id).branch == Branch::Fine));
}

#[test]
fn seeded_builds_match() {
    let a = ExtremeC3Net::build(&NetworkSpec::default(), 9).unwrap();
    let b = ExtremeC3Net::build(&NetworkSpec::default(), 9).unwrap();
    let c = ExtremeC3Net::build(&NetworkSpec::default(), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
