//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; exits non-zero if any fail.

mod common;

use std::time::{Duration, Instant};

use common::*;
use extremec3::c3::DilationSchedule;
use extremec3::complexity::{batch_norm_flops, bilinear_flops, conv_flops, count_flops, count_parameters};
use extremec3::data::synthetic::ellipses;
use extremec3::data::{augment, draw_params, make_batch, Age, AugmentConfig, Attributes, Dataset, Gender, Race, Sample};
use extremec3::graph::Branch;
use extremec3::kernels::Kernel;
use extremec3::loss::{boundary_mask, lovasz_softmax, morph_dilate, morph_erode, BinaryMask, ClassRule, StructuringElement};
use extremec3::network::{ExtremeC3Net, Head, NetworkSpec};
use extremec3::tensor::Tensor;
use extremec3::train::*;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const PARAMS_GOLDEN: u64 = 45_870;
const PARAMS_BAND: (u64, u64) = (30_000, 46_000);
const CONV_BN_BAND: (f64, f64) = (0.10e9, 0.16e9);
const ALL_BAND: (f64, f64) = (0.23e9, 0.35e9);
const OP_TOL: f64 = 1e-5;
const END_TO_END_TOL: f64 = 1e-4;
const LOVASZ_TOL: f64 = 1e-6;
const TRAIN_MIOU: f64 = 0.95;
const GROUP_TOL: f64 = 1e-9;

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("structure", Duration::from_secs(1), structure),
        ("parameter budget", Duration::from_secs(1), parameter_budget),
        ("flops accounting", Duration::from_secs(1), flops_accounting),
        ("gradient correctness", Duration::from_secs(120), gradients),
        ("lovasz oracle", Duration::from_secs(60), lovasz_oracle),
        ("morphology oracle", Duration::from_secs(60), morphology_oracle),
        ("desk-scale training", Duration::from_secs(600), desk_training),
        ("determinism", Duration::from_secs(300), determinism),
        ("augmentation contract", Duration::from_secs(300), augmentation),
        ("grouped evaluation", Duration::from_secs(60), grouped_evaluation),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > *budget => Err(format!("{detail}; over the {budget:?} budget")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({:.2}s): {detail}", i + 1, took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({:.2}s): {detail}", i + 1, took.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn default_net() -> ExtremeC3Net {
    ExtremeC3Net::build(&NetworkSpec::default(), 0).unwrap()
}

fn structure() -> Outcome {
    let expected = [
        [27, 112, 112],
        [48, 56, 56],
        [99, 56, 56],
        [56, 56, 56],
        [56, 56, 56],
        [56, 56, 56],
        [56, 56, 56],
        [56, 56, 56],
    ];
    let net = default_net();
    let shapes = net.module_input_shapes().map_err(|e| e.to_string())?;
    let got: Vec<[usize; 3]> = shapes.iter().map(|s| [s.c, s.h, s.w]).collect();
    let matched = got.iter().zip(&expected).filter(|(a, b)| a == b).count();
    check!(matched == 8, "{matched}/8 module inputs match: {got:?}");

    let schedule = [[1, 2, 3], [1, 3, 4], [1, 3, 5], [2, 4, 8], [2, 4, 8], [2, 4, 8], [2, 4, 8], [2, 4, 8]];
    check!(DilationSchedule::default().as_array() == &schedule, "default schedule differs");
    let used: Vec<[usize; 3]> = net.spec().coarse_modules().iter().map(|m| m.dilations).collect();
    check!(used == schedule, "built modules use {used:?}");
    check!(net.is_deconvolution_free(), "graph contains a transposed convolution");
    Ok("8/8 input shapes, schedule exact".into())
}

fn parameter_budget() -> Outcome {
    let net = default_net();
    let (total, rows) = count_parameters(net.graph());
    // One line per block: `coarse.l3.b1.dw3x3` rolls up into `coarse.l3`.
    let mut blocks: Vec<(String, u64)> = Vec::new();
    for (name, n) in &rows {
        let block = name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".");
        match blocks.last_mut() {
            Some((b, total)) if *b == block => *total += n,
            _ => blocks.push((block, *n)),
        }
    }
    for (block, n) in &blocks {
        println!("       {block:<14} {n:>6}");
    }
    check!(
        (PARAMS_BAND.0..=PARAMS_BAND.1).contains(&total),
        "{total} outside [{}, {}]",
        PARAMS_BAND.0,
        PARAMS_BAND.1
    );
    check!(total == PARAMS_GOLDEN, "{total} != golden {PARAMS_GOLDEN}");
    Ok(format!("{total} trainable (reference 37.7K)"))
}

fn flops_accounting() -> Outcome {
    let net = default_net();
    let r = count_flops(net.graph(), shape(1, 3, 224, 224)).map_err(|e| e.to_string())?;
    let (cb, all) = (r.flops_conv_bn as f64, r.flops_all as f64);
    check!(CONV_BN_BAND.0 <= cb && cb <= CONV_BN_BAND.1, "conv_bn {cb:.4e} out of band");
    check!(ALL_BAND.0 <= all && all <= ALL_BAND.1, "all {all:.4e} out of band");
    let stem = conv_flops(&Kernel::square(3, 24, 3, 2), shape(1, 24, 112, 112));
    let bn = batch_norm_flops(shape(1, 24, 112, 112));
    let up = bilinear_flops(shape(1, 2, 56, 56));
    check!((stem, bn, up) == (16_257_024, 602_112, 18_816), "unit formulas gave {stem}, {bn}, {up}");
    Ok(format!(
        "conv_bn {:.4}G (ref 0.128G), all {:.4}G (ref 0.286G), unit formulas exact",
        cb / 1e9,
        all / 1e9
    ))
}

fn gradients() -> Outcome {
    let cases = op_cases();
    let worst = cases.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    for (name, err) in &cases {
        check!(*err < OP_TOL, "{name}: relative error {err:.2e} >= {OP_TOL:e}");
    }
    let composite = composite_case(1);
    check!(composite < END_TO_END_TOL, "composite loss: {composite:.2e}");
    let network = network_case(2);
    check!(network < END_TO_END_TOL, "network + loss: {network:.2e}");
    Ok(format!(
        "{} ops, worst {} {:.1e}; composite {composite:.1e}; network {network:.1e}",
        cases.len(),
        worst.0,
        worst.1
    ))
}

fn jaccard_oracle(pred: &[usize], gt: &[usize]) -> f64 {
    let present: Vec<usize> = (0..2).filter(|c| gt.contains(c)).collect();
    present
        .iter()
        .map(|&c| {
            let inter = pred.iter().zip(gt).filter(|(p, g)| **p == c && **g == c).count();
            let union = pred.iter().zip(gt).filter(|(p, g)| **p == c || **g == c).count();
            1.0 - inter as f64 / union as f64
        })
        .sum::<f64>()
        / present.len() as f64
}

fn lovasz_oracle() -> Outcome {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = r.random_range(1..=8);
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let gt: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let probs = Tensor::from_fn(shape(1, 2, 1, n), |_, c, _, x| (pred[x] == c) as u8 as f64);
        let loss = lovasz_softmax(&probs, &gt, None, ClassRule::ClassesPresent).map_err(|e| e.to_string())?;
        worst = worst.max((loss - jaccard_oracle(&pred, &gt)).abs());
    }
    check!(worst < LOVASZ_TOL, "max deviation {worst:.2e}");
    Ok(format!("200 instances, max |loss - (1 - J)| = {worst:.1e}"))
}

fn window(mask: &BinaryMask, y: usize, x: usize) -> impl Iterator<Item = bool> + '_ {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    (-3isize..=3).flat_map(move |dy| {
        (-3isize..=3).map(move |dx| {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            yy >= 0 && yy < h && xx >= 0 && xx < w && mask.get(yy as usize, xx as usize)
        })
    })
}

fn morphology_oracle() -> Outcome {
    let se = StructuringElement::default();
    let mut r = rng(77);
    for i in 0..100 {
        let m = rand_mask(32, 32, [0.05, 0.3, 0.7, 0.97][i % 4], &mut r);
        let d = BinaryMask::from_fn(32, 32, |y, x| window(&m, y, x).any(|v| v));
        let e = BinaryMask::from_fn(32, 32, |y, x| window(&m, y, x).all(|v| v));
        let b = BinaryMask::from_fn(32, 32, |y, x| d.get(y, x) && !e.get(y, x));
        check!(morph_dilate(&m, se) == d, "dilation differs on mask {i}");
        check!(morph_erode(&m, se) == e, "erosion differs on mask {i}");
        check!(boundary_mask(&m, se) == b, "boundary differs on mask {i}");
    }

    let point = BinaryMask::from_fn(15, 15, |y, x| y == 7 && x == 7);
    let square7 = BinaryMask::from_fn(15, 15, |y, x| (4..=10).contains(&y) && (4..=10).contains(&x));
    check!(morph_dilate(&point, se) == square7, "point does not dilate to a 7x7 square");

    let framed = BinaryMask::from_fn(16, 16, |y, x| (3..13).contains(&y) && (3..13).contains(&x));
    check!(morph_erode(&BinaryMask::ones(16, 16), se) == framed, "all-ones erosion is not a 3-px frame");

    let sq = BinaryMask::from_fn(21, 21, |y, x| (6..15).contains(&y) && (6..15).contains(&x));
    let ring = BinaryMask::from_fn(21, 21, |y, x| {
        (3..18).contains(&y) && (3..18).contains(&x) && !((9..12).contains(&y) && (9..12).contains(&x))
    });
    check!(boundary_mask(&sq, se) == ring, "9x9 square boundary is not a width-6 ring");
    Ok("100 masks bitwise equal, 3 goldens exact".into())
}

fn fine_params(net: &ExtremeC3Net) -> Vec<Vec<f32>> {
    net.graph()
        .params()
        .iter()
        .filter(|p| p.branch == Branch::Fine)
        .map(|p| p.data.clone())
        .collect()
}

fn desk_config(coarse: usize, full: usize, res: usize) -> Config {
    let mut cfg = Config::default();
    cfg.train.resolution = res;
    cfg.train.batch_size = 8;
    cfg.train.epochs_stage1 = coarse;
    cfg.train.epochs_stage2 = full;
    cfg.train.val_fraction = 0.0;
    cfg.train.val_every = 25;
    cfg.train.augment = false;
    cfg.train.seed = 7;
    cfg
}

fn desk_training() -> Outcome {
    // 8 samples, batch 8: one iteration per epoch.
    let cfg = desk_config(50, 300, 112);
    let ds = Dataset::from_samples(ellipses(8, 112, 112, 3).map_err(|e| e.to_string())?);
    let mut net = ExtremeC3Net::build(&cfg.training_spec(), cfg.train.seed).map_err(|e| e.to_string())?;

    let fine_before = fine_params(&net);
    let mut v = SampleValidator { samples: &ds.samples, norm: cfg.data.normalization };
    let coarse_best =
        train_stage(&mut net, &ds.samples, &mut v, &cfg, Stage::Coarse, &mut Vec::new()).map_err(|e| e.to_string())?;
    check!(fine_params(&net) == fine_before, "coarse stage modified FineNet parameters");

    let mut records = Vec::new();
    train_stage(&mut net, &ds.samples, &mut v, &cfg, Stage::Full, &mut records).map_err(|e| e.to_string())?;
    check!(records.len() == 300, "ran {} full-stage iterations", records.len());
    let miou = evaluate_miou(&net, &ds, &cfg.data.normalization).map_err(|e| e.to_string())?.miou;
    check!(miou >= TRAIN_MIOU, "training mIoU {miou:.4} < {TRAIN_MIOU}");
    Ok(format!(
        "coarse best {:.4}, training mIoU {miou:.4} after 300 full iterations, FineNet untouched in stage 1",
        coarse_best.best_miou.unwrap_or(f64::NAN)
    ))
}

fn determinism() -> Outcome {
    let mut cfg = desk_config(2, 3, 48);
    cfg.train.augment = true;
    cfg.train.batch_size = 4;
    let ds = Dataset::from_samples(ellipses(8, 48, 48, 5).map_err(|e| e.to_string())?);
    let run = || -> Result<Vec<u8>, String> {
        let mut net = ExtremeC3Net::build(&cfg.training_spec(), cfg.train.seed).map_err(|e| e.to_string())?;
        let ck = train_two_stage(&mut net, &ds, &cfg, &mut Vec::new()).map_err(|e| e.to_string())?;
        Ok(ck.to_bytes())
    };
    let (a, b) = (run()?, run()?);
    check!(a == b, "checkpoints of identical runs differ");

    let ck = Checkpoint::from_bytes(&a).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ck, &path).map_err(|e| e.to_string())?;
    let before = ck.to_network().map_err(|e| e.to_string())?;
    let after = load_checkpoint(&path).and_then(|c| c.to_network()).map_err(|e| e.to_string())?;
    let refs: Vec<&Sample> = ds.samples.iter().collect();
    let (x, _) = make_batch(&refs, &cfg.data.normalization).map_err(|e| e.to_string())?;
    let ya = before.infer(&x, Head::Full).map_err(|e| e.to_string())?;
    let yb = after.infer(&x, Head::Full).map_err(|e| e.to_string())?;
    check!(ya == yb, "forward differs after save/load");
    Ok(format!("{}-byte checkpoints identical, save/load forward bitwise equal", a.len()))
}

fn augmentation() -> Outcome {
    let cfg = AugmentConfig::default();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let inside = |v: f64, lo: f64, hi: f64| (lo..=hi).contains(&v);
    for i in 0..1000 {
        let p = draw_params(&cfg, &mut r);
        let ok = inside(p.rotation_deg, -45.0, 45.0)
            && inside(p.scale, 0.5, 1.5)
            && inside(p.translate_x, -0.25, 0.25)
            && inside(p.translate_y, -0.25, 0.25)
            && p.noise_sigma.is_none_or(|s| s == 10.0)
            && p.blur_kernel.is_none_or(|k| k == 3 || k == 5)
            && p.color.is_none_or(|v| inside(v, 0.4, 1.7))
            && p.brightness.is_none_or(|v| inside(v, 0.4, 1.7))
            && p.contrast.is_none_or(|v| inside(v, 0.6, 1.5))
            && p.sharpness.is_none_or(|v| inside(v, 0.8, 1.3));
        check!(ok, "draw {i} out of range: {p:?}");
    }
    let samples = ellipses(10, 40, 40, 1).map_err(|e| e.to_string())?;
    for (i, s) in samples.iter().enumerate() {
        for seed in 0..10u64 {
            let (out, _) = augment(s, &cfg, seed * 100 + i as u64, 40, 40).map_err(|e| e.to_string())?;
            check!(out.mask.data().iter().all(|&v| v <= 1), "non-binary mask for sample {i}, seed {seed}");
        }
    }
    Ok("1000 draws in range, 100 augmented masks binary".into())
}

fn grouped_evaluation() -> Outcome {
    let cfg = desk_config(0, 1, 32);
    let net = ExtremeC3Net::build(&cfg.training_spec(), 1).map_err(|e| e.to_string())?;
    let mut samples = ellipses(7, 32, 32, 4).map_err(|e| e.to_string())?;
    for (i, s) in samples.iter_mut().enumerate() {
        s.attributes = Some(Attributes {
            race: if i < 3 { Race::Asian } else { Race::Caucasian },
            gender: if i % 2 == 0 { Gender::Man } else { Gender::Woman },
            age: if i < 5 { Age::Youth } else { Age::Senior },
        });
    }
    let ds = Dataset::from_samples(samples);
    let r = grouped_miou(&net, &ds, &cfg.data.normalization).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for dim in ["Race", "Gender", "Age"] {
        let rows: Vec<&GroupRow> = r.groups.iter().filter(|g| g.attribute == dim).collect();
        check!(rows.len() == 2, "{dim} has {} groups", rows.len());
        let n: usize = rows.iter().map(|g| g.count).sum();
        check!(n == ds.len(), "{dim} counts sum to {n}");
        let mean = rows.iter().map(|g| g.miou * g.count as f64).sum::<f64>() / n as f64;
        worst = worst.max((mean - r.miou).abs());
    }
    check!(worst < GROUP_TOL, "decomposition off by {worst:.2e}");
    let table = render_group_table(&r);
    for word in ["Race", "Gender", "Age", "Asian", "Caucasian", "Man", "Woman", "Youth", "Senior", "Overall"] {
        check!(table.contains(word), "table lacks {word}:\n{table}");
    }
    for line in table.lines() {
        println!("       {line}");
    }
    Ok(format!("size-weighted means within {worst:.1e} of overall {:.4}", r.miou))
}
