//! The full gradient battery: every layer primitive at the per-layer gate,
//! then each block of a toy-sized network at the end-to-end gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_grad, sample_indices, GradCheckReport, DEFAULT_EPS};
use crate::error::Result;
use crate::layers::{
    activation_backward, activation_forward, batchnorm_forward, conv2d_backward, conv2d_forward, groupnorm_forward,
    linear_backward, linear_forward, norm_backward, ConvParams, ConvSpec, LinearParams, NormAffine, RunningStats,
    NORM_EPS,
};
use crate::model::cna::{
    cna_backward, cna_forward, depth_align, depth_align_backward, directional_gate, directional_gate_backward,
};
use crate::model::mste::{mste_backward, mste_forward};
use crate::model::stde::{stde_backward, stde_forward};
use crate::model::{
    classify, classify_backward, init_params, model_backward, model_forward, ListenNetParams, ModelConfig,
};
use crate::preprocess::Label;
use crate::tensor::{
    adaptive_avg_pool, adaptive_avg_pool_backward, concat_depth, linear_resize_time, linear_resize_time_backward,
    matmul_batched, matmul_batched_backward, slice_time_last, slice_time_last_backward, split_depth, Activation, Axis,
    Tensor4,
};
use crate::train::bce_loss;

pub const LAYER_GATE: f64 = 1e-4;
pub const MODEL_GATE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct BatteryOptions {
    /// Parameters sampled per check (all of them when fewer exist).
    pub samples: usize,
    pub eps: f64,
    pub seed: u64,
    /// Scales one analytic gradient by 1.01; used to prove the battery can
    /// fail.
    pub corrupt_backward: bool,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        Self {
            samples: 64,
            eps: DEFAULT_EPS,
            seed: 0,
            corrupt_backward: false,
        }
    }
}

type T64 = Tensor4<f64>;
type Forward<'a> = Box<dyn Fn(&[T64]) -> Result<T64> + 'a>;
type Backward<'a> = Box<dyn Fn(&[T64], &T64) -> Result<Vec<T64>> + 'a>;

struct Case<'a> {
    name: &'static str,
    leaves: Vec<T64>,
    forward: Forward<'a>,
    backward: Backward<'a>,
}

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> T64 {
    let n = shape.iter().product();
    Tensor4::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite shape")
}

fn vector(v: &[f64]) -> T64 {
    Tensor4::from_vec([1, 1, 1, v.len()], v.to_vec()).expect("finite shape")
}

fn dot(a: &T64, b: &T64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn run_case(case: Case<'_>, opts: &BatteryOptions, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let out = (case.forward)(&case.leaves)?;
    let r = random(out.shape(), rng);
    let grads = (case.backward)(&case.leaves, &r)?;
    let shapes: Vec<_> = case.leaves.iter().map(|t| t.shape()).collect();
    let theta: Vec<f64> = case.leaves.iter().flat_map(|t| t.data().iter().copied()).collect();
    let mut analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
    if opts.corrupt_backward && case.name == "conv2d.pointwise" {
        analytic.iter_mut().for_each(|g| *g *= 1.01);
    }
    let f = |th: &[f64]| {
        let mut leaves = Vec::with_capacity(shapes.len());
        let mut at = 0;
        for &s in &shapes {
            let n: usize = s.iter().product();
            leaves.push(Tensor4::from_vec(s, th[at..at + n].to_vec()).expect("shape"));
            at += n;
        }
        (case.forward)(&leaves).map_or(f64::NAN, |y| dot(&y, &r))
    };
    let idx = sample_indices(theta.len(), opts.samples, rng);
    Ok(finite_diff_grad(case.name, f, &theta, &analytic, &idx, opts.eps, LAYER_GATE))
}

fn conv_params(leaves: &[T64]) -> ConvParams<f64> {
    ConvParams {
        weight: leaves[1].clone(),
        bias: Some(leaves[2].data().to_vec()),
    }
}

fn conv_case(name: &'static str, spec: ConvSpec, x: [usize; 4], rng: &mut ChaCha8Rng) -> Case<'static> {
    let leaves = vec![random(x, rng), random(spec.weight_shape(), rng), random([1, 1, 1, spec.out_depth], rng)];
    Case {
        name,
        leaves,
        forward: Box::new(move |l| Ok(conv2d_forward(&l[0], &spec, &conv_params(l))?.0)),
        backward: Box::new(move |l, r| {
            let (_, cache) = conv2d_forward(&l[0], &spec, &conv_params(l))?;
            let g = conv2d_backward(&cache, r)?;
            Ok(vec![g.input, g.params.weight, vector(&g.params.bias.unwrap_or_default())])
        }),
    }
}

fn affine(l: &[T64]) -> NormAffine<f64> {
    NormAffine {
        gamma: l[1].data().to_vec(),
        beta: l[2].data().to_vec(),
    }
}

fn norm_grads(g: crate::layers::NormGrads<f64>) -> Vec<T64> {
    vec![g.input, vector(&g.affine.gamma), vector(&g.affine.beta)]
}

fn batchnorm_case(name: &'static str, training: bool, rng: &mut ChaCha8Rng) -> Case<'static> {
    let d = 4;
    let running = RunningStats {
        mean: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
        var: (0..d).map(|_| rng.random_range(0.5..2.0)).collect(),
    };
    let running2 = running.clone();
    let gamma: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
    let leaves = vec![random([3, d, 2, 5], rng), vector(&gamma), random([1, 1, 1, d], rng)];
    Case {
        name,
        leaves,
        forward: Box::new(move |l| Ok(batchnorm_forward(&l[0], &affine(l), &running, training, NORM_EPS)?.0)),
        backward: Box::new(move |l, r| {
            let (_, cache) = batchnorm_forward(&l[0], &affine(l), &running2, training, NORM_EPS)?;
            Ok(norm_grads(norm_backward(&cache, r)?))
        }),
    }
}

fn groupnorm_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let gamma: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
    let leaves = vec![random([2, 6, 2, 5], rng), vector(&gamma), random([1, 1, 1, 6], rng)];
    Case {
        name: "groupnorm",
        leaves,
        forward: Box::new(|l| Ok(groupnorm_forward(&l[0], &affine(l), 3, NORM_EPS)?.0)),
        backward: Box::new(|l, r| {
            let (_, cache) = groupnorm_forward(&l[0], &affine(l), 3, NORM_EPS)?;
            Ok(norm_grads(norm_backward(&cache, r)?))
        }),
    }
}

fn linear_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let params = |l: &[T64]| LinearParams {
        weight: l[1].clone(),
        bias: l[2].data().to_vec(),
    };
    Case {
        name: "linear",
        leaves: vec![random([3, 1, 1, 8], rng), random([5, 8, 1, 1], rng), random([1, 1, 1, 5], rng)],
        forward: Box::new(move |l| Ok(linear_forward(&l[0], &params(l))?.0)),
        backward: Box::new(move |l, r| {
            let (_, cache) = linear_forward(&l[0], &params(l))?;
            let g = linear_backward(&cache, r)?;
            Ok(vec![g.input, g.params.weight, vector(&g.params.bias)])
        }),
    }
}

fn activation_case(name: &'static str, kind: Activation, rng: &mut ChaCha8Rng) -> Case<'static> {
    let mut x = random([2, 4, 2, 5], rng);
    x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    Case {
        name,
        leaves: vec![x],
        forward: Box::new(move |l| Ok(activation_forward(&l[0], kind).0)),
        backward: Box::new(move |l, r| {
            let (_, cache) = activation_forward(&l[0], kind);
            Ok(vec![activation_backward(&cache, r)?])
        }),
    }
}

fn tensor_op_cases(rng: &mut ChaCha8Rng) -> Vec<Case<'static>> {
    vec![
        Case {
            name: "adaptive_avg_pool",
            leaves: vec![random([2, 3, 7, 9], rng)],
            forward: Box::new(|l| adaptive_avg_pool(&l[0], 3, 4)),
            backward: Box::new(|l, r| Ok(vec![adaptive_avg_pool_backward(r, l[0].shape())?])),
        },
        Case {
            name: "linear_resize.up",
            leaves: vec![random([3, 4, 1, 10], rng)],
            forward: Box::new(|l| linear_resize_time(&l[0], 17)),
            backward: Box::new(|_, r| Ok(vec![linear_resize_time_backward(r, 10)?])),
        },
        Case {
            name: "linear_resize.down",
            leaves: vec![random([3, 4, 1, 10], rng)],
            forward: Box::new(|l| linear_resize_time(&l[0], 6)),
            backward: Box::new(|_, r| Ok(vec![linear_resize_time_backward(r, 10)?])),
        },
        Case {
            name: "matmul_batched",
            leaves: vec![random([2, 1, 4, 5], rng), random([2, 1, 5, 3], rng)],
            forward: Box::new(|l| matmul_batched(&l[0], &l[1])),
            backward: Box::new(|l, r| {
                let (ga, gb) = matmul_batched_backward(&l[0], &l[1], r)?;
                Ok(vec![ga, gb])
            }),
        },
        Case {
            name: "slice_time_last",
            leaves: vec![random([2, 3, 2, 10], rng)],
            forward: Box::new(|l| slice_time_last(&l[0], 6)),
            backward: Box::new(|_, r| Ok(vec![slice_time_last_backward(r, 10)?])),
        },
        Case {
            name: "concat_depth",
            leaves: vec![random([2, 2, 2, 5], rng), random([2, 3, 2, 5], rng)],
            forward: Box::new(|l| concat_depth(&[&l[0], &l[1]])),
            backward: Box::new(|_, r| split_depth(r, &[2, 3])),
        },
        Case {
            name: "depth_align",
            leaves: vec![random([2, 3, 10, 6], rng)],
            forward: Box::new(|l| depth_align(&l[0], 4)),
            backward: Box::new(|l, r| Ok(vec![depth_align_backward(r, l[0].shape())?])),
        },
    ]
}

fn gate_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let gamma: Vec<f64> = (0..2).map(|_| rng.random_range(0.5..1.5)).collect();
    Case {
        name: "directional_gate",
        leaves: vec![random([3, 2, 4, 7], rng), vector(&gamma), random([1, 1, 1, 2], rng)],
        forward: Box::new(|l| Ok(directional_gate(&l[0], &affine(l))?.0)),
        backward: Box::new(|l, r| {
            let (_, cache) = directional_gate(&l[0], &affine(l))?;
            let (gx, ga) = directional_gate_backward(&cache, r)?;
            Ok(vec![gx, vector(&ga.gamma), vector(&ga.beta)])
        }),
    }
}

type BlockForward = fn(&[T64], &ListenNetParams<f64>, &ModelConfig) -> Result<T64>;
type BlockBackward = fn(&[T64], &ListenNetParams<f64>, &ModelConfig, &T64) -> Result<(Vec<T64>, ListenNetParams<f64>)>;

fn owned_by(name: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| name.starts_with(p))
}

/// A whole block as one case: its inputs followed by every parameter tensor
/// whose name starts with one of `prefixes`.
fn block_case(
    name: &'static str,
    prefixes: &'static [&'static str],
    inputs: Vec<T64>,
    params: ListenNetParams<f64>,
    config: ModelConfig,
    forward: BlockForward,
    backward: BlockBackward,
) -> Case<'static> {
    let n_inputs = inputs.len();
    let mut leaves = inputs;
    for (n, _, t) in params.tensors() {
        if owned_by(&n, prefixes) {
            leaves.push(vector(t));
        }
    }
    let rebuild = move |l: &[T64]| {
        let mut p = params.clone();
        let mut k = n_inputs;
        for (n, _, t) in p.tensors_mut() {
            if owned_by(&n, prefixes) {
                t.copy_from_slice(l[k].data());
                k += 1;
            }
        }
        p
    };
    let rebuild2 = rebuild.clone();
    let config2 = config.clone();
    Case {
        name,
        leaves,
        forward: Box::new(move |l| forward(&l[..n_inputs], &rebuild(l), &config)),
        backward: Box::new(move |l, r| {
            let (mut out, grads) = backward(&l[..n_inputs], &rebuild2(l), &config2, r)?;
            for (n, _, t) in grads.tensors() {
                if owned_by(&n, prefixes) {
                    out.push(vector(t));
                }
            }
            Ok(out)
        }),
    }
}

fn flat_pair(a: &T64, b: &T64) -> T64 {
    vector(&[a.data(), b.data()].concat())
}

fn split_pair(r: &T64, a: [usize; 4], b: [usize; 4]) -> Result<(T64, T64)> {
    let n: usize = a.iter().product();
    Ok((
        Tensor4::from_vec(a, r.data()[..n].to_vec())?,
        Tensor4::from_vec(b, r.data()[n..].to_vec())?,
    ))
}

fn block_cases(opts: &BatteryOptions, rng: &mut ChaCha8Rng) -> Result<Vec<Case<'static>>> {
    let config = toy_config();
    let mut params: ListenNetParams<f64> = init_params(&config, opts.seed)?;
    for (_, _, values) in params.tensors_mut() {
        values.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let (b, c, t, d) = (2, config.channels, config.window_len, config.d_depth);
    let tp = config.t_prime();
    Ok(vec![
        block_case(
            "block.stde",
            &["stde_t.", "stde_s."],
            vec![random([b, 1, c, t], rng)],
            params.clone(),
            config.clone(),
            |l, p, cfg| {
                let (e_t, e_s, _) = stde_forward(&l[0], p, cfg)?;
                Ok(flat_pair(&e_t, &e_s))
            },
            |l, p, cfg, r| {
                let (e_t, e_s, cache) = stde_forward(&l[0], p, cfg)?;
                let (g_t, g_s) = split_pair(r, e_t.shape(), e_s.shape())?;
                let mut grads = ListenNetParams::zeros(cfg);
                let gx = stde_backward(&cache, g_t, &g_s, &mut grads)?;
                Ok((vec![gx], grads))
            },
        ),
        block_case(
            "block.mste",
            &["mste."],
            vec![random([b, d, c, tp], rng), random([b, d, 1, tp], rng)],
            params.clone(),
            config.clone(),
            |l, p, cfg| Ok(mste_forward(&l[0], &l[1], p, &RunningStats::new(cfg.d_depth), cfg, true)?.e_s_prime),
            |l, p, cfg, r| {
                let out = mste_forward(&l[0], &l[1], p, &RunningStats::new(cfg.d_depth), cfg, true)?;
                let mut grads = ListenNetParams::zeros(cfg);
                let mut g_t = Tensor4::zeros(l[0].shape());
                mste_backward(&out.cache, r, &mut g_t, &mut grads)?;
                Ok((vec![g_t, r.clone()], grads))
            },
        ),
        block_case(
            "block.cna",
            &["cna."],
            vec![random([b, d, d, tp], rng), random([b, d, 1, tp], rng)],
            params.clone(),
            config.clone(),
            |l, p, cfg| Ok(cna_forward(&l[0], &l[1], p, cfg)?.e),
            |l, p, cfg, r| {
                let out = cna_forward(&l[0], &l[1], p, cfg)?;
                let mut grads = ListenNetParams::zeros(cfg);
                let (g_t, g_s) = cna_backward(&out.cache, r.clone(), &mut grads)?;
                Ok((vec![g_t, g_s], grads))
            },
        ),
        block_case(
            "block.classifier",
            &["classifier."],
            vec![random([b, d, 1, tp], rng)],
            params,
            config,
            |l, p, _| Ok(classify(&l[0], p)?.0),
            |l, p, cfg, r| {
                let (_, cache) = classify(&l[0], p)?;
                let mut grads = ListenNetParams::zeros(cfg);
                let g = classify_backward(&cache, r, &mut grads)?;
                Ok((vec![g], grads))
            },
        ),
    ])
}

/// The network configuration used for the end-to-end checks: 8 channels,
/// 32 samples, depth 8.
pub fn toy_config() -> ModelConfig {
    ModelConfig::with_input(8, 32).with_depth(8)
}

fn block_of(name: &str) -> &'static str {
    match name.split('.').next().unwrap_or("") {
        "stde_t" | "stde_s" => "model.stde",
        "mste" => "model.mste",
        "cna" => "model.cna",
        _ => "model.classifier",
    }
}

/// BCE loss of a training-mode forward, checked per block of parameters.
fn model_checks(config: &ModelConfig, opts: &BatteryOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let mut params: ListenNetParams<f64> = init_params(config, opts.seed)?;
    for (_, _, values) in params.tensors_mut() {
        values.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let x = random([2, 1, config.channels, config.window_len], rng);
    let labels = [Label::Left, Label::Right];
    let running = RunningStats::new(config.d_depth);

    let (probs, cache) = model_forward(&x, &params, &running, config, true)?;
    let (_, grad) = bce_loss(&probs, &labels)?;
    let grads = model_backward(cache, &grad)?;

    let names: Vec<&'static str> = params
        .tensors()
        .iter()
        .flat_map(|(n, _, t)| std::iter::repeat_n(block_of(n), t.len()))
        .collect();
    let theta: Vec<f64> = params.tensors().iter().flat_map(|(_, _, t)| t.iter().copied()).collect();
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|(_, _, t)| t.iter().copied()).collect();

    let f = |th: &[f64]| {
        let mut p = params.clone();
        let mut at = 0;
        for (_, _, values) in p.tensors_mut() {
            values.copy_from_slice(&th[at..at + values.len()]);
            at += values.len();
        }
        model_forward(&x, &p, &running, config, true)
            .and_then(|(probs, _)| bce_loss(&probs, &labels))
            .map_or(f64::NAN, |(l, _)| l)
    };

    let mut reports = Vec::new();
    for block in ["model.stde", "model.mste", "model.cna", "model.classifier"] {
        let members: Vec<usize> = (0..names.len()).filter(|&i| names[i] == block).collect();
        if members.is_empty() {
            continue;
        }
        let pick: Vec<usize> = sample_indices(members.len(), opts.samples, rng)
            .into_iter()
            .map(|k| members[k])
            .collect();
        reports.push(finite_diff_grad(block, f, &theta, &analytic, &pick, opts.eps, MODEL_GATE));
    }
    Ok(reports)
}

/// Runs every check and returns one report per layer or block.
pub fn run_battery(opts: &BatteryOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cases = vec![
        conv_case("conv2d.pointwise", ConvSpec::pointwise(3, 4), [2, 3, 3, 5], &mut rng),
        conv_case("conv2d.depthwise_temporal", ConvSpec::depthwise(4, (1, 8)), [2, 4, 2, 12], &mut rng),
        conv_case("conv2d.depthwise_spatial", ConvSpec::depthwise(4, (6, 1)), [2, 4, 6, 5], &mut rng),
        conv_case("conv2d.dilated", ConvSpec::dilated(4, 2, 3, 2), [2, 4, 1, 12], &mut rng),
        batchnorm_case("batchnorm.training", true, &mut rng),
        batchnorm_case("batchnorm.inference", false, &mut rng),
        groupnorm_case(&mut rng),
        linear_case(&mut rng),
        activation_case("gelu", Activation::Gelu, &mut rng),
        activation_case("sigmoid", Activation::Sigmoid, &mut rng),
        activation_case("softmax.depth", Activation::Softmax(Axis::Depth), &mut rng),
        activation_case("softmax.width", Activation::Softmax(Axis::Width), &mut rng),
        gate_case(&mut rng),
    ];
    cases.extend(tensor_op_cases(&mut rng));
    cases.extend(block_cases(opts, &mut rng)?);

    let mut reports = Vec::with_capacity(cases.len() + 4);
    for case in cases {
        reports.push(run_case(case, opts, &mut rng)?);
    }
    let config = toy_config();
    reports.extend(model_checks(&config, opts, &mut rng)?);
    for ablated in [
        ModelConfig {
            use_mste: false,
            ..config.clone()
        },
        ModelConfig {
            use_cna: false,
            ..config
        },
    ] {
        for mut r in model_checks(&ablated, opts, &mut rng)? {
            r.name = format!("{}[{}]", r.name, if ablated.use_mste { "no_cna" } else { "no_mste" });
            reports.push(r);
        }
    }
    Ok(reports)
}
