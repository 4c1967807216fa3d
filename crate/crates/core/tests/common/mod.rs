//! Helpers shared by the integration tests.

#![allow(dead_code)]

use sentinel::attention::{AttnMask, MultiHeadAttention, MultiPatchAttention};
use sentinel::gradcheck::{self, GradCheckReport, DEFAULT_STEP};
use sentinel::layers::{Activation, FeedForward, ForwardCtx, LayerNorm, Linear, Module};
use sentinel::preprocessing::{make_patches, Embedder, PatchGrid, RevIn};
use sentinel::tensor::causal_mask;
use sentinel::training::{l1_loss, mse_loss};
use sentinel::{ModelConfig, Result, Rng, SentinelModel, Tensor, Variant};

pub fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Values with `0.2 <= |v| <= 1.5`, keeping kinks of abs/relu out of reach of
/// the finite-difference step.
pub fn off_kink(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.uniform(0.2, 1.5);
            if rng.next_f64() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

/// Tiny model geometry used by the end-to-end gradient checks.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        lookback: 8,
        horizon: 3,
        channels: 2,
        d_model: 8,
        n_enc: 1,
        n_dec: 1,
        patch_len: 4,
        stride: 2,
        heads: 2,
        variant,
        ..ModelConfig::default()
    }
}

type Objective = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: Objective,
}

fn case(name: &str, inputs: Vec<Tensor>, seed: u64, f: impl Fn(&[Tensor]) -> Result<Tensor> + 'static) -> GradCase {
    let probe = seed.wrapping_add(10_000);
    GradCase {
        name: name.to_string(),
        inputs,
        f: Box::new(move |a| gradcheck::project(&f(a)?, probe)),
    }
}

/// Replaces every parameter of `m` (in visit order) with `params`.
pub fn with_params<M: Module + Clone>(m: &M, params: &[Tensor]) -> M {
    let mut out = m.clone();
    let mut i = 0;
    out.visit_mut("", &mut |_, p| {
        *p = params[i].clone();
        i += 1;
    });
    assert_eq!(i, params.len(), "parameter count mismatch");
    out
}

pub fn params_of(m: &dyn Module) -> Vec<Tensor> {
    let mut v = Vec::new();
    m.visit("", &mut |_, t| v.push(t.clone()));
    v
}

/// Perturbs every parameter away from its initial value so that zero biases
/// and unit gains do not hide mistakes.
pub fn jitter<M: Module + Clone>(m: &M, seed: u64) -> M {
    let ps: Vec<Tensor> = params_of(m)
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let noise = rand_tensor(p.shape(), seed * 1000 + i as u64, -0.3, 0.3);
            p.add(&noise).unwrap().detach()
        })
        .collect();
    with_params(m, &ps)
}

fn module_case<M: Module + Clone + 'static>(
    name: &str,
    m: M,
    x: Tensor,
    seed: u64,
    fwd: impl Fn(&M, &Tensor) -> Result<Tensor> + 'static,
) -> GradCase {
    let mut inputs = vec![x];
    inputs.extend(params_of(&m));
    case(name, inputs, seed, move |a| fwd(&with_params(&m, &a[1..]), &a[0]))
}

/// Like [`module_case`] but `x` is held constant: only parameters are checked.
/// Used where the forward pass deliberately stops gradients through
/// input-derived statistics (RevIN's mean and std).
fn param_case<M: Module + Clone + 'static>(
    name: &str,
    m: M,
    x: Tensor,
    seed: u64,
    fwd: impl Fn(&M, &Tensor) -> Result<Tensor> + 'static,
) -> GradCase {
    case(name, params_of(&m), seed, move |a| fwd(&with_params(&m, a), &x))
}

/// Every differentiable operation plus composite layers and the end-to-end
/// tiny model, with inputs drawn from `seed`.
pub fn gradient_cases(seed: u64) -> Vec<GradCase> {
    let s = |k: u64| seed * 101 + k;
    let r = |shape: &[usize], k: u64| rand_tensor(shape, s(k), -1.0, 1.0);
    let pos = |shape: &[usize], k: u64| rand_tensor(shape, s(k), 0.5, 2.0);
    let mut cases = vec![
        case("add_broadcast", vec![r(&[3, 4], 1), r(&[4], 2)], seed, |a| a[0].add(&a[1])),
        case("sub_broadcast", vec![r(&[2, 3, 4], 3), r(&[3, 1], 4)], seed, |a| a[0].sub(&a[1])),
        case("mul_broadcast", vec![r(&[2, 3, 4], 5), r(&[1, 3, 4], 6)], seed, |a| a[0].mul(&a[1])),
        case("div_broadcast", vec![r(&[3, 4], 7), pos(&[3, 1], 8)], seed, |a| a[0].div(&a[1])),
        case("scale", vec![r(&[5], 9)], seed, |a| Ok(a[0].scale(-1.7))),
        case("add_scalar", vec![r(&[5], 10)], seed, |a| Ok(a[0].add_scalar(0.3))),
        case("neg", vec![r(&[5], 11)], seed, |a| Ok(a[0].neg())),
        case("square", vec![r(&[2, 3], 12)], seed, |a| Ok(a[0].square())),
        case("sqrt", vec![pos(&[2, 3], 13)], seed, |a| a[0].sqrt()),
        case("abs", vec![off_kink(&[2, 5], s(14))], seed, |a| Ok(a[0].abs())),
        case("relu", vec![off_kink(&[2, 5], s(15))], seed, |a| Ok(a[0].relu())),
        case("gelu", vec![rand_tensor(&[2, 5], s(16), -3.0, 3.0)], seed, |a| Ok(a[0].gelu())),
        case("clamp_min", vec![off_kink(&[2, 5], s(17))], seed, |a| Ok(a[0].clamp_min(0.0))),
        case("sum_all", vec![r(&[2, 3], 18)], seed, |a| Ok(a[0].sum_all().scale(1.3))),
        case("mean_all", vec![r(&[2, 3], 19)], seed, |a| Ok(a[0].mean_all().square())),
        case("sum_axis", vec![r(&[2, 3, 4], 20)], seed, |a| a[0].sum_axis(1, false)),
        case("mean_axis_keepdim", vec![r(&[2, 3, 4], 21)], seed, |a| a[0].mean_axis(-1, true)),
        case("var_axis", vec![r(&[3, 5], 22)], seed, |a| a[0].var_axis(0, false)),
        case("matmul_2d", vec![r(&[3, 4], 23), r(&[4, 2], 24)], seed, |a| a[0].matmul(&a[1])),
        case("matmul_batched", vec![r(&[2, 3, 4], 25), r(&[2, 4, 5], 26)], seed, |a| a[0].matmul(&a[1])),
        case("matmul_broadcast", vec![r(&[2, 2, 3, 4], 27), r(&[2, 1, 4, 3], 28)], seed, |a| a[0].matmul(&a[1])),
        case("softmax", vec![rand_tensor(&[3, 5], s(29), -2.0, 2.0)], seed, |a| a[0].softmax_lastdim()),
        case("softmax_causal", vec![rand_tensor(&[2, 4, 4], s(30), -2.0, 2.0)], seed, |a| {
            a[0].add(&causal_mask(4))?.softmax_lastdim()
        }),
        case("layer_norm", vec![r(&[3, 6], 31), pos(&[6], 32), r(&[6], 33)], seed, |a| {
            a[0].layer_norm_lastdim(&a[1], &a[2], 1e-5)
        }),
        case("dropout_train", vec![r(&[4, 6], 34)], seed, move |a| {
            a[0].dropout(0.3, &mut Rng::new(seed), true)
        }),
        case("gather", vec![r(&[6], 35)], seed, |a| a[0].gather(&[2, 3], vec![0, 2, 2, 5, 1, 0])),
        case("reshape", vec![r(&[2, 6], 36)], seed, |a| a[0].reshape(&[3, 4])),
        case("permute_axes", vec![r(&[2, 3, 4], 37)], seed, |a| a[0].permute_axes(&[2, 0, 1])),
        case("transpose_last2", vec![r(&[2, 3, 4], 38)], seed, |a| a[0].transpose_last2()),
        case("slice", vec![r(&[3, 5], 39)], seed, |a| a[0].slice(-1, 1, 4)),
        case("concat", vec![r(&[2, 3], 40), r(&[1, 3], 41)], seed, |a| {
            Tensor::concat(&[a[0].clone(), a[1].clone()], 0)
        }),
        case("concat_lastdim", vec![r(&[2, 2], 42), r(&[2, 3], 43)], seed, |a| {
            Tensor::concat_lastdim(&[a[0].clone(), a[1].clone()])
        }),
        case("l1_loss", vec![off_kink(&[3, 2], s(44)), Tensor::zeros(&[3, 2])], seed, |a| {
            l1_loss(&a[0], &a[1])
        }),
        case("mse_loss", vec![r(&[3, 2], 45), r(&[3, 2], 46)], seed, |a| mse_loss(&a[0], &a[1])),
    ];

    let mut rng = Rng::new(s(50));
    let grid = PatchGrid::new(8, 4, 2).unwrap();
    cases.push(case("make_patches", vec![r(&[2, 8, 3], 51)], seed, move |a| make_patches(&a[0], &grid)));

    let revin = jitter(&RevIn::new(3, 1e-5), s(52));
    cases.push(param_case("revin_normalize", revin.clone(), r(&[2, 6, 3], 53), seed, |m, x| {
        m.normalize(x).map(|(y, _)| y)
    }));
    let state_src = r(&[2, 6, 3], 54);
    cases.push(module_case("revin_denormalize", revin, r(&[2, 4, 3], 55), seed, move |m, y| {
        let (_, st) = m.normalize(&state_src)?;
        m.denormalize(y, &st)
    }));

    let lin = jitter(&Linear::new(4, 3, true, &mut rng), s(56));
    cases.push(module_case("linear", lin, r(&[2, 4], 57), seed, |m, x| m.forward(x)));
    let ln = jitter(&LayerNorm::new(5, 1e-5), s(58));
    cases.push(module_case("layer_norm_module", ln, r(&[3, 5], 59), seed, |m, x| m.forward(x)));
    let ffn = jitter(&FeedForward::new(4, 8, Activation::Gelu, &mut rng), s(60));
    cases.push(module_case("feed_forward", ffn, r(&[3, 4], 61), seed, |m, x| m.forward(x)));
    let emb = jitter(&Embedder::new(4, 6, Activation::Gelu, &mut rng), s(62));
    cases.push(module_case("embedder", emb, r(&[2, 3, 4], 63), seed, |m, x| m.forward(x)));

    let mpa = MultiPatchAttention::new(6, true, &mut rng);
    cases.push(module_case("multi_patch_attention", mpa.clone(), r(&[3, 4, 6], 64), seed, |m, x| {
        m.forward(x, x, AttnMask::None, &mut ForwardCtx::eval()).map(|o| o.output)
    }));
    cases.push(module_case("multi_patch_attention_causal", mpa, r(&[3, 4, 6], 65), seed, |m, x| {
        m.forward(x, x, AttnMask::Causal, &mut ForwardCtx::eval()).map(|o| o.output)
    }));
    let mha = MultiHeadAttention::new(6, 2, &mut rng).unwrap();
    cases.push(module_case("multi_head_attention", mha, r(&[3, 4, 6], 66), seed, |m, x| {
        m.forward(x, x, AttnMask::Causal, &mut ForwardCtx::eval()).map(|o| o.output)
    }));

    for variant in Variant::ALL {
        let model = jitter(&SentinelModel::new(tiny_config(variant), seed).unwrap(), s(70));
        let x = rand_tensor(&[2, 8, 2], s(71), -2.0, 2.0);
        let dseed = s(72);
        cases.push(param_case(&format!("model_{variant}"), model, x, seed, move |m, x| {
            // Fixed dropout stream per evaluation keeps the objective smooth.
            let mut ctx = ForwardCtx::train(0.3, Rng::new(dseed));
            m.forward(x, &mut ctx)
        }));
    }
    cases
}

pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
}

pub fn run_gradient_suite(seed: u64) -> Vec<CaseResult> {
    gradient_cases(seed)
        .into_iter()
        .map(|c| {
            let report = gradcheck::check(&c.f, &c.inputs, DEFAULT_STEP)
                .unwrap_or_else(|e| panic!("{}: {e}", c.name));
            CaseResult { name: c.name, report }
        })
        .collect()
}
