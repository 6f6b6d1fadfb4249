//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each component is evaluated on a scalar probe `L = Σ w ⊙ f(inputs)` with a
//! random projection `w`. Analytic gradients with respect to sampled input and
//! parameter coordinates are compared against `(L(θ+h) − L(θ−h)) / 2h`.
//! Coordinates whose one-sided differences disagree sit on a kink (a ReLU or
//! floor switching inside the step) and are redrawn; their count is reported.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{EncoderConfig, StemOrder, Variant, VcConfig};
use crate::error::Result;
use crate::layers::{for_each_param, zero_grads, BatchNorm2d, Conv2d, Linear, Mode, Module, ParameterSet, Visitor};
use crate::pooling::{weighted_stats, weighted_stats_backward, uniform_weights, AttentionBlock, EmbeddingHead, SpeakerEncoder};
use crate::se_resnet::{ResNetSeBlock, SeBlock};
use crate::tensor::{
    conv2d, conv2d_backward, relu, relu_backward, sigmoid, sigmoid_backward, softmax, softmax_backward, tanh,
    tanh_backward, Conv2dSpec, Tensor,
};
use crate::vc::{ConditionedLayer, ContentEncoder, Decoder, InstanceNorm};

/// Multiple of the probe's roundoff level `ε Σ|w ⊙ f| / h` below which a
/// gradient is compared absolutely rather than relatively.
const ROUNDOFF_MARGIN: f64 = 3e5;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seeds: u64,
    /// Coordinates sampled per seed (split between inputs and parameters).
    pub coords: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Minimum denominator of the relative error. The effective floor is
    /// raised to the roundoff level of the probe difference when that is larger.
    pub floor: f64,
    /// Test hook: multiply the analytic gradients of the named component.
    pub fault: Option<(String, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            coords: 24,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-7,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentReport {
    pub name: &'static str,
    pub worst_rel: f64,
    pub seeds: u64,
    pub checked: usize,
    pub kinks: usize,
    pub passed: bool,
}

impl ComponentReport {
    pub fn line(&self) -> String {
        format!(
            "{:<20} worst_rel={:.3e} seeds={} coords={} kinks={} {}",
            self.name,
            self.worst_rel,
            self.seeds,
            self.checked,
            self.kinks,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Something differentiable: parameters live in `module`, perturbable inputs in `inputs`.
struct Subject<M> {
    module: M,
    inputs: Vec<Tensor<f64>>,
    forward: fn(&mut M, &[Tensor<f64>]) -> Result<Tensor<f64>>,
    backward: fn(&mut M, &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
}

struct NoParams<S>(S);

impl<S> Module<f64> for NoParams<S> {
    fn visit(&mut self, _: &str, _: &mut dyn Visitor<f64>) {}
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

enum Coord {
    Input(usize, usize),
    Param(String, usize),
}

fn nudge_param<M: Module<f64>>(m: &mut M, target: &str, idx: usize, delta: f64) {
    for_each_param(m, |name, p| {
        if name == target {
            p.value.data_mut()[idx] += delta;
        }
    });
}

#[derive(Default)]
struct SeedOutcome {
    worst: f64,
    checked: usize,
    kinks: usize,
}

fn check_subject<M: Module<f64>>(
    s: &mut Subject<M>,
    rng: &mut ChaCha8Rng,
    opts: &GradcheckOptions,
    fault: f64,
) -> Result<SeedOutcome> {
    let y = (s.forward)(&mut s.module, &s.inputs)?;
    let w = randn(y.shape(), rng);
    zero_grads(&mut s.module);
    let mut g_inputs = (s.backward)(&mut s.module, &w)?;
    let mut params = ParameterSet::capture(&mut s.module);
    if fault != 1.0 {
        g_inputs.iter_mut().for_each(|g| *g = g.scale(fault));
        for_each_param(&mut params, |_, p| p.grad = p.grad.scale(fault));
    }
    let param_sizes: Vec<(String, usize)> = params.params().map(|(n, p)| (n.to_string(), p.value.len())).collect();
    let param_total: usize = param_sizes.iter().map(|p| p.1).sum();
    let input_total: usize = s.inputs.iter().map(Tensor::len).sum();

    let probe = |s: &mut Subject<M>| -> Result<f64> {
        let y = (s.forward)(&mut s.module, &s.inputs)?;
        Ok(y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
    };
    let mass: f64 = y.data().iter().zip(w.data()).map(|(a, b)| (a * b).abs()).sum();
    let h = opts.step;
    let floor = opts.floor.max(ROUNDOFF_MARGIN * f64::EPSILON * mass / h);
    let mut out = SeedOutcome::default();
    let mut attempts = 0;
    while out.checked < opts.coords && attempts < 4 * opts.coords {
        attempts += 1;
        let use_param = param_total > 0 && (input_total == 0 || attempts % 2 == 0);
        let coord = if use_param {
            let mut k = rng.gen_range(0..param_total);
            let (name, size) = param_sizes
                .iter()
                .find(|(_, n)| {
                    if k < *n {
                        true
                    } else {
                        k -= n;
                        false
                    }
                })
                .expect("index within total");
            debug_assert!(k < *size);
            Coord::Param(name.clone(), k)
        } else {
            let mut k = rng.gen_range(0..input_total);
            let i = s
                .inputs
                .iter()
                .position(|t| {
                    if k < t.len() {
                        true
                    } else {
                        k -= t.len();
                        false
                    }
                })
                .expect("index within total");
            Coord::Input(i, k)
        };
        let eval_at = |s: &mut Subject<M>, delta: f64| -> Result<f64> {
            match &coord {
                Coord::Input(i, k) => s.inputs[*i].data_mut()[*k] += delta,
                Coord::Param(n, k) => nudge_param(&mut s.module, n, *k, delta),
            }
            let v = probe(s);
            match &coord {
                Coord::Input(i, k) => s.inputs[*i].data_mut()[*k] -= delta,
                Coord::Param(n, k) => nudge_param(&mut s.module, n, *k, -delta),
            }
            v
        };
        let plus = eval_at(s, h)?;
        let minus = eval_at(s, -h)?;
        let numeric = (plus - minus) / (2.0 * h);
        let half = (eval_at(s, h / 2.0)? - eval_at(s, -h / 2.0)?) / h;
        if (numeric - half).abs() > 0.1 * opts.tolerance * numeric.abs().max(floor) {
            out.kinks += 1;
            continue;
        }
        let analytic = match &coord {
            Coord::Input(i, k) => g_inputs[*i].data()[*k],
            Coord::Param(n, k) => params
                .params()
                .find(|(pn, _)| pn == n)
                .map(|(_, p)| p.grad.data()[*k])
                .expect("captured parameter"),
        };
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        out.worst = out.worst.max(rel);
        out.checked += 1;
    }
    Ok(out)
}

fn run_component<M: Module<f64>>(
    name: &'static str,
    opts: &GradcheckOptions,
    mut build: impl FnMut(&mut ChaCha8Rng) -> Result<Subject<M>>,
) -> Result<ComponentReport> {
    let fault = match &opts.fault {
        Some((target, scale)) if target == name => *scale,
        _ => 1.0,
    };
    let mut report = ComponentReport {
        name,
        worst_rel: 0.0,
        seeds: opts.seeds,
        checked: 0,
        kinks: 0,
        passed: true,
    };
    for seed in 0..opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ (seed * 7919));
        let mut subject = build(&mut rng)?;
        let o = check_subject(&mut subject, &mut rng, opts, fault)?;
        report.worst_rel = report.worst_rel.max(o.worst);
        report.checked += o.checked;
        report.kinks += o.kinks;
    }
    report.passed = report.worst_rel < opts.tolerance && report.checked > 0;
    Ok(report)
}

/// Names of all components, in report order.
pub const COMPONENTS: &[&str] = &[
    "conv2d_kernel",
    "activations",
    "softmax",
    "linear",
    "conv2d_layer",
    "batchnorm_train",
    "batchnorm_eval",
    "se_block",
    "resnet_se_block",
    "stats_pooling",
    "attention_pooling",
    "embedding_head",
    "encoder_tiny",
    "encoder_resnet",
    "instance_norm",
    "content_encoder",
    "conditioned_layer",
    "decoder",
];

fn small_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(3..=6), rng.gen_range(3..=6))
}

/// Runs one named component.
pub fn check_component(name: &str, opts: &GradcheckOptions) -> Result<ComponentReport> {
    match name {
        "conv2d_kernel" => run_component("conv2d_kernel", opts, |rng| {
            let (n, c, h, w) = small_dims(rng);
            let o = rng.gen_range(1..=3);
            let k = [1, 3][rng.gen_range(0..2)];
            let s = rng.gen_range(1..=2);
            let spec = Conv2dSpec::same((k, k), (s, s));
            Ok(Subject {
                module: NoParams((spec, None)),
                inputs: vec![randn(&[n, c, h, w], rng), randn(&[o, c, k, k], rng)],
                forward: conv_forward,
                backward: conv_backward,
            })
        }),
        "activations" => run_component("activations", opts, |rng| {
            let (n, c, h, w) = small_dims(rng);
            Ok(Subject {
                module: NoParams(None::<Tensor<f64>>),
                inputs: vec![randn(&[n, c, h, w], rng)],
                // tanh(sigmoid(x) + relu(x))
                forward: |m, x| {
                    m.0 = Some(x[0].clone());
                    Ok(tanh(&sigmoid(&x[0]).add(&relu(&x[0]))?))
                },
                backward: |m, g| {
                    let x = m.0.clone().expect("forward ran");
                    let s = sigmoid(&x);
                    let y = tanh(&s.add(&relu(&x))?);
                    let gz = tanh_backward(&y, g)?;
                    let mut gx = sigmoid_backward(&s, &gz)?;
                    gx.add_assign(&relu_backward(&x, &gz)?)?;
                    Ok(vec![gx])
                },
            })
        }),
        "softmax" => run_component("softmax", opts, |rng| {
            let (n, c, h, _) = small_dims(rng);
            let axis = rng.gen_range(0..3);
            Ok(Subject {
                module: NoParams((axis, None::<Tensor<f64>>)),
                inputs: vec![randn(&[n, c, h], rng).scale(2.0)],
                forward: |m, x| {
                    let y = softmax(&x[0], m.0 .0)?;
                    m.0 .1 = Some(y.clone());
                    Ok(y)
                },
                backward: |m, g| Ok(vec![softmax_backward(m.0 .1.as_ref().expect("forward ran"), g, m.0 .0)?]),
            })
        }),
        "linear" => run_component("linear", opts, |rng| {
            let (n, i, o) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=5));
            let mut l = Linear::new(i, o, rng);
            l.bias.value = randn(&[o], rng);
            Ok(Subject {
                module: l,
                inputs: vec![randn(&[n, i], rng)],
                forward: |m, x| m.forward(&x[0], Mode::Train),
                backward: |m, g| Ok(vec![m.backward(g)?]),
            })
        }),
        "conv2d_layer" => run_component("conv2d_layer", opts, |rng| {
            let (n, c, h, w) = small_dims(rng);
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let s = rng.gen_range(1..=2);
            let mut l = Conv2d::new(c, rng.gen_range(1..=3), (k, k), (s, s), rng);
            let o = l.out_channels();
            l.bias.value = randn(&[o], rng);
            Ok(Subject {
                module: l,
                inputs: vec![randn(&[n, c, h, w], rng)],
                forward: |m, x| m.forward(&x[0], Mode::Train),
                backward: |m, g| Ok(vec![m.backward(g)?]),
            })
        }),
        "batchnorm_train" | "batchnorm_eval" => {
            let train = name == "batchnorm_train";
            let label = if train { "batchnorm_train" } else { "batchnorm_eval" };
            run_component(label, opts, move |rng| {
                let (n, c, h, w) = small_dims(rng);
                let mut bn = BatchNorm2d::new(c);
                bn.gamma.value = randn(&[c], rng);
                bn.beta.value = randn(&[c], rng);
                bn.running_mean = randn(&[c], rng);
                bn.running_var = Tensor::from_fn(&[c], |_| rng.gen_range(0.5..2.0));
                let fwd: fn(&mut BatchNorm2d<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>> = if train {
                    |m, x| m.forward(&x[0], Mode::Train)
                } else {
                    |m, x| m.forward(&x[0], Mode::Eval)
                };
                Ok(Subject {
                    module: bn,
                    inputs: vec![randn(&[n.max(2), c, h, w], rng)],
                    forward: fwd,
                    backward: |m, g| Ok(vec![m.backward(g)?]),
                })
            })
        }
        "se_block" => run_component("se_block", opts, |rng| {
            let r = [2, 4][rng.gen_range(0..2)];
            let c = r * rng.gen_range(1..=3);
            let (n, _, h, w) = small_dims(rng);
            let mut se = SeBlock::new(c, r, rng)?;
            se.fc1.bias.value = randn(&[c / r], rng).scale(0.5);
            Ok(Subject {
                module: se,
                inputs: vec![randn(&[n, c, h, w], rng)],
                forward: |m, x| m.forward(&x[0], true, Mode::Train),
                backward: |m, g| Ok(vec![m.backward(g)?]),
            })
        }),
        "resnet_se_block" => run_component("resnet_se_block", opts, |rng| {
            let stride = rng.gen_range(1..=2);
            let cin = rng.gen_range(1..=4);
            let cout = 4;
            let block = ResNetSeBlock::new(cin, cout, stride, 2, rng)?;
            Ok(Subject {
                module: block,
                inputs: vec![randn(&[2, cin, rng.gen_range(4..=6), rng.gen_range(4..=6)], rng)],
                forward: |m, x| m.forward(&x[0], Variant::Ddse, Mode::Train),
                backward: |m, g| Ok(vec![m.backward(g)?]),
            })
        }),
        "stats_pooling" => run_component("stats_pooling", opts, |rng| {
            let (n, t, d) = (rng.gen_range(1..=3), rng.gen_range(2..=6), rng.gen_range(1..=5));
            Ok(Subject {
                module: NoParams(None::<(Tensor<f64>, Tensor<f64>)>),
                inputs: vec![randn(&[n, t, d], rng)],
                forward: |m, x| {
                    let a = uniform_weights(x[0].shape()[0], x[0].shape()[1]);
                    let u = weighted_stats(&x[0], &a, 1e-8)?;
                    m.0 = Some((x[0].clone(), u.clone()));
                    Ok(u)
                },
                backward: |m, g| {
                    let (h, u) = m.0.clone().expect("forward ran");
                    let a = uniform_weights(h.shape()[0], h.shape()[1]);
                    Ok(vec![weighted_stats_backward(&h, &a, &u, g, 1e-8)?.0])
                },
            })
        }),
        "attention_pooling" => run_component("attention_pooling", opts, |rng| {
            let (n, t, d) = (rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=5));
            let att = AttentionBlock::new(d, rng.gen_range(1..=4), rng);
            Ok(Subject {
                module: AttentionPool { att, cache: None },
                inputs: vec![randn(&[n, t, d], rng)],
                forward: |m, x| m.forward(&x[0]),
                backward: |m, g| Ok(vec![m.backward(g)?]),
            })
        }),
        "embedding_head" => run_component("embedding_head", opts, |rng| {
            let (n, d) = (rng.gen_range(1..=3), rng.gen_range(2..=8));
            let mut head = EmbeddingHead::new(d, rng.gen_range(2..=6), rng);
            head.bottleneck.bias.value = randn(head.bottleneck.bias.value.shape(), rng).scale(0.3);
            Ok(Subject {
                module: head,
                inputs: vec![randn(&[n, d], rng)],
                forward: |m, x| m.forward(&x[0], Mode::Train),
                backward: |m, g| Ok(vec![m.backward(g)?]),
            })
        }),
        "encoder_tiny" | "encoder_resnet" => {
            let variant = if name == "encoder_tiny" { Variant::Ddse } else { Variant::Resnet };
            let label = if name == "encoder_tiny" { "encoder_tiny" } else { "encoder_resnet" };
            run_component(label, opts, move |rng| {
                let cfg = tiny_encoder(variant, rng);
                let t = rng.gen_range(6..=9);
                let enc = SpeakerEncoder::new(&cfg, rng)?;
                Ok(Subject {
                    module: enc,
                    inputs: vec![randn(&[2, 1, cfg.n_mels, t], rng)],
                    forward: |m, x| m.forward(&x[0], Mode::Train),
                    backward: |m, g| Ok(vec![m.backward(g)?]),
                })
            })
        }
        "instance_norm" => run_component("instance_norm", opts, |rng| {
            let (n, c, _, t) = small_dims(rng);
            Ok(Subject {
                module: NoParams(InstanceNorm::new(1e-8)),
                inputs: vec![randn(&[n, c, 1, t], rng)],
                forward: |m, x| m.0.forward(&x[0]),
                backward: |m, g| Ok(vec![m.0.backward(g)?]),
            })
        }),
        "content_encoder" => run_component("content_encoder", opts, |rng| {
            let cfg = tiny_vc(rng);
            let bands = rng.gen_range(2..=5);
            let t = rng.gen_range(4..=8);
            Ok(Subject {
                module: ContentEncoder::new(bands, &cfg, rng),
                inputs: vec![randn(&[rng.gen_range(1..=2), bands, 1, t], rng)],
                forward: |m, x| m.forward(&x[0], Mode::Train),
                backward: |m, g| Ok(vec![m.backward(g)?]),
            })
        }),
        "conditioned_layer" => run_component("conditioned_layer", opts, |rng| {
            let cfg = tiny_vc(rng);
            let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let n = rng.gen_range(1..=2);
            let layer = ConditionedLayer::new(cin, cout, &cfg, rng.gen_bool(0.5), rng);
            Ok(Subject {
                module: layer,
                inputs: vec![
                    randn(&[n, cin, 1, rng.gen_range(3..=7)], rng),
                    randn(&[n, crate::pooling::EMBEDDING_DIM], rng).scale(0.1),
                ],
                forward: |m, x| m.forward(&x[0], &x[1], Mode::Train),
                backward: |m, g| {
                    let (gx, ge) = m.backward(g)?;
                    Ok(vec![gx, ge])
                },
            })
        }),
        "decoder" => run_component("decoder", opts, |rng| {
            let cfg = tiny_vc(rng);
            let bands = rng.gen_range(2..=5);
            let n = rng.gen_range(1..=2);
            Ok(Subject {
                module: Decoder::new(bands, &cfg, rng),
                inputs: vec![
                    randn(&[n, cfg.content_dim, 1, rng.gen_range(3..=7)], rng),
                    randn(&[n, crate::pooling::EMBEDDING_DIM], rng).scale(0.1),
                ],
                forward: |m, x| m.forward(&x[0], &x[1], Mode::Train),
                backward: |m, g| {
                    let (gx, ge) = m.backward(g)?;
                    Ok(vec![gx, ge])
                },
            })
        }),
        other => Err(crate::Error::Config(format!(
            "unknown gradcheck component `{other}`; known: {}",
            COMPONENTS.join(", ")
        ))),
    }
}

/// A tiny encoder: two blocks of four channels over a handful of bands.
pub fn tiny_encoder(variant: Variant, rng: &mut impl Rng) -> EncoderConfig {
    EncoderConfig {
        n_mels: rng.gen_range(4..=8),
        channels: vec![4, 4, 4],
        reduction: 2,
        variant,
        stem_order: if rng.gen_bool(0.5) { StemOrder::ConvReluBn } else { StemOrder::ConvBnRelu },
        attention_dim: 5,
        bottleneck: 6,
        ..EncoderConfig::default()
    }
}

fn tiny_vc(rng: &mut impl Rng) -> VcConfig {
    VcConfig {
        content_dim: rng.gen_range(2..=4),
        hidden: rng.gen_range(2..=4),
        kernel: 3,
        norm_eps: 1e-8,
    }
}

/// Attention weights feeding weighted statistics, so that the attention
/// parameters are checked through the pooled output.
struct AttentionPool {
    att: AttentionBlock<f64>,
    cache: Option<(Tensor<f64>, Tensor<f64>, Tensor<f64>)>,
}

impl AttentionPool {
    fn forward(&mut self, h: &Tensor<f64>) -> Result<Tensor<f64>> {
        let a = self.att.forward(h, Mode::Train)?;
        let u = weighted_stats(h, &a, 1e-8)?;
        self.cache = Some((h.clone(), a, u.clone()));
        Ok(u)
    }

    fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (h, a, u) = self.cache.take().expect("forward ran");
        let (mut gh, ga) = weighted_stats_backward(&h, &a, &u, g, 1e-8)?;
        gh.add_assign(&self.att.backward(&ga)?)?;
        Ok(gh)
    }
}

impl Module<f64> for AttentionPool {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<f64>) {
        self.att.visit(prefix, v);
    }
}

type ConvOperands = (Conv2dSpec, Option<(Tensor<f64>, Tensor<f64>)>);

fn conv_forward(m: &mut NoParams<ConvOperands>, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    m.0 .1 = Some((x[0].clone(), x[1].clone()));
    conv2d(&x[0], &x[1], m.0 .0)
}

fn conv_backward(m: &mut NoParams<ConvOperands>, g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
    let (x, w) = m.0 .1.clone().expect("forward ran");
    let (gi, gw) = conv2d_backward(&x, &w, g, m.0 .0)?;
    Ok(vec![gi, gw])
}

/// Runs every component in [`COMPONENTS`] order.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<ComponentReport>> {
    COMPONENTS.iter().map(|c| check_component(c, opts)).collect()
}
