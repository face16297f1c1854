//! Randomized finite-difference checks of every differentiable operation
//! and of the full VAT loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{grad_check_params, relative_error, Padding, ParamStore, Tape, Tensor, Var};
use crate::data::TaskKind;
use crate::error::Result;
use crate::nn;
use crate::rng::{self, Rng, Stream};
use crate::trainer::{feature_stats_on_tape, vat_total_loss, Method, ModelSpec, VatModel};

/// Checked step size.
pub const GRADCHECK_EPS: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Worst relative error of one operation over its random instances.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckCase {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub seconds: f64,
}

impl GradcheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOL
    }
}

/// Every case in the suite, in run order.
pub const GRADCHECK_OPS: [&str; 33] = [
    "matmul",
    "add_row_bias",
    "add_channel_bias",
    "conv2d_same",
    "conv2d_valid",
    "max_pool2",
    "relu",
    "sigmoid",
    "ln",
    "abs",
    "sqrt",
    "clamp",
    "grl",
    "scale",
    "add_scalar",
    "add",
    "sub",
    "mul",
    "div",
    "sum",
    "mean",
    "spatial_mean",
    "spatial_var",
    "sum_channels",
    "concat",
    "narrow",
    "reshape",
    "flatten",
    "flatten_batch",
    "bce",
    "mae",
    "dice_macro",
    "vat_loss",
];

/// Entries are `±[lo, hi]`, keeping clear of the kink at 0.
fn away_from_zero(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .expect("shape and data agree")
}

/// Distinct values at least 0.05 apart, so no pooling window has a tie.
fn distinct(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|i| 0.05 * i as f64 - 0.025 * n as f64).collect();
    levels.shuffle(rng);
    Tensor::new(shape.to_vec(), levels).expect("shape and data agree")
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// Contracts `y` with fixed random weights so every output entry gets a
/// distinct upstream gradient.
fn project(tape: &mut Tape, y: Var, rng: &mut Rng) -> Result<Var> {
    let w = uniform(rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// One random instance: named inputs plus a builder of the checked scalar.
struct Instance {
    inputs: ParamStore,
    build: Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>,
    /// The reversed-gradient layer's backward pass is the negated
    /// derivative of its forward pass.
    negated: bool,
}

fn store(inputs: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (id, t) in inputs {
        s.insert(id, t).expect("fresh ids");
    }
    s
}

fn unary(
    rng: &mut Rng,
    x: Tensor,
    op: impl Fn(&mut Tape, Var) -> Result<Var> + 'static,
) -> Instance {
    let seed = rng.gen();
    Instance {
        inputs: store(vec![("x", x)]),
        build: Box::new(move |tape, p| {
            let x = tape.param(p, "x")?;
            let y = op(tape, x)?;
            project(tape, y, &mut rng::stream(seed, Stream::Eval))
        }),
        negated: false,
    }
}

fn binary(
    rng: &mut Rng,
    a: Tensor,
    b: Tensor,
    op: impl Fn(&mut Tape, Var, Var) -> Result<Var> + 'static,
) -> Instance {
    let seed = rng.gen();
    Instance {
        inputs: store(vec![("a", a), ("b", b)]),
        build: Box::new(move |tape, p| {
            let a = tape.param(p, "a")?;
            let b = tape.param(p, "b")?;
            let y = op(tape, a, b)?;
            project(tape, y, &mut rng::stream(seed, Stream::Eval))
        }),
        negated: false,
    }
}

fn small_shape(rng: &mut Rng) -> Vec<usize> {
    let rank = dim(rng, 1, 3);
    (0..rank).map(|_| dim(rng, 1, 4)).collect()
}

fn image_shape(rng: &mut Rng, min_side: usize) -> Vec<usize> {
    vec![
        dim(rng, 1, 2),
        dim(rng, 1, 3),
        dim(rng, min_side, 5),
        dim(rng, min_side, 5),
    ]
}

/// The full VAT loss on a tiny network: two conv blocks on 8×8 images and
/// a 4-unit discriminator.
///
/// Backpropagation through the reversed-gradient layers yields
/// `∂L_main + λ·∂BCE` for discriminator parameters and `∂L_main − λ·∂BCE`
/// for encoder parameters, so the two terms are differenced separately and
/// the auxiliary one is negated for every encoder parameter.
/// Instances whose forward pass comes closer than this to a kink are
/// redrawn, since a finite difference across a kink measures no derivative.
const KINK_MARGIN: f64 = 1e-4;
const MAX_DRAWS: usize = 1000;

/// Task and discriminator BCE terms of one Siamese VAT forward pass.
fn vat_parts(
    model: &VatModel,
    tape: &mut Tape,
    p: &ParamStore,
    x_tr: &Tensor,
    x_a: &Tensor,
    y: &Tensor,
    t_a: &Tensor,
) -> Result<(Var, Var)> {
    let xt = tape.constant(x_tr.clone());
    let xa = tape.constant(x_a.clone());
    let enc_tr = model.encode(tape, p, xt)?;
    let enc_a = model.encode(tape, p, xa)?;
    let main = nn::bce(tape, enc_tr.prediction, y)?;
    let s_tr = feature_stats_on_tape(tape, &enc_tr.blocks, model.aggregation)?;
    let s_a = feature_stats_on_tape(tape, &enc_a.blocks, model.aggregation)?;
    let t_hat = model.discriminate(tape, p, s_tr, s_a)?;
    let aux = nn::bce(tape, t_hat, t_a)?;
    Ok((main, aux))
}

fn vat_loss_check(rng: &mut Rng) -> Result<f64> {
    let spec = ModelSpec {
        image_size: 8,
        channels: vec![2, 3],
        disc_hidden: 4,
    };
    let b = 2;
    let mut draws = 0;
    let (model, lambda, x_tr, x_a, y, t_a, mut work, analytic) = loop {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(crate::Error::Contract(format!(
                "no VAT instance within {MAX_DRAWS} draws keeps {KINK_MARGIN:e} away from every kink"
            )));
        }
        let method = if rng.gen_bool(0.5) {
            Method::VatEarly
        } else {
            Method::VatLate
        };
        let model = VatModel::new(spec.clone(), TaskKind::Binary, method)?;
        // Zero-initialized biases put ReLU inputs exactly on the kink whenever a
        // block is silent, so every value is jittered off its initialization.
        let mut params = model.init_params(rng.gen())?;
        let jittered: Vec<f64> = params
            .flat_values()
            .iter()
            .map(|v| v + rng.gen_range(-0.1..0.1))
            .collect();
        params.set_flat_values(&jittered)?;
        let x_tr = uniform(rng, &[b, 1, 8, 8], 0.0, 1.0);
        let x_a = uniform(rng, &[b, 1, 8, 8], 0.0, 1.0);
        let y = Tensor::new(
            vec![b, 1],
            (0..b).map(|_| f64::from(rng.gen_range(0..2u8))).collect(),
        )?;
        let t_a = Tensor::new(
            vec![b, 1],
            (0..b).map(|_| f64::from(rng.gen_range(0..2u8))).collect(),
        )?;
        let lambda = rng.gen_range(0.01..1.0);

        params.zero_grad();
        let mut tape = Tape::new();
        let (main, aux) = vat_parts(&model, &mut tape, &params, &x_tr, &x_a, &y, &t_a)?;
        if tape.kink_margin() < KINK_MARGIN {
            continue;
        }
        let total = vat_total_loss(&mut tape, main, aux, lambda)?;
        let grads = tape.backward(total)?;
        params.accumulate(&tape, &grads);
        let analytic = params.flat_grads();
        break (model, lambda, x_tr, x_a, y, t_a, params, analytic);
    };
    let parts = |tape: &mut Tape, p: &ParamStore| vat_parts(&model, tape, p, &x_tr, &x_a, &y, &t_a);
    let reversed: Vec<bool> = work
        .iter()
        .flat_map(|p| std::iter::repeat_n(p.id.starts_with("encoder."), p.value.len()))
        .collect();

    let base = work.flat_values();
    let mut probe = base.clone();
    let mut worst = 0f64;
    for i in 0..base.len() {
        let mut eval = |value: f64| -> Result<(f64, f64)> {
            probe[i] = value;
            work.set_flat_values(&probe)?;
            let mut tape = Tape::new();
            let (main, aux) = parts(&mut tape, &work)?;
            Ok((tape.value(main).item(), tape.value(aux).item()))
        };
        let (main_plus, aux_plus) = eval(base[i] + GRADCHECK_EPS)?;
        let (main_minus, aux_minus) = eval(base[i] - GRADCHECK_EPS)?;
        probe[i] = base[i];
        let d_main = (main_plus - main_minus) / (2.0 * GRADCHECK_EPS);
        let d_aux = lambda * (aux_plus - aux_minus) / (2.0 * GRADCHECK_EPS);
        let numeric = if reversed[i] {
            d_main - d_aux
        } else {
            d_main + d_aux
        };
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

fn instance(op: &str, rng: &mut Rng) -> Result<Instance> {
    let inst = match op {
        "matmul" => {
            let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let (a, b) = (
                uniform(rng, &[m, k], -1.0, 1.0),
                uniform(rng, &[k, n], -1.0, 1.0),
            );
            binary(rng, a, b, |t, a, b| t.matmul(a, b))
        }
        "add_row_bias" => {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let (a, b) = (
                uniform(rng, &[m, n], -1.0, 1.0),
                uniform(rng, &[n], -1.0, 1.0),
            );
            binary(rng, a, b, |t, a, b| t.add_row_bias(a, b))
        }
        "add_channel_bias" => {
            let s = image_shape(rng, 1);
            let (a, b) = (
                uniform(rng, &s, -1.0, 1.0),
                uniform(rng, &[s[1]], -1.0, 1.0),
            );
            binary(rng, a, b, |t, a, b| t.add_channel_bias(a, b))
        }
        "conv2d_same" | "conv2d_valid" => {
            let padding = if op == "conv2d_same" {
                Padding::Same
            } else {
                Padding::Valid
            };
            let s = image_shape(rng, 3);
            let k = if rng.gen_bool(0.5) { 3 } else { 1 };
            let f = dim(rng, 1, 3);
            let (a, b) = (
                uniform(rng, &s, -1.0, 1.0),
                uniform(rng, &[f, s[1], k, k], -1.0, 1.0),
            );
            binary(rng, a, b, move |t, a, b| t.conv2d(a, b, padding))
        }
        "max_pool2" => {
            let s = image_shape(rng, 2);
            let x = distinct(rng, &s);
            unary(rng, x, |t, x| t.max_pool2(x))
        }
        "relu" => {
            let s = small_shape(rng);
            let x = away_from_zero(rng, &s, 0.01, 2.0);
            unary(rng, x, |t, x| Ok(t.relu(x)))
        }
        "sigmoid" => {
            let s = small_shape(rng);
            let x = uniform(rng, &s, -4.0, 4.0);
            unary(rng, x, |t, x| Ok(t.sigmoid(x)))
        }
        "ln" => {
            let s = small_shape(rng);
            let x = uniform(rng, &s, 0.2, 3.0);
            unary(rng, x, |t, x| Ok(t.ln(x)))
        }
        "abs" => {
            let s = small_shape(rng);
            let x = away_from_zero(rng, &s, 0.01, 2.0);
            unary(rng, x, |t, x| Ok(t.abs(x)))
        }
        "sqrt" => {
            let s = small_shape(rng);
            let x = uniform(rng, &s, 0.2, 3.0);
            unary(rng, x, |t, x| Ok(t.sqrt(x)))
        }
        "clamp" => {
            let s = small_shape(rng);
            // Bounds at ±0.5; entries stay 0.01 away from both.
            let n: usize = s.iter().product();
            let data = (0..n)
                .map(|_| {
                    let inside = rng.gen_bool(0.5);
                    let mag = if inside {
                        rng.gen_range(0.0..0.49)
                    } else {
                        rng.gen_range(0.51..2.0)
                    };
                    if rng.gen_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            unary(rng, Tensor::new(s, data)?, |t, x| Ok(t.clamp(x, -0.5, 0.5)))
        }
        "grl" => {
            let s = small_shape(rng);
            let x = uniform(rng, &s, -2.0, 2.0);
            Instance {
                negated: true,
                ..unary(rng, x, |t, x| Ok(t.grl(x)))
            }
        }
        "scale" => {
            let s = small_shape(rng);
            let x = uniform(rng, &s, -2.0, 2.0);
            let c = rng.gen_range(-3.0..3.0);
            unary(rng, x, move |t, x| Ok(t.scale(x, c)))
        }
        "add_scalar" => {
            let s = small_shape(rng);
            let x = uniform(rng, &s, -2.0, 2.0);
            let c = rng.gen_range(-3.0..3.0);
            unary(rng, x, move |t, x| Ok(t.add_scalar(x, c)))
        }
        "add" | "sub" | "mul" | "div" => {
            let s = small_shape(rng);
            let a = uniform(rng, &s, -2.0, 2.0);
            let b = if op == "div" {
                away_from_zero(rng, &s, 0.5, 2.0)
            } else {
                uniform(rng, &s, -2.0, 2.0)
            };
            match op {
                "add" => binary(rng, a, b, |t, a, b| t.add(a, b)),
                "sub" => binary(rng, a, b, |t, a, b| t.sub(a, b)),
                "mul" => binary(rng, a, b, |t, a, b| t.mul(a, b)),
                _ => binary(rng, a, b, |t, a, b| t.div(a, b)),
            }
        }
        "sum" | "mean" => {
            let s = small_shape(rng);
            let x = uniform(rng, &s, -2.0, 2.0);
            let c = rng.gen_range(0.5..2.0);
            if op == "sum" {
                unary(rng, x, move |t, x| {
                    let y = t.sum(x);
                    Ok(t.scale(y, c))
                })
            } else {
                unary(rng, x, move |t, x| {
                    let y = t.mean(x);
                    Ok(t.scale(y, c))
                })
            }
        }
        "spatial_mean" => {
            let s = image_shape(rng, 1);
            let x = uniform(rng, &s, -2.0, 2.0);
            unary(rng, x, |t, x| t.spatial_mean(x))
        }
        "spatial_var" => {
            let s = image_shape(rng, 2);
            let x = uniform(rng, &s, -2.0, 2.0);
            unary(rng, x, |t, x| t.spatial_var(x))
        }
        "sum_channels" => {
            let s = image_shape(rng, 1);
            let x = uniform(rng, &s, -2.0, 2.0);
            unary(rng, x, |t, x| t.sum_channels(x))
        }
        "concat" => {
            let (rows, ca, cb) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let axis = rng.gen_range(0..2usize);
            let (sa, sb) = if axis == 0 {
                (vec![ca, rows], vec![cb, rows])
            } else {
                (vec![rows, ca], vec![rows, cb])
            };
            let (a, b) = (uniform(rng, &sa, -1.0, 1.0), uniform(rng, &sb, -1.0, 1.0));
            binary(rng, a, b, move |t, a, b| t.concat(&[a, b], axis))
        }
        "narrow" => {
            let s = small_shape(rng);
            let axis = rng.gen_range(0..s.len());
            let start = rng.gen_range(0..s[axis]);
            let len = rng.gen_range(1..=s[axis] - start);
            let x = uniform(rng, &s, -2.0, 2.0);
            unary(rng, x, move |t, x| t.narrow(x, axis, start, len))
        }
        "reshape" => {
            let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let x = uniform(rng, &[a, b], -2.0, 2.0);
            unary(rng, x, move |t, x| t.reshape(x, &[b, a]))
        }
        "flatten" => {
            let s = small_shape(rng);
            let x = uniform(rng, &s, -2.0, 2.0);
            unary(rng, x, |t, x| t.flatten(x))
        }
        "flatten_batch" => {
            let s = image_shape(rng, 1);
            let x = uniform(rng, &s, -2.0, 2.0);
            unary(rng, x, |t, x| t.flatten_batch(x))
        }
        "bce" => {
            let b = dim(rng, 1, 6);
            let x = uniform(rng, &[b, 1], 0.05, 0.95);
            let target = Tensor::new(
                vec![b, 1],
                (0..b).map(|_| f64::from(rng.gen_range(0..2u8))).collect(),
            )?;
            unary(rng, x, move |t, x| nn::bce(t, x, &target))
        }
        "mae" => {
            let b = dim(rng, 1, 6);
            let target = uniform(rng, &[b, 1], 0.0, 4.0);
            let offset = away_from_zero(rng, &[b, 1], 0.01, 1.0);
            let x = Tensor::new(
                vec![b, 1],
                target
                    .data()
                    .iter()
                    .zip(offset.data())
                    .map(|(t, o)| t + o)
                    .collect(),
            )?;
            unary(rng, x, move |t, x| nn::mae(t, x, &target))
        }
        "dice_macro" => {
            let (b, k, h, w) = (
                dim(rng, 1, 2),
                dim(rng, 2, 3),
                dim(rng, 1, 4),
                dim(rng, 1, 4),
            );
            let x = uniform(rng, &[b, k, h, w], 0.0, 1.0);
            let mut target = Tensor::zeros(&[b, k, h, w]);
            for n in 0..b {
                for p in 0..h * w {
                    let c = rng.gen_range(0..k);
                    target.data_mut()[(n * k + c) * h * w + p] = 1.0;
                }
            }
            unary(rng, x, move |t, x| {
                nn::dice_macro(t, x, &target, nn::DICE_SMOOTH)
            })
        }
        other => {
            return Err(crate::Error::Config(format!(
                "unknown gradcheck op `{other}`"
            )))
        }
    };
    Ok(inst)
}

/// Checks `op` on `instances` random draws from the given seed.
pub fn gradcheck_op(op: &str, instances: usize, seed: u64) -> Result<GradcheckCase> {
    let start = Instant::now();
    let mut rng = rng::stream(seed, Stream::Eval);
    let mut worst = 0f64;
    for _ in 0..instances {
        if op == "vat_loss" {
            worst = worst.max(vat_loss_check(&mut rng)?);
            continue;
        }
        let inst = instance(op, &mut rng)?;
        let err = if inst.negated {
            grad_check_params(
                &inst.inputs,
                |tape, p| {
                    let y = (inst.build)(tape, p)?;
                    Ok(tape.grl(y))
                },
                GRADCHECK_EPS,
            )?
        } else {
            grad_check_params(&inst.inputs, |tape, p| (inst.build)(tape, p), GRADCHECK_EPS)?
        };
        worst = worst.max(err);
    }
    Ok(GradcheckCase {
        op: op.to_string(),
        instances,
        max_rel_error: worst,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every case in [`GRADCHECK_OPS`].
pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<Vec<GradcheckCase>> {
    GRADCHECK_OPS
        .iter()
        .enumerate()
        .map(|(i, op)| gradcheck_op(op, instances, seed.wrapping_add(i as u64)))
        .collect()
}
