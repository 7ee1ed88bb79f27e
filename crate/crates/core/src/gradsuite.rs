//! Finite-difference checks over every tape operation, every layer and the
//! smallest end-to-end network.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Label, MultimodalSample, Task};
use crate::error::{Error, Result};
use crate::model::{CrossModalFusion, FusionAxis, LmrCbt, ModelConfig, TextEncoder};
use crate::nn::{
    BatchNorm, BiLstm2, Conv1d, ConvBn, EncoderConfig, EncoderLayer, FeedForward, LayerNorm, Linear, Lstm, Mode,
    Module, MultiHeadSelfAttention, ParamStore, PositionalTable, Session, TemporalPool, TransformerEncoder,
};
use crate::tensor::gradcheck::{check, random_tensor, weighted_sum, GradCheckConfig};
use crate::tensor::{OpKind, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Ops,
    Layers,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Ops, Scope::Layers, Scope::Model];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Layers => "layers",
            Scope::Model => "model",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck scope {s:?} (ops, layers, model)")))
    }
}

/// Worst agreement for one checked unit across all of its trials.
#[derive(Clone, Debug, Serialize)]
pub struct UnitReport {
    pub scope: Scope,
    pub unit: String,
    pub trials: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Random inputs per operation.
pub const OP_TRIALS: usize = 5;

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Magnitude in `[0.2, 1)` with a random sign, keeping clear of the kinks
/// of `relu`, `abs` and `clamp_min`.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random_tensor(shape, 0.2, 1.0, rng);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, OpFn) {
    let sym = |shape: &[usize], rng: &mut ChaCha8Rng| random_tensor(shape, -1.0, 1.0, rng);
    let pos = |shape: &[usize], rng: &mut ChaCha8Rng| random_tensor(shape, 0.5, 2.0, rng);
    match kind {
        OpKind::MatMul => (vec![sym(&[2, 3, 4], rng), sym(&[4, 2], rng)], |t, v| t.matmul(v[0], v[1])),
        OpKind::Transpose => (vec![sym(&[3, 2], rng)], |t, v| t.transpose(v[0])),
        OpKind::Add => (vec![sym(&[3, 4], rng), sym(&[4], rng)], |t, v| t.add(v[0], v[1])),
        OpKind::Sub => (vec![sym(&[3, 1], rng), sym(&[3, 4], rng)], |t, v| t.sub(v[0], v[1])),
        OpKind::Mul => (vec![sym(&[2, 3], rng), sym(&[1, 3], rng)], |t, v| t.mul(v[0], v[1])),
        OpKind::Div => (vec![sym(&[2, 3], rng), pos(&[3], rng)], |t, v| t.div(v[0], v[1])),
        OpKind::Tanh => (vec![sym(&[5], rng)], |t, v| Ok(t.tanh(v[0]))),
        OpKind::Relu => (vec![away_from_zero(&[6], rng)], |t, v| Ok(t.relu(v[0]))),
        OpKind::Sigmoid => (vec![sym(&[5], rng)], |t, v| Ok(t.sigmoid(v[0]))),
        OpKind::Exp => (vec![sym(&[5], rng)], |t, v| Ok(t.exp(v[0]))),
        OpKind::Ln => (vec![pos(&[5], rng)], |t, v| Ok(t.ln(v[0]))),
        OpKind::Abs => (vec![away_from_zero(&[6], rng)], |t, v| Ok(t.abs(v[0]))),
        OpKind::Softplus => (vec![sym(&[5], rng)], |t, v| Ok(t.softplus(v[0]))),
        OpKind::Sqrt => (vec![pos(&[5], rng)], |t, v| Ok(t.sqrt(v[0]))),
        OpKind::Powf => (vec![pos(&[5], rng)], |t, v| Ok(t.powf(v[0], 1.7))),
        OpKind::Scale => (vec![sym(&[5], rng)], |t, v| Ok(t.scale(v[0], -2.5))),
        OpKind::AddScalar => (vec![sym(&[5], rng)], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        OpKind::Neg => (vec![sym(&[5], rng)], |t, v| Ok(t.neg(v[0]))),
        OpKind::ClampMin => (vec![away_from_zero(&[6], rng)], |t, v| Ok(t.clamp_min(v[0], 0.0))),
        OpKind::Softmax => (vec![sym(&[3, 4], rng)], |t, v| {
            let a = t.softmax(v[0], 0)?;
            let b = t.softmax(v[0], 1)?;
            t.add(a, b)
        }),
        OpKind::Concat => (vec![sym(&[2, 3], rng), sym(&[1, 3], rng), sym(&[3, 2], rng)], |t, v| {
            let rows = t.concat(&v[..2], 0)?;
            let cols = t.concat(&[rows, v[2]], 1)?;
            Ok(cols)
        }),
        OpKind::Slice => (vec![sym(&[4, 5], rng)], |t, v| {
            let a = t.slice(v[0], 0, 1, 2)?;
            t.slice(a, 1, 2, 3)
        }),
        OpKind::Reshape => (vec![sym(&[2, 6], rng)], |t, v| t.reshape(v[0], &[3, 4])),
        OpKind::Reverse => (vec![sym(&[3, 4], rng)], |t, v| {
            let a = t.reverse(v[0], 0)?;
            t.reverse(a, 1)
        }),
        OpKind::Sum => (vec![sym(&[3, 4], rng)], |t, v| {
            let s = t.sum(v[0]);
            let s2 = t.mul(s, s)?;
            Ok(s2)
        }),
        OpKind::SumAxis => (vec![sym(&[2, 3, 4], rng)], |t, v| {
            let a = t.sum_axis(v[0], 1, false)?;
            let b = t.sum_axis(v[0], 2, true)?;
            let a = t.sum(a);
            let b = t.tanh(b);
            let b = t.sum(b);
            t.mul(a, b)
        }),
        OpKind::Leaf => unreachable!("leaves have no backward rule"),
    }
}

/// Checks one operation over [`OP_TRIALS`] random inputs.
pub fn check_op(kind: OpKind, cfg: &GradCheckConfig) -> Result<UnitReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6f70 ^ kind as u64);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for trial in 0..OP_TRIALS {
        let (inputs, f) = op_case(kind, &mut rng);
        let salt = trial as u64;
        let r = check(
            kind.name(),
            &inputs,
            |t, v| {
                let y = f(t, v)?;
                weighted_sum(t, y, salt)
            },
            cfg,
        )?;
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    Ok(UnitReport {
        scope: Scope::Ops,
        unit: kind.name().to_string(),
        trials: OP_TRIALS,
        checked,
        max_rel_error: worst,
        passed: worst <= cfg.tolerance,
    })
}

/// Parameters of `module`, jittered so zero-initialised biases and unit
/// norm gains are not special points.
fn jittered_store(module: &dyn Module, seed: u64) -> Result<ParamStore> {
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    module.declare(&mut params);
    module.declare_buffers(&mut buffers);
    let mut store = ParamStore::init(&params, &buffers, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a69);
    for (_, t) in store.params_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    Ok(store)
}

/// Checks gradients with respect to both the inputs and every parameter.
fn check_module<F>(
    unit: &str,
    store: &ParamStore,
    mode: Mode,
    inputs: Vec<Tensor>,
    forward: F,
    cfg: &GradCheckConfig,
) -> Result<UnitReport>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let n_in = inputs.len();
    let paths: Vec<String> = store.params().map(|(p, _)| p.to_string()).collect();
    let mut all = inputs;
    all.extend(store.params().map(|(_, t)| t.clone()));
    let r = check(
        unit,
        &all,
        |tape, vars| {
            let mut s = Session::with_tape(store, mode, std::mem::take(tape));
            for (p, &v) in paths.iter().zip(&vars[n_in..]) {
                s.bind(p, v);
            }
            let out = forward(&mut s, &vars[..n_in]).and_then(|y| weighted_sum(&mut s.tape, y, 17));
            *tape = s.tape;
            out
        },
        cfg,
    )?;
    Ok(UnitReport {
        scope: Scope::Layers,
        unit: unit.to_string(),
        trials: 1,
        checked: r.checked,
        max_rel_error: r.max_rel_error,
        passed: r.passed,
    })
}

fn layer_unit<M, F>(
    unit: &str,
    module: &M,
    mode: Mode,
    input_shapes: &[&[usize]],
    forward: F,
    cfg: &GradCheckConfig,
) -> Result<UnitReport>
where
    M: Module,
    F: Fn(&M, &mut Session, &[Var]) -> Result<Var>,
{
    let seed = unit.bytes().fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
    let store = jittered_store(module, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = input_shapes.iter().map(|s| random_tensor(s, -1.0, 1.0, &mut rng)).collect();
    check_module(unit, &store, mode, inputs, |s, v| forward(module, s, v), cfg)
}

/// Widths used by the layer suite: T ≤ 5, d_f ≤ 8.
const T: usize = 4;
const D: usize = 6;

pub fn check_layers(cfg: &GradCheckConfig) -> Result<Vec<UnitReport>> {
    let enc = EncoderConfig {
        d_model: D,
        heads: 2,
        depth: 2,
        ff_dim: 12,
        max_len: 8,
    };
    let mut out = vec![
        layer_unit("linear", &Linear::new("lin", 3, D), Mode::Train, &[&[T, 3]], |m, s, v| m.forward(s, v[0]), cfg)?,
        layer_unit(
            "feed_forward",
            &FeedForward::new("ff", D, 12),
            Mode::Train,
            &[&[T, D]],
            |m, s, v| m.forward(s, v[0]),
            cfg,
        )?,
        layer_unit("layer_norm", &LayerNorm::new("ln", D), Mode::Train, &[&[T, D]], |m, s, v| m.forward(s, v[0]), cfg)?,
        layer_unit(
            "batch_norm_train",
            &BatchNorm::new("bn", D),
            Mode::Train,
            &[&[T, D]],
            |m, s, v| m.forward(s, v[0]),
            cfg,
        )?,
        layer_unit(
            "batch_norm_group",
            &BatchNorm::new("bn", D),
            Mode::Train,
            &[&[T, D], &[2, D], &[3, D]],
            |m, s, v| {
                let ys = m.forward_group(s, v)?;
                s.tape.concat(&ys, 0)
            },
            cfg,
        )?,
        layer_unit(
            "batch_norm_eval",
            &BatchNorm::new("bn", D),
            Mode::Eval,
            &[&[T, D]],
            |m, s, v| m.forward(s, v[0]),
            cfg,
        )?,
        layer_unit("conv1d", &Conv1d::new("conv", 3, D, 3)?, Mode::Train, &[&[5, 3]], |m, s, v| m.forward(s, v[0]), cfg)?,
        layer_unit(
            "conv1d_bn",
            &ConvBn::new("conv", "bn", 3, D, 5)?,
            Mode::Train,
            &[&[5, 3], &[2, 3]],
            |m, s, v| {
                let ys = m.forward_group(s, v)?;
                s.tape.concat(&ys, 0)
            },
            cfg,
        )?,
        layer_unit("lstm", &Lstm::new("lstm", 3, 2), Mode::Train, &[&[T, 3]], |m, s, v| m.forward(s, v[0]), cfg)?,
        layer_unit(
            "bilstm2_ln",
            &BiLstm2::new("lstm", "ln", 3, D)?,
            Mode::Train,
            &[&[T, 3]],
            |m, s, v| m.forward(s, v[0]),
            cfg,
        )?,
        layer_unit(
            "multi_head_self_attention",
            &MultiHeadSelfAttention::new("attn", D, 2)?,
            Mode::Train,
            &[&[T, D]],
            |m, s, v| m.forward(s, v[0]),
            cfg,
        )?,
        layer_unit(
            "encoder_layer",
            &EncoderLayer::new("layer", &enc)?,
            Mode::Train,
            &[&[T, D]],
            |m, s, v| m.forward(s, v[0]),
            cfg,
        )?,
    ];
    let pe = PositionalTable::new(enc.max_len, D)?;
    out.push(layer_unit(
        "positional_transformer_encoder",
        &TransformerEncoder::new("enc", &enc)?,
        Mode::Train,
        &[&[T, D]],
        |m, s, v| {
            let z = pe.add_to(s, v[0])?;
            m.forward(s, z)
        },
        cfg,
    )?);
    out.push(layer_unit(
        "temporal_pool",
        &TemporalPool::new("pool", D),
        Mode::Train,
        &[&[T, D]],
        |m, s, v| m.forward(s, v[0]),
        cfg,
    )?);
    for (name, axis) in [("cross_modal_fusion", FusionAxis::Feature), ("cross_modal_fusion_time", FusionAxis::Time)] {
        out.push(layer_unit(
            name,
            &CrossModalFusion::new("fusion", D, axis),
            Mode::Train,
            &[&[D], &[D], &[3, D]],
            |m, s, v| m.forward(s, v[0], v[1], v[2]),
            cfg,
        )?);
    }
    Ok(out)
}

/// Tiny configurations for the end-to-end check: width 4, one head, one layer.
pub fn tiny_model_configs() -> Vec<(String, ModelConfig)> {
    let dims = [3, 2, 3];
    let mut out = Vec::new();
    for task in [Task::Sentiment, Task::Multilabel4] {
        out.push((format!("lmr_cbt_{}", task.name()), ModelConfig::tiny(dims, task)));
    }
    let conv = ModelConfig {
        text_encoder: TextEncoder::Conv1d,
        ..ModelConfig::tiny(dims, Task::Sentiment)
    };
    out.push(("lmr_cbt_conv1d_text".into(), conv));
    for (name, target) in [("lmr_cbt_fuse_to_v", crate::data::Modality::V), ("lmr_cbt_fuse_to_a", crate::data::Modality::A)] {
        out.push((
            name.into(),
            ModelConfig {
                fusion_target: target,
                ..ModelConfig::tiny(dims, Task::Sentiment)
            },
        ));
    }
    out
}

fn tiny_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<MultimodalSample> {
    let seq = |t: usize, d: usize, rng: &mut ChaCha8Rng| random_tensor(&[t, d], -1.0, 1.0, rng);
    let label = match cfg.task {
        Task::Sentiment => Label::Sentiment(1.25),
        Task::Multilabel4 => Label::Multilabel([true, false, false, true]),
    };
    MultimodalSample::new(
        "gradcheck",
        seq(5, cfg.d_l, rng),
        seq(3, cfg.d_v, rng),
        seq(4, cfg.d_a, rng),
        label,
    )
}

pub fn check_model(cfg: &GradCheckConfig) -> Result<Vec<UnitReport>> {
    let mut out = Vec::new();
    for (i, (name, mc)) in tiny_model_configs().into_iter().enumerate() {
        let model = LmrCbt::new(&mc)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x6d6f + i as u64);
        let sample = tiny_sample(&mc, &mut rng)?;
        let store = model.init_params(11 + i as u64)?;
        let mut r = check_module(&name, &store, Mode::Train, Vec::new(), |s, _| model.forward(s, &sample), cfg)?;
        r.scope = Scope::Model;
        out.push(r);
    }
    // a batch of two shares batch-norm statistics across samples
    let mc = ModelConfig::tiny([3, 2, 3], Task::Sentiment);
    let model = LmrCbt::new(&mc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6261);
    let batch = [tiny_sample(&mc, &mut rng)?, tiny_sample(&mc, &mut rng)?];
    let refs: Vec<&MultimodalSample> = batch.iter().collect();
    let store = model.init_params(5)?;
    let mut r = check_module(
        "lmr_cbt_batch_of_two",
        &store,
        Mode::Train,
        Vec::new(),
        |s, _| {
            let ys = model.forward_batch(s, &refs)?;
            s.tape.concat(&ys, 0)
        },
        cfg,
    )?;
    r.scope = Scope::Model;
    out.push(r);
    Ok(out)
}

pub fn run(scope: Scope, cfg: &GradCheckConfig) -> Result<Vec<UnitReport>> {
    match scope {
        Scope::Ops => OpKind::DIFFERENTIABLE.iter().map(|&k| check_op(k, cfg)).collect(),
        Scope::Layers => check_layers(cfg),
        Scope::Model => check_model(cfg),
    }
}
