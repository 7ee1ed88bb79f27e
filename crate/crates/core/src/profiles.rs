//! Named presets. `mosei`, `mosi` and `iemocap` carry the published
//! per-dataset hyperparameters with the real feature widths; the `-like`
//! variants pair the same network with a synthetic data specification.

use crate::data::{Modality, SynthSpec, Task};
use crate::error::{Error, Result};
use crate::model::{Arch, FusionAxis, ModelConfig, TextEncoder};
use crate::train::TrainConfig;

/// Word vectors, facial action units and acoustic descriptors.
pub const REAL_DIMS: [usize; 3] = [300, 35, 74];

pub const NAMES: [&str; 6] = ["mosei", "mosi", "iemocap", "mosei-like", "mosi-like", "iemocap-like"];

#[derive(Clone, Debug)]
pub struct Profile {
    pub name: &'static str,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Parameter total published for the matching dataset, in millions.
    pub published_params_m: f64,
    /// Data specification, for synthetic profiles.
    pub synth: Option<SynthSpec>,
}

struct Row {
    task: Task,
    lr: f64,
    batch_size: usize,
    epochs: usize,
    d_f: usize,
    heads: usize,
    k_v: usize,
    k_a: usize,
    depth: usize,
    published: f64,
}

fn row(dataset: &str) -> Option<Row> {
    let r = match dataset {
        "mosei" => Row {
            task: Task::Sentiment,
            lr: 1e-3,
            batch_size: 32,
            epochs: 120,
            d_f: 40,
            heads: 8,
            k_v: 3,
            k_a: 3,
            depth: 5,
            published: 0.41,
        },
        "mosi" => Row {
            task: Task::Sentiment,
            lr: 2e-3,
            batch_size: 8,
            epochs: 100,
            d_f: 30,
            heads: 10,
            k_v: 3,
            k_a: 1,
            depth: 4,
            published: 0.35,
        },
        "iemocap" => Row {
            task: Task::Multilabel4,
            lr: 1e-3,
            batch_size: 32,
            epochs: 60,
            d_f: 40,
            heads: 5,
            k_v: 3,
            k_a: 5,
            depth: 5,
            published: 0.34,
        },
        _ => return None,
    };
    Some(r)
}

/// Positional capacity of the presets, enough for the longest unaligned
/// acoustic streams of the real sets.
pub const PROFILE_MAX_LEN: usize = 1024;

pub fn profile(name: &str) -> Result<Profile> {
    let (dataset, synthetic) = match name.strip_suffix("-like") {
        Some(d) => (d, true),
        None => (name, false),
    };
    let r = row(dataset).ok_or_else(|| {
        Error::Config(format!("unknown profile {name:?} (expected one of {})", NAMES.join(", ")))
    })?;
    let model = ModelConfig {
        d_l: REAL_DIMS[0],
        d_v: REAL_DIMS[1],
        d_a: REAL_DIMS[2],
        d_f: r.d_f,
        heads: r.heads,
        depth: r.depth,
        k_v: r.k_v,
        k_a: r.k_a,
        k_l: 3,
        ff_dim: 4 * r.d_f,
        d_out: r.task.output_dim(),
        task: r.task,
        fusion_target: Modality::L,
        text_encoder: TextEncoder::BiLstm,
        fusion_axis: FusionAxis::Feature,
        arch: Arch::Full,
        max_len: PROFILE_MAX_LEN,
    };
    let synth = synthetic.then(|| SynthSpec {
        dims: REAL_DIMS,
        ..SynthSpec::small(r.task, 0)
    });
    Ok(Profile {
        name: NAMES.iter().copied().find(|n| *n == name).expect("name was matched"),
        model,
        train: TrainConfig::new(r.lr, r.batch_size, r.epochs),
        published_params_m: r.published,
        synth,
    })
}
