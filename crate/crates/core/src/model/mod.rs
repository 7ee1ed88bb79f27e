mod checkpoint;
mod config;
mod fusion;
mod network;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{Arch, FusionAxis, ModelConfig, TextEncoder};
pub use fusion::CrossModalFusion;
pub use network::{FusionState, LmrCbt};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::tensor::numel;

/// One row of the parameter audit.
#[derive(Clone, Debug, PartialEq)]
pub struct LedgerEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

/// Every trainable tensor with its size, grouped by top-level module.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLedger {
    pub entries: Vec<LedgerEntry>,
    pub groups: BTreeMap<String, usize>,
    pub total: usize,
}

impl ParamLedger {
    pub fn new(model: &LmrCbt) -> Self {
        let (params, _) = model.declarations();
        let mut entries: Vec<LedgerEntry> = params
            .into_iter()
            .map(|d| LedgerEntry {
                count: numel(&d.shape),
                path: d.path,
                shape: d.shape,
            })
            .collect();
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        let mut groups = BTreeMap::new();
        for e in &entries {
            let group = e.path.split('.').next().unwrap_or(&e.path).to_string();
            *groups.entry(group).or_insert(0) += e.count;
        }
        let total = entries.iter().map(|e| e.count).sum();
        ParamLedger { entries, groups, total }
    }
}

/// Number of trainable scalars. Positional tables and batch-norm running
/// statistics are not counted.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(ParamLedger::new(&LmrCbt::new(cfg)?).total)
}

/// Ablation arms. The first five are the default comparison set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    TextConv1d,
    TextBiLstm,
    FuseToA,
    FuseToV,
    FuseToL,
    LanguageOnly,
}

impl Variant {
    pub const DEFAULT: [Variant; 5] = [
        Variant::TextConv1d,
        Variant::TextBiLstm,
        Variant::FuseToA,
        Variant::FuseToV,
        Variant::FuseToL,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::TextConv1d => "Conv1D",
            Variant::TextBiLstm => "BiLSTM",
            Variant::FuseToA => "[V, L]->A",
            Variant::FuseToV => "[L, A]->V",
            Variant::FuseToL => "[V, A]->L",
            Variant::LanguageOnly => "L only",
        }
    }

    /// Short name usable in file names and on the command line.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::TextConv1d => "text-conv1d",
            Variant::TextBiLstm => "text-bilstm",
            Variant::FuseToA => "fuse-to-a",
            Variant::FuseToV => "fuse-to-v",
            Variant::FuseToL => "fuse-to-l",
            Variant::LanguageOnly => "language-only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Variant::TextConv1d,
            Variant::TextBiLstm,
            Variant::FuseToA,
            Variant::FuseToV,
            Variant::FuseToL,
            Variant::LanguageOnly,
        ]
        .into_iter()
        .find(|v| v.slug() == s || v.label() == s)
        .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

/// Derives the configuration of one ablation arm from the base model.
/// Every arm other than the fusion-target ones fuses into language.
pub fn make_ablation(base: &ModelConfig, variant: Variant) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.arch = Arch::Full;
    cfg.fusion_target = Modality::L;
    cfg.text_encoder = TextEncoder::BiLstm;
    match variant {
        Variant::TextConv1d => cfg.text_encoder = TextEncoder::Conv1d,
        Variant::TextBiLstm | Variant::FuseToL => {}
        Variant::FuseToV => cfg.fusion_target = Modality::V,
        Variant::FuseToA => cfg.fusion_target = Modality::A,
        Variant::LanguageOnly => cfg.arch = Arch::LanguageOnly,
    }
    cfg
}
