use std::fmt;
use std::str::FromStr;

use crate::data::{Modality, Task};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::nn::EncoderConfig;

/// Preprocessor applied to the language sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextEncoder {
    BiLstm,
    Conv1d,
}

/// Axis the fusion softmax normalises over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionAxis {
    /// Across features, separately at each time step.
    Feature,
    /// Across time, separately for each feature.
    Time,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// The three-branch network with cross-modal fusion.
    Full,
    /// Language branch only: preprocess, encode, pool, head. Used as a baseline.
    LanguageOnly,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", stringify!($ty), " {:?}"), s))),
                }
            }
        }
    };
}

text_enum!(TextEncoder { BiLstm => "bilstm", Conv1d => "conv1d" });
text_enum!(FusionAxis { Feature => "feature", Time => "time" });
text_enum!(Arch { Full => "full", LanguageOnly => "language_only" });

/// Every architecture hyperparameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_l: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub d_f: usize,
    pub heads: usize,
    pub depth: usize,
    pub k_v: usize,
    pub k_a: usize,
    /// Kernel of the language convolution when `text_encoder` is `Conv1d`.
    pub k_l: usize,
    pub ff_dim: usize,
    pub d_out: usize,
    pub task: Task,
    pub fusion_target: Modality,
    pub text_encoder: TextEncoder,
    pub fusion_axis: FusionAxis,
    pub arch: Arch,
    pub max_len: usize,
}

const KEYS: [&str; 17] = [
    "arch",
    "d_a",
    "d_f",
    "d_l",
    "d_out",
    "d_v",
    "depth",
    "ff_dim",
    "fusion_axis",
    "fusion_target",
    "heads",
    "k_a",
    "k_l",
    "k_v",
    "max_len",
    "task",
    "text_encoder",
];

impl ModelConfig {
    /// Smallest useful network: width 4, one head, one layer.
    pub fn tiny(dims: [usize; 3], task: Task) -> Self {
        ModelConfig {
            d_l: dims[0],
            d_v: dims[1],
            d_a: dims[2],
            d_f: 4,
            heads: 1,
            depth: 1,
            k_v: 3,
            k_a: 3,
            k_l: 3,
            ff_dim: 16,
            d_out: task.output_dim(),
            task,
            fusion_target: Modality::L,
            text_encoder: TextEncoder::BiLstm,
            fusion_axis: FusionAxis::Feature,
            arch: Arch::Full,
            max_len: 64,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.d_l, self.d_v, self.d_a]
    }

    pub fn set_dims(&mut self, dims: [usize; 3]) {
        [self.d_l, self.d_v, self.d_a] = dims;
    }

    pub fn input_dim(&self, m: Modality) -> usize {
        self.dims()[m.index()]
    }

    pub fn kernel(&self, m: Modality) -> usize {
        match m {
            Modality::L => self.k_l,
            Modality::V => self.k_v,
            Modality::A => self.k_a,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_f,
            heads: self.heads,
            depth: self.depth,
            ff_dim: self.ff_dim,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        if self.d_f % 2 != 0 {
            return Err(Error::Config(format!("d_f={} must be even", self.d_f)));
        }
        if self.dims().contains(&0) {
            return Err(Error::Config("feature dims must be positive".into()));
        }
        for (name, k) in [("k_l", self.k_l), ("k_v", self.k_v), ("k_a", self.k_a)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("{name}={k} must be odd and positive")));
            }
        }
        if self.d_out != self.task.output_dim() {
            return Err(Error::Config(format!(
                "d_out={} does not fit task {} (expects {})",
                self.d_out,
                self.task,
                self.task.output_dim()
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if self.text_encoder == TextEncoder::Conv1d && self.fusion_target != Modality::L {
            return Err(Error::Config(
                "the convolutional text encoder is only available with fusion into L".into(),
            ));
        }
        Ok(())
    }

    /// Keys without the `model.` prefix.
    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("arch", self.arch.to_string());
        put("d_a", self.d_a.to_string());
        put("d_f", self.d_f.to_string());
        put("d_l", self.d_l.to_string());
        put("d_out", self.d_out.to_string());
        put("d_v", self.d_v.to_string());
        put("depth", self.depth.to_string());
        put("ff_dim", self.ff_dim.to_string());
        put("fusion_axis", self.fusion_axis.to_string());
        put("fusion_target", self.fusion_target.to_string());
        put("heads", self.heads.to_string());
        put("k_a", self.k_a.to_string());
        put("k_l", self.k_l.to_string());
        put("k_v", self.k_v.to_string());
        put("max_len", self.max_len.to_string());
        put("task", self.task.to_string());
        put("text_encoder", self.text_encoder.to_string());
        m
    }

    /// Overwrites the fields named in `m`. Unknown keys are rejected.
    pub fn apply_kv(&mut self, m: &KvMap) -> Result<()> {
        if let Some(k) = m.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown model key {k}")));
        }
        self.arch = kv::get_or(m, "arch", self.arch)?;
        self.d_a = kv::get_or(m, "d_a", self.d_a)?;
        self.d_f = kv::get_or(m, "d_f", self.d_f)?;
        self.d_l = kv::get_or(m, "d_l", self.d_l)?;
        self.d_v = kv::get_or(m, "d_v", self.d_v)?;
        self.depth = kv::get_or(m, "depth", self.depth)?;
        self.ff_dim = kv::get_or(m, "ff_dim", self.ff_dim)?;
        self.fusion_axis = kv::get_or(m, "fusion_axis", self.fusion_axis)?;
        self.fusion_target = kv::get_or(m, "fusion_target", self.fusion_target)?;
        self.heads = kv::get_or(m, "heads", self.heads)?;
        self.k_a = kv::get_or(m, "k_a", self.k_a)?;
        self.k_l = kv::get_or(m, "k_l", self.k_l)?;
        self.k_v = kv::get_or(m, "k_v", self.k_v)?;
        self.max_len = kv::get_or(m, "max_len", self.max_len)?;
        let task: Task = kv::get_or(m, "task", self.task)?;
        if task != self.task && !m.contains_key("d_out") {
            self.d_out = task.output_dim();
        }
        self.task = task;
        self.d_out = kv::get_or(m, "d_out", self.d_out)?;
        self.text_encoder = kv::get_or(m, "text_encoder", self.text_encoder)?;
        Ok(())
    }

    /// Parses a complete key set, as written by [`ModelConfig::to_kv`].
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        if let Some(k) = KEYS.iter().find(|k| !m.contains_key(**k)) {
            return Err(Error::Config(format!("missing model key {k}")));
        }
        let mut cfg = ModelConfig::tiny([1, 1, 1], Task::Sentiment);
        cfg.apply_kv(m)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let mut c = ModelConfig::tiny([5, 3, 2], Task::Multilabel4);
        c.fusion_target = Modality::V;
        c.fusion_axis = FusionAxis::Time;
        let back = ModelConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.to_kv().len(), KEYS.len());
    }

    #[test]
    fn validation_catches_bad_values() {
        let base = ModelConfig::tiny([2, 2, 2], Task::Sentiment);
        assert!(base.validate().is_ok());
        assert!(ModelConfig { heads: 3, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { k_a: 4, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { d_out: 4, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { d_f: 6, heads: 3, ff_dim: 24, ..base.clone() }.validate().is_ok());
        assert!(ModelConfig {
            text_encoder: TextEncoder::Conv1d,
            fusion_target: Modality::A,
            ..base.clone()
        }
        .validate()
        .is_err());
        let mut m = KvMap::new();
        m.insert("bogus".into(), "1".into());
        assert!(base.clone().apply_kv(&m).is_err());
    }
}
