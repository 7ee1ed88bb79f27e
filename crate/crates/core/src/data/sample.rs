use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Prediction task a dataset is labelled for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Four independent binary emotion flags.
    Multilabel4,
    /// One sentiment score in `[-3, 3]`.
    Sentiment,
}

impl Task {
    pub fn output_dim(self) -> usize {
        match self {
            Task::Multilabel4 => 4,
            Task::Sentiment => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Multilabel4 => "multilabel4",
            Task::Sentiment => "sentiment",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multilabel4" => Ok(Task::Multilabel4),
            "sentiment" => Ok(Task::Sentiment),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    L,
    V,
    A,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::L, Modality::V, Modality::A];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::L => "L",
            Modality::V => "V",
            Modality::A => "A",
        }
    }

    pub fn lower(self) -> &'static str {
        match self {
            Modality::L => "l",
            Modality::V => "v",
            Modality::A => "a",
        }
    }

    /// The other two modalities, in L, V, A order.
    pub fn others(self) -> [Modality; 2] {
        match self {
            Modality::L => [Modality::V, Modality::A],
            Modality::V => [Modality::L, Modality::A],
            Modality::A => [Modality::L, Modality::V],
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" | "l" => Ok(Modality::L),
            "V" | "v" => Ok(Modality::V),
            "A" | "a" => Ok(Modality::A),
            _ => Err(Error::Config(format!("unknown modality {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Multilabel([bool; 4]),
    Sentiment(f64),
}

impl Label {
    pub fn task(&self) -> Task {
        match self {
            Label::Multilabel(_) => Task::Multilabel4,
            Label::Sentiment(_) => Task::Sentiment,
        }
    }
}

/// Three unaligned feature sequences plus a label.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    seqs: [Tensor; 3],
    pub label: Label,
}

impl MultimodalSample {
    /// Each sequence is `[T, d]` with `T ≥ 1`; features must be finite.
    pub fn new(id: impl Into<String>, lang: Tensor, vis: Tensor, aud: Tensor, label: Label) -> Result<Self> {
        let seqs = [lang, vis, aud];
        for (m, t) in Modality::ALL.iter().zip(&seqs) {
            if t.shape().len() != 2 {
                return Err(Error::Data {
                    modality: m.name().into(),
                    reason: format!("expected a [T, d] sequence, got shape {:?}", t.shape()),
                });
            }
            if !t.is_finite() {
                return Err(Error::Data {
                    modality: m.name().into(),
                    reason: "non-finite feature".into(),
                });
            }
        }
        if let Label::Sentiment(y) = label {
            if !(-3.0..=3.0).contains(&y) {
                return Err(Error::Data {
                    modality: "label".into(),
                    reason: format!("sentiment {y} outside [-3, 3]"),
                });
            }
        }
        Ok(MultimodalSample {
            id: id.into(),
            seqs,
            label,
        })
    }

    pub fn seq(&self, m: Modality) -> &Tensor {
        &self.seqs[m.index()]
    }

    pub fn len(&self, m: Modality) -> usize {
        self.seqs[m.index()].shape()[0]
    }

    pub fn dim(&self, m: Modality) -> usize {
        self.seqs[m.index()].shape()[1]
    }

    pub fn lengths(&self) -> [usize; 3] {
        Modality::ALL.map(|m| self.len(m))
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.id.len() as u64).to_le_bytes());
        h.update(self.id.as_bytes());
        for t in &self.seqs {
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        match &self.label {
            Label::Multilabel(flags) => {
                h.update([0u8]);
                h.update(flags.map(u8::from));
            }
            Label::Sentiment(y) => {
                h.update([1u8]);
                h.update(y.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// An immutable collection of samples sharing a task and feature widths.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub dims: [usize; 3],
    samples: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn new(task: Task, dims: [usize; 3], samples: Vec<MultimodalSample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.label.task() != task {
                return Err(Error::Schema(format!("sample {i}: label does not match task {task}")));
            }
            for m in Modality::ALL {
                if s.dim(m) != dims[m.index()] {
                    return Err(Error::Schema(format!(
                        "sample {i}: modality {m} has width {}, header says {}",
                        s.dim(m),
                        dims[m.index()]
                    )));
                }
            }
        }
        Ok(Dataset { task, dims, samples })
    }

    pub fn samples(&self) -> &[MultimodalSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> &MultimodalSample {
        &self.samples[i]
    }

    /// A new dataset holding the samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            task: self.task,
            dims: self.dims,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Hex SHA-256 over the sorted per-sample digests, so it ignores order.
    pub fn content_hash(&self) -> String {
        let mut digests: Vec<[u8; 32]> = self.samples.iter().map(MultimodalSample::digest).collect();
        digests.sort_unstable();
        let mut h = Sha256::new();
        h.update([self.task as u8]);
        for d in self.dims {
            h.update((d as u64).to_le_bytes());
        }
        for d in &digests {
            h.update(d);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, y: f64) -> MultimodalSample {
        MultimodalSample::new(
            id,
            Tensor::full(&[2, 3], y),
            Tensor::full(&[1, 2], 0.5),
            Tensor::full(&[4, 1], -1.0),
            Label::Sentiment(y),
        )
        .unwrap()
    }

    #[test]
    fn hash_ignores_order() {
        let a = Dataset::new(Task::Sentiment, [3, 2, 1], vec![sample("a", 1.0), sample("b", -2.0)]).unwrap();
        let b = a.subset(&[1, 0]);
        assert_ne!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        let c = a.subset(&[0]);
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn validation() {
        let bad = MultimodalSample::new(
            "x",
            Tensor::full(&[2, 3], f64::NAN),
            Tensor::full(&[1, 2], 0.0),
            Tensor::full(&[1, 1], 0.0),
            Label::Sentiment(0.0),
        );
        assert!(matches!(bad, Err(Error::Data { modality, .. }) if modality == "L"));
        assert!(Dataset::new(Task::Sentiment, [3, 2, 2], vec![sample("a", 0.0)]).is_err());
        assert!(Dataset::new(Task::Multilabel4, [3, 2, 1], vec![sample("a", 0.0)]).is_err());
    }

    #[test]
    fn modality_others_keep_order() {
        assert_eq!(Modality::L.others(), [Modality::V, Modality::A]);
        assert_eq!(Modality::V.others(), [Modality::L, Modality::A]);
        assert_eq!(Modality::A.others(), [Modality::L, Modality::V]);
    }
}
