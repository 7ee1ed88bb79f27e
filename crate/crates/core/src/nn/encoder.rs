use super::attention::MultiHeadSelfAttention;
use super::linear::FeedForward;
use super::norm::LayerNorm;
use super::params::{Module, ParamDecl, Session};
use crate::error::{Error, Result};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_f={} must be divisible by h={}",
                self.d_model, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.ff_dim < self.d_model {
            return Err(Error::Config(format!(
                "feed-forward width {} is below model width {}",
                self.ff_dim, self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Post-norm encoder layer: `z ← LN(z + MHSA(z)); z ← LN(z + FF(z))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadSelfAttention,
    pub ln1: LayerNorm,
    pub ff: FeedForward,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadSelfAttention::new(&format!("{prefix}.attn"), cfg.d_model, cfg.heads)?,
            ln1: LayerNorm::new(format!("{prefix}.ln1"), cfg.d_model),
            ff: FeedForward::new(&format!("{prefix}.ff"), cfg.d_model, cfg.ff_dim),
            ln2: LayerNorm::new(format!("{prefix}.ln2"), cfg.d_model),
        })
    }

    pub fn forward(&self, s: &mut Session, z: Var) -> Result<Var> {
        let a = self.attn.forward(s, z)?;
        let z = s.tape.add(z, a)?;
        let z = self.ln1.forward(s, z)?;
        let f = self.ff.forward(s, z)?;
        let z = s.tape.add(z, f)?;
        self.ln2.forward(s, z)
    }
}

impl Module for EncoderLayer {
    fn declare(&self, params: &mut Vec<ParamDecl>) {
        self.attn.declare(params);
        self.ln1.declare(params);
        self.ff.declare(params);
        self.ln2.declare(params);
    }
}

/// A stack of `depth` encoder layers. The caller adds positional encoding.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new(prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.depth)
            .map(|i| EncoderLayer::new(&format!("{prefix}.layers.{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(TransformerEncoder { layers })
    }

    pub fn forward(&self, s: &mut Session, z: Var) -> Result<Var> {
        let mut z = z;
        for layer in &self.layers {
            z = layer.forward(s, z)?;
        }
        Ok(z)
    }
}

impl Module for TransformerEncoder {
    fn declare(&self, params: &mut Vec<ParamDecl>) {
        self.layers.iter().for_each(|l| l.declare(params));
    }
}

/// Mean over time followed by layer normalisation: `[T, d] → [d]`.
#[derive(Clone, Debug)]
pub struct TemporalPool {
    pub ln: LayerNorm,
}

impl TemporalPool {
    pub fn new(prefix: &str, d_model: usize) -> Self {
        TemporalPool {
            ln: LayerNorm::new(prefix, d_model),
        }
    }

    pub fn forward(&self, s: &mut Session, z: Var) -> Result<Var> {
        let shape = s.tape.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.ln.dim {
            return Err(Error::dim("temporal_pool", &shape, &[self.ln.dim]));
        }
        let pooled = s.tape.mean_axis(z, 0, false)?;
        self.ln.forward(s, pooled)
    }
}

impl Module for TemporalPool {
    fn declare(&self, params: &mut Vec<ParamDecl>) {
        self.ln.declare(params);
    }
}
