use super::params::{BnUpdate, Init, Mode, Module, ParamDecl, Session};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Variance floor: normalisation divides by `sqrt(max(var, EPS))`, so an
/// all-equal slice normalises to zeros instead of NaN.
pub const EPS: f64 = 1e-5;

pub const BN_MOMENTUM: f64 = 0.1;

/// Zero-mean, unit-variance normalisation of each slice along `axis`
/// (no affine part).
pub fn normalize(tape: &mut Tape, x: Var, axis: usize) -> Result<Var> {
    let mean = tape.mean_axis(x, axis, true)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axis(sq, axis, true)?;
    let var = tape.clamp_min(var, EPS);
    let inv = tape.powf(var, -0.5);
    tape.mul(centered, inv)
}

/// Layer normalisation over the trailing (feature) axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    prefix: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            prefix: prefix.into(),
            dim,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.last() != Some(&self.dim) {
            return Err(Error::dim("layer_norm", &shape, &[self.dim]));
        }
        let n = normalize(&mut s.tape, x, shape.len() - 1)?;
        let gamma = s.param(&format!("{}.gamma", self.prefix))?;
        let beta = s.param(&format!("{}.beta", self.prefix))?;
        let y = s.tape.mul(n, gamma)?;
        s.tape.add(y, beta)
    }
}

impl Module for LayerNorm {
    fn declare(&self, params: &mut Vec<ParamDecl>) {
        params.push(ParamDecl::new(format!("{}.gamma", self.prefix), &[self.dim], Init::Ones));
        params.push(ParamDecl::new(format!("{}.beta", self.prefix), &[self.dim], Init::Zeros));
    }
}

/// Per-channel batch normalisation of `[T, C]` sequences.
///
/// In training mode a group of two or more sequences is normalised with
/// statistics over all rows of the group (batch × time), which are reported
/// for the running estimates. A single sequence, or any input in evaluation
/// mode, uses the running estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    prefix: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            prefix: prefix.into(),
            channels,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        Ok(self.forward_group(s, &[x])?.remove(0))
    }

    pub fn forward_group(&self, s: &mut Session, xs: &[Var]) -> Result<Vec<Var>> {
        for &x in xs {
            let shape = s.tape.shape(x);
            if shape.len() != 2 || shape[1] != self.channels {
                return Err(Error::dim("batch_norm", shape, &[self.channels]));
            }
        }
        let (shift, inv) = if s.mode() == Mode::Train && xs.len() > 1 {
            let all = s.tape.concat(xs, 0)?;
            let rows = s.tape.shape(all)[0];
            let mean = s.tape.mean_axis(all, 0, true)?;
            let centered = s.tape.sub(all, mean)?;
            let sq = s.tape.mul(centered, centered)?;
            let var = s.tape.mean_axis(sq, 0, true)?;
            let unbias = rows as f64 / (rows - 1) as f64;
            let update = BnUpdate {
                prefix: self.prefix.clone(),
                mean: s.tape.data(mean).to_vec(),
                var: s.tape.data(var).iter().map(|v| v * unbias).collect(),
            };
            s.record_bn(update);
            let var = s.tape.clamp_min(var, EPS);
            (mean, s.tape.powf(var, -0.5))
        } else {
            let rm = s.buffer(&format!("{}.running_mean", self.prefix))?.clone();
            let inv: Vec<f64> = s
                .buffer(&format!("{}.running_var", self.prefix))?
                .data()
                .iter()
                .map(|v| 1.0 / v.max(EPS).sqrt())
                .collect();
            let rm = s.constant(rm);
            (rm, s.constant(Tensor::new(vec![self.channels], inv)?))
        };
        let gamma = s.param(&format!("{}.gamma", self.prefix))?;
        let beta = s.param(&format!("{}.beta", self.prefix))?;
        xs.iter()
            .map(|&x| {
                let centered = s.tape.sub(x, shift)?;
                let normed = s.tape.mul(centered, inv)?;
                let y = s.tape.mul(normed, gamma)?;
                s.tape.add(y, beta)
            })
            .collect()
    }
}

impl Module for BatchNorm {
    fn declare(&self, params: &mut Vec<ParamDecl>) {
        let c = self.channels;
        params.push(ParamDecl::new(format!("{}.gamma", self.prefix), &[c], Init::Ones));
        params.push(ParamDecl::new(format!("{}.beta", self.prefix), &[c], Init::Zeros));
    }

    fn declare_buffers(&self, buffers: &mut Vec<ParamDecl>) {
        let c = self.channels;
        buffers.push(ParamDecl::new(format!("{}.running_mean", self.prefix), &[c], Init::Zeros));
        buffers.push(ParamDecl::new(format!("{}.running_var", self.prefix), &[c], Init::Ones));
    }
}
