use super::norm::BatchNorm;
use super::params::{Init, Module, ParamDecl, Session};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Temporal convolution over the rows of a `[T, d_in]` sequence with
/// `(k-1)/2` zero rows of padding on each side, so the output keeps length `T`.
///
/// The kernel is stored flattened as `[k·d_in, d_out]`; row `j·d_in + c` weighs
/// channel `c` at offset `j - (k-1)/2`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    prefix: String,
    pub d_in: usize,
    pub d_out: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(prefix: impl Into<String>, d_in: usize, d_out: usize, kernel: usize) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel must be odd and positive, got {kernel}")));
        }
        Ok(Conv1d {
            prefix: prefix.into(),
            d_in,
            d_out,
            kernel,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(Error::dim("conv1d", &shape, &[self.kernel * self.d_in, self.d_out]));
        }
        let t = shape[0];
        let pad = (self.kernel - 1) / 2;
        let windows = if pad == 0 {
            x
        } else {
            let zeros = s.constant(Tensor::zeros(&[pad, self.d_in]));
            let padded = s.tape.concat(&[zeros, x, zeros], 0)?;
            let shifted = (0..self.kernel)
                .map(|j| s.tape.slice(padded, 0, j, t))
                .collect::<Result<Vec<_>>>()?;
            s.tape.concat(&shifted, 1)?
        };
        let w = s.param(&format!("{}.weight", self.prefix))?;
        let b = s.param(&format!("{}.bias", self.prefix))?;
        let y = s.tape.matmul(windows, w)?;
        s.tape.add(y, b)
    }
}

impl Module for Conv1d {
    fn declare(&self, params: &mut Vec<ParamDecl>) {
        let fan_in = self.kernel * self.d_in;
        params.push(ParamDecl::new(
            format!("{}.weight", self.prefix),
            &[fan_in, self.d_out],
            Init::Uniform { fan_in },
        ));
        params.push(ParamDecl::new(format!("{}.bias", self.prefix), &[self.d_out], Init::Zeros));
    }
}

/// Convolution followed by batch normalisation, used for visual and audio input.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv1d,
    pub bn: BatchNorm,
}

impl ConvBn {
    pub fn new(conv_prefix: &str, bn_prefix: &str, d_in: usize, d_out: usize, kernel: usize) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv1d::new(conv_prefix, d_in, d_out, kernel)?,
            bn: BatchNorm::new(bn_prefix, d_out),
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        self.bn.forward(s, y)
    }

    /// Convolves each sequence, then normalises the group together.
    pub fn forward_group(&self, s: &mut Session, xs: &[Var]) -> Result<Vec<Var>> {
        let ys = xs.iter().map(|&x| self.conv.forward(s, x)).collect::<Result<Vec<_>>>()?;
        self.bn.forward_group(s, &ys)
    }
}

impl Module for ConvBn {
    fn declare(&self, params: &mut Vec<ParamDecl>) {
        self.conv.declare(params);
        self.bn.declare(params);
    }

    fn declare_buffers(&self, buffers: &mut Vec<ParamDecl>) {
        self.bn.declare_buffers(buffers);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Mode, ParamStore};

    fn store_for(m: &impl Module) -> ParamStore {
        let (mut p, mut b) = (Vec::new(), Vec::new());
        m.declare(&mut p);
        m.declare_buffers(&mut b);
        ParamStore::init(&p, &b, 0).unwrap()
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(matches!(Conv1d::new("c", 2, 2, 2), Err(Error::Config(_))));
        assert!(Conv1d::new("c", 2, 2, 0).is_err());
    }

    #[test]
    fn identity_kernel_with_unit_bn_is_identity() {
        let cb = ConvBn::new("conv", "bn", 3, 3, 1).unwrap();
        let mut store = store_for(&cb);
        let w = store.get_mut("conv.weight").unwrap().data_mut();
        w.fill(0.0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![4.0, 0.0, 3.0]]).unwrap();
        let mut s = Session::new(&store, Mode::Eval);
        let xv = s.constant(x.clone());
        let y = cb.forward(&mut s, xv).unwrap();
        assert_eq!(s.tape.data(y), x.data());
    }

    #[test]
    fn ones_kernel_matches_sliding_window_oracle() {
        let conv = Conv1d::new("conv", 1, 1, 3).unwrap();
        let mut store = store_for(&conv);
        store.get_mut("conv.weight").unwrap().data_mut().fill(1.0);
        let xs = [0.5, -1.0, 2.0, 3.0];
        let mut s = Session::new(&store, Mode::Eval);
        let x = s.constant(Tensor::new(vec![4, 1], xs.to_vec()).unwrap());
        let y = conv.forward(&mut s, x).unwrap();
        let at = |i: isize| if (0..4).contains(&i) { xs[i as usize] } else { 0.0 };
        let oracle: Vec<f64> = (0..4isize).map(|t| at(t - 1) + at(t) + at(t + 1)).collect();
        assert_eq!(s.tape.shape(y), &[4, 1]);
        assert_eq!(s.tape.data(y), oracle.as_slice());
    }

    #[test]
    fn length_is_preserved() {
        for k in [1, 3, 5] {
            let conv = Conv1d::new("conv", 2, 4, k).unwrap();
            let store = store_for(&conv);
            for t in 1..7 {
                let mut s = Session::new(&store, Mode::Eval);
                let x = s.constant(Tensor::full(&[t, 2], 1.0));
                let y = conv.forward(&mut s, x).unwrap();
                assert_eq!(s.tape.shape(y), &[t, 4]);
            }
        }
    }
}
