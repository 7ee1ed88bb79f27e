use super::params::{Init, Module, ParamDecl, Session};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Affine map `x·W + b` over the trailing axis. `W` is stored `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    prefix: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            d_in,
            d_out,
        }
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::dim("linear", &shape, &[self.d_in, self.d_out]));
        }
        let w = s.param(&self.weight_path())?;
        let b = s.param(&self.bias_path())?;
        if shape.len() == 1 {
            let row = s.tape.reshape(x, &[1, self.d_in])?;
            let y = s.tape.matmul(row, w)?;
            let y = s.tape.reshape(y, &[self.d_out])?;
            return s.tape.add(y, b);
        }
        let y = s.tape.matmul(x, w)?;
        s.tape.add(y, b)
    }
}

impl Module for Linear {
    fn declare(&self, params: &mut Vec<ParamDecl>) {
        params.push(ParamDecl::new(
            self.weight_path(),
            &[self.d_in, self.d_out],
            Init::Uniform { fan_in: self.d_in },
        ));
        params.push(ParamDecl::new(self.bias_path(), &[self.d_out], Init::Zeros));
    }
}

/// Position-wise `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, d_model: usize, inner: usize) -> Self {
        FeedForward {
            fc1: Linear::new(format!("{prefix}.fc1"), d_model, inner),
            fc2: Linear::new(format!("{prefix}.fc2"), inner, d_model),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.tape.relu(h);
        self.fc2.forward(s, h)
    }
}

impl Module for FeedForward {
    fn declare(&self, params: &mut Vec<ParamDecl>) {
        self.fc1.declare(params);
        self.fc2.declare(params);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Mode, ParamStore};
    use crate::tensor::Tensor;

    #[test]
    fn linear_on_rows_and_vectors() {
        let lin = Linear::new("fc", 3, 2);
        let mut decls = Vec::new();
        lin.declare(&mut decls);
        let store = ParamStore::init(&decls, &[], 0).unwrap();
        let w = store.get("fc.weight").unwrap().data().to_vec();
        let mut s = Session::new(&store, Mode::Eval);
        let x = s.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = lin.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y), &[2]);
        for j in 0..2 {
            let expect = w[j] + 2.0 * w[2 + j] + 3.0 * w[4 + j];
            assert!((s.tape.data(y)[j] - expect).abs() < 1e-12);
        }
        let bad = s.constant(Tensor::zeros(&[4, 2]));
        assert!(lin.forward(&mut s, bad).is_err());
    }
}
