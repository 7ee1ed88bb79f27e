use super::linear::Linear;
use super::params::{Module, ParamDecl, Session};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Unmasked multi-head scaled dot-product self-attention over a `[T, d]`
/// sequence. Heads take contiguous `d / h` column blocks of the projections.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub d_model: usize,
    pub heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(prefix: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadSelfAttention {
            q: Linear::new(format!("{prefix}.q"), d_model, d_model),
            k: Linear::new(format!("{prefix}.k"), d_model, d_model),
            v: Linear::new(format!("{prefix}.v"), d_model, d_model),
            out: Linear::new(format!("{prefix}.out"), d_model, d_model),
            d_model,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn forward(&self, s: &mut Session, z: Var) -> Result<Var> {
        Ok(self.forward_with_weights(s, z)?.0)
    }

    /// Also returns each head's `[T, T]` attention matrix.
    pub fn forward_with_weights(&self, s: &mut Session, z: Var) -> Result<(Var, Vec<Var>)> {
        let shape = s.tape.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::dim("self_attention", &shape, &[self.d_model]));
        }
        let q = self.q.forward(s, z)?;
        let k = self.k.forward(s, z)?;
        let v = self.v.forward(s, z)?;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = s.tape.slice(q, 1, h * dk, dk)?;
            let kh = s.tape.slice(k, 1, h * dk, dk)?;
            let vh = s.tape.slice(v, 1, h * dk, dk)?;
            let kt = s.tape.transpose(kh)?;
            let scores = s.tape.matmul(qh, kt)?;
            let scores = s.tape.scale(scores, scale);
            let w = s.tape.softmax(scores, 1)?;
            heads.push(s.tape.matmul(w, vh)?);
            weights.push(w);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            s.tape.concat(&heads, 1)?
        };
        Ok((self.out.forward(s, joined)?, weights))
    }
}

impl Module for MultiHeadSelfAttention {
    fn declare(&self, params: &mut Vec<ParamDecl>) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.declare(params);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Mode, ParamStore};
    use crate::tensor::gradcheck::random_tensor;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_for(m: &impl Module, seed: u64) -> ParamStore {
        let mut p = Vec::new();
        m.declare(&mut p);
        ParamStore::init(&p, &[], seed).unwrap()
    }

    fn set_identity(store: &mut ParamStore, path: &str, d: usize) {
        let w = store.get_mut(path).unwrap().data_mut();
        w.fill(0.0);
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(MultiHeadSelfAttention::new("a", 6, 4).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let attn = MultiHeadSelfAttention::new("attn", 4, 1).unwrap();
        let store = store_for(&attn, 3);
        let mut s = Session::new(&store, Mode::Eval);
        let z = s.constant(Tensor::new(vec![1, 4], vec![0.1, -0.2, 0.3, 0.4]).unwrap());
        let (y, w) = attn.forward_with_weights(&mut s, z).unwrap();
        assert_eq!(s.tape.data(w[0]), &[1.0]);
        let v = attn.v.forward(&mut s, z).unwrap();
        let expect = attn.out.forward(&mut s, v).unwrap();
        assert_eq!(s.tape.data(y), s.tape.data(expect));
    }

    #[test]
    fn identity_projections_match_brute_force() {
        let d = 2;
        let attn = MultiHeadSelfAttention::new("attn", d, 1).unwrap();
        let mut store = store_for(&attn, 0);
        for p in ["q", "k", "v", "out"] {
            set_identity(&mut store, &format!("attn.{p}.weight"), d);
        }
        let x = [[0.5, -1.0], [2.0, 0.25]];
        let mut s = Session::new(&store, Mode::Eval);
        let z = s.constant(Tensor::from_rows(&[x[0].to_vec(), x[1].to_vec()]).unwrap());
        let y = attn.forward(&mut s, z).unwrap();

        let scale = 1.0 / (d as f64).sqrt();
        let mut expect = vec![0.0; 4];
        for i in 0..2 {
            let scores: Vec<f64> = (0..2)
                .map(|j| (x[i][0] * x[j][0] + x[i][1] * x[j][1]) * scale)
                .collect();
            let m = scores[0].max(scores[1]);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z = e[0] + e[1];
            for c in 0..2 {
                expect[i * 2 + c] = (e[0] * x[0][c] + e[1] * x[1][c]) / z;
            }
        }
        for (a, b) in s.tape.data(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn permutation_equivariant_and_row_stochastic() {
        let attn = MultiHeadSelfAttention::new("attn", 6, 3).unwrap();
        let store = store_for(&attn, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&[4, 6], -1.0, 1.0, &mut rng);
        let perm = [2, 0, 3, 1];
        let mut px = Vec::new();
        for &p in &perm {
            px.extend_from_slice(x.row(p));
        }
        let mut s = Session::new(&store, Mode::Eval);
        let xv = s.constant(x);
        let (y, weights) = attn.forward_with_weights(&mut s, xv).unwrap();
        for w in weights {
            for row in s.tape.data(w).chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let pv = s.constant(Tensor::new(vec![4, 6], px).unwrap());
        let py = attn.forward(&mut s, pv).unwrap();
        let y = s.tape.value(y).clone();
        let py = s.tape.value(py);
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in py.row(i).iter().zip(y.row(p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
