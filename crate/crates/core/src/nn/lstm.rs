use super::norm::LayerNorm;
use super::params::{Init, Module, ParamDecl, Session};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// One LSTM step from precomputed gate pre-activations `[1, 4H]`, laid out as
/// input, forget, cell and output gates. Returns `(h, c)`.
pub fn lstm_cell(tape: &mut Tape, gates: Var, c_prev: Var, hidden: usize) -> Result<(Var, Var)> {
    let i = tape.slice(gates, 1, 0, hidden)?;
    let f = tape.slice(gates, 1, hidden, hidden)?;
    let g = tape.slice(gates, 1, 2 * hidden, hidden)?;
    let o = tape.slice(gates, 1, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// A single-direction LSTM over the rows of a `[T, d_in]` sequence.
#[derive(Clone, Debug)]
pub struct Lstm {
    prefix: String,
    pub d_in: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(prefix: impl Into<String>, d_in: usize, hidden: usize) -> Self {
        Lstm {
            prefix: prefix.into(),
            d_in,
            hidden,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(Error::dim("lstm", &shape, &[self.d_in, 4 * self.hidden]));
        }
        let w_ih = s.param(&format!("{}.w_ih", self.prefix))?;
        let w_hh = s.param(&format!("{}.w_hh", self.prefix))?;
        let bias = s.param(&format!("{}.bias", self.prefix))?;
        let xw = s.tape.matmul(x, w_ih)?;
        let xw = s.tape.add(xw, bias)?;
        let mut h = s.constant(Tensor::zeros(&[1, self.hidden]));
        let mut c = s.constant(Tensor::zeros(&[1, self.hidden]));
        let mut outputs = Vec::with_capacity(shape[0]);
        for t in 0..shape[0] {
            let from_x = s.tape.slice(xw, 0, t, 1)?;
            let from_h = s.tape.matmul(h, w_hh)?;
            let gates = s.tape.add(from_x, from_h)?;
            (h, c) = lstm_cell(&mut s.tape, gates, c, self.hidden)?;
            outputs.push(h);
        }
        s.tape.concat(&outputs, 0)
    }
}

impl Module for Lstm {
    fn declare(&self, params: &mut Vec<ParamDecl>) {
        let g = 4 * self.hidden;
        params.push(ParamDecl::new(
            format!("{}.w_ih", self.prefix),
            &[self.d_in, g],
            Init::Uniform { fan_in: self.d_in },
        ));
        params.push(ParamDecl::new(
            format!("{}.w_hh", self.prefix),
            &[self.hidden, g],
            Init::Uniform { fan_in: self.hidden },
        ));
        params.push(ParamDecl::new(format!("{}.bias", self.prefix), &[g], Init::Zeros));
    }
}

/// Two stacked bidirectional LSTM layers followed by layer normalisation.
/// Each direction has `d_out / 2` hidden units; the directions are
/// concatenated per step so the output width is `d_out`.
#[derive(Clone, Debug)]
pub struct BiLstm2 {
    pub layers: [(Lstm, Lstm); 2],
    pub ln: LayerNorm,
}

impl BiLstm2 {
    pub fn new(lstm_prefix: &str, ln_prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        if d_out % 2 != 0 {
            return Err(Error::Config(format!(
                "bidirectional width must be even to split directions, got {d_out}"
            )));
        }
        let h = d_out / 2;
        let layer = |i: usize, d: usize| {
            (
                Lstm::new(format!("{lstm_prefix}.l{i}.fwd"), d, h),
                Lstm::new(format!("{lstm_prefix}.l{i}.bwd"), d, h),
            )
        };
        Ok(BiLstm2 {
            layers: [layer(0, d_in), layer(1, d_out)],
            ln: LayerNorm::new(ln_prefix, d_out),
        })
    }

    /// Concatenated forward and backward hidden states, before normalisation.
    pub fn encode(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut x = x;
        for (fwd, bwd) in &self.layers {
            let f = fwd.forward(s, x)?;
            let rev = s.tape.reverse(x, 0)?;
            let b = bwd.forward(s, rev)?;
            let b = s.tape.reverse(b, 0)?;
            x = s.tape.concat(&[f, b], 1)?;
        }
        Ok(x)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.encode(s, x)?;
        self.ln.forward(s, h)
    }
}

impl Module for BiLstm2 {
    fn declare(&self, params: &mut Vec<ParamDecl>) {
        for (f, b) in &self.layers {
            f.declare(params);
            b.declare(params);
        }
        self.ln.declare(params);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Mode, ParamStore};
    use crate::tensor::gradcheck::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_for(m: &impl Module, seed: u64) -> ParamStore {
        let mut p = Vec::new();
        m.declare(&mut p);
        ParamStore::init(&p, &[], seed).unwrap()
    }

    #[test]
    fn odd_width_rejected() {
        assert!(matches!(BiLstm2::new("l", "n", 3, 5), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let m = BiLstm2::new("lstm", "ln", 3, 4).unwrap();
        let mut store = store_for(&m, 0);
        for (_, t) in store.params_mut() {
            t.data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = Session::new(&store, Mode::Eval);
        let x = s.constant(random_tensor(&[5, 3], -1.0, 1.0, &mut rng));
        let h = m.encode(&mut s, x).unwrap();
        assert!(s.tape.data(h).iter().all(|&v| v == 0.0));
        let y = m.ln.forward(&mut s, h).unwrap();
        assert_eq!(s.tape.shape(y), &[5, 4]);
        assert!(s.tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reversed_direction_equivariance() {
        // The backward direction of a layer is the same recurrence run on the
        // reversed sequence, so with shared weights it must equal the reversed
        // forward-direction output on the reversed input.
        let lstm = Lstm::new("dir", 3, 2);
        let store = store_for(&lstm, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&[6, 3], -1.0, 1.0, &mut rng);
        let mut s = Session::new(&store, Mode::Eval);
        let xv = s.constant(x.clone());
        let rev = s.tape.reverse(xv, 0).unwrap();
        let out_rev = lstm.forward(&mut s, rev).unwrap();
        let back = s.tape.reverse(out_rev, 0).unwrap();

        let mut xr = Vec::new();
        for t in (0..6).rev() {
            xr.extend_from_slice(x.row(t));
        }
        let xr = s.constant(Tensor::new(vec![6, 3], xr).unwrap());
        let direct = lstm.forward(&mut s, xr).unwrap();
        let direct = s.tape.reverse(direct, 0).unwrap();
        assert_eq!(s.tape.data(back), s.tape.data(direct));
    }

    #[test]
    fn scalar_cell_matches_hand_evaluation() {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (x, w_i, w_f, w_g, w_o) = (0.7, 0.5, -0.3, 0.8, 1.2);
        let (u_i, u_f, u_g, u_o) = (0.1, 0.2, -0.4, 0.3);
        let (b_i, b_f, b_g, b_o) = (0.05, 1.0, -0.1, 0.0);

        let lstm = Lstm::new("cell", 1, 1);
        let mut store = store_for(&lstm, 0);
        store.get_mut("cell.w_ih").unwrap().data_mut().copy_from_slice(&[w_i, w_f, w_g, w_o]);
        store.get_mut("cell.w_hh").unwrap().data_mut().copy_from_slice(&[u_i, u_f, u_g, u_o]);
        store.get_mut("cell.bias").unwrap().data_mut().copy_from_slice(&[b_i, b_f, b_g, b_o]);
        let mut s = Session::new(&store, Mode::Eval);
        let xs = s.constant(Tensor::new(vec![2, 1], vec![x, -x]).unwrap());
        let y = lstm.forward(&mut s, xs).unwrap();

        // step 1 from h = c = 0
        let c1 = sig(w_i * x + b_i) * (w_g * x + b_g).tanh();
        let h1 = sig(w_o * x + b_o) * c1.tanh();
        // step 2
        let x2 = -x;
        let i2 = sig(w_i * x2 + u_i * h1 + b_i);
        let f2 = sig(w_f * x2 + u_f * h1 + b_f);
        let g2 = (w_g * x2 + u_g * h1 + b_g).tanh();
        let o2 = sig(w_o * x2 + u_o * h1 + b_o);
        let c2 = f2 * c1 + i2 * g2;
        let h2 = o2 * c2.tanh();
        let got = s.tape.data(y);
        assert!((got[0] - h1).abs() < 1e-14, "{} vs {h1}", got[0]);
        assert!((got[1] - h2).abs() < 1e-14, "{} vs {h2}", got[1]);
    }

    #[test]
    fn preserves_length() {
        let m = BiLstm2::new("lstm", "ln", 3, 6).unwrap();
        let store = store_for(&m, 0);
        for t in 1..5 {
            let mut s = Session::new(&store, Mode::Eval);
            let x = s.constant(Tensor::full(&[t, 3], 0.3));
            let y = m.forward(&mut s, x).unwrap();
            assert_eq!(s.tape.shape(y), &[t, 6]);
        }
    }
}
