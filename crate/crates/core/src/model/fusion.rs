use std::collections::BTreeMap;

use super::config::FusionAxis;
use crate::error::{Error, Result};
use crate::nn::{Linear, Module, ParamDecl, Session};
use crate::tensor::Var;

/// Residual cross-modal fusion of two pooled deep-branch vectors into the
/// target modality's sequence:
///
/// ```text
/// m   = merge([F1, F2])                  joint deep vector, [d_f]
/// A   = proj(X_t) + m                    broadcast over time, [T, d_f]
/// X_F = softmax(tanh(A)) + X_t
/// ```
#[derive(Clone, Debug)]
pub struct CrossModalFusion {
    pub merge: Linear,
    pub proj: Linear,
    pub d_f: usize,
    pub axis: FusionAxis,
}

impl CrossModalFusion {
    pub fn new(prefix: &str, d_f: usize, axis: FusionAxis) -> Self {
        CrossModalFusion {
            merge: Linear::new(format!("{prefix}.merge"), 2 * d_f, d_f),
            proj: Linear::new(format!("{prefix}.proj"), d_f, d_f),
            d_f,
            axis,
        }
    }

    fn check(&self, s: &Session, deep1: Var, deep2: Var, target: Var) -> Result<()> {
        for v in [deep1, deep2] {
            if s.tape.shape(v) != [self.d_f] {
                return Err(Error::dim("cross_modal_fuse", s.tape.shape(v), &[self.d_f]));
            }
        }
        let t = s.tape.shape(target);
        if t.len() != 2 || t[1] != self.d_f {
            return Err(Error::dim("cross_modal_fuse", t, &[self.d_f]));
        }
        Ok(())
    }

    /// One sample, following the per-sample loop.
    pub fn forward(&self, s: &mut Session, deep1: Var, deep2: Var, target: Var) -> Result<Var> {
        self.check(s, deep1, deep2, target)?;
        let joint = s.tape.concat(&[deep1, deep2], 0)?;
        let joint = self.merge.forward(s, joint)?;
        let a = self.proj.forward(s, target)?;
        let a = s.tape.add(a, joint)?;
        let a = s.tape.tanh(a);
        let axis = match self.axis {
            FusionAxis::Feature => 1,
            FusionAxis::Time => 0,
        };
        let weights = s.tape.softmax(a, axis)?;
        s.tape.add(weights, target)
    }

    /// A whole batch at once. Deep vectors are stacked into one matrix and
    /// targets of equal length into `[G, T, d_f]` stacks. Results come back
    /// in input order and match [`CrossModalFusion::forward`] bit for bit.
    pub fn forward_batch(&self, s: &mut Session, items: &[(Var, Var, Var)]) -> Result<Vec<Var>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.d_f;
        let mut rows = Vec::with_capacity(items.len());
        for &(d1, d2, t) in items {
            self.check(s, d1, d2, t)?;
            let row = s.tape.concat(&[d1, d2], 0)?;
            rows.push(s.tape.reshape(row, &[1, 2 * d])?);
        }
        let stacked = s.tape.concat(&rows, 0)?;
        let joint = self.merge.forward(s, stacked)?;

        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &(_, _, t)) in items.iter().enumerate() {
            groups.entry(s.tape.shape(t)[0]).or_default().push(i);
        }
        let mut out = vec![None; items.len()];
        for (len, members) in groups {
            let g = members.len();
            let mut xs = Vec::with_capacity(g);
            let mut ms = Vec::with_capacity(g);
            for &i in &members {
                xs.push(s.tape.reshape(items[i].2, &[1, len, d])?);
                let m = s.tape.slice(joint, 0, i, 1)?;
                ms.push(s.tape.reshape(m, &[1, 1, d])?);
            }
            let x = s.tape.concat(&xs, 0)?;
            let m = s.tape.concat(&ms, 0)?;
            let a = self.proj.forward(s, x)?;
            let a = s.tape.add(a, m)?;
            let a = s.tape.tanh(a);
            let axis = match self.axis {
                FusionAxis::Feature => 2,
                FusionAxis::Time => 1,
            };
            let w = s.tape.softmax(a, axis)?;
            let fused = s.tape.add(w, x)?;
            for (k, &i) in members.iter().enumerate() {
                let one = s.tape.slice(fused, 0, k, 1)?;
                out[i] = Some(s.tape.reshape(one, &[len, d])?);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("every item is in a group")).collect())
    }
}

impl Module for CrossModalFusion {
    fn declare(&self, params: &mut Vec<ParamDecl>) {
        self.merge.declare(params);
        self.proj.declare(params);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};
    use crate::tensor::gradcheck::random_tensor;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, axis: FusionAxis, seed: u64) -> (CrossModalFusion, ParamStore) {
        let f = CrossModalFusion::new("fusion", d, axis);
        let mut p = Vec::new();
        f.declare(&mut p);
        let mut store = ParamStore::init(&p, &[], seed).unwrap();
        // non-zero biases so the bias additions are exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for path in ["fusion.merge.bias", "fusion.proj.bias"] {
            for v in store.get_mut(path).unwrap().data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        (f, store)
    }

    #[test]
    fn zeroed_linears_give_uniform_plus_residual() {
        let (f, mut store) = setup(4, FusionAxis::Feature, 1);
        for (_, t) in store.params_mut() {
            t.data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        let mut s = Session::new(&store, Mode::Eval);
        let d1 = s.constant(random_tensor(&[4], -1.0, 1.0, &mut rng));
        let d2 = s.constant(random_tensor(&[4], -1.0, 1.0, &mut rng));
        let xv = s.constant(x.clone());
        let y = f.forward(&mut s, d1, d2, xv).unwrap();
        let expect: Vec<f64> = x.data().iter().map(|v| 0.25 + v).collect();
        assert_eq!(s.tape.data(y), expect.as_slice());
    }

    #[test]
    fn row_sums_shift_by_one() {
        let (f, store) = setup(5 * 2, FusionAxis::Feature, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&[6, 10], -2.0, 2.0, &mut rng);
        let mut s = Session::new(&store, Mode::Eval);
        let d1 = s.constant(random_tensor(&[10], -1.0, 1.0, &mut rng));
        let d2 = s.constant(random_tensor(&[10], -1.0, 1.0, &mut rng));
        let xv = s.constant(x.clone());
        let y = f.forward(&mut s, d1, d2, xv).unwrap();
        assert_eq!(s.tape.shape(y), &[6, 10]);
        for (out, inp) in s.tape.data(y).chunks(10).zip(x.data().chunks(10)) {
            let diff = out.iter().sum::<f64>() - inp.iter().sum::<f64>();
            assert!((diff - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_hand_stepped_trace() {
        // T = 2, d_f = 2, with every weight written out
        let (f, mut store) = setup(2, FusionAxis::Feature, 0);
        let wm = [0.3, -0.2, 0.1, 0.4, -0.5, 0.2, 0.25, -0.1];
        let bm = [0.05, -0.05];
        let wp = [0.6, -0.3, 0.2, 0.9];
        let bp = [0.1, 0.0];
        store.get_mut("fusion.merge.weight").unwrap().data_mut().copy_from_slice(&wm);
        store.get_mut("fusion.merge.bias").unwrap().data_mut().copy_from_slice(&bm);
        store.get_mut("fusion.proj.weight").unwrap().data_mut().copy_from_slice(&wp);
        store.get_mut("fusion.proj.bias").unwrap().data_mut().copy_from_slice(&bp);
        let f1 = [0.5, -1.0];
        let f2 = [1.5, 0.25];
        let x = [[0.2, -0.4], [1.0, 0.5]];

        // line by line: joint vector, then a loop over time steps
        let cat = [f1[0], f1[1], f2[0], f2[1]];
        let mut joint = [0.0; 2];
        for j in 0..2 {
            joint[j] = (0..4).map(|i| cat[i] * wm[i * 2 + j]).sum::<f64>() + bm[j];
        }
        let mut expect = [[0.0; 2]; 2];
        for t in 0..2 {
            let mut a = [0.0; 2];
            for j in 0..2 {
                a[j] = (0..2).map(|i| x[t][i] * wp[i * 2 + j]).sum::<f64>() + bp[j] + joint[j];
                a[j] = a[j].tanh();
            }
            let m = a[0].max(a[1]);
            let z = (a[0] - m).exp() + (a[1] - m).exp();
            for j in 0..2 {
                expect[t][j] = (a[j] - m).exp() / z + x[t][j];
            }
        }

        let mut s = Session::new(&store, Mode::Eval);
        let d1 = s.constant(Tensor::new(vec![2], f1.to_vec()).unwrap());
        let d2 = s.constant(Tensor::new(vec![2], f2.to_vec()).unwrap());
        let xv = s.constant(Tensor::from_rows(&[x[0].to_vec(), x[1].to_vec()]).unwrap());
        let y = f.forward(&mut s, d1, d2, xv).unwrap();
        for (a, b) in s.tape.data(y).iter().zip(expect.iter().flatten()) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn batch_equals_loop_bitwise() {
        for axis in [FusionAxis::Feature, FusionAxis::Time] {
            let (f, store) = setup(6, axis, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut s = Session::new(&store, Mode::Eval);
            let items: Vec<(Var, Var, Var)> = (0..8)
                .map(|_| {
                    let t = rng.gen_range(1..5);
                    (
                        s.constant(random_tensor(&[6], -1.0, 1.0, &mut rng)),
                        s.constant(random_tensor(&[6], -1.0, 1.0, &mut rng)),
                        s.constant(random_tensor(&[t, 6], -1.0, 1.0, &mut rng)),
                    )
                })
                .collect();
            let batched = f.forward_batch(&mut s, &items).unwrap();
            for (&(d1, d2, t), b) in items.iter().zip(batched) {
                let l = f.forward(&mut s, d1, d2, t).unwrap();
                assert_eq!(s.tape.shape(l), s.tape.shape(b));
                assert_eq!(s.tape.data(l), s.tape.data(b));
            }
        }
    }

    #[test]
    fn time_axis_normalises_columns() {
        let (f, store) = setup(4, FusionAxis::Time, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        let mut s = Session::new(&store, Mode::Eval);
        let d1 = s.constant(random_tensor(&[4], -1.0, 1.0, &mut rng));
        let d2 = s.constant(random_tensor(&[4], -1.0, 1.0, &mut rng));
        let xv = s.constant(x.clone());
        let y = f.forward(&mut s, d1, d2, xv).unwrap();
        let y = s.tape.data(y);
        for c in 0..4 {
            let col: f64 = (0..3).map(|t| y[t * 4 + c] - x.data()[t * 4 + c]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let (f, store) = setup(4, FusionAxis::Feature, 0);
        let mut s = Session::new(&store, Mode::Eval);
        let d1 = s.constant(Tensor::zeros(&[4]));
        let d2 = s.constant(Tensor::zeros(&[3]));
        let x = s.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(f.forward(&mut s, d1, d2, x), Err(Error::Dimension { .. })));
    }
}
