use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{numel, Tape, Tensor, Var};

/// How a declared tensor is filled at construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDecl {
    pub fn new(path: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamDecl {
            path: path.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Implemented by every parameterised layer so a model can enumerate its
/// trainable tensors and non-trainable buffers.
pub trait Module {
    fn declare(&self, params: &mut Vec<ParamDecl>);

    fn declare_buffers(&self, _buffers: &mut Vec<ParamDecl>) {}
}

/// Named trainable tensors plus non-trainable buffers, both keyed by path and
/// kept in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
    init_seed: u64,
}

impl ParamStore {
    /// Materialises declarations. Each parameter draws from its own stream
    /// keyed by `(seed, path)`, so adding a layer does not perturb the others.
    pub fn init(params: &[ParamDecl], buffers: &[ParamDecl], seed: u64) -> Result<Self> {
        let build = |decls: &[ParamDecl], trainable: bool| -> Result<BTreeMap<String, Tensor>> {
            let mut out = BTreeMap::new();
            for d in decls {
                let data = match d.init {
                    Init::Zeros => vec![0.0; numel(&d.shape)],
                    Init::Ones => vec![1.0; numel(&d.shape)],
                    Init::Uniform { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &d.path));
                        (0..numel(&d.shape))
                            .map(|_| rng.gen_range(-bound..bound))
                            .collect()
                    }
                };
                let mut t = Tensor::new(d.shape.clone(), data)?;
                t.set_requires_grad(trainable);
                if out.insert(d.path.clone(), t).is_some() {
                    return Err(Error::Config(format!("duplicate parameter path {}", d.path)));
                }
            }
            Ok(out)
        };
        let params = build(params, true)?;
        let buffers = build(buffers, false)?;
        if let Some(p) = buffers.keys().find(|p| params.contains_key(*p)) {
            return Err(Error::Config(format!("path {p} is both parameter and buffer")));
        }
        Ok(ParamStore {
            params,
            buffers,
            init_seed: seed,
        })
    }

    pub fn from_parts(
        params: BTreeMap<String, Tensor>,
        buffers: BTreeMap<String, Tensor>,
        init_seed: u64,
    ) -> Self {
        let params = params
            .into_iter()
            .map(|(k, mut t)| {
                t.set_requires_grad(true);
                (k, t)
            })
            .collect();
        ParamStore {
            params,
            buffers,
            init_seed,
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn buffer(&self, path: &str) -> Option<&Tensor> {
        self.buffers.get(path)
    }

    pub fn buffer_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(path)
    }

    /// Trainable tensors in sorted path order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Blends observed batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) -> Result<()> {
        for u in updates {
            for (suffix, fresh) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let path = format!("{}.{suffix}", u.prefix);
                let buf = self
                    .buffers
                    .get_mut(&path)
                    .ok_or_else(|| Error::Contract(format!("unknown buffer {path}")))?;
                for (r, f) in buf.data_mut().iter_mut().zip(fresh.iter()) {
                    *r = (1.0 - momentum) * *r + momentum * f;
                }
            }
        }
        Ok(())
    }
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward/backward pass: a fresh tape with parameters bound as leaves on
/// first use.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self::with_tape(store, mode, Tape::new())
    }

    pub fn with_tape(store: &'a ParamStore, mode: Mode, tape: Tape) -> Self {
        Session {
            tape,
            store,
            bound: BTreeMap::new(),
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(path) {
            return Ok(v);
        }
        let t = self
            .store
            .get(path)
            .ok_or_else(|| Error::Contract(format!("missing parameter {path}")))?;
        let v = self.tape.leaf(t.clone());
        self.bound.insert(path.to_string(), v);
        Ok(v)
    }

    /// Routes `path` to an existing tape variable instead of a fresh leaf.
    pub fn bind(&mut self, path: &str, v: Var) {
        self.bound.insert(path.to_string(), v);
    }

    pub fn buffer(&self, path: &str) -> Result<&'a Tensor> {
        self.store
            .buffer(path)
            .ok_or_else(|| Error::Contract(format!("missing buffer {path}")))
    }

    pub fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every parameter touched by this pass.
    pub fn gradients(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| self.tape.grad(v).map(|g| (k.clone(), g.to_vec())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decls() -> Vec<ParamDecl> {
        vec![
            ParamDecl::new("b.weight", &[3, 2], Init::Uniform { fan_in: 3 }),
            ParamDecl::new("a.bias", &[2], Init::Zeros),
        ]
    }

    #[test]
    fn init_is_seeded_sorted_and_bounded() {
        let s1 = ParamStore::init(&decls(), &[], 5).unwrap();
        let s2 = ParamStore::init(&decls(), &[], 5).unwrap();
        assert_eq!(s1, s2);
        let paths: Vec<&str> = s1.params().map(|(p, _)| p).collect();
        assert_eq!(paths, ["a.bias", "b.weight"]);
        assert_eq!(s1.param_count(), 8);
        let bound = 1.0 / 3f64.sqrt();
        assert!(s1.get("b.weight").unwrap().data().iter().all(|v| v.abs() < bound));
        assert!(s1.get("a.bias").unwrap().data().iter().all(|&v| v == 0.0));
        let s3 = ParamStore::init(&decls(), &[], 6).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut d = decls();
        d.push(d[0].clone());
        assert!(matches!(ParamStore::init(&d, &[], 0), Err(Error::Config(_))));
    }

    #[test]
    fn session_binds_once_and_reports_grads() {
        let store = ParamStore::init(&decls(), &[], 1).unwrap();
        let mut s = Session::new(&store, Mode::Train);
        let w = s.param("b.weight").unwrap();
        assert_eq!(s.param("b.weight").unwrap(), w);
        let l = s.tape.sum(w);
        s.backward(l).unwrap();
        let g = s.gradients();
        assert_eq!(g.len(), 1);
        assert_eq!(g["b.weight"], vec![1.0; 6]);
        assert!(s.param("nope").is_err());
    }
}
