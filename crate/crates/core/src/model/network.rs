use std::collections::BTreeMap;

use super::config::{Arch, ModelConfig, TextEncoder};
use super::fusion::CrossModalFusion;
use crate::data::{Modality, MultimodalSample};
use crate::error::{Error, Result, StageExt};
use crate::nn::{
    BiLstm2, ConvBn, Linear, Module, ParamDecl, ParamStore, PositionalTable, Session, TemporalPool,
    TransformerEncoder,
};
use crate::tensor::Var;

#[derive(Clone, Debug)]
enum Preprocessor {
    Recurrent(BiLstm2),
    Conv(ConvBn),
}

impl Preprocessor {
    fn forward_group(&self, s: &mut Session, xs: &[Var]) -> Result<Vec<Var>> {
        match self {
            Preprocessor::Recurrent(m) => xs.iter().map(|&x| m.forward(s, x)).collect(),
            Preprocessor::Conv(m) => m.forward_group(s, xs),
        }
    }

    fn declare(&self, params: &mut Vec<ParamDecl>, buffers: &mut Vec<ParamDecl>) {
        match self {
            Preprocessor::Recurrent(m) => m.declare(params),
            Preprocessor::Conv(m) => {
                m.declare(params);
                m.declare_buffers(buffers);
            }
        }
    }
}

/// Encoder stack plus its pooling head for one branch.
#[derive(Clone, Debug)]
struct Branch {
    encoder: TransformerEncoder,
    pool: TemporalPool,
}

impl Branch {
    fn new(prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Branch {
            encoder: TransformerEncoder::new(prefix, &cfg.encoder())?,
            pool: TemporalPool::new(&format!("{prefix}.pool_ln"), cfg.d_f),
        })
    }

    /// Returns the encoded sequence and its pooled vector.
    fn forward(&self, s: &mut Session, pe: &PositionalTable, x: Var) -> Result<(Var, Var)> {
        let z = pe.add_to(s, x)?;
        let z = self.encoder.forward(s, z)?;
        let pooled = self.pool.forward(s, z)?;
        Ok((z, pooled))
    }

    fn declare(&self, params: &mut Vec<ParamDecl>) {
        self.encoder.declare(params);
        self.pool.declare(params);
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct FusionState {
    /// Preprocessed sequences in L, V, A order (absent ones are `None`).
    pub preprocessed: [Option<Var>; 3],
    /// Pooled vectors of the two deep branches.
    pub deep: Vec<Var>,
    pub fused: Option<Var>,
    pub pooled: Var,
    pub logits: Var,
}

/// The assembled network. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct LmrCbt {
    cfg: ModelConfig,
    pre: BTreeMap<Modality, Preprocessor>,
    deep: Vec<(Modality, Branch)>,
    fusion: Option<CrossModalFusion>,
    global: Branch,
    pe: PositionalTable,
    fc1: Linear,
    fc2: Linear,
}

impl LmrCbt {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut pre = BTreeMap::new();
        let lang = match cfg.text_encoder {
            TextEncoder::BiLstm => Preprocessor::Recurrent(BiLstm2::new("lstm_l", "ln_l", cfg.d_l, cfg.d_f)?),
            TextEncoder::Conv1d => Preprocessor::Conv(ConvBn::new("conv_l", "bn_l", cfg.d_l, cfg.d_f, cfg.k_l)?),
        };
        pre.insert(Modality::L, lang);
        let full = cfg.arch == Arch::Full;
        if full {
            for m in [Modality::V, Modality::A] {
                let conv = ConvBn::new(
                    &format!("conv_{}", m.lower()),
                    &format!("bn_{}", m.lower()),
                    cfg.input_dim(m),
                    cfg.d_f,
                    cfg.kernel(m),
                )?;
                pre.insert(m, Preprocessor::Conv(conv));
            }
        }
        let (deep, fusion, global, head_in) = if full {
            let deep = cfg
                .fusion_target
                .others()
                .iter()
                .map(|&m| Ok((m, Branch::new(&format!("enc_{}", m.lower()), cfg)?)))
                .collect::<Result<Vec<_>>>()?;
            let fusion = CrossModalFusion::new("fusion", cfg.d_f, cfg.fusion_axis);
            (deep, Some(fusion), Branch::new("enc_fused", cfg)?, 3 * cfg.d_f)
        } else {
            (Vec::new(), None, Branch::new("enc_l", cfg)?, cfg.d_f)
        };
        Ok(LmrCbt {
            cfg: cfg.clone(),
            pre,
            deep,
            fusion,
            global,
            pe: PositionalTable::new(cfg.max_len, cfg.d_f)?,
            fc1: Linear::new("head.fc1", head_in, cfg.d_f),
            fc2: Linear::new("head.fc2", cfg.d_f, cfg.d_out),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Parameter and buffer declarations.
    pub fn declarations(&self) -> (Vec<ParamDecl>, Vec<ParamDecl>) {
        let (mut params, mut buffers) = (Vec::new(), Vec::new());
        for p in self.pre.values() {
            p.declare(&mut params, &mut buffers);
        }
        for (_, b) in &self.deep {
            b.declare(&mut params);
        }
        if let Some(f) = &self.fusion {
            f.declare(&mut params);
        }
        self.global.declare(&mut params);
        self.fc1.declare(&mut params);
        self.fc2.declare(&mut params);
        (params, buffers)
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let (p, b) = self.declarations();
        ParamStore::init(&p, &b, seed)
    }

    /// Checks that `store` holds exactly this model's parameter and buffer
    /// paths with matching shapes.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        let (params, buffers) = self.declarations();
        let want = |decls: &[ParamDecl]| -> BTreeMap<String, Vec<usize>> {
            decls.iter().map(|d| (d.path.clone(), d.shape.clone())).collect()
        };
        let have_p: BTreeMap<String, Vec<usize>> =
            store.params().map(|(k, t)| (k.to_string(), t.shape().to_vec())).collect();
        let have_b: BTreeMap<String, Vec<usize>> =
            store.buffers().map(|(k, t)| (k.to_string(), t.shape().to_vec())).collect();
        for (what, want, have) in [("parameter", want(&params), have_p), ("buffer", want(&buffers), have_b)] {
            if want != have {
                let missing = want.keys().find(|k| !have.contains_key(*k));
                let extra = have.keys().find(|k| !want.contains_key(*k));
                let detail = match (missing, extra) {
                    (Some(m), _) => format!("missing {what} {m}"),
                    (_, Some(e)) => format!("unexpected {what} {e}"),
                    _ => {
                        let k = want.keys().find(|k| want[*k] != have[*k]).expect("maps differ");
                        format!("{what} {k} has shape {:?}, model expects {:?}", have[k], want[k])
                    }
                };
                return Err(Error::Schema(detail));
            }
        }
        Ok(())
    }

    fn check_sample(&self, sample: &MultimodalSample) -> Result<()> {
        for &m in self.pre.keys() {
            let want = self.cfg.input_dim(m);
            if sample.dim(m) != want {
                return Err(Error::Data {
                    modality: m.name().into(),
                    reason: format!("feature width {} but the model expects {want}", sample.dim(m)),
                });
            }
            if sample.len(m) > self.cfg.max_len {
                return Err(Error::Capacity {
                    len: sample.len(m),
                    max_len: self.cfg.max_len,
                });
            }
        }
        Ok(())
    }

    /// Preprocessed sequences per sample. Batch normalisation sees the whole
    /// group at once; everything else runs sample by sample.
    fn preprocess(&self, s: &mut Session, samples: &[&MultimodalSample]) -> Result<Vec<[Option<Var>; 3]>> {
        for sample in samples {
            self.check_sample(sample)?;
        }
        let mut out = vec![[None; 3]; samples.len()];
        for (&m, p) in &self.pre {
            let xs: Vec<Var> = samples.iter().map(|x| s.constant(x.seq(m).clone())).collect();
            for (o, y) in out.iter_mut().zip(p.forward_group(s, &xs)?) {
                o[m.index()] = Some(y);
            }
        }
        Ok(out)
    }

    fn forward_rest(&self, s: &mut Session, pre: [Option<Var>; 3]) -> Result<FusionState> {
        let Some(fusion) = &self.fusion else {
            let x = pre[Modality::L.index()].expect("language is always preprocessed");
            let (_, pooled) = self.global.forward(s, &self.pe, x).stage("global")?;
            let logits = self.head(s, &[pooled]).stage("head")?;
            return Ok(FusionState {
                preprocessed: pre,
                deep: Vec::new(),
                fused: None,
                pooled,
                logits,
            });
        };
        let mut deep = Vec::with_capacity(2);
        for (m, branch) in &self.deep {
            let x = pre[m.index()].expect("deep branches are preprocessed");
            let (_, pooled) = branch.forward(s, &self.pe, x).stage("local_temporal")?;
            deep.push(pooled);
        }
        let target = pre[self.cfg.fusion_target.index()].expect("fusion target is preprocessed");
        let fused = fusion.forward(s, deep[0], deep[1], target).stage("fusion")?;
        let (_, pooled) = self.global.forward(s, &self.pe, fused).stage("global")?;
        let logits = self.head(s, &[pooled, deep[0], deep[1]]).stage("head")?;
        Ok(FusionState {
            preprocessed: pre,
            deep,
            fused: Some(fused),
            pooled,
            logits,
        })
    }

    /// Full forward pass over a batch on one tape, returning every
    /// intermediate. In training mode the batch shares batch-norm statistics.
    pub fn forward_batch_state(&self, s: &mut Session, samples: &[&MultimodalSample]) -> Result<Vec<FusionState>> {
        let pre = self.preprocess(s, samples).stage("preprocess")?;
        pre.into_iter().map(|p| self.forward_rest(s, p)).collect()
    }

    /// Full forward pass of one sample.
    pub fn forward_state(&self, s: &mut Session, sample: &MultimodalSample) -> Result<FusionState> {
        Ok(self.forward_batch_state(s, &[sample])?.remove(0))
    }

    pub fn forward_batch(&self, s: &mut Session, samples: &[&MultimodalSample]) -> Result<Vec<Var>> {
        Ok(self.forward_batch_state(s, samples)?.into_iter().map(|st| st.logits).collect())
    }

    /// Logits of width `d_out`.
    pub fn forward(&self, s: &mut Session, sample: &MultimodalSample) -> Result<Var> {
        Ok(self.forward_state(s, sample)?.logits)
    }

    fn head(&self, s: &mut Session, parts: &[Var]) -> Result<Var> {
        let joined = if parts.len() == 1 {
            parts[0]
        } else {
            s.tape.concat(parts, 0)?
        };
        let h = self.fc1.forward(s, joined)?;
        let h = s.tape.relu(h);
        self.fc2.forward(s, h)
    }

    pub fn fusion(&self) -> Option<&CrossModalFusion> {
        self.fusion.as_ref()
    }

    pub fn positional(&self) -> &PositionalTable {
        &self.pe
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Task};
    use crate::nn::Mode;
    use crate::tensor::gradcheck::random_tensor;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(lens: [usize; 3], dims: [usize; 3], seed: u64) -> MultimodalSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [l, v, a] = [0, 1, 2].map(|i| random_tensor(&[lens[i], dims[i]], -1.0, 1.0, &mut rng));
        MultimodalSample::new("s", l, v, a, Label::Sentiment(0.5)).unwrap()
    }

    #[test]
    fn shapes_follow_target_length() {
        let dims = [5, 3, 4];
        for target in Modality::ALL {
            let mut cfg = ModelConfig::tiny(dims, Task::Multilabel4);
            cfg.fusion_target = target;
            let model = LmrCbt::new(&cfg).unwrap();
            let store = model.init_params(1).unwrap();
            let x = sample([7, 11, 13], dims, 2);
            let mut s = Session::new(&store, Mode::Eval);
            let st = model.forward_state(&mut s, &x).unwrap();
            assert_eq!(s.tape.shape(st.logits), &[4]);
            let fused = st.fused.unwrap();
            assert_eq!(s.tape.shape(fused), &[x.len(target), 4]);
            for m in Modality::ALL {
                assert_eq!(s.tape.shape(st.preprocessed[m.index()].unwrap()), &[x.len(m), 4]);
            }
        }
    }

    #[test]
    fn wrong_width_names_modality_and_stage() {
        let cfg = ModelConfig::tiny([5, 3, 4], Task::Sentiment);
        let model = LmrCbt::new(&cfg).unwrap();
        let store = model.init_params(1).unwrap();
        let x = sample([2, 2, 2], [5, 2, 4], 0);
        let mut s = Session::new(&store, Mode::Eval);
        let err = model.forward(&mut s, &x).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "preprocess", .. }));
        assert!(matches!(err.root(), Error::Data { modality, .. } if modality == "V"));
    }

    #[test]
    fn overlong_sequence_is_capacity_error() {
        let mut cfg = ModelConfig::tiny([2, 2, 2], Task::Sentiment);
        cfg.max_len = 4;
        let model = LmrCbt::new(&cfg).unwrap();
        let store = model.init_params(1).unwrap();
        let mut s = Session::new(&store, Mode::Eval);
        let err = model.forward(&mut s, &sample([2, 5, 2], [2, 2, 2], 0)).unwrap_err();
        assert!(matches!(err.root(), Error::Capacity { len: 5, max_len: 4 }));
    }

    #[test]
    fn zero_input_stays_finite() {
        let cfg = ModelConfig::tiny([2, 2, 2], Task::Sentiment);
        let model = LmrCbt::new(&cfg).unwrap();
        let store = model.init_params(3).unwrap();
        let z = |t| Tensor::zeros(&[t, 2]);
        let x = MultimodalSample::new("z", z(3), z(4), z(2), Label::Sentiment(0.0)).unwrap();
        for mode in [Mode::Eval, Mode::Train] {
            let mut s = Session::new(&store, mode);
            let st = model.forward_state(&mut s, &x).unwrap();
            for &d in &st.deep {
                assert!(s.tape.value(d).is_finite());
            }
            assert!(s.tape.value(st.logits).is_finite());
        }
    }

    #[test]
    fn deterministic_forward() {
        let cfg = ModelConfig::tiny([3, 3, 3], Task::Sentiment);
        let model = LmrCbt::new(&cfg).unwrap();
        let x = sample([4, 6, 5], [3, 3, 3], 5);
        let run = || {
            let store = model.init_params(9).unwrap();
            let mut s = Session::new(&store, Mode::Train);
            let y = model.forward(&mut s, &x).unwrap();
            s.tape.data(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn language_only_has_no_fusion() {
        let mut cfg = ModelConfig::tiny([3, 3, 3], Task::Sentiment);
        cfg.arch = Arch::LanguageOnly;
        let model = LmrCbt::new(&cfg).unwrap();
        let store = model.init_params(0).unwrap();
        assert!(store.params().all(|(k, _)| !k.starts_with("conv_v") && !k.starts_with("fusion")));
        let mut s = Session::new(&store, Mode::Eval);
        let st = model.forward_state(&mut s, &sample([3, 1, 1], [3, 3, 3], 1)).unwrap();
        assert!(st.fused.is_none());
        assert_eq!(s.tape.shape(st.logits), &[1]);
    }

    #[test]
    fn check_store_reports_mismatch() {
        let cfg = ModelConfig::tiny([3, 3, 3], Task::Sentiment);
        let model = LmrCbt::new(&cfg).unwrap();
        let store = model.init_params(0).unwrap();
        assert!(model.check_store(&store).is_ok());
        let other = LmrCbt::new(&ModelConfig { d_v: 4, ..cfg }).unwrap();
        assert!(matches!(other.check_store(&store), Err(Error::Schema(_))));
    }
}
