use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use super::adam::{clip_global_norm, Adam, AdamConfig};
use super::loss::loss;
use super::metrics::{compute, MetricsReport};
use crate::data::{split_batches, Dataset, MultimodalSample, Task};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::model::LmrCbt;
use crate::nn::{BnUpdate, Mode, ParamStore, Session};
use crate::nn::norm::BN_MOMENTUM;
use crate::seed;
use crate::tensor::Var;

pub const LOG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
    /// Run seed; initialisation and shuffling use derived sub-streams.
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(lr: f64, batch_size: usize, epochs: usize) -> Self {
        TrainConfig {
            lr,
            batch_size,
            epochs,
            adam: AdamConfig::default(),
            grad_clip: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate {} must be finite and nonnegative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(Error::Config("Adam needs 0 ≤ beta < 1 and eps > 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, seed::INIT)
    }

    pub fn shuffle_seed(&self, epoch: usize) -> u64 {
        seed::derive(seed::derive(self.seed, seed::SHUFFLE), &format!("epoch{epoch}"))
    }

    /// Keys without the `train.` prefix.
    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("beta1".into(), self.adam.beta1.to_string());
        m.insert("beta2".into(), self.adam.beta2.to_string());
        m.insert("epochs".into(), self.epochs.to_string());
        m.insert("eps".into(), self.adam.eps.to_string());
        m.insert(
            "grad_clip".into(),
            self.grad_clip.map_or_else(|| "none".into(), |c| c.to_string()),
        );
        m.insert("lr".into(), self.lr.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m
    }

    pub fn apply_kv(&mut self, m: &KvMap) -> Result<()> {
        const KEYS: [&str; 8] = ["batch_size", "beta1", "beta2", "epochs", "eps", "grad_clip", "lr", "seed"];
        if let Some(k) = m.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown train key {k}")));
        }
        self.batch_size = kv::get_or(m, "batch_size", self.batch_size)?;
        self.adam.beta1 = kv::get_or(m, "beta1", self.adam.beta1)?;
        self.adam.beta2 = kv::get_or(m, "beta2", self.adam.beta2)?;
        self.epochs = kv::get_or(m, "epochs", self.epochs)?;
        self.adam.eps = kv::get_or(m, "eps", self.adam.eps)?;
        if let Some(c) = m.get("grad_clip") {
            self.grad_clip = if c == "none" { None } else { Some(kv::get(m, "grad_clip")?) };
        }
        self.lr = kv::get_or(m, "lr", self.lr)?;
        self.seed = kv::get_or(m, "seed", self.seed)?;
        Ok(())
    }
}

/// Worker pool for per-sample fan-out, capped by `LMRCBT_THREADS` when set.
pub fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("LMRCBT_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool builds")
    })
}

/// Model outputs and losses for every sample, in dataset order.
pub fn predict(model: &LmrCbt, store: &ParamStore, ds: &Dataset) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let one = |s: &MultimodalSample| -> Result<(Vec<f64>, f64)> {
        let mut sess = Session::new(store, Mode::Eval);
        let logits = model.forward(&mut sess, s)?;
        let l = loss(&mut sess.tape, logits, &s.label)?;
        Ok((sess.tape.data(logits).to_vec(), sess.tape.item(l)))
    };
    let rows: Vec<(Vec<f64>, f64)> = pool().install(|| ds.samples().par_iter().map(one).collect::<Result<_>>())?;
    Ok(rows.into_iter().unzip())
}

/// Metrics for a frozen model. Workers only produce per-sample outputs; the
/// reduction runs in dataset order, so reports are reproducible.
pub fn evaluate(model: &LmrCbt, store: &ParamStore, ds: &Dataset) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let (outputs, losses) = predict(model, store, ds)?;
    let labels: Vec<_> = ds.samples().iter().map(|s| s.label.clone()).collect();
    compute(ds.task, &outputs, &labels, &losses)
}

/// Mean loss, its gradients and the batch-norm statistics of one batch.
///
/// The batch runs on a single tape so batch normalisation can use
/// statistics over all of its sequences.
pub fn batch_gradients(
    model: &LmrCbt,
    store: &ParamStore,
    ds: &Dataset,
    batch: &[usize],
) -> Result<(f64, BTreeMap<String, Vec<f64>>, Vec<BnUpdate>)> {
    let samples: Vec<&MultimodalSample> = batch.iter().map(|&i| ds.get(i)).collect();
    let mut sess = Session::new(store, Mode::Train);
    let logits = model.forward_batch(&mut sess, &samples)?;
    let mut total: Option<Var> = None;
    for (&y, s) in logits.iter().zip(&samples) {
        let l = loss(&mut sess.tape, y, &s.label)?;
        total = Some(match total {
            Some(t) => sess.tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let mean = sess.tape.scale(total, 1.0 / samples.len() as f64);
    let value = sess.tape.item(mean);
    if value.is_finite() {
        sess.backward(mean)?;
    }
    Ok((value, sess.gradients(), sess.bn_updates().to_vec()))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters and buffers at the epoch with the lowest validation loss.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_train: MetricsReport,
    pub best_val: MetricsReport,
    /// Metric log records, deterministic for a fixed configuration.
    pub log: Vec<Value>,
    /// Wall-clock timings, kept apart from the log.
    pub timing: Vec<Value>,
}

fn loss_name(task: Task) -> &'static str {
    match task {
        Task::Multilabel4 => "bce_with_logits_mean",
        Task::Sentiment => "l1",
    }
}

fn metric_record(kind: &str, epoch: usize, split: &str, seed: u64, r: &MetricsReport) -> Value {
    let mut m = Map::new();
    m.insert("record".into(), json!(kind));
    m.insert("epoch".into(), json!(epoch));
    m.insert("split".into(), json!(split));
    m.insert("seed".into(), json!(seed));
    m.extend(r.to_json());
    Value::Object(m)
}

/// The log's first record: format version, resolved configuration and the
/// conventions the metrics depend on.
pub fn log_header(task: Task, config: &KvMap) -> Value {
    json!({
        "record": "header",
        "format_version": LOG_FORMAT_VERSION,
        "config": config,
        "loss": loss_name(task),
        "acc2_zero_labels": "excluded",
        "acc2_rule": "sign(pred) vs sign(label): pred >= 0 is positive",
        "multilabel_threshold": "sigmoid >= 0.5",
        "selection": "lowest validation loss",
    })
}

pub fn train(
    model: &LmrCbt,
    init: ParamStore,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    config: &KvMap,
) -> Result<TrainOutcome> {
    train_with(model, init, train_ds, val_ds, cfg, config, &mut |_| {})
}

/// As [`train`], calling `observe` with each log record as it is produced.
pub fn train_with(
    model: &LmrCbt,
    init: ParamStore,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    config: &KvMap,
    observe: &mut dyn FnMut(&Value),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_store(&init)?;
    for (name, ds) in [("train", train_ds), ("val", val_ds)] {
        if ds.is_empty() {
            return Err(Error::Contract(format!("{name} split is empty")));
        }
        if ds.task != model.config().task || ds.dims != model.config().dims() {
            return Err(Error::Schema(format!(
                "{name} split ({} {:?}) does not fit the model ({} {:?})",
                ds.task,
                ds.dims,
                model.config().task,
                model.config().dims()
            )));
        }
    }
    let mut log = Vec::new();
    let mut timing = Vec::new();
    let mut emit = |log: &mut Vec<Value>, v: Value| {
        observe(&v);
        log.push(v);
    };
    emit(&mut log, log_header(train_ds.task, config));

    let mut store = init;
    let mut adam = Adam::new(cfg.adam);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let batches = split_batches(train_ds.len(), cfg.batch_size, cfg.shuffle_seed(epoch))?;
        let mut loss_sum = 0.0;
        let mut grad_norm_max: f64 = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let (batch_loss, mut grads, bn) = batch_gradients(model, &store, train_ds, batch)?;
            if !batch_loss.is_finite() {
                return Err(Error::NumericAbort { epoch, batch: b + 1 });
            }
            loss_sum += batch_loss * batch.len() as f64;
            let norm = match cfg.grad_clip {
                Some(c) => clip_global_norm(&mut grads, c),
                None => grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt(),
            };
            grad_norm_max = grad_norm_max.max(norm);
            adam.step(&mut store, &grads, cfg.lr);
            store.apply_bn_updates(&bn, BN_MOMENTUM)?;
        }
        let train_report = evaluate(model, &store, train_ds)?;
        let val_report = evaluate(model, &store, val_ds)?;
        let mut rec = metric_record("epoch", epoch, "train", cfg.seed, &train_report);
        rec["running_loss"] = json!(loss_sum / train_ds.len() as f64);
        rec["max_grad_norm"] = json!(grad_norm_max);
        emit(&mut log, rec);
        emit(&mut log, metric_record("epoch", epoch, "val", cfg.seed, &val_report));
        if !val_report.loss.is_finite() {
            return Err(Error::NumericAbort {
                epoch,
                batch: batches.len(),
            });
        }
        if best.as_ref().map_or(true, |(l, _, _)| val_report.loss < *l) {
            best = Some((val_report.loss, epoch, store.clone()));
        }
        timing.push(json!({ "epoch": epoch, "wall_seconds": started.elapsed().as_secs_f64() }));
    }
    // with zero epochs the initial parameters are the only candidate
    let (best_epoch, best_store) = match best {
        Some((_, e, s)) => (e, s),
        None => (0, store),
    };
    let best_train = evaluate(model, &best_store, train_ds)?;
    let best_val = evaluate(model, &best_store, val_ds)?;
    emit(&mut log, metric_record("best", best_epoch, "train", cfg.seed, &best_train));
    emit(&mut log, metric_record("best", best_epoch, "val", cfg.seed, &best_val));
    Ok(TrainOutcome {
        best: best_store,
        best_epoch,
        best_train,
        best_val,
        log,
        timing,
    })
}

pub fn to_jsonl(records: &[Value]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_kv_roundtrip() {
        let mut c = TrainConfig::new(2e-3, 8, 100);
        c.grad_clip = Some(1.0);
        c.seed = 42;
        let mut back = TrainConfig::new(0.0, 1, 1);
        back.apply_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        c.grad_clip = None;
        back.apply_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::new(1e-3, 0, 1).validate().is_err());
        assert!(TrainConfig::new(-1.0, 1, 1).validate().is_err());
        assert!(TrainConfig::new(0.0, 1, 0).validate().is_ok());
    }

    #[test]
    fn seeds_are_distinct_streams() {
        let c = TrainConfig::new(1e-3, 8, 1);
        assert_ne!(c.init_seed(), c.shuffle_seed(1));
        assert_ne!(c.shuffle_seed(1), c.shuffle_seed(2));
    }
}
