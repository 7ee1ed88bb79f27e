//! Seeded synthetic unaligned datasets with a planted cross-modal signal.
//!
//! Each sample draws a private latent `z_m` per modality and a cross latent
//! `c` that is split into additive shares `s_L + s_V + s_A = c`. Modality `m`
//! sees only `[z_m, s_m]`, embedded through a fixed orthonormal basis and
//! modulated by a random positive temporal envelope, so the cross term of
//! the label can only be recovered by combining all three modalities.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::sample::{Dataset, Label, Modality, MultimodalSample, Task};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Inclusive length ranges per modality, in L, V, A order.
    pub lengths: [(usize, usize); 3],
    pub dims: [usize; 3],
    pub task: Task,
    /// `(w_L, w_V, w_A, w_cross)`: nonnegative, summing to 1, `w_cross > 0`.
    pub mix: [f64; 4],
    pub noise_sigma: f64,
    /// Width of each latent vector.
    pub latent_dim: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Small default set: 100/50/50 samples, lengths 5..20, 8..30, 10..40.
    pub fn small(task: Task, seed: u64) -> Self {
        SynthSpec {
            n_train: 100,
            n_val: 50,
            n_test: 50,
            lengths: [(5, 20), (8, 30), (10, 40)],
            dims: [16, 8, 12],
            task,
            mix: [0.25, 0.125, 0.125, 0.5],
            noise_sigma: 0.1,
            latent_dim: 2,
            seed,
        }
    }

    /// Keys without the `synth.` prefix. Length ranges are written `lo..hi`.
    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("n_train", self.n_train.to_string());
        put("n_val", self.n_val.to_string());
        put("n_test", self.n_test.to_string());
        for (mo, (lo, hi)) in Modality::ALL.iter().zip(self.lengths) {
            put(&format!("len_{}", mo.lower()), format!("{lo}..{hi}"));
        }
        for (mo, d) in Modality::ALL.iter().zip(self.dims) {
            put(&format!("d_{}", mo.lower()), d.to_string());
        }
        put("task", self.task.name().to_string());
        for (k, w) in ["w_l", "w_v", "w_a", "w_cross"].iter().zip(self.mix) {
            put(k, w.to_string());
        }
        put("noise_sigma", self.noise_sigma.to_string());
        put("latent_dim", self.latent_dim.to_string());
        put("seed", self.seed.to_string());
        m
    }

    pub fn apply_kv(&mut self, m: &KvMap) -> Result<()> {
        let known = self.to_kv();
        if let Some(k) = m.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::Config(format!("unknown synth key {k}")));
        }
        self.n_train = kv::get_or(m, "n_train", self.n_train)?;
        self.n_val = kv::get_or(m, "n_val", self.n_val)?;
        self.n_test = kv::get_or(m, "n_test", self.n_test)?;
        for mo in Modality::ALL {
            let i = mo.index();
            if let Some(v) = m.get(&format!("len_{}", mo.lower())) {
                self.lengths[i] = parse_range(v)?;
            }
            self.dims[i] = kv::get_or(m, &format!("d_{}", mo.lower()), self.dims[i])?;
        }
        self.task = kv::get_or(m, "task", self.task)?;
        for (i, k) in ["w_l", "w_v", "w_a", "w_cross"].iter().enumerate() {
            self.mix[i] = kv::get_or(m, k, self.mix[i])?;
        }
        self.noise_sigma = kv::get_or(m, "noise_sigma", self.noise_sigma)?;
        self.latent_dim = kv::get_or(m, "latent_dim", self.latent_dim)?;
        self.seed = kv::get_or(m, "seed", self.seed)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)] {
            if n == 0 {
                return Err(Error::Spec(format!("{name} must be at least 1")));
            }
        }
        for (m, (lo, hi)) in Modality::ALL.iter().zip(self.lengths) {
            if lo == 0 || lo > hi {
                return Err(Error::Spec(format!("length range {lo}..{hi} for {m} is empty or starts at 0")));
            }
        }
        if self.latent_dim == 0 {
            return Err(Error::Spec("latent_dim must be positive".into()));
        }
        for (m, d) in Modality::ALL.iter().zip(self.dims) {
            if d < 2 * self.latent_dim {
                return Err(Error::Spec(format!(
                    "modality {m} width {d} cannot hold two latents of width {}",
                    self.latent_dim
                )));
            }
        }
        if self.mix.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Spec("mix weights must be finite and nonnegative".into()));
        }
        if (self.mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Spec("mix weights must sum to 1".into()));
        }
        if self.mix[3] <= 0.0 {
            return Err(Error::Spec("w_cross must be positive".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Spec("noise_sigma must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

fn parse_range(v: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("length range {v:?} is not lo..hi"));
    let (lo, hi) = v.split_once("..").ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

/// Standard normal pair from two uniforms.
fn box_muller(rng: &mut impl Rng) -> (f64, f64) {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    (r * (TAU * u2).cos(), r * (TAU * u2).sin())
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let (a, b) = box_muller(rng);
        out.push(a);
        out.push(b);
    }
    out.truncate(n);
    out
}

fn unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let v = gaussian(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn data_seed(spec: &SynthSpec) -> u64 {
    seed::derive(spec.seed, seed::DATA)
}

/// Dataset-wide fixed draws: embedding bases and label directions.
struct World {
    /// `d_m × 2r` with orthonormal columns, per modality.
    bases: [DMatrix<f64>; 3],
    /// `dirs[k][j]`: direction for term `j` (L, V, A, cross) of score `k`.
    dirs: Vec<[Vec<f64>; 4]>,
    scale: f64,
}

impl World {
    fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(data_seed(spec), "synth.world"));
        let r = spec.latent_dim;
        let bases = spec.dims.map(|d| {
            let g = DMatrix::from_vec(d, 2 * r, gaussian(&mut rng, d * 2 * r));
            g.qr().q()
        });
        let n_scores = spec.task.output_dim();
        let dirs = (0..n_scores)
            .map(|_| [(); 4].map(|_| unit(&mut rng, r)))
            .collect();
        let scale = 1.5 / spec.mix.iter().map(|w| w * w).sum::<f64>().sqrt();
        World { bases, dirs, scale }
    }
}

/// Latent draw behind one sample, kept for oracle checks.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    /// Private latents, L, V, A.
    pub private: [Vec<f64>; 3],
    /// Additive shares of the cross latent, L, V, A.
    pub shares: [Vec<f64>; 3],
    /// Pre-threshold label scores (one, or four for multilabel).
    pub scores: Vec<f64>,
}

impl Latents {
    /// `[z_m, s_m]` for one modality.
    pub fn modality(&self, m: Modality) -> Vec<f64> {
        let mut v = self.private[m.index()].clone();
        v.extend_from_slice(&self.shares[m.index()]);
        v
    }

    pub fn concatenated(&self) -> Vec<f64> {
        Modality::ALL.iter().flat_map(|&m| self.modality(m)).collect()
    }
}

fn quantize(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Maps scores to the stored label.
pub fn label_from_scores(task: Task, scale: f64, scores: &[f64]) -> Label {
    match task {
        Task::Sentiment => Label::Sentiment(quantize((scale * scores[0]).clamp(-3.0, 3.0))),
        Task::Multilabel4 => Label::Multilabel([0, 1, 2, 3].map(|k| scores[k] > 0.0)),
    }
}

fn draw_sample(spec: &SynthSpec, world: &World, index: u64, id: String) -> Result<(MultimodalSample, Latents)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(data_seed(spec), "synth.samples"));
    rng.set_stream(index);
    let r = spec.latent_dim;
    let private = [(); 3].map(|_| gaussian(&mut rng, r));
    let cross = gaussian(&mut rng, r);
    let s_v = gaussian(&mut rng, r);
    let s_a = gaussian(&mut rng, r);
    let s_l: Vec<f64> = (0..r).map(|i| cross[i] - s_v[i] - s_a[i]).collect();
    let shares = [s_l, s_v, s_a];
    let w = spec.mix;
    let scores: Vec<f64> = world
        .dirs
        .iter()
        .map(|d| {
            w[0] * dot(&d[0], &private[0])
                + w[1] * dot(&d[1], &private[1])
                + w[2] * dot(&d[2], &private[2])
                + w[3] * dot(&d[3], &cross)
        })
        .collect();
    let latents = Latents { private, shares, scores };

    let mut seqs = Vec::with_capacity(3);
    for m in Modality::ALL {
        let (lo, hi) = spec.lengths[m.index()];
        let t_len = rng.gen_range(lo..=hi);
        let omega = rng.gen_range(0.2..1.0);
        let phase = rng.gen_range(0.0..TAU);
        let d = spec.dims[m.index()];
        let code = &world.bases[m.index()] * DVector::from_vec(latents.modality(m));
        let noise = gaussian(&mut rng, t_len * d);
        let mut data = Vec::with_capacity(t_len * d);
        for t in 0..t_len {
            let env = 1.0 + 0.5 * (omega * t as f64 + phase).sin();
            for c in 0..d {
                data.push(quantize(env * code[c] + spec.noise_sigma * noise[t * d + c]));
            }
        }
        seqs.push(Tensor::new(vec![t_len, d], data)?);
    }
    let label = label_from_scores(spec.task, world.scale, &latents.scores);
    let [l, v, a]: [Tensor; 3] = seqs.try_into().expect("three modalities");
    Ok((MultimodalSample::new(id, l, v, a, label)?, latents))
}

/// Agreement of least-squares latent oracles with the true labels on the
/// validation split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignalReport {
    /// Oracle fitted on all concatenated latents.
    pub joint: f64,
    /// Oracles fitted on one modality's latents, in L, V, A order.
    pub single: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub train_latents: Vec<Latents>,
    pub val_latents: Vec<Latents>,
    pub signal: SignalReport,
    /// Multiplier from the first score to the sentiment label.
    pub label_scale: f64,
}

/// Least-squares fit of every score on `features`, judged by label agreement.
/// Sentiment compares sign (ignoring zero labels); multilabel compares flags.
fn oracle_agreement(
    task: Task,
    scale: f64,
    train: (&[Vec<f64>], &[Latents]),
    val: (&[Vec<f64>], &[Latents]),
) -> f64 {
    let (xs, ls) = train;
    let p = xs[0].len();
    let x = DMatrix::from_fn(xs.len(), p, |i, j| xs[i][j]);
    let n_scores = ls[0].scores.len();
    let coef: Vec<DVector<f64>> = (0..n_scores)
        .map(|k| {
            let y = DVector::from_fn(ls.len(), |i, _| ls[i].scores[k]);
            x.clone()
                .svd(true, true)
                .solve(&y, 1e-12)
                .expect("svd with both factors solves")
        })
        .collect();
    let (vx, vl) = val;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (f, l) in vx.iter().zip(vl) {
        let fv = DVector::from_row_slice(f);
        let pred: Vec<f64> = coef.iter().map(|c| c.dot(&fv)).collect();
        match (label_from_scores(task, scale, &pred), label_from_scores(task, scale, &l.scores)) {
            (Label::Sentiment(a), Label::Sentiment(b)) => {
                if b != 0.0 {
                    total += 1;
                    hits += usize::from((a >= 0.0) == (b >= 0.0));
                }
            }
            (Label::Multilabel(a), Label::Multilabel(b)) => {
                total += 4;
                hits += a.iter().zip(&b).filter(|(x, y)| x == y).count();
            }
            _ => unreachable!("same task on both sides"),
        }
    }
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let world = World::new(spec);
    let split = |name: &str, offset: usize, n: usize| -> Result<(Dataset, Vec<Latents>)> {
        let mut samples = Vec::with_capacity(n);
        let mut latents = Vec::with_capacity(n);
        for i in 0..n {
            let (s, l) = draw_sample(spec, &world, (offset + i) as u64, format!("{name}-{i:05}"))?;
            samples.push(s);
            latents.push(l);
        }
        Ok((Dataset::new(spec.task, spec.dims, samples)?, latents))
    };
    let (train, train_latents) = split("train", 0, spec.n_train)?;
    let (val, val_latents) = split("val", spec.n_train, spec.n_val)?;
    let (test, _) = split("test", spec.n_train + spec.n_val, spec.n_test)?;

    let features = |ls: &[Latents], f: &dyn Fn(&Latents) -> Vec<f64>| ls.iter().map(f).collect::<Vec<_>>();
    let joint_tr = features(&train_latents, &Latents::concatenated);
    let joint_va = features(&val_latents, &Latents::concatenated);
    let joint = oracle_agreement(
        spec.task,
        world.scale,
        (&joint_tr, &train_latents),
        (&joint_va, &val_latents),
    );
    let single = Modality::ALL.map(|m| {
        let tr = features(&train_latents, &|l: &Latents| l.modality(m));
        let va = features(&val_latents, &|l: &Latents| l.modality(m));
        oracle_agreement(spec.task, world.scale, (&tr, &train_latents), (&va, &val_latents))
    });
    let enough = spec.n_train >= 6 * spec.latent_dim + 1;
    if enough && joint < 1.0 {
        return Err(Error::Spec(format!(
            "planted signal check failed: joint oracle agreement {joint} on validation"
        )));
    }
    Ok(SynthOutput {
        train,
        val,
        test,
        train_latents,
        val_latents,
        signal: SignalReport { joint, single },
        label_scale: world.scale,
    })
}
