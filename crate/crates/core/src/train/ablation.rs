use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::trainer::{evaluate, pool, train, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kv::{self, KvMap};
use crate::model::{make_ablation, param_count, LmrCbt, ModelConfig, Variant};

pub const ABLATION_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub acc7: Option<f64>,
    pub acc2: f64,
    pub f1: f64,
    pub val_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

/// Test-split results of one ablation arm over all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub format_version: u32,
    pub variant: String,
    pub label: String,
    pub params: usize,
    pub config: KvMap,
    pub data_hash: String,
    pub runs: Vec<SeedRun>,
    pub acc7: Option<MeanStd>,
    pub acc2: MeanStd,
    pub f1: MeanStd,
}

impl VariantResult {
    pub fn seeds(&self) -> Vec<u64> {
        self.runs.iter().map(|r| r.seed).collect()
    }
}

#[derive(Clone, Debug)]
pub struct AblationSetup {
    pub base: ModelConfig,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<VariantResult>,
}

fn data_hash(train: &Dataset, val: &Dataset, test: &Dataset) -> String {
    format!("{}:{}:{}", train.content_hash(), val.content_hash(), test.content_hash())
}

fn variant_config(setup: &AblationSetup, cfg: &ModelConfig) -> KvMap {
    let mut m = kv::prefixed(&cfg.to_kv(), "model");
    let mut t = setup.train.clone();
    t.seed = 0;
    let mut tk = t.to_kv();
    tk.remove("seed");
    m.extend(kv::prefixed(&tk, "train"));
    m
}

fn run_seed(cfg: &ModelConfig, tc: &TrainConfig, config: &KvMap, data: [&Dataset; 3]) -> Result<SeedRun> {
    let [train_ds, val_ds, test_ds] = data;
    let model = LmrCbt::new(cfg)?;
    let init = model.init_params(tc.init_seed())?;
    let out = train(&model, init, train_ds, val_ds, tc, config)?;
    let test = evaluate(&model, &out.best, test_ds)?;
    Ok(SeedRun {
        seed: tc.seed,
        best_epoch: out.best_epoch,
        acc7: test.acc7,
        acc2: test.headline_acc(),
        f1: test.headline_f1(),
        val_loss: out.best_val.loss,
    })
}

fn result_path(dir: &Path, v: Variant) -> std::path::PathBuf {
    dir.join(format!("variant_{}.json", v.slug()))
}

/// Trains every arm with every seed and evaluates the best-validation
/// parameters on the test split.
///
/// Arms with identical configurations are trained once. With `out_dir`,
/// each arm's result is written atomically as soon as its seeds finish, and
/// an existing result with the same configuration, seeds and data is reused
/// instead of retrained.
pub fn run_ablation(
    setup: &AblationSetup,
    train_ds: &Dataset,
    val_ds: &Dataset,
    test_ds: &Dataset,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if setup.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if setup.variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant".into()));
    }
    let hash = data_hash(train_ds, val_ds, test_ds);
    let mut unique: Vec<(ModelConfig, Vec<Variant>)> = Vec::new();
    for &v in &setup.variants {
        let cfg = make_ablation(&setup.base, v);
        cfg.validate()?;
        match unique.iter_mut().find(|(c, _)| *c == cfg) {
            Some((_, vs)) => vs.push(v),
            None => unique.push((cfg, vec![v])),
        }
    }

    let reuse = |v: Variant, config: &KvMap| -> Option<VariantResult> {
        let dir = out_dir?;
        let text = std::fs::read_to_string(result_path(dir, v)).ok()?;
        let r: VariantResult = serde_json::from_str(&text).ok()?;
        (r.format_version == ABLATION_FORMAT_VERSION
            && &r.config == config
            && r.data_hash == hash
            && r.seeds() == setup.seeds)
            .then_some(r)
    };

    let results: Vec<Vec<VariantResult>> = pool().install(|| {
        unique
            .par_iter()
            .map(|(cfg, variants)| -> Result<Vec<VariantResult>> {
                let config = variant_config(setup, cfg);
                if let Some(done) = variants.iter().map(|&v| reuse(v, &config)).collect::<Option<Vec<_>>>() {
                    return Ok(done);
                }
                let runs = setup
                    .seeds
                    .par_iter()
                    .map(|&seed| {
                        let tc = TrainConfig {
                            seed,
                            ..setup.train.clone()
                        };
                        run_seed(cfg, &tc, &config, [train_ds, val_ds, test_ds])
                    })
                    .collect::<Result<Vec<_>>>()?;
                let params = param_count(cfg)?;
                let acc7: Option<Vec<f64>> = runs.iter().map(|r| r.acc7).collect();
                let acc2: Vec<f64> = runs.iter().map(|r| r.acc2).collect();
                let f1: Vec<f64> = runs.iter().map(|r| r.f1).collect();
                let mut out = Vec::new();
                for &v in variants {
                    let r = VariantResult {
                        format_version: ABLATION_FORMAT_VERSION,
                        variant: v.slug().into(),
                        label: v.label().into(),
                        params,
                        config: config.clone(),
                        data_hash: hash.clone(),
                        runs: runs.clone(),
                        acc7: acc7.as_deref().map(MeanStd::of),
                        acc2: MeanStd::of(&acc2),
                        f1: MeanStd::of(&f1),
                    };
                    if let Some(dir) = out_dir {
                        let json = serde_json::to_string_pretty(&r).expect("result serializes");
                        write_atomic(&result_path(dir, v), json.as_bytes())?;
                    }
                    out.push(r);
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut rows: Vec<VariantResult> = results.into_iter().flatten().collect();
    let order = |slug: &str| setup.variants.iter().position(|v| v.slug() == slug);
    rows.sort_by_key(|r| order(&r.variant));
    Ok(AblationTable { rows })
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&VariantResult> {
        self.rows.iter().find(|r| r.variant == v.slug())
    }

    fn cell(m: Option<MeanStd>, single: bool) -> String {
        match m {
            None => "-".into(),
            Some(m) if single => format!("{:.1}", 100.0 * m.mean),
            Some(m) => format!("{:.1}±{:.1}", 100.0 * m.mean, 100.0 * m.std),
        }
    }

    /// Aligned text table: variant, parameters in millions, Acc7, Acc2, F1.
    pub fn to_text(&self) -> String {
        let single = self.rows.first().map_or(false, |r| r.runs.len() == 1);
        let mut lines = vec![[
            "Variant".to_string(),
            "#Params(M)".into(),
            "Acc7".into(),
            "Acc2".into(),
            "F1".into(),
        ]];
        for r in &self.rows {
            lines.push([
                r.label.clone(),
                format!("{:.4}", r.params as f64 / 1e6),
                Self::cell(r.acc7, single),
                Self::cell(Some(r.acc2), single),
                Self::cell(Some(r.f1), single),
            ]);
        }
        let widths: Vec<usize> = (0..5)
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, w))| {
                    let pad = w - s.chars().count();
                    if i == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        let seeds = self.rows.first().map(|r| r.seeds()).unwrap_or_default();
        if single {
            out.push_str(&format!("single run (seed {}), test split\n", seeds[0]));
        } else {
            let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
            out.push_str(&format!("mean±std over seeds {}, test split\n", list.join(",")));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = ["variant", "label", "params", "acc7_mean", "acc7_std", "acc2_mean", "acc2_std", "f1_mean", "f1_std", "seeds"];
        w.write_record(header).expect("in-memory write");
        for r in &self.rows {
            let (a7m, a7s) = r.acc7.map_or((String::new(), String::new()), |m| (m.mean.to_string(), m.std.to_string()));
            let seeds: Vec<String> = r.seeds().iter().map(u64::to_string).collect();
            w.write_record([
                r.variant.clone(),
                r.label.clone(),
                r.params.to_string(),
                a7m,
                a7s,
                r.acc2.mean.to_string(),
                r.acc2.std.to_string(),
                r.f1.mean.to_string(),
                r.f1.std.to_string(),
                seeds.join(";"),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is UTF-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[0.7]).std, 0.0);
    }
}
