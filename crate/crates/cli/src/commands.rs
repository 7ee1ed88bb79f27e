use std::io;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use lmrcbt::data::{generate, mmds, summary_records, Dataset, Task};
use lmrcbt::gradsuite::{self, Scope, UnitReport};
use lmrcbt::io::write_atomic;
use lmrcbt::kv::{self, KvMap};
use lmrcbt::model::{Checkpoint, LmrCbt, ParamLedger, Variant};
use lmrcbt::tensor::gradcheck::GradCheckConfig;
use lmrcbt::tensor::OpKind;
use lmrcbt::train::{evaluate, run_ablation, to_jsonl, train_with, AblationSetup, MetricsReport, LOG_FORMAT_VERSION};
use lmrcbt::{Error, Result};

use crate::config::RunConfig;
use crate::{AblateCmd, EvalCmd, Format, GradcheckCmd, ParamsCmd, ScopeArg, SynthCmd, TrainCmd, GRADCHECK_FAILED};

pub const SUMMARY_FORMAT_VERSION: u32 = 1;
pub const EVAL_FORMAT_VERSION: u32 = 1;
pub const PARAMS_FORMAT_VERSION: u32 = 1;
pub const GRADCHECK_FORMAT_VERSION: u32 = 1;
pub const TABLE_FORMAT_VERSION: u32 = 1;

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.mmds"))
}

fn load(path: &Path, expect: Option<(Task, [usize; 3])>) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("dataset file {} not found", path.display()),
        )));
    }
    mmds::load(path, expect).map_err(|e| match e {
        Error::Io(io) => Error::Io(io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => Error::Schema(format!("{}: {other}", path.display())),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("cannot create {}: {e}", dir.display()))))
}

/// Canonical config text with a format line, kept beside binary and tabular
/// outputs that have no slot for it.
fn write_config_sidecar(dir: &Path, config: &KvMap, version: u32) -> Result<()> {
    let text = format!("# lmrcbt resolved configuration, format {version}\n{}", kv::to_text(config));
    write_atomic(&dir.join("run_config.txt"), text.as_bytes())
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("value serializes"));
}

pub fn synth(c: SynthCmd) -> Result<u8> {
    let mut flags = c.common.overrides(&["synth"])?;
    c.synth.apply(&mut flags);
    let rc = RunConfig::resolve(
        c.common.profile.as_deref().unwrap_or("mosei-like"),
        c.common.config.as_deref(),
        &flags,
    )?;
    rc.synth.validate()?;
    let out = generate(&rc.synth)?;
    let config = rc.echo(&["synth"]);

    create_dir(&c.out)?;
    let sets = [&out.train, &out.val, &out.test];
    for (split, ds) in SPLITS.iter().zip(sets) {
        mmds::save(ds, &split_path(&c.out, split))?;
    }
    let header = json!({
        "record": "header",
        "format_version": SUMMARY_FORMAT_VERSION,
        "mmds_version": mmds::MMDS_VERSION,
        "config": config,
        "signal": out.signal,
        "label_scale": out.label_scale,
    });
    let mut records = vec![header.clone()];
    for (split, ds) in SPLITS.iter().zip(sets) {
        records.extend(summary_records(split, ds));
    }
    write_atomic(&c.out.join("summary.jsonl"), lmrcbt::data::to_jsonl(&records).as_bytes())?;
    write_config_sidecar(&c.out, &config, SUMMARY_FORMAT_VERSION)?;

    match c.format {
        Format::Json => print_json(&header),
        Format::Text => {
            println!(
                "wrote {} / {} / {} samples ({}) to {}",
                out.train.len(),
                out.val.len(),
                out.test.len(),
                rc.synth.task,
                c.out.display()
            );
            println!(
                "oracle agreement on val: joint {:.3}, L {:.3}, V {:.3}, A {:.3}",
                out.signal.joint, out.signal.single[0], out.signal.single[1], out.signal.single[2]
            );
        }
    }
    Ok(0)
}

fn progress(r: &Value) {
    if r["record"] != "epoch" {
        return;
    }
    let acc = r
        .get("acc2")
        .and_then(Value::as_f64)
        .map_or_else(String::new, |a| format!(" acc2 {a:.4}"));
    eprintln!(
        "epoch {:>4} {:<5} loss {:.4}{acc}",
        r["epoch"].as_u64().unwrap_or(0),
        r["split"].as_str().unwrap_or(""),
        r["loss"].as_f64().unwrap_or(f64::NAN)
    );
}

pub fn train(c: TrainCmd) -> Result<u8> {
    let mut flags = c.common.overrides(&["train"])?;
    c.model.apply(&mut flags);
    c.train.apply(&mut flags);
    let mut rc = RunConfig::resolve(c.common.profile.as_deref().unwrap_or("mosei"), c.common.config.as_deref(), &flags)?;
    let train_ds = load(&split_path(&c.data, "train"), None)?;
    let val_ds = load(&split_path(&c.data, "val"), None)?;
    rc.adopt_data(train_ds.task, train_ds.dims)?;
    rc.set_path("data", &c.data);
    let config = rc.echo(&["model", "train"]);

    let model = LmrCbt::new(&rc.model)?;
    let init = model.init_params(rc.train.init_seed())?;
    let mut observe = |r: &Value| {
        if !c.quiet {
            progress(r)
        }
    };
    let outcome = train_with(&model, init, &train_ds, &val_ds, &rc.train, &config, &mut observe)?;

    create_dir(&c.out)?;
    let ckpt_path = c.out.join("checkpoint.lmrc");
    Checkpoint::new(config.clone(), outcome.best).save(&ckpt_path)?;
    write_atomic(&c.out.join("metrics.jsonl"), to_jsonl(&outcome.log).as_bytes())?;
    let mut timing = vec![json!({ "record": "header", "format_version": LOG_FORMAT_VERSION, "config": config })];
    timing.extend(outcome.timing);
    write_atomic(&c.out.join("timing.jsonl"), to_jsonl(&timing).as_bytes())?;
    write_config_sidecar(&c.out, &config, LOG_FORMAT_VERSION)?;

    match c.format {
        Format::Json => print_json(&json!({
            "format_version": LOG_FORMAT_VERSION,
            "config": config,
            "best_epoch": outcome.best_epoch,
            "checkpoint": ckpt_path.display().to_string(),
            "train": outcome.best_train.to_json(),
            "val": outcome.best_val.to_json(),
        })),
        Format::Text => {
            println!("best epoch {} (lowest validation loss)", outcome.best_epoch);
            for (split, r) in [("train", &outcome.best_train), ("val", &outcome.best_val)] {
                for line in r.to_text().lines() {
                    println!("{split} {line}");
                }
            }
            println!("checkpoint {}", ckpt_path.display());
        }
    }
    Ok(0)
}

fn eval_document(config: &KvMap, ds: &Dataset, report: &MetricsReport) -> Value {
    json!({
        "format_version": EVAL_FORMAT_VERSION,
        "config": config,
        "data_hash": ds.content_hash(),
        "metrics": report.to_json(),
    })
}

pub fn eval(c: EvalCmd) -> Result<u8> {
    let ckpt = Checkpoint::load(&c.checkpoint)?;
    let cfg = ckpt.model_config()?;
    let model = LmrCbt::new(&cfg).map_err(|e| Error::Schema(format!("checkpoint config: {e}")))?;
    model.check_store(&ckpt.store)?;
    let path = if c.data.is_dir() { split_path(&c.data, &c.split) } else { c.data.clone() };
    let ds = load(&path, Some((cfg.task, cfg.dims())))?;
    let report = evaluate(&model, &ckpt.store, &ds)?;

    let mut config = ckpt.config.clone();
    config.insert("paths.eval_data".into(), path.display().to_string());
    let doc = eval_document(&config, &ds, &report);
    let out = c.out.unwrap_or_else(|| {
        let stem = path.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
        c.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{stem}.json"))
    });
    let text = serde_json::to_string_pretty(&doc).expect("value serializes");
    write_atomic(&out, format!("{text}\n").as_bytes())?;
    match c.format {
        Format::Json => println!("{text}"),
        Format::Text => print!("{}", report.to_text()),
    }
    Ok(0)
}

fn gradcheck_table(reports: &[UnitReport], tolerance: f64) -> String {
    let mut rows = vec![["scope".to_string(), "unit".into(), "trials".into(), "checked".into(), "worst_rel_err".into(), "result".into()]];
    for r in reports {
        rows.push([
            r.scope.to_string(),
            r.unit.clone(),
            r.trials.to_string(),
            r.checked.to_string(),
            format!("{:.3e}", r.max_rel_error),
            if r.passed { "pass" } else { "FAIL" }.into(),
        ]);
    }
    let mut out = align(&rows);
    let failed = reports.iter().filter(|r| !r.passed).count();
    out.push_str(&format!("{} units, {failed} failed (tolerance {tolerance:.0e})\n", reports.len()));
    out
}

/// Left-aligns the first two columns and right-aligns the rest.
fn align<const N: usize>(rows: &[[String; N]]) -> String {
    let widths: Vec<usize> = (0..N)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, &w))| if i < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn gradcheck(c: GradcheckCmd) -> Result<u8> {
    let fault = match &c.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown op {name:?}")))?),
        None => None,
    };
    let cfg = GradCheckConfig {
        fault,
        ..Default::default()
    };
    let scopes = match c.scope {
        ScopeArg::Ops => vec![Scope::Ops],
        ScopeArg::Layers => vec![Scope::Layers],
        ScopeArg::Model => vec![Scope::Model],
        ScopeArg::All => Scope::ALL.to_vec(),
    };
    let mut reports = Vec::new();
    for s in scopes {
        reports.extend(gradsuite::run(s, &cfg)?);
    }
    let passed = reports.iter().all(|r| r.passed);
    match c.format {
        Format::Json => print_json(&json!({
            "format_version": GRADCHECK_FORMAT_VERSION,
            "config": {
                "step": cfg.step,
                "tolerance": cfg.tolerance,
                "floor": cfg.floor,
                "fault": fault.map(OpKind::name),
            },
            "units": reports,
            "passed": passed,
        })),
        Format::Text => print!("{}", gradcheck_table(&reports, cfg.tolerance)),
    }
    Ok(if passed { 0 } else { GRADCHECK_FAILED })
}

pub fn params(c: ParamsCmd) -> Result<u8> {
    let mut flags = c.common.overrides(&[])?;
    c.model.apply(&mut flags);
    let rc = RunConfig::resolve(c.common.profile.as_deref().unwrap_or("mosei"), c.common.config.as_deref(), &flags)?;
    let ledger = ParamLedger::new(&LmrCbt::new(&rc.model)?);
    let published = rc.profile.published_params_m;
    match c.format {
        Format::Json => print_json(&json!({
            "format_version": PARAMS_FORMAT_VERSION,
            "config": rc.echo(&["model"]),
            "entries": ledger.entries.iter().map(|e| json!({ "path": e.path, "shape": e.shape, "count": e.count })).collect::<Vec<_>>(),
            "groups": ledger.groups,
            "total": ledger.total,
            "published_params_m": published,
        })),
        Format::Text => {
            let mut rows = vec![["path".to_string(), "shape".into(), "count".into()]];
            for e in &ledger.entries {
                let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
                rows.push([e.path.clone(), shape.join("x"), e.count.to_string()]);
            }
            print!("{}", align(&rows));
            println!();
            let mut rows = vec![["module".to_string(), String::new(), "subtotal".into()]];
            for (g, n) in &ledger.groups {
                rows.push([g.clone(), String::new(), n.to_string()]);
            }
            rows.push(["total".into(), String::new(), ledger.total.to_string()]);
            print!("{}", align(&rows));
            println!(
                "total: {:.3}M    published: {published:.2}M  (profile {})",
                ledger.total as f64 / 1e6,
                rc.profile.name
            );
        }
    }
    Ok(0)
}

pub fn ablate(c: AblateCmd) -> Result<u8> {
    if c.common.seed.is_some() {
        return Err(Error::Config("ablate takes its seeds from --seeds".into()));
    }
    if c.seeds.is_empty() {
        return Err(Error::Config("--seeds needs at least one seed".into()));
    }
    let mut flags = c.common.overrides(&[])?;
    c.model.apply(&mut flags);
    c.train.apply(&mut flags);
    let mut rc = RunConfig::resolve(c.common.profile.as_deref().unwrap_or("mosei"), c.common.config.as_deref(), &flags)?;
    let [train_ds, val_ds, test_ds] = SPLITS.map(|s| load(&split_path(&c.data, s), None));
    let (train_ds, val_ds, test_ds) = (train_ds?, val_ds?, test_ds?);
    rc.adopt_data(train_ds.task, train_ds.dims)?;
    rc.set_path("data", &c.data);
    let variants = if c.variants.is_empty() {
        Variant::DEFAULT.to_vec()
    } else {
        c.variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?
    };
    let setup = AblationSetup {
        base: rc.model.clone(),
        train: rc.train.clone(),
        variants,
        seeds: c.seeds.clone(),
    };
    let mut config = rc.echo(&["model", "train"]);
    config.remove("train.seed");
    let seeds: Vec<String> = c.seeds.iter().map(u64::to_string).collect();
    config.insert("ablate.seeds".into(), seeds.join(","));

    create_dir(&c.out)?;
    let table = run_ablation(&setup, &train_ds, &val_ds, &test_ds, Some(&c.out))?;
    let text = table.to_text();
    write_atomic(&c.out.join("table.txt"), text.as_bytes())?;
    write_atomic(&c.out.join("table.csv"), table.to_csv().as_bytes())?;
    let doc = json!({
        "format_version": TABLE_FORMAT_VERSION,
        "config": config,
        "rows": table.rows,
    });
    write_atomic(
        &c.out.join("table.json"),
        serde_json::to_string_pretty(&doc).expect("value serializes").as_bytes(),
    )?;
    write_config_sidecar(&c.out, &config, TABLE_FORMAT_VERSION)?;
    match c.format {
        Format::Json => print_json(&doc),
        Format::Text => print!("{text}"),
    }
    Ok(0)
}
