//! Resolution of the run configuration: profile defaults, then a config
//! file, then command-line flags.

use std::collections::BTreeSet;
use std::path::Path;

use lmrcbt::data::SynthSpec;
use lmrcbt::kv::{self, KvMap};
use lmrcbt::model::ModelConfig;
use lmrcbt::profiles::{profile, Profile};
use lmrcbt::train::TrainConfig;
use lmrcbt::{Error, Result};

const SECTIONS: [&str; 3] = ["model", "train", "synth"];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub paths: KvMap,
    /// Keys set by the config file or a flag.
    explicit: BTreeSet<String>,
}

impl RunConfig {
    pub fn resolve(profile_name: &str, file: Option<&Path>, flags: &KvMap) -> Result<Self> {
        let p = profile(profile_name)?;
        let mut synth = p.synth.clone().unwrap_or_else(|| SynthSpec {
            dims: p.model.dims(),
            ..SynthSpec::small(p.model.task, 0)
        });
        synth.task = p.model.task;

        let mut merged = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
                kv::parse(&text)?
            }
            None => KvMap::new(),
        };
        merged.extend(flags.iter().map(|(k, v)| (k.clone(), v.clone())));
        if let Some(k) = merged.keys().find(|k| !SECTIONS.iter().any(|s| k.starts_with(&format!("{s}.")))) {
            return Err(Error::Config(format!("key {k} is outside the model., train. and synth. sections")));
        }

        let mut model = p.model.clone();
        model.apply_kv(&kv::section(&merged, "model"))?;
        let mut train = p.train.clone();
        train.apply_kv(&kv::section(&merged, "train"))?;
        synth.apply_kv(&kv::section(&merged, "synth"))?;
        model.validate()?;
        train.validate()?;
        Ok(RunConfig {
            profile: p,
            model,
            train,
            synth,
            paths: KvMap::new(),
            explicit: merged.into_keys().collect(),
        })
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Takes the feature widths and task of a dataset unless they were set
    /// explicitly, in which case a mismatch surfaces when the data is checked.
    pub fn adopt_data(&mut self, task: lmrcbt::data::Task, dims: [usize; 3]) -> Result<()> {
        if !["model.d_l", "model.d_v", "model.d_a"].iter().any(|k| self.is_explicit(k)) {
            self.model.set_dims(dims);
        }
        if !self.is_explicit("model.task") && !self.is_explicit("model.d_out") && task != self.model.task {
            return Err(Error::Schema(format!(
                "dataset task {task} does not match profile {} ({})",
                self.profile.name, self.model.task
            )));
        }
        self.model.validate()
    }

    pub fn set_path(&mut self, key: &str, path: &Path) {
        self.paths.insert(key.to_string(), path.display().to_string());
    }

    /// Resolved configuration restricted to the given sections, plus the
    /// profile name and any recorded paths.
    pub fn echo(&self, sections: &[&str]) -> KvMap {
        let mut out = KvMap::new();
        out.insert("profile".into(), self.profile.name.into());
        for s in sections {
            let m = match *s {
                "model" => self.model.to_kv(),
                "train" => self.train.to_kv(),
                "synth" => self.synth.to_kv(),
                other => unreachable!("unknown section {other}"),
            };
            out.extend(kv::prefixed(&m, s));
        }
        out.extend(kv::prefixed(&self.paths, "paths"));
        out
    }
}
