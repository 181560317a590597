//! Run configuration: built-in profile defaults, then a JSON file, then flags.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use rrlink_core::trainer::{model_problems, ModelConfig, TrainConfig};
use rrlink_core::{Error, Result};

pub const SEED_ENV: &str = "RRLINK_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small model and K = 32, sized for a workstation.
    Desk,
    /// K = 120 and thr = 0.03 as published.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kb: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    /// Sentence length limit; longer documents are split into passages.
    pub t_t: usize,
    /// Description length.
    pub t_e: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kb: None,
            train: None,
            dev: None,
            t_t: 32,
            t_e: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub precision: Precision,
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut train = TrainConfig::default();
        if profile == Profile::Desk {
            train.k = 32;
        }
        RunConfig {
            profile,
            precision: Precision::F64,
            threads: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train,
        }
    }

    /// Every problem with the merged values, including the sequence budget.
    pub fn problems(&self) -> Vec<String> {
        let mut p = model_problems(&self.model);
        p.extend(self.train.problems(None));
        if self.data.t_t == 0 {
            p.push("data.t_t must be positive".into());
        }
        if self.data.t_e == 0 {
            p.push("data.t_e must be positive".into());
        }
        if self.data.t_t + self.data.t_e + 2 > self.model.max_len {
            p.push(format!(
                "model.max_len = {} is shorter than data.t_t + data.t_e + 2 = {}",
                self.model.max_len,
                self.data.t_t + self.data.t_e + 2
            ));
        }
        if self.threads == Some(0) {
            p.push("threads must be positive".into());
        }
        p
    }

    pub fn kb_path(&self) -> Result<&Path> {
        self.data
            .kb
            .as_deref()
            .ok_or_else(|| Error::Config("data.kb is not set".into()))
    }

    pub fn train_path(&self) -> Result<&Path> {
        self.data
            .train
            .as_deref()
            .ok_or_else(|| Error::Config("data.train is not set".into()))
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub precision: Option<Precision>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub extra: Vec<(String, Value)>,
}

fn unknown_keys(defaults: &Value, given: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(d), Value::Object(g)) = (defaults, given) else { return };
    for (k, v) in g {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match d.get(k) {
            None => out.push(path),
            Some(dv) => unknown_keys(dv, v, &path, out),
        }
    }
}

fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k.as_str()) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn set_path(root: &mut Value, path: &str, v: Value) {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let map = cur.as_object_mut().expect("object");
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut().expect("object").insert(parts[parts.len() - 1].to_string(), v);
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

/// Merges defaults, the optional file and the flags, then validates.
///
/// Relative data paths in the file are taken relative to the file. All unknown
/// keys and all invalid values are reported in one error.
pub fn load(file: Option<&Path>, flags: &Overrides) -> Result<RunConfig> {
    let file_value: Option<Value> = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if !v.is_object() {
                return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
            }
            Some(v)
        }
        None => None,
    };
    let profile = match flags.profile {
        Some(p) => p,
        None => match file_value.as_ref().and_then(|v| v.get("profile")) {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
            None => Profile::Desk,
        },
    };
    let defaults = serde_json::to_value(RunConfig::for_profile(profile))?;

    let mut unknown = Vec::new();
    if let Some(v) = &file_value {
        unknown_keys(&defaults, v, "", &mut unknown);
    }
    let mut extras = Value::Object(Map::new());
    for (k, v) in &flags.extra {
        set_path(&mut extras, k, v.clone());
    }
    unknown_keys(&defaults, &extras, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
    }

    let mut merged = defaults;
    if let Some(v) = file_value {
        overlay(&mut merged, v);
    }
    overlay(&mut merged, extras);
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(s) => Some(
            s.parse::<u64>()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    if let Some(seed) = flags.seed.or(env_seed) {
        set_path(&mut merged, "train.seed", seed.into());
    }
    if let Some(mode) = &flags.mode {
        set_path(&mut merged, "train.mode", mode.clone().into());
    }
    if let Some(p) = flags.precision {
        set_path(&mut merged, "precision", serde_json::to_value(p)?);
    }
    if let Some(t) = flags.threads {
        set_path(&mut merged, "threads", t.into());
    }
    set_path(&mut merged, "profile", serde_json::to_value(profile)?);

    let mut type_errors = Vec::new();
    if let Value::Object(map) = &merged {
        for (section, v) in map {
            let r = match section.as_str() {
                "profile" => serde_json::from_value::<Profile>(v.clone()).map(drop),
                "precision" => serde_json::from_value::<Precision>(v.clone()).map(drop),
                "threads" => serde_json::from_value::<Option<usize>>(v.clone()).map(drop),
                "data" => serde_json::from_value::<DataConfig>(v.clone()).map(drop),
                "model" => serde_json::from_value::<ModelConfig>(v.clone()).map(drop),
                "train" => field_errors::<TrainConfig>(v, "train", &mut type_errors),
                _ => Ok(()),
            };
            if let Err(e) = r {
                type_errors.push(format!("{section}: {e}"));
            }
        }
    }
    if !type_errors.is_empty() {
        return Err(Error::Config(type_errors.join("; ")));
    }
    let mut config: RunConfig = serde_json::from_value(merged)?;
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    if let Some(path) = file {
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut config.data.kb);
        resolve(base, &mut config.data.train);
        resolve(base, &mut config.data.dev);
    }
    Ok(config)
}

/// Checks each field of a section alone so that every bad field is named.
fn field_errors<T>(v: &Value, section: &str, out: &mut Vec<String>) -> std::result::Result<(), serde_json::Error>
where
    T: serde::de::DeserializeOwned + Serialize + Default,
{
    let Value::Object(map) = v else {
        return serde_json::from_value::<T>(v.clone()).map(drop);
    };
    let base = serde_json::to_value(T::default())?;
    for (k, fv) in map {
        let mut probe = base.clone();
        probe.as_object_mut().expect("object").insert(k.clone(), fv.clone());
        if let Err(e) = serde_json::from_value::<T>(probe) {
            out.push(format!("{section}.{k}: {e}"));
        }
    }
    Ok(())
}

/// Parses `key=value` overrides; the value is JSON, or a bare string otherwise.
pub fn parse_set(s: &str) -> std::result::Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}
