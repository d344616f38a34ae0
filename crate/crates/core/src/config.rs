//! Run configuration, overrides and named presets.
//!
//! A run config is TOML with the sections `[model]`, `[corpus]`,
//! `[parallel]`, `[train]` and `[analysis]`. Every section rejects unknown
//! keys. Resolution order, later wins: built-in defaults, config file,
//! preset cell, `--set` overrides.

use serde::{Deserialize, Serialize};
pub use toml::Table;
use toml::Value;

use crate::analysis::DEFAULT_THRESHOLD;
use crate::data::CorpusSettings;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::parallel::ParallelPlan;
use crate::trainer::{BalanceMode, SwitchPoint, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub threshold: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSettings,
    pub parallel: ParallelPlan,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.parallel.validate()?;
        self.train.validate(&self.parallel)?;
        if !(self.analysis.threshold > 0.0 && self.analysis.threshold < 1.0) {
            return Err(Error::Config("analysis.threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        Self::deserialize(Value::Table(table)).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn to_table(&self) -> Table {
        match Value::try_from(self).expect("config serializes") {
            Value::Table(t) => t,
            _ => unreachable!("config is a table"),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}


/// Reads a config file as a raw table; syntax errors name the file.
pub fn load_table(path: &std::path::Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
        path: path.to_path_buf(),
        msg: e.message().to_string(),
    })?;
    RunConfig::from_table(table.clone()).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(table)
}

/// Recursively merges `over` into `base`; tables merge, everything else replaces.
pub fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn leaf_paths(t: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if let Value::Table(sub) = v {
            leaf_paths(sub, &path, out);
        }
        out.push(path);
    }
}

/// Resolves `key` to a full dotted path: either already a known path or a
/// bare key that names exactly one entry.
fn resolve_key(defaults: &Table, key: &str) -> Result<String> {
    let mut paths = Vec::new();
    leaf_paths(defaults, "", &mut paths);
    if paths.iter().any(|p| p == key) {
        return Ok(key.to_string());
    }
    let hits: Vec<&String> = paths
        .iter()
        .filter(|p| p.rsplit('.').next() == Some(key) || p.ends_with(&format!(".{key}")))
        .collect();
    match hits.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(Error::Config(format!("unknown config key `{key}`"))),
        many => Err(Error::Config(format!(
            "ambiguous config key `{key}` (matches {})",
            many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `key=value` overrides. Values are read as TOML literals and fall
/// back to plain strings.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<()> {
    let defaults = RunConfig::default().to_table();
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
        let path = resolve_key(&defaults, key.trim())?;
        let mut parts: Vec<&str> = path.split('.').collect();
        let last = parts.pop().expect("non-empty path");
        let mut cur = &mut *table;
        for p in parts {
            cur = match cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
                Value::Table(t) => t,
                _ => return Err(Error::Config(format!("`{p}` in `{path}` is not a section"))),
            };
        }
        cur.insert(last.to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

/// One concrete configuration produced by a preset.
#[derive(Clone, Debug)]
pub struct PresetCell {
    pub name: String,
    pub fragment: &'static str,
}

/// Mode switch placed at a fraction of the final step count.
#[derive(Clone, Copy, Debug)]
pub struct FractionalSwitch {
    pub fraction: f64,
    pub from: BalanceMode,
    pub to: BalanceMode,
}

#[derive(Clone, Debug)]
pub struct Preset {
    pub name: String,
    pub description: &'static str,
    pub cells: Vec<PresetCell>,
    pub switch: Option<FractionalSwitch>,
}

fn cell(name: &str, fragment: &'static str) -> PresetCell {
    PresetCell {
        name: name.to_string(),
        fragment,
    }
}

fn single(name: &str, description: &'static str, fragment: &'static str) -> Preset {
    Preset {
        name: name.to_string(),
        description,
        cells: vec![cell(name, fragment)],
        switch: None,
    }
}

fn switch(name: &str, description: &'static str, fraction: f64, from: BalanceMode, to: BalanceMode) -> Preset {
    Preset {
        name: name.to_string(),
        description,
        cells: vec![cell(name, "")],
        switch: Some(FractionalSwitch { fraction, from, to }),
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "micro-baseline",
    "global-sync",
    "global-buffer",
    "shuffle-ablation",
    "aux-free",
    "mixed-micro-global",
    "switch-10pct",
    "switch-30pct",
    "switch-50pct",
    "switch-reverse-50pct",
    "lbl-weight-sweep",
    "balance-bsz-sweep",
];

pub fn preset(name: &str) -> Result<Preset> {
    use BalanceMode::*;
    Ok(match name {
        "micro-baseline" => single(name, "LBL within each group's micro-batch", "[train]\nbalance_mode = \"micro\"\n"),
        "global-sync" => single(
            name,
            "LBL with frequencies synchronized across all groups",
            "[train]\nbalance_mode = \"global_sync\"\n[parallel]\nsync_scope = \"global\"\n",
        ),
        "global-buffer" => single(
            name,
            "global LBL with the accumulation buffer over 4 micro-steps",
            "[train]\nbalance_mode = \"global_buffer\"\n[parallel]\nsync_scope = \"global\"\nga_steps = 4\nuse_buffer = true\n",
        ),
        "shuffle-ablation" => single(
            name,
            "LBL on a random micro-batch-sized sample of the pooled batch",
            "[train]\nbalance_mode = \"shuffle\"\n",
        ),
        "aux-free" => single(
            name,
            "selection-bias balancing with sigmoid gating, no balance loss",
            "[train]\nbalance_mode = \"aux_free\"\n[model]\ngating = \"sigmoid\"\n[parallel]\nsync_scope = \"global\"\n",
        ),
        "mixed-micro-global" => single(
            name,
            "buffered global LBL plus micro LBL at 1% of its weight",
            "[train]\nbalance_mode = \"mixed(0.00008)\"\n[parallel]\nsync_scope = \"global\"\nga_steps = 4\nuse_buffer = true\n",
        ),
        "switch-10pct" => switch(name, "micro to global at 10% of steps", 0.1, Micro, GlobalSync),
        "switch-30pct" => switch(name, "micro to global at 30% of steps", 0.3, Micro, GlobalSync),
        "switch-50pct" => switch(name, "micro to global at 50% of steps", 0.5, Micro, GlobalSync),
        "switch-reverse-50pct" => switch(name, "global to micro at 50% of steps", 0.5, GlobalSync, Micro),
        "lbl-weight-sweep" => Preset {
            name: name.to_string(),
            description: "global LBL at weights 0.001, 0.004 and 0.008",
            cells: vec![
                cell("w0.001", "[train]\nbalance_mode = \"global_sync\"\n[train.weights]\nlbl_weight = 0.001\n"),
                cell("w0.004", "[train]\nbalance_mode = \"global_sync\"\n[train.weights]\nlbl_weight = 0.004\n"),
                cell("w0.008", "[train]\nbalance_mode = \"global_sync\"\n[train.weights]\nlbl_weight = 0.008\n"),
            ],
            switch: None,
        },
        "balance-bsz-sweep" => Preset {
            name: name.to_string(),
            description: "Balance BSZ 2, 8, 32, 128 and 256 (global) sequences over 16 groups",
            cells: vec![
                cell("bsz-2", "[parallel]\nn_groups = 16\nmicro_batch_size = 2\nga_steps = 8\nsync_scope = \"none\"\nuse_buffer = false\n[train]\nbalance_mode = \"micro\"\n"),
                cell("bsz-8", "[parallel]\nn_groups = 16\nmicro_batch_size = 2\nga_steps = 8\nsync_scope = \"subgroup(4)\"\nuse_buffer = false\n[train]\nbalance_mode = \"global_sync\"\n"),
                cell("bsz-32", "[parallel]\nn_groups = 16\nmicro_batch_size = 2\nga_steps = 8\nsync_scope = \"global\"\nuse_buffer = false\n[train]\nbalance_mode = \"global_sync\"\n"),
                cell("bsz-128", "[parallel]\nn_groups = 16\nmicro_batch_size = 2\nga_steps = 8\nsync_scope = \"subgroup(8)\"\nuse_buffer = true\n[train]\nbalance_mode = \"global_buffer\"\n"),
                cell("bsz-global", "[parallel]\nn_groups = 16\nmicro_batch_size = 2\nga_steps = 8\nsync_scope = \"global\"\nuse_buffer = true\n[train]\nbalance_mode = \"global_buffer\"\n"),
            ],
            switch: None,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (available: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    })
}

/// Resolves defaults, an optional file table, an optional preset and
/// overrides into one config per preset cell.
pub fn resolve(file: Option<&Table>, preset_name: Option<&str>, overrides: &[String]) -> Result<Vec<(String, RunConfig)>> {
    let mut base = RunConfig::default().to_table();
    if let Some(f) = file {
        // validate the file on its own so unknown keys are reported against it
        RunConfig::from_table(f.clone())?;
        merge(&mut base, f);
    }
    let (cells, sw) = match preset_name {
        Some(p) => {
            let p = preset(p)?;
            (p.cells, p.switch)
        }
        None => (vec![cell("run", "")], None),
    };
    let user_sets_schedule = overrides.iter().any(|o| o.trim_start().starts_with("switch_schedule") || o.contains(".switch_schedule"));
    cells
        .into_iter()
        .map(|c| {
            let mut t = base.clone();
            let frag: Table = c.fragment.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            merge(&mut t, &frag);
            apply_overrides(&mut t, overrides)?;
            let mut cfg = RunConfig::from_table(t)?;
            if let (Some(s), false) = (sw, user_sets_schedule) {
                let ga = cfg.parallel.ga_steps.max(1);
                let windows = cfg.train.steps / ga;
                let at = ((windows as f64 * s.fraction).round() as usize).max(1) * ga;
                cfg.train.balance_mode = s.from;
                cfg.train.switch_schedule = vec![SwitchPoint { step: at, mode: s.to }];
            }
            cfg.validate()?;
            Ok((c.name, cfg))
        })
        .collect()
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_path: Option<String>,
    pub seed: u64,
    pub preset: Option<String>,
    pub cell: Option<String>,
    pub overrides: Vec<String>,
    pub output_dir: String,
    pub tool_version: String,
}

impl RunManifest {
    pub fn for_library(cfg: &RunConfig, output_dir: &std::path::Path) -> Self {
        Self {
            config_path: None,
            seed: cfg.train.seed,
            preset: None,
            cell: None,
            overrides: Vec::new(),
            output_dir: output_dir.display().to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::SyncScope;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let e = RunConfig::from_toml("[model]\nn_expert = 4\n").unwrap_err();
        assert!(e.to_string().contains("n_expert"), "{e}");
        assert!(RunConfig::from_toml("[modle]\n").is_err());
    }

    #[test]
    fn bare_and_dotted_overrides() {
        let mut t = RunConfig::default().to_table();
        apply_overrides(
            &mut t,
            &["balance_mode=global_buffer".into(), "parallel.ga_steps=4".into(), "lbl_weight=0.004".into()],
        )
        .unwrap();
        let c = RunConfig::from_table(t).unwrap();
        assert_eq!(c.train.balance_mode, BalanceMode::GlobalBuffer);
        assert_eq!(c.parallel.ga_steps, 4);
        assert_eq!(c.train.weights.lbl_weight, 0.004);
        let mut t = RunConfig::default().to_table();
        assert!(apply_overrides(&mut t, &["seed=1".into()]).is_err(), "seed is ambiguous");
        assert!(apply_overrides(&mut t, &["nonsense=1".into()]).is_err());
        apply_overrides(&mut t, &["train.seed=3".into()]).unwrap();
    }

    #[test]
    fn invalid_top_k_names_constraint() {
        let e = resolve(None, None, &["top_k=20".into()]).unwrap_err();
        assert!(e.is_validation());
        assert!(e.to_string().contains("top_k"), "{e}");
    }

    #[test]
    fn every_preset_resolves() {
        for name in PRESET_NAMES {
            let cells = resolve(None, Some(name), &[]).unwrap();
            assert!(!cells.is_empty(), "{name}");
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn bsz_sweep_cells() {
        let cells = resolve(None, Some("balance-bsz-sweep"), &["train.seed=7".into()]).unwrap();
        let bsz: Vec<usize> = cells.iter().map(|(_, c)| c.parallel.balance_bsz()).collect();
        assert_eq!(bsz, vec![2, 8, 32, 128, 256]);
        assert!(cells.iter().all(|(_, c)| c.train.seed == 7));
        assert_eq!(cells[1].1.parallel.sync_scope, SyncScope::Subgroup(4));
    }

    #[test]
    fn switch_presets_follow_step_count() {
        let cells = resolve(None, Some("switch-30pct"), &["steps=1000".into()]).unwrap();
        let c = &cells[0].1;
        assert_eq!(c.train.balance_mode, BalanceMode::Micro);
        assert_eq!(c.train.switch_schedule, vec![SwitchPoint { step: 300, mode: BalanceMode::GlobalSync }]);
        let rev = resolve(None, Some("switch-reverse-50pct"), &[]).unwrap();
        assert_eq!(rev[0].1.train.balance_mode, BalanceMode::GlobalSync);
        assert_eq!(rev[0].1.train.switch_schedule[0].step, 2500);
    }

    #[test]
    fn file_then_preset_then_overrides() {
        let file: Table = "[train]\nlr = 0.01\nbalance_mode = \"shuffle\"\n".parse().unwrap();
        let c = &resolve(Some(&file), Some("micro-baseline"), &["lr=0.02".into()]).unwrap()[0].1;
        assert_eq!(c.train.balance_mode, BalanceMode::Micro);
        assert_eq!(c.train.lr, 0.02);
        let c = &resolve(Some(&file), None, &[]).unwrap()[0].1;
        assert_eq!(c.train.lr, 0.01);
    }
}
