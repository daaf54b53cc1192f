//! Flat `section.key = value` run configuration.
//!
//! Every known key has a default. A config file may set any subset, and
//! `--section.key value` flags override both. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bitrec::dataio::{SplitSpec, SyntheticConfig};
use bitrec::hba::IntensitySplit;
use bitrec::model::ModelConfig;
use bitrec::trainer::TrainConfig;
use bitrec::tre::TreComponents;

const DEFAULTS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("run.out", "out"),
    ("run.checkpoint", ""),
    ("run.variants", "full,no_hba,no_tre"),
    ("run.masks", ""),
    ("run.top_k", "10"),
    ("run.user", ""),
    ("data.dataset", ""),
    ("data.catalog", ""),
    ("data.schema", "view:0,click:0,cart:1,purchase:1"),
    ("split.min_length", "3"),
    ("eval.cutoffs", "10,50"),
    ("model.d", "128"),
    ("model.heads", "2"),
    ("model.layers", "2"),
    ("model.max_len", "50"),
    ("model.dropout", "0"),
    ("model.init_std", "0.02"),
    ("model.enable_hba", "true"),
    ("model.enable_tre", "true"),
    ("model.intensity_split", "full"),
    ("model.tre.behavior_transition", "true"),
    ("model.tre.temporal", "true"),
    ("model.tre.item_consistency", "true"),
    ("model.tre.context_matching", "true"),
    ("train.learning_rate", "0.0002"),
    ("train.epochs", "10"),
    ("train.batch_size", "64"),
    ("train.weight_decay", "0.01"),
    ("train.warmup_fraction", "0.1"),
    ("train.negatives", "128"),
    ("train.validate", "true"),
    ("synthetic.users", "1000"),
    ("synthetic.items", "500"),
    ("synthetic.categories", "20"),
    ("synthetic.mean_length", "20"),
    ("synthetic.p_convert", "0.8"),
    ("synthetic.conversion_window", "3"),
    ("synthetic.mean_gap", "3600"),
    ("gradcheck.coordinates", "200"),
    ("gradcheck.step", "0.001"),
];

/// Resolved key/value map.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => bail!("unknown config key `{key}`"),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').with_context(|| format!("{origin}:{}: expected `key = value`", n + 1))?;
            self.set(k.trim(), v).with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// One `key = value` line per key, sorted; reads back to the same config.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(key);
        raw.parse().map_err(|e| anyhow::anyhow!("config key `{key}`: cannot parse `{raw}`: {e}"))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let s = self.str(key);
        (!s.is_empty()).then(|| PathBuf::from(s))
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.str(key).split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("run.seed")
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let split = self.str("model.intensity_split");
        let intensity_split = IntensitySplit::parse(split)
            .with_context(|| format!("model.intensity_split `{split}` is not one of full, none, purchase_only"))?;
        let cfg = ModelConfig {
            d: self.parse("model.d")?,
            heads: self.parse("model.heads")?,
            layers: self.parse("model.layers")?,
            max_len: self.parse("model.max_len")?,
            dropout: self.parse("model.dropout")?,
            init_std: self.parse("model.init_std")?,
            enable_hba: self.parse("model.enable_hba")?,
            enable_tre: self.parse("model.enable_tre")?,
            intensity_split,
            tre_components: TreComponents {
                behavior_transition: self.parse("model.tre.behavior_transition")?,
                temporal: self.parse("model.tre.temporal")?,
                item_consistency: self.parse("model.tre.item_consistency")?,
                context_matching: self.parse("model.tre.context_matching")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: self.parse("train.learning_rate")?,
            epochs: self.parse("train.epochs")?,
            batch_size: self.parse("train.batch_size")?,
            weight_decay: self.parse("train.weight_decay")?,
            warmup_fraction: self.parse("train.warmup_fraction")?,
            negatives: self.parse("train.negatives")?,
            validate: self.parse("train.validate")?,
            rng_seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split(&self) -> Result<SplitSpec> {
        Ok(SplitSpec { min_length: self.parse("split.min_length")? })
    }

    pub fn cutoffs(&self) -> Result<Vec<usize>> {
        let out = self
            .list("eval.cutoffs")
            .iter()
            .map(|s| s.parse::<usize>().with_context(|| format!("eval.cutoffs entry `{s}`")))
            .collect::<Result<Vec<_>>>()?;
        if out.is_empty() || out.contains(&0) {
            bail!("eval.cutoffs must list positive integers");
        }
        Ok(out)
    }

    pub fn synthetic(&self, seed: u64) -> Result<SyntheticConfig> {
        let cfg = SyntheticConfig {
            user_count: self.parse("synthetic.users")?,
            item_count: self.parse("synthetic.items")?,
            category_count: self.parse("synthetic.categories")?,
            mean_sequence_length: self.parse("synthetic.mean_length")?,
            p_convert: self.parse("synthetic.p_convert")?,
            conversion_window: self.parse("synthetic.conversion_window")?,
            mean_inter_event_gap: self.parse("synthetic.mean_gap")?,
            rng_seed: seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
