//! Declarative experiment configuration.
//!
//! Configs are flat `key = value` text files; list values are
//! comma-separated, `#` starts a comment. Every emitted CSV embeds the hash
//! of the canonical config so runs are auditable. Learning rates and epoch
//! counts may be set to `auto`, which resolves per prediction horizon.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use ape_core::{DistributionSpec, HorizonSpec, ModelDims, RouterKind, TrainConfig};

/// Everything a run needs, resolved from defaults plus an optional file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train_spec: String,
    pub eval_spec: String,
    pub router_kinds: Vec<RouterKind>,
    pub t_history: usize,
    pub t_future: usize,
    pub dt: f64,
    pub n_train_scenes: usize,
    pub n_eval_scenes: usize,
    /// `None` resolves per horizon.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    /// `None` resolves per horizon.
    pub lr_predictor: Option<f64>,
    /// `None` resolves per horizon.
    pub lr_router: Option<f64>,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub k_modes: usize,
    pub embed_width: usize,
    pub n_bootstrap: usize,
    pub tol_lateral: f64,
    pub tol_longitudinal: f64,
    pub ood_ratios: Vec<f64>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train_spec: "family_a".into(),
            eval_spec: "family_b".into(),
            router_kinds: RouterKind::ALL.to_vec(),
            t_history: 10,
            t_future: 20,
            dt: 0.1,
            n_train_scenes: 768,
            n_eval_scenes: 1024,
            epochs: None,
            batch_size: 8,
            lr_predictor: None,
            lr_router: None,
            lr_decay_factor: 0.5,
            lr_decay_every: 2,
            k_modes: 6,
            embed_width: 64,
            n_bootstrap: 3,
            tol_lateral: 1.0,
            tol_longitudinal: 2.0,
            ood_ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            horizons: vec![1, 10, 20, 40, 80],
            seeds: vec![1, 2, 3],
        }
    }
}

impl ExperimentConfig {
    /// Parse a flat key-value config; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`", lineno + 1))?;
            let key = key.trim();
            let value = value.trim();
            config
                .set(key, value)
                .with_context(|| format!("line {}: key `{key}`", lineno + 1))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| anyhow::anyhow!("bad number `{value}`: {e}"))
        }
        fn opt_num<T: std::str::FromStr>(value: &str) -> Result<Option<T>>
        where
            T::Err: std::fmt::Display,
        {
            if value == "auto" {
                Ok(None)
            } else {
                num(value).map(Some)
            }
        }
        fn list<T: std::str::FromStr>(value: &str) -> Result<Vec<T>>
        where
            T::Err: std::fmt::Display,
        {
            value
                .split(',')
                .map(|item| num(item.trim()))
                .collect::<Result<Vec<T>>>()
        }

        match key {
            "train_spec" => self.train_spec = value.to_string(),
            "eval_spec" => self.eval_spec = value.to_string(),
            "router_kinds" => {
                self.router_kinds = value
                    .split(',')
                    .map(|name| RouterKind::from_name(name.trim()).map_err(anyhow::Error::from))
                    .collect::<Result<Vec<_>>>()?;
            }
            "t_history" => self.t_history = num(value)?,
            "t_future" => self.t_future = num(value)?,
            "dt" => self.dt = num(value)?,
            "n_train_scenes" => self.n_train_scenes = num(value)?,
            "n_eval_scenes" => self.n_eval_scenes = num(value)?,
            "epochs" => self.epochs = opt_num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "lr_predictor" => self.lr_predictor = opt_num(value)?,
            "lr_router" => self.lr_router = opt_num(value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(value)?,
            "lr_decay_every" => self.lr_decay_every = num(value)?,
            "k_modes" => self.k_modes = num(value)?,
            "embed_width" => self.embed_width = num(value)?,
            "n_bootstrap" => self.n_bootstrap = num(value)?,
            "tol_lateral" => self.tol_lateral = num(value)?,
            "tol_longitudinal" => self.tol_longitudinal = num(value)?,
            "ood_ratios" => self.ood_ratios = list(value)?,
            "horizons" => self.horizons = list(value)?,
            "seeds" => self.seeds = list(value)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if self.ood_ratios.is_empty() {
            bail!("ood_ratios must not be empty");
        }
        if self.horizons.is_empty() {
            bail!("horizons must not be empty");
        }
        if self.router_kinds.is_empty() {
            bail!("router_kinds must not be empty");
        }
        // Referenced spec names must resolve.
        let horizon = self.horizon()?;
        DistributionSpec::preset(&self.train_spec, horizon)?;
        DistributionSpec::preset(&self.eval_spec, horizon)?;
        Ok(())
    }

    pub fn horizon(&self) -> Result<HorizonSpec> {
        Ok(HorizonSpec::new(self.t_history, self.t_future, self.dt)?)
    }

    /// Default seed: the first of the configured list.
    pub fn primary_seed(&self) -> u64 {
        self.seeds[0]
    }

    /// Copy of this config at another prediction horizon.
    pub fn at_horizon(&self, t_future: usize) -> Self {
        Self {
            t_future,
            ..self.clone()
        }
    }

    /// Predictor learning rate: explicit, or `0.24 / t_future^2` capped at
    /// 0.15 (plain gradient descent is stability-bound by the horizon).
    pub fn effective_lr_predictor(&self) -> f64 {
        self.lr_predictor
            .unwrap_or_else(|| (0.24 / (self.t_future as f64).powi(2)).min(0.15))
    }

    /// Router learning rate: explicit, or a horizon-banded default (ranking
    /// labels carry more usable signal at longer horizons).
    pub fn effective_lr_router(&self) -> f64 {
        self.lr_router.unwrap_or(if self.t_future <= 12 {
            3e-2
        } else if self.t_future <= 40 {
            2e-1
        } else {
            3e-1
        })
    }

    /// Epoch count: explicit, or 10 (12 beyond 40 future steps).
    pub fn effective_epochs(&self) -> usize {
        self.epochs
            .unwrap_or(if self.t_future > 40 { 12 } else { 10 })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr_predictor: self.effective_lr_predictor(),
            lr_router: self.effective_lr_router(),
            epochs: self.effective_epochs(),
            batch_size: self.batch_size,
            seed,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            k_modes: self.k_modes,
            embed_width: self.embed_width,
            ..ModelDims::default()
        }
    }

    /// Canonical `key = value` rendering (sorted keys, resolved values).
    pub fn canonical(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("train_spec", self.train_spec.clone());
        map.insert("eval_spec", self.eval_spec.clone());
        map.insert(
            "router_kinds",
            self.router_kinds
                .iter()
                .map(|k| k.name())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("t_history", self.t_history.to_string());
        map.insert("t_future", self.t_future.to_string());
        map.insert("dt", self.dt.to_string());
        map.insert("n_train_scenes", self.n_train_scenes.to_string());
        map.insert("n_eval_scenes", self.n_eval_scenes.to_string());
        map.insert(
            "epochs",
            self.epochs.map_or("auto".into(), |v| v.to_string()),
        );
        map.insert("batch_size", self.batch_size.to_string());
        map.insert(
            "lr_predictor",
            self.lr_predictor.map_or("auto".into(), |v| v.to_string()),
        );
        map.insert(
            "lr_router",
            self.lr_router.map_or("auto".into(), |v| v.to_string()),
        );
        map.insert("lr_decay_factor", self.lr_decay_factor.to_string());
        map.insert("lr_decay_every", self.lr_decay_every.to_string());
        map.insert("k_modes", self.k_modes.to_string());
        map.insert("embed_width", self.embed_width.to_string());
        map.insert("n_bootstrap", self.n_bootstrap.to_string());
        map.insert("tol_lateral", self.tol_lateral.to_string());
        map.insert("tol_longitudinal", self.tol_longitudinal.to_string());
        map.insert(
            "ood_ratios",
            self.ood_ratios
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert(
            "horizons",
            self.horizons
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert(
            "seeds",
            self.seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        let mut out = String::new();
        for (key, value) in map {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        }
        out
    }

    /// FNV-1a hash of the canonical rendering, as fixed-width hex.
    pub fn hash(&self) -> String {
        let mut hash: u64 = 0xcbf29ce484222325;
        for byte in self.canonical().as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x100000001b3);
        }
        format!("{hash:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical() {
        let config = ExperimentConfig::default();
        let parsed = ExperimentConfig::parse(&config.canonical()).unwrap();
        assert_eq!(parsed, config);
        assert_eq!(parsed.hash(), config.hash());
    }

    #[test]
    fn parses_overrides_lists_and_comments() {
        let text = "
            # comment line
            t_future = 40   # trailing comment
            ood_ratios = 0.0, 0.5, 1.0
            seeds = 7
            lr_predictor = 1e-3
            epochs = 4
        ";
        let config = ExperimentConfig::parse(text).unwrap();
        assert_eq!(config.t_future, 40);
        assert_eq!(config.ood_ratios, vec![0.0, 0.5, 1.0]);
        assert_eq!(config.seeds, vec![7]);
        assert_eq!(config.lr_predictor, Some(1e-3));
        assert_eq!(config.effective_epochs(), 4);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_specs() {
        assert!(ExperimentConfig::parse("no_such_key = 1").is_err());
        assert!(ExperimentConfig::parse("train_spec = family_zzz").is_err());
        assert!(ExperimentConfig::parse("seeds = ").is_err());
    }

    #[test]
    fn auto_rates_follow_horizon() {
        let config = ExperimentConfig::default();
        assert_eq!(config.effective_lr_predictor(), 0.24 / 400.0);
        let short = config.at_horizon(1);
        assert_eq!(short.effective_lr_predictor(), 0.15);
        assert_eq!(short.effective_lr_router(), 3e-2);
        let long = config.at_horizon(80);
        assert_eq!(long.effective_lr_router(), 3e-1);
        assert_eq!(long.effective_epochs(), 12);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.t_future = 30;
        assert_ne!(a.hash(), b.hash());
    }
}
