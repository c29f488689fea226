//! Run configuration: defaults, `key = value` files, flag overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sisa_core::engine::{SliceMode, VoteRule};
use sisa_core::learner::HeadMode;
use sisa_core::requests::RequestDistribution;

pub const CONFIG_FILE: &str = "sisa.conf";
pub const CONFIG_DIR_ENV: &str = "SISA_CONFIG_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `synthetic` or a path to a GLUE-style TSV file.
    pub dataset: String,
    pub task: String,
    pub limit: usize,
    pub test_fraction: f64,
    pub data_fraction: f64,
    pub synth_n: usize,
    pub synth_classes: usize,
    pub synth_vocab: usize,
    pub synth_tokens: usize,
    pub synth_separation: f64,
    pub shards: usize,
    pub slices: usize,
    pub strategy: String,
    pub risk_file: Option<PathBuf>,
    pub mode: HeadMode,
    pub bottleneck: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub epochs: usize,
    pub hash_dim: usize,
    pub hidden: usize,
    pub token_cap: usize,
    pub seed: u64,
    pub distribution: String,
    pub pareto_m: f64,
    pub pareto_a: f64,
    pub requests: usize,
    pub slice_mode: SliceMode,
    pub vote: VoteRule,
    pub workers: usize,
    pub wall_clock: bool,
    pub sim_modes: String,
    pub sim_slices: String,
    pub sim_requests: String,
    pub sim_distributions: String,
    pub sim_seeds: String,
    pub sim_baseline: bool,
    pub sim_compare: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "synthetic".into(),
            task: "sst2".into(),
            limit: 60_000,
            test_fraction: 0.2,
            data_fraction: 1.0,
            synth_n: 10_000,
            synth_classes: 2,
            synth_vocab: 1000,
            synth_tokens: 20,
            synth_separation: 1.0,
            shards: 5,
            slices: 16,
            strategy: "uniform".into(),
            risk_file: None,
            mode: HeadMode::Adapter { bottleneck: 16 },
            bottleneck: 16,
            learning_rate: 5e-3,
            batch: 16,
            epochs: 10,
            hash_dim: 4096,
            hidden: 256,
            token_cap: 256,
            seed: 0,
            distribution: "uniform".into(),
            pareto_m: 1.0,
            pareto_a: 1.16,
            requests: 16,
            slice_mode: SliceMode::PerSlice,
            vote: VoteRule::HardMajority,
            workers: 1,
            wall_clock: true,
            sim_modes: String::new(),
            sim_slices: "2,4,8,16".into(),
            sim_requests: "16".into(),
            sim_distributions: "uniform".into(),
            sim_seeds: "0,1,2".into(),
            sim_baseline: true,
            sim_compare: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("invalid boolean `{value}` for `{key}`")),
    }
}

pub fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key.replace('-', "_").as_str() {
            "dataset" => self.dataset = v.to_string(),
            "task" => self.task = v.to_string(),
            "limit" => self.limit = parse(key, v)?,
            "test_fraction" => self.test_fraction = parse(key, v)?,
            "data_fraction" => self.data_fraction = parse(key, v)?,
            "synth_n" => self.synth_n = parse(key, v)?,
            "synth_classes" => self.synth_classes = parse(key, v)?,
            "synth_vocab" => self.synth_vocab = parse(key, v)?,
            "synth_tokens" => self.synth_tokens = parse(key, v)?,
            "synth_separation" => self.synth_separation = parse(key, v)?,
            "shards" => self.shards = parse(key, v)?,
            "slices" => self.slices = parse(key, v)?,
            "strategy" => self.strategy = v.to_string(),
            "risk_file" => self.risk_file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "mode" => {
                self.mode = v.parse()?;
                if let (HeadMode::Adapter { bottleneck }, true) = (self.mode, v.contains(':')) {
                    self.bottleneck = bottleneck;
                }
            }
            "bottleneck" => self.bottleneck = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "hash_dim" => self.hash_dim = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "token_cap" => self.token_cap = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "distribution" => self.distribution = v.to_string(),
            "pareto_m" => self.pareto_m = parse(key, v)?,
            "pareto_a" => self.pareto_a = parse(key, v)?,
            "requests" => self.requests = parse(key, v)?,
            "slice_mode" => self.slice_mode = v.parse()?,
            "vote" => self.vote = v.parse()?,
            "workers" => self.workers = parse(key, v)?,
            "wall_clock" => self.wall_clock = parse_bool(key, v)?,
            "sim_modes" => self.sim_modes = v.to_string(),
            "sim_slices" => self.sim_slices = v.to_string(),
            "sim_requests" => self.sim_requests = v.to_string(),
            "sim_distributions" => self.sim_distributions = v.to_string(),
            "sim_seeds" => self.sim_seeds = v.to_string(),
            "sim_baseline" => self.sim_baseline = parse_bool(key, v)?,
            "sim_compare" => self.sim_compare = parse_bool(key, v)?,
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Apply a `key = value` file. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<(), String> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected `key = value`", origin.display(), n + 1))?;
            self.set(k.trim(), v).map_err(|e| format!("{}:{}: {e}", origin.display(), n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        self.apply_text(&text, path)
    }

    /// The adapter bottleneck comes from `bottleneck` whenever the mode is `adapter`.
    pub fn head_mode(&self) -> HeadMode {
        match self.mode {
            HeadMode::Adapter { .. } => HeadMode::Adapter { bottleneck: self.bottleneck },
            m => m,
        }
    }

    pub fn request_distribution(&self) -> Result<RequestDistribution, String> {
        RequestDistribution::parse(&self.distribution, self.pareto_m, self.pareto_a).map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("limit", self.limit),
            ("synth_n", self.synth_n),
            ("synth_classes", self.synth_classes),
            ("synth_vocab", self.synth_vocab),
            ("synth_tokens", self.synth_tokens),
            ("shards", self.shards),
            ("slices", self.slices),
            ("bottleneck", self.bottleneck),
            ("batch", self.batch),
            ("epochs", self.epochs),
            ("hash_dim", self.hash_dim),
            ("hidden", self.hidden),
            ("token_cap", self.token_cap),
            ("requests", self.requests),
            ("workers", self.workers),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("`{k}` must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err("`learning_rate` must be positive".into());
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(format!("`data_fraction` {} outside (0, 1]", self.data_fraction));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(format!("`test_fraction` {} outside (0, 1)", self.test_fraction));
        }
        if !(0.0..=1.0).contains(&self.synth_separation) {
            return Err(format!("`synth_separation` {} outside [0, 1]", self.synth_separation));
        }
        if !["uniform", "sequential", "risk"].contains(&self.strategy.as_str()) {
            return Err(format!("unknown strategy `{}` (expected uniform, sequential or risk)", self.strategy));
        }
        if self.strategy == "risk" && self.risk_file.is_none() {
            return Err("strategy `risk` needs `risk_file`".into());
        }
        self.request_distribution()?;
        Ok(())
    }

    /// Every field as a `key = value` line, in a fixed order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("dataset", &self.dataset);
        line("task", &self.task);
        line("limit", &self.limit);
        line("test_fraction", &self.test_fraction);
        line("data_fraction", &self.data_fraction);
        line("synth_n", &self.synth_n);
        line("synth_classes", &self.synth_classes);
        line("synth_vocab", &self.synth_vocab);
        line("synth_tokens", &self.synth_tokens);
        line("synth_separation", &self.synth_separation);
        line("shards", &self.shards);
        line("slices", &self.slices);
        line("strategy", &self.strategy);
        let risk = self.risk_file.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        line("risk_file", &risk);
        line("mode", &self.mode.name());
        line("bottleneck", &self.bottleneck);
        line("learning_rate", &self.learning_rate);
        line("batch", &self.batch);
        line("epochs", &self.epochs);
        line("hash_dim", &self.hash_dim);
        line("hidden", &self.hidden);
        line("token_cap", &self.token_cap);
        line("seed", &self.seed);
        line("distribution", &self.distribution);
        line("pareto_m", &self.pareto_m);
        line("pareto_a", &self.pareto_a);
        line("requests", &self.requests);
        line("slice_mode", &self.slice_mode);
        line("vote", &self.vote);
        line("workers", &self.workers);
        line("wall_clock", &self.wall_clock);
        line("sim_modes", &self.sim_modes);
        line("sim_slices", &self.sim_slices);
        line("sim_requests", &self.sim_requests);
        line("sim_distributions", &self.sim_distributions);
        line("sim_seeds", &self.sim_seeds);
        line("sim_baseline", &self.sim_baseline);
        line("sim_compare", &self.sim_compare);
        s
    }
}
