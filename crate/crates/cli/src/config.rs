//! Flat `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, then
//! command-line flags (`--set key=value` and the dedicated flags).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mvscreen::data::{Scale, SplitSpec};
use mvscreen::metrics::HcSubset;
use mvscreen::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub tta_crops: usize,
    pub hc_percent: f64,
    pub hc_subset: HcSubset,
    pub split: SplitSpec,
    pub sweep_fractions: Vec<f64>,
    pub sweep_scales: Vec<Scale>,
    /// Memory for resampled images, in MiB.
    pub cache_mb: usize,
    /// Whether `scale` was given explicitly rather than defaulted.
    pub scale_set: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data_dir: None,
            out_dir: None,
            tta_crops: 10,
            hc_percent: 30.0,
            hc_subset: HcSubset::Union,
            split: SplitSpec::default(),
            sweep_fractions: vec![0.1, 0.5, 1.0],
            sweep_scales: Scale::ALL.to_vec(),
            cache_mb: 512,
            scale_set: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| anyhow::anyhow!("config key {key}: invalid value {value:?}: {e}"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn subset_name(s: HcSubset) -> &'static str {
    match s {
        HcSubset::Union => "union",
        HcSubset::PerClass => "per-class",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "input_noise_std" => t.input_noise_std = parse(key, value)?,
            "dropout" => t.dropout = parse(key, value)?,
            "scale" => {
                t.scale = parse(key, value)?;
                self.scale_set = true;
            }
            "fraction" => t.data_fraction = parse(key, value)?,
            "width_divisor" => t.width_divisor = parse(key, value)?,
            "hidden_units" => t.hidden_units = parse(key, value)?,
            "target_val_macauc" => {
                t.target_val_mac_auc = if value == "none" { None } else { Some(parse(key, value)?) }
            }
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "tta_crops" => self.tta_crops = parse(key, value)?,
            "hc_percent" => self.hc_percent = parse(key, value)?,
            "hc_subset" => {
                self.hc_subset = match value {
                    "union" => HcSubset::Union,
                    "per-class" => HcSubset::PerClass,
                    _ => bail!("config key hc_subset: expected union or per-class, got {value:?}"),
                }
            }
            "train_fraction" => self.split.train_fraction = parse(key, value)?,
            "validation_fraction" => self.split.validation_fraction = parse(key, value)?,
            "test_fraction" => self.split.test_fraction = parse(key, value)?,
            "sweep_fractions" => self.sweep_fractions = parse_list(key, value)?,
            "sweep_scales" => self.sweep_scales = parse_list(key, value)?,
            "cache_mb" => self.cache_mb = parse(key, value)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{origin}:{}: expected key=value, got {line:?}", i + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `--set key=value` overrides.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p.split_once('=').with_context(|| format!("--set expects key=value, got {p:?}"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.tta_crops == 0 {
            bail!("tta_crops must be >= 1");
        }
        if !(self.hc_percent > 0.0 && self.hc_percent <= 100.0) {
            bail!("hc_percent must be in (0,100], got {}", self.hc_percent);
        }
        if self.sweep_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            bail!("sweep_fractions must lie in (0,1], got {:?}", self.sweep_fractions);
        }
        Ok(())
    }

    /// Every key with its effective value, in a form [`RunConfig::apply_text`] reads back.
    pub fn render(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", t.seed.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("input_noise_std", t.input_noise_std.to_string());
        kv("dropout", t.dropout.to_string());
        kv("scale", t.scale.to_string());
        kv("fraction", t.data_fraction.to_string());
        kv("width_divisor", t.width_divisor.to_string());
        kv("hidden_units", t.hidden_units.to_string());
        kv("target_val_macauc", t.target_val_mac_auc.map_or("none".into(), |v| v.to_string()));
        if let Some(d) = &self.data_dir {
            kv("data_dir", d.display().to_string());
        }
        if let Some(d) = &self.out_dir {
            kv("out_dir", d.display().to_string());
        }
        kv("tta_crops", self.tta_crops.to_string());
        kv("hc_percent", self.hc_percent.to_string());
        kv("hc_subset", subset_name(self.hc_subset).into());
        kv("train_fraction", self.split.train_fraction.to_string());
        kv("validation_fraction", self.split.validation_fraction.to_string());
        kv("test_fraction", self.split.test_fraction.to_string());
        kv("sweep_fractions", self.sweep_fractions.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
        kv("sweep_scales", self.sweep_scales.iter().map(Scale::to_string).collect::<Vec<_>>().join(","));
        kv("cache_mb", self.cache_mb.to_string());
        s
    }
}
