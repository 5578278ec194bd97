use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DataSplit, gaussian_blobs, load_idx, pattern_images};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::quantizer::FitMethod;
use crate::regularizers::{SatNlConfig, SatNlKind, SymRegConfig};
use crate::trainer::{SamConfig, TrainConfig};

/// Keys accepted in config files and as `--key value` overrides, with their defaults.
const DEFAULTS: &[(&str, &str)] = &[
    ("checkpoint", ""),
    ("seed", "0"),
    ("seeds", ""),
    ("data.kind", "blobs"),
    ("data.n", "4000"),
    ("data.dim", "32"),
    ("data.classes", "4"),
    ("data.spread", "0.75"),
    ("data.size", "12"),
    ("data.noise", "0.35"),
    ("data.images", ""),
    ("data.labels", ""),
    ("data.val_fraction", "0.2"),
    ("data.seed", "1234"),
    ("model.arch", "mlp"),
    ("model.widths", "32,64,64,4"),
    ("model.channels", "8,8"),
    ("model.hidden", "32"),
    ("satnl.kind", "none"),
    ("satnl.layers", "all"),
    ("lambda1", "0"),
    ("lambda2", "0"),
    ("symreg.skip", ""),
    ("train.epochs", "30"),
    ("train.batch", "32"),
    ("train.lr", "0.05"),
    ("train.weight_decay", "0.0005"),
    ("train.momentum", "0.9"),
    ("train.warmup", "2"),
    ("train.lr_floor", "0"),
    ("sam.enabled", "false"),
    ("sam.adaptive", "false"),
    ("sam.rho", "0.05"),
    ("bits_w", "4"),
    ("bits_a", "FP"),
    ("fit", "minmax"),
    ("bits", "3,4,5,6,7,8"),
    ("mode", "ptq"),
    ("qat.bits", "4"),
    ("qat.bits_a", "FP"),
    ("qat.epochs", "5"),
    ("ratios", ""),
    ("probe.n", "256"),
    ("d_grid", "0.5:4.0:0.1"),
    ("bits_list", "2,3,4,5,6,7,8"),
    ("gradcheck.points", "10"),
    ("gradcheck.epsilon", "1e-5"),
];

/// Resolved key/value configuration of one harness command.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl ExperimentConfig {
    /// Every accepted key, in declaration order.
    pub fn keys() -> impl Iterator<Item = &'static str> {
        DEFAULTS.iter().map(|(k, _)| *k)
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    /// Applies `--key value` pairs.
    pub fn apply_overrides(&mut self, args: &[(String, String)]) -> Result<()> {
        for (k, v) in args {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("cannot parse `{key} = {v}`")))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            v => Err(Error::Config(format!("`{key} = {v}` is not a boolean"))),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        parse_list(self.get(key)).map_err(|_| Error::Config(format!("cannot parse list `{key} = {}`", self.get(key))))
    }

    /// `None` for `FP`.
    pub fn bits_or_fp(&self, key: &str) -> Result<Option<u32>> {
        match self.get(key) {
            "FP" | "fp" => Ok(None),
            _ => self.parse_value(key).map(Some),
        }
    }

    /// Real grid given as `a,b,c` or `start:stop:step` (inclusive).
    pub fn grid(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.get(key);
        let parts: Vec<&str> = v.split(':').collect();
        if parts.len() == 3 {
            let nums: Vec<f64> = parts
                .iter()
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad range `{key} = {v}`")))?;
            let (a, b, s) = (nums[0], nums[1], nums[2]);
            if !(s > 0.0) || b < a {
                return Err(Error::Config(format!("bad range `{key} = {v}`")));
            }
            let n = ((b - a) / s + 1e-9).floor() as usize;
            return Ok((0..=n).map(|i| a + i as f64 * s).collect());
        }
        self.list(key)
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        if self.get("seeds").is_empty() {
            Ok(vec![self.parse_value("seed")?])
        } else {
            self.list("seeds")
        }
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        let p = self.get("checkpoint");
        (!p.is_empty()).then(|| PathBuf::from(p))
    }

    /// All keys in sorted order, as echoed into report headers.
    pub fn resolved(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn fit(&self) -> Result<FitMethod> {
        FitMethod::parse(self.get("fit"))
    }

    pub fn data(&self) -> Result<DataSplit> {
        let n = self.parse_value("data.n")?;
        let seed = self.parse_value("data.seed")?;
        let ds = match self.get("data.kind") {
            "blobs" => gaussian_blobs(
                n,
                self.parse_value("data.dim")?,
                self.parse_value("data.classes")?,
                self.parse_value("data.spread")?,
                seed,
            )?,
            "patterns" => pattern_images(n, self.parse_value("data.size")?, self.parse_value("data.noise")?, seed)?,
            "idx" => load_idx(
                Path::new(self.get("data.images")),
                Path::new(self.get("data.labels")),
                self.parse_value("data.classes")?,
            )?,
            other => return Err(Error::Config(format!("unknown data.kind `{other}`"))),
        };
        ds.split(self.parse_value("data.val_fraction")?)
    }

    pub fn model(&self, data: &DataSplit) -> Result<ModelSpec> {
        let classes = data.train.classes;
        let mut spec = match self.get("model.arch") {
            "mlp" => {
                let widths: Vec<usize> = self.list("model.widths")?;
                let input: usize = data.train.sample_shape().iter().product();
                if widths.first() != Some(&input) || widths.last() != Some(&classes) {
                    return Err(Error::Config(format!(
                        "model.widths must start at the input size {input} and end at {classes} classes"
                    )));
                }
                ModelSpec::mlp(widths)?
            }
            "smallcnn" => {
                let shape = data.train.sample_shape();
                if shape.len() != 3 || shape[1] != shape[2] {
                    return Err(Error::Config("smallcnn needs square [C, H, W] images".into()));
                }
                let ch: Vec<usize> = self.list("model.channels")?;
                if ch.len() != 2 {
                    return Err(Error::Config("model.channels needs two entries".into()));
                }
                ModelSpec::small_cnn(shape[0], shape[1], [ch[0], ch[1]], self.parse_value("model.hidden")?, classes)?
            }
            other => return Err(Error::Config(format!("unknown model.arch `{other}`"))),
        };
        spec.satnl = match self.get("satnl.kind") {
            "none" | "" => SatNlConfig::disabled(),
            kind => {
                let kind = SatNlKind::parse(kind).map_err(|e| Error::Config(e.to_string()))?;
                match self.get("satnl.layers") {
                    "all" => return Ok(spec.with_satnl_all(kind)),
                    list => SatNlConfig::on(kind, list.split(',').map(str::trim).filter(|s| !s.is_empty())),
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let mut symreg = SymRegConfig::off();
        symreg.lambda1 = self.parse_value("lambda1")?;
        symreg.lambda2 = self.parse_value("lambda2")?;
        symreg.skip_layers = self
            .get("symreg.skip")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        let cfg = TrainConfig {
            epochs: self.parse_value("train.epochs")?,
            batch_size: self.parse_value("train.batch")?,
            lr: self.parse_value("train.lr")?,
            weight_decay: self.parse_value("train.weight_decay")?,
            momentum: self.parse_value("train.momentum")?,
            warmup_epochs: self.parse_value("train.warmup")?,
            lr_floor: self.parse_value("train.lr_floor")?,
            seed,
            sam: SamConfig {
                enabled: self.flag("sam.enabled")?,
                adaptive: self.flag("sam.adaptive")?,
                rho: self.parse_value("sam.rho")?,
            },
            symreg,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, ()> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| ()))
        .collect()
}
