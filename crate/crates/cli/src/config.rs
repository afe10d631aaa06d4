//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest as _, Sha256};

use rnf_core::data::{SplitSizes, SplitSpec, SyntheticSpec};
use rnf_core::losses::{GceConfig, RnfLossConfig};
use rnf_core::pipeline::{
    AnnotationSource, Architecture, BaselineConfig, BaselineKind, HeadScope, Method, PipelineConfig, ProxyConfig, RnfStageConfig,
    StageOneConfig,
};

use crate::error::CliError;

/// Every accepted key with its default; an empty default means "unset".
/// `temperature` and `q` default from `profile` when unset.
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("profile", "synthetic"),
    ("data", ""),
    ("schema", ""),
    ("out_dir", "runs"),
    ("run_name", ""),
    ("split.train", "0.6"),
    ("split.valid", "0.2"),
    ("split.test", "0.2"),
    ("standardize", "true"),
    ("epochs", "20"),
    ("lr", "0.001"),
    ("batch_size", "64"),
    ("patience", "5"),
    ("hidden", "50,50"),
    ("encoder_depth", "1"),
    ("dropout", "0.2"),
    ("q", ""),
    ("gamma", "0.5"),
    ("alpha", "1.0"),
    ("temperature", ""),
    ("lambda_set", "0.6,0.7,0.8,0.9"),
    ("rnf.epochs", "10"),
    ("rnf.lr", "0.001"),
    ("rnf.patience", "5"),
    ("annotation", "proxy"),
    ("head_scope", "full_head"),
    ("head_dropout", "true"),
    ("fresh_head", "false"),
    ("baseline", "eor"),
    ("beta", "1.0"),
    ("adversary_hidden", "50"),
    ("teacher", ""),
    ("bias_model", ""),
    ("proxy", ""),
    ("model", ""),
    ("sweep.method", "rnf"),
    ("sweep.grid", "0,0.5,1"),
    ("sweep.seeds", "5"),
    ("synth.n", "3000"),
    ("synth.d", "8"),
    ("synth.rate0", ""),
    ("synth.rate1", ""),
    ("synth.balance", ""),
    ("synth.noise", ""),
    ("synth.group_shift", ""),
    ("synth.label_shift", ""),
    ("synth.xor_label", ""),
    ("probe.samples", "500"),
    ("probe.epochs", "200"),
    ("probe.lr", "0.01"),
    ("kpca.gain", ""),
    ("kpca.offset", "1.0"),
    ("bound.pairs", "200"),
];

/// Resolved configuration: defaults, then the file, then `--set` overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, assignment: &str, origin: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{origin}: expected key=value, got `{assignment}`")))?;
        let key = key.trim();
        if !is_known(key) {
            return Err(CliError::Config(format!("{origin}: unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::defaults();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                cfg.set(line, &format!("{}:{}", path.display(), n + 1))?;
            }
        }
        for o in overrides {
            cfg.set(o, "--set")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical snapshot, one sorted `key=value` per line.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.snapshot().as_bytes()).into()
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    fn opt(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|v| !v.is_empty())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.raw(key);
        v.parse().map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`")))
    }

    fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.opt(key).map(|_| self.parse(key)).transpose()
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.raw(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{s}`"))))
            .collect()
    }

    fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(CliError::Config(format!("`{key}`: expected true|false, got `{v}`"))),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.opt(key).map(PathBuf::from)
    }

    /// Like [`Self::path`] but the file must exist.
    pub fn existing_path(&self, key: &str) -> Result<Option<PathBuf>, CliError> {
        match self.path(key) {
            Some(p) if !p.exists() => Err(CliError::Config(format!("`{key}`: {} does not exist", p.display()))),
            other => Ok(other),
        }
    }

    pub fn required_path(&self, key: &str, why: &str) -> Result<PathBuf, CliError> {
        self.existing_path(key)?
            .ok_or_else(|| CliError::Config(format!("`{key}` is required {why}")))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    /// Checks every value parses, so failures surface before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        self.seed()?;
        self.profile_defaults()?;
        self.split()?;
        self.pipeline()?;
        self.synthetic()?;
        self.sweep_grid()?;
        self.flag("standardize")?;
        self.parse::<usize>("probe.samples")?;
        self.parse::<usize>("bound.pairs")?;
        self.probe_epochs()?;
        self.kpca()?;
        Method::parse(self.raw("sweep.method")).map_err(CliError::from_core)?;
        if self.parse::<usize>("sweep.seeds")? == 0 {
            return Err(CliError::Config("`sweep.seeds` must be >= 1".into()));
        }
        Ok(())
    }

    /// `(temperature, q)` for the named dataset profile.
    fn profile_defaults(&self) -> Result<(f64, f64), CliError> {
        match self.raw("profile") {
            "adult" => Ok((2.0, 0.2)),
            "meps" => Ok((5.0, 0.6)),
            "synthetic" => Ok((5.0, 0.9)),
            other => Err(CliError::Config(format!("`profile`: unknown profile `{other}` (adult|meps|synthetic)"))),
        }
    }

    pub fn standardize(&self) -> Result<bool, CliError> {
        self.flag("standardize")
    }

    pub fn split(&self) -> Result<SplitSpec, CliError> {
        let train: f64 = self.parse("split.train")?;
        let valid: f64 = self.parse("split.valid")?;
        let test: f64 = self.parse("split.test")?;
        let sizes = if [train, valid, test].iter().all(|v| v.fract() == 0.0 && *v >= 1.0) {
            SplitSizes::Counts {
                train: train as usize,
                valid: valid as usize,
                test: test as usize,
            }
        } else {
            SplitSizes::Fractions { train, valid, test }
        };
        Ok(SplitSpec { sizes, seed: self.seed()? })
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        let (t_default, q_default) = self.profile_defaults()?;
        let seed = self.seed()?;
        let patience = |key: &str| -> Result<Option<usize>, CliError> {
            let p: usize = self.parse(key)?;
            Ok((p > 0).then_some(p))
        };
        let stage_one = StageOneConfig {
            epochs: self.parse("epochs")?,
            lr: self.parse("lr")?,
            batch_size: self.parse("batch_size")?,
            seed,
            patience: patience("patience")?,
            gce: None,
            arch: Architecture {
                hidden: self.list("hidden")?,
                encoder_depth: self.parse("encoder_depth")?,
                dropout: self.parse("dropout")?,
            },
        };
        stage_one.validate().map_err(CliError::from_core)?;
        let gce = GceConfig {
            q: self.parse_opt("q")?.unwrap_or(q_default),
        };
        gce.validate().map_err(CliError::from_core)?;
        let loss = RnfLossConfig {
            alpha: self.parse("alpha")?,
            lambda_set: self.list("lambda_set")?,
            temperature: self.parse_opt("temperature")?.unwrap_or(t_default),
        };
        loss.validate().map_err(CliError::from_core)?;
        let annotation = match self.raw("annotation") {
            "proxy" => AnnotationSource::Proxy,
            "ground_truth" => AnnotationSource::GroundTruth,
            "random" => AnnotationSource::Random,
            other => return Err(CliError::Config(format!("`annotation`: unknown source `{other}`"))),
        };
        let head_scope = match self.raw("head_scope") {
            "full_head" => HeadScope::FullHead,
            "last_layer" => HeadScope::LastLayer,
            other => return Err(CliError::Config(format!("`head_scope`: unknown scope `{other}`"))),
        };
        let rnf = RnfStageConfig {
            loss,
            annotation,
            epochs: self.parse("rnf.epochs")?,
            lr: self.parse("rnf.lr")?,
            batch_size: stage_one.batch_size,
            seed,
            head_scope,
            head_dropout: self.flag("head_dropout")?,
            fresh_head: self.flag("fresh_head")?,
            patience: patience("rnf.patience")?,
        };
        let kind = match self.raw("baseline") {
            "eor" => BaselineKind::Eor,
            "adversarial" => BaselineKind::Adversarial,
            other => return Err(CliError::Config(format!("`baseline`: unknown baseline `{other}`"))),
        };
        let beta: f64 = self.parse("beta")?;
        if !(beta >= 0.0) {
            return Err(CliError::Config(format!("`beta`: must be >= 0, got {beta}")));
        }
        let gamma: f64 = self.parse("gamma")?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(CliError::Config(format!("`gamma`: must be in (0, 1], got {gamma}")));
        }
        Ok(PipelineConfig {
            baseline: BaselineConfig {
                kind,
                beta,
                adversary_hidden: self.list("adversary_hidden")?,
                training: stage_one.clone(),
            },
            stage_one,
            gce,
            proxy: ProxyConfig { gamma },
            rnf,
        })
    }

    pub fn synthetic(&self) -> Result<SyntheticSpec, CliError> {
        let d = SyntheticSpec::default();
        let spec = SyntheticSpec {
            n: self.parse("synth.n")?,
            d: self.parse("synth.d")?,
            group_rates: [
                self.parse_opt("synth.rate0")?.unwrap_or(d.group_rates[0]),
                self.parse_opt("synth.rate1")?.unwrap_or(d.group_rates[1]),
            ],
            group_balance: self.parse_opt("synth.balance")?.unwrap_or(d.group_balance),
            noise: self.parse_opt("synth.noise")?.unwrap_or(d.noise),
            group_shift: self.parse_opt("synth.group_shift")?.unwrap_or(d.group_shift),
            label_shift: self.parse_opt("synth.label_shift")?.unwrap_or(d.label_shift),
            xor_label: match self.opt("synth.xor_label") {
                None => d.xor_label,
                Some(_) => self.flag("synth.xor_label")?,
            },
            seed: self.seed()?,
        };
        spec.validate().map_err(CliError::from_core)?;
        Ok(spec)
    }

    pub fn sweep_grid(&self) -> Result<Vec<f64>, CliError> {
        let grid: Vec<f64> = self.list("sweep.grid")?;
        if grid.is_empty() {
            return Err(CliError::Config("`sweep.grid` is empty".into()));
        }
        Ok(grid)
    }

    pub fn sweep_method(&self) -> Result<Method, CliError> {
        Method::parse(self.raw("sweep.method")).map_err(CliError::from_core)
    }

    pub fn sweep_seeds(&self) -> Result<usize, CliError> {
        self.parse("sweep.seeds")
    }

    pub fn probe_samples(&self) -> Result<usize, CliError> {
        self.parse("probe.samples")
    }

    pub fn probe_epochs(&self) -> Result<(usize, f64), CliError> {
        Ok((self.parse("probe.epochs")?, self.parse("probe.lr")?))
    }

    pub fn kpca(&self) -> Result<rnf_core::analysis::KpcaConfig, CliError> {
        Ok(rnf_core::analysis::KpcaConfig {
            gain: self.parse_opt("kpca.gain")?,
            offset: self.parse("kpca.offset")?,
        })
    }

    pub fn bound_pairs(&self) -> Result<usize, CliError> {
        self.parse("bound.pairs")
    }

    /// Output root: `RNF_OUT_DIR` wins over `out_dir`.
    pub fn out_root(&self) -> PathBuf {
        std::env::var_os("RNF_OUT_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(self.raw("out_dir")))
    }

    pub fn run_name(&self, command: &str) -> Result<String, CliError> {
        Ok(match self.opt("run_name") {
            Some(n) => n.to_string(),
            None => format!("{command}-s{}", self.seed()?),
        })
    }
}
