//! Run configuration: flat `key = value` lines grouped under `[section]`
//! headers.
//!
//! ```text
//! # comment
//! [run]
//! seed = 7
//! [model]
//! variant = V3
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Every key must
//! belong to a known section, may appear once, and unknown keys are errors.
//! Omitted keys keep their defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bdc_core::autograd::AdamWConfig;
use bdc_core::occtoy::{NetSpec, SceneConfig, Scope, TrainConfig};
use bdc_core::units::{BdcUnitConfig, Variant};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: [usize; 3],
    pub n_class: usize,
    pub n_boxes: usize,
    pub image: [usize; 2],
    pub n_train: usize,
    pub n_test: usize,
    pub variant: Variant,
    pub n_mulbiconv: usize,
    pub first_kernel: usize,
    pub second_kernel: usize,
    pub alpha: f64,
    pub scope: Scope,
    pub stem_channels: usize,
    /// At most one of `steps` and `epochs` may be set; `epochs` counts
    /// passes over the training split.
    pub steps: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub report: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let n = NetSpec::default();
        Self {
            seed: t.seed,
            grid: t.scene.grid,
            n_class: t.scene.n_class,
            n_boxes: t.scene.n_boxes,
            image: t.scene.image,
            n_train: t.n_train,
            n_test: t.n_test,
            variant: n.unit.variant,
            n_mulbiconv: n.unit.n_mulbiconv,
            first_kernel: n.unit.first_kernel,
            second_kernel: n.unit.second_kernel,
            alpha: n.unit.alpha,
            scope: n.scope,
            stem_channels: n.stem_channels,
            steps: None,
            epochs: None,
            batch_size: t.batch_size,
            lr: t.optim.lr,
            weight_decay: t.optim.weight_decay,
            report: None,
            checkpoint: None,
        }
    }
}

const KEYS: &[(&str, &[&str])] = &[
    ("run", &["seed"]),
    ("task", &["grid", "n_class", "n_boxes", "image", "n_train", "n_test"]),
    (
        "model",
        &["variant", "n_mulbiconv", "first_kernel", "second_kernel", "alpha", "scope", "stem_channels"],
    ),
    ("train", &["steps", "epochs", "batch_size", "lr", "weight_decay"]),
    ("output", &["report", "checkpoint"]),
];

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("line {line}: invalid value {v:?} for {key}")))
}

fn parse_list<const N: usize>(line: usize, key: &str, v: &str) -> Result<[usize; N], CliError> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| parse_value(line, key, p.trim()))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| CliError::Config(format!("line {line}: {key} needs {N} comma-separated integers")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut section: Option<&str> = None;
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::Config(format!("line {n}: unterminated section header")))?
                    .trim();
                let known = KEYS
                    .iter()
                    .find(|(s, _)| *s == name)
                    .ok_or_else(|| CliError::Config(format!("line {n}: unknown section [{name}]")))?;
                section = Some(known.0);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {n}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section.ok_or_else(|| CliError::Config(format!("line {n}: key {key:?} outside a section")))?;
            let allowed = KEYS.iter().find(|(s, _)| *s == sec).map(|k| k.1).unwrap_or(&[]);
            if !allowed.contains(&key) {
                return Err(CliError::Config(format!("line {n}: unknown key {key:?} in [{sec}]")));
            }
            if !seen.insert(key) {
                return Err(CliError::Config(format!("line {n}: duplicate key {key:?}")));
            }
            cfg.set(n, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, n: usize, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "seed" => self.seed = parse_value(n, key, v)?,
            "grid" => self.grid = parse_list(n, key, v)?,
            "n_class" => self.n_class = parse_value(n, key, v)?,
            "n_boxes" => self.n_boxes = parse_value(n, key, v)?,
            "image" => self.image = parse_list(n, key, v)?,
            "n_train" => self.n_train = parse_value(n, key, v)?,
            "n_test" => self.n_test = parse_value(n, key, v)?,
            "variant" => self.variant = parse_value(n, key, v)?,
            "n_mulbiconv" => self.n_mulbiconv = parse_value(n, key, v)?,
            "first_kernel" => self.first_kernel = parse_value(n, key, v)?,
            "second_kernel" => self.second_kernel = parse_value(n, key, v)?,
            "alpha" => self.alpha = parse_value(n, key, v)?,
            "scope" => self.scope = parse_value(n, key, v)?,
            "stem_channels" => self.stem_channels = parse_value(n, key, v)?,
            "steps" => self.steps = Some(parse_value(n, key, v)?),
            "epochs" => self.epochs = Some(parse_value(n, key, v)?),
            "batch_size" => self.batch_size = parse_value(n, key, v)?,
            "lr" => self.lr = parse_value(n, key, v)?,
            "weight_decay" => self.weight_decay = parse_value(n, key, v)?,
            "report" => self.report = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            _ => unreachable!("key table and setter disagree on {key}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.epochs.is_some() && self.steps.is_some() {
            return Err(CliError::Config("set either steps or epochs, not both".into()));
        }
        let invalid = |e: bdc_core::Error| CliError::Config(e.to_string());
        self.train_config().validate().map_err(invalid)?;
        self.net_spec().validate().map_err(invalid)
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            grid: self.grid,
            n_boxes: self.n_boxes,
            n_class: self.n_class,
            image: self.image,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let steps = match (self.epochs, self.steps) {
            (Some(e), _) => e * (self.n_train / self.batch_size.max(1)),
            (None, Some(s)) => s,
            (None, None) => TrainConfig::default().steps,
        };
        TrainConfig {
            seed: self.seed,
            steps,
            batch_size: self.batch_size,
            n_train: self.n_train,
            n_test: self.n_test,
            scene: self.scene(),
            optim: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
        }
    }

    pub fn net_spec(&self) -> NetSpec {
        let mut unit = BdcUnitConfig::new(self.variant, self.n_mulbiconv, 0).with_kernels(self.first_kernel, self.second_kernel);
        unit.alpha = self.alpha;
        NetSpec {
            grid: self.grid,
            n_class: self.n_class,
            image: self.image,
            stem_channels: self.stem_channels,
            unit,
            scope: self.scope,
        }
    }

    /// Every effective setting in parseable form, defaults included.
    pub fn canonical(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut out = format!(
            "[run]\nseed = {}\n[task]\ngrid = {}\nn_class = {}\nn_boxes = {}\nimage = {}\nn_train = {}\nn_test = {}\n",
            self.seed,
            list(&self.grid),
            self.n_class,
            self.n_boxes,
            list(&self.image),
            self.n_train,
            self.n_test
        );
        out += &format!(
            "[model]\nvariant = {}\nn_mulbiconv = {}\nfirst_kernel = {}\nsecond_kernel = {}\nalpha = {:?}\nscope = {}\nstem_channels = {}\n",
            self.variant, self.n_mulbiconv, self.first_kernel, self.second_kernel, self.alpha, self.scope, self.stem_channels
        );
        out += &format!(
            "[train]\nsteps = {}\nbatch_size = {}\nlr = {:?}\nweight_decay = {:?}\n",
            self.train_config().steps,
            self.batch_size,
            self.lr,
            self.weight_decay
        );
        let outputs: Vec<String> = [("report", path(&self.report)), ("checkpoint", path(&self.checkpoint))]
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| format!("{k} = {v}\n")))
            .collect();
        if !outputs.is_empty() {
            out += "[output]\n";
            out += &outputs.concat();
        }
        out
    }

    /// SHA-256 of [`Self::canonical`] with output paths cleared, hex
    /// encoded.
    pub fn hash(&self) -> String {
        let run_only = Self {
            report: None,
            checkpoint: None,
            ..self.clone()
        };
        Sha256::digest(run_only.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().train_config(), TrainConfig::default());
    }

    #[test]
    fn sections_and_comments() {
        let c = RunConfig::parse(
            "# toy run\n[run]\nseed = 7\n\n[model]\nvariant = v1\nscope = tiny\n[train]\nlr = 0.01\nepochs = 2\n[output]\nreport = r.csv\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.variant, Variant::V1);
        assert_eq!(c.scope, Scope::Tiny);
        assert_eq!(c.train_config().steps, 16);
        assert_eq!(c.report, Some(PathBuf::from("r.csv")));
    }

    #[test]
    fn canonical_form_roundtrips() {
        let c = RunConfig::parse("[task]\ngrid = 8, 8, 4\n[train]\nlr = 0.002\n[output]\ncheckpoint = m.bdc\n").unwrap();
        let again = RunConfig::parse(&c.canonical()).unwrap();
        assert_eq!(again.canonical(), c.canonical());
        assert_eq!(again.hash(), c.hash());
        assert_ne!(c.hash(), RunConfig::default().hash());
        assert_eq!(c.hash().len(), 64);
        let moved = RunConfig {
            checkpoint: Some(PathBuf::from("elsewhere.bdc")),
            ..c.clone()
        };
        assert_eq!(moved.hash(), c.hash());
    }

    #[test]
    fn rejects_malformed_input() {
        for bad in [
            "seed = 1",
            "[run]\nseed = 1\nseed = 2",
            "[run]\nspeed = 1",
            "[nope]",
            "[run\nseed = 1",
            "[run]\nseed",
            "[run]\nseed = -1",
            "[task]\ngrid = 16,16",
            "[model]\nvariant = V9",
            "[model]\nfirst_kernel = 5",
            "[task]\ngrid = 2,16,4",
            "[train]\nbatch_size = 0",
            "[train]\nsteps = 10\nepochs = 3",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(CliError::Config(_))), "{bad:?}");
        }
    }
}
