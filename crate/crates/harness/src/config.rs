//! Line-oriented `key = value` experiment files with dotted section keys.
//!
//! Every key in the file must be consumed by the section it belongs to; keys
//! that are misspelled or do not apply to the chosen optimizer or dataset
//! source are reported with their line number.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flatmin_core::landscape::{SweepConfig, SweepKind};
use flatmin_core::optimizers::{EntropySgdConfig, LpfConfig, OptimizerSpec, SigmaMode};
use flatmin_core::sharpness::{LocalEntropyConfig, MeasureConfig, MeasureName};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetSpec, SyntheticKind, SyntheticSpec};
use crate::error::{HarnessError, Result};

pub const DEFAULT_LOSS_THRESHOLD: f64 = 0.01;
pub const DEFAULT_MAX_EPOCHS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train: DatasetSpec,
    /// Held-out split; synthetic sources draw it from the same generator.
    pub test: DatasetSpec,
    pub label_noise: f64,
    pub data_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerSpec,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopConfig {
    pub loss_threshold: f64,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub stop: StopConfig,
    pub measures: MeasureConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// SHA-256 of the canonical JSON form, excluding seeds and output path.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Hyperparam,
    LabelNoise,
    DataNoise,
    Width,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Hyperparam => "hyperparam",
            Axis::LabelNoise => "label_noise",
            Axis::DataNoise => "data_noise",
            Axis::Width => "width",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: Axis,
    /// Raw values, substituted textually into the swept key.
    pub values: Vec<String>,
    /// The swept key for the hyper-parameter axis.
    pub param: Option<String>,
}

impl SweepSpec {
    pub fn label(&self) -> String {
        match (&self.axis, &self.param) {
            (Axis::Hyperparam, Some(p)) => p.clone(),
            (a, _) => a.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSpec {
    pub kind: SweepKind,
    pub values: Vec<f64>,
    pub estimators: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheorySpec {
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    pub sigmas: Vec<f64>,
    pub steps: Vec<f64>,
    pub m: usize,
}

impl Default for TheorySpec {
    fn default() -> Self {
        TheorySpec {
            alpha: 1.0,
            beta: 10.0,
            c: 1.0,
            sigmas: vec![0.05, 0.1, 0.2, 0.5, 1.0],
            steps: vec![1e2, 1e3, 1e4, 1e5, 1e6],
            m: 50_000,
        }
    }
}

/// A parsed configuration file. Sections other than the experiment are
/// optional and only checked by the subcommands that use them.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub experiment: ExperimentConfig,
    pub sweep: Option<SweepSpec>,
    pub landscape: Option<LandscapeSpec>,
    pub theory: Option<TheorySpec>,
    /// The lines as written, for re-parsing with overrides.
    raw: BTreeMap<String, Entry>,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    line: usize,
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            HarnessError::Core(flatmin_core::Error::Parse(m)) => {
                HarnessError::parse(format!("{}:{m}", path.display()))
            }
            HarnessError::Core(flatmin_core::Error::Config(m)) => {
                HarnessError::parse(format!("{}: {m}", path.display()))
            }
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| HarnessError::parse(format!("{line_no}: expected `key = value`")))?;
            let key = k.trim();
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
            {
                return Err(HarnessError::parse(format!(
                    "{line_no}: malformed key `{key}`"
                )));
            }
            let value = v.trim().trim_matches('"').to_string();
            if let Some(prev) = raw.insert(
                key.to_string(),
                Entry {
                    value,
                    line: line_no,
                },
            ) {
                return Err(HarnessError::parse(format!(
                    "{line_no}: `{key}` already set on line {}",
                    prev.line
                )));
            }
        }
        Self::from_entries(raw)
    }

    /// Re-parses with `key` replaced, as the sweep does for each grid point.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut raw = self.raw.clone();
        let line = raw.get(key).map_or(0, |e| e.line);
        raw.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                line,
            },
        );
        Self::from_entries(raw)
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.raw.get(key).map(|e| e.value.as_str())
    }

    fn from_entries(raw: BTreeMap<String, Entry>) -> Result<Self> {
        let mut keys = Keys { map: raw.clone() };
        let experiment = experiment(&mut keys)?;
        let sweep = sweep(&mut keys)?;
        let landscape = landscape(&mut keys)?;
        let theory = theory(&mut keys)?;
        if let Some((k, e)) = keys.map.iter().min_by_key(|(_, e)| e.line) {
            return Err(HarnessError::parse(format!(
                "{}: unknown or inapplicable key `{k}` = {}",
                e.line, e.value
            )));
        }
        if let Some(s) = &sweep {
            // every grid point must itself be a valid configuration
            let key = sweep_key(s)?;
            for v in &s.values {
                let mut probe = raw.clone();
                let value = if s.axis == Axis::Width {
                    width_value(&experiment.hidden, v)?
                } else {
                    v.clone()
                };
                probe.insert(key.clone(), Entry { value, line: 0 });
                probe.retain(|k, _| !k.starts_with("sweep."));
                Self::from_entries(probe)?;
            }
        }
        Ok(Config {
            experiment,
            sweep,
            landscape,
            theory,
            raw,
        })
    }

    /// The configuration of one sweep point.
    pub fn sweep_point(&self, value: &str) -> Result<Config> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| HarnessError::config("no [sweep] section in config"))?;
        let key = sweep_key(s)?;
        let v = if s.axis == Axis::Width {
            width_value(&self.experiment.hidden, value)?
        } else {
            value.to_string()
        };
        self.with_override(&key, &v)
    }
}

fn sweep_key(s: &SweepSpec) -> Result<String> {
    Ok(match s.axis {
        Axis::Hyperparam => {
            let p = s
                .param
                .clone()
                .ok_or_else(|| HarnessError::config("hyperparam sweep needs sweep.param"))?;
            if p.starts_with("sweep.") || p.starts_with("run.") {
                return Err(HarnessError::config(format!("cannot sweep `{p}`")));
            }
            p
        }
        Axis::LabelNoise => "dataset.label_noise".into(),
        Axis::DataNoise => "dataset.data_noise".into(),
        Axis::Width => "model.hidden".into(),
    })
}

/// A width value applies to every hidden layer.
fn width_value(hidden: &[usize], v: &str) -> Result<String> {
    let w: usize = v
        .parse()
        .map_err(|_| HarnessError::config(format!("width `{v}` is not a positive integer")))?;
    Ok(vec![w.to_string(); hidden.len().max(1)].join(","))
}

struct Keys {
    map: BTreeMap<String, Entry>,
}

impl Keys {
    fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|_| {
                HarnessError::parse(format!(
                    "{}: cannot parse `{}` for `{key}`",
                    e.line, e.value
                ))
            }),
        }
    }

    fn get<V: FromStr>(&mut self, key: &str, default: V) -> Result<V> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn required<V: FromStr>(&mut self, key: &str) -> Result<V> {
        self.take(key)?
            .ok_or_else(|| HarnessError::parse(format!("missing required key `{key}`")))
    }

    fn list<V: FromStr>(&mut self, key: &str) -> Result<Option<Vec<V>>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|_| {
                        HarnessError::parse(format!("{}: cannot parse `{s}` in `{key}`", e.line))
                    })
                })
                .collect::<Result<Vec<V>>>()
                .map(Some),
        }
    }

    fn has_section(&self, prefix: &str) -> bool {
        self.map.keys().any(|k| k.starts_with(prefix))
    }
}

fn data(k: &mut Keys) -> Result<DataConfig> {
    let source: String = k.get("dataset.source", "synthetic".to_string())?;
    let classes: Option<usize> = k.take("dataset.classes")?;
    let (train, test) = match source.as_str() {
        "synthetic" => {
            let kind = SyntheticKind::parse(&k.get("dataset.kind", "blobs".to_string())?)?;
            let n = k.get("dataset.n", 1000)?;
            let spec = SyntheticSpec {
                kind,
                n,
                dim: k.get("dataset.dim", 2)?,
                classes: classes.unwrap_or(2),
                noise: k.get("dataset.noise", 1.0)?,
                separation: k.get("dataset.separation", 3.0)?,
                seed: k.get("dataset.seed", 0)?,
            };
            let test = SyntheticSpec {
                n: k.get("dataset.n_test", n)?,
                ..spec.clone()
            };
            (DatasetSpec::Synthetic(spec), DatasetSpec::Synthetic(test))
        }
        "csv" => (
            DatasetSpec::Csv {
                path: k.required("dataset.path")?,
                classes,
            },
            DatasetSpec::Csv {
                path: k.required("dataset.test_path")?,
                classes,
            },
        ),
        "idx" => (
            DatasetSpec::Idx {
                images: k.required("dataset.images")?,
                labels: k.required("dataset.labels")?,
                classes,
            },
            DatasetSpec::Idx {
                images: k.required("dataset.test_images")?,
                labels: k.required("dataset.test_labels")?,
                classes,
            },
        ),
        other => {
            return Err(HarnessError::config(format!(
                "unknown dataset.source `{other}`"
            )))
        }
    };
    let label_noise = k.get("dataset.label_noise", 0.0)?;
    let data_noise = k.get("dataset.data_noise", 0.0)?;
    if !(0.0..=1.0).contains(&label_noise) || !(data_noise >= 0.0) {
        return Err(HarnessError::config(
            "label_noise must lie in [0, 1] and data_noise be non-negative",
        ));
    }
    Ok(DataConfig {
        train,
        test,
        label_noise,
        data_noise,
    })
}

fn optimizer(k: &mut Keys) -> Result<TrainConfig> {
    let name: String = k.get("optimizer.name", "msgd".to_string())?;
    let spec = match name.as_str() {
        "msgd" => OptimizerSpec::Msgd,
        "lpf_sgd" => {
            let mode: String = k.get("optimizer.sigma_mode", "norm".to_string())?;
            let cfg = LpfConfig {
                gamma0: k.get("optimizer.gamma0", 0.002)?,
                alpha: k.get("optimizer.alpha", 1.0)?,
                mc_splits: k.get("optimizer.mc_splits", 8)?,
                // filled in by the trainer from the epoch budget
                total_steps: 0,
                sigma_mode: match mode.as_str() {
                    "norm" => SigmaMode::Norm,
                    "squared_norm" => SigmaMode::SquaredNorm,
                    _ => return Err(HarnessError::config(format!("unknown sigma_mode `{mode}`"))),
                },
            };
            OptimizerSpec::LpfSgd(cfg)
        }
        "sam" => {
            let rho = k.get("optimizer.rho", 0.05)?;
            if !(rho > 0.0) {
                return Err(HarnessError::config("SAM rho must be positive"));
            }
            OptimizerSpec::Sam { rho }
        }
        "entropy_sgd" => {
            let d = EntropySgdConfig::default();
            let cfg = EntropySgdConfig {
                inner_steps: k.get("optimizer.inner_steps", d.inner_steps)?,
                gamma: k.get("optimizer.gamma", d.gamma)?,
                scope_growth: k.get("optimizer.scope_growth", d.scope_growth)?,
                eta_inner: k.get("optimizer.eta_inner", d.eta_inner)?,
                eps_noise: k.get("optimizer.eps_noise", d.eps_noise)?,
                alpha_avg: k.get("optimizer.alpha_avg", d.alpha_avg)?,
                lr_multiplier: k.get("optimizer.lr_multiplier", d.lr_multiplier)?,
            };
            cfg.validate()?;
            OptimizerSpec::EntropySgd(cfg)
        }
        other => return Err(HarnessError::config(format!("unknown optimizer `{other}`"))),
    };
    let t = TrainConfig {
        optimizer: spec,
        lr: k.get("optimizer.lr", 0.05)?,
        momentum: k.get("optimizer.momentum", 0.9)?,
        weight_decay: k.get("optimizer.weight_decay", 0.0)?,
        batch_size: k.get("optimizer.batch_size", 32)?,
    };
    if !(t.lr > 0.0)
        || !(0.0..1.0).contains(&t.momentum)
        || !(t.weight_decay >= 0.0)
        || t.batch_size == 0
    {
        return Err(HarnessError::config(
            "need lr > 0, momentum in [0, 1), weight_decay >= 0 and batch_size >= 1",
        ));
    }
    Ok(t)
}

fn measures(k: &mut Keys) -> Result<MeasureConfig> {
    let d = MeasureConfig::default();
    let names: Vec<String> = k.list("measures.list")?.unwrap_or_default();
    let measures = names
        .iter()
        .map(|n| MeasureName::parse(n))
        .collect::<flatmin_core::Result<Vec<_>>>()?;
    let local_entropy = if k.has_section("measures.local_entropy.") {
        Some(LocalEntropyConfig {
            steps: k.get("measures.local_entropy.steps", 20)?,
            gamma: k.required("measures.local_entropy.gamma")?,
            eta: k.get("measures.local_entropy.eta", 0.05)?,
            eps: k.get("measures.local_entropy.eps", 1e-4)?,
            alpha_avg: k.get("measures.local_entropy.alpha_avg", 0.75)?,
        })
    } else {
        None
    };
    if measures.contains(&MeasureName::LocalEntropyGrad) && local_entropy.is_none() {
        return Err(HarnessError::config(
            "local_entropy_grad needs measures.local_entropy.gamma",
        ));
    }
    Ok(MeasureConfig {
        measures,
        sigma: k.get("measures.sigma", d.sigma)?,
        lpf_samples: k.get("measures.lpf_samples", d.lpf_samples)?,
        epsilon: k.get("measures.epsilon", d.epsilon)?,
        psi: k.get("measures.psi", d.psi)?,
        delta: k.get("measures.delta", d.delta)?,
        pac_samples: k.get("measures.pac_samples", d.pac_samples)?,
        frobenius_samples: k.get("measures.frobenius_samples", d.frobenius_samples)?,
        lanczos_steps: k.get("measures.lanczos_steps", d.lanczos_steps)?,
        lanczos_probes: k.get("measures.lanczos_probes", d.lanczos_probes)?,
        local_entropy,
        seed: k.get("measures.seed", d.seed)?,
    })
}

fn experiment(k: &mut Keys) -> Result<ExperimentConfig> {
    let data = data(k)?;
    let hidden = k.list("model.hidden")?.unwrap_or_else(|| vec![32]);
    if hidden.contains(&0) {
        return Err(HarnessError::config("hidden widths must be positive"));
    }
    let train = optimizer(k)?;
    let stop = StopConfig {
        loss_threshold: k.get("stop.loss_threshold", DEFAULT_LOSS_THRESHOLD)?,
        max_epochs: k.get("stop.max_epochs", DEFAULT_MAX_EPOCHS)?,
    };
    if !(stop.loss_threshold > 0.0) {
        return Err(HarnessError::config("stop.loss_threshold must be positive"));
    }
    let measures = measures(k)?;
    let seeds = k.list("run.seeds")?.unwrap_or_else(|| vec![0]);
    if seeds.is_empty() {
        return Err(HarnessError::config("run.seeds must not be empty"));
    }
    let output_dir = k.get("run.output_dir", PathBuf::from("out"))?;
    Ok(ExperimentConfig {
        data,
        hidden,
        train,
        stop,
        measures,
        seeds,
        output_dir,
    })
}

fn sweep(k: &mut Keys) -> Result<Option<SweepSpec>> {
    if !k.has_section("sweep.") {
        return Ok(None);
    }
    let axis = match k.required::<String>("sweep.axis")?.as_str() {
        "hyperparam" => Axis::Hyperparam,
        "label_noise" => Axis::LabelNoise,
        "data_noise" => Axis::DataNoise,
        "width" => Axis::Width,
        other => {
            return Err(HarnessError::config(format!(
                "unknown sweep axis `{other}`"
            )))
        }
    };
    let values: Vec<String> = k.list("sweep.values")?.unwrap_or_default();
    if values.is_empty() {
        return Err(HarnessError::config(
            "sweep.values must list at least one value",
        ));
    }
    let param = if axis == Axis::Hyperparam {
        Some(k.required("sweep.param")?)
    } else {
        None
    };
    Ok(Some(SweepSpec {
        axis,
        values,
        param,
    }))
}

fn landscape(k: &mut Keys) -> Result<Option<LandscapeSpec>> {
    if !k.has_section("landscape.") {
        return Ok(None);
    }
    let kind = match k.get("landscape.kind", "mean_scaled".to_string())?.as_str() {
        "mean_scaled" => SweepKind::MeanScaled,
        "flat_fraction" => SweepKind::FlatFraction,
        other => {
            return Err(HarnessError::config(format!(
                "unknown landscape.kind `{other}`"
            )))
        }
    };
    let d = SweepConfig::default();
    let default_values = match kind {
        SweepKind::MeanScaled => vec![100.0, 50.0, 10.0, 5.0, 1.0],
        SweepKind::FlatFraction => vec![0.0, 25.0, 50.0, 75.0, 90.0],
    };
    Ok(Some(LandscapeSpec {
        kind,
        values: k.list("landscape.values")?.unwrap_or(default_values),
        estimators: SweepConfig {
            dim: k.get("landscape.dim", d.dim)?,
            sigma: k.get("landscape.sigma", d.sigma)?,
            lpf_samples: k.get("landscape.lpf_samples", d.lpf_samples)?,
            frobenius_samples: k.get("landscape.frobenius_samples", d.frobenius_samples)?,
            lanczos_steps: k.get("landscape.lanczos_steps", d.lanczos_steps)?,
        },
    }))
}

fn theory(k: &mut Keys) -> Result<Option<TheorySpec>> {
    if !k.has_section("theory.") {
        return Ok(None);
    }
    let d = TheorySpec::default();
    Ok(Some(TheorySpec {
        alpha: k.get("theory.alpha", d.alpha)?,
        beta: k.get("theory.beta", d.beta)?,
        c: k.get("theory.c", d.c)?,
        sigmas: k.list("theory.sigmas")?.unwrap_or(d.sigmas),
        steps: k.list("theory.steps")?.unwrap_or(d.steps),
        m: k.get("theory.m", d.m)?,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_empty_file() {
        let c = Config::parse("# nothing\n\n").unwrap();
        let e = &c.experiment;
        assert_eq!(
            e.stop,
            StopConfig {
                loss_threshold: 0.01,
                max_epochs: 300
            }
        );
        assert_eq!(e.seeds, vec![0]);
        assert_eq!(e.train.optimizer, OptimizerSpec::Msgd);
        assert!(c.sweep.is_none() && c.landscape.is_none() && c.theory.is_none());
    }

    #[test]
    fn full_lpf_config() {
        let text = "
            dataset.kind = moons
            dataset.n = 200
            dataset.label_noise = 0.2
            model.hidden = 16, 16
            optimizer.name = lpf_sgd   # smoothed
            optimizer.gamma0 = 0.001
            optimizer.mc_splits = 4
            optimizer.sigma_mode = squared_norm
            measures.list = lpf, trace
            run.seeds = 1, 2, 3
        ";
        let c = Config::parse(text).unwrap();
        let e = c.experiment;
        assert_eq!(e.hidden, vec![16, 16]);
        assert_eq!(e.seeds, vec![1, 2, 3]);
        assert_eq!(e.data.label_noise, 0.2);
        match e.train.optimizer {
            OptimizerSpec::LpfSgd(l) => {
                assert_eq!(
                    (l.gamma0, l.mc_splits, l.sigma_mode),
                    (0.001, 4, SigmaMode::SquaredNorm)
                );
            }
            o => panic!("{o:?}"),
        }
        assert_eq!(
            e.measures.measures,
            vec![MeasureName::Lpf, MeasureName::Trace]
        );
    }

    #[test]
    fn unknown_and_inapplicable_keys_fail_with_line() {
        let err = Config::parse("optimizer.name = msgd\noptimizer.lrr = 0.1\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(
            err.to_string().contains("2:") && err.to_string().contains("optimizer.lrr"),
            "{err}"
        );
        // rho only applies to SAM
        let err = Config::parse("optimizer.rho = 0.05\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("optimizer.rho"), "{err}");
        assert!(Config::parse("optimizer.name = sam\noptimizer.rho = 0.05\n").is_ok());
    }

    #[test]
    fn malformed_lines() {
        assert!(Config::parse("just words\n")
            .unwrap_err()
            .to_string()
            .contains("1:"));
        assert!(Config::parse("optimizer.lr = fast\n").is_err());
        assert!(Config::parse("optimizer.lr = 0.1\noptimizer.lr = 0.2\n").is_err());
        assert!(Config::parse("stop.loss_threshold = 0\n").is_err());
        assert!(Config::parse("run.seeds = \n").is_err());
        assert!(Config::parse("optimizer.name = entropy_sgd\noptimizer.gamma = 0\n").is_err());
    }

    #[test]
    fn local_entropy_gamma_is_required() {
        assert!(Config::parse("measures.list = local_entropy_grad\n").is_err());
        assert!(Config::parse(
            "measures.list = local_entropy_grad\nmeasures.local_entropy.steps = 5\n"
        )
        .is_err());
        let c = Config::parse(
            "measures.list = local_entropy_grad\nmeasures.local_entropy.gamma = 0.1\n",
        )
        .unwrap();
        assert_eq!(c.experiment.measures.local_entropy.unwrap().gamma, 0.1);
    }

    #[test]
    fn sweep_points_override() {
        let c = Config::parse("sweep.axis = width\nsweep.values = 4, 8\nmodel.hidden = 32, 32\n")
            .unwrap();
        assert_eq!(c.sweep_point("8").unwrap().experiment.hidden, vec![8, 8]);
        let c = Config::parse(
            "sweep.axis = hyperparam\nsweep.param = optimizer.lr\nsweep.values = 0.1, 0.01\n",
        )
        .unwrap();
        assert_eq!(c.sweep_point("0.01").unwrap().experiment.train.lr, 0.01);
        assert_eq!(c.sweep.as_ref().unwrap().label(), "optimizer.lr");
        // a point that would be invalid is caught up front
        assert!(Config::parse("sweep.axis = label_noise\nsweep.values = 0.1, 1.5\n").is_err());
        assert!(Config::parse(
            "sweep.axis = hyperparam\nsweep.param = optimizer.bogus\nsweep.values = 1\n"
        )
        .is_err());
    }

    #[test]
    fn hash_ignores_seeds_only() {
        let a = Config::parse("run.seeds = 1\n").unwrap().experiment;
        let b = Config::parse("run.seeds = 2, 3\n").unwrap().experiment;
        let c = Config::parse("optimizer.lr = 0.2\n").unwrap().experiment;
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
