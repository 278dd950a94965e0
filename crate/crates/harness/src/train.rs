//! Train-to-threshold runs.

use std::path::PathBuf;

use flatmin_core::autodiff::{logits, Examples};
use flatmin_core::models::{balance, build_mlp};
use flatmin_core::optimizers::{OptimizerSpec, StepContext, StepRecord};
use flatmin_core::sharpness::{compute_measures, MeasureConfig, MeasureReport};
use flatmin_core::{rng, Batch, MlpObjective, Model, Objective, OptimizerState, ParamVector};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{inject_data_noise, inject_label_noise, load_dataset, Dataset, Split};
use crate::error::Result;

const SHUFFLE: u64 = 0x5a;
const INIT: u64 = 0x1417;
const OPTIMIZER: u64 = 0x0b7;
const LABEL_NOISE: u64 = 0x1abe;
const DATA_NOISE: u64 = 0xda7a;
const MEASURES: u64 = 0x3ea5;

/// Training loss beyond which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub optimizer: String,
    pub final_train_loss: f64,
    pub final_train_error: f64,
    pub test_error: f64,
    pub epochs: usize,
    pub steps: u64,
    pub converged: bool,
    /// Why the run stopped early, if it did.
    pub failure: Option<String>,
    pub measures: Vec<MeasureReport>,
    /// Relative to the output directory; set by whoever writes the log.
    pub step_log: Option<PathBuf>,
}

impl RunRecord {
    pub const CSV_HEADER: &'static str =
        "run_id,config_hash,seed,optimizer,final_train_loss,final_train_error,test_error,epochs,steps,converged,failure,step_log";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.config_hash,
            self.seed,
            self.optimizer,
            self.final_train_loss,
            self.final_train_error,
            self.test_error,
            self.epochs,
            self.steps,
            self.converged,
            self.failure.as_deref().unwrap_or("").replace(',', ";"),
            self.step_log
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        )
    }

    pub fn gap(&self) -> f64 {
        flatmin_core::analysis::generalization_gap(self.final_train_error, self.test_error)
    }

    pub fn measure(&self, name: &str) -> Option<f64> {
        self.measures
            .iter()
            .find(|m| m.name.as_str() == name)
            .map(|m| m.value)
    }
}

/// A finished run with the artifacts needed to checkpoint or re-measure it.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub model: Model,
    pub init: ParamVector,
    /// Final parameters as trained (not balanced).
    pub params: ParamVector,
    pub train: Dataset,
    pub test: Dataset,
    pub step_log: Vec<StepRecord>,
}

/// Train and test splits after the configured noise, which touches the
/// training split only.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut train = load_dataset(&cfg.data.train, Split::Train)?;
    let test = load_dataset(&cfg.data.test, Split::Test)?;
    if cfg.data.label_noise > 0.0 {
        train = inject_label_noise(
            &train,
            cfg.data.label_noise,
            rng::derive_seed(seed, &[LABEL_NOISE]),
        )?;
    }
    if cfg.data.data_noise > 0.0 {
        train = inject_data_noise(
            &train,
            cfg.data.data_noise,
            rng::derive_seed(seed, &[DATA_NOISE]),
        )?;
    }
    if train.dim() != test.dim() || train.classes != test.classes {
        return Err(crate::HarnessError::config(
            "train and test splits differ in shape",
        ));
    }
    Ok((train, test))
}

/// The network of a run and its initialization, sized to the data.
pub fn build_network(
    cfg: &ExperimentConfig,
    train: &Dataset,
    seed: u64,
) -> Result<(Model, ParamVector)> {
    let mut sizes = vec![train.dim()];
    sizes.extend(&cfg.hidden);
    sizes.push(train.classes);
    Ok(build_mlp::<f64>(&sizes, rng::derive_seed(seed, &[INIT]))?)
}

/// Fraction of rows whose arg-max logit differs from the label.
pub fn error_rate(model: &Model, params: &ParamVector, data: &Batch) -> Result<f64> {
    let z = logits(model, params, data.inputs())?;
    let wrong = (0..data.len())
        .filter(|&i| {
            let row = z.row(i);
            let pred = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            pred != data.labels()[i]
        })
        .count();
    Ok(wrong as f64 / data.len().max(1) as f64)
}

/// Measure settings of a run: the stochastic knobs are keyed by the run seed,
/// so runs differing only in the optimizer share random numbers.
pub fn run_measure_config(cfg: &MeasureConfig, seed: u64) -> MeasureConfig {
    MeasureConfig {
        seed: rng::derive_seed(seed, &[MEASURES, cfg.seed]),
        ..cfg.clone()
    }
}

fn diverged(loss: f64) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_LOSS
}

/// Trains epoch by epoch on shuffled mini-batches until the full training loss
/// reaches the threshold or the epoch budget runs out, then balances the
/// network and evaluates the configured measures on converged runs.
pub fn train_to_threshold(cfg: &ExperimentConfig, seed: u64, run_id: &str) -> Result<RunOutcome> {
    let (train, test) = prepare_data(cfg, seed)?;
    let (model, init) = build_network(cfg, &train, seed)?;
    let train_batch = train.to_batch();
    let test_batch = test.to_batch();
    let obj = MlpObjective::new(&model, &train_batch);

    let n = train.len();
    let bs = cfg.train.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(bs);
    let group = cfg.train.optimizer.batches_per_step();
    let steps_per_epoch = batches_per_epoch.div_ceil(group);
    let mut spec = cfg.train.optimizer.clone();
    if let OptimizerSpec::LpfSgd(l) = &mut spec {
        l.total_steps = (cfg.stop.max_epochs * steps_per_epoch) as u64;
    }

    let mut state = OptimizerState::new(
        init.clone(),
        cfg.train.lr,
        cfg.train.momentum,
        cfg.train.weight_decay,
    )?;
    let opt_seed = rng::derive_seed(seed, &[OPTIMIZER]);
    let mut log = Vec::new();
    let mut failure = None;
    let mut loss = obj.loss(&state.params, Examples::All)?;
    let mut epochs = 0;

    'epochs: for epoch in 0..cfg.stop.max_epochs {
        let perm = rng::permutation(&mut rng::stream(seed, &[SHUFFLE, epoch as u64]), n);
        let batches: Vec<&[usize]> = perm.chunks(bs).collect();
        for chunk in batches.chunks(group) {
            let mut step_spec = spec.clone();
            if let OptimizerSpec::LpfSgd(l) = &mut step_spec {
                l.mc_splits = l.mc_splits.min(chunk[0].len());
            }
            match step_spec.step(
                &mut state,
                &obj,
                chunk,
                StepContext {
                    seed: opt_seed,
                    epoch: epoch as u64,
                },
            ) {
                Ok(rec) => log.push(rec),
                Err(e) if e.is_numeric() => {
                    failure = Some(format!("diverged in epoch {epoch}: {e}"));
                    loss = f64::NAN;
                    epochs = epoch + 1;
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            }
        }
        epochs = epoch + 1;
        loss = match obj.loss(&state.params, Examples::All) {
            Ok(l) => l,
            Err(e) if e.is_numeric() => f64::NAN,
            Err(e) => return Err(e.into()),
        };
        if diverged(loss) {
            failure = Some(format!("diverged in epoch {epoch}: training loss {loss}"));
            break;
        }
        if loss <= cfg.stop.loss_threshold {
            break;
        }
    }

    let converged = failure.is_none() && loss <= cfg.stop.loss_threshold;
    let (train_error, test_error) = if failure.is_none() {
        (
            error_rate(&model, &state.params, &train_batch)?,
            error_rate(&model, &state.params, &test_batch)?,
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    let measures = if converged && !cfg.measures.measures.is_empty() {
        let (balanced, _) = balance(&model, &state.params)?;
        let mcfg = run_measure_config(&cfg.measures, seed);
        compute_measures(
            &model,
            &balanced,
            &init,
            &train_batch,
            &mcfg,
            &train.provenance.source,
        )?
    } else {
        vec![]
    };

    let record = RunRecord {
        run_id: run_id.to_string(),
        config_hash: cfg.hash(),
        seed,
        optimizer: spec.name().to_string(),
        final_train_loss: loss,
        final_train_error: train_error,
        test_error,
        epochs,
        steps: state.step,
        converged,
        failure,
        measures,
        step_log: None,
    };
    Ok(RunOutcome {
        record,
        model,
        init,
        params: state.params,
        train,
        test,
        step_log: log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn cfg(extra: &str) -> ExperimentConfig {
        let base = "dataset.n = 100\ndataset.n_test = 100\ndataset.separation = 4\ndataset.noise = 0.5\nmodel.hidden = 8\n";
        Config::parse(&format!("{base}{extra}")).unwrap().experiment
    }

    #[test]
    fn zero_epochs_is_not_converged() {
        let out =
            train_to_threshold(&cfg("stop.max_epochs = 0\nmeasures.list = lpf\n"), 0, "r").unwrap();
        assert!(!out.record.converged);
        assert_eq!(out.record.epochs, 0);
        assert!(out.record.measures.is_empty());
        assert!(out.step_log.is_empty());
    }

    #[test]
    fn deterministic_records() {
        let c = cfg("optimizer.name = lpf_sgd\noptimizer.mc_splits = 2\nstop.max_epochs = 5\n");
        let mut a = train_to_threshold(&c, 3, "r").unwrap();
        let b = train_to_threshold(&c, 3, "r").unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.params, b.params);
        a.step_log.iter_mut().for_each(|r| r.wallclock_ns = 0);
        assert!(a.step_log.iter().zip(&b.step_log).all(|(x, y)| StepRecord {
            wallclock_ns: 0,
            ..y.clone()
        } == *x));
        let c2 = train_to_threshold(&c, 4, "r").unwrap();
        assert_ne!(a.params, c2.params);
    }

    #[test]
    fn divergence_is_recorded() {
        let out =
            train_to_threshold(&cfg("optimizer.lr = 1e6\nstop.max_epochs = 20\n"), 0, "r").unwrap();
        assert!(!out.record.converged);
        assert!(out.record.failure.as_deref().unwrap().contains("diverged"));
    }

    #[test]
    fn converged_run_has_measures() {
        let out = train_to_threshold(
            &cfg("stop.max_epochs = 200\nmeasures.list = lpf, frn\n"),
            1,
            "r",
        )
        .unwrap();
        let r = out.record;
        assert!(r.converged, "{r:?}");
        assert!(r.final_train_loss <= 0.01);
        assert_eq!(r.measures.len(), 2);
        assert!(r.measure("lpf").unwrap() > 0.0);
    }

    #[test]
    fn entropy_sgd_consumes_groups() {
        let out = train_to_threshold(
            &cfg("optimizer.name = entropy_sgd\noptimizer.inner_steps = 2\nstop.max_epochs = 1\n"),
            0,
            "r",
        )
        .unwrap();
        // 100 examples in batches of 32: 4 batches, 2 per step
        assert_eq!(out.record.steps, 2);
    }
}
