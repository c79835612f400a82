use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use super::data::{generate_task, Dataset, TaskParams};
use super::eval::{evaluate_with_scale, Condition};
use super::report::{ConditionCells, JobOutcome, ProtocolReport, ReportRow};
use crate::error::{Error, Result};
use crate::nn::{Model, QuantScope};
use crate::train::{train_float, train_qat, NullSink, TrainConfig};

/// A stack of identical LSTM layers, written `LxN` or `LxNpP`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Architecture {
    pub layers: usize,
    pub cells: usize,
    pub projection: Option<usize>,
}

impl Architecture {
    pub fn layer_spec(&self) -> Vec<(usize, Option<usize>)> {
        alloc::vec![(self.cells, self.projection); self.layers]
    }

    pub fn build(&self, input_dim: usize, n_classes: usize, seed: u64) -> Result<Model> {
        Model::random(input_dim, n_classes, &self.layer_spec(), seed)
    }

    pub fn param_count(&self, input_dim: usize, n_classes: usize) -> Result<usize> {
        Ok(self.build(input_dim, n_classes, 0)?.param_count())
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.layers, self.cells)?;
        if let Some(p) = self.projection {
            write!(f, "p{p}")?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::invalid(format!(
                "architecture `{s}` is not of the form LxN or LxNpP"
            ))
        };
        let (layers, rest) = s.trim().split_once('x').ok_or_else(bad)?;
        let (cells, projection) = match rest.split_once('p') {
            Some((c, p)) => (c, Some(p.parse::<usize>().map_err(|_| bad())?)),
            None => (rest, None),
        };
        let arch = Architecture {
            layers: layers.parse().map_err(|_| bad())?,
            cells: cells.parse().map_err(|_| bad())?,
            projection,
        };
        if arch.cells == 0 || projection == Some(0) {
            return Err(bad());
        }
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProtocolConfig {
    pub architectures: Vec<Architecture>,
    /// Each seed initializes the model and drives batch sampling.
    pub seeds: Vec<u64>,
    pub task: TaskParams,
    /// `seed` and `quant_scope` are overridden per job.
    pub train: TrainConfig,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.architectures.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid(
                "protocol needs at least one architecture and one seed",
            ));
        }
        self.task.validate()?;
        let mut t = self.train;
        t.quant_scope = QuantScope::Quant;
        t.validate()
    }
}

/// Float training, then `quant` and `quant-all` fine-tunes branched from
/// the same float checkpoint with the same seed, each evaluated on both
/// evaluation sets.
pub fn run_job(
    data: &Dataset,
    arch: &Architecture,
    train: &TrainConfig,
    seed: u64,
) -> Result<JobOutcome> {
    let p = &data.params;
    let mut cfg = *train;
    cfg.seed = seed;
    let mut model = arch.build(p.input_dim, p.n_classes, seed)?;
    train_float(&mut model, &data.train, &data.heldout, &cfg, &mut NullSink)?;

    let mut acc = [[0.0; 4]; 2];
    for (k, set) in [&data.eval_clean, &data.eval_noisy].into_iter().enumerate() {
        acc[k][0] = evaluate_with_scale(&model, set, Condition::Match, cfg.weight_scale)?;
        acc[k][1] = evaluate_with_scale(&model, set, Condition::Mismatch, cfg.weight_scale)?;
    }
    for (scope, cond, col) in [
        (QuantScope::Quant, Condition::Quant, 2),
        (QuantScope::QuantAll, Condition::QuantAll, 3),
    ] {
        let mut tuned = model.clone();
        cfg.quant_scope = scope;
        train_qat(
            &mut tuned,
            &data.train,
            &data.heldout,
            &cfg,
            scope,
            &mut NullSink,
        )?;
        for (k, set) in [&data.eval_clean, &data.eval_noisy].into_iter().enumerate() {
            acc[k][col] = evaluate_with_scale(&tuned, set, cond, cfg.weight_scale)?;
        }
    }
    let cells = |a: [f64; 4]| ConditionCells {
        matched: a[0],
        mismatch: a[1],
        quant: a[2],
        quant_all: a[3],
    };
    Ok(JobOutcome {
        clean: cells(acc[0]),
        noisy: cells(acc[1]),
    })
}

/// Builds the report from `results[a]`, the per-seed outcomes of
/// `cfg.architectures[a]`.
pub fn assemble_report(
    cfg: &ProtocolConfig,
    results: Vec<Vec<(u64, Result<JobOutcome>)>>,
) -> Result<ProtocolReport> {
    if results.len() != cfg.architectures.len() {
        return Err(Error::invalid("one result list per architecture required"));
    }
    let rows = cfg
        .architectures
        .iter()
        .zip(results)
        .map(|(arch, outcomes)| {
            let params = arch.param_count(cfg.task.input_dim, cfg.task.n_classes)?;
            let outcomes = outcomes
                .into_iter()
                .map(|(seed, r)| (seed, r.map_err(|e| e.to_string())))
                .collect();
            Ok(ReportRow::from_outcomes(arch.to_string(), params, outcomes))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolReport::new(rows))
}

/// Runs every architecture and seed in order. `on_job` sees each outcome
/// as it completes. Job errors are recorded in the report rather than
/// returned.
pub fn run_protocol_with(
    cfg: &ProtocolConfig,
    on_job: &mut dyn FnMut(&Architecture, u64, &Result<JobOutcome>),
) -> Result<ProtocolReport> {
    cfg.validate()?;
    let data = generate_task(&cfg.task)?;
    let results = cfg
        .architectures
        .iter()
        .map(|arch| {
            cfg.seeds
                .iter()
                .map(|&seed| {
                    let r = run_job(&data, arch, &cfg.train, seed);
                    on_job(arch, seed, &r);
                    (seed, r)
                })
                .collect()
        })
        .collect();
    assemble_report(cfg, results)
}

pub fn run_protocol(cfg: &ProtocolConfig) -> Result<ProtocolReport> {
    run_protocol_with(cfg, &mut |_, _, _| {})
}
