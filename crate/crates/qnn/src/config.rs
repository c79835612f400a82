//! Flat key-value protocol configuration.
//!
//! One `key = value` pair per line; `#` starts a comment; blank lines are
//! ignored. Unknown and repeated keys are errors. Every key is optional and
//! falls back to [`default_protocol`].
//!
//! ```text
//! architectures = 2x64p32, 1x32     # LxN or LxNpP, comma separated
//! seeds = 1, 2, 3, 4, 5
//!
//! task.seed = 1
//! task.train_sequences = 200
//! task.eval_sequences = 100          # held-out and each evaluation split
//! task.seq_len = 100
//! task.input_dim = 8
//! task.n_classes = 4
//! task.noise = 0.5
//!
//! train.batch_size = 8
//! train.bptt_len = 20
//! train.weight_scale = 255           # 1..=255
//! train.grad_clip = 5                # or `none`
//!
//! phase1.steps = 1500
//! phase1.c_g = 2
//! phase1.t_g = 0.5
//! phase1.proj_lr = scheduled         # none | scheduled | constant
//! phase1.c_p = 0.001
//! phase1.t_p = 0.3
//! phase1.c_p_const = 0.5
//! phase1.steps_per_unit = 1500       # defaults to the phase's step count
//! phase2.steps = 400                 # same keys as phase1
//! ```
//!
//! Schedule times `t_g` and `t_p` are measured in units of
//! `steps_per_unit` steps, so with the default they are fractions of the
//! phase.

use std::collections::BTreeMap;

use qnn_core::task::{Architecture, ProtocolConfig, TaskParams};
use qnn_core::train::{LrConfig, PhaseConfig, ProjSchedule, TrainConfig};
use qnn_core::QuantScope;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    /// 1-based; 0 for errors not tied to a line.
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

/// Projection schedule family, as named on the command line and in config
/// files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ProjLrKind {
    None,
    Scheduled,
    Constant,
}

impl ProjLrKind {
    pub fn schedule(self, c_p: f64, t_p: f64, c_p_const: f64) -> ProjSchedule {
        match self {
            ProjLrKind::None => ProjSchedule::None,
            ProjLrKind::Scheduled => ProjSchedule::Scheduled { c_p, t_p },
            ProjLrKind::Constant => ProjSchedule::Constant { c: c_p_const },
        }
    }
}

/// The toy-scale protocol used when no config is given.
pub fn default_protocol() -> ProtocolConfig {
    ProtocolConfig {
        architectures: vec![Architecture {
            layers: 2,
            cells: 64,
            projection: Some(32),
        }],
        seeds: vec![1, 2, 3, 4, 5],
        task: TaskParams {
            seed: 1,
            n_sequences: 200,
            n_eval_sequences: 100,
            seq_len: 100,
            input_dim: 8,
            n_classes: 4,
            noise_level: 0.5,
        },
        train: TrainConfig {
            seed: 0,
            batch_size: 8,
            bptt_len: 20,
            phase1: PhaseConfig {
                steps: 1500,
                lr: LrConfig {
                    c_g: 2.0,
                    t_g: 0.5,
                    proj: ProjSchedule::Scheduled {
                        c_p: 1e-3,
                        t_p: 0.3,
                    },
                    steps_per_unit: 1500.0,
                },
            },
            phase2: PhaseConfig {
                steps: 400,
                lr: LrConfig {
                    c_g: 0.03,
                    t_g: 1.0,
                    proj: ProjSchedule::Constant { c: 0.5 },
                    steps_per_unit: 400.0,
                },
            },
            quant_scope: QuantScope::Quant,
            weight_scale: 255,
            grad_clip: Some(5.0),
            eval_every: 0,
        },
    }
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, into: &mut T) -> Result<(), ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, v)) = self.take(key) {
            *into = v.parse().map_err(|e| err(line, format!("{key}: {e}")))?;
        }
        Ok(())
    }

    fn list<T: std::str::FromStr>(
        &mut self,
        key: &str,
        into: &mut Vec<T>,
    ) -> Result<(), ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, v)) = self.take(key) {
            *into = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|e| err(line, format!("{key}: `{s}`: {e}")))
                })
                .collect::<Result<_, _>>()?;
        }
        Ok(())
    }

    fn phase(&mut self, name: &str, phase: &mut PhaseConfig) -> Result<(), ConfigError> {
        let key = |k: &str| format!("{name}.{k}");
        let steps_line = self.map.get(&key("steps")).map(|e| e.0);
        self.parse(&key("steps"), &mut phase.steps)?;
        self.parse(&key("c_g"), &mut phase.lr.c_g)?;
        self.parse(&key("t_g"), &mut phase.lr.t_g)?;

        let (mut c_p, mut t_p, mut c_const) = match phase.lr.proj {
            ProjSchedule::Scheduled { c_p, t_p } => (c_p, t_p, 0.5),
            ProjSchedule::Constant { c } => (1e-3, 0.3, c),
            ProjSchedule::None => (1e-3, 0.3, 0.5),
        };
        let mut kind = match phase.lr.proj {
            ProjSchedule::None => ProjLrKind::None,
            ProjSchedule::Scheduled { .. } => ProjLrKind::Scheduled,
            ProjSchedule::Constant { .. } => ProjLrKind::Constant,
        };
        if let Some((line, v)) = self.take(&key("proj_lr")) {
            kind = clap::ValueEnum::from_str(&v, false)
                .map_err(|e| err(line, format!("{}: {e}", key("proj_lr"))))?;
        }
        self.parse(&key("c_p"), &mut c_p)?;
        self.parse(&key("t_p"), &mut t_p)?;
        self.parse(&key("c_p_const"), &mut c_const)?;
        phase.lr.proj = kind.schedule(c_p, t_p, c_const);

        match self.take(&key("steps_per_unit")) {
            Some((line, v)) => {
                phase.lr.steps_per_unit = v
                    .parse()
                    .map_err(|e| err(line, format!("{}: {e}", key("steps_per_unit"))))?
            }
            None if steps_line.is_some() => phase.lr.steps_per_unit = phase.steps.max(1) as f64,
            None => {}
        }
        Ok(())
    }
}

/// Parses a config file on top of [`default_protocol`] and validates it.
pub fn parse_protocol_config(text: &str) -> Result<ProtocolConfig, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected `key = value`, found `{content}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(err(line, "empty key or value"));
        }
        if let Some((first, _)) = map.insert(k.to_string(), (line, v.to_string())) {
            return Err(err(line, format!("`{k}` already set on line {first}")));
        }
    }
    let mut e = Entries { map };
    let mut cfg = default_protocol();

    e.list("architectures", &mut cfg.architectures)?;
    e.list("seeds", &mut cfg.seeds)?;

    let t = &mut cfg.task;
    e.parse("task.seed", &mut t.seed)?;
    e.parse("task.train_sequences", &mut t.n_sequences)?;
    e.parse("task.eval_sequences", &mut t.n_eval_sequences)?;
    e.parse("task.seq_len", &mut t.seq_len)?;
    e.parse("task.input_dim", &mut t.input_dim)?;
    e.parse("task.n_classes", &mut t.n_classes)?;
    e.parse("task.noise", &mut t.noise_level)?;

    let tr = &mut cfg.train;
    e.parse("train.batch_size", &mut tr.batch_size)?;
    e.parse("train.bptt_len", &mut tr.bptt_len)?;
    e.parse("train.weight_scale", &mut tr.weight_scale)?;
    if let Some((line, v)) = e.take("train.grad_clip") {
        tr.grad_clip = match v.as_str() {
            "none" => None,
            s => Some(
                s.parse()
                    .map_err(|x| err(line, format!("train.grad_clip: {x}")))?,
            ),
        };
    }
    e.phase("phase1", &mut tr.phase1)?;
    e.phase("phase2", &mut tr.phase2)?;

    if let Some((key, (line, _))) = e.map.into_iter().min_by_key(|(_, (l, _))| *l) {
        return Err(err(line, format!("unknown key `{key}`")));
    }
    cfg.validate().map_err(|x| err(0, x.to_string()))?;
    Ok(cfg)
}
