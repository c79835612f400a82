use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::FloatMatrix;
use crate::train::Sequence;

/// Frames in the label window.
pub const WINDOW: usize = 5;
const WINDOW_WEIGHTS: [f64; WINDOW] = [1.0, 0.8, 0.6, 0.4, 0.2];
const COMPONENTS: usize = 4;
const STAY_PROB: f64 = 0.8;
const COMPONENT_SPREAD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskParams {
    pub seed: u64,
    /// Training sequences.
    pub n_sequences: usize,
    /// Sequences in each of the held-out and evaluation splits.
    pub n_eval_sequences: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    /// Standard deviation of the noise added to the noisy evaluation split.
    pub noise_level: f64,
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_sequences == 0
            || self.n_eval_sequences == 0
            || self.seq_len == 0
            || self.input_dim == 0
        {
            return Err(Error::invalid("task sizes must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::invalid(
                "noise_level must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Split {
    Train,
    Heldout,
    EvalClean,
    EvalNoisy,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::Heldout,
        Split::EvalClean,
        Split::EvalNoisy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "held-out",
            Split::EvalClean => "eval-clean",
            Split::EvalNoisy => "eval-noisy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub params: TaskParams,
    pub train: Vec<Sequence>,
    pub heldout: Vec<Sequence>,
    pub eval_clean: Vec<Sequence>,
    pub eval_noisy: Vec<Sequence>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sequence] {
        match split {
            Split::Train => &self.train,
            Split::Heldout => &self.heldout,
            Split::EvalClean => &self.eval_clean,
            Split::EvalNoisy => &self.eval_noisy,
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

struct Generator {
    means: Vec<Vec<f64>>,
    direction: Vec<f64>,
    input_dim: usize,
    seq_len: usize,
}

impl Generator {
    fn new(p: &TaskParams) -> Self {
        let mut rng = rng_for(p.seed, 0);
        let means = (0..COMPONENTS)
            .map(|_| (0..p.input_dim).map(|_| normal(&mut rng)).collect())
            .collect();
        let s = 1.0 / math::sqrt(p.input_dim as f64);
        let direction = (0..p.input_dim).map(|_| s * normal(&mut rng)).collect();
        Self {
            means,
            direction,
            input_dim: p.input_dim,
            seq_len: p.seq_len,
        }
    }

    /// Inputs and window scores of one sequence.
    fn sequence(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let mut inputs = Vec::with_capacity(self.seq_len * self.input_dim);
        let mut projections = Vec::with_capacity(self.seq_len);
        let mut component = rng.random_range(0..COMPONENTS);
        for _ in 0..self.seq_len {
            if !rng.random_bool(STAY_PROB) {
                component = rng.random_range(0..COMPONENTS);
            }
            let mut proj = 0.0;
            for (mu, u) in self.means[component].iter().zip(&self.direction) {
                let x = mu + COMPONENT_SPREAD * normal(rng);
                proj += u * x;
                inputs.push(x);
            }
            projections.push(proj);
        }
        let scores = (0..self.seq_len)
            .map(|t| {
                WINDOW_WEIGHTS
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j <= t)
                    .map(|(j, a)| a * projections[t - j])
                    .sum()
            })
            .collect();
        (inputs, scores)
    }

    fn split(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..n).map(|_| self.sequence(rng)).collect()
    }
}

/// Number of thresholds at or below `score`.
fn bin(score: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().filter(|&&t| t <= score).count()
}

/// Generates the four splits of a synthetic frame-labelling task.
///
/// Inputs follow a Gaussian mixture whose component persists across frames.
/// A frame's label is the quantile bin of a weighted sum of input
/// projections over the last [`WINDOW`] frames, so classes are balanced on
/// the training split and labels depend on temporal context. The noisy
/// split is the clean evaluation split with seeded Gaussian noise added to
/// the inputs.
pub fn generate_task(params: &TaskParams) -> Result<Dataset> {
    params.validate()?;
    let gen = Generator::new(params);
    let train = gen.split(&mut rng_for(params.seed, 1), params.n_sequences);
    let heldout = gen.split(&mut rng_for(params.seed, 2), params.n_eval_sequences);
    let eval = gen.split(&mut rng_for(params.seed, 3), params.n_eval_sequences);

    let mut all: Vec<f64> = train.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    all.sort_by(f64::total_cmp);
    let c = params.n_classes;
    let thresholds: Vec<f64> = (1..c).map(|k| all[k * all.len() / c]).collect();

    let d = params.input_dim;
    let build = |raw: &[(Vec<f64>, Vec<f64>)]| -> Result<Vec<Sequence>> {
        raw.iter()
            .map(|(x, s)| {
                let labels = s.iter().map(|&v| bin(v, &thresholds)).collect();
                Sequence::new(FloatMatrix::new(params.seq_len, d, x.clone())?, labels)
            })
            .collect()
    };
    let train_seqs = build(&train)?;
    let heldout_seqs = build(&heldout)?;
    let eval_clean = build(&eval)?;

    let mut noise_rng = rng_for(params.seed, 4);
    let eval_noisy = eval_clean
        .iter()
        .map(|seq| {
            let values = seq
                .inputs
                .as_slice()
                .iter()
                .map(|&x| {
                    let n = normal(&mut noise_rng);
                    if params.noise_level == 0.0 {
                        x
                    } else {
                        x + params.noise_level * n
                    }
                })
                .collect();
            Sequence::new(
                FloatMatrix::new(params.seq_len, d, values)?,
                seq.labels.clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        params: *params,
        train: train_seqs,
        heldout: heldout_seqs,
        eval_clean,
        eval_noisy,
    })
}

/// Frequency of the most common label in `data`, the accuracy of a
/// majority-class predictor.
pub fn majority_accuracy(data: &[Sequence], n_classes: usize) -> f64 {
    let mut counts = vec![0usize; n_classes];
    let mut total = 0usize;
    for s in data {
        for &l in &s.labels {
            counts[l] += 1;
            total += 1;
        }
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    if total == 0 {
        0.0
    } else {
        best as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> TaskParams {
        TaskParams {
            seed: 11,
            n_sequences: 6,
            n_eval_sequences: 3,
            seq_len: 20,
            input_dim: 4,
            n_classes: 3,
            noise_level: 0.5,
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            generate_task(&params()).unwrap(),
            generate_task(&params()).unwrap()
        );
        let mut other = params();
        other.seed = 12;
        assert_ne!(
            generate_task(&params()).unwrap(),
            generate_task(&other).unwrap()
        );
    }

    #[test]
    fn zero_noise_copies_clean_split() {
        let mut p = params();
        p.noise_level = 0.0;
        let d = generate_task(&p).unwrap();
        assert_eq!(d.eval_clean, d.eval_noisy);
    }

    #[test]
    fn noise_touches_inputs_only() {
        let d = generate_task(&params()).unwrap();
        for (c, n) in d.eval_clean.iter().zip(&d.eval_noisy) {
            assert_eq!(c.labels, n.labels);
            assert_ne!(c.inputs, n.inputs);
        }
    }

    #[test]
    fn shapes_and_label_range() {
        let p = params();
        let d = generate_task(&p).unwrap();
        assert_eq!(d.train.len(), 6);
        for split in Split::ALL {
            for s in d.split(split) {
                assert_eq!(s.inputs.shape(), (20, 4));
                assert!(s.labels.iter().all(|&l| l < 3));
            }
        }
    }

    #[test]
    fn training_classes_are_balanced() {
        let mut p = params();
        p.n_sequences = 50;
        let d = generate_task(&p).unwrap();
        let maj = majority_accuracy(&d.train, 3);
        assert!(maj < 0.34, "{maj}");
    }

    #[test]
    fn invalid_sizes() {
        for f in [
            |p: &mut TaskParams| p.n_sequences = 0,
            |p: &mut TaskParams| p.seq_len = 0,
            |p: &mut TaskParams| p.input_dim = 0,
            |p: &mut TaskParams| p.n_classes = 1,
            |p: &mut TaskParams| p.noise_level = -1.0,
        ] {
            let mut p = params();
            f(&mut p);
            assert!(matches!(generate_task(&p), Err(Error::InvalidArgument(_))));
        }
    }
}
