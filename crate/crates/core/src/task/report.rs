use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use super::eval::{frame_error, relative_loss, Condition};

/// Frame accuracy under each evaluation condition.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConditionCells {
    #[cfg_attr(feature = "serde", serde(rename = "match"))]
    pub matched: f64,
    pub mismatch: f64,
    pub quant: f64,
    #[cfg_attr(feature = "serde", serde(rename = "quant-all"))]
    pub quant_all: f64,
}

impl ConditionCells {
    pub fn from_fn(mut f: impl FnMut(Condition) -> f64) -> Self {
        Self {
            matched: f(Condition::Match),
            mismatch: f(Condition::Mismatch),
            quant: f(Condition::Quant),
            quant_all: f(Condition::QuantAll),
        }
    }

    pub fn get(&self, c: Condition) -> f64 {
        match c {
            Condition::Match => self.matched,
            Condition::Mismatch => self.mismatch,
            Condition::Quant => self.quant,
            Condition::QuantAll => self.quant_all,
        }
    }
}

/// Relative frame-error loss against `match` for the three other
/// conditions; `None` when the match error is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RelativeLosses {
    pub mismatch: Option<f64>,
    pub quant: Option<f64>,
    #[cfg_attr(feature = "serde", serde(rename = "quant-all"))]
    pub quant_all: Option<f64>,
}

impl RelativeLosses {
    pub fn from_accuracies(acc: &ConditionCells) -> Self {
        let m = frame_error(acc.matched);
        Self {
            mismatch: relative_loss(m, frame_error(acc.mismatch)),
            quant: relative_loss(m, frame_error(acc.quant)),
            quant_all: relative_loss(m, frame_error(acc.quant_all)),
        }
    }

    pub fn get(&self, c: Condition) -> Option<f64> {
        match c {
            Condition::Match => Some(0.0),
            Condition::Mismatch => self.mismatch,
            Condition::Quant => self.quant,
            Condition::QuantAll => self.quant_all,
        }
    }
}

/// Accuracies and relative losses on one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SetResult {
    pub accuracy: ConditionCells,
    pub relative_loss: RelativeLosses,
}

impl SetResult {
    pub fn new(accuracy: ConditionCells) -> Self {
        Self {
            relative_loss: RelativeLosses::from_accuracies(&accuracy),
            accuracy,
        }
    }
}

/// Result of one architecture trained with one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct JobOutcome {
    pub clean: ConditionCells,
    pub noisy: ConditionCells,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeedFailure {
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReportRow {
    pub architecture: String,
    pub params: usize,
    /// Seeds whose jobs completed.
    pub seeds: Vec<u64>,
    /// A row with any failed seed is marked failed.
    pub failures: Vec<SeedFailure>,
    /// Per-condition medians over the completed seeds.
    pub clean: Option<SetResult>,
    pub noisy: Option<SetResult>,
}

impl ReportRow {
    pub fn failed(&self) -> bool {
        !self.failures.is_empty() || self.clean.is_none()
    }
}

/// Unweighted column means of the relative losses over rows that did not
/// fail.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AverageRow {
    pub clean: RelativeLosses,
    pub noisy: RelativeLosses,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProtocolReport {
    pub rows: Vec<ReportRow>,
    pub average: AverageRow,
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl ReportRow {
    /// Builds a row from the per-seed outcomes.
    pub fn from_outcomes(
        architecture: String,
        params: usize,
        outcomes: Vec<(u64, Result<JobOutcome, String>)>,
    ) -> Self {
        let mut seeds = Vec::new();
        let mut ok = Vec::new();
        let mut failures = Vec::new();
        for (seed, r) in outcomes {
            match r {
                Ok(o) => {
                    seeds.push(seed);
                    ok.push(o);
                }
                Err(reason) => failures.push(SeedFailure { seed, reason }),
            }
        }
        let med = |pick: fn(&JobOutcome) -> &ConditionCells| {
            (!ok.is_empty()).then(|| {
                SetResult::new(ConditionCells::from_fn(|c| {
                    let v: Vec<f64> = ok.iter().map(|o| pick(o).get(c)).collect();
                    median(&v).unwrap_or(f64::NAN)
                }))
            })
        };
        Self {
            architecture,
            params,
            seeds,
            failures,
            clean: med(|o| &o.clean),
            noisy: med(|o| &o.noisy),
        }
    }
}

impl ProtocolReport {
    pub fn new(rows: Vec<ReportRow>) -> Self {
        let good: Vec<&ReportRow> = rows.iter().filter(|r| !r.failed()).collect();
        let avg = |pick: fn(&ReportRow) -> Option<SetResult>| {
            let col = |c: Condition| {
                mean(
                    good.iter()
                        .map(|r| pick(r).and_then(|s| s.relative_loss.get(c))),
                )
            };
            RelativeLosses {
                mismatch: col(Condition::Mismatch),
                quant: col(Condition::Quant),
                quant_all: col(Condition::QuantAll),
            }
        };
        let average = AverageRow {
            clean: avg(|r| r.clean),
            noisy: avg(|r| r.noisy),
        };
        Self { rows, average }
    }

    /// Aligned plain-text table: frame error in percent with the relative
    /// loss against `match` in parentheses.
    pub fn render_table(&self) -> String {
        const NAME: usize = 26;
        const CELL: usize = 15;
        let mut out = String::new();
        let set_width = CELL * 4;
        let _ = writeln!(
            out,
            "{:NAME$}| {:set_width$}| Frame error (%), noisy eval set",
            "", "Frame error (%), clean eval set"
        );
        let mut header = format!("{:NAME$}", "System (params)");
        for _ in 0..2 {
            header.push_str("| ");
            for c in Condition::ALL {
                let _ = write!(header, "{:CELL$}", c.name());
            }
        }
        let _ = writeln!(out, "{}", header.trim_end());
        let _ = writeln!(out, "{}", "-".repeat(NAME + 2 * (set_width + 2)));

        for row in &self.rows {
            let mut line = format!(
                "{:NAME$}",
                format!("{} ({})", row.architecture, format_params(row.params))
            );
            for set in [row.clean, row.noisy] {
                line.push_str("| ");
                match set {
                    Some(s) if !row.failed() => {
                        for c in Condition::ALL {
                            let _ = write!(line, "{:CELL$}", format_cell(&s, c));
                        }
                    }
                    _ => {
                        let _ = write!(line, "{:set_width$}", "failed");
                    }
                }
            }
            let _ = writeln!(out, "{}", line.trim_end());
        }

        let mut line = format!("{:NAME$}", "Avg. relative loss");
        for set in [self.average.clean, self.average.noisy] {
            line.push_str("| ");
            for c in Condition::ALL {
                let cell = match c {
                    Condition::Match => String::from("-"),
                    _ => set
                        .get(c)
                        .map_or_else(|| String::from("n/a"), format_relative),
                };
                let _ = write!(line, "{:CELL$}", cell);
            }
        }
        let _ = writeln!(out, "{}", line.trim_end());
        let _ = writeln!(
            out,
            "(average: unweighted mean over architectures; cells: median over seeds)"
        );
        out
    }
}

/// `"~37.1K"`, `"~2.9M"`.
pub fn format_params(n: usize) -> String {
    let n = n as f64;
    if n >= 1e6 {
        format!("~{:.1}M", n / 1e6)
    } else if n >= 1e3 {
        format!("~{:.1}K", n / 1e3)
    } else {
        format!("{n}")
    }
}

pub fn format_relative(r: f64) -> String {
    format!("{:.1}%", r * 100.0)
}

/// `"14.3 (5.1%)"`; the match column carries no annotation.
pub fn format_cell(set: &SetResult, c: Condition) -> String {
    let err = format!("{:.1}", frame_error(set.accuracy.get(c)) * 100.0);
    match c {
        Condition::Match => err,
        _ => match set.relative_loss.get(c) {
            Some(r) => format!("{err} ({})", format_relative(r)),
            None => format!("{err} (n/a)"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn outcome(m: f64, mm: f64, q: f64, qa: f64) -> JobOutcome {
        let c = ConditionCells {
            matched: m,
            mismatch: mm,
            quant: q,
            quant_all: qa,
        };
        JobOutcome { clean: c, noisy: c }
    }

    #[test]
    fn cell_formatting() {
        let s = SetResult::new(ConditionCells {
            matched: 1.0 - 0.136,
            mismatch: 1.0 - 0.143,
            quant: 1.0 - 0.136,
            quant_all: 1.0 - 0.130,
        });
        assert_eq!(format_cell(&s, Condition::Match), "13.6");
        assert_eq!(format_cell(&s, Condition::Mismatch), "14.3 (5.1%)");
        assert_eq!(format_cell(&s, Condition::QuantAll), "13.0 (-4.4%)");
        assert_eq!(format_params(2_916_000), "~2.9M");
        assert_eq!(format_params(37_100), "~37.1K");
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn row_uses_per_condition_medians() {
        let row = ReportRow::from_outcomes(
            "1x8".to_string(),
            100,
            vec![
                (1, Ok(outcome(0.9, 0.8, 0.85, 0.84))),
                (2, Ok(outcome(0.8, 0.7, 0.75, 0.70))),
                (3, Ok(outcome(0.85, 0.9, 0.80, 0.80))),
            ],
        );
        let clean = row.clean.unwrap();
        assert_eq!(clean.accuracy.matched, 0.85);
        assert_eq!(clean.accuracy.mismatch, 0.8);
        assert!(!row.failed());
        let rel = clean.relative_loss.mismatch.unwrap();
        assert!((rel - (0.2 - 0.15) / 0.15).abs() < 1e-12);
    }

    #[test]
    fn failures_mark_row_and_skip_average() {
        let good = ReportRow::from_outcomes(
            "a".to_string(),
            1,
            vec![(1, Ok(outcome(0.9, 0.8, 0.85, 0.85)))],
        );
        let bad = ReportRow::from_outcomes(
            "b".to_string(),
            1,
            vec![
                (1, Ok(outcome(0.5, 0.1, 0.1, 0.1))),
                (2, Err("diverged".to_string())),
            ],
        );
        assert!(bad.failed());
        let report = ProtocolReport::new(vec![good.clone(), bad]);
        assert_eq!(
            report.average.clean.mismatch,
            good.clean.unwrap().relative_loss.mismatch
        );
        let table = report.render_table();
        assert!(table.contains("failed"));
        assert!(table.contains("Avg. relative loss"));
    }

    #[test]
    fn average_is_unweighted_mean() {
        let a = ReportRow::from_outcomes(
            "a".to_string(),
            10,
            vec![(1, Ok(outcome(0.9, 0.8, 0.85, 0.85)))],
        );
        let b = ReportRow::from_outcomes(
            "b".to_string(),
            10_000,
            vec![(1, Ok(outcome(0.8, 0.7, 0.8, 0.75)))],
        );
        let ra = a.clean.unwrap().relative_loss.quant_all.unwrap();
        let rb = b.clean.unwrap().relative_loss.quant_all.unwrap();
        let report = ProtocolReport::new(vec![a, b]);
        assert!((report.average.clean.quant_all.unwrap() - 0.5 * (ra + rb)).abs() < 1e-15);
    }
}
