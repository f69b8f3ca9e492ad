//! Results rows, their CSV form, and the Markdown report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::objectives::{LossKind, MetricsReport};
use crate::scenegen::FormatKind;

use super::config::{Channels, ExperimentConfig, Transfer};

pub const RESULTS_HEADER: &str = "format,mu,co,fs,cs,loss,transfer,chunk_s,channels,seed,er,f1,sede";

/// One grid cell's outcome. Floats are written in shortest round-trip
/// form, so a CSV re-parse reproduces them bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub format: FormatKind,
    pub mu: bool,
    pub co: bool,
    pub fs: bool,
    pub cs: bool,
    pub loss: LossKind,
    pub transfer: Transfer,
    pub chunk_s: f64,
    pub channels: Channels,
    pub seed: u64,
    pub er: f64,
    pub f1: f64,
    pub sede: f64,
}

impl ResultRow {
    pub fn new(cfg: &ExperimentConfig, test: &MetricsReport) -> Self {
        Self {
            format: cfg.format,
            mu: cfg.augment.mu,
            co: cfg.augment.co,
            fs: cfg.augment.fs,
            cs: cfg.augment.cs,
            loss: cfg.loss,
            transfer: cfg.transfer,
            chunk_s: cfg.chunk_s,
            channels: cfg.channels,
            seed: cfg.seed,
            er: test.er,
            f1: test.f1,
            sede: test.sede,
        }
    }

    pub fn to_csv_row(&self) -> String {
        let b = |x: bool| x as u8;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.format,
            b(self.mu),
            b(self.co),
            b(self.fs),
            b(self.cs),
            self.loss.name(),
            self.transfer,
            self.chunk_s,
            self.channels,
            self.seed,
            self.er,
            self.f1,
            self.sede
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 13 {
            return Err(Error::Data(format!("results row needs 13 fields, got {}", f.len())));
        }
        let flag = |i: usize| match f[i] {
            "0" => Ok(false),
            "1" => Ok(true),
            v => Err(Error::Data(format!("bad flag '{v}'"))),
        };
        let num = |i: usize| -> Result<f64> { f[i].parse().map_err(|_| Error::Data(format!("bad number '{}'", f[i]))) };
        let data = |e: Error| Error::Data(e.to_string());
        Ok(Self {
            format: f[0].parse().map_err(data)?,
            mu: flag(1)?,
            co: flag(2)?,
            fs: flag(3)?,
            cs: flag(4)?,
            loss: f[5].parse().map_err(data)?,
            transfer: f[6].parse().map_err(data)?,
            chunk_s: num(7)?,
            channels: f[8].parse().map_err(data)?,
            seed: f[9].parse().map_err(|_| Error::Data(format!("bad seed '{}'", f[9])))?,
            er: num(10)?,
            f1: num(11)?,
            sede: num(12)?,
        })
    }

    pub fn augment_label(&self) -> String {
        let on: Vec<&str> = [(self.mu, "MU"), (self.co, "CO"), (self.fs, "FS"), (self.cs, "CS")]
            .iter()
            .filter(|(b, _)| *b)
            .map(|(_, n)| *n)
            .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }

    /// Everything but the format and the scores.
    fn setting(&self) -> (bool, bool, bool, bool, LossKind, Transfer, u64, Channels, u64) {
        (
            self.mu,
            self.co,
            self.fs,
            self.cs,
            self.loss,
            self.transfer,
            self.chunk_s.to_bits(),
            self.channels,
            self.seed,
        )
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RESULTS_HEADER) {
        return Err(Error::Data("results CSV header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(ResultRow::parse_csv_row)
        .collect()
}

fn mark(v: f64, best: bool) -> String {
    if best {
        format!("**{v:.3}**")
    } else {
        format!("{v:.3}")
    }
}

/// Markdown table with one line per setting and an ER / F1 / SEDE column
/// group per format. In each format column the lowest ER and the highest
/// F1 are bold; ties go to the earlier line.
pub fn report_markdown(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Data("no results to report".into()));
    }
    let mut formats: Vec<FormatKind> = Vec::new();
    let mut settings: Vec<&ResultRow> = Vec::new();
    for r in rows {
        if !formats.contains(&r.format) {
            formats.push(r.format);
        }
        if !settings.iter().any(|s| s.setting() == r.setting()) {
            settings.push(r);
        }
    }
    // cell[s][f]: first row with that setting and format.
    let cell: Vec<Vec<Option<&ResultRow>>> = settings
        .iter()
        .map(|s| {
            formats
                .iter()
                .map(|&f| rows.iter().find(|r| r.format == f && r.setting() == s.setting()))
                .collect()
        })
        .collect();
    let best = |fi: usize, key: fn(&ResultRow) -> f64, lower: bool| -> Option<usize> {
        let mut out: Option<(usize, f64)> = None;
        for (si, row) in cell.iter().enumerate() {
            if let Some(r) = row[fi] {
                let v = key(r);
                let better = match out {
                    None => true,
                    Some((_, b)) => (lower && v < b) || (!lower && v > b),
                };
                if better {
                    out = Some((si, v));
                }
            }
        }
        out.map(|(i, _)| i)
    };
    let best_er: Vec<Option<usize>> = (0..formats.len()).map(|f| best(f, |r| r.er, true)).collect();
    let best_f1: Vec<Option<usize>> = (0..formats.len()).map(|f| best(f, |r| r.f1, false)).collect();

    let mut s = String::new();
    let tick = |b: bool| if b { "✓" } else { "×" };
    s.push_str("| MU | CO | FS | CS | Loss | Transfer | Chunk (s) | Channels | Seed |");
    for f in &formats {
        let u = f.name().to_uppercase();
        write!(s, " {u} ER ↓ | {u} F1 ↑ | {u} SEDE ↓ |").unwrap();
    }
    s.push('\n');
    s.push_str("|---|---|---|---|---|---|---|---|---|");
    s.push_str(&"---|---|---|".repeat(formats.len()));
    s.push('\n');
    for (si, set) in settings.iter().enumerate() {
        write!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            tick(set.mu),
            tick(set.co),
            tick(set.fs),
            tick(set.cs),
            set.loss.name(),
            set.transfer,
            set.chunk_s,
            set.channels,
            set.seed
        )
        .unwrap();
        for fi in 0..formats.len() {
            match cell[si][fi] {
                Some(r) => write!(
                    s,
                    " {} | {} | {:.3} |",
                    mark(r.er, best_er[fi] == Some(si)),
                    mark(r.f1, best_f1[fi] == Some(si)),
                    r.sede
                )
                .unwrap(),
                None => s.push_str(" - | - | - |"),
            }
        }
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(format: FormatKind, mu: bool, er: f64, f1: f64) -> ResultRow {
        ResultRow {
            format,
            mu,
            co: false,
            fs: false,
            cs: false,
            loss: LossKind::Bce,
            transfer: Transfer::Scratch,
            chunk_s: 4.0,
            channels: Channels::All,
            seed: 0,
            er,
            f1,
            sede: 0.5 * er + 0.5 * (1.0 - f1),
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![
            row(FormatKind::Foa, false, 0.1 + 0.2, 1.0 / 3.0),
            row(FormatKind::Mic, true, 0.459, 0.67),
        ];
        let text = results_csv(&rows);
        assert!(text.starts_with(RESULTS_HEADER));
        assert_eq!(parse_results_csv(&text).unwrap(), rows);
        assert!(parse_results_csv("nope\n").is_err());
    }

    #[test]
    fn single_row_is_best_everywhere() {
        let md = report_markdown(&[row(FormatKind::Foa, false, 0.4, 0.7)]).unwrap();
        assert!(md.contains("**0.400**") && md.contains("**0.700**"));
        assert!(report_markdown(&[]).is_err());
    }

    #[test]
    fn ties_go_to_the_earlier_row() {
        let md = report_markdown(&[
            row(FormatKind::Foa, false, 0.4, 0.6),
            row(FormatKind::Foa, true, 0.4, 0.7),
        ])
        .unwrap();
        let lines: Vec<&str> = md.lines().skip(2).collect();
        assert!(lines[0].contains("**0.400**"));
        assert!(!lines[1].contains("**0.400**"));
        assert!(lines[1].contains("**0.700**"));
    }

    #[test]
    fn formats_become_column_groups() {
        let md = report_markdown(&[
            row(FormatKind::Foa, false, 0.5, 0.6),
            row(FormatKind::Mic, false, 0.3, 0.8),
            row(FormatKind::Foa, true, 0.45, 0.65),
            row(FormatKind::Mic, true, 0.35, 0.75),
        ])
        .unwrap();
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("FOA ER") && lines[0].contains("MIC F1"));
        // FOA best is the MU line, MIC best is the plain line.
        assert!(lines[2].contains("**0.300**") && lines[2].contains("**0.800**"));
        assert!(lines[3].contains("**0.450**") && lines[3].contains("**0.650**"));
    }
}
