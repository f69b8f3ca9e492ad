//! Experiment grids and a resumable runner.
//!
//! Each cell is keyed by its config hash. A finished cell leaves
//! `<out>/cells/<hash>.csv` (a one-row results file, written atomically), a
//! failed one `<out>/cells/<hash>.err`. With `resume`, finished cells are
//! read back instead of re-run, so an interrupted grid completes to the same
//! table as an uninterrupted one.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::objectives::LossKind;
use crate::scenegen::FormatKind;

use super::config::{format_default_augment, Channels, ExperimentConfig, Transfer};
use super::data::DataCache;
use super::report::{parse_results_csv, results_csv, ResultRow};
use super::train::train_run;
use super::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    /// The base configuration alone.
    Single,
    /// All 16 augmentation subsets per format, BCE, from scratch.
    Augmentation,
    /// {BCE, BCE-Dice} x {scratch, mono-pretrained} per format.
    LossTransfer,
    /// Chunk sizes 4, 8 and 12 s per format.
    ChunkSize,
    /// Mono vs all channels per format.
    Channels,
}

impl GridKind {
    pub fn name(&self) -> &'static str {
        match self {
            GridKind::Single => "single",
            GridKind::Augmentation => "augmentation",
            GridKind::LossTransfer => "loss-transfer",
            GridKind::ChunkSize => "chunk",
            GridKind::Channels => "channels",
        }
    }
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(GridKind::Single),
            "augmentation" => Ok(GridKind::Augmentation),
            "loss-transfer" => Ok(GridKind::LossTransfer),
            "chunk" => Ok(GridKind::ChunkSize),
            "channels" => Ok(GridKind::Channels),
            other => Err(Error::Config(format!("unknown grid '{other}'"))),
        }
    }
}

/// The 16 subsets of {MU, CO, FS, CS}: none, singles, pairs, triples, all,
/// each size in lexicographic order of the technique list.
pub fn augmentation_combinations() -> Vec<AugmentConfig> {
    let mut out = Vec::with_capacity(16);
    for size in 0..=4 {
        for mask in combinations(4, size) {
            out.push(AugmentConfig::with_flags(mask[0], mask[1], mask[2], mask[3]));
        }
    }
    out
}

fn combinations(n: usize, k: usize) -> Vec<Vec<bool>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<bool>>) {
        if cur.len() == k {
            let mut m = vec![false; n];
            cur.iter().for_each(|&i| m[i] = true);
            out.push(m);
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Cells of a grid in table order: format, then the grid's own axis, then
/// seed. An empty `seeds` uses the base seed.
pub fn grid_cells(kind: GridKind, base: &ExperimentConfig, seeds: &[u64]) -> Vec<ExperimentConfig> {
    let seeds: Vec<u64> = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let mut variants: Vec<ExperimentConfig> = Vec::new();
    let formats = [FormatKind::Foa, FormatKind::Mic];
    // Later experiments build on the best of the earlier ones.
    let tuned = |f: FormatKind| ExperimentConfig {
        format: f,
        augment: format_default_augment(f),
        loss: LossKind::BceDice,
        transfer: Transfer::MonoPretrained,
        ..base.clone()
    };
    match kind {
        GridKind::Single => variants.push(base.clone()),
        GridKind::Augmentation => {
            for f in formats {
                for a in augmentation_combinations() {
                    variants.push(ExperimentConfig {
                        format: f,
                        augment: a,
                        loss: LossKind::Bce,
                        transfer: Transfer::Scratch,
                        ..base.clone()
                    });
                }
            }
        }
        GridKind::LossTransfer => {
            for f in formats {
                for loss in [LossKind::Bce, LossKind::BceDice] {
                    for transfer in [Transfer::Scratch, Transfer::MonoPretrained] {
                        variants.push(ExperimentConfig {
                            format: f,
                            augment: format_default_augment(f),
                            loss,
                            transfer,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        GridKind::ChunkSize => {
            for f in formats {
                for chunk_s in [4.0, 8.0, 12.0] {
                    variants.push(ExperimentConfig { chunk_s, ..tuned(f) });
                }
            }
        }
        GridKind::Channels => {
            for f in formats {
                for channels in [Channels::Mono, Channels::All] {
                    variants.push(ExperimentConfig {
                        chunk_s: 4.0,
                        channels,
                        ..tuned(f)
                    });
                }
            }
        }
    }
    variants
        .into_iter()
        .flat_map(|v| seeds.iter().map(move |&seed| ExperimentConfig { seed, ..v.clone() }))
        .collect()
}

#[derive(Clone, Debug)]
pub struct GridOptions {
    /// Cells trained concurrently; each cell is itself single-threaded.
    pub workers: usize,
    pub resume: bool,
    /// Stop after this many newly executed cells.
    pub max_cells: Option<usize>,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            resume: false,
            max_cells: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    /// Finished cells in grid order.
    pub rows: Vec<ResultRow>,
    /// `(config hash, error message)` of failed cells.
    pub failures: Vec<(String, String)>,
    /// Cells neither finished nor failed (`max_cells` reached).
    pub pending: usize,
}

pub fn cell_path(out: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out.join("cells").join(format!("{}.csv", cfg.hash_hex()))
}

fn error_path(out: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out.join("cells").join(format!("{}.err", cfg.hash_hex()))
}

fn read_cell(path: &Path) -> Result<ResultRow> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = parse_results_csv(&text)?;
    if rows.len() != 1 {
        return Err(Error::Data(format!("{}: expected one row", path.display())));
    }
    Ok(rows.remove(0))
}

/// Run `cells` with `exec(cfg, run_dir)`, recording each finished cell and
/// writing `<out>/results.csv` with the finished rows in grid order.
/// Duplicate cells (equal hashes) run once.
pub fn run_grid<F>(cells: &[ExperimentConfig], out: &Path, opts: &GridOptions, exec: F) -> Result<GridOutcome>
where
    F: Fn(&ExperimentConfig, &Path) -> Result<ResultRow> + Sync,
{
    if cells.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    for c in cells {
        c.validate()?;
    }
    let cells_dir = out.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;

    let mut todo: Vec<&ExperimentConfig> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for c in cells {
        if !seen.insert(c.hash_hex()) {
            continue;
        }
        if !opts.resume {
            let _ = fs::remove_file(cell_path(out, c));
            let _ = fs::remove_file(error_path(out, c));
        }
        if !cell_path(out, c).exists() {
            todo.push(c);
        }
    }
    if let Some(m) = opts.max_cells {
        todo.truncate(m);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        todo.par_iter().try_for_each(|c| -> Result<()> {
            let run_dir = out.join("runs").join(c.hash_hex());
            let _ = fs::remove_file(error_path(out, c));
            match exec(c, &run_dir) {
                Ok(row) => write_atomic(&cell_path(out, c), results_csv(&[row]).as_bytes()),
                Err(e) => write_atomic(&error_path(out, c), format!("{e}\n").as_bytes()),
            }
        })
    })?;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut pending = 0;
    for c in cells {
        let p = cell_path(out, c);
        let ep = error_path(out, c);
        if p.exists() {
            rows.push(read_cell(&p)?);
        } else if ep.exists() {
            let msg = fs::read_to_string(&ep).map_err(|e| Error::io(&ep, e))?;
            failures.push((c.hash_hex(), msg.trim().to_string()));
        } else {
            pending += 1;
        }
    }
    write_atomic(&out.join("results.csv"), results_csv(&rows).as_bytes())?;
    if !failures.is_empty() {
        let mut s = String::from("config_hash,error\n");
        for (h, m) in &failures {
            s.push_str(&format!("{h},{}\n", m.replace(['\n', ','], " ")));
        }
        write_atomic(&out.join("failures.csv"), s.as_bytes())?;
    }
    Ok(GridOutcome {
        rows,
        failures,
        pending,
    })
}

/// The real executor: train through a shared data cache.
pub fn train_executor(cache: &DataCache) -> impl Fn(&ExperimentConfig, &Path) -> Result<ResultRow> + Sync + '_ {
    move |cfg, dir| {
        let out = train_run(cfg, cache, Some(dir))?;
        Ok(ResultRow::new(cfg, &out.record.test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn fake(cfg: &ExperimentConfig, _: &Path) -> Result<ResultRow> {
        if cfg.seed == 13 {
            return Err(Error::Numeric("boom".into()));
        }
        let h = cfg.hash_u64();
        let er = (h % 1000) as f64 / 1000.0;
        let f1 = ((h >> 10) % 1000) as f64 / 1000.0;
        Ok(ResultRow::new(
            cfg,
            &crate::objectives::MetricsReport {
                er,
                f1,
                sede: 0.5 * er + 0.5 * (1.0 - f1),
                ..crate::objectives::MetricsReport::from_counts(Default::default())
            },
        ))
    }

    #[test]
    fn augmentation_grid_layout() {
        let combos = augmentation_combinations();
        let labels: Vec<String> = combos.iter().map(|a| a.label()).collect();
        assert_eq!(
            labels,
            [
                "none", "MU", "CO", "FS", "CS", "MU+CO", "MU+FS", "MU+CS", "CO+FS", "CO+CS", "FS+CS", "MU+CO+FS",
                "MU+CO+CS", "MU+FS+CS", "CO+FS+CS", "MU+CO+FS+CS"
            ]
        );
        let cells = grid_cells(GridKind::Augmentation, &ExperimentConfig::default(), &[]);
        assert_eq!(cells.len(), 32);
        assert!(cells[..16].iter().all(|c| c.format == FormatKind::Foa));
        assert!(cells[16..].iter().all(|c| c.format == FormatKind::Mic));
        assert!(cells.iter().all(|c| c.loss == LossKind::Bce && c.transfer == Transfer::Scratch));
    }

    #[test]
    fn other_grids() {
        let b = ExperimentConfig::default();
        let lt = grid_cells(GridKind::LossTransfer, &b, &[1, 2]);
        assert_eq!(lt.len(), 16);
        assert_eq!((lt[0].loss, lt[0].transfer, lt[0].seed), (LossKind::Bce, Transfer::Scratch, 1));
        assert_eq!(lt[1].seed, 2);
        assert_eq!(lt[2].transfer, Transfer::MonoPretrained);
        assert_eq!(lt[8].augment.label(), "CO+FS+CS");
        let ch = grid_cells(GridKind::ChunkSize, &b, &[]);
        assert_eq!(ch.iter().map(|c| c.chunk_s).collect::<Vec<_>>(), [4.0, 8.0, 12.0, 4.0, 8.0, 12.0]);
        let mo = grid_cells(GridKind::Channels, &b, &[]);
        assert_eq!(mo[0].channels, Channels::Mono);
        assert_eq!(grid_cells(GridKind::Single, &b, &[]), vec![b]);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let cells = grid_cells(GridKind::LossTransfer, &ExperimentConfig::default(), &[0]);
        let full = tempfile::tempdir().unwrap();
        let a = run_grid(&cells, full.path(), &GridOptions::default(), fake).unwrap();
        assert_eq!((a.rows.len(), a.pending), (8, 0));

        let part = tempfile::tempdir().unwrap();
        let calls = AtomicUsize::new(0);
        let counting = |c: &ExperimentConfig, d: &Path| {
            calls.fetch_add(1, Ordering::SeqCst);
            fake(c, d)
        };
        let opts = GridOptions {
            max_cells: Some(3),
            ..Default::default()
        };
        let p = run_grid(&cells, part.path(), &opts, counting).unwrap();
        assert_eq!((p.rows.len(), p.pending), (3, 5));
        let opts = GridOptions {
            resume: true,
            workers: 2,
            ..Default::default()
        };
        let b = run_grid(&cells, part.path(), &opts, counting).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 8);
        assert_eq!(b.rows, a.rows);
        assert_eq!(
            fs::read(full.path().join("results.csv")).unwrap(),
            fs::read(part.path().join("results.csv")).unwrap()
        );
    }

    #[test]
    fn failures_are_recorded_and_grid_continues() {
        let base = ExperimentConfig::default();
        let cells = grid_cells(GridKind::Single, &base, &[12, 13, 14]);
        let dir = tempfile::tempdir().unwrap();
        let o = run_grid(&cells, dir.path(), &GridOptions::default(), fake).unwrap();
        assert_eq!(o.rows.len(), 2);
        assert_eq!(o.failures.len(), 1);
        assert!(o.failures[0].1.contains("boom"));
        assert!(dir.path().join("failures.csv").exists());
    }

    #[test]
    fn single_cell_grid_equals_executor_output() {
        let base = ExperimentConfig::default();
        let cells = grid_cells(GridKind::Single, &base, &[]);
        let dir = tempfile::tempdir().unwrap();
        let o = run_grid(&cells, dir.path(), &GridOptions::default(), fake).unwrap();
        assert_eq!(o.rows, vec![fake(&base, dir.path()).unwrap()]);
    }
}
