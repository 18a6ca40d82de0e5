//! Ablation grids: cross products of config axes (or explicit cell lists),
//! expanded into runnable cells, executed in parallel, resumed by content
//! hash, and merged into one CSV in grid order.
//!
//! Grid files reuse the flat config syntax plus two directives:
//!
//! ```text
//! training.steps=200            # base override applied to every cell
//! axis.denoising.n_groups=0,1,3,5
//! axis.denoising.strategy=general,dedicated,hybrid
//! cell denoising.alpha_fp=0 denoising.alpha_drop=0   # explicit cell list
//! ```
//!
//! Cells that are structurally impossible (dedicated grouping without 3
//! groups, hybrid without 5) are dropped, and cells with no denoising are
//! canonicalized to one baseline, so a groups-by-strategy grid reproduces
//! the published table layout.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use tqd_core::metrics::METRICS_CSV_HEADER;
use tqd_core::train::DnMode;

use crate::config::{ConfigError, RunConfig};
use crate::experiment::{run_experiment, ExperimentError};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("grid is empty: no axes or cells")]
    Empty,
    #[error("grid mixes axis.* and cell directives")]
    Mixed,
}

#[derive(Clone, Debug)]
pub struct GridCell {
    /// Stable identifier: the varied keys after canonicalization, excluding
    /// the training seed (which has its own CSV column).
    pub run_id: String,
    pub config: RunConfig,
    /// Hash of the full canonical config; names the cell's artifact dir.
    pub content_hash: String,
}

struct GridSpec {
    base: Vec<(String, String)>,
    axes: Vec<(String, Vec<String>)>,
    cells: Vec<Vec<(String, String)>>,
}

fn parse_grid(text: &str) -> Result<GridSpec, GridError> {
    let mut spec = GridSpec {
        base: Vec::new(),
        axes: Vec::new(),
        cells: Vec::new(),
    };
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("cell ") {
            let mut overrides = Vec::new();
            for tok in rest.split_whitespace() {
                let Some((k, v)) = tok.split_once('=') else {
                    return Err(GridError::Syntax {
                        line: lineno + 1,
                        message: format!("cell entry '{tok}' is not key=value"),
                    });
                };
                overrides.push((k.to_string(), v.to_string()));
            }
            spec.cells.push(overrides);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(GridError::Syntax {
                line: lineno + 1,
                message: format!("expected key=value, got '{line}'"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if let Some(axis_key) = key.strip_prefix("axis.") {
            let values: Vec<String> = value
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(GridError::Syntax {
                    line: lineno + 1,
                    message: format!("axis '{axis_key}' has no values"),
                });
            }
            spec.axes.push((axis_key.to_string(), values));
        } else {
            spec.base.push((key.to_string(), value.to_string()));
        }
    }
    Ok(spec)
}

fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    format!("{h:016x}")
}

/// A cell whose grouping strategy cannot exist at its group count.
fn structurally_invalid(cfg: &RunConfig) -> bool {
    use tqd_core::dngen::GroupStrategy;
    if cfg.denoising.mode == DnMode::Off {
        return false;
    }
    match cfg.denoising.strategy {
        GroupStrategy::General => cfg.denoising.n_groups == 0,
        GroupStrategy::Dedicated => cfg.denoising.n_groups != 3,
        GroupStrategy::Hybrid => cfg.denoising.n_groups != 5,
    }
}

/// Collapse every no-denoising variant onto one canonical baseline cell.
fn canonicalize(cfg: &mut RunConfig) {
    if cfg.denoising.n_groups == 0 {
        cfg.denoising.mode = DnMode::Off;
    }
    if cfg.denoising.mode == DnMode::Off {
        let seed = cfg.training.seed;
        let defaults = crate::config::DenoisingRunConfig {
            mode: DnMode::Off,
            n_groups: 0,
            ..Default::default()
        };
        cfg.denoising = defaults;
        cfg.training.seed = seed;
    }
}

/// Expands a grid file into deduplicated, validated cells in grid order.
pub fn expand_grid(text: &str) -> Result<Vec<GridCell>, GridError> {
    let spec = parse_grid(text)?;
    if !spec.axes.is_empty() && !spec.cells.is_empty() {
        return Err(GridError::Mixed);
    }
    if spec.axes.is_empty() && spec.cells.is_empty() {
        return Err(GridError::Empty);
    }

    let mut override_sets: Vec<Vec<(String, String)>> = Vec::new();
    if !spec.cells.is_empty() {
        for cell in &spec.cells {
            override_sets.push(cell.clone());
        }
    } else {
        let mut acc: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &spec.axes {
            let mut next = Vec::with_capacity(acc.len() * values.len());
            for prefix in &acc {
                for v in values {
                    let mut cell = prefix.clone();
                    cell.push((key.clone(), v.clone()));
                    next.push(cell);
                }
            }
            acc = next;
        }
        override_sets = acc;
    }

    let mut cells = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for overrides in override_sets {
        let mut cfg = RunConfig::default();
        for (k, v) in &spec.base {
            cfg.apply(k, v)?;
        }
        for (k, v) in &overrides {
            cfg.apply(k, v)?;
        }
        canonicalize(&mut cfg);
        if structurally_invalid(&cfg) {
            continue;
        }
        cfg.validate()?;
        let canonical = cfg.canonical_text();
        let content_hash = fnv1a_hex(canonical.as_bytes());
        if !seen.insert(content_hash.clone()) {
            continue;
        }
        let run_id = run_id_for(&cfg, &spec, &overrides);
        cells.push(GridCell {
            run_id,
            config: cfg,
            content_hash,
        });
    }
    if cells.is_empty() {
        return Err(GridError::Empty);
    }
    Ok(cells)
}

/// Varied keys (axes or explicit cell keys) re-read from the canonicalized
/// config, sorted, seed excluded.
fn run_id_for(cfg: &RunConfig, spec: &GridSpec, overrides: &[(String, String)]) -> String {
    let mut keys: Vec<&str> = if spec.cells.is_empty() {
        spec.axes.iter().map(|(k, _)| k.as_str()).collect()
    } else {
        overrides.iter().map(|(k, _)| k.as_str()).collect()
    };
    keys.sort_unstable();
    keys.dedup();
    let canonical = cfg.canonical_text();
    let lookup: std::collections::BTreeMap<&str, &str> = canonical
        .lines()
        .filter_map(|l| l.split_once('='))
        .collect();
    let parts: Vec<String> = keys
        .iter()
        .filter(|k| **k != "training.seed")
        .map(|k| format!("{k}={}", lookup.get(*k).copied().unwrap_or("?")))
        .collect();
    if parts.is_empty() {
        "base".to_string()
    } else {
        parts.join(";")
    }
}

pub struct AblationOutcome {
    pub csv_path: PathBuf,
    pub cells_run: usize,
    pub cells_skipped: usize,
}

/// Runs every cell (in parallel up to `threads`), resuming completed cells
/// by content hash, and merges per-cell metrics into `out/ablation.csv` in
/// grid order.
pub fn run_ablation(
    grid_text: &str,
    out_dir: &Path,
    threads: usize,
) -> Result<AblationOutcome, AblationError> {
    let cells = expand_grid(grid_text)?;
    fs::create_dir_all(out_dir).map_err(|e| AblationError::Io(out_dir.into(), e))?;

    let n = cells.len();
    let rows: Mutex<Vec<Option<String>>> = Mutex::new(vec![None; n]);
    let skipped = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let errors: Mutex<Vec<AblationError>> = Mutex::new(Vec::new());

    let worker = |_tid: usize| {
        loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            if i >= n {
                break;
            }
            let cell = &cells[i];
            let cell_dir = out_dir.join("cells").join(&cell.content_hash);
            let metrics_path = cell_dir.join("metrics.csv");
            let row = if metrics_path.exists() {
                skipped.fetch_add(1, Ordering::SeqCst);
                read_metrics_row(&metrics_path)
            } else {
                match run_experiment(&cell.config, &cell.run_id, &cell_dir) {
                    Ok(out) => Ok(out.csv_row),
                    Err(e) => Err(AblationError::Experiment(cell.run_id.clone(), e)),
                }
            };
            match row {
                Ok(r) => rows.lock().expect("rows lock")[i] = Some(r),
                Err(e) => errors.lock().expect("errors lock").push(e),
            }
        }
    };

    let threads = threads.max(1).min(n.max(1));
    std::thread::scope(|scope| {
        for t in 0..threads {
            let worker = &worker;
            scope.spawn(move || worker(t));
        }
    });

    let errs = errors.into_inner().expect("errors lock");
    if let Some(e) = errs.into_iter().next() {
        return Err(e);
    }

    let rows = rows.into_inner().expect("rows lock");
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    let mut completed = 0usize;
    for row in rows.into_iter().flatten() {
        csv.push_str(&row);
        csv.push('\n');
        completed += 1;
    }
    let csv_path = out_dir.join("ablation.csv");
    fs::write(&csv_path, csv).map_err(|e| AblationError::Io(csv_path.clone(), e))?;
    let cells_skipped = skipped.load(Ordering::SeqCst);
    Ok(AblationOutcome {
        csv_path,
        cells_run: completed - cells_skipped,
        cells_skipped,
    })
}

fn read_metrics_row(path: &Path) -> Result<String, AblationError> {
    let text = fs::read_to_string(path).map_err(|e| AblationError::Io(path.into(), e))?;
    text.lines()
        .nth(1)
        .map(str::to_string)
        .ok_or_else(|| AblationError::Io(path.into(), std::io::Error::other("metrics.csv has no data row")))
}

#[derive(Debug, Error)]
pub enum AblationError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("io error at {0}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("cell '{0}' failed: {1}")]
    Experiment(String, #[source] ExperimentError),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_axis_expands_to_three_cells() {
        let cells = expand_grid("axis.denoising.strategy=general,dedicated,hybrid\naxis.denoising.n_groups=5\n");
        // dedicated requires 3 groups, so only general and hybrid survive at 5.
        let cells = cells.unwrap();
        assert_eq!(cells.len(), 2);

        let cells = expand_grid(
            "axis.denoising.strategy=general,dedicated,hybrid\n",
        )
        .unwrap();
        // Default group count is 5: general and hybrid fit, dedicated drops.
        assert_eq!(cells.len(), 2);
    }

    #[test]
    fn groups_grid_reproduces_table_layout() {
        let text = "axis.denoising.n_groups=0,1,3,5\naxis.denoising.strategy=general,dedicated,hybrid\n";
        let cells = expand_grid(text).unwrap();
        // One baseline, general at 1, general+dedicated at 3, general+hybrid at 5.
        assert_eq!(cells.len(), 6);
        assert_eq!(
            cells.iter().filter(|c| c.config.denoising.mode == DnMode::Off).count(),
            1
        );
    }

    #[test]
    fn explicit_cells_counted() {
        let text = "cell denoising.alpha_fp=0\ncell denoising.alpha_fp=0.1 denoising.alpha_drop=0.05\n";
        let cells = expand_grid(text).unwrap();
        assert_eq!(cells.len(), 2);
        assert!(cells[1].run_id.contains("alpha_drop"));
    }

    #[test]
    fn empty_grid_is_an_error() {
        assert!(matches!(expand_grid("training.steps=5\n"), Err(GridError::Empty)));
        assert!(matches!(expand_grid(""), Err(GridError::Empty)));
    }

    #[test]
    fn seed_axis_is_excluded_from_run_id() {
        let text = "axis.training.seed=1,2\naxis.denoising.mode=off,temporal\n";
        let cells = expand_grid(text).unwrap();
        assert_eq!(cells.len(), 4);
        for c in &cells {
            assert!(!c.run_id.contains("training.seed"));
            assert!(c.run_id.contains("denoising.mode"));
        }
    }
}
