//! Report emission: a Markdown summary table (mean and std over seeds per
//! cell) and an SVG line plot of AMOTA against the grid cells. Output bytes
//! are deterministic for fixed input.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use tqd_core::metrics::METRICS_CSV_HEADER;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error at {0}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("{path}: schema mismatch: {message}")]
    Schema { path: PathBuf, message: String },
}

#[derive(Clone, Debug)]
struct Row {
    run_id: String,
    paradigm: String,
    mode: String,
    seed: u64,
    metrics: [f64; 8], // AMOTA, AMOTP, MOTA, Recall, IDS, FP, FN, TP
}

const METRIC_NAMES: [&str; 8] = ["AMOTA", "AMOTP", "MOTA", "Recall", "IDS", "FP", "FN", "TP"];

fn parse_csv(path: &Path) -> Result<Vec<Row>, ReportError> {
    let text = fs::read_to_string(path).map_err(|e| ReportError::Io(path.into(), e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header.trim() != METRICS_CSV_HEADER {
        return Err(ReportError::Schema {
            path: path.into(),
            message: format!("header '{header}' != '{METRICS_CSV_HEADER}'"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(ReportError::Schema {
                path: path.into(),
                message: format!("row {} has {} fields, expected 12", i + 2, fields.len()),
            });
        }
        let mut metrics = [0.0; 8];
        for (j, m) in metrics.iter_mut().enumerate() {
            *m = fields[4 + j].parse().map_err(|e| ReportError::Schema {
                path: path.into(),
                message: format!("row {}: bad {}: {e}", i + 2, METRIC_NAMES[j]),
            })?;
        }
        rows.push(Row {
            run_id: fields[0].to_string(),
            paradigm: fields[1].to_string(),
            mode: fields[2].to_string(),
            seed: fields[3].parse().map_err(|e| ReportError::Schema {
                path: path.into(),
                message: format!("row {}: bad seed: {e}", i + 2),
            })?,
            metrics,
        });
    }
    Ok(rows)
}

struct Group {
    run_id: String,
    paradigm: String,
    mode: String,
    seeds: Vec<u64>,
    mean: [f64; 8],
    std: [f64; 8],
}

fn group_rows(rows: &[Row]) -> Vec<Group> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.run_id) {
            order.push(r.run_id.clone());
        }
    }
    order
        .into_iter()
        .map(|run_id| {
            let members: Vec<&Row> = rows.iter().filter(|r| r.run_id == run_id).collect();
            let n = members.len() as f64;
            let mut mean = [0.0; 8];
            let mut std = [0.0; 8];
            for j in 0..8 {
                let m: f64 = members.iter().map(|r| r.metrics[j]).sum::<f64>() / n;
                mean[j] = m;
                let var: f64 =
                    members.iter().map(|r| (r.metrics[j] - m).powi(2)).sum::<f64>() / n;
                std[j] = var.sqrt();
            }
            Group {
                run_id,
                paradigm: members[0].paradigm.clone(),
                mode: members[0].mode.clone(),
                seeds: members.iter().map(|r| r.seed).collect(),
                mean,
                std,
            }
        })
        .collect()
}

fn markdown_table(groups: &[Group]) -> String {
    let mut out = String::from("# Ablation report\n\n");
    out.push_str("| cell | paradigm | mode | seeds |");
    for name in METRIC_NAMES {
        out.push_str(&format!(" {name} |"));
    }
    out.push('\n');
    out.push_str("|---|---|---|---|");
    for _ in METRIC_NAMES {
        out.push_str("---|");
    }
    out.push('\n');
    for grp in groups {
        out.push_str(&format!(
            "| {} | {} | {} | {} |",
            grp.run_id,
            grp.paradigm,
            grp.mode,
            grp.seeds.len()
        ));
        for j in 0..8 {
            if grp.seeds.len() > 1 {
                out.push_str(&format!(" {:.4} ± {:.4} |", grp.mean[j], grp.std[j]));
            } else {
                out.push_str(&format!(" {:.4} |", grp.mean[j]));
            }
        }
        out.push('\n');
    }
    out
}

fn svg_plot(groups: &[Group]) -> String {
    // AMOTA (mean with std whiskers) against cell index.
    let width = 640.0;
    let height = 360.0;
    let margin = 50.0;
    let plot_w = width - 2.0 * margin;
    let plot_h = height - 2.0 * margin;
    let n = groups.len();
    let x_of = |i: usize| {
        if n <= 1 {
            margin + plot_w / 2.0
        } else {
            margin + plot_w * i as f64 / (n - 1) as f64
        }
    };
    let y_of = |v: f64| margin + plot_h * (1.0 - v.clamp(0.0, 1.0));

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        height - margin,
        width - margin,
        height - margin
    ));
    s.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{margin}\" x2=\"{margin}\" y2=\"{}\" stroke=\"black\"/>\n",
        height - margin
    ));
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = y_of(v);
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{margin}\" y2=\"{y:.2}\" stroke=\"black\"/>\n",
            margin - 4.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"end\">{v:.1}</text>\n",
            margin - 6.0,
            y + 3.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">AMOTA</text>\n",
        14.0,
        height / 2.0
    ));

    let mut path = String::new();
    for (i, grp) in groups.iter().enumerate() {
        let x = x_of(i);
        let y = y_of(grp.mean[0]);
        path.push_str(if i == 0 { "M" } else { " L" });
        path.push_str(&format!("{x:.2} {y:.2}"));
        let y_lo = y_of(grp.mean[0] - grp.std[0]);
        let y_hi = y_of(grp.mean[0] + grp.std[0]);
        s.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{y_lo:.2}\" x2=\"{x:.2}\" y2=\"{y_hi:.2}\" stroke=\"steelblue\"/>\n"
        ));
        s.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"steelblue\"/>\n"
        ));
        s.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"8\" text-anchor=\"end\" transform=\"rotate(-35 {x:.2} {:.2})\">{}</text>\n",
            height - margin + 12.0,
            height - margin + 12.0,
            escape_xml(&grp.run_id)
        ));
    }
    s.push_str(&format!("<path d=\"{path}\" fill=\"none\" stroke=\"steelblue\"/>\n"));
    s.push_str("</svg>\n");
    s
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub struct ReportOutput {
    pub markdown_path: PathBuf,
    pub svg_path: PathBuf,
}

/// Reads metric CSVs, aggregates per cell over seeds, and writes report.md
/// and report.svg under `out_dir`.
pub fn emit_report(csv_paths: &[PathBuf], out_dir: &Path) -> Result<ReportOutput, ReportError> {
    let mut rows = Vec::new();
    for p in csv_paths {
        rows.extend(parse_csv(p)?);
    }
    let groups = group_rows(&rows);
    let md = markdown_table(&groups);
    let svg = svg_plot(&groups);
    fs::create_dir_all(out_dir).map_err(|e| ReportError::Io(out_dir.into(), e))?;
    let markdown_path = out_dir.join("report.md");
    fs::write(&markdown_path, md).map_err(|e| ReportError::Io(markdown_path.clone(), e))?;
    let svg_path = out_dir.join("report.svg");
    fs::write(&svg_path, svg).map_err(|e| ReportError::Io(svg_path.clone(), e))?;
    Ok(ReportOutput {
        markdown_path,
        svg_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_csv(dir: &Path, name: &str, rows: &[&str]) -> PathBuf {
        let path = dir.join(name);
        let mut text = String::from(METRICS_CSV_HEADER);
        text.push('\n');
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn mean_std_over_seeds() {
        let dir = std::env::temp_dir().join("tqd-report-test");
        fs::create_dir_all(&dir).unwrap();
        let csv = write_csv(
            &dir,
            "m.csv",
            &[
                "cellA,ada,temporal,1,0.50,1.0,0.4,0.6,10,5,3,20",
                "cellA,ada,temporal,2,0.70,1.0,0.4,0.6,10,5,3,20",
                "cellB,ada,off,1,0.40,1.2,0.3,0.5,12,6,4,18",
            ],
        );
        let rows = parse_csv(&csv).unwrap();
        let groups = group_rows(&rows);
        assert_eq!(groups.len(), 2);
        assert!((groups[0].mean[0] - 0.6).abs() < 1e-12);
        assert!((groups[0].std[0] - 0.1).abs() < 1e-12);
        let md = markdown_table(&groups);
        assert!(md.contains("±"));
        let out = emit_report(&[csv], &dir).unwrap();
        let a = fs::read(&out.svg_path).unwrap();
        let again = emit_report(
            &[write_csv(
                &dir,
                "m2.csv",
                &[
                    "cellA,ada,temporal,1,0.50,1.0,0.4,0.6,10,5,3,20",
                    "cellA,ada,temporal,2,0.70,1.0,0.4,0.6,10,5,3,20",
                    "cellB,ada,off,1,0.40,1.2,0.3,0.5,12,6,4,18",
                ],
            )],
            &dir,
        )
        .unwrap();
        let b = fs::read(&again.svg_path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schema_mismatch_is_an_error() {
        let dir = std::env::temp_dir().join("tqd-report-test-schema");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        fs::write(&path, "wrong,header\n1,2\n").unwrap();
        assert!(matches!(
            parse_csv(&path),
            Err(ReportError::Schema { .. })
        ));
    }
}
