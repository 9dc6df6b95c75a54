use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::sweep::{Approach, SweepResult};
use super::tree::ErrorRegionTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn sweep_csv(results: &[SweepResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Input(format!("csv: {e}"));
    w.write_record([
        "approach",
        "cost",
        "total_loss",
        "classification_error",
        "query_rate",
        "selected_lambda",
        "seed",
    ])
    .map_err(io)?;
    for r in results {
        for s in &r.per_seed {
            w.write_record([
                r.approach.name().to_string(),
                s.cost.to_string(),
                s.total_loss.to_string(),
                s.classification_error.to_string(),
                s.query_rate.to_string(),
                s.selected_lambda.map(|l| l.to_string()).unwrap_or_default(),
                s.seed.to_string(),
            ])
            .map_err(io)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Input(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn color(approach: Approach) -> &'static str {
    match approach {
        Approach::FixedDisc | Approach::JointDisc => "#1f77b4",
        Approach::FixedVoi | Approach::JointVoi => "#d62728",
        Approach::HumanOnly => "#7f7f7f",
    }
}

/// Mean total loss against query cost, one line per approach; fixed approaches dashed.
pub fn loss_vs_cost_svg(results: &[SweepResult]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 170.0;
    const TOP: f64 = 20.0;
    const BOTTOM: f64 = 50.0;
    let points: Vec<(f64, f64)> = results
        .iter()
        .flat_map(|r| r.records.iter().map(|c| (c.c, c.total_loss)))
        .collect();
    let range = |v: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
            (a.min(x), b.max(x))
        });
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(&mut points.iter().map(|p| p.0));
    let (y0, y1) = range(&mut points.iter().map(|p| p.1));
    let (y0, y1) = ((y0 - 0.05 * (y1 - y0)).max(0.0), y1 + 0.05 * (y1 - y0));
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let sy = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (ax0, ax1, ay0, ay1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(
        s,
        r#"<path d="M{ax0:.2} {ay1:.2} L{ax0:.2} {ay0:.2} L{ax1:.2} {ay0:.2}" stroke="black" fill="none"/>"#
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{fx:.3}</text>"#,
            sx(fx),
            ay0 + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{fy:.3}</text>"#,
            ax0 - 6.0,
            sy(fy) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">cost of a human query</text>"#,
        (ax0 + ax1) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">total loss</text>"#,
        (ay0 + ay1) / 2.0
    );
    for (i, r) in results.iter().enumerate() {
        let dash = if r.approach.is_joint() {
            ""
        } else {
            r#" stroke-dasharray="6 4""#
        };
        let c = color(r.approach);
        if !r.records.is_empty() {
            let path: Vec<String> = r
                .records
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    format!(
                        "{}{:.2} {:.2}",
                        if j == 0 { "M" } else { "L" },
                        sx(p.c),
                        sy(p.total_loss)
                    )
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<path d="{}" stroke="{c}" stroke-width="2" fill="none"{dash}/>"#,
                path.join(" ")
            );
        }
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<path d="M{:.2} {ly:.2} L{:.2} {ly:.2}" stroke="{c}" stroke-width="2"{dash}/>"#,
            ax1 + 15.0,
            ax1 + 45.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            ax1 + 52.0,
            ly + 4.0,
            r.approach.name()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the requested report files into `out_dir` and returns their paths.
pub fn emit_report(
    results: &[SweepResult],
    out_dir: &Path,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    for format in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Svg] {
        if !formats.contains(&format) {
            continue;
        }
        let (name, contents) = match format {
            ReportFormat::Json => ("sweep.json", json_string(results)?),
            ReportFormat::Csv => ("sweep.csv", sweep_csv(results)?),
            ReportFormat::Svg => ("loss_vs_cost.svg", loss_vs_cost_svg(results)),
        };
        files.push(write(out_dir.join(name), &contents)?);
    }
    Ok(files)
}

pub fn load_sweep_json(path: &Path) -> Result<Vec<SweepResult>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_error_tree(tree: &ErrorRegionTree, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(out_dir.join("error_tree.json"), &json_string(&tree.root)?)
}

#[cfg(test)]
mod tests {
    use super::super::sweep::{CostRecord, SeedRecord};
    use super::*;

    fn result() -> SweepResult {
        let costs = [0.0, 0.1, 0.2];
        SweepResult {
            approach: Approach::JointDisc,
            dataset: "d".into(),
            seeds: vec![7],
            records: costs
                .iter()
                .map(|&c| CostRecord {
                    c,
                    total_loss: 0.1 + c / 3.0,
                    classification_error: 0.1,
                    query_rate: 1.0 / 3.0,
                    selected_lambda: Some(0.5),
                    seeds_used: 1,
                })
                .collect(),
            per_seed: costs
                .iter()
                .map(|&c| SeedRecord {
                    seed: 7,
                    cost: c,
                    total_loss: 0.1 + c / 3.0,
                    classification_error: 0.1,
                    query_rate: 1.0 / 3.0,
                    selected_lambda: Some(0.5),
                })
                .collect(),
            failures: vec![],
        }
    }

    #[test]
    fn empty_results() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(
            &[],
            dir.path(),
            &[ReportFormat::Json, ReportFormat::Csv, ReportFormat::Svg],
        )
        .unwrap();
        let json = fs::read_to_string(dir.path().join("sweep.json")).unwrap();
        assert_eq!(
            serde_json::from_str::<Vec<SweepResult>>(&json).unwrap(),
            vec![]
        );
        let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(
            csv,
            "approach,cost,total_loss,classification_error,query_rate,selected_lambda,seed\n"
        );
    }

    #[test]
    fn csv_has_one_row_per_cost() {
        let csv = sweep_csv(&[result()]).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().starts_with("joint-disc,0.1,"));
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a");
        let second = dir.path().join("b");
        emit_report(&[result()], &first, &[ReportFormat::Json]).unwrap();
        let loaded = load_sweep_json(&first.join("sweep.json")).unwrap();
        emit_report(&loaded, &second, &[ReportFormat::Json]).unwrap();
        assert_eq!(
            fs::read(first.join("sweep.json")).unwrap(),
            fs::read(second.join("sweep.json")).unwrap()
        );
    }

    #[test]
    fn svg_dashes_only_fixed_lines() {
        let mut fixed = result();
        fixed.approach = Approach::FixedDisc;
        let svg = loss_vs_cost_svg(&[fixed, result()]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("stroke-dasharray").count(), 2);
        assert_eq!(
            svg,
            loss_vs_cost_svg(&[
                {
                    let mut f = result();
                    f.approach = Approach::FixedDisc;
                    f
                },
                result()
            ])
        );
    }
}
