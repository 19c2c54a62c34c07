//! Aggregate tables: separation quality (STOI, SAR, SDR, SIR) and overlap
//! purity (speech length, overlap length, ratio per threshold).

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricReport, OVERLAP_THRESHOLDS};

/// Mean and standard error of the mean over utterances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub threshold: f64,
    pub overlap_secs: Summary,
    pub ratio: Summary,
}

/// One system's aggregate over its utterances; per-utterance values are
/// stream means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub system: String,
    pub utterances: usize,
    pub stoi: Summary,
    pub sar: Summary,
    pub sdr: Summary,
    pub sir: Summary,
    pub si_snr: Summary,
    pub unit_accuracy: Option<Summary>,
    pub speech_secs: Summary,
    pub overlap: Vec<OverlapSummary>,
}

impl AggregateRow {
    pub fn overlap_at(&self, threshold: f64) -> Option<&OverlapSummary> {
        self.overlap.iter().find(|o| o.threshold == threshold)
    }
}

/// Groups reports by system (first-seen order) and summarizes each group.
pub fn aggregate(reports: &[MetricReport]) -> Vec<AggregateRow> {
    let mut systems: Vec<&str> = Vec::new();
    for r in reports {
        if !systems.contains(&r.system.as_str()) {
            systems.push(&r.system);
        }
    }
    systems
        .into_iter()
        .map(|system| {
            let group: Vec<&MetricReport> = reports.iter().filter(|r| r.system == system).collect();
            let col = |f: &dyn Fn(&MetricReport) -> f64| Summary::of(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            let accs: Vec<f64> = group.iter().filter_map(|r| r.unit_accuracy).collect();
            let overlap = OVERLAP_THRESHOLDS
                .iter()
                .map(|&t| {
                    let stats: Vec<_> = group.iter().filter_map(|r| r.overlap_at(t)).collect();
                    OverlapSummary {
                        threshold: t,
                        overlap_secs: Summary::of(&stats.iter().map(|o| o.overlap_secs).collect::<Vec<_>>()),
                        ratio: Summary::of(&stats.iter().map(|o| o.ratio).collect::<Vec<_>>()),
                    }
                })
                .collect();
            AggregateRow {
                system: system.to_string(),
                utterances: group.len(),
                stoi: col(&|r| r.mean_stream(|s| s.stoi)),
                sar: col(&|r| r.mean_stream(|s| s.sar)),
                sdr: col(&|r| r.mean_stream(|s| s.sdr)),
                sir: col(&|r| r.mean_stream(|s| s.sir)),
                si_snr: col(&|r| r.mean_stream(|s| s.si_snr)),
                unit_accuracy: (accs.len() == group.len()).then(|| Summary::of(&accs)),
                speech_secs: col(&|r| r.overlap.first().map_or(0.0, |o| o.speech_secs)),
                overlap,
            }
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn push_summary(rec: &mut Vec<String>, s: &Summary, scale: f64) {
    rec.push(format!("{:.6}", s.mean * scale));
    rec.push(format!("{:.6}", s.se * scale));
}

/// Quality table: system, n, then mean/SE for STOI, SAR, SDR, SIR,
/// followed by SI-SNR and unit accuracy.
pub fn write_table3<W: Write>(w: W, rows: &[AggregateRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["system".to_string(), "n".to_string()];
    for m in ["stoi", "sar_db", "sdr_db", "sir_db", "si_snr_db", "unit_accuracy"] {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_se"));
    }
    out.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.system.clone(), r.utterances.to_string()];
        for s in [&r.stoi, &r.sar, &r.sdr, &r.sir, &r.si_snr] {
            push_summary(&mut rec, s, 1.0);
        }
        match &r.unit_accuracy {
            Some(s) => push_summary(&mut rec, s, 1.0),
            None => rec.extend([String::new(), String::new()]),
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Overlap table: speech length, then overlap length and ratio (percent)
/// for each reporting threshold.
pub fn write_table4<W: Write>(w: W, rows: &[AggregateRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![
        "system".to_string(),
        "n".to_string(),
        "speech_len_s_mean".to_string(),
        "speech_len_s_se".to_string(),
    ];
    for t in OVERLAP_THRESHOLDS {
        header.push(format!("overlap_len_s_{t}_mean"));
        header.push(format!("overlap_len_s_{t}_se"));
    }
    for t in OVERLAP_THRESHOLDS {
        header.push(format!("ratio_pct_{t}_mean"));
        header.push(format!("ratio_pct_{t}_se"));
    }
    out.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.system.clone(), r.utterances.to_string()];
        push_summary(&mut rec, &r.speech_secs, 1.0);
        for o in &r.overlap {
            push_summary(&mut rec, &o.overlap_secs, 1.0);
        }
        for o in &r.overlap {
            push_summary(&mut rec, &o.ratio, 100.0);
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Fixed-width text rendering of both tables.
pub fn render_table(rows: &[AggregateRow]) -> String {
    let pm = |s: &Summary| format!("{:.2} ± {:.2}", s.mean, s.se);
    let mut t = String::new();
    let _ = writeln!(
        t,
        "{:<10} {:>4} {:>14} {:>16} {:>16} {:>16} {:>16} {:>14}",
        "system", "n", "STOI", "SAR (dB)", "SDR (dB)", "SIR (dB)", "SI-SNR (dB)", "unit acc"
    );
    for r in rows {
        let _ = writeln!(
            t,
            "{:<10} {:>4} {:>14} {:>16} {:>16} {:>16} {:>16} {:>14}",
            r.system,
            r.utterances,
            format!("{:.3} ± {:.3}", r.stoi.mean, r.stoi.se),
            pm(&r.sar),
            pm(&r.sdr),
            pm(&r.sir),
            pm(&r.si_snr),
            r.unit_accuracy
                .as_ref()
                .map_or("-".to_string(), |s| format!("{:.3} ± {:.3}", s.mean, s.se)),
        );
    }
    let _ = writeln!(t);
    let _ = writeln!(
        t,
        "{:<10} {:>12} {:>20} {:>20}",
        "system", "speech (s)", "overlap (s) 0.3/0.5", "ratio (%) 0.3/0.5"
    );
    for r in rows {
        let pair = |f: &dyn Fn(&OverlapSummary) -> f64| {
            r.overlap.iter().map(|o| format!("{:.2}", f(o))).collect::<Vec<_>>().join(" / ")
        };
        let _ = writeln!(
            t,
            "{:<10} {:>12.2} {:>20} {:>20}",
            r.system,
            r.speech_secs.mean,
            pair(&|o| o.overlap_secs.mean),
            pair(&|o| 100.0 * o.ratio.mean),
        );
    }
    t
}

fn bar_chart(title: &str, labels: &[String], series: &[(String, Vec<f64>)], unit: &str) -> String {
    let (w, h, left, bottom, top) = (640.0, 320.0, 60.0, 40.0, 30.0);
    let max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let groups = labels.len().max(1) as f64;
    let group_w = (w - left - 10.0) / groups;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    let colors = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n\
         <line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{unit}</text>\n",
        w / 2.0,
        h - bottom,
        w - 10.0,
        h - bottom,
        h / 2.0,
        h / 2.0
    );
    let plot_h = h - bottom - top;
    for (gi, label) in labels.iter().enumerate() {
        let gx = left + gi as f64 * group_w + group_w * 0.1;
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values.get(gi).copied().unwrap_or(0.0).max(0.0);
            let bh = plot_h * v / max;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"><title>{v:.4}</title></rect>",
                gx + si as f64 * bar_w,
                h - bottom - bh,
                bar_w,
                bh,
                colors[si % colors.len()]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{label}</text>",
            gx + group_w * 0.4,
            h - bottom + 16.0
        );
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let y = top + 14.0 * si as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{name}</text>",
            w - 110.0,
            y,
            colors[si % colors.len()],
            w - 95.0,
            y + 9.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Bar charts of overlap ratio and SDR per system; returns the files written.
pub fn write_plots(dir: &Path, rows: &[AggregateRow]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let labels: Vec<String> = rows.iter().map(|r| r.system.clone()).collect();
    let ratio_series: Vec<(String, Vec<f64>)> = OVERLAP_THRESHOLDS
        .iter()
        .map(|&t| {
            (
                format!("threshold {t}"),
                rows.iter()
                    .map(|r| r.overlap_at(t).map_or(0.0, |o| 100.0 * o.ratio.mean))
                    .collect(),
            )
        })
        .collect();
    let sdr_series = vec![("SDR".to_string(), rows.iter().map(|r| r.sdr.mean).collect())];
    let files = [
        (dir.join("overlap_ratio.svg"), bar_chart("Overlap ratio", &labels, &ratio_series, "%")),
        (dir.join("sdr.svg"), bar_chart("SDR", &labels, &sdr_series, "dB")),
    ];
    let mut out = Vec::new();
    for (path, svg) in files {
        fs::write(&path, svg)?;
        out.push(path);
    }
    Ok(out)
}

/// Writes `table3.csv`, `table4.csv`, `summary.txt` and, when `plots` is
/// set, SVG charts into `dir`.
pub fn report(reports: &[MetricReport], dir: &Path, plots: bool) -> Result<Vec<AggregateRow>> {
    let rows = aggregate(reports);
    fs::create_dir_all(dir)?;
    write_table3(fs::File::create(dir.join("table3.csv"))?, &rows)?;
    write_table4(fs::File::create(dir.join("table4.csv"))?, &rows)?;
    fs::write(dir.join("summary.txt"), render_table(&rows))?;
    fs::write(dir.join("aggregate.json"), serde_json::to_vec_pretty(&rows)?)?;
    if plots {
        write_plots(dir, &rows)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{OverlapStats, StreamMetrics};

    fn rep(system: &str, sdr: [f64; 2], ratio: f64) -> MetricReport {
        let stream = |v: f64| StreamMetrics {
            reference: 0,
            sdr: v,
            sir: v + 1.0,
            sar: v + 2.0,
            stoi: 0.5,
            si_snr: v - 1.0,
        };
        MetricReport {
            utterance: "u".into(),
            system: system.into(),
            permutation: vec![0, 1],
            streams: vec![stream(sdr[0]), stream(sdr[1])],
            overlap: OVERLAP_THRESHOLDS
                .iter()
                .map(|&t| OverlapStats {
                    threshold: t,
                    speech_secs: 2.0,
                    overlap_secs: 2.0 * ratio * (1.0 - t),
                    ratio: ratio * (1.0 - t),
                })
                .collect(),
            unit_accuracy: None,
        }
    }

    #[test]
    fn single_report_mean_is_that_report() {
        let rows = aggregate(&[rep("a", [4.0, 6.0], 0.2)]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].sdr, Summary { mean: 5.0, se: 0.0, n: 1 });
        assert_eq!(rows[0].sir.mean, 6.0);
        assert!(rows[0].unit_accuracy.is_none());
    }

    #[test]
    fn three_reports_match_hand_computation() {
        let rows = aggregate(&[rep("a", [1.0, 1.0], 0.1), rep("a", [2.0, 2.0], 0.1), rep("a", [6.0, 6.0], 0.4)]);
        // sdr values 1, 2, 6: mean 3, sample variance 7, SE sqrt(7/3)
        assert!((rows[0].sdr.mean - 3.0).abs() < 1e-12);
        assert!((rows[0].sdr.se - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
        // ratios at 0.3 are 0.07, 0.07, 0.28
        assert!((rows[0].overlap_at(0.3).unwrap().ratio.mean - 0.14).abs() < 1e-12);
    }

    #[test]
    fn systems_keep_first_seen_order_and_csv_columns() {
        let rows = aggregate(&[rep("b", [1.0, 1.0], 0.1), rep("a", [2.0, 2.0], 0.1)]);
        assert_eq!(rows.iter().map(|r| r.system.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        let mut buf = Vec::new();
        write_table3(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        let pos = |k: &str| header.find(k).unwrap();
        assert!(pos("stoi") < pos("sar") && pos("sar") < pos("sdr") && pos("sdr") < pos("sir"));
        let mut buf = Vec::new();
        write_table4(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.find("speech_len").unwrap() < header.find("overlap_len").unwrap());
        assert!(header.find("overlap_len").unwrap() < header.find("ratio_pct_0.3").unwrap());
        assert!(text.lines().nth(1).unwrap().starts_with("b,1,2.000000"));
    }

    #[test]
    fn plots_only_when_asked() {
        let tmp = tempfile::tempdir().unwrap();
        let reports = [rep("a", [1.0, 2.0], 0.1)];
        report(&reports, tmp.path(), false).unwrap();
        let svgs = |p: &Path| {
            fs::read_dir(p)
                .unwrap()
                .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
                .count()
        };
        assert_eq!(svgs(tmp.path()), 0);
        assert!(tmp.path().join("table3.csv").is_file());
        report(&reports, tmp.path(), true).unwrap();
        assert_eq!(svgs(tmp.path()), 2);
    }
}
