//! Aggregation of per-seed metric files into CSV tables and SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::metrics::EvalRecord;

pub const SUMMARY_HEADER: &str = "cell,task,metric,seeds,mean,std";

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub cell: String,
    pub task: String,
    pub metric: String,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Aggregate {
    pub rows: Vec<SummaryRow>,
    /// Lines that failed to parse.
    pub malformed: usize,
}

impl Aggregate {
    pub fn get(&self, cell: &str, task: &str, metric: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.cell == cell && r.task == task && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.cell, r.task, r.metric, r.seeds, r.mean, r.std
            );
        }
        s
    }
}

/// `<dir>/<cell>/seed*.jsonl`, sorted.
pub fn seed_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Ok(out);
    }
    for cell in fs::read_dir(dir)? {
        let cell = cell?.path();
        if !cell.is_dir() {
            continue;
        }
        for f in fs::read_dir(&cell)? {
            let f = f?.path();
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with("seed") && name.ends_with(".jsonl") {
                out.push(f);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Groups final-step records of each file by `(cell, task, metric)`; the cell
/// is the file's parent directory name.
pub fn aggregate(files: &[PathBuf]) -> Result<Aggregate> {
    let mut groups: Vec<((String, String, String), Vec<f64>)> = Vec::new();
    let mut malformed = 0;
    for path in files {
        let cell = path
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|n| n.to_str())
            .unwrap_or("")
            .to_string();
        let text = fs::read_to_string(path)?;
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<EvalRecord>(line) {
                Ok(r) if r.value.is_finite() => records.push(r),
                _ => malformed += 1,
            }
        }
        let Some(last) = records.iter().map(|r| r.step).max() else {
            continue;
        };
        for r in records.into_iter().filter(|r| r.step == last) {
            let key = (cell.clone(), r.task, r.metric);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(r.value),
                None => groups.push((key, vec![r.value])),
            }
        }
    }
    let rows = groups
        .into_iter()
        .map(|((cell, task, metric), v)| {
            let (mean, std) = mean_std(&v);
            SummaryRow {
                cell,
                task,
                metric,
                seeds: v.len(),
                mean,
                std,
            }
        })
        .collect();
    Ok(Aggregate { rows, malformed })
}

/// One method's quality and cost on one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffPoint {
    pub task: String,
    pub method: String,
    pub value: f64,
    pub seconds: f64,
}

/// Per task: quality as `(value - best) / best` (best method at 0) and time
/// as `seconds / slowest` (slowest method at 1).
pub fn normalize_tradeoff(points: &[TradeoffPoint]) -> Vec<TradeoffPoint> {
    points
        .iter()
        .map(|p| {
            let same = points.iter().filter(|q| q.task == p.task);
            let best = same
                .clone()
                .map(|q| q.value)
                .fold(f64::NEG_INFINITY, f64::max);
            let slowest = same.map(|q| q.seconds).fold(0.0, f64::max);
            TradeoffPoint {
                task: p.task.clone(),
                method: p.method.clone(),
                value: if best != 0.0 {
                    (p.value - best) / best
                } else {
                    0.0
                },
                seconds: if slowest > 0.0 {
                    p.seconds / slowest
                } else {
                    0.0
                },
            }
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

/// Grouped bars: one group per task, one bar per cell, with ±std whiskers.
pub fn bar_chart_svg(rows: &[SummaryRow], title: &str) -> String {
    let mut tasks: Vec<&str> = Vec::new();
    let mut cells: Vec<&str> = Vec::new();
    for r in rows {
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
        if !cells.contains(&r.cell.as_str()) {
            cells.push(&r.cell);
        }
    }
    let bar = 14.0;
    let group = bar * cells.len().max(1) as f64 + 20.0;
    let (left, top, height) = (60.0, 40.0, 240.0);
    let width = left + group * tasks.len().max(1) as f64 + 180.0;
    let ymax = rows
        .iter()
        .map(|r| r.mean + r.std)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let y = |v: f64| top + height * (1.0 - v / ymax);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{:.0}" font-family="sans-serif" font-size="11">"#,
        top + height + 60.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="20" font-size="13">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + height
    );
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            left - 4.0,
            y(v) + 4.0
        );
    }
    for (ti, task) in tasks.iter().enumerate() {
        let gx = left + 10.0 + group * ti as f64;
        for (ci, cell) in cells.iter().enumerate() {
            let Some(r) = rows.iter().find(|r| r.task == *task && r.cell == *cell) else {
                continue;
            };
            let x = gx + bar * ci as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                y(r.mean.max(0.0)),
                bar - 2.0,
                (top + height - y(r.mean.max(0.0))).max(0.0),
                PALETTE[ci % PALETTE.len()]
            );
            let cx = x + (bar - 2.0) / 2.0;
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                y((r.mean - r.std).max(0.0)),
                y(r.mean + r.std)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + group / 2.0 - 10.0,
            top + height + 16.0,
            escape(task)
        );
    }
    let lx = left + group * tasks.len().max(1) as f64 + 20.0;
    for (ci, cell) in cells.iter().enumerate() {
        let ly = top + 14.0 * ci as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{ly:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            PALETTE[ci % PALETTE.len()],
            lx + 14.0,
            ly + 9.0,
            escape(cell)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter of normalized time (x) against normalized quality (y).
pub fn tradeoff_svg(points: &[TradeoffPoint], title: &str) -> String {
    let (left, top, w, h) = (60.0, 40.0, 300.0, 240.0);
    let ymin = points
        .iter()
        .map(|p| p.value)
        .fold(0.0f64, f64::min)
        .min(-1e-9);
    let px = |t: f64| left + w * t;
    let py = |v: f64| top + h * (v / ymin);
    let mut methods: Vec<&str> = Vec::new();
    for p in points {
        if !methods.contains(&p.method.as_str()) {
            methods.push(&p.method);
        }
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="sans-serif" font-size="11">"#,
        left + w + 180.0,
        top + h + 50.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="20" font-size="13">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{w}" height="{h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">time / slowest</text>"#,
        left + w / 2.0,
        top + h + 30.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">0%</text>"#,
        left - 4.0,
        top + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{:.1}%</text>"#,
        left - 4.0,
        top + h,
        100.0 * ymin
    );
    for p in points {
        let ci = methods.iter().position(|m| *m == p.method).unwrap_or(0);
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{}"><title>{} {}</title></circle>"#,
            px(p.seconds),
            py(p.value),
            PALETTE[ci % PALETTE.len()],
            escape(&p.task),
            escape(&p.method)
        );
    }
    for (ci, m) in methods.iter().enumerate() {
        let ly = top + 14.0 * ci as f64;
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            left + w + 24.0,
            ly + 5.0,
            PALETTE[ci % PALETTE.len()],
            left + w + 34.0,
            ly + 9.0,
            escape(m)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Files written by [`write_report`].
#[derive(Clone, Debug, Default)]
pub struct ReportOutput {
    pub aggregate: Aggregate,
    pub files: Vec<PathBuf>,
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Aggregates the seed files under `input` into `report.csv`, one bar chart
/// per evaluation metric and, when timings exist, `tradeoff.{csv,svg}`.
pub fn write_report(input: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<ReportOutput> {
    let input = input.as_ref();
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let agg = aggregate(&seed_files(input)?)?;
    let mut files = Vec::new();
    let csv = out.join("report.csv");
    fs::write(&csv, agg.to_csv())?;
    files.push(csv);
    let mut metrics: Vec<&str> = Vec::new();
    for r in &agg.rows {
        if r.task != "train" && r.task != "store" && !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    for m in metrics {
        let rows: Vec<SummaryRow> = agg
            .rows
            .iter()
            .filter(|r| r.metric == m && r.task != "train" && r.task != "store")
            .cloned()
            .collect();
        let path = out.join(format!("{}.svg", safe_name(m)));
        fs::write(&path, bar_chart_svg(&rows, m))?;
        files.push(path);
    }
    let timings = super::runner::read_timings(super::runner::timings_file(input))?;
    if !timings.is_empty() {
        let points: Vec<TradeoffPoint> = timings
            .iter()
            .filter_map(|(cell, task, secs)| {
                agg.rows
                    .iter()
                    .find(|r| {
                        &r.cell == cell && &r.task == task && r.task != "train" && r.task != "store"
                    })
                    .map(|r| TradeoffPoint {
                        task: task.clone(),
                        method: cell.clone(),
                        value: r.mean,
                        seconds: *secs,
                    })
            })
            .collect();
        let norm = normalize_tradeoff(&points);
        let mut s = String::from("task,method,quality_rel,time_rel\n");
        for p in &norm {
            let _ = writeln!(s, "{},{},{},{}", p.task, p.method, p.value, p.seconds);
        }
        let path = out.join("tradeoff.csv");
        fs::write(&path, s)?;
        files.push(path);
        let path = out.join("tradeoff.svg");
        fs::write(&path, tradeoff_svg(&norm, "quality vs decode time"))?;
        files.push(path);
    }
    Ok(ReportOutput {
        aggregate: agg,
        files,
    })
}
