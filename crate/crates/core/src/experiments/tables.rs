use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::read_json;
use super::run::{Cell, Panel, RunManifest, FULL_RATIO, ROWS_FILE, RUNS_DIR, RUN_MANIFEST};
use super::spec::Protocol;
use crate::error::{Error, Result};
use crate::eval::{read_rows, write_rows, MetricsRow};
use crate::ingest::LabelRatio;
use crate::models::Backbone;
use crate::trainers::Algorithm;

/// Mean over seeds, with the sample standard deviation once there are two.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        Some(Stat { mean, std, n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Better {
    Higher,
    Lower,
}

/// Display scale and direction of a metric column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Miou,
    MaeAvg,
    MaePr,
    MaeQrs,
    MaeQt,
}

impl Metric {
    pub fn value(self, row: &MetricsRow) -> Option<f64> {
        match self {
            Metric::Miou => row.miou.map(|v| 100.0 * v),
            Metric::MaeAvg => row.mae_avg,
            Metric::MaePr => row.mae_pr,
            Metric::MaeQrs => row.mae_qrs,
            Metric::MaeQt => row.mae_qt,
        }
    }

    pub fn better(self) -> Better {
        match self {
            Metric::Miou => Better::Higher,
            _ => Better::Lower,
        }
    }

    fn short(self) -> &'static str {
        match self {
            Metric::Miou => "mIoU",
            Metric::MaeAvg => "Avg.",
            Metric::MaePr => "PR",
            Metric::MaeQrs => "QRS",
            Metric::MaeQt => "QT",
        }
    }
}

const MAE_METRICS: [Metric; 4] = [Metric::MaeAvg, Metric::MaePr, Metric::MaeQrs, Metric::MaeQt];

pub fn backbone_title(b: &str) -> String {
    match b.parse::<Backbone>() {
        Ok(Backbone::Resnet18_1d) => "ResNet-18 + FCN".into(),
        Ok(Backbone::VitTiny1d) => "ViT-Tiny + FCN".into(),
        Err(_) => b.to_string(),
    }
}

pub fn method_title(a: &str) -> String {
    a.parse::<Algorithm>().map(|a| a.label().to_string()).unwrap_or_else(|_| a.to_string())
}

fn fmt_stat(s: Option<Stat>) -> String {
    match s {
        None => "n/a".into(),
        Some(Stat { mean, std: None, .. }) => format!("{mean:.1}"),
        Some(Stat { mean, std: Some(sd), .. }) => format!("{mean:.1} ± {sd:.1}"),
    }
}

/// Bolds the best cells of one column. Cells whose means print the same are
/// tied and all bolded.
fn bold_column(cells: &mut [(Option<Stat>, String)], better: Better) {
    let shown: Vec<Option<f64>> = cells
        .iter()
        .map(|(s, _)| s.map(|s| format!("{:.1}", s.mean).parse::<f64>().expect("formatted float")))
        .collect();
    let best = shown.iter().flatten().copied().reduce(|a, b| match better {
        Better::Higher => a.max(b),
        Better::Lower => a.min(b),
    });
    let Some(best) = best else { return };
    for ((_, text), v) in cells.iter_mut().zip(shown) {
        if v == Some(best) {
            *text = format!("**{text}**");
        }
    }
}

fn ordered_methods<'a>(rows: impl Iterator<Item = &'a MetricsRow>) -> Vec<String> {
    let mut names: Vec<String> = rows.map(|r| r.algorithm.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    names.sort_by_key(|n| {
        n.parse::<Algorithm>()
            .map(|a| Algorithm::ALL.iter().position(|x| *x == a).unwrap_or(usize::MAX))
            .unwrap_or(usize::MAX)
    });
    names
}

fn ordered_backbones<'a>(rows: impl Iterator<Item = &'a MetricsRow>) -> Vec<String> {
    let mut names: Vec<String> = rows.map(|r| r.backbone.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    names.sort_by_key(|n| n.parse::<Backbone>().map(|b| b as usize).unwrap_or(usize::MAX));
    names
}

fn ratio_order(tag: &str) -> usize {
    tag.parse::<LabelRatio>()
        .map(|r| LabelRatio::ALL.iter().position(|x| *x == r).unwrap_or(0))
        .unwrap_or(LabelRatio::ALL.len())
}

fn stat_of<'a>(rows: impl Iterator<Item = &'a MetricsRow>, metric: Metric) -> Option<Stat> {
    let values: Vec<f64> = rows.filter_map(|r| metric.value(r)).collect();
    Stat::of(&values)
}

/// A Markdown table whose columns are bolded independently per section.
struct Grid {
    header: Vec<String>,
    sections: Vec<(Option<String>, Vec<(String, Vec<(Option<Stat>, String)>)>)>,
    better: Vec<Better>,
}

impl Grid {
    fn render(mut self) -> String {
        let mut out = String::new();
        let width = self.header.len();
        writeln!(out, "| {} |", self.header.join(" | ")).unwrap();
        writeln!(out, "|{}", "---|".repeat(width)).unwrap();
        for (title, rows) in &mut self.sections {
            for c in 0..self.better.len() {
                let mut column: Vec<(Option<Stat>, String)> = rows.iter().map(|(_, cells)| cells[c].clone()).collect();
                bold_column(&mut column, self.better[c]);
                for ((_, cells), cell) in rows.iter_mut().zip(column) {
                    cells[c] = cell;
                }
            }
            if let Some(t) = title {
                writeln!(out, "| {t} |{}", " |".repeat(width - 1)).unwrap();
            }
            for (method, cells) in rows.iter() {
                let texts: Vec<&str> = cells.iter().map(|(_, t)| t.as_str()).collect();
                writeln!(out, "| {method} | {} |", texts.join(" | ")).unwrap();
            }
        }
        out
    }
}

fn cell(rows: &[&MetricsRow], metric: Metric) -> (Option<Stat>, String) {
    let s = stat_of(rows.iter().copied(), metric);
    (s, fmt_stat(s))
}

/// Methods × ratios per backbone, one section per dataset, mIoU in percent.
pub fn in_domain_table(rows: &[MetricsRow]) -> String {
    let backbones = ordered_backbones(rows.iter());
    let mut ratios: Vec<String> = rows.iter().map(|r| r.ratio.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    ratios.sort_by_key(|r| ratio_order(r));
    let columns: Vec<(String, String)> = backbones
        .iter()
        .flat_map(|b| ratios.iter().map(move |r| (b.clone(), r.clone())))
        .collect();
    let datasets: BTreeSet<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    let mut header = vec!["Methods".to_string()];
    header.extend(columns.iter().map(|(b, r)| format!("{} {r}", backbone_title(b))));
    let mut sections = Vec::new();
    for ds in datasets {
        let in_ds: Vec<&MetricsRow> = rows.iter().filter(|r| r.dataset == ds).collect();
        let body = ordered_methods(in_ds.iter().copied())
            .into_iter()
            .map(|m| {
                let cells = columns
                    .iter()
                    .map(|(b, r)| {
                        let sel: Vec<&MetricsRow> = in_ds
                            .iter()
                            .copied()
                            .filter(|x| x.algorithm == m && &x.backbone == b && &x.ratio == r)
                            .collect();
                        cell(&sel, Metric::Miou)
                    })
                    .collect();
                (method_title(&m), cells)
            })
            .collect();
        sections.push((Some(format!("*{ds}*")), body));
    }
    let better = vec![Better::Higher; columns.len()];
    let mut out = String::from(
        "In-domain benchmarking results (mIoU, %) on the test sets under varying label ratios. Best values are bolded.\n\n",
    );
    out.push_str(
        &Grid {
            header,
            sections,
            better,
        }
        .render(),
    );
    out
}

/// mIoU plus the four interval errors, one section per backbone.
pub fn cross_domain_table(rows: &[MetricsRow]) -> String {
    let metrics = [Metric::Miou, Metric::MaeAvg, Metric::MaePr, Metric::MaeQrs, Metric::MaeQt];
    let header = vec![
        "Methods".to_string(),
        "mIoU (%) ↑".to_string(),
        "MAE Avg. (ms) ↓".to_string(),
        "MAE PR (ms) ↓".to_string(),
        "MAE QRS (ms) ↓".to_string(),
        "MAE QT (ms) ↓".to_string(),
    ];
    let mut sections = Vec::new();
    for b in ordered_backbones(rows.iter()) {
        let in_b: Vec<&MetricsRow> = rows.iter().filter(|r| r.backbone == b).collect();
        let body = ordered_methods(in_b.iter().copied())
            .into_iter()
            .map(|m| {
                let sel: Vec<&MetricsRow> = in_b.iter().copied().filter(|x| x.algorithm == m).collect();
                (method_title(&m), metrics.iter().map(|&k| cell(&sel, k)).collect())
            })
            .collect();
        sections.push((Some(format!("**{}**", backbone_title(&b))), body));
    }
    let datasets: BTreeSet<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    let names: Vec<&str> = datasets.into_iter().collect();
    let mut out = format!(
        "Cross-domain benchmarking results on the merged in-domain test set ({}). Best values are bolded (↑: higher is better, ↓: lower is better).\n\n",
        names.join(", ")
    );
    out.push_str(
        &Grid {
            header,
            sections,
            better: metrics.iter().map(|m| m.better()).collect(),
        }
        .render(),
    );
    out
}

/// Interval errors only, Avg./PR/QRS/QT per backbone.
pub fn interval_only_table(dataset: &str, rows: &[MetricsRow]) -> String {
    let backbones = ordered_backbones(rows.iter());
    let columns: Vec<(String, Metric)> = backbones
        .iter()
        .flat_map(|b| MAE_METRICS.iter().map(move |&m| (b.clone(), m)))
        .collect();
    let mut header = vec!["Methods".to_string()];
    header.extend(columns.iter().map(|(b, m)| format!("{} {} (ms) ↓", backbone_title(b), m.short())));
    let body = ordered_methods(rows.iter())
        .into_iter()
        .map(|m| {
            let cells = columns
                .iter()
                .map(|(b, k)| {
                    let sel: Vec<&MetricsRow> = rows.iter().filter(|x| x.algorithm == m && &x.backbone == b).collect();
                    cell(&sel, *k)
                })
                .collect();
            (method_title(&m), cells)
        })
        .collect();
    let mut out = format!(
        "Out-domain generalization results on {dataset}. Only MAE (ms) was reported, as the set carries interval labels without delineation annotation. Best values are bolded.\n\n"
    );
    out.push_str(
        &Grid {
            header,
            sections: vec![(None, body)],
            better: vec![Better::Lower; columns.len()],
        }
        .render(),
    );
    out
}

/// Two panels: weak variants under Scratch and strong variants under FixMatch.
pub fn ablation_report(runs: &[(Cell, Vec<MetricsRow>)]) -> String {
    let mut out = String::new();
    let backbones = ordered_backbones(runs.iter().flat_map(|(_, r)| r.iter()));
    let stat = |panel: Panel, variant: &str, backbone: &str| {
        let rows: Vec<&MetricsRow> = runs
            .iter()
            .filter(|(c, _)| c.panel == Some(panel) && c.variant.as_deref() == Some(variant))
            .flat_map(|(_, r)| r.iter())
            .filter(|r| r.backbone == backbone)
            .collect();
        cell(&rows, Metric::Miou)
    };
    let variants = |panel: Panel| {
        let mut seen = Vec::new();
        for (c, _) in runs {
            if c.panel == Some(panel) {
                if let Some(v) = &c.variant {
                    if !seen.contains(v) {
                        seen.push(v.clone());
                    }
                }
            }
        }
        seen
    };
    let dataset = runs.first().map(|(c, _)| format!("{} at {}", c.dataset, c.ratio_tag())).unwrap_or_default();
    writeln!(out, "Augmentation ablation on {dataset} (mIoU, %). Best values are bolded.\n").unwrap();
    for (panel, title) in [
        (Panel::Weak, "Weak augmentation, trained with Scratch"),
        (Panel::Strong, "Strong augmentation, trained with FixMatch on random resized crops"),
    ] {
        let names = variants(panel);
        if names.is_empty() {
            continue;
        }
        let mut header = vec!["Variant".to_string()];
        header.extend(backbones.iter().map(|b| backbone_title(b)));
        let body = names
            .iter()
            .map(|v| (v.clone(), backbones.iter().map(|b| stat(panel, v, b)).collect()))
            .collect();
        writeln!(out, "**{title}**\n").unwrap();
        out.push_str(
            &Grid {
                header,
                sections: vec![(None, body)],
                better: vec![Better::Higher; backbones.len()],
            }
            .render(),
        );
        out.push('\n');
    }
    for b in &backbones {
        let none = stat(Panel::Weak, "none", b).1;
        let crop = stat(Panel::Weak, "crop", b).1;
        writeln!(
            out,
            "{}: Scratch performance without any augmentation {none}; Scratch with random resized cropping {crop}.",
            backbone_title(b)
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub rows: Vec<MetricsRow>,
}

/// Run directories under each path: the path itself when it holds a run
/// manifest, otherwise its `runs/` subdirectory or its direct children.
pub fn discover_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for p in paths {
        if p.join(RUN_MANIFEST).is_file() {
            dirs.push(p.clone());
            continue;
        }
        let parent = if p.join(RUNS_DIR).is_dir() { p.join(RUNS_DIR) } else { p.clone() };
        let mut children: Vec<PathBuf> = fs::read_dir(&parent)
            .map_err(Error::io(&parent))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.is_dir())
            .collect();
        children.sort();
        dirs.extend(children);
    }
    Ok(dirs)
}

/// Reads complete runs; anything else is returned with the reason it was skipped.
pub fn collect_runs(dirs: &[PathBuf]) -> (Vec<RunSummary>, Vec<(PathBuf, String)>) {
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for dir in dirs {
        let manifest: RunManifest = match read_json(&dir.join(RUN_MANIFEST)) {
            Ok(m) => m,
            Err(e) => {
                skipped.push((dir.clone(), e.to_string()));
                continue;
            }
        };
        if !manifest.is_complete() {
            skipped.push((dir.clone(), "run did not finish".into()));
            continue;
        }
        match read_rows(&dir.join(ROWS_FILE)) {
            Ok(rows) => ok.push(RunSummary {
                dir: dir.clone(),
                manifest,
                rows,
            }),
            Err(e) => skipped.push((dir.clone(), e.to_string())),
        }
    }
    (ok, skipped)
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub markdown: String,
    pub rows: Vec<MetricsRow>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Renders every table the complete runs support.
pub fn render_tables(runs: &[RunSummary]) -> String {
    let mut out = String::new();
    let of = |p: Protocol| runs.iter().filter(move |r| r.manifest.cell.protocol == p);

    let in_domain: Vec<MetricsRow> = of(Protocol::InDomain).flat_map(|r| r.rows.clone()).collect();
    if !in_domain.is_empty() {
        out.push_str("## In-domain\n\n");
        out.push_str(&in_domain_table(&in_domain));
        out.push('\n');
    }

    let cross: Vec<&RunSummary> = of(Protocol::CrossDomain).collect();
    if !cross.is_empty() {
        let ratios: BTreeSet<&str> = cross.iter().map(|r| r.manifest.cell.ratio_tag()).collect();
        for ratio in ratios {
            let suffix = if ratio == FULL_RATIO { String::new() } else { format!(", labels {ratio}") };
            let sel: Vec<&MetricsRow> = cross
                .iter()
                .filter(|r| r.manifest.cell.ratio_tag() == ratio)
                .flat_map(|r| r.rows.iter())
                .collect();
            let dense: Vec<MetricsRow> = sel.iter().filter(|r| r.miou.is_some()).map(|&r| r.clone()).collect();
            if !dense.is_empty() {
                writeln!(out, "## Cross-domain{suffix}\n").unwrap();
                out.push_str(&cross_domain_table(&dense));
                out.push('\n');
            }
            let interval: BTreeMap<String, Vec<MetricsRow>> = sel.iter().filter(|r| r.miou.is_none()).fold(
                BTreeMap::new(),
                |mut acc, r| {
                    acc.entry(r.dataset.clone()).or_default().push((*r).clone());
                    acc
                },
            );
            for (ds, rows) in interval {
                writeln!(out, "## Out-domain, {ds}{suffix}\n").unwrap();
                out.push_str(&interval_only_table(&ds, &rows));
                out.push('\n');
            }
        }
    }

    let ablation: Vec<(Cell, Vec<MetricsRow>)> = of(Protocol::AugAblation)
        .map(|r| (r.manifest.cell.clone(), r.rows.clone()))
        .collect();
    if !ablation.is_empty() {
        out.push_str("## Augmentation ablation\n\n");
        out.push_str(&ablation_report(&ablation));
    }
    out
}

/// Aggregates run directories into `results.csv` and `tables.md` under `out_dir`.
pub fn cmd_report(paths: &[PathBuf], out_dir: &Path) -> Result<ReportOutput> {
    let dirs = discover_runs(paths)?;
    let (runs, skipped) = collect_runs(&dirs);
    for (dir, why) in &skipped {
        log::warn!("skipping {}: {why}", dir.display());
    }
    if runs.is_empty() {
        return Err(Error::Validation("no complete runs to report".into()));
    }
    let rows: Vec<MetricsRow> = runs.iter().flat_map(|r| r.rows.clone()).collect();
    let mut markdown = render_tables(&runs);
    if !skipped.is_empty() {
        markdown.push_str("\nSkipped incomplete runs:\n\n");
        for (dir, why) in &skipped {
            writeln!(markdown, "- `{}`: {why}", dir.display()).unwrap();
        }
    }
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    write_rows(&out_dir.join("results.csv"), &rows)?;
    let md = out_dir.join("tables.md");
    fs::write(&md, &markdown).map_err(Error::io(&md))?;
    Ok(ReportOutput {
        markdown,
        rows,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(dataset: &str, alg: &str, backbone: &str, ratio: &str, seed: u64, miou: Option<f64>, mae: f64) -> MetricsRow {
        MetricsRow {
            dataset: dataset.into(),
            algorithm: alg.into(),
            backbone: backbone.into(),
            ratio: ratio.into(),
            seed,
            miou,
            iou_p: None,
            iou_qrs: None,
            iou_t: None,
            iou_bg: None,
            mae_pr: Some(mae),
            mae_qrs: Some(mae),
            mae_qt: Some(mae),
            mae_avg: Some(mae),
            coverage_pr: 1.0,
            coverage_qrs: 1.0,
            coverage_qt: 1.0,
        }
    }

    #[test]
    fn single_seed_mean_is_the_value() {
        let s = Stat::of(&[0.7]).unwrap();
        assert_eq!((s.mean, s.std, s.n), (0.7, None, 1));
        let s = Stat::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std), (2.0, Some(2f64.sqrt())));
    }

    #[test]
    fn ties_in_printed_value_are_all_bold() {
        let mut cells = vec![
            (Stat::of(&[68.51]), String::from("68.5")),
            (Stat::of(&[68.49]), String::from("68.5")),
            (Stat::of(&[60.0]), String::from("60.0")),
        ];
        bold_column(&mut cells, Better::Higher);
        assert_eq!(cells[0].1, "**68.5**");
        assert_eq!(cells[1].1, "**68.5**");
        assert_eq!(cells[2].1, "60.0");
    }

    #[test]
    fn lower_mae_is_bold() {
        let rows = vec![
            row("m", "scratch", "resnet18_1d", "full", 0, None, 26.4),
            row("m", "mt", "resnet18_1d", "full", 0, None, 28.2),
        ];
        let t = interval_only_table("m", &rows);
        assert!(t.contains("| Scratch | **26.4** | **26.4**"));
        assert!(!t.contains("mIoU"));
    }
}
