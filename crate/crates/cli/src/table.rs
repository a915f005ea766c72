//! Results tables in the `mean% ± half-width%` cell format.

use std::fmt::Write as _;

use fewshot_core::evaluation::CI95_METHOD;
use fewshot_core::{format_cell, EvalReport, HeadKind};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub text: String,
    pub csv: String,
}

fn method_label(r: &EvalReport) -> String {
    r.config
        .get("head")
        .and_then(|h| h.get("kind"))
        .and_then(|k| serde_json::from_value::<HeadKind>(k.clone()).ok())
        .map(|k| k.display_name().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn domain(r: &EvalReport) -> Option<&str> {
    r.config.get("target").and_then(|t| t.get("domain")).and_then(|d| d.as_str())
}

fn column_key(r: &EvalReport) -> (u64, u64) {
    let get = |k: &str| r.config.get(k).and_then(|v| v.as_u64()).unwrap_or(0);
    (get("n_way"), get("k_shot"))
}

/// One row per method and one column per episode shape, in first-seen row
/// order and ascending shot order. Missing cells print as `-`.
pub fn render_table(reports: &[EvalReport]) -> Table {
    // Reports on different target domains get the domain in the row label.
    let mixed = reports.windows(2).any(|w| domain(&w[0]) != domain(&w[1]));
    let label = |r: &EvalReport| match (mixed, domain(r)) {
        (true, Some(d)) => format!("{} ({d})", method_label(r)),
        _ => method_label(r),
    };
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<(u64, u64)> = Vec::new();
    for r in reports {
        let m = label(r);
        if !rows.contains(&m) {
            rows.push(m);
        }
        let c = column_key(r);
        if !cols.contains(&c) {
            cols.push(c);
        }
    }
    cols.sort_by_key(|&(n, k)| (k, n));
    let same_way = cols.windows(2).all(|w| w[0].0 == w[1].0);
    let col_name = |&(n, k): &(u64, u64)| if same_way { format!("{k}-shot") } else { format!("{n}-way {k}-shot") };

    let mut csv = String::from("method,column,mean_accuracy,ci95_half_width,cell\n");
    let mut grid: Vec<Vec<String>> = vec![vec!["-".to_string(); cols.len()]; rows.len()];
    for r in reports {
        let i = rows.iter().position(|m| *m == label(r)).unwrap();
        let j = cols.iter().position(|c| *c == column_key(r)).unwrap();
        let cell = format_cell(r.mean_accuracy, r.ci95_half_width);
        writeln!(
            csv,
            "{},{},{},{},{}",
            rows[i],
            col_name(&cols[j]),
            r.mean_accuracy,
            r.ci95_half_width,
            cell
        )
        .unwrap();
        grid[i][j] = cell;
    }

    let mut header = vec!["Method".to_string()];
    header.extend(cols.iter().map(col_name));
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for (name, cells) in rows.iter().zip(&grid) {
        widths[0] = widths[0].max(name.chars().count());
        for (j, c) in cells.iter().enumerate() {
            widths[j + 1] = widths[j + 1].max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join(" | ").trim_end().to_string()
    };
    let mut text = line(&header);
    text.push('\n');
    text.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-"));
    text.push('\n');
    for (name, cells) in rows.iter().zip(&grid) {
        let mut all = vec![name.clone()];
        all.extend(cells.iter().cloned());
        text.push_str(&line(&all));
        text.push('\n');
    }
    writeln!(text, "\n± is the 95% half-width, {CI95_METHOD}.").unwrap();
    Table { text, csv }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn report(kind: &str, k: u64, mean: f64, hw: f64) -> EvalReport {
        EvalReport {
            config: json!({"head": {"kind": kind}, "n_way": 5, "k_shot": k}),
            n_episodes: 600,
            mean_accuracy: mean,
            ci95_half_width: hw,
            ci95_method: CI95_METHOD.into(),
            per_episode_accuracy: vec![],
            confusion: vec![],
            precision: vec![],
            flags: vec![],
        }
    }

    #[test]
    fn rows_per_method_columns_per_shot() {
        let t = render_table(&[
            report("baseline_pp", 5, 0.8, 0.01),
            report("baseline_pp", 1, 0.7303, 0.0084),
            report("proto", 1, 1.0, 0.0),
        ]);
        let lines: Vec<&str> = t.text.lines().collect();
        assert!(lines[0].starts_with("Method") && lines[0].contains("1-shot") && lines[0].find("1-shot") < lines[0].find("5-shot"));
        assert!(lines[2].starts_with("Baseline++") && lines[2].contains("73.03% ± 0.84%"));
        assert!(lines[3].starts_with("ProtoNet") && lines[3].contains("100.00% ± 0.00%") && lines[3].ends_with('-'));
        assert_eq!(t.csv.lines().count(), 4);
        assert!(t.csv.contains("ProtoNet,1-shot,1,0,100.00% ± 0.00%"));
    }
}
