//! Plain-text, CSV and JSON renderings of result tables. All numbers are
//! printed with four decimals; absent cells print as `NA`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::report::{MetricsReport, Space};
use crate::task::IndicatorTask;

pub fn fmt4(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "NA".to_string(),
    }
}

fn csv_line(fields: &[String]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(fields).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Left-aligns the first column, right-aligns the rest.
fn align(lines: &[Vec<String>]) -> String {
    let width = lines.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0; width];
    for line in lines {
        for (i, cell) in line.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for line in lines {
        let cells: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// A labelled matrix of single values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub title: String,
    pub corner: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: BTreeMap<String, BTreeMap<String, f64>>,
}

impl Grid {
    pub fn new(title: impl Into<String>, corner: impl Into<String>, rows: Vec<String>, cols: Vec<String>) -> Self {
        Self { title: title.into(), corner: corner.into(), rows, cols, cells: BTreeMap::new() }
    }

    pub fn set(&mut self, row: &str, col: &str, v: f64) {
        self.cells.entry(row.to_string()).or_default().insert(col.to_string(), v);
    }

    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        self.cells.get(row)?.get(col).copied()
    }

    fn lines(&self) -> Vec<Vec<String>> {
        let mut lines = vec![std::iter::once(self.corner.clone()).chain(self.cols.iter().cloned()).collect()];
        for r in &self.rows {
            lines.push(std::iter::once(r.clone()).chain(self.cols.iter().map(|c| fmt4(self.get(r, c)))).collect());
        }
        lines
    }

    pub fn to_csv(&self) -> String {
        self.lines().iter().map(|l| csv_line(l)).collect()
    }

    pub fn to_text(&self) -> String {
        format!("{}\n\n{}", self.title, align(&self.lines()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
}

/// Rows (cities) by models, each cell holding MAE, RMSE and R².
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricGrid {
    pub title: String,
    pub corner: String,
    pub rows: Vec<String>,
    pub models: Vec<String>,
    pub cells: BTreeMap<String, BTreeMap<String, MetricCell>>,
}

impl MetricGrid {
    pub fn new(title: impl Into<String>, rows: Vec<String>, models: Vec<String>) -> Self {
        Self { title: title.into(), corner: "City".into(), rows, models, cells: BTreeMap::new() }
    }

    pub fn set(&mut self, row: &str, model: &str, cell: MetricCell) {
        self.cells.entry(row.to_string()).or_default().insert(model.to_string(), cell);
    }

    pub fn get(&self, row: &str, model: &str) -> Option<MetricCell> {
        self.cells.get(row)?.get(model).copied()
    }

    fn body(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut line = vec![r.clone()];
                for m in &self.models {
                    let c = self.get(r, m);
                    line.extend([fmt4(c.map(|c| c.mae)), fmt4(c.map(|c| c.rmse)), fmt4(c.map(|c| c.r2))]);
                }
                line
            })
            .collect()
    }

    /// Single header row with `<model> MAE` style column names.
    pub fn to_csv(&self) -> String {
        let mut header = vec![self.corner.clone()];
        for m in &self.models {
            header.extend([format!("{m} MAE"), format!("{m} RMSE"), format!("{m} R2")]);
        }
        std::iter::once(header).chain(self.body()).map(|l| csv_line(&l)).collect()
    }

    /// Two header rows: model names over their three metric columns.
    pub fn to_text(&self) -> String {
        let mut top = vec![self.corner.clone()];
        let mut sub = vec![String::new()];
        for m in &self.models {
            top.extend([m.clone(), String::new(), String::new()]);
            sub.extend(["MAE".to_string(), "RMSE".to_string(), "R2".to_string()]);
        }
        let mut lines = vec![top, sub];
        lines.extend(self.body());
        format!("{}\n\n{}", self.title, align(&lines))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serializes")
    }
}

/// Task by model R², averaged over cities.
pub fn task_model_r2(report: &MetricsReport, space: Space, models: &[String]) -> Grid {
    let tasks = report.tasks();
    let mut grid = Grid::new(
        format!("R² by task and model ({space} space, mean over cities)"),
        "Task",
        tasks.iter().map(|t| t.table_label().to_string()).collect(),
        models.to_vec(),
    );
    for task in tasks {
        for model in models {
            let r2: Vec<f64> =
                report.rows.iter().filter(|r| r.task == task && &r.model == model && r.space == space).map(|r| r.r2).collect();
            if !r2.is_empty() {
                grid.set(task.table_label(), model, r2.iter().sum::<f64>() / r2.len() as f64);
            }
        }
    }
    grid
}

/// City by model MAE/RMSE/R² for one task.
pub fn city_model_metrics(report: &MetricsReport, task: IndicatorTask, space: Space, models: &[String]) -> MetricGrid {
    let cities: Vec<String> = report.cities().into_iter().filter(|c| report.rows.iter().any(|r| &r.city == c && r.task == task)).collect();
    let mut grid = MetricGrid::new(format!("{} task ({space} space)", task.table_label()), cities, models.to_vec());
    for r in report.rows.iter().filter(|r| r.task == task && r.space == space) {
        grid.set(&r.city, &r.model, MetricCell { mae: r.mae, rmse: r.rmse, r2: r.r2 });
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_renders_four_places_and_na() {
        let mut g = Grid::new("t", "City", vec!["A".into(), "B".into()], vec!["x".into(), "y".into()]);
        g.set("A", "x", 0.12345);
        g.set("B", "y", -0.1382);
        assert_eq!(g.to_csv(), "City,x,y\nA,0.1235,NA\nB,NA,-0.1382\n");
        let text = g.to_text();
        assert!(text.contains("A     0.1235       NA"), "{text}");
    }

    #[test]
    fn metric_grid_headers() {
        let mut g = MetricGrid::new("t", vec!["Tokyo".into()], vec!["KNN".into()]);
        g.set("Tokyo", "KNN", MetricCell { mae: 0.684, rmse: 1.0422, r2: 0.705 });
        assert_eq!(g.to_csv(), "City,KNN MAE,KNN RMSE,KNN R2\nTokyo,0.6840,1.0422,0.7050\n");
        let text = g.to_text();
        assert!(text.lines().nth(3).unwrap().split_whitespace().eq(["MAE", "RMSE", "R2"]));
    }
}
