//! Ranking scores against an ERM baseline, and comparison-table assembly.
//!
//! A row earns, per dataset, +1 / 0 / -1 according to whether its mean
//! accuracy lies above, within, or below the closed interval
//! `[erm_mean - erm_stderr, erm_mean + erm_stderr]`; boundary-equal values
//! score 0. The row's ranking score is the sum across datasets.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Mean accuracy and standard error, both in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub mean: f64,
    pub stderr: f64,
}

impl AccuracyCell {
    pub fn new(mean: f64, stderr: f64) -> Result<AccuracyCell> {
        if !(0.0..=100.0).contains(&mean) {
            return Err(Error::Invalid(format!("mean {mean} outside [0, 100]")));
        }
        if !(stderr >= 0.0 && stderr.is_finite()) {
            return Err(Error::Invalid(format!("stderr {stderr} must be non-negative")));
        }
        Ok(AccuracyCell { mean, stderr })
    }
}

/// Score of one cell against the ERM cell for the same dataset.
/// Band edges carry a relative guard so that values equal to
/// `mean ± stderr` in decimal stay on the boundary (score 0) even when the
/// binary sum lands a few ulps away (e.g. 94.7 - 0.1 vs 94.6).
pub fn score_cell(cell: &AccuracyCell, erm: &AccuracyCell) -> i32 {
    let hi = erm.mean + erm.stderr;
    let lo = erm.mean - erm.stderr;
    let tol = 1e-9 * hi.abs().max(lo.abs()).max(1.0);
    if cell.mean > hi + tol {
        1
    } else if cell.mean < lo - tol {
        -1
    } else {
        0
    }
}

/// Per-algorithm ranking scores. Every row must cover the same number of
/// datasets as the ERM row, in the same order.
pub fn ranking_score(
    rows: &[(String, Vec<AccuracyCell>)],
    erm_row: &[AccuracyCell],
) -> Result<Vec<(String, i32)>> {
    let mut out = Vec::with_capacity(rows.len());
    for (name, cells) in rows {
        if cells.len() != erm_row.len() {
            return Err(Error::Shape(format!(
                "row {name} covers {} datasets, ERM row covers {}",
                cells.len(),
                erm_row.len()
            )));
        }
        let score = cells.iter().zip(erm_row).map(|(c, e)| score_cell(c, e)).sum();
        out.push((name.clone(), score));
    }
    Ok(out)
}

/// One rendered table row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankRow {
    pub algorithm: String,
    pub cells: Vec<AccuracyCell>,
    pub average: f64,
    pub score: i32,
    pub prev_score: Option<i32>,
}

/// A comparison table: datasets across, algorithms down, sorted by ranking
/// score, then average, then name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingTable {
    pub datasets: Vec<String>,
    pub rows: Vec<RankRow>,
}

/// Name (case-insensitive) that marks the baseline row.
pub const ERM_NAME: &str = "erm";

/// Builds a table from per-algorithm cells. A row named `erm` (any case)
/// must be present; scores are computed against it.
pub fn build_table(
    datasets: Vec<String>,
    rows: Vec<(String, Vec<AccuracyCell>)>,
    prev_scores: Option<&[(String, i32)]>,
) -> Result<RankingTable> {
    let erm_row = rows
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(ERM_NAME))
        .ok_or_else(|| Error::Config("no ERM baseline row present".into()))?
        .1
        .clone();
    if erm_row.len() != datasets.len() {
        return Err(Error::Shape(format!(
            "ERM row covers {} datasets, table lists {}",
            erm_row.len(),
            datasets.len()
        )));
    }
    let scores = ranking_score(&rows, &erm_row)?;
    let mut out_rows: Vec<RankRow> = rows
        .into_iter()
        .zip(scores)
        .map(|((algorithm, cells), (_, score))| {
            let average = cells.iter().map(|c| c.mean).sum::<f64>() / cells.len() as f64;
            let prev_score = prev_scores.and_then(|ps| {
                ps.iter()
                    .find(|(n, _)| n.eq_ignore_ascii_case(&algorithm))
                    .map(|(_, s)| *s)
            });
            RankRow { algorithm, cells, average, score, prev_score }
        })
        .collect();
    out_rows.sort_by(|a, b| {
        b.score
            .cmp(&a.score)
            .then(b.average.partial_cmp(&a.average).expect("finite averages"))
            .then(a.algorithm.cmp(&b.algorithm))
    });
    Ok(RankingTable { datasets, rows: out_rows })
}

/// Parses accuracy cells from CSV with header
/// `algorithm,dataset,mean,stderr`. Datasets appear in first-seen order;
/// every algorithm must cover all of them.
pub fn parse_cells_csv(text: &str) -> Result<(Vec<String>, Vec<(String, Vec<AccuracyCell>)>)> {
    let mut datasets: Vec<String> = Vec::new();
    let mut rows: Vec<(String, Vec<(usize, AccuracyCell)>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.to_ascii_lowercase().starts_with("algorithm,") {
            continue; // header row
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!(
                "line {}: want algorithm,dataset,mean,stderr, got: {line}",
                lineno + 1
            )));
        }
        let mean: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad mean {}", lineno + 1, fields[2])))?;
        let stderr: f64 = fields[3]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad stderr {}", lineno + 1, fields[3])))?;
        let cell = AccuracyCell::new(mean, stderr)?;
        let ds_idx = match datasets.iter().position(|d| d == fields[1]) {
            Some(i) => i,
            None => {
                datasets.push(fields[1].to_string());
                datasets.len() - 1
            }
        };
        match rows.iter_mut().find(|(n, _)| n == fields[0]) {
            Some((_, cells)) => cells.push((ds_idx, cell)),
            None => rows.push((fields[0].to_string(), vec![(ds_idx, cell)])),
        }
    }
    let mut out = Vec::with_capacity(rows.len());
    for (name, mut cells) in rows {
        cells.sort_by_key(|(i, _)| *i);
        let covered: Vec<usize> = cells.iter().map(|(i, _)| *i).collect();
        if covered != (0..datasets.len()).collect::<Vec<_>>() {
            return Err(Error::Parse(format!(
                "algorithm {name} does not cover every dataset exactly once"
            )));
        }
        out.push((name, cells.into_iter().map(|(_, c)| c).collect()));
    }
    Ok((datasets, out))
}

/// Parses a pass-through score column from CSV with header `algorithm,score`.
pub fn parse_prev_csv(text: &str) -> Result<Vec<(String, i32)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.to_ascii_lowercase().starts_with("algorithm,") {
            continue;
        }
        let (name, score) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("line {}: want algorithm,score", lineno + 1)))?;
        let score: i32 = score
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad score {score}", lineno + 1)))?;
        out.push((name.trim().to_string(), score));
    }
    Ok(out)
}

/// CSV form of a table: `algorithm,<dataset cells as mean±stderr>,average,score`.
pub fn table_to_csv(table: &RankingTable) -> String {
    let mut out = String::from("algorithm");
    for d in &table.datasets {
        out.push(',');
        out.push_str(d);
    }
    let has_prev = table.rows.iter().any(|r| r.prev_score.is_some());
    out.push_str(",average");
    if has_prev {
        out.push_str(",prev_score");
    }
    out.push_str(",ranking_score\n");
    for r in &table.rows {
        out.push_str(&r.algorithm);
        for c in &r.cells {
            out.push_str(&format!(",{:.1}±{:.1}", c.mean, c.stderr));
        }
        out.push_str(&format!(",{:.1}", r.average));
        if has_prev {
            match r.prev_score {
                Some(p) => out.push_str(&format!(",{p:+}")),
                None => out.push(','),
            }
        }
        out.push_str(&format!(",{:+}\n", r.score));
    }
    out
}

/// Aligned text form of a table.
pub fn table_to_text(table: &RankingTable) -> String {
    let has_prev = table.rows.iter().any(|r| r.prev_score.is_some());
    let mut headers: Vec<String> = vec!["Algorithm".into()];
    headers.extend(table.datasets.iter().cloned());
    headers.push("Average".into());
    if has_prev {
        headers.push("Prev score".into());
    }
    headers.push("Ranking score".into());
    let mut grid: Vec<Vec<String>> = vec![headers];
    for r in &table.rows {
        let mut row = vec![r.algorithm.clone()];
        for c in &r.cells {
            row.push(format!("{:.1} ± {:.1}", c.mean, c.stderr));
        }
        row.push(format!("{:.1}", r.average));
        if has_prev {
            row.push(r.prev_score.map(|p| format!("{p:+}")).unwrap_or_default());
        }
        row.push(format!("{:+}", r.score));
        grid.push(row);
    }
    let cols = grid[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in grid.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{cell:>width$}", width = widths[c]))
            .collect();
        out.push_str(&line.join("  "));
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(mean: f64, stderr: f64) -> AccuracyCell {
        AccuracyCell::new(mean, stderr).unwrap()
    }

    #[test]
    fn published_score_examples() {
        // diversity-shift table, row with +3
        let erm = vec![cell(81.5, 0.0), cell(63.3, 0.2), cell(42.6, 0.9), cell(94.7, 0.1)];
        let w2d = vec![cell(83.4, 0.3), cell(63.5, 0.1), cell(44.5, 0.5), cell(95.2, 0.3)];
        let scores =
            ranking_score(&[("w2d".into(), w2d)], &erm).unwrap();
        assert_eq!(scores[0].1, 3);

        // correlation-shift table, row with -3
        let erm2 = vec![cell(29.9, 0.9), cell(72.1, 1.6), cell(87.2, 0.6)];
        let dann = vec![cell(24.5, 0.8), cell(69.4, 1.7), cell(86.0, 0.4)];
        let scores = ranking_score(&[("dann".into(), dann)], &erm2).unwrap();
        assert_eq!(scores[0].1, -3);
    }

    #[test]
    fn identical_to_erm_scores_zero_and_boundaries_are_within() {
        let erm = vec![cell(50.0, 1.0), cell(60.0, 0.5)];
        let same = erm.clone();
        assert_eq!(ranking_score(&[("x".into(), same)], &erm).unwrap()[0].1, 0);
        // boundary-equal means score 0
        let edge = vec![cell(51.0, 0.0), cell(59.5, 0.0)];
        assert_eq!(ranking_score(&[("e".into(), edge)], &erm).unwrap()[0].1, 0);
        let above = vec![cell(51.1, 0.0), cell(60.6, 0.0)];
        assert_eq!(ranking_score(&[("a".into(), above)], &erm).unwrap()[0].1, 2);
    }

    #[test]
    fn score_bounds_and_scale_invariance() {
        let erm = vec![cell(40.0, 2.0), cell(60.0, 1.0), cell(80.0, 0.5)];
        let row = vec![cell(45.0, 0.1), cell(55.0, 0.1), cell(80.2, 0.1)];
        let s = ranking_score(&[("r".into(), row.clone())], &erm).unwrap()[0].1;
        assert!(s.unsigned_abs() as usize <= erm.len());
        // common positive scaling leaves every score unchanged
        let scale = 0.5;
        let scaled_row: Vec<AccuracyCell> = row
            .iter()
            .map(|c| cell(c.mean * scale, c.stderr * scale))
            .collect();
        let scaled_erm: Vec<AccuracyCell> = erm
            .iter()
            .map(|c| cell(c.mean * scale, c.stderr * scale))
            .collect();
        let s2 = ranking_score(&[("r".into(), scaled_row)], &scaled_erm).unwrap()[0].1;
        assert_eq!(s, s2);
    }

    #[test]
    fn dataset_count_mismatch_is_an_error() {
        let erm = vec![cell(50.0, 1.0)];
        let bad = vec![cell(50.0, 1.0), cell(60.0, 1.0)];
        assert!(ranking_score(&[("x".into(), bad)], &erm).is_err());
    }

    #[test]
    fn csv_round_trip_and_table_sorting() {
        let csv = "algorithm,dataset,mean,stderr\n\
                   ERM,d1,50.0,1.0\nERM,d2,60.0,1.0\n\
                   good,d1,55.0,0.1\ngood,d2,65.0,0.1\n\
                   bad,d1,45.0,0.1\nbad,d2,55.0,0.1\n\
                   tied,d1,50.0,0.5\ntied,d2,60.0,0.5\n";
        let (datasets, rows) = parse_cells_csv(csv).unwrap();
        assert_eq!(datasets, vec!["d1", "d2"]);
        let table = build_table(datasets, rows, None).unwrap();
        assert_eq!(table.rows[0].algorithm, "good");
        assert_eq!(table.rows[0].score, 2);
        assert_eq!(table.rows.last().unwrap().algorithm, "bad");
        // ERM and tied share score 0 and average; name breaks the tie
        assert_eq!(table.rows[1].algorithm, "ERM");
        assert_eq!(table.rows[2].algorithm, "tied");
        let text = table_to_text(&table);
        assert!(text.contains("Ranking score"));
        let out_csv = table_to_csv(&table);
        assert!(out_csv.lines().count() == 5);

        assert!(parse_cells_csv("algorithm,dataset,mean\nx,y,1\n").is_err());
        let missing = "ERM,d1,50.0,1.0\nx,d1,50.0,1.0\nx,d2,60.0,1.0\n";
        assert!(parse_cells_csv(missing).is_err());
    }

    #[test]
    fn missing_erm_row_is_an_error() {
        let rows = vec![("x".to_string(), vec![cell(50.0, 1.0)])];
        assert!(build_table(vec!["d".into()], rows, None).is_err());
    }
}
