//! Export of the most frequently selected worst-case samples as an image
//! grid plus a text listing.

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::netpbm::write_ppm;
use crate::trainer::TrainHistory;
use std::collections::HashMap;
use std::path::Path;

/// One exported sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorstSample {
    pub dataset_index: usize,
    pub times_selected: usize,
}

/// Counts how often each dataset row was selected across all recorded steps
/// and writes the top `k` as `<base>.ppm` (grid) and `<base>.txt` (listing,
/// sorted by count descending, ties by index). Returns the listing.
pub fn export_worst_samples(
    history: &TrainHistory,
    data: &Batch,
    k: usize,
    out_base: &Path,
) -> Result<Vec<WorstSample>> {
    if history.steps.is_empty() {
        return Err(Error::Empty("history holds no step records".into()));
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for step in &history.steps {
        for row in step.selected_dataset_rows() {
            *counts.entry(row).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<WorstSample> = counts
        .into_iter()
        .map(|(dataset_index, times_selected)| WorstSample { dataset_index, times_selected })
        .collect();
    ranked.sort_by(|a, b| {
        b.times_selected
            .cmp(&a.times_selected)
            .then(a.dataset_index.cmp(&b.dataset_index))
    });
    ranked.truncate(k); // fewer distinct samples than k is fine

    let mut listing = String::from("rank\tdataset_index\ttimes_selected\n");
    for (rank, s) in ranked.iter().enumerate() {
        listing.push_str(&format!("{}\t{}\t{}\n", rank + 1, s.dataset_index, s.times_selected));
    }
    let txt_path = out_base.with_extension("txt");
    std::fs::write(&txt_path, listing)?;

    // image grid: channels 0/1 map to red/green (single channel to gray)
    let shape = data.inputs.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("expected image inputs, got {shape:?}")));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let cols = (ranked.len() as f64).sqrt().ceil() as usize;
    let rows = ranked.len().div_ceil(cols.max(1)).max(1);
    let cell_w = w + 1;
    let cell_h = h + 1;
    let grid_w = cols * cell_w + 1;
    let grid_h = rows * cell_h + 1;
    let mut pixels = vec![(0.25, 0.25, 0.25); grid_w * grid_h];
    let src = data.inputs.data();
    for (slot, s) in ranked.iter().enumerate() {
        let (gy, gx) = (slot / cols, slot % cols);
        let base = s.dataset_index * c * h * w;
        for y in 0..h {
            for x in 0..w {
                let r = src[base + y * w + x];
                let g = if c > 1 { src[base + h * w + y * w + x] } else { r };
                let b = if c > 2 { src[base + 2 * h * w + y * w + x] } else { 0.0 };
                let b = if c == 1 { r } else { b };
                let px = gx * cell_w + 1 + x;
                let py = gy * cell_h + 1 + y;
                pixels[py * grid_w + px] = (r, g, b);
            }
        }
    }
    write_ppm(&out_base.with_extension("ppm"), grid_w, grid_h, &pixels)?;
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::trainer::{Phase, StepRecord, TrainHistory};

    fn step(epoch: usize, rows: Vec<usize>, selected: Vec<usize>) -> StepRecord {
        let n = rows.len();
        StepRecord {
            epoch,
            iter: 0,
            phase: Phase::WorstCase,
            batch_indices: rows,
            losses: vec![1.0; n],
            selected_slots: selected,
            masked_slots: vec![],
            mean_selected_loss: 1.0,
        }
    }

    fn toy_data(n: usize) -> Batch {
        Batch::new(
            Tensor::new(vec![n, 2, 2, 2], vec![0.5; n * 8]).unwrap(),
            vec![0; n],
        )
        .unwrap()
    }

    #[test]
    fn ranks_by_count_then_index_and_clamps_k() {
        let dir = tempfile::tempdir().unwrap();
        let mut history = TrainHistory::default();
        // sample 7 selected twice, samples 2 and 3 once each
        history.steps.push(step(1, vec![7, 2, 5], vec![0, 1]));
        history.steps.push(step(1, vec![3, 7, 6], vec![0, 1]));
        let out = export_worst_samples(&history, &toy_data(8), 10, &dir.path().join("worst"))
            .unwrap();
        assert_eq!(out[0], WorstSample { dataset_index: 7, times_selected: 2 });
        assert_eq!(out[1], WorstSample { dataset_index: 2, times_selected: 1 });
        assert_eq!(out[2], WorstSample { dataset_index: 3, times_selected: 1 });
        assert_eq!(out.len(), 3); // k clamps to the distinct selected samples
        assert!(dir.path().join("worst.ppm").exists());
        let listing = std::fs::read_to_string(dir.path().join("worst.txt")).unwrap();
        assert!(listing.lines().count() == 4);

        let empty = TrainHistory::default();
        assert!(export_worst_samples(&empty, &toy_data(2), 3, &dir.path().join("x")).is_err());
    }
}
