//! Class-removal OOD scenarios: drop the rarest or most frequent training
//! class and treat its rows as unseen inputs.

use serde::{Deserialize, Serialize};

use crate::dataset::LatentDataset;
use crate::error::{Error, Result};
use crate::harness::config::{OodConfig, OodMode};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodScenario {
    pub mode: OodMode,
    /// Original ids of the removed classes, ascending.
    pub removed: Vec<usize>,
    /// `label_map[old]` is the dense new id of a kept class.
    pub label_map: Vec<Option<usize>>,
    pub train: LatentDataset,
    /// In-distribution test rows, relabelled.
    pub test: LatentDataset,
    /// Rows of removed classes from both train and test.
    pub ood: Matrix,
    /// Original labels of the OOD rows.
    pub ood_labels: Vec<usize>,
}

/// Classes to remove given training class counts.
pub fn classes_to_remove(counts: &[usize], cfg: &OodConfig) -> Vec<usize> {
    match (cfg.mode, cfg.threshold) {
        (OodMode::Min, Some(t)) => (0..counts.len()).filter(|&c| counts[c] < t).collect(),
        (OodMode::Min, None) => {
            // `min_by_key` keeps the first minimum: ties go to the lowest id.
            let c = (0..counts.len()).min_by_key(|&c| counts[c]).into_iter();
            c.collect()
        }
        (OodMode::Max, _) => {
            let best = (0..counts.len()).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
            vec![best]
        }
    }
}

fn split_rows(data: &LatentDataset, removed: &[bool]) -> (Vec<usize>, Vec<usize>) {
    (0..data.len()).partition(|&i| !removed[data.labels()[i]])
}

pub fn build_ood_scenario(train: &LatentDataset, test: &LatentDataset, cfg: &OodConfig) -> Result<OodScenario> {
    let k = train.num_classes();
    if k < 3 {
        return Err(Error::InvalidArgument(format!(
            "OOD scenarios need at least 3 classes, got {k}"
        )));
    }
    if test.num_classes() != k || test.dim() != train.dim() {
        return Err(Error::ShapeMismatch(
            "train and test sets disagree in classes or features".into(),
        ));
    }
    let removed_ids = classes_to_remove(&train.class_counts(), cfg);
    if k - removed_ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "removing {} of {k} classes leaves fewer than 2",
            removed_ids.len()
        )));
    }
    let mut removed = vec![false; k];
    removed_ids.iter().for_each(|&c| removed[c] = true);
    let mut label_map = vec![None; k];
    let mut next = 0;
    for c in 0..k {
        if !removed[c] {
            label_map[c] = Some(next);
            next += 1;
        }
    }
    let relabel = |data: &LatentDataset, rows: &[usize]| -> Result<LatentDataset> {
        let labels = rows
            .iter()
            .map(|&i| label_map[data.labels()[i]].expect("kept class"))
            .collect();
        LatentDataset::new(data.features().select_rows(rows), labels, next)
    };
    let (train_keep, train_drop) = split_rows(train, &removed);
    let (test_keep, test_drop) = split_rows(test, &removed);
    let mut ood_rows = Vec::with_capacity((train_drop.len() + test_drop.len()) * train.dim());
    let mut ood_labels = Vec::with_capacity(train_drop.len() + test_drop.len());
    for (data, rows) in [(train, &train_drop), (test, &test_drop)] {
        for &i in rows {
            ood_rows.extend_from_slice(data.features().row(i));
            ood_labels.push(data.labels()[i]);
        }
    }
    if ood_labels.is_empty() {
        return Err(Error::InvalidArgument("the OOD scenario removed no rows".into()));
    }
    let scenario = OodScenario {
        mode: cfg.mode,
        removed: removed_ids,
        train: relabel(train, &train_keep)?,
        test: relabel(test, &test_keep)?,
        ood: Matrix::from_vec(ood_labels.len(), train.dim(), ood_rows)?,
        ood_labels,
        label_map,
    };
    if scenario.train.is_empty() || scenario.test.is_empty() {
        return Err(Error::InvalidArgument(
            "the OOD scenario left no in-distribution rows".into(),
        ));
    }
    Ok(scenario)
}
