use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::network::{Network, Parameters};
use super::predict::{predict_prepared, PreparedCase};
use super::train::{train_with_partial, TrainConfig, TrainOptions, TrainingSample};
use super::ModelError;
use crate::corpus::{derive_seed, IssueClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub epoch_counts: Vec<usize>,
}

impl Default for GridSpace {
    fn default() -> Self {
        Self { learning_rates: vec![0.003, 0.01, 0.03], batch_sizes: vec![16, 32], epoch_counts: vec![10, 30] }
    }
}

impl GridSpace {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.learning_rates.is_empty() || self.batch_sizes.is_empty() || self.epoch_counts.is_empty() {
            return Err(ModelError::InvalidConfig("every grid dimension needs at least one value".into()));
        }
        Ok(())
    }

    /// Cells in lexicographic (learning rate, batch size, epochs) order of
    /// the lists as given.
    pub fn cells(&self, base_seed: u64) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rates {
            for &batch_size in &self.batch_sizes {
                for &epochs in &self.epoch_counts {
                    out.push(TrainConfig {
                        learning_rate,
                        batch_size,
                        epochs,
                        seed: cell_seed(base_seed, learning_rate, batch_size),
                    });
                }
            }
        }
        out
    }
}

/// The seed depends on the cell's values, not its position, and not on
/// the epoch count: a shorter run is then a prefix of a longer one.
fn cell_seed(base: u64, learning_rate: f64, batch_size: usize) -> u64 {
    derive_seed(derive_seed(base, learning_rate.to_bits()), batch_size as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub config: TrainConfig,
    /// Validation accuracy, absent when training failed.
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best: TrainConfig,
    pub best_index: usize,
    pub best_params: Parameters<f32>,
    pub table: Vec<GridCell>,
}

/// Per-image validation accuracy of `params`.
pub fn validation_accuracy(
    network: &Network,
    params: &Parameters<f32>,
    val: &[(PreparedCase<f32>, IssueClass)],
) -> Result<f64, ModelError> {
    if val.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut ws = network.workspace();
    let mut hits = 0usize;
    for (case, truth) in val {
        if predict_prepared(network, params, case, &mut ws)?.class == *truth {
            hits += 1;
        }
    }
    Ok(hits as f64 / val.len() as f64)
}

/// Trains every cell, scores it on `val`, and keeps the most accurate;
/// ties go to fewer epochs, then smaller batches, then lower learning rate,
/// then list order. Cells sharing (learning rate, batch size) are trained
/// once to the longest epoch count and read off at each shorter count.
pub fn grid_search(
    network: &Network,
    space: &GridSpace,
    train_set: &[TrainingSample],
    val: &[(PreparedCase<f32>, IssueClass)],
    base_seed: u64,
    options: &TrainOptions,
    mut on_cell: impl FnMut(&GridCell),
) -> Result<GridOutcome, ModelError> {
    space.validate()?;
    if train_set.is_empty() || val.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let cells = space.cells(base_seed);
    let mut table: Vec<Option<GridCell>> = vec![None; cells.len()];
    let mut params: Vec<Option<Parameters<f32>>> = vec![None; cells.len()];

    for (i, cell) in cells.iter().enumerate() {
        if table[i].is_some() {
            continue;
        }
        let group: Vec<usize> = (i..cells.len())
            .filter(|&j| {
                table[j].is_none()
                    && cells[j].learning_rate.to_bits() == cell.learning_rate.to_bits()
                    && cells[j].batch_size == cell.batch_size
            })
            .collect();
        let longest = group.iter().map(|&j| cells[j].epochs).max().unwrap_or(cell.epochs);
        let mut opts = options.clone();
        opts.snapshot_epochs = group.iter().map(|&j| cells[j].epochs).collect();
        let mut snaps = Vec::new();
        let result = train_with_partial(network, train_set, &TrainConfig { epochs: longest, ..*cell }, &opts, &mut snaps);
        let (snaps, failure) = match result {
            Ok(out) => (out.snapshots, None),
            Err(e) => (snaps, Some(e)),
        };
        for &j in &group {
            let snap = snaps.iter().find(|(e, _)| *e == cells[j].epochs);
            let entry = match (snap, &failure) {
                (Some((_, p)), _) => {
                    let acc = validation_accuracy(network, p, val)?;
                    params[j] = Some(p.clone());
                    GridCell { config: cells[j], accuracy: Some(acc), error: None }
                }
                (None, Some(e)) => GridCell { config: cells[j], accuracy: None, error: Some(e.to_string()) },
                (None, None) => unreachable!("snapshot requested for every cell epoch count"),
            };
            on_cell(&entry);
            table[j] = Some(entry);
        }
    }

    let table: Vec<GridCell> = table.into_iter().map(|c| c.expect("every cell visited")).collect();
    let best_index = select_best(&table).ok_or(ModelError::NoViableConfig)?;
    Ok(GridOutcome {
        best: table[best_index].config,
        best_index,
        best_params: params[best_index].take().expect("successful cell has parameters"),
        table,
    })
}

/// Index of the winning cell under the accuracy / tie-break ordering.
pub fn select_best(table: &[GridCell]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, cell) in table.iter().enumerate() {
        let Some(acc) = cell.accuracy else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let (bc, bacc) = (&table[b].config, table[b].accuracy.unwrap_or(f64::NEG_INFINITY));
                let c = &cell.config;
                acc > bacc
                    || (acc == bacc
                        && (c.epochs, c.batch_size).cmp(&(bc.epochs, bc.batch_size)).then(c.learning_rate.total_cmp(&bc.learning_rate))
                            == core::cmp::Ordering::Less)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::predict::prepare_case;
    use crate::model::train::tests::{linear_spec, toy_options, toy_set};

    fn toy_val(net: &Network) -> Vec<(PreparedCase<f32>, IssueClass)> {
        toy_set().iter().map(|s| (prepare_case(net, &s.views[0], &[]).unwrap(), s.label)).collect()
    }

    fn cell(lr: f64, batch: usize, epochs: usize, acc: Option<f64>) -> GridCell {
        GridCell { config: TrainConfig { learning_rate: lr, batch_size: batch, epochs, seed: 0 }, accuracy: acc, error: None }
    }

    #[test]
    fn default_space() {
        let s = GridSpace::default();
        assert_eq!(s.cells(0).len(), 12);
        assert!(GridSpace { learning_rates: vec![], ..s }.validate().is_err());
    }

    #[test]
    fn tie_break_order() {
        let t = vec![
            cell(0.01, 16, 30, Some(0.9)),
            cell(0.03, 16, 10, Some(0.9)),
            cell(0.003, 32, 10, Some(0.9)),
            cell(0.01, 16, 10, Some(0.9)),
            cell(0.1, 8, 5, None),
        ];
        assert_eq!(select_best(&t), Some(3));
        let t = vec![cell(0.01, 16, 10, Some(0.8)), cell(0.01, 16, 10, Some(0.8))];
        assert_eq!(select_best(&t), Some(0));
        assert_eq!(select_best(&[cell(0.1, 8, 5, None)]), None);
        let t = vec![cell(0.01, 16, 10, Some(0.8)), cell(0.03, 32, 30, Some(0.85))];
        assert_eq!(select_best(&t), Some(1));
    }

    #[test]
    fn singleton_space() {
        let net = Network::new(linear_spec()).unwrap();
        let space = GridSpace { learning_rates: vec![0.05], batch_sizes: vec![8], epoch_counts: vec![5] };
        let out = grid_search(&net, &space, &toy_set(), &toy_val(&net), 1, &toy_options(), |_| {}).unwrap();
        assert_eq!(out.best_index, 0);
        assert_eq!(out.table.len(), 1);
    }

    #[test]
    fn duplicated_cells_tie_to_first() {
        let net = Network::new(linear_spec()).unwrap();
        let space = GridSpace { learning_rates: vec![0.05, 0.05], batch_sizes: vec![8], epoch_counts: vec![3] };
        let out = grid_search(&net, &space, &toy_set(), &toy_val(&net), 1, &toy_options(), |_| {}).unwrap();
        assert_eq!(out.table[0].accuracy, out.table[1].accuracy);
        assert_eq!(out.best_index, 0);
    }

    #[test]
    fn best_is_table_maximum() {
        let net = Network::new(linear_spec()).unwrap();
        let space = GridSpace { learning_rates: vec![0.001, 0.05], batch_sizes: vec![8, 32], epoch_counts: vec![2] };
        let out = grid_search(&net, &space, &toy_set(), &toy_val(&net), 4, &toy_options(), |_| {}).unwrap();
        let max = out.table.iter().filter_map(|c| c.accuracy).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.table[out.best_index].accuracy, Some(max));
        assert_eq!(out.best, out.table[out.best_index].config);
    }

    #[test]
    fn diverged_cells_are_excluded() {
        let net = Network::new(linear_spec()).unwrap();
        let space = GridSpace { learning_rates: vec![1e6, 0.05], batch_sizes: vec![8], epoch_counts: vec![3] };
        let out = grid_search(&net, &space, &toy_set(), &toy_val(&net), 4, &toy_options(), |_| {}).unwrap();
        assert!(out.table[0].accuracy.is_none() && out.table[0].error.is_some());
        assert_eq!(out.best_index, 1);

        let space = GridSpace { learning_rates: vec![1e6], batch_sizes: vec![8], epoch_counts: vec![3] };
        let err = grid_search(&net, &space, &toy_set(), &toy_val(&net), 4, &toy_options(), |_| {}).unwrap_err();
        assert_eq!(err, ModelError::NoViableConfig);
    }

    #[test]
    fn nested_epochs_match_separate_runs() {
        let net = Network::new(linear_spec()).unwrap();
        let samples = toy_set();
        let val = toy_val(&net);
        let space = GridSpace { learning_rates: vec![0.01], batch_sizes: vec![8], epoch_counts: vec![4, 2] };
        let out = grid_search(&net, &space, &samples, &val, 9, &toy_options(), |_| {}).unwrap();
        for c in &out.table {
            let single = GridSpace { epoch_counts: vec![c.config.epochs], ..space.clone() };
            let alone = grid_search(&net, &single, &samples, &val, 9, &toy_options(), |_| {}).unwrap();
            assert_eq!(alone.table[0], *c);
        }
    }
}
