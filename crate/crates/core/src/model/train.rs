use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, AdamState, FlowSample, ModFlowModel, ModelError, TrainConfig};

/// Optimizer state and number of completed epochs; everything needed to
/// resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(param_count: usize) -> Self {
        Self {
            adam: AdamState::new(param_count),
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number
    pub epoch: usize,
    pub mean_loss: f64,
    pub nfe_mean: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,nfe_mean";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.epoch, self.mean_loss, self.nfe_mean)
    }
}

/// Visiting order of epoch `epoch` (0-based). The shuffle stream depends
/// only on the seed and the epoch so resumed runs see the same batches.
fn epoch_order(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
    }
    order
}

/// Runs epochs `state.epoch..cfg.epochs` of mini-batch Adam on the negative
/// log-likelihood. `on_epoch` sees the record, the updated model and the
/// state after every epoch (checkpointing, logging).
pub fn train<F>(
    model: &mut ModFlowModel,
    corpus: &[FlowSample],
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: F,
) -> Result<Vec<EpochRecord>, ModelError>
where
    F: FnMut(&EpochRecord, &ModFlowModel, &TrainState) -> Result<(), ModelError>,
{
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    cfg.validate().map_err(ModelError::InvalidConfig)?;
    if state.adam.m.len() != model.params().len() {
        return Err(ModelError::InvalidConfig(format!(
            "optimizer state has {} entries for {} parameters",
            state.adam.m.len(),
            model.params().len()
        )));
    }
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let order = epoch_order(corpus.len(), cfg, state.epoch);
        let (mut loss, mut nfe) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FlowSample> = chunk.iter().map(|&i| &corpus[i]).collect();
            let b = model.loss_batch(&batch)?;
            loss += b.loss * chunk.len() as f64;
            nfe += b.nfe_mean * chunk.len() as f64;
            adam_step(model.params_mut().as_mut_slice(), &b.grad, &mut state.adam, cfg);
        }
        state.epoch += 1;
        let n = corpus.len() as f64;
        let record = EpochRecord {
            epoch: state.epoch,
            mean_loss: loss / n,
            nfe_mean: nfe / n,
        };
        on_epoch(&record, model, state)?;
        history.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{parse_smiles, ValenceTable};
    use crate::ode::SolverConfig;

    fn setup() -> (ModFlowModel, Vec<FlowSample>) {
        let a = ValenceTable::standard().alphabet(&["C", "N", "O"]).unwrap();
        let m = ModFlowModel::init(a.clone(), None, 1, SolverConfig::default(), 0.05, 2).unwrap();
        let corpus = ["CO", "CCN", "OC=O", "CC#N", "NCO"]
            .iter()
            .map(|s| m.prepare(&parse_smiles(s, &a).unwrap()).unwrap())
            .collect();
        (m, corpus)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut m, corpus) = setup();
        let before = m.params().clone();
        let cfg = TrainConfig { lr: 0.0, epochs: 1, ..Default::default() };
        let mut st = TrainState::new(m.params().len());
        let h = train(&mut m, &corpus[..1], &cfg, &mut st, |_, _, _| Ok(())).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn loss_decreases_and_callbacks_fire() {
        let (mut m, corpus) = setup();
        let cfg = TrainConfig { lr: 1e-2, epochs: 4, batch_size: 2, ..Default::default() };
        let mut st = TrainState::new(m.params().len());
        let mut seen = Vec::new();
        let h = train(&mut m, &corpus, &cfg, &mut st, |r, _, s| {
            seen.push((r.epoch, s.epoch));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![(1, 1), (2, 2), (3, 3), (4, 4)]);
        assert!(h[3].mean_loss < h[0].mean_loss);
        assert_eq!(st.adam.step, 12);
        assert!(h.iter().all(|r| r.nfe_mean > 0.0));
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let (m0, corpus) = setup();
        let cfg = TrainConfig { lr: 5e-3, epochs: 3, batch_size: 2, seed: 7, ..Default::default() };
        let mut full = m0.clone();
        let mut st = TrainState::new(full.params().len());
        let h_full = train(&mut full, &corpus, &cfg, &mut st, |_, _, _| Ok(())).unwrap();

        let mut part = m0.clone();
        let mut st2 = TrainState::new(part.params().len());
        train(&mut part, &corpus, &TrainConfig { epochs: 1, ..cfg }, &mut st2, |_, _, _| Ok(())).unwrap();
        let h_rest = train(&mut part, &corpus, &cfg, &mut st2, |_, _, _| Ok(())).unwrap();
        assert_eq!(part.params(), full.params());
        assert_eq!(st2, st);
        assert_eq!(h_rest, h_full[1..].to_vec());
    }

    #[test]
    fn epoch_orders_depend_on_seed_and_epoch() {
        let cfg = TrainConfig::default();
        assert_eq!(epoch_order(20, &cfg, 3), epoch_order(20, &cfg, 3));
        assert_ne!(epoch_order(20, &cfg, 3), epoch_order(20, &cfg, 4));
        let fixed = TrainConfig { shuffle: false, ..cfg };
        assert_eq!(epoch_order(4, &fixed, 9), vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let (mut m, _) = setup();
        let mut st = TrainState::new(m.params().len());
        let r = train(&mut m, &[], &TrainConfig::default(), &mut st, |_, _, _| Ok(()));
        assert!(matches!(r, Err(ModelError::EmptyCorpus)));
    }
}
