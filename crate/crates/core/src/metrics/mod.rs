//! Generation quality metrics, molecular properties, latent-space property
//! optimization and CSV reports.

mod property;
mod report;

pub use property::{
    atomic_weight, embed, fit_linear, fit_property_regression, heavy_atom_count, latent_ascent,
    property_mw, ring_count, AscentStep, Property, PropertyModel,
};
pub use report::{distribution_report, hist_csv, HistRow, MetricsReport, MetricRow};

use std::collections::HashSet;

use rayon::prelude::*;
use thiserror::Error;

use crate::chem::{check_valency, ChemError, ValenceTable};
use crate::graph::{wl_hash, AtomAlphabet, GraphError, LabeledGraph, WlHash};
use crate::model::{FlowSample, ModFlowModel, ModelError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty sample")]
    EmptySample,
    #[error("unknown element {0:?}")]
    UnknownElement(String),
    #[error("need at least {needed} molecules for the regression, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Validity, uniqueness and novelty of one generated sample, in percent.
///
/// Uniqueness and novelty are taken over the valid molecules; when none is
/// valid both are reported as 0 and `no_valid` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    pub samples: usize,
    pub valid: usize,
    pub validity: f64,
    pub uniqueness: f64,
    pub novelty: f64,
    pub no_valid: bool,
}

pub fn training_hashes(corpus: &[LabeledGraph]) -> HashSet<WlHash> {
    corpus.par_iter().map(wl_hash).collect::<Vec<_>>().into_iter().collect()
}

pub fn compute_metrics(
    generated: &[LabeledGraph],
    training: &HashSet<WlHash>,
    alphabet: &AtomAlphabet,
    table: &ValenceTable,
) -> Result<SampleMetrics, MetricsError> {
    if generated.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let checked: Vec<Option<WlHash>> = generated
        .par_iter()
        .map(|g| -> Result<_, ChemError> {
            Ok(check_valency(g, alphabet, table)?.valid.then(|| wl_hash(g)))
        })
        .collect::<Result<_, _>>()?;
    let valid: Vec<WlHash> = checked.into_iter().flatten().collect();
    let distinct: HashSet<WlHash> = valid.iter().copied().collect();
    let novel = distinct.iter().filter(|h| !training.contains(h)).count();
    let n = generated.len() as f64;
    let (uniqueness, novelty) = if valid.is_empty() {
        (0.0, 0.0)
    } else {
        (
            100.0 * distinct.len() as f64 / valid.len() as f64,
            100.0 * novel as f64 / distinct.len() as f64,
        )
    };
    Ok(SampleMetrics {
        samples: generated.len(),
        valid: valid.len(),
        validity: 100.0 * valid.len() as f64 / n,
        uniqueness,
        novelty,
        no_valid: valid.is_empty(),
    })
}

/// Percentage of samples whose labels survive encode then decode on their
/// own skeleton.
pub fn reconstruction_rate(model: &ModFlowModel, samples: &[FlowSample]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let hits = samples
        .par_iter()
        .map(|s| -> Result<bool, ModelError> {
            let enc = model.encode(s)?;
            Ok(model.decode_labels(&enc.z0, &s.skeleton())? == s.graph().labels())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(100.0 * hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}

/// Label frequencies of a corpus.
pub fn label_marginals(corpus: &[LabeledGraph], k: usize) -> Vec<f64> {
    let mut counts = vec![0.0; k];
    for g in corpus {
        for &l in g.labels() {
            counts[l] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

/// Exact expected validity (percent) of labeling each skeleton with labels
/// drawn independently from `marginals`: the product over nodes of the mass
/// of labels whose valence admits the node's bond-order sum, averaged over
/// skeletons.
pub fn label_shuffled_validity(
    skeletons: &[LabeledGraph],
    marginals: &[f64],
    alphabet: &AtomAlphabet,
    table: &ValenceTable,
) -> Result<f64, MetricsError> {
    if skeletons.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let caps: Vec<u32> = (0..alphabet.len())
        .map(|l| {
            let sym = alphabet.label(l);
            table
                .max_valence(sym)
                .map(u32::from)
                .ok_or_else(|| MetricsError::UnknownElement(sym.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let total: f64 = skeletons
        .iter()
        .map(|g| {
            g.bond_sums()
                .iter()
                .map(|&s| {
                    caps.iter()
                        .zip(marginals)
                        .filter(|(&c, _)| s <= c)
                        .map(|(_, p)| p)
                        .sum::<f64>()
                })
                .product::<f64>()
        })
        .sum();
    Ok(100.0 * total / skeletons.len() as f64)
}
