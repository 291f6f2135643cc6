use nalgebra::{DMatrix, DVector};

use super::MetricsError;
use crate::chem::{check_valency, ValenceTable};
use crate::graph::{AtomAlphabet, LabelMode, LabeledGraph, ScoreMatrix};
use crate::model::{FlowSample, ModFlowModel};

const HYDROGEN: f64 = 1.008;
const RIDGE: f64 = 1e-8;

/// Standard atomic weight of an element symbol.
pub fn atomic_weight(symbol: &str) -> Option<f64> {
    Some(match symbol {
        "H" => 1.008,
        "B" => 10.81,
        "C" => 12.011,
        "N" => 14.007,
        "O" => 15.999,
        "F" => 18.998,
        "P" => 30.974,
        "S" => 32.06,
        "Cl" => 35.45,
        "Br" => 79.904,
        "I" => 126.904,
        _ => return None,
    })
}

/// Molecular weight with implicit hydrogens filling each atom up to its
/// smallest allowed valence that accommodates its bonds.
pub fn property_mw(graph: &LabeledGraph, alphabet: &AtomAlphabet, table: &ValenceTable) -> Result<f64, MetricsError> {
    if alphabet.mode() != LabelMode::Atom {
        return Err(crate::graph::GraphError::NotAtomMode.into());
    }
    graph.check_labels(alphabet.len())?;
    let sums = graph.bond_sums();
    let mut total = 0.0;
    for (&l, &s) in graph.labels().iter().zip(&sums) {
        let sym = alphabet.label(l);
        let w = atomic_weight(sym).ok_or_else(|| MetricsError::UnknownElement(sym.to_string()))?;
        let allowed = table
            .allowed(sym)
            .ok_or_else(|| MetricsError::UnknownElement(sym.to_string()))?;
        let hs = allowed
            .iter()
            .map(|&v| v as u32)
            .filter(|&v| v >= s)
            .min()
            .map_or(0, |v| v - s);
        total += w + HYDROGEN * hs as f64;
    }
    Ok(total)
}

pub fn heavy_atom_count(graph: &LabeledGraph) -> f64 {
    graph.len() as f64
}

/// Cyclomatic number `|E| - |V| + components`.
pub fn ring_count(graph: &LabeledGraph) -> f64 {
    let m = graph.len();
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut components = m;
    for e in graph.edges() {
        let (a, b) = (find(&mut parent, e.a), find(&mut parent, e.b));
        if a != b {
            parent[a] = b;
            components -= 1;
        }
    }
    (graph.edges().len() + components) as f64 - m as f64
}

/// Built-in molecular properties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Property {
    MolecularWeight,
    HeavyAtoms,
    Rings,
}

impl Property {
    pub fn name(self) -> &'static str {
        match self {
            Property::MolecularWeight => "mw",
            Property::HeavyAtoms => "heavy_atoms",
            Property::Rings => "rings",
        }
    }

    pub fn eval(self, graph: &LabeledGraph, alphabet: &AtomAlphabet, table: &ValenceTable) -> Result<f64, MetricsError> {
        Ok(match self {
            Property::MolecularWeight => property_mw(graph, alphabet, table)?,
            Property::HeavyAtoms => heavy_atom_count(graph),
            Property::Rings => ring_count(graph),
        })
    }
}

impl std::str::FromStr for Property {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mw" => Ok(Property::MolecularWeight),
            "heavy_atoms" => Ok(Property::HeavyAtoms),
            "rings" => Ok(Property::Rings),
            other => Err(MetricsError::InvalidArgument(format!("unknown property {other:?}"))),
        }
    }
}

/// Linear model on the mean-pooled latent of a molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyModel {
    pub name: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub r2: f64,
}

impl PropertyModel {
    pub fn predict(&self, pooled: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(pooled).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn predict_latent(&self, z0: &ScoreMatrix) -> f64 {
        self.predict(&z0.mean_row())
    }
}

/// Mean over nodes of the encoded start state.
pub fn embed(model: &ModFlowModel, sample: &FlowSample) -> Result<Vec<f64>, MetricsError> {
    Ok(model.encode(sample)?.z0.mean_row())
}

/// Least squares with intercept and a `1e-8` ridge on all coefficients.
/// `R²` is reported as 0 when the targets are constant.
pub fn fit_linear(x: &[Vec<f64>], y: &[f64], name: &str) -> Result<PropertyModel, MetricsError> {
    let dim = x.first().map_or(0, Vec::len);
    if x.len() < dim + 1 || x.len() != y.len() {
        return Err(MetricsError::InsufficientData {
            needed: dim + 1,
            got: x.len().min(y.len()),
        });
    }
    let n = x.len();
    let design = DMatrix::from_fn(n, dim + 1, |r, c| if c < dim { x[r][c] } else { 1.0 });
    let target = DVector::from_column_slice(y);
    let gram = design.transpose() * &design + DMatrix::identity(dim + 1, dim + 1) * RIDGE;
    let rhs = design.transpose() * &target;
    let beta = gram.cholesky().ok_or(MetricsError::RankDeficient)?.solve(&rhs);
    let fitted = &design * &beta;
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    Ok(PropertyModel {
        name: name.to_string(),
        weights: beta.iter().take(dim).copied().collect(),
        bias: beta[dim],
        r2,
    })
}

/// Embeds every sample and regresses `targets` on the pooled latents.
pub fn fit_property_regression(
    model: &ModFlowModel,
    samples: &[FlowSample],
    targets: &[f64],
    name: &str,
) -> Result<PropertyModel, MetricsError> {
    use rayon::prelude::*;
    let x: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| embed(model, s))
        .collect::<Result<_, _>>()?;
    fit_linear(&x, targets, name)
}

/// One latent step of the property ascent and the molecule it decodes to.
#[derive(Debug, Clone, PartialEq)]
pub struct AscentStep {
    pub step: usize,
    pub predicted: f64,
    pub molecule: LabeledGraph,
    pub valid: bool,
    /// measured property of the decoded molecule (valid or not)
    pub property: Option<f64>,
}

/// Moves every node latent by `λ·w/M` per step (the gradient of the pooled
/// linear prediction) and decodes after each step. Invalid decodes are kept.
#[allow(clippy::too_many_arguments)]
pub fn latent_ascent<P>(
    model: &ModFlowModel,
    start: &FlowSample,
    prop: &PropertyModel,
    lambda: f64,
    steps: usize,
    table: &ValenceTable,
    measure: P,
) -> Result<Vec<AscentStep>, MetricsError>
where
    P: Fn(&LabeledGraph) -> Option<f64>,
{
    if !(lambda >= 0.0) || steps == 0 {
        return Err(MetricsError::InvalidArgument(format!(
            "ascent needs lambda >= 0 and at least one step (got {lambda}, {steps})"
        )));
    }
    let mut z = model.encode(start)?.z0;
    let m = start.len() as f64;
    let topology = start.skeleton();
    let mut out = Vec::with_capacity(steps);
    for step in 1..=steps {
        for i in 0..z.rows() {
            for (v, w) in z.row_mut(i).iter_mut().zip(&prop.weights) {
                *v += lambda * w / m;
            }
        }
        let molecule = model.decode(&z, &topology)?;
        let valid = check_valency(&molecule, model.atoms(), table)?.valid;
        out.push(AscentStep {
            step,
            predicted: prop.predict_latent(&z),
            property: measure(&molecule),
            molecule,
            valid,
        });
    }
    Ok(out)
}
