//! Binary grid patterns on a square lattice, their reproduction accuracy and
//! an end-to-end train/sample loop.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{AtomAlphabet, Coords, GraphError, LabeledGraph};
use crate::model::{train, EpochRecord, FlowSample, ModFlowModel, ModelError, TrainConfig, TrainState};
use crate::ode::SolverConfig;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("grid size must be positive")]
    EmptyGrid,
    #[error("block size {block} does not divide grid size {n}")]
    InvalidBlock { n: usize, block: usize },
    #[error("stripe width must be at least 1")]
    InvalidStripe,
    #[error("generated graph does not match the {n}x{n} lattice")]
    TopologyMismatch { n: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    Chessboard { block: usize },
    Stripes { width: usize },
}

/// A deterministic binary labeling of an `n x n` lattice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridPattern {
    pub n: usize,
    pub kind: PatternKind,
}

impl GridPattern {
    pub fn chessboard(n: usize, block: usize) -> Result<Self, ToyError> {
        if n == 0 {
            return Err(ToyError::EmptyGrid);
        }
        if block == 0 || !n.is_multiple_of(block) {
            return Err(ToyError::InvalidBlock { n, block });
        }
        Ok(Self {
            n,
            kind: PatternKind::Chessboard { block },
        })
    }

    pub fn stripes(n: usize, width: usize) -> Result<Self, ToyError> {
        if n == 0 {
            return Err(ToyError::EmptyGrid);
        }
        if width == 0 {
            return Err(ToyError::InvalidStripe);
        }
        Ok(Self {
            n,
            kind: PatternKind::Stripes { width },
        })
    }

    pub fn label(&self, i: usize, j: usize) -> usize {
        match self.kind {
            PatternKind::Chessboard { block } => (i / block + j / block) % 2,
            PatternKind::Stripes { width } => (j / width) % 2,
        }
    }

    /// Row-major labels, node `i * n + j` at lattice point `(i, j)`.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.n * self.n).map(|v| self.label(v / self.n, v % self.n)).collect()
    }

    pub fn graph(&self) -> LabeledGraph {
        lattice(self.n, self.labels())
    }

    pub fn name(&self) -> String {
        match self.kind {
            PatternKind::Chessboard { block } => format!("chessboard_{}_{}", self.n, block),
            PatternKind::Stripes { width } => format!("stripes_{}_{}", self.n, width),
        }
    }
}

fn lattice(n: usize, labels: Vec<usize>) -> LabeledGraph {
    let mut edges = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            let v = i * n + j;
            if j + 1 < n {
                edges.push((v, v + 1, 1));
            }
            if i + 1 < n {
                edges.push((v, v + n, 1));
            }
        }
    }
    let coords = (0..n * n).flat_map(|v| [(v / n) as f64, (v % n) as f64]).collect();
    let coords = Coords::new(2, coords).expect("lattice coordinates are well formed");
    LabeledGraph::new(labels, edges, Some(coords)).expect("lattice graph is well formed")
}

pub fn make_chessboard(n: usize, block: usize) -> Result<LabeledGraph, ToyError> {
    Ok(GridPattern::chessboard(n, block)?.graph())
}

pub fn make_stripes(n: usize, width: usize) -> Result<LabeledGraph, ToyError> {
    Ok(GridPattern::stripes(n, width)?.graph())
}

/// Fraction of nodes agreeing with the target, maximized over the global
/// label swap.
pub fn pattern_accuracy(generated: &LabeledGraph, target: &GridPattern) -> Result<f64, ToyError> {
    let n = target.n;
    let reference = lattice(n, vec![0; n * n]);
    let same_edges = generated.len() == n * n
        && generated.edges().len() == reference.edges().len()
        && generated
            .edges()
            .iter()
            .zip(reference.edges())
            .all(|(a, b)| (a.a, a.b, a.order) == (b.a, b.b, b.order));
    if !same_edges {
        return Err(ToyError::TopologyMismatch { n });
    }
    let want = target.labels();
    let agree = generated.labels().iter().zip(&want).filter(|(a, b)| a == b).count();
    let total = want.len();
    Ok(agree.max(total - agree) as f64 / total as f64)
}

/// The pattern and its polarity inversion.
pub fn pattern_corpus(target: &GridPattern) -> Vec<LabeledGraph> {
    let g = target.graph();
    let inverted = g.labels().iter().map(|&l| 1 - l).collect();
    let inv = g.relabeled(inverted).expect("binary relabeling");
    vec![g, inv]
}

/// Two-label alphabet used for grid patterns.
pub fn toy_alphabet() -> AtomAlphabet {
    AtomAlphabet::atoms(&[("0", 4), ("1", 4)]).expect("two labels")
}

/// Plain PGM (P2) image, label 1 rendered white.
pub fn to_pgm(graph: &LabeledGraph, n: usize) -> Result<String, ToyError> {
    if graph.len() != n * n {
        return Err(ToyError::TopologyMismatch { n });
    }
    let mut out = format!("P2\n{n} {n}\n1\n");
    for row in graph.labels().chunks(n) {
        let line: Vec<String> = row.iter().map(|l| l.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// One `i,j,label` row per node.
pub fn to_csv(graph: &LabeledGraph, n: usize) -> Result<String, ToyError> {
    if graph.len() != n * n {
        return Err(ToyError::TopologyMismatch { n });
    }
    let mut out = String::from("i,j,label\n");
    for (v, l) in graph.labels().iter().enumerate() {
        writeln!(out, "{},{},{}", v / n, v % n, l).expect("writing to a string");
    }
    Ok(out)
}

/// Settings of one toy experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    /// optimizer steps, each on the pattern and its inversion
    pub steps: usize,
    pub lr: f64,
    /// number of generated grids that are scored
    pub samples: usize,
    pub seed: u64,
    pub eps: f64,
    pub solver: SolverConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            samples: 8,
            seed: 0,
            eps: 0.05,
            solver: SolverConfig::default().with_tolerance(1e-3),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub model: ModFlowModel,
    pub history: Vec<EpochRecord>,
    pub generated: Vec<LabeledGraph>,
    pub accuracies: Vec<f64>,
}

impl ToyOutcome {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }
}

/// Fits a fresh model to the pattern and its inversion, then samples grids
/// on the lattice and scores each against the pattern.
pub fn run_toy<F>(target: &GridPattern, cfg: &ToyConfig, mut on_step: F) -> Result<ToyOutcome, ToyError>
where
    F: FnMut(&EpochRecord),
{
    let mut model = ModFlowModel::init(toy_alphabet(), None, cfg.seed, cfg.solver, cfg.eps, 2)?;
    let corpus: Vec<FlowSample> = model.prepare_corpus(&pattern_corpus(target))?;
    let train_cfg = TrainConfig {
        lr: cfg.lr,
        batch_size: corpus.len(),
        epochs: cfg.steps,
        seed: cfg.seed,
        shuffle: false,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(model.params().len());
    let history = train(&mut model, &corpus, &train_cfg, &mut state, |r, _, _| {
        on_step(r);
        Ok(())
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let topology = &corpus[0];
    let mut generated = Vec::with_capacity(cfg.samples);
    let mut accuracies = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let g = model.generate(topology, &mut rng)?;
        accuracies.push(pattern_accuracy(&g, target)?);
        generated.push(g);
    }
    Ok(ToyOutcome {
        model,
        history,
        generated,
        accuracies,
    })
}
