use std::fs;
use std::path::Path;

use super::{parse_smiles, ChemError};
use crate::graph::{AtomAlphabet, Coords, LabeledGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// one SMILES per line, `#` comment lines
    SmilesLines,
    /// blocks of `M D` header, `M` atom lines `symbol x y [z]`, then bond
    /// lines `i j order`; blocks separated by blank lines
    XyzBlock,
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "smiles" | "smiles-lines" => Ok(Self::SmilesLines),
            "xyz" | "xyz-block" => Ok(Self::XyzBlock),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

/// A record that failed to parse, with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub graphs: Vec<LabeledGraph>,
    /// source line of each graph
    pub lines: Vec<usize>,
    pub errors: Vec<RecordError>,
}

pub fn read_corpus(
    path: &Path,
    format: CorpusFormat,
    alphabet: &AtomAlphabet,
) -> Result<Corpus, ChemError> {
    let text = fs::read_to_string(path).map_err(|source| ChemError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(match format {
        CorpusFormat::SmilesLines => parse_smiles_lines(&text, alphabet),
        CorpusFormat::XyzBlock => parse_xyz_blocks(&text, alphabet),
    })
}

fn parse_smiles_lines(text: &str, alphabet: &AtomAlphabet) -> Corpus {
    let mut corpus = Corpus::default();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let smiles = line.split_whitespace().next().unwrap_or_default();
        match parse_smiles(smiles, alphabet) {
            Ok(g) => {
                corpus.graphs.push(g);
                corpus.lines.push(idx + 1);
            }
            Err(e) => corpus.errors.push(RecordError {
                line: idx + 1,
                message: e.to_string(),
            }),
        }
    }
    corpus
}

fn parse_xyz_blocks(text: &str, alphabet: &AtomAlphabet) -> Corpus {
    let mut corpus = Corpus::default();
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.starts_with('#'))
        .collect();
    let mut k = 0;
    while k < lines.len() {
        if lines[k].1.is_empty() {
            k += 1;
            continue;
        }
        let start = k;
        while k < lines.len() && !lines[k].1.is_empty() {
            k += 1;
        }
        let block = &lines[start..k];
        match parse_block(block, alphabet) {
            Ok(g) => {
                corpus.graphs.push(g);
                corpus.lines.push(block[0].0);
            }
            Err(e) => corpus.errors.push(e),
        }
    }
    corpus
}

fn parse_block(block: &[(usize, &str)], alphabet: &AtomAlphabet) -> Result<LabeledGraph, RecordError> {
    let err = |line: usize, message: String| RecordError { line, message };
    let (hline, header) = block[0];
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (m, dim) = match fields.as_slice() {
        [m, d] => (
            m.parse::<usize>()
                .map_err(|_| err(hline, format!("bad atom count {m:?}")))?,
            d.parse::<usize>()
                .map_err(|_| err(hline, format!("bad dimension {d:?}")))?,
        ),
        _ => return Err(err(hline, "expected header \"M D\"".into())),
    };
    if !(2..=3).contains(&dim) {
        return Err(err(hline, format!("dimension {dim} not in 2..=3")));
    }
    if block.len() < 1 + m {
        return Err(err(hline, format!("block declares {m} atoms but has fewer lines")));
    }
    let mut labels = Vec::with_capacity(m);
    let mut data = Vec::with_capacity(m * dim);
    for &(ln, line) in &block[1..=m] {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 1 + dim {
            return Err(err(ln, format!("expected symbol and {dim} coordinates")));
        }
        let label = alphabet
            .index_of(f[0])
            .filter(|&l| !alphabet.is_cluster(l))
            .ok_or_else(|| err(ln, format!("unknown atom symbol {:?}", f[0])))?;
        labels.push(label);
        for v in &f[1..] {
            let x: f64 = v.parse().map_err(|_| err(ln, format!("bad coordinate {v:?}")))?;
            if !x.is_finite() {
                return Err(err(ln, format!("non-finite coordinate {v:?}")));
            }
            data.push(x);
        }
    }
    let mut edges = Vec::new();
    for &(ln, line) in &block[1 + m..] {
        let f: Vec<&str> = line.split_whitespace().collect();
        let parsed: Option<Vec<usize>> = f.iter().map(|v| v.parse().ok()).collect();
        match parsed.as_deref() {
            Some(&[i, j, order]) if order <= 3 => edges.push((i, j, order as u8)),
            _ => return Err(err(ln, "expected bond line \"i j order\"".into())),
        }
    }
    let coords = Coords::new(dim, data).map_err(|e| err(hline, e.to_string()))?;
    LabeledGraph::new(labels, edges, Some(coords)).map_err(|e| err(hline, e.to_string()))
}
