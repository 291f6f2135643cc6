use std::collections::BTreeMap;

use super::ChemError;
use crate::graph::{AtomAlphabet, LabeledGraph};

/// Allowed bond-order sums per element symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValenceTable {
    entries: BTreeMap<String, Vec<u8>>,
}

impl Default for ValenceTable {
    fn default() -> Self {
        Self::standard()
    }
}

impl ValenceTable {
    /// Organic-subset valences.
    pub fn standard() -> Self {
        let pairs: [(&str, &[u8]); 11] = [
            ("B", &[3]),
            ("C", &[4]),
            ("N", &[3]),
            ("O", &[2]),
            ("F", &[1]),
            ("H", &[1]),
            ("P", &[3, 5]),
            ("S", &[2, 4, 6]),
            ("Cl", &[1]),
            ("Br", &[1]),
            ("I", &[1]),
        ];
        Self {
            entries: pairs
                .into_iter()
                .map(|(s, v)| (s.to_string(), v.to_vec()))
                .collect(),
        }
    }

    pub fn insert(&mut self, symbol: &str, valences: Vec<u8>) {
        self.entries.insert(symbol.to_string(), valences);
    }

    pub fn allowed(&self, symbol: &str) -> Option<&[u8]> {
        self.entries.get(symbol).map(Vec::as_slice)
    }

    pub fn max_valence(&self, symbol: &str) -> Option<u8> {
        self.allowed(symbol).and_then(|v| v.iter().copied().max())
    }

    /// Atom-mode alphabet over `symbols` using each symbol's maximum valence.
    pub fn alphabet<S: AsRef<str>>(&self, symbols: &[S]) -> Result<AtomAlphabet, ChemError> {
        let entries = symbols
            .iter()
            .map(|s| {
                let s = s.as_ref();
                self.max_valence(s)
                    .map(|v| (s, v))
                    .ok_or_else(|| ChemError::MissingValence(s.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(AtomAlphabet::atoms(&entries)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValencyReport {
    pub nodes: Vec<bool>,
    pub valid: bool,
}

/// A node is valid when its bond-order sum does not exceed the largest
/// allowed valence of its element; the slack is implicit hydrogen.
pub fn check_valency(
    graph: &LabeledGraph,
    alphabet: &AtomAlphabet,
    table: &ValenceTable,
) -> Result<ValencyReport, ChemError> {
    graph.check_labels(alphabet.len())?;
    let sums = graph.bond_sums();
    let nodes = graph
        .labels()
        .iter()
        .zip(&sums)
        .map(|(&l, &s)| {
            if alphabet.is_cluster(l) {
                return Err(ChemError::NotAnAtom(alphabet.label(l).to_string()));
            }
            let sym = alphabet.label(l);
            let max = table
                .max_valence(sym)
                .ok_or_else(|| ChemError::MissingValence(sym.to_string()))?;
            Ok(s <= max as u32)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let valid = nodes.iter().all(|&v| v);
    Ok(ValencyReport { nodes, valid })
}
