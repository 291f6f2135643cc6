use std::collections::HashMap;

use super::ChemError;
use crate::graph::{wl::refine_colors, AtomAlphabet, LabeledGraph, LabelMode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SmilesToken {
    Atom(String),
    Bond(u8),
    BranchOpen,
    BranchClose,
    RingBond(u16),
}

/// Splits a kekulized organic-subset SMILES string into tokens paired with
/// their byte offsets.
pub fn tokenize(text: &str) -> Result<Vec<(usize, SmilesToken)>, ChemError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let c = bytes[pos] as char;
        let start = pos;
        let tok = match c {
            'C' if bytes.get(pos + 1) == Some(&b'l') => {
                pos += 1;
                SmilesToken::Atom("Cl".into())
            }
            'B' if bytes.get(pos + 1) == Some(&b'r') => {
                pos += 1;
                SmilesToken::Atom("Br".into())
            }
            'B' | 'C' | 'N' | 'O' | 'P' | 'S' | 'F' | 'I' => SmilesToken::Atom(c.to_string()),
            'b' | 'c' | 'n' | 'o' | 'p' | 's' | ':' => {
                return Err(ChemError::AromaticInputRejected { pos })
            }
            '-' => SmilesToken::Bond(1),
            '=' => SmilesToken::Bond(2),
            '#' => SmilesToken::Bond(3),
            '(' => SmilesToken::BranchOpen,
            ')' => SmilesToken::BranchClose,
            '1'..='9' => SmilesToken::RingBond(c as u16 - '0' as u16),
            '%' => {
                let digits = text.get(pos + 1..pos + 3).unwrap_or("");
                if digits.len() != 2 || !digits.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(ChemError::UnexpectedToken { pos });
                }
                pos += 2;
                SmilesToken::RingBond(digits.parse().expect("two ascii digits"))
            }
            c if c.is_ascii_alphabetic() => {
                return Err(ChemError::UnknownAtomSymbol {
                    symbol: c.to_string(),
                    pos,
                })
            }
            _ => {
                let ch = text[pos..].chars().next().expect("non-empty remainder");
                return Err(ChemError::UnsupportedSyntax { ch, pos });
            }
        };
        out.push((start, tok));
        pos += 1;
    }
    Ok(out)
}

/// Parses a kekulized SMILES string. Bonds default to single; explicit ring
/// closure orders may appear on either end but must agree.
pub fn parse_smiles(text: &str, alphabet: &AtomAlphabet) -> Result<LabeledGraph, ChemError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(ChemError::EmptyInput);
    }
    let tokens = tokenize(text)?;
    let mut labels = Vec::new();
    let mut edges: Vec<(usize, usize, u8)> = Vec::new();
    let mut prev: Option<usize> = None;
    let mut pending: Option<(usize, u8)> = None;
    let mut branches: Vec<usize> = Vec::new();
    let mut open_rings: HashMap<u16, (usize, Option<u8>, usize)> = HashMap::new();

    for (pos, tok) in tokens {
        match tok {
            SmilesToken::Atom(sym) => {
                let label = match alphabet.index_of(&sym) {
                    Some(l) if !alphabet.is_cluster(l) => l,
                    _ => return Err(ChemError::UnknownAtomSymbol { symbol: sym, pos }),
                };
                let node = labels.len();
                labels.push(label);
                if let Some(p) = prev {
                    edges.push((p, node, pending.take().map_or(1, |b| b.1)));
                } else if let Some((bpos, _)) = pending {
                    return Err(ChemError::UnexpectedToken { pos: bpos });
                }
                prev = Some(node);
            }
            SmilesToken::Bond(order) => {
                if prev.is_none() || pending.is_some() {
                    return Err(ChemError::UnexpectedToken { pos });
                }
                pending = Some((pos, order));
            }
            SmilesToken::BranchOpen => {
                let p = prev.ok_or(ChemError::UnexpectedToken { pos })?;
                if pending.is_some() {
                    return Err(ChemError::UnexpectedToken { pos });
                }
                branches.push(p);
            }
            SmilesToken::BranchClose => {
                if let Some((bpos, _)) = pending {
                    return Err(ChemError::UnexpectedToken { pos: bpos });
                }
                prev = Some(
                    branches
                        .pop()
                        .ok_or(ChemError::UnbalancedParentheses { pos })?,
                );
            }
            SmilesToken::RingBond(digit) => {
                let p = prev.ok_or(ChemError::UnexpectedToken { pos })?;
                let order = pending.take().map(|b| b.1);
                match open_rings.remove(&digit) {
                    Some((q, other, _)) => {
                        let order = match (order, other) {
                            (Some(a), Some(b)) if a != b => {
                                return Err(ChemError::RingBondConflict { pos })
                            }
                            (a, b) => a.or(b).unwrap_or(1),
                        };
                        if q == p {
                            return Err(ChemError::UnexpectedToken { pos });
                        }
                        edges.push((q, p, order));
                    }
                    None => {
                        open_rings.insert(digit, (p, order, pos));
                    }
                }
            }
        }
    }
    if let Some((bpos, _)) = pending {
        return Err(ChemError::UnexpectedToken { pos: bpos });
    }
    if !branches.is_empty() {
        return Err(ChemError::UnbalancedParentheses { pos: text.len() });
    }
    if let Some((&digit, _)) = open_rings.iter().min_by_key(|(_, v)| v.2) {
        return Err(ChemError::DanglingRingBond(digit));
    }
    Ok(LabeledGraph::new(labels, edges, None)?)
}

fn bond_symbol(order: u8) -> &'static str {
    match order {
        2 => "=",
        3 => "#",
        _ => "",
    }
}

fn ring_label(n: u16) -> String {
    if n < 10 {
        n.to_string()
    } else {
        format!("%{n:02}")
    }
}

/// Depth-first SMILES emission from the WL-canonical root; neighbors are
/// visited by (refined color, index).
pub fn write_smiles(graph: &LabeledGraph, alphabet: &AtomAlphabet) -> Result<String, ChemError> {
    if alphabet.mode() != LabelMode::Atom {
        return Err(ChemError::Graph(crate::graph::GraphError::NotAtomMode));
    }
    graph.check_labels(alphabet.len())?;
    if graph.is_empty() {
        return Err(ChemError::EmptyInput);
    }
    if !graph.is_connected() {
        return Err(ChemError::DisconnectedGraph);
    }
    let m = graph.len();
    let colors = refine_colors(graph, m).pop().expect("history is non-empty");
    let rank = |i: usize| (colors[i], i);
    let mut adj = graph.adjacency();
    for list in &mut adj {
        list.sort_by_key(|&(j, _)| rank(j));
    }
    let root = (0..m).min_by_key(|&i| rank(i)).expect("graph is non-empty");

    // first pass: spanning tree and ring closures
    let mut visited = vec![false; m];
    let mut children: Vec<Vec<(usize, u8)>> = vec![Vec::new(); m];
    let mut opens: Vec<Vec<(usize, u8)>> = vec![Vec::new(); m];
    let mut closes: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut order = Vec::with_capacity(m);
    let mut stack = vec![(root, usize::MAX, 0usize)];
    visited[root] = true;
    order.push(root);
    while let Some(&mut (u, parent, ref mut next)) = stack.last_mut() {
        if *next == adj[u].len() {
            stack.pop();
            continue;
        }
        let (v, bond) = adj[u][*next];
        *next += 1;
        if !visited[v] {
            visited[v] = true;
            order.push(v);
            children[u].push((v, bond));
            stack.push((v, u, 0));
        } else if v != parent && !opens[v].iter().any(|&(w, _)| w == u) && !opens[u].iter().any(|&(w, _)| w == v) {
            // back edge to an ancestor; opened at v, closed at u
            if stack.iter().any(|&(s, _, _)| s == v) {
                opens[v].push((u, bond));
                closes[u].push(v);
            }
        }
    }

    // second pass: emission
    let mut out = String::new();
    let mut digit_of: HashMap<(usize, usize), u16> = HashMap::new();
    let mut in_use: Vec<bool> = vec![false; 100];
    enum Step {
        Atom(usize),
        Text(&'static str),
    }
    let mut work = vec![Step::Atom(root)];
    while let Some(step) = work.pop() {
        let u = match step {
            Step::Text(s) => {
                out.push_str(s);
                continue;
            }
            Step::Atom(u) => u,
        };
        out.push_str(alphabet.label(graph.labels()[u]));
        for &v in &closes[u] {
            let d = digit_of.remove(&(v, u)).expect("ring opened before close");
            in_use[d as usize] = false;
            out.push_str(&ring_label(d));
        }
        for &(v, bond) in &opens[u] {
            let d = (1..100).find(|&d| !in_use[d]).expect("fewer than 99 open rings") as u16;
            in_use[d as usize] = true;
            digit_of.insert((u, v), d);
            out.push_str(bond_symbol(bond));
            out.push_str(&ring_label(d));
        }
        let kids = &children[u];
        for (k, &(v, bond)) in kids.iter().enumerate().rev() {
            let last = k + 1 == kids.len();
            if !last {
                work.push(Step::Text(")"));
            }
            work.push(Step::Atom(v));
            work.push(Step::Text(bond_symbol(bond)));
            if !last {
                work.push(Step::Text("("));
            }
        }
    }
    debug_assert_eq!(order.len(), m);
    Ok(out)
}
