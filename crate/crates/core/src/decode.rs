//! Grid decoding: recover entity mentions from a predicted tag grid.
//!
//! A trigger is a typed boundary tag: `THC_y` at `(tail, head)` or `HTC_y` at
//! `(head, tail)`. From every trigger a depth-first search walks from the head
//! towards the tail over edges `a → b` that carry both `NNC` at `(a, b)` and
//! `PNC` at `(b, a)`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntityMention, TagGrid, TagId, TagVocabulary};

pub type PredictedGrid = TagGrid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// Paths only step to the next character (`b = a + 1`).
    #[default]
    Contiguous,
    /// Paths may skip characters but never pass the tail.
    Discontinuous,
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("grid of size {n} is too large for exhaustive enumeration (limit {limit})")]
    TooLarge { n: usize, limit: usize },
    #[error("malformed grid record: {0}")]
    Malformed(String),
}

struct Edges<'a> {
    grid: &'a TagGrid,
    nnc: TagId,
    pnc: TagId,
}

impl Edges<'_> {
    fn linked(&self, a: usize, b: usize) -> bool {
        self.grid.contains(a, b, self.nnc) && self.grid.contains(b, a, self.pnc)
    }
}

fn triggered(grid: &TagGrid, vocab: &TagVocabulary, tail: usize, head: usize, ty: usize) -> bool {
    grid.contains(tail, head, vocab.thc(ty)) || grid.contains(head, tail, vocab.htc(ty))
}

pub fn decode_grid(grid: &PredictedGrid, vocab: &TagVocabulary, mode: DecodeMode) -> BTreeSet<EntityMention> {
    let edges = Edges { grid, nnc: vocab.nnc(), pnc: vocab.pnc() };
    let mut out = BTreeSet::new();
    let mut path = Vec::with_capacity(grid.n);
    for tail in 0..grid.n {
        for head in 0..=tail {
            for ty in 0..vocab.num_types() {
                if !triggered(grid, vocab, tail, head, ty) {
                    continue;
                }
                let label = &vocab.entity_types[ty];
                if head == tail {
                    out.insert(EntityMention::new(vec![head], label.clone()));
                    continue;
                }
                path.clear();
                path.push(head);
                search(&edges, mode, &mut path, tail, label, &mut out);
            }
        }
    }
    out
}

fn search(
    edges: &Edges<'_>,
    mode: DecodeMode,
    path: &mut Vec<usize>,
    tail: usize,
    label: &str,
    out: &mut BTreeSet<EntityMention>,
) {
    let from = *path.last().expect("path starts at the head");
    let last = match mode {
        DecodeMode::Contiguous => (from + 1).min(tail),
        DecodeMode::Discontinuous => tail,
    };
    for next in from + 1..=last {
        if !edges.linked(from, next) {
            continue;
        }
        path.push(next);
        if next == tail {
            out.insert(EntityMention::new(path.clone(), label));
        } else {
            search(edges, mode, path, tail, label, out);
        }
        path.pop();
    }
}

/// Largest grid side accepted by [`brute_force_decode`].
pub const BRUTE_FORCE_LIMIT: usize = 16;

/// Enumerates every strictly increasing index sequence of length ≤ `max_len`
/// and keeps those whose boundary is triggered and whose consecutive pairs are
/// all linked. Exponential in `n`; intended as an oracle for [`decode_grid`].
pub fn brute_force_decode(
    grid: &PredictedGrid,
    vocab: &TagVocabulary,
    max_len: usize,
    mode: DecodeMode,
) -> Result<BTreeSet<EntityMention>, DecodeError> {
    let n = grid.n;
    if n > BRUTE_FORCE_LIMIT {
        return Err(DecodeError::TooLarge { n, limit: BRUTE_FORCE_LIMIT });
    }
    let edges = Edges { grid, nnc: vocab.nnc(), pnc: vocab.pnc() };
    let mut out = BTreeSet::new();
    for mask in 1u32..(1u32 << n) {
        let seq: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        if seq.len() > max_len {
            continue;
        }
        if mode == DecodeMode::Contiguous && seq.windows(2).any(|w| w[1] != w[0] + 1) {
            continue;
        }
        if !seq.windows(2).all(|w| edges.linked(w[0], w[1])) {
            continue;
        }
        let (head, tail) = (seq[0], seq[seq.len() - 1]);
        for ty in 0..vocab.num_types() {
            if triggered(grid, vocab, tail, head, ty) {
                out.insert(EntityMention::new(seq.clone(), vocab.entity_types[ty].clone()));
            }
        }
    }
    Ok(out)
}

/// One line of a grid dump: `{"n": 5, "cells": [[1, 2, "NNC"], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDump {
    pub n: usize,
    pub cells: Vec<(usize, usize, String)>,
}

impl GridDump {
    pub fn from_grid(grid: &TagGrid, vocab: &TagVocabulary) -> Self {
        let cells = grid
            .cells
            .iter()
            .flat_map(|(&(i, j), tags)| tags.iter().map(move |&t| (i, j, vocab.tag_name(t))))
            .collect();
        Self { n: grid.n, cells }
    }

    /// Builds the grid together with a vocabulary over the entity types named
    /// by its typed tags.
    pub fn to_grid(&self) -> Result<(TagGrid, TagVocabulary), DecodeError> {
        let mut types = BTreeSet::new();
        for (_, _, name) in &self.cells {
            match name.as_str() {
                "NNC" | "PNC" | "NONE" => {}
                other => {
                    let ty = other
                        .strip_prefix("THC_")
                        .or_else(|| other.strip_prefix("HTC_"))
                        .ok_or_else(|| DecodeError::Malformed(format!("unknown tag {other:?}")))?;
                    types.insert(ty.to_string());
                }
            }
        }
        let vocab = TagVocabulary::new(types.into_iter().collect(), true);
        let mut grid = TagGrid::new(self.n);
        for (i, j, name) in &self.cells {
            if *i >= self.n || *j >= self.n {
                return Err(DecodeError::Malformed(format!("cell ({i}, {j}) outside {0}x{0} grid", self.n)));
            }
            if name == "NONE" {
                continue;
            }
            let tag = vocab.parse_tag(name).expect("types collected above");
            grid.insert(*i, *j, tag);
        }
        Ok((grid, vocab))
    }

    pub fn parse(line: &str) -> Result<Self, DecodeError> {
        serde_json::from_str(line).map_err(|e| DecodeError::Malformed(e.to_string()))
    }
}
