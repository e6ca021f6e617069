//! Active token/query streams, storage buffers, and the select–store and
//! reactivate routing steps.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::SparsityError;
use crate::numeric::gumbel::{gumbel_topk, GumbelTopk, GumbelTopkConfig};
use crate::numeric::Tensor2;

/// Per-token layout: camera view and grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub embeddings: Tensor2,
    pub original_index: Vec<usize>,
    pub meta: Vec<TokenMeta>,
    pub level: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryOrigin {
    Initialized,
    Propagated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryMeta {
    pub reference_point: [f64; 3],
    pub origin: QueryOrigin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub embeddings: Tensor2,
    pub reference_points: Vec<[f64; 3]>,
    pub origin: Vec<QueryOrigin>,
    pub original_index: Vec<usize>,
}

/// Row-routable stream: rows carry an embedding, an original index and
/// layout metadata that must travel with them.
pub trait Stream: Sized {
    type Meta: Clone;
    fn embeddings(&self) -> &Tensor2;
    fn original_index(&self) -> &[usize];
    fn row_meta(&self, row: usize) -> Self::Meta;
    /// Build a stream like `self` from rows.
    fn assemble(&self, embeddings: Tensor2, original_index: Vec<usize>, meta: Vec<Self::Meta>) -> Self;

    fn len(&self) -> usize {
        self.original_index().len()
    }
    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Self {
        self.assemble(
            self.embeddings().select_rows(rows),
            rows.iter().map(|&r| self.original_index()[r]).collect(),
            rows.iter().map(|&r| self.row_meta(r)).collect(),
        )
    }
}

impl Stream for TokenStream {
    type Meta = TokenMeta;
    fn embeddings(&self) -> &Tensor2 {
        &self.embeddings
    }
    fn original_index(&self) -> &[usize] {
        &self.original_index
    }
    fn row_meta(&self, row: usize) -> TokenMeta {
        self.meta[row]
    }
    fn assemble(&self, embeddings: Tensor2, original_index: Vec<usize>, meta: Vec<TokenMeta>) -> Self {
        TokenStream { embeddings, original_index, meta, level: self.level }
    }
}

impl Stream for QuerySet {
    type Meta = QueryMeta;
    fn embeddings(&self) -> &Tensor2 {
        &self.embeddings
    }
    fn original_index(&self) -> &[usize] {
        &self.original_index
    }
    fn row_meta(&self, row: usize) -> QueryMeta {
        QueryMeta { reference_point: self.reference_points[row], origin: self.origin[row] }
    }
    fn assemble(&self, embeddings: Tensor2, original_index: Vec<usize>, meta: Vec<QueryMeta>) -> Self {
        QuerySet {
            embeddings,
            original_index,
            reference_points: meta.iter().map(|m| m.reference_point).collect(),
            origin: meta.iter().map(|m| m.origin).collect(),
        }
    }
}

impl TokenStream {
    pub fn validate(&self) -> Result<(), SparsityError> {
        check_rows(self.embeddings.rows(), &self.original_index, self.meta.len())
    }
}

impl QuerySet {
    pub fn empty(dim: usize) -> Self {
        QuerySet { embeddings: Tensor2::zeros(0, dim), reference_points: vec![], origin: vec![], original_index: vec![] }
    }

    pub fn validate(&self) -> Result<(), SparsityError> {
        if self.origin.len() != self.reference_points.len() {
            return Err(SparsityError::ShapeMismatch("origin list length".into()));
        }
        check_rows(self.embeddings.rows(), &self.original_index, self.reference_points.len())
    }

    /// Concatenate two sets; `other`'s original indices are offset past ours.
    pub fn concat(&self, other: &QuerySet) -> Result<QuerySet, SparsityError> {
        let mut emb = self.embeddings.clone();
        for r in 0..other.embeddings.rows() {
            emb.push_row(other.embeddings.row(r))?;
        }
        let offset = self.original_index.iter().max().map_or(0, |m| m + 1);
        Ok(QuerySet {
            embeddings: emb,
            reference_points: self.reference_points.iter().chain(&other.reference_points).copied().collect(),
            origin: self.origin.iter().chain(&other.origin).copied().collect(),
            original_index: self.original_index.iter().copied().chain(other.original_index.iter().map(|i| i + offset)).collect(),
        })
    }
}

fn check_rows(rows: usize, index: &[usize], meta: usize) -> Result<(), SparsityError> {
    if rows != index.len() || meta != index.len() {
        return Err(SparsityError::ShapeMismatch(format!("{rows} rows, {} indices, {meta} metadata entries", index.len())));
    }
    let mut seen = HashSet::with_capacity(index.len());
    if let Some(&dup) = index.iter().find(|&&i| !seen.insert(i)) {
        return Err(SparsityError::IndexCollision(dup));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferKind {
    Image,
    Query,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry<M> {
    pub original_index: usize,
    pub embedding: Vec<f64>,
    pub stage_written: usize,
    pub meta: M,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StorageBuffer<M> {
    pub kind: BufferKind,
    pub entries: Vec<BufferEntry<M>>,
}

impl<M> StorageBuffer<M> {
    pub fn new(kind: BufferKind) -> Self {
        Self { kind, entries: Vec::new() }
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.original_index).collect()
    }
}

/// Keep `k` rows chosen by Gumbel-TopK over `scores` (rows stay in their
/// current order) and append the rest to `buffer` tagged with `stage`.
/// Returns the active stream and the selection (for its soft weights).
pub fn select_and_store_count<S: Stream>(
    stream: &S,
    scores: &[f64],
    k: usize,
    cfg: &GumbelTopkConfig,
    buffer: &mut StorageBuffer<S::Meta>,
    stage: usize,
) -> Result<(S, GumbelTopk), SparsityError> {
    if scores.len() != stream.len() {
        return Err(SparsityError::ShapeMismatch(format!("{} scores for {} rows", scores.len(), stream.len())));
    }
    if k > stream.len() {
        return Err(SparsityError::KTooLarge { k, n: stream.len() });
    }
    if k == 0 {
        return Err(SparsityError::EmptyTopK);
    }
    let sel = gumbel_topk(scores, &GumbelTopkConfig { k, ..*cfg })?;
    let kept = sel.kept_sorted();
    let mut keep_mask = vec![false; stream.len()];
    for &r in &kept {
        keep_mask[r] = true;
    }
    for (r, _) in keep_mask.iter().enumerate().filter(|(_, &m)| !m) {
        buffer.entries.push(BufferEntry {
            original_index: stream.original_index()[r],
            embedding: stream.embeddings().row(r).to_vec(),
            stage_written: stage,
            meta: stream.row_meta(r),
        });
    }
    Ok((stream.select(&kept), sel))
}

/// Ratio form: keeps `⌊keep_ratio · N⌋` rows.
pub fn select_and_store<S: Stream>(
    stream: &S,
    scores: &[f64],
    keep_ratio: f64,
    cfg: &GumbelTopkConfig,
    buffer: &mut StorageBuffer<S::Meta>,
    stage: usize,
) -> Result<S, SparsityError> {
    let k = (keep_ratio * stream.len() as f64).floor() as usize;
    Ok(select_and_store_count(stream, scores, k, cfg, buffer, stage)?.0)
}

/// Merge buffered rows back into the active stream, sorted by original
/// index. The buffer is emptied.
pub fn reactivate<S: Stream>(active: &S, buffer: &mut StorageBuffer<S::Meta>) -> Result<S, SparsityError> {
    let mut seen: HashSet<usize> = active.original_index().iter().copied().collect();
    for e in &buffer.entries {
        if !seen.insert(e.original_index) {
            return Err(SparsityError::IndexCollision(e.original_index));
        }
    }
    let entries = std::mem::take(&mut buffer.entries);
    let dim = active.embeddings().cols();
    let mut rows: Vec<(usize, Vec<f64>, S::Meta)> = (0..active.len())
        .map(|r| (active.original_index()[r], active.embeddings().row(r).to_vec(), active.row_meta(r)))
        .collect();
    for e in entries {
        if e.embedding.len() != dim {
            return Err(SparsityError::ShapeMismatch("buffered embedding width".into()));
        }
        rows.push((e.original_index, e.embedding, e.meta));
    }
    rows.sort_by_key(|r| r.0);
    let mut data = Vec::with_capacity(rows.len() * dim);
    let mut index = Vec::with_capacity(rows.len());
    let mut meta = Vec::with_capacity(rows.len());
    for (i, e, m) in rows {
        index.push(i);
        data.extend_from_slice(&e);
        meta.push(m);
    }
    let n = index.len();
    Ok(active.assemble(Tensor2::new(n, dim, data)?, index, meta))
}
