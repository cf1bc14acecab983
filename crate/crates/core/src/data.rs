//! Numeric containers shared by every stage of the pipeline.
//!
//! Feature matrices are column-per-item: a dataset of `N` documents with
//! `D`-dimensional features is a `D × N` matrix.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row/column matrix of 64-bit floats.
pub type DenseMatrix = DMatrix<f64>;

/// The two sides of a paired document: `A` is the image-like modality that
/// goes through sparse coding, `B` the text-like modality that goes through
/// matrix factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::A => Modality::B,
            Modality::B => Modality::A,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::A => f.write_str("a"),
            Modality::B => f.write_str("b"),
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "image" => Ok(Modality::A),
            "b" | "text" => Ok(Modality::B),
            other => Err(format!("unknown modality {other:?} (expected a|b)")),
        }
    }
}

/// Returns the flat (column-major) index of the first non-finite entry.
pub fn first_non_finite(m: &DenseMatrix) -> Option<usize> {
    m.iter().position(|v| !v.is_finite())
}

pub fn ensure_finite(m: &DenseMatrix) -> Result<()> {
    match first_non_finite(m) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Set of integer labels attached to one item.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet(pub BTreeSet<u32>);

impl LabelSet {
    pub fn single(label: u32) -> Self {
        LabelSet(BTreeSet::from([label]))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Relevance used by every retrieval metric: at least one shared label.
    pub fn shares_with(&self, other: &LabelSet) -> bool {
        // Label sets are tiny; a merge walk is cheaper than hashing.
        let mut a = self.0.iter().peekable();
        let mut b = other.0.iter().peekable();
        while let (Some(x), Some(y)) = (a.peek(), b.peek()) {
            match x.cmp(y) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }
}

impl FromIterator<u32> for LabelSet {
    fn from_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        LabelSet(iter.into_iter().collect())
    }
}

/// Aligned two-modality features: column `n` of `features_a` and column `n`
/// of `features_b` describe the same document.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    features_a: DenseMatrix,
    features_b: DenseMatrix,
    labels: Option<Vec<LabelSet>>,
}

impl PairedDataset {
    pub fn new(
        features_a: DenseMatrix,
        features_b: DenseMatrix,
        labels: Option<Vec<LabelSet>>,
    ) -> Result<Self> {
        if features_a.ncols() != features_b.ncols() {
            return Err(Error::Shape(format!(
                "modality A has {} items but modality B has {}",
                features_a.ncols(),
                features_b.ncols()
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != features_a.ncols() {
                return Err(Error::Shape(format!(
                    "{} label sets for {} items",
                    labels.len(),
                    features_a.ncols()
                )));
            }
        }
        ensure_finite(&features_a)?;
        ensure_finite(&features_b)?;
        Ok(PairedDataset {
            features_a,
            features_b,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features_a.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features_a(&self) -> &DenseMatrix {
        &self.features_a
    }

    pub fn features_b(&self) -> &DenseMatrix {
        &self.features_b
    }

    pub fn features(&self, modality: Modality) -> &DenseMatrix {
        match modality {
            Modality::A => &self.features_a,
            Modality::B => &self.features_b,
        }
    }

    pub fn labels(&self) -> Option<&[LabelSet]> {
        self.labels.as_deref()
    }

    /// Selects a subset of documents, preserving the given order.
    pub fn select(&self, items: &[usize]) -> PairedDataset {
        PairedDataset {
            features_a: self.features_a.select_columns(items),
            features_b: self.features_b.select_columns(items),
            labels: self
                .labels
                .as_ref()
                .map(|l| items.iter().map(|&i| l[i].clone()).collect()),
        }
    }
}

/// One index per dictionary per item, stored item-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    num_dictionaries: usize,
    dictionary_size: usize,
    codes: Vec<u32>,
}

impl CodeMatrix {
    pub fn new(num_dictionaries: usize, dictionary_size: usize, codes: Vec<u32>) -> Result<Self> {
        if num_dictionaries == 0 || dictionary_size == 0 {
            return Err(Error::Codes(format!(
                "M={num_dictionaries} and K={dictionary_size} must both be positive"
            )));
        }
        if !codes.len().is_multiple_of(num_dictionaries) {
            return Err(Error::Codes(format!(
                "{} indices is not a multiple of M={num_dictionaries}",
                codes.len()
            )));
        }
        if let Some(bad) = codes.iter().find(|&&c| c as usize >= dictionary_size) {
            return Err(Error::Codes(format!("index {bad} out of range for K={dictionary_size}")));
        }
        Ok(CodeMatrix {
            num_dictionaries,
            dictionary_size,
            codes,
        })
    }

    pub fn zeros(num_items: usize, num_dictionaries: usize, dictionary_size: usize) -> Self {
        CodeMatrix {
            num_dictionaries,
            dictionary_size,
            codes: vec![0; num_items * num_dictionaries],
        }
    }

    pub fn num_items(&self) -> usize {
        self.codes.len() / self.num_dictionaries
    }

    pub fn num_dictionaries(&self) -> usize {
        self.num_dictionaries
    }

    pub fn dictionary_size(&self) -> usize {
        self.dictionary_size
    }

    pub fn item(&self, n: usize) -> &[u32] {
        let m = self.num_dictionaries;
        &self.codes[n * m..(n + 1) * m]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [u32] {
        let m = self.num_dictionaries;
        &mut self.codes[n * m..(n + 1) * m]
    }

    pub fn items(&self) -> impl ExactSizeIterator<Item = &[u32]> {
        self.codes.chunks_exact(self.num_dictionaries)
    }

    pub(crate) fn items_mut(&mut self) -> std::slice::ChunksExactMut<'_, u32> {
        self.codes.chunks_exact_mut(self.num_dictionaries)
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.codes
    }

    pub fn select(&self, items: &[usize]) -> CodeMatrix {
        CodeMatrix {
            num_dictionaries: self.num_dictionaries,
            dictionary_size: self.dictionary_size,
            codes: items.iter().flat_map(|&n| self.item(n).iter().copied()).collect(),
        }
    }

    /// Indicator form: an `(M·K) × N` binary matrix with exactly one 1 in
    /// each block of `K` rows.
    pub fn expand(&self) -> DenseMatrix {
        let k = self.dictionary_size;
        let mut p = DenseMatrix::zeros(self.num_dictionaries * k, self.num_items());
        for (n, item) in self.items().enumerate() {
            for (m, &code) in item.iter().enumerate() {
                p[(m * k + code as usize, n)] = 1.0;
            }
        }
        p
    }

    /// Inverse of [`CodeMatrix::expand`]. Every block must hold exactly one
    /// entry equal to 1 and zeros elsewhere.
    pub fn compress(p: &DenseMatrix, num_dictionaries: usize) -> Result<Self> {
        if num_dictionaries == 0 || !p.nrows().is_multiple_of(num_dictionaries) {
            return Err(Error::Codes(format!(
                "{} rows cannot be split into {num_dictionaries} blocks",
                p.nrows()
            )));
        }
        let k = p.nrows() / num_dictionaries;
        let mut codes = Vec::with_capacity(p.ncols() * num_dictionaries);
        for n in 0..p.ncols() {
            for m in 0..num_dictionaries {
                let block = p.view((m * k, n), (k, 1));
                let ones: Vec<usize> = block
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(i, _)| i)
                    .collect();
                match ones.as_slice() {
                    [i] if block[*i] == 1.0 => codes.push(*i as u32),
                    _ => {
                        return Err(Error::Codes(format!(
                            "item {n} block {m} is not a one-hot indicator"
                        )))
                    }
                }
            }
        }
        CodeMatrix::new(num_dictionaries, k, codes)
    }
}

/// Indicator expansion of a code matrix.
pub fn expand_codes(codes: &CodeMatrix) -> DenseMatrix {
    codes.expand()
}
