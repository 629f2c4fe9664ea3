//! Seen/unseen category splits and cross-modal retrieval tasks.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("an open-set split needs labels")]
    MissingLabels,
    #[error("an open-set split needs at least 2 categories, found {0}")]
    TooFewCategories(usize),
    #[error("unseen fraction {fraction} gives {unseen} unseen of {total} categories; need between 1 and {}", total - 1)]
    UnseenCount { fraction: f64, unseen: usize, total: usize },
    #[error("query and target modality must differ (both {0})")]
    SameModality(usize),
    #[error("modality {index} out of range for {count} modalities")]
    ModalityOutOfRange { index: usize, count: usize },
}

/// Disjoint seen (training) and unseen (test) categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenSetSplit {
    pub seen_categories: Vec<u32>,
    pub unseen_categories: Vec<u32>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Shuffles the distinct categories with `seed` and makes the first
/// `round(unseen_fraction * Y)` of them unseen.
pub fn open_set_split(labels: &[u32], unseen_fraction: f64, seed: u64) -> Result<OpenSetSplit, SplitError> {
    let categories: Vec<u32> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let total = categories.len();
    if total < 2 {
        return Err(SplitError::TooFewCategories(total));
    }
    let unseen = (unseen_fraction * total as f64).round();
    if !(unseen >= 1.0 && unseen < total as f64) {
        return Err(SplitError::UnseenCount {
            fraction: unseen_fraction,
            unseen: if unseen.is_finite() && unseen > 0.0 {
                unseen as usize
            } else {
                0
            },
            total,
        });
    }
    let unseen = unseen as usize;
    let mut shuffled = categories;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut unseen_categories = shuffled[..unseen].to_vec();
    let mut seen_categories = shuffled[unseen..].to_vec();
    unseen_categories.sort_unstable();
    seen_categories.sort_unstable();

    let unseen_set: BTreeSet<u32> = unseen_categories.iter().copied().collect();
    let (test_indices, train_indices): (Vec<usize>, Vec<usize>) =
        (0..labels.len()).partition(|&i| unseen_set.contains(&labels[i]));
    Ok(OpenSetSplit {
        seen_categories,
        unseen_categories,
        train_indices,
        test_indices,
    })
}

/// One query-modality -> target-modality retrieval problem over a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalTask {
    pub query_modality: usize,
    pub target_modality: usize,
    pub query_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

/// Queries and targets are both the full test set, seen through different
/// modalities.
pub fn make_task(split: &OpenSetSplit, q: usize, t: usize, n_modalities: usize) -> Result<RetrievalTask, SplitError> {
    for index in [q, t] {
        if index >= n_modalities {
            return Err(SplitError::ModalityOutOfRange {
                index,
                count: n_modalities,
            });
        }
    }
    if q == t {
        return Err(SplitError::SameModality(q));
    }
    Ok(RetrievalTask {
        query_modality: q,
        target_modality: t,
        query_indices: split.test_indices.clone(),
        target_indices: split.test_indices.clone(),
    })
}

/// All ordered `(query, target)` modality pairs with `query != target`.
pub fn modality_pairs(n_modalities: usize) -> Vec<(usize, usize)> {
    (0..n_modalities)
        .flat_map(|q| (0..n_modalities).filter(move |&t| t != q).map(move |t| (q, t)))
        .collect()
}

/// One index per line; lines starting with `#` are comments.
pub fn write_index_file(path: impl AsRef<Path>, indices: &[usize], comment: &str) -> io::Result<()> {
    let mut text = String::new();
    for line in comment.lines() {
        text.push_str("# ");
        text.push_str(line);
        text.push('\n');
    }
    for i in indices {
        text.push_str(&i.to_string());
        text.push('\n');
    }
    fs::write(path, text)
}

pub fn read_index_file(path: impl AsRef<Path>) -> io::Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.parse::<usize>()
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("bad index {l:?}: {e}")))
        })
        .collect()
}
