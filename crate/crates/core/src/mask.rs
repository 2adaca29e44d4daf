//! Fake-causal visibility masks.
//!
//! Stream groups see every group. Context groups (reference and memories) see
//! each other but never the stream, so their representations do not depend on
//! noisy content.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::buffer::GroupTag;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("layout must be nonempty and begin with Reference")]
    Layout,
    #[error("no token count for group {0}")]
    MissingCount(GroupTag),
    #[error("group {0} has zero tokens")]
    ZeroCount(GroupTag),
}

/// Group-level visibility: `allowed[q][k]` means query group `q` may attend to key group `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMask {
    pub layout: Vec<GroupTag>,
    pub allowed: Vec<Vec<bool>>,
}

pub fn build_group_mask(layout: &[GroupTag]) -> Result<GroupMask, MaskError> {
    if layout.first() != Some(&GroupTag::Reference) {
        return Err(MaskError::Layout);
    }
    let allowed = layout
        .iter()
        .map(|q| layout.iter().map(|k| q.is_stream() || !k.is_stream()).collect())
        .collect();
    Ok(GroupMask {
        layout: layout.to_vec(),
        allowed,
    })
}

impl GroupMask {
    /// Every group sees every group.
    pub fn full(layout: &[GroupTag]) -> GroupMask {
        GroupMask {
            layout: layout.to_vec(),
            allowed: vec![vec![true; layout.len()]; layout.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn blocked_cells(&self) -> usize {
        self.allowed.iter().flatten().filter(|a| !**a).count()
    }

    /// 0/1 grid with row and column labels.
    pub fn pretty(&self) -> String {
        let labels: Vec<String> = self.layout.iter().map(|g| g.to_string()).collect();
        let width = labels.iter().map(String::len).max().unwrap_or(0);
        let mut out = String::new();
        let _ = write!(out, "{:width$}", "");
        for l in &labels {
            let _ = write!(out, " {l:>width$}");
        }
        out.push('\n');
        for (label, row) in labels.iter().zip(&self.allowed) {
            let _ = write!(out, "{label:width$}");
            for &a in row {
                let _ = write!(out, " {:>width$}", u8::from(a));
            }
            out.push('\n');
        }
        out
    }
}

/// Token-resolution mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    pub size: usize,
    pub allowed: Vec<bool>,
}

impl TokenMask {
    pub fn get(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|a| **a).count()
    }
}

/// Expands a group mask into blocks of `tokens_per_group[g]` tokens per group.
pub fn expand_to_token_mask(
    mask: &GroupMask,
    tokens_per_group: &HashMap<GroupTag, usize>,
) -> Result<TokenMask, MaskError> {
    let mut owner = Vec::new();
    for (gi, tag) in mask.layout.iter().enumerate() {
        let n = *tokens_per_group.get(tag).ok_or(MaskError::MissingCount(*tag))?;
        if n == 0 {
            return Err(MaskError::ZeroCount(*tag));
        }
        owner.extend(std::iter::repeat_n(gi, n));
    }
    let size = owner.len();
    let mut allowed = Vec::with_capacity(size * size);
    for &q in &owner {
        allowed.extend(owner.iter().map(|&k| mask.allowed[q][k]));
    }
    Ok(TokenMask { size, allowed })
}
