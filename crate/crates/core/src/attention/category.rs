use super::{segmented_attention, split_qkv, Segment};
use crate::error::{Error, Result};
use crate::tensor::{macs, Element, Tensor, Var};

/// Which axis of a similarity map indexes anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// `[M, HW]`: anchors along axis 0.
    Coarse,
    /// `[HW, M]`: anchors along axis 1.
    Fine,
}

/// Assignment of every token to one of `num_categories` categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryAssignment {
    token_to_category: Vec<usize>,
    num_categories: usize,
}

impl CategoryAssignment {
    pub fn new(token_to_category: Vec<usize>, num_categories: usize) -> Result<Self> {
        if let Some(&bad) = token_to_category.iter().find(|&&c| c >= num_categories) {
            return Err(Error::Contract(format!("category {bad} out of range for {num_categories}")));
        }
        Ok(CategoryAssignment {
            token_to_category,
            num_categories,
        })
    }

    pub fn token_to_category(&self) -> &[usize] {
        &self.token_to_category
    }

    pub fn num_tokens(&self) -> usize {
        self.token_to_category.len()
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    /// Token indices of each category, in raster order.
    pub fn categories(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.num_categories];
        for (t, &c) in self.token_to_category.iter().enumerate() {
            lists[c].push(t);
        }
        lists
    }
}

/// Assigns each token to the anchor with the largest similarity; ties go
/// to the lowest anchor index.
pub fn categorize<T: Element>(m: &Tensor<T>, orientation: Orientation) -> Result<CategoryAssignment> {
    let [rows, cols] = *m.shape() else {
        return Err(Error::InvalidShape(format!("similarity map must be 2-D, got {:?}", m.shape())));
    };
    let d = m.data();
    let (anchors, tokens) = match orientation {
        Orientation::Coarse => (rows, cols),
        Orientation::Fine => (cols, rows),
    };
    let at = |a: usize, t: usize| match orientation {
        Orientation::Coarse => d[a * cols + t],
        Orientation::Fine => d[t * cols + a],
    };
    let assign = (0..tokens)
        .map(|t| {
            let mut best = 0;
            for a in 1..anchors {
                if at(a, t) > at(best, t) {
                    best = a;
                }
            }
            best
        })
        .collect();
    CategoryAssignment::new(assign, anchors)
}

/// Token order (categories in index order, raster order inside each) and
/// the contiguous sub-groups of at most `sub_size` tokens that attend
/// together. Sub-groups never span two categories.
pub fn sub_groups(assignment: &CategoryAssignment, sub_size: usize) -> Result<(Vec<usize>, Vec<Segment>)> {
    if sub_size == 0 {
        return Err(Error::Config("sub-category size must be positive".into()));
    }
    let mut order = Vec::with_capacity(assignment.num_tokens());
    let mut segments = Vec::new();
    for list in assignment.categories() {
        for chunk in list.chunks(sub_size) {
            let start = order.len();
            order.extend_from_slice(chunk);
            segments.push(Segment::square(start..order.len()));
        }
    }
    Ok((order, segments))
}

/// Category self-attention on a packed `[…, 3C]` query/key/value map whose
/// leading axes flatten to the assignment's tokens. Returns the attended
/// values with the input's leading shape and `C` channels, before any
/// output projection.
pub fn csa<T: Element>(
    qkv: &Var<T>,
    heads: usize,
    assignment: &CategoryAssignment,
    sub_size: usize,
) -> Result<Var<T>> {
    let c3 = *qkv.shape().last().ok_or_else(|| Error::InvalidShape("csa of a scalar".into()))?;
    let n = qkv.value().len() / c3;
    if n != assignment.num_tokens() {
        return Err(Error::Contract(format!(
            "assignment covers {} tokens, map has {n}",
            assignment.num_tokens()
        )));
    }
    let (order, segments) = sub_groups(assignment, sub_size)?;
    macs::record_category_pairs(segments.iter().map(|s| (s.q.len() * s.k.len()) as u64).sum());
    let mut inverse = vec![0; n];
    for (pos, &t) in order.iter().enumerate() {
        inverse[t] = pos;
    }
    let grouped = qkv.take_rows(order.into(), c3, &[n, c3])?;
    let (q, k, v) = split_qkv(&grouped)?;
    let out = segmented_attention(&q, &k, &v, heads, &segments, None, false)?.out;
    let mut shape = qkv.shape().to_vec();
    *shape.last_mut().unwrap() = c3 / 3;
    out.take_rows(inverse.into(), c3 / 3, &shape)
}
