//! Joint behavior-item token embedding with learned absolute positions.
//!
//! A token is `item_row + behavior_row + position_row`; padding slots are
//! zero vectors. Category rows are only consumed by the transition encoder.

use crate::context::RowContext;
use crate::dataio::Batch;
use crate::numerics::init::{named_rng, normal};
use crate::numerics::{ParameterStore, Real, Tape, Tensor, Var};

pub const ITEM: &str = "embed.item";
pub const BEHAVIOR: &str = "embed.behavior";
pub const CATEGORY: &str = "embed.category";
pub const POSITION: &str = "embed.position";

/// Row counts and widths of the embedding tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub items: usize,
    pub behaviors: usize,
    pub categories: usize,
    pub positions: usize,
    pub d: usize,
    pub category_dim: usize,
}

/// `ceil(d / 4)`
pub fn category_dim(d: usize) -> usize {
    d.div_ceil(4)
}

impl EmbeddingTables {
    pub fn shapes(&self, with_category: bool) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            (ITEM.to_string(), vec![self.items, self.d]),
            (BEHAVIOR.to_string(), vec![self.behaviors, self.d]),
            (POSITION.to_string(), vec![self.positions, self.d]),
        ];
        if with_category {
            out.push((CATEGORY.to_string(), vec![self.categories, self.category_dim]));
        }
        out
    }

    pub fn register<T: Real>(&self, store: &mut ParameterStore<T>, seed: u64, std: f64, with_category: bool) {
        for (name, shape) in self.shapes(with_category) {
            let t = normal(&shape, std, &mut named_rng(seed, &name));
            store.insert(name, t);
        }
    }
}

/// Gathered rows for one sequence, each `[L, d]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenRows {
    pub items: Var,
    pub behaviors: Var,
    pub tokens: Var,
}

pub fn embed_row<T: Real>(tape: &mut Tape<'_, T>, ctx: &RowContext) -> TokenRows {
    let item_table = tape.param(ITEM);
    let behavior_table = tape.param(BEHAVIOR);
    let position_table = tape.param(POSITION);
    let items = tape.gather(item_table, ctx.items.clone());
    let behaviors = tape.gather(behavior_table, ctx.behaviors.clone());
    let positions = tape.gather(position_table, ctx.positions.clone());
    let fused = tape.add(items, behaviors);
    let tokens = tape.add(fused, positions);
    TokenRows { items, behaviors, tokens }
}

/// Token embeddings for a whole batch as `[rows, L, d]`.
pub fn embed_sequence<T: Real>(batch: &Batch, store: &ParameterStore<T>) -> Tensor<T> {
    let d = store.value(ITEM).cols();
    let mut data = Vec::with_capacity(batch.rows() * batch.len * d);
    let bits = vec![0u8; store.value(BEHAVIOR).rows()];
    for r in 0..batch.rows() {
        let ctx = RowContext::new(&batch.row(r), &bits);
        let mut tape = Tape::new(store);
        let rows = embed_row(&mut tape, &ctx);
        data.extend_from_slice(tape.value(rows.tokens).data());
    }
    Tensor::from_vec(&[batch.rows(), batch.len, d], data)
}
