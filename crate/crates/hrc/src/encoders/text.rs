//! Instruction encoding: hashed token embeddings, mean-pooled.
//!
//! Tokens are lowercased whitespace splits, each hashed (FNV-1a) into a
//! fixed-size embedding table. Mean pooling makes the result order
//! independent; determinism follows from the hash and the table.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, NodeId, ParamStore};

/// 64-bit FNV-1a. Stable across platforms and releases, unlike the
/// standard library's default hasher.
pub fn fnv1a(token: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in token.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub struct TextEncoder {
    prefix: String,
    slots: usize,
    width: usize,
}

impl TextEncoder {
    pub const SLOTS: usize = 4096;

    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        let enc = TextEncoder { prefix: prefix.to_string(), slots: Self::SLOTS, width };
        ensure_param(
            store,
            &format!("{prefix}.embed"),
            &[enc.slots, width],
            Init::Uniform(1.0 / (width as f64).sqrt()),
        )?;
        Ok(enc)
    }

    /// Hash an instruction into embedding-table slots.
    pub fn slot_indices(&self, instruction: &str) -> Result<Vec<usize>> {
        let tokens: Vec<&str> = instruction.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::InvalidInstruction("empty instruction".into()));
        }
        Ok(tokens
            .iter()
            .map(|t| (fnv1a(&t.to_lowercase()) % self.slots as u64) as usize)
            .collect())
    }

    /// Mean of the hashed token embeddings, shape `[width]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, instruction: &str) -> Result<NodeId> {
        let indices = self.slot_indices(instruction)?;
        let table = g.param(store, &format!("{}.embed", self.prefix))?;
        let rows = g.embed_rows(table, &indices)?;
        Ok(g.mean_over_rows(rows))
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

pub(crate) fn ensure_param(
    store: &mut ParamStore,
    name: &str,
    shape: &[usize],
    init: Init,
) -> Result<()> {
    if store.contains(name) {
        let existing = store.get(name)?;
        if existing.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                existing.shape(),
                shape
            )));
        }
        Ok(())
    } else {
        store.register(name, shape, init)
    }
}
