//! Dual-stream transformer with journey-transported attention.
//!
//! The language stream holds sentence views and the structured stream holds
//! facts. Layer groups run in configured order; cross groups let language
//! tokens attend over structured memory, either the structured stream of the
//! same batch or a frozen [`Repository`].

mod config;
mod forward;
mod params;

pub use config::{LayerGroupConfig, ModelConfig, Stream};
pub use forward::{
    bind_params, cross_attend_position_agnostic, cross_attend_position_agnostic_with_attention, forward, AttentionMap, Batch, ForwardOptions, ForwardOutput,
    Memory, ParamVars, TokenLabel, TokenRow,
};
pub(crate) use forward::relation_ops_on_tape;
pub use params::{
    checkpoint_bytes, layer_prefix, load_checkpoint, parse_checkpoint, relation_param, save_checkpoint,
    slot_families, slot_param, Parameters, CHECKPOINT_MAGIC, POSITION_FAMILY,
};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar, Tape, Vector};
use crate::repository::{encode_instance_vectors, Repository};
use crate::schema::StructuredInstance;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = Parameters::init(&config)?;
        Ok(Self { config, params })
    }

    /// Forward pass on a fresh tape. Returns the tape so callers can read
    /// node values.
    pub fn run(&self, batch: &Batch, memory: Memory<'_, T>, options: ForwardOptions) -> Result<(Tape<T>, ForwardOutput<T>)> {
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, &self.params);
        let out = forward(&mut tape, &vars, &self.config, batch, memory, options)?;
        Ok((tape, out))
    }

    /// Final output vector of every token, in batch order.
    pub fn token_outputs(&self, batch: &Batch, memory: Memory<'_, T>) -> Result<Vec<Vec<Vector<T>>>> {
        let (tape, out) = self.run(batch, memory, ForwardOptions::default())?;
        Ok(out
            .rows
            .iter()
            .map(|rows| {
                rows.iter()
                    .map(|r| {
                        let v = out.stream_var(r.stream).expect("stream present");
                        tape.value(v).row_vector(r.row)
                    })
                    .collect()
            })
            .collect())
    }

    /// Encodes structured `instances` into a repository using the memory view
    /// and key/value projections of the first cross layer, so frozen
    /// retrieval sees the same keys as in-batch cross attention.
    pub fn build_repository(&self, instances: &[StructuredInstance], entities: &BTreeSet<usize>) -> Result<Repository<T>> {
        let layer = self
            .cross_layers()
            .first()
            .copied()
            .ok_or_else(|| Error::Config("model has no cross layer to build a repository for".into()))?;
        let structured: Vec<StructuredInstance> = instances.iter().filter(|i| !i.kind.is_language()).cloned().collect();
        let d = self.config.d_model;
        let mut repo = Repository::new(d, d);
        if structured.is_empty() {
            return Ok(repo);
        }
        let batch = Batch::new(structured, entities);
        let (tape, out) = self.run(&batch, Memory::InBatch, ForwardOptions::default())?;
        let mem = tape.value(out.cross_memory[0]);
        let pre = layer_prefix(layer);
        let wk = self.params.get(&format!("{pre}.wk"))?.transpose();
        let wv = self.params.get(&format!("{pre}.wv"))?.transpose();
        let table = self.params.operator_table(&self.config)?;
        for (inst, rows) in batch.instances.iter().zip(&out.rows) {
            let xs: Vec<Vector<T>> = rows.iter().map(|r| mem.row_vector(r.row)).collect();
            repo.extend(encode_instance_vectors(inst, &xs, &wk, &wv, &table)?)?;
        }
        Ok(repo)
    }

    /// Global indices of cross layers.
    pub fn cross_layers(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut layer = 0;
        for g in &self.config.layer_groups {
            for _ in 0..g.layers {
                if g.stream == Stream::Cross {
                    out.push(layer);
                }
                layer += 1;
            }
        }
        out
    }

    pub fn embeddings(&self) -> Result<&Matrix<T>> {
        self.params.get("embed")
    }
}
