use relchain_tensor::Tensor;

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::kb::NUM_RELATIONS;

/// A minibatch of fact graphs padded to a common node count `N` and laid out
/// as `B * N` flat node rows (`row = b * N + entity`).
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub batch_size: usize,
    pub nodes_per_graph: usize,
    /// Embedding slot of every node row (0 for padding rows).
    pub node_slots: Vec<usize>,
    /// 1 for real nodes, 0 for padding.
    pub node_mask: Vec<f64>,
    /// Each fact yields `src -> dst` with its relation and the reverse edge
    /// with the `inv-` relation.
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    /// Relation index of every edge, `0..NUM_RELATIONS`.
    pub edge_rel: Vec<usize>,
    /// Flat node rows of `(head, tail)` per graph.
    pub query_index: Vec<(usize, usize)>,
    /// Real nodes per graph.
    pub node_counts: Vec<usize>,
}

impl GraphBatch {
    pub fn from_batch(batch: &Batch) -> Result<GraphBatch> {
        GraphBatch::padded(batch, 0)
    }

    /// Like [`from_batch`](Self::from_batch) with at least `min_nodes` rows
    /// per graph.
    pub fn padded(batch: &Batch, min_nodes: usize) -> Result<GraphBatch> {
        let bs = batch.len();
        let n = batch
            .items
            .iter()
            .map(|i| i.num_entities())
            .max()
            .unwrap_or(0)
            .max(min_nodes);
        let mut g = GraphBatch {
            batch_size: bs,
            nodes_per_graph: n,
            node_slots: vec![0; bs * n],
            node_mask: vec![0.0; bs * n],
            edge_src: Vec::new(),
            edge_dst: Vec::new(),
            edge_rel: Vec::new(),
            query_index: Vec::with_capacity(bs),
            node_counts: Vec::with_capacity(bs),
        };
        for (b, inst) in batch.items.iter().enumerate() {
            let count = inst.num_entities();
            for e in 0..count {
                g.node_slots[b * n + e] = batch.slot(b, e)?;
                g.node_mask[b * n + e] = 1.0;
            }
            for f in &inst.facts {
                let (s, d) = (b * n + f.src, b * n + f.dst);
                g.edge_src.extend([s, d]);
                g.edge_dst.extend([d, s]);
                g.edge_rel.extend([f.rel.index(), f.rel.invert().index()]);
            }
            let (h, t) = inst.query;
            if h >= count || t >= count {
                return Err(Error::Batch(format!(
                    "query ({h}, {t}) outside the {count} nodes of graph {b}"
                )));
            }
            g.query_index.push((b * n + h, b * n + t));
            g.node_counts.push(count);
        }
        Ok(g)
    }

    pub fn num_rows(&self) -> usize {
        self.batch_size * self.nodes_per_graph
    }

    pub fn num_edges(&self) -> usize {
        self.edge_src.len()
    }

    /// One-hot relation of every edge, `[E, NUM_RELATIONS]`.
    pub fn edge_attr(&self) -> Tensor {
        let mut data = vec![0.0; self.num_edges() * NUM_RELATIONS];
        for (e, &r) in self.edge_rel.iter().enumerate() {
            data[e * NUM_RELATIONS + r] = 1.0;
        }
        Tensor::new(&[self.num_edges(), NUM_RELATIONS], data).expect("edge attr shape")
    }

    pub fn in_degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_rows()];
        for &d in &self.edge_dst {
            deg[d] += 1;
        }
        deg
    }

    /// Graph index of every node row.
    pub fn node_graph(&self) -> Vec<usize> {
        (0..self.num_rows()).map(|r| r / self.nodes_per_graph.max(1)).collect()
    }
}
