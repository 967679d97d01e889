use super::backward::{self, Gradients};
use super::graph::{CompiledGraph, GraphSpec};
use super::layers;
use super::Tensor;
use crate::error::{Error, Result};

/// Which logit(s) a gradient is taken of. `All` differentiates the sum of
/// every logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSelector {
    Index(usize),
    All,
}

/// Every node value from one forward pass, indexed like the compiled graph.
#[derive(Debug, Clone)]
pub struct Activations {
    nodes: Vec<Tensor>,
    names: Vec<String>,
}

impl Activations {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.nodes[i])
    }

    pub fn by_id(&self, id: usize) -> &Tensor {
        &self.nodes[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.nodes)
    }

    pub(crate) fn nodes(&self) -> &[Tensor] {
        &self.nodes
    }
}

/// A compiled graph plus its weights. Immutable once built, so one model can
/// serve concurrent inferences; each call allocates its own workspace.
#[derive(Debug, Clone)]
pub struct Model {
    graph: CompiledGraph,
    weights: Vec<f64>,
}

impl Model {
    pub fn new(graph: &GraphSpec, weights: Vec<f64>) -> Result<Self> {
        let graph = graph.compile()?;
        if weights.len() != graph.param_count() {
            return Err(Error::MissingWeights {
                expected: graph.param_count(),
                got: weights.len(),
            });
        }
        Ok(Self { graph, weights })
    }

    pub fn graph(&self) -> &CompiledGraph {
        &self.graph
    }

    pub fn spec(&self) -> &GraphSpec {
        self.graph.spec()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Activations> {
        if inputs.len() != self.graph.num_inputs() {
            return Err(Error::ShapeMismatch(format!(
                "graph takes {} inputs, got {}",
                self.graph.num_inputs(),
                inputs.len()
            )));
        }
        let mut nodes = Vec::with_capacity(self.graph.num_nodes());
        for (i, input) in inputs.iter().enumerate() {
            if input.shape() != self.graph.shape(i) {
                return Err(Error::ShapeMismatch(format!(
                    "input `{}` expects {:?}, got {:?}",
                    self.graph.node_name(i),
                    self.graph.shape(i),
                    input.shape()
                )));
            }
            nodes.push((*input).clone());
        }
        for (l, layer) in self.graph.spec().layers.iter().enumerate() {
            let id = self.graph.num_inputs() + l;
            let ins: Vec<&Tensor> = self
                .graph
                .layer_wiring(l)
                .iter()
                .map(|&i| &nodes[i])
                .collect();
            let out = layers::forward(
                &layer.kind,
                &ins,
                &self.weights[self.graph.param_range(l)],
                self.graph.shape(id),
            );
            nodes.push(out);
        }
        let names = (0..nodes.len())
            .map(|i| self.graph.node_name(i).to_string())
            .collect();
        Ok(Activations { nodes, names })
    }

    /// Primary output for a single-input graph.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let acts = self.forward(&[input])?;
        Ok(acts.nodes[self.graph.primary_output()].clone())
    }

    /// Reverse sweep from arbitrary seed gradients (node id, d loss / d node).
    pub fn backward(
        &self,
        acts: &Activations,
        seeds: Vec<(usize, Tensor)>,
        with_params: bool,
    ) -> Gradients {
        backward::sweep(&self.graph, &self.weights, acts.nodes(), seeds, with_params)
    }

    /// Seed gradient selecting one logit, or all of them.
    pub fn logit_seed(&self, selector: OutputSelector) -> Result<Tensor> {
        let shape = self.graph.shape(self.graph.logits_id());
        let n: usize = shape.iter().product();
        match selector {
            OutputSelector::All => Ok(Tensor::filled(shape, 1.0)),
            OutputSelector::Index(i) if i < n => {
                let mut seed = Tensor::zeros(shape);
                seed.data_mut()[i] = 1.0;
                Ok(seed)
            }
            OutputSelector::Index(index) => Err(Error::BadClassIndex {
                index,
                num_classes: n,
            }),
        }
    }

    /// d logit_i / d image for the image input (input 0).
    pub fn grad_input(&self, input: &Tensor, selector: OutputSelector) -> Result<Tensor> {
        let seed = self.logit_seed(selector)?;
        let acts = self.forward(&[input])?;
        let mut g = self.backward(&acts, vec![(self.graph.logits_id(), seed)], false);
        Ok(g.inputs.swap_remove(0))
    }
}

/// One-shot forward pass over an uncompiled graph.
pub fn forward(graph: &GraphSpec, weights: &[f64], input: &Tensor) -> Result<Activations> {
    Model::new(graph, weights.to_vec())?.forward(&[input])
}

/// One-shot input gradient over an uncompiled graph.
pub fn grad_input(
    graph: &GraphSpec,
    weights: &[f64],
    input: &Tensor,
    selector: OutputSelector,
) -> Result<Tensor> {
    Model::new(graph, weights.to_vec())?.grad_input(input, selector)
}
