use super::graph::CompiledGraph;
use super::layers;
use super::Tensor;

/// Result of a reverse sweep: gradients w.r.t. every graph input and,
/// optionally, the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub inputs: Vec<Tensor>,
    pub params: Option<Vec<f64>>,
}

/// Reverse sweep over `graph` given cached node values and seed gradients.
pub(crate) fn sweep(
    graph: &CompiledGraph,
    weights: &[f64],
    nodes: &[Tensor],
    seeds: Vec<(usize, Tensor)>,
    with_params: bool,
) -> Gradients {
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.num_nodes()];
    for (id, seed) in seeds {
        accumulate(&mut grads[id], seed);
    }
    let mut param_grads = with_params.then(|| vec![0.0; graph.param_count()]);
    let n_inputs = graph.num_inputs();
    for layer in (0..graph.spec().layers.len()).rev() {
        let id = n_inputs + layer;
        let Some(grad_out) = grads[id].take() else {
            continue;
        };
        let kind = &graph.spec().layers[layer].kind;
        let wiring = graph.layer_wiring(layer);
        let inputs: Vec<&Tensor> = wiring.iter().map(|&i| &nodes[i]).collect();
        let range = graph.param_range(layer);
        let gp = param_grads.as_mut().map(|g| &mut g[range.clone()]);
        let input_grads =
            layers::backward(kind, &inputs, &nodes[id], &grad_out, &weights[range], gp);
        for (&src, g) in wiring.iter().zip(input_grads) {
            accumulate(&mut grads[src], g);
        }
    }
    let inputs = (0..n_inputs)
        .map(|i| {
            grads[i]
                .take()
                .unwrap_or_else(|| Tensor::zeros(graph.shape(i)))
        })
        .collect();
    Gradients {
        inputs,
        params: param_grads,
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
