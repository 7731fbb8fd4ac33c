//! Single-parent layer graphs with named inputs and multiple outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, shape_err, NnError, Result};
use crate::layer::{Layer, LayerSpec, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a value in the graph: inputs first, then one value per node in
/// insertion order.
pub type ValueId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    pub name: String,
    /// Per-sample shape (batch axis excluded).
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub(crate) name: String,
    pub(crate) parent: ValueId,
    pub(crate) layer: Layer<T>,
    pub(crate) shape: Vec<usize>,
}

/// Layer graph where every node has exactly one parent value. Fan-out is
/// allowed, and gradients arriving from several consumers are summed.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub(crate) inputs: Vec<InputSpec>,
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) outputs: Vec<ValueId>,
    mode: Mode,
}

pub struct NetworkBuilder<T> {
    net: Network<T>,
    seed: u64,
}

impl<T: Scalar> NetworkBuilder<T> {
    /// Weights of node `i` are drawn from stream `i` of a ChaCha8 generator
    /// seeded with `seed`.
    pub fn new(seed: u64) -> Self {
        Self {
            net: Network { inputs: Vec::new(), nodes: Vec::new(), outputs: Vec::new(), mode: Mode::Train },
            seed,
        }
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<ValueId> {
        if !self.net.nodes.is_empty() {
            return param_err("inputs must be declared before layers");
        }
        self.check_name(name)?;
        self.net.inputs.push(InputSpec { name: name.to_string(), shape: shape.to_vec() });
        Ok(self.net.inputs.len() - 1)
    }

    fn check_name(&self, name: &str) -> Result<()> {
        let taken = self.net.inputs.iter().any(|i| i.name == name) || self.net.nodes.iter().any(|n| n.name == name);
        if taken || name.is_empty() || name.contains(char::is_whitespace) {
            return param_err(format!("invalid or duplicate name '{name}'"));
        }
        Ok(())
    }

    pub fn add(&mut self, name: &str, parent: ValueId, spec: LayerSpec) -> Result<ValueId> {
        self.check_name(name)?;
        let in_shape = self.net.value_shape(parent)?.to_vec();
        let shape = spec.output_shape(&in_shape).map_err(|e| match e {
            NnError::Shape(m) => NnError::Shape(format!("node '{name}': {m}")),
            other => other,
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.net.nodes.len() as u64);
        self.net.nodes.push(Node { name: name.to_string(), parent, layer: Layer::init(spec, &mut rng), shape });
        Ok(self.net.inputs.len() + self.net.nodes.len() - 1)
    }

    /// Appends layers one after another, naming them `{prefix}{i}`.
    pub fn chain(&mut self, prefix: &str, parent: ValueId, specs: &[LayerSpec]) -> Result<ValueId> {
        let mut v = parent;
        for (i, s) in specs.iter().enumerate() {
            v = self.add(&format!("{prefix}{i}"), v, *s)?;
        }
        Ok(v)
    }

    pub fn output(&mut self, v: ValueId) -> Result<()> {
        self.net.value_shape(v)?;
        self.net.outputs.push(v);
        Ok(())
    }

    pub fn build(self) -> Result<Network<T>> {
        if self.net.inputs.is_empty() || self.net.outputs.is_empty() {
            return param_err("network needs at least one input and one output");
        }
        Ok(self.net)
    }
}

impl<T: Scalar> Network<T> {
    pub(crate) fn from_parts(inputs: Vec<InputSpec>, nodes: Vec<Node<T>>, outputs: Vec<ValueId>) -> Self {
        Self { inputs, nodes, outputs, mode: Mode::Train }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn inputs(&self) -> &[InputSpec] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[ValueId] {
        &self.outputs
    }

    pub fn node_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.name.as_str())
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.nodes.iter().map(|n| n.layer.spec()).collect()
    }

    /// Per-sample shape of a value.
    pub fn value_shape(&self, v: ValueId) -> Result<&[usize]> {
        let ni = self.inputs.len();
        if v < ni {
            Ok(&self.inputs[v].shape)
        } else if v - ni < self.nodes.len() {
            Ok(&self.nodes[v - ni].shape)
        } else {
            param_err(format!("unknown value id {v}"))
        }
    }

    pub fn value_id(&self, name: &str) -> Option<ValueId> {
        self.inputs
            .iter()
            .position(|i| i.name == name)
            .or_else(|| self.nodes.iter().position(|n| n.name == name).map(|p| p + self.inputs.len()))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.nodes.iter().flat_map(|n| n.layer.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.nodes.iter_mut().flat_map(|n| n.layer.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn clear_caches(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.layer.clear_cache());
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            inputs: self.inputs.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| Node { name: n.name.clone(), parent: n.parent, layer: n.layer.cast(), shape: n.shape.clone() })
                .collect(),
            outputs: self.outputs.clone(),
            mode: self.mode,
        }
    }

    /// Places independent networks side by side in one graph. Names gain the
    /// prefix `{prefix}{i}.`; inputs and outputs keep their relative order.
    pub fn disjoint_union(nets: &[Network<T>], prefix: &str) -> Result<Network<T>> {
        if nets.is_empty() {
            return param_err("union of zero networks");
        }
        let total_inputs: usize = nets.iter().map(|n| n.inputs.len()).sum();
        let mut inputs = Vec::with_capacity(total_inputs);
        let mut nodes = Vec::new();
        let mut outputs = Vec::new();
        let mut input_base = 0;
        let mut node_base = total_inputs;
        for (i, net) in nets.iter().enumerate() {
            let ni = net.inputs.len();
            let remap = |v: ValueId| if v < ni { input_base + v } else { node_base + v - ni };
            for inp in &net.inputs {
                inputs.push(InputSpec { name: format!("{prefix}{i}.{}", inp.name), shape: inp.shape.clone() });
            }
            for n in &net.nodes {
                nodes.push(Node {
                    name: format!("{prefix}{i}.{}", n.name),
                    parent: remap(n.parent),
                    layer: n.layer.clone(),
                    shape: n.shape.clone(),
                });
            }
            outputs.extend(net.outputs.iter().map(|&o| remap(o)));
            input_base += ni;
            node_base += net.nodes.len();
        }
        Ok(Network { inputs, nodes, outputs, mode: nets[0].mode })
    }

    /// Splits a graph into one network per input, each holding the nodes
    /// reachable from that input. Undoes [`Network::disjoint_union`] for
    /// single-input parts (name prefixes are stripped up to the first `.`).
    pub fn split_by_input(&self) -> Result<Vec<Network<T>>> {
        let ni = self.inputs.len();
        let mut owner = vec![0usize; ni + self.nodes.len()];
        for (i, o) in owner.iter_mut().enumerate().take(ni) {
            *o = i;
        }
        for (k, n) in self.nodes.iter().enumerate() {
            owner[ni + k] = owner[n.parent];
        }
        let strip = |s: &str| s.split_once('.').map(|(_, r)| r.to_string()).unwrap_or_else(|| s.to_string());
        let mut parts = Vec::with_capacity(ni);
        for part in 0..ni {
            let mut local = vec![usize::MAX; ni + self.nodes.len()];
            local[part] = 0;
            let mut nodes = Vec::new();
            for (k, n) in self.nodes.iter().enumerate() {
                if owner[ni + k] == part {
                    local[ni + k] = 1 + nodes.len();
                    nodes.push(Node {
                        name: strip(&n.name),
                        parent: local[n.parent],
                        layer: n.layer.clone(),
                        shape: n.shape.clone(),
                    });
                }
            }
            let outputs: Vec<ValueId> =
                self.outputs.iter().filter(|&&o| owner[o] == part).map(|&o| local[o]).collect();
            let input = InputSpec { name: strip(&self.inputs[part].name), shape: self.inputs[part].shape.clone() };
            parts.push(Network { inputs: vec![input], nodes, outputs, mode: self.mode });
        }
        Ok(parts)
    }

    fn check_inputs(&self, inputs: &[Tensor<T>]) -> Result<()> {
        if inputs.len() != self.inputs.len() {
            return shape_err(format!("expected {} inputs, got {}", self.inputs.len(), inputs.len()));
        }
        let batch = inputs[0].batch();
        for (x, spec) in inputs.iter().zip(&self.inputs) {
            if x.shape().first() != Some(&batch) || batch == 0 || x.shape()[1..] != spec.shape[..] {
                return shape_err(format!(
                    "input '{}' expects [batch, {:?}], got {:?}",
                    spec.name,
                    spec.shape,
                    x.shape()
                ));
            }
        }
        Ok(())
    }

    fn use_counts(&self) -> Vec<usize> {
        let mut uses = vec![0usize; self.inputs.len() + self.nodes.len()];
        for n in &self.nodes {
            uses[n.parent] += 1;
        }
        for &o in &self.outputs {
            uses[o] += 1;
        }
        uses
    }

    /// Runs every node in order; intermediate values are dropped once their
    /// last consumer has run.
    fn run<F>(&self, inputs: &[Tensor<T>], mut step: F) -> Result<Vec<Tensor<T>>>
    where
        F: FnMut(usize, &Tensor<T>) -> Result<Tensor<T>>,
    {
        self.check_inputs(inputs)?;
        let ni = self.inputs.len();
        let mut uses = self.use_counts();
        let mut values: Vec<Option<Tensor<T>>> = inputs.iter().cloned().map(Some).collect();
        values.resize(ni + self.nodes.len(), None);
        for i in 0..self.nodes.len() {
            let p = self.nodes[i].parent;
            let y = step(i, values[p].as_ref().expect("parent computed before child"))?;
            uses[p] -= 1;
            if uses[p] == 0 {
                values[p] = None;
            }
            values[ni + i] = Some(y);
        }
        Ok(self.outputs.iter().map(|&o| values[o].clone().expect("output computed")).collect())
    }

    /// Forward pass honouring the current mode and caching for backward.
    pub fn forward(&mut self, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let train = self.mode == Mode::Train;
        self.check_inputs(inputs)?;
        let ni = self.inputs.len();
        let mut uses = self.use_counts();
        let mut values: Vec<Option<Tensor<T>>> = inputs.iter().cloned().map(Some).collect();
        values.resize(ni + self.nodes.len(), None);
        for i in 0..self.nodes.len() {
            let p = self.nodes[i].parent;
            let y = self.nodes[i].layer.forward(values[p].as_ref().expect("parent computed before child"), train)?;
            uses[p] -= 1;
            if uses[p] == 0 {
                values[p] = None;
            }
            values[ni + i] = Some(y);
        }
        Ok(self.outputs.iter().map(|&o| values[o].clone().expect("output computed")).collect())
    }

    /// Inference-mode forward pass (running statistics, no dropout) without
    /// touching any state; safe to call concurrently.
    pub fn infer(&self, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        self.run(inputs, |i, x| self.nodes[i].layer.infer(x))
    }

    /// Backpropagates output gradients (`None` means zero) through the cached
    /// forward pass, accumulating parameter gradients. Returns the gradient
    /// with respect to each input.
    pub fn backward(&mut self, out_grads: &[Option<Tensor<T>>]) -> Result<Vec<Tensor<T>>> {
        if out_grads.len() != self.outputs.len() {
            return shape_err(format!("expected {} output gradients, got {}", self.outputs.len(), out_grads.len()));
        }
        let ni = self.inputs.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; ni + self.nodes.len()];
        for (&o, g) in self.outputs.iter().zip(out_grads) {
            if let Some(g) = g {
                accumulate(&mut grads[o], g)?;
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[ni + i].take() else { continue };
            let dx = self.nodes[i].layer.backward(&g)?;
            accumulate(&mut grads[self.nodes[i].parent], &dx)?;
        }
        let mut out = Vec::with_capacity(ni);
        for (i, spec) in self.inputs.iter().enumerate() {
            out.push(match grads[i].take() {
                Some(g) => g,
                None => {
                    let batch = out_grads.iter().flatten().next().map(|g| g.batch()).unwrap_or(0);
                    let mut shape = vec![batch];
                    shape.extend_from_slice(&spec.shape);
                    Tensor::zeros(&shape)
                }
            });
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: &Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(g),
        None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Activation;

    fn branched() -> Network<f64> {
        let mut b = NetworkBuilder::<f64>::new(3);
        let x = b.input("x", &[8, 2]).unwrap();
        let c = b.add("conv", x, LayerSpec::conv(2, 4, 3)).unwrap();
        let f1 = b.add("flat_a", c, LayerSpec::Flatten).unwrap();
        let h1 = b.add("head_a", f1, LayerSpec::dense(32, 1)).unwrap();
        let p = b.add("pool", c, LayerSpec::MaxPool1d { size: 2 }).unwrap();
        let f2 = b.add("flat_b", p, LayerSpec::Flatten).unwrap();
        let h2 = b.add("head_b", f2, LayerSpec::dense(16, 2)).unwrap();
        b.output(h1).unwrap();
        b.output(h2).unwrap();
        b.build().unwrap()
    }

    #[test]
    fn builder_rejects_bad_graphs() {
        let mut b = NetworkBuilder::<f32>::new(0);
        let x = b.input("x", &[4]).unwrap();
        assert!(b.add("d", x, LayerSpec::dense(3, 1)).is_err());
        b.add("d", x, LayerSpec::dense(4, 1)).unwrap();
        assert!(b.add("d", x, LayerSpec::dense(4, 1)).is_err());
        assert!(b.add("e", 99, LayerSpec::Flatten).is_err());
        assert!(NetworkBuilder::<f32>::new(0).build().is_err());
    }

    #[test]
    fn forward_and_infer_agree_without_stochastic_layers() {
        let mut net = branched();
        let x = Tensor::from_f64(&[3, 8, 2], &(0..48).map(|v| (v as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        let a = net.forward(std::slice::from_ref(&x)).unwrap();
        let b = net.infer(&[x]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].shape(), &[3, 1]);
        assert_eq!(a[1].shape(), &[3, 2]);
    }

    #[test]
    fn fan_out_sums_gradients() {
        let mut net = branched();
        let x = Tensor::from_f64(&[2, 8, 2], &(0..32).map(|v| v as f64 * 0.1 - 1.0).collect::<Vec<_>>()).unwrap();
        net.forward(std::slice::from_ref(&x)).unwrap();
        let g1 = Tensor::filled(&[2, 1], 1.0);
        let g2 = Tensor::filled(&[2, 2], 0.5);
        let both = net.clone().backward(&[Some(g1.clone()), Some(g2.clone())]).unwrap();
        let only1 = net.clone().backward(&[Some(g1), None]).unwrap();
        let only2 = net.clone().backward(&[None, Some(g2)]).unwrap();
        for i in 0..both[0].len() {
            let s = only1[0].data()[i] + only2[0].data()[i];
            assert!((both[0].data()[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = branched();
        let b = branched();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.value, q.value);
        }
        let mut c = NetworkBuilder::<f64>::new(4);
        let x = c.input("x", &[8, 2]).unwrap();
        c.add("conv", x, LayerSpec::conv(2, 4, 3)).unwrap();
        let c = c.nodes_for_test();
        assert_ne!(c[0].layer.params()[0].value, a.params()[0].value);
    }

    #[test]
    fn param_count_and_specs() {
        let net = branched();
        assert_eq!(net.param_count(), (6 * 4 + 4) + (32 + 1) + (16 * 2 + 2));
        assert_eq!(net.layer_specs()[0], LayerSpec::conv(2, 4, 3));
        assert_eq!(net.value_id("pool"), Some(4));
    }

    #[test]
    fn infer_mode_forward_uses_running_stats() {
        let mut b = NetworkBuilder::<f64>::new(0);
        let x = b.input("x", &[3]).unwrap();
        let n = b.add("bn", x, LayerSpec::batch_norm(3)).unwrap();
        let o = b.add("act", n, LayerSpec::Activation(Activation::Linear)).unwrap();
        b.output(o).unwrap();
        let mut net = b.build().unwrap();
        net.set_mode(Mode::Infer);
        let x = Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let y = net.forward(std::slice::from_ref(&x)).unwrap();
        assert_eq!(y, net.infer(&[x]).unwrap());
    }

    #[test]
    fn union_and_split_round_trip() {
        let a = branched();
        let b = NetworkBuilder::<f64>::new(9);
        let mut b = b;
        let x = b.input("x", &[8, 2]).unwrap();
        let f = b.add("flat", x, LayerSpec::Flatten).unwrap();
        let d = b.add("dense", f, LayerSpec::dense(16, 3)).unwrap();
        b.output(d).unwrap();
        let b = b.build().unwrap();
        let u = Network::disjoint_union(&[a.clone(), b.clone()], "part").unwrap();
        assert_eq!(u.inputs().len(), 2);
        assert_eq!(u.outputs().len(), 3);
        assert_eq!(u.param_count(), a.param_count() + b.param_count());
        let parts = u.split_by_input().unwrap();
        let x = Tensor::from_f64(&[2, 8, 2], &(0..32).map(|v| v as f64 * 0.05).collect::<Vec<_>>()).unwrap();
        assert_eq!(parts[0].infer(std::slice::from_ref(&x)).unwrap(), a.infer(std::slice::from_ref(&x)).unwrap());
        assert_eq!(parts[1].infer(std::slice::from_ref(&x)).unwrap(), b.infer(std::slice::from_ref(&x)).unwrap());
        assert_eq!(parts[0].node_names().collect::<Vec<_>>(), a.node_names().collect::<Vec<_>>());
    }

    impl<T: Scalar> NetworkBuilder<T> {
        fn nodes_for_test(self) -> Vec<Node<T>> {
            self.net.nodes
        }
    }
}
