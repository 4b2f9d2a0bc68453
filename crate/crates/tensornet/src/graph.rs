use crate::layer::{Aux, Layer};
use crate::{Result, Tensor, TensorNetError};
use rand::Rng;
use std::collections::BTreeMap;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub name: String,
    pub layer: Layer,
    pub inputs: Vec<NodeId>,
    pub frozen: bool,
    pub out_shape: Vec<usize>, // per-sample
}

/// An ordered DAG of layers with named inputs and a single output node.
///
/// Node order is topological by construction: a node may only consume nodes
/// created before it.
#[derive(Clone, Debug)]
pub struct NetModel {
    pub(crate) nodes: Vec<Node>,
    pub(crate) inputs: BTreeMap<String, NodeId>,
    pub(crate) output: NodeId,
    /// Bumped on every mutation; used to invalidate stale forward caches.
    pub(crate) version: u64,
}

/// Activations (and batch-norm statistics) captured by one forward pass.
pub struct ForwardCache {
    values: Vec<Tensor>,
    aux: Vec<Aux>,
    mode: Mode,
    model_version: u64,
}

impl ForwardCache {
    pub fn output(&self, model: &NetModel) -> &Tensor {
        &self.values[model.output]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Activation of a named node, if present.
    pub fn value_of(&self, model: &NetModel, name: &str) -> Option<&Tensor> {
        model
            .nodes
            .iter()
            .position(|n| n.name == name)
            .map(|id| &self.values[id])
    }
}

/// Gradients produced by one reverse pass.
pub struct Gradients {
    /// Per node: one tensor per parameter slot (empty for weightless layers).
    pub params: Vec<Vec<Tensor>>,
    /// Gradients w.r.t. each named graph input.
    pub inputs: BTreeMap<String, Tensor>,
}

impl NetModel {
    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(|s| s.as_str())
    }

    pub fn input_shape(&self, name: &str) -> Option<&[usize]> {
        self.inputs
            .get(name)
            .map(|&id| self.nodes[id].out_shape.as_slice())
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].out_shape
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.nodes[id].name
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mark every parameterized node as frozen (excluded from training).
    pub fn freeze_all(&mut self) {
        self.version += 1;
        for node in &mut self.nodes {
            node.frozen = true;
        }
    }

    pub fn is_frozen(&self, id: NodeId) -> bool {
        self.nodes[id].frozen
    }

    /// Flat list of trainable parameter tensors as (node, slot) handles.
    pub fn trainable_slots(&self) -> Vec<(NodeId, usize)> {
        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.frozen {
                continue;
            }
            for slot in 0..node.layer.params().len() {
                out.push((id, slot));
            }
        }
        out
    }

    pub fn param(&self, id: NodeId, slot: usize) -> &Tensor {
        self.nodes[id].layer.params()[slot]
    }

    /// Mutable access to one parameter; bumps the model version.
    pub fn param_mut(&mut self, id: NodeId, slot: usize) -> &mut Tensor {
        self.version += 1;
        self.nodes[id]
            .layer
            .params_mut()
            .into_iter()
            .nth(slot)
            .expect("valid parameter slot")
    }

    /// Apply an update to every trainable parameter in slot order.
    pub fn update_trainable(&mut self, mut f: impl FnMut(usize, &mut Tensor)) {
        self.version += 1;
        let mut flat = 0;
        for node in &mut self.nodes {
            if node.frozen {
                continue;
            }
            for p in node.layer.params_mut() {
                f(flat, p);
                flat += 1;
            }
        }
    }

    /// Visit every parameter tensor (trainable or not), e.g. for checksums.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        for node in &self.nodes {
            for p in node.layer.params() {
                f(&node.name, p);
            }
        }
    }

    /// Forward pass in eval mode; the model is not mutated.
    pub fn forward(&self, inputs: &BTreeMap<String, Tensor>) -> Result<(Tensor, ForwardCache)> {
        let (values, aux) = self.run(inputs, Mode::Eval)?;
        let out = values[self.output].clone();
        Ok((
            out,
            ForwardCache {
                values,
                aux,
                mode: Mode::Eval,
                model_version: self.version,
            },
        ))
    }

    /// Forward pass that, in train mode, also folds the computed batch
    /// statistics into the batch-norm running buffers.
    pub fn forward_mut(
        &mut self,
        inputs: &BTreeMap<String, Tensor>,
        mode: Mode,
    ) -> Result<(Tensor, ForwardCache)> {
        if mode == Mode::Eval {
            return self.forward(inputs);
        }
        self.version += 1;
        let (values, aux) = self.run(inputs, mode)?;
        for (id, a) in aux.iter().enumerate() {
            if let Aux::BatchNorm {
                mean,
                var,
                batch_stats: true,
            } = a
            {
                if let Layer::BatchNorm {
                    running_mean,
                    running_var,
                    momentum,
                    ..
                } = &mut self.nodes[id].layer
                {
                    let mom = *momentum;
                    let rm = running_mean.data_mut();
                    let rv = running_var.data_mut();
                    for f in 0..mean.len() {
                        rm[f] = mom * rm[f] + (1.0 - mom) * mean[f];
                        rv[f] = mom * rv[f] + (1.0 - mom) * var[f];
                    }
                }
            }
        }
        let out = values[self.output].clone();
        Ok((
            out,
            ForwardCache {
                values,
                aux,
                mode,
                model_version: self.version,
            },
        ))
    }

    fn run(&self, inputs: &BTreeMap<String, Tensor>, mode: Mode) -> Result<(Vec<Tensor>, Vec<Aux>)> {
        let mut batch = None;
        for (name, &id) in &self.inputs {
            let t = inputs
                .get(name)
                .ok_or_else(|| TensorNetError::UnknownInput(name.clone()))?;
            let want = &self.nodes[id].out_shape;
            if t.sample_shape() != want.as_slice() {
                return Err(TensorNetError::ShapeMismatch {
                    context: format!("input `{name}`"),
                    expected: want.clone(),
                    got: t.shape().to_vec(),
                });
            }
            match batch {
                None => batch = Some(t.batch()),
                Some(n) if n == t.batch() => {}
                Some(n) => {
                    return Err(TensorNetError::ShapeMismatch {
                        context: format!("input `{name}` batch"),
                        expected: vec![n],
                        got: vec![t.batch()],
                    })
                }
            }
        }
        let batch = batch.unwrap_or(0);

        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut aux: Vec<Aux> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let value = if let Layer::Input { .. } = node.layer {
                let name = self
                    .inputs
                    .iter()
                    .find(|(_, &nid)| nid == id)
                    .map(|(n, _)| n.clone())
                    .expect("input node registered");
                aux.push(Aux::None);
                inputs[&name].clone()
            } else {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                // frozen batch-norm keeps using running statistics even in
                // train mode so downstream features stay deterministic
                let train_stats = mode == Mode::Train && !node.frozen;
                let (v, a) = node.layer.forward(&ins, train_stats)?;
                aux.push(a);
                // reshape nodes record a non-flat output shape on a flatten
                // layer; normalize the produced tensor to the declared shape
                let mut full_shape = Vec::with_capacity(node.out_shape.len() + 1);
                full_shape.push(batch);
                full_shape.extend_from_slice(&node.out_shape);
                v.reshaped(&full_shape)?
            };
            if !value.is_finite() {
                return Err(TensorNetError::NonFiniteActivation {
                    node: node.name.clone(),
                });
            }
            values.push(value);
        }
        Ok((values, aux))
    }

    /// Reverse pass from `output_grad` through the cached forward, producing
    /// exact gradients w.r.t. every parameter and every named input.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Tensor) -> Result<Gradients> {
        if cache.model_version != self.version {
            return Err(TensorNetError::StaleCache);
        }
        if output_grad.shape() != cache.values[self.output].shape() {
            return Err(TensorNetError::ShapeMismatch {
                context: "backward output_grad".into(),
                expected: cache.values[self.output].shape().to_vec(),
                got: output_grad.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(output_grad.clone());
        let mut param_grads: Vec<Vec<Tensor>> = vec![Vec::new(); self.nodes.len()];

        for id in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[id].take() else {
                // node does not influence the output
                param_grads[id] = self.nodes[id]
                    .layer
                    .params()
                    .iter()
                    .map(|p| Tensor::zeros(p.shape()))
                    .collect();
                continue;
            };
            let node = &self.nodes[id];
            if let Layer::Input { .. } = node.layer {
                grads[id] = Some(gy);
                continue;
            }
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &cache.values[i]).collect();
            let (pg, ig) = node
                .layer
                .backward(&ins, &cache.values[id], &cache.aux[id], &gy)?;
            param_grads[id] = pg;
            for (src, g) in node.inputs.iter().zip(ig) {
                match &mut grads[*src] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }

        let mut input_grads = BTreeMap::new();
        for (name, &id) in &self.inputs {
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(cache.values[id].shape()));
            input_grads.insert(name.clone(), g);
        }
        Ok(Gradients {
            params: param_grads,
            inputs: input_grads,
        })
    }

    /// Gradients for trainable slots, flattened in `trainable_slots` order.
    pub fn flatten_trainable_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.trainable_slots()
            .iter()
            .map(|&(id, slot)| grads.params[id][slot].clone())
            .collect()
    }
}

/// Incremental graph constructor; shape errors surface at build time.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    consumed: Vec<usize>,
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
            consumed: Vec::new(),
        }
    }

    fn push(&mut self, name: String, layer: Layer, inputs: Vec<NodeId>) -> Result<NodeId> {
        let in_shapes: Vec<&[usize]> = inputs
            .iter()
            .map(|&id| self.nodes[id].out_shape.as_slice())
            .collect();
        let out_shape = layer.out_shape(&in_shapes, &name)?;
        for &id in &inputs {
            self.consumed[id] += 1;
        }
        self.nodes.push(Node {
            name,
            layer,
            inputs,
            frozen: false,
            out_shape,
        });
        self.consumed.push(0);
        Ok(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(TensorNetError::ConfigError(format!(
                "duplicate input `{name}`"
            )));
        }
        let id = self.push(
            name.to_string(),
            Layer::Input {
                shape: shape.to_vec(),
            },
            vec![],
        )?;
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// He-normal initialized dense layer (for ELU/ReLU trunks).
    pub fn dense<R: Rng>(
        &mut self,
        name: &str,
        x: NodeId,
        out: usize,
        rng: &mut R,
    ) -> Result<NodeId> {
        let inp = self.feature_dim(x)?;
        let std = (2.0 / inp as f64).sqrt();
        let w = Tensor::randn(&[out, inp], std, rng);
        let b = Tensor::zeros(&[out]);
        self.push(name.to_string(), Layer::Dense { w, b }, vec![x])
    }

    /// Xavier-initialized dense layer (for output heads).
    pub fn dense_xavier<R: Rng>(
        &mut self,
        name: &str,
        x: NodeId,
        out: usize,
        rng: &mut R,
    ) -> Result<NodeId> {
        let inp = self.feature_dim(x)?;
        let std = (1.0 / inp as f64).sqrt();
        let w = Tensor::randn(&[out, inp], std, rng);
        let b = Tensor::zeros(&[out]);
        self.push(name.to_string(), Layer::Dense { w, b }, vec![x])
    }

    /// Fixed (frozen) affine map y = scale .* x + shift, expressed as a
    /// diagonal dense layer so it stays inside the layer vocabulary.
    pub fn fixed_affine(
        &mut self,
        name: &str,
        x: NodeId,
        scale: &[f64],
        shift: &[f64],
    ) -> Result<NodeId> {
        let inp = self.feature_dim(x)?;
        if scale.len() != inp || shift.len() != inp {
            return Err(TensorNetError::ConfigError(format!(
                "fixed_affine `{name}`: expected {inp} scale/shift entries"
            )));
        }
        let mut w = Tensor::zeros(&[inp, inp]);
        for i in 0..inp {
            w.data_mut()[i * inp + i] = scale[i];
        }
        let b = Tensor::from_vec(&[inp], shift.to_vec())?;
        let id = self.push(name.to_string(), Layer::Dense { w, b }, vec![x])?;
        self.nodes[id].frozen = true;
        Ok(id)
    }

    pub fn conv3<R: Rng>(
        &mut self,
        name: &str,
        x: NodeId,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<NodeId> {
        let in_shape = self.nodes[x].out_shape.clone();
        if in_shape.len() != 4 {
            return Err(TensorNetError::ConfigError(format!(
                "conv3 `{name}`: input must be [c,d,h,w], got {in_shape:?}"
            )));
        }
        let ic = in_shape[0];
        let fan_in = (ic * 27) as f64;
        let w = Tensor::randn(&[out_channels, ic, 3, 3, 3], (2.0 / fan_in).sqrt(), rng);
        let b = Tensor::zeros(&[out_channels]);
        self.push(name.to_string(), Layer::Conv3 { w, b, stride }, vec![x])
    }

    pub fn convt3<R: Rng>(
        &mut self,
        name: &str,
        x: NodeId,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<NodeId> {
        let in_shape = self.nodes[x].out_shape.clone();
        if in_shape.len() != 4 {
            return Err(TensorNetError::ConfigError(format!(
                "convt3 `{name}`: input must be [c,d,h,w], got {in_shape:?}"
            )));
        }
        let ic = in_shape[0];
        let fan_in = (ic * 27) as f64;
        let w = Tensor::randn(&[out_channels, ic, 3, 3, 3], (2.0 / fan_in).sqrt(), rng);
        let b = Tensor::zeros(&[out_channels]);
        self.push(name.to_string(), Layer::ConvT3 { w, b, stride }, vec![x])
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let feats = self.nodes[x].out_shape[0];
        let layer = Layer::BatchNorm {
            gamma: Tensor::filled(&[feats], 1.0),
            beta: Tensor::zeros(&[feats]),
            running_mean: Tensor::zeros(&[feats]),
            running_var: Tensor::filled(&[feats], 1.0),
            momentum: 0.99,
            eps: 1e-5,
        };
        self.push(name.to_string(), layer, vec![x])
    }

    pub fn elu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name.to_string(), Layer::Elu, vec![x])
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name.to_string(), Layer::Relu, vec![x])
    }

    pub fn sigmoid(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name.to_string(), Layer::Sigmoid, vec![x])
    }

    pub fn flatten(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name.to_string(), Layer::Flatten, vec![x])
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> Result<NodeId> {
        self.push(name.to_string(), Layer::Concat, xs.to_vec())
    }

    /// Reshape a flat feature vector into a conv volume. Implemented as a
    /// named node-level shape rewrite on the preceding node.
    pub fn reshape(&mut self, name: &str, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let in_shape = &self.nodes[x].out_shape;
        let n_in: usize = in_shape.iter().product();
        let n_out: usize = shape.iter().product();
        if n_in != n_out {
            return Err(TensorNetError::ShapeMismatch {
                context: format!("reshape `{name}`"),
                expected: shape.to_vec(),
                got: in_shape.clone(),
            });
        }
        // a flatten node followed by fixing the recorded output shape acts
        // as a free reshape in both directions
        let id = self.push(name.to_string(), Layer::Flatten, vec![x])?;
        self.nodes[id].out_shape = shape.to_vec();
        Ok(id)
    }

    fn feature_dim(&self, x: NodeId) -> Result<usize> {
        let s = &self.nodes[x].out_shape;
        if s.len() != 1 {
            return Err(TensorNetError::ConfigError(format!(
                "expected flat features, got shape {s:?}"
            )));
        }
        Ok(s[0])
    }

    pub fn finish(self, output: NodeId) -> Result<NetModel> {
        for (name, &id) in &self.inputs {
            if self.consumed[id] != 1 {
                return Err(TensorNetError::ConfigError(format!(
                    "input `{name}` must be consumed exactly once, got {}",
                    self.consumed[id]
                )));
            }
        }
        Ok(NetModel {
            nodes: self.nodes,
            inputs: self.inputs,
            output,
            version: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_model(rng: &mut ChaCha12Rng) -> NetModel {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[3]).unwrap();
        let h = b.dense("fc1", x, 4, rng).unwrap();
        let h = b.elu("act1", h).unwrap();
        let y = b.dense_xavier("fc2", h, 1, rng).unwrap();
        let y = b.sigmoid("out", y).unwrap();
        b.finish(y).unwrap()
    }

    #[test]
    fn forward_backward_shapes() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let model = tiny_model(&mut rng);
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), Tensor::from_vec(&[2, 3], vec![0.1; 6]).unwrap());
        let (out, cache) = model.forward(&inputs).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        let g = Tensor::filled(&[2, 1], 1.0);
        let grads = model.backward(&cache, &g).unwrap();
        assert_eq!(grads.inputs["x"].shape(), &[2, 3]);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut model = tiny_model(&mut rng);
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), Tensor::from_vec(&[1, 3], vec![0.1; 3]).unwrap());
        let (_, cache) = model.forward(&inputs).unwrap();
        model.update_trainable(|_, t| t.data_mut()[0] += 1.0);
        let g = Tensor::filled(&[1, 1], 1.0);
        assert!(matches!(
            model.backward(&cache, &g),
            Err(TensorNetError::StaleCache)
        ));
    }

    #[test]
    fn unconsumed_input_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[3]).unwrap();
        let _unused = b.input("y", &[2]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let h = b.dense("fc", x, 2, &mut rng).unwrap();
        assert!(b.finish(h).is_err());
    }

    #[test]
    fn nonfinite_input_raises() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let model = tiny_model(&mut rng);
        let mut inputs = BTreeMap::new();
        inputs.insert(
            "x".to_string(),
            Tensor::from_vec(&[1, 3], vec![f64::NAN, 0.0, 0.0]).unwrap(),
        );
        assert!(matches!(
            model.forward(&inputs),
            Err(TensorNetError::NonFiniteActivation { .. })
        ));
    }
}
