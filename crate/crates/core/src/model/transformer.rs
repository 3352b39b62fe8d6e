use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::component::*;
use crate::error::{Error, Result};
use crate::numerics::{AttentionShape, Graph, Tensor, Var};
use crate::seed;

pub type Params = BTreeMap<ComponentId, Tensor>;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    /// Standard deviation of the normal init of weights and embedding tables.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden: 32,
            num_heads: 2,
            ffn: 64,
            vocab: 64,
            max_seq_len: 16,
            num_classes: 2,
            init_std: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("num_heads", self.num_heads),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config(format!(
                "model.init_std must be finite and > 0, got {}",
                self.init_std
            )));
        }
        if self.hidden % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model.hidden ({}) must be divisible by model.num_heads ({})",
                self.hidden, self.num_heads
            )));
        }
        Ok(())
    }

    /// Every component path with its shape, in registry order.
    pub fn component_shapes(&self) -> BTreeMap<ComponentId, Vec<usize>> {
        let d = self.hidden;
        let mut out = BTreeMap::new();
        out.insert(ComponentId::new(EMBED_TOKEN), vec![self.vocab, d]);
        out.insert(ComponentId::new(EMBED_POSITION), vec![self.max_seq_len, d]);
        for i in 1..=self.num_layers {
            for role in LAYER_COMPONENTS {
                let shape = match role {
                    "ffn.w1.weight" => vec![d, self.ffn],
                    "ffn.w1.bias" => vec![self.ffn],
                    "ffn.w2.weight" => vec![self.ffn, d],
                    r if r.ends_with(".weight") => vec![d, d],
                    _ => vec![d],
                };
                out.insert(ComponentId::layer(i, role), shape);
            }
        }
        out.insert(ComponentId::new(HEAD_WEIGHT), vec![d, self.num_classes]);
        out.insert(ComponentId::new(HEAD_BIAS), vec![self.num_classes]);
        out
    }
}

/// Tiny post-norm transformer encoder with a mean-pooled classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Params,
}

impl Model {
    /// Weights and tables `Normal(0, init_std)`, biases 0, layer-norm gains 1.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(config.seed, &["init"]));
        let params = config
            .component_shapes()
            .into_iter()
            .map(|(id, shape)| {
                let t = match id.kind() {
                    Kind::Weight | Kind::Table => Tensor::randn(&shape, config.init_std, &mut rng),
                    Kind::Bias => Tensor::zeros(&shape),
                    Kind::Gain => Tensor::filled(&shape, 1.0),
                };
                (id, t.with_requires_grad(true))
            })
            .collect();
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn param(&self, id: &str) -> Result<&Tensor> {
        self.params
            .get(id)
            .ok_or_else(|| Error::MissingComponent(id.to_string()))
    }

    pub fn param_mut(&mut self, id: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(id)
            .ok_or_else(|| Error::MissingComponent(id.to_string()))
    }

    pub fn component_ids(&self) -> impl Iterator<Item = &ComponentId> {
        self.params.keys()
    }

    pub fn components_of_layer(&self, i: usize) -> Result<BTreeSet<ComponentId>> {
        if i == 0 || i > self.config.num_layers {
            return Err(Error::LayerOutOfRange {
                index: i,
                num_layers: self.config.num_layers,
            });
        }
        Ok(self.components_in(Scope::Layer(i)))
    }

    pub fn components_in(&self, scope: Scope) -> BTreeSet<ComponentId> {
        self.params
            .keys()
            .filter(|id| id.scope() == Some(scope))
            .cloned()
            .collect()
    }

    /// Layer scopes bottom to top, bracketed by embed and head.
    pub fn scopes(&self) -> Vec<Scope> {
        let mut s = vec![Scope::Embed];
        s.extend((1..=self.config.num_layers).map(Scope::Layer));
        s.push(Scope::Head);
        s
    }

    /// Fresh classifier head drawn from `seed`.
    pub fn reinit_head(&mut self, seed: u64) {
        let mut rng = seed::rng(seed::derive(seed, &["head"]));
        let w = self.params.get_mut(HEAD_WEIGHT).expect("head weight registered");
        let fresh = Tensor::randn(w.shape(), self.config.init_std, &mut rng);
        w.data_mut().copy_from_slice(fresh.data());
        let b = self.params.get_mut(HEAD_BIAS).expect("head bias registered");
        b.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn zero_head(&mut self) {
        for id in [HEAD_WEIGHT, HEAD_BIAS] {
            let t = self.params.get_mut(id).expect("head registered");
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<usize> {
        let seq = tokens.first().map_or(0, Vec::len);
        if seq == 0 {
            return Err(Error::shape("forward", "empty batch or sequence"));
        }
        if seq > self.config.max_seq_len {
            return Err(Error::shape(
                "forward",
                format!("sequence length {seq} exceeds {}", self.config.max_seq_len),
            ));
        }
        for row in tokens {
            if row.len() != seq {
                return Err(Error::shape("forward", "ragged batch"));
            }
            if let Some(&t) = row.iter().find(|&&t| t >= self.config.vocab) {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab,
                });
            }
        }
        Ok(seq)
    }

    /// Inference-only logits `[batch, num_classes]`.
    pub fn forward_classify(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        let mut graph = Graph::new();
        let mut bind = Binder::new(self, &|_| false);
        let logits = self.classify_graph(&mut graph, &mut bind, tokens)?;
        Ok(graph.value(logits).clone())
    }

    /// Records the classifier forward pass on `graph`. Only components for
    /// which `trainable` holds become gradient-requiring leaves.
    pub fn classify_graph(
        &self,
        graph: &mut Graph,
        bind: &mut Binder<'_>,
        tokens: &[Vec<usize>],
    ) -> Result<Var> {
        let seq = self.check_tokens(tokens)?;
        let hidden = self.encode(graph, bind, tokens, seq)?;
        let pooled = graph.mean_pool(hidden, seq)?;
        let w = bind.get(graph, HEAD_WEIGHT)?;
        let b = bind.get(graph, HEAD_BIAS)?;
        let logits = graph.matmul(pooled, w)?;
        graph.add_bias(logits, b)
    }

    /// Final hidden states `[batch*seq, hidden]`.
    pub fn encode(
        &self,
        graph: &mut Graph,
        bind: &mut Binder<'_>,
        tokens: &[Vec<usize>],
        seq: usize,
    ) -> Result<Var> {
        let batch = tokens.len();
        let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok_table = bind.get(graph, EMBED_TOKEN)?;
        let pos_table = bind.get(graph, EMBED_POSITION)?;
        let te = graph.embed(tok_table, &flat)?;
        let pe = graph.embed(pos_table, &positions)?;
        let mut x = graph.add(te, pe)?;
        let shape = AttentionShape {
            batch,
            seq,
            heads: self.config.num_heads,
        };
        for i in 1..=self.config.num_layers {
            let q = linear(graph, bind, x, &format!("layer.{i}.attn.query"))?;
            let k = linear(graph, bind, x, &format!("layer.{i}.attn.key"))?;
            let v = linear(graph, bind, x, &format!("layer.{i}.attn.value"))?;
            let a = graph.attention(q, k, v, shape)?;
            let o = linear(graph, bind, a, &format!("layer.{i}.attn.output"))?;
            let r = graph.add(x, o)?;
            let h = norm(graph, bind, r, &format!("layer.{i}.ln1"))?;
            let f = linear(graph, bind, h, &format!("layer.{i}.ffn.w1"))?;
            let f = graph.gelu(f)?;
            let f = linear(graph, bind, f, &format!("layer.{i}.ffn.w2"))?;
            let r = graph.add(h, f)?;
            x = norm(graph, bind, r, &format!("layer.{i}.ln2"))?;
        }
        Ok(x)
    }

    /// Argmax class per sequence, lowest index on ties.
    pub fn predict(&self, tokens: &[Vec<usize>]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(64) {
            let logits = self.forward_classify(chunk)?;
            let c = self.config.num_classes;
            for row in logits.data().chunks_exact(c) {
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}

fn linear(graph: &mut Graph, bind: &mut Binder<'_>, input: Var, prefix: &str) -> Result<Var> {
    let w = bind.get(graph, &format!("{prefix}.weight"))?;
    let b = bind.get(graph, &format!("{prefix}.bias"))?;
    let y = graph.matmul(input, w)?;
    graph.add_bias(y, b)
}

fn norm(graph: &mut Graph, bind: &mut Binder<'_>, input: Var, prefix: &str) -> Result<Var> {
    let g = bind.get(graph, &format!("{prefix}.gain"))?;
    let b = bind.get(graph, &format!("{prefix}.bias"))?;
    graph.layer_norm(input, g, b, LN_EPS)
}

/// Lazily turns model parameters into graph leaves, remembering the leaf of
/// each trainable component so gradients can be read back.
pub struct Binder<'a> {
    model: &'a Model,
    trainable: &'a dyn Fn(&ComponentId) -> bool,
    vars: BTreeMap<ComponentId, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(model: &'a Model, trainable: &'a dyn Fn(&ComponentId) -> bool) -> Self {
        Binder {
            model,
            trainable,
            vars: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, graph: &mut Graph, path: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(path) {
            return Ok(v);
        }
        let (id, t) = self
            .model
            .params
            .get_key_value(path)
            .ok_or_else(|| Error::MissingComponent(path.to_string()))?;
        let grad = (self.trainable)(id);
        let var = graph.leaf(t.detached().with_requires_grad(grad));
        self.vars.insert(id.clone(), var);
        Ok(var)
    }

    /// Leaves that require gradients, in registry order.
    pub fn trainable_vars(&self, graph: &Graph) -> Vec<(ComponentId, Var)> {
        self.vars
            .iter()
            .filter(|(_, &v)| graph.needs_grad(v))
            .map(|(id, &v)| (id.clone(), v))
            .collect()
    }
}
