//! Network construction and forward passes.
//!
//! A [`Model`] is a flat list of named parameters plus a layout describing
//! how they are wired. Linear layers ("sites") may carry a low-rank
//! adapter. Two architectures are available: an MLP classifier and a
//! single-block transformer encoder over token sequences.

pub mod checkpoint;
pub mod lora;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::{snap_to_lattice, ActivePerturbations};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};

pub use lora::{merged, AdapterInit, LoraLayer};

pub type ParamId = usize;

/// Wildcard entry of `lora_targets` selecting every eligible linear layer.
pub const ALL_TARGETS: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    TinyTransformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    /// `sum((y - t)^2) / (2 * batch)`; used by regression toys.
    HalfMse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSpec {
    pub vocab: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub classes: usize,
}

impl Default for TransformerSpec {
    fn default() -> Self {
        Self { vocab: 16, seq_len: 16, dim: 32, heads: 2, ff_dim: 64, classes: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// MLP layer widths, input first.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub transformer: TransformerSpec,
    /// Linear layer ids receiving adapters; `"*"` selects all of them.
    #[serde(default = "default_targets")]
    pub lora_targets: Vec<String>,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub adapter_init: AdapterInit,
    /// Train the classification head directly instead of freezing it.
    #[serde(default)]
    pub train_head: bool,
    /// Every parameter trainable, no adapters.
    #[serde(default)]
    pub full_finetune: bool,
    #[serde(default = "default_bias")]
    pub bias: bool,
    #[serde(default)]
    pub loss: LossKind,
}

fn default_widths() -> Vec<usize> {
    vec![2, 64, 64, 2]
}
fn default_targets() -> Vec<String> {
    vec![ALL_TARGETS.to_string()]
}
fn default_rank() -> usize {
    4
}
fn default_alpha() -> f64 {
    8.0
}
fn default_bias() -> bool {
    true
}

impl ModelSpec {
    pub fn mlp(widths: Vec<usize>) -> Self {
        Self {
            architecture: Architecture::Mlp,
            widths,
            activation: Activation::Relu,
            transformer: TransformerSpec::default(),
            lora_targets: default_targets(),
            rank: default_rank(),
            alpha: default_alpha(),
            adapter_init: AdapterInit::default(),
            train_head: false,
            full_finetune: false,
            bias: true,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn tiny_transformer() -> Self {
        Self { architecture: Architecture::TinyTransformer, ..Self::mlp(default_widths()) }
    }

    pub fn with_rank(mut self, rank: usize, alpha: f64) -> Self {
        self.rank = rank;
        self.alpha = alpha;
        self
    }

    /// Ids of all linear layers in wiring order.
    pub fn linear_ids(&self) -> Vec<String> {
        match self.architecture {
            Architecture::Mlp => {
                let layers = self.widths.len().saturating_sub(1);
                (0..layers).map(|i| if i + 1 == layers { "head".into() } else { format!("fc{i}") }).collect()
            }
            Architecture::TinyTransformer => {
                ["attn.q", "attn.k", "attn.v", "attn.o", "ff.0", "ff.1", "head"].iter().map(|s| s.to_string()).collect()
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.architecture {
            Architecture::Mlp => *self.widths.last().unwrap_or(&0),
            Architecture::TinyTransformer => self.transformer.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.architecture {
            Architecture::Mlp => {
                if self.widths.len() < 2 || self.widths.contains(&0) {
                    return Err(Error::config("mlp needs at least two positive widths", &["widths"]));
                }
            }
            Architecture::TinyTransformer => {
                let t = &self.transformer;
                if [t.vocab, t.seq_len, t.dim, t.heads, t.ff_dim, t.classes].contains(&0) {
                    return Err(Error::config("transformer sizes must be positive", &["transformer"]));
                }
                if !t.dim.is_multiple_of(t.heads) {
                    return Err(Error::config("dim must be divisible by heads", &["transformer.dim"]));
                }
            }
        }
        if self.rank == 0 {
            return Err(Error::config("rank must be positive", &["rank"]));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("alpha must be positive", &["alpha"]));
        }
        let ids = self.linear_ids();
        let unknown: Vec<&str> =
            self.lora_targets.iter().filter(|t| t.as_str() != ALL_TARGETS && !ids.contains(t)).map(String::as_str).collect();
        if !unknown.is_empty() {
            return Err(Error::Config {
                message: format!("unknown lora targets {unknown:?}; known layers are {ids:?}"),
                keys: vec!["lora_targets".into()],
            });
        }
        Ok(())
    }

    fn is_target(&self, id: &str) -> bool {
        if self.full_finetune || (self.train_head && id == "head") {
            return false;
        }
        self.lora_targets.iter().any(|t| t == ALL_TARGETS || t == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    LinearWeight,
    Bias,
    AdapterA,
    AdapterB,
    NormGain,
    NormBias,
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSite {
    pub a: ParamId,
    pub b: ParamId,
    pub alpha: f64,
    pub rank: usize,
}

impl AdapterSite {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// A linear layer `y = x W^T (+ s x A^T B^T) + b` inside a model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSite {
    pub id: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<AdapterSite>,
    pub out_features: usize,
    pub in_features: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Layout {
    Mlp { activation: Activation },
    Transformer(TransformerLayout),
}

#[derive(Debug, Clone, PartialEq)]
struct TransformerLayout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    norms: [(ParamId, ParamId); 3],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    /// `[batch x features]`.
    Features(Tensor),
    /// Row-major `[batch x seq_len]` token ids.
    Tokens { ids: Vec<usize>, seq_len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Inputs,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        match &self.inputs {
            Inputs::Features(t) => t.shape()[0],
            Inputs::Tokens { ids, seq_len } => ids.len() / seq_len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What a forward pass tracks gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// No gradients.
    Eval,
    /// Gradients for trainable parameters (adapters, and anything marked trainable).
    Train,
    /// Adapted layers run on merged weights `W + sBA` recorded as
    /// gradient-carrying leaves, yielding `dL/dW'`. Nothing else is tracked.
    MergedProbe,
}

/// A recorded forward pass.
pub struct Pass {
    pub graph: Graph,
    pub loss: Var,
    pub output: Var,
    params: Vec<Option<Var>>,
    merged: Vec<Option<Var>>,
}

impl Pass {
    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss).data()[0]
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id].and_then(|v| self.graph.grad(v))
    }

    /// `dL/dW'` for linear site `site`, available after `backward` in [`Mode::MergedProbe`].
    pub fn merged_grad(&self, site: usize) -> Option<&[f64]> {
        self.merged[site].and_then(|v| self.graph.grad(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    seed: u64,
    params: Vec<Param>,
    linears: Vec<LinearSite>,
    layout: Layout,
    pub(crate) active: ActivePerturbations,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params && self.linears == other.linears
    }
}

struct Builder {
    root: RngStream,
    params: Vec<Param>,
    linears: Vec<LinearSite>,
    spec: ModelSpec,
}

impl Builder {
    fn add(&mut self, name: String, tensor: Tensor, trainable: bool, kind: ParamKind) -> ParamId {
        // Frozen tensors live on the perturbation lattice so that in-place
        // add/subtract of a regenerated perturbation is exact.
        let tensor = if trainable { tensor } else { tensor.map(snap_to_lattice) };
        self.params.push(Param { name, tensor: tensor.with_grad(trainable), trainable, kind });
        self.params.len() - 1
    }

    fn stream(&self, name: &str) -> RngStream {
        self.root.derive_str(name)
    }

    fn linear(&mut self, id: &str, out_features: usize, in_features: usize) -> usize {
        let spec = &self.spec;
        let adapted = spec.is_target(id);
        let trainable_base = spec.full_finetune || (spec.train_head && id == "head");
        let mut s = self.stream(&format!("{id}.weight"));
        let w = AdapterInit::KaimingUniform.sample(&mut s, out_features, in_features);
        let weight = self.add(format!("{id}.weight"), w, trainable_base, ParamKind::LinearWeight);
        let bias = self.spec.bias.then(|| {
            let bound = 1.0 / (in_features as f64).sqrt();
            let b = self.stream(&format!("{id}.bias")).uniform_in(out_features, -bound, bound);
            let b = Tensor::new(vec![out_features], b).expect("length matches");
            self.add(format!("{id}.bias"), b, trainable_base, ParamKind::Bias)
        });
        let adapter = adapted.then(|| {
            // Rank is capped by the layer's smaller side.
            let rank = self.spec.rank.min(out_features).min(in_features);
            let init = self.spec.adapter_init;
            let a = init.sample(&mut self.stream(&format!("{id}.lora_a")), rank, in_features);
            let a = self.add(format!("{id}.lora_a"), a, true, ParamKind::AdapterA);
            let b = Tensor::zeros(&[out_features, rank]);
            let b = self.add(format!("{id}.lora_b"), b, true, ParamKind::AdapterB);
            AdapterSite { a, b, alpha: self.spec.alpha, rank }
        });
        self.linears.push(LinearSite { id: id.to_string(), weight, bias, adapter, out_features, in_features });
        self.linears.len() - 1
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> (ParamId, ParamId) {
        let trainable = self.spec.full_finetune;
        let g = self.add(format!("{prefix}.gain"), Tensor::new(vec![dim], vec![1.0; dim]).unwrap(), trainable, ParamKind::NormGain);
        let b = self.add(format!("{prefix}.bias"), Tensor::zeros(&[dim]), trainable, ParamKind::NormBias);
        (g, b)
    }

    fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> ParamId {
        let data = self.stream(name).normals(rows * dim);
        let t = Tensor::new(vec![rows, dim], data).unwrap();
        let trainable = self.spec.full_finetune;
        self.add(name.to_string(), t, trainable, ParamKind::Embedding)
    }
}

/// Builds a model with deterministic initialization from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut b = Builder { root: RngStream::new(seed).derive_str("init"), params: Vec::new(), linears: Vec::new(), spec: spec.clone() };
    let ids = spec.linear_ids();
    let layout = match spec.architecture {
        Architecture::Mlp => {
            for (i, id) in ids.iter().enumerate() {
                b.linear(id, spec.widths[i + 1], spec.widths[i]);
            }
            Layout::Mlp { activation: spec.activation }
        }
        Architecture::TinyTransformer => {
            let t = spec.transformer.clone();
            let tok_emb = b.embedding("tok_emb", t.vocab, t.dim);
            let pos_emb = b.embedding("pos_emb", t.seq_len, t.dim);
            let ln1 = b.norm("ln1", t.dim);
            for id in &ids[..4] {
                b.linear(id, t.dim, t.dim);
            }
            let ln2 = b.norm("ln2", t.dim);
            b.linear("ff.0", t.ff_dim, t.dim);
            b.linear("ff.1", t.dim, t.ff_dim);
            let lnf = b.norm("lnf", t.dim);
            b.linear("head", t.classes, t.dim);
            Layout::Transformer(TransformerLayout { tok_emb, pos_emb, norms: [ln1, ln2, lnf] })
        }
    };
    Ok(Model { spec: spec.clone(), seed, params: b.params, linears: b.linears, layout, active: ActivePerturbations::default() })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn param_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn linears(&self) -> &[LinearSite] {
        &self.linears
    }

    pub fn site(&self, id: &str) -> Option<usize> {
        self.linears.iter().position(|l| l.id == id)
    }

    /// Indices of linear sites that carry an adapter.
    pub fn adapted_sites(&self) -> Vec<usize> {
        (0..self.linears.len()).filter(|&i| self.linears[i].adapter.is_some()).collect()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).filter(|&i| self.params[i].trainable).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    /// Copies of the standalone adapter view of site `site`.
    pub fn lora_layer(&self, site: usize) -> Option<LoraLayer> {
        let l = &self.linears[site];
        let ad = l.adapter.as_ref()?;
        Some(LoraLayer {
            weight: self.params[l.weight].tensor.clone(),
            a: self.params[ad.a].tensor.clone(),
            b: self.params[ad.b].tensor.clone(),
            alpha: ad.alpha,
            rank: ad.rank,
        })
    }

    /// Effective weight `W + sBA` of site `site` (just `W` when unadapted).
    pub fn merged_weight(&self, site: usize) -> Tensor {
        let l = &self.linears[site];
        let w = &self.params[l.weight].tensor;
        match &l.adapter {
            Some(ad) => merged(w, &self.params[ad.a].tensor, &self.params[ad.b].tensor, ad.scaling()),
            None => w.clone().with_grad(false),
        }
    }

    /// A copy whose adapted layers hold `W + sBA` directly and carry no adapter.
    pub fn merged_snapshot(&self) -> Model {
        let mut m = self.clone();
        for site in 0..m.linears.len() {
            if m.linears[site].adapter.is_some() {
                let w = self.merged_weight(site);
                let wid = m.linears[site].weight;
                m.params[wid].tensor = w;
                m.linears[site].adapter = None;
            }
        }
        m.active = ActivePerturbations::default();
        m
    }

    /// A copy with every linear weight replaced, in site order.
    pub fn with_linear_weights(&self, weights: &[Tensor]) -> Result<Model> {
        if weights.len() != self.linears.len() {
            return Err(Error::Dimension(format!("{} weights for {} linear layers", weights.len(), self.linears.len())));
        }
        let mut m = self.clone();
        for (site, w) in weights.iter().enumerate() {
            let wid = m.linears[site].weight;
            if w.shape() != m.params[wid].tensor.shape() {
                return Err(Error::Dimension(format!("weight {site} has the wrong shape")));
            }
            m.params[wid].tensor = w.clone();
        }
        Ok(m)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn forward(&self, batch: &Batch, mode: Mode) -> Result<Pass> {
        let mut f = Forward {
            model: self,
            mode,
            graph: Graph::new(),
            params: vec![None; self.params.len()],
            merged: vec![None; self.linears.len()],
        };
        let output = match &self.layout {
            Layout::Mlp { activation } => f.mlp(batch, *activation)?,
            Layout::Transformer(t) => f.transformer(batch, t)?,
        };
        let loss = match (&batch.targets, self.spec.loss) {
            (Targets::Classes(labels), LossKind::CrossEntropy) => f.graph.softmax_cross_entropy(output, labels)?,
            (Targets::Values(t), LossKind::HalfMse) => f.graph.half_mse(output, t)?,
            _ => return Err(Error::Contract("batch targets do not match the model's loss".into())),
        };
        Ok(Pass { graph: f.graph, loss, output, params: f.params, merged: f.merged })
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        Ok(self.forward(batch, Mode::Eval)?.loss_value())
    }

    pub fn evaluate(&self, batch: &Batch) -> Result<Metrics> {
        let pass = self.forward(batch, Mode::Eval)?;
        let accuracy = match &batch.targets {
            Targets::Classes(labels) => {
                let out = pass.graph.value(pass.output);
                let hits = out.rows().zip(labels).filter(|(row, &l)| argmax(row) == l).count();
                Some(hits as f64 / labels.len() as f64)
            }
            Targets::Values(_) => None,
        };
        Ok(Metrics { loss: pass.loss_value(), accuracy })
    }

    /// Forward + backward in [`Mode::Train`]; gradients are added into the
    /// `grad` buffers of trainable parameters. Returns the loss.
    pub fn accumulate_gradients(&mut self, batch: &Batch) -> Result<f64> {
        let mut pass = self.forward(batch, Mode::Train)?;
        pass.graph.backward(pass.loss)?;
        for id in 0..self.params.len() {
            if let Some(g) = pass.param_grad(id) {
                self.params[id].tensor.accumulate_grad(g);
            }
        }
        Ok(pass.loss_value())
    }

    /// `dL/dW'` for every adapted site (by site index), plus the loss.
    pub fn merged_gradients(&self, batch: &Batch) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut pass = self.forward(batch, Mode::MergedProbe)?;
        pass.graph.backward(pass.loss)?;
        let grads = (0..self.linears.len())
            .map(|s| {
                pass.merged_grad(s).map(|g| {
                    let l = &self.linears[s];
                    Tensor::new(vec![l.out_features, l.in_features], g.to_vec()).expect("shape")
                })
            })
            .collect();
        Ok((pass.loss_value(), grads))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Forward<'m> {
    model: &'m Model,
    mode: Mode,
    graph: Graph,
    params: Vec<Option<Var>>,
    merged: Vec<Option<Var>>,
}

impl Forward<'_> {
    fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params[id] {
            return v;
        }
        let p = &self.model.params[id];
        let track = self.mode == Mode::Train && p.trainable;
        let v = self.graph.leaf(p.tensor.clone().with_grad(track));
        self.params[id] = Some(v);
        v
    }

    fn linear(&mut self, site: usize, x: Var) -> Result<Var> {
        let l = &self.model.linears[site];
        let mut y = match (&l.adapter, self.mode) {
            (Some(_), Mode::MergedProbe) => {
                let w = self.model.merged_weight(site).with_grad(true);
                let wv = self.graph.leaf(w);
                self.merged[site] = Some(wv);
                self.graph.matmul_bt(x, wv)?
            }
            (Some(ad), _) => {
                let (wid, aid, bid, s) = (l.weight, ad.a, ad.b, ad.scaling());
                let w = self.param(wid);
                let a = self.param(aid);
                let b = self.param(bid);
                let base = self.graph.matmul_bt(x, w)?;
                let xa = self.graph.matmul_bt(x, a)?;
                let xab = self.graph.matmul_bt(xa, b)?;
                let low = self.graph.scale(xab, s);
                self.graph.add(base, low)?
            }
            (None, _) => {
                let w = self.param(l.weight);
                self.graph.matmul_bt(x, w)?
            }
        };
        if let Some(bid) = self.model.linears[site].bias {
            let b = self.param(bid);
            y = self.graph.add_row(y, b)?;
        }
        Ok(y)
    }

    fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.graph.relu(x),
            Activation::Gelu => self.graph.gelu(x),
        }
    }

    fn mlp(&mut self, batch: &Batch, act: Activation) -> Result<Var> {
        let Inputs::Features(x) = &batch.inputs else {
            return Err(Error::Contract("mlp expects feature inputs".into()));
        };
        if x.dims2()?.1 != self.model.linears[0].in_features {
            return Err(Error::Dimension(format!("input width {} != model input {}", x.dims2()?.1, self.model.linears[0].in_features)));
        }
        let mut h = self.graph.constant(x.clone());
        let last = self.model.linears.len() - 1;
        for site in 0..=last {
            h = self.linear(site, h)?;
            if site != last {
                h = self.activate(h, act);
            }
        }
        Ok(h)
    }

    fn layernorm(&mut self, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
        let g = self.param(g);
        let b = self.param(b);
        self.graph.layernorm(x, g, b)
    }

    fn transformer(&mut self, batch: &Batch, t: &TransformerLayout) -> Result<Var> {
        let Inputs::Tokens { ids, seq_len } = &batch.inputs else {
            return Err(Error::Contract("transformer expects token inputs".into()));
        };
        let spec = &self.model.spec.transformer;
        if *seq_len != spec.seq_len || ids.len() % seq_len != 0 {
            return Err(Error::Dimension(format!("sequence length {seq_len} != model sequence length {}", spec.seq_len)));
        }
        let (s, heads, dim) = (spec.seq_len, spec.heads, spec.dim);
        let batch_size = ids.len() / s;
        let positions: Vec<usize> = (0..ids.len()).map(|i| i % s).collect();

        let tok = self.param(t.tok_emb);
        let pos = self.param(t.pos_emb);
        let te = self.graph.gather_rows(tok, ids)?;
        let pe = self.graph.gather_rows(pos, &positions)?;
        let x = self.graph.add(te, pe)?;

        let h = self.layernorm(x, t.norms[0])?;
        let q = self.linear(0, h)?;
        let k = self.linear(1, h)?;
        let v = self.linear(2, h)?;
        let dh = dim / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut rows = Vec::with_capacity(batch_size);
        for i in 0..batch_size {
            let mut head_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qi = self.graph.slice_block(q, i * s, s, hd * dh, dh)?;
                let ki = self.graph.slice_block(k, i * s, s, hd * dh, dh)?;
                let vi = self.graph.slice_block(v, i * s, s, hd * dh, dh)?;
                let scores = self.graph.matmul_bt(qi, ki)?;
                let scores = self.graph.scale(scores, inv_sqrt);
                let p = self.graph.softmax_rows(scores);
                head_out.push(self.graph.matmul(p, vi)?);
            }
            rows.push(self.graph.concat_cols(&head_out)?);
        }
        let attn = self.graph.concat_rows(&rows)?;
        let o = self.linear(3, attn)?;
        let x = self.graph.add(x, o)?;

        let h = self.layernorm(x, t.norms[1])?;
        let f = self.linear(4, h)?;
        let f = self.graph.gelu(f);
        let f = self.linear(5, f)?;
        let x = self.graph.add(x, f)?;

        let x = self.layernorm(x, t.norms[2])?;
        let pooled = self.graph.mean_row_groups(x, s)?;
        self.linear(6, pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_batch(n: usize, d: usize, seed: u64) -> Batch {
        let mut s = RngStream::new(seed);
        let x = Tensor::new(vec![n, d], s.normals(n * d)).unwrap();
        let labels = (0..n).map(|i| i % 2).collect();
        Batch { inputs: Inputs::Features(x), targets: Targets::Classes(labels) }
    }

    #[test]
    fn same_seed_same_bits() {
        let spec = ModelSpec::mlp(vec![8, 16, 3]);
        let a = build_model(&spec, 7).unwrap();
        let b = build_model(&spec, 7).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert!(p.tensor.bit_eq(&q.tensor), "{}", p.name);
        }
        let c = build_model(&spec, 8).unwrap();
        assert!(!a.params()[0].tensor.bit_eq(&c.params()[0].tensor));
    }

    #[test]
    fn mlp_parameter_count() {
        let spec = ModelSpec::mlp(vec![8, 16, 3]).with_rank(2, 4.0);
        let m = build_model(&spec, 0).unwrap();
        let base = 8 * 16 + 16 + 16 * 3 + 3;
        let adapters = 2 * (16 + 8) + 2 * (3 + 16);
        assert_eq!(m.num_params(), base + adapters);
        assert_eq!(m.num_trainable(), adapters);
        assert!(m.num_trainable() < 8 * 16 + 16 * 3);
    }

    #[test]
    fn rank_is_capped_by_layer_size() {
        let m = build_model(&ModelSpec::mlp(vec![2, 64, 64, 2]), 0).unwrap();
        let ranks: Vec<usize> = m.linears().iter().map(|l| l.adapter.as_ref().unwrap().rank).collect();
        assert_eq!(ranks, vec![2, 4, 2]);
    }

    #[test]
    fn frozen_and_trainable_split() {
        let m = build_model(&ModelSpec::mlp(vec![4, 8, 2]), 0).unwrap();
        for p in m.params() {
            let should = matches!(p.kind, ParamKind::AdapterA | ParamKind::AdapterB);
            assert_eq!(p.trainable, should, "{}", p.name);
            assert_eq!(p.tensor.requires_grad, should);
        }
        let mut spec = ModelSpec::mlp(vec![4, 8, 2]);
        spec.train_head = true;
        let m = build_model(&spec, 0).unwrap();
        let head = m.site("head").unwrap();
        assert!(m.linears()[head].adapter.is_none());
        assert!(m.param(m.linears()[head].weight).trainable);
    }

    #[test]
    fn adapted_loss_equals_base_loss_at_init() {
        let spec = ModelSpec::mlp(vec![5, 12, 12, 3]);
        let m = build_model(&spec, 1).unwrap();
        let base = build_model(&ModelSpec { lora_targets: vec![], ..spec }, 1).unwrap();
        let batch = blob_batch(20, 5, 3);
        let labels = (0..20).map(|i| i % 3).collect();
        let batch = Batch { targets: Targets::Classes(labels), ..batch };
        assert_eq!(m.loss(&batch).unwrap(), base.loss(&batch).unwrap());
    }

    #[test]
    fn frozen_weights_get_no_gradient() {
        let mut m = build_model(&ModelSpec::mlp(vec![4, 8, 2]), 2).unwrap();
        let batch = blob_batch(16, 4, 0);
        m.accumulate_gradients(&batch).unwrap();
        for p in m.params() {
            assert_eq!(p.tensor.grad.is_some(), p.trainable, "{}", p.name);
        }
    }

    #[test]
    fn merged_probe_matches_adapter_chain_rule() {
        // dL/dA = s B^T G and dL/dB = s G A^T with G = dL/dW'.
        let mut m = build_model(&ModelSpec::mlp(vec![3, 6, 2]), 4).unwrap();
        let mut s = RngStream::new(10);
        for site in m.adapted_sites() {
            let bid = m.linears()[site].adapter.as_ref().unwrap().b;
            let shape = m.param(bid).tensor.shape().to_vec();
            let n = shape.iter().product();
            m.param_mut(bid).tensor = Tensor::new(shape, s.normals(n)).unwrap().with_grad(true);
        }
        let batch = blob_batch(9, 3, 5);
        let (_, gw) = m.merged_gradients(&batch).unwrap();
        m.accumulate_gradients(&batch).unwrap();
        for site in m.adapted_sites() {
            let ad = m.linears()[site].adapter.clone().unwrap();
            let g = gw[site].as_ref().unwrap();
            let a = &m.param(ad.a).tensor;
            let b = &m.param(ad.b).tensor;
            let want_a = b.transpose().unwrap().matmul(g).unwrap().scale(ad.scaling());
            let want_b = g.matmul(&a.transpose().unwrap()).unwrap().scale(ad.scaling());
            let got_a = a.grad.as_ref().unwrap();
            let got_b = b.grad.as_ref().unwrap();
            for (x, y) in got_a.iter().zip(want_a.data()) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in got_b.iter().zip(want_b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merged_snapshot_matches_adapter_forward() {
        let mut m = build_model(&ModelSpec::mlp(vec![3, 6, 2]), 4).unwrap();
        let bid = m.linears()[0].adapter.as_ref().unwrap().b;
        m.param_mut(bid).tensor.data_mut().iter_mut().for_each(|v| *v = 0.3);
        let batch = blob_batch(9, 3, 5);
        let snap = m.merged_snapshot();
        assert!(snap.adapted_sites().is_empty());
        assert!((snap.loss(&batch).unwrap() - m.loss(&batch).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn transformer_logits_are_finite_with_expected_shape() {
        let spec = ModelSpec::tiny_transformer();
        let m = build_model(&spec, 0).unwrap();
        let mut s = RngStream::new(1);
        let b = 3;
        let ids: Vec<usize> = (0..b * 16).map(|_| s.below(16)).collect();
        let batch = Batch { inputs: Inputs::Tokens { ids, seq_len: 16 }, targets: Targets::Classes(vec![0, 1, 0]) };
        let pass = m.forward(&batch, Mode::Eval).unwrap();
        let out = pass.graph.value(pass.output);
        assert_eq!(out.shape(), &[3, 2]);
        assert!(out.is_finite());
    }

    #[test]
    fn unknown_target_is_a_config_error() {
        let mut spec = ModelSpec::mlp(vec![2, 4, 2]);
        spec.lora_targets = vec!["fc9".into(), "fc0".into()];
        match build_model(&spec, 0) {
            Err(Error::Config { keys, .. }) => assert_eq!(keys, vec!["lora_targets".to_string()]),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn frozen_params_sit_on_the_lattice() {
        let m = build_model(&ModelSpec::tiny_transformer(), 3).unwrap();
        for p in m.params().iter().filter(|p| !p.trainable) {
            assert!(p.tensor.data().iter().all(|&v| snap_to_lattice(v) == v), "{}", p.name);
        }
    }
}
