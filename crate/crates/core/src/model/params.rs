use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numeric::{Tape, Tensor, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Named parameter tensors: base weights, connector, and any fine-tuning
/// parameters (`steer.*`, `peft.*`) share one namespace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count of tensors whose name satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.tensors.iter().filter(|(n, _)| pred(n)).map(|(_, t)| t.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.values().filter(|t| t.requires_grad).map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.zero_grad();
        }
    }

    /// Drops every tensor whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|n, _| !n.starts_with(prefix));
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }
}

pub fn layer_name(layer: usize, rest: &str) -> String {
    format!("layer{layer}.{rest}")
}

/// Freshly initialized base decoder plus connector.
///
/// Projections use N(0, 1/fan_in); the two residual-branch outputs (`attn.o`,
/// `ffn_out.weight`) are further scaled by `1/sqrt(2·layers)`. Embeddings use
/// N(0, 0.1²). Layer-norm gains start at 1, biases at 0.
pub fn init_base<T: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let d = cfg.hidden_dim;
    let f = cfg.ffn_dim;
    let resid = 1.0 / (2.0 * cfg.num_layers as f64).sqrt();
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    let mut p = ParamStore::new();
    p.insert("embed.token", Tensor::randn(&[cfg.vocab_size, d], 0.1, rng));
    p.insert("embed.pos", Tensor::randn(&[cfg.max_seq_len, d], 0.1, rng));
    p.insert("connector.weight", Tensor::randn(&[cfg.visual_embed_dim, d], fan(cfg.visual_embed_dim), rng));
    p.insert("connector.bias", Tensor::zeros(&[d]));
    for l in 0..cfg.num_layers {
        p.insert(layer_name(l, "ln1.gain"), Tensor::filled(&[d], T::one()));
        p.insert(layer_name(l, "ln1.bias"), Tensor::zeros(&[d]));
        for proj in ["q", "k", "v"] {
            p.insert(layer_name(l, &format!("attn.{proj}")), Tensor::randn(&[d, d], fan(d), rng));
        }
        p.insert(layer_name(l, "attn.o"), Tensor::randn(&[d, d], fan(d) * resid, rng));
        p.insert(layer_name(l, "ln2.gain"), Tensor::filled(&[d], T::one()));
        p.insert(layer_name(l, "ln2.bias"), Tensor::zeros(&[d]));
        p.insert(layer_name(l, "ffn_in.weight"), Tensor::randn(&[d, f], fan(d), rng));
        p.insert(layer_name(l, "ffn_in.bias"), Tensor::zeros(&[f]));
        p.insert(layer_name(l, "ffn_out.weight"), Tensor::randn(&[f, d], fan(f) * resid, rng));
        p.insert(layer_name(l, "ffn_out.bias"), Tensor::zeros(&[d]));
    }
    p.insert("final_ln.gain", Tensor::filled(&[d], T::one()));
    p.insert("final_ln.bias", Tensor::zeros(&[d]));
    p.insert("lm_head", Tensor::randn(&[d, cfg.vocab_size], fan(d), rng));
    Ok(p)
}

/// True for parameters of the language model proper (not the connector and
/// not fine-tuning additions).
pub fn is_llm_param(name: &str) -> bool {
    name.starts_with("embed.") || name.starts_with("layer") || name.starts_with("final_ln.") || name == "lm_head"
}

/// Lazily records store tensors as tape leaves, once per name.
#[derive(Debug)]
pub struct Bound<'s, T> {
    store: &'s ParamStore<T>,
    vars: BTreeMap<String, Var>,
}

impl<'s, T: Scalar> Bound<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self { store, vars: BTreeMap::new() }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let v = tape.tensor(self.store.get(name)?)?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `var` for `name` instead of recording the stored tensor.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Gradients of every trainable tensor that took part in the pass.
    /// Trainable tensors the loss did not reach get zeros.
    pub fn gradients(&self, tape: &Tape<T>) -> Vec<(String, Vec<T>)> {
        self.vars
            .iter()
            .filter(|(n, _)| self.store.get(n).map(|t| t.requires_grad).unwrap_or(false))
            .map(|(n, v)| {
                let g = tape.grad(*v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); tape.value(*v).len()]);
                (n.clone(), g)
            })
            .collect()
    }
}
