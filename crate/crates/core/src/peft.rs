//! Baseline fine-tuning methods, freeze policies and trainable-parameter
//! accounting.
//!
//! Every method is initialized at the base model: LoRA with `B = 0`, the
//! adapter with a zero up-projection, OFT with a zero skew generator (so the
//! Cayley rotation is the identity) and IA3 with unit scaling vectors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{is_llm_param, layer_name};
use crate::model::{ModelConfig, ParamStore};
use crate::numeric::{Tape, Tensor, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::steering::{self, resolve_layer_set, LayerSet, SteeringConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Full,
    Lora,
    Adapter,
    Oft,
    Ia3,
    Mores,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Full, Method::Lora, Method::Adapter, Method::Oft, Method::Ia3, Method::Mores];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Lora => "lora",
            Method::Adapter => "adapter",
            Method::Oft => "oft",
            Method::Ia3 => "ia3",
            Method::Mores => "mores",
        }
    }

    /// Default learning rate: small parameter sets get the larger step.
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Method::Mores | Method::Ia3 => 1e-3,
            _ => 3e-4,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

/// Weight matrices a method can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Q,
    K,
    V,
    O,
    FfnIn,
    FfnOut,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Q => "q",
            Target::K => "k",
            Target::V => "v",
            Target::O => "o",
            Target::FfnIn => "ffn_in",
            Target::FfnOut => "ffn_out",
        }
    }

    /// Name of the base weight inside a layer.
    pub fn weight_name(self, layer: usize) -> String {
        match self {
            Target::Q | Target::K | Target::V | Target::O => layer_name(layer, &format!("attn.{}", self.as_str())),
            Target::FfnIn => layer_name(layer, "ffn_in.weight"),
            Target::FfnOut => layer_name(layer, "ffn_out.weight"),
        }
    }

    /// `(in, out)` extents of the base weight.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Target::Q | Target::K | Target::V | Target::O => (cfg.hidden_dim, cfg.hidden_dim),
            Target::FfnIn => (cfg.hidden_dim, cfg.ffn_dim),
            Target::FfnOut => (cfg.ffn_dim, cfg.hidden_dim),
        }
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "q" => Target::Q,
            "k" => Target::K,
            "v" => Target::V,
            "o" => Target::O,
            "ffn_in" => Target::FfnIn,
            "ffn_out" => Target::FfnOut,
            other => return Err(Error::config(format!("unknown target `{other}`"))),
        })
    }
}

/// Method selection and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeftConfig {
    pub method: Method,
    /// LoRA rank, adapter bottleneck, or OFT block size. Ignored by IA3 and
    /// full fine-tuning; MoReS reads its rank from `steering`.
    pub rank: usize,
    pub targets: Vec<Target>,
    /// LoRA scaling numerator; the update is scaled by `alpha / rank`.
    pub alpha: f64,
    pub layers: LayerSet,
    pub steering: SteeringConfig,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self::new(Method::Mores)
    }
}

impl PeftConfig {
    pub fn new(method: Method) -> Self {
        let rank = 4;
        Self {
            method,
            rank,
            targets: vec![Target::Q, Target::V],
            alpha: 2.0 * rank as f64,
            layers: LayerSet::All,
            steering: SteeringConfig::default(),
        }
    }

    pub fn mores(steering: SteeringConfig) -> Self {
        Self { steering, ..Self::new(Method::Mores) }
    }

    pub fn lora(rank: usize) -> Self {
        Self { rank, alpha: 2.0 * rank as f64, ..Self::new(Method::Lora) }
    }

    pub fn lora_scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        match self.method {
            Method::Mores => self.steering.validate(cfg.hidden_dim, cfg.num_layers)?,
            Method::Full | Method::Ia3 => {
                resolve_layer_set(&self.layers, cfg.num_layers)?;
            }
            Method::Lora | Method::Adapter | Method::Oft => {
                if self.rank == 0 {
                    return Err(Error::config(format!("{} needs rank >= 1", self.method)));
                }
                resolve_layer_set(&self.layers, cfg.num_layers)?;
                if self.method != Method::Adapter && self.targets.is_empty() {
                    return Err(Error::config(format!("{} needs at least one target", self.method)));
                }
                if self.method == Method::Oft {
                    for t in &self.targets {
                        let (inp, _) = t.dims(cfg);
                        if inp % self.rank != 0 {
                            return Err(Error::config(format!(
                                "OFT block size {} does not divide {} input width {inp}",
                                self.rank,
                                t.as_str()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Layers the method attaches to.
    pub fn resolved_layers(&self, cfg: &ModelConfig) -> Result<Vec<usize>> {
        match self.method {
            Method::Mores => resolve_layer_set(&self.steering.layers, cfg.num_layers),
            _ => resolve_layer_set(&self.layers, cfg.num_layers),
        }
    }
}

pub fn param_name(method: Method, layer: usize, name: &str) -> String {
    format!("peft.{}.layer{layer}.{name}", method.as_str())
}

/// Glob-style trainable set (`*` matches any run of characters); everything
/// else is frozen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub trainable: Vec<String>,
}

impl FreezePolicy {
    pub fn new<S: Into<String>>(globs: impl IntoIterator<Item = S>) -> Self {
        Self { trainable: globs.into_iter().map(Into::into).collect() }
    }

    pub fn for_method(method: Method) -> Self {
        match method {
            Method::Full => Self::llm(),
            Method::Mores => Self::new(["steer.*"]),
            m => Self::new([format!("peft.{}.*", m.as_str())]),
        }
    }

    /// Every language-model parameter (connector excluded).
    pub fn llm() -> Self {
        Self::new(["embed.*", "layer*", "final_ln.*", "lm_head"])
    }

    pub fn connector() -> Self {
        Self::new(["connector.*"])
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|g| glob_match(g, name))
    }

    /// Sets `requires_grad` on every tensor of the store.
    pub fn apply<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for (name, t) in store.iter_mut() {
            t.requires_grad = self.is_trainable(name);
        }
    }
}

pub fn glob_match(pattern: &str, text: &str) -> bool {
    match pattern.split_once('*') {
        None => pattern == text,
        Some((head, rest)) => {
            let Some(tail) = text.strip_prefix(head) else { return false };
            (0..=tail.len()).filter(|&i| tail.is_char_boundary(i)).any(|i| glob_match(rest, &tail[i..]))
        }
    }
}

/// Adds freshly initialized parameters for `cfg` to the store, replacing any
/// previous fine-tuning parameters. Returns the layers touched.
pub fn install<T: Scalar>(store: &mut ParamStore<T>, model: &ModelConfig, cfg: &PeftConfig, rng: &mut Rng) -> Result<Vec<usize>> {
    cfg.validate(model)?;
    store.remove_prefix("peft.");
    store.remove_prefix("steer.");
    let layers = cfg.resolved_layers(model)?;
    let d = model.hidden_dim;
    match cfg.method {
        Method::Full => {}
        Method::Mores => {
            steering::install(store, &cfg.steering, d, model.num_layers, rng)?;
        }
        Method::Lora => {
            for &l in &layers {
                for t in &cfg.targets {
                    let (inp, out) = t.dims(model);
                    let a = Tensor::randn(&[cfg.rank, inp], 1.0 / (inp as f64).sqrt(), rng);
                    store.insert(param_name(Method::Lora, l, &format!("{}.A", t.as_str())), a);
                    store.insert(param_name(Method::Lora, l, &format!("{}.B", t.as_str())), Tensor::zeros(&[out, cfg.rank]));
                }
            }
        }
        Method::Adapter => {
            for &l in &layers {
                let down = Tensor::randn(&[cfg.rank, d], 1.0 / (d as f64).sqrt(), rng);
                store.insert(param_name(Method::Adapter, l, "down"), down);
                store.insert(param_name(Method::Adapter, l, "up"), Tensor::zeros(&[d, cfg.rank]));
            }
        }
        Method::Oft => {
            for &l in &layers {
                for t in &cfg.targets {
                    let (inp, _) = t.dims(model);
                    let n = inp / cfg.rank * cfg.rank * (cfg.rank - 1) / 2;
                    // r = 1 blocks have no free parameters; keep a placeholder-free store.
                    if n > 0 {
                        store.insert(param_name(Method::Oft, l, &format!("{}.S", t.as_str())), Tensor::zeros(&[n]));
                    }
                }
            }
        }
        Method::Ia3 => {
            for &l in &layers {
                store.insert(param_name(Method::Ia3, l, "k"), Tensor::filled(&[d], T::one()));
                store.insert(param_name(Method::Ia3, l, "v"), Tensor::filled(&[d], T::one()));
                store.insert(param_name(Method::Ia3, l, "ff"), Tensor::filled(&[model.ffn_dim], T::one()));
            }
        }
    }
    FreezePolicy::for_method(cfg.method).apply(store);
    Ok(layers)
}

/// Closed-form trainable-parameter count of a method on a model shape.
pub fn count_trainable(model: &ModelConfig, cfg: &PeftConfig) -> Result<usize> {
    cfg.validate(model)?;
    let d = model.hidden_dim;
    let f = model.ffn_dim;
    let nl = cfg.resolved_layers(model)?.len();
    let r = cfg.rank;
    Ok(match cfg.method {
        Method::Full => {
            let per_layer = 2 * d + 4 * d * d + 2 * d + d * f + f + f * d + d;
            model.vocab_size * d + model.max_seq_len * d + model.num_layers * per_layer + 2 * d + d * model.vocab_size
        }
        Method::Mores => (2 * d * cfg.steering.rank + cfg.steering.rank) * nl,
        Method::Ia3 => (d + d + f) * nl,
        Method::Adapter => 2 * r * d * nl,
        Method::Lora => {
            let per_layer: usize = cfg.targets.iter().map(|t| {
                let (i, o) = t.dims(model);
                r * (i + o)
            }).sum();
            per_layer * nl
        }
        Method::Oft => {
            let per_layer: usize = cfg.targets.iter().map(|t| t.dims(model).0 / r * r * (r - 1) / 2).sum();
            per_layer * nl
        }
    })
}

/// Scalars the optimizer will update under the store's current freeze flags.
pub fn count_by_enumeration<T: Scalar>(store: &ParamStore<T>, method: Method) -> usize {
    match method {
        Method::Full => store.count_where(|n| is_llm_param(n) && store.get(n).map(|t| t.requires_grad).unwrap_or(false)),
        _ => store.trainable_count(),
    }
}

// ----------------------------------------------------------------------
// Forward transforms on a tape. Activations are row vectors: `x` is
// `[n × in]` and a base weight `W0` is stored `[in × out]`.
// ----------------------------------------------------------------------

/// `x + relu(x·W_downᵀ)·W_upᵀ` with `W_down: [r × D]`, `W_up: [D × r]`.
pub fn adapter_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, down: Var, up: Var) -> Result<Var> {
    let z = tape.matmul_t(x, down)?;
    let a = tape.relu(z)?;
    let y = tape.matmul_t(a, up)?;
    tape.add(x, y)
}

/// `x·W0 + scale·(x·Aᵀ)·Bᵀ` with `A: [r × in]`, `B: [out × r]`; the row
/// form of `(W0 + scale·BA)x`.
pub fn lora_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, w0: Var, b: Var, a: Var, scale: T) -> Result<Var> {
    let base = tape.matmul(x, w0)?;
    let low = tape.matmul_t(x, a)?;
    let up = tape.matmul_t(low, b)?;
    let scaled = tape.scale(up, scale)?;
    tape.add(base, scaled)
}

/// `(x·R)·W0`, the row form of `z = (R·W0)ᵀx`, with `R` the block-diagonal
/// Cayley rotation generated by `skew` (block size `block`).
pub fn oft_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, w0: Var, skew: Option<Var>, block: usize) -> Result<Var> {
    let Some(skew) = skew else { return tape.matmul(x, w0) };
    let dim = tape.shape(w0)[0];
    let r = tape.cayley(skew, dim, block)?;
    let rotated = tape.matmul(x, r)?;
    tape.matmul(rotated, w0)
}

/// Single-head attention with IA3 rescaling:
/// `softmax(Q·(v_k ⊙ K)ᵀ / sqrt(d_k)) · (v_v ⊙ V)`, unmasked.
pub fn ia3_attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, v_k: Var, v_v: Var) -> Result<Var> {
    let dk = *tape.shape(k).last().unwrap_or(&1);
    let ks = tape.mul_row(k, v_k)?;
    let vs = tape.mul_row(v, v_v)?;
    let scores = tape.matmul_t(q, ks)?;
    let scaled = tape.scale(scores, T::one() / T::from_usize(dk).unwrap().sqrt())?;
    let p = tape.softmax_rows(scaled)?;
    tape.matmul(p, vs)
}

/// `v_ff ⊙ u` on every row of the FFN activation.
pub fn ia3_ffn<T: Scalar>(tape: &mut Tape<T>, u: Var, v_ff: Var) -> Result<Var> {
    tape.mul_row(u, v_ff)
}
