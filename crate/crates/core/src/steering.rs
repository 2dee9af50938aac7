//! Subspace representation steering of visual hidden states.
//!
//! For a selected layer with basis `U ∈ R^{D×d}` (orthonormal columns), map
//! `M ∈ R^{d×D}` and bias `b ∈ R^d`, a visual hidden vector is updated as
//!
//! ```text
//! φ(h)  = M·h + b − Uᵀ·h
//! h'    = h + U·φ(h)
//! ```
//!
//! The down-projection is tied to `Uᵀ`, so each steered layer trains
//! `2·D·d + d` scalars. Parameters start at `M = Uᵀ`, `b = 0`, which makes
//! `φ ≡ 0` and the steered model identical to the base model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::{HookCtx, LayerHook};
use crate::model::ParamStore;
use crate::numeric::linalg;
use crate::numeric::{Tape, Tensor, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Which decoder layers receive a steering transform.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSet {
    All,
    /// Every `k`-th layer starting at 0.
    Stride(usize),
    /// First half of the layers.
    Shallow,
    /// Centered half.
    Middle,
    /// Last half.
    Deep,
    Explicit(Vec<usize>),
}

impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSet::All => f.write_str("all"),
            LayerSet::Stride(k) => write!(f, "stride{k}"),
            LayerSet::Shallow => f.write_str("shallow"),
            LayerSet::Middle => f.write_str("middle"),
            LayerSet::Deep => f.write_str("deep"),
            LayerSet::Explicit(v) => {
                let s: Vec<String> = v.iter().map(usize::to_string).collect();
                f.write_str(&s.join(","))
            }
        }
    }
}

impl TryFrom<String> for LayerSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerSet> for String {
    fn from(l: LayerSet) -> String {
        l.to_string()
    }
}

impl FromStr for LayerSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "all" => LayerSet::All,
            "shallow" => LayerSet::Shallow,
            "middle" => LayerSet::Middle,
            "deep" => LayerSet::Deep,
            _ if s.starts_with("stride") => {
                let k: usize = s["stride".len()..]
                    .parse()
                    .map_err(|_| Error::config(format!("bad stride in layer set `{s}`")))?;
                if k == 0 {
                    return Err(Error::config("layer stride must be at least 1"));
                }
                LayerSet::Stride(k)
            }
            _ => {
                let v = s
                    .split(',')
                    .map(|x| x.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::config(format!("unknown layer set `{s}`")))?;
                LayerSet::Explicit(v)
            }
        })
    }
}

/// Sorted layer indices for a strategy on a `num_layers`-deep model.
///
/// Bands scale with depth: with `half = ceil(L/2)`, shallow is `[0, half)`,
/// deep is `[L − half, L)` and middle is `[(L − half)/2, (L − half)/2 + half)`.
/// For 32 layers these are 0–15, 16–31 and 8–23.
pub fn resolve_layer_set(set: &LayerSet, num_layers: usize) -> Result<Vec<usize>> {
    if num_layers == 0 {
        return Err(Error::config("model has no layers"));
    }
    let half = num_layers.div_ceil(2);
    let layers: Vec<usize> = match set {
        LayerSet::All => (0..num_layers).collect(),
        LayerSet::Stride(k) => (0..num_layers).step_by((*k).max(1)).collect(),
        LayerSet::Shallow => (0..half).collect(),
        LayerSet::Deep => (num_layers - half..num_layers).collect(),
        LayerSet::Middle => {
            let start = (num_layers - half) / 2;
            (start..start + half).collect()
        }
        LayerSet::Explicit(v) => {
            if let Some(&bad) = v.iter().find(|&&l| l >= num_layers) {
                return Err(Error::OutOfRange { what: "steering layer", index: bad, size: num_layers });
            }
            let mut v = v.clone();
            v.sort_unstable();
            v.dedup();
            v
        }
    };
    Ok(layers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringConfig {
    /// Subspace rank `d`.
    pub rank: usize,
    /// Fraction of visual tokens steered, in (0, 1].
    pub ratio: f64,
    pub layers: LayerSet,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self { rank: 1, ratio: 1.0, layers: LayerSet::All }
    }
}

impl SteeringConfig {
    pub fn validate(&self, hidden_dim: usize, num_layers: usize) -> Result<()> {
        if self.rank == 0 || self.rank > hidden_dim {
            return Err(Error::config(format!("steering rank {} outside 1..={hidden_dim}", self.rank)));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config(format!("steered token ratio {} outside (0, 1]", self.ratio)));
        }
        resolve_layer_set(&self.layers, num_layers)?;
        Ok(())
    }
}

/// Deterministic uniform-stride choice of `K = max(1, round(ρ·n))` visual
/// positions: element `⌊j·n/K⌋` of the ordered list for `j = 0..K`.
pub fn select_steered_tokens(visual_positions: &[usize], ratio: f64) -> Result<Vec<usize>> {
    let n = visual_positions.len();
    if n == 0 {
        return Err(Error::config("steering requested but the sequence has no visual tokens"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("steered token ratio {ratio} outside (0, 1]")));
    }
    let k = ((ratio * n as f64).round() as usize).clamp(1, n);
    Ok((0..k).map(|j| visual_positions[j * n / k]).collect())
}

pub fn param_name(layer: usize, which: &str) -> String {
    format!("steer.layer{layer}.{which}")
}

/// One layer's steering parameters as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringLayer<T> {
    /// `D × d`, orthonormal columns.
    pub basis: Tensor<T>,
    /// `d × D`.
    pub map: Tensor<T>,
    /// `d`.
    pub bias: Tensor<T>,
}

impl<T: Scalar> SteeringLayer<T> {
    /// Random orthonormal basis with `M = Uᵀ` and `b = 0`.
    pub fn init(hidden_dim: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        let basis = random_orthonormal(hidden_dim, rank, rng)?;
        let map = basis.transpose();
        Ok(Self { basis, map, bias: Tensor::zeros(&[rank]) })
    }

    pub fn hidden_dim(&self) -> usize {
        self.basis.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.basis.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.basis.len() + self.map.len() + self.bias.len()
    }
}

pub fn random_orthonormal<T: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    for _ in 0..8 {
        let mut u = Tensor::<T>::randn(&[rows, cols], 1.0, rng);
        if linalg::orthonormalize_columns(u.data_mut(), rows, cols).is_ok() {
            return Ok(u);
        }
    }
    Err(Error::RankDeficient { column: 0 })
}

/// `h + U·(M·h + b − Uᵀ·h)` for a stack of row vectors `h` (`[n × D]`).
///
/// `M·h − Uᵀ·h` is evaluated as `h·(Mᵀ − U)` so that `M = Uᵀ` yields an
/// exactly zero update.
pub fn mores_apply<T: Scalar>(tape: &mut Tape<T>, h: Var, basis: Var, map: Var, bias: Var) -> Result<Var> {
    let delta = mores_delta(tape, h, basis, map, bias)?;
    tape.add(h, delta)
}

/// Steering update `U·φ(h)` alone, `[n × D]`.
pub fn mores_delta<T: Scalar>(tape: &mut Tape<T>, h: Var, basis: Var, map: Var, bias: Var) -> Result<Var> {
    let (hd, ud, md) = (tape.shape(h).to_vec(), tape.shape(basis).to_vec(), tape.shape(map).to_vec());
    let dim = *hd.last().unwrap_or(&0);
    if ud.len() != 2 || md.len() != 2 || ud[0] != dim || md[1] != dim || md[0] != ud[1] || tape.value(bias).len() != ud[1] {
        return Err(Error::shape(
            "mores_apply",
            format!("h {hd:?}, U {ud:?}, M {md:?}, b {}", tape.value(bias).len()),
        ));
    }
    // Mᵀ − U, both D × d
    let map_t = tape.transpose(map)?;
    let coupling = tape.sub(map_t, basis)?;
    let proj = tape.matmul(h, coupling)?;
    let phi = tape.add_row(proj, bias)?;
    tape.matmul_t(phi, basis)
}

/// Plain-value steering of a single vector, outside any tape.
pub fn mores_apply_vec<T: Scalar>(h: &[T], layer: &SteeringLayer<T>) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let hv = tape.constant(&[1, h.len()], h.to_vec())?;
    let u = tape.tensor(&layer.basis)?;
    let m = tape.tensor(&layer.map)?;
    let b = tape.tensor(&layer.bias)?;
    let out = mores_apply(&mut tape, hv, u, m, b)?;
    Ok(tape.value(out).to_vec())
}

/// Restores orthonormal columns after an optimizer step. On collapse the
/// basis is re-seeded from `rng` and the error is returned for reporting.
pub fn reorthonormalize<T: Scalar>(basis: &mut Tensor<T>, rng: &mut Rng) -> Result<()> {
    let (rows, cols) = (basis.shape()[0], basis.shape()[1]);
    let mut work = basis.data().to_vec();
    match linalg::orthonormalize_columns(&mut work, rows, cols) {
        Ok(()) => {
            basis.data_mut().copy_from_slice(&work);
            Ok(())
        }
        Err(e) => {
            basis.data_mut().copy_from_slice(random_orthonormal::<T>(rows, cols, rng)?.data());
            Err(e)
        }
    }
}

/// Adds freshly initialized steering parameters for every resolved layer.
pub fn install<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &SteeringConfig,
    hidden_dim: usize,
    num_layers: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    cfg.validate(hidden_dim, num_layers)?;
    let layers = resolve_layer_set(&cfg.layers, num_layers)?;
    store.remove_prefix("steer.");
    for &l in &layers {
        let sl = SteeringLayer::<T>::init(hidden_dim, cfg.rank, rng)?;
        store.insert(param_name(l, "U"), sl.basis);
        store.insert(param_name(l, "M"), sl.map);
        store.insert(param_name(l, "b"), sl.bias);
    }
    Ok(layers)
}

pub fn layer_params<T: Scalar>(store: &ParamStore<T>, layer: usize) -> Result<SteeringLayer<T>> {
    Ok(SteeringLayer {
        basis: store.get(&param_name(layer, "U"))?.clone(),
        map: store.get(&param_name(layer, "M"))?.clone(),
        bias: store.get(&param_name(layer, "b"))?.clone(),
    })
}

/// Largest `max|UᵀU − I|` over the installed steering layers.
pub fn max_constraint_defect<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .filter(|(n, _)| n.starts_with("steer.") && n.ends_with(".U"))
        .map(|(_, u)| linalg::orthonormality_defect(u.data(), u.shape()[0], u.shape()[1]).to_f64_lossy())
        .fold(0.0, f64::max)
}

/// Re-orthonormalizes every installed basis; returns the layers whose basis
/// collapsed and had to be re-seeded.
pub fn reorthonormalize_all<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng) -> Vec<String> {
    let mut reseeded = Vec::new();
    for (name, t) in store.iter_mut() {
        if name.starts_with("steer.") && name.ends_with(".U") && reorthonormalize(t, rng).is_err() {
            reseeded.push(name.clone());
        }
    }
    reseeded
}

/// Layer-input hook applying the steering transform to selected visual
/// positions of every sequence in the batch.
#[derive(Debug, Clone)]
pub struct SteeringHook {
    pub config: SteeringConfig,
    layers: Vec<usize>,
    pub enabled: bool,
}

impl SteeringHook {
    pub fn new(config: SteeringConfig, num_layers: usize) -> Result<Self> {
        let layers = resolve_layer_set(&config.layers, num_layers)?;
        Ok(Self { config, layers, enabled: true })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn disabled(mut self) -> Self {
        self.enabled = false;
        self
    }
}

impl<T: Scalar> LayerHook<T> for SteeringHook {
    fn enabled(&self) -> bool {
        self.enabled
    }

    fn on_layer_input(&self, layer: usize, ctx: &mut HookCtx<'_, '_, T>, hidden: Var) -> Result<Var> {
        if !self.layers.contains(&layer) {
            return Ok(hidden);
        }
        let mut rows = Vec::new();
        for seq in ctx.layout.sequences.iter().filter(|s| !s.visual_positions.is_empty()) {
            let selected = select_steered_tokens(&seq.visual_positions, self.config.ratio)?;
            rows.extend(selected.into_iter().map(|p| seq.start + p));
        }
        if rows.is_empty() {
            return Ok(hidden);
        }
        let u = ctx.params.var(ctx.tape, &param_name(layer, "U"))?;
        let m = ctx.params.var(ctx.tape, &param_name(layer, "M"))?;
        let b = ctx.params.var(ctx.tape, &param_name(layer, "b"))?;
        let picked = ctx.tape.gather_rows(hidden, &rows)?;
        let delta = mores_delta(ctx.tape, picked, u, m, b)?;
        ctx.tape.scatter_add_rows(hidden, delta, &rows)
    }
}
