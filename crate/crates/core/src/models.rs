//! Contextual vector fields.
//!
//! A [`ThreeNetParams`] model computes
//! `f(x, ξ) = main_net(concat(state_net(x), context_net(ξ)))`.
//! [`TaylorField`] evaluates the order-`k` Taylor expansion of `f` in `ξ`
//! around an expansion context `ξ_j`, evaluated at a target context `ξ_e`:
//!
//! - `k = 0`: `f(x, ξ_e)`
//! - `k = 1`: `f(x, ξ_j) + ∇_ξ f(x, ξ_j)(ξ_e − ξ_j)`
//! - `k = 2`: `f(x, ξ_j) + 1.5 g(ξ_j) + 0.5 ∇g(ξ_j)(ξ_e − ξ_j)` with
//!   `g(ξ̄) = ∇_ξ f(x, ξ̄)(ξ_e − ξ̄)`
//!
//! The first main-net layer is split into a state block and a context block.
//! The context block, with all its forward-mode tangents, does not depend on
//! `x` and is computed once per field; every subsequent evaluation along a
//! trajectory only pays for the state network and the remaining main layers.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, Dual, Operand};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Swish,
    Tanh,
    /// `x²`; yields fields that are exactly quadratic in their inputs.
    Square,
    Identity,
}

impl Activation {
    pub fn apply<T: Operand>(self, x: &T) -> T {
        match self {
            Activation::Swish => x.swish(),
            Activation::Tanh => x.tanh(),
            Activation::Square => x.square(),
            Activation::Identity => x.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Dense network: `x → act(x W₀ + b₀) → … → x W_L + b_L` (last layer linear).
/// Weights are stored `[in, out]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub widths: Vec<usize>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub activation: Activation,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn glorot(widths: &[usize], activation: Activation, rng: &mut ChaCha8Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(ModelError::Architecture(format!(
                "an MLP needs at least input and output widths, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(ModelError::Architecture(format!(
                "zero-width layer in {widths:?}"
            )));
        }
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            weights.push(Tensor::new(vec![fan_in, fan_out], data)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    /// Parameter tensors in storage order: `W₀, b₀, W₁, b₁, …`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn replace(&self, tensors: &mut impl Iterator<Item = Tensor>) -> Result<Self> {
        let mut out = self.clone();
        for (w, b) in out.weights.iter_mut().zip(out.biases.iter_mut()) {
            for slot in [w, b] {
                let t = tensors
                    .next()
                    .ok_or_else(|| ModelError::Architecture("too few parameter tensors".into()))?;
                if t.shape() != slot.shape() {
                    return Err(DiffError::shape("replace", slot.shape(), t.shape()).into());
                }
                *slot = t;
            }
        }
        Ok(out)
    }

    fn view<T: Operand>(&self, leaves: &mut impl Iterator<Item = T>) -> NetView<T> {
        let layers = (0..self.weights.len())
            .map(|_| {
                let w = leaves.next().expect("one leaf per tensor");
                let b = leaves.next().expect("one leaf per tensor");
                (w, b)
            })
            .collect();
        NetView {
            layers,
            activation: self.activation,
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        let bad = |msg: String| Err(ModelError::Architecture(format!("{name}: {msg}")));
        if self.widths.len() != self.weights.len() + 1 || self.weights.len() != self.biases.len() {
            return bad("layer count does not match widths".into());
        }
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.shape() != [self.widths[i], self.widths[i + 1]] || b.shape() != [self.widths[i + 1]] {
                return bad(format!("layer {i} has shapes {:?}/{:?}", w.shape(), b.shape()));
            }
        }
        Ok(())
    }
}

/// Layers of an MLP in some differentiation context.
#[derive(Debug, Clone)]
pub struct NetView<T> {
    pub layers: Vec<(T, T)>,
    pub activation: Activation,
}

impl<T: Operand> NetView<T> {
    /// Forward pass over a batch `[B, in]`.
    pub fn forward(&self, x: &T) -> std::result::Result<T, DiffError> {
        let mut h = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = self.activation.apply(&h);
            }
            h = h.matmul(w)?.add_row(b)?;
        }
        Ok(h)
    }

    fn map<U>(&self, f: impl Fn(&T) -> U) -> NetView<U> {
        NetView {
            layers: self.layers.iter().map(|(w, b)| (f(w), f(b))).collect(),
            activation: self.activation,
        }
    }
}

/// Layer widths of the three networks. Hidden lists exclude input and output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreeNetConfig {
    pub d: usize,
    pub d_xi: usize,
    pub state_hidden: Vec<usize>,
    pub state_out: usize,
    pub context_hidden: Vec<usize>,
    pub context_out: usize,
    pub main_hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ThreeNetConfig {
    /// Small equal-width layout: one hidden layer per encoder, two in the main net.
    pub fn compact(d: usize, d_xi: usize, width: usize) -> Self {
        Self {
            d,
            d_xi,
            state_hidden: vec![width],
            state_out: width,
            context_hidden: vec![width],
            context_out: width,
            main_hidden: vec![width, width],
            activation: Activation::Swish,
        }
    }

    fn widths(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let chain = |input: usize, hidden: &[usize], out: usize| {
            let mut w = vec![input];
            w.extend_from_slice(hidden);
            w.push(out);
            w
        };
        (
            chain(self.d, &self.state_hidden, self.state_out),
            chain(self.d_xi, &self.context_hidden, self.context_out),
            chain(self.state_out + self.context_out, &self.main_hidden, self.d),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThreeNetParams {
    pub d: usize,
    pub d_xi: usize,
    pub seed: u64,
    pub state_net: MlpParams,
    pub context_net: MlpParams,
    pub main_net: MlpParams,
}

/// Seeded Glorot initialization of the three networks (state, context, main, in that order).
pub fn init_three_net(config: &ThreeNetConfig, seed: u64) -> Result<ThreeNetParams> {
    if config.d == 0 || config.d_xi == 0 {
        return Err(ModelError::Architecture(format!(
            "state and context dimensions must be positive (d = {}, d_xi = {})",
            config.d, config.d_xi
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sw, cw, mw) = config.widths();
    let p = ThreeNetParams {
        d: config.d,
        d_xi: config.d_xi,
        seed,
        state_net: MlpParams::glorot(&sw, config.activation, &mut rng)?,
        context_net: MlpParams::glorot(&cw, config.activation, &mut rng)?,
        main_net: MlpParams::glorot(&mw, config.activation, &mut rng)?,
    };
    p.validate()?;
    Ok(p)
}

impl ThreeNetParams {
    pub fn validate(&self) -> Result<()> {
        self.state_net.check("state_net")?;
        self.context_net.check("context_net")?;
        self.main_net.check("main_net")?;
        let err = |m: String| Err(ModelError::Architecture(m));
        if self.state_net.input_dim() != self.d {
            return err(format!("state_net input {} != d {}", self.state_net.input_dim(), self.d));
        }
        if self.context_net.input_dim() != self.d_xi {
            return err(format!(
                "context_net input {} != d_xi {}",
                self.context_net.input_dim(),
                self.d_xi
            ));
        }
        let joint = self.state_net.output_dim() + self.context_net.output_dim();
        if self.main_net.input_dim() != joint {
            return err(format!(
                "main_net input {} != state + context widths {joint}",
                self.main_net.input_dim()
            ));
        }
        if self.main_net.output_dim() != self.d {
            return err(format!("main_net output {} != d {}", self.main_net.output_dim(), self.d));
        }
        Ok(())
    }

    pub fn config(&self) -> ThreeNetConfig {
        let hidden = |m: &MlpParams| m.widths[1..m.widths.len() - 1].to_vec();
        ThreeNetConfig {
            d: self.d,
            d_xi: self.d_xi,
            state_hidden: hidden(&self.state_net),
            state_out: self.state_net.output_dim(),
            context_hidden: hidden(&self.context_net),
            context_out: self.context_net.output_dim(),
            main_hidden: hidden(&self.main_net),
            activation: self.main_net.activation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.state_net.num_params() + self.context_net.num_params() + self.main_net.num_params()
    }

    /// All parameter tensors: state_net, context_net, main_net, each `W₀, b₀, …`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.state_net.tensors();
        v.extend(self.context_net.tensors());
        v.extend(self.main_net.tensors());
        v
    }

    /// Same architecture with new parameter tensors (in [`Self::tensors`] order).
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        let n = tensors.len();
        if n != self.tensors().len() {
            return Err(ModelError::Architecture(format!(
                "expected {} parameter tensors, got {n}",
                self.tensors().len()
            )));
        }
        let mut it = tensors.into_iter();
        Ok(Self {
            state_net: self.state_net.replace(&mut it)?,
            context_net: self.context_net.replace(&mut it)?,
            main_net: self.main_net.replace(&mut it)?,
            ..self.clone()
        })
    }

    /// View with each parameter tensor supplied by `leaves` (in [`Self::tensors`] order).
    pub fn view<T: Operand>(&self, leaves: Vec<T>) -> ThreeNetView<T> {
        assert_eq!(leaves.len(), self.tensors().len(), "one leaf per parameter tensor");
        let mut it = leaves.into_iter();
        ThreeNetView {
            state: self.state_net.view(&mut it),
            context: self.context_net.view(&mut it),
            main: self.main_net.view(&mut it),
            state_out: self.state_net.output_dim(),
        }
    }

    /// Plain-tensor view (no differentiation).
    pub fn tensor_view(&self) -> ThreeNetView<Tensor> {
        self.view(self.tensors().into_iter().cloned().collect())
    }

    /// Replace the final main-net layer with zeros; useful as a null field.
    pub fn zero_output(&mut self) {
        let last = self.main_net.weights.len() - 1;
        self.main_net.weights[last] = Tensor::zeros(self.main_net.weights[last].shape());
        self.main_net.biases[last] = Tensor::zeros(self.main_net.biases[last].shape());
    }
}

/// The three networks in some differentiation context `T`.
#[derive(Debug, Clone)]
pub struct ThreeNetView<T> {
    pub state: NetView<T>,
    pub context: NetView<T>,
    pub main: NetView<T>,
    state_out: usize,
}

/// A Taylor order as a type: how contexts enter and how the output collapses.
pub trait Expansion<T: Operand> {
    type U: Operand;
    fn wrap(t: &T) -> Self::U;
    fn context_input(xi_e: &T, xi_j: &T) -> std::result::Result<Self::U, DiffError>;
    fn collapse(u: Self::U) -> std::result::Result<T, DiffError>;
}

pub struct Order0;
pub struct Order1;
pub struct Order2;

impl<T: Operand> Expansion<T> for Order0 {
    type U = T;
    fn wrap(t: &T) -> T {
        t.clone()
    }
    fn context_input(xi_e: &T, _xi_j: &T) -> std::result::Result<T, DiffError> {
        Ok(xi_e.clone())
    }
    fn collapse(u: T) -> std::result::Result<T, DiffError> {
        Ok(u)
    }
}

impl<T: Operand> Expansion<T> for Order1 {
    type U = Dual<T>;
    fn wrap(t: &T) -> Dual<T> {
        Dual::constant(t.clone())
    }
    fn context_input(xi_e: &T, xi_j: &T) -> std::result::Result<Dual<T>, DiffError> {
        Ok(Dual::new(xi_j.clone(), xi_e.sub(xi_j)?))
    }
    fn collapse(u: Dual<T>) -> std::result::Result<T, DiffError> {
        match u.tangent {
            Some(t) => u.primal.add(&t),
            None => Ok(u.primal),
        }
    }
}

impl<T: Operand> Expansion<T> for Order2 {
    type U = Dual<Dual<T>>;
    fn wrap(t: &T) -> Dual<Dual<T>> {
        Dual::constant(Dual::constant(t.clone()))
    }
    fn context_input(xi_e: &T, xi_j: &T) -> std::result::Result<Dual<Dual<T>>, DiffError> {
        // outer level perturbs the expansion point along Δ; inner level
        // carries the point-dependent direction ξ_e − ξ̄
        let delta = xi_e.sub(xi_j)?;
        let outer = Dual::new(xi_j.clone(), delta);
        let direction = Dual::constant(xi_e.clone()).sub(&outer)?;
        Ok(Dual::new(outer, direction))
    }
    fn collapse(u: Dual<Dual<T>>) -> std::result::Result<T, DiffError> {
        let value = u.primal.primal;
        let Some(g) = u.tangent else {
            return Ok(value);
        };
        let mut out = value.add(&g.primal.scale(1.5))?;
        if let Some(dg) = g.tangent {
            out = out.add(&dg.scale(0.5))?;
        }
        Ok(out)
    }
}

/// Per-row cached context contribution plus the networks needed per state evaluation.
#[derive(Debug, Clone)]
pub struct Expanded<T, U> {
    state: NetView<T>,
    w_state: T,
    ctx_pre: U,
    rest: NetView<U>,
}

impl<T: Operand> ThreeNetView<T> {
    /// `f(x, ξ)` on batches `x: [B, d]`, `ξ: [B, d_ξ]`, via explicit concatenation.
    pub fn vf(&self, x: &T, xi: &T) -> std::result::Result<T, DiffError> {
        let s = self.state.forward(x)?;
        let c = self.context.forward(xi)?;
        self.main.forward(&T::concat(&[s, c], 1)?)
    }

    fn expanded<E: Expansion<T>>(
        &self,
        xi_e: &T,
        xi_j: &T,
        rows: Option<&[usize]>,
    ) -> std::result::Result<Expanded<T, E::U>, DiffError> {
        let (w0, b0) = &self.main.layers[0];
        let joint = w0.shape()[0];
        let w_state = w0.slice(0, 0, self.state_out)?;
        let w_ctx = w0.slice(0, self.state_out, joint)?;
        let ctx_net = self.context.map(E::wrap);
        let input = E::context_input(xi_e, xi_j)?;
        let c = ctx_net.forward(&input)?;
        let mut ctx_pre = c.matmul(&E::wrap(&w_ctx))?.add_row(&E::wrap(b0))?;
        if let Some(rows) = rows {
            ctx_pre = ctx_pre.gather_rows(rows)?;
        }
        let rest = NetView {
            layers: self.main.layers[1..]
                .iter()
                .map(|(w, b)| (E::wrap(w), E::wrap(b)))
                .collect(),
            activation: self.main.activation,
        };
        Ok(Expanded {
            state: self.state.clone(),
            w_state,
            ctx_pre,
            rest,
        })
    }

    /// Taylor-expanded field for a batch of (target, expansion) context pairs.
    ///
    /// `xi_e`, `xi_j`: `[P, d_ξ]`. With `rows = Some(idx)` the field acts on a
    /// state batch of `idx.len()` rows, row `r` using pair `idx[r]`; otherwise
    /// the state batch has `P` rows.
    pub fn taylor_field(
        &self,
        k: TaylorOrder,
        xi_e: &T,
        xi_j: &T,
        rows: Option<&[usize]>,
    ) -> std::result::Result<TaylorField<T>, DiffError> {
        Ok(match k {
            TaylorOrder::Zero => TaylorField::K0(self.expanded::<Order0>(xi_e, xi_j, rows)?),
            TaylorOrder::One => TaylorField::K1(self.expanded::<Order1>(xi_e, xi_j, rows)?),
            TaylorOrder::Two => TaylorField::K2(self.expanded::<Order2>(xi_e, xi_j, rows)?),
        })
    }
}

impl<T: Operand, U: Operand> Expanded<T, U> {
    fn eval<E: Expansion<T, U = U>>(&self, x: &T) -> std::result::Result<T, DiffError> {
        let s = self.state.forward(x)?.matmul(&self.w_state)?;
        let mut z = self.ctx_pre.add(&E::wrap(&s))?;
        for (w, b) in &self.rest.layers {
            z = self.rest.activation.apply(&z).matmul(w)?.add_row(b)?;
        }
        E::collapse(z)
    }
}

/// A vector field `x ↦ T^k f(x, ξ_e; ξ_j)` with the context part precomputed.
#[derive(Debug, Clone)]
pub enum TaylorField<T: Operand> {
    K0(Expanded<T, T>),
    K1(Expanded<T, Dual<T>>),
    K2(Expanded<T, Dual<Dual<T>>>),
}

impl<T: Operand> TaylorField<T> {
    pub fn eval(&self, x: &T) -> std::result::Result<T, DiffError> {
        match self {
            TaylorField::K0(e) => e.eval::<Order0>(x),
            TaylorField::K1(e) => e.eval::<Order1>(x),
            TaylorField::K2(e) => e.eval::<Order2>(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum TaylorOrder {
    Zero,
    One,
    Two,
}

impl TryFrom<u8> for TaylorOrder {
    type Error = String;
    fn try_from(k: u8) -> std::result::Result<Self, String> {
        match k {
            0 => Ok(TaylorOrder::Zero),
            1 => Ok(TaylorOrder::One),
            2 => Ok(TaylorOrder::Two),
            _ => Err(format!("taylor order must be 0, 1 or 2, got {k}")),
        }
    }
}

impl From<TaylorOrder> for u8 {
    fn from(k: TaylorOrder) -> u8 {
        match k {
            TaylorOrder::Zero => 0,
            TaylorOrder::One => 1,
            TaylorOrder::Two => 2,
        }
    }
}

fn as_row(v: &Tensor, n: usize, what: &str) -> Result<Tensor> {
    if v.shape() != [n] {
        return Err(DiffError::shape(
            match what {
                "x" => "vf_eval(x)",
                _ => "vf_eval(xi)",
            },
            &[n],
            v.shape(),
        )
        .into());
    }
    Ok(v.reshape(&[1, n])?)
}

/// `f_θ(x, ξ)` for single vectors.
pub fn vf_eval(params: &ThreeNetParams, x: &Tensor, xi: &Tensor) -> Result<Tensor> {
    let x = as_row(x, params.d, "x")?;
    let xi = as_row(xi, params.d_xi, "xi")?;
    let out = params.tensor_view().vf(&x, &xi)?;
    Ok(out.reshape(&[params.d])?)
}

/// Order-`k` Taylor expansion of `f_θ(x, ·)` around `ξ_j`, evaluated at `ξ_e`.
pub fn taylor_eval(
    params: &ThreeNetParams,
    x: &Tensor,
    xi_e: &Tensor,
    xi_j: &Tensor,
    k: TaylorOrder,
) -> Result<Tensor> {
    let x = as_row(x, params.d, "x")?;
    let xe = as_row(xi_e, params.d_xi, "xi")?;
    let xj = as_row(xi_j, params.d_xi, "xi")?;
    let field = params.tensor_view().taylor_field(k, &xe, &xj, None)?;
    Ok(field.eval(&x)?.reshape(&[params.d])?)
}

/// Context-free vector field `main_net(state_net(x))` for the baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFreeParams {
    pub d: usize,
    pub seed: u64,
    pub state_net: MlpParams,
    pub main_net: MlpParams,
}

impl ContextFreeParams {
    pub fn init(
        d: usize,
        state_hidden: &[usize],
        state_out: usize,
        main_hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sw = vec![d];
        sw.extend_from_slice(state_hidden);
        sw.push(state_out);
        let mut mw = vec![state_out];
        mw.extend_from_slice(main_hidden);
        mw.push(d);
        Ok(Self {
            d,
            seed,
            state_net: MlpParams::glorot(&sw, activation, &mut rng)?,
            main_net: MlpParams::glorot(&mw, activation, &mut rng)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.state_net.num_params() + self.main_net.num_params()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.state_net.tensors();
        v.extend(self.main_net.tensors());
        v
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        let mut it = tensors.into_iter();
        Ok(Self {
            state_net: self.state_net.replace(&mut it)?,
            main_net: self.main_net.replace(&mut it)?,
            ..self.clone()
        })
    }

    pub fn view<T: Operand>(&self, leaves: Vec<T>) -> ContextFreeView<T> {
        let mut it = leaves.into_iter();
        ContextFreeView {
            state: self.state_net.view(&mut it),
            main: self.main_net.view(&mut it),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContextFreeView<T> {
    pub state: NetView<T>,
    pub main: NetView<T>,
}

impl<T: Operand> ContextFreeView<T> {
    pub fn eval(&self, x: &T) -> std::result::Result<T, DiffError> {
        self.main.forward(&self.state.forward(x)?)
    }
}

// ---------------------------------------------------------------------------
// checkpoints

const CHECKPOINT_FORMAT: &str = "ncf-checkpoint";
const WEIGHTS_FILE: &str = "weights.bin";
const MANIFEST_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct MlpManifest {
    widths: Vec<usize>,
    activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ModelManifest {
    ThreeNet {
        d: usize,
        d_xi: usize,
        state_net: MlpManifest,
        context_net: MlpManifest,
        main_net: MlpManifest,
    },
    ContextFree {
        d: usize,
        state_net: MlpManifest,
        main_net: MlpManifest,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct CheckpointManifest {
    format: String,
    version: u32,
    dtype: String,
    seed: u64,
    n_params: usize,
    model: ModelManifest,
    weights_file: String,
    crc64: String,
}

/// A saved model of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    ThreeNet(ThreeNetParams),
    ContextFree(ContextFreeParams),
}

impl Model {
    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Model::ThreeNet(p) => p.tensors(),
            Model::ContextFree(p) => p.tensors(),
        }
    }

    /// Stable content hash of the architecture and every weight bit.
    pub fn fingerprint(&self) -> u64 {
        let mut digest = crate::CRC64.digest();
        for t in self.tensors() {
            for s in t.shape() {
                digest.update(&(*s as u64).to_le_bytes());
            }
            for v in t.data() {
                digest.update(&v.to_le_bytes());
            }
        }
        digest.finalize()
    }
}

impl ThreeNetParams {
    pub fn fingerprint(&self) -> u64 {
        Model::ThreeNet(self.clone()).fingerprint()
    }
}

fn mlp_manifest(m: &MlpParams) -> MlpManifest {
    MlpManifest {
        widths: m.widths.clone(),
        activation: m.activation,
    }
}

fn mlp_from_manifest(m: &MlpManifest, data: &mut impl Iterator<Item = f64>) -> Result<MlpParams> {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in m.widths.windows(2) {
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = data.by_ref().take(n).collect();
            if v.len() != n {
                return Err(ModelError::Manifest("weight blob shorter than manifest".into()));
            }
            Ok(v)
        };
        weights.push(Tensor::new(vec![w[0], w[1]], take(w[0] * w[1])?)?);
        biases.push(Tensor::new(vec![w[1]], take(w[1])?)?);
    }
    Ok(MlpParams {
        widths: m.widths.clone(),
        weights,
        biases,
        activation: m.activation,
    })
}

/// Write `checkpoint.json` and `weights.bin` (little-endian f64, tensors in
/// state_net / context_net / main_net order, each layer `W` row-major `[in, out]` then `b`).
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    for t in model.tensors() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let (seed, manifest) = match model {
        Model::ThreeNet(p) => (
            p.seed,
            ModelManifest::ThreeNet {
                d: p.d,
                d_xi: p.d_xi,
                state_net: mlp_manifest(&p.state_net),
                context_net: mlp_manifest(&p.context_net),
                main_net: mlp_manifest(&p.main_net),
            },
        ),
        Model::ContextFree(p) => (
            p.seed,
            ModelManifest::ContextFree {
                d: p.d,
                state_net: mlp_manifest(&p.state_net),
                main_net: mlp_manifest(&p.main_net),
            },
        ),
    };
    let m = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        dtype: "f64le".into(),
        seed,
        n_params: bytes.len() / 8,
        model: manifest,
        weights_file: WEIGHTS_FILE.into(),
        crc64: format!("{:016x}", crate::CRC64.checksum(&bytes)),
    };
    fs::write(dir.join(WEIGHTS_FILE), &bytes)?;
    let json = serde_json::to_string_pretty(&m).map_err(|e| ModelError::Manifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| ModelError::Manifest(e.to_string()))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(ModelError::Manifest(format!("unknown format `{}`", m.format)));
    }
    if m.dtype != "f64le" {
        return Err(ModelError::Manifest(format!("unsupported dtype `{}`", m.dtype)));
    }
    let bytes = fs::read(dir.join(&m.weights_file))?;
    if bytes.len() != m.n_params * 8 {
        return Err(ModelError::Manifest(format!(
            "weight blob has {} bytes, manifest expects {}",
            bytes.len(),
            m.n_params * 8
        )));
    }
    let crc = format!("{:016x}", crate::CRC64.checksum(&bytes));
    if crc != m.crc64 {
        return Err(ModelError::Manifest(format!(
            "weight checksum mismatch (manifest {}, file {crc})",
            m.crc64
        )));
    }
    let mut data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let model = match &m.model {
        ModelManifest::ThreeNet {
            d,
            d_xi,
            state_net,
            context_net,
            main_net,
        } => {
            let p = ThreeNetParams {
                d: *d,
                d_xi: *d_xi,
                seed: m.seed,
                state_net: mlp_from_manifest(state_net, &mut data)?,
                context_net: mlp_from_manifest(context_net, &mut data)?,
                main_net: mlp_from_manifest(main_net, &mut data)?,
            };
            p.validate()?;
            Model::ThreeNet(p)
        }
        ModelManifest::ContextFree { d, state_net, main_net } => Model::ContextFree(ContextFreeParams {
            d: *d,
            seed: m.seed,
            state_net: mlp_from_manifest(state_net, &mut data)?,
            main_net: mlp_from_manifest(main_net, &mut data)?,
        }),
    };
    if data.next().is_some() {
        return Err(ModelError::Manifest("weight blob longer than architecture".into()));
    }
    Ok(model)
}
