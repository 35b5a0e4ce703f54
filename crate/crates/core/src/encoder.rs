//! Graph recurrent encoder.
//!
//! A cell state `h_t` is computed from the input embedding `x_t` and the
//! states `H = {h_1..h_k}` of the predecessors of `t` in a directional view:
//!
//! ```text
//! r_j  = σ(W_r x_t + U_r h_j)
//! h̃_t  = tanh(W_n x_t + (1/k) Σ_j r_j ⊙ (U_n h_j))
//! x'   = W_z x_t,  h'_j = U_z h_j
//! e_j  = vᵀ tanh(x' + key_j)     keys = {h'_1..h'_k, h̃_t}
//! α    = masked_softmax(e)
//! h_t  = Σ_j α_j key_j
//! ```
//!
//! The candidate state joins the key set untransformed. Pad slots are masked
//! out of both the mean and the attention; boundary positions see one
//! virtual zero-state predecessor.

use crate::autodiff::{Tape, Var};
use crate::dialogue_graph::{PaddedView, Slot};
use crate::error::{Error, Result};
use crate::params::{InitScheme, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Learnable weights of one recurrent cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellParams {
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub v: ParamId,
    pub b_r: Option<ParamId>,
    pub b_n: Option<ParamId>,
}

impl CellParams {
    /// Registers `W_* : d_in → d`, `U_* : d → d` and `v ∈ R^d` under `prefix`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d: usize,
        bias: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut m = |name: &str, shape: &[usize], scheme| {
            store.add_init(format!("{prefix}.{name}"), shape, seed, scheme)
        };
        let w_r = m("w_r", &[d, d_in], InitScheme::FanIn)?;
        let u_r = m("u_r", &[d, d], InitScheme::FanIn)?;
        let w_n = m("w_n", &[d, d_in], InitScheme::FanIn)?;
        let u_n = m("u_n", &[d, d], InitScheme::FanIn)?;
        let w_z = m("w_z", &[d, d_in], InitScheme::FanIn)?;
        let u_z = m("u_z", &[d, d], InitScheme::FanIn)?;
        let v = m("v", &[d], InitScheme::FanIn)?;
        let (b_r, b_n) = if bias {
            (
                Some(m("b_r", &[d], InitScheme::Zeros)?),
                Some(m("b_n", &[d], InitScheme::Zeros)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            w_r,
            u_r,
            w_n,
            u_n,
            w_z,
            u_z,
            v,
            b_r,
            b_n,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> CellVars {
        CellVars {
            w_r: tape.param(store, self.w_r),
            u_r: tape.param(store, self.u_r),
            w_n: tape.param(store, self.w_n),
            u_n: tape.param(store, self.u_n),
            w_z: tape.param(store, self.w_z),
            u_z: tape.param(store, self.u_z),
            v: tape.param(store, self.v),
            b_r: self.b_r.map(|id| tape.param(store, id)),
            b_n: self.b_n.map(|id| tape.param(store, id)),
        }
    }
}

/// Cell weights bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub w_r: Var,
    pub u_r: Var,
    pub w_n: Var,
    pub u_n: Var,
    pub w_z: Var,
    pub u_z: Var,
    pub v: Var,
    pub b_r: Option<Var>,
    pub b_n: Option<Var>,
}

impl CellVars {
    pub fn hidden_size(&self, tape: &Tape) -> usize {
        tape.value(self.v).len()
    }
}

/// Reset gates, one row per predecessor: `r_j = σ(W_r x + U_r h_j)`.
pub fn reset_gates(tape: &mut Tape, cell: &CellVars, x: Var, preds: Var) -> Result<Var> {
    let mut wx = tape.matvec(cell.w_r, x)?;
    if let Some(b) = cell.b_r {
        wx = tape.add(wx, b)?;
    }
    let uh = tape.matmul_nt(preds, cell.u_r)?;
    let pre = tape.add_row(uh, wx)?;
    tape.sigmoid(pre)
}

/// `h̃ = tanh(W_n x + mean over real slots of r_j ⊙ U_n h_j)`.
pub fn candidate_state(
    tape: &mut Tape,
    cell: &CellVars,
    x: Var,
    preds: Var,
    gates: Var,
    mask: &[bool],
) -> Result<Var> {
    let mut wx = tape.matvec(cell.w_n, x)?;
    if let Some(b) = cell.b_n {
        wx = tape.add(wx, b)?;
    }
    let uh = tape.matmul_nt(preds, cell.u_n)?;
    let gated = tape.mul(gates, uh)?;
    let mean = tape.masked_mean_rows(gated, mask)?;
    let pre = tape.add(wx, mean)?;
    tape.tanh(pre)
}

/// Output of [`attention_pool`].
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub hidden: Var,
    /// Weights over `k` slots followed by the candidate state.
    pub alpha: Var,
    /// Key matrix `[h'_1..h'_k; h̃]`.
    pub keys: Var,
}

/// Masked attention over the transformed predecessors plus the candidate state.
pub fn attention_pool(
    tape: &mut Tape,
    cell: &CellVars,
    x: Var,
    preds: Var,
    candidate: Var,
    mask: &[bool],
) -> Result<Pooled> {
    let query = tape.matvec(cell.w_z, x)?;
    let transformed = tape.matmul_nt(preds, cell.u_z)?;
    let keys = tape.stack_rows(&[transformed, candidate])?;
    let shifted = tape.add_row(keys, query)?;
    let act = tape.tanh(shifted)?;
    let logits = tape.matvec(act, cell.v)?;
    let mut full_mask = mask.to_vec();
    full_mask.push(true);
    let alpha = tape.masked_softmax(logits, &full_mask)?;
    let hidden = tape.weighted_sum(alpha, keys)?;
    Ok(Pooled {
        hidden,
        alpha,
        keys,
    })
}

/// One application of the cell: gates, candidate, attention.
pub fn cell_step(
    tape: &mut Tape,
    cell: &CellVars,
    x: Var,
    preds: Var,
    mask: &[bool],
) -> Result<Pooled> {
    let gates = reset_gates(tape, cell, x, preds)?;
    let candidate = candidate_state(tape, cell, x, preds, gates, mask)?;
    attention_pool(tape, cell, x, preds, candidate, mask)
}

/// All states of one directional pass.
#[derive(Clone, Debug)]
pub struct DirectionOutput {
    /// `states[t]` for every position.
    pub states: Vec<Var>,
    /// Attention weights per position (`k_max + 1` entries).
    pub alphas: Vec<Var>,
    /// State of the last visited position.
    pub last: Var,
}

/// Runs the cell over a padded view in its visiting order.
///
/// `inputs[t]` is the embedding of token `t`.
pub fn encode_direction(
    tape: &mut Tape,
    cell: &CellVars,
    view: &PaddedView,
    inputs: &[Var],
) -> Result<DirectionOutput> {
    if inputs.len() != view.len() {
        return Err(Error::Dimension(format!(
            "{} inputs for a view over {} positions",
            inputs.len(),
            view.len()
        )));
    }
    if view.is_empty() {
        return Err(Error::Input("cannot encode an empty sequence".into()));
    }
    let d = cell.hidden_size(tape);
    let zero = tape.constant(Tensor::zeros(&[d]));
    let mut states: Vec<Option<Var>> = vec![None; view.len()];
    let mut alphas: Vec<Option<Var>> = vec![None; view.len()];
    let mut last = zero;
    for t in view.visit_order() {
        let rows = view.slots[t]
            .iter()
            .map(|slot| match *slot {
                Slot::Node(p) => states[p].ok_or_else(|| {
                    Error::Contract(format!("predecessor {p} of {t} visited after {t}"))
                }),
                Slot::Virtual | Slot::Pad => Ok(zero),
            })
            .collect::<Result<Vec<_>>>()?;
        let preds = tape.stack_rows(&rows)?;
        let pooled = cell_step(tape, cell, inputs[t], preds, &view.mask[t])?;
        states[t] = Some(pooled.hidden);
        alphas[t] = Some(pooled.alpha);
        last = pooled.hidden;
    }
    Ok(DirectionOutput {
        states: states.into_iter().map(Option::unwrap).collect(),
        alphas: alphas.into_iter().map(Option::unwrap).collect(),
        last,
    })
}

/// `h^e = [→h_n ; ←h_1]`.
pub fn encode_bidirectional(
    tape: &mut Tape,
    forward_cell: &CellVars,
    backward_cell: &CellVars,
    forward: &PaddedView,
    backward: &PaddedView,
    inputs: &[Var],
) -> Result<(Var, DirectionOutput, DirectionOutput)> {
    let f = encode_direction(tape, forward_cell, forward, inputs)?;
    let b = encode_direction(tape, backward_cell, backward, inputs)?;
    let joined = tape.concat(&[f.last, b.last])?;
    Ok((joined, f, b))
}
