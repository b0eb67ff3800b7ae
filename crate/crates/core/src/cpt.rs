//! Template propagation by attention.
//!
//! The next template kernel is retrieved from the masked search feature with
//! two queries: the initial template (long-term) and a recurrent hidden
//! template (short-term). Keys and values are shared between the two.

use alloc::format;

use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, shape_err, Result};
use crate::net::init_weight;
use crate::optim::{Bound, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Conv followed by per-channel normalization.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub conv: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct CptParams {
    pub query_long: ParamId,
    pub query_short: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    /// Hidden-template aggregation, 2C → C.
    pub hidden: BlockParams,
    /// Output aggregation, 2C → C.
    pub output: BlockParams,
}

impl CptParams {
    pub fn register(params: &mut ParamSet, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        // near-identity start: an untrained transform passes matched target
        // features through instead of noise, so cycle training does not begin
        // by feeding the head garbage kernels
        let mut proj = |name: &str, params: &mut ParamSet| {
            params.insert(&format!("cpt.{name}"), near_identity(rng, c, 1, 1))
        };
        let query_long = proj("query_long", params)?;
        let query_short = proj("query_short", params)?;
        let key = proj("key", params)?;
        let value = proj("value", params)?;
        let mut block = |name: &str, params: &mut ParamSet| -> Result<BlockParams> {
            Ok(BlockParams {
                conv: params.insert(&format!("cpt.{name}.conv"), near_identity(rng, c, 2, 3))?,
                gain: params.insert(&format!("cpt.{name}.gain"), Tensor::filled(&[c], 1.0))?,
                bias: params.insert(&format!("cpt.{name}.bias"), Tensor::zeros(&[c]))?,
            })
        };
        let hidden = block("hidden", params)?;
        let output = block("output", params)?;
        Ok(CptParams { query_long, query_short, key, value, hidden, output })
    }
}

/// `[c, parts·c, k, k]` weight averaging the `parts` input groups channel by
/// channel at the center tap, plus small noise.
fn near_identity(rng: &mut ChaCha8Rng, c: usize, parts: usize, k: usize) -> Tensor {
    let mut w = init_weight(rng, &[c, parts * c, k, k], 0.1);
    let center = (k / 2) * k + k / 2;
    let d = w.data_mut();
    for o in 0..c {
        for p in 0..parts {
            d[((o * parts * c) + p * c + o) * k * k + center] += 1.0 / parts as f64;
        }
    }
    w
}

/// Which retrieval terms feed the output aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CptMode {
    #[default]
    LongShort,
    LongOnly,
    ShortOnly,
}

/// Axis of the attention matrix `[N_z × N_x]` that sums to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionAxis {
    /// Each template position attends over search positions.
    #[default]
    Search,
    /// Each search position distributes over template positions.
    Template,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CptConfig {
    pub mode: CptMode,
    pub axis: AttentionAxis,
    /// Adds the initial template to the output.
    pub residual: bool,
}

/// Tape handles produced by one propagation step.
#[derive(Debug, Clone, Copy)]
pub struct CptOutput {
    pub template: Var,
    pub hidden: Var,
    pub x_long: Var,
    pub x_short: Var,
    pub attn_long: Var,
    pub attn_short: Var,
}

/// `S ⊗ M`, broadcasting the mask over channels.
pub fn mask_search(tape: &mut Tape, search: Var, mask: Var) -> Result<Var> {
    tape.mul_spatial(search, mask)
}

fn conv1x1(tape: &mut Tape, bound: &Bound, w: ParamId, x: Var) -> Result<Var> {
    tape.conv2d(x, bound.var(w), 1, 0)
}

/// Attention retrieval with `query_proj` applied to `query_src`.
/// Returns `(X [C×h×w], A [N_z×N_x])`.
pub fn retrieve(
    tape: &mut Tape,
    bound: &Bound,
    params: &CptParams,
    masked: Var,
    query_src: Var,
    query_proj: ParamId,
    axis: AttentionAxis,
) -> Result<(Var, Var)> {
    let (qs, ss) = (tape.shape(query_src).to_vec(), tape.shape(masked).to_vec());
    if qs.len() != 3 || ss.len() != 3 || qs[0] != ss[0] {
        return Err(shape_err!("retrieve: query {:?}, search {:?}", qs, ss));
    }
    let (c, nz, nx) = (qs[0], qs[1] * qs[2], ss[1] * ss[2]);
    let q = conv1x1(tape, bound, query_proj, query_src)?;
    let q = tape.reshape(q, &[c, nz])?;
    let qt = tape.transpose(q)?;
    let k = conv1x1(tape, bound, params.key, masked)?;
    let k = tape.reshape(k, &[c, nx])?;
    let logits = tape.matmul(qt, k)?;
    let attn = tape.softmax(logits, if axis == AttentionAxis::Search { 1 } else { 0 })?;
    let v = conv1x1(tape, bound, params.value, masked)?;
    let v = tape.reshape(v, &[c, nx])?;
    let vt = tape.transpose(v)?;
    let x = tape.matmul(attn, vt)?;
    let x = tape.transpose(x)?;
    let x = tape.reshape(x, &qs)?;
    Ok((x, attn))
}

fn block(tape: &mut Tape, bound: &Bound, p: &BlockParams, a: Var, b: Var) -> Result<Var> {
    let cat = tape.concat(&[a, b])?;
    let h = tape.conv2d(cat, bound.var(p.conv), 1, 1)?;
    tape.norm_affine(h, bound.var(p.gain), bound.var(p.bias))
}

/// `H = f_φ(concat(X_L, T_1))`.
pub fn update_hidden(tape: &mut Tape, bound: &Bound, params: &CptParams, x_long: Var, t1: Var) -> Result<Var> {
    if tape.shape(x_long) != tape.shape(t1) {
        return Err(shape_err!("update_hidden: {:?} vs {:?}", tape.shape(x_long), tape.shape(t1)));
    }
    block(tape, bound, &params.hidden, x_long, t1)
}

/// One propagation step: masks the search feature, retrieves long- and
/// short-term features, and aggregates them into the next template.
#[allow(clippy::too_many_arguments)]
pub fn cpt_forward(
    tape: &mut Tape,
    bound: &Bound,
    params: &CptParams,
    cfg: &CptConfig,
    search: Var,
    mask: Var,
    t1: Var,
    hidden: Option<Var>,
) -> Result<CptOutput> {
    let h_prev = hidden.ok_or_else(|| contract_err!("cpt_forward needs a hidden template"))?;
    if tape.shape(h_prev) != tape.shape(t1) {
        return Err(shape_err!("hidden {:?} vs template {:?}", tape.shape(h_prev), tape.shape(t1)));
    }
    let masked = mask_search(tape, search, mask)?;
    let (x_long, attn_long) = retrieve(tape, bound, params, masked, t1, params.query_long, cfg.axis)?;
    let (x_short, attn_short) = retrieve(tape, bound, params, masked, h_prev, params.query_short, cfg.axis)?;
    let zeros = Tensor::zeros(tape.shape(t1));
    let (xs, xl) = match cfg.mode {
        CptMode::LongShort => (x_short, x_long),
        CptMode::LongOnly => (tape.constant(zeros), x_long),
        CptMode::ShortOnly => (x_short, tape.constant(zeros)),
    };
    let mut template = block(tape, bound, &params.output, xs, xl)?;
    if cfg.residual {
        template = tape.add(template, t1)?;
    }
    let hidden = update_hidden(tape, bound, params, x_long, t1)?;
    Ok(CptOutput { template, hidden, x_long, x_short, attn_long, attn_short })
}
