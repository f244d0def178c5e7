//! Layers built from tape primitives. Each layer reads its parameters from a
//! [`Graph`] under a name prefix; the matching `*_specs` function declares them.

use crate::error::{contract, Result};
use crate::params::{Graph, Init, ParamSpec};
use crate::tensor::Var;

pub const LN_EPS: f64 = 1e-5;

fn p(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// `w: [d_in, d_out]` scaled by `gain / sqrt(d_in)`, zero bias.
pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize, gain: f64) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            p(prefix, "w"),
            &[d_in, d_out],
            Init::Normal(gain / (d_in as f64).sqrt()),
        ),
        ParamSpec::new(p(prefix, "b"), &[d_out], Init::Zeros),
    ]
}

pub fn linear(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(&p(prefix, "w"))?;
    let b = g.param(&p(prefix, "b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub fn layer_norm_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(p(prefix, "g"), &[d], Init::Const(1.0)),
        ParamSpec::new(p(prefix, "b"), &[d], Init::Zeros),
    ]
}

pub fn layer_norm(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(&p(prefix, "g"))?;
    let beta = g.param(&p(prefix, "b"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Linear -> ReLU -> Linear.
pub fn mlp_specs(prefix: &str, d_in: usize, d_hidden: usize, d_out: usize, out_gain: f64) -> Vec<ParamSpec> {
    let mut specs = linear_specs(&p(prefix, "fc1"), d_in, d_hidden, 2f64.sqrt());
    specs.extend(linear_specs(&p(prefix, "fc2"), d_hidden, d_out, out_gain));
    specs
}

pub fn mlp(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, &p(prefix, "fc1"), x)?;
    let h = g.relu(h);
    linear(g, &p(prefix, "fc2"), h)
}

/// Query/key/value/output projections. Queries come from a `d_q`-wide input,
/// keys and values from a `d_kv`-wide input, both projected to `d`.
pub fn attention_specs(prefix: &str, d_q: usize, d_kv: usize, d: usize, out_gain: f64) -> Vec<ParamSpec> {
    let mut specs = linear_specs(&p(prefix, "q"), d_q, d, 1.0);
    specs.extend(linear_specs(&p(prefix, "k"), d_kv, d, 1.0));
    specs.extend(linear_specs(&p(prefix, "v"), d_kv, d, 1.0));
    specs.extend(linear_specs(&p(prefix, "o"), d, d_q, out_gain));
    specs
}

pub struct Attention {
    pub out: Var,
    /// Per-head `[queries, keys]` weight matrices.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention without masking.
pub fn attention(g: &mut Graph, prefix: &str, queries: Var, keys: Var, heads: usize) -> Result<Attention> {
    let q = linear(g, &p(prefix, "q"), queries)?;
    let k = linear(g, &p(prefix, "k"), keys)?;
    let v = linear(g, &p(prefix, "v"), keys)?;
    let d = g.shape(q)[1];
    if heads == 0 || d % heads != 0 {
        return Err(contract(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, 1, h * dh, dh)?,
                g.slice(k, 1, h * dh, dh)?,
                g.slice(v, 1, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax(scores);
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let out = linear(g, &p(prefix, "o"), merged)?;
    Ok(Attention { out, weights })
}

pub fn block_specs(prefix: &str, d: usize, mlp_ratio: usize, out_gain: f64) -> Vec<ParamSpec> {
    let mut specs = layer_norm_specs(&p(prefix, "ln1"), d);
    specs.extend(attention_specs(&p(prefix, "attn"), d, d, d, out_gain));
    specs.extend(layer_norm_specs(&p(prefix, "ln2"), d));
    specs.extend(mlp_specs(&p(prefix, "mlp"), d, mlp_ratio * d, d, out_gain));
    specs
}

/// Pre-norm residual encoder block with full bidirectional self-attention:
/// `z' = MSA(LN(z)) + z`, `out = MLP(LN(z')) + z'`.
pub fn transformer_block(g: &mut Graph, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    Ok(transformer_block_traced(g, prefix, x, heads)?.0)
}

/// [`transformer_block`] that also returns the attention weights.
pub fn transformer_block_traced(g: &mut Graph, prefix: &str, x: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let h = layer_norm(g, &p(prefix, "ln1"), x)?;
    let att = attention(g, &p(prefix, "attn"), h, h, heads)?;
    let x = g.add(att.out, x)?;
    let h = layer_norm(g, &p(prefix, "ln2"), x)?;
    let h = mlp(g, &p(prefix, "mlp"), h)?;
    Ok((g.add(h, x)?, att.weights))
}
