//! Pre-norm transformer layer shared by both encoders.

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamStore, INIT_STD};
use crate::peft::{adapter_forward, adapter_prefix, lora_forward, lora_names, PeftStrategy};

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    trainable: bool,
    rng: &mut R,
) {
    init_linear_std(store, prefix, fan_in, fan_out, INIT_STD, bias, trainable, rng);
}

#[allow(clippy::too_many_arguments)]
pub fn init_linear_std<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    bias: bool,
    trainable: bool,
    rng: &mut R,
) {
    store.insert(
        format!("{prefix}.w"),
        trunc_normal(rng, fan_in, fan_out, std),
        trainable,
    );
    if bias {
        store.insert(format!("{prefix}.b"), Mat::zeros((1, fan_out)), trainable);
    }
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize, trainable: bool) {
    store.insert(format!("{prefix}.g"), Mat::ones((1, dim)), trainable);
    store.insert(format!("{prefix}.b"), Mat::zeros((1, dim)), trainable);
}

/// Frozen layer parameters: two norms, q/k/v/o projections, two-layer MLP.
pub fn init_layer<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, mlp_ratio: usize, rng: &mut R) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim, false);
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.attn.{proj}"), dim, dim, true, false, rng);
    }
    init_layer_norm(store, &format!("{prefix}.ln2"), dim, false);
    init_linear(
        store,
        &format!("{prefix}.mlp.fc1"),
        dim,
        dim * mlp_ratio,
        true,
        false,
        rng,
    );
    init_linear(
        store,
        &format!("{prefix}.mlp.fc2"),
        dim * mlp_ratio,
        dim,
        true,
        false,
        rng,
    );
}

/// Parameter count of one layer as created by [`init_layer`].
pub fn layer_param_count(dim: usize, mlp_ratio: usize) -> usize {
    let hidden = dim * mlp_ratio;
    2 * 2 * dim + 4 * (dim * dim + dim) + (dim * hidden + hidden) + (hidden * dim + dim)
}

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let w = g.param(store, &format!("{prefix}.w"));
    let y = g.matmul(x, w);
    let bias = format!("{prefix}.b");
    if store.contains(&bias) {
        let b = g.param(store, &bias);
        g.add_row(y, b)
    } else {
        y
    }
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let gain = g.param(store, &format!("{prefix}.g"));
    let bias = g.param(store, &format!("{prefix}.b"));
    let n = g.standardize(x);
    let n = g.mul_row(n, gain);
    g.add_row(n, bias)
}

/// Bias-free linear map followed by row-wise l2 normalization.
pub fn project(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let y = linear(g, store, prefix, x);
    g.l2_normalize(y)
}

/// Value-level [`project`] that rejects rows mapping to the zero vector.
pub fn project_rows(store: &ParamStore, prefix: &str, x: &Mat) -> Result<Mat> {
    let mut out = x.dot(store.value(&format!("{prefix}.w")));
    let bias = format!("{prefix}.b");
    if store.contains(&bias) {
        out += store.value(&bias);
    }
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::Degenerate(format!(
                "{prefix} maps an input to a zero-norm vector"
            )));
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

fn projection(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, peft: &PeftStrategy) -> Var {
    let y = linear(g, store, prefix, x);
    let (a, b) = lora_names(prefix);
    match peft.lora_scale() {
        Some(scale) if store.contains(&a) => {
            let av = g.param(store, &a);
            let bv = g.param(store, &b);
            lora_forward(g, y, x, av, bv, scale)
        }
        _ => y,
    }
}

/// Multi-head scaled dot-product attention of `queries` over `keys_values`.
pub fn attention_heads(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let dim = g.shape(q).1;
    let dk = dim / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dk, dk),
                g.slice_cols(k, h * dk, dk),
                g.slice_cols(v, h * dk, dk),
            )
        };
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let weights = g.softmax(scores);
        outs.push(g.matmul(weights, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

fn self_attention(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, heads: usize, peft: &PeftStrategy) -> Var {
    let q = projection(g, store, &format!("{prefix}.q"), x, peft);
    let k = linear(g, store, &format!("{prefix}.k"), x);
    let v = projection(g, store, &format!("{prefix}.v"), x, peft);
    let o = attention_heads(g, q, k, v, heads);
    linear(g, store, &format!("{prefix}.o"), o)
}

/// `x + attn(ln1(x))`, then `+ mlp(ln2(·))`, then the adapter when attached.
pub fn layer_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    heads: usize,
    peft: &PeftStrategy,
) -> Var {
    let h = layer_norm(g, store, &format!("{prefix}.ln1"), x);
    let a = self_attention(g, store, &format!("{prefix}.attn"), h, heads, peft);
    let x = g.add(x, a);
    let h = layer_norm(g, store, &format!("{prefix}.ln2"), x);
    let h = linear(g, store, &format!("{prefix}.mlp.fc1"), h);
    let h = g.gelu(h);
    let h = linear(g, store, &format!("{prefix}.mlp.fc2"), h);
    let x = g.add(x, h);
    let ad = adapter_prefix(prefix);
    if store.contains(&format!("{ad}.down.w")) {
        adapter_forward(g, store, &ad, x)
    } else {
        x
    }
}
