//! Parameter-efficient fine-tuning strategies over a frozen backbone.
//!
//! * `prompt`: learnable prompt vectors (owned by the encoders) are the only
//!   trainable backbone-side parameters.
//! * `lora`: low-rank deltas `(α/r)·B(A(x))` on the attention query and value
//!   projections, with `B` zero-initialized.
//! * `adapter`: bottleneck residual blocks `x + U(act(D(x)))` after each MLP
//!   sub-block, with `U` zero-initialized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamStore, INIT_STD};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PeftStrategy {
    #[default]
    Prompt,
    Lora {
        rank: usize,
        alpha: f64,
    },
    Adapter {
        bottleneck: usize,
    },
}

impl PeftStrategy {
    pub fn lora_default() -> Self {
        PeftStrategy::Lora { rank: 4, alpha: 8.0 }
    }

    pub fn adapter_default() -> Self {
        PeftStrategy::Adapter { bottleneck: 16 }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "prompt" => Ok(PeftStrategy::Prompt),
            "lora" => Ok(Self::lora_default()),
            "adapter" => Ok(Self::adapter_default()),
            other => Err(Error::config(format!("unknown PEFT strategy `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PeftStrategy::Prompt => "prompt",
            PeftStrategy::Lora { .. } => "lora",
            PeftStrategy::Adapter { .. } => "adapter",
        }
    }

    pub fn lora_scale(&self) -> Option<f64> {
        match *self {
            PeftStrategy::Lora { rank, alpha } => Some(alpha / rank as f64),
            _ => None,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match *self {
            PeftStrategy::Prompt => Ok(()),
            PeftStrategy::Lora { rank, alpha } => {
                if rank == 0 || rank > dim {
                    Err(Error::config(format!("LoRA rank {rank} must be in 1..={dim}")))
                } else if !(alpha.is_finite() && alpha > 0.0) {
                    Err(Error::config(format!("LoRA alpha {alpha} must be positive")))
                } else {
                    Ok(())
                }
            }
            PeftStrategy::Adapter { bottleneck } => {
                if bottleneck == 0 || bottleneck > dim {
                    Err(Error::config(format!(
                        "adapter width {bottleneck} must be in 1..={dim}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Parameters this strategy adds to one transformer layer of width `dim`.
    pub fn added_per_layer(&self, dim: usize) -> usize {
        match *self {
            PeftStrategy::Prompt => 0,
            PeftStrategy::Lora { rank, .. } => 2 * (2 * rank * dim),
            PeftStrategy::Adapter { bottleneck } => 2 * bottleneck * dim + bottleneck + dim,
        }
    }
}

/// Names of the LoRA factors on one projection.
pub fn lora_names(proj_prefix: &str) -> (String, String) {
    (format!("{proj_prefix}.lora_a"), format!("{proj_prefix}.lora_b"))
}

pub fn adapter_prefix(layer_prefix: &str) -> String {
    format!("{layer_prefix}.adapter")
}

/// Add strategy parameters to each listed transformer layer. Prompt
/// parameters already exist on the encoders, so `Prompt` adds nothing here.
pub fn attach_layers<R: Rng + ?Sized>(
    store: &mut ParamStore,
    layer_prefixes: &[String],
    dim: usize,
    strategy: &PeftStrategy,
    rng: &mut R,
) -> Result<()> {
    strategy.validate(dim)?;
    if store.names().any(|n| n.contains(".lora_") || n.contains(".adapter.")) {
        return Err(Error::invalid("a PEFT strategy is already attached"));
    }
    for layer in layer_prefixes {
        match *strategy {
            PeftStrategy::Prompt => {}
            PeftStrategy::Lora { rank, .. } => {
                for proj in ["q", "v"] {
                    let (a, b) = lora_names(&format!("{layer}.attn.{proj}"));
                    store.insert(a, trunc_normal(rng, dim, rank, INIT_STD), true);
                    store.insert(b, Mat::zeros((rank, dim)), true);
                }
            }
            PeftStrategy::Adapter { bottleneck } => {
                let p = adapter_prefix(layer);
                store.insert(
                    format!("{p}.down.w"),
                    trunc_normal(rng, dim, bottleneck, INIT_STD),
                    true,
                );
                store.insert(format!("{p}.down.b"), Mat::zeros((1, bottleneck)), true);
                store.insert(format!("{p}.up.w"), Mat::zeros((bottleneck, dim)), true);
                store.insert(format!("{p}.up.b"), Mat::zeros((1, dim)), true);
            }
        }
    }
    Ok(())
}

/// `y = base(x) + scale · (x A) B`
pub fn lora_forward(g: &mut Graph, base_out: Var, x: Var, a: Var, b: Var, scale: f64) -> Var {
    let xa = g.matmul(x, a);
    let delta = g.matmul(xa, b);
    let delta = g.scale(delta, scale);
    g.add(base_out, delta)
}

/// `y = x + U(gelu(D(x)))`
pub fn adapter_forward(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let dw = g.param(store, &format!("{prefix}.down.w"));
    let db = g.param(store, &format!("{prefix}.down.b"));
    let uw = g.param(store, &format!("{prefix}.up.w"));
    let ub = g.param(store, &format!("{prefix}.up.b"));
    let h = g.matmul(x, dw);
    let h = g.add_row(h, db);
    let h = g.gelu(h);
    let h = g.matmul(h, uw);
    let h = g.add_row(h, ub);
    g.add(x, h)
}

/// Dense evaluation of `x W + scale · x A B` for one row vector.
pub fn lora_apply(x: &Mat, base: &Mat, a: &Mat, b: &Mat, scale: f64) -> Result<Mat> {
    let rank = a.ncols();
    if rank > base.nrows() {
        return Err(Error::invalid(format!("rank {rank} exceeds width {}", base.nrows())));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(base.clone());
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let y = g.matmul(xv, w);
    let out = lora_forward(&mut g, y, xv, av, bv, scale);
    Ok(g.value(out).clone())
}
