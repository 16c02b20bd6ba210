//! Pairwise cross-attention refinement, similarity matrix, and losses.
//!
//! For an image `i` and text `j` the image vector is refined by attending over
//! the text's projected token features and the text vector by attending over
//! the image's projected patch features:
//!
//! ```text
//! v̂_{i|j} = O(softmax(Q(v_i) K(T_j)ᵀ / √d_k) V(T_j)) + v_i
//! ŵ_{j|i} = O'(softmax(Q'(w_j) K'(P_i)ᵀ / √d_k) V'(P_i)) + w_j
//! s_ij    = cos(v̂_{i|j}, ŵ_{j|i})
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::transformer::{attention_heads, init_linear_std, linear};

pub const TAU: &str = "align.tau";
pub const TAU_INIT: f64 = 10.0;
pub const TAU_RANGE: (f64, f64) = (0.01, 100.0);
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Image query over text tokens.
pub const I2T: &str = "align.i2t";
/// Text query over image patches.
pub const T2I: &str = "align.t2i";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossAttnMode {
    /// Pooled query over the other modality's token-level features.
    #[default]
    Token,
    /// Literal single-key reading: `v̂ = v + w`, `ŵ = w + v`. Diagnostic only.
    PooledLiteral,
    /// No refinement: `v̂ = v`, `ŵ = w`.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TempMode {
    /// Logits are `S / τ`.
    #[default]
    Divide,
    /// Logits are `S · τ`.
    Multiply,
}

impl std::str::FromStr for TempMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "divide" => Ok(TempMode::Divide),
            "multiply" => Ok(TempMode::Multiply),
            other => Err(Error::config(format!("unknown temperature mode `{other}`"))),
        }
    }
}

/// Glorot-normal scale for a freshly added layer.
pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init_params<R: Rng + ?Sized>(dim: usize, mode: CrossAttnMode, store: &mut ParamStore, rng: &mut R) {
    if mode == CrossAttnMode::Token {
        for dir in [I2T, T2I] {
            for proj in ["q", "k", "v", "o"] {
                init_linear_std(
                    store,
                    &format!("{dir}.{proj}"),
                    dim,
                    dim,
                    xavier_std(dim, dim),
                    true,
                    true,
                    rng,
                );
            }
        }
    }
    store.insert(TAU, Mat::from_elem((1, 1), TAU_INIT), true);
}

pub fn clamp_tau(store: &mut ParamStore) {
    if let Some(p) = store.get_mut(TAU) {
        p.value.mapv_inplace(|t| t.clamp(TAU_RANGE.0, TAU_RANGE.1));
    }
}

/// Keys and values of one set of context features, shared across queries.
#[derive(Debug, Clone, Copy)]
pub struct Context {
    k: Var,
    v: Var,
}

pub fn context(g: &mut Graph, store: &ParamStore, dir: &str, feats: Var) -> Context {
    Context {
        k: linear(g, store, &format!("{dir}.k"), feats),
        v: linear(g, store, &format!("{dir}.v"), feats),
    }
}

/// Refine every row of `queries` (n×d, unit vectors) against one context.
pub fn refine(g: &mut Graph, store: &ParamStore, dir: &str, queries: Var, ctx: Context, heads: usize) -> Var {
    let q = linear(g, store, &format!("{dir}.q"), queries);
    let a = attention_heads(g, q, ctx.k, ctx.v, heads);
    let o = linear(g, store, &format!("{dir}.o"), a);
    g.add(queries, o)
}

/// Encoder outputs for a batch, already projected and normalized.
#[derive(Debug, Clone)]
pub struct BatchVars {
    /// N×d unit image vectors.
    pub images: Var,
    /// Per-image m×d unit patch vectors.
    pub patches: Vec<Var>,
    /// N×d unit text vectors.
    pub texts: Var,
    /// Per-text L_j×d unit token vectors.
    pub tokens: Vec<Var>,
}

/// Cosine between matching rows of `a` and `b` as an n×1 column.
fn row_cosines(g: &mut Graph, a: Var, b: Var) -> Var {
    let a = g.l2_normalize(a);
    let b = g.l2_normalize(b);
    let p = g.mul(a, b);
    g.sum_rows(p)
}

/// Pairwise similarity matrix `S[i][j] = s_ij` (N_img × N_txt).
pub fn similarity_graph(
    g: &mut Graph,
    store: &ParamStore,
    batch: &BatchVars,
    mode: CrossAttnMode,
    heads: usize,
) -> Var {
    let ni = g.shape(batch.images).0;
    let nt = g.shape(batch.texts).0;
    match mode {
        CrossAttnMode::Off => g.matmul_t(batch.images, batch.texts),
        CrossAttnMode::PooledLiteral => {
            let mut cols = Vec::with_capacity(nt);
            for j in 0..nt {
                let wj = g.slice_rows(batch.texts, j, 1);
                let ones = g.constant(Mat::ones((ni, 1)));
                let wrep = g.matmul(ones, wj);
                let vhat = g.add(batch.images, wrep);
                let what = g.add(wrep, batch.images);
                cols.push(row_cosines(g, vhat, what));
            }
            g.concat_cols(&cols)
        }
        CrossAttnMode::Token => {
            // v̂_{·|j}: all images refined by text j, rows indexed by i
            let mut vhat = Vec::with_capacity(nt);
            for j in 0..nt {
                let ctx = context(g, store, I2T, batch.tokens[j]);
                vhat.push(refine(g, store, I2T, batch.images, ctx, heads));
            }
            // ŵ_{·|i}: all texts refined by image i, rows indexed by j
            let mut what = Vec::with_capacity(ni);
            for i in 0..ni {
                let ctx = context(g, store, T2I, batch.patches[i]);
                what.push(refine(g, store, T2I, batch.texts, ctx, heads));
            }
            let mut cols = Vec::with_capacity(nt);
            for (j, &vj) in vhat.iter().enumerate() {
                let rows: Vec<Var> = what.iter().map(|&wi| g.slice_rows(wi, j, 1)).collect();
                let z = g.concat_rows(&rows);
                cols.push(row_cosines(g, vj, z));
            }
            g.concat_cols(&cols)
        }
    }
}

/// Symmetric InfoNCE over a square similarity matrix.
pub fn contrastive_graph(g: &mut Graph, s: Var, tau: Var, temp: TempMode) -> Var {
    let (n, m) = g.shape(s);
    assert_eq!(n, m, "contrastive loss needs a square similarity matrix");
    let logits = match temp {
        TempMode::Divide => g.div_by(s, tau),
        TempMode::Multiply => g.scale_by(s, tau),
    };
    let rows = g.log_softmax(logits);
    let i2t = g.diag(rows);
    let i2t = g.sum_all(i2t);
    let lt = g.transpose(logits);
    let cols = g.log_softmax(lt);
    let t2i = g.diag(cols);
    let t2i = g.sum_all(t2i);
    let both = g.add(i2t, t2i);
    g.scale(both, -1.0 / n as f64)
}

pub fn mmse_graph(g: &mut Graph, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let sq = g.square(d);
    g.mean_all(sq)
}

pub fn total_graph(g: &mut Graph, cl: Var, mmse: Option<Var>, lambda: f64) -> Var {
    match mmse {
        Some(m) if lambda != 0.0 => {
            let w = g.scale(m, lambda);
            g.add(cl, w)
        }
        _ => cl,
    }
}

// Value-level entry points.

fn check_unit_rows(x: &Mat, what: &str) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::invalid(format!("{what}: empty feature set")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what}: non-finite features")));
    }
    Ok(())
}

fn refine_value(store: &ParamStore, dir: &str, query: &Mat, feats: &Mat, heads: usize) -> Result<Mat> {
    check_unit_rows(query, dir)?;
    check_unit_rows(feats, dir)?;
    let mut g = Graph::new();
    let q = g.constant(query.clone());
    let f = g.constant(feats.clone());
    let ctx = context(&mut g, store, dir, f);
    let out = refine(&mut g, store, dir, q, ctx, heads);
    Ok(g.value(out).clone())
}

/// `v̂` for image vector `v` (1×d) over text token features (L×d).
pub fn cross_attend_image(v: &Mat, text_tokens: &Mat, store: &ParamStore, heads: usize) -> Result<Mat> {
    refine_value(store, I2T, v, text_tokens, heads)
}

/// `ŵ` for text vector `w` (1×d) over image patch features (m×d).
pub fn cross_attend_text(w: &Mat, patch_feats: &Mat, store: &ParamStore, heads: usize) -> Result<Mat> {
    refine_value(store, T2I, w, patch_feats, heads)
}

pub fn cosine(a: &Mat, b: &Mat) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 1e-12 && nb > 1e-12) {
        return Err(Error::Degenerate("zero-norm refined vector".into()));
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Similarity matrix from per-pair refined vectors: `s[i][j] = cos(vhat[i][j], what[j][i])`.
pub fn similarity_matrix(vhat: &[Vec<Mat>], what: &[Vec<Mat>]) -> Result<Mat> {
    let n = vhat.len();
    let m = what.len();
    let mut s = Mat::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            s[[i, j]] = cosine(&vhat[i][j], &what[j][i])?;
        }
    }
    Ok(s)
}

pub fn contrastive_loss(s: &Mat, tau: f64, temp: TempMode) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if s.nrows() != s.ncols() || s.is_empty() {
        return Err(Error::invalid("similarity matrix must be square and non-empty"));
    }
    let mut g = Graph::new();
    let sv = g.constant(s.clone());
    let t = g.constant(Mat::from_elem((1, 1), tau));
    let l = contrastive_graph(&mut g, sv, t, temp);
    Ok(g.scalar(l))
}

pub fn mmse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "mmse loss needs equal non-empty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn total_loss(cl: f64, mmse: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(cl + lambda * mmse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(d: usize) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        init_params(d, CrossAttnMode::Token, &mut s, &mut rng);
        s
    }

    fn set(s: &mut ParamStore, name: &str, m: Mat) {
        s.get_mut(name).unwrap().value = m;
    }

    fn row(v: &[f64]) -> Mat {
        Mat::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn single_token_attention_adds_value() {
        let mut s = store(2);
        set(&mut s, "align.i2t.o.w", Mat::eye(2));
        let v = row(&[0.6, 0.8]);
        let t = row(&[1.0, 0.0]);
        let out = cross_attend_image(&v, &t, &s, 1).unwrap();
        let vt = t.dot(s.value("align.i2t.v.w"));
        assert!((&out - &(&vt + &v)).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn identical_values_give_convex_identity() {
        let mut s = store(2);
        set(&mut s, "align.t2i.v.w", Mat::zeros((2, 2)));
        set(&mut s, "align.t2i.v.b", row(&[0.3, -0.2]));
        set(&mut s, "align.t2i.o.w", Mat::eye(2));
        let w = row(&[0.0, 1.0]);
        let patches = Mat::from_shape_vec((3, 2), vec![1.0, 0.0, 0.6, 0.8, -0.8, 0.6]).unwrap();
        let out = cross_attend_text(&w, &patches, &s, 1).unwrap();
        assert!((out[[0, 0]] - 0.3).abs() < 1e-12 && (out[[0, 1]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn three_token_hand_case() {
        let mut s = store(2);
        for p in ["q", "k", "v", "o"] {
            set(&mut s, &format!("align.i2t.{p}.w"), Mat::eye(2));
        }
        let v = row(&[1.0, 0.0]);
        let t = Mat::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        // scores 1, 0, -1 scaled by 1/sqrt(2)
        let r = 1.0 / 2f64.sqrt();
        let e = [r.exp(), 1.0, (-r).exp()];
        let z: f64 = e.iter().sum();
        let a = [e[0] / z, e[1] / z, e[2] / z];
        let expect = [a[0] - a[2] + 1.0, a[1]];
        let out = cross_attend_image(&v, &t, &s, 1).unwrap();
        assert!((out[[0, 0]] - expect[0]).abs() < 1e-6);
        assert!((out[[0, 1]] - expect[1]).abs() < 1e-6);
    }

    #[test]
    fn empty_context_rejected() {
        let s = store(2);
        assert!(cross_attend_image(&row(&[1.0, 0.0]), &Mat::zeros((0, 2)), &s, 1).is_err());
    }

    #[test]
    fn cosine_identities() {
        let a = row(&[0.3, 0.4]);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&row(&[1.0, 0.0]), &row(&[0.0, 2.0])).unwrap(), 0.0);
        assert!(cosine(&a, &Mat::zeros((1, 2))).is_err());
    }

    #[test]
    fn loss_hand_values() {
        assert_eq!(
            contrastive_loss(&Mat::from_elem((1, 1), 0.7), 10.0, TempMode::Divide).unwrap(),
            0.0
        );
        let s = Mat::from_shape_vec((2, 2), vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let l = contrastive_loss(&s, 1.0, TempMode::Divide).unwrap();
        assert!((l - 2.0 * (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.2539).abs() < 1e-3);
        let flat = Mat::from_elem((5, 5), 0.3);
        let l = contrastive_loss(&flat, 0.5, TempMode::Divide).unwrap();
        assert!((l - 2.0 * 5f64.ln()).abs() < 1e-9);
        assert!(contrastive_loss(&s, 0.0, TempMode::Divide).is_err());
    }

    #[test]
    fn multiply_mode_inverts_temperature() {
        let s = Mat::from_shape_vec((2, 2), vec![0.9, 0.1, -0.3, 0.5]).unwrap();
        let a = contrastive_loss(&s, 4.0, TempMode::Multiply).unwrap();
        let b = contrastive_loss(&s, 0.25, TempMode::Divide).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mmse_and_total() {
        assert_eq!(mmse_loss(&[0.5, 0.7], &[0.5, 0.7]).unwrap(), 0.0);
        assert!((mmse_loss(&[0.6, 0.8], &[0.5, 0.7]).unwrap() - 0.01).abs() < 1e-12);
        assert!(mmse_loss(&[0.1], &[0.1, 0.2]).is_err());
        assert!((total_loss(0.3, 0.2, 0.5).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(total_loss(0.3, 0.2, 0.0).unwrap(), 0.3);
    }

    #[test]
    fn tau_clamped() {
        let mut s = store(2);
        set(&mut s, TAU, Mat::from_elem((1, 1), 1e-5));
        clamp_tau(&mut s);
        assert_eq!(s.value(TAU)[[0, 0]], 0.01);
        set(&mut s, TAU, Mat::from_elem((1, 1), 1e5));
        clamp_tau(&mut s);
        assert_eq!(s.value(TAU)[[0, 0]], 100.0);
    }
}
