//! 3D ViT image encoder with deep visual prompts and an auxiliary MMSE token.
//!
//! Token order inside every layer is `[CLS, MMSE, prompts, patches]`. In deep
//! mode each layer receives its own fresh prompt block and the prompt outputs
//! of the previous layer are dropped; in shallow mode a single prompt block is
//! inserted before the first layer and propagated like any other token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamStore, INIT_STD};
use crate::peft::PeftStrategy;
use crate::synthcohort::{Grid, Volume3D};
use crate::transformer::{
    init_layer, init_layer_norm, init_linear, layer_forward, layer_norm, linear, project, project_rows,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    #[default]
    Deep,
    Shallow,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(PromptMode::Deep),
            "shallow" => Ok(PromptMode::Shallow),
            other => Err(Error::config(format!("unknown prompt mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    pub grid: Grid,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub prompt_len: usize,
    pub mlp_ratio: usize,
    pub prompt_mode: PromptMode,
    pub mmse_token: bool,
}

impl VisionConfig {
    pub fn desk() -> Self {
        Self {
            grid: Grid::DESK,
            embed_dim: 64,
            layers: 2,
            heads: 4,
            prompt_len: 8,
            mlp_ratio: 4,
            prompt_mode: PromptMode::Deep,
            mmse_token: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            grid: Grid::PAPER,
            embed_dim: 768,
            layers: 12,
            heads: 12,
            prompt_len: 20,
            mlp_ratio: 4,
            prompt_mode: PromptMode::Deep,
            mmse_token: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate().map_err(|e| Error::config(e.to_string()))?;
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("vision layers and mlp ratio must be >= 1"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.grid.num_patches()
    }

    /// CLS plus the optional MMSE token.
    pub fn special_tokens(&self) -> usize {
        1 + usize::from(self.mmse_token)
    }

    /// Sequence length seen by every layer.
    pub fn seq_len(&self) -> usize {
        self.special_tokens() + self.prompt_len + self.num_patches()
    }

    /// Prompt blocks held as parameters.
    pub fn prompt_blocks(&self) -> usize {
        if self.prompt_len == 0 {
            0
        } else {
            match self.prompt_mode {
                PromptMode::Deep => self.layers,
                PromptMode::Shallow => 1,
            }
        }
    }

    pub fn layer_prefixes(&self) -> Vec<String> {
        (0..self.layers).map(|l| format!("vision.layers.{l}")).collect()
    }
}

pub fn prompt_name(block: usize) -> String {
    format!("vision.prompts.{block}")
}

pub const MMSE_TOKEN: &str = "vision.mmse_token";
pub const PROJ: &str = "vision.proj";
pub const MMSE_FC1: &str = "vision.mmse_head.fc1";
pub const MMSE_FC2: &str = "vision.mmse_head.fc2";

/// MMSE targets are regressed as `y / MMSE_SCALE`.
pub const MMSE_SCALE: f64 = 30.0;

pub fn normalize_mmse(score: f64) -> f64 {
    score / MMSE_SCALE
}

pub fn denormalize_mmse(pred: f64) -> f64 {
    pred * MMSE_SCALE
}

/// Frozen backbone plus trainable prompts and MMSE token.
pub fn init_params<R: Rng + ?Sized>(cfg: &VisionConfig, store: &mut ParamStore, rng: &mut R) {
    let d = cfg.embed_dim;
    let pv = cfg.grid.patch_voxels();
    store.insert("vision.patch.w", trunc_normal(rng, pv, d, INIT_STD), false);
    store.insert("vision.patch.b", Mat::zeros((1, d)), false);
    store.insert("vision.pos", trunc_normal(rng, cfg.num_patches(), d, INIT_STD), false);
    store.insert("vision.cls", trunc_normal(rng, 1, d, INIT_STD), false);
    for prefix in cfg.layer_prefixes() {
        init_layer(store, &prefix, d, cfg.mlp_ratio, rng);
    }
    init_layer_norm(store, "vision.norm", d, false);
    init_linear(store, PROJ, d, d, false, true, rng);
    if cfg.mmse_token {
        store.insert(MMSE_TOKEN, trunc_normal(rng, 1, d, INIT_STD), true);
        init_linear(store, MMSE_FC1, d, d, true, true, rng);
        init_linear(store, MMSE_FC2, d, 1, true, true, rng);
    }
    for b in 0..cfg.prompt_blocks() {
        store.insert(prompt_name(b), trunc_normal(rng, cfg.prompt_len, d, INIT_STD), true);
    }
}

/// Non-overlapping patches as rows, C order over the patch grid and within
/// each patch (equivalent to a stride-equals-kernel 3D convolution input).
pub fn extract_patches(volume: &Volume3D, grid: &Grid) -> Result<Mat> {
    grid.validate()?;
    if volume.dims != grid.dims {
        return Err(Error::invalid(format!(
            "volume dims {:?} do not match configured {:?}",
            volume.dims, grid.dims
        )));
    }
    let [gd, gh, gw] = grid.patch_grid();
    let [pd, ph, pw] = grid.patch;
    let mut out = Mat::zeros((grid.num_patches(), grid.patch_voxels()));
    let mut n = 0;
    for a in 0..gd {
        for b in 0..gh {
            for c in 0..gw {
                let mut row = out.row_mut(n);
                let mut k = 0;
                for d in a * pd..(a + 1) * pd {
                    for h in b * ph..(b + 1) * ph {
                        let start = volume.index(d, h, c * pw);
                        for &v in &volume.voxels[start..start + pw] {
                            row[k] = v as f64;
                            k += 1;
                        }
                    }
                }
                n += 1;
            }
        }
    }
    Ok(out)
}

/// Diagnostic hooks for the forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct VisionProbe {
    /// Add N(0, 1) noise (seeded) to each layer's prompt outputs before they
    /// are dropped. Only meaningful in deep mode.
    pub discard_noise: Option<u64>,
    /// Make the input patch embeddings a tracked leaf so gradients reach them.
    pub track_input: bool,
}

/// Graph handles produced by the image encoder.
#[derive(Debug, Clone, Copy)]
pub struct ImageVars {
    pub cls: Var,
    pub mmse: Option<Var>,
    /// Final-layer patch states (m×d).
    pub patches: Var,
    /// Input patch embeddings (E_0).
    pub patch_input: Var,
}

/// Patch projection plus positional embedding on an existing graph.
pub fn patch_embed_graph(g: &mut Graph, store: &ParamStore, cfg: &VisionConfig, volume: &Volume3D) -> Result<Var> {
    let patches = extract_patches(volume, &cfg.grid)?;
    let x = g.constant(patches);
    let w = g.param(store, "vision.patch.w");
    let b = g.param(store, "vision.patch.b");
    let pos = g.param(store, "vision.pos");
    let e = g.matmul(x, w);
    let e = g.add_row(e, b);
    Ok(g.add(e, pos))
}

pub fn patch_embed(volume: &Volume3D, store: &ParamStore, cfg: &VisionConfig) -> Result<Mat> {
    let mut g = Graph::new();
    let e = patch_embed_graph(&mut g, store, cfg, volume)?;
    Ok(g.value(e).clone())
}

fn noise_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &VisionConfig,
    peft: &PeftStrategy,
    volume: &Volume3D,
    probe: &VisionProbe,
) -> Result<ImageVars> {
    let e0 = patch_embed_graph(g, store, cfg, volume)?;
    let patch_input = if probe.track_input {
        let e0_value = g.value(e0).clone();
        g.input(e0_value)
    } else {
        e0
    };

    let special = cfg.special_tokens();
    let lp = cfg.prompt_len;
    let m = cfg.num_patches();
    let mut head = vec![g.param(store, "vision.cls")];
    if cfg.mmse_token {
        head.push(g.param(store, MMSE_TOKEN));
    }
    if lp > 0 {
        head.push(g.param(store, &prompt_name(0)));
    }
    head.push(patch_input);
    let mut x = g.concat_rows(&head);

    let mut noise_rng = probe.discard_noise.map(ChaCha8Rng::seed_from_u64);
    let deep = cfg.prompt_mode == PromptMode::Deep && lp > 0;
    for (l, prefix) in cfg.layer_prefixes().iter().enumerate() {
        if deep && l > 0 {
            x = replace_prompts(g, store, x, special, lp, m, prompt_name(l), noise_rng.as_mut());
        }
        x = layer_forward(g, store, prefix, x, cfg.heads, peft);
    }
    let x = layer_norm(g, store, "vision.norm", x);
    let cls = g.slice_rows(x, 0, 1);
    let mmse = cfg.mmse_token.then(|| g.slice_rows(x, 1, 1));
    let patches = g.slice_rows(x, special + lp, m);
    Ok(ImageVars {
        cls,
        mmse,
        patches,
        patch_input,
    })
}

fn prompt_row_mask(special: usize, lp: usize, m: usize, d: usize) -> Mat {
    Mat::from_shape_fn((special + lp + m, d), |(i, _)| {
        if (special..special + lp).contains(&i) {
            1.0
        } else {
            0.0
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn replace_prompts(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    special: usize,
    lp: usize,
    m: usize,
    fresh: String,
    noise: Option<&mut ChaCha8Rng>,
) -> Var {
    let x = match noise {
        Some(rng) => {
            let d = g.shape(x).1;
            let n = g.constant(noise_rows(rng, special + lp + m, d));
            let mask = g.constant(prompt_row_mask(special, lp, m, d));
            let n = g.mul(n, mask);
            g.add(x, n)
        }
        None => x,
    };
    let keep_head = g.slice_rows(x, 0, special);
    let keep_tail = g.slice_rows(x, special + lp, m);
    let p = g.param(store, &fresh);
    g.concat_rows(&[keep_head, p, keep_tail])
}

/// Unit image embedding `v` from the CLS output.
pub fn project_image_graph(g: &mut Graph, store: &ParamStore, cls: Var) -> Var {
    project(g, store, PROJ, cls)
}

/// Normalized MMSE prediction from the MMSE-token output.
pub fn mmse_head_graph(g: &mut Graph, store: &ParamStore, mmse: Var) -> Var {
    let h = linear(g, store, MMSE_FC1, mmse);
    let h = g.gelu(h);
    linear(g, store, MMSE_FC2, h)
}

pub fn project_image(cls_out: &Mat, store: &ParamStore) -> Result<Mat> {
    project_rows(store, PROJ, cls_out)
}

pub fn predict_mmse(mmse_out: &Mat, store: &ParamStore) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(mmse_out.clone());
    let y = mmse_head_graph(&mut g, store, x);
    g.scalar(y)
}

/// Final-layer outputs as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoding {
    pub cls_out: Mat,
    pub mmse_out: Option<Mat>,
    pub patch_out: Mat,
}

pub fn encode_image(
    volume: &Volume3D,
    store: &ParamStore,
    cfg: &VisionConfig,
    peft: &PeftStrategy,
    probe: &VisionProbe,
) -> Result<ImageEncoding> {
    let mut g = Graph::new();
    let vars = forward(&mut g, store, cfg, peft, volume, probe)?;
    Ok(ImageEncoding {
        cls_out: g.value(vars.cls).clone(),
        mmse_out: vars.mmse.map(|v| g.value(v).clone()),
        patch_out: g.value(vars.patches).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcohort::{gen_subject, render_volume, Diagnosis, DistributionProfile};

    fn small_cfg() -> VisionConfig {
        VisionConfig {
            grid: Grid {
                dims: [8, 8, 8],
                patch: [4, 4, 4],
            },
            embed_dim: 16,
            layers: 2,
            heads: 2,
            prompt_len: 3,
            mlp_ratio: 2,
            prompt_mode: PromptMode::Deep,
            mmse_token: true,
        }
    }

    fn setup(cfg: &VisionConfig) -> (ParamStore, Volume3D) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_params(cfg, &mut store, &mut rng);
        let r = gen_subject(1, Diagnosis::AD, &DistributionProfile::default());
        (store, render_volume(&r, &cfg.grid).unwrap())
    }

    #[test]
    fn patch_count_identities() {
        assert_eq!(Grid::PAPER.num_patches(), 2048);
        assert_eq!(Grid::DESK.num_patches(), 128);
        let mut paper = VisionConfig::paper();
        assert_eq!(paper.seq_len(), 2070);
        paper.prompt_len = 0;
        assert_eq!(paper.seq_len(), 2050);
    }

    #[test]
    fn zero_volume_embeds_to_bias() {
        let cfg = small_cfg();
        let (mut store, _) = setup(&cfg);
        let bias = Mat::from_shape_fn((1, 16), |(_, j)| j as f64 * 0.1);
        store.get_mut("vision.patch.b").unwrap().value = bias.clone();
        store.get_mut("vision.pos").unwrap().value.fill(0.0);
        let e = patch_embed(&Volume3D::zeros(cfg.grid.dims), &store, &cfg).unwrap();
        assert_eq!(e.nrows(), 8);
        for row in e.rows() {
            assert_eq!(row, bias.row(0));
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let cfg = small_cfg();
        let (store, _) = setup(&cfg);
        assert!(patch_embed(&Volume3D::zeros([8, 8, 4]), &store, &cfg).is_err());
    }

    #[test]
    fn patch_extraction_order() {
        let grid = Grid {
            dims: [2, 2, 4],
            patch: [1, 2, 2],
        };
        let vol = Volume3D {
            dims: grid.dims,
            voxels: (0..16).map(|v| v as f32).collect(),
        };
        let p = extract_patches(&vol, &grid).unwrap();
        assert_eq!(p.row(0).to_vec(), vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1).to_vec(), vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2).to_vec(), vec![8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn output_shapes() {
        let cfg = small_cfg();
        let (store, vol) = setup(&cfg);
        let enc = encode_image(&vol, &store, &cfg, &PeftStrategy::Prompt, &VisionProbe::default()).unwrap();
        assert_eq!(enc.cls_out.dim(), (1, 16));
        assert_eq!(enc.mmse_out.as_ref().unwrap().dim(), (1, 16));
        assert_eq!(enc.patch_out.dim(), (8, 16));
        assert!(enc.cls_out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn discarded_prompt_noise_has_no_effect_in_deep_mode() {
        let cfg = small_cfg();
        let (store, vol) = setup(&cfg);
        let peft = PeftStrategy::Prompt;
        let clean = encode_image(&vol, &store, &cfg, &peft, &VisionProbe::default()).unwrap();
        let noisy = encode_image(
            &vol,
            &store,
            &cfg,
            &peft,
            &VisionProbe {
                discard_noise: Some(9),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(clean, noisy);
    }

    #[test]
    fn shallow_mode_propagates_prompts() {
        let mut cfg = small_cfg();
        cfg.prompt_mode = PromptMode::Shallow;
        let (store, vol) = setup(&cfg);
        assert!(store.contains(&prompt_name(0)) && !store.contains(&prompt_name(1)));
        let enc = encode_image(&vol, &store, &cfg, &PeftStrategy::Prompt, &VisionProbe::default()).unwrap();
        assert_eq!(enc.patch_out.dim(), (8, 16));
    }

    #[test]
    fn projection_is_unit_and_scale_invariant() {
        let cfg = small_cfg();
        let (store, _) = setup(&cfg);
        let x = Mat::from_shape_fn((1, 16), |(_, j)| (j as f64 * 0.7).sin());
        let v = project_image(&x, &store).unwrap();
        assert!((v.iter().map(|a| a * a).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(project_image(&(&x * 2.0), &store).unwrap(), v);
        assert!(matches!(
            project_image(&Mat::zeros((1, 16)), &store),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn identity_projection_keeps_basis_vector() {
        let cfg = small_cfg();
        let (mut store, _) = setup(&cfg);
        store.get_mut("vision.proj.w").unwrap().value = Mat::eye(16);
        let mut e1 = Mat::zeros((1, 16));
        e1[[0, 0]] = 1.0;
        assert_eq!(project_image(&e1, &store).unwrap(), e1);
    }

    #[test]
    fn mmse_head_constant_and_denormalization() {
        let cfg = small_cfg();
        let (mut store, _) = setup(&cfg);
        store.get_mut("vision.mmse_head.fc1.w").unwrap().value.fill(0.0);
        store.get_mut("vision.mmse_head.fc2.w").unwrap().value.fill(0.0);
        store.get_mut("vision.mmse_head.fc2.b").unwrap().value.fill(0.9);
        let y = predict_mmse(&Mat::from_elem((1, 16), 0.3), &store);
        assert_eq!(y, 0.9);
        assert!((denormalize_mmse(y) - 27.0).abs() < 1e-12);
        assert_eq!(normalize_mmse(30.0), 1.0);
    }

    #[test]
    fn mmse_head_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let (store, _) = setup(&cfg);
        let m0 = Mat::from_shape_fn((1, 16), |(_, j)| ((j * 7 % 5) as f64 - 2.0) * 0.4);
        let mut g = Graph::new();
        let m = g.input(m0.clone());
        let y = mmse_head_graph(&mut g, &store, m);
        let grad = g.backward(y).get(m).unwrap().clone();
        let h = 1e-5;
        for j in 0..16 {
            let mut p = m0.clone();
            p[[0, j]] += h;
            let mut q = m0.clone();
            q[[0, j]] -= h;
            let fd = (predict_mmse(&p, &store) - predict_mmse(&q, &store)) / (2.0 * h);
            let denom = fd.abs().max(grad[[0, j]].abs()).max(1e-8);
            assert!(
                (fd - grad[[0, j]]).abs() / denom < 1e-4,
                "{j}: {fd} vs {}",
                grad[[0, j]]
            );
        }
    }

    #[test]
    fn zero_prompts_is_plain_vit() {
        let mut cfg = small_cfg();
        cfg.prompt_len = 0;
        let (store, vol) = setup(&cfg);
        assert!(!store.names().any(|n| n.starts_with("vision.prompts")));
        let enc = encode_image(&vol, &store, &cfg, &PeftStrategy::Prompt, &VisionProbe::default()).unwrap();
        assert_eq!(enc.patch_out.dim(), (8, 16));
    }
}
