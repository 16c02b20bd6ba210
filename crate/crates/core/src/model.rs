//! Full image–text model: both encoders, projections, cross-attention, and
//! the batch loss with gradients.
//!
//! Training uses split graphs. Each image and each distinct text gets its own
//! encoder graph; a head graph takes the encoder outputs as leaves and
//! computes the loss. The head's leaf gradients then seed the reverse pass of
//! every encoder graph. Gradients are accumulated in batch order, so results
//! are bit-reproducible.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{self, BatchVars, CrossAttnMode, TempMode};
use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::peft::{attach_layers, PeftStrategy};
use crate::synthcohort::{Diagnosis, Volume3D};
use crate::textenc::{self, TextConfig, TextVars};
use crate::textkit::{class_prompt, tokenize, TokenSequence, Vocab};
use crate::transformer::layer_param_count;
use crate::vision::{self, ImageVars, VisionConfig, VisionProbe};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
    /// Strategy applied to the vision backbone. The text side always uses
    /// input prompts.
    pub peft: PeftStrategy,
    pub cross_attn: CrossAttnMode,
    pub cross_heads: usize,
    pub temp_mode: TempMode,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vision: VisionConfig::desk(),
            text: TextConfig::desk(vocab_size),
            peft: PeftStrategy::Prompt,
            cross_attn: CrossAttnMode::Token,
            cross_heads: 1,
            // Dividing by τ = 10 keeps the desk-scale softmax uniform; see TempMode.
            temp_mode: TempMode::Multiply,
        }
    }

    pub fn paper(vocab_size: usize) -> Self {
        Self {
            vision: VisionConfig::paper(),
            text: TextConfig::paper(vocab_size),
            peft: PeftStrategy::Prompt,
            cross_attn: CrossAttnMode::Token,
            cross_heads: 1,
            temp_mode: TempMode::Divide,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        if self.vision.embed_dim != self.text.embed_dim {
            return Err(Error::config(format!(
                "vision dim {} and text dim {} must match",
                self.vision.embed_dim, self.text.embed_dim
            )));
        }
        let d = self.vision.embed_dim;
        if self.cross_heads == 0 || !d.is_multiple_of(self.cross_heads) {
            return Err(Error::config(format!(
                "cross-attention heads {} must divide dim {d}",
                self.cross_heads
            )));
        }
        self.peft.validate(d)
    }

    /// Vision config with the prompt length the PEFT strategy implies:
    /// visual prompts exist only under prompt tuning.
    pub fn effective_vision(&self) -> VisionConfig {
        let mut v = self.vision.clone();
        if self.peft != PeftStrategy::Prompt {
            v.prompt_len = 0;
        }
        v
    }

    /// Parameter counts derived from the config alone, without allocating.
    pub fn param_counts(&self) -> ParamCounts {
        let v = self.effective_vision();
        let t = &self.text;
        let d = v.embed_dim;
        let mut frozen = v.grid.patch_voxels() * d + d + v.num_patches() * d + d;
        frozen += v.layers * layer_param_count(d, v.mlp_ratio) + 2 * d;
        frozen += t.vocab_size * d + (1 + t.max_tokens) * d;
        frozen += t.layers * layer_param_count(d, t.mlp_ratio) + 2 * d;

        let mut trainable = d * d + v.prompt_blocks() * v.prompt_len * d;
        if v.mmse_token {
            trainable += d + (d * d + d) + (d + 1);
        }
        trainable += t.prompt_len * d + d * d;
        if self.cross_attn == CrossAttnMode::Token {
            trainable += 8 * (d * d + d);
        }
        trainable += 1;
        trainable += v.layers * self.peft.added_per_layer(d);
        ParamCounts {
            total: frozen + trainable,
            trainable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
}

impl ParamCounts {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Encoder outputs as plain values, reusable across steps when the encoder
/// has nothing trainable.
#[derive(Debug, Clone)]
pub struct ImageOut {
    pub cls: Mat,
    pub mmse: Option<Mat>,
    pub patches: Mat,
}

#[derive(Debug, Clone)]
pub struct TextOut {
    pub cls: Mat,
    pub tokens: Mat,
}

/// Memoized outputs of frozen encoders, keyed by caller-chosen image ids and
/// by token sequence.
#[derive(Debug, Default)]
pub struct EncoderCache {
    images: HashMap<usize, ImageOut>,
    texts: HashMap<TokenSequence, TextOut>,
}

impl EncoderCache {
    pub fn new() -> Self {
        Self::default()
    }
}

pub struct TrainSample<'a> {
    /// Stable id of the image, used for caching.
    pub key: usize,
    pub volume: &'a Volume3D,
    pub text: &'a TokenSequence,
    /// MMSE target in normalized units.
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cl: f64,
    pub mmse: f64,
}

pub struct BatchResult {
    pub loss: LossParts,
    /// Gradient per trainable parameter, sorted by name.
    pub grads: BTreeMap<String, Mat>,
}

/// Scalar similarity for one image–text pair on a single graph, with handles
/// for attribution.
pub struct PairVars {
    pub score: Var,
    pub image: ImageVars,
    pub text: TextVars,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocab,
}

fn accumulate(into: &mut BTreeMap<String, Mat>, grads: Vec<(String, Mat)>) {
    for (name, g) in grads {
        match into.get_mut(&name) {
            Some(acc) => *acc += &g,
            None => {
                into.insert(name, g);
            }
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.text.vocab_size != vocab.len() {
            return Err(Error::config(format!(
                "text vocab size {} does not match vocabulary of {} tokens",
                config.text.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vcfg = config.effective_vision();
        vision::init_params(&vcfg, &mut store, &mut rng);
        textenc::init_params(&config.text, &mut store, &mut rng);
        align::init_params(vcfg.embed_dim, config.cross_attn, &mut store, &mut rng);
        attach_layers(
            &mut store,
            &vcfg.layer_prefixes(),
            vcfg.embed_dim,
            &config.peft,
            &mut rng,
        )?;
        Ok(Self { config, store, vocab })
    }

    pub fn vision_config(&self) -> VisionConfig {
        self.config.effective_vision()
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        tokenize(text, &self.vocab, self.config.text.max_tokens)
    }

    pub fn class_tokens(&self, classes: &[Diagnosis]) -> Vec<TokenSequence> {
        classes.iter().map(|&c| self.tokenize(&class_prompt(c).text)).collect()
    }

    pub fn vision_trainable(&self) -> bool {
        self.store.any_trainable_with_prefix("vision.layers")
            || self.store.any_trainable_with_prefix("vision.prompts")
            || self.store.is_trainable(vision::MMSE_TOKEN)
    }

    pub fn text_trainable(&self) -> bool {
        self.store.is_trainable(textenc::PROMPTS)
    }

    pub fn encode_image(&self, volume: &Volume3D) -> Result<ImageOut> {
        let enc = vision::encode_image(
            volume,
            &self.store,
            &self.vision_config(),
            &self.config.peft,
            &VisionProbe::default(),
        )?;
        Ok(ImageOut {
            cls: enc.cls_out,
            mmse: enc.mmse_out,
            patches: enc.patch_out,
        })
    }

    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<TextOut> {
        let enc = textenc::encode_text(tokens, &self.store, &self.config.text, &PeftStrategy::Prompt)?;
        Ok(TextOut {
            cls: enc.pooled,
            tokens: enc.token_out,
        })
    }

    /// Project encoder outputs and assemble the head-graph batch.
    fn head_batch(&self, g: &mut Graph, cls_i: &[Var], patches: &[Var], cls_t: &[Var], tokens: &[Var]) -> BatchVars {
        let ci = g.concat_rows(cls_i);
        let images = vision::project_image_graph(g, &self.store, ci);
        let patches = patches
            .iter()
            .map(|&p| vision::project_image_graph(g, &self.store, p))
            .collect();
        let ct = g.concat_rows(cls_t);
        let texts = textenc::project_text_graph(g, &self.store, ct);
        let tokens = tokens
            .iter()
            .map(|&t| textenc::project_text_graph(g, &self.store, t))
            .collect();
        BatchVars {
            images,
            patches,
            texts,
            tokens,
        }
    }

    fn similarity_on(&self, g: &mut Graph, batch: &BatchVars) -> Var {
        align::similarity_graph(g, &self.store, batch, self.config.cross_attn, self.config.cross_heads)
    }

    /// Similarity matrix between already-encoded images and texts.
    pub fn similarity(&self, images: &[&ImageOut], texts: &[&TextOut]) -> Result<Mat> {
        if images.is_empty() || texts.is_empty() {
            return Err(Error::invalid("similarity needs at least one image and one text"));
        }
        let mut g = Graph::new();
        let ci: Vec<Var> = images.iter().map(|o| g.constant(o.cls.clone())).collect();
        let pi: Vec<Var> = images.iter().map(|o| g.constant(o.patches.clone())).collect();
        let ct: Vec<Var> = texts.iter().map(|o| g.constant(o.cls.clone())).collect();
        let tt: Vec<Var> = texts.iter().map(|o| g.constant(o.tokens.clone())).collect();
        let batch = self.head_batch(&mut g, &ci, &pi, &ct, &tt);
        let s = self.similarity_on(&mut g, &batch);
        let out = g.value(s).clone();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite similarity".into()));
        }
        Ok(out)
    }

    pub fn predict_mmse(&self, image: &ImageOut) -> Option<f64> {
        image.mmse.as_ref().map(|m| vision::predict_mmse(m, &self.store))
    }

    /// Loss and gradients of every trainable parameter for one batch.
    pub fn batch_loss(&self, batch: &[TrainSample], lambda: f64, cache: &mut EncoderCache) -> Result<BatchResult> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let vcfg = self.vision_config();
        let peft = &self.config.peft;
        let vision_live = self.vision_trainable();
        let text_live = self.text_trainable();

        // image encoders
        let mut image_graphs: Vec<Option<(Graph, ImageVars)>> = Vec::with_capacity(batch.len());
        let mut image_outs: Vec<ImageOut> = Vec::with_capacity(batch.len());
        for s in batch {
            if vision_live {
                let mut g = Graph::new();
                let vars = vision::forward(&mut g, &self.store, &vcfg, peft, s.volume, &VisionProbe::default())?;
                image_outs.push(ImageOut {
                    cls: g.value(vars.cls).clone(),
                    mmse: vars.mmse.map(|m| g.value(m).clone()),
                    patches: g.value(vars.patches).clone(),
                });
                image_graphs.push(Some((g, vars)));
            } else {
                let out = match cache.images.get(&s.key) {
                    Some(o) => o.clone(),
                    None => {
                        let o = self.encode_image(s.volume)?;
                        cache.images.insert(s.key, o.clone());
                        o
                    }
                };
                image_outs.push(out);
                image_graphs.push(None);
            }
        }

        // text encoders, one per distinct sequence
        let mut unique: Vec<&TokenSequence> = Vec::new();
        let mut slot = Vec::with_capacity(batch.len());
        for s in batch {
            match unique.iter().position(|u| *u == s.text) {
                Some(k) => slot.push(k),
                None => {
                    slot.push(unique.len());
                    unique.push(s.text);
                }
            }
        }
        let mut text_graphs: Vec<Option<(Graph, TextVars)>> = Vec::with_capacity(unique.len());
        let mut text_outs: Vec<TextOut> = Vec::with_capacity(unique.len());
        for &t in &unique {
            if text_live {
                let mut g = Graph::new();
                let vars = textenc::forward(&mut g, &self.store, &self.config.text, &PeftStrategy::Prompt, t)?;
                text_outs.push(TextOut {
                    cls: g.value(vars.cls).clone(),
                    tokens: g.value(vars.tokens).clone(),
                });
                text_graphs.push(Some((g, vars)));
            } else {
                let out = match cache.texts.get(t) {
                    Some(o) => o.clone(),
                    None => {
                        let o = self.encode_text(t)?;
                        cache.texts.insert(t.clone(), o.clone());
                        o
                    }
                };
                text_outs.push(out);
                text_graphs.push(None);
            }
        }

        // head graph
        let mut h = Graph::new();
        let leaf = |h: &mut Graph, m: &Mat, live: bool| {
            if live {
                h.input(m.clone())
            } else {
                h.constant(m.clone())
            }
        };
        let ci: Vec<Var> = image_outs.iter().map(|o| leaf(&mut h, &o.cls, vision_live)).collect();
        let mi: Vec<Option<Var>> = image_outs
            .iter()
            .map(|o| o.mmse.as_ref().map(|m| leaf(&mut h, m, vision_live)))
            .collect();
        let pi: Vec<Var> = image_outs
            .iter()
            .map(|o| leaf(&mut h, &o.patches, vision_live))
            .collect();
        let cu: Vec<Var> = text_outs.iter().map(|o| leaf(&mut h, &o.cls, text_live)).collect();
        let tu: Vec<Var> = text_outs.iter().map(|o| leaf(&mut h, &o.tokens, text_live)).collect();
        let ct: Vec<Var> = slot.iter().map(|&k| cu[k]).collect();
        let tt: Vec<Var> = slot.iter().map(|&k| tu[k]).collect();

        let bv = self.head_batch(&mut h, &ci, &pi, &ct, &tt);
        let s = self.similarity_on(&mut h, &bv);
        let tau = h.param(&self.store, align::TAU);
        let cl = align::contrastive_graph(&mut h, s, tau, self.config.temp_mode);
        let mmse = if vcfg.mmse_token {
            let ms: Vec<Var> = mi.iter().map(|m| m.expect("mmse token enabled")).collect();
            let m = h.concat_rows(&ms);
            let pred = vision::mmse_head_graph(&mut h, &self.store, m);
            let target = Mat::from_shape_fn((batch.len(), 1), |(i, _)| batch[i].target);
            let target = h.constant(target);
            Some(align::mmse_graph(&mut h, pred, target))
        } else {
            None
        };
        let total = align::total_graph(&mut h, cl, mmse, lambda);
        let loss = LossParts {
            total: h.scalar(total),
            cl: h.scalar(cl),
            mmse: mmse.map(|m| h.scalar(m)).unwrap_or(0.0),
        };

        let hg = h.backward(total);
        let mut grads = BTreeMap::new();
        accumulate(&mut grads, hg.param_grads(&h));
        for (i, entry) in image_graphs.iter().enumerate() {
            if let Some((g, vars)) = entry {
                let mut seeds = vec![
                    (vars.cls, hg.get_or_zeros(ci[i], h.shape(ci[i]))),
                    (vars.patches, hg.get_or_zeros(pi[i], h.shape(pi[i]))),
                ];
                if let (Some(mv), Some(ml)) = (vars.mmse, mi[i]) {
                    seeds.push((mv, hg.get_or_zeros(ml, h.shape(ml))));
                }
                accumulate(&mut grads, g.backward_seeded(&seeds).param_grads(g));
            }
        }
        for (k, entry) in text_graphs.iter().enumerate() {
            if let Some((g, vars)) = entry {
                let seeds = vec![
                    (vars.cls, hg.get_or_zeros(cu[k], h.shape(cu[k]))),
                    (vars.tokens, hg.get_or_zeros(tu[k], h.shape(tu[k]))),
                ];
                accumulate(&mut grads, g.backward_seeded(&seeds).param_grads(g));
            }
        }
        Ok(BatchResult { loss, grads })
    }

    /// Refined similarity of one image and one text from encoder outputs
    /// already placed on `g` (CLS row, patch rows, pooled text, token rows).
    pub fn pair_score(&self, g: &mut Graph, image_cls: Var, patches: Var, text_cls: Var, text_tokens: Var) -> Var {
        let batch = self.head_batch(g, &[image_cls], &[patches], &[text_cls], &[text_tokens]);
        self.similarity_on(g, &batch)
    }

    /// End-to-end single graph for one image and one text given as token
    /// embeddings (rows for the non-pad positions of `tokens`).
    pub fn pair_graph(
        &self,
        g: &mut Graph,
        volume: &Volume3D,
        tokens: &TokenSequence,
        embeds: Var,
        probe: &VisionProbe,
    ) -> Result<PairVars> {
        let image = vision::forward(g, &self.store, &self.vision_config(), &self.config.peft, volume, probe)?;
        let positions = tokens.content_positions();
        if positions.is_empty() {
            return Err(Error::invalid("token sequence has no non-pad tokens"));
        }
        let text = textenc::forward_embeddings(
            g,
            &self.store,
            &self.config.text,
            &PeftStrategy::Prompt,
            embeds,
            &positions,
        );
        let s = self.pair_score(g, image.cls, image.patches, text.cls, text.tokens);
        Ok(PairVars { score: s, image, text })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcohort::Grid;
    use crate::textkit::build_vocab;

    pub(crate) fn tiny_config(vocab: usize) -> ModelConfig {
        let mut c = ModelConfig::desk(vocab);
        c.vision.grid = Grid {
            dims: [8, 8, 8],
            patch: [4, 4, 4],
        };
        c.vision.embed_dim = 16;
        c.vision.layers = 2;
        c.vision.heads = 2;
        c.vision.prompt_len = 2;
        c.text.embed_dim = 16;
        c.text.layers = 2;
        c.text.heads = 2;
        c.text.prompt_len = 2;
        c.text.max_tokens = 8;
        c
    }

    fn vocab() -> Vocab {
        build_vocab(&Diagnosis::ALL.map(class_prompt)).unwrap()
    }

    #[test]
    fn analytic_counts_match_store() {
        let v = vocab();
        for peft in [
            PeftStrategy::Prompt,
            PeftStrategy::lora_default(),
            PeftStrategy::adapter_default(),
        ] {
            for cross in [CrossAttnMode::Token, CrossAttnMode::Off] {
                let mut c = tiny_config(v.len());
                c.peft = peft.clone();
                c.cross_attn = cross;
                let m = Model::new(c.clone(), v.clone(), 1).unwrap();
                let counts = c.param_counts();
                assert_eq!(counts.total, m.store.count_total(), "{peft:?} {cross:?}");
                assert_eq!(counts.trainable, m.store.count_trainable(), "{peft:?} {cross:?}");
            }
        }
        let mut desk = ModelConfig::desk(v.len());
        desk.vision.mmse_token = false;
        let m = Model::new(desk.clone(), v.clone(), 1).unwrap();
        assert_eq!(desk.param_counts().total, m.store.count_total());
    }

    #[test]
    fn vocab_size_must_match() {
        let v = vocab();
        assert!(Model::new(tiny_config(v.len() + 1), v, 0).is_err());
    }

    #[test]
    fn paper_trainable_fraction_is_small() {
        let counts = ModelConfig::paper(200).param_counts();
        assert!(counts.trainable_fraction() < 0.15, "{counts:?}");
    }
}
