//! Token attributions by integrated gradients and biomarker-conditioned
//! patch heatmaps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::dataset::Scan;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::peft::PeftStrategy;
use crate::synthcohort::{write_file, Biomarker, Diagnosis, Volume3D};
use crate::textenc;
use crate::textkit::{split_tokens, Report};
use crate::vision::VisionProbe;

/// Placeholder for masked report words. It is not in any vocabulary, so it
/// tokenizes to `[UNK]`.
pub const MASK: &str = "[MASK]";

pub const HEATMAP_FORMULA: &str = "grad-eclip-style";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    /// Non-pad tokens of the attributed text, in order.
    pub tokens: Vec<String>,
    /// Sequence position of each token.
    pub positions: Vec<usize>,
    pub scores: Vec<f64>,
    /// Similarity at the input and at the all-`[PAD]` baseline.
    pub score: f64,
    pub baseline_score: f64,
    /// |Σ attributions − (score − baseline_score)| / |score − baseline_score|.
    pub completeness_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub token: String,
    pub position: usize,
    pub score: f64,
}

/// Integrated gradients of a scalar function of a matrix input, reduced to
/// one value per row by summing over columns. `grad` returns ∂f/∂x at a
/// point. Uses the right Riemann sum over `steps` interpolants.
pub fn integrated_gradients_with<F>(x: &Mat, baseline: &Mat, steps: usize, mut grad: F) -> Result<Vec<f64>>
where
    F: FnMut(&Mat) -> Result<Mat>,
{
    if steps == 0 {
        return Err(Error::invalid("integrated gradients needs at least one step"));
    }
    if x.dim() != baseline.dim() {
        return Err(Error::invalid(format!(
            "input shape {:?} differs from baseline shape {:?}",
            x.dim(),
            baseline.dim()
        )));
    }
    let delta = x - baseline;
    let mut total = Mat::zeros(x.dim());
    for t in 1..=steps {
        let alpha = t as f64 / steps as f64;
        let point = baseline + &(&delta * alpha);
        let g = grad(&point)?;
        if g.dim() != x.dim() {
            return Err(Error::invalid("gradient shape differs from input shape"));
        }
        total += &g;
    }
    let attr = delta * total / steps as f64;
    Ok(attr.rows().into_iter().map(|r| r.sum()).collect())
}

fn relative_residual(sum: f64, delta: f64) -> f64 {
    let err = (sum - delta).abs();
    if delta.abs() > 1e-300 {
        err / delta.abs()
    } else {
        err
    }
}

/// Attribute the image–text similarity to the text's tokens, in
/// token-embedding space with the `[PAD]` embedding as baseline.
pub fn integrated_gradients(model: &Model, volume: &Volume3D, text: &str, steps: usize) -> Result<AttributionResult> {
    if steps == 0 {
        return Err(Error::invalid("integrated gradients needs at least one step"));
    }
    let tokens = model.tokenize(text);
    let positions = tokens.content_positions();
    if positions.is_empty() {
        return Err(Error::invalid("text has no tokens to attribute"));
    }
    let image = model.encode_image(volume)?;
    let tcfg = &model.config.text;
    let x = textenc::token_embeddings(&model.store, tcfg, &tokens)?;
    let baseline = textenc::pad_embeddings(&model.store, positions.len());

    let run = |embeds: &Mat| -> (f64, Mat) {
        let mut g = Graph::new();
        let e = g.input(embeds.clone());
        let text = textenc::forward_embeddings(&mut g, &model.store, tcfg, &PeftStrategy::Prompt, e, &positions);
        let ci = g.constant(image.cls.clone());
        let pi = g.constant(image.patches.clone());
        let s = model.pair_score(&mut g, ci, pi, text.cls, text.tokens);
        let grads = g.backward(s);
        (g.scalar(s), grads.get_or_zeros(e, embeds.dim()))
    };

    let scores = integrated_gradients_with(&x, &baseline, steps, |p| Ok(run(p).1))?;
    let score = run(&x).0;
    let baseline_score = run(&baseline).0;
    let completeness_residual = relative_residual(scores.iter().sum(), score - baseline_score);
    Ok(AttributionResult {
        tokens: tokens
            .content_tokens(&model.vocab)
            .into_iter()
            .map(String::from)
            .collect(),
        positions,
        scores,
        score,
        baseline_score,
        completeness_residual,
    })
}

/// The `k` highest-attributed tokens; ties go to the earlier position.
pub fn top_k_tokens(attr: &AttributionResult, k: usize) -> Result<Vec<RankedToken>> {
    if k > attr.scores.len() {
        return Err(Error::invalid(format!(
            "asked for top {k} of {} tokens",
            attr.scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..attr.scores.len()).collect();
    order.sort_by(|&a, &b| {
        attr.scores[b]
            .total_cmp(&attr.scores[a])
            .then(attr.positions[a].cmp(&attr.positions[b]))
    });
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| RankedToken {
            token: attr.tokens[i].clone(),
            position: attr.positions[i],
            score: attr.scores[i],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub completeness_residual: f64,
    pub top_k: Vec<RankedToken>,
}

impl AttributionReport {
    pub fn new(attr: &AttributionResult, k: usize) -> Result<Self> {
        Ok(Self {
            tokens: attr.tokens.clone(),
            scores: attr.scores.clone(),
            completeness_residual: attr.completeness_residual,
            top_k: top_k_tokens(attr, k.min(attr.scores.len()))?,
        })
    }
}

fn mask_run(n: usize) -> String {
    vec![MASK; n].join(" ")
}

/// Keep one biomarker clause and mask the name and value of the other five.
/// The words `mm3`, the colons, and the commas stay, so the report keeps its
/// shape and token count. Clauses that are already masked are left alone.
pub fn mask_biomarkers(report: &Report, keep: Biomarker) -> Report {
    let mut text = report.text.clone();
    for b in Biomarker::ALL {
        if b == keep {
            continue;
        }
        let label = format!("{}: ", b.report_label());
        let Some(start) = text.find(&label) else { continue };
        let value_start = start + label.len();
        let Some(value_len) = text[value_start..].find(" mm3") else {
            continue;
        };
        let value = &text[value_start..value_start + value_len];
        let masked = format!(
            "{}: {}",
            mask_run(split_tokens(b.report_label()).len()),
            mask_run(split_tokens(value).len())
        );
        text.replace_range(start..value_start + value_len, &masked);
    }
    Report {
        text,
        source_subject: report.source_subject.clone(),
    }
}

/// Which patch states the heatmap gradient is taken against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapLayer {
    /// Patch embeddings entering the first transformer layer.
    Input,
    /// Patch outputs of the last layer.
    #[default]
    Final,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Patch-grid shape (depth, height, width).
    pub dims: [usize; 3],
    /// Non-negative values in C order over `dims`.
    pub values: Vec<f64>,
    pub biomarker: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub dims: [usize; 3],
    pub biomarker: String,
    pub formula: String,
    pub layer: HeatmapLayer,
    pub max: f64,
}

/// Written heatmap artifacts.
#[derive(Debug, Clone)]
pub struct HeatmapFiles {
    pub sidecar: PathBuf,
    pub grid: PathBuf,
    pub pgm: Option<PathBuf>,
}

impl Heatmap {
    /// h_n = max(0, Σ_c grad[n, c] · act[n, c]), reshaped to the patch grid.
    pub fn from_grad_activation(grad: &Mat, act: &Mat, dims: [usize; 3], biomarker: &str) -> Result<Self> {
        if grad.dim() != act.dim() {
            return Err(Error::invalid("gradient and activation shapes differ"));
        }
        if grad.nrows() != dims.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "{} patch rows do not fill a {dims:?} grid",
                grad.nrows()
            )));
        }
        let values = (grad * act).rows().into_iter().map(|r| r.sum().max(0.0)).collect();
        Ok(Self {
            dims,
            values,
            biomarker: biomarker.to_string(),
        })
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Mean heat over `mask` patches divided by the mean over the rest.
    pub fn region_contrast(&self, mask: &[bool]) -> Result<f64> {
        if mask.len() != self.values.len() {
            return Err(Error::invalid("mask length differs from heatmap size"));
        }
        let mean = |inside: bool| {
            let v: Vec<f64> = self
                .values
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m == inside)
                .map(|(&v, _)| v)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        match (mean(true), mean(false)) {
            (Some(a), Some(b)) if b > 0.0 => Ok(a / b),
            (Some(a), Some(_)) if a > 0.0 => Ok(f64::INFINITY),
            (Some(_), Some(_)) => Ok(1.0),
            _ => Err(Error::invalid("mask must split the grid into two non-empty regions")),
        }
    }

    /// One depth slice as an 8-bit PGM, scaled to the heatmap maximum.
    pub fn pgm_slice(&self, depth: usize) -> Result<Vec<u8>> {
        let [d, h, w] = self.dims;
        if depth >= d {
            return Err(Error::invalid(format!("slice {depth} outside depth {d}")));
        }
        let max = self.max();
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for v in &self.values[depth * h * w..(depth + 1) * h * w] {
            let level = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
            out.push(level as u8);
        }
        Ok(out)
    }

    /// Write `<stem>.json`, `<stem>.f32` (little-endian), and optionally the
    /// middle depth slice as `<stem>.pgm`.
    pub fn write(&self, dir: &Path, stem: &str, layer: HeatmapLayer, pgm: bool) -> Result<HeatmapFiles> {
        let sidecar = HeatmapSidecar {
            dims: self.dims,
            biomarker: self.biomarker.clone(),
            formula: HEATMAP_FORMULA.to_string(),
            layer,
            max: self.max(),
        };
        let json = dir.join(format!("{stem}.json"));
        write_file(&json, &serde_json::to_vec_pretty(&sidecar)?)?;
        let grid = dir.join(format!("{stem}.f32"));
        let bytes: Vec<u8> = self.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        write_file(&grid, &bytes)?;
        let pgm = if pgm {
            let path = dir.join(format!("{stem}.pgm"));
            write_file(&path, &self.pgm_slice(self.dims[0] / 2)?)?;
            Some(path)
        } else {
            None
        };
        Ok(HeatmapFiles {
            sidecar: json,
            grid,
            pgm,
        })
    }
}

/// Heatmap of the similarity between `volume` and `text` over image patches.
pub fn patch_heatmap(
    model: &Model,
    volume: &Volume3D,
    text: &str,
    biomarker: &str,
    layer: HeatmapLayer,
) -> Result<Heatmap> {
    let tokens = model.tokenize(text);
    let encoded = model.encode_text(&tokens)?;
    let dims = model.vision_config().grid.patch_grid();
    let mut g = Graph::new();
    let tc = g.constant(encoded.cls);
    let tt = g.constant(encoded.tokens);
    let (score, target): (Var, Var) = match layer {
        HeatmapLayer::Final => {
            let image = model.encode_image(volume)?;
            let ci = g.constant(image.cls);
            let pi = g.input(image.patches);
            (model.pair_score(&mut g, ci, pi, tc, tt), pi)
        }
        HeatmapLayer::Input => {
            let probe = VisionProbe {
                track_input: true,
                ..VisionProbe::default()
            };
            let vars = crate::vision::forward(
                &mut g,
                &model.store,
                &model.vision_config(),
                &model.config.peft,
                volume,
                &probe,
            )?;
            (
                model.pair_score(&mut g, vars.cls, vars.patches, tc, tt),
                vars.patch_input,
            )
        }
    };
    let grads = g.backward(score);
    let grad = grads.get_or_zeros(target, g.shape(target));
    Heatmap::from_grad_activation(&grad, g.value(target), dims, biomarker)
}

/// Heatmap conditioned on a single biomarker of the scan's own report.
pub fn biomarker_heatmap(model: &Model, scan: &Scan, keep: Biomarker, layer: HeatmapLayer) -> Result<Heatmap> {
    let report = Report {
        text: scan.report.clone(),
        source_subject: scan.record.subject_id.clone(),
    };
    let masked = mask_biomarkers(&report, keep);
    patch_heatmap(model, &scan.volume, &masked.text, keep.key(), layer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: Diagnosis,
    pub scan_id: String,
    pub top: Vec<RankedToken>,
    pub completeness_residual: f64,
}

/// Top-`k` report tokens for one scan per diagnosis, attributed against the
/// scan's own report.
pub fn stage_report(model: &Model, scans: &[&Scan], steps: usize, k: usize) -> Result<Vec<StageRow>> {
    scans
        .iter()
        .map(|scan| {
            let attr = integrated_gradients(model, &scan.volume, &scan.report, steps)?;
            Ok(StageRow {
                stage: scan.diagnosis(),
                scan_id: scan.scan_id.clone(),
                top: top_k_tokens(&attr, k)?,
                completeness_residual: attr.completeness_residual,
            })
        })
        .collect()
}

/// First scan of each class present in `scans`, in class order.
pub fn one_per_stage(scans: &[Scan]) -> Vec<&Scan> {
    Diagnosis::ALL
        .iter()
        .filter_map(|&d| scans.iter().find(|s| s.diagnosis() == d))
        .collect()
}

/// Plain-text table with a column per rank.
pub fn stage_table(rows: &[StageRow]) -> String {
    let k = rows.iter().map(|r| r.top.len()).max().unwrap_or(0);
    let mut out = String::from("Stage");
    for i in 1..=k {
        let _ = write!(out, " | Top {i}");
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.stage.to_string());
        for t in &r.top {
            let _ = write!(out, " | {}", t.token);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textkit::tokenize;

    fn attr(scores: &[f64]) -> AttributionResult {
        AttributionResult {
            tokens: (0..scores.len())
                .map(|i| ((b'a' + i as u8) as char).to_string())
                .collect(),
            positions: (0..scores.len()).collect(),
            scores: scores.to_vec(),
            score: 0.0,
            baseline_score: 0.0,
            completeness_residual: 0.0,
        }
    }

    #[test]
    fn top_k_orders_and_breaks_ties_by_position() {
        let a = attr(&[3.0, 1.0, 2.0]);
        let top: Vec<String> = top_k_tokens(&a, 2).unwrap().into_iter().map(|t| t.token).collect();
        assert_eq!(top, ["a", "c"]);
        let tied = attr(&[1.0, 2.0, 2.0, 1.0]);
        let pos: Vec<usize> = top_k_tokens(&tied, 4)
            .unwrap()
            .into_iter()
            .map(|t| t.position)
            .collect();
        assert_eq!(pos, [1, 2, 0, 3]);
        assert!(top_k_tokens(&a, 4).is_err());
    }

    #[test]
    fn zero_steps_rejected() {
        let x = Mat::zeros((2, 2));
        assert!(integrated_gradients_with(&x, &x, 0, |p| Ok(p.clone())).is_err());
    }

    #[test]
    fn heatmap_rectifies_and_checks_shape() {
        let grad = Mat::from_shape_vec((2, 2), vec![1.0, 1.0, -1.0, 0.0]).unwrap();
        let act = Mat::from_shape_vec((2, 2), vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let h = Heatmap::from_grad_activation(&grad, &act, [1, 1, 2], "x").unwrap();
        assert_eq!(h.values, [5.0, 0.0]);
        assert!(Heatmap::from_grad_activation(&grad, &act, [1, 1, 3], "x").is_err());
        assert_eq!(h.region_contrast(&[true, false]).unwrap(), f64::INFINITY);
        assert!(h.region_contrast(&[true, true]).is_err());
    }

    #[test]
    fn pgm_has_header_and_one_byte_per_patch() {
        let h = Heatmap {
            dims: [2, 2, 3],
            values: (0..12).map(f64::from).collect(),
            biomarker: "x".into(),
        };
        let pgm = h.pgm_slice(1).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 6);
        assert_eq!(*pgm.last().unwrap(), 255);
        assert!(h.pgm_slice(2).is_err());
    }

    #[test]
    fn masking_keeps_token_count() {
        let text = "A photo of AD. The MRI scan reveals the following biomarkers: Hippocampal volume: 2900.12 mm3, \
                    Ventricular size: 45000.50 mm3, Whole brain volume: 900000.00 mm3, Entorhinal cortex volume: 3000.00 mm3, \
                    Fusiform gyrus volume: 15000.00 mm3, Middle temporal gyrus volume: 17000.00 mm3.";
        let r = Report {
            text: text.into(),
            source_subject: "S".into(),
        };
        let m = mask_biomarkers(&r, Biomarker::Ventricular);
        assert_eq!(split_tokens(&m.text).len(), split_tokens(text).len());
        assert!(m.text.contains("Ventricular size: 45000.50 mm3"));
        assert!(!m.text.contains("Hippocampal"));
        assert_eq!(m.text.matches(" mm3").count(), 6);
        let v = crate::textkit::build_vocab(std::slice::from_ref(&r)).unwrap();
        let t = tokenize(&m.text, &v, 128);
        assert!(t.unk_count() > 0);
    }
}
