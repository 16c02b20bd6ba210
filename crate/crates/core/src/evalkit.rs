//! Zero-shot classification, split metrics, and the sweep/ablation harnesses.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::align::CrossAttnMode;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{ImageOut, Model, TextOut};
use crate::synthcohort::{Diagnosis, Volume3D};
use crate::trainer::{train, ExperimentConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Diagnosis,
    /// Similarity per candidate class, in the order given.
    pub scores: Vec<f64>,
}

/// Index of the largest score; ties resolve to the earliest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn check_classes(classes: &[Diagnosis]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::invalid("zero-shot classification needs at least one class"));
    }
    Ok(())
}

/// Encoded class prompts, reusable across images.
pub fn encode_classes(model: &Model, classes: &[Diagnosis]) -> Result<Vec<TextOut>> {
    check_classes(classes)?;
    model
        .class_tokens(classes)
        .iter()
        .map(|t| model.encode_text(t))
        .collect()
}

pub fn classify_encoded(
    model: &Model,
    image: &ImageOut,
    class_texts: &[TextOut],
    classes: &[Diagnosis],
) -> Result<Prediction> {
    check_classes(classes)?;
    let texts: Vec<&TextOut> = class_texts.iter().collect();
    let s = model.similarity(&[image], &texts)?;
    let scores: Vec<f64> = s.row(0).to_vec();
    Ok(Prediction {
        label: classes[argmax_first(&scores)],
        scores,
    })
}

pub fn zero_shot_classify(model: &Model, volume: &Volume3D, classes: &[Diagnosis]) -> Result<Prediction> {
    let texts = encode_classes(model, classes)?;
    classify_encoded(model, &model.encode_image(volume)?, &texts, classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub classes: Vec<Diagnosis>,
    pub n: usize,
    pub accuracy: f64,
    /// Recall per class in `classes` order; NaN-free (0 for absent classes).
    pub per_class_recall: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub mmse_mae: Option<f64>,
    pub mmse_rmse: Option<f64>,
}

/// Accuracy, recall, and confusion from class indices.
pub fn classification_metrics(classes: &[Diagnosis], truth: &[usize], pred: &[usize]) -> Metrics {
    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_recall = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[c] as f64 / n as f64
            }
        })
        .collect();
    Metrics {
        classes: classes.to_vec(),
        n: truth.len(),
        accuracy: if truth.is_empty() {
            0.0
        } else {
            correct as f64 / truth.len() as f64
        },
        per_class_recall,
        confusion,
        mmse_mae: None,
        mmse_rmse: None,
    }
}

/// Scan-level zero-shot metrics over a split. MMSE errors are in raw score
/// units and present only when the model has an MMSE head.
pub fn evaluate(model: &Model, data: &Dataset, classes: &[Diagnosis]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let texts = encode_classes(model, classes)?;
    let mut truth = Vec::with_capacity(data.len());
    let mut pred = Vec::with_capacity(data.len());
    let mut abs_err = 0.0;
    let mut sq_err = 0.0;
    let mut has_mmse = true;
    for scan in &data.scans {
        let t = classes
            .iter()
            .position(|&c| c == scan.diagnosis())
            .ok_or_else(|| Error::invalid(format!("scan {} has a class outside {classes:?}", scan.scan_id)))?;
        let image = model.encode_image(&scan.volume)?;
        let p = classify_encoded(model, &image, &texts, classes)?;
        truth.push(t);
        pred.push(argmax_first(&p.scores));
        match model.predict_mmse(&image) {
            Some(y) => {
                let e = crate::vision::denormalize_mmse(y) - scan.mmse() as f64;
                abs_err += e.abs();
                sq_err += e * e;
            }
            None => has_mmse = false,
        }
    }
    let mut m = classification_metrics(classes, &truth, &pred);
    if has_mmse {
        let n = data.len() as f64;
        m.mmse_mae = Some(abs_err / n);
        m.mmse_rmse = Some((sq_err / n).sqrt());
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub accuracy: f64,
}

/// One model per training-set size, all evaluated on the same split.
pub fn sweep(
    sizes: &[usize],
    config: &ExperimentConfig,
    train_data: &Dataset,
    val: &Dataset,
    test: &Dataset,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let subset = train_data.subset(n, config.train.seed)?;
        let outcome = train(config, &subset, val, None)?;
        let m = evaluate(&outcome.model, test, &config.train.classes)?;
        rows.push(SweepRow {
            n,
            accuracy: m.accuracy,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("n,accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6}", r.n, r.accuracy);
    }
    s
}

/// Component switches for the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Components {
    pub visual_prompts: bool,
    pub mmse_token: bool,
    pub text_prompts: bool,
    pub report_supervision: bool,
    pub cross_attention: bool,
}

impl Components {
    pub const NAMES: [&'static str; 5] = [
        "visual_prompts",
        "mmse_token",
        "text_prompts",
        "report_supervision",
        "cross_attention",
    ];

    pub const ALL_ON: Components = Components {
        visual_prompts: true,
        mmse_token: true,
        text_prompts: true,
        report_supervision: true,
        cross_attention: true,
    };

    pub const ALL_OFF: Components = Components {
        visual_prompts: false,
        mmse_token: false,
        text_prompts: false,
        report_supervision: false,
        cross_attention: false,
    };

    /// Parse a comma-separated list of enabled component names; `none` or an
    /// empty string enables nothing.
    pub fn parse(list: &str) -> Result<Self> {
        let mut c = Components::ALL_OFF;
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "none") {
            match name {
                "visual_prompts" => c.visual_prompts = true,
                "mmse_token" => c.mmse_token = true,
                "text_prompts" => c.text_prompts = true,
                "report_supervision" => c.report_supervision = true,
                "cross_attention" => c.cross_attention = true,
                other => return Err(Error::config(format!("unknown ablation component `{other}`"))),
            }
        }
        Ok(c)
    }

    pub fn flags(&self) -> [bool; 5] {
        [
            self.visual_prompts,
            self.mmse_token,
            self.text_prompts,
            self.report_supervision,
            self.cross_attention,
        ]
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = Self::NAMES
            .iter()
            .zip(self.flags())
            .filter(|(_, f)| *f)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }

    /// Derive the experiment for this row. With every component off the row
    /// is the untuned backbone, so no training epochs run.
    pub fn apply(&self, base: &ExperimentConfig, prompt_len: (usize, usize)) -> ExperimentConfig {
        let mut c = base.clone();
        c.model.vision.prompt_len = if self.visual_prompts { prompt_len.0 } else { 0 };
        c.model.vision.mmse_token = self.mmse_token;
        c.model.text.prompt_len = if self.text_prompts { prompt_len.1 } else { 0 };
        c.model.cross_attn = if self.cross_attention {
            CrossAttnMode::Token
        } else {
            CrossAttnMode::Off
        };
        c.train.report_supervision = self.report_supervision;
        if *self == Components::ALL_OFF {
            c.train.epochs = 0;
        }
        c
    }
}

/// The rows of the component table: baseline, image-side variants,
/// text-side variants, both encoders, full method.
pub fn table_rows() -> Vec<(&'static str, Components)> {
    let off = Components::ALL_OFF;
    vec![
        ("a", off),
        (
            "b",
            Components {
                visual_prompts: true,
                ..off
            },
        ),
        (
            "b",
            Components {
                mmse_token: true,
                ..off
            },
        ),
        (
            "b",
            Components {
                visual_prompts: true,
                mmse_token: true,
                ..off
            },
        ),
        (
            "c",
            Components {
                text_prompts: true,
                ..off
            },
        ),
        (
            "c",
            Components {
                report_supervision: true,
                ..off
            },
        ),
        (
            "c",
            Components {
                text_prompts: true,
                report_supervision: true,
                ..off
            },
        ),
        (
            "d",
            Components {
                cross_attention: false,
                ..Components::ALL_ON
            },
        ),
        ("e", Components::ALL_ON),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub components: Components,
    pub config_hash: String,
    pub accuracy: f64,
}

pub fn ablate(
    rows: &[(&str, Components)],
    base: &ExperimentConfig,
    train_data: &Dataset,
    val: &Dataset,
    test: &Dataset,
) -> Result<Vec<AblationRow>> {
    let lens = (base.model.vision.prompt_len, base.model.text.prompt_len);
    let mut out = Vec::with_capacity(rows.len());
    for (row, comps) in rows {
        let cfg = comps.apply(base, lens);
        let TrainOutcome { model, .. } = train(&cfg, train_data, val, None)?;
        let m = evaluate(&model, test, &cfg.train.classes)?;
        out.push(AblationRow {
            row: row.to_string(),
            components: *comps,
            config_hash: cfg.hash()?,
            accuracy: m.accuracy,
        });
    }
    Ok(out)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("row,");
    s.push_str(&Components::NAMES.join(","));
    s.push_str(",config_hash,accuracy\n");
    for r in rows {
        let flags: Vec<&str> = r
            .components
            .flags()
            .iter()
            .map(|&f| if f { "1" } else { "0" })
            .collect();
        let _ = writeln!(s, "{},{},{},{:.6}", r.row, flags.join(","), r.config_hash, r.accuracy);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_tie_break() {
        assert_eq!(argmax_first(&[0.2, 0.2, 0.1]), 0);
        assert_eq!(argmax_first(&[0.1, 0.3, 0.3]), 1);
        assert_eq!(argmax_first(&[0.1, 0.2, 0.3]), 2);
    }

    #[test]
    fn perfect_predictions() {
        let m = classification_metrics(&Diagnosis::ALL, &[0, 1, 2, 2], &[0, 1, 2, 2]);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.per_class_recall, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn confusion_rows_sum_to_class_counts() {
        let truth = [0, 0, 1, 2, 2, 2];
        let pred = [1, 0, 1, 0, 2, 1];
        let m = classification_metrics(&Diagnosis::ALL, &truth, &pred);
        let sums: Vec<usize> = m.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(sums, vec![2, 1, 3]);
        assert!((m.accuracy - 0.5).abs() < 1e-12);
        assert_eq!(m.confusion[2], vec![1, 1, 1]);
    }

    #[test]
    fn components_parse_and_label() {
        assert_eq!(Components::parse("none").unwrap(), Components::ALL_OFF);
        let c = Components::parse("visual_prompts,cross_attention").unwrap();
        assert!(c.visual_prompts && c.cross_attention && !c.mmse_token);
        assert_eq!(c.label(), "visual_prompts+cross_attention");
        assert!(Components::parse("bogus").is_err());
    }
}
