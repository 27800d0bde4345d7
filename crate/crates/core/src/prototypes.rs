//! Class text prototypes and zero-shot predictions.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use thiserror::Error;

use crate::encoder::EmbeddingBatch;
use crate::ot::{OtError, SimilarityMatrix};

/// Prompt templates the prototype bank is labelled with, `{}` standing for the
/// class name.
pub const TEMPLATES: [&str; 8] = [
    "a photo of a {}",
    "itap of a {}",
    "a bad photo of the {}",
    "a origami {}",
    "a photo of the large {}",
    "a {} in a video game",
    "art of the {}",
    "a photo of the small {}",
];

/// Pretrained CLIP logit scale is 100.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrototypeError {
    #[error("prototype column (dim-major) for class {class}, template {template} has zero norm")]
    ZeroVector { class: usize, template: usize },
    #[error("prototype tensor needs K >= 2 and M >= 1, got d={d} K={classes} M={templates}")]
    InvalidShape {
        d: usize,
        classes: usize,
        templates: usize,
    },
    #[error("non-finite prototype entry")]
    NonFinite,
    #[error("template index {index} out of range for {templates} templates")]
    IndexOutOfRange { index: usize, templates: usize },
    #[error("embedding dimension {found} does not match prototype dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error(transparent)]
    Similarity(#[from] OtError),
}

/// Per-template prototypes `d x K x M` and their normalised average `d x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    per_template: Array3<f64>,
    averaged: Array2<f64>,
    template_names: Vec<String>,
}

/// Normalises each template column, averages over templates and
/// re-normalises the average.
pub fn build_bank(per_template: Array3<f64>) -> Result<PrototypeBank, PrototypeError> {
    let (d, classes, templates) = per_template.dim();
    if d == 0 || classes < 2 || templates < 1 {
        return Err(PrototypeError::InvalidShape { d, classes, templates });
    }
    if per_template.iter().any(|x| !x.is_finite()) {
        return Err(PrototypeError::NonFinite);
    }

    let mut per_template = per_template;
    for m in 0..templates {
        for k in 0..classes {
            let mut col = per_template.slice_mut(ndarray::s![.., k, m]);
            let norm = col.dot(&col).sqrt();
            if norm < ZERO_NORM {
                return Err(PrototypeError::ZeroVector { class: k, template: m });
            }
            col.mapv_inplace(|x| x / norm);
        }
    }

    let mut averaged = per_template.mean_axis(Axis(2)).expect("M >= 1");
    for (k, mut col) in averaged.axis_iter_mut(Axis(1)).enumerate() {
        let norm = col.dot(&col).sqrt();
        if norm < ZERO_NORM {
            // templates of this class cancel out
            return Err(PrototypeError::ZeroVector { class: k, template: templates });
        }
        col.mapv_inplace(|x| x / norm);
    }

    let template_names = (0..templates).map(default_template_name).collect();
    Ok(PrototypeBank {
        per_template,
        averaged,
        template_names,
    })
}

fn default_template_name(m: usize) -> String {
    TEMPLATES
        .get(m)
        .map(|t| t.to_string())
        .unwrap_or_else(|| format!("template {m}"))
}

impl PrototypeBank {
    pub fn with_template_names(mut self, names: Vec<String>) -> Self {
        assert_eq!(names.len(), self.templates(), "one name per template");
        self.template_names = names;
        self
    }

    pub fn dim(&self) -> usize {
        self.per_template.dim().0
    }

    pub fn classes(&self) -> usize {
        self.per_template.dim().1
    }

    pub fn templates(&self) -> usize {
        self.per_template.dim().2
    }

    pub fn template_names(&self) -> &[String] {
        &self.template_names
    }

    /// `d x K` prototypes of template `m`.
    pub fn template(&self, m: usize) -> Result<ArrayView2<'_, f64>, PrototypeError> {
        if m >= self.templates() {
            return Err(PrototypeError::IndexOutOfRange {
                index: m,
                templates: self.templates(),
            });
        }
        Ok(self.per_template.index_axis(Axis(2), m))
    }

    pub fn averaged(&self) -> ArrayView2<'_, f64> {
        self.averaged.view()
    }

    pub fn per_template(&self) -> &Array3<f64> {
        &self.per_template
    }

    /// Bank restricted to the given templates, averaged over those only.
    pub fn subset(&self, templates: &[usize]) -> Result<PrototypeBank, PrototypeError> {
        for &m in templates {
            self.template(m)?;
        }
        let picked = self.per_template.select(Axis(2), templates);
        let names = templates.iter().map(|&m| self.template_names[m].clone()).collect();
        Ok(build_bank(picked)?.with_template_names(names))
    }

    pub fn prototypes(&self, selector: PrototypeSelector) -> Result<ArrayView2<'_, f64>, PrototypeError> {
        match selector {
            PrototypeSelector::Template(m) => self.template(m),
            PrototypeSelector::Averaged => Ok(self.averaged()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeSelector {
    Template(usize),
    Averaged,
}

/// `K x B` dot products between the selected prototypes and the embeddings.
pub fn similarity(
    bank: &PrototypeBank,
    selector: PrototypeSelector,
    z: &EmbeddingBatch,
) -> Result<SimilarityMatrix, PrototypeError> {
    let protos = bank.prototypes(selector)?;
    if z.dim() != bank.dim() {
        return Err(PrototypeError::DimensionMismatch {
            expected: bank.dim(),
            found: z.dim(),
        });
    }
    Ok(SimilarityMatrix::new(protos.t().dot(&z.z()))?)
}

/// Column-stochastic `K x B` class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    p: Array2<f64>,
}

impl PredictionMatrix {
    /// Wraps a matrix whose columns are already probability distributions.
    pub fn from_columns(p: Array2<f64>) -> Self {
        debug_assert!(p
            .axis_iter(Axis(1))
            .all(|c| (c.sum() - 1.0).abs() < 1e-9));
        Self { p }
    }

    pub fn p(&self) -> ArrayView2<'_, f64> {
        self.p.view()
    }

    pub fn classes(&self) -> usize {
        self.p.nrows()
    }

    pub fn batch(&self) -> usize {
        self.p.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.p
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        self.p
            .axis_iter(Axis(1))
            .map(|col| crate::argmax(col.iter().copied()))
            .collect()
    }
}

/// Column-wise `softmax(logits / tau)`.
pub fn softmax_columns(logits: ArrayView2<'_, f64>, tau: f64) -> Array2<f64> {
    let mut p = logits.mapv(|x| x / tau);
    for mut col in p.axis_iter_mut(Axis(1)) {
        let max = col.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        col.mapv_inplace(|x| (x - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|x| x / sum);
    }
    p
}

/// Zero-shot prediction with the averaged prototypes.
pub fn predict(bank: &PrototypeBank, z: &EmbeddingBatch, tau: f64) -> Result<PredictionMatrix, PrototypeError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(PrototypeError::InvalidTemperature(tau));
    }
    let sim = similarity(bank, PrototypeSelector::Averaged, z)?;
    Ok(PredictionMatrix {
        p: softmax_columns(sim.values(), tau),
    })
}
