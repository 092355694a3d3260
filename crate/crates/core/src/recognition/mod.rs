//! Sparse landmark recognition: every query keypoint gets a probability over
//! the landmark labels plus the outlier class 0.

mod loss;
mod transformer;
mod weights;

pub use loss::{inlier_weights, linear_head_gradient, linear_head_loss, weighted_ce_loss, HeadGradient};
pub use transformer::{
    positional_encode, tokenize, transformer_forward, Block, LayerNorm, Linear, TransformerWeights, DEFAULT_BLOCKS,
    DEFAULT_HEADS, DEFAULT_HIDDEN, FFN_EXPANSION, LAYER_NORM_EPS, POS_HIDDEN,
};
pub use weights::{load_weights, read_weights, save_weights, write_weights, Tensor, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::TrainingSample;
use crate::map::{descriptor_norm, Keypoint2D, LandmarkLabel, SceneMap};

#[derive(Debug, Error)]
pub enum RecognitionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported weights version {0}")]
    UnsupportedVersion(u64),
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed weights: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-keypoint class probabilities (`n × (λ_l + 1)`, column 0 is the
/// outlier class) and their argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionOutput {
    pub confidences: DMatrix<f64>,
    pub argmax_labels: Vec<LandmarkLabel>,
}

impl RecognitionOutput {
    /// Wraps row-stochastic probabilities; argmax ties go to the lower label.
    pub fn from_probabilities(confidences: DMatrix<f64>) -> Self {
        let argmax_labels = confidences
            .row_iter()
            .map(|r| {
                let mut best = 0;
                for (j, &p) in r.iter().enumerate() {
                    if p > r[best] {
                        best = j;
                    }
                }
                best as LandmarkLabel
            })
            .collect();
        RecognitionOutput {
            confidences,
            argmax_labels,
        }
    }

    pub fn len(&self) -> usize {
        self.argmax_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.argmax_labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.confidences.ncols()
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut r in out.row_iter_mut() {
        let m = r.max();
        r.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s = r.sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Nearest-centroid recognizer: cosine similarity to each landmark's mean
/// descriptor, against a constant score for the outlier class.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidModel {
    /// Unit-norm centroid of landmark `l` at index `l - 1`.
    pub centroids: Vec<Vec<f32>>,
    pub temperature: f32,
    pub null_bias: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Centroid(CentroidModel),
    Transformer(TransformerWeights),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecognizerModel {
    pub descriptor_dim: usize,
    /// λ_l + 1.
    pub num_classes: usize,
    pub kind: ModelKind,
}

impl RecognizerModel {
    pub fn transformer(w: TransformerWeights) -> Result<Self, RecognitionError> {
        w.check_shapes()?;
        Ok(RecognizerModel {
            descriptor_dim: w.descriptor_dim(),
            num_classes: w.num_classes(),
            kind: ModelKind::Transformer(w),
        })
    }

    pub fn num_landmarks(&self) -> usize {
        self.num_classes - 1
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            ModelKind::Centroid(_) => "centroid",
            ModelKind::Transformer(_) => "transformer",
        }
    }

    /// Checks the invariants of the model.
    pub fn validate(&self) -> Result<(), RecognitionError> {
        let bad = |m: String| Err(RecognitionError::ShapeMismatch(m));
        if self.num_classes < 2 {
            return bad("at least one landmark class is required".into());
        }
        match &self.kind {
            ModelKind::Centroid(c) => {
                if c.centroids.len() + 1 != self.num_classes {
                    return bad(format!("{} centroids for {} classes", c.centroids.len(), self.num_classes));
                }
                for (i, v) in c.centroids.iter().enumerate() {
                    if v.len() != self.descriptor_dim {
                        return bad(format!("centroid {} has dimension {}", i + 1, v.len()));
                    }
                    if (descriptor_norm(v) - 1.0).abs() > 1e-5 {
                        return bad(format!("centroid {} is not unit norm", i + 1));
                    }
                }
                if !(c.temperature > 0.0) || !c.null_bias.is_finite() {
                    return bad("temperature must be positive and null bias finite".into());
                }
            }
            ModelKind::Transformer(w) => {
                w.check_shapes()?;
                if w.descriptor_dim() != self.descriptor_dim || w.num_classes() != self.num_classes {
                    return bad("transformer dimensions disagree with model header".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidParams {
    pub temperature: f64,
    pub null_bias: f64,
}

impl Default for CentroidParams {
    fn default() -> Self {
        CentroidParams {
            temperature: 0.07,
            null_bias: 0.5,
        }
    }
}

/// Centroid recognizer from the retained map descriptors of each landmark.
pub fn train_centroid_recognizer(map: &SceneMap, params: &CentroidParams) -> RecognizerModel {
    let d = map.descriptor_dim;
    let centroids = map
        .landmarks
        .iter()
        .map(|l| {
            let mut sum = vec![0f64; d];
            for p in map.landmark_points(l.label) {
                sum.iter_mut().zip(&p.descriptor).for_each(|(s, &x)| *s += x as f64);
            }
            let n = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                sum.iter().map(|x| (x / n) as f32).collect()
            } else {
                let mut e = vec![0f32; d];
                e[0] = 1.0;
                e
            }
        })
        .collect::<Vec<Vec<f32>>>();
    RecognizerModel {
        descriptor_dim: d,
        num_classes: centroids.len() + 1,
        kind: ModelKind::Centroid(CentroidModel {
            centroids,
            temperature: params.temperature as f32,
            null_bias: params.null_bias as f32,
        }),
    }
}

fn centroid_scores(kps: &[Keypoint2D], c: &CentroidModel) -> DMatrix<f64> {
    let classes = c.centroids.len() + 1;
    let mut logits = DMatrix::zeros(kps.len(), classes);
    for (i, kp) in kps.iter().enumerate() {
        let tau = c.temperature as f64;
        logits[(i, 0)] = c.null_bias as f64 / tau;
        for (l, cen) in c.centroids.iter().enumerate() {
            let dot: f64 = kp.descriptor.iter().zip(cen).map(|(&a, &b)| a as f64 * b as f64).sum();
            logits[(i, l + 1)] = dot / tau;
        }
    }
    softmax_rows(&logits)
}

/// Class probabilities for each keypoint; `image_size` feeds the positional
/// encoding of the transformer and is ignored by the centroid model.
pub fn recognize(
    kps: &[Keypoint2D],
    model: &RecognizerModel,
    image_size: (u32, u32),
) -> Result<RecognitionOutput, RecognitionError> {
    if let Some((i, kp)) = kps.iter().enumerate().find(|(_, kp)| kp.descriptor.len() != model.descriptor_dim) {
        return Err(RecognitionError::ShapeMismatch(format!(
            "keypoint {i} descriptor has dimension {}, model expects {}",
            kp.descriptor.len(),
            model.descriptor_dim
        )));
    }
    match &model.kind {
        ModelKind::Centroid(c) => Ok(RecognitionOutput::from_probabilities(centroid_scores(kps, c))),
        ModelKind::Transformer(w) => transformer_forward(&tokenize(kps, w, image_size)?, w),
    }
}

/// Fraction of keypoints whose argmax label equals the target label.
pub fn top1_precision(out: &RecognitionOutput, labels: &[LandmarkLabel]) -> f64 {
    if labels.is_empty() {
        return 1.0;
    }
    let hits = out.argmax_labels.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Picks the outlier score from `candidates` maximizing top-1 precision on
/// labeled validation frames. When several candidates tie, the middle of the
/// longest run of consecutive optimal candidates wins (lower middle for even
/// runs).
pub fn calibrate_null_bias(
    model: &RecognizerModel,
    validation: &[TrainingSample],
    candidates: &[f32],
) -> Result<f32, RecognitionError> {
    let ModelKind::Centroid(base) = &model.kind else {
        return Err(RecognitionError::ShapeMismatch("null-bias calibration needs a centroid model".into()));
    };
    let scores: Vec<f64> = candidates
        .iter()
        .map(|&b| {
            let c = CentroidModel {
                null_bias: b,
                ..base.clone()
            };
            let (mut hits, mut total) = (0usize, 0usize);
            for s in validation {
                let out = RecognitionOutput::from_probabilities(centroid_scores(&s.keypoints, &c));
                hits += out.argmax_labels.iter().zip(&s.labels).filter(|(a, b)| a == b).count();
                total += s.labels.len();
            }
            if total == 0 { 0.0 } else { hits as f64 / total as f64 }
        })
        .collect();
    let Some(best) = scores.iter().copied().reduce(f64::max) else {
        return Ok(base.null_bias);
    };
    // (start, len) of the longest run at the optimum; earlier runs win ties
    let (mut run, mut start) = ((0, 0), None);
    for (i, &s) in scores.iter().chain(std::iter::once(&f64::NEG_INFINITY)).enumerate() {
        match (s == best, start) {
            (true, None) => start = Some(i),
            (false, Some(st)) => {
                if i - st > run.1 {
                    run = (st, i - st);
                }
                start = None;
            }
            _ => {}
        }
    }
    Ok(candidates[run.0 + (run.1 - 1) / 2])
}
