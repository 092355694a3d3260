use nalgebra::{DMatrix, DVector};

use super::{softmax_rows, RecognitionError, RecognitionOutput};
use crate::map::Keypoint2D;

pub const POS_HIDDEN: [usize; 3] = [32, 64, 128];
pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_BLOCKS: usize = 15;
pub const FFN_EXPANSION: usize = 2;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `y = W x + b` with `W` shaped `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: DMatrix::zeros(out_dim, in_dim),
            bias: DVector::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Applies the map to every row of `x` (`n × in` → `n × out`).
    pub fn rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * self.weight.transpose();
        for mut r in y.row_iter_mut() {
            r += self.bias.transpose();
        }
        y
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.weight * x + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub weight: DVector<f64>,
    pub bias: DVector<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            weight: DVector::from_element(dim, 1.0),
            bias: DVector::zeros(dim),
        }
    }

    pub fn rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x.clone();
        let h = x.ncols() as f64;
        for mut r in y.row_iter_mut() {
            let mean = r.sum() / h;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in r.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.weight[j] + self.bias[j];
            }
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub ffn0: Linear,
    pub ffn1: Linear,
}

/// Weights of the landmark-recognition transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub num_heads: usize,
    /// Descriptor to hidden projection.
    pub input_proj: Linear,
    /// Positional MLP, 2 → 32 → 64 → 128 → hidden.
    pub pos: [Linear; 4],
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    /// Hidden to class logits.
    pub head: Linear,
}

fn relu(mut x: DVector<f64>) -> DVector<f64> {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

fn relu_m(mut x: DMatrix<f64>) -> DMatrix<f64> {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

impl TransformerWeights {
    pub fn hidden(&self) -> usize {
        self.input_proj.out_dim()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.input_proj.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    /// All-zero weights with identity layer norms.
    pub fn zeros(descriptor_dim: usize, hidden: usize, num_heads: usize, num_blocks: usize, num_classes: usize) -> Self {
        let block = Block {
            norm1: LayerNorm::identity(hidden),
            q: Linear::zeros(hidden, hidden),
            k: Linear::zeros(hidden, hidden),
            v: Linear::zeros(hidden, hidden),
            out: Linear::zeros(hidden, hidden),
            norm2: LayerNorm::identity(hidden),
            ffn0: Linear::zeros(FFN_EXPANSION * hidden, hidden),
            ffn1: Linear::zeros(hidden, FFN_EXPANSION * hidden),
        };
        TransformerWeights {
            num_heads,
            input_proj: Linear::zeros(hidden, descriptor_dim),
            pos: [
                Linear::zeros(POS_HIDDEN[0], 2),
                Linear::zeros(POS_HIDDEN[1], POS_HIDDEN[0]),
                Linear::zeros(POS_HIDDEN[2], POS_HIDDEN[1]),
                Linear::zeros(hidden, POS_HIDDEN[2]),
            ],
            blocks: vec![block; num_blocks],
            norm: LayerNorm::identity(hidden),
            head: Linear::zeros(num_classes, hidden),
        }
    }

    /// Checks that every tensor agrees with the input projection's hidden size.
    pub fn check_shapes(&self) -> Result<(), RecognitionError> {
        let h = self.hidden();
        let bad = |what: &str| Err(RecognitionError::ShapeMismatch(what.to_string()));
        let lin_ok = |l: &Linear, o: usize, i: usize| l.weight.shape() == (o, i) && l.bias.len() == o;
        let ln_ok = |n: &LayerNorm| n.weight.len() == h && n.bias.len() == h;
        if self.num_heads == 0 || !h.is_multiple_of(self.num_heads) {
            return bad("hidden size not divisible by head count");
        }
        if self.input_proj.bias.len() != h {
            return bad("input_proj");
        }
        let dims = [2, POS_HIDDEN[0], POS_HIDDEN[1], POS_HIDDEN[2], h];
        for (i, l) in self.pos.iter().enumerate() {
            if !lin_ok(l, dims[i + 1], dims[i]) {
                return bad(&format!("pos.{i}"));
            }
        }
        for (b, blk) in self.blocks.iter().enumerate() {
            let ok = ln_ok(&blk.norm1)
                && ln_ok(&blk.norm2)
                && [&blk.q, &blk.k, &blk.v, &blk.out].iter().all(|l| lin_ok(l, h, h))
                && lin_ok(&blk.ffn0, FFN_EXPANSION * h, h)
                && lin_ok(&blk.ffn1, h, FFN_EXPANSION * h);
            if !ok {
                return bad(&format!("blocks.{b}"));
            }
        }
        if !ln_ok(&self.norm) {
            return bad("norm");
        }
        if self.head.in_dim() != h || self.head.bias.len() != self.head.out_dim() || self.head.out_dim() < 1 {
            return bad("head");
        }
        Ok(())
    }
}

/// Positional MLP on pixel coordinates normalized to [-1, 1].
pub fn positional_encode(u: f64, v: f64, image_size: (u32, u32), mlp: &[Linear; 4]) -> Result<DVector<f64>, RecognitionError> {
    let dims = [2, POS_HIDDEN[0], POS_HIDDEN[1], POS_HIDDEN[2]];
    for (i, l) in mlp.iter().enumerate() {
        if l.in_dim() != dims[i] || (i < 3 && l.out_dim() != dims[i + 1]) || l.bias.len() != l.out_dim() {
            return Err(RecognitionError::ShapeMismatch(format!("positional layer {i}")));
        }
    }
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let mut x = DVector::from_vec(vec![(2.0 * u - w) / w, (2.0 * v - h) / h]);
    for (i, l) in mlp.iter().enumerate() {
        x = l.apply(&x);
        if i < 3 {
            x = relu(x);
        }
    }
    Ok(x)
}

/// `token_i = W_in d_i + f_pos(u_i, v_i)`, one row per keypoint.
pub fn tokenize(kps: &[Keypoint2D], w: &TransformerWeights, image_size: (u32, u32)) -> Result<DMatrix<f64>, RecognitionError> {
    let d = w.descriptor_dim();
    let h = w.hidden();
    if w.pos[3].out_dim() != h {
        return Err(RecognitionError::ShapeMismatch("positional output differs from hidden size".into()));
    }
    let mut tokens = DMatrix::zeros(kps.len(), h);
    for (i, kp) in kps.iter().enumerate() {
        if kp.descriptor.len() != d {
            return Err(RecognitionError::ShapeMismatch(format!(
                "keypoint {i} descriptor has dimension {}, model expects {d}",
                kp.descriptor.len()
            )));
        }
        let desc = DVector::from_iterator(d, kp.descriptor.iter().map(|&x| x as f64));
        let t = w.input_proj.apply(&desc) + positional_encode(kp.u, kp.v, image_size, &w.pos)?;
        tokens.set_row(i, &t.transpose());
    }
    Ok(tokens)
}

fn attention(x: &DMatrix<f64>, blk: &Block, heads: usize) -> DMatrix<f64> {
    let (n, h) = x.shape();
    let dh = h / heads;
    let q = blk.q.rows(x);
    let k = blk.k.rows(x);
    let v = blk.v.rows(x);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = DMatrix::zeros(n, h);
    for hd in 0..heads {
        let c0 = hd * dh;
        let qh = q.columns(c0, dh);
        let kh = k.columns(c0, dh);
        let vh = v.columns(c0, dh);
        let scores = softmax_rows(&((qh * kh.transpose()) * scale));
        ctx.columns_mut(c0, dh).copy_from(&(scores * vh));
    }
    blk.out.rows(&ctx)
}

/// Lexicographic order of rows by value, used to make reductions over
/// tokens independent of the caller's ordering.
fn canonical_order(x: &DMatrix<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.nrows()).collect();
    idx.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b).iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Pre-norm transformer over the token set, then per-token classification.
/// Rows of the output follow the rows of `tokens`.
pub fn transformer_forward(tokens: &DMatrix<f64>, w: &TransformerWeights) -> Result<RecognitionOutput, RecognitionError> {
    w.check_shapes()?;
    if tokens.ncols() != w.hidden() {
        return Err(RecognitionError::ShapeMismatch(format!(
            "tokens have width {}, model hidden size is {}",
            tokens.ncols(),
            w.hidden()
        )));
    }
    let n = tokens.nrows();
    if n == 0 {
        return Ok(RecognitionOutput::from_probabilities(DMatrix::zeros(0, w.num_classes())));
    }
    let order = canonical_order(tokens);
    let mut x = tokens.select_rows(order.iter());
    for blk in &w.blocks {
        x += attention(&blk.norm1.rows(&x), blk, w.num_heads);
        let hidden = relu_m(blk.ffn0.rows(&blk.norm2.rows(&x)));
        x += blk.ffn1.rows(&hidden);
    }
    let logits = w.head.rows(&w.norm.rows(&x));
    let probs_sorted = softmax_rows(&logits);
    let mut probs = DMatrix::zeros(n, w.num_classes());
    for (sorted_row, &orig) in order.iter().enumerate() {
        probs.set_row(orig, &probs_sorted.row(sorted_row));
    }
    Ok(RecognitionOutput::from_probabilities(probs))
}
