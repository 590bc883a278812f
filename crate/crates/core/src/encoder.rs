//! Pre-norm transformer encoder and the concept-space classification head.

use mmgpl_diffcore::{Real, Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_hidden: usize,
    /// Encoder weights receive no updates; gradients still flow through them.
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            dim: 64,
            mlp_hidden: 128,
            frozen: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("encoder dims and head count must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide model dim {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Tape handles of one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Parameter names and shapes of one layer, in [`LayerVars`] field order.
pub fn layer_shapes(dim: usize, hidden: usize) -> [(&'static str, [usize; 2]); 16] {
    [
        ("ln1.gain", [1, dim]),
        ("ln1.bias", [1, dim]),
        ("attn.q.weight", [dim, dim]),
        ("attn.q.bias", [1, dim]),
        ("attn.k.weight", [dim, dim]),
        ("attn.k.bias", [1, dim]),
        ("attn.v.weight", [dim, dim]),
        ("attn.v.bias", [1, dim]),
        ("attn.out.weight", [dim, dim]),
        ("attn.out.bias", [1, dim]),
        ("ln2.gain", [1, dim]),
        ("ln2.bias", [1, dim]),
        ("mlp.fc1.weight", [dim, hidden]),
        ("mlp.fc1.bias", [1, hidden]),
        ("mlp.fc2.weight", [hidden, dim]),
        ("mlp.fc2.bias", [1, dim]),
    ]
}

impl LayerVars {
    pub fn from_slice(v: &[Var]) -> Self {
        LayerVars {
            ln1_g: v[0],
            ln1_b: v[1],
            wq: v[2],
            bq: v[3],
            wk: v[4],
            bk: v[5],
            wv: v[6],
            bv: v[7],
            wo: v[8],
            bo: v[9],
            ln2_g: v[10],
            ln2_b: v[11],
            w1: v[12],
            b1: v[13],
            w2: v[14],
            b2: v[15],
        }
    }
}

fn linear<T: Real>(tape: &mut Tape<'_, T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

/// Multi-head self-attention; also returns each head's attention matrix.
pub fn mhsa_with_attention<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    p: &LayerVars,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (_, dim) = tape.dims(x);
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide model dim {dim}")));
    }
    let dk = dim / heads;
    let q = linear(tape, x, p.wq, p.bq)?;
    let k = linear(tape, x, p.wk, p.bk)?;
    let v = linear(tape, x, p.wv, p.bv)?;
    let scale = T::one() / T::from_usize_lossy(dk).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 1, T::one())?;
        outs.push(tape.matmul(attn, vh)?);
        attns.push(attn);
    }
    let cat = tape.concat_cols(&outs)?;
    Ok((linear(tape, cat, p.wo, p.bo)?, attns))
}

/// Per head `softmax(QKᵀ/√d_k)V`, heads concatenated then output-projected.
pub fn mhsa<T: Real>(tape: &mut Tape<'_, T>, x: Var, p: &LayerVars, heads: usize) -> Result<Var> {
    Ok(mhsa_with_attention(tape, x, p, heads)?.0)
}

/// `H = MHSA(LN(Z)) + Z`, `Z' = MLP(LN(H)) + H` with a GELU MLP.
pub fn encoder_layer<T: Real>(tape: &mut Tape<'_, T>, z: Var, p: &LayerVars, heads: usize) -> Result<Var> {
    let eps = T::lit(LN_EPS);
    let n1 = tape.layernorm(z, p.ln1_g, p.ln1_b, eps)?;
    let attn = mhsa(tape, n1, p, heads)?;
    let h = tape.add(attn, z)?;
    let n2 = tape.layernorm(h, p.ln2_g, p.ln2_b, eps)?;
    let hidden = linear(tape, n2, p.w1, p.b1)?;
    let hidden = tape.gelu(hidden);
    let out = linear(tape, hidden, p.w2, p.b2)?;
    Ok(tape.add(out, h)?)
}

/// Encoder stack followed by a mean over tokens: `1×D`.
pub fn encode<T: Real>(tape: &mut Tape<'_, T>, tokens: Var, layers: &[LayerVars], heads: usize) -> Result<Var> {
    let mut z = tokens;
    for layer in layers {
        z = encoder_layer(tape, z, layer, heads)?;
    }
    Ok(tape.mean_axis(z, 0)?)
}

/// Tape handles of the classification head's projection into text space.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w: Var,
    pub b: Var,
}

/// `cos(project(z), Z_j) / τ_h` for every concept `j`: `1×(C·K)`.
pub fn concept_logits<T: Real>(tape: &mut Tape<'_, T>, z: Var, concepts: Var, head: &HeadVars, tau: T) -> Result<Var> {
    if !(tau > T::zero()) {
        return Err(Error::Config(format!("head temperature must be > 0, got {tau}")));
    }
    let projected = linear(tape, z, head.w, head.b)?;
    let cos = tape.cosine_rows(projected, concepts)?;
    Ok(tape.scale(cos, T::one() / tau))
}

/// `(C·K)×C` matrix averaging each category's `K` concept scores.
pub fn category_mean_matrix<T: Real>(classes: usize, per_class: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[classes * per_class, classes]);
    let inv = T::one() / T::from_usize_lossy(per_class);
    for c in 0..classes {
        for k in 0..per_class {
            m.data_mut()[(c * per_class + k) * classes + c] = inv;
        }
    }
    m
}

/// Per-category mean of the concept scores: `rows×C`.
pub fn class_logits<T: Real>(tape: &mut Tape<'_, T>, scores: Var, classes: usize, per_class: usize) -> Result<Var> {
    let avg = tape.constant(category_mean_matrix(classes, per_class));
    Ok(tape.matmul(scores, avg)?)
}
