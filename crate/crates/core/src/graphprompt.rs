//! Concept-similarity token graph and the GCN graph prompt.

use mmgpl_diffcore::{DiffError, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

/// `a_ij = softmax_j(cos(S_i, S_j) / τ_g)`, self-similarity included.
pub fn build_graph<T: Real>(tape: &mut Tape<'_, T>, s: Var, tau: T) -> Result<Var> {
    let cos = tape.cosine_rows(s, s).map_err(|e| match e {
        DiffError::Domain { msg, .. } => Error::Numeric(format!("similarity row with zero norm: {msg}")),
        other => other.into(),
    })?;
    Ok(tape.softmax(cos, 1, tau)?)
}

/// 0/1 mask keeping the `k` largest entries of every row; ties go to the lower column.
pub fn topk_mask<T: Real>(a: &[T], n: usize, k: usize) -> Result<Tensor<T>> {
    if k == 0 || k > n {
        return Err(Error::Numeric(format!("top-k {k} outside 1..={n}")));
    }
    let mut mask = vec![T::zero(); n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for (i, row) in a.chunks_exact(n).enumerate() {
        order.clear();
        order.extend(0..n);
        // stable sort keeps lower columns first among equal values
        order.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap_or(std::cmp::Ordering::Equal));
        for &j in &order[..k] {
            mask[i * n + j] = T::one();
        }
    }
    Ok(Tensor::new(vec![n, n], mask)?)
}

/// Keeps each row's top-`k` entries and renormalizes the rows to sum 1.
pub fn sparsify_topk<T: Real>(tape: &mut Tape<'_, T>, a: Var, k: usize) -> Result<Var> {
    let (n, m) = tape.dims(a);
    if n != m {
        return Err(DiffError::Shape {
            op: "sparsify_topk",
            lhs: vec![n, m],
            rhs: vec![n, n],
        }
        .into());
    }
    let mask = topk_mask(tape.data(a), n, k)?;
    let mask = tape.constant(mask);
    let kept = tape.mul(a, mask)?;
    Ok(tape.row_normalize(kept)?)
}

/// `σ(D̃^{-1/2} (A + I) D̃^{-1/2} H Θ)`.
pub fn gcn_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    a: Var,
    h: Var,
    theta: Var,
    act: Activation,
) -> Result<Var> {
    let (n, _) = tape.dims(a);
    if tape.dims(h).0 != n {
        return Err(DiffError::Shape {
            op: "gcn_forward",
            lhs: vec![n, n],
            rhs: vec![tape.dims(h).0, tape.dims(h).1],
        }
        .into());
    }
    let p = tape.normalized_adjacency(a)?;
    let ph = tape.matmul(p, h)?;
    let out = tape.matmul(ph, theta)?;
    Ok(match act {
        Activation::Relu => tape.relu(out),
        Activation::Identity => out,
    })
}

/// Runs the GCN stack over the weighted tokens; with `residual` the input is added back.
pub fn prompt_tokens<T: Real>(
    tape: &mut Tape<'_, T>,
    a: Var,
    weighted: Var,
    thetas: &[Var],
    act: Activation,
    residual: bool,
) -> Result<Var> {
    let mut h = weighted;
    for &theta in thetas {
        h = gcn_forward(tape, a, h, theta, act)?;
    }
    if residual {
        h = tape.add(h, weighted)?;
    }
    Ok(h)
}
