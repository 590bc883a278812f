//! Token–concept similarity, token weights and weighted tokens.

use mmgpl_diffcore::{DiffError, Real, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Whether the forward pass may see the subject's label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { label: usize },
    Eval,
}

/// Where the category used for token weighting came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CategorySource {
    Label(usize),
    Inferred(usize),
}

impl CategorySource {
    pub fn index(self) -> usize {
        match self {
            CategorySource::Label(c) | CategorySource::Inferred(c) => c,
        }
    }
}

/// Handles of the learnable projection into concept space.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub w: Var,
    pub b: Var,
}

pub fn project<T: Real>(tape: &mut Tape<'_, T>, tokens: Var, p: &ProjectionVars) -> Result<Var> {
    let x = tape.matmul(tokens, p.w)?;
    Ok(tape.add_row(x, p.b)?)
}

/// Row-wise `softmax(cos(F_pro(t_i), Z_j) / τ_s)` over all concepts.
pub fn similarity<T: Real>(
    tape: &mut Tape<'_, T>,
    tokens: Var,
    z: Var,
    p: &ProjectionVars,
    tau: T,
) -> Result<Var> {
    let projected = project(tape, tokens, p)?;
    let cos = tape.cosine_rows(projected, z).map_err(|e| match e {
        DiffError::Domain { msg, .. } => Error::Numeric(format!("projected token: {}", msg.replace("of lhs ", ""))),
        other => other.into(),
    })?;
    Ok(tape.softmax(cos, 1, tau)?)
}

/// `(C·K)×1` indicator of one category's concepts.
pub fn category_indicator<T: Real>(classes: usize, per_class: usize, category: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[classes * per_class, 1]);
    for k in 0..per_class {
        t.data_mut()[category * per_class + k] = T::one();
    }
    t
}

/// `w_i = C · Σ_{j ∈ category} S_ij / Σ_j S_ij`, as an `N×1` column.
pub fn token_weights<T: Real>(
    tape: &mut Tape<'_, T>,
    s: Var,
    category: usize,
    classes: usize,
    per_class: usize,
) -> Result<Var> {
    if category >= classes {
        return Err(DiffError::Index {
            op: "token_weights",
            index: category,
            bound: classes,
        }
        .into());
    }
    let (_, cols) = tape.dims(s);
    if cols != classes * per_class {
        return Err(DiffError::Shape {
            op: "token_weights",
            lhs: vec![tape.dims(s).0, cols],
            rhs: vec![classes, per_class],
        }
        .into());
    }
    let mask = tape.constant(category_indicator(classes, per_class, category));
    let mass = tape.matmul(s, mask)?;
    // Rows of S are softmax outputs, so their totals are identically 1 as functions
    // of the logits: the denominator carries no gradient and enters as a constant.
    let (n, _) = tape.dims(s);
    let mut scale = Vec::with_capacity(n);
    let mut exact = Vec::with_capacity(n);
    for row in tape.data(s).chunks_exact(cols) {
        let wide: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let total: f64 = wide.iter().sum();
        let own: f64 = wide[category * per_class..(category + 1) * per_class].iter().sum();
        scale.push(T::lit(classes as f64 / total));
        exact.push(T::lit(classes as f64 * own / total));
    }
    let scale = tape.constant(Tensor::new(vec![n, 1], scale)?);
    let w = tape.mul(mass, scale)?;
    // Sums taken in f64 make the forward value exact to the last bit (w ≡ 1 for
    // uniform S); the residual correction is a constant and leaves the gradient alone.
    let residual: Vec<T> = exact.iter().zip(tape.data(w)).map(|(&e, &a)| e - a).collect();
    let residual = tape.constant(Tensor::new(vec![n, 1], residual)?);
    Ok(tape.add(w, residual)?)
}

/// [`token_weights`] guarded against label leakage: in eval mode only inferred
/// categories are accepted.
pub fn token_weights_for<T: Real>(
    tape: &mut Tape<'_, T>,
    s: Var,
    source: CategorySource,
    mode: Mode,
    classes: usize,
    per_class: usize,
) -> Result<Var> {
    if mode == Mode::Eval {
        if let CategorySource::Label(_) = source {
            return Err(DiffError::Contract("true label reached token weighting in eval mode".into()).into());
        }
    }
    token_weights(tape, s, source.index(), classes, per_class)
}

/// Category with the largest total similarity mass; ties go to the lowest index.
pub fn infer_category<T: Real>(s: &[T], classes: usize, per_class: usize) -> usize {
    let cols = classes * per_class;
    let mut mass = vec![T::zero(); classes];
    for row in s.chunks_exact(cols) {
        for (c, m) in mass.iter_mut().enumerate() {
            *m += row[c * per_class..(c + 1) * per_class].iter().copied().sum::<T>();
        }
    }
    let mut best = 0;
    for c in 1..classes {
        if mass[c] > mass[best] {
            best = c;
        }
    }
    best
}

/// Picks the weighting category for a forward pass: the label when training,
/// otherwise the inferred category.
pub fn weighting_category<T: Real>(mode: Mode, s: &[T], classes: usize, per_class: usize) -> CategorySource {
    match mode {
        Mode::Train { label } => CategorySource::Label(label),
        Mode::Eval => CategorySource::Inferred(infer_category(s, classes, per_class)),
    }
}

/// `t̃_i = w_i · t_i`.
pub fn apply_weights<T: Real>(tape: &mut Tape<'_, T>, tokens: Var, w: Var) -> Result<Var> {
    Ok(tape.scale_rows(tokens, w)?)
}
