use log::warn;

use crate::tensor::{dot, norm, Graph, Real, Tensor, TensorError, Var};

fn unit<T: Real>(v: &[T], what: &str) -> Result<Vec<T>, TensorError> {
    let n = norm(v);
    if n == T::zero() || !n.is_finite() {
        return Err(TensorError::ZeroNorm("info_nce"));
    }
    if (n.as_f64() - 1.0).abs() > 1e-5 {
        warn!("info_nce: {what} has norm {n}, normalizing");
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Contrastive loss of query `q` against its positive `p0` and `negatives`:
/// `-log(exp(q·p0/τ) / (exp(q·p0/τ) + Σ exp(q·n/τ)))`.
///
/// Inputs are expected to be unit vectors; others are normalized with a warning.
/// With `exclusive` set, the positive term is left out of the denominator.
pub fn info_nce<T: Real>(q: &[T], p0: &[T], negatives: &[&[T]], tau: T, exclusive: bool) -> Result<T, TensorError> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(TensorError::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let d = q.len();
    if p0.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(TensorError::ShapeMismatch { op: "info_nce", detail: format!("query has dim {d}") });
    }
    if exclusive && negatives.is_empty() {
        return Err(TensorError::InvalidArgument("exclusive info_nce needs at least one negative".into()));
    }
    let q = unit(q, "query")?;
    let pos = dot(&q, &unit(p0, "positive")?) / tau;
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    if !exclusive {
        logits.push(pos);
    }
    for n in negatives {
        logits.push(dot(&q, &unit(n, "negative")?) / tau);
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
    Ok(lse - pos)
}

/// Batched loss on the tape: row `i` of `queries` (`[B, D]`) is scored against
/// every row of `keys` (`[K, D]`, not differentiated) with `targets[i]` the
/// index of its positive. Returns the batch mean.
pub fn info_nce_batch<T: Real>(
    g: &mut Graph<T>,
    queries: Var,
    keys: &Tensor<T>,
    targets: &[usize],
    tau: T,
    exclusive: bool,
) -> Result<Var, TensorError> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(TensorError::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let (k, d) = match *keys.shape() {
        [k, d] => (k, d),
        _ => return Err(TensorError::ShapeMismatch { op: "info_nce", detail: format!("keys must be [K, D], got {:?}", keys.shape()) }),
    };
    let mut kt = vec![T::zero(); k * d];
    for (r, row) in keys.data().chunks(d).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            kt[c * k + r] = v;
        }
    }
    let kt = g.constant(Tensor::new([d, k], kt)?);
    let sims = g.matmul(queries, kt)?;
    let logits = g.scale(sims, T::one() / tau)?;
    if exclusive {
        g.cross_entropy_exclusive(logits, targets)
    } else {
        g.cross_entropy(logits, targets)
    }
}
