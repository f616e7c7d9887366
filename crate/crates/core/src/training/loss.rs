use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Mean over non-PAD positions of `−Σ_v q(v)·log p(v)`.
///
/// `q` puts `1 − ε` on the target and spreads `ε` evenly over the other
/// classes, PAD excluded. `logits` is `[..., V]` with one row per entry of
/// `targets`.
pub fn label_smoothed_ce<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[u32],
    epsilon: f64,
    pad_id: u32,
) -> Result<Var> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid(format!(
            "label smoothing must lie in [0, 1), got {epsilon}"
        )));
    }
    let shape = g.shape(logits).to_vec();
    let v = *shape.last().expect("tensors have rank >= 1");
    if shape.iter().product::<usize>() != targets.len() * v {
        return Err(Error::Shape {
            op: "label_smoothed_ce",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let pad = pad_id as usize;
    let others = v - 1 - usize::from(pad < v);
    if epsilon > 0.0 && others == 0 {
        return Err(Error::invalid(
            "label smoothing needs at least one non-target class",
        ));
    }
    let spread = if others == 0 {
        0.0
    } else {
        epsilon / others as f64
    };
    let count = targets.iter().filter(|&&t| t != pad_id).count();
    if count == 0 {
        return Err(Error::invalid("every target position is PAD"));
    }
    let norm = 1.0 / count as f64;
    let mut q = vec![T::zero(); targets.len() * v];
    for (row, &t) in q.chunks_mut(v).zip(targets) {
        if t == pad_id {
            continue;
        }
        let t = t as usize;
        if t >= v {
            return Err(Error::invalid(format!(
                "target id {t} out of range (< {v})"
            )));
        }
        row.fill(T::lit(-spread * norm));
        if pad < v {
            row[pad] = T::zero();
        }
        row[t] = T::lit(-(1.0 - epsilon) * norm);
    }
    let logp = g.log_softmax(logits, shape.len() - 1)?;
    let w = g.constant(Tensor::new(shape, q)?);
    let weighted = g.mul(logp, w)?;
    Ok(g.sum(weighted))
}

/// Fraction of non-PAD positions whose argmax logit is the target.
pub fn token_accuracy<T: Scalar>(logits: &Tensor<T>, targets: &[u32], pad_id: u32) -> f64 {
    let v = logits.last_dim();
    let mut hit = 0usize;
    let mut total = 0usize;
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        if t == pad_id {
            continue;
        }
        total += 1;
        if argmax(row) == t as usize {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
