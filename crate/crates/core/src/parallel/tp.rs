use crate::comm::{Axis, Rank};
use crate::error::{Error, Result};
use crate::tensor::{ops, Float, Tensor};

/// Sum over the TP group; identity when TP=1.
pub fn tp_allreduce<T: Float>(rank: &mut Rank<'_>, t: Tensor<T>) -> Result<Tensor<T>> {
    let g = rank.group(Axis::Tp);
    if g.size() > 1 {
        rank.allreduce(&g, &t)
    } else {
        Ok(t)
    }
}

/// Slice `tp_rank` of `tp` equal parts along `axis`.
pub fn tp_shard<T: Float>(w: &Tensor<T>, axis: usize, tp_rank: usize, tp: usize) -> Result<Tensor<T>> {
    let n = w.dim(axis);
    if tp == 0 || !n.is_multiple_of(tp) {
        return Err(Error::contract(
            "tp_shard",
            format!("axis {axis} of {:?} not divisible by tp={tp}", w.shape()),
        ));
    }
    let len = n / tp;
    Ok(w.narrow(axis, tp_rank * len, len))
}

/// Column-parallel linear: `w` holds a slice of the output columns. No
/// communication in forward.
pub fn tp_col_linear<T: Float>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    ops::matmul(x, w)
}

/// Returns `(dx, dw)`; `dx` is summed over the TP group.
pub fn tp_col_linear_backward<T: Float>(
    rank: &mut Rank<'_>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dx = tp_allreduce(rank, ops::matmul_nt(dy, w)?)?;
    Ok((dx, ops::matmul_tn(x, dy)?))
}

/// Row-parallel linear: `x` and `w` hold matching slices of the inner
/// dimension; partial products are summed over the TP group.
pub fn tp_row_linear<T: Float>(rank: &mut Rank<'_>, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    tp_allreduce(rank, ops::matmul(x, w)?)
}

/// Returns `(dx, dw)` for the local slices. No communication.
pub fn tp_row_linear_backward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((ops::matmul_nt(dy, w)?, ops::matmul_tn(x, dy)?))
}
