//! Pure collective semantics over the contributions of every group member,
//! listed in group rank order. The threaded runtime evaluates exactly these
//! functions, so they double as the lockstep reference.
//!
//! Reductions always sum in ascending member order.

use crate::error::{Error, Result};
use crate::tensor::{Element, Float, Tensor};

fn same_shapes<T: Element>(op: &'static str, inputs: &[Tensor<T>]) -> Result<()> {
    let first = inputs.first().ok_or_else(|| Error::contract(op, "empty group"))?;
    for (i, t) in inputs.iter().enumerate() {
        if t.shape() != first.shape() {
            return Err(Error::contract(
                op,
                format!("member {i} contributed {:?}, member 0 contributed {:?}", t.shape(), first.shape()),
            ));
        }
    }
    Ok(())
}

/// Concatenation along axis 0 in member order.
pub fn allgather<T: Element>(inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    same_shapes("allgather", inputs)?;
    let refs: Vec<&Tensor<T>> = inputs.iter().collect();
    Tensor::concat_rows(&refs)
}

/// Like [`allgather`] but members may contribute different axis-0 extents.
pub fn allgather_v<T: Element>(inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let refs: Vec<&Tensor<T>> = inputs.iter().collect();
    Tensor::concat_rows(&refs).map_err(|e| Error::contract("allgather_v", e.to_string()))
}

fn elementwise_sum<T: Float>(inputs: &[Tensor<T>]) -> Tensor<T> {
    let mut acc = inputs[0].clone();
    for t in &inputs[1..] {
        for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
            *a += b;
        }
    }
    acc
}

pub fn allreduce<T: Float>(inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    same_shapes("allreduce", inputs)?;
    Ok(elementwise_sum(inputs))
}

/// Elementwise sum, then member `g` receives the `g`-th of `counts` consecutive
/// axis-0 chunks.
pub fn reducescatter_v<T: Float>(inputs: &[Tensor<T>], counts: &[usize]) -> Result<Vec<Tensor<T>>> {
    same_shapes("reducescatter", inputs)?;
    if counts.len() != inputs.len() {
        return Err(Error::contract(
            "reducescatter",
            format!("{} chunk counts for {} members", counts.len(), inputs.len()),
        ));
    }
    let rows = inputs[0].rows();
    if counts.iter().sum::<usize>() != rows {
        return Err(Error::contract(
            "reducescatter",
            format!("chunk counts {counts:?} do not cover {rows} rows"),
        ));
    }
    let sum = elementwise_sum(inputs);
    let mut start = 0;
    Ok(counts
        .iter()
        .map(|&c| {
            let chunk = sum.slice_rows(start, start + c);
            start += c;
            chunk
        })
        .collect())
}

pub fn reducescatter<T: Float>(inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    same_shapes("reducescatter", inputs)?;
    let g = inputs.len();
    let rows = inputs[0].rows();
    if !rows.is_multiple_of(g) {
        return Err(Error::contract(
            "reducescatter",
            format!("axis-0 extent {rows} not divisible by group size {g}"),
        ));
    }
    reducescatter_v(inputs, &vec![rows / g; g])
}

/// `out[j][i] = inputs[i][j]`: member `i`'s `j`-th chunk is delivered to
/// member `j`, which receives chunks in sender order.
pub fn all2all<T: Element>(inputs: Vec<Vec<Tensor<T>>>) -> Result<Vec<Vec<Tensor<T>>>> {
    let g = inputs.len();
    if let Some((i, v)) = inputs.iter().enumerate().find(|(_, v)| v.len() != g) {
        return Err(Error::contract(
            "all2all",
            format!("member {i} supplied {} chunks for a group of {g}", v.len()),
        ));
    }
    let mut out: Vec<Vec<Tensor<T>>> = (0..g).map(|_| Vec::with_capacity(g)).collect();
    for row in inputs {
        for (j, chunk) in row.into_iter().enumerate() {
            out[j].push(chunk);
        }
    }
    Ok(out)
}

/// Split `n` elements into `parts` contiguous chunks; the last takes the
/// remainder.
pub fn even_split(n: usize, parts: usize) -> Vec<usize> {
    let base = n / parts;
    let mut v = vec![base; parts];
    if let Some(last) = v.last_mut() {
        *last = n - base * (parts - 1);
    }
    v
}
