use super::{Element, Float, IndexTensor, Tensor};
use crate::error::{Error, Result};

/// RMSNorm epsilon, added inside the square root.
pub const RMS_EPS: f64 = 1e-5;

/// Accumulator precision for GEMM kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Accumulation {
    /// Accumulate in the tensor dtype.
    #[default]
    Native,
    /// Accumulate in f64 and round once at the end.
    F64,
}

fn matrix_dims<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.dim(0), t.dim(1)))
}

/// `out[m,n] = a[m,k] * b[k,n]`, row-major slices. Each output element is
/// accumulated over `k` in ascending order, identical to the textbook triple
/// loop.
fn gemm_into<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, acc: Accumulation) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    match acc {
        Accumulation::Native => {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                row.iter_mut().for_each(|x| *x = T::zero());
                for p in 0..k {
                    let av = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        Accumulation::F64 => {
            let mut buf = vec![0f64; n];
            for i in 0..m {
                buf.iter_mut().for_each(|x| *x = 0.0);
                for p in 0..k {
                    let av = a[i * k + p].as_f64();
                    for (o, &bv) in buf.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *o += av * bv.as_f64();
                    }
                }
                for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&buf) {
                    *o = T::lit(v);
                }
            }
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`, accumulating over `m` in ascending order.
fn gemm_tn_acc<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] = a[m,n] * b[k,n]^T`.
fn gemm_nt_into<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] = acc;
        }
    }
}

pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_with(a, b, Accumulation::Native)
}

pub fn matmul_with<T: Float>(a: &Tensor<T>, b: &Tensor<T>, acc: Accumulation) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_into(a.data(), b.data(), out.data_mut(), m, k, n, acc);
    Ok(out)
}

/// `a^T * b` for `a[m,k]`, `b[m,n]`.
pub fn matmul_tn<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims("matmul_tn", a)?;
    let (m2, n) = matrix_dims("matmul_tn", b)?;
    if m != m2 {
        return Err(Error::shape("matmul_tn", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = Tensor::zeros(&[k, n]);
    gemm_tn_acc(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// `a * b^T` for `a[m,n]`, `b[k,n]`.
pub fn matmul_nt<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = matrix_dims("matmul_nt", a)?;
    let (k, n2) = matrix_dims("matmul_nt", b)?;
    if n != n2 {
        return Err(Error::shape("matmul_nt", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = Tensor::zeros(&[m, k]);
    gemm_nt_into(a.data(), b.data(), out.data_mut(), m, n, k);
    Ok(out)
}

fn check_boundaries(op: &'static str, boundaries: &[usize], groups: usize, rows: usize) -> Result<()> {
    if boundaries.len() != groups + 1 {
        return Err(Error::contract(
            op,
            format!("{} boundaries for {groups} groups", boundaries.len()),
        ));
    }
    if boundaries[0] != 0 || boundaries[groups] != rows {
        return Err(Error::contract(
            op,
            format!("boundaries must span [0, {rows}], got {boundaries:?}"),
        ));
    }
    if boundaries.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::contract(op, format!("boundaries not monotone: {boundaries:?}")));
    }
    Ok(())
}

fn grouped_dims<T: Element>(op: &'static str, input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (rows, k1) = matrix_dims(op, input)?;
    if weights.ndim() != 3 || weights.dim(1) != k1 {
        return Err(Error::shape(
            op,
            format!("input {:?} incompatible with weights {:?}", input.shape(), weights.shape()),
        ));
    }
    Ok((rows, weights.dim(0), k1, weights.dim(2)))
}

/// Rows `[boundaries[g], boundaries[g+1])` of `input` are multiplied by
/// `weights[g]`.
pub fn grouped_mm<T: Float>(input: &Tensor<T>, weights: &Tensor<T>, boundaries: &[usize]) -> Result<Tensor<T>> {
    let (rows, groups, k1, k2) = grouped_dims("grouped_mm", input, weights)?;
    check_boundaries("grouped_mm", boundaries, groups, rows)?;
    let mut out = Tensor::zeros(&[rows, k2]);
    let (x, w, o) = (input.data(), weights.data(), out.data_mut());
    for g in 0..groups {
        let (lo, hi) = (boundaries[g], boundaries[g + 1]);
        if lo == hi {
            continue;
        }
        gemm_into(
            &x[lo * k1..hi * k1],
            &w[g * k1 * k2..(g + 1) * k1 * k2],
            &mut o[lo * k2..hi * k2],
            hi - lo,
            k1,
            k2,
            Accumulation::Native,
        );
    }
    Ok(out)
}

/// Backward of [`grouped_mm`]: returns `(grad_input[RT,K1], grad_weights[G,K1,K2])`.
pub fn grouped_mm_backward<T: Float>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    boundaries: &[usize],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (rows, groups, k1, k2) = grouped_dims("grouped_mm_backward", input, weights)?;
    check_boundaries("grouped_mm_backward", boundaries, groups, rows)?;
    if grad_out.shape() != [rows, k2] {
        return Err(Error::shape(
            "grouped_mm_backward",
            format!("grad_out {:?}, expected [{rows}, {k2}]", grad_out.shape()),
        ));
    }
    let mut gin = Tensor::zeros(&[rows, k1]);
    let mut gw = Tensor::zeros(&[groups, k1, k2]);
    let (x, w, dy) = (input.data(), weights.data(), grad_out.data());
    for g in 0..groups {
        let (lo, hi) = (boundaries[g], boundaries[g + 1]);
        if lo == hi {
            continue;
        }
        let wg = &w[g * k1 * k2..(g + 1) * k1 * k2];
        gemm_nt_into(&dy[lo * k2..hi * k2], wg, &mut gin.data_mut()[lo * k1..hi * k1], hi - lo, k2, k1);
        gemm_tn_acc(
            &x[lo * k1..hi * k1],
            &dy[lo * k2..hi * k2],
            &mut gw.data_mut()[g * k1 * k2..(g + 1) * k1 * k2],
            hi - lo,
            k1,
            k2,
        );
    }
    Ok((gin, gw))
}

/// Row-wise softmax over the last axis, with max subtraction.
pub fn softmax<T: Float>(logits: &Tensor<T>) -> Tensor<T> {
    let n = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    if n == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
        let max = if max.is_finite() { max } else { T::zero() };
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// `dx = y * (dy - sum(dy * y))` per row.
pub fn softmax_backward<T: Float>(probs: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.shape() != grad.shape() {
        return Err(Error::shape("softmax_backward", format!("{:?} vs {:?}", probs.shape(), grad.shape())));
    }
    let n = *probs.shape().last().unwrap_or(&1);
    let mut out = grad.clone();
    if n == 0 {
        return Ok(out);
    }
    for (row, prow) in out.data_mut().chunks_mut(n).zip(probs.data().chunks(n)) {
        let mut dot = T::zero();
        for (&g, &p) in row.iter().zip(prow) {
            dot += g * p;
        }
        for (g, &p) in row.iter_mut().zip(prow) {
            *g = p * (*g - dot);
        }
    }
    Ok(out)
}

/// Per row, the `k` largest entries in descending order. Ties go to the
/// lower column index.
pub fn topk<T: Float>(probs: &Tensor<T>, k: usize) -> Result<(Tensor<T>, IndexTensor)> {
    let (rows, n) = matrix_dims("topk", probs)?;
    if k == 0 || k > n {
        return Err(Error::contract("topk", format!("k={k} must be in [1, {n}]")));
    }
    let mut weights = Vec::with_capacity(rows * k);
    let mut indices = Vec::with_capacity(rows * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for r in 0..rows {
        let row = probs.row(r);
        order.clear();
        order.extend(0..n);
        // total order: value descending, then index ascending
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &e in &order[..k] {
            weights.push(row[e]);
            indices.push(e);
        }
    }
    Ok((Tensor::new(&[rows, k], weights)?, Tensor::new(&[rows, k], indices)?))
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Float>(x: T) -> T {
    x * sigmoid(x)
}

/// `silu(gate) * up`, elementwise.
pub fn silu_glu<T: Float>(gate_out: &Tensor<T>, up_out: &Tensor<T>) -> Result<Tensor<T>> {
    if gate_out.shape() != up_out.shape() {
        return Err(Error::shape("silu_glu", format!("{:?} vs {:?}", gate_out.shape(), up_out.shape())));
    }
    let data = gate_out.data().iter().zip(up_out.data()).map(|(&g, &u)| silu(g) * u).collect();
    Tensor::new(gate_out.shape(), data)
}

/// Returns `(grad_gate, grad_up)`.
pub fn silu_glu_backward<T: Float>(gate_out: &Tensor<T>, up_out: &Tensor<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if gate_out.shape() != up_out.shape() || gate_out.shape() != grad.shape() {
        return Err(Error::shape("silu_glu_backward", format!("{:?}", gate_out.shape())));
    }
    let n = gate_out.numel();
    let mut dg = Vec::with_capacity(n);
    let mut du = Vec::with_capacity(n);
    for ((&g, &u), &dy) in gate_out.data().iter().zip(up_out.data()).zip(grad.data()) {
        let s = sigmoid(g);
        let silu_g = g * s;
        let dsilu = s * (T::one() + g * (T::one() - s));
        dg.push(dy * u * dsilu);
        du.push(dy * silu_g);
    }
    Ok((Tensor::new(gate_out.shape(), dg)?, Tensor::new(gate_out.shape(), du)?))
}

/// `out[0] = 0`, `out[i] = v[0] + .. + v[i-1]`; length `v.len() + 1`.
pub fn prefix_sum(v: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(v.len() + 1);
    let mut acc = 0;
    out.push(0);
    for &x in v {
        acc += x;
        out.push(acc);
    }
    out
}

fn rms_inv<T: Float>(row: &[T]) -> T {
    let h = T::lit(row.len() as f64);
    let mut ss = T::zero();
    for &x in row {
        ss += x * x;
    }
    T::one() / (ss / h + T::lit(RMS_EPS)).sqrt()
}

/// `x / rms(x) * weight` per row.
pub fn rmsnorm<T: Float>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let h = weight.numel();
    if h == 0 || x.shape().last() != Some(&h) {
        return Err(Error::shape("rmsnorm", format!("x {:?}, weight {:?}", x.shape(), weight.shape())));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(h) {
        let r = rms_inv(row);
        for (v, &w) in row.iter_mut().zip(weight.data()) {
            *v = *v * r * w;
        }
    }
    Ok(out)
}

/// Returns `(grad_x, grad_weight)`.
pub fn rmsnorm_backward<T: Float>(x: &Tensor<T>, weight: &Tensor<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let h = weight.numel();
    if h == 0 || x.shape().last() != Some(&h) || x.shape() != grad.shape() {
        return Err(Error::shape("rmsnorm_backward", format!("x {:?}, grad {:?}", x.shape(), grad.shape())));
    }
    let hf = T::lit(h as f64);
    let w = weight.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    for ((xr, gr), dxr) in x.data().chunks(h).zip(grad.data().chunks(h)).zip(dx.data_mut().chunks_mut(h)) {
        let r = rms_inv(xr);
        let mut dot = T::zero();
        for j in 0..h {
            dot += gr[j] * w[j] * xr[j];
        }
        let coef = r * r * r * dot / hf;
        for j in 0..h {
            dxr[j] = r * w[j] * gr[j] - xr[j] * coef;
        }
        for (j, d) in dw.data_mut().iter_mut().enumerate() {
            *d += gr[j] * xr[j] * r;
        }
    }
    Ok((dx, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get(&[i, p]) as f64 * b.get(&[p, j]) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let id = Tensor::new(&[2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(&[2, 2], vec![3.0f32, -1.0, 2.5, 7.0]).unwrap();
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let a = Tensor::new(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![3.0f32, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor::<f32>(&mut rng, &[7, 5]);
        let b = rand_tensor::<f32>(&mut rng, &[5, 3]);
        let got = matmul(&a, &b).unwrap();
        for (g, want) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((*g as f64 - want).abs() <= 1e-6 * want.abs().max(1e-3), "{g} vs {want}");
        }
        let f64acc = matmul_with(&a, &b, Accumulation::F64).unwrap();
        assert!(f64acc.max_rel_err(&got, 1e-3) < 1e-6);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn transposed_variants_agree_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor::<f64>(&mut rng, &[4, 6]);
        let b = rand_tensor::<f64>(&mut rng, &[4, 5]);
        let c = rand_tensor::<f64>(&mut rng, &[3, 6]);
        let tn = matmul_tn(&a, &b).unwrap();
        assert!(tn.max_rel_err(&matmul(&a.transpose(), &b).unwrap(), 1e-12) < 1e-12);
        let nt = matmul_nt(&a, &c).unwrap();
        assert!(nt.max_rel_err(&matmul(&a, &c.transpose()).unwrap(), 1e-12) < 1e-12);
    }

    #[test]
    fn grouped_mm_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor::<f32>(&mut rng, &[6, 4]);
        let w = rand_tensor::<f32>(&mut rng, &[2, 4, 3]);
        let w1 = w.narrow(0, 1, 1).reshape(&[4, 3]).unwrap();
        let w0 = w.narrow(0, 0, 1).reshape(&[4, 3]).unwrap();
        assert_eq!(grouped_mm(&x, &w.narrow(0, 0, 1), &[0, 6]).unwrap(), matmul(&x, &w0).unwrap());
        assert_eq!(grouped_mm(&x, &w, &[0, 0, 6]).unwrap(), matmul(&x, &w1).unwrap());
    }

    #[test]
    fn grouped_mm_rejects_bad_boundaries() {
        let x = Tensor::<f32>::zeros(&[4, 2]);
        let w = Tensor::<f32>::zeros(&[2, 2, 2]);
        assert!(matches!(grouped_mm(&x, &w, &[0, 3, 2]), Err(Error::Contract { .. })));
        assert!(matches!(grouped_mm(&x, &w, &[1, 2, 4]), Err(Error::Contract { .. })));
        assert!(matches!(grouped_mm(&x, &w, &[0, 4]), Err(Error::Contract { .. })));
    }

    #[test]
    fn grouped_mm_equals_per_group_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let rows = rng.gen_range(0..30);
            let mut cuts: Vec<usize> = (0..3).map(|_| rng.gen_range(0..=rows)).collect();
            cuts.sort();
            let bounds = [vec![0], cuts, vec![rows]].concat();
            let x = rand_tensor::<f32>(&mut rng, &[rows, 5]);
            let w = rand_tensor::<f32>(&mut rng, &[4, 5, 3]);
            let got = grouped_mm(&x, &w, &bounds).unwrap();
            for g in 0..4 {
                let (lo, hi) = (bounds[g], bounds[g + 1]);
                let wg = w.narrow(0, g, 1).reshape(&[5, 3]).unwrap();
                let want = matmul(&x.slice_rows(lo, hi), &wg).unwrap();
                assert_eq!(got.slice_rows(lo, hi).data(), want.data());
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&Tensor::new(&[1, 4], vec![0.0f32; 4]).unwrap());
        assert_eq!(u.data(), &[0.25; 4]);
        let s = softmax(&Tensor::new(&[1, 2], vec![1000.0f32, 0.0]).unwrap());
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_formula_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor::<f64>(&mut rng, &[5, 9]).scaled(4.0);
        let got = softmax(&x);
        for r in 0..5 {
            let row = x.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for (g, v) in got.row(r).iter().zip(row) {
                assert!((g - v.exp() / z).abs() < 1e-12);
            }
            assert!((got.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_propagates_nan() {
        let s = softmax(&Tensor::new(&[1, 3], vec![0.0f32, f32::NAN, 1.0]).unwrap());
        assert!(s.data().iter().any(|v| v.is_nan()));
    }

    #[test]
    fn topk_cases() {
        let p = Tensor::new(&[1, 3], vec![0.1f32, 0.7, 0.2]).unwrap();
        let (w, i) = topk(&p, 1).unwrap();
        assert_eq!((w.data(), i.data()), (&[0.7f32][..], &[1usize][..]));
        let tie = Tensor::new(&[1, 4], vec![0.25f32; 4]).unwrap();
        assert_eq!(topk(&tie, 2).unwrap().1.data(), &[0, 1]);
        assert!(matches!(topk(&p, 4), Err(Error::Contract { .. })));
    }

    #[test]
    fn topk_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = rand_tensor::<f32>(&mut rng, &[16, 10]);
        let (w, idx) = topk(&p, 4).unwrap();
        for r in 0..16 {
            let mut all: Vec<(f32, usize)> = p.row(r).iter().copied().zip(0..).collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for k in 0..4 {
                assert_eq!(idx.get(&[r, k]), all[k].1);
                assert_eq!(w.get(&[r, k]), all[k].0);
            }
        }
    }

    #[test]
    fn silu_glu_values() {
        let g = Tensor::new(&[3], vec![0.0f64, 1.0, -2.0]).unwrap();
        let u = Tensor::new(&[3], vec![5.0f64, 1.0, 1.0]).unwrap();
        let out = silu_glu(&g, &u).unwrap();
        assert_eq!(out.data()[0], 0.0);
        assert!((out.data()[1] - 0.7310585786300049).abs() < 1e-12);
        assert!(silu_glu(&g, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn prefix_sum_cases() {
        assert_eq!(prefix_sum(&[]), vec![0]);
        assert_eq!(prefix_sum(&[2, 0, 3]), vec![0, 2, 2, 5]);
    }

    #[test]
    fn rmsnorm_cases() {
        let x = Tensor::new(&[1, 4], vec![3.0f64; 4]).unwrap();
        let ones = Tensor::full(&[4], 1.0f64);
        let y = rmsnorm(&x, &ones).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-5));
        let y0 = rmsnorm(&x, &Tensor::zeros(&[4])).unwrap();
        assert!(y0.data().iter().all(|&v| v == 0.0));
    }
}
