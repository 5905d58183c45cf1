//! Forward kernels and their adjoints over plain tensors.
//!
//! The differentiation graph in [`crate::graph`] records calls to these
//! kernels; they are also usable directly for inference-only code paths.

use crate::error::{Error, Result};
use crate::tensor::{axis_split, Scalar, Tensor};

/// Variance floor used by [`layer_norm`].
pub const LN_EPS: f64 = 1e-6;

/// Label value excluded from the loss and from metrics.
pub const IGNORE_INDEX: usize = 255;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul of {:?} and {:?}: inner extents differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new([m, n], out)
}

const MR: usize = 4;
const NR: usize = 8;

/// `out += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let full_cols = n - n % NR;
    let mut i = 0;
    while i + MR <= m {
        let rows: [&[T]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        for j in (0..full_cols).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (p, bchunk) in b.chunks_exact(n).take(k).enumerate() {
                let bv: &[T; NR] = bchunk[j..j + NR].try_into().expect("NR columns");
                for (row, arow) in acc.iter_mut().zip(&rows) {
                    let av = arow[p];
                    for (o, &bv) in row.iter_mut().zip(bv) {
                        *o += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let dst = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        if full_cols < n {
            for r in i..i + MR {
                row_kernel(&a[r * k..(r + 1) * k], b, &mut out[r * n..(r + 1) * n], n, full_cols);
            }
        }
        i += MR;
    }
    for r in i..m {
        row_kernel(&a[r * k..(r + 1) * k], b, &mut out[r * n..(r + 1) * n], n, 0);
    }
}

/// `out[j0..] += arow · b[.., j0..]` for one output row.
fn row_kernel<T: Scalar>(arow: &[T], b: &[T], out: &mut [T], n: usize, j0: usize) {
    for (p, &av) in arow.iter().enumerate() {
        let brow = &b[p * n + j0..(p + 1) * n];
        for (o, &bv) in out[j0..].iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
}

fn transposed<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// `out += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm_nn(a, &transposed(b, n, k), out, m, k, n);
}

/// `out += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm_nn(&transposed(a, k, m), b, out, m, k, n);
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2()?;
    let src = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::new([n, m], out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(src[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Vector-Jacobian product of softmax given its output `y`.
pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis).expect("axis validated at forward time");
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: T = (0..n).map(|j| y[at(j)] * dy[at(j)]).sum();
            for j in 0..n {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

/// Softmax over the last axis restricted to entries where `mask` is true.
/// Masked entries come out as exactly zero. Every row needs at least one
/// unmasked entry.
pub fn masked_softmax<T: Scalar>(x: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    if mask.len() != x.len() {
        return Err(Error::dim(format!(
            "mask of length {} for tensor of shape {:?}",
            mask.len(),
            x.shape()
        )));
    }
    let n = *x.shape().last().ok_or_else(|| Error::dim("masked softmax on a scalar"))?;
    let mut out = vec![T::zero(); x.len()];
    if n == 0 {
        return Tensor::new(x.shape().to_vec(), out);
    }
    for ((row, m), dst) in x
        .data()
        .chunks(n)
        .zip(mask.chunks(n))
        .zip(out.chunks_mut(n))
    {
        let mut max = T::neg_infinity();
        for (&v, &keep) in row.iter().zip(m) {
            if keep {
                max = max.max(v);
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::data("masked softmax row has no valid entries"));
        }
        let mut total = T::zero();
        for ((&v, &keep), d) in row.iter().zip(m).zip(dst.iter_mut()) {
            if keep {
                *d = (v - max).exp();
                total += *d;
            }
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn check_affine<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, axis: usize) -> Result<()> {
    let (_, n, _) = axis_split(x.shape(), axis)?;
    if gamma.len() != n || beta.len() != n {
        return Err(Error::dim(format!(
            "layer norm over extent {n} with gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

/// Normalizes every slice along `axis` to zero mean and unit (biased)
/// variance, then applies `gamma * x + beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    check_affine(x, gamma, beta, axis)?;
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let (g, b) = (gamma.data(), beta.data());
    let eps = T::lit(LN_EPS);
    let nf = T::from_count(n);
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mean = (0..n).map(|j| src[at(j)]).sum::<T>() / nf;
            let var = (0..n).map(|j| (src[at(j)] - mean).powi(2)).sum::<T>() / nf;
            let rstd = (var + eps).sqrt().recip();
            for j in 0..n {
                out[at(j)] = (src[at(j)] - mean) * rstd * g[j] + b[j];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    dy: &[T],
    axis: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (outer, n, inner) = axis_split(x.shape(), axis).expect("axis validated at forward time");
    let src = x.data();
    let g = gamma.data();
    let eps = T::lit(LN_EPS);
    let nf = T::from_count(n);
    let mut dx = vec![T::zero(); src.len()];
    let mut dg = vec![T::zero(); n];
    let mut db = vec![T::zero(); n];
    let mut xhat = vec![T::zero(); n];
    let mut dxhat = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mean = (0..n).map(|j| src[at(j)]).sum::<T>() / nf;
            let var = (0..n).map(|j| (src[at(j)] - mean).powi(2)).sum::<T>() / nf;
            let rstd = (var + eps).sqrt().recip();
            for j in 0..n {
                xhat[j] = (src[at(j)] - mean) * rstd;
                dxhat[j] = dy[at(j)] * g[j];
                dg[j] += dy[at(j)] * xhat[j];
                db[j] += dy[at(j)];
            }
            let mean_d = dxhat.iter().copied().sum::<T>() / nf;
            let mean_dx = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / nf;
            for j in 0..n {
                dx[at(j)] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
    }
    (dx, dg, db)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

fn check_depthwise<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (h, w, c) = x.dims3()?;
    match kernels.shape() {
        [3, 3, kc] if *kc == c => {}
        [kh, kw, _] if *kh != 3 || *kw != 3 => {
            return Err(Error::config(format!(
                "depthwise kernel must be 3×3, got {kh}×{kw}"
            )))
        }
        other => {
            return Err(Error::dim(format!(
                "depthwise kernels {other:?} do not match input {:?}",
                x.shape()
            )))
        }
    }
    if bias.len() != c {
        return Err(Error::dim(format!("depthwise bias {:?} for {c} channels", bias.shape())));
    }
    Ok((h, w, c))
}

/// Per-channel 3×3 correlation, stride 1, zero padding 1.
pub fn depthwise_conv3x3<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = check_depthwise(x, kernels, bias)?;
    let (src, k, b) = (x.data(), kernels.data(), bias.data());
    let mut out = vec![T::zero(); src.len()];
    for y in 0..h {
        for xx in 0..w {
            let dst = &mut out[(y * w + xx) * c..(y * w + xx + 1) * c];
            dst.copy_from_slice(b);
            for ky in 0..3 {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(sx) = (xx + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let s = &src[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                    let kk = &k[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                    for ((d, &sv), &kv) in dst.iter_mut().zip(s).zip(kk) {
                        *d += sv * kv;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns `(dx, dkernels, dbias)`.
pub(crate) fn depthwise_conv3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (h, w, c) = x.dims3().expect("validated at forward time");
    let (src, k) = (x.data(), kernels.data());
    let mut dx = vec![T::zero(); src.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut db = vec![T::zero(); c];
    for y in 0..h {
        for xx in 0..w {
            let g = &dy[(y * w + xx) * c..(y * w + xx + 1) * c];
            for (d, &gv) in db.iter_mut().zip(g) {
                *d += gv;
            }
            for ky in 0..3 {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(sx) = (xx + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let so = (sy * w + sx) * c;
                    let ko = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        dx[so + ch] += k[ko + ch] * g[ch];
                        dk[ko + ch] += src[so + ch] * g[ch];
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// Per-pixel linear map `H×W×Cin → H×W×Cout`.
pub fn pointwise_conv1x1<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, cin) = x.dims3()?;
    let (wcin, cout) = weight.dims2()?;
    if wcin != cin || bias.len() != cout {
        return Err(Error::dim(format!(
            "1×1 conv: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out: Vec<T> = bias.data().iter().copied().cycle().take(h * w * cout).collect();
    gemm_nn(x.data(), weight.data(), &mut out, h * w, cin, cout);
    Tensor::new([h, w, cout], out)
}

/// One axis of a bilinear resize: for each output index the two source taps
/// and the weight of the second one. Half-pixel centers (align-corners off).
pub(crate) fn bilinear_taps(in_n: usize, out_n: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_n as f64 / out_n as f64;
    (0..out_n)
        .map(|o| {
            if in_n == out_n {
                return (o, o, 0.0);
            }
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_n - 1);
            let i1 = (i0 + 1).min(in_n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of an `H×W×C` field.
pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "bilinear resize of {:?} to {out_h}×{out_w}",
            x.shape()
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let src = x.data();
    let mut out = vec![T::zero(); out_h * out_w * c];
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        let ly = T::lit(ly);
        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
            let lx = T::lit(lx);
            let weights = [
                ((y0, x0), (T::one() - ly) * (T::one() - lx)),
                ((y0, x1), (T::one() - ly) * lx),
                ((y1, x0), ly * (T::one() - lx)),
                ((y1, x1), ly * lx),
            ];
            let dst = &mut out[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
            for ((sy, sx), wt) in weights {
                let s = &src[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                for (d, &v) in dst.iter_mut().zip(s) {
                    *d += wt * v;
                }
            }
        }
    }
    Tensor::new([out_h, out_w, c], out)
}

pub(crate) fn bilinear_backward<T: Scalar>(
    dy: &[T],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    c: usize,
) -> Vec<T> {
    if (in_h, in_w) == (out_h, out_w) {
        return dy.to_vec();
    }
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let mut dx = vec![T::zero(); in_h * in_w * c];
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        let ly = T::lit(ly);
        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
            let lx = T::lit(lx);
            let weights = [
                ((y0, x0), (T::one() - ly) * (T::one() - lx)),
                ((y0, x1), (T::one() - ly) * lx),
                ((y1, x0), ly * (T::one() - lx)),
                ((y1, x1), ly * lx),
            ];
            let g = &dy[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
            for ((sy, sx), wt) in weights {
                let d = &mut dx[(sy * in_w + sx) * c..(sy * in_w + sx + 1) * c];
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv += wt * gv;
                }
            }
        }
    }
    dx
}

/// Cross-entropy output: mean loss, row softmax, and the number of rows
/// that counted.
pub struct CrossEntropy<T> {
    pub loss: T,
    pub probs: Vec<T>,
    pub counted: usize,
}

/// Mean of `-log softmax(logits)[target]` over rows whose target is not
/// `ignore_index`. With no counted rows the loss is zero.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    ignore_index: usize,
) -> Result<CrossEntropy<T>> {
    let (rows, classes) = logits.dims2()?;
    if targets.len() != rows {
        return Err(Error::dim(format!(
            "{} targets for logits of shape {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    let src = logits.data();
    let mut probs = vec![T::zero(); src.len()];
    let mut total = T::zero();
    let mut counted = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t != ignore_index && t >= classes {
            return Err(Error::data(format!(
                "target {t} at row {r} is outside 0..{classes}"
            )));
        }
        let row = &src[r * classes..(r + 1) * classes];
        let out = &mut probs[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        out.iter_mut().for_each(|o| *o /= sum);
        if t != ignore_index {
            // log-softmax from the logits directly for accuracy
            total += sum.ln() + max - row[t];
            counted += 1;
        }
    }
    let loss = if counted == 0 {
        T::zero()
    } else {
        total / T::from_count(counted)
    };
    Ok(CrossEntropy { loss, probs, counted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = Tensor::zeros([m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let a = t64(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        assert_eq!(matmul(&a, &Tensor::zeros([2, 2])).unwrap(), Tensor::zeros([2, 2]));
        let b = t64(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros([2, 3]), &Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("dimension"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (m, k, n) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        }
    }

    #[test]
    fn transposed_gemms_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[5, 4], &mut rng);
        let mut nt = vec![0.0; 15];
        gemm_nt(a.data(), b.data(), &mut nt, 3, 4, 5);
        let expect = naive_matmul(&a, &transpose(&b).unwrap());
        assert!(Tensor::new([3, 5], nt).unwrap().max_abs_diff(&expect) < 1e-12);

        let c = random(&[3, 2], &mut rng);
        let mut tn = vec![0.0; 8];
        gemm_tn(a.data(), c.data(), &mut tn, 4, 3, 2);
        let expect = naive_matmul(&transpose(&a).unwrap(), &c);
        assert!(Tensor::new([4, 2], tn).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t64(&[3], &[0., 0., 0.]), 0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&t64(&[2], &[1000., 1000.]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t64(&[2], &[0., 3f64.ln()]), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_on_inner_axis() {
        let x = t64(&[2, 2], &[0., 3f64.ln(), 0., 0.]);
        let s = softmax(&x, 0).unwrap();
        // columns: [0, 0] and [ln 3, 0]
        assert!((s.at(&[0, 0]) - 0.5).abs() < 1e-15);
        assert!((s.at(&[0, 1]) - 0.75).abs() < 1e-15);
        assert!((s.at(&[1, 1]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let x = t64(&[1, 4], &[5., 0., 0., -3.]);
        let s = masked_softmax(&x, &[false, true, true, false]).unwrap();
        assert_eq!(s.data(), &[0.0, 0.5, 0.5, 0.0]);
        assert!(masked_softmax(&x, &[false; 4]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let one = t64(&[3], &[1., 1., 1.]);
        let zero = t64(&[3], &[0., 0., 0.]);
        let y = layer_norm(&t64(&[3], &[4., 4., 4.]), &one, &zero, 0).unwrap();
        assert_eq!(y.data(), &[0., 0., 0.]);

        let (g2, b2) = (t64(&[2], &[1., 1.]), t64(&[2], &[0., 0.]));
        let y = layer_norm(&t64(&[2], &[-1., 1.]), &g2, &b2, 0).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6 && (y.data()[1] - 1.0).abs() < 1e-6);

        let y = layer_norm(&t64(&[3], &[1., 2., 3.]), &one, &zero, 0).unwrap();
        // (x - 2) / sqrt(2/3)
        let expect = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-5);
        assert!(y.data()[1].abs() < 1e-12);
        assert!((y.data()[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_rejects_mismatched_affine() {
        let x = Tensor::<f64>::zeros([2, 3]);
        assert!(layer_norm(&x, &Tensor::zeros([2]), &Tensor::zeros([3]), 1).is_err());
    }

    #[test]
    fn gelu_examples() {
        let y = gelu(&t64(&[4], &[0., 1., 20., -20.]));
        assert_eq!(y.data()[0], 0.0);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let expect = 0.5 * (1.0 + (GELU_K * 1.044715f64).tanh());
        assert!((y.data()[1] - expect).abs() < 1e-15);
        assert!((y.data()[1] - 0.8412).abs() < 1e-4);
        assert!((y.data()[2] - 20.0).abs() < 1e-9);
        assert!(y.data()[3].abs() < 1e-9);
    }

    fn naive_depthwise(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (h, w, c) = x.dims3().unwrap();
        let mut out = Tensor::zeros([h, w, c]);
        for y in 0..h as i64 {
            for xx in 0..w as i64 {
                for ch in 0..c {
                    let mut s = b.data()[ch];
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (sy, sx) = (y + ky - 1, xx + kx - 1);
                            if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                                s += k.at(&[ky as usize, kx as usize, ch])
                                    * x.at(&[sy as usize, sx as usize, ch]);
                            }
                        }
                    }
                    out.set(&[y as usize, xx as usize, ch], s);
                }
            }
        }
        out
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[4, 5, 2], &mut rng);
        let mut k = Tensor::zeros([3, 3, 2]);
        k.set(&[1, 1, 0], 1.0);
        k.set(&[1, 1, 1], 1.0);
        let y = depthwise_conv3x3(&x, &k, &Tensor::zeros([2])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_counts_interior_neighbors() {
        let x = Tensor::<f64>::full([3, 3, 1], 1.0);
        let k = Tensor::full([3, 3, 1], 1.0);
        let y = depthwise_conv3x3(&x, &k, &t64(&[1], &[0.5])).unwrap();
        assert_eq!(y.at(&[1, 1, 0]), 9.5);
        assert_eq!(y.at(&[0, 0, 0]), 4.5);
    }

    #[test]
    fn depthwise_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[5, 5, 1], &mut rng);
        let k = random(&[3, 3, 1], &mut rng);
        let b = random(&[1], &mut rng);
        let got = depthwise_conv3x3(&x, &k, &b).unwrap();
        assert!(got.max_abs_diff(&naive_depthwise(&x, &k, &b)) < 1e-6);
        for _ in 0..10 {
            let (h, w, c) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
            let x = random(&[h, w, c], &mut rng);
            let k = random(&[3, 3, c], &mut rng);
            let b = random(&[c], &mut rng);
            let got = depthwise_conv3x3(&x.cast::<f32>(), &k.cast(), &b.cast()).unwrap();
            assert!(got.cast::<f64>().max_abs_diff(&naive_depthwise(&x, &k, &b)) < 1e-5);
        }
    }

    #[test]
    fn depthwise_rejects_wrong_kernel_extent() {
        let x = Tensor::<f64>::zeros([4, 4, 2]);
        let err = depthwise_conv3x3(&x, &Tensor::zeros([5, 5, 2]), &Tensor::zeros([2])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn pointwise_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 4, 5], &mut rng);
        let y = pointwise_conv1x1(&x, &Tensor::eye(5), &Tensor::zeros([5])).unwrap();
        assert_eq!(y, x);

        let y = pointwise_conv1x1(&x, &Tensor::full([5, 1], 1.0), &Tensor::zeros([1])).unwrap();
        for p in 0..12 {
            let s: f64 = x.data()[p * 5..p * 5 + 5].iter().sum();
            assert!((y.data()[p] - s).abs() < 1e-12);
        }

        let w = random(&[5, 7], &mut rng);
        let b = random(&[7], &mut rng);
        let y = pointwise_conv1x1(&x, &w, &b).unwrap();
        let mut flat = naive_matmul(&x.clone().reshape([12, 5]).unwrap(), &w);
        for r in 0..12 {
            for c in 0..7 {
                flat.set(&[r, c], flat.at(&[r, c]) + b.data()[c]);
            }
        }
        assert!(y.reshape([12, 7]).unwrap().max_abs_diff(&flat) < 1e-6);
        assert!(pointwise_conv1x1(&x, &Tensor::zeros([4, 2]), &Tensor::zeros([2])).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[3, 5, 2], &mut rng);
        assert_eq!(bilinear_upsample(&x, 3, 5).unwrap(), x);
        let c = Tensor::<f64>::full([2, 3, 1], 0.7);
        let y = bilinear_upsample(&c, 7, 11).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn bilinear_two_by_two_to_four_by_four() {
        let x = t64(&[2, 2, 1], &[0., 1., 2., 3.]);
        let y = bilinear_upsample(&x, 4, 4).unwrap();
        // f(r, c) = 2 r + c bilinearly, with half-pixel source coords clamped to [0, 1]
        let coord = |o: usize| (((o as f64) + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
        for oy in 0..4 {
            for ox in 0..4 {
                let expect = 2.0 * coord(oy) + coord(ox);
                assert!((y.at(&[oy, ox, 0]) - expect).abs() < 1e-12);
            }
        }
        assert_eq!(y.at(&[0, 0, 0]), 0.0);
        assert_eq!(y.at(&[3, 3, 0]), 3.0);
        assert!((y.at(&[1, 1, 0]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::<f64>::zeros([3, 7]);
        let ce = cross_entropy(&uniform, &[0, 3, 6], IGNORE_INDEX).unwrap();
        assert!((ce.loss - 7f64.ln()).abs() < 1e-12);

        let margin = t64(&[1, 2], &[0., 60.]);
        assert!(cross_entropy(&margin, &[1], IGNORE_INDEX).unwrap().loss < 1e-20);

        let ce = cross_entropy(&t64(&[1, 2], &[1., 0.]), &[1], IGNORE_INDEX).unwrap();
        let expect = -(1.0 / (1f64.exp() + 1.0)).ln();
        assert!((ce.loss - expect).abs() < 1e-12);
        assert!((ce.loss - 1.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_ignore_and_range() {
        let x = Tensor::<f64>::zeros([2, 3]);
        let ce = cross_entropy(&x, &[IGNORE_INDEX, IGNORE_INDEX], IGNORE_INDEX).unwrap();
        assert_eq!((ce.loss, ce.counted), (0.0, 0));
        assert!(matches!(cross_entropy(&x, &[3, 0], IGNORE_INDEX), Err(Error::Data(_))));
    }
}
