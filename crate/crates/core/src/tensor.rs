//! Dense row-major `f64` tensors and the differentiable primitives the
//! encoder is assembled from.
//!
//! Every primitive comes as a forward/backward pair. Backward functions
//! return freshly allocated gradients; the encoder sums them into its
//! parameter buffers in a fixed order so results never depend on threading.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Zero tensor. Panics on an empty shape or a zero extent.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&s| s > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("non-positive extent in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Extent of the leading axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading-axis entry.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `C = A·B + beta·C` for row-major `C` (m×n). `A` is m×k, or k×m when
/// `a_trans`; `B` is k×n, or n×k when `b_trans`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the assert above guarantees every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (borrow rules).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// `softmax(logits) - onehot(target)`
    pub grad: Vec<f64>,
}

pub fn cross_entropy(logits: &[f64], target: usize) -> Result<CrossEntropy> {
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target {target} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut grad: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = grad.iter().sum();
    // sum >= 1, so log_sum_exp >= max >= logits[target] and the loss is never negative.
    let log_sum_exp = max + sum.ln();
    let loss = log_sum_exp - logits[target];
    grad.iter_mut().for_each(|p| *p /= sum);
    grad[target] -= 1.0;
    Ok(CrossEntropy { loss, grad })
}

/// Row-wise cross-entropy over an N×k logit matrix. Returns the summed loss
/// and `dlogits` scaled by `scale` (pass `1/N` for a mean loss).
pub fn cross_entropy_batch(
    logits: &Tensor,
    targets: &[usize],
    scale: f64,
) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let mut dlogits = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let ce = cross_entropy(logits.row(i), t)?;
        total += ce.loss;
        for (d, g) in dlogits.row_mut(i).iter_mut().zip(&ce.grad) {
            *d = g * scale;
        }
    }
    Ok((total, dlogits))
}

// ---------------------------------------------------------------------------
// affine

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

/// `y = x·w + b` with `x`: N×in, `w`: in×out, `b`: out.
pub fn affine_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, din) = matrix_dims(x, "affine input")?;
    let (win, dout) = matrix_dims(w, "affine weight")?;
    if win != din {
        return Err(Error::Shape(format!(
            "affine input width {din} vs weight rows {win}"
        )));
    }
    let mut y = Tensor::zeros(&[n, dout]);
    if let Some(b) = b {
        if b.len() != dout {
            return Err(Error::Shape(format!("affine bias {} vs {dout}", b.len())));
        }
        for i in 0..n {
            y.row_mut(i).copy_from_slice(b.data());
        }
        gemm(
            n,
            din,
            dout,
            x.data(),
            false,
            w.data(),
            false,
            1.0,
            y.data_mut(),
        );
    } else {
        gemm(
            n,
            din,
            dout,
            x.data(),
            false,
            w.data(),
            false,
            0.0,
            y.data_mut(),
        );
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn affine_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<AffineGrads> {
    let (n, din) = matrix_dims(x, "affine input")?;
    let (_, dout) = matrix_dims(w, "affine weight")?;
    if dy.shape() != [n, dout] {
        return Err(Error::Shape(format!(
            "affine upstream gradient {:?}, expected [{n}, {dout}]",
            dy.shape()
        )));
    }
    let mut dx = Tensor::zeros(&[n, din]);
    gemm(
        n,
        dout,
        din,
        dy.data(),
        false,
        w.data(),
        true,
        0.0,
        dx.data_mut(),
    );
    let mut dw = Tensor::zeros(&[din, dout]);
    gemm(
        din,
        n,
        dout,
        x.data(),
        true,
        dy.data(),
        false,
        0.0,
        dw.data_mut(),
    );
    let mut db = Tensor::zeros(&[dout]);
    for i in 0..n {
        for (acc, g) in db.data_mut().iter_mut().zip(dy.row(i)) {
            *acc += g;
        }
    }
    Ok(AffineGrads { dx, dw, db })
}

// ---------------------------------------------------------------------------
// relu

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient of ReLU given its forward output `y`.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(Error::Shape(format!(
            "relu output {:?} vs gradient {:?}",
            y.shape(),
            dy.shape()
        )));
    }
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, zero padding 1

fn image_dims(x: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(Error::Shape(format!("{what} must be N×C×H×W, got {s:?}"))),
    }
}

/// Unfold one C×H×W image into a (C·9)×(H·W) patch matrix.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = 0.0;
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto an image.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, img: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

fn conv_weight_dims(weight: &Tensor, cin: usize) -> Result<usize> {
    match weight.shape() {
        [cout, wc, 3, 3] if *wc == cin => Ok(*cout),
        s => Err(Error::Shape(format!(
            "conv weight {s:?} does not match {cin} input channels"
        ))),
    }
}

/// `x`: N×Cin×H×W, `weight`: Cout×Cin×3×3, `bias`: Cout.
pub fn conv3x3_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, cin, h, w) = image_dims(x, "conv input")?;
    let cout = conv_weight_dims(weight, cin)?;
    if bias.len() != cout {
        return Err(Error::Shape(format!("conv bias {} vs {cout}", bias.len())));
    }
    let hw = h * w;
    let mut cols = vec![0.0; cin * 9 * hw];
    let mut y = Tensor::zeros(&[n, cout, h, w]);
    for i in 0..n {
        im2col(x.row(i), cin, h, w, &mut cols);
        let out = y.row_mut(i);
        for (co, &b) in bias.data().iter().enumerate() {
            out[co * hw..(co + 1) * hw].fill(b);
        }
        gemm(
            cout,
            cin * 9,
            hw,
            weight.data(),
            false,
            &cols,
            false,
            1.0,
            out,
        );
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub dx: Tensor,
    pub dweight: Tensor,
    pub dbias: Tensor,
}

pub fn conv3x3_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<ConvGrads> {
    let (n, cin, h, w) = image_dims(x, "conv input")?;
    let cout = conv_weight_dims(weight, cin)?;
    if dy.shape() != [n, cout, h, w] {
        return Err(Error::Shape(format!(
            "conv upstream gradient {:?}, expected [{n}, {cout}, {h}, {w}]",
            dy.shape()
        )));
    }
    let hw = h * w;
    let k9 = cin * 9;
    let mut cols = vec![0.0; k9 * hw];
    let mut dcols = vec![0.0; k9 * hw];
    let mut dx = Tensor::zeros(&[n, cin, h, w]);
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = Tensor::zeros(&[cout]);
    for i in 0..n {
        let g = dy.row(i);
        im2col(x.row(i), cin, h, w, &mut cols);
        gemm(cout, hw, k9, g, false, &cols, true, 1.0, dweight.data_mut());
        for (co, db) in dbias.data_mut().iter_mut().enumerate() {
            *db += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
        }
        gemm(k9, cout, hw, weight.data(), true, g, false, 0.0, &mut dcols);
        col2im(&dcols, cin, h, w, dx.row_mut(i));
    }
    Ok(ConvGrads { dx, dweight, dbias })
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2 (odd trailing row/column dropped)

/// Winning input offset (within its C×H×W image) for every pooled output.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    winners: Vec<u32>,
}

impl PoolIndices {
    /// Order-sensitive hash of the winners; changes whenever a pooling
    /// decision flips.
    pub fn fingerprint(&self) -> u64 {
        self.winners.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &w| {
            (h ^ u64::from(w)).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let (n, c, h, w) = image_dims(x, "pool input")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("cannot pool {h}×{w} below 1×1")));
    }
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut winners = Vec::with_capacity(n * c * oh * ow);
    for i in 0..n {
        let img = x.row(i);
        let out = y.row_mut(i);
        let mut o = 0;
        for ci in 0..c {
            let base = ci * h * w;
            for py in 0..oh {
                for px in 0..ow {
                    let mut best = base + 2 * py * w + 2 * px;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * py + dy) * w + 2 * px + dx;
                        if img[idx] > img[best] {
                            best = idx;
                        }
                    }
                    out[o] = img[best];
                    winners.push(best as u32);
                    o += 1;
                }
            }
        }
    }
    Ok((
        y,
        PoolIndices {
            input_shape: x.shape().to_vec(),
            winners,
        },
    ))
}

pub fn maxpool2_backward(indices: &PoolIndices, dy: &Tensor) -> Result<Tensor> {
    if dy.len() != indices.winners.len() {
        return Err(Error::Shape(format!(
            "pool gradient has {} values for {} pooled outputs",
            dy.len(),
            indices.winners.len()
        )));
    }
    let mut dx = Tensor::zeros(&indices.input_shape);
    let n = indices.input_shape[0];
    let per_out = dy.len() / n;
    for i in 0..n {
        let g = &dy.data()[i * per_out..(i + 1) * per_out];
        let win = &indices.winners[i * per_out..(i + 1) * per_out];
        let dst = dx.row_mut(i);
        for (&wi, &gv) in win.iter().zip(g) {
            dst[wi as usize] += gv;
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn softmax_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        for c in [-50.0, 0.0, 3.7, 200.0] {
            let p = softmax(&[c, c + LN2]).unwrap();
            assert!((p[0] - 1.0 / 3.0).abs() < 1e-12, "{p:?}");
            assert!((p[1] - 2.0 / 3.0).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn softmax_no_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let k = 7;
        let ce = cross_entropy(&vec![0.0; k], 3).unwrap();
        assert!((ce.loss - (k as f64).ln()).abs() < 1e-12);

        let ce = cross_entropy(&[40.0, -40.0], 0).unwrap();
        assert!(ce.loss >= 0.0 && ce.loss < 1e-30);

        // softmax([0, ln 3]) = [1/4, 3/4]
        let ce = cross_entropy(&[0.0, 3f64.ln()], 0).unwrap();
        let direct = -(0.25f64).ln();
        assert!((ce.loss - direct).abs() < 1e-12);
        assert!((ce.loss - 4f64.ln()).abs() < 1e-12);
        assert!((ce.grad[0] - (0.25 - 1.0)).abs() < 1e-12);
        assert!((ce.grad[1] - 0.75).abs() < 1e-12);

        assert!(matches!(
            cross_entropy(&[0.0, 1.0], 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0; 5]), 0);
    }

    #[test]
    fn affine_matches_naive() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let w = Tensor::from_vec(&[3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        let y = affine_forward(&x, &w, Some(&b)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = b.data()[j];
                for k in 0..3 {
                    acc += x.row(i)[k] * w.data()[k * 2 + j];
                }
                assert!((y.row(i)[j] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv_matches_naive() {
        let (n, cin, cout, h, w) = (2, 2, 3, 5, 4);
        let x: Vec<f64> = (0..n * cin * h * w)
            .map(|i| ((i * 37) % 11) as f64 / 7.0 - 0.6)
            .collect();
        let wt: Vec<f64> = (0..cout * cin * 9)
            .map(|i| ((i * 13) % 7) as f64 / 5.0 - 0.5)
            .collect();
        let x = Tensor::from_vec(&[n, cin, h, w], x).unwrap();
        let wt = Tensor::from_vec(&[cout, cin, 3, 3], wt).unwrap();
        let b = Tensor::from_vec(&[cout], vec![0.1, -0.2, 0.3]).unwrap();
        let y = conv3x3_forward(&x, &wt, &b).unwrap();
        for i in 0..n {
            for co in 0..cout {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = yy as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += wt.data()[((co * cin + ci) * 3 + ky) * 3 + kx]
                                        * x.row(i)[(ci * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        let got = y.row(i)[(co * h + yy) * w + xx];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_picks_first_max() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let (y, idx) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[1.0]);
        let dx =
            maxpool2_backward(&idx, &Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[2.0, 0.0, 0.0, 0.0]);
        assert!(maxpool2_forward(&Tensor::zeros(&[1, 1, 1, 4])).is_err());
    }

    #[test]
    fn relu_masks_gradient() {
        let x = Tensor::from_vec(&[4], vec![-1.0, 0.0, 2.0, 3.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0, 3.0]);
        let dx = relu_backward(&y, &Tensor::from_vec(&[4], vec![1.0; 4]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn from_vec_rejects_bad_shapes() {
        assert!(Tensor::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::from_vec(&[0, 2], vec![]).is_err());
    }
}
