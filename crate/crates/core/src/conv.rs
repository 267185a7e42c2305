//! Stride-1 "same" convolution (cross-correlation, zero padding) and its adjoints.
//!
//! [`conv2d_forward_naive`] is the reference implementation. The default
//! [`conv2d_forward`] and the backward passes work row-wise so the inner loops
//! are contiguous multiply-adds over image rows.

use crate::error::{Error, Result};
use crate::tensor::{Kernel, Real, Tensor4};

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub kernel: Kernel<T>,
    pub bias: Vec<T>,
}

/// Padding placed before the first row/column. Even kernel sizes put the
/// extra padding after.
#[inline]
fn pad_before(size: usize) -> isize {
    ((size - 1) / 2) as isize
}

fn check_forward<T: Real>(input: &Tensor4<T>, kernel: &Kernel<T>, bias: &[T]) -> Result<()> {
    if input.channels() != kernel.k_in() {
        return Err(Error::Shape(format!(
            "input has {} channels but the kernel expects {}",
            input.channels(),
            kernel.k_in()
        )));
    }
    if bias.len() != kernel.k_out() {
        return Err(Error::Shape(format!(
            "bias has {} entries but the kernel has {} output channels",
            bias.len(),
            kernel.k_out()
        )));
    }
    Ok(())
}

fn check_backward<T: Real>(input: &Tensor4<T>, kernel: &Kernel<T>, grad_output: &Tensor4<T>) -> Result<()> {
    if input.channels() != kernel.k_in() {
        return Err(Error::Shape(format!(
            "input has {} channels but the kernel expects {}",
            input.channels(),
            kernel.k_in()
        )));
    }
    let [b, _, h, w] = input.shape();
    let expected = [b, kernel.k_out(), h, w];
    if grad_output.shape() != expected {
        return Err(Error::Shape(format!(
            "grad_output has shape {:?}, expected {expected:?}",
            grad_output.shape()
        )));
    }
    Ok(())
}

/// Valid [lo, hi) range of output coordinates for tap offset `d` along an axis of length `len`.
#[inline]
fn valid_range(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Direct nested-loop convolution.
pub fn conv2d_forward_naive<T: Real>(input: &Tensor4<T>, kernel: &Kernel<T>, bias: &[T]) -> Result<Tensor4<T>> {
    check_forward(input, kernel, bias)?;
    let [batch, c_in, h, w] = input.shape();
    let n = kernel.size();
    let pad = pad_before(n);
    let mut out = Tensor4::zeros([batch, kernel.k_out(), h, w]);
    for b in 0..batch {
        for co in 0..kernel.k_out() {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for ky in 0..n {
                            let iy = y as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..n {
                                let ix = x as isize + kx as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += kernel.get(co, ci, ky, kx) * input.get(b, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, co, y, x, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Row-wise convolution of one batch item.
pub(crate) fn forward_item<T: Real>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &Kernel<T>,
    bias: &[T],
    out: &mut [T],
) {
    let n = kernel.size();
    let pad = pad_before(n);
    let hw = h * w;
    let kd = kernel.data();
    for co in 0..kernel.k_out() {
        let out_c = &mut out[co * hw..(co + 1) * hw];
        out_c.fill(bias[co]);
        for ci in 0..c_in {
            let in_c = &input[ci * hw..(ci + 1) * hw];
            let taps = &kd[(co * c_in + ci) * n * n..(co * c_in + ci + 1) * n * n];
            for y in 0..h {
                let orow = &mut out_c[y * w..(y + 1) * w];
                for ky in 0..n {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &in_c[iy as usize * w..(iy as usize + 1) * w];
                    for kx in 0..n {
                        let wv = taps[ky * n + kx];
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(dx, w);
                        let src = &irow[(x0 as isize + dx) as usize..(x1 as isize + dx) as usize];
                        for (o, &i) in orow[x0..x1].iter_mut().zip(src) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution: `out[b, co] = bias[co] + Σ_ci in[b, ci] ⋆ kernel[co, ci]`.
pub fn conv2d_forward<T: Real>(input: &Tensor4<T>, kernel: &Kernel<T>, bias: &[T]) -> Result<Tensor4<T>> {
    check_forward(input, kernel, bias)?;
    let [batch, c_in, h, w] = input.shape();
    let mut out = Tensor4::zeros([batch, kernel.k_out(), h, w]);
    for b in 0..batch {
        forward_item(input.item(b), c_in, h, w, kernel, bias, out.item_mut(b));
    }
    Ok(out)
}

/// Dot product with eight interleaved accumulators combined in a fixed order.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Accumulates kernel and bias gradients of one batch item.
fn param_grads_item<T: Real>(
    input: &[T],
    grad_out: &[T],
    c_in: usize,
    k_out: usize,
    n: usize,
    h: usize,
    w: usize,
    grad_kernel: &mut [T],
    grad_bias: &mut [T],
) {
    let pad = pad_before(n);
    let hw = h * w;
    for co in 0..k_out {
        let g_c = &grad_out[co * hw..(co + 1) * hw];
        grad_bias[co] += g_c.iter().copied().sum::<T>();
        for ci in 0..c_in {
            let in_c = &input[ci * hw..(ci + 1) * hw];
            let taps = &mut grad_kernel[(co * c_in + ci) * n * n..(co * c_in + ci + 1) * n * n];
            for ky in 0..n {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..n {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let grow = &g_c[y * w + x0..y * w + x1];
                        let irow = &in_c[iy * w + (x0 as isize + dx) as usize..iy * w + (x1 as isize + dx) as usize];
                        acc += dot(grow, irow);
                    }
                    taps[ky * n + kx] += acc;
                }
            }
        }
    }
}

/// Accumulates the input gradient of one batch item.
fn input_grad_item<T: Real>(kernel: &Kernel<T>, grad_out: &[T], h: usize, w: usize, grad_in: &mut [T]) {
    let n = kernel.size();
    let c_in = kernel.k_in();
    let pad = pad_before(n);
    let hw = h * w;
    let kd = kernel.data();
    for ci in 0..c_in {
        let gi_c = &mut grad_in[ci * hw..(ci + 1) * hw];
        for co in 0..kernel.k_out() {
            let g_c = &grad_out[co * hw..(co + 1) * hw];
            let taps = &kd[(co * c_in + ci) * n * n..(co * c_in + ci + 1) * n * n];
            for ky in 0..n {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..n {
                    let wv = taps[ky * n + kx];
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, w);
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let grow = &g_c[y * w + x0..y * w + x1];
                        let dst = &mut gi_c[iy * w + (x0 as isize + dx) as usize..iy * w + (x1 as isize + dx) as usize];
                        for (d, &g) in dst.iter_mut().zip(grow) {
                            *d += wv * g;
                        }
                    }
                }
            }
        }
    }
}

/// Kernel and bias gradients only, for layers whose input needs no gradient.
pub fn conv2d_backward_params<T: Real>(
    input: &Tensor4<T>,
    kernel: &Kernel<T>,
    grad_output: &Tensor4<T>,
) -> Result<(Kernel<T>, Vec<T>)> {
    check_backward(input, kernel, grad_output)?;
    let [batch, c_in, h, w] = input.shape();
    let n = kernel.size();
    let mut grad_kernel = Kernel::zeros(kernel.k_out(), c_in, n);
    let mut grad_bias = vec![T::zero(); kernel.k_out()];
    for b in 0..batch {
        param_grads_item(
            input.item(b),
            grad_output.item(b),
            c_in,
            kernel.k_out(),
            n,
            h,
            w,
            grad_kernel.data_mut(),
            &mut grad_bias,
        );
    }
    Ok((grad_kernel, grad_bias))
}

/// Gradient with respect to the input only (the adjoint of the linear part).
pub fn conv2d_backward_input<T: Real>(kernel: &Kernel<T>, grad_output: &Tensor4<T>) -> Result<Tensor4<T>> {
    if grad_output.channels() != kernel.k_out() {
        return Err(Error::Shape(format!(
            "grad_output has {} channels but the kernel has {} outputs",
            grad_output.channels(),
            kernel.k_out()
        )));
    }
    let [batch, _, h, w] = grad_output.shape();
    let mut grad_in = Tensor4::zeros([batch, kernel.k_in(), h, w]);
    for b in 0..batch {
        input_grad_item(kernel, grad_output.item(b), h, w, grad_in.item_mut(b));
    }
    Ok(grad_in)
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    kernel: &Kernel<T>,
    grad_output: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let (grad_kernel, grad_bias) = conv2d_backward_params(input, kernel, grad_output)?;
    let grad_input = conv2d_backward_input(kernel, grad_output)?;
    Ok(ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_differences;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4<f64> {
        let len = shape.iter().product();
        Tensor4::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_kernel(rng: &mut ChaCha8Rng, k_out: usize, k_in: usize, n: usize) -> Kernel<f64> {
        let len = k_out * k_in * n * n;
        Kernel::new_any_size(k_out, k_in, n, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Independent oracle: explicitly zero-padded input, then a windowed sum.
    fn padded_oracle(input: &Tensor4<f64>, kernel: &Kernel<f64>, bias: &[f64]) -> Tensor4<f64> {
        let [b, c, h, w] = input.shape();
        let n = kernel.size();
        let p0 = (n - 1) / 2;
        let (ph, pw) = (h + n - 1, w + n - 1);
        let mut padded = vec![0.0; b * c * ph * pw];
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        padded[((bi * c + ci) * ph + y + p0) * pw + x + p0] = input.get(bi, ci, y, x);
                    }
                }
            }
        }
        let mut out = Tensor4::zeros([b, kernel.k_out(), h, w]);
        for bi in 0..b {
            for co in 0..kernel.k_out() {
                for y in 0..h {
                    for x in 0..w {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..n {
                                for kx in 0..n {
                                    s += kernel.get(co, ci, ky, kx)
                                        * padded[((bi * c + ci) * ph + y + ky) * pw + x + kx];
                                }
                            }
                        }
                        out.set(bi, co, y, x, s + bias[co]);
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], rel: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            let scale = x.abs().max(y.abs()).max(1e-12);
            assert!(
                (x - y).abs() / scale <= rel || (x - y).abs() < 1e-14,
                "index {i}: {x} vs {y}"
            );
        }
    }

    #[test]
    fn ones_center_sum_is_nine() {
        let input = Tensor4::filled([1, 1, 3, 3], 1.0f64);
        let kernel = Kernel::new(1, 1, 3, vec![1.0; 9]).unwrap();
        let out = conv2d_forward(&input, &kernel, &[0.0]).unwrap();
        assert_eq!(out.get(0, 0, 1, 1), 9.0);
        // corner sees a 2x2 window
        assert_eq!(out.get(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&mut rng, [2, 3, 6, 5]);
        let kernel = Kernel::identity(3, 3);
        let out = conv2d_forward(&input, &kernel, &[0.0; 3]).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn matches_padded_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_tensor(&mut rng, [1, 2, 5, 5]);
        let kernel = random_kernel(&mut rng, 3, 2, 3);
        let bias = [0.1, -0.2, 0.3];
        let oracle = padded_oracle(&input, &kernel, &bias);
        let naive = conv2d_forward_naive(&input, &kernel, &bias).unwrap();
        let fast = conv2d_forward(&input, &kernel, &bias).unwrap();
        assert_close(naive.data(), oracle.data(), 1e-12);
        assert_close(fast.data(), naive.data(), 1e-6);
    }

    #[test]
    fn fast_path_matches_naive_for_even_and_large_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 4, 5, 6] {
            let input = random_tensor(&mut rng, [2, 3, 7, 9]);
            let kernel = random_kernel(&mut rng, 2, 3, n);
            let naive = conv2d_forward_naive(&input, &kernel, &[0.5, -0.5]).unwrap();
            let fast = conv2d_forward(&input, &kernel, &[0.5, -0.5]).unwrap();
            let oracle = padded_oracle(&input, &kernel, &[0.5, -0.5]);
            assert_close(fast.data(), naive.data(), 1e-6);
            assert_close(naive.data(), oracle.data(), 1e-12);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let input = Tensor4::<f64>::zeros([1, 2, 4, 4]);
        let kernel = Kernel::zeros(1, 3, 3);
        assert!(matches!(conv2d_forward(&input, &kernel, &[0.0]), Err(Error::Shape(_))));
        assert!(matches!(
            conv2d_forward(&Tensor4::zeros([1, 3, 4, 4]), &kernel, &[0.0, 0.0]),
            Err(Error::Shape(_))
        ));
        let bad_grad = Tensor4::zeros([1, 2, 4, 4]);
        assert!(conv2d_backward(&Tensor4::zeros([1, 3, 4, 4]), &kernel, &bad_grad).is_err());
    }

    #[test]
    fn zero_grad_output_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_tensor(&mut rng, [2, 2, 4, 4]);
        let kernel = random_kernel(&mut rng, 3, 2, 3);
        let g = conv2d_backward(&input, &kernel, &Tensor4::zeros([2, 3, 4, 4])).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.kernel.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_adjoint_passes_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_tensor(&mut rng, [1, 2, 5, 4]);
        let gi = conv2d_backward_input(&Kernel::identity(2, 3), &g).unwrap();
        assert_eq!(gi, g);
    }

    #[test]
    fn kernel_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = random_tensor(&mut rng, [1, 1, 4, 4]);
        let kernel = random_kernel(&mut rng, 1, 1, 3);
        let weights = random_tensor(&mut rng, [1, 1, 4, 4]);
        // loss = <conv(x, k), weights>
        let loss = |k: &[f64]| {
            let kk = Kernel::new(1, 1, 3, k.to_vec()).unwrap();
            conv2d_forward(&input, &kk, &[0.0]).unwrap().dot(&weights).unwrap()
        };
        let g = conv2d_backward(&input, &kernel, &weights).unwrap();
        let fd = central_differences(loss, kernel.data(), 1e-4);
        for (a, n) in g.kernel.data().iter().zip(&fd) {
            assert!((a - n).abs() / (a.abs() + n.abs() + 1e-12) < 1e-5, "{a} vs {n}");
        }
    }

    #[test]
    fn input_and_bias_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor(&mut rng, [2, 2, 4, 3]);
        let kernel = random_kernel(&mut rng, 2, 2, 3);
        let weights = random_tensor(&mut rng, [2, 2, 4, 3]);
        let bias = [0.2, -0.1];
        let g = conv2d_backward(&input, &kernel, &weights).unwrap();
        let fd_in = central_differences(
            |x: &[f64]| {
                let t = Tensor4::from_vec(input.shape(), x.to_vec()).unwrap();
                conv2d_forward(&t, &kernel, &bias).unwrap().dot(&weights).unwrap()
            },
            input.data(),
            1e-4,
        );
        assert_close(g.input.data(), &fd_in, 1e-6);
        let fd_b = central_differences(
            |b: &[f64]| conv2d_forward(&input, &kernel, b).unwrap().dot(&weights).unwrap(),
            &bias,
            1e-4,
        );
        assert_close(&g.bias, &fd_b, 1e-6);
    }

    #[test]
    fn linearity_and_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let h = rng.random_range(1..7);
            let w = rng.random_range(1..7);
            let x = random_tensor(&mut rng, [2, 3, h, w]);
            let y = random_tensor(&mut rng, [2, 3, h, w]);
            let k = random_kernel(&mut rng, 4, 3, 3);
            let g = random_tensor(&mut rng, [2, 4, h, w]);
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let zero = [0.0; 4];

            let mut combo = x.scaled(a);
            combo.add_assign(&y.scaled(b)).unwrap();
            let lhs = conv2d_forward(&combo, &k, &zero).unwrap();
            let mut rhs = conv2d_forward(&x, &k, &zero).unwrap().scaled(a);
            rhs.add_assign(&conv2d_forward(&y, &k, &zero).unwrap().scaled(b))
                .unwrap();
            assert_close(lhs.data(), rhs.data(), 1e-10);

            let fwd = conv2d_forward(&x, &k, &zero).unwrap().dot(&g).unwrap();
            let adj = x.dot(&conv2d_backward_input(&k, &g).unwrap()).unwrap();
            assert!((fwd - adj).abs() <= 1e-10 * fwd.abs().max(adj.abs()).max(1.0));
        }
    }
}
