//! Shared math kernels. Both the autodiff tape and the no-grad inference
//! paths call into these, so a value computed either way goes through the
//! same floating-point operations in the same order.

use super::tensor::{Real, Tensor};

/// `a [m,k] · b [k,n]`.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    assert_eq!(a.shape.len(), 2, "matmul lhs must be 2-d");
    assert_eq!(b.shape.len(), 2, "matmul rhs must be 2-d");
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    assert_eq!(k, b.shape[0], "matmul inner extents differ: {k} vs {}", b.shape[0]);
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a [m,k] · bᵀ` with `b` stored as `[n,k]`.
pub fn matmul_nt<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    assert_eq!(k, b.shape[1], "matmul_nt inner extents differ");
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` with `a` stored as `[k,m]`, `b` as `[k,n]`.
pub fn matmul_tn<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (k, m) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    assert_eq!(k, b.shape[0], "matmul_tn inner extents differ");
    let mut out = vec![F::zero(); m * n];
    for kk in 0..k {
        let arow = &a.data[kk * m..(kk + 1) * m];
        let brow = &b.data[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

pub fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// GELU, tanh approximation.
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::fl(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = F::fl(0.044715);
    let half = F::fl(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::fl(0.797_884_560_802_865_4);
    let a = F::fl(0.044715);
    let half = F::fl(0.5);
    let three = F::fl(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// Softmax over the last axis, in place, max-subtracted for stability.
/// `-inf` entries get exactly zero mass.
pub fn softmax_rows_inplace<F: Real>(x: &mut [F], cols: usize) {
    for row in x.chunks_mut(cols) {
        let mut mx = F::neg_infinity();
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            let e = (*v - mx).exp();
            *v = e;
            sum = sum + e;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// RMS normalization over the last axis: `x / sqrt(mean(x^2)+eps) * gain`.
/// Returns the output and the per-row `1/sqrt(mean(x^2)+eps)` factors.
pub fn rms_norm<F: Real>(x: &Tensor<F>, gain: &[F], eps: F) -> (Tensor<F>, Vec<F>) {
    let d = x.last_dim();
    assert_eq!(d, gain.len(), "rms_norm gain extent {} does not match last extent {d}", gain.len());
    assert!(d >= 1, "rms_norm needs a non-empty trailing axis");
    let rows = x.rows();
    let mut out = vec![F::zero(); x.numel()];
    let mut inv = vec![F::zero(); rows];
    let dn = F::fl(d as f64);
    for r in 0..rows {
        let xr = &x.data[r * d..(r + 1) * d];
        let ms = dot(xr, xr) / dn;
        let s = F::one() / (ms + eps).sqrt();
        inv[r] = s;
        let orow = &mut out[r * d..(r + 1) * d];
        for ((o, &xv), &g) in orow.iter_mut().zip(xr).zip(gain) {
            *o = xv * s * g;
        }
    }
    (Tensor::new(x.shape.clone(), out), inv)
}

/// Rotary position embedding applied in place to `[S, heads*head_dim]`,
/// Llama half-split convention, absolute positions starting at `pos_offset`.
pub fn rope_inplace<F: Real>(x: &mut Tensor<F>, heads: usize, base: F, pos_offset: usize) {
    let s = x.shape[0];
    let width = x.shape[1];
    assert_eq!(width % heads, 0, "rope width not divisible by heads");
    let dh = width / heads;
    assert_eq!(dh % 2, 0, "rope head dim must be even");
    let half = dh / 2;
    for p in 0..s {
        let pos = F::fl((pos_offset + p) as f64);
        let row = &mut x.data[p * width..(p + 1) * width];
        for h in 0..heads {
            let hr = &mut row[h * dh..(h + 1) * dh];
            for i in 0..half {
                let exponent = F::fl(2.0 * i as f64 / dh as f64);
                let theta = pos / base.powf(exponent);
                let (sin, cos) = (theta.sin(), theta.cos());
                let a = hr[i];
                let b = hr[i + half];
                hr[i] = a * cos - b * sin;
                hr[i + half] = a * sin + b * cos;
            }
        }
    }
}

/// Inverse rotation of [`rope_inplace`]; used by the attention backward.
pub fn rope_inverse_inplace<F: Real>(x: &mut Tensor<F>, heads: usize, base: F, pos_offset: usize) {
    let s = x.shape[0];
    let width = x.shape[1];
    let dh = width / heads;
    let half = dh / 2;
    for p in 0..s {
        let pos = F::fl((pos_offset + p) as f64);
        let row = &mut x.data[p * width..(p + 1) * width];
        for h in 0..heads {
            let hr = &mut row[h * dh..(h + 1) * dh];
            for i in 0..half {
                let exponent = F::fl(2.0 * i as f64 / dh as f64);
                let theta = pos / base.powf(exponent);
                let (sin, cos) = (theta.sin(), theta.cos());
                let a = hr[i];
                let b = hr[i + half];
                hr[i] = a * cos + b * sin;
                hr[i + half] = -a * sin + b * cos;
            }
        }
    }
}

/// Full-sequence causal attention over pre-RoPE q/k/v of shape
/// `[S, heads*head_dim]`. Position `i` attends to positions `<= i` only;
/// masked keys are excluded from the softmax normalization entirely.
/// Returns `(out, probs [heads,S,S], q_roped, k_roped)`.
pub fn causal_attention<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    rope_base: F,
) -> (Tensor<F>, Tensor<F>, Tensor<F>, Tensor<F>) {
    assert_eq!(q.shape, k.shape, "attention q/k shapes differ");
    assert_eq!(q.shape, v.shape, "attention q/v shapes differ");
    let s = q.shape[0];
    let width = q.shape[1];
    let dh = width / heads;
    let mut qr = q.clone();
    let mut kr = k.clone();
    rope_inplace(&mut qr, heads, rope_base, 0);
    rope_inplace(&mut kr, heads, rope_base, 0);
    let scale = F::one() / F::fl(dh as f64).sqrt();
    let mut probs = vec![F::zero(); heads * s * s];
    let mut out = vec![F::zero(); s * width];
    for h in 0..heads {
        for i in 0..s {
            let qi = &qr.data[i * width + h * dh..i * width + (h + 1) * dh];
            let prow = &mut probs[h * s * s + i * s..h * s * s + (i + 1) * s];
            let mut mx = F::neg_infinity();
            for j in 0..=i {
                let kj = &kr.data[j * width + h * dh..j * width + (h + 1) * dh];
                let sc = dot(qi, kj) * scale;
                prow[j] = sc;
                if sc > mx {
                    mx = sc;
                }
            }
            let mut sum = F::zero();
            for p in prow.iter_mut().take(i + 1) {
                let e = (*p - mx).exp();
                *p = e;
                sum = sum + e;
            }
            for p in prow.iter_mut().take(i + 1) {
                *p = *p / sum;
            }
            let orow = &mut out[i * width + h * dh..i * width + (h + 1) * dh];
            for j in 0..=i {
                let a = prow[j];
                let vj = &v.data[j * width + h * dh..j * width + (h + 1) * dh];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o = *o + a * vv;
                }
            }
        }
    }
    (
        Tensor::new(q.shape.clone(), out),
        Tensor::new(vec![heads, s, s], probs),
        qr,
        kr,
    )
}

/// Incremental causal attention. `q/k/v` hold the new positions (pre-RoPE),
/// `k_cache`/`v_cache` hold RoPE'd keys and values for positions
/// `0..pos_offset` and are extended in place.
pub fn causal_attention_cached<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    rope_base: F,
    k_cache: &mut Vec<F>,
    v_cache: &mut Vec<F>,
    pos_offset: usize,
) -> Tensor<F> {
    let s_new = q.shape[0];
    let width = q.shape[1];
    let dh = width / heads;
    assert_eq!(k_cache.len(), pos_offset * width, "k cache length mismatch");
    let mut qr = q.clone();
    let mut kr = k.clone();
    rope_inplace(&mut qr, heads, rope_base, pos_offset);
    rope_inplace(&mut kr, heads, rope_base, pos_offset);
    k_cache.extend_from_slice(&kr.data);
    v_cache.extend_from_slice(&v.data);
    let scale = F::one() / F::fl(dh as f64).sqrt();
    let mut out = vec![F::zero(); s_new * width];
    let mut scores = vec![F::zero(); pos_offset + s_new];
    for h in 0..heads {
        for i in 0..s_new {
            let abs = pos_offset + i;
            let qi = &qr.data[i * width + h * dh..i * width + (h + 1) * dh];
            let mut mx = F::neg_infinity();
            for (j, sc) in scores.iter_mut().enumerate().take(abs + 1) {
                let kj = &k_cache[j * width + h * dh..j * width + (h + 1) * dh];
                *sc = dot(qi, kj) * scale;
                if *sc > mx {
                    mx = *sc;
                }
            }
            let mut sum = F::zero();
            for sc in scores.iter_mut().take(abs + 1) {
                let e = (*sc - mx).exp();
                *sc = e;
                sum = sum + e;
            }
            let orow = &mut out[i * width + h * dh..i * width + (h + 1) * dh];
            for (j, sc) in scores.iter().enumerate().take(abs + 1) {
                let a = *sc / sum;
                let vj = &v_cache[j * width + h * dh..j * width + (h + 1) * dh];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o = *o + a * vv;
                }
            }
        }
    }
    Tensor::new(vec![s_new, width], out)
}

/// Left-padded (causal) 1-d convolution. `x [T, c_in]`, `w [k, c_in, c_out]`,
/// `bias [c_out]`. Output step `t` reads input steps `<= t*stride`.
pub fn causal_conv1d<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: &[F],
    stride: usize,
) -> Tensor<F> {
    assert!(stride == 1 || stride == 2, "stride must be 1 or 2, got {stride}");
    let (t_in, c_in) = (x.shape[0], x.shape[1]);
    let (k, wc_in, c_out) = (w.shape[0], w.shape[1], w.shape[2]);
    assert_eq!(c_in, wc_in, "conv channel mismatch: input {c_in}, kernel {wc_in}");
    assert_eq!(bias.len(), c_out, "conv bias extent mismatch");
    let t_out = t_in.div_ceil(stride);
    let mut out = vec![F::zero(); t_out * c_out];
    for t in 0..t_out {
        let orow = &mut out[t * c_out..(t + 1) * c_out];
        orow.copy_from_slice(bias);
        for j in 0..k {
            let tap = t * stride + j;
            if tap < k - 1 {
                continue; // left zero padding
            }
            let t_src = tap - (k - 1);
            if t_src >= t_in {
                continue;
            }
            let xrow = &x.data[t_src * c_in..(t_src + 1) * c_in];
            for (ci, &xv) in xrow.iter().enumerate() {
                let wrow = &w.data[(j * c_in + ci) * c_out..(j * c_in + ci + 1) * c_out];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o = *o + xv * wv;
                }
            }
        }
    }
    Tensor::new(vec![t_out, c_out], out)
}

/// Nearest-neighbor temporal upsampling of `[T, c]` rows by `factor`.
pub fn upsample_rows<F: Real>(x: &Tensor<F>, factor: usize) -> Tensor<F> {
    let (t, c) = (x.shape[0], x.shape[1]);
    let mut out = Vec::with_capacity(t * factor * c);
    for r in 0..t {
        for _ in 0..factor {
            out.extend_from_slice(&x.data[r * c..(r + 1) * c]);
        }
    }
    Tensor::new(vec![t * factor, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Tensor<f64> = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let b: Tensor<f64> = Tensor::randn(vec![4, 5], 1.0, &mut rng);
        let c = matmul(&a, &b);
        // b stored transposed for nt
        let mut bt = Tensor::zeros(vec![5, 4]);
        for i in 0..4 {
            for j in 0..5 {
                bt.data[j * 4 + i] = b.data[i * 5 + j];
            }
        }
        let c_nt = matmul_nt(&a, &bt);
        assert!(c.max_abs_diff(&c_nt) < 1e-12);
        let mut at = Tensor::zeros(vec![4, 3]);
        for i in 0..3 {
            for j in 0..4 {
                at.data[j * 3 + i] = a.data[i * 4 + j];
            }
        }
        let c_tn = matmul_tn(&at, &b);
        assert!(c.max_abs_diff(&c_tn) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![0.3f32, -1.0, 2.0, 0.0, 0.0, 0.0];
        softmax_rows_inplace(&mut x, 3);
        for row in x.chunks(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_inverse_roundtrip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x: Tensor<f64> = Tensor::randn(vec![5, 16], 1.0, &mut rng);
        let mut y = x.clone();
        rope_inplace(&mut y, 2, 10000.0, 3);
        rope_inverse_inplace(&mut y, 2, 10000.0, 3);
        assert!(x.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        // k=1 identity kernel, stride 1
        let x = Tensor::new(vec![3, 2], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = causal_conv1d(&x, &w, &[0.0, 0.0], 1);
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv_is_causal_under_future_perturbation() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x: Tensor<f32> = Tensor::randn(vec![8, 3], 1.0, &mut rng);
        let w: Tensor<f32> = Tensor::randn(vec![3, 3, 4], 0.5, &mut rng);
        let b = vec![0.1f32, -0.2, 0.3, 0.0];
        for stride in [1usize, 2] {
            let y = causal_conv1d(&x, &w, &b, stride);
            let mut x2 = x.clone();
            // perturb the final frame
            for c in 0..3 {
                x2.data[7 * 3 + c] += 10.0;
            }
            let y2 = causal_conv1d(&x2, &w, &b, stride);
            // every output step t with t*stride < 7 must be bit-identical
            let t_keep = 7_usize.div_ceil(stride); // first affected output
            for t in 0..t_keep {
                for c in 0..4 {
                    assert_eq!(y.data[t * 4 + c], y2.data[t * 4 + c], "stride {stride} t {t}");
                }
            }
        }
    }

    #[test]
    fn single_position_attention_returns_value() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let q: Tensor<f32> = Tensor::randn(vec![1, 8], 1.0, &mut rng);
        let k: Tensor<f32> = Tensor::randn(vec![1, 8], 1.0, &mut rng);
        let v: Tensor<f32> = Tensor::randn(vec![1, 8], 1.0, &mut rng);
        let (out, _, _, _) = causal_attention(&q, &k, &v, 2, 10000.0);
        assert_eq!(out.data, v.data);
    }
}
