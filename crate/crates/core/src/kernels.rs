//! Raw numeric kernels shared by the graph ops.

/// Logit offset applied to masked softmax entries before exponentiation.
pub const MASK_OFFSET: f64 = -1e9;

/// Strided matrix view: `(data, row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rowmajor(data: &'a [f64], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows × cols` matrix, without copying.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View { data, rs: 1, cs: cols }
    }

    fn extent(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `c = beta·c + a·b` with `a: m×k`, `b: k×n`, `c: m×n` row-major with stride `rsc`.
pub fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, c: &mut [f64], rsc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.data.len() >= a.extent(m, k), "gemm: lhs out of bounds");
    assert!(b.data.len() >= b.extent(k, n), "gemm: rhs out of bounds");
    assert!(rsc >= n && c.len() >= (m - 1) * rsc + n, "gemm: output out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * rsc..i * rsc + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the borrowed slices; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Masked softmax of one row into `out`. `allowed(j)` marks unmasked entries.
///
/// Masked logits are offset by [`MASK_OFFSET`] before exponentiation and
/// their residual mass is then zeroed, so masked outputs are exactly 0.
/// Returns `false` when every entry is masked.
pub fn softmax_row(x: &[f64], out: &mut [f64], allowed: impl Fn(usize) -> bool) -> bool {
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        let ok = allowed(j);
        any |= ok;
        *o = if ok { v } else { v + MASK_OFFSET };
        if ok {
            max = max.max(v);
        }
    }
    if !any {
        return false;
    }
    let mut sum = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        if allowed(j) {
            *o = (*o - max).exp();
            sum += *o;
        } else {
            *o = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    true
}

/// Row-wise backward of softmax: `dx_j = p_j (dy_j − Σ_k p_k dy_k)`.
pub fn softmax_row_backward(p: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = p.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((d, &pj), &g) in dx.iter_mut().zip(p).zip(dy) {
        *d += pj * (g - dot);
    }
}
