//! Dense matrix kernels backing the convolution layers.
//!
//! Three variants cover every product the network needs:
//!
//! * [`matmul_acc`]   — `C += A * B`
//! * [`matmul_nt`]    — `C += A * B^T` (used for weight gradients)
//! * [`transpose`]    — out-of-place transpose (for the small weight matrices)
//!
//! All matrices are row-major `f32` slices. The kernels are written as plain
//! safe loops that the compiler can auto-vectorize; on x86-64 the same body is
//! additionally compiled with AVX2+FMA enabled and selected at runtime, which
//! is where most of the training throughput comes from on a single core.

/// `c[m x n] += a[m x k] * b[k x n]`, all row-major.
pub fn matmul_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        {
            // Safety: the required CPU features were just detected.
            unsafe { matmul_acc_avx2(c, a, b, m, k, n) };
            return;
        }
    }
    matmul_acc_body(c, a, b, m, k, n);
}

/// `c[m x n] += a[m x k] * b[n x k]^T`, all row-major.
///
/// `b` is stored untransposed, so row `j` of `b` is column `j` of the
/// mathematical right operand. This matches the weight-gradient product
/// `dW = dY * cols^T` without materializing the transpose.
pub fn matmul_nt(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        {
            // Safety: the required CPU features were just detected.
            unsafe { matmul_nt_avx2(c, a, b, m, k, n) };
            return;
        }
    }
    matmul_nt_body(c, a, b, m, k, n);
}

/// Writes the transpose of the row-major `rows x cols` matrix `a` into `out`.
pub fn transpose(out: &mut [f32], a: &[f32], rows: usize, cols: usize) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_acc_avx2(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    matmul_acc_body(c, a, b, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_nt_avx2(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    matmul_nt_body(c, a, b, m, k, n);
}

/// i-k-j loop order: the inner loop is a pure axpy over contiguous rows of
/// `b` and `c`, which vectorizes cleanly.
#[inline(always)]
fn matmul_acc_body(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_il * bv;
            }
        }
    }
}

#[inline(always)]
fn matmul_nt_body(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *cv += dot(a_row, b_row);
        }
    }
}

/// Dot product with eight independent accumulators so the reduction can use
/// vector registers despite f32 addition being non-associative.
#[inline(always)]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 8;
    let chunks = a.len() / LANES;
    let mut acc = [0.0f32; LANES];
    for ch in 0..chunks {
        let ao = &a[ch * LANES..ch * LANES + LANES];
        let bo = &b[ch * LANES..ch * LANES + LANES];
        for u in 0..LANES {
            acc[u] += ao[u] * bo[u];
        }
    }
    let mut sum = ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]));
    for i in chunks * LANES..a.len() {
        sum += a[i] * b[i];
    }
    sum
}
