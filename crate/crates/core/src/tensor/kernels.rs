// Matrix kernels. Every output element is accumulated over the inner index in
// increasing order, so results do not depend on anything but the inputs.

/// `C[p×r] = A[p×q] · B[q×r]`
pub(crate) fn gemm(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for i in 0..p {
        let crow = &mut c[i * r..(i + 1) * r];
        let arow = &a[i * q..(i + 1) * q];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * r..(k + 1) * r];
            for (cij, &bkj) in crow.iter_mut().zip(brow) {
                *cij += aik * bkj;
            }
        }
    }
    c
}

/// `C[p×r] = A[p×q] · B[r×q]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let brow = &b[j * q..(j + 1) * q];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * r + j] = acc;
        }
    }
    c
}

/// `C[p×r] = A[q×p]ᵀ · B[q×r]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for k in 0..q {
        let arow = &a[k * p..(k + 1) * p];
        let brow = &b[k * r..(k + 1) * r];
        for (i, &aki) in arow.iter().enumerate() {
            let crow = &mut c[i * r..(i + 1) * r];
            for (cij, &bkj) in crow.iter_mut().zip(brow) {
                *cij += aki * bkj;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn transpose(m: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = m[i * c + j];
            }
        }
        out
    }

    #[test]
    fn transposed_variants_agree_with_plain_gemm() {
        let a: Vec<f64> = (0..12).map(|v| f64::from(v) * 0.5 - 2.0).collect(); // 3×4
        let b: Vec<f64> = (0..8).map(|v| f64::from(v).sin()).collect(); // 4×2
        let c = gemm(&a, &b, 3, 4, 2);
        assert_eq!(gemm_nt(&a, &transpose(&b, 4, 2), 3, 4, 2), c);
        assert_eq!(gemm_tn(&transpose(&a, 3, 4), &b, 3, 4, 2), c);
    }
}
