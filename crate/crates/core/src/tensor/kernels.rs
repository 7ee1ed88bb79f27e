// Plain row-major matrix kernels. Every output element accumulates its
// inner-dimension products in ascending index order, so results do not depend
// on how many matrices are processed together.

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `da[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            da[i * k + p] += s;
        }
    }
}

/// `db[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dv, gv) in dbrow.iter_mut().zip(grow) {
                *dv += aip * gv;
            }
        }
    }
}

/// Transposes the trailing two axes of a batch of `[rows, cols]` matrices.
pub(crate) fn transpose_last2(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let off = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[off + c * rows + r] = x[off + r * cols + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, b);
    }

    #[test]
    fn transpose_roundtrip() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let t = transpose_last2(&x, 2, 2, 3);
        assert_eq!(t[..6], [0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(transpose_last2(&t, 2, 3, 2), x);
    }
}
