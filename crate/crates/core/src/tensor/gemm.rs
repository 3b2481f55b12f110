use super::Real;

/// Strided view of a logical matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(cols: usize) -> Self {
        View { rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        View {
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = beta * c + a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Slices must be long enough for the extents and strides given; this is
/// checked before handing raw pointers to the kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    av: View,
    b: &[Real],
    bv: View,
    beta: Real,
    c: &mut [Real],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, v: View| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * v.rs + (cols - 1) * v.cs + 1
        }
    };
    assert!(a.len() >= span(m, k, av), "gemm: lhs buffer too small");
    assert!(b.len() >= span(k, n, bv), "gemm: rhs buffer too small");
    assert!(c.len() >= span(m, n, cv), "gemm: output buffer too small");
    // SAFETY: extents and strides were checked against the slice lengths
    // above, and `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operands() {
        // a = [[1,2],[3,4]] stored transposed, b = identity
        let a_t = [1.0, 3.0, 2.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = [0.0; 4];
        gemm(
            2,
            2,
            2,
            &a_t,
            View::row_major(2).t(),
            &b,
            View::row_major(2),
            0.0,
            &mut c,
            View::row_major(2),
        );
        assert_eq!(c, [1.0, 2.0, 3.0, 4.0]);
    }
}
