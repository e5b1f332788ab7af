use super::Scalar;

/// A strided matrix view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn dense(offset: usize, rows: usize, cols: usize) -> Self {
        Self {
            offset,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Row-major block with an explicit row stride.
    pub fn strided(offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        Self {
            offset,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn end(&self) -> usize {
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
    }
}

/// `c = a · b`, or `c += a · b` when `accumulate` is set.
pub(crate) fn gemm<T: Scalar>(a: &[T], av: View, b: &[T], bv: View, c: &mut [T], cv: View, accumulate: bool) {
    assert_eq!(av.cols, bv.rows, "gemm inner dims");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    assert!(av.end() <= a.len() && bv.end() <= b.len() && cv.end() <= c.len());
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds checked above; `c` is a unique borrow so it cannot alias.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_views() {
        // a = [[1,2,3],[4,5,6]], b = aᵀ
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0f64; 4];
        gemm(
            &a,
            View::dense(0, 2, 3),
            &a,
            View::dense(0, 2, 3).t(),
            &mut c,
            View::dense(0, 2, 2),
            false,
        );
        assert_eq!(c, [14.0, 32.0, 32.0, 77.0]);
        gemm(
            &a,
            View::dense(0, 2, 3),
            &a,
            View::dense(0, 2, 3).t(),
            &mut c,
            View::dense(0, 2, 2),
            true,
        );
        assert_eq!(c, [28.0, 64.0, 64.0, 154.0]);
    }
}
