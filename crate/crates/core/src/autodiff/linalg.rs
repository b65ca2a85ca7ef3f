use super::{Backward, BackwardCx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Strides, Tensor};

struct MatmulBackward {
    rows: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Backward<T> for MatmulBackward {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b, g) = (cx.inputs[0].data(), cx.inputs[1].data(), cx.grad);
        let (m, k, n) = (self.rows, self.k, self.n);
        let ga = cx.needs[0].then(|| {
            // dA = dY · Bᵀ
            let mut out = vec![T::zero(); m * k];
            gemm(m, n, k, g, Strides::row_major(n), b, Strides::transposed(n), T::zero(), &mut out, Strides::row_major(k));
            out
        });
        let gb = cx.needs[1].then(|| {
            // dB = Aᵀ · dY
            let mut out = vec![T::zero(); k * n];
            gemm(k, m, n, a, Strides::transposed(k), g, Strides::row_major(n), T::zero(), &mut out, Strides::row_major(n));
            out
        });
        vec![ga, gb]
    }
}

impl<T: Scalar> Graph<T> {
    /// `[..., M, K] × [K, N] → [..., M, N]`; leading axes of `a` are batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} × {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).numel() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        gemm(
            rows,
            k,
            n,
            self.value(a).data(),
            Strides::row_major(k),
            self.value(b).data(),
            Strides::row_major(n),
            T::zero(),
            &mut out,
            Strides::row_major(n),
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::from_vec(shape, out)?, &[a, b], MatmulBackward { rows, k, n })
    }

    /// `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}
