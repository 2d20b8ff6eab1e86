//! Dense `f64` kernel with reverse-mode differentiation.

mod gradcheck;
mod params;
mod tape;
mod tensor;
mod topk;

pub use gradcheck::{grad_check, relative_error, GradReport, ABS_FLOOR};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Precision, Segment, Tape, Var};
pub use tensor::ParamTensor;
pub use topk::topk;

pub(crate) use tape::{matmul_raw, sigmoid, softmax_in_place};

/// Untaped matrix product, for reference paths and inference helpers.
pub fn matmul(a: &ParamTensor, b: &ParamTensor) -> crate::Result<ParamTensor> {
    let (r, k) = a.dims2();
    let (k2, c) = b.dims2();
    if k != k2 {
        return Err(crate::Error::shape("matmul", a.shape(), b.shape()));
    }
    ParamTensor::matrix(r, c, matmul_raw(a.data(), b.data(), r, k, c))
}

/// Untaped row softmax.
pub fn softmax_rows(x: &ParamTensor) -> ParamTensor {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = t.softmax_rows(v);
    t.value(y).clone()
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}
