//! Tape-based reverse-mode automatic differentiation over a closed op
//! vocabulary.
//!
//! All differentiable computation in this crate is expressed as a sequence of
//! ops recorded on a [`Tape`]. Values are dense 2-D `f64` tensors
//! ([`Tensor`] = `ndarray::Array2<f64>`); images are stored row-major as
//! `[h*w, channels]`, vectors as `[1, n]`, scalars as `[1, 1]`.
//!
//! The vocabulary is closed on purpose: every op carries its own exact
//! backward rule, and the finite-difference checker in [`gradcheck`] is the
//! oracle that keeps them honest.

mod adam;
mod gradcheck;
pub(crate) mod ops;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{check_gradients, GradCheckReport, DEFAULT_ABS_TOL, DEFAULT_REL_TOL};
pub use ops::{CameraRaysData, CompositeAux};
pub use tape::{OpKind, Tape, Tensor, Var};

/// Convenience: build a `[1, n]` row tensor from a slice.
pub fn row(values: &[f64]) -> Tensor {
    Tensor::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

/// Place every named tensor on the tape as a trainable leaf.
pub fn leaf_map(
    tape: &mut Tape,
    params: &std::collections::BTreeMap<String, Tensor>,
) -> std::collections::BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
        .collect()
}

/// Place every named tensor on the tape as a frozen constant (no gradients).
pub fn constant_map(
    tape: &mut Tape,
    params: &std::collections::BTreeMap<String, Tensor>,
) -> std::collections::BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
        .collect()
}

/// Convenience: build a `[1, 1]` scalar tensor.
pub fn scalar(value: f64) -> Tensor {
    Tensor::from_elem((1, 1), value)
}
