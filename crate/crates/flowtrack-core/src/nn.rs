//! Thin layer helpers that pair parameter names with their application.

use crate::autodiff::{add_bias, conv2d, layer_norm, Var};
use crate::params::Binder;
use crate::real::Real;

pub const LN_EPS: f64 = 1e-6;

/// Dense layer on `(rows, in)` -> `(rows, out)`.
pub fn linear<'t, T: Real>(b: &Binder<'t, '_, T>, name: &str, x: Var<'t, T>) -> Var<'t, T> {
    let y = x.matmul(b.get(&format!("{name}.w")));
    add_bias(y, b.get(&format!("{name}.b")), 1)
}

/// Convolution layer on `(batch, cin, h, w)`.
pub fn conv<'t, T: Real>(
    b: &Binder<'t, '_, T>,
    name: &str,
    x: Var<'t, T>,
    stride: usize,
    pad: usize,
) -> Var<'t, T> {
    conv2d(
        x,
        b.get(&format!("{name}.w")),
        b.get(&format!("{name}.b")),
        stride,
        pad,
    )
}

/// Layer norm over the last axis.
pub fn lnorm<'t, T: Real>(b: &Binder<'t, '_, T>, name: &str, x: Var<'t, T>) -> Var<'t, T> {
    layer_norm(
        x,
        b.get(&format!("{name}.g")),
        b.get(&format!("{name}.b")),
        LN_EPS,
    )
}

/// Multi-head scaled dot-product self-attention over `batch` independent
/// sequences of length `seq`. `x` is `(batch*seq, c)`, batch-major.
pub fn self_attention<'t, T: Real>(
    b: &Binder<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Var<'t, T> {
    let c = x.shape()[1];
    let dh = c / heads;
    let split = |v: Var<'t, T>| {
        v.reshape(&[batch, seq, heads, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[batch * heads, seq, dh])
    };
    let q = split(linear(b, &format!("{prefix}.q"), x));
    let k = split(linear(b, &format!("{prefix}.k"), x));
    let v = split(linear(b, &format!("{prefix}.v"), x));
    let att = q
        .bmm(k.permute(&[0, 2, 1]))
        .scale(1.0 / (dh as f64).sqrt())
        .softmax_last();
    let o = att
        .bmm(v)
        .reshape(&[batch, heads, seq, dh])
        .permute(&[0, 2, 1, 3])
        .reshape(&[batch * seq, c]);
    linear(b, &format!("{prefix}.o"), o)
}
