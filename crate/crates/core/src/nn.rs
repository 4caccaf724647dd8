//! Parameterised layers expressed on the tape. Weights live in a
//! [`ParamStore`] under `<name>.w` / `<name>.b`.

use rand::Rng;

use crate::error::Result;
use crate::real::Real;
use crate::tensor::{ParamStore, Tape, Var};

pub fn init_linear<R: Real>(store: &mut ParamStore<R>, name: &str, inp: usize, out: usize, rng: &mut (impl Rng + ?Sized)) {
    store.init_xavier(&format!("{name}.w"), &[inp, out], inp, out, rng);
    store.init_const(&format!("{name}.b"), &[out], 0.0);
}

pub fn init_linear_zero<R: Real>(store: &mut ParamStore<R>, name: &str, inp: usize, out: usize) {
    store.init_const(&format!("{name}.w"), &[inp, out], 0.0);
    store.init_const(&format!("{name}.b"), &[out], 0.0);
}

/// `x · W + b` for `x: [rows × in]`.
pub fn linear<R: Real>(tape: &Tape<R>, store: &ParamStore<R>, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub fn init_conv<R: Real>(
    store: &mut ParamStore<R>,
    name: &str,
    c_out: usize,
    c_in: usize,
    width: usize,
    rng: &mut (impl Rng + ?Sized),
) {
    store.init_kaiming(&format!("{name}.w"), &[c_out, c_in, width], c_in * width, rng);
    store.init_const(&format!("{name}.b"), &[c_out], 0.0);
}

/// Biased 1D convolution over `segments` sequences laid out along columns.
#[allow(clippy::too_many_arguments)]
pub fn conv<R: Real>(
    tape: &Tape<R>,
    store: &ParamStore<R>,
    name: &str,
    x: Var,
    stride: usize,
    pad_left: usize,
    pad_right: usize,
    segments: usize,
) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    tape.conv1d_ext(x, w, Some(b), stride, pad_left, pad_right, segments)
}

pub fn init_layer_norm<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize) {
    store.init_const(&format!("{name}.g"), &[d], 1.0);
    store.init_const(&format!("{name}.b"), &[d], 0.0);
}

pub const LN_EPS: f64 = 1e-5;

pub fn layer_norm<R: Real>(tape: &Tape<R>, store: &ParamStore<R>, name: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{name}.g"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    tape.layer_norm(x, Some(g), Some(b), LN_EPS)
}
