//! Deterministic `f64` tensors with a reverse-mode tape.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Central finite-difference gradient of a scalar function at `x`.
///
/// `f` receives a perturbed copy of the inputs; index `(which, elem)`
/// selects the coordinate to probe.
pub fn central_difference(
    f: &mut dyn FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    elem: usize,
    step: f64,
) -> f64 {
    let mut probe = inputs.to_vec();
    probe[which].data_mut()[elem] = inputs[which].data()[elem] + step;
    let up = f(&probe);
    probe[which].data_mut()[elem] = inputs[which].data()[elem] - step;
    let down = f(&probe);
    (up - down) / (2.0 * step)
}

/// Relative error used by gradient checks. Magnitudes below 1e-4 are
/// compared absolutely (scaled by 1e-4) so FD noise on near-zero
/// gradients does not dominate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

/// Builds the graph `build` on fresh leaves for `inputs`, runs backward and
/// compares every input coordinate against central differences.
/// Returns the worst relative error.
pub fn gradcheck(
    build: &dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
    inputs: &[Tensor],
    step: f64,
) -> crate::Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs).expect("gradcheck rebuild");
        t.value(l).item()
    };
    let mut worst = 0.0f64;
    for (w, v) in vars.iter().enumerate() {
        let g = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[w].shape()));
        for e in 0..inputs[w].len() {
            let numeric = central_difference(&mut eval, inputs, w, e, step);
            worst = worst.max(relative_error(g.data()[e], numeric));
        }
    }
    Ok(worst)
}
