//! Central finite differences for verifying analytic gradients.
//!
//! Only forward evaluations are used here, so the numbers produced are independent
//! of the backward rules they are compared against.

use crate::{Params, Tensor};

/// Relative error with an absolute floor: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Numeric gradient of `f` with respect to every entry of `x`.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape(), out)
}

/// Numeric gradient of `f` with respect to every parameter in `params`.
pub fn numeric_param_gradients(f: impl Fn(&Params) -> f64, params: &Params, step: f64) -> Params {
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    let mut out = Params::new();
    for name in names {
        let len = params.get(&name).map(Tensor::len).unwrap_or(0);
        let mut g = Vec::with_capacity(len);
        for i in 0..len {
            let orig = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let plus = f(&probe);
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let minus = f(&probe);
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            g.push((plus - minus) / (2.0 * step));
        }
        out.insert(name.clone(), Tensor::new(params.get(&name).unwrap().shape(), g));
    }
    out
}

/// Largest entry-wise relative error between two gradient sets, with the name and
/// flat index where it occurs.
pub fn max_relative_error(analytic: &Params, numeric: &Params, floor: f64) -> (f64, String, usize) {
    let mut worst = (0.0, String::new(), 0);
    for (name, n) in numeric.iter() {
        let zeros;
        let a = match analytic.get(name) {
            Some(a) => a,
            None => {
                zeros = Tensor::zeros(n.shape());
                &zeros
            }
        };
        for (i, (x, y)) in a.data().iter().zip(n.data()).enumerate() {
            let e = relative_error(*x, *y, floor);
            if e > worst.0 {
                worst = (e, name.clone(), i);
            }
        }
    }
    worst
}
