//! Central finite differences, used as an independent oracle for the
//! reverse-mode gradients.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient of `f` with respect to every entry of every
/// tensor in `inputs`.
pub fn finite_difference<S: Scalar>(
    inputs: &[Tensor<S>],
    step: f64,
    mut f: impl FnMut(&[Tensor<S>]) -> f64,
) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let h = S::from_f64_lossy(step);
    let mut out = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[ti].numel());
        for i in 0..inputs[ti].numel() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let up = f(&work);
            work[ti].data_mut()[i] = orig - h;
            let down = f(&work);
            work[ti].data_mut()[i] = orig;
            // divide by the perturbation actually representable in S
            let span = ((orig + h) - (orig - h)).to_f64_lossy();
            g.push((up - down) / span);
        }
        out.push(g);
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

pub fn to_f64<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}
