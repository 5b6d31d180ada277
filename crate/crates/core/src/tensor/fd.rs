use super::{Scalar, Tensor};

/// Central-difference gradient of a scalar function: `(f(x+h·e) − f(x−h·e)) / 2h` per element.
pub fn finite_difference_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: T,
) -> Tensor<T> {
    assert!(h > T::zero(), "finite-difference step must be positive");
    let mut probe = x.clone();
    let two_h = h + h;
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / two_h);
    }
    Tensor::new(x.shape(), grad).expect("same shape as x")
}

/// `max |a − b| / max(max |a|, max |b|)`: the worst elementwise deviation
/// relative to the tensor's gradient scale. Zero when both are all-zero.
pub fn max_relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative error needs equal shapes");
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        diff = diff.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
