//! GELU, tanh approximation.

use crate::scalar::Scalar;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const CUBIC: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(SQRT_2_OVER_PI) * (x + T::lit(CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + tanh(inner))
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    gelu_with_grad(x).1
}

/// `(gelu(x), gelu'(x))` sharing one transcendental evaluation.
#[inline]
pub fn gelu_with_grad<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit(SQRT_2_OVER_PI);
    let k = T::lit(CUBIC);
    let t = tanh(c * (x + k * x * x * x));
    let half = T::lit(0.5);
    let v = half * x * (T::one() + t);
    let d = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x);
    (v, d)
}

/// `tanh` through a single `exp`; several times cheaper than the libm call.
#[inline]
pub fn tanh<T: Scalar>(x: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * x).exp_fast() + T::one())
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp_fast())
    } else {
        let e = x.exp_fast();
        e / (T::one() + e)
    }
}
