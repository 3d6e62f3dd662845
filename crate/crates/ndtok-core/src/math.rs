//! Scalar math via libm so the crate works without std and produces the same
//! bits on every platform.

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

pub fn round(x: f64) -> f64 {
    libm::round(x)
}

pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

pub fn hypot3(x: f64, y: f64, z: f64) -> f64 {
    sqrt(x * x + y * y + z * z)
}

/// ln(1 + e^x) without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(exp(-x))
    } else {
        libm::log1p(exp(x))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

pub const SQRT_2: f64 = core::f64::consts::SQRT_2;
pub const PI: f64 = core::f64::consts::PI;

/// Exact GELU: x · Φ(x) with the Gaussian CDF expressed through erf.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

/// d/dx gelu(x) = Φ(x) + x·φ(x).
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / SQRT_2));
    let pdf = exp(-0.5 * x * x) / sqrt(2.0 * PI);
    cdf + x * pdf
}
