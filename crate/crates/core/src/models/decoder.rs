use ndarray::{Array2, ArrayView2};

/// Maps clean diffusion states to samples.
pub trait Decoder {
    fn decode(&self, z: ArrayView2<f64>) -> Array2<f64>;

    /// Vector-Jacobian product: gradient w.r.t. `z` given the gradient
    /// w.r.t. `decode(z)`.
    fn vjp(&self, z: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> Array2<f64>;
}

/// Diffusion runs directly in data space.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDecoder;

impl Decoder for IdentityDecoder {
    fn decode(&self, z: ArrayView2<f64>) -> Array2<f64> {
        z.to_owned()
    }

    fn vjp(&self, _z: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> Array2<f64> {
        grad_out.to_owned()
    }
}
