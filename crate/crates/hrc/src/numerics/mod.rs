//! Differentiable dense-array computation substrate.
//!
//! 64-bit floats throughout; reverse-mode gradients via a recorded
//! operation tape ([`graph::Graph`]). Single-threaded within one graph;
//! separate graphs and stores are independent.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{Adam, Init, ParamStore};
pub use tensor::Tensor;

/// Sinusoidal positional encoding table `[len, width]`.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for t in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let rate = 1.0 / 10000f64.powf(2.0 * pair / width as f64);
            let angle = t as f64 * rate;
            data[t * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(&[len, width], data).expect("table shape is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_distinguishes_steps() {
        let pe = positional_encoding(8, 16);
        let d = pe.data();
        // No two rows identical.
        for a in 0..8 {
            for b in (a + 1)..8 {
                assert_ne!(&d[a * 16..(a + 1) * 16], &d[b * 16..(b + 1) * 16]);
            }
        }
    }
}
