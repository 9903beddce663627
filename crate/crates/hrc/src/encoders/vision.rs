//! View encoder: a small strided convolutional stack with
//! feature-wise linear modulation after every block, so image tokens
//! can condition on the instruction. One shared encoder serves all
//! camera views.

use crate::encoders::text::ensure_param;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, NodeId, ParamStore, Tensor};

pub const IMG_SIZE: usize = 32;
const BLOCK_CH: [usize; 3] = [8, 16, 32];

pub struct VisionEncoder {
    prefix: String,
    out_width: usize,
    cond_width: usize,
}

impl VisionEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cond_width: usize,
        out_width: usize,
    ) -> Result<Self> {
        let enc = VisionEncoder { prefix: prefix.to_string(), out_width, cond_width };
        let mut in_ch = 1;
        for (b, &out_ch) in BLOCK_CH.iter().enumerate() {
            ensure_param(
                store,
                &format!("{prefix}.conv{b}"),
                &[out_ch, in_ch, 3, 3],
                Init::XavierUniform { fan_in: in_ch * 9, fan_out: out_ch * 9 },
            )?;
            ensure_param(store, &format!("{prefix}.cb{b}"), &[out_ch], Init::Zeros)?;
            // FiLM generators start at identity: gamma = 1 + W·cond,
            // beta = W·cond with zero-initialized weights.
            ensure_param(store, &format!("{prefix}.gw{b}"), &[cond_width, out_ch], Init::Zeros)?;
            ensure_param(store, &format!("{prefix}.gb{b}"), &[out_ch], Init::Zeros)?;
            ensure_param(store, &format!("{prefix}.bw{b}"), &[cond_width, out_ch], Init::Zeros)?;
            ensure_param(store, &format!("{prefix}.bb{b}"), &[out_ch], Init::Zeros)?;
            in_ch = out_ch;
        }
        let spatial = IMG_SIZE / 8; // three stride-2 blocks
        let flat = BLOCK_CH[2] * spatial * spatial;
        ensure_param(
            store,
            &format!("{prefix}.proj"),
            &[flat, out_width],
            Init::XavierUniform { fan_in: flat, fan_out: out_width },
        )?;
        ensure_param(store, &format!("{prefix}.pb"), &[out_width], Init::Zeros)?;
        Ok(enc)
    }

    /// Encode one `[1, 32, 32]` view conditioned on an instruction
    /// embedding node of width `cond_width`.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Tensor,
        cond: NodeId,
    ) -> Result<NodeId> {
        self.forward(g, store, image, Some(cond))
    }

    /// Encoder without modulation; with zero-initialized FiLM
    /// generators `encode` must agree with this exactly.
    pub fn encode_unconditioned(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Tensor,
    ) -> Result<NodeId> {
        self.forward(g, store, image, None)
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Tensor,
        cond: Option<NodeId>,
    ) -> Result<NodeId> {
        if image.shape() != [1, IMG_SIZE, IMG_SIZE] {
            return Err(Error::Dimension(format!(
                "expected [1, {IMG_SIZE}, {IMG_SIZE}] view, got {:?}",
                image.shape()
            )));
        }
        image.ensure_finite("camera view")?;
        if let Some(c) = cond {
            if g.value(c).numel() != self.cond_width {
                return Err(Error::Dimension(format!(
                    "condition width {} != {}",
                    g.value(c).numel(),
                    self.cond_width
                )));
            }
        }
        let cond_row = match cond {
            Some(c) => Some(g.reshape(c, &[1, self.cond_width])?),
            None => None,
        };
        let mut h = g.constant(image.clone());
        for (b, &out_ch) in BLOCK_CH.iter().enumerate() {
            let kernel = g.param(store, &format!("{}.conv{b}", self.prefix))?;
            let cbias = g.param(store, &format!("{}.cb{b}", self.prefix))?;
            let conv = g.conv2d(h, kernel, 2, 1)?;
            let shape = g.value(conv).shape().to_vec();
            let hw = shape[1] * shape[2];
            let flat = g.reshape(conv, &[out_ch, hw])?;
            let mut act = g.shift_rows(flat, cbias)?;
            if let Some(cr) = cond_row {
                let gw = g.param(store, &format!("{}.gw{b}", self.prefix))?;
                let gb = g.param(store, &format!("{}.gb{b}", self.prefix))?;
                let bw = g.param(store, &format!("{}.bw{b}", self.prefix))?;
                let bb = g.param(store, &format!("{}.bb{b}", self.prefix))?;
                let gamma_lin = g.linear(cr, gw, gb)?;
                let gamma_lin = g.reshape(gamma_lin, &[out_ch])?;
                let gamma = g.add_scalar(gamma_lin, 1.0);
                let beta = g.linear(cr, bw, bb)?;
                let beta = g.reshape(beta, &[out_ch])?;
                act = g.scale_rows(act, gamma)?;
                act = g.shift_rows(act, beta)?;
            }
            let act = g.gelu(act);
            h = g.reshape(act, &[out_ch, shape[1], shape[2]])?;
        }
        let shape = g.value(h).shape().to_vec();
        let flat_len = shape.iter().product::<usize>();
        let flat = g.reshape(h, &[1, flat_len])?;
        let proj = g.param(store, &format!("{}.proj", self.prefix))?;
        let pb = g.param(store, &format!("{}.pb", self.prefix))?;
        let out = g.linear(flat, proj, pb)?;
        g.reshape(out, &[self.out_width])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(seed: f64) -> Tensor {
        let data: Vec<f64> = (0..IMG_SIZE * IMG_SIZE)
            .map(|i| 0.5 + 0.5 * ((i as f64 * 0.13 + seed).sin()))
            .collect();
        Tensor::from_vec(&[1, IMG_SIZE, IMG_SIZE], data).unwrap()
    }

    #[test]
    fn identity_modulation_equals_unconditioned() {
        // FiLM generators are zero-initialized, so gamma = 1, beta = 0.
        let mut store = ParamStore::new(3);
        let enc = VisionEncoder::new(&mut store, "vis", 8, 16).unwrap();
        let img = test_image(0.0);
        let cond_vals: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();

        let mut g = Graph::new();
        let cond = g.constant(Tensor::vector(&cond_vals));
        let with = enc.encode(&mut g, &store, &img, cond).unwrap();
        let without = enc.encode_unconditioned(&mut g, &store, &img).unwrap();
        for (a, b) in g.value(with).data().iter().zip(g.value(without).data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn different_instructions_different_tokens() {
        let mut store = ParamStore::new(5);
        let enc = VisionEncoder::new(&mut store, "vis", 8, 16).unwrap();
        // Random (nonzero) FiLM generators so conditioning is active.
        for b in 0..3 {
            for pref in ["gw", "bw"] {
                let name = format!("vis.{pref}{b}");
                let shape = store.get(&name).unwrap().shape().to_vec();
                let n: usize = shape.iter().product();
                let vals: Vec<f64> = (0..n).map(|i| ((i * 31 + b) as f64 * 0.7).sin() * 0.2).collect();
                store.set(&name, Tensor::from_vec(&shape, vals).unwrap()).unwrap();
            }
        }
        let img = test_image(1.0);
        let run = |cond_vals: &[f64]| {
            let mut g = Graph::new();
            let cond = g.constant(Tensor::vector(cond_vals));
            let t = enc.encode(&mut g, &store, &img, cond).unwrap();
            g.value(t).data().to_vec()
        };
        let a = run(&[0.5, -0.2, 0.1, 0.9, -1.0, 0.0, 0.3, 0.7]);
        let b = run(&[-0.5, 0.4, 0.0, 0.2, 0.8, -0.3, 0.1, -0.9]);
        assert_ne!(a, b);
    }

    #[test]
    fn wrong_image_size_rejected() {
        let mut store = ParamStore::new(6);
        let enc = VisionEncoder::new(&mut store, "vis", 8, 16).unwrap();
        let mut g = Graph::new();
        let cond = g.constant(Tensor::vector(&[0.0; 8]));
        let bad = Tensor::zeros(&[1, 16, 16]);
        assert!(matches!(
            enc.encode(&mut g, &store, &bad, cond),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gradient_check_through_film_path() {
        use crate::numerics::grad_check;
        use rand::SeedableRng;
        let mut store = ParamStore::new(8);
        let enc = VisionEncoder::new(&mut store, "vis", 4, 6).unwrap();
        // Non-trivial FiLM generators so their gradients are exercised.
        for b in 0..3 {
            for pref in ["gw", "bw"] {
                let name = format!("vis.{pref}{b}");
                let shape = store.get(&name).unwrap().shape().to_vec();
                let n: usize = shape.iter().product();
                let vals: Vec<f64> = (0..n).map(|i| ((i + b) as f64 * 0.9).cos() * 0.1).collect();
                store.set(&name, Tensor::from_vec(&shape, vals).unwrap()).unwrap();
            }
        }
        let img = test_image(2.0);
        let cond_vals = [0.4, -0.6, 1.0, 0.2];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let report = grad_check(&mut store, &mut rng, 2, |g, s| {
            let cond = g.constant(Tensor::vector(&cond_vals));
            let t = enc.encode(g, s, &img, cond)?;
            let sq = g.mul(t, t)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
