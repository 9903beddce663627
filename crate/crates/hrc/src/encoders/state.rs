//! Robot proprioception encoder: a two-layer MLP.

use crate::encoders::text::ensure_param;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, NodeId, ParamStore, Tensor};

pub struct StateEncoder {
    prefix: String,
    in_width: usize,
    hidden: usize,
    out_width: usize,
}

impl StateEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_width: usize,
        out_width: usize,
    ) -> Result<Self> {
        let hidden = out_width;
        let enc = StateEncoder { prefix: prefix.to_string(), in_width, hidden, out_width };
        ensure_param(
            store,
            &format!("{prefix}.w1"),
            &[in_width, hidden],
            Init::XavierUniform { fan_in: in_width, fan_out: hidden },
        )?;
        ensure_param(store, &format!("{prefix}.b1"), &[hidden], Init::Zeros)?;
        ensure_param(
            store,
            &format!("{prefix}.w2"),
            &[hidden, out_width],
            Init::XavierUniform { fan_in: hidden, fan_out: out_width },
        )?;
        ensure_param(store, &format!("{prefix}.b2"), &[out_width], Init::Zeros)?;
        Ok(enc)
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, proprio: &[f64]) -> Result<NodeId> {
        if proprio.len() != self.in_width {
            return Err(Error::Dimension(format!(
                "state width {} does not match configured {}",
                proprio.len(),
                self.in_width
            )));
        }
        if proprio.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite proprioception".into()));
        }
        let x = g.constant(Tensor::row(proprio));
        let w1 = g.param(store, &format!("{}.w1", self.prefix))?;
        let b1 = g.param(store, &format!("{}.b1", self.prefix))?;
        let w2 = g.param(store, &format!("{}.w2", self.prefix))?;
        let b2 = g.param(store, &format!("{}.b2", self.prefix))?;
        let h = g.linear(x, w1, b1)?;
        let h = g.gelu(h);
        let out = g.linear(h, w2, b2)?;
        g.reshape(out, &[self.out_width])
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::Init as PInit;

    #[test]
    fn zero_weights_zero_state_zero_token() {
        let mut store = ParamStore::new(0);
        let enc = StateEncoder::new(&mut store, "se", 5, 8).unwrap();
        // Freshly zero the weights to expose linearity at zero.
        for name in ["se.w1", "se.w2"] {
            let shape = store.get(name).unwrap().shape().to_vec();
            store.set(name, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let t = enc.encode(&mut g, &store, &[0.0; 5]).unwrap();
        assert!(g.value(t).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn every_coordinate_matters() {
        let mut store = ParamStore::new(3);
        let enc = StateEncoder::new(&mut store, "se", 5, 8).unwrap();
        let base = [0.1, -0.2, 0.3, 0.0, 0.5];
        let mut g = Graph::new();
        let t0 = enc.encode(&mut g, &store, &base).unwrap();
        let v0 = g.value(t0).data().to_vec();
        for i in 0..5 {
            let mut p = base;
            p[i] += 0.05;
            let mut g2 = Graph::new();
            let t = enc.encode(&mut g2, &store, &p).unwrap();
            assert_ne!(g2.value(t).data(), v0.as_slice(), "coord {i} ignored");
        }
    }

    #[test]
    fn width_mismatch_and_non_finite_rejected() {
        let mut store = ParamStore::new(1);
        let enc = StateEncoder::new(&mut store, "se", 5, 8).unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            enc.encode(&mut g, &store, &[0.0; 4]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            enc.encode(&mut g, &store, &[0.0, 0.0, f64::NAN, 0.0, 0.0]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn gradient_check_through_encoder() {
        use crate::numerics::grad_check;
        use rand::SeedableRng;
        let mut store = ParamStore::new(9);
        let enc = StateEncoder::new(&mut store, "se", 3, 4).unwrap();
        // Make gradients generically nonzero.
        let _ = PInit::Zeros;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let report = grad_check(&mut store, &mut rng, 6, |g, s| {
            let t = enc.encode(g, s, &[0.4, -0.7, 1.2])?;
            let sq = g.mul(t, t)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
