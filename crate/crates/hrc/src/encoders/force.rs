//! Force/torque window encoding.
//!
//! Two interchangeable paths (config-selected):
//! * causal mode — stacked causal convolutions over the raw window,
//!   last-timestep features projected to the token width;
//! * spectrogram mode — per-channel magnitude short-time Fourier
//!   transform (window 32, hop 8, Hann) rendered as a 2-D map and passed
//!   through a small convolutional encoder.
//!
//! The spectrogram itself is a fixed transform of input data, so it is
//! computed outside the gradient tape; only the convolutional encoder
//! behind it carries parameters.

use crate::config::ForceEncoderKind;
use crate::encoders::text::ensure_param;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, NodeId, ParamStore, Tensor};

pub const FORCE_CHANNELS: usize = 6;
pub const STFT_WINDOW: usize = 32;
pub const STFT_HOP: usize = 8;
const STFT_BINS: usize = STFT_WINDOW / 2 + 1;
const CONV_CH: usize = 16;
const SPEC_CH: usize = 12;

/// A fixed-length window of 100 Hz force/torque samples, `[T_f, 6]`
/// (three force axes in N, three torque axes in N·m).
#[derive(Debug, Clone)]
pub struct ForceWindow {
    samples: Tensor,
}

impl ForceWindow {
    pub fn new(samples: Tensor) -> Result<Self> {
        if samples.shape().len() != 2 || samples.shape()[1] != FORCE_CHANNELS {
            return Err(Error::Dimension(format!(
                "force window must be [T, {FORCE_CHANNELS}], got {:?}",
                samples.shape()
            )));
        }
        samples.ensure_finite("force window")?;
        Ok(ForceWindow { samples })
    }

    /// Widen planar force vectors (d axes) into the 6-channel layout,
    /// zero-filling the unused force axes and all torque channels.
    pub fn from_planar(rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = vec![0.0; rows.len() * FORCE_CHANNELS];
        for (t, row) in rows.iter().enumerate() {
            if row.len() > 3 {
                return Err(Error::Dimension("more than 3 force axes".into()));
            }
            for (i, v) in row.iter().enumerate() {
                data[t * FORCE_CHANNELS + i] = *v;
            }
        }
        ForceWindow::new(Tensor::from_vec(&[rows.len(), FORCE_CHANNELS], data)?)
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }
}

/// Magnitude STFT of one channel: Hann window (periodic), direct DFT.
/// Returns `frames x bins` magnitudes; requires `signal.len() >= window`.
pub fn stft_magnitudes(signal: &[f64], window: usize, hop: usize) -> Vec<Vec<f64>> {
    assert!(window >= 2 && hop >= 1 && signal.len() >= window);
    let bins = window / 2 + 1;
    let hann: Vec<f64> = (0..window)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / window as f64).cos()))
        .collect();
    let n_frames = 1 + (signal.len() - window) / hop;
    let mut frames = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let seg: Vec<f64> = (0..window)
            .map(|n| signal[f * hop + n] * hann[n])
            .collect();
        let mut mags = Vec::with_capacity(bins);
        for k in 0..bins {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, s) in seg.iter().enumerate() {
                let phase = -2.0 * std::f64::consts::PI * k as f64 * n as f64 / window as f64;
                re += s * phase.cos();
                im += s * phase.sin();
            }
            mags.push((re * re + im * im).sqrt());
        }
        frames.push(mags);
    }
    frames
}

pub struct ForceEncoder {
    prefix: String,
    mode: ForceEncoderKind,
    window: usize,
    out_width: usize,
    input_scale: f64,
}

impl ForceEncoder {
    /// Receptive field of the causal stack (width-3 kernels at dilation
    /// 1 and 2): the last output step sees this many input steps.
    pub const RECEPTIVE_FIELD: usize = 7;

    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        mode: ForceEncoderKind,
        window: usize,
        out_width: usize,
        input_scale: f64,
    ) -> Result<Self> {
        let enc = ForceEncoder {
            prefix: prefix.to_string(),
            mode,
            window,
            out_width,
            input_scale,
        };
        match mode {
            ForceEncoderKind::CausalConv => {
                if window < Self::RECEPTIVE_FIELD {
                    return Err(Error::Dimension(format!(
                        "force window {window} below receptive field {}",
                        Self::RECEPTIVE_FIELD
                    )));
                }
                ensure_param(
                    store,
                    &format!("{prefix}.conv1"),
                    &[CONV_CH, FORCE_CHANNELS, 3],
                    Init::XavierUniform { fan_in: FORCE_CHANNELS * 3, fan_out: CONV_CH * 3 },
                )?;
                ensure_param(store, &format!("{prefix}.cb1"), &[CONV_CH], Init::Zeros)?;
                ensure_param(
                    store,
                    &format!("{prefix}.conv2"),
                    &[CONV_CH, CONV_CH, 3],
                    Init::XavierUniform { fan_in: CONV_CH * 3, fan_out: CONV_CH * 3 },
                )?;
                ensure_param(store, &format!("{prefix}.cb2"), &[CONV_CH], Init::Zeros)?;
                ensure_param(
                    store,
                    &format!("{prefix}.proj"),
                    &[CONV_CH, out_width],
                    Init::XavierUniform { fan_in: CONV_CH, fan_out: out_width },
                )?;
                ensure_param(store, &format!("{prefix}.pb"), &[out_width], Init::Zeros)?;
            }
            ForceEncoderKind::Spectrogram => {
                if window < STFT_WINDOW {
                    return Err(Error::Dimension(format!(
                        "force window {window} below the STFT window {STFT_WINDOW}"
                    )));
                }
                let frames = 1 + (window - STFT_WINDOW) / STFT_HOP;
                let oh = (STFT_BINS + 2 - 3) / 2 + 1;
                let ow = (frames + 2 - 3) / 2 + 1;
                ensure_param(
                    store,
                    &format!("{prefix}.sconv"),
                    &[SPEC_CH, FORCE_CHANNELS, 3, 3],
                    Init::XavierUniform {
                        fan_in: FORCE_CHANNELS * 9,
                        fan_out: SPEC_CH * 9,
                    },
                )?;
                ensure_param(store, &format!("{prefix}.sb"), &[SPEC_CH], Init::Zeros)?;
                ensure_param(
                    store,
                    &format!("{prefix}.proj"),
                    &[SPEC_CH * oh * ow, out_width],
                    Init::XavierUniform { fan_in: SPEC_CH * oh * ow, fan_out: out_width },
                )?;
                ensure_param(store, &format!("{prefix}.pb"), &[out_width], Init::Zeros)?;
            }
        }
        Ok(enc)
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, window: &ForceWindow) -> Result<NodeId> {
        if window.len() != self.window {
            return Err(Error::Dimension(format!(
                "force window length {} does not match configured {}",
                window.len(),
                self.window
            )));
        }
        let scaled = window.samples().map(|v| v * self.input_scale);
        match self.mode {
            ForceEncoderKind::CausalConv => self.encode_causal(g, store, scaled),
            ForceEncoderKind::Spectrogram => self.encode_spectrogram(g, store, scaled),
        }
    }

    fn encode_causal(&self, g: &mut Graph, store: &ParamStore, scaled: Tensor) -> Result<NodeId> {
        let x = g.constant(scaled);
        let k1 = g.param(store, &format!("{}.conv1", self.prefix))?;
        let b1 = g.param(store, &format!("{}.cb1", self.prefix))?;
        let k2 = g.param(store, &format!("{}.conv2", self.prefix))?;
        let b2 = g.param(store, &format!("{}.cb2", self.prefix))?;
        let proj = g.param(store, &format!("{}.proj", self.prefix))?;
        let pb = g.param(store, &format!("{}.pb", self.prefix))?;

        let h = g.causal_conv1d(x, k1, 1)?;
        let h = g.add_rowvec(h, b1)?;
        let h = g.gelu(h);
        let h = g.causal_conv1d(h, k2, 2)?;
        let h = g.add_rowvec(h, b2)?;
        let h = g.gelu(h);
        let last = g.row(h, self.window - 1)?;
        let last = g.reshape(last, &[1, CONV_CH])?;
        let out = g.linear(last, proj, pb)?;
        g.reshape(out, &[self.out_width])
    }

    fn encode_spectrogram(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scaled: Tensor,
    ) -> Result<NodeId> {
        let t_len = scaled.shape()[0];
        let frames = 1 + (t_len - STFT_WINDOW) / STFT_HOP;
        // Per-channel magnitude maps stacked as a [6, bins, frames] image.
        let mut img = vec![0.0; FORCE_CHANNELS * STFT_BINS * frames];
        for ch in 0..FORCE_CHANNELS {
            let signal: Vec<f64> = (0..t_len)
                .map(|t| scaled.data()[t * FORCE_CHANNELS + ch])
                .collect();
            let spec = stft_magnitudes(&signal, STFT_WINDOW, STFT_HOP);
            for (f, mags) in spec.iter().enumerate() {
                for (k, m) in mags.iter().enumerate() {
                    img[(ch * STFT_BINS + k) * frames + f] = *m;
                }
            }
        }
        let x = g.constant(Tensor::from_vec(&[FORCE_CHANNELS, STFT_BINS, frames], img)?);
        let kernel = g.param(store, &format!("{}.sconv", self.prefix))?;
        let bias = g.param(store, &format!("{}.sb", self.prefix))?;
        let proj = g.param(store, &format!("{}.proj", self.prefix))?;
        let pb = g.param(store, &format!("{}.pb", self.prefix))?;

        let h = g.conv2d(x, kernel, 2, 1)?;
        let shape = g.value(h).shape().to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let flat = g.reshape(h, &[c, hw])?;
        let flat = g.shift_rows(flat, bias)?;
        let act = g.gelu(flat);
        let row = g.reshape(act, &[1, c * hw])?;
        let out = g.linear(row, proj, pb)?;
        g.reshape(out, &[self.out_width])
    }

    /// Spectrogram of one channel of a window, for inspection/tests.
    pub fn channel_spectrogram(window: &ForceWindow, channel: usize) -> Vec<Vec<f64>> {
        let t_len = window.len();
        let signal: Vec<f64> = (0..t_len)
            .map(|t| window.samples().data()[t * FORCE_CHANNELS + channel])
            .collect();
        stft_magnitudes(&signal, STFT_WINDOW, STFT_HOP)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_from_channel0(signal: &[f64]) -> ForceWindow {
        let rows: Vec<Vec<f64>> = signal.iter().map(|&v| vec![v, 0.0]).collect();
        ForceWindow::from_planar(&rows).unwrap()
    }

    #[test]
    fn zero_window_follows_bias_path() {
        let mut store = ParamStore::new(2);
        let enc = ForceEncoder::new(
            &mut store,
            "fe",
            ForceEncoderKind::CausalConv,
            32,
            16,
            1.0,
        )
        .unwrap();
        let zero = window_from_channel0(&[0.0; 32]);
        let mut g = Graph::new();
        let t = enc.encode(&mut g, &store, &zero).unwrap();
        // With zero biases (default init), the bias path is all zeros.
        assert!(g.value(t).data().iter().all(|v| *v == 0.0));

        // A nonzero projection bias shifts the output exactly by itself.
        let pb = Tensor::vector(&(0..16).map(|i| i as f64 * 0.1).collect::<Vec<_>>());
        store.set("fe.pb", pb.clone()).unwrap();
        let mut g2 = Graph::new();
        let t2 = enc.encode(&mut g2, &store, &zero).unwrap();
        assert_eq!(g2.value(t2).data(), pb.data());
    }

    #[test]
    fn zero_window_zero_spectrogram() {
        let zero = window_from_channel0(&[0.0; 32]);
        for ch in 0..FORCE_CHANNELS {
            let spec = ForceEncoder::channel_spectrogram(&zero, ch);
            assert!(spec.iter().flatten().all(|m| *m == 0.0));
        }
    }

    #[test]
    fn sinusoid_energy_concentrates_in_its_bin() {
        // Independent check against a naive DFT of the Hann-windowed
        // segment, plus the concentration claim itself.
        for bin in [3usize, 7] {
            let signal: Vec<f64> = (0..32)
                .map(|t| (2.0 * std::f64::consts::PI * bin as f64 * t as f64 / 32.0).sin())
                .collect();
            let w = window_from_channel0(&signal);
            let spec = ForceEncoder::channel_spectrogram(&w, 0);
            assert_eq!(spec.len(), 1, "one frame for a 32-sample window");
            let mags = &spec[0];
            let peak = mags
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(peak, bin);
            let total: f64 = mags.iter().map(|m| m * m).sum();
            let local: f64 = mags[bin - 1..=bin + 1].iter().map(|m| m * m).sum();
            assert!(local / total > 0.99, "energy leaked outside bin {bin}");

            // Naive DFT oracle, written independently of stft_magnitudes.
            let hann: Vec<f64> = (0..32)
                .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / 32.0).cos())
                .collect();
            for k in 0..=16usize {
                let mut re = 0.0;
                let mut im = 0.0;
                for n in 0..32 {
                    let ang = 2.0 * std::f64::consts::PI * (k * n) as f64 / 32.0;
                    re += signal[n] * hann[n] * ang.cos();
                    im -= signal[n] * hann[n] * ang.sin();
                }
                let expect = (re * re + im * im).sqrt();
                assert!((mags[k] - expect).abs() < 1e-9, "bin {k}");
            }
        }
    }

    #[test]
    fn causal_mode_ignores_future_by_construction() {
        // The final-step features must be bit-identical no matter what a
        // hypothetical continuation holds: encode a 32-window, then the
        // same window with different *earlier* padding removed; instead
        // we check that two windows sharing the last RECEPTIVE_FIELD
        // steps of history differ only through that history.
        let mut store = ParamStore::new(4);
        let enc = ForceEncoder::new(
            &mut store,
            "fe",
            ForceEncoderKind::CausalConv,
            32,
            16,
            1.0,
        )
        .unwrap();
        let base: Vec<f64> = (0..32).map(|t| (t as f64 * 0.2).sin()).collect();
        let run = |sig: &[f64]| {
            let w = window_from_channel0(sig);
            let mut g = Graph::new();
            let t = enc.encode(&mut g, &store, &w).unwrap();
            g.value(t).data().to_vec()
        };
        let a = run(&base);
        // Perturb a sample deep in the past, outside the receptive field
        // of the last step: output unchanged.
        let mut far_past = base.clone();
        far_past[5] += 100.0;
        assert_eq!(a, run(&far_past));
        // Perturb the final sample: output changes.
        let mut last = base.clone();
        last[31] += 1.0;
        assert_ne!(a, run(&last));
    }

    #[test]
    fn short_window_rejected() {
        let mut store = ParamStore::new(5);
        assert!(ForceEncoder::new(
            &mut store,
            "fe",
            ForceEncoderKind::CausalConv,
            4,
            16,
            1.0
        )
        .is_err());
        let mut store2 = ParamStore::new(5);
        assert!(ForceEncoder::new(
            &mut store2,
            "fe",
            ForceEncoderKind::Spectrogram,
            16,
            16,
            1.0
        )
        .is_err());
    }

    #[test]
    fn spectrogram_mode_encodes_and_differentiates() {
        use crate::numerics::grad_check;
        use rand::SeedableRng;
        let mut store = ParamStore::new(6);
        let enc = ForceEncoder::new(
            &mut store,
            "fe",
            ForceEncoderKind::Spectrogram,
            32,
            8,
            1.0,
        )
        .unwrap();
        let signal: Vec<f64> = (0..32).map(|t| (t as f64 * 0.4).cos() * 2.0).collect();
        let w = window_from_channel0(&signal);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let report = grad_check(&mut store, &mut rng, 4, |g, s| {
            let t = enc.encode(g, s, &w)?;
            let sq = g.mul(t, t)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
