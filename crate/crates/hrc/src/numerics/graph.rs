//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of a forward pass in execution
//! order. Since parents always precede children on the tape, a single
//! reverse sweep propagates vector-Jacobian products and accumulates
//! gradients for every node, including named parameter leaves.
//!
//! Graphs are single-threaded and rebuilt per forward pass; separate
//! graphs share no mutable state and may live on different threads.

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

pub type NodeId = usize;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
    param: Option<String>,
}

/// Gradients produced by one reverse sweep, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<NodeId>, backward: Option<BackwardFn>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, parents, backward, param: None });
        id
    }

    /// Leaf with no gradient flow of its own (inputs, masks, noise draws).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, vec![], None)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf bound to a named parameter; its value is snapshotted from the
    /// store at record time and its gradient can be written back with
    /// [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let value = store.get(name)?.clone();
        let id = self.push(value, vec![], None);
        self.nodes[id].param = Some(name.to_string());
        Ok(id)
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn require_same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape(a, b, "add")?;
        let value = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x + y);
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|g: &Tensor| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape(a, b, "sub")?;
        let value = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x - y);
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|g: &Tensor| vec![g.clone(), g.map(|v| -v)])),
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape(a, b, "mul")?;
        let av = self.nodes[a].value.clone();
        let bv = self.nodes[b].value.clone();
        let value = av.zip_map(&bv, |x, y| x * y);
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g: &Tensor| {
                vec![g.zip_map(&bv, |gv, y| gv * y), g.zip_map(&av, |gv, x| gv * x)]
            })),
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a].value.map(|v| v * c);
        self.push(value, vec![a], Some(Box::new(move |g: &Tensor| vec![g.map(|v| v * c)])))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a].value.map(|v| v + c);
        self.push(value, vec![a], Some(Box::new(|g: &Tensor| vec![g.clone()])))
    }

    /// Broadcast-add a `[C]` vector to every row of an `[R, C]` matrix.
    pub fn add_rowvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = (self.nodes[m].value.rows(), self.nodes[m].value.cols());
        if self.nodes[v].value.shape() != [c] {
            return Err(Error::Dimension(format!(
                "add_rowvec: vector shape {:?} does not match row width {c}",
                self.nodes[v].value.shape()
            )));
        }
        let mut out = self.nodes[m].value.clone().reshaped(&[r, c])?;
        {
            let vd = self.nodes[v].value.data();
            let od = out.data_mut();
            for i in 0..r {
                for j in 0..c {
                    od[i * c + j] += vd[j];
                }
            }
        }
        Ok(self.push(
            out,
            vec![m, v],
            Some(Box::new(move |g: &Tensor| {
                let gd = g.data();
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dv[j] += gd[i * c + j];
                    }
                }
                vec![
                    Tensor::from_vec(&[r, c], gd.to_vec()).unwrap(),
                    Tensor::vector(&dv),
                ]
            })),
        ))
    }

    /// Per-row scale of an `[R, C]` matrix by an `[R]` vector:
    /// `out[i, j] = m[i, j] * v[i]`.
    pub fn scale_rows(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = (self.nodes[m].value.rows(), self.nodes[m].value.cols());
        if self.nodes[v].value.shape() != [r] {
            return Err(Error::Dimension(format!(
                "scale_rows: vector shape {:?} does not match row count {r}",
                self.nodes[v].value.shape()
            )));
        }
        let mv = self.nodes[m].value.clone();
        let vv = self.nodes[v].value.clone();
        let mut out = mv.clone();
        {
            let od = out.data_mut();
            let vd = vv.data();
            for i in 0..r {
                for j in 0..c {
                    od[i * c + j] *= vd[i];
                }
            }
        }
        Ok(self.push(
            out.reshaped(&[r, c])?,
            vec![m, v],
            Some(Box::new(move |g: &Tensor| {
                let gd = g.data();
                let md = mv.data();
                let vd = vv.data();
                let mut dm = vec![0.0; r * c];
                let mut dv = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        dm[i * c + j] = gd[i * c + j] * vd[i];
                        dv[i] += gd[i * c + j] * md[i * c + j];
                    }
                }
                vec![Tensor::from_vec(&[r, c], dm).unwrap(), Tensor::vector(&dv)]
            })),
        ))
    }

    /// Per-row shift of an `[R, C]` matrix by an `[R]` vector.
    pub fn shift_rows(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = (self.nodes[m].value.rows(), self.nodes[m].value.cols());
        if self.nodes[v].value.shape() != [r] {
            return Err(Error::Dimension(format!(
                "shift_rows: vector shape {:?} does not match row count {r}",
                self.nodes[v].value.shape()
            )));
        }
        let mut out = self.nodes[m].value.clone().reshaped(&[r, c])?;
        {
            let vd = self.nodes[v].value.data();
            let od = out.data_mut();
            for i in 0..r {
                for j in 0..c {
                    od[i * c + j] += vd[i];
                }
            }
        }
        Ok(self.push(
            out,
            vec![m, v],
            Some(Box::new(move |g: &Tensor| {
                let gd = g.data();
                let mut dv = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        dv[i] += gd[i * c + j];
                    }
                }
                vec![Tensor::from_vec(&[r, c], gd.to_vec()).unwrap(), Tensor::vector(&dv)]
            })),
        ))
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = self.nodes[a].value.clone();
        let value = av.map(gelu_fwd);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![g.zip_map(&av, |gv, x| gv * gelu_grad(x))])),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(f64::tanh);
        let out = value.clone();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![g.zip_map(&out, |gv, t| gv * (1.0 - t * t))])),
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(|x| 1.0 / (1.0 + (-x).exp()));
        let out = value.clone();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                vec![g.zip_map(&out, |gv, s| gv * s * (1.0 - s))]
            })),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(f64::exp);
        let out = value.clone();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![g.zip_map(&out, |gv, e| gv * e)])),
        )
    }

    /// Elementwise clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let av = self.nodes[a].value.clone();
        let value = av.map(|x| x.clamp(lo, hi));
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                vec![g.zip_map(&av, |gv, x| if x > lo && x < hi { gv } else { 0.0 })]
            })),
        )
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.nodes[a].value.clone();
        let bv = self.nodes[b].value.clone();
        let value = av.matmul(&bv)?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g: &Tensor| {
                let da = g.matmul(&bv.transposed()).unwrap();
                let db = av.transposed().matmul(g).unwrap();
                vec![da, db]
            })),
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.transposed();
        self.push(value, vec![a], Some(Box::new(|g: &Tensor| vec![g.transposed()])))
    }

    /// Linear layer `x · w + b` for `x: [R, C]`, `w: [C, K]`, `b: [K]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_rowvec(xw, b)
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].value.shape().to_vec();
        let s: f64 = self.nodes[a].value.data().iter().sum();
        self.push(
            Tensor::scalar(s),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                vec![Tensor::filled(&shape, g.item())]
            })),
        )
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means of an `[R, C]` matrix, giving `[C]`.
    pub fn mean_over_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
        let d = self.nodes[a].value.data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += d[i * c + j];
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(
            Tensor::vector(&out),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let gd = g.data();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = gd[j] / r as f64;
                    }
                }
                vec![Tensor::from_vec(&[r, c], da).unwrap()]
            })),
        )
    }

    /// Mean squared error between two same-shaped tensors (scalar).
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Half the summed squared error, `0.5 * Σ (a - b)²` (scalar).
    pub fn half_sum_sq_err(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let s = self.sum(sq);
        Ok(self.scale(s, 0.5))
    }

    // ── Softmax / normalization ──────────────────────────────────────

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
        let keep = vec![true; r * c];
        self.masked_softmax_rows(a, &keep)
            .expect("unmasked softmax cannot be degenerate")
    }

    /// Row-wise softmax where `keep[i*C + j] == false` forces probability
    /// zero at `(i, j)`. Fails if any row keeps nothing.
    pub fn masked_softmax_rows(&mut self, a: NodeId, keep: &[bool]) -> Result<NodeId> {
        let (r, c) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
        if keep.len() != r * c {
            return Err(Error::Dimension(format!(
                "mask length {} does not match {r}x{c}",
                keep.len()
            )));
        }
        for i in 0..r {
            if !keep[i * c..(i + 1) * c].iter().any(|&k| k) {
                return Err(Error::DegenerateMask(format!(
                    "softmax row {i} forbids every position"
                )));
            }
        }
        let d = self.nodes[a].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let krow = &keep[i * c..(i + 1) * c];
            let m = row
                .iter()
                .zip(krow)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                if krow[j] {
                    let e = (row[j] - m).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let value = Tensor::from_vec(&[r, c], out)?;
        let sm = value.clone();
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let gd = g.data();
                let sd = sm.data();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += gd[i * c + j] * sd[i * c + j];
                    }
                    for j in 0..c {
                        da[i * c + j] = sd[i * c + j] * (gd[i * c + j] - dot);
                    }
                }
                vec![Tensor::from_vec(&[r, c], da).unwrap()]
            })),
        ))
    }

    /// Row-wise layer normalization with affine parameters:
    /// each row is standardized (population variance, stabilizer
    /// `eps = 1e-5`), then scaled by `gain` and shifted by `bias`.
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let (r, c) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
        if c < 2 {
            return Err(Error::Dimension(format!(
                "layer_norm needs last-axis size >= 2, got {c}"
            )));
        }
        if self.nodes[gain].value.shape() != [c] || self.nodes[bias].value.shape() != [c] {
            return Err(Error::Dimension("layer_norm affine params must be [C]".into()));
        }
        let xd = self.nodes[x].value.data().to_vec();
        let gd = self.nodes[gain].value.data().to_vec();
        let bd = self.nodes[bias].value.data().to_vec();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = gd[j] * h + bd[j];
            }
        }
        let value = Tensor::from_vec(&[r, c], out)?;
        Ok(self.push(
            value,
            vec![x, gain, bias],
            Some(Box::new(move |g: &Tensor| {
                let gr = g.data();
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        let dh = gr[i * c + j] * gd[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[i * c + j];
                        dgain[j] += gr[i * c + j] * xhat[i * c + j];
                        dbias[j] += gr[i * c + j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let dh = gr[i * c + j] * gd[j];
                        dx[i * c + j] =
                            inv_std[i] * (dh - mean_dh - xhat[i * c + j] * mean_dh_h);
                    }
                }
                vec![
                    Tensor::from_vec(&[r, c], dx).unwrap(),
                    Tensor::vector(&dgain),
                    Tensor::vector(&dbias),
                ]
            })),
        ))
    }

    // ── Shape manipulation ───────────────────────────────────────────

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let old = self.nodes[a].value.shape().to_vec();
        let value = self.nodes[a].value.clone().reshaped(shape)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                vec![g.clone().reshaped(&old).unwrap()]
            })),
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
        if start + len > c {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} out of width {c}",
                start + len
            )));
        }
        let d = self.nodes[a].value.data();
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&d[i * c + start..i * c + start + len]);
        }
        Ok(self.push(
            Tensor::from_vec(&[r, len], out)?,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let gd = g.data();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                vec![Tensor::from_vec(&[r, c], da).unwrap()]
            })),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let r = self.nodes[parts[0]].value.rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].value.cols()).collect();
        for &p in parts {
            if self.nodes[p].value.rows() != r {
                return Err(Error::Dimension("concat_cols row counts differ".into()));
            }
        }
        let c: usize = widths.iter().sum();
        let mut out = vec![0.0; r * c];
        let mut off = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let w = widths[idx];
            let d = self.nodes[p].value.data();
            for i in 0..r {
                out[i * c + off..i * c + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let widths_bk = widths.clone();
        Ok(self.push(
            Tensor::from_vec(&[r, c], out)?,
            parts.to_vec(),
            Some(Box::new(move |g: &Tensor| {
                let gd = g.data();
                let mut grads = Vec::with_capacity(widths_bk.len());
                let mut off = 0;
                for &w in &widths_bk {
                    let mut dp = vec![0.0; r * w];
                    for i in 0..r {
                        dp[i * w..(i + 1) * w].copy_from_slice(&gd[i * c + off..i * c + off + w]);
                    }
                    grads.push(Tensor::from_vec(&[r, w], dp).unwrap());
                    off += w;
                }
                grads
            })),
        ))
    }

    /// Stack `[C]` vectors into an `[R, C]` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Contract("stack_rows of nothing".into()));
        }
        let c = self.nodes[rows[0]].value.numel();
        for &rid in rows {
            if self.nodes[rid].value.numel() != c {
                return Err(Error::Dimension("stack_rows widths differ".into()));
            }
        }
        let r = rows.len();
        let mut out = Vec::with_capacity(r * c);
        for &rid in rows {
            out.extend_from_slice(self.nodes[rid].value.data());
        }
        Ok(self.push(
            Tensor::from_vec(&[r, c], out)?,
            rows.to_vec(),
            Some(Box::new(move |g: &Tensor| {
                let gd = g.data();
                (0..r)
                    .map(|i| Tensor::vector(&gd[i * c..(i + 1) * c]))
                    .collect()
            })),
        ))
    }

    /// Extract row `idx` of an `[R, C]` matrix as a `[C]` vector.
    pub fn row(&mut self, a: NodeId, idx: usize) -> Result<NodeId> {
        let (r, c) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
        if idx >= r {
            return Err(Error::Dimension(format!("row {idx} out of {r}")));
        }
        let d = self.nodes[a].value.data()[idx * c..(idx + 1) * c].to_vec();
        Ok(self.push(
            Tensor::vector(&d),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut da = vec![0.0; r * c];
                da[idx * c..(idx + 1) * c].copy_from_slice(g.data());
                vec![Tensor::from_vec(&[r, c], da).unwrap()]
            })),
        ))
    }

    /// Gather rows of an embedding table `[V, D]` by index, giving `[n, D]`.
    pub fn embed_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (v, d) = (self.nodes[table].value.rows(), self.nodes[table].value.cols());
        if indices.is_empty() {
            return Err(Error::Contract("embed_rows with no indices".into()));
        }
        for &ix in indices {
            if ix >= v {
                return Err(Error::Dimension(format!("embedding index {ix} out of {v}")));
            }
        }
        let td = self.nodes[table].value.data();
        let n = indices.len();
        let mut out = Vec::with_capacity(n * d);
        for &ix in indices {
            out.extend_from_slice(&td[ix * d..(ix + 1) * d]);
        }
        let idx = indices.to_vec();
        Ok(self.push(
            Tensor::from_vec(&[n, d], out)?,
            vec![table],
            Some(Box::new(move |g: &Tensor| {
                let gd = g.data();
                let mut dt = vec![0.0; v * d];
                for (i, &ix) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[ix * d + j] += gd[i * d + j];
                    }
                }
                vec![Tensor::from_vec(&[v, d], dt).unwrap()]
            })),
        ))
    }

    // ── Convolutions ─────────────────────────────────────────────────

    /// Causal 1-D convolution over a `[T, C_in]` sequence with kernels
    /// `[C_out, C_in, W]`. Tap `w` reads the input `w * dilation` steps in
    /// the past (tap 0 is the current step); positions before the start
    /// read zeros, so the output at time `t` depends only on inputs at
    /// times `<= t`.
    pub fn causal_conv1d(
        &mut self,
        seq: NodeId,
        kernel: NodeId,
        dilation: usize,
    ) -> Result<NodeId> {
        let sv = self.nodes[seq].value.clone();
        let kv = self.nodes[kernel].value.clone();
        if sv.shape().len() != 2 || sv.shape()[0] == 0 {
            return Err(Error::Dimension(format!(
                "causal_conv1d needs a non-empty [T, C] sequence, got {:?}",
                sv.shape()
            )));
        }
        let (t_len, c_in) = (sv.shape()[0], sv.shape()[1]);
        let kshape = kv.shape().to_vec();
        if kshape.len() != 3 || kshape[1] != c_in || kshape[2] == 0 {
            return Err(Error::Dimension(format!(
                "kernel shape {:?} incompatible with input channels {c_in}",
                kshape
            )));
        }
        let (c_out, width) = (kshape[0], kshape[2]);
        if dilation == 0 {
            return Err(Error::Dimension("dilation must be >= 1".into()));
        }
        let sd = sv.data();
        let kd = kv.data();
        let mut out = vec![0.0; t_len * c_out];
        for t in 0..t_len {
            for co in 0..c_out {
                let mut acc = 0.0;
                for w in 0..width {
                    let lag = w * dilation;
                    if lag > t {
                        break;
                    }
                    let ti = t - lag;
                    for ci in 0..c_in {
                        acc += kd[(co * c_in + ci) * width + w] * sd[ti * c_in + ci];
                    }
                }
                out[t * c_out + co] = acc;
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[t_len, c_out], out)?,
            vec![seq, kernel],
            Some(Box::new(move |g: &Tensor| {
                let gd = g.data();
                let sd = sv.data();
                let kd = kv.data();
                let mut ds = vec![0.0; t_len * c_in];
                let mut dk = vec![0.0; c_out * c_in * width];
                for t in 0..t_len {
                    for co in 0..c_out {
                        let go = gd[t * c_out + co];
                        if go == 0.0 {
                            continue;
                        }
                        for w in 0..width {
                            let lag = w * dilation;
                            if lag > t {
                                break;
                            }
                            let ti = t - lag;
                            for ci in 0..c_in {
                                ds[ti * c_in + ci] += go * kd[(co * c_in + ci) * width + w];
                                dk[(co * c_in + ci) * width + w] += go * sd[ti * c_in + ci];
                            }
                        }
                    }
                }
                vec![
                    Tensor::from_vec(&[t_len, c_in], ds).unwrap(),
                    Tensor::from_vec(&[c_out, c_in, width], dk).unwrap(),
                ]
            })),
        ))
    }

    /// 2-D convolution on a `[C_in, H, W]` image with kernels
    /// `[C_out, C_in, KH, KW]`, zero padding and the given stride.
    pub fn conv2d(
        &mut self,
        img: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let iv = self.nodes[img].value.clone();
        let kv = self.nodes[kernel].value.clone();
        let ishape = iv.shape().to_vec();
        let kshape = kv.shape().to_vec();
        if ishape.len() != 3 || kshape.len() != 4 || kshape[1] != ishape[0] {
            return Err(Error::Dimension(format!(
                "conv2d shapes {:?} / {:?} incompatible",
                ishape, kshape
            )));
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, kh, kw) = (kshape[0], kshape[2], kshape[3]);
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Dimension("conv2d geometry invalid".into()));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let id = iv.data();
        let kd = kv.data();
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += kd[((co * c_in + ci) * kh + ky) * kw + kx]
                                    * id[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[c_out, oh, ow], out)?,
            vec![img, kernel],
            Some(Box::new(move |g: &Tensor| {
                let gd = g.data();
                let id = iv.data();
                let kd = kv.data();
                let mut di = vec![0.0; c_in * h * w];
                let mut dk = vec![0.0; c_out * c_in * kh * kw];
                for co in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = gd[(co * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            for ci in 0..c_in {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let ii = (ci * h + iy as usize) * w + ix as usize;
                                        let ki = ((co * c_in + ci) * kh + ky) * kw + kx;
                                        di[ii] += go * kd[ki];
                                        dk[ki] += go * id[ii];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::from_vec(&[c_in, h, w], di).unwrap(),
                    Tensor::from_vec(&[c_out, c_in, kh, kw], dk).unwrap(),
                ]
            })),
        ))
    }

    // ── Attention ────────────────────────────────────────────────────

    /// Scaled dot-product attention for one head:
    /// `softmax(q·kᵀ/√d + mask) · v` with `q: [Tq, d]`, `k: [Tk, d]`,
    /// `v: [Tk, dv]`. `keep` (row-major `Tq x Tk`) marks permitted
    /// positions; a row that forbids everything is a degenerate mask.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        keep: Option<&[bool]>,
    ) -> Result<NodeId> {
        let d = self.nodes[q].value.cols();
        if self.nodes[k].value.cols() != d {
            return Err(Error::Dimension(format!(
                "attention key width {} != query width {d}",
                self.nodes[k].value.cols()
            )));
        }
        if self.nodes[k].value.rows() != self.nodes[v].value.rows() {
            return Err(Error::Dimension("attention k/v lengths differ".into()));
        }
        let kt = self.transpose(k);
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = match keep {
            Some(mask) => self.masked_softmax_rows(scaled, mask)?,
            None => self.softmax_rows(scaled),
        };
        self.matmul(attn, v)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        if !self.nodes[loss].value.is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            let Some(backward) = &node.backward else { continue };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[*pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds this graph's parameter-leaf gradients into the store's
    /// accumulators. Leaves that received no gradient contribute nothing.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                if let Some(g) = grads.get(id) {
                    store.accumulate_grad(name, g)?;
                }
            }
        }
        Ok(())
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softmax_symmetry_and_analytic() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.0, 0.0]));
        let s = g.softmax_rows(x);
        assert_relative_eq!(g.value(s).data()[0], 0.5);
        assert_relative_eq!(g.value(s).data()[1], 0.5);

        let y = g.constant(Tensor::row(&[1.0_f64.ln(), 3.0_f64.ln()]));
        let sy = g.softmax_rows(y);
        assert_relative_eq!(g.value(sy).data()[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(g.value(sy).data()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.3, -1.2, 2.0, 0.0, 0.7]));
        let xs = g.add_scalar(x, 13.7);
        let a = g.softmax_rows(x);
        let b = g.softmax_rows(xs);
        for (u, v) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert_relative_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_analytic() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::vector(&[1.0; 4]));
        let bias = g.constant(Tensor::vector(&[0.0; 4]));
        let x = g.constant(Tensor::row(&[5.0, 5.0, 5.0, 5.0]));
        let y = g.layer_norm_rows(x, gain, bias).unwrap();
        for v in g.value(y).data() {
            assert!(v.abs() < 1e-2, "constant row should collapse to ~bias, got {v}");
        }

        let gain2 = g.constant(Tensor::vector(&[1.0, 1.0]));
        let bias2 = g.constant(Tensor::vector(&[0.0, 0.0]));
        let x2 = g.constant(Tensor::row(&[1.0, 3.0]));
        let y2 = g.layer_norm_rows(x2, gain2, bias2).unwrap();
        assert_relative_eq!(g.value(y2).data()[0], -1.0, epsilon = 1e-4);
        assert_relative_eq!(g.value(y2).data()[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn layer_norm_rejects_single_column() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::vector(&[1.0]));
        let bias = g.constant(Tensor::vector(&[0.0]));
        let x = g.constant(Tensor::row(&[5.0]));
        assert!(matches!(
            g.layer_norm_rows(x, gain, bias),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn causal_conv_identity_and_delay() {
        let mut g = Graph::new();
        let seq = g.constant(Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let ident = g.constant(Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap());
        let out = g.causal_conv1d(seq, ident, 1).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0]);

        let delay = g.constant(Tensor::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap());
        let out2 = g.causal_conv1d(seq, delay, 1).unwrap();
        assert_eq!(g.value(out2).data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn causal_conv_rejects_empty() {
        let mut g = Graph::new();
        let seq = g.constant(Tensor::zeros(&[0, 2]));
        let k = g.constant(Tensor::zeros(&[3, 2, 2]));
        assert!(matches!(g.causal_conv1d(seq, k, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn causal_conv_future_perturbation_invariance() {
        // Perturbing the input at t=5 must leave outputs at t<5 bit-identical.
        let t_len = 9;
        let base: Vec<f64> = (0..t_len * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let kern: Vec<f64> = (0..3 * 2 * 3).map(|i| (i as f64 * 0.11).cos()).collect();

        let run = |input: Vec<f64>| {
            let mut g = Graph::new();
            let s = g.constant(Tensor::from_vec(&[t_len, 2], input).unwrap());
            let k = g.constant(Tensor::from_vec(&[3, 2, 3], kern.clone()).unwrap());
            let o = g.causal_conv1d(s, k, 2).unwrap();
            g.value(o).data().to_vec()
        };
        let a = run(base.clone());
        let mut perturbed = base;
        perturbed[5 * 2] += 10.0;
        perturbed[5 * 2 + 1] -= 3.0;
        let b = run(perturbed);
        for t in 0..5 {
            for c in 0..3 {
                assert_eq!(a[t * 3 + c].to_bits(), b[t * 3 + c].to_bits());
            }
        }
        assert_ne!(a[5 * 3], b[5 * 3]);
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::row(&[0.3, -2.0, 5.0]));
        let k = g.constant(Tensor::row(&[1.0, 1.0, 1.0]));
        let v = g.constant(Tensor::row(&[7.0, -4.0]));
        let o = g.attention(q, k, v, None).unwrap();
        assert_eq!(g.value(o).data(), &[7.0, -4.0]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::row(&[0.5, 0.1]));
        let k = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let v = g.constant(Tensor::from_vec(&[2, 2], vec![4.0, 0.0, 0.0, 2.0]).unwrap());
        let o = g.attention(q, k, v, None).unwrap();
        assert_relative_eq!(g.value(o).data()[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(g.value(o).data()[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn attention_causal_mask_blocks_future() {
        let t = 6;
        let d = 4;
        let qkv: Vec<f64> = (0..t * d).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.2).collect();
        let mut keep = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                keep[i * t + j] = true;
            }
        }
        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_vec(&[t, d], data).unwrap());
            let o = g.attention(x, x, x, Some(&keep)).unwrap();
            g.value(o).data().to_vec()
        };
        let a = run(qkv.clone());
        let mut pert = qkv;
        for j in 0..d {
            pert[4 * d + j] += 3.0; // change position 4
        }
        let b = run(pert);
        for pos in 0..4 {
            for j in 0..d {
                assert_eq!(a[pos * d + j].to_bits(), b[pos * d + j].to_bits());
            }
        }
        assert_ne!(a[4 * d], b[4 * d]);
    }

    #[test]
    fn attention_all_forbidden_row_is_degenerate() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_vec(&[2, 2], vec![0.0; 4]).unwrap());
        let k = g.constant(Tensor::from_vec(&[2, 2], vec![0.0; 4]).unwrap());
        let v = g.constant(Tensor::from_vec(&[2, 2], vec![0.0; 4]).unwrap());
        let keep = vec![true, true, false, false];
        assert!(matches!(
            g.attention(q, k, v, Some(&keep)),
            Err(Error::DegenerateMask(_))
        ));
    }

    #[test]
    fn backward_through_chain() {
        // loss = sum((a*b) + a) -> d_a = b + 1, d_b = a
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(&[3.0]));
        let b = g.constant(Tensor::vector(&[5.0]));
        let p = g.mul(a, b).unwrap();
        let s = g.add(p, a).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[6.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0]);
    }

    #[test]
    fn matmul_grad_matches_analytic_and_fd() {
        // f = sum(a @ b); d_a = ones(3,2) @ b^T
        let a_data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let b_data: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).cos()).collect();
        let f = |ad: &[f64]| {
            let a = Tensor::from_vec(&[3, 4], ad.to_vec()).unwrap();
            let b = Tensor::from_vec(&[4, 2], b_data.clone()).unwrap();
            a.matmul(&b).unwrap().data().iter().sum::<f64>()
        };
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[3, 4], a_data.clone()).unwrap());
        let b = g.constant(Tensor::from_vec(&[4, 2], b_data.clone()).unwrap());
        let m = g.matmul(a, b).unwrap();
        let loss = g.sum(m);
        let grads = g.backward(loss).unwrap();
        let da = grads.get(a).unwrap();

        // Analytic: ones(3,2) @ b^T
        let ones = Tensor::filled(&[3, 2], 1.0);
        let bt = Tensor::from_vec(&[4, 2], b_data.clone()).unwrap().transposed();
        let analytic = ones.matmul(&bt).unwrap();
        for (x, y) in da.data().iter().zip(analytic.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
        // Central finite differences, step 1e-5.
        let h = 1e-5;
        for i in 0..12 {
            let mut plus = a_data.clone();
            plus[i] += h;
            let mut minus = a_data.clone();
            minus[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert_relative_eq!(da.data()[i], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn softmax_gradient_matches_fd() {
        let x0: Vec<f64> = vec![0.4, -1.0, 2.3, 0.0, -0.6];
        let weights: Vec<f64> = vec![0.2, -0.5, 0.8, 1.1, -0.3];
        let eval = |xd: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.constant(Tensor::row(xd));
            let s = g.softmax_rows(x);
            let w = g.constant(Tensor::row(&weights));
            let p = g.mul(s, w).unwrap();
            let l = g.sum(p);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&x0));
        let s = g.softmax_rows(x);
        let w = g.constant(Tensor::row(&weights));
        let p = g.mul(s, w).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        let dx = grads.get(x).unwrap();
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus[i] += h;
            let mut minus = x0.clone();
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert_relative_eq!(dx.data()[i], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn layer_norm_gradient_matches_fd() {
        let x0: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).sin() * 2.0).collect();
        let gain0: Vec<f64> = (0..6).map(|i| 1.0 + 0.1 * i as f64).collect();
        let bias0: Vec<f64> = (0..6).map(|i| -0.2 * i as f64).collect();
        let eval = |xd: &[f64], gd: &[f64], bd: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_vec(&[2, 6], xd.to_vec()).unwrap());
            let gain = g.constant(Tensor::vector(gd));
            let bias = g.constant(Tensor::vector(bd));
            let y = g.layer_norm_rows(x, gain, bias).unwrap();
            let sq = g.mul(y, y).unwrap();
            let l = g.sum(sq);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2, 6], x0.clone()).unwrap());
        let gain = g.constant(Tensor::vector(&gain0));
        let bias = g.constant(Tensor::vector(&bias0));
        let y = g.layer_norm_rows(x, gain, bias).unwrap();
        let sq = g.mul(y, y).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus[i] += h;
            let mut minus = x0.clone();
            minus[i] -= h;
            let fd = (eval(&plus, &gain0, &bias0) - eval(&minus, &gain0, &bias0)) / (2.0 * h);
            assert_relative_eq!(grads.get(x).unwrap().data()[i], fd, epsilon = 1e-7);
        }
        for i in 0..gain0.len() {
            let mut plus = gain0.clone();
            plus[i] += h;
            let mut minus = gain0.clone();
            minus[i] -= h;
            let fd = (eval(&x0, &plus, &bias0) - eval(&x0, &minus, &bias0)) / (2.0 * h);
            assert_relative_eq!(grads.get(gain).unwrap().data()[i], fd, epsilon = 1e-7);
        }
    }
}
