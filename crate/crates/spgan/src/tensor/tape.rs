//! Wengert tape: ops record their inputs and a backward closure; `backward`
//! replays the list in reverse, accumulating vector-Jacobian products.
//!
//! Leaves enter through [`Tape::param`] (gradient wanted) or
//! [`Tape::constant`] (data only). Every op returns a [`Node`] handle into
//! the tape arena; values stay owned by the tape.

use crate::error::{Error, Result};

use super::conv::{conv2d_backward, conv2d_forward};
use super::resample::{
    adaptive_avg_pool_backward, adaptive_avg_pool_forward, upsample_nearest_backward,
    upsample_nearest_forward,
};
use super::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Node(usize);

struct GradBuf {
    slots: Vec<Option<Tensor>>,
}

impl GradBuf {
    fn accumulate(&mut self, node: Node, grad: Tensor) {
        match &mut self.slots[node.0] {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e += g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &mut GradBuf)>;

struct Entry {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `node`; leaves the loss never reached get zeros of the
    /// node's shape.
    pub fn get(&self, node: Node) -> Tensor {
        match &self.slots[node.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }

    pub fn get_opt(&self, node: Node) -> Option<&Tensor> {
        self.slots[node.0].as_ref()
    }
}

/// Recording tape. Construction and backward are single-threaded.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
    check_finite: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { entries: Vec::new(), check_finite: false }
    }

    /// Diagnostic mode: panic the moment any op records a NaN/Inf value.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers a leaf whose gradient will be reported.
    pub fn param(&mut self, value: &Tensor) -> Node {
        self.push(value.clone(), true, None)
    }

    /// Registers a leaf that only carries data.
    pub fn constant(&mut self, value: &Tensor) -> Node {
        self.push(value.clone(), false, None)
    }

    pub fn value(&self, node: Node) -> &Tensor {
        &self.entries[node.0].value
    }

    /// Copies a node's value out of the tape (no gradient connection).
    pub fn detach(&self, node: Node) -> Tensor {
        self.entries[node.0].value.clone()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Node {
        if self.check_finite {
            value
                .check_finite("tape op output")
                .expect("non-finite value recorded on tape (finite-check mode)");
        }
        self.entries.push(Entry { value, requires_grad, backward });
        Node(self.entries.len() - 1)
    }

    fn rg(&self, nodes: &[Node]) -> bool {
        nodes.iter().any(|n| self.entries[n.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, parents: &[Node], backward: BackwardFn) -> Node {
        let requires = self.rg(parents);
        self.push(value, requires, if requires { Some(backward) } else { None })
    }

    /// Reverse pass from a scalar loss. Gradients of all `param` leaves
    /// reachable from the loss are populated; everything else reads as zero.
    pub fn backward(&self, loss: Node) -> Result<Gradients> {
        if self.entries[loss.0].value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.entries[loss.0].value.shape()
            )));
        }
        let mut buf = GradBuf { slots: vec![None; self.entries.len()] };
        buf.slots[loss.0] = Some(Tensor::ones(&[1]));
        for i in (0..=loss.0).rev() {
            let entry = &self.entries[i];
            if !entry.requires_grad {
                continue;
            }
            let Some(backward) = &entry.backward else { continue };
            let Some(grad) = buf.slots[i].clone() else { continue };
            backward(&grad, &mut buf);
        }
        // Only requires-grad nodes report gradients; accumulations that
        // spilled into constant parents are dropped here.
        for (slot, entry) in buf.slots.iter_mut().zip(&self.entries) {
            if !entry.requires_grad {
                *slot = None;
            }
        }
        let shapes = self.entries.iter().map(|e| e.value.shape().to_vec()).collect();
        Ok(Gradients { slots: buf.slots, shapes })
    }

    // ---- elementwise binary -------------------------------------------

    fn check_same_shape(&self, op: &str, a: Node, b: Node) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::config(format!("{op}: shape mismatch {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.check_same_shape("add", a, b)?;
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
            Tensor::new(va.shape().to_vec(), data)?
        };
        Ok(self.record(out, &[a, b], Box::new(move |g, buf| {
            buf.accumulate(a, g.clone());
            buf.accumulate(b, g.clone());
        })))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.check_same_shape("sub", a, b)?;
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
            Tensor::new(va.shape().to_vec(), data)?
        };
        Ok(self.record(out, &[a, b], Box::new(move |g, buf| {
            buf.accumulate(a, g.clone());
            let neg = g.data().iter().map(|v| -v).collect();
            buf.accumulate(b, Tensor::new(g.shape().to_vec(), neg).unwrap());
        })))
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.check_same_shape("mul", a, b)?;
        let (va, vb) = (self.detach(a), self.detach(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, &[a, b], Box::new(move |g, buf| {
            let da = g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
            buf.accumulate(a, Tensor::new(g.shape().to_vec(), da).unwrap());
            let db = g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
            buf.accumulate(b, Tensor::new(g.shape().to_vec(), db).unwrap());
        })))
    }

    pub fn add_scalar(&mut self, x: Node, c: f32) -> Result<Node> {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a + c).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| buf.accumulate(x, g.clone()))))
    }

    pub fn mul_scalar(&mut self, x: Node, c: f32) -> Result<Node> {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * c).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            let d = g.data().iter().map(|v| v * c).collect();
            buf.accumulate(x, Tensor::new(g.shape().to_vec(), d).unwrap());
        })))
    }

    pub fn neg(&mut self, x: Node) -> Result<Node> {
        self.mul_scalar(x, -1.0)
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_all(&mut self, x: Node) -> Result<Node> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let s: f64 = v.data().iter().map(|&a| a as f64).sum();
        let out = Tensor::scalar(s as f32);
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            let gv = g.data()[0];
            buf.accumulate(x, Tensor::full(&shape, gv));
        })))
    }

    pub fn mean_all(&mut self, x: Node) -> Result<Node> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.mul_scalar(s, 1.0 / n as f32)
    }

    // ---- activations ----------------------------------------------------

    /// Elementwise max(x, slope*x); the subgradient at 0 is the
    /// negative-side slope.
    pub fn leaky_relu(&mut self, x: Node, slope: f32) -> Result<Node> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::config(format!("leaky_relu: slope {slope} outside [0,1)")));
        }
        let v = self.detach(x);
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { slope * a }).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            let d = g
                .data()
                .iter()
                .zip(v.data())
                .map(|(g, &a)| if a > 0.0 { *g } else { slope * g })
                .collect();
            buf.accumulate(x, Tensor::new(g.shape().to_vec(), d).unwrap());
        })))
    }

    pub fn relu(&mut self, x: Node) -> Result<Node> {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Node) -> Result<Node> {
        let v = self.value(x);
        let data: Vec<f32> = v.data().iter().map(|a| a.tanh()).collect();
        let out = Tensor::new(v.shape().to_vec(), data.clone())?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            let d = g.data().iter().zip(&data).map(|(g, y)| g * (1.0 - y * y)).collect();
            buf.accumulate(x, Tensor::new(g.shape().to_vec(), d).unwrap());
        })))
    }

    pub fn sigmoid(&mut self, x: Node) -> Result<Node> {
        let v = self.value(x);
        let data: Vec<f32> = v.data().iter().map(|&a| stable_sigmoid(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data.clone())?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            let d = g.data().iter().zip(&data).map(|(g, y)| g * y * (1.0 - y)).collect();
            buf.accumulate(x, Tensor::new(g.shape().to_vec(), d).unwrap());
        })))
    }

    pub fn softplus(&mut self, x: Node) -> Result<Node> {
        let v = self.detach(x);
        let data = v.data().iter().map(|&a| stable_softplus(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            let d = g
                .data()
                .iter()
                .zip(v.data())
                .map(|(g, &a)| g * stable_sigmoid(a))
                .collect();
            buf.accumulate(x, Tensor::new(g.shape().to_vec(), d).unwrap());
        })))
    }

    /// Elementwise (x + eps)^(-1/2).
    pub fn rsqrt_eps(&mut self, x: Node, eps: f32) -> Result<Node> {
        let v = self.value(x);
        let data: Vec<f32> = v.data().iter().map(|&a| 1.0 / (a + eps).sqrt()).collect();
        let out = Tensor::new(v.shape().to_vec(), data.clone())?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            let d = g
                .data()
                .iter()
                .zip(&data)
                .map(|(g, y)| -0.5 * g * y * y * y)
                .collect();
            buf.accumulate(x, Tensor::new(g.shape().to_vec(), d).unwrap());
        })))
    }

    // ---- shape plumbing --------------------------------------------------

    pub fn reshape(&mut self, x: Node, shape: &[usize]) -> Result<Node> {
        let v = self.value(x);
        if v.numel() != shape.iter().product::<usize>() {
            return Err(Error::config(format!(
                "reshape: cannot view {:?} as {shape:?}",
                v.shape()
            )));
        }
        let old_shape = v.shape().to_vec();
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            buf.accumulate(x, Tensor::new(old_shape.clone(), g.data().to_vec()).unwrap());
        })))
    }

    /// Stacks `n` copies of `x` along a new leading batch axis.
    pub fn broadcast_batch(&mut self, x: Node, n: usize) -> Result<Node> {
        let v = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let per = v.numel();
        let mut data = Vec::with_capacity(n * per);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let in_shape = v.shape().to_vec();
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            let mut d = vec![0.0f64; per];
            for b in 0..n {
                for (i, v) in g.data()[b * per..(b + 1) * per].iter().enumerate() {
                    d[i] += *v as f64;
                }
            }
            let d: Vec<f32> = d.into_iter().map(|v| v as f32).collect();
            buf.accumulate(x, Tensor::new(in_shape.clone(), d).unwrap());
        })))
    }

    /// Columns [start, start+len) of a [N, D] matrix.
    pub fn slice_cols(&mut self, x: Node, start: usize, len: usize) -> Result<Node> {
        let v = self.value(x);
        let (n, d) = v.dims2()?;
        if start + len > d {
            return Err(Error::config(format!(
                "slice_cols: [{start}, {}) out of range for {d} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&v.data()[r * d + start..r * d + start + len]);
        }
        let out = Tensor::new(vec![n, len], data)?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            let mut dx = vec![0.0f32; n * d];
            for r in 0..n {
                dx[r * d + start..r * d + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            buf.accumulate(x, Tensor::new(vec![n, d], dx).unwrap());
        })))
    }

    // ---- per-channel / per-sample statistics helpers ---------------------

    /// Mean over the spatial dims: [N,C,H,W] -> [N,C].
    pub fn spatial_mean(&mut self, x: Node) -> Result<Node> {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4()?;
        let hw = h * w;
        let mut out = vec![0.0f32; n * c];
        for (nc, o) in out.iter_mut().enumerate() {
            let base = nc * hw;
            let s: f64 = v.data()[base..base + hw].iter().map(|&a| a as f64).sum();
            *o = (s / hw as f64) as f32;
        }
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            let mut dx = vec![0.0f32; n * c * hw];
            for nc in 0..n * c {
                let gv = g.data()[nc] / hw as f32;
                dx[nc * hw..(nc + 1) * hw].fill(gv);
            }
            buf.accumulate(x, Tensor::new(vec![n, c, h, w], dx).unwrap());
        })))
    }

    /// [N,C] -> [N,C,H,W] by repeating each entry over a spatial map.
    pub fn broadcast_spatial(&mut self, x: Node, h: usize, w: usize) -> Result<Node> {
        let v = self.value(x);
        let (n, c) = v.dims2()?;
        let hw = h * w;
        let mut data = vec![0.0f32; n * c * hw];
        for nc in 0..n * c {
            data[nc * hw..(nc + 1) * hw].fill(v.data()[nc]);
        }
        let out = Tensor::new(vec![n, c, h, w], data)?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            let mut d = vec![0.0f32; n * c];
            for (nc, dst) in d.iter_mut().enumerate() {
                let s: f64 = g.data()[nc * hw..(nc + 1) * hw].iter().map(|&a| a as f64).sum();
                *dst = s as f32;
            }
            buf.accumulate(x, Tensor::new(vec![n, c], d).unwrap());
        })))
    }

    /// Mean over batch and spatial dims: [N,C,H,W] -> [C].
    pub fn channel_mean(&mut self, x: Node) -> Result<Node> {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4()?;
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut acc = vec![0.0f64; c];
        for ni in 0..n {
            for (ci, a) in acc.iter_mut().enumerate() {
                let base = (ni * c + ci) * hw;
                *a += v.data()[base..base + hw].iter().map(|&x| x as f64).sum::<f64>();
            }
        }
        let out = Tensor::new(vec![c], acc.iter().map(|a| (a / count) as f32).collect())?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            let mut dx = vec![0.0f32; n * c * hw];
            for ni in 0..n {
                for ci in 0..c {
                    let gv = g.data()[ci] / count as f32;
                    let base = (ni * c + ci) * hw;
                    dx[base..base + hw].fill(gv);
                }
            }
            buf.accumulate(x, Tensor::new(vec![n, c, h, w], dx).unwrap());
        })))
    }

    /// [C] -> [N,C,H,W].
    pub fn broadcast_channel(&mut self, x: Node, n: usize, h: usize, w: usize) -> Result<Node> {
        let v = self.value(x);
        let c = match v.shape() {
            [c] => *c,
            other => {
                return Err(Error::config(format!(
                    "broadcast_channel: expected rank-1, got {other:?}"
                )))
            }
        };
        let hw = h * w;
        let mut data = vec![0.0f32; n * c * hw];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                data[base..base + hw].fill(v.data()[ci]);
            }
        }
        let out = Tensor::new(vec![n, c, h, w], data)?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            let mut d = vec![0.0f64; c];
            for ni in 0..n {
                for (ci, dst) in d.iter_mut().enumerate() {
                    let base = (ni * c + ci) * hw;
                    *dst += g.data()[base..base + hw].iter().map(|&a| a as f64).sum::<f64>();
                }
            }
            let d: Vec<f32> = d.into_iter().map(|v| v as f32).collect();
            buf.accumulate(x, Tensor::new(vec![c], d).unwrap());
        })))
    }

    /// out[n,c,:,:] = x[n,c,:,:] * s[n,c].
    pub fn scale_nc(&mut self, x: Node, s: Node) -> Result<Node> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(s).shape() != [n, c] {
            return Err(Error::config(format!(
                "scale_nc: scale shape {:?} does not match [{n}, {c}]",
                self.value(s).shape()
            )));
        }
        let (vx, vs) = (self.detach(x), self.detach(s));
        let hw = h * w;
        let mut data = vec![0.0f32; n * c * hw];
        for nc in 0..n * c {
            let sv = vs.data()[nc];
            for i in 0..hw {
                data[nc * hw + i] = vx.data()[nc * hw + i] * sv;
            }
        }
        let out = Tensor::new(vec![n, c, h, w], data)?;
        Ok(self.record(out, &[x, s], Box::new(move |g, buf| {
            let mut dx = vec![0.0f32; n * c * hw];
            let mut ds = vec![0.0f32; n * c];
            for nc in 0..n * c {
                let sv = vs.data()[nc];
                let mut acc = 0.0f64;
                for i in 0..hw {
                    let gv = g.data()[nc * hw + i];
                    dx[nc * hw + i] = gv * sv;
                    acc += (gv * vx.data()[nc * hw + i]) as f64;
                }
                ds[nc] = acc as f32;
            }
            buf.accumulate(x, Tensor::new(vec![n, c, h, w], dx).unwrap());
            buf.accumulate(s, Tensor::new(vec![n, c], ds).unwrap());
        })))
    }

    /// out[n,c,:,:] = x[n,c,:,:] + b[n,c].
    pub fn shift_nc(&mut self, x: Node, b: Node) -> Result<Node> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(b).shape() != [n, c] {
            return Err(Error::config(format!(
                "shift_nc: bias shape {:?} does not match [{n}, {c}]",
                self.value(b).shape()
            )));
        }
        let vb = self.detach(b);
        let vx = self.value(x);
        let hw = h * w;
        let mut data = vec![0.0f32; n * c * hw];
        for nc in 0..n * c {
            let bv = vb.data()[nc];
            for i in 0..hw {
                data[nc * hw + i] = vx.data()[nc * hw + i] + bv;
            }
        }
        let out = Tensor::new(vec![n, c, h, w], data)?;
        Ok(self.record(out, &[x, b], Box::new(move |g, buf| {
            buf.accumulate(x, g.clone());
            let mut db = vec![0.0f32; n * c];
            for (nc, dst) in db.iter_mut().enumerate() {
                let s: f64 = g.data()[nc * hw..(nc + 1) * hw].iter().map(|&a| a as f64).sum();
                *dst = s as f32;
            }
            buf.accumulate(b, Tensor::new(vec![n, c], db).unwrap());
        })))
    }

    /// out[n,c,:,:] = x[n,c,:,:] * s[c].
    pub fn scale_c(&mut self, x: Node, s: Node) -> Result<Node> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(s).shape() != [c] {
            return Err(Error::config(format!(
                "scale_c: scale shape {:?} does not match [{c}]",
                self.value(s).shape()
            )));
        }
        let (vx, vs) = (self.detach(x), self.detach(s));
        let hw = h * w;
        let mut data = vec![0.0f32; n * c * hw];
        for ni in 0..n {
            for ci in 0..c {
                let sv = vs.data()[ci];
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    data[base + i] = vx.data()[base + i] * sv;
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], data)?;
        Ok(self.record(out, &[x, s], Box::new(move |g, buf| {
            let mut dx = vec![0.0f32; n * c * hw];
            let mut ds = vec![0.0f64; c];
            for ni in 0..n {
                for ci in 0..c {
                    let sv = vs.data()[ci];
                    let base = (ni * c + ci) * hw;
                    let mut acc = 0.0f64;
                    for i in 0..hw {
                        let gv = g.data()[base + i];
                        dx[base + i] = gv * sv;
                        acc += (gv * vx.data()[base + i]) as f64;
                    }
                    ds[ci] += acc;
                }
            }
            buf.accumulate(x, Tensor::new(vec![n, c, h, w], dx).unwrap());
            let ds: Vec<f32> = ds.into_iter().map(|v| v as f32).collect();
            buf.accumulate(s, Tensor::new(vec![c], ds).unwrap());
        })))
    }

    /// out[n,c,:,:] = x[n,c,:,:] + b[c].
    pub fn shift_c(&mut self, x: Node, b: Node) -> Result<Node> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(b).shape() != [c] {
            return Err(Error::config(format!(
                "shift_c: bias shape {:?} does not match [{c}]",
                self.value(b).shape()
            )));
        }
        let vb = self.detach(b);
        let vx = self.value(x);
        let hw = h * w;
        let mut data = vec![0.0f32; n * c * hw];
        for ni in 0..n {
            for ci in 0..c {
                let bv = vb.data()[ci];
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    data[base + i] = vx.data()[base + i] + bv;
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], data)?;
        Ok(self.record(out, &[x, b], Box::new(move |g, buf| {
            buf.accumulate(x, g.clone());
            let mut db = vec![0.0f64; c];
            for ni in 0..n {
                for (ci, dst) in db.iter_mut().enumerate() {
                    let base = (ni * c + ci) * hw;
                    *dst += g.data()[base..base + hw].iter().map(|&a| a as f64).sum::<f64>();
                }
            }
            let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
            buf.accumulate(b, Tensor::new(vec![c], db).unwrap());
        })))
    }

    // ---- dense / conv layers ---------------------------------------------

    /// out = x @ w^T + b, with x [N,Din], w [Dout,Din], b [Dout].
    pub fn linear(&mut self, x: Node, w: Node, b: Option<Node>) -> Result<Node> {
        let (n, d_in) = self.value(x).dims2()?;
        let (d_out, wd_in) = self.value(w).dims2()?;
        if wd_in != d_in {
            return Err(Error::config(format!(
                "linear: weight expects {wd_in} inputs, got {d_in}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [d_out] {
                return Err(Error::config(format!(
                    "linear: bias shape {:?} does not match [{d_out}]",
                    self.value(b).shape()
                )));
            }
        }
        let vx = self.detach(x);
        let vw = self.detach(w);
        let vb = b.map(|b| self.detach(b));
        let mut data = vec![0.0f32; n * d_out];
        for r in 0..n {
            for o in 0..d_out {
                let mut acc = vb.as_ref().map_or(0.0f64, |b| b.data()[o] as f64);
                let xrow = &vx.data()[r * d_in..(r + 1) * d_in];
                let wrow = &vw.data()[o * d_in..(o + 1) * d_in];
                for i in 0..d_in {
                    acc += xrow[i] as f64 * wrow[i] as f64;
                }
                data[r * d_out + o] = acc as f32;
            }
        }
        let out = Tensor::new(vec![n, d_out], data)?;
        let need_x = self.entries[x.0].requires_grad;
        let need_w = self.entries[w.0].requires_grad;
        let need_b = b.map_or(false, |bn| self.entries[bn.0].requires_grad);
        let parents: Vec<Node> = match b {
            Some(bn) => vec![x, w, bn],
            None => vec![x, w],
        };
        Ok(self.record(out, &parents, Box::new(move |g, buf| {
            if need_x {
                // dx = g @ w
                let mut dx = vec![0.0f32; n * d_in];
                for r in 0..n {
                    for i in 0..d_in {
                        let mut acc = 0.0f64;
                        for o in 0..d_out {
                            acc += g.data()[r * d_out + o] as f64 * vw.data()[o * d_in + i] as f64;
                        }
                        dx[r * d_in + i] = acc as f32;
                    }
                }
                buf.accumulate(x, Tensor::new(vec![n, d_in], dx).unwrap());
            }
            if need_w {
                // dw = g^T @ x
                let mut dw = vec![0.0f32; d_out * d_in];
                for o in 0..d_out {
                    for i in 0..d_in {
                        let mut acc = 0.0f64;
                        for r in 0..n {
                            acc += g.data()[r * d_out + o] as f64 * vx.data()[r * d_in + i] as f64;
                        }
                        dw[o * d_in + i] = acc as f32;
                    }
                }
                buf.accumulate(w, Tensor::new(vec![d_out, d_in], dw).unwrap());
            }
            if let (Some(bn), true) = (b, need_b) {
                let mut db = vec![0.0f64; d_out];
                for r in 0..n {
                    for (o, dst) in db.iter_mut().enumerate() {
                        *dst += g.data()[r * d_out + o] as f64;
                    }
                }
                let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                buf.accumulate(bn, Tensor::new(vec![d_out], db).unwrap());
            }
        })))
    }

    pub fn conv2d(
        &mut self,
        x: Node,
        w: Node,
        b: Option<Node>,
        stride: usize,
        padding: usize,
    ) -> Result<Node> {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let vx = self.detach(x);
        let vw = self.detach(w);
        // Skip gradient work for fixed parents (e.g. frozen projection convs).
        let need_x = self.entries[x.0].requires_grad;
        let need_w = self.entries[w.0].requires_grad;
        let need_b = b.map_or(false, |bn| self.entries[bn.0].requires_grad);
        let parents: Vec<Node> = match b {
            Some(bn) => vec![x, w, bn],
            None => vec![x, w],
        };
        Ok(self.record(out, &parents, Box::new(move |g, buf| {
            let (dx, dw, db) =
                conv2d_backward(&vx, &vw, need_x, need_w, need_b, stride, padding, g).unwrap();
            if let Some(dx) = dx {
                buf.accumulate(x, dx);
            }
            if let Some(dw) = dw {
                buf.accumulate(w, dw);
            }
            if let (Some(bn), Some(db)) = (b, db) {
                buf.accumulate(bn, db);
            }
        })))
    }

    pub fn upsample_nearest(&mut self, x: Node, factor: usize) -> Result<Node> {
        let out = upsample_nearest_forward(self.value(x), factor)?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            buf.accumulate(x, upsample_nearest_backward(g, factor).unwrap());
        })))
    }

    pub fn adaptive_avg_pool(&mut self, x: Node, out_hw: usize) -> Result<Node> {
        let (_, _, h, w) = self.value(x).dims4()?;
        let out = adaptive_avg_pool_forward(self.value(x), out_hw)?;
        Ok(self.record(out, &[x], Box::new(move |g, buf| {
            buf.accumulate(x, adaptive_avg_pool_backward(g, h, w).unwrap());
        })))
    }
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let loss = tape.sum_all(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::ones(&[2]));
        let y = tape.param(&Tensor::ones(&[3]));
        let loss = tape.sum_all(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(y).shape(), [3]);
        assert_eq!(grads.get(y).data(), &[0.0, 0.0, 0.0]);
        assert!(grads.get_opt(y).is_none());
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        use rand::SeedableRng;
        let build = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
            let mut tape = Tape::new();
            let x = tape.param(&Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng));
            let w = tape.param(&Tensor::randn(&[3, 3, 3, 3], 0.3, &mut rng));
            let y = tape.conv2d(x, w, None, 1, 1).unwrap();
            let a = tape.tanh(y).unwrap();
            let loss = tape.mean_all(a).unwrap();
            let grads = tape.backward(loss).unwrap();
            (grads.get(x).into_data(), grads.get(w).into_data())
        };
        let (dx1, dw1) = build();
        let (dx2, dw2) = build();
        assert_eq!(dx1, dx2);
        assert_eq!(dw1, dw2);
    }

    #[test]
    fn activations_match_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let x2 = tape.constant(&Tensor::new(vec![1], vec![-2.0]).unwrap());
        let l = tape.leaky_relu(x2, 0.1).unwrap();
        assert!((tape.value(l).data()[0] - (-0.2)).abs() < 1e-7);

        let x3 = tape.constant(&Tensor::scalar(0.0));
        let t = tape.tanh(x3).unwrap();
        assert_eq!(tape.value(t).data()[0], 0.0);
    }

    #[test]
    fn linear_matches_hand_matrix_multiply() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(&Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap());
        let b = tape.constant(&Tensor::zeros(&[2]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![2, 2], vec![4.0, -1.0, 0.5, 2.0]).unwrap());
        let eye = tape.constant(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero_b = tape.constant(&Tensor::zeros(&[2]));
        let y = tape.linear(x, eye, Some(zero_b)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let zero_w = tape.constant(&Tensor::zeros(&[2, 2]));
        let bias = tape.constant(&Tensor::new(vec![2], vec![0.25, -3.0]).unwrap());
        let y2 = tape.linear(x, zero_w, Some(bias)).unwrap();
        assert_eq!(tape.value(y2).data(), &[0.25, -3.0, 0.25, -3.0]);
    }

    #[test]
    fn upsample_gradient_of_sum_is_block_size() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let up = tape.upsample_nearest(x, 2).unwrap();
        let loss = tape.sum_all(up).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[4.0; 4]);
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        // y = x*x + x => dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[7.0]);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // conv -> per-map normalization -> pool, differentiated end to end.
        // The finite-difference oracle below is independent of the tape's
        // backward rules; agreement is normwise within 1e-3 at eps 1e-3.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let x0 = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let w0 = Tensor::randn(&[3, 2, 3, 3], 0.4, &mut rng);

        let run = |x: &Tensor, w: &Tensor, want_grads: bool| -> (f64, Vec<f32>, Vec<f32>) {
            let mut tape = Tape::new();
            let (xn, wn) = (tape.param(x), tape.param(w));
            let y = tape.conv2d(xn, wn, None, 1, 1).unwrap();
            let m = tape.spatial_mean(y).unwrap();
            let mb = tape.broadcast_spatial(m, 6, 6).unwrap();
            let c = tape.sub(y, mb).unwrap();
            let p = tape.adaptive_avg_pool(c, 3).unwrap();
            let t = tape.tanh(p).unwrap();
            let loss = tape.sum_all(t).unwrap();
            let v = tape.value(loss).data()[0] as f64;
            if want_grads {
                let grads = tape.backward(loss).unwrap();
                (v, grads.get(xn).into_data(), grads.get(wn).into_data())
            } else {
                (v, Vec::new(), Vec::new())
            }
        };

        let (_, gx, gw) = run(&x0, &w0, true);
        let eps = 1e-3f32;
        let fd_of = |which: usize| -> Vec<f32> {
            let base = if which == 0 { &x0 } else { &w0 };
            (0..base.numel())
                .map(|j| {
                    let mut plus = (x0.clone(), w0.clone());
                    let mut minus = (x0.clone(), w0.clone());
                    let (p, m) = if which == 0 {
                        (&mut plus.0, &mut minus.0)
                    } else {
                        (&mut plus.1, &mut minus.1)
                    };
                    p.data_mut()[j] += eps;
                    m.data_mut()[j] -= eps;
                    let (fp, _, _) = run(&plus.0, &plus.1, false);
                    let (fm, _, _) = run(&minus.0, &minus.1, false);
                    ((fp - fm) / (2.0 * eps as f64)) as f32
                })
                .collect()
        };

        for (analytic, which) in [(gx, 0usize), (gw, 1usize)] {
            let fd = fd_of(which);
            let diff: f64 = analytic
                .iter()
                .zip(&fd)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = analytic.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt()
                + fd.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
            let rel = diff / scale.max(1e-8);
            assert!(rel < 1e-3, "input {which}: normwise rel err {rel}");
        }
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(2.0));
        let c = tape.constant(&Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[5.0]);
        // constant: reported as zeros, no slot allocated
        assert!(grads.get_opt(c).is_none());
    }
}
