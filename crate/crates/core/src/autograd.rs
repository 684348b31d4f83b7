//! Reverse-mode automatic differentiation over dense row-major f64 arrays.
//!
//! A [`Tape`] records every operation whose inputs carry gradients; calling
//! [`Tape::backward`] replays the recorded closures in reverse, accumulating
//! gradients into every reachable tensor with `requires_grad = true`. Tensors
//! with `requires_grad = false` are never touched by backward.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Shared handle to a dense tensor. Cloning is cheap (reference count bump);
/// clones alias the same storage and gradient buffer.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&s| s == 0) {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        let grad = requires_grad.then(|| vec![0.0; n]);
        Ok(Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                requires_grad,
                grad,
            })),
        })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n], requires_grad).expect("zeros: consistent by construction")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v], false).unwrap()
    }

    /// Matrix constant from row-major rows, no gradient.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![rows, cols], data, false)
    }

    /// Uniform init in `[-bound, bound]` from the caller's generator.
    pub fn uniform<R: Rng>(shape: Vec<usize>, bound: f64, requires_grad: bool, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape, data, requires_grad).expect("uniform: consistent by construction")
    }

    /// Gaussian init with the given standard deviation.
    pub fn gaussian<R: Rng>(shape: Vec<usize>, std: f64, requires_grad: bool, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        // Box-Muller keeps us off rand_distr for one sampler.
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            data.push(std * r * th.cos());
            if data.len() < n {
                data.push(std * r * th.sin());
            }
        }
        Tensor::new(shape, data, requires_grad).expect("gaussian: consistent by construction")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value of a shape-[1] tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.borrow();
        assert_eq!(d.data.len(), 1, "item() on non-scalar tensor");
        d.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut d = self.inner.borrow_mut();
        if let Some(g) = d.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Overwrite values in place (optimizer updates). Shape must match.
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.data.len(), data.len(), "set_data: length mismatch");
        d.data.copy_from_slice(data);
    }

    /// Order-sensitive hash of the raw value bits; used for freeze checks.
    pub fn checksum(&self) -> u64 {
        let d = self.inner.borrow();
        let mut h = DefaultHasher::new();
        d.shape.hash(&mut h);
        for v in &d.data {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut d = self.inner.borrow_mut();
        if !d.requires_grad {
            return;
        }
        let n = d.data.len();
        let g = d.grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

/// Operation kinds accepted by [`Tape::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Mul,
    Matmul,
    Transpose,
    Reshape,
    Concat,
    Slice,
    SoftmaxRows,
    LayernormRows,
    Gelu,
    Relu,
    Sum,
    Mean,
    Power,
    Sqrt,
    Broadcast,
}

impl std::str::FromStr for OpKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<OpKind> {
        Ok(match s {
            "add" => OpKind::Add,
            "mul" => OpKind::Mul,
            "matmul" => OpKind::Matmul,
            "transpose" => OpKind::Transpose,
            "reshape" => OpKind::Reshape,
            "concat" => OpKind::Concat,
            "slice" => OpKind::Slice,
            "softmax-rows" => OpKind::SoftmaxRows,
            "layernorm-rows" => OpKind::LayernormRows,
            "gelu" => OpKind::Gelu,
            "relu" => OpKind::Relu,
            "sum" => OpKind::Sum,
            "mean" => OpKind::Mean,
            "power" => OpKind::Power,
            "sqrt" => OpKind::Sqrt,
            "broadcast" => OpKind::Broadcast,
            other => return Err(Error::Contract(format!("unknown op kind '{other}'"))),
        })
    }
}

/// Attributes for the generic [`Tape::forward_op`] entry point.
#[derive(Debug, Clone, Default)]
pub struct OpAttrs {
    pub exponent: Option<f64>,
    pub eps: Option<f64>,
    pub axis: Option<usize>,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub shape: Option<Vec<usize>>,
}

struct Node {
    backward: Box<dyn Fn()>,
}

/// Single-writer computation tape. Distinct tapes may live on distinct
/// threads; one tape records one forward pass at a time.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s,
            rhs: vec![],
        });
    }
    Ok((s[0], s[1]))
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn record(&mut self, inputs: &[&Tensor], output: &Tensor, backward: Box<dyn Fn()>) {
        if inputs.iter().any(|t| t.requires_grad()) {
            // Output participates in the backward pass.
            {
                let mut d = output.inner.borrow_mut();
                d.requires_grad = true;
                let n = d.data.len();
                d.grad.get_or_insert_with(|| vec![0.0; n]);
            }
            self.nodes.push(Node { backward });
            self.consumed = false;
        }
    }

    /// Generic dispatch over the supported op kinds.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[&Tensor], attrs: &OpAttrs) -> Result<Tensor> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() != n {
                Err(Error::Contract(format!(
                    "{kind:?} expects {n} inputs, got {}",
                    inputs.len()
                )))
            } else {
                Ok(())
            }
        };
        match kind {
            OpKind::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                need(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Matmul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Transpose => {
                need(1)?;
                self.transpose(inputs[0])
            }
            OpKind::Reshape => {
                need(1)?;
                let shape = attrs
                    .shape
                    .clone()
                    .ok_or_else(|| Error::Contract("reshape requires attrs.shape".into()))?;
                self.reshape(inputs[0], shape)
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::Slice => {
                need(1)?;
                let (axis, start, end) = (
                    attrs.axis.unwrap_or(0),
                    attrs
                        .start
                        .ok_or_else(|| Error::Contract("slice requires attrs.start".into()))?,
                    attrs
                        .end
                        .ok_or_else(|| Error::Contract("slice requires attrs.end".into()))?,
                );
                self.slice(inputs[0], axis, start, end)
            }
            OpKind::SoftmaxRows => {
                need(1)?;
                self.softmax_rows(inputs[0])
            }
            OpKind::LayernormRows => {
                need(1)?;
                self.layernorm_rows(inputs[0], attrs.eps.unwrap_or(1e-5))
            }
            OpKind::Gelu => {
                need(1)?;
                self.gelu(inputs[0])
            }
            OpKind::Relu => {
                need(1)?;
                self.relu(inputs[0])
            }
            OpKind::Sum => {
                need(1)?;
                self.sum(inputs[0])
            }
            OpKind::Mean => {
                need(1)?;
                self.mean(inputs[0])
            }
            OpKind::Power => {
                need(1)?;
                let p = attrs
                    .exponent
                    .ok_or_else(|| Error::Contract("power requires attrs.exponent".into()))?;
                self.power(inputs[0], p)
            }
            OpKind::Sqrt => {
                need(1)?;
                self.sqrt(inputs[0])
            }
            OpKind::Broadcast => {
                need(1)?;
                let shape = attrs
                    .shape
                    .clone()
                    .ok_or_else(|| Error::Contract("broadcast requires attrs.shape".into()))?;
                self.broadcast(inputs[0], shape)
            }
        }
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(a.shape(), data, false)?;
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        self.record(
            &[a, b],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present");
                ac.accumulate_grad(&g);
                bc.accumulate_grad(&g);
            }),
        );
        Ok(out)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = ad.iter().zip(bd.iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(a.shape(), data, false)?;
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        self.record(
            &[a, b],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present");
                let (ad, bd) = (ac.data(), bc.data());
                let da: Vec<f64> = g.iter().zip(bd.iter()).map(|(gi, y)| gi * y).collect();
                let db: Vec<f64> = g.iter().zip(ad.iter()).map(|(gi, x)| gi * x).collect();
                ac.accumulate_grad(&da);
                bc.accumulate_grad(&db);
            }),
        );
        Ok(out)
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = shape2(a, "matmul")?;
        let (k2, n) = shape2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (ad, bd) = (a.data(), b.data());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += av * bd[p * n + j];
                }
            }
        }
        let out = Tensor::new(vec![m, n], data, false)?;
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        self.record(
            &[a, b],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present");
                let (ad, bd) = (ac.data(), bc.data());
                // dA = G * B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bd[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                // dB = A^T * G
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                ac.accumulate_grad(&da);
                bc.accumulate_grad(&db);
            }),
        );
        Ok(out)
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = shape2(a, "transpose")?;
        let ad = a.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ad[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data, false)?;
        let (ac, oc) = (a.clone(), out.clone());
        self.record(
            &[a],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present");
                let mut da = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                ac.accumulate_grad(&da);
            }),
        );
        Ok(out)
    }

    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != a.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: a.shape(),
                rhs: shape,
            });
        }
        let out = Tensor::new(shape, a.data(), false)?;
        let (ac, oc) = (a.clone(), out.clone());
        self.record(
            &[a],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present");
                ac.accumulate_grad(&g);
            }),
        );
        Ok(out)
    }

    /// Row-wise concatenation of 2-D tensors (or plain concatenation of 1-D).
    pub fn concat(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = parts[0].shape();
        let one_d = first.len() == 1;
        let cols = if one_d { 1 } else { first[1] };
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let pc = if s.len() == 1 { 1 } else { s[1] };
            if s.len() != first.len() || pc != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            let d = p.data();
            lens.push(d.len());
            data.extend_from_slice(&d);
        }
        let rows = data.len() / cols;
        let shape = if one_d { vec![rows] } else { vec![rows, cols] };
        let out = Tensor::new(shape, data, false)?;
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let oc = out.clone();
        self.record(
            parts,
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present");
                let mut off = 0;
                for (p, &len) in owned.iter().zip(&lens) {
                    p.accumulate_grad(&g[off..off + len]);
                    off += len;
                }
            }),
        );
        Ok(out)
    }

    /// Contiguous slice along axis 0 (rows) or 1 (columns) of a 2-D tensor.
    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = shape2(a, "slice")?;
        let limit = if axis == 0 { m } else { n };
        if axis > 1 || start >= end || end > limit {
            return Err(Error::Contract(format!(
                "slice range {start}..{end} invalid for axis {axis} of shape [{m}, {n}]"
            )));
        }
        let ad = a.data();
        let (out_rows, out_cols, data) = if axis == 0 {
            let data = ad[start * n..end * n].to_vec();
            (end - start, n, data)
        } else {
            let mut data = Vec::with_capacity(m * (end - start));
            for i in 0..m {
                data.extend_from_slice(&ad[i * n + start..i * n + end]);
            }
            (m, end - start, data)
        };
        let out = Tensor::new(vec![out_rows, out_cols], data, false)?;
        let (ac, oc) = (a.clone(), out.clone());
        self.record(
            &[a],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present");
                let mut da = vec![0.0; m * n];
                if axis == 0 {
                    da[start * n..end * n].copy_from_slice(&g);
                } else {
                    let w = end - start;
                    for i in 0..m {
                        da[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                }
                ac.accumulate_grad(&da);
            }),
        );
        Ok(out)
    }

    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = shape2(a, "softmax-rows")?;
        let ad = a.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &ad[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                data[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                data[i * n + j] /= z;
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "softmax-rows",
                context: None,
            });
        }
        let out = Tensor::new(vec![m, n], data, false)?;
        let (ac, oc) = (a.clone(), out.clone());
        self.record(
            &[a],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present");
                let s = oc.data();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| g[i * n + j] * s[i * n + j]).sum();
                    for j in 0..n {
                        da[i * n + j] = s[i * n + j] * (g[i * n + j] - dot);
                    }
                }
                ac.accumulate_grad(&da);
            }),
        );
        Ok(out)
    }

    pub fn layernorm_rows(&mut self, a: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = shape2(a, "layernorm-rows")?;
        let ad = a.data();
        let mut data = vec![0.0; m * n];
        let mut sigmas = vec![0.0; m];
        for i in 0..m {
            let row = &ad[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let sigma = (var + eps).sqrt();
            sigmas[i] = sigma;
            for j in 0..n {
                data[i * n + j] = (row[j] - mu) / sigma;
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "layernorm-rows",
                context: None,
            });
        }
        let out = Tensor::new(vec![m, n], data, false)?;
        let (ac, oc) = (a.clone(), out.clone());
        self.record(
            &[a],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present");
                let y = oc.data();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let gm: f64 = (0..n).map(|j| g[i * n + j]).sum::<f64>() / n as f64;
                    let gym: f64 = (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum::<f64>() / n as f64;
                    for j in 0..n {
                        da[i * n + j] = (g[i * n + j] - gm - y[i * n + j] * gym) / sigmas[i];
                    }
                }
                ac.accumulate_grad(&da);
            }),
        );
        Ok(out)
    }

    pub fn gelu(&mut self, a: &Tensor) -> Result<Tensor> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let ad = a.data();
        let data: Vec<f64> = ad
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(a.shape(), data, false)?;
        let (ac, oc) = (a.clone(), out.clone());
        self.record(
            &[a],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present");
                let ad = ac.data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(&gi, &x)| {
                        let u = C * (x + A * x * x * x);
                        let t = u.tanh();
                        let du = C * (1.0 + 3.0 * A * x * x);
                        gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                ac.accumulate_grad(&da);
            }),
        );
        Ok(out)
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        let ad = a.data();
        let data: Vec<f64> = ad.iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(a.shape(), data, false)?;
        let (ac, oc) = (a.clone(), out.clone());
        self.record(
            &[a],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present");
                let ad = ac.data();
                // relu'(0) = 0
                let da: Vec<f64> = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                    .collect();
                ac.accumulate_grad(&da);
            }),
        );
        Ok(out)
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data().iter().sum();
        let out = Tensor::new(vec![1], vec![s], false)?;
        let (ac, oc) = (a.clone(), out.clone());
        let n = a.len();
        self.record(
            &[a],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present")[0];
                ac.accumulate_grad(&vec![g; n]);
            }),
        );
        Ok(out)
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        let n = a.len();
        let s: f64 = a.data().iter().sum::<f64>() / n as f64;
        let out = Tensor::new(vec![1], vec![s], false)?;
        let (ac, oc) = (a.clone(), out.clone());
        self.record(
            &[a],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present")[0] / n as f64;
                ac.accumulate_grad(&vec![g; n]);
            }),
        );
        Ok(out)
    }

    pub fn power(&mut self, a: &Tensor, p: f64) -> Result<Tensor> {
        let ad = a.data();
        let data: Vec<f64> = ad.iter().map(|&x| x.powf(p)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "power",
                context: Some(format!("exponent {p}")),
            });
        }
        let out = Tensor::new(a.shape(), data, false)?;
        let (ac, oc) = (a.clone(), out.clone());
        self.record(
            &[a],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present");
                let ad = ac.data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(&gi, &x)| gi * p * x.powf(p - 1.0))
                    .collect();
                ac.accumulate_grad(&da);
            }),
        );
        Ok(out)
    }

    pub fn sqrt(&mut self, a: &Tensor) -> Result<Tensor> {
        let ad = a.data();
        if ad.iter().any(|&x| x < 0.0) {
            return Err(Error::NonFinite {
                op: "sqrt",
                context: Some("negative input".into()),
            });
        }
        let data: Vec<f64> = ad.iter().map(|&x| x.sqrt()).collect();
        let out = Tensor::new(a.shape(), data, false)?;
        let (ac, oc) = (a.clone(), out.clone());
        self.record(
            &[a],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present");
                let y = oc.data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gi, &s)| if s > 0.0 { gi / (2.0 * s) } else { 0.0 })
                    .collect();
                ac.accumulate_grad(&da);
            }),
        );
        Ok(out)
    }

    /// Leading-dimension broadcast: the input shape must be a suffix of the
    /// target shape, or a scalar `[1]`.
    pub fn broadcast(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let src = a.shape();
        let scalar = src == [1];
        let suffix_ok = shape.len() >= src.len() && shape[shape.len() - src.len()..] == src[..];
        if !scalar && !suffix_ok {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: src,
                rhs: shape,
            });
        }
        let n: usize = shape.iter().product();
        let ad = a.data();
        let chunk = if scalar { 1 } else { ad.len() };
        let reps = n / chunk;
        let mut data = Vec::with_capacity(n);
        for _ in 0..reps {
            data.extend_from_slice(&ad);
        }
        let out = Tensor::new(shape, data, false)?;
        let (ac, oc) = (a.clone(), out.clone());
        self.record(
            &[a],
            &out,
            Box::new(move || {
                let g = oc.grad().expect("output grad present");
                let mut da = vec![0.0; chunk];
                for (i, &gi) in g.iter().enumerate() {
                    da[i % chunk] += gi;
                }
                ac.accumulate_grad(&da);
            }),
        );
        Ok(out)
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let k = self.broadcast(&Tensor::scalar(c), a.shape())?;
        self.mul(a, &k)
    }

    /// Elementwise subtraction, composed from add and scale.
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, &nb)
    }

    /// Propagate gradients of a scalar loss back through the tape, then clear
    /// the tape. Frozen tensors are left untouched.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.shape() != [1] {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss of shape [1], got {:?}",
                loss.shape()
            )));
        }
        if !loss.requires_grad() {
            return Err(Error::Contract(
                "backward on a loss with requires_grad=false".into(),
            ));
        }
        if self.consumed || self.nodes.is_empty() {
            return Err(Error::StaleTape);
        }
        loss.accumulate_grad(&[1.0]);
        for node in self.nodes.iter().rev() {
            (node.backward)();
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Compare the reverse-mode gradient of `f` at `x` with central differences.
///
/// Returns the max over coordinates of the relative error between the two,
/// with 0/0 defined as 0. Coordinates of `x` that sit exactly at 0 are nudged
/// off by `10 * eps` first so that kinks (relu at 0) do not produce spurious
/// disagreement.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("finite_difference_check: eps must be > 0".into()));
    }
    let shape = x.shape();
    let mut base = x.data();
    for v in base.iter_mut() {
        if *v == 0.0 {
            *v = 10.0 * eps;
        }
    }

    let probe = Tensor::new(shape.clone(), base.clone(), true)?;
    let mut tape = Tape::new();
    let y = f(&mut tape, &probe)?;
    if y.shape() != [1] {
        return Err(Error::Contract(
            "finite_difference_check: f must be scalar-valued".into(),
        ));
    }
    let analytic = if y.requires_grad() {
        tape.backward(&y)?;
        probe.grad().expect("probe requires grad")
    } else {
        // f ignored its input entirely; the gradient is identically zero.
        vec![0.0; base.len()]
    };

    let eval = |data: &[f64]| -> Result<f64> {
        let t = Tensor::new(shape.clone(), data.to_vec(), false)?;
        let mut tape = Tape::new();
        Ok(f(&mut tape, &t)?.item())
    };

    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs());
        let err = if denom < 1e-6 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / denom
        };
        worst = worst.max(err);
    }
    Ok(worst)
}
