//! Conditioned multilayer perceptron with hand-written reverse mode.
//!
//! Input features are `[x, sin(w_k tau), cos(w_k tau), e_c]` where
//! `tau = time_scale * t`, `w_k = max_period^(-k / F)` and `e_c` is a row of a
//! trainable class table whose last row is the null condition. Hidden layers
//! use SiLU; the output layer is linear.
//!
//! All trainable values live in one flat vector: the class table first, then
//! per layer the weight matrix (input-major, `in x out`) followed by its bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::scalar::{lit, Scalar};

/// Conditioning label: a class index or the null condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Class(usize),
    Null,
}

impl Cond {
    pub fn class(self) -> Option<usize> {
        match self {
            Cond::Class(c) => Some(c),
            Cond::Null => None,
        }
    }
}

/// Structural description of a [`CondNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub time_freqs: usize,
    pub time_max_period: f64,
    pub time_scale: f64,
    pub class_dim: usize,
    /// Number of real classes `C`; the table has `C + 1` rows.
    pub classes: usize,
}

impl NetSpec {
    pub fn epsilon(classes: usize) -> Self {
        Self {
            data_dim: 2,
            hidden: vec![64, 64, 64],
            out_dim: 2,
            time_freqs: 8,
            time_max_period: 1e4,
            time_scale: 1e3,
            class_dim: 8,
            classes,
        }
    }

    pub fn discriminator(classes: usize) -> Self {
        Self {
            out_dim: 1,
            ..Self::epsilon(classes)
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.data_dim + 2 * self.time_freqs + self.class_dim
    }

    /// Layer widths from features to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.feature_dim());
        w.extend_from_slice(&self.hidden);
        w.push(self.out_dim);
        w
    }

    pub fn table_len(&self) -> usize {
        (self.classes + 1) * self.class_dim
    }

    pub fn num_params(&self) -> usize {
        let w = self.widths();
        self.table_len() + w.windows(2).map(|p| p[0] * p[1] + p[1]).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.data_dim > 0
            && self.out_dim > 0
            && self.hidden.iter().all(|&h| h > 0)
            && self.time_max_period > 1.0
            && self.time_scale > 0.0
            && self.classes > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid network spec {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSlot {
    inp: usize,
    out: usize,
    w: usize,
    b: usize,
}

fn layout(spec: &NetSpec) -> Vec<LayerSlot> {
    let mut off = spec.table_len();
    spec.widths()
        .windows(2)
        .map(|p| {
            let slot = LayerSlot {
                inp: p[0],
                out: p[1],
                w: off,
                b: off + p[0] * p[1],
            };
            off = slot.b + p[1];
            slot
        })
        .collect()
}

/// Scratch buffers for one traced evaluation.
#[derive(Debug, Clone)]
pub struct Workspace<S> {
    feats: Vec<S>,
    pre: Vec<Vec<S>>,
    post: Vec<Vec<S>>,
    row: usize,
    delta: Vec<S>,
    delta_prev: Vec<S>,
}

impl<S: Scalar> Workspace<S> {
    pub fn output(&self) -> &[S] {
        self.post.last().expect("at least one layer")
    }
}

#[inline]
fn sigmoid<S: Scalar>(z: S) -> S {
    S::one() / (S::one() + (-z).exp())
}

#[inline]
fn silu<S: Scalar>(z: S) -> S {
    z * sigmoid(z)
}

#[inline]
fn silu_grad<S: Scalar>(z: S) -> S {
    let s = sigmoid(z);
    s * (S::one() + z * (S::one() - s))
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = S::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Feedforward network conditioned on time and class.
#[derive(Debug, Clone, PartialEq)]
pub struct CondNet<S> {
    spec: NetSpec,
    params: Vec<S>,
    slots: Vec<LayerSlot>,
    freqs: Vec<S>,
}

impl<S: Scalar> CondNet<S> {
    /// Random initialization: class rows ~ N(0, 1), weights ~ N(0, 1 / fan_in),
    /// zero biases. The output layer is scaled down by 0.1.
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = stream(seed, Purpose::NetInit, 0, 0);
        let table = net.spec.table_len();
        for p in &mut net.params[..table] {
            *p = rng.normal();
        }
        let last = net.slots.len() - 1;
        for (l, slot) in net.slots.clone().into_iter().enumerate() {
            let mut std = (1.0 / slot.inp as f64).sqrt();
            if l == last {
                std *= 0.1;
            }
            for p in &mut net.params[slot.w..slot.b] {
                *p = rng.normal::<S>() * lit(std);
            }
        }
        Ok(net)
    }

    pub fn zeros(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let params = vec![S::zero(); spec.num_params()];
        Self::from_params(spec, params)
    }

    pub fn from_params(spec: NetSpec, params: Vec<S>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                spec.num_params(),
                params.len()
            )));
        }
        let slots = layout(&spec);
        let f = spec.time_freqs;
        let freqs = (0..f)
            .map(|k| lit::<S>(spec.time_max_period.powf(-(k as f64) / f as f64)))
            .collect();
        Ok(Self {
            spec,
            params,
            slots,
            freqs,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Same structure with every value cast to another scalar type.
    pub fn cast<T: Scalar>(&self) -> CondNet<T> {
        let params = self.params.iter().map(|&p| lit::<T>(p.to_f64().unwrap_or(f64::NAN))).collect();
        CondNet::from_params(self.spec.clone(), params).expect("same spec")
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().position(|p| !p.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!("parameter {i} is not finite"))),
        }
    }

    pub fn check_cond(&self, c: Cond) -> Result<()> {
        match c {
            Cond::Class(k) if k >= self.spec.classes => Err(Error::domain(format!(
                "class {k} out of range for {} classes",
                self.spec.classes
            ))),
            _ => Ok(()),
        }
    }

    /// Weight and bias slices of layer `l` (weights input-major).
    pub fn layer(&self, l: usize) -> (&[S], &[S]) {
        let s = self.slots[l];
        (&self.params[s.w..s.b], &self.params[s.b..s.b + s.out])
    }

    pub fn num_layers(&self) -> usize {
        self.slots.len()
    }

    /// Class-table row of `c`, row `C` being the null condition.
    pub fn class_row(&self, c: Cond) -> &[S] {
        let r = self.row_index(c);
        let e = self.spec.class_dim;
        &self.params[r * e..(r + 1) * e]
    }

    fn row_index(&self, c: Cond) -> usize {
        match c {
            Cond::Class(k) => {
                assert!(k < self.spec.classes, "class {k} out of range");
                k
            }
            Cond::Null => self.spec.classes,
        }
    }

    pub fn workspace(&self) -> Workspace<S> {
        let widths = self.spec.widths();
        Workspace {
            feats: vec![S::zero(); widths[0]],
            pre: widths[1..].iter().map(|&w| vec![S::zero(); w]).collect(),
            post: widths[1..].iter().map(|&w| vec![S::zero(); w]).collect(),
            row: 0,
            delta: Vec::with_capacity(*widths.iter().max().unwrap()),
            delta_prev: Vec::with_capacity(*widths.iter().max().unwrap()),
        }
    }

    fn features(&self, x: &[S], t: S, c: Cond, ws: &mut Workspace<S>) {
        let d = self.spec.data_dim;
        let f = self.spec.time_freqs;
        assert_eq!(x.len(), d, "input dimension");
        ws.feats[..d].copy_from_slice(x);
        let tau = lit::<S>(self.spec.time_scale) * t;
        for (k, &w) in self.freqs.iter().enumerate() {
            let (s, cs) = (w * tau).sin_cos();
            ws.feats[d + k] = s;
            ws.feats[d + f + k] = cs;
        }
        ws.row = self.row_index(c);
        let e = self.spec.class_dim;
        ws.feats[d + 2 * f..].copy_from_slice(&self.params[ws.row * e..(ws.row + 1) * e]);
    }

    /// Evaluates the network, recording activations in `ws`.
    pub fn forward_into(&self, x: &[S], t: S, c: Cond, ws: &mut Workspace<S>) {
        self.features(x, t, c, ws);
        let last = self.slots.len() - 1;
        for (l, slot) in self.slots.iter().enumerate() {
            let (done, rest) = ws.post.split_at_mut(l);
            let input: &[S] = if l == 0 { &ws.feats } else { &done[l - 1] };
            let z = &mut ws.pre[l];
            z.copy_from_slice(&self.params[slot.b..slot.b + slot.out]);
            let w = &self.params[slot.w..slot.b];
            for (i, &a) in input.iter().enumerate() {
                let row = &w[i * slot.out..(i + 1) * slot.out];
                for (zj, &wij) in z.iter_mut().zip(row) {
                    *zj = *zj + a * wij;
                }
            }
            let out = &mut rest[0];
            if l == last {
                out.copy_from_slice(z);
            } else {
                for (o, &zj) in out.iter_mut().zip(z.iter()) {
                    *o = silu(zj);
                }
            }
        }
    }

    /// Allocating convenience wrapper around [`forward_into`](Self::forward_into).
    pub fn forward(&self, x: &[S], t: S, c: Cond) -> Vec<S> {
        let mut ws = self.workspace();
        self.forward_into(x, t, c, &mut ws);
        ws.output().to_vec()
    }

    /// Validating forward pass.
    pub fn try_forward(&self, x: &[S], t: S, c: Cond) -> Result<Vec<S>> {
        self.check_cond(c)?;
        self.check_finite()?;
        if x.len() != self.spec.data_dim || !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("input must be finite with the data dimension"));
        }
        Ok(self.forward(x, t, c))
    }

    /// Reverse pass for the evaluation recorded in `ws`.
    ///
    /// Accumulates `d<out_adj, out>/d params` into `grad` (when given) and
    /// writes the adjoint of the data input `x` into `x_adj` (when given).
    pub fn backward(
        &self,
        ws: &mut Workspace<S>,
        out_adj: &[S],
        mut grad: Option<&mut [S]>,
        x_adj: Option<&mut [S]>,
    ) {
        assert_eq!(out_adj.len(), self.spec.out_dim, "output adjoint shape");
        if let Some(g) = grad.as_deref() {
            assert_eq!(g.len(), self.params.len(), "gradient buffer shape");
        }
        let need_input = x_adj.is_some() || grad.is_some();
        let Workspace {
            feats,
            pre,
            post,
            row,
            delta,
            delta_prev,
        } = ws;
        delta.clear();
        delta.extend_from_slice(out_adj);
        for l in (0..self.slots.len()).rev() {
            let slot = self.slots[l];
            let input: &[S] = if l == 0 { feats } else { &post[l - 1] };
            if let Some(g) = grad.as_deref_mut() {
                for (gb, &d) in g[slot.b..slot.b + slot.out].iter_mut().zip(delta.iter()) {
                    *gb = *gb + d;
                }
                let gw = &mut g[slot.w..slot.b];
                for (i, &a) in input.iter().enumerate() {
                    if a == S::zero() {
                        continue;
                    }
                    let row = &mut gw[i * slot.out..(i + 1) * slot.out];
                    for (gij, &d) in row.iter_mut().zip(delta.iter()) {
                        *gij = *gij + a * d;
                    }
                }
            }
            if l == 0 && !need_input {
                break;
            }
            let w = &self.params[slot.w..slot.b];
            delta_prev.clear();
            delta_prev.extend(
                (0..slot.inp).map(|i| dot(&w[i * slot.out..(i + 1) * slot.out], delta)),
            );
            if l > 0 {
                for (dp, &z) in delta_prev.iter_mut().zip(pre[l - 1].iter()) {
                    *dp = *dp * silu_grad(z);
                }
            }
            std::mem::swap(delta, delta_prev);
        }
        if !need_input {
            return;
        }
        let d = self.spec.data_dim;
        if let Some(xa) = x_adj {
            xa.copy_from_slice(&delta[..d]);
        }
        if let Some(g) = grad {
            let e = self.spec.class_dim;
            let off = d + 2 * self.spec.time_freqs;
            for (gk, &dk) in g[*row * e..(*row + 1) * e].iter_mut().zip(&delta[off..off + e]) {
                *gk = *gk + dk;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> NetSpec {
        NetSpec {
            hidden: vec![5, 4],
            time_freqs: 2,
            class_dim: 3,
            ..NetSpec::epsilon(2)
        }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net: CondNet<f64> = CondNet::zeros(NetSpec::epsilon(2)).unwrap();
        assert_eq!(net.forward(&[1.3, -0.2], 0.4, Cond::Class(1)), vec![0.0, 0.0]);
        assert_eq!(net.forward(&[9.0, 9.0], 0.9, Cond::Null), vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_is_matrix_product() {
        let spec = NetSpec {
            hidden: vec![],
            ..small_spec()
        };
        let net: CondNet<f64> = CondNet::init(spec.clone(), 3).unwrap();
        let x = [0.7, -1.1];
        let t = 0.25;
        let out = net.forward(&x, t, Cond::Class(0));
        let mut feats = x.to_vec();
        let tau = spec.time_scale * t;
        let freqs: Vec<f64> = (0..2).map(|k| 1e4f64.powf(-(k as f64) / 2.0)).collect();
        feats.extend(freqs.iter().map(|w| (w * tau).sin()));
        feats.extend(freqs.iter().map(|w| (w * tau).cos()));
        feats.extend_from_slice(net.class_row(Cond::Class(0)));
        let (w, b) = net.layer(0);
        for j in 0..2 {
            let manual: f64 = b[j] + feats.iter().enumerate().map(|(i, f)| f * w[i * 2 + j]).sum::<f64>();
            assert!((out[j] - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_seed_output_is_pinned() {
        let net: CondNet<f64> = CondNet::init(NetSpec::epsilon(2), 42).unwrap();
        let again: CondNet<f64> = CondNet::init(NetSpec::epsilon(2), 42).unwrap();
        let a = net.forward(&[0.5, -0.25], 0.3, Cond::Class(1));
        assert_eq!(a, again.forward(&[0.5, -0.25], 0.3, Cond::Class(1)));
        let golden = [0.005_681_440_875_558_539, -0.006_353_043_114_535_078];
        for (v, g) in a.iter().zip(golden) {
            assert!((v - g).abs() < 1e-14, "{a:?}");
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let net: CondNet<f64> = CondNet::init(small_spec(), 1).unwrap();
        let mut ws = net.workspace();
        net.forward_into(&[0.1, 0.2], 0.5, Cond::Null, &mut ws);
        let mut g = vec![0.0; net.num_params()];
        net.backward(&mut ws, &[0.0, 0.0], Some(&mut g), None);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    #[should_panic]
    fn gradient_buffer_shape_mismatch_panics() {
        let net: CondNet<f64> = CondNet::init(small_spec(), 1).unwrap();
        let mut ws = net.workspace();
        net.forward_into(&[0.1, 0.2], 0.5, Cond::Null, &mut ws);
        let mut g = vec![0.0; 3];
        net.backward(&mut ws, &[1.0, 0.0], Some(&mut g), None);
    }

    #[test]
    fn try_forward_flags_bad_inputs() {
        let mut net: CondNet<f64> = CondNet::init(small_spec(), 1).unwrap();
        assert!(matches!(net.try_forward(&[0.0, 0.0], 0.5, Cond::Class(5)), Err(Error::Domain(_))));
        net.params_mut()[7] = f64::NAN;
        assert!(matches!(net.try_forward(&[0.0, 0.0], 0.5, Cond::Class(0)), Err(Error::Numeric(_))));
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let net: CondNet<f64> = CondNet::init(small_spec(), 9).unwrap();
        let x = [0.3, -0.6];
        let adj = [0.7, -1.3];
        let mut ws = net.workspace();
        net.forward_into(&x, 0.4, Cond::Class(1), &mut ws);
        let mut xa = [0.0; 2];
        net.backward(&mut ws, &adj, None, Some(&mut xa));
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let f = |v: &[f64; 2]| {
                let o = net.forward(v, 0.4, Cond::Class(1));
                o[0] * adj[0] + o[1] * adj[1]
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - xa[k]).abs() < 1e-8);
        }
    }
}
