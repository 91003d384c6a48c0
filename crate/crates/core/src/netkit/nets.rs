use crate::error::Result;
use crate::scalar::{Point, Scalar};

use super::mlp::{Cond, CondNet, NetSpec, Workspace};

/// Epsilon predictor `eps(x, t, c)`; used for the teacher and the student.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonNet<S>(CondNet<S>);

impl<S: Scalar> EpsilonNet<S> {
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        Self::wrap(CondNet::init(spec, seed)?)
    }

    pub fn wrap(net: CondNet<S>) -> Result<Self> {
        if net.spec().out_dim != net.spec().data_dim || net.spec().data_dim != 2 {
            return Err(crate::Error::config(
                "epsilon network output must match the 2-D data dimension",
            ));
        }
        Ok(Self(net))
    }

    pub fn net(&self) -> &CondNet<S> {
        &self.0
    }

    pub fn net_mut(&mut self) -> &mut CondNet<S> {
        &mut self.0
    }

    pub fn into_net(self) -> CondNet<S> {
        self.0
    }

    #[inline]
    pub fn predict(&self, x: &Point<S>, t: S, c: Cond) -> Point<S> {
        let o = self.0.forward(x, t, c);
        [o[0], o[1]]
    }

    /// Traced evaluation; follow with [`CondNet::backward`] on the same workspace.
    #[inline]
    pub fn predict_traced(&self, x: &Point<S>, t: S, c: Cond, ws: &mut Workspace<S>) -> Point<S> {
        self.0.forward_into(x, t, c, ws);
        let o = ws.output();
        [o[0], o[1]]
    }
}

/// Scalar critic `D(x, s, c)` for the adversarial consistency loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<S>(CondNet<S>);

impl<S: Scalar> Discriminator<S> {
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        Self::wrap(CondNet::init(spec, seed)?)
    }

    pub fn wrap(net: CondNet<S>) -> Result<Self> {
        if net.spec().out_dim != 1 {
            return Err(crate::Error::config("discriminator output must be scalar"));
        }
        Ok(Self(net))
    }

    pub fn net(&self) -> &CondNet<S> {
        &self.0
    }

    pub fn net_mut(&mut self) -> &mut CondNet<S> {
        &mut self.0
    }

    pub fn into_net(self) -> CondNet<S> {
        self.0
    }

    pub fn score(&self, x: &Point<S>, s: S, c: Cond) -> S {
        self.0.forward(x, s, c)[0]
    }

    pub fn score_traced(&self, x: &Point<S>, s: S, c: Cond, ws: &mut Workspace<S>) -> S {
        self.0.forward_into(x, s, c, ws);
        ws.output()[0]
    }
}

/// Exponential moving average of student parameters (the stop-gradient
/// target). Only inference is exposed: no traced pass can be taken through
/// it, so it can never receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaTarget<S>(EpsilonNet<S>);

impl<S: Scalar> EmaTarget<S> {
    pub fn from_student(student: &EpsilonNet<S>) -> Self {
        Self(student.clone())
    }

    #[inline]
    pub fn predict(&self, x: &Point<S>, t: S, c: Cond) -> Point<S> {
        self.0.predict(x, t, c)
    }

    pub fn params(&self) -> &[S] {
        self.0.net().params()
    }

    /// `theta^- <- mu theta^- + (1 - mu) theta`.
    pub(crate) fn blend(&mut self, student: &[S], mu: S) {
        let one_minus = S::one() - mu;
        for (p, &q) in self.0.net_mut().params_mut().iter_mut().zip(student) {
            *p = mu * *p + one_minus * q;
        }
    }

    /// Copy of the averaged network for evaluation.
    pub fn to_net(&self) -> EpsilonNet<S> {
        self.0.clone()
    }

    pub(crate) fn replace(&mut self, net: EpsilonNet<S>) {
        self.0 = net;
    }
}
