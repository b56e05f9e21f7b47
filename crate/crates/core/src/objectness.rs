//! Class-agnostic probabilistic objectness.
//!
//! All query embeddings of a batch (matched or not) feed an exponential moving
//! average of a diagonal Gaussian `N(mu, diag(sigma))`. A query's objectness is
//! its likelihood under that Gaussian, `exp(-tau * d_M(q)^2)`, and training
//! pulls *matched* queries toward the mean by penalizing `d_M^2`. The mean and
//! variances are constants during loss evaluation; they only move through
//! [`GaussianState::ema_update`].

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 1.3;
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;

/// A D-dimensional query embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryEmbedding(pub Vec<f64>);

impl Deref for QueryEmbedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for QueryEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for QueryEmbedding {
    fn from(v: Vec<f64>) -> Self {
        QueryEmbedding(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectnessConfig {
    /// Inference-time temperature.
    pub tau: f64,
    /// Weight of the objectness term in the joint loss.
    pub alpha: f64,
}

impl Default for ObjectnessConfig {
    fn default() -> Self {
        ObjectnessConfig {
            tau: DEFAULT_TAU,
            alpha: 0.003,
        }
    }
}

/// Running diagonal Gaussian over query embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianState {
    pub mu: Vec<f64>,
    /// Per-dimension variances, each at least `eps`.
    pub sigma: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl GaussianState {
    /// Unit Gaussian at the origin.
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Result<Self> {
        let state = GaussianState {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
            momentum,
            eps,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::config(format!("EMA momentum {} outside (0, 1]", self.momentum)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(format!("variance floor {} must be positive", self.eps)));
        }
        if self.mu.len() != self.sigma.len() {
            return Err(Error::domain("mean and variance dimensions differ"));
        }
        if self.mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::domain("non-finite Gaussian mean"));
        }
        if self.sigma.iter().any(|s| !s.is_finite() || *s < self.eps) {
            return Err(Error::domain("Gaussian variance below floor or non-finite"));
        }
        Ok(())
    }

    fn check_dim(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dim() {
            return Err(Error::domain(format!(
                "embedding has {} dimensions, Gaussian has {}",
                q.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// New state after blending in the batch statistics:
    /// `mu' = (1 - m) mu + m mean`, `sigma' = max(eps, (1 - m) sigma + m var)`
    /// with the biased (divide by n) batch variance.
    pub fn ema_update<Q: AsRef<[f64]>>(&self, batch: &[Q]) -> Result<GaussianState> {
        let mut next = self.clone();
        next.ema_update_in_place(batch)?;
        Ok(next)
    }

    /// In-place form of [`ema_update`](Self::ema_update) for the owning trainer.
    pub fn ema_update_in_place<Q: AsRef<[f64]>>(&mut self, batch: &[Q]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::domain("EMA update needs a non-empty batch"));
        }
        let d = self.dim();
        for q in batch {
            self.check_dim(q.as_ref())?;
        }
        let n = batch.len() as f64;
        let mut mean = vec![0.0; d];
        for q in batch {
            for (m, x) in mean.iter_mut().zip(q.as_ref()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for q in batch {
            for ((v, x), m) in var.iter_mut().zip(q.as_ref()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n);

        let m = self.momentum;
        for k in 0..d {
            self.mu[k] = (1.0 - m) * self.mu[k] + m * mean[k];
            self.sigma[k] = ((1.0 - m) * self.sigma[k] + m * var[k]).max(self.eps);
        }
        Ok(())
    }

    /// Squared Mahalanobis distance `sum_d (q_d - mu_d)^2 / sigma_d`.
    pub fn mahalanobis_sq(&self, q: &[f64]) -> Result<f64> {
        self.check_dim(q)?;
        Ok(self.mahalanobis_sq_unchecked(q))
    }

    pub(crate) fn mahalanobis_sq_unchecked(&self, q: &[f64]) -> f64 {
        q.iter()
            .zip(&self.mu)
            .zip(&self.sigma)
            .map(|((x, m), s)| (x - m) * (x - m) / s)
            .sum()
    }

    /// `exp(-tau * d_M(q)^2)`, in (0, 1].
    pub fn objectness_prob(&self, q: &[f64], tau: f64) -> Result<f64> {
        check_tau(tau)?;
        Ok((-tau * self.mahalanobis_sq(q)?).exp())
    }

    /// Objectness loss `sum_{i in matched} d_M(q_i)^2` and its gradient with
    /// respect to every query (zero rows for unmatched queries).
    pub fn objectness_loss_and_grad<Q: AsRef<[f64]>>(
        &self,
        queries: &[Q],
        matched: &[usize],
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        for q in queries {
            self.check_dim(q.as_ref())?;
        }
        let mut grads = vec![vec![0.0; self.dim()]; queries.len()];
        let mut loss = 0.0;
        for &i in matched {
            let q = queries
                .get(i)
                .ok_or_else(|| Error::domain(format!("matched index {i} out of {} queries", queries.len())))?
                .as_ref();
            loss += self.mahalanobis_sq_unchecked(q);
            for (k, g) in grads[i].iter_mut().enumerate() {
                *g += 2.0 * (q[k] - self.mu[k]) / self.sigma[k];
            }
        }
        Ok((loss, grads))
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("objectness temperature {tau} must be positive")))
    }
}
