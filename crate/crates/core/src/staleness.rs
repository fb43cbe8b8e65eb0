//! Stale-update memory and staleness coefficients.
//!
//! The server keeps, per (client, model), the last update `h` it received.
//! Aggregation subtracts `beta * h` from fresh updates and adds back the
//! full-population stale term, which keeps the step unbiased for any `beta`
//! fixed before sampling. The variance-optimal coefficient is the projection
//! `beta = G.h / |h|^2`; the estimator variant extrapolates it linearly from
//! the last observed decay instead of asking inactive clients to train.

use std::collections::BTreeMap;
use std::io::Write;

use crate::scalar::{dot, norm_sq};
use crate::{MmflError, Result, Scalar};

/// Bounds for extrapolated coefficients.
pub const BETA_MIN: f64 = 0.0;
pub const BETA_MAX: f64 = 2.0;

/// Projection coefficient minimising `|G - beta h|^2`; zero when `h = 0`.
pub fn beta_opt<T: Scalar>(g: &[T], h: &[T]) -> T {
    let hh = norm_sq(h);
    if hh == T::zero() {
        log::warn!("beta_opt with zero stale update; using fresh-only update");
        return T::zero();
    }
    dot(g, h) / hh
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaleEntry<T> {
    pub h: Vec<T>,
    pub last_refresh_round: usize,
    /// Coefficient assumed right after a refresh (exactly 1).
    pub beta_hat: T,
    /// Round the assumed coefficient applies to (`last_refresh_round + 1`).
    pub beta_hat_round: usize,
    /// Most recent exact coefficient, observed when the client returned.
    pub observed: Option<(T, usize)>,
    /// Per-round decay `(beta_hat - observed) / gap`, once a pair exists.
    pub decay: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StaleStore<T> {
    entries: BTreeMap<(usize, usize), StaleEntry<T>>,
}

impl<T: Scalar> StaleStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, client: usize, model: usize) -> Option<&StaleEntry<T>> {
        self.entries.get(&(client, model))
    }

    pub fn h(&self, client: usize, model: usize) -> Option<&[T]> {
        self.get(client, model).map(|e| e.h.as_slice())
    }

    /// Number of stored `h` vectors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records `update` as the client's latest update for `model`.
    ///
    /// When an older `h` exists, the exact coefficient of the new update
    /// against it is recorded and the decay rate refreshed. A second refresh in
    /// the same round only replaces `h`.
    pub fn refresh(&mut self, client: usize, model: usize, update: &[T], round: usize) {
        let entry = match self.entries.get_mut(&(client, model)) {
            None => {
                self.entries.insert(
                    (client, model),
                    StaleEntry {
                        h: update.to_vec(),
                        last_refresh_round: round,
                        beta_hat: T::one(),
                        beta_hat_round: round + 1,
                        observed: None,
                        decay: None,
                    },
                );
                return;
            }
            Some(e) => e,
        };
        if entry.last_refresh_round == round {
            entry.h = update.to_vec();
            return;
        }
        let observed = beta_opt(update, &entry.h);
        if round > entry.beta_hat_round {
            let gap = T::from_usize_lossy(round - entry.beta_hat_round);
            entry.decay = Some((entry.beta_hat - observed) / gap);
        }
        entry.observed = Some((observed, round));
        entry.h = update.to_vec();
        entry.last_refresh_round = round;
        entry.beta_hat = T::one();
        entry.beta_hat_round = round + 1;
    }

    /// Staleness coefficient for `round`.
    ///
    /// With a fresh update the exact projection is returned. Otherwise the
    /// coefficient restarts at `beta_hat` after the last refresh and decays by
    /// the last observed rate, clamped to `[0, 2]`; before any rate is known it
    /// stays at `beta_hat`.
    pub fn beta_estimate(
        &self,
        client: usize,
        model: usize,
        round: usize,
        fresh: Option<&[T]>,
    ) -> Result<T> {
        let e = self
            .get(client, model)
            .ok_or(MmflError::NoStaleState { client, model })?;
        if let Some(g) = fresh {
            return Ok(beta_opt(g, &e.h));
        }
        let Some(decay) = e.decay else {
            return Ok(e.beta_hat);
        };
        let elapsed = T::lit(round as f64 - e.beta_hat_round as f64);
        let raw = e.beta_hat - elapsed * decay;
        let clamped = raw.max(T::lit(BETA_MIN)).min(T::lit(BETA_MAX));
        if clamped != raw {
            log::debug!("beta estimate {raw} clamped to {clamped} (client {client}, model {model})");
        }
        Ok(clamped)
    }

    /// Rows `client,model,refresh_round,beta` with the estimate at `round`.
    pub fn write_delimited<W: Write>(&self, out: W, round: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["client", "model", "refresh_round", "beta"])?;
        for (&(client, model), e) in &self.entries {
            let beta = self.beta_estimate(client, model, round, None)?;
            w.write_record([
                client.to_string(),
                model.to_string(),
                e.last_refresh_round.to_string(),
                beta.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
