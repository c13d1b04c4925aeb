//! Training loops: the cleartext simulation and the per-party drivers of
//! private training.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::linear::DpConfig;
use crate::nonlinear::TruncMode;
use crate::party::Party;
use crate::ring::{RingParams, RingTensor};
use crate::transport::msg;

use super::engine::{train_step, StepResult};
use super::model::{Model, Network};
use super::private::Private;
use super::reference::{predict, Reference};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub trunc: TruncMode,
    pub dp: DpConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 32,
            epochs: 10,
            lr: 0.01,
            momentum: 0.8,
            trunc: TruncMode::Faithful,
            dp: DpConfig::disabled(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch >= 1, Error::Config("batch size must be at least 1".into()));
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            Error::Config(format!("learning rate {} must be positive", self.lr))
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            Error::Config(format!("momentum {} outside [0, 1)", self.momentum))
        );
        ensure!(
            !self.dp.enabled || self.dp.batch == self.batch,
            Error::Config("DP batch differs from training batch".into())
        );
        Ok(())
    }
}

/// Order of steps for one epoch: each shard is shuffled, cut into full
/// batches, and the shards take turns one batch at a time until all are
/// exhausted. Returns `(shard, sample indices)` per step.
pub fn round_robin(shard_sizes: &[usize], batch: usize, seed: u64, epoch: usize) -> Vec<(usize, Vec<usize>)> {
    let mut queues: Vec<std::vec::IntoIter<Vec<usize>>> = shard_sizes
        .iter()
        .enumerate()
        .map(|(s, &n)| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(((epoch as u64) << 16) | s as u64);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.chunks_exact(batch).map(<[usize]>::to_vec).collect::<Vec<_>>().into_iter()
        })
        .collect();
    let mut out = Vec::new();
    loop {
        let before = out.len();
        for (s, q) in queues.iter_mut().enumerate() {
            if let Some(b) = q.next() {
                out.push((s, b));
            }
        }
        if out.len() == before {
            return out;
        }
    }
}

pub fn encode_batch(ring: &RingParams, ds: &Dataset, idx: &[usize]) -> Result<(RingTensor, Vec<u8>)> {
    let (x, labels) = ds.batch(idx);
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(&ds.shape);
    Ok((RingTensor::encode(ring, &shape, &x, ring.frac_bits)?, labels))
}

pub fn accuracy(ring: &RingParams, net: &Network, ds: &Dataset) -> Result<f64> {
    ensure!(!ds.is_empty(), Error::Data("empty evaluation set".into()));
    ensure!(
        ds.shape == net.spec.input,
        Error::Shape(format!("dataset samples {:?} for model input {:?}", ds.shape, net.spec.input))
    );
    let images: Vec<f64> = ds.images.iter().map(|&v| v as f64).collect();
    let pred = predict(ring, net, &images, 500)?;
    let hits = pred.iter().zip(&ds.labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / ds.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub test_accuracy: Option<f64>,
    pub seconds: f64,
}

/// One cleartext step of the fixed-point pipeline followed by the update.
pub fn reference_step(model: &mut Model, ring: &RingParams, engine: &mut Reference, cfg: &TrainConfig, x: &RingTensor, labels: &[u8]) -> Result<f64> {
    let net = model.quantize(ring)?;
    let res = train_step(engine, &net, Some((x, labels)), labels.len())?;
    model.sgd_update(&res.decoded_grads().expect("reference reveals gradients"), cfg.lr, cfg.momentum)?;
    Ok(res.loss.expect("reference sees labels"))
}

/// Train in the clear with the fixed-point arithmetic of the protocol.
/// Several shards are visited round-robin, one batch per turn.
pub fn simulate(
    model: &mut Model,
    ring: &RingParams,
    cfg: &TrainConfig,
    shards: &[Dataset],
    test: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    ensure!(!shards.is_empty(), Error::Data("no training data".into()));
    let mut engine = Reference::new(*ring, cfg.dp, cfg.seed);
    let sizes: Vec<usize> = shards.iter().map(Dataset::len).collect();
    let mut stats = Vec::new();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let plan = round_robin(&sizes, cfg.batch, cfg.seed, epoch);
        ensure!(!plan.is_empty(), Error::Data("no shard holds a full batch".into()));
        let mut total = 0.0;
        for (s, idx) in &plan {
            let (x, labels) = encode_batch(ring, &shards[*s], idx)?;
            total += reference_step(model, ring, &mut engine, cfg, &x, &labels)?;
        }
        let test_accuracy = match test {
            Some(t) => Some(accuracy(ring, &model.quantize(ring)?, t)?),
            None => None,
        };
        let e = EpochStats {
            epoch: epoch + 1,
            steps: plan.len(),
            mean_loss: total / plan.len() as f64,
            test_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&e);
        stats.push(e);
    }
    Ok(stats)
}

/// Model owner's half of one private step: quantize, run, apply the update.
pub fn model_owner_step(engine: &mut Private, model: &mut Model, cfg: &TrainConfig) -> Result<StepResult> {
    let ring = engine.party.ring;
    let net = model.quantize(&ring)?;
    let res = train_step(engine, &net, None, cfg.batch)?;
    let grads = res
        .decoded_grads()
        .ok_or_else(|| Error::Desync("model owner received no gradients".into()))?;
    model.sgd_update(&grads, cfg.lr, cfg.momentum)?;
    Ok(res)
}

/// Data owner's half of one private step.
pub fn data_owner_step(engine: &mut Private, net: &Network, x: &RingTensor, labels: &[u8]) -> Result<StepResult> {
    train_step(engine, net, Some((x, labels)), labels.len())
}

/// The data owner announces whether another step follows.
pub fn send_continue(p: &mut Party, more: bool) -> Result<()> {
    p.session.set_tag(0);
    p.session.send(msg::CONTROL, vec![more as u8])
}

pub fn recv_continue(p: &mut Party) -> Result<bool> {
    p.session.set_tag(0);
    match p.session.recv(msg::CONTROL)?.as_slice() {
        [0] => Ok(false),
        [1] => Ok(true),
        other => Err(Error::Format(format!("control payload {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_interleaves_and_drops_partial() {
        let plan = round_robin(&[70, 40, 100], 32, 3, 0);
        let shards: Vec<usize> = plan.iter().map(|p| p.0).collect();
        assert_eq!(shards, vec![0, 1, 2, 0, 2, 2]);
        assert!(plan.iter().all(|p| p.1.len() == 32));
        let mut seen: Vec<usize> = plan.iter().filter(|p| p.0 == 2).flat_map(|p| p.1.clone()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 96);
        assert_ne!(round_robin(&[70], 32, 3, 0), round_robin(&[70], 32, 3, 1));
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
