//! Minibatch Adam training with early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::splitmix64;
use crate::tensor::{Adam, ParamStore, Tape, Tensor};

use super::{mse_loss, Network, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        s
    }
}

struct SampleGrads {
    loss: f64,
    params: Vec<Option<Vec<f64>>>,
    prototypes: Vec<f64>,
}

/// Loss and gradients of one sample; the shared prototypes enter as a leaf
/// so they are computed once per batch.
fn sample_grads(net: &Network, store: &ParamStore, protos: &Tensor, s: &Sample) -> Result<SampleGrads> {
    let mut tape = Tape::new();
    let pv = tape.leaf(protos.clone());
    let y = net.forward(&mut tape, store, s, pv)?;
    let loss = mse_loss(&mut tape, y, &s.q_future, net.config.q_beams)?;
    let grads = tape.backward(loss)?;
    Ok(SampleGrads {
        loss: tape.scalar(loss),
        params: grads.for_params(&tape, store),
        prototypes: grads.get(pv).map_or_else(|| vec![0.0; protos.len()], <[f64]>::to_vec),
    })
}

/// Gradients of `sum(E' * g)` with respect to the prototype parameters.
fn prototype_grads(net: &Network, g: Vec<f64>) -> Result<Vec<Option<Vec<f64>>>> {
    let mut tape = Tape::new();
    let e = net.reprogram.prototypes(&mut tape, &net.store)?;
    let gv = tape.constant(Tensor::new(tape.shape(e).to_vec(), g)?);
    let m = tape.mul(e, gv)?;
    let s = tape.sum(m);
    Ok(tape.backward(s)?.for_params(&tape, &net.store))
}

fn sample_loss(net: &Network, protos: &Tensor, s: &Sample) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.constant(protos.clone());
    let y = net.forward(&mut tape, &net.store, s, pv)?;
    let loss = mse_loss(&mut tape, y, &s.q_future, net.config.q_beams)?;
    Ok(tape.scalar(loss))
}

/// Mean loss over `samples`; independent of the thread count.
pub fn mean_loss(net: &Network, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    let protos = net.prototype_tensor()?;
    let losses = samples.par_iter().map(|s| sample_loss(net, &protos, s)).collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn accumulate(acc: &mut [Option<Vec<f64>>], g: Vec<Option<Vec<f64>>>) {
    for (a, g) in acc.iter_mut().zip(g) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Trains in place and leaves the parameters of the epoch with the lowest
/// validation loss (training loss when `val` is empty).
pub fn train(net: &mut Network, train: &[Sample], val: &[Sample]) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for s in train.iter().chain(val) {
        s.check(&net.config)?;
    }
    let cfg = net.config.clone();
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog {
        best_val_loss: f64::INFINITY,
        ..TrainLog::default()
    };
    let mut best: Option<ParamStore> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            let protos = net.prototype_tensor()?;
            let store = &net.store;
            let results = batch
                .par_iter()
                .map(|&i| sample_grads(net, store, &protos, &train[i]))
                .collect::<Result<Vec<_>>>()?;
            let mut acc = vec![None; net.store.len()];
            let mut gp = vec![0.0; protos.len()];
            for r in results {
                total += r.loss;
                accumulate(&mut acc, r.params);
                gp.iter_mut().zip(&r.prototypes).for_each(|(a, b)| *a += b);
            }
            accumulate(&mut acc, prototype_grads(net, gp)?);
            let inv = 1.0 / batch.len() as f64;
            let norm = acc.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt() * inv;
            let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { inv * cfg.grad_clip / norm } else { inv };
            for g in acc.iter_mut().flatten() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            let ramp = (adam.steps() as f64 + 1.0) / cfg.warmup_steps.max(1) as f64;
            adam.lr = cfg.lr * ramp.min(1.0);
            adam.step(&mut net.store, &acc)?;
        }
        let train_loss = total / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        let val_loss = if val.is_empty() { train_loss } else { mean_loss(net, val)? };
        log::info!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best = Some(net.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some(b) = best {
        net.store = b;
    }
    Ok(log)
}
