//! Plain minibatch SGD with a fixed learning rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{evaluate, Network};
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after the first epoch whose train accuracy (and test accuracy,
    /// when a test set is given) reaches this value.
    pub target_accuracy: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn spirals(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 8,
            max_epochs: 2000,
            target_accuracy: Some(0.70),
            seed,
        }
    }

    pub fn images(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 0.02,
            batch_size: 10,
            max_epochs: 200,
            target_accuracy: Some(0.99),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub final_loss: f64,
    pub seed: u64,
}

pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    for s in &data.samples {
        if evaluate(net, &s.input)?.0 == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn train(net: &mut Network, train_set: &Dataset, test_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch size, epochs and learning rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids = net.param_ids();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        epochs: 0,
        train_accuracy: 0.0,
        test_accuracy: None,
        final_loss: f64::NAN,
        seed: cfg.seed,
    };
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Option<Vec<Vec<f64>>> = None;
            for &i in batch {
                let sample = &train_set.samples[i];
                let mut tape = Tape::new();
                let step = (|| -> Result<_> {
                    let x = tape.constant(sample.input.clone())?;
                    let fwd = net.forward_on_tape(&mut tape, x, true)?;
                    let loss = tape.softmax_cross_entropy(fwd.logits, &[sample.label])?;
                    let value = tape.value(loss)?.item()?;
                    Ok((value, tape.backward(loss, &ids, false)?))
                })();
                let (value, bundle) = match step {
                    Ok(v) => v,
                    Err(Error::Domain(_)) => return Err(Error::Diverged { epoch }),
                    Err(e) => return Err(e),
                };
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                epoch_loss += value;
                let grads: Vec<&[f64]> = ids.iter().map(|id| bundle.param_grads[id].data()).collect();
                match &mut sum {
                    None => sum = Some(grads.iter().map(|g| g.to_vec()).collect()),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.iter_mut().zip(g.iter()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for (id, g) in ids.iter().zip(sum.expect("nonempty batch")) {
                let p = net.param_mut(id).expect("known parameter");
                for (w, d) in p.data_mut().iter_mut().zip(&g) {
                    *w -= scale * d;
                }
                if !p.all_finite() {
                    return Err(Error::Diverged { epoch });
                }
            }
        }
        report.epochs = epoch;
        report.final_loss = epoch_loss / train_set.len() as f64;
        report.train_accuracy = accuracy(net, train_set)?;
        report.test_accuracy = test_set.map(|t| accuracy(net, t)).transpose()?;
        if let Some(target) = cfg.target_accuracy {
            let test_ok = report.test_accuracy.map_or(true, |a| a >= target);
            if report.train_accuracy >= target && test_ok {
                break;
            }
        }
    }
    Ok(report)
}
