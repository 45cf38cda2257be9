//! Joint optimization of the detector and SAE losses with Adam, and the
//! post-training fit of per-prototype acceptance thresholds.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::dataset::{check_seen, AttributeTable, GestureSequence};
use crate::detector::{classify, dce_loss, pl_loss, Nearest, ThresholdSet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamGroup;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Which training samples inform the thresholds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdSamples {
    #[default]
    All,
    /// Only samples whose nearest prototype belongs to their own class.
    Correct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gamma: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub threshold_epochs: usize,
    pub threshold_lr: f64,
    pub threshold_samples: ThresholdSamples,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 5.0,
            lambda2: 5.0,
            lambda3: 0.05,
            gamma: 1.0,
            beta: 0.1,
            learning_rate: 0.001,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            threshold_epochs: 1000,
            threshold_lr: 0.05,
            threshold_samples: ThresholdSamples::All,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("learning_rate", self.learning_rate),
            ("threshold_lr", self.threshold_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            dce: 1.0,
            pl: self.lambda1,
            attr: self.lambda2,
            res: self.lambda3,
        }
    }
}

/// Coefficients of the four per-sample loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dce: f64,
    pub pl: f64,
    pub attr: f64,
    pub res: f64,
}

/// Batch-mean loss nodes: each term separately and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub dce: Var,
    pub pl: Var,
    pub attr: Var,
    pub res: Var,
    pub total: Var,
}

/// `mean(dce + λ₁·pl + λ₂·attr + λ₃·res)` over `batch`.
pub fn joint_loss<S: Scalar>(
    g: &mut Graph<S>,
    bound: &crate::params::Bound,
    model: &Model<S>,
    batch: &[&GestureSequence],
    table: &AttributeTable,
    gamma: f64,
    weights: LossWeights,
) -> Result<JointLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyReduction { op: "joint_loss" });
    }
    check_seen(batch, table)?;
    if table.width() != model.config.attributes {
        return Err(Error::dim(
            "attribute table",
            &[table.width()],
            &[model.config.attributes],
        ));
    }
    let labels: Vec<usize> = batch.iter().map(|s| s.class).collect();
    let input = model.batch_of(batch)?;
    let out = model.forward(g, bound, &input)?;
    let (c, k) = (model.bank.classes, model.bank.per_class);
    let dist = model.bank.distances(g, bound, out.projection)?;
    let dce = dce_loss(g, dist, &labels, c, k, gamma)?;
    let pl = pl_loss(g, dist, &labels, c, k)?;
    let targets: Vec<f64> = labels.iter().flat_map(|&y| table.row(y)).collect();
    let targets = g.constant(Tensor::from_f64(&[batch.len(), table.width()], &targets)?);
    let attr = crate::sae::attr_loss(g, out.semantic, targets)?;
    let res = crate::sae::res_loss(g, out.feature, out.reconstruction)?;

    let mut total = g.scale(dce, S::from_f64_lossy(weights.dce));
    for (term, w) in [(pl, weights.pl), (attr, weights.attr), (res, weights.res)] {
        if w != 0.0 {
            let scaled = g.scale(term, S::from_f64_lossy(w));
            total = g.add(total, scaled)?;
        }
    }
    Ok(JointLoss {
        dce: g.mean(dce, None)?,
        pl: g.mean(pl, None)?,
        attr: g.mean(attr, None)?,
        res: g.mean(res, None)?,
        total: g.mean(total, None)?,
    })
}

/// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub lr: f64,
    pub step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(lr: f64, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<S>> = shapes.into_iter().map(Tensor::zeros).collect();
        AdamState {
            lr,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update; `grads[i] = None` leaves parameter `i` and its moments untouched.
    pub fn update(
        &mut self,
        params: &mut [&mut Tensor<S>],
        grads: &[Option<&Tensor<S>>],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(
                "adam",
                &[params.len(), grads.len()],
                &[self.m.len()],
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2) = (S::from_f64_lossy(ADAM_BETA1), S::from_f64_lossy(ADAM_BETA2));
        let (one, lr, eps) = (
            S::one(),
            S::from_f64_lossy(self.lr),
            S::from_f64_lossy(ADAM_EPS),
        );
        let (c1, c2) = (S::from_f64_lossy(c1), S::from_f64_lossy(c2));
        for (i, (p, grad)) in params.iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            if grad.shape() != p.shape() {
                return Err(Error::dim("adam", grad.shape(), p.shape()));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gr), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gr;
                *vi = b2 * *vi + (one - b2) * gr * gr;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Batch-averaged loss terms of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub dce: f64,
    pub pl: f64,
    pub attr: f64,
    pub res: f64,
    pub total: f64,
}

pub fn history_csv(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,l_dce,l_pl,l_attr,l_res,total\n");
    for e in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch, e.dce, e.pl, e.attr, e.res, e.total
        )
        .unwrap();
    }
    out
}

/// Trains every parameter group on the seen-class `samples`.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    samples: &[&GestureSequence],
    table: &AttributeTable,
    config: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    train_groups(
        model,
        samples,
        table,
        config,
        config.weights(),
        &ParamGroup::ALL,
        &mut |_| {},
    )
}

/// Separate training: encoder and prototypes on the detector terms alone,
/// then the SAE with those frozen. Each stage runs `config.epochs` epochs.
pub fn train_two_stage<S: Scalar>(
    model: &mut Model<S>,
    samples: &[&GestureSequence],
    table: &AttributeTable,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLoss),
) -> Result<(Vec<EpochLoss>, Vec<EpochLoss>)> {
    let w = config.weights();
    let detector = LossWeights {
        attr: 0.0,
        res: 0.0,
        ..w
    };
    let first = train_groups(
        model,
        samples,
        table,
        config,
        detector,
        &[ParamGroup::Encoder, ParamGroup::Prototypes],
        on_epoch,
    )?;
    let sae = LossWeights {
        dce: 0.0,
        pl: 0.0,
        ..w
    };
    let second = train_groups(
        model,
        samples,
        table,
        config,
        sae,
        &[ParamGroup::Sae],
        on_epoch,
    )?;
    Ok((first, second))
}

/// Adam on `joint_loss` with the given term weights, updating only the
/// listed parameter groups. Batches are drawn from a per-epoch shuffle seeded
/// by `config.seed`. `on_epoch` sees each epoch's mean losses as they finish.
pub fn train_groups<S: Scalar>(
    model: &mut Model<S>,
    samples: &[&GestureSequence],
    table: &AttributeTable,
    config: &TrainConfig,
    weights: LossWeights,
    groups: &[ParamGroup],
    on_epoch: &mut dyn FnMut(&EpochLoss),
) -> Result<Vec<EpochLoss>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    check_seen(samples, table)?;
    if table.seen_count() != model.bank.classes {
        return Err(Error::dim(
            "seen classes",
            &[table.seen_count()],
            &[model.bank.classes],
        ));
    }
    let trainable = |grp: ParamGroup| groups.contains(&grp);
    let ids: Vec<_> = model.params.ids().collect();
    let mut adam = AdamState::<S>::new(
        config.learning_rate,
        ids.iter().map(|&id| model.params.get(id).shape()),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&GestureSequence> = chunk.iter().map(|&i| samples[i]).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, trainable);
            let loss = joint_loss(&mut g, &bound, model, &batch, table, config.gamma, weights)?;
            let total = g.value(loss.total).item().to_f64_lossy();
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    loss: total,
                });
            }
            for (acc, v) in sums
                .iter_mut()
                .zip([loss.dce, loss.pl, loss.attr, loss.res, loss.total])
            {
                *acc += g.value(v).item().to_f64_lossy();
            }
            batches += 1;
            g.backward(loss.total)?;
            let grads: Vec<Option<Tensor<S>>> = ids
                .iter()
                .map(|&id| {
                    if trainable(model.params.group(id)) {
                        g.grad(bound.var(id)).cloned()
                    } else {
                        None
                    }
                })
                .collect();
            let grad_refs: Vec<Option<&Tensor<S>>> = grads.iter().map(Option::as_ref).collect();
            let mut params: Vec<&mut Tensor<S>> = model.params.tensors_mut();
            adam.update(&mut params, &grad_refs)?;
        }
        let n = batches as f64;
        let loss = EpochLoss {
            epoch,
            dce: sums[0] / n,
            pl: sums[1] / n,
            attr: sums[2] / n,
            res: sums[3] / n,
            total: sums[4] / n,
        };
        on_epoch(&loss);
        history.push(loss);
    }
    Ok(history)
}

/// `(1/N)·Σ [Δd > 0]·(Δd + 1) + β·‖Th‖²` with `Δd = d_m − Th(nearest)`.
pub fn threshold_loss(nearest: &[Nearest], thresholds: &ThresholdSet, beta: f64) -> f64 {
    let n = nearest.len().max(1) as f64;
    let hinge: f64 = nearest
        .iter()
        .map(|s| {
            let delta = s.distance - thresholds.get(s.class, s.prototype);
            if delta > 0.0 {
                delta + 1.0
            } else {
                0.0
            }
        })
        .sum();
    hinge / n + beta * thresholds.norm_sq()
}

/// Nearest prototype of every training sample, under frozen parameters.
/// With [`ThresholdSamples::Correct`] samples nearest to another class are dropped.
pub fn threshold_assignments<S: Scalar>(
    model: &Model<S>,
    samples: &[&GestureSequence],
    table: &AttributeTable,
    which: ThresholdSamples,
) -> Result<Vec<Nearest>> {
    check_seen(samples, table)?;
    let emb = model.embed(samples, 64)?;
    let protos = model.prototypes();
    let mut out = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let nearest = classify(emb.projection.row(i), protos)?;
        if which == ThresholdSamples::All || nearest.class == s.class {
            out.push(nearest);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdFit {
    pub thresholds: ThresholdSet,
    /// Loss before the first step and after every epoch.
    pub loss: Vec<f64>,
}

/// Minimizes [`threshold_loss`] over the thresholds alone.
///
/// The loss separates over prototypes, so each radius descends on its own
/// term: starting from 0, it steps along the branch subgradient
/// `−(rejected share of its samples) + 2β·th·N/n` and a step that would raise
/// its term is refused and the step size halved. Radii stay ≥ 0.
pub fn fit_threshold_set(
    nearest: &[Nearest],
    classes: usize,
    per_class: usize,
    beta: f64,
    lr: f64,
    epochs: usize,
) -> ThresholdFit {
    let protos = classes * per_class;
    let n_total = nearest.len().max(1) as f64;
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); protos];
    for s in nearest {
        members[s.class * per_class + s.prototype].push(s.distance);
    }
    // one prototype's share of the loss
    let term = |d: &[f64], th: f64| -> f64 {
        let hinge: f64 = d.iter().filter(|&&x| x > th).map(|&x| x - th + 1.0).sum();
        hinge / n_total + beta * th * th
    };
    let mut th = vec![0.0; protos];
    let mut step = vec![lr; protos];
    let set = |values: &[f64]| ThresholdSet {
        classes,
        per_class,
        values: values.to_vec(),
    };
    let mut loss = vec![threshold_loss(nearest, &set(&th), beta)];
    for _ in 0..epochs {
        for p in 0..protos {
            let d = &members[p];
            if d.is_empty() {
                continue;
            }
            let n = d.len() as f64;
            let rejected = d.iter().filter(|&&x| x > th[p]).count() as f64;
            let grad = -rejected / n + 2.0 * beta * th[p] * n_total / n;
            let candidate = (th[p] - step[p] * grad).max(0.0);
            if term(d, candidate) <= term(d, th[p]) {
                th[p] = candidate;
            } else {
                step[p] *= 0.5;
            }
        }
        loss.push(threshold_loss(nearest, &set(&th), beta));
    }
    ThresholdFit {
        thresholds: set(&th),
        loss,
    }
}

/// Fits thresholds for `model` on seen-class training data; parameters are untouched.
pub fn fit_thresholds<S: Scalar>(
    model: &Model<S>,
    samples: &[&GestureSequence],
    table: &AttributeTable,
    config: &TrainConfig,
) -> Result<ThresholdFit> {
    config.validate()?;
    let nearest = threshold_assignments(model, samples, table, config.threshold_samples)?;
    Ok(fit_threshold_set(
        &nearest,
        model.bank.classes,
        model.bank.per_class,
        config.beta,
        config.threshold_lr,
        config.threshold_epochs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn near(class: usize, distance: f64) -> Nearest {
        Nearest {
            class,
            prototype: 0,
            distance,
        }
    }

    #[test]
    fn threshold_loss_branches() {
        let th = ThresholdSet::zeros(2, 1);
        assert_eq!(threshold_loss(&[near(0, 0.0), near(1, 0.0)], &th, 0.3), 0.0);
        assert_eq!(threshold_loss(&[near(0, 0.5)], &th, 0.0), 1.5);
        let th = ThresholdSet::uniform(2, 1, 0.5);
        // Δd = 0 accepts; β·(0.25 + 0.25)
        assert!((threshold_loss(&[near(0, 0.5)], &th, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Tensor::<f64>::vector(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let zero = Tensor::zeros(&[3]);
        let mut adam = AdamState::new(0.1, [p.shape()]);
        for _ in 0..3 {
            adam.update(&mut [&mut p], &[Some(&zero)]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::vector(vec![0.0, 0.0]);
        let g = Tensor::vector(vec![4.0, -0.5]);
        let mut adam = AdamState::new(0.01, [p.shape()]);
        adam.update(&mut [&mut p], &[Some(&g)]).unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-9);
        assert!((p.data()[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn zero_beta_accepts_all_training_samples() {
        let nearest: Vec<_> = (0..40).map(|i| near(i % 2, 0.05 * (i as f64))).collect();
        let fit = fit_threshold_set(&nearest, 2, 1, 0.0, 0.05, 2000);
        assert!(nearest
            .iter()
            .all(|s| s.distance <= fit.thresholds.get(s.class, 0)));
    }

    #[test]
    fn large_beta_drives_thresholds_to_zero() {
        let nearest: Vec<_> = (0..40)
            .map(|i| near(i % 2, 0.1 + 0.01 * i as f64))
            .collect();
        let fit = fit_threshold_set(&nearest, 2, 1, 1e6, 0.05, 500);
        assert!(fit.thresholds.values.iter().all(|&t| t < 1e-6));
    }

    #[test]
    fn fit_loss_never_increases() {
        let nearest: Vec<_> = (0..90)
            .map(|i| near(i % 3, ((i * 37) % 17) as f64 * 0.07))
            .collect();
        for beta in [0.0, 0.01, 0.1, 1.0] {
            let fit = fit_threshold_set(&nearest, 3, 1, beta, 0.2, 300);
            assert!(
                fit.loss.windows(2).all(|w| w[1] <= w[0] + 1e-9),
                "beta {beta}"
            );
        }
    }

    #[test]
    fn empty_prototype_keeps_zero_threshold() {
        let fit = fit_threshold_set(&[near(0, 0.3)], 2, 1, 0.01, 0.1, 100);
        assert!(fit.thresholds.get(0, 0) >= 0.3);
        assert_eq!(fit.thresholds.get(1, 0), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lambda2: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
