//! Per-image self-supervised training.
//!
//! Every iteration runs the network, takes the per-pixel argmax of the
//! normalized response as pseudo-labels, evaluates the combined loss against
//! those labels and takes one momentum-SGD step. Labels are constants of the
//! step; no gradient flows through the argmax.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::{total_loss, LossBreakdown, LossOptions, LossWeights};
use crate::segnet::{init_params, ParamSet, SegNetConfig};
use crate::tensor::{sgd_step, Float, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub max_iters: usize,
    /// Stop once the number of distinct labels drops to this value.
    pub min_labels: usize,
    /// Stop once the label map is unchanged for this many iterations.
    pub stability_window: usize,
    pub weights: LossWeights,
    pub loss: LossOptions,
    /// Network width, i.e. the maximum number of clusters.
    pub filters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::dermoscopy()
    }
}

impl TrainConfig {
    /// Skin-lesion profile: learning rate 0.1.
    pub fn dermoscopy() -> Self {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            max_iters: 500,
            min_labels: 3,
            stability_window: 10,
            weights: LossWeights::default(),
            loss: LossOptions::default(),
            filters: 100,
            seed: 0,
        }
    }

    /// Ultrasound profile: learning rate 0.05.
    pub fn ultrasound() -> Self {
        TrainConfig {
            lr: 0.05,
            ..Self::dermoscopy()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_weights(mut self, weights: LossWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.max_iters < 1 {
            return bad("max_iters must be >= 1".into());
        }
        if self.min_labels < 2 {
            return bad(format!("min_labels must be >= 2, got {}", self.min_labels));
        }
        if self.stability_window < 1 {
            return bad("stability_window must be >= 1".into());
        }
        self.weights.validate()
    }

    pub fn net_config(&self, input_channels: usize) -> SegNetConfig {
        SegNetConfig::new(input_channels).with_filters(self.filters)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    LabelFloor,
    Stable,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxIters => "max_iters",
            StopReason::LabelFloor => "label_floor",
            StopReason::Stable => "stable",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub num_labels: usize,
    /// Fraction of pixels relabelled since the previous iteration (1.0 on
    /// the first).
    pub changed_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    pub iterations: Vec<IterationRecord>,
    pub final_labels: LabelMap,
    pub stop_reason: StopReason,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str = "iteration,ce,ss,cc,total,num_labels,changed_fraction";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.iterations {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
                r.iteration,
                r.loss.ce,
                r.loss.ss,
                r.loss.cc,
                r.loss.total,
                r.num_labels,
                r.changed_fraction
            );
        }
        s
    }

    pub fn initial_num_labels(&self) -> usize {
        self.iterations.first().map_or(0, |r| r.num_labels)
    }
}

/// Per-pixel argmax over channels; ties go to the lowest channel index.
pub fn assign_labels<T: Float>(s_hat: &Tensor<T>) -> Result<LabelMap> {
    let (c, h, w) = s_hat.dims3("assign_labels")?;
    let hw = h * w;
    let d = s_hat.data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * hw + p] > d[best * hw + p] {
                    best = ch;
                }
            }
            best
        })
        .collect();
    LabelMap::new(h, w, labels)
}

fn validate_image<T: Float>(image: &Tensor<T>) -> Result<()> {
    let (_, h, w) = image.dims3("train")?;
    if h < 3 || w < 3 {
        return Err(Error::ImageTooSmall { height: h, width: w });
    }
    if let Some(v) = image
        .data()
        .iter()
        .find(|v| !(v.is_finite() && **v >= T::zero() && **v <= T::one()))
    {
        return Err(Error::InvalidConfig(format!(
            "image pixels must be finite and in [0, 1], found {v}"
        )));
    }
    Ok(())
}

/// Training state for one image.
pub struct Session<T: Float> {
    image: Tensor<T>,
    config: TrainConfig,
    params: ParamSet<T>,
    iteration: usize,
    previous: Option<LabelMap>,
}

struct Pending<T: Float> {
    tape: Tape<T>,
    vars: Vec<crate::segnet::LayerVars>,
    loss: crate::tensor::Var,
    outcome: StepOutcome,
}

/// What one call to [`Session::step`] observed.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub record: IterationRecord,
    pub labels: LabelMap,
}

impl<T: Float> Session<T> {
    pub fn new(image: Tensor<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        validate_image(&image)?;
        let (c, _, _) = image.dims3("train")?;
        let params = init_params(&config.net_config(c), config.seed)?;
        Ok(Session {
            image,
            config,
            params,
            iteration: 0,
            previous: None,
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Current pseudo-labels without recording anything.
    pub fn current_labels(&self) -> Result<LabelMap> {
        assign_labels(&self.params.forward(&self.image)?)
    }

    /// Forward pass, pseudo-labels and loss. `fixed_labels` replaces the
    /// argmax targets.
    fn forward_pass(&mut self, fixed_labels: Option<&LabelMap>) -> Result<Pending<T>> {
        self.iteration += 1;
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let x = tape.constant(self.image.clone());
        let s_hat = self.params.forward_on_tape(&mut tape, &vars, x)?;
        let labels = assign_labels(tape.value(s_hat))?;
        let target = fixed_labels.unwrap_or(&labels);
        let (loss, breakdown) = total_loss(
            &mut tape,
            s_hat,
            target,
            &self.config.weights,
            &self.config.loss,
        )?;
        if !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                ce: breakdown.ce,
                ss: breakdown.ss,
                cc: breakdown.cc,
                total: breakdown.total,
            });
        }
        let changed_fraction = self
            .previous
            .as_ref()
            .map_or(1.0, |prev| labels.changed_fraction(prev));
        let record = IterationRecord {
            iteration: self.iteration,
            loss: breakdown,
            num_labels: labels.num_distinct(),
            changed_fraction,
        };
        self.previous = Some(labels.clone());
        Ok(Pending {
            tape,
            vars,
            loss,
            outcome: StepOutcome { record, labels },
        })
    }

    /// Backward pass and momentum-SGD update.
    fn update(&mut self, pending: Pending<T>) -> Result<StepOutcome> {
        let Pending {
            mut tape,
            vars,
            loss,
            outcome,
        } = pending;
        tape.backward(loss)?;
        self.params.collect_grads(&tape, &vars);
        sgd_step(
            self.params.params_mut(),
            T::from_f64_lossy(self.config.lr),
            T::from_f64_lossy(self.config.momentum),
        )?;
        Ok(outcome)
    }

    /// One full training iteration against the fresh argmax labels.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let pending = self.forward_pass(None)?;
        self.update(pending)
    }

    /// One iteration against caller-supplied targets.
    pub fn step_with_labels(&mut self, labels: &LabelMap) -> Result<StepOutcome> {
        let pending = self.forward_pass(Some(labels))?;
        self.update(pending)
    }

    /// Runs until a stopping rule fires. Stopping rules are checked on each
    /// iteration's labels before its update, so the returned map is the one
    /// the last trace record describes.
    pub fn train(mut self) -> Result<(LabelMap, TrainTrace, ParamSet<T>)> {
        let mut iterations = Vec::new();
        let mut unchanged = 0;
        let mut prev: Option<LabelMap> = None;
        loop {
            let pending = self.forward_pass(None)?;
            let labels = pending.outcome.labels.clone();
            iterations.push(pending.outcome.record);
            if labels.num_distinct() <= self.config.min_labels {
                return Ok(self.finish(labels, iterations, StopReason::LabelFloor));
            }
            if prev.as_ref() == Some(&labels) {
                unchanged += 1;
            } else {
                unchanged = 0;
            }
            if unchanged >= self.config.stability_window {
                return Ok(self.finish(labels, iterations, StopReason::Stable));
            }
            if self.iteration >= self.config.max_iters {
                return Ok(self.finish(labels, iterations, StopReason::MaxIters));
            }
            self.update(pending)?;
            prev = Some(labels);
        }
    }

    fn finish(
        self,
        labels: LabelMap,
        iterations: Vec<IterationRecord>,
        stop_reason: StopReason,
    ) -> (LabelMap, TrainTrace, ParamSet<T>) {
        let trace = TrainTrace {
            iterations,
            final_labels: labels.clone(),
            stop_reason,
        };
        (labels, trace, self.params)
    }
}

/// Trains a fresh network on one image and returns its final labels.
/// Deterministic for a fixed `(image, config)`.
pub fn train_single_image<T: Float>(
    image: &Tensor<T>,
    config: &TrainConfig,
) -> Result<(LabelMap, TrainTrace)> {
    let (labels, trace, _) = Session::new(image.clone(), *config)?.train()?;
    Ok((labels, trace))
}

/// Loss-term ablation: CE only, CE + sparse spatial, and all three terms,
/// each trained from the same seed.
#[derive(Clone, Debug)]
pub struct Ablation {
    pub ce: (LabelMap, TrainTrace),
    pub ce_ss: (LabelMap, TrainTrace),
    pub ce_ss_cc: (LabelMap, TrainTrace),
}

impl Ablation {
    pub const SETTINGS: [(&'static str, LossWeights); 3] = [
        ("CE", LossWeights::new(1.0, 0.0, 0.0)),
        ("CE+SS", LossWeights::new(1.0, 1.0, 0.0)),
        ("CE+SS+CC", LossWeights::new(1.0, 1.0, 1.0)),
    ];

    pub fn runs(&self) -> [&(LabelMap, TrainTrace); 3] {
        [&self.ce, &self.ce_ss, &self.ce_ss_cc]
    }
}

pub fn ablation_run<T: Float>(image: &Tensor<T>, config: &TrainConfig) -> Result<Ablation> {
    let [a, b, c] = Ablation::SETTINGS
        .map(|(_, w)| train_single_image(image, &config.with_weights(w)));
    Ok(Ablation {
        ce: a?,
        ce_ss: b?,
        ce_ss_cc: c?,
    })
}
