//! Self-supervised clustering losses.
//!
//! * cross-entropy of the channel softmax against the per-pixel argmax
//!   labels,
//! * sparse spatial loss: L1 norm of horizontal and vertical differences of
//!   the response map (or, optionally, of its softmax),
//! * context consistency: each softmax channel's mass-weighted squared
//!   distance to its own spatial centroid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{Backward, Float, Tape, Tensor, Var};

/// Probabilities below this are clamped before taking the logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub ss: f64,
    pub cc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 1.0,
            ss: 1.0,
            cc: 1.0,
        }
    }
}

impl LossWeights {
    pub const fn new(ce: f64, ss: f64, cc: f64) -> Self {
        LossWeights { ce, ss, cc }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("ce", self.ce), ("ss", self.ss), ("cc", self.cc)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "loss weight {name} must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Which neighbour pairs the sparse spatial loss sums over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialBounds {
    /// Every horizontally and vertically adjacent pair.
    #[default]
    AllPairs,
    /// Only pixels with both a right and a lower neighbour contribute,
    /// each adding its right step and its down step.
    Interior,
}

/// How the centroid enters the context-consistency gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CentroidGradient {
    /// Differentiate through the centroid.
    #[default]
    Full,
    /// Treat centroids as constants for the current step.
    Detached,
}

/// The map the sparse spatial loss differences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialInput {
    /// The normalized response map itself.
    #[default]
    Response,
    /// Its channel softmax.
    Probabilities,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Divide CE by `H*W`, SS by `C*H*W` and CC by `H^2 + W^2`. Raw sums
    /// otherwise.
    pub normalize: bool,
    pub spatial_bounds: SpatialBounds,
    pub spatial_input: SpatialInput,
    pub centroid_gradient: CentroidGradient,
    /// Constant factor on the sparse spatial term, on top of its weight.
    pub ss_gain: f64,
    /// Constant factor on the context-consistency term.
    pub cc_gain: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            normalize: true,
            spatial_bounds: SpatialBounds::AllPairs,
            spatial_input: SpatialInput::Response,
            centroid_gradient: CentroidGradient::Full,
            ss_gain: 70.0,
            cc_gain: 0.2,
        }
    }
}

impl LossOptions {
    /// Unnormalized sums with unit gains.
    pub fn raw() -> Self {
        LossOptions {
            normalize: false,
            ss_gain: 1.0,
            cc_gain: 1.0,
            ..Self::default()
        }
    }

    /// The terms exactly as the losses define them: normalized, unit gains.
    pub fn unit() -> Self {
        LossOptions {
            ss_gain: 1.0,
            cc_gain: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("ss_gain", self.ss_gain), ("cc_gain", self.cc_gain)] {
            if !g.is_finite() || g < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and non-negative, got {g}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ss: f64,
    pub cc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.ss.is_finite() && self.cc.is_finite() && self.total.is_finite()
    }
}

/// Spatial centre of mass of one channel, in 0-indexed pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Centroid {
    pub row: f64,
    pub col: f64,
}

struct CrossEntropy<T> {
    inputs: [Var; 1],
    labels: Vec<usize>,
    scale: T,
}

impl<T: Float> Backward<T> for CrossEntropy<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, tape: &Tape<T>, _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let probs = tape.value(self.inputs[0]);
        let hw = self.labels.len();
        let clamp = T::from_f64_lossy(PROB_CLAMP);
        let mut d = vec![T::zero(); probs.numel()];
        for (p, &label) in self.labels.iter().enumerate() {
            let i = label * hw + p;
            let v = probs.data()[i];
            if v > clamp {
                d[i] = -grad[0] * self.scale / v;
            }
        }
        vec![Some(d)]
    }
}

/// Mean negative log-probability of each pixel's label:
/// `-(1/HW) sum_p ln probs[label_p, p]` (no `1/HW` in raw mode).
pub fn cross_entropy<T: Float>(
    tape: &mut Tape<T>,
    probs: Var,
    labels: &LabelMap,
    normalize: bool,
) -> Result<Var> {
    const OP: &str = "cross_entropy";
    let value = tape.value(probs);
    let (c, h, w) = value.dims3(OP)?;
    if labels.height() != h {
        return Err(Error::ShapeMismatch { op: OP, dim: "height", expected: h, found: labels.height() });
    }
    if labels.width() != w {
        return Err(Error::ShapeMismatch { op: OP, dim: "width", expected: w, found: labels.width() });
    }
    if let Some((pixel, &label)) = labels.data().iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(Error::LabelOutOfRange { label, pixel, channels: c });
    }
    let hw = h * w;
    let scale = if normalize { T::one() / T::from_usize(hw).unwrap() } else { T::one() };
    let clamp = T::from_f64_lossy(PROB_CLAMP);
    let sum: T = labels
        .data()
        .iter()
        .enumerate()
        .map(|(p, &l)| -value.data()[l * hw + p].max(clamp).ln())
        .sum();
    Ok(tape.record(
        Tensor::scalar(sum * scale),
        Box::new(CrossEntropy { inputs: [probs], labels: labels.data().to_vec(), scale }),
    ))
}

fn sign<T: Float>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Calls `f(a, b)` for every flat index pair the sparse spatial loss compares.
fn for_each_pair(c: usize, h: usize, w: usize, bounds: SpatialBounds, mut f: impl FnMut(usize, usize)) {
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let i = base + y * w + x;
                match bounds {
                    SpatialBounds::AllPairs => {
                        if x + 1 < w {
                            f(i + 1, i);
                        }
                        if y + 1 < h {
                            f(i + w, i);
                        }
                    }
                    SpatialBounds::Interior => {
                        if x + 1 < w && y + 1 < h {
                            f(i + 1, i);
                            f(i + w, i);
                        }
                    }
                }
            }
        }
    }
}

struct SparseSpatial<T> {
    inputs: [Var; 1],
    bounds: SpatialBounds,
    scale: T,
}

impl<T: Float> Backward<T> for SparseSpatial<T> {
    fn name(&self) -> &'static str {
        "sparse_spatial"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, tape: &Tape<T>, _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = tape.value(self.inputs[0]);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let s = x.data();
        let g = grad[0] * self.scale;
        let mut d = vec![T::zero(); s.len()];
        for_each_pair(c, h, w, self.bounds, |a, b| {
            let sg = sign(s[a] - s[b]) * g;
            d[a] = d[a] + sg;
            d[b] = d[b] - sg;
        });
        vec![Some(d)]
    }
}

/// Anisotropic total variation of a `[C, H, W]` map. Maps with a single row
/// or column have no neighbour pairs in both directions and yield 0.
pub fn sparse_spatial<T: Float>(
    tape: &mut Tape<T>,
    map: Var,
    bounds: SpatialBounds,
    normalize: bool,
) -> Result<Var> {
    let value = tape.value(map);
    let (c, h, w) = value.dims3("sparse_spatial")?;
    let scale = if normalize {
        T::one() / T::from_usize(c * h * w).unwrap()
    } else {
        T::one()
    };
    if h < 2 || w < 2 {
        log::warn!("sparse spatial loss on a degenerate {h}x{w} map is 0");
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let s = value.data();
    let mut total = T::zero();
    for_each_pair(c, h, w, bounds, |a, b| total = total + (s[a] - s[b]).abs());
    Ok(tape.record(
        Tensor::scalar(total * scale),
        Box::new(SparseSpatial { inputs: [map], bounds, scale }),
    ))
}

/// Channel mass `M_c` and mass-weighted mean coordinates.
fn channel_moments<T: Float>(plane: &[T], h: usize, w: usize) -> (T, T, T) {
    let mut mass = T::zero();
    let mut sr = T::zero();
    let mut sc = T::zero();
    for y in 0..h {
        let fy = T::from_usize(y).unwrap();
        for x in 0..w {
            let p = plane[y * w + x];
            mass = mass + p;
            sr = sr + fy * p;
            sc = sc + T::from_usize(x).unwrap() * p;
        }
    }
    let mass = mass.max(T::min_positive_value());
    (mass, sr / mass, sc / mass)
}

/// Per-channel centre of mass of a probability map.
pub fn cluster_centroids<T: Float>(probs: &Tensor<T>) -> Result<Vec<Centroid>> {
    let (_, h, w) = probs.dims3("cluster_centroids")?;
    Ok(probs
        .data()
        .chunks_exact(h * w)
        .map(|plane| {
            let (_, r, c) = channel_moments(plane, h, w);
            Centroid { row: r.as_f64(), col: c.as_f64() }
        })
        .collect())
}

struct ContextConsistency<T> {
    inputs: [Var; 1],
    scale: T,
    centroid_gradient: CentroidGradient,
}

impl<T: Float> Backward<T> for ContextConsistency<T> {
    fn name(&self) -> &'static str {
        "context_consistency"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, tape: &Tape<T>, _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = tape.value(self.inputs[0]);
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let g = grad[0] * self.scale;
        let two = T::from_f64_lossy(2.0);
        let mut d = vec![T::zero(); x.numel()];
        for (plane, out) in x.data().chunks_exact(h * w).zip(d.chunks_exact_mut(h * w)) {
            let (mass, cr, cc) = channel_moments(plane, h, w);
            let coord = |i: usize| (T::from_usize(i / w).unwrap() - cr, T::from_usize(i % w).unwrap() - cc);
            let mut loss = T::zero();
            let mut gr = T::zero();
            let mut gc = T::zero();
            for (i, &p) in plane.iter().enumerate() {
                let (dr, dc) = coord(i);
                loss = loss + p * (dr * dr + dc * dc);
                gr = gr + p * dr;
                gc = gc + p * dc;
            }
            loss = loss / mass;
            // dL/dC = -2 sum_p p (x - C) / M
            let (gr, gc) = (-two * gr / mass, -two * gc / mass);
            for (i, o) in out.iter_mut().enumerate() {
                let (dr, dc) = coord(i);
                let mut v = (dr * dr + dc * dc - loss) / mass;
                if self.centroid_gradient == CentroidGradient::Full {
                    v = v + (gr * dr + gc * dc) / mass;
                }
                *o = g * v;
            }
        }
        vec![Some(d)]
    }
}

/// Sum over channels of the mass-weighted mean squared distance between
/// each pixel and the channel's centroid, divided by `H^2 + W^2` when
/// normalizing.
pub fn context_consistency<T: Float>(
    tape: &mut Tape<T>,
    probs: Var,
    normalize: bool,
    centroid_gradient: CentroidGradient,
) -> Result<Var> {
    let value = tape.value(probs);
    let (_, h, w) = value.dims3("context_consistency")?;
    let scale = if normalize {
        T::one() / T::from_usize(h * h + w * w).unwrap()
    } else {
        T::one()
    };
    let mut total = T::zero();
    for plane in value.data().chunks_exact(h * w) {
        let (mass, cr, cc) = channel_moments(plane, h, w);
        let mut acc = T::zero();
        for (i, &p) in plane.iter().enumerate() {
            let dr = T::from_usize(i / w).unwrap() - cr;
            let dc = T::from_usize(i % w).unwrap() - cc;
            acc = acc + p * (dr * dr + dc * dc);
        }
        total = total + acc / mass;
    }
    Ok(tape.record(
        Tensor::scalar(total * scale),
        Box::new(ContextConsistency { inputs: [probs], scale, centroid_gradient }),
    ))
}

/// Softmaxes `logits` once and combines the three terms. The breakdown holds
/// each term after its gain, so `total = w . breakdown`.
pub fn total_loss<T: Float>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &LabelMap,
    weights: &LossWeights,
    options: &LossOptions,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    options.validate()?;
    let probs = tape.softmax_channels(logits)?;
    let ce = cross_entropy(tape, probs, labels, options.normalize)?;
    let ss_input = match options.spatial_input {
        SpatialInput::Response => logits,
        SpatialInput::Probabilities => probs,
    };
    let ss = sparse_spatial(tape, ss_input, options.spatial_bounds, options.normalize)?;
    let cc = context_consistency(tape, probs, options.normalize, options.centroid_gradient)?;
    let total = tape.linear_combination(&[
        (ce, T::from_f64_lossy(weights.ce)),
        (ss, T::from_f64_lossy(weights.ss * options.ss_gain)),
        (cc, T::from_f64_lossy(weights.cc * options.cc_gain)),
    ])?;
    let breakdown = LossBreakdown {
        ce: tape.value(ce).item().as_f64(),
        ss: tape.value(ss).item().as_f64() * options.ss_gain,
        cc: tape.value(cc).item().as_f64() * options.cc_gain,
        total: tape.value(total).item().as_f64(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_var(tape: &mut Tape<f64>, c: usize, h: usize, w: usize, data: Vec<f64>) -> Var {
        tape.param(Tensor::new([c, h, w], data).unwrap())
    }

    #[test]
    fn ce_uniform_is_ln_c() {
        let mut tape = Tape::new();
        let p = probs_var(&mut tape, 4, 2, 3, vec![0.25; 24]);
        let labels = LabelMap::new(2, 3, vec![0, 1, 2, 3, 3, 0]).unwrap();
        let l = cross_entropy(&mut tape, p, &labels, true).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_single_pixel() {
        let mut tape = Tape::new();
        let p = probs_var(&mut tape, 2, 1, 1, vec![0.25, 0.75]);
        let l = cross_entropy(&mut tape, p, &LabelMap::filled(1, 1, 1), true).unwrap();
        assert!((tape.value(l).item() + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_one_hot_is_near_zero() {
        let eps = 1e-9;
        let mut tape = Tape::new();
        let p = probs_var(&mut tape, 2, 1, 2, vec![1.0 - eps, eps, eps, 1.0 - eps]);
        let labels = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let l = cross_entropy(&mut tape, p, &labels, true).unwrap();
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn ce_clamps_zero_probability() {
        let mut tape = Tape::new();
        let p = probs_var(&mut tape, 2, 1, 1, vec![1.0, 0.0]);
        let l = cross_entropy(&mut tape, p, &LabelMap::filled(1, 1, 1), false).unwrap();
        assert!((tape.value(l).item() + PROB_CLAMP.ln()).abs() < 1e-9);
        tape.backward(l).unwrap();
        assert!(tape.grad(p).unwrap().is_finite());
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let p = probs_var(&mut tape, 2, 1, 2, vec![0.5; 4]);
        let labels = LabelMap::new(1, 2, vec![0, 2]).unwrap();
        match cross_entropy(&mut tape, p, &labels, true) {
            Err(Error::LabelOutOfRange { label: 2, pixel: 1, channels: 2 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ss_constant_map_is_zero() {
        let mut tape = Tape::new();
        let p = probs_var(&mut tape, 3, 4, 5, vec![0.7; 60]);
        let l = sparse_spatial(&mut tape, p, SpatialBounds::AllPairs, true).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn ss_interior_two_by_two() {
        let mut tape = Tape::new();
        let p = probs_var(&mut tape, 1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        let strict = sparse_spatial(&mut tape, p, SpatialBounds::Interior, false).unwrap();
        assert_eq!(tape.value(strict).item(), 1.0);
        // all pairs also counts the bottom row step
        let full = sparse_spatial(&mut tape, p, SpatialBounds::AllPairs, false).unwrap();
        assert_eq!(tape.value(full).item(), 2.0);
    }

    #[test]
    fn ss_degenerate_map_is_zero() {
        let mut tape = Tape::new();
        let p = probs_var(&mut tape, 1, 1, 4, vec![0.0, 1.0, 0.0, 1.0]);
        let l = sparse_spatial(&mut tape, p, SpatialBounds::AllPairs, true).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
    }

    #[test]
    fn centroid_examples() {
        let uniform = Tensor::full([1, 3, 3], 1.0 / 9.0);
        let c = cluster_centroids(&uniform).unwrap()[0];
        assert!((c.row - 1.0).abs() < 1e-12 && (c.col - 1.0).abs() < 1e-12);

        let mut point = Tensor::<f64>::zeros([1, 4, 7]);
        point.data_mut()[2 * 7 + 5] = 1.0;
        let c = cluster_centroids(&point).unwrap()[0];
        assert_eq!((c.row, c.col), (2.0, 5.0));

        let mut two = Tensor::<f64>::zeros([1, 5, 1]);
        two.data_mut()[0] = 0.25;
        two.data_mut()[4] = 0.75;
        let c = cluster_centroids(&two).unwrap()[0];
        assert!((c.row - 3.0).abs() < 1e-12);
    }

    #[test]
    fn cc_point_masses_are_zero() {
        let mut tape = Tape::new();
        let mut data = vec![0.0; 2 * 9];
        data[4] = 1.0;
        data[9 + 8] = 1.0;
        let p = probs_var(&mut tape, 2, 3, 3, data);
        let l = context_consistency(&mut tape, p, false, CentroidGradient::Full).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn cc_two_point_mass() {
        let mut tape = Tape::new();
        let p = probs_var(&mut tape, 1, 1, 3, vec![0.5, 0.0, 0.5]);
        let l = context_consistency(&mut tape, p, false, CentroidGradient::Full).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cc_detached_gradient_matches_full() {
        // the centroid is the minimiser of the weighted spread, so the
        // centroid path contributes nothing to the gradient
        let data: Vec<f64> = (0..2 * 16).map(|i| ((i * 7) % 11) as f64 / 11.0 + 0.05).collect();
        let grads: Vec<Vec<f64>> = [CentroidGradient::Full, CentroidGradient::Detached]
            .into_iter()
            .map(|mode| {
                let mut tape = Tape::new();
                let p = probs_var(&mut tape, 2, 4, 4, data.clone());
                let l = context_consistency(&mut tape, p, true, mode).unwrap();
                tape.backward(l).unwrap();
                tape.grad(p).unwrap().into_data()
            })
            .collect();
        for (a, b) in grads[0].iter().zip(&grads[1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn logits(c: usize, h: usize, w: usize, seed: usize) -> Tensor<f64> {
        Tensor::from_fn([c, h, w], |i| (((i + seed) * 7919) % 101) as f64 / 25.0 - 2.0)
    }

    fn total(weights: LossWeights, options: &LossOptions) -> (f64, LossBreakdown, Tensor<f64>) {
        let mut tape = Tape::new();
        let x = tape.param(logits(4, 6, 6, 1));
        let labels = LabelMap::new(6, 6, (0..36).map(|i| (i * 5) % 4).collect()).unwrap();
        let (l, b) = total_loss(&mut tape, x, &labels, &weights, options).unwrap();
        tape.backward(l).unwrap();
        (tape.value(l).item(), b, tape.grad(x).unwrap())
    }

    #[test]
    fn total_is_the_weighted_breakdown() {
        for options in [LossOptions::default(), LossOptions::unit(), LossOptions::raw()] {
            let (t, b, _) = total(LossWeights::new(1.0, 0.0, 0.0), &options);
            assert!((t - b.ce).abs() < 1e-12);
            let (t, b, _) = total(LossWeights::default(), &options);
            assert!((t - (b.ce + b.ss + b.cc)).abs() < 1e-9);
            assert_eq!(t, b.total);
            let (t, b, _) = total(LossWeights::new(0.5, 2.0, 3.0), &options);
            assert!((t - (0.5 * b.ce + 2.0 * b.ss + 3.0 * b.cc)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_give_zero_loss_and_gradient() {
        let (t, _, g) = total(LossWeights::new(0.0, 0.0, 0.0), &LossOptions::default());
        assert_eq!(t, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn terms_recomputed_independently() {
        let x = logits(4, 6, 6, 1);
        let labels = LabelMap::new(6, 6, (0..36).map(|i| (i * 5) % 4).collect()).unwrap();
        let (_, b, _) = total(LossWeights::default(), &LossOptions::unit());
        // softmax, CE, TV on the logits and CC by hand
        let hw = 36;
        let mut p = vec![0.0; 4 * hw];
        for px in 0..hw {
            let m = (0..4).map(|c| x.data()[c * hw + px]).fold(f64::MIN, f64::max);
            let z: f64 = (0..4).map(|c| (x.data()[c * hw + px] - m).exp()).sum();
            for c in 0..4 {
                p[c * hw + px] = (x.data()[c * hw + px] - m).exp() / z;
            }
        }
        let ce = -(0..hw).map(|px| p[labels.data()[px] * hw + px].ln()).sum::<f64>() / hw as f64;
        let mut tv = 0.0;
        for c in 0..4 {
            for y in 0..6 {
                for xx in 0..6 {
                    let v = x.data()[c * hw + y * 6 + xx];
                    if xx < 5 {
                        tv += (x.data()[c * hw + y * 6 + xx + 1] - v).abs();
                    }
                    if y < 5 {
                        tv += (x.data()[c * hw + (y + 1) * 6 + xx] - v).abs();
                    }
                }
            }
        }
        let mut cc = 0.0;
        for c in 0..4 {
            let plane = &p[c * hw..(c + 1) * hw];
            let m: f64 = plane.iter().sum();
            let cy = (0..hw).map(|i| (i / 6) as f64 * plane[i]).sum::<f64>() / m;
            let cx = (0..hw).map(|i| (i % 6) as f64 * plane[i]).sum::<f64>() / m;
            cc += (0..hw)
                .map(|i| plane[i] * (((i / 6) as f64 - cy).powi(2) + ((i % 6) as f64 - cx).powi(2)))
                .sum::<f64>()
                / m;
        }
        assert!((b.ce - ce).abs() < 1e-12);
        assert!((b.ss - tv / (4 * hw) as f64).abs() < 1e-12);
        assert!((b.cc - cc / 72.0).abs() < 1e-12);
    }

    #[test]
    fn gains_scale_the_reported_terms() {
        let (_, unit, _) = total(LossWeights::default(), &LossOptions::unit());
        let (_, gained, _) = total(LossWeights::default(), &LossOptions::default());
        let o = LossOptions::default();
        assert!((gained.ss - o.ss_gain * unit.ss).abs() < 1e-9);
        assert!((gained.cc - o.cc_gain * unit.cc).abs() < 1e-12);
        assert_eq!(gained.ce, unit.ce);
        let bad = LossOptions { ss_gain: -1.0, ..o };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn probability_input_option() {
        let options = LossOptions { spatial_input: SpatialInput::Probabilities, ..LossOptions::unit() };
        let (_, b, _) = total(LossWeights::default(), &options);
        // differences of probabilities are at most 1 each
        let (_, on_logits, _) = total(LossWeights::default(), &LossOptions::unit());
        assert!(b.ss <= 120.0 / 144.0 && b.ss < on_logits.ss);
    }

    #[test]
    fn total_loss_gradient_checks() {
        use crate::tensor::grad_check_piecewise;
        // jitter keeps neighbouring logits apart; neighbouring
        // probabilities can still nearly tie, so stencils that flip the
        // sign of any spatial difference are refined or skipped
        let x = Tensor::from_fn([5, 6, 6], |i| (((i * 7919) % 97) as f64) / 20.0 + 1e-3 * (i as f64).sin());
        let labels = LabelMap::new(6, 6, (0..36).map(|i| (i * 3) % 5).collect()).unwrap();
        let diff_signs = |m: &Tensor<f64>| -> Vec<i8> {
            let d = m.data();
            (0..d.len())
                .flat_map(|i| {
                    let (x, y) = (i % 6, (i / 6) % 6);
                    let right = (x < 5).then(|| d[i + 1] - d[i]);
                    let down = (y < 5).then(|| d[i + 6] - d[i]);
                    [right, down].into_iter().flatten().map(|v| (v > 0.0) as i8 - (v < 0.0) as i8)
                })
                .collect()
        };
        let coords: Vec<usize> = (0..x.numel()).collect();
        for input in [SpatialInput::Response, SpatialInput::Probabilities] {
            let options = LossOptions { spatial_input: input, ..LossOptions::default() };
            let f = |t: &mut Tape<f64>, v: Var| {
                let p = t.softmax_channels(v)?;
                let sig = [diff_signs(t.value(v)), diff_signs(t.value(p))].concat();
                Ok((total_loss(t, v, &labels, &LossWeights::default(), &options)?.0, sig))
            };
            let r = grad_check_piecewise(f, &x, 1e-4, &coords).unwrap();
            assert!(r.max_rel_error < 1e-4, "{input:?}: {r:?}");
            assert!(r.checked >= 170, "{input:?}: {r:?}");
        }
    }

    #[test]
    fn softmax_shift_invariance_reaches_ce_and_cc() {
        let labels = LabelMap::new(6, 6, (0..36).map(|i| i % 4).collect()).unwrap();
        let eval = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(x);
            total_loss(&mut tape, v, &labels, &LossWeights::new(1.0, 0.0, 1.0), &LossOptions::unit()).unwrap().1
        };
        let x = logits(4, 6, 6, 3);
        let shifted = Tensor::from_fn([4, 6, 6], |i| x.data()[i] + (i % 36) as f64 * 0.3);
        let (a, b) = (eval(x), eval(shifted));
        assert!((a.ce - b.ce).abs() < 1e-9 && (a.cc - b.cc).abs() < 1e-9);
    }

    #[test]
    fn weights_must_be_non_negative() {
        assert!(LossWeights::new(1.0, -0.1, 0.0).validate().is_err());
        assert!(LossWeights::new(1.0, f64::NAN, 0.0).validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
