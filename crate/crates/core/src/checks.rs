//! Finite-difference gradient checks for every differentiable piece of the
//! pipeline, shared by the `gradcheck` subcommand and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::labels::LabelMap;
use crate::losses::{self, CentroidGradient, LossOptions, LossWeights, SpatialBounds};
use crate::segnet::{init_params, LayerVars, ParamSet, SegNetConfig};
use crate::tensor::{grad_check, grad_check_piecewise, PiecewiseReport, Tape, Tensor, Var};
use crate::trainer::assign_labels;

/// Step used by the checks unless told otherwise.
pub const DEFAULT_STEP: f64 = 1e-4;
/// Largest relative error a check may report and still pass.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates left out because their stencil straddled a kink.
    pub skipped: usize,
}

impl CheckResult {
    /// Error under [`TOLERANCE`] with most coordinates actually compared.
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.checked > 0 && self.checked >= self.skipped
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}

fn random_labels(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..c)).collect()).expect("sized")
}

fn sign(v: f64) -> i8 {
    (v > 0.0) as i8 - (v < 0.0) as i8
}

/// Signs of every horizontal and vertical neighbour difference of a
/// `[C, H, W]` map: the kinks of the L1 smoothness term.
fn difference_signs(map: &Tensor<f64>, out: &mut Vec<i8>) {
    let (h, w) = (map.shape()[1], map.shape()[2]);
    for plane in map.data().chunks_exact(h * w) {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    out.push(sign(plane[i + 1] - plane[i]));
                }
                if y + 1 < h {
                    out.push(sign(plane[i + w] - plane[i]));
                }
            }
        }
    }
}

/// [`run_all`] for each seed, in parallel; results keep seed order.
pub fn run_seeds(seeds: &[u64], h: f64) -> Result<Vec<CheckResult>> {
    use rayon::prelude::*;
    let per_seed: Vec<Vec<CheckResult>> = seeds.par_iter().map(|&s| run_all(s, h)).collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Runs every check once for `seed` with central-difference step `h`.
pub fn run_all(seed: u64, h: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut smooth = |name: &str, n: usize, err: f64| {
        out.push(CheckResult { name: name.to_string(), seed, max_rel_error: err, checked: n, skipped: 0 });
    };

    // conv2d, one operand at a time
    let (ci, co, hh, ww) = (2, 3, 5, 4);
    let x = normal(&mut rng, &[ci, hh, ww]);
    let wt = normal(&mut rng, &[co, ci, 3, 3]);
    let b = normal(&mut rng, &[co]);
    let proj = normal(&mut rng, &[co * hh * ww]).into_data();
    let conv = |which: usize| {
        let (x, wt, b, proj) = (&x, &wt, &b, &proj);
        move |t: &mut Tape<f64>, v: Var| {
            let xv = if which == 0 { v } else { t.constant(x.clone()) };
            let wv = if which == 1 { v } else { t.constant(wt.clone()) };
            let bv = if which == 2 { v } else { t.constant(b.clone()) };
            let y = t.conv2d(xv, wv, bv, 1, 1)?;
            t.weighted_sum(y, proj.clone())
        }
    };
    smooth("conv2d/input", x.numel(), grad_check(conv(0), &x, h)?);
    smooth("conv2d/weight", wt.numel(), grad_check(conv(1), &wt, h)?);
    smooth("conv2d/bias", b.numel(), grad_check(conv(2), &b, h)?);

    // a random projection makes every output element contribute
    let (c, hh, ww) = (4, 4, 5);
    let n = c * hh * ww;
    let proj = normal(&mut rng, &[n]).into_data();
    let x = normal(&mut rng, &[c, hh, ww]);
    let norm = |t: &mut Tape<f64>, v: Var| {
        let y = t.channel_norm(v, 1e-5)?;
        t.weighted_sum(y, proj.clone())
    };
    smooth("channel_norm", n, grad_check(norm, &x, h)?);
    let gamma = normal(&mut rng, &[c]);
    let beta = normal(&mut rng, &[c]);
    let affine = |which: usize| {
        let (x, gamma, beta, proj) = (&x, &gamma, &beta, &proj);
        move |t: &mut Tape<f64>, v: Var| {
            let xv = if which == 0 { v } else { t.constant(x.clone()) };
            let gv = if which == 1 { v } else { t.constant(gamma.clone()) };
            let bv = if which == 2 { v } else { t.constant(beta.clone()) };
            let y = t.channel_affine(xv, gv, bv)?;
            t.weighted_sum(y, proj.clone())
        }
    };
    smooth("channel_affine/input", n, grad_check(affine(0), &x, h)?);
    smooth("channel_affine/scale", c, grad_check(affine(1), &gamma, h)?);
    smooth("channel_affine/shift", c, grad_check(affine(2), &beta, h)?);
    let softmax = |t: &mut Tape<f64>, v: Var| {
        let y = t.softmax_channels(v)?;
        t.weighted_sum(y, proj.clone())
    };
    smooth("softmax", n, grad_check(softmax, &x, h)?);

    // the probability losses are checked through a softmax so their
    // inputs stay valid distributions
    let labels = random_labels(&mut rng, c, hh, ww);
    let x = normal(&mut rng, &[c, hh, ww]);
    let ce = |t: &mut Tape<f64>, v: Var| {
        let p = t.softmax_channels(v)?;
        losses::cross_entropy(t, p, &labels, true)
    };
    smooth("cross_entropy", n, grad_check(ce, &x, h)?);
    for (name, mode) in [
        ("context_consistency", CentroidGradient::Full),
        ("context_consistency/detached", CentroidGradient::Detached),
    ] {
        let cc = |t: &mut Tape<f64>, v: Var| {
            let p = t.softmax_channels(v)?;
            losses::context_consistency(t, p, true, mode)
        };
        smooth(name, n, grad_check(cc, &x, h)?);
    }

    let all: Vec<usize> = (0..n).collect();
    for (name, bounds) in [
        ("sparse_spatial", SpatialBounds::AllPairs),
        ("sparse_spatial/interior", SpatialBounds::Interior),
    ] {
        let ss = |t: &mut Tape<f64>, v: Var| {
            let mut sig = Vec::new();
            difference_signs(t.value(v), &mut sig);
            Ok((losses::sparse_spatial(t, v, bounds, true)?, sig))
        };
        out.push(piecewise(name, seed, grad_check_piecewise(ss, &x, h, &all)?));
    }

    out.extend(full_network(seed, h)?);
    Ok(out)
}

fn piecewise(name: &str, seed: u64, r: PiecewiseReport) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        seed,
        max_rel_error: r.max_rel_error,
        checked: r.checked,
        skipped: r.skipped,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Slot {
    Image,
    Weight(usize),
    Bias(usize),
    Scale(usize),
    Shift(usize),
}

/// Default-weighted total loss through the whole three-block network on a
/// `1x8x8` image, against the image and a sample of every layer's
/// parameters. Scales and shifts are moved off their 1 / 0 initial values
/// first. Labels come from the unperturbed forward pass and are held fixed.
fn full_network(seed: u64, h: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut net: ParamSet<f64> = init_params(&SegNetConfig::new(1), seed)?;
    for (scale, shift) in net.layers.iter_mut().filter_map(|l| l.affine.as_mut()) {
        for v in scale.value.data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in shift.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let image = Tensor::from_fn([1, 8, 8], |_| rng.random_range(0.0..1.0));
    let labels = assign_labels(&net.forward(&image)?)?;
    let weights = LossWeights::default();
    let options = LossOptions::default();

    let run = |slot: Slot| {
        let (net, image, labels) = (&net, &image, &labels);
        move |t: &mut Tape<f64>, v: Var| -> Result<(Var, Vec<i8>)> {
            let leaf = |t: &mut Tape<f64>, s: Slot, value: &Tensor<f64>| {
                if s == slot {
                    v
                } else {
                    t.constant(value.clone())
                }
            };
            let vars: Vec<LayerVars> = net
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| LayerVars {
                    weight: leaf(t, Slot::Weight(l), &layer.weight.value),
                    bias: leaf(t, Slot::Bias(l), &layer.bias.value),
                    affine: layer.affine.as_ref().map(|(a, b)| {
                        (leaf(t, Slot::Scale(l), &a.value), leaf(t, Slot::Shift(l), &b.value))
                    }),
                })
                .collect();
            let x = leaf(t, Slot::Image, image);
            let (s, pre) = net.forward_traced(t, &vars, x)?;
            let mut sig: Vec<i8> = pre
                .iter()
                .flat_map(|&p| t.value(p).data().iter().map(|&z| sign(z)))
                .collect();
            difference_signs(t.value(s), &mut sig);
            Ok((losses::total_loss(t, s, labels, &weights, &options)?.0, sig))
        }
    };

    let all: Vec<usize> = (0..image.numel()).collect();
    let mut results = vec![piecewise("total_loss/image", seed, grad_check_piecewise(run(Slot::Image), &image, h, &all)?)];
    let mut sampled = |name: String, slot: Slot, value: &Tensor<f64>, count: usize| -> Result<()> {
        let coords: Vec<usize> = (0..count).map(|_| rng.random_range(0..value.numel())).collect();
        let r = grad_check_piecewise(run(slot), value, h, &coords)?;
        results.push(piecewise(&name, seed, r));
        Ok(())
    };
    for (l, layer) in net.layers.iter().enumerate() {
        sampled(format!("total_loss/layer{l}.weight"), Slot::Weight(l), &layer.weight.value, 16)?;
        sampled(format!("total_loss/layer{l}.bias"), Slot::Bias(l), &layer.bias.value, 8)?;
        if let Some((a, b)) = &layer.affine {
            sampled(format!("total_loss/layer{l}.scale"), Slot::Scale(l), &a.value, 8)?;
            sampled(format!("total_loss/layer{l}.shift"), Slot::Shift(l), &b.value, 8)?;
        }
    }
    Ok(results)
}
