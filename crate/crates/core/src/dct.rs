//! Dynamic confidence thresholding: confidence-histogram features, max-F1
//! target thresholds, a small MLP regressor and the threshold modes.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{InstanceClass, PipelineConfig, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::mask::PlacedMask;
use crate::merge::{filter_small, SlideInstanceSet};
use crate::metrics::{greedy_match, EvalSlide, GtRef, IgnoreFilter, PredRef};
use crate::tiling::GroundTruthInstance;

/// Hidden layer widths of the threshold regressor.
pub const HIDDEN_LAYERS: [usize; 2] = [64, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceFeature {
    pub slide_id: String,
    pub class: InstanceClass,
    /// Histogram of the set of distinct confidences.
    pub binned_unique_values: Vec<f64>,
    /// Histogram of all confidences, normalized to sum 1.
    pub binned_frequencies: Vec<f64>,
    pub class_onehot: [f64; 3],
}

impl ConfidenceFeature {
    pub fn bins(&self) -> usize {
        self.binned_unique_values.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.bins() + 3);
        v.extend_from_slice(&self.binned_unique_values);
        v.extend_from_slice(&self.binned_frequencies);
        v.extend_from_slice(&self.class_onehot);
        v
    }
}

/// Bin `k` covers `[k/B, (k+1)/B)`; the last bin also takes 1.0.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let k = (confidence.clamp(0.0, 1.0) * bins as f64).floor() as usize;
    k.min(bins - 1)
}

pub fn featurize(slide_id: &str, class: InstanceClass, confidences: &[f64], bins: usize) -> ConfidenceFeature {
    let mut unique = vec![0.0; bins];
    let mut freq = vec![0.0; bins];
    let mut sorted = confidences.to_vec();
    sorted.sort_by(f64::total_cmp);
    for &c in &sorted {
        freq[bin_index(c, bins)] += 1.0;
    }
    sorted.dedup();
    for &c in &sorted {
        unique[bin_index(c, bins)] += 1.0;
    }
    if !confidences.is_empty() {
        let n = confidences.len() as f64;
        freq.iter_mut().for_each(|f| *f /= n);
    }
    let mut class_onehot = [0.0; 3];
    class_onehot[class.index()] = 1.0;
    ConfidenceFeature {
        slide_id: slide_id.to_string(),
        class,
        binned_unique_values: unique,
        binned_frequencies: freq,
        class_onehot,
    }
}

/// Features of the active candidates of one class.
pub fn featurize_set(set: &SlideInstanceSet, class: InstanceClass, bins: usize) -> ConfidenceFeature {
    let conf: Vec<f64> = set.active_of(class).map(|c| c.confidence).collect();
    featurize(&set.slide_id, class, &conf, bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdFlag {
    /// There were no predictions to threshold.
    NoSignal,
    /// No threshold reaches a positive F1.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxF1 {
    pub threshold: f64,
    pub f1: f64,
    pub flag: Option<ThresholdFlag>,
}

/// Picks the F1-maximizing cut from predictions ranked by descending
/// confidence, each labelled true positive or not under the matching of the
/// more confident predictions.
///
/// The threshold is the smallest distinct confidence that reaches the best
/// F1. When no ground truth exists, dropping everything (threshold 1) is also
/// a candidate. A best F1 of 0 yields threshold 0, flagged degenerate.
pub fn max_f1_from_ranked(ranked: &[(f64, bool)], n_gts: usize) -> MaxF1 {
    if ranked.is_empty() {
        return MaxF1 {
            threshold: 0.0,
            f1: if n_gts == 0 { 1.0 } else { 0.0 },
            flag: Some(ThresholdFlag::NoSignal),
        };
    }
    let max_conf = ranked.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    // (numerator, denominator, threshold) of the best F1 so far.
    let mut best: Option<(u64, u64, f64)> = None;
    if n_gts == 0 && max_conf < 1.0 {
        best = Some((1, 1, 1.0));
    }
    let mut tp = 0u64;
    for (k, &(conf, hit)) in ranked.iter().enumerate() {
        tp += hit as u64;
        if ranked.get(k + 1).is_some_and(|n| n.0 == conf) {
            continue;
        }
        let (num, den) = (2 * tp, (k + 1 + n_gts) as u64);
        let better = match best {
            None => true,
            Some((bn, bd, _)) => num as u128 * bd as u128 >= bn as u128 * den as u128,
        };
        if better {
            best = Some((num, den, conf));
        }
    }
    let (num, den, threshold) = best.expect("at least one group");
    if num == 0 {
        return MaxF1 {
            threshold: 0.0,
            f1: 0.0,
            flag: Some(ThresholdFlag::Degenerate),
        };
    }
    MaxF1 {
        threshold,
        f1: num as f64 / den as f64,
        flag: None,
    }
}

/// Max-F1 threshold of one class on one slide.
pub fn max_f1_threshold(preds: &[PredRef], gts: &[GtRef], match_iou: f64) -> Result<MaxF1> {
    let ranked: Vec<(f64, bool)> = greedy_match(preds, gts, match_iou)?
        .into_iter()
        .map(|r| (r.confidence, r.gt.is_some()))
        .collect();
    Ok(max_f1_from_ranked(&ranked, gts.len()))
}

/// One fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.biases[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// ReLU hidden layers and a logistic scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// He-uniform weights and zero biases drawn from a ChaCha8 stream.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) || dims[dims.len() - 1] != 1 {
            return Err(Error::Training(format!("invalid layer dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let mut l = DenseLayer::zeros(w[0], w[1]);
                for v in l.weights.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
                l
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    /// Activations of every layer, input first.
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.apply(acts.last().expect("input present"));
            let a = if i == last {
                z.into_iter().map(sigmoid).collect()
            } else {
                z.into_iter().map(|v| v.max(0.0)).collect()
            };
            acts.push(a);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        self.trace(x).last().expect("output layer")[0]
    }

    /// Mean squared error over a batch.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(x, y)| (self.forward(x) - y).powi(2))
            .sum::<f64>()
            / xs.len() as f64
    }

    /// Batch loss and its gradient with respect to every parameter.
    pub fn gradient(&self, xs: &[Vec<f64>], ys: &[f64]) -> (f64, Vec<DenseLayer>) {
        let mut grads: Vec<DenseLayer> = self.layers.iter().map(|l| DenseLayer::zeros(l.inputs, l.outputs)).collect();
        let n = xs.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let acts = self.trace(x);
            let out = acts[acts.len() - 1][0];
            loss += (out - y).powi(2);
            let mut delta = vec![2.0 * (out - y) / n * out * (1.0 - out)];
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let input = &acts[li];
                let g = &mut grads[li];
                for o in 0..layer.outputs {
                    g.biases[o] += delta[o];
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, a) in row.iter_mut().zip(input) {
                        *gw += delta[o] * a;
                    }
                }
                if li > 0 {
                    let mut prev = vec![0.0; layer.inputs];
                    for (o, d) in delta.iter().enumerate() {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += w * d;
                        }
                    }
                    for (p, a) in prev.iter_mut().zip(input) {
                        if *a <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        (loss / n, grads)
    }

    fn step(&mut self, grads: &[DenseLayer], lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(grads) {
            l.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= lr * d);
            l.biases.iter_mut().zip(&g.biases).for_each(|(b, d)| *b -= lr * d);
        }
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut it = p.iter().copied();
        for l in self.layers.iter_mut() {
            for v in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *v = it.next().expect("parameter count matches");
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }
}

/// Flattens gradients in [`Mlp::params`] order.
pub fn flatten_grads(grads: &[DenseLayer]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            seed: 17,
            epochs: 3000,
            learning_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub examples: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DctModel {
    pub format_version: u32,
    pub dct_bins: usize,
    pub layer_dims: Vec<usize>,
    pub network: Mlp,
    /// Per-feature standardization learned from the training set.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub training_meta: TrainingMeta,
}

impl DctModel {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn predict(&self, f: &ConfidenceFeature) -> Result<f64> {
        if f.bins() != self.dct_bins {
            return Err(Error::Config(format!(
                "feature has {} bins, model expects {}",
                f.bins(),
                self.dct_bins
            )));
        }
        Ok(self.network.forward(&self.standardize(&f.to_vec())).clamp(0.0, 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        let width = 2 * self.dct_bins + 3;
        if self.network.dims() != self.layer_dims
            || self.layer_dims.first() != Some(&width)
            || self.input_mean.len() != width
            || self.input_std.len() != width
        {
            return Err(Error::Format("model layer dims are inconsistent".into()));
        }
        if !self.network.is_finite() || self.input_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Format("model holds non-finite parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDct {
    pub model: DctModel,
    /// Loss before each epoch, then the final loss.
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent on mean squared error.
pub fn train_dct(data: &[(ConfidenceFeature, f64)], p: &TrainParams) -> Result<TrainedDct> {
    let Some((first, _)) = data.first() else {
        return Err(Error::Training("empty training set".into()));
    };
    let bins = first.bins();
    if let Some((f, _)) = data.iter().find(|(f, _)| f.bins() != bins) {
        return Err(Error::Training(format!(
            "mixed bin counts: {} and {}",
            bins,
            f.bins()
        )));
    }
    if let Some((_, t)) = data.iter().find(|(_, t)| !(0.0..=1.0).contains(t)) {
        return Err(Error::Training(format!("target {t} outside [0, 1]")));
    }
    if !(p.learning_rate > 0.0) {
        return Err(Error::Training("learning rate must be positive".into()));
    }
    let raw: Vec<Vec<f64>> = data.iter().map(|(f, _)| f.to_vec()).collect();
    let ys: Vec<f64> = data.iter().map(|(_, t)| *t).collect();
    let width = raw[0].len();
    let n = raw.len() as f64;
    let mean: Vec<f64> = (0..width).map(|j| raw.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..width)
        .map(|j| {
            let var = raw.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-18 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let xs: Vec<Vec<f64>> = raw
        .iter()
        .map(|x| x.iter().zip(mean.iter().zip(&std)).map(|(v, (m, s))| (v - m) / s).collect())
        .collect();

    let mut dims = vec![width];
    dims.extend(HIDDEN_LAYERS);
    dims.push(1);
    let mut net = Mlp::new(&dims, p.seed)?;
    let mut loss_trace = Vec::with_capacity(p.epochs + 1);
    for _ in 0..p.epochs {
        let (loss, grads) = net.gradient(&xs, &ys);
        if !loss.is_finite() {
            return Err(Error::Training("loss diverged".into()));
        }
        loss_trace.push(loss);
        net.step(&grads, p.learning_rate);
    }
    let final_loss = net.loss(&xs, &ys);
    loss_trace.push(final_loss);
    if !net.is_finite() {
        return Err(Error::Training("weights diverged".into()));
    }
    log::debug!("dct training: {} examples, loss {:.5} -> {final_loss:.5}", data.len(), loss_trace[0]);
    Ok(TrainedDct {
        model: DctModel {
            format_version: FORMAT_VERSION,
            dct_bins: bins,
            layer_dims: dims,
            network: net,
            input_mean: mean,
            input_std: std,
            training_meta: TrainingMeta {
                seed: p.seed,
                epochs: p.epochs,
                learning_rate: p.learning_rate,
                examples: data.len(),
                final_loss,
            },
        },
        loss_trace,
    })
}

/// How a slide's per-class thresholds are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ThresholdMode {
    Static(f64),
    Dynamic,
    Optimistic,
}

impl ThresholdMode {
    /// Row label in the threshold comparison grid.
    pub fn label(&self) -> String {
        match self {
            ThresholdMode::Static(t) => format!("{t}"),
            ThresholdMode::Dynamic => "Dynamic".into(),
            ThresholdMode::Optimistic => "Optimistic".into(),
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMode::Static(t) => write!(f, "static:{t}"),
            ThresholdMode::Dynamic => f.write_str("dynamic"),
            ThresholdMode::Optimistic => f.write_str("optimistic"),
        }
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(ThresholdMode::Dynamic),
            "optimistic" => Ok(ThresholdMode::Optimistic),
            _ => {
                let v = s.strip_prefix("static:").unwrap_or(s);
                match v.parse::<f64>() {
                    Ok(t) if (0.0..=1.0).contains(&t) => Ok(ThresholdMode::Static(t)),
                    _ => Err(Error::Config(format!(
                        "unknown threshold mode {s:?}; expected static:<t>, dynamic or optimistic"
                    ))),
                }
            }
        }
    }
}

impl TryFrom<String> for ThresholdMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ThresholdMode> for String {
    fn from(m: ThresholdMode) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDecision {
    pub slide_id: String,
    pub class: InstanceClass,
    pub mode: ThresholdMode,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<ThresholdFlag>,
}

/// Annotations for one slide: ground truth and Ignore regions.
pub type Truth<'a> = (&'a [GroundTruthInstance], &'a [PlacedMask]);

/// Optimistic thresholds: max-F1 per class against ground truth, computed on
/// the candidates that survive the small-instance filter (which does not
/// depend on the threshold).
fn optimistic(set: &SlideInstanceSet, truth: Truth, cfg: &PipelineConfig) -> Result<Vec<MaxF1>> {
    let base = filter_small(set.clone(), cfg);
    let filter = IgnoreFilter::new(truth.1, cfg.ignore_overlap);
    InstanceClass::ALL
        .iter()
        .map(|&class| {
            let preds: Vec<PredRef> = base
                .active_of(class)
                .filter(|c| filter.keeps(&c.mask))
                .map(PredRef::from)
                .collect();
            let gts: Vec<GtRef> = truth
                .0
                .iter()
                .filter(|g| g.class == class && filter.keeps(&g.mask))
                .map(GtRef::from)
                .collect();
            max_f1_threshold(&preds, &gts, cfg.match_iou)
        })
        .collect()
}

/// Per-class thresholds for one merged slide.
pub fn decide_thresholds(
    mode: &ThresholdMode,
    model: Option<&DctModel>,
    set: &SlideInstanceSet,
    truth: Option<Truth>,
    cfg: &PipelineConfig,
) -> Result<Vec<ThresholdDecision>> {
    let decision = |class: InstanceClass, threshold: f64, flag: Option<ThresholdFlag>| ThresholdDecision {
        slide_id: set.slide_id.clone(),
        class,
        mode: *mode,
        threshold,
        flag,
    };
    match mode {
        ThresholdMode::Static(t) => {
            if !(0.0..=1.0).contains(t) {
                return Err(Error::Config(format!("static threshold {t} outside [0, 1]")));
            }
            Ok(InstanceClass::ALL.iter().map(|&c| decision(c, *t, None)).collect())
        }
        ThresholdMode::Dynamic => {
            let model = model.ok_or_else(|| Error::Config("dynamic thresholds need a trained model".into()))?;
            InstanceClass::ALL
                .iter()
                .map(|&c| {
                    let t = model.predict(&featurize_set(set, c, model.dct_bins))?;
                    Ok(decision(c, t, None))
                })
                .collect()
        }
        ThresholdMode::Optimistic => {
            let truth = truth.ok_or_else(|| Error::Config("optimistic thresholds need ground truth".into()))?;
            let best = optimistic(set, truth, cfg)?;
            Ok(InstanceClass::ALL
                .iter()
                .zip(best)
                .map(|(&c, b)| decision(c, b.threshold, b.flag))
                .collect())
        }
    }
}

/// Thresholds indexed by [`InstanceClass::index`]; missing classes get 0.
pub fn thresholds_by_class(decisions: &[ThresholdDecision]) -> [f64; 3] {
    let mut t = [0.0; 3];
    for d in decisions {
        t[d.class.index()] = d.threshold;
    }
    t
}

/// Training pairs: features of the merged candidates and the max-F1
/// threshold against ground truth. Classes without predictions are skipped.
pub fn training_examples(slides: &[EvalSlide], cfg: &PipelineConfig) -> Result<Vec<(ConfidenceFeature, f64)>> {
    let mut out = Vec::new();
    for s in slides {
        let best = optimistic(&s.set, (&s.gts, &s.ignore), cfg)?;
        for (&class, b) in InstanceClass::ALL.iter().zip(best) {
            if b.flag == Some(ThresholdFlag::NoSignal) {
                continue;
            }
            out.push((featurize_set(&s.set, class, cfg.dct_bins), b.threshold));
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct DecisionRow<'a> {
    slide_id: &'a str,
    class: &'a str,
    mode: String,
    threshold: f64,
}

pub fn write_decisions_csv<W: Write>(decisions: &[ThresholdDecision], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for d in decisions {
        w.serialize(DecisionRow {
            slide_id: &d.slide_id,
            class: d.class.name(),
            mode: d.mode.to_string(),
            threshold: d.threshold,
        })
        .map_err(|e| Error::Report(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Report(format!("csv: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::apply_thresholds;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

    #[test]
    fn featurize_examples() {
        let f = featurize("s", InstanceClass::Arteriole, &[], 20);
        assert!(f.binned_unique_values.iter().all(|&v| v == 0.0));
        assert!(f.binned_frequencies.iter().all(|&v| v == 0.0));
        assert_eq!(f.class_onehot, [0.0, 1.0, 0.0]);

        let f = featurize("s", InstanceClass::Glomerulus, &[0.5, 0.5, 0.9], 20);
        let mut u = vec![0.0; 20];
        u[10] = 1.0;
        u[18] = 1.0;
        assert_eq!(f.binned_unique_values, u);
        assert!((f.binned_frequencies[10] - 2.0 / 3.0).abs() < 1e-15);
        assert!((f.binned_frequencies[18] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(f.to_vec().len(), 43);

        assert_eq!(bin_index(1.0, 20), 19);
        assert_eq!(bin_index(0.0, 20), 0);
    }

    #[test]
    fn max_f1_examples() {
        let r = max_f1_from_ranked(&[(0.9, true), (0.6, false), (0.4, true)], 3);
        assert_eq!(r.threshold, 0.4);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.flag, None);

        // Everything correct: the cut keeps every prediction.
        let r = max_f1_from_ranked(&[(0.8, true), (0.3, true)], 2);
        assert_eq!((r.threshold, r.f1), (0.3, 1.0));

        let r = max_f1_from_ranked(&[(0.8, false), (0.3, false)], 2);
        assert_eq!((r.threshold, r.flag), (0.0, Some(ThresholdFlag::Degenerate)));

        let r = max_f1_from_ranked(&[], 2);
        assert_eq!((r.threshold, r.flag), (0.0, Some(ThresholdFlag::NoSignal)));

        // Nothing to find: dropping all predictions is best.
        let r = max_f1_from_ranked(&[(0.8, false)], 0);
        assert_eq!((r.threshold, r.f1), (1.0, 1.0));
    }

    /// Every cut recomputed from scratch over {distinct confidences} plus the
    /// drop-all cut.
    fn brute_max_f1(ranked: &[(f64, bool)], n_gts: usize) -> (f64, f64) {
        let mut cuts: Vec<f64> = ranked.iter().map(|r| r.0).collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let max_conf = cuts.last().copied().unwrap_or(0.0);
        let f1_at = |t: f64| {
            let kept: Vec<&(f64, bool)> = ranked.iter().filter(|r| r.0 >= t).collect();
            let tp = kept.iter().filter(|r| r.1).count();
            let (p, r) = (
                if kept.is_empty() { 1.0 } else { tp as f64 / kept.len() as f64 },
                if n_gts == 0 { 1.0 } else { tp as f64 / n_gts as f64 },
            );
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        };
        let mut cands: Vec<(f64, f64)> = cuts.iter().map(|&t| (t, f1_at(t))).collect();
        if n_gts == 0 && max_conf < 1.0 {
            cands.push((1.0, 1.0));
        }
        let best = cands.iter().map(|c| c.1).fold(0.0, f64::max);
        if best <= 1e-12 {
            return (0.0, 0.0);
        }
        let t = cands
            .iter()
            .filter(|c| (c.1 - best).abs() < 1e-9)
            .map(|c| c.0)
            .fold(f64::INFINITY, f64::min);
        (t, best)
    }

    proptest! {
        #[test]
        fn max_f1_matches_brute_sweep(
            raw in prop::collection::vec((0u8..12, any::<bool>()), 1..12),
            extra_gts in 0usize..5,
        ) {
            let mut ranked: Vec<(f64, bool)> = raw.iter().map(|&(c, h)| (c as f64 / 11.0, h)).collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
            let n_gts = ranked.iter().filter(|r| r.1).count() + extra_gts;
            let got = max_f1_from_ranked(&ranked, n_gts);
            let (t, f) = brute_max_f1(&ranked, n_gts);
            prop_assert_eq!(got.threshold, t);
            prop_assert!((got.f1 - f).abs() < 1e-12);
        }

        #[test]
        fn raising_threshold_never_keeps_more(confs in prop::collection::vec(0u8..=100, 0..30), a in 0u8..=100, b in 0u8..=100) {
            let set = crate::merge::tests::set_with_confidences(&confs);
            let (lo, hi) = (a.min(b) as f64 / 100.0, a.max(b) as f64 / 100.0);
            let n_lo = apply_thresholds(set.clone(), [lo; 3]).active_count();
            let n_hi = apply_thresholds(set, [hi; 3]).active_count();
            prop_assert!(n_hi <= n_lo);
        }
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale < 1e-7 {
            (a - b).abs()
        } else {
            (a - b).abs() / scale
        }
    }

    pub(crate) fn gradient_check(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [rng.random_range(2..6), rng.random_range(2..7), rng.random_range(2..5), 1];
        let mut net = Mlp::new(&dims, seed ^ 0x5eed).unwrap();
        // Random biases too, so no unit sits exactly on the ReLU kink.
        let random: Vec<f64> = net.params().iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        net.set_params(&random);
        let n = rng.random_range(1..5);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, g) = net.gradient(&xs, &ys);
        let analytic = flatten_grads(&g);
        let base = net.params();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            net.set_params(&p);
            let up = net.loss(&xs, &ys);
            p[i] -= 2.0 * h;
            net.set_params(&p);
            let down = net.loss(&xs, &ys);
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        net.set_params(&base);
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let e = gradient_check(seed);
            assert!(e < 1e-4, "seed {seed}: relative error {e}");
        }
    }

    fn feature(class: InstanceClass, confs: &[f64]) -> ConfidenceFeature {
        featurize("s", class, confs, 20)
    }

    #[test]
    fn single_example_is_fitted() {
        let data = vec![(feature(InstanceClass::Artery, &[0.2, 0.7, 0.9]), 0.37)];
        let t = train_dct(
            &data,
            &TrainParams {
                seed: 3,
                epochs: 2000,
                learning_rate: 0.5,
            },
        )
        .unwrap();
        let out = t.model.predict(&data[0].0).unwrap();
        assert!((out - 0.37).abs() < 0.05, "got {out}");
        assert!(t.loss_trace.last().unwrap() < &t.loss_trace[0]);
    }

    #[test]
    fn constant_targets_are_fitted() {
        let data: Vec<(ConfidenceFeature, f64)> = (0..9)
            .map(|i| {
                let c = InstanceClass::ALL[i % 3];
                (feature(c, &[0.1 * i as f64, 0.95]), 0.5)
            })
            .collect();
        let t = train_dct(&data, &TrainParams::default()).unwrap();
        for (f, _) in &data {
            assert!((t.model.predict(f).unwrap() - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let data: Vec<(ConfidenceFeature, f64)> = (0..6)
            .map(|i| (feature(InstanceClass::ALL[i % 3], &[0.15 * i as f64]), 0.1 * i as f64))
            .collect();
        let p = TrainParams {
            epochs: 200,
            ..Default::default()
        };
        let a = train_dct(&data, &p).unwrap();
        let b = train_dct(&data, &p).unwrap();
        assert_eq!(a, b);
        let json = serde_json::to_string(&a.model).unwrap();
        let back: DctModel = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back, a.model);
    }

    #[test]
    fn training_rejects_bad_input() {
        assert!(matches!(train_dct(&[], &TrainParams::default()), Err(Error::Training(_))));
        let bad = vec![(feature(InstanceClass::Artery, &[0.5]), 1.5)];
        assert!(train_dct(&bad, &TrainParams::default()).is_err());
    }

    #[test]
    fn threshold_modes() {
        let set = crate::merge::tests::set_with_confidences(&[30, 60, 90]);
        let cfg = PipelineConfig::default();
        let d = decide_thresholds(&ThresholdMode::Static(0.5), None, &set, None, &cfg).unwrap();
        assert_eq!(d.len(), 3);
        assert!(d.iter().all(|d| d.threshold == 0.5));
        assert!(matches!(
            decide_thresholds(&ThresholdMode::Dynamic, None, &set, None, &cfg),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            decide_thresholds(&ThresholdMode::Optimistic, None, &set, None, &cfg),
            Err(Error::Config(_))
        ));

        let data = vec![(feature(InstanceClass::Glomerulus, &[0.5]), 0.4)];
        let model = train_dct(&data, &TrainParams::default()).unwrap().model;
        let empty = crate::merge::tests::set_with_confidences(&[]);
        let d = decide_thresholds(&ThresholdMode::Dynamic, Some(&model), &empty, None, &cfg).unwrap();
        assert!(d.iter().all(|d| (0.0..=1.0).contains(&d.threshold)));
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in [ThresholdMode::Static(0.3), ThresholdMode::Dynamic, ThresholdMode::Optimistic] {
            assert_eq!(m.to_string().parse::<ThresholdMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<ThresholdMode>(&json).unwrap(), m);
        }
        assert_eq!("0.7".parse::<ThresholdMode>().unwrap(), ThresholdMode::Static(0.7));
        assert!("fancy".parse::<ThresholdMode>().is_err());
        assert_eq!(ThresholdMode::Static(0.5).label(), "0.5");
    }

    #[test]
    fn decisions_csv_columns() {
        let d = vec![ThresholdDecision {
            slide_id: "s1".into(),
            class: InstanceClass::Artery,
            mode: ThresholdMode::Dynamic,
            threshold: 0.25,
            flag: None,
        }];
        let mut buf = Vec::new();
        write_decisions_csv(&d, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "slide_id,class,mode,threshold\ns1,Artery,dynamic,0.25\n"
        );
    }
}
