//! Feature extraction, cosine similarity, k-fold pair verification and
//! closed/open-set identification.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{read_block, write_atomic, write_block, LayerParams, Network, Reader, PRE_ACTIVATION_SUFFIX};
use crate::tensor::Tensor;
use crate::train::stack;

/// Map key of the network's feature edge, before or after its ReLU.
pub fn feature_key(net: &Network, pre_relu: bool) -> Result<String> {
    let desc = net.descriptor();
    let edge = desc.feature.clone().ok_or_else(|| Error::usage("network declares no feature edge"))?;
    let producer = desc.producer(&edge).ok_or_else(|| Error::usage(format!("feature edge `{edge}` is not produced")))?;
    if !pre_relu {
        return Ok(edge);
    }
    Ok(match &producer.params {
        p if p.fused_relu() => format!("{edge}{PRE_ACTIVATION_SUFFIX}"),
        LayerParams::Relu => producer.inputs[0].clone(),
        _ => edge,
    })
}

/// Feature vector of one preprocessed input in test mode.
pub fn extract_feature(net: &Network, input: &Tensor, pre_relu: bool) -> Result<Vec<f32>> {
    let key = feature_key(net, pre_relu)?;
    let out = net.infer(input)?;
    Ok(out[&key].data().to_vec())
}

/// Features of many inputs; chunks run in parallel with identical results to
/// one-at-a-time extraction.
pub fn extract_features(net: &Network, inputs: &[Tensor], pre_relu: bool) -> Result<Vec<Vec<f32>>> {
    let key = feature_key(net, pre_relu)?;
    let chunks: Vec<Result<Vec<Vec<f32>>>> = inputs
        .par_chunks(8)
        .map(|chunk| {
            let out = net.infer(&stack(chunk)?)?;
            let t = &out[&key];
            Ok((0..chunk.len()).map(|i| t.sample(i).to_vec()).collect())
        })
        .collect();
    let mut all = Vec::with_capacity(inputs.len());
    for c in chunks {
        all.extend(c?);
    }
    Ok(all)
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine of vectors with lengths {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity undefined for a zero vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Named feature vectors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Features {
    entries: Vec<(String, Vec<f32>)>,
    index: HashMap<String, usize>,
}

impl Features {
    pub fn new() -> Self {
        Features::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Vec<f32>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::data(format!("duplicate feature `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, v));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.index.get(name).map(|&i| self.entries[i].1.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f32]> {
        self.get(name).ok_or_else(|| Error::data(format!("no feature for sample `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v.as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for (name, v) in &self.entries {
            write_block(&mut buf, name, &Tensor::from_dims(&[v.len()], v.clone()));
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let mut f = Features::new();
        while !r.is_empty() {
            let (name, t) = read_block(&mut r)?;
            f.insert(name, t.into_vec())?;
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Features::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::data(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub fold: usize,
    pub a: String,
    pub b: String,
    pub same: bool,
}

/// Parses `fold_idx,sample_a,sample_b,same_flag` lines; the flag is `1`/`0`
/// or `true`/`false`.
pub fn read_pairs(text: &str) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::data(format!("pairs line {}: expected `fold,sample_a,sample_b,same`", i + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let [fold, a, b, same] = f.as_slice() else {
            return Err(bad());
        };
        let fold = fold.parse().map_err(|_| bad())?;
        let same = match *same {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad()),
        };
        pairs.push(Pair { fold, a: a.to_string(), b: b.to_string(), same });
    }
    if pairs.is_empty() {
        return Err(Error::data("no pairs"));
    }
    Ok(pairs)
}

/// Threshold maximising accuracy of `score >= t` as "same"; candidates are
/// the scores themselves and +∞, ties go to the lowest threshold.
pub fn best_threshold(scores: &[(f64, bool)]) -> (f64, f64) {
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let total_same = sorted.iter().filter(|s| s.1).count();
    // below = count of pairs strictly under the candidate
    let (mut diff_below, mut same_below) = (0usize, 0usize);
    let mut best = (f64::INFINITY, (n - total_same) as f64 / n.max(1) as f64);
    let mut i = 0;
    while i < n {
        let t = sorted[i].0;
        let correct = (total_same - same_below) + diff_below;
        let acc = correct as f64 / n as f64;
        if acc > best.1 || (acc == best.1 && t < best.0) {
            best = (t, acc);
        }
        while i < n && sorted[i].0 == t {
            if sorted[i].1 {
                same_below += 1;
            } else {
                diff_below += 1;
            }
            i += 1;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub folds: Vec<usize>,
    pub fold_accuracies: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Leave-one-fold-out verification over pre-computed similarities.
pub fn verify_scores(scored: &[(usize, f64, bool)]) -> Result<VerifyReport> {
    let mut by_fold: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
    for &(f, s, same) in scored {
        by_fold.entry(f).or_default().push((s, same));
    }
    if by_fold.len() < 2 {
        return Err(Error::data(format!("verification needs at least 2 folds, got {}", by_fold.len())));
    }
    let mut report = VerifyReport {
        folds: Vec::new(),
        fold_accuracies: Vec::new(),
        thresholds: Vec::new(),
        mean_accuracy: 0.0,
        std_accuracy: 0.0,
    };
    for (&fold, test) in &by_fold {
        let train: Vec<(f64, bool)> =
            by_fold.iter().filter(|(&f, _)| f != fold).flat_map(|(_, v)| v.iter().copied()).collect();
        let (t, _) = best_threshold(&train);
        let correct = test.iter().filter(|&&(s, same)| (s >= t) == same).count();
        report.folds.push(fold);
        report.thresholds.push(t);
        report.fold_accuracies.push(correct as f64 / test.len() as f64);
    }
    let k = report.fold_accuracies.len() as f64;
    report.mean_accuracy = report.fold_accuracies.iter().sum::<f64>() / k;
    report.std_accuracy =
        (report.fold_accuracies.iter().map(|a| (a - report.mean_accuracy).powi(2)).sum::<f64>() / k).sqrt();
    Ok(report)
}

/// Cosine-similarity verification over pair folds.
pub fn verify_folds(pairs: &[Pair], features: &Features) -> Result<VerifyReport> {
    let scored = pairs
        .iter()
        .map(|p| Ok((p.fold, cosine(features.require(&p.a)?, features.require(&p.b)?)?, p.same)))
        .collect::<Result<Vec<_>>>()?;
    verify_scores(&scored)
}

/// Labelled feature reference.
pub type Labelled<'a> = (usize, &'a [f32]);

/// Index and score of the most similar gallery entry; ties go to the first.
pub fn best_match(gallery: &[Labelled], probe: &[f32]) -> Result<(usize, f64)> {
    if gallery.is_empty() {
        return Err(Error::data("empty gallery"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, (_, g)) in gallery.iter().enumerate() {
        let s = cosine(g, probe)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best)
}

/// Rank-1 rate over probes.
pub fn identify_closed(gallery: &[Labelled], probes: &[Labelled]) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::data("empty gallery"));
    }
    if probes.is_empty() {
        return Err(Error::data("no probes"));
    }
    let mut correct = 0;
    for &(label, p) in probes {
        let (i, _) = best_match(gallery, p)?;
        correct += (gallery[i].0 == label) as usize;
    }
    Ok(correct as f64 / probes.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpenSetReport {
    pub dir: f64,
    pub threshold: f64,
}

/// Open-set rate from best-match outcomes. `tau` is the smallest value with
/// at most `floor(far*n)` unknown scores strictly above it; a known probe
/// counts when its best match is correct and strictly above `tau`.
pub fn dir_from_scores(known: &[(bool, f64)], unknown: &[f64], far: f64) -> Result<OpenSetReport> {
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::usage(format!("far must lie in (0,1), got {far}")));
    }
    if unknown.is_empty() {
        return Err(Error::data("no unknown probes; cannot calibrate the false-alarm rate"));
    }
    if known.is_empty() {
        return Err(Error::data("no known probes"));
    }
    let mut desc = unknown.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let allowed = (far * desc.len() as f64 + 1e-9).floor() as usize;
    let threshold = desc[allowed.min(desc.len() - 1)];
    let hits = known.iter().filter(|&&(ok, s)| ok && s > threshold).count();
    Ok(OpenSetReport { dir: hits as f64 / known.len() as f64, threshold })
}

/// Detection-and-identification rate at the given false-alarm rate.
pub fn identify_open(gallery: &[Labelled], known: &[Labelled], unknown: &[Labelled], far: f64) -> Result<OpenSetReport> {
    let ids: HashSet<usize> = gallery.iter().map(|g| g.0).collect();
    if let Some((l, _)) = unknown.iter().find(|u| ids.contains(&u.0)) {
        return Err(Error::data(format!("unknown probe identity {l} appears in the gallery")));
    }
    if let Some((l, _)) = known.iter().find(|k| !ids.contains(&k.0)) {
        return Err(Error::data(format!("known probe identity {l} is absent from the gallery")));
    }
    let known_scores = known
        .iter()
        .map(|&(l, p)| best_match(gallery, p).map(|(i, s)| (gallery[i].0 == l, s)))
        .collect::<Result<Vec<_>>>()?;
    let unknown_scores = unknown.iter().map(|&(_, p)| best_match(gallery, p).map(|m| m.1)).collect::<Result<Vec<_>>>()?;
    dir_from_scores(&known_scores, &unknown_scores, far)
}

/// `key value` report with four-decimal values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub verify: Option<VerifyReport>,
    pub rank1: Option<f64>,
    pub open_set: Option<(f64, OpenSetReport)>,
}

fn fmt4(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(v) = &self.verify {
            for (i, (f, a)) in v.folds.iter().zip(&v.fold_accuracies).enumerate() {
                writeln!(s, "fold_{f}_accuracy {}", fmt4(*a)).unwrap();
                writeln!(s, "threshold_{f} {}", fmt4(v.thresholds[i])).unwrap();
            }
            writeln!(s, "mean_accuracy {}", fmt4(v.mean_accuracy)).unwrap();
            writeln!(s, "std_accuracy {}", fmt4(v.std_accuracy)).unwrap();
        }
        if let Some(r) = self.rank1 {
            writeln!(s, "rank1 {}", fmt4(r)).unwrap();
        }
        if let Some((far, o)) = &self.open_set {
            writeln!(s, "far {}", fmt4(*far)).unwrap();
            writeln!(s, "dir_threshold {}", fmt4(o.threshold)).unwrap();
            writeln!(s, "dir_at_far {}", fmt4(o.dir)).unwrap();
        }
        s
    }
}
