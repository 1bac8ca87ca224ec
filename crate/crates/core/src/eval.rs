//! Verification, TAR@FAR and rank-1 identification on synthetic manifests,
//! plus per-region breakdowns, JSON reports and SVG plots.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{MaskOverride, Network, NetworkConfig, PatternHead};
use crate::par;
use crate::synth::{DatasetConfig, DatasetManifest};
use crate::tensor::Tensor;
use crate::train::argmax_rows;

pub const PAIRS_VERSION: u32 = 1;
pub const DEFAULT_FARS: [f64; 2] = [1e-2, 1e-3];

/// How pairs are built; echoed into every report.
pub const PAIR_RECIPE: &str =
    "both sides drawn from the same manifest, occluded independently by its generator";

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Two manifest records (by position) and whether they share an identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairsHeader {
    pub version: u32,
    /// Manifest the indices refer to, relative to the pairs file.
    pub manifest: PathBuf,
    pub recipe: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub header: PairsHeader,
    pub pairs: Vec<VerificationPair>,
}

impl PairSet {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for p in &self.pairs {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Protocol("empty pairs file".into()))??;
        let header: PairsHeader = serde_json::from_str(&first)?;
        if header.version != PAIRS_VERSION {
            return Err(Error::Protocol(format!(
                "pairs format version {} unsupported (expected {PAIRS_VERSION})",
                header.version
            )));
        }
        let mut pairs = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                pairs.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { header, pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Protocol(format!("{}: {e}", path.display())))?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    /// Manifest path resolved against the pairs file location.
    pub fn manifest_path(&self, pairs_file: &Path) -> PathBuf {
        pairs_file
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&self.header.manifest)
    }
}

/// Balanced positive/negative pairs over the records of a manifest.
pub fn make_pairs(identities: &[usize], per_label: usize, seed: u64) -> Result<Vec<VerificationPair>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &id) in identities.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    let multi: Vec<&Vec<usize>> = by_id.values().filter(|v| v.len() >= 2).collect();
    if multi.is_empty() || by_id.len() < 2 {
        return Err(Error::Protocol(
            "pairs need two identities and one identity with two samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(2 * per_label);
    for i in 0..per_label {
        let group = multi[rng.random_range(0..multi.len())];
        let picked: Vec<usize> = group.choose_multiple(&mut rng, 2).copied().collect();
        let pos = VerificationPair {
            a: picked[0],
            b: picked[1],
            same: true,
        };
        let (a, b) = loop {
            let a = rng.random_range(0..identities.len());
            let b = rng.random_range(0..identities.len());
            if identities[a] != identities[b] {
                break (a, b);
            }
        };
        let neg = VerificationPair { a, b, same: false };
        // pos,neg,neg,pos,... keeps both the even and odd splits balanced
        if i % 2 == 0 {
            pairs.extend([pos, neg]);
        } else {
            pairs.extend([neg, pos]);
        }
    }
    Ok(pairs)
}

/// Confusion counts at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    /// Accept when `score >= threshold`.
    pub fn at(scores: &[f64], same: &[bool], threshold: f64) -> Self {
        let mut c = Counts::default();
        for (&s, &y) in scores.iter().zip(same) {
            match (s >= threshold, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn tar(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn far(&self) -> f64 {
        self.fp as f64 / (self.fp + self.tn) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    /// Accuracy on the test split (odd pair indices).
    pub accuracy: f64,
    pub threshold: f64,
    /// Accuracy on the dev split (even pair indices) at the chosen threshold.
    pub dev_accuracy: f64,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    /// Test-split counts.
    pub counts: Counts,
}

fn check_labels(same: &[bool], what: &str) -> Result<()> {
    let pos = same.iter().filter(|&&s| s).count();
    if pos == 0 || pos == same.len() {
        return Err(Error::Protocol(format!("{what} holds a single label")));
    }
    Ok(())
}

/// Threshold maximizing accuracy on `scores`; ties go to the lowest.
pub fn best_threshold(scores: &[f64], same: &[bool]) -> f64 {
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut candidates = Vec::with_capacity(sorted.len() + 1);
    candidates.push(sorted[0]);
    candidates.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(sorted[sorted.len() - 1].next_up());
    let mut best = (candidates[0], 0usize);
    for &t in &candidates {
        let c = Counts::at(scores, same, t);
        if c.tp + c.tn > best.1 {
            best = (t, c.tp + c.tn);
        }
    }
    best.0
}

/// Pick the threshold on even-indexed pairs, report on odd-indexed ones.
pub fn verification_accuracy(scores: &[f64], same: &[bool]) -> Result<Verification> {
    if scores.len() != same.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.len() < 2 {
        return Err(Error::Protocol("verification needs at least two pairs".into()));
    }
    check_labels(same, "pair set")?;
    let split = |parity: usize| -> (Vec<f64>, Vec<bool>) {
        (0..scores.len())
            .filter(|i| i % 2 == parity)
            .map(|i| (scores[i], same[i]))
            .unzip()
    };
    let (dev_s, dev_y) = split(0);
    let (test_s, test_y) = split(1);
    check_labels(&dev_y, "dev split")?;
    let threshold = best_threshold(&dev_s, &dev_y);
    let counts = Counts::at(&test_s, &test_y, threshold);
    Ok(Verification {
        accuracy: counts.accuracy(),
        threshold,
        dev_accuracy: Counts::at(&dev_s, &dev_y, threshold).accuracy(),
        dev_pairs: dev_s.len(),
        test_pairs: test_s.len(),
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far_target: f64,
    pub tar: f64,
    pub far: f64,
    pub threshold: f64,
    pub counts: Counts,
}

/// TAR at the most permissive threshold whose FAR stays `<= far_target`.
pub fn tar_at_far(scores: &[f64], same: &[bool], far_target: f64) -> Result<TarAtFar> {
    if scores.len() != same.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if !(far_target > 0.0 && far_target <= 1.0) {
        return Err(Error::invalid(format!("FAR target {far_target} outside (0, 1]")));
    }
    let mut neg: Vec<f64> = scores
        .iter()
        .zip(same)
        .filter(|p| !*p.1)
        .map(|p| *p.0)
        .collect();
    let n_pos = same.iter().filter(|&&s| s).count();
    if n_pos == 0 {
        return Err(Error::Protocol("no positive pairs".into()));
    }
    if far_target * (neg.len() as f64) < 1.0 {
        let need = (1.0 / far_target).ceil() as usize;
        return Err(Error::Protocol(format!(
            "FAR {far_target:e} needs at least {need} negative pairs, have {}",
            neg.len()
        )));
    }
    neg.sort_by(|a, b| b.total_cmp(a));
    let allowed = (far_target * neg.len() as f64 + 1e-9).floor() as usize;
    let threshold = if allowed >= neg.len() {
        -1.0
    } else {
        neg[allowed].next_up()
    };
    let counts = Counts::at(scores, same, threshold);
    Ok(TarAtFar {
        far_target,
        tar: counts.tar(),
        far: counts.far(),
        threshold,
        counts,
    })
}

/// Fraction of probes whose nearest gallery embedding (cosine) shares
/// their identity. Ties go to the earliest gallery entry.
pub fn rank1_identification(
    gallery: &[Vec<f32>],
    gallery_ids: &[usize],
    probes: &[Vec<f32>],
    probe_ids: &[usize],
) -> Result<f64> {
    if gallery.len() != gallery_ids.len() || probes.len() != probe_ids.len() {
        return Err(Error::invalid("embeddings and ids differ in length"));
    }
    if probes.is_empty() {
        return Err(Error::Protocol("no probes".into()));
    }
    if let Some(missing) = probe_ids.iter().find(|id| !gallery_ids.contains(id)) {
        return Err(Error::Protocol(format!("probe identity {missing} missing from gallery")));
    }
    let hits = par::map_indexed(probes.len(), |p| -> Result<bool> {
        let mut best = (f64::NEG_INFINITY, 0);
        for (g, emb) in gallery.iter().enumerate() {
            let s = cosine_similarity(&probes[p], emb)?;
            if s > best.0 {
                best = (s, g);
            }
        }
        Ok(gallery_ids[best.1] == probe_ids[p])
    });
    let mut correct = 0;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / probes.len() as f64)
}

const EMBED_CHUNK: usize = 32;

/// Evaluation-mode outputs for every record of a manifest, in order.
pub struct Extracted {
    pub embeddings: Vec<Vec<f32>>,
    /// Argmax pattern (classification head only).
    pub patterns: Option<Vec<usize>>,
}

pub fn extract(net: &Network<f32>, manifest: &DatasetManifest, mask: MaskOverride) -> Result<Extracted> {
    let cfg = manifest.config();
    check_compatible(&net.config, cfg)?;
    let samples = manifest.render_all()?;
    let per = cfg.channels * cfg.height * cfg.width;
    let chunks = samples.len().div_ceil(EMBED_CHUNK);
    let outs = par::map_indexed(chunks, |c| {
        let part = &samples[c * EMBED_CHUNK..((c + 1) * EMBED_CHUNK).min(samples.len())];
        let mut data = Vec::with_capacity(part.len() * per);
        for s in part {
            data.extend_from_slice(&s.image.data);
        }
        let images = Tensor::from_vec(&[part.len(), cfg.channels, cfg.height, cfg.width], data);
        net.infer(&images, mask)
    });
    let classify = net.config.has_mask() && net.config.pattern_head == PatternHead::Classify;
    let mut embeddings = Vec::with_capacity(samples.len());
    let mut patterns = classify.then(Vec::new);
    for out in outs {
        let out = out?;
        embeddings.extend(out.embedding.data().chunks(out.embedding.per_item()).map(<[f32]>::to_vec));
        if let (Some(p), Some(logits)) = (patterns.as_mut(), out.pattern.as_ref()) {
            p.extend(argmax_rows(logits));
        }
    }
    Ok(Extracted {
        embeddings,
        patterns,
    })
}

fn check_compatible(net: &NetworkConfig, data: &DatasetConfig) -> Result<()> {
    if (net.height, net.width, net.channels) != (data.height, data.width, data.channels) {
        return Err(Error::Protocol(format!(
            "model expects {}x{}x{} images, manifest has {}x{}x{}",
            net.channels, net.height, net.width, data.channels, data.height, data.width
        )));
    }
    Ok(())
}

pub fn pair_scores(pairs: &[VerificationPair], embeddings: &[Vec<f32>]) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (a, b) = match (embeddings.get(p.a), embeddings.get(p.b)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Protocol(format!(
                    "pair ({}, {}) refers past the {} embeddings",
                    p.a,
                    p.b,
                    embeddings.len()
                )))
            }
        };
        scores.push(cosine_similarity(a, b)?);
    }
    Ok((scores, pairs.iter().map(|p| p.same).collect()))
}

/// Fraction of records whose predicted pattern equals the label.
pub fn pattern_accuracy(predicted: &[usize], manifest: &DatasetManifest) -> f64 {
    let hits = predicted
        .iter()
        .zip(&manifest.records)
        .filter(|(p, r)| **p == r.pattern_label)
        .count();
    hits as f64 / manifest.len().max(1) as f64
}

/// Gallery = first record of each identity; probes = the rest.
pub fn rank1_from_manifest(embeddings: &[Vec<f32>], manifest: &DatasetManifest) -> Result<f64> {
    let mut gallery = Vec::new();
    let mut gallery_ids = Vec::new();
    let mut probes = Vec::new();
    let mut probe_ids = Vec::new();
    for (e, r) in embeddings.iter().zip(&manifest.records) {
        if gallery_ids.contains(&r.identity) {
            probes.push(e.clone());
            probe_ids.push(r.identity);
        } else {
            gallery.push(e.clone());
            gallery_ids.push(r.identity);
        }
    }
    rank1_identification(&gallery, &gallery_ids, &probes, &probe_ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub threshold: f64,
    pub dev_accuracy: f64,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub counts: Counts,
    /// Keyed by the FAR target as written (`"1e-2"`); `None` when the pair
    /// set has too few negatives for that target.
    pub tar_at_far: BTreeMap<String, Option<TarAtFar>>,
    pub rank1: f64,
    pub pattern_accuracy: Option<f64>,
    pub mask: String,
    pub notes: Vec<String>,
    pub pair_recipe: String,
    pub network: NetworkConfig,
    pub dataset: DatasetConfig,
}

/// Full report for one manifest + pair set.
pub fn evaluate(
    net: &Network<f32>,
    manifest: &DatasetManifest,
    pairs: &[VerificationPair],
    fars: &[f64],
    mask: MaskOverride,
) -> Result<(EvalReport, Vec<f64>, Vec<bool>)> {
    let ex = extract(net, manifest, mask)?;
    let (scores, same) = pair_scores(pairs, &ex.embeddings)?;
    let v = verification_accuracy(&scores, &same)?;
    let mut notes = Vec::new();
    let mut tars = BTreeMap::new();
    for &far in fars {
        let key = format!("{far:e}");
        match tar_at_far(&scores, &same, far) {
            Ok(t) => {
                tars.insert(key, Some(t));
            }
            Err(Error::Protocol(msg)) => {
                notes.push(msg);
                tars.insert(key, None);
            }
            Err(e) => return Err(e),
        }
    }
    let report = EvalReport {
        accuracy: v.accuracy,
        threshold: v.threshold,
        dev_accuracy: v.dev_accuracy,
        dev_pairs: v.dev_pairs,
        test_pairs: v.test_pairs,
        counts: v.counts,
        tar_at_far: tars,
        rank1: rank1_from_manifest(&ex.embeddings, manifest)?,
        pattern_accuracy: ex.patterns.as_ref().map(|p| pattern_accuracy(p, manifest)),
        mask: format!("{mask:?}"),
        notes,
        pair_recipe: PAIR_RECIPE.to_string(),
        network: net.config.clone(),
        dataset: manifest.config().clone(),
    };
    Ok((report, scores, same))
}

/// Verification accuracy per named manifest plus the mean across them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub regions: BTreeMap<String, f64>,
    pub mean: f64,
}

pub fn occlusion_breakdown(
    net: &Network<f32>,
    regions: &[(String, DatasetManifest)],
    pairs: &[VerificationPair],
    mask: MaskOverride,
) -> Result<Breakdown> {
    let mut out = BTreeMap::new();
    for (name, m) in regions {
        let ex = extract(net, m, mask)?;
        let (scores, same) = pair_scores(pairs, &ex.embeddings)?;
        out.insert(name.clone(), verification_accuracy(&scores, &same)?.accuracy);
    }
    let mean = out.values().sum::<f64>() / out.len().max(1) as f64;
    Ok(Breakdown { regions: out, mean })
}

/// Overlaid positive/negative score histograms.
pub fn score_histogram_svg(scores: &[f64], same: &[bool], threshold: f64) -> String {
    const BINS: usize = 40;
    const W: f64 = 640.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    let bin = |s: f64| (((s + 1.0) / 2.0 * BINS as f64) as usize).min(BINS - 1);
    let mut pos = [0usize; BINS];
    let mut neg = [0usize; BINS];
    for (&s, &y) in scores.iter().zip(same) {
        if y {
            pos[bin(s)] += 1;
        } else {
            neg[bin(s)] += 1;
        }
    }
    let peak = pos.iter().chain(&neg).copied().max().unwrap_or(1).max(1) as f64;
    let bw = (W - 2.0 * PAD) / BINS as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (counts, color) in [(&neg, "#d62728"), (&pos, "#1f77b4")] {
        for (i, &c) in counts.iter().enumerate() {
            let h = c as f64 / peak * (H - 2.0 * PAD);
            svg += &format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{color}\" fill-opacity=\"0.5\"/>\n",
                PAD + i as f64 * bw,
                H - PAD - h,
                bw
            );
        }
    }
    let tx = PAD + (threshold.clamp(-1.0, 1.0) + 1.0) / 2.0 * (W - 2.0 * PAD);
    svg += &format!(
        "<line x1=\"{tx:.1}\" y1=\"{PAD}\" x2=\"{tx:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-dasharray=\"4\"/>\n",
        H - PAD
    );
    svg += &format!(
        "<line x1=\"{PAD}\" y1=\"{y:.1}\" x2=\"{x2:.1}\" y2=\"{y:.1}\" stroke=\"black\"/>\n\
         <text x=\"{PAD}\" y=\"{ty:.1}\" font-size=\"12\">-1</text>\n\
         <text x=\"{x2:.1}\" y=\"{ty:.1}\" font-size=\"12\" text-anchor=\"end\">1</text>\n\
         <text x=\"{PAD}\" y=\"20\" font-size=\"14\">cosine scores: same (blue) / different (red)</text>\n</svg>\n",
        y = H - PAD,
        x2 = W - PAD,
        ty = H - PAD + 16.0
    );
    svg
}

/// One bar per FAR target.
pub fn tar_bar_svg(tars: &BTreeMap<String, Option<TarAtFar>>) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    let n = tars.len().max(1) as f64;
    let bw = (W - 2.0 * PAD) / n;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"20\" font-size=\"14\">TAR at FAR</text>\n"
    );
    for (i, (key, t)) in tars.iter().enumerate() {
        let x = PAD + i as f64 * bw;
        let label = match t {
            Some(t) => {
                let h = t.tar * (H - 2.0 * PAD);
                svg += &format!(
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"#1f77b4\"/>\n",
                    x + 0.15 * bw,
                    H - PAD - h,
                    0.7 * bw
                );
                format!("{key}: {:.3}", t.tar)
            }
            None => format!("{key}: n/a"),
        };
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{label}</text>\n",
            x + 0.5 * bw,
            H - PAD + 16.0
        );
    }
    svg + "</svg>\n"
}

pub fn write_plots(dir: &Path, report: &EvalReport, scores: &[f64], same: &[bool]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("scores.svg"), score_histogram_svg(scores, same, report.threshold))?;
    std::fs::write(dir.join("tar_at_far.svg"), tar_bar_svg(&report.tar_at_far))?;
    Ok(())
}
