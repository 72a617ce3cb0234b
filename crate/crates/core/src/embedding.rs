//! Hidden-layer feature extraction under modality masks, a t-SNE embedding
//! and highlighted scatter panels.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{class_to_label, sample_patch, Subject, LABEL_SET};
use crate::missingness::ModalityMask;
use crate::nets::{ops, Model};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VoxelId {
    pub subject: String,
    pub patch: usize,
    /// Volume coordinates `[z, y, x]`.
    pub coords: [isize; 3],
}

impl std::fmt::Display for VoxelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/p{}/{}_{}_{}", self.subject, self.patch, self.coords[0], self.coords[1], self.coords[2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub feature: Vec<f32>,
    pub predicted_label: u8,
    pub true_label: u8,
    pub mask_name: String,
    pub voxel_id: VoxelId,
}

/// Draws `n_patches` training-style patches and records the final hidden
/// layer at randomly chosen target voxels under every mask. `n_voxels` is
/// the total sample count and is split evenly across the masks; each mask
/// sees the same voxel set.
#[allow(clippy::too_many_arguments)]
pub fn extract_features<R: Rng + ?Sized>(
    model: &mut Model,
    subjects: &[Subject],
    rng: &mut R,
    n_patches: usize,
    n_voxels: usize,
    masks: &[ModalityMask],
    input_side: usize,
    modality_names: &[String],
) -> Result<Vec<FeatureSample>> {
    if subjects.is_empty() || n_patches == 0 {
        return Err(Error::invalid("feature extraction needs subjects and patches"));
    }
    if masks.is_empty() || n_voxels % masks.len() != 0 {
        return Err(Error::invalid(format!("{n_voxels} voxels cannot be split evenly over {} masks", masks.len())));
    }
    let per_mask = n_voxels / masks.len();
    let depth = model.config().depth;
    let t = crate::nets::output_size(input_side, depth)?;
    let per_patch = t * t * t;
    let available = n_patches * per_patch;
    if per_mask > available {
        return Err(Error::invalid(format!(
            "{per_mask} voxels per mask requested, {n_patches} patches of {t}³ provide {available}"
        )));
    }
    let patches = (0..n_patches)
        .map(|_| {
            let s = &subjects[rng.random_range(0..subjects.len())];
            Ok((s.id().to_string(), sample_patch(s, rng, input_side, depth)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut chosen: Vec<usize> = sample(rng, available, per_mask).into_vec();
    chosen.sort_unstable();
    let width = model.hidden_width();
    let mut per_mask_samples: Vec<Vec<FeatureSample>> = vec![Vec::with_capacity(per_mask); masks.len()];
    let mut next = 0;
    for (p, (subject, patch)) in patches.iter().enumerate() {
        let lo = next;
        while next < chosen.len() && chosen[next] < (p + 1) * per_patch {
            next += 1;
        }
        if lo == next {
            continue;
        }
        let outputs = model.predict_masks(&patch.input, masks)?;
        for (k, (logits, hidden)) in outputs.iter().enumerate() {
            debug_assert_eq!(hidden.channels, width);
            let pred = ops::argmax_channels(logits);
            let name = masks[k].name(modality_names);
            for &flat in &chosen[lo..next] {
                let v = flat - p * per_patch;
                let local = [v / (t * t), (v / t) % t, v % t];
                per_mask_samples[k].push(FeatureSample {
                    feature: (0..width).map(|c| hidden.data[c * per_patch + v]).collect(),
                    predicted_label: class_to_label(pred[v]),
                    true_label: patch.target[v],
                    mask_name: name.clone(),
                    voxel_id: VoxelId {
                        subject: subject.clone(),
                        patch: p,
                        coords: [0, 1, 2].map(|a| patch.target_origin[a] + local[a] as isize),
                    },
                });
            }
        }
    }
    Ok(per_mask_samples.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TsneMethod {
    Exact,
    BarnesHut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    /// Barnes-Hut opening angle.
    pub theta: f64,
    pub seed: u64,
    /// `None` picks exact below 2,000 points and Barnes-Hut above.
    pub method: Option<TsneMethod>,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            theta: 0.5,
            seed: 0,
            method: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub points: Vec<[f64; 2]>,
    pub method: TsneMethod,
    pub kl_divergence: f64,
}

/// Sparse row-major affinity matrix.
struct Affinities {
    rows: Vec<Vec<(usize, f64)>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Conditional affinities for one point from squared distances to its
/// candidate neighbours, bisecting the precision to hit `log(perplexity)`.
fn conditional_row(dists: &[f64], perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut beta = 1.0;
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut p = vec![0.0; dists.len()];
    for _ in 0..200 {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (pi, &d) in p.iter_mut().zip(dists) {
            *pi = (-(d - min) * beta).exp();
            sum += *pi;
            weighted += (d - min) * *pi;
        }
        let entropy = sum.ln() + beta * weighted / sum;
        p.iter_mut().for_each(|x| *x /= sum);
        let diff = entropy - target;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

fn affinities(x: &[Vec<f64>], perplexity: f64, method: TsneMethod) -> Affinities {
    let n = x.len();
    let k = match method {
        TsneMethod::Exact => n - 1,
        TsneMethod::BarnesHut => ((3.0 * perplexity) as usize).min(n - 1),
    };
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut cand: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, sq_dist(&x[i], &x[j]))).collect();
        if k < cand.len() {
            cand.select_nth_unstable_by(k, |a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            cand.truncate(k);
            cand.sort_unstable_by_key(|c| c.0);
        }
        let d: Vec<f64> = cand.iter().map(|c| c.1).collect();
        let p = conditional_row(&d, perplexity);
        rows.push(cand.iter().zip(p).map(|(c, p)| (c.0, p)).collect());
    }
    let mut sym: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
    for (i, row) in rows.iter().enumerate() {
        for &(j, p) in row {
            *sym[i].entry(j).or_default() += p;
            *sym[j].entry(i).or_default() += p;
        }
    }
    let norm = 2.0 * n as f64;
    Affinities {
        rows: sym.into_iter().map(|r| r.into_iter().map(|(j, p)| (j, p / norm)).collect()).collect(),
    }
}

/// Quadtree over the embedding for Barnes-Hut repulsion.
struct QuadTree {
    nodes: Vec<QuadNode>,
    order: Vec<usize>,
}

struct QuadNode {
    center_of_mass: [f64; 2],
    count: usize,
    width: f64,
    children: Vec<usize>,
    /// Range into `order` for leaves.
    leaf: Option<(usize, usize)>,
}

impl QuadTree {
    fn build(y: &[[f64; 2]]) -> Self {
        let mut tree = QuadTree {
            nodes: Vec::new(),
            order: (0..y.len()).collect(),
        };
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in y {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let width = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
        tree.split(y, 0, y.len(), lo, width, 0);
        tree
    }

    fn split(&mut self, y: &[[f64; 2]], start: usize, end: usize, lo: [f64; 2], width: f64, depth: usize) -> usize {
        let count = end - start;
        let mut com = [0.0; 2];
        for &i in &self.order[start..end] {
            com[0] += y[i][0];
            com[1] += y[i][1];
        }
        com = com.map(|c| c / count as f64);
        let id = self.nodes.len();
        self.nodes.push(QuadNode {
            center_of_mass: com,
            count,
            width,
            children: Vec::new(),
            leaf: None,
        });
        if count == 1 || depth >= 40 {
            self.nodes[id].leaf = Some((start, end));
            return id;
        }
        let half = width / 2.0;
        let mid = [lo[0] + half, lo[1] + half];
        let quadrant = |p: &[f64; 2]| (p[0] >= mid[0]) as usize + 2 * (p[1] >= mid[1]) as usize;
        let slice = &mut self.order[start..end];
        slice.sort_by_key(|&i| quadrant(&y[i]));
        let mut bounds = [start; 5];
        for q in 0..4 {
            bounds[q + 1] = bounds[q] + self.order[start..end].iter().filter(|&&i| quadrant(&y[i]) == q).count();
        }
        let mut children = Vec::new();
        for q in 0..4 {
            if bounds[q + 1] > bounds[q] {
                let child_lo = [lo[0] + half * (q & 1) as f64, lo[1] + half * (q >> 1) as f64];
                children.push(self.split(y, bounds[q], bounds[q + 1], child_lo, half, depth + 1));
            }
        }
        self.nodes[id].children = children;
        id
    }

    /// Unnormalized repulsive force on point `i` and its share of Z.
    fn repulsion(&self, y: &[[f64; 2]], i: usize, theta: f64, stack: &mut Vec<usize>) -> ([f64; 2], f64) {
        let mut force = [0.0; 2];
        let mut z = 0.0;
        stack.clear();
        stack.push(0);
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if let Some((s, e)) = node.leaf {
                for &j in &self.order[s..e] {
                    if j == i {
                        continue;
                    }
                    let d = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
                    let w = 1.0 / (1.0 + d[0] * d[0] + d[1] * d[1]);
                    z += w;
                    force[0] += w * w * d[0];
                    force[1] += w * w * d[1];
                }
                continue;
            }
            let d = [y[i][0] - node.center_of_mass[0], y[i][1] - node.center_of_mass[1]];
            let d2 = d[0] * d[0] + d[1] * d[1];
            if node.width * node.width < theta * theta * d2 {
                let w = 1.0 / (1.0 + d2);
                let n = node.count as f64;
                z += n * w;
                force[0] += n * w * w * d[0];
                force[1] += n * w * w * d[1];
            } else {
                stack.extend(&node.children);
            }
        }
        (force, z)
    }
}

/// Embeds the features in 2-D with t-SNE. Deterministic for a fixed seed.
pub fn compute_tsne(features: &[Vec<f32>], config: &TsneConfig) -> Result<TsneResult> {
    let n = features.len();
    if (n as f64) < 3.0 * config.perplexity || n < 4 {
        return Err(Error::invalid(format!("t-SNE with perplexity {} needs at least {} samples, got {n}", config.perplexity, (3.0 * config.perplexity).ceil())));
    }
    let x: Vec<Vec<f64>> = features.iter().map(|f| f.iter().map(|&v| v as f64).collect()).collect();
    if x.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("t-SNE input contains non-finite features"));
    }
    if x.iter().all(|r| r == &x[0]) {
        return Err(Error::invalid("t-SNE input is degenerate: all feature vectors are identical"));
    }
    let method = config.method.unwrap_or(if n <= 2000 { TsneMethod::Exact } else { TsneMethod::BarnesHut });
    let p = affinities(&x, config.perplexity, method);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut grad = vec![[0.0f64; 2]; n];
    let mut stack = Vec::new();

    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iterations { config.early_exaggeration } else { 1.0 };
        let momentum = if iter < config.exaggeration_iterations { 0.5 } else { 0.8 };
        let mut repulsive = vec![[0.0f64; 2]; n];
        let mut z = 0.0;
        match method {
            TsneMethod::Exact => {
                for i in 0..n {
                    for j in (i + 1)..n {
                        let d = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
                        let w = 1.0 / (1.0 + d[0] * d[0] + d[1] * d[1]);
                        z += 2.0 * w;
                        for a in 0..2 {
                            repulsive[i][a] += w * w * d[a];
                            repulsive[j][a] -= w * w * d[a];
                        }
                    }
                }
            }
            TsneMethod::BarnesHut => {
                let tree = QuadTree::build(&y);
                for i in 0..n {
                    let (f, zi) = tree.repulsion(&y, i, config.theta, &mut stack);
                    repulsive[i] = f;
                    z += zi;
                }
            }
        }
        for i in 0..n {
            let mut attractive = [0.0; 2];
            for &(j, pij) in &p.rows[i] {
                let d = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
                let w = 1.0 / (1.0 + d[0] * d[0] + d[1] * d[1]);
                attractive[0] += exaggeration * pij * w * d[0];
                attractive[1] += exaggeration * pij * w * d[1];
            }
            for a in 0..2 {
                grad[i][a] = 4.0 * (attractive[a] - repulsive[i][a] / z);
            }
        }
        for i in 0..n {
            for a in 0..2 {
                let same_sign = (grad[i][a] > 0.0) == (velocity[i][a] > 0.0);
                gains[i][a] = if same_sign { (gains[i][a] * 0.8).max(0.01) } else { gains[i][a] + 0.2 };
                velocity[i][a] = momentum * velocity[i][a] - config.learning_rate * gains[i][a] * grad[i][a];
                y[i][a] += velocity[i][a];
            }
        }
        let mean = y.iter().fold([0.0; 2], |m, p| [m[0] + p[0], m[1] + p[1]]).map(|s| s / n as f64);
        y.iter_mut().for_each(|p| {
            p[0] -= mean[0];
            p[1] -= mean[1];
        });
    }
    if y.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::invalid("t-SNE diverged to non-finite coordinates"));
    }
    let kl_divergence = kl_divergence(&p, &y);
    Ok(TsneResult {
        points: y,
        method,
        kl_divergence,
    })
}

/// KL(P‖Q) over the stored affinities, with the exact Q normalizer; NaN
/// above 5,000 points.
fn kl_divergence(p: &Affinities, y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let w = |i: usize, j: usize| 1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2));
    if n > 5000 {
        return f64::NAN;
    }
    let z: f64 = (0..n).map(|i| (0..n).filter(|&j| j != i).map(|j| w(i, j)).sum::<f64>()).sum();
    let mut kl = 0.0;
    for (i, row) in p.rows.iter().enumerate() {
        for &(j, pij) in row {
            if pij > 0.0 {
                kl += pij * (pij / (w(i, j) / z)).ln();
            }
        }
    }
    kl
}

/// Leave-one-out 1-nearest-neighbour accuracy of `labels` in the embedding.
pub fn nearest_neighbor_accuracy(points: &[[f64; 2]], labels: &[String]) -> f64 {
    let n = points.len();
    if n < 2 {
        return f64::NAN;
    }
    let mut hits = 0usize;
    for i in 0..n {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..n {
            if j != i {
                let d = (points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2);
                if d < best.0 {
                    best = (d, j);
                }
            }
        }
        hits += (labels[best.1] == labels[i]) as usize;
    }
    hits as f64 / n as f64
}

/// Accuracy of always guessing the most frequent label.
pub fn majority_rate(labels: &[String]) -> f64 {
    let mut counts = std::collections::HashMap::new();
    for l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts.values().copied().max().unwrap_or(0) as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Highlight {
    PredictedLabel,
    TrueLabel,
    MaskName,
}

impl Highlight {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "predicted_label" | "pred" => Ok(Highlight::PredictedLabel),
            "true_label" | "true" => Ok(Highlight::TrueLabel),
            "mask_name" | "mask" => Ok(Highlight::MaskName),
            other => Err(Error::invalid(format!("unknown highlight key '{other}'"))),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Highlight::PredictedLabel => "predicted_label",
            Highlight::TrueLabel => "true_label",
            Highlight::MaskName => "mask_name",
        }
    }

    fn value(self, s: &FeatureSample) -> String {
        match self {
            Highlight::PredictedLabel => s.predicted_label.to_string(),
            Highlight::TrueLabel => s.true_label.to_string(),
            Highlight::MaskName => s.mask_name.clone(),
        }
    }

    /// Panel values: every label for label keys, masks in order of first
    /// appearance.
    fn values(self, samples: &[FeatureSample]) -> Vec<String> {
        match self {
            Highlight::PredictedLabel | Highlight::TrueLabel => LABEL_SET.iter().map(|l| l.to_string()).collect(),
            Highlight::MaskName => {
                let mut out: Vec<String> = Vec::new();
                for s in samples {
                    if !out.contains(&s.mask_name) {
                        out.push(s.mask_name.clone());
                    }
                }
                out
            }
        }
    }
}

const PANEL: usize = 256;
const MARGIN: usize = 8;
const GRAY: [u8; 3] = [170, 170, 170];
const RED: [u8; 3] = [215, 25, 28];

/// Writes one scatter panel per highlight value side by side into a PNG:
/// members of the value in red, everything else gray. Returns the panel
/// values in order.
pub fn render_scatter(points: &[[f64; 2]], samples: &[FeatureSample], highlight: Highlight, path: &Path) -> Result<Vec<String>> {
    if points.len() != samples.len() {
        return Err(Error::invalid(format!("{} points for {} samples", points.len(), samples.len())));
    }
    let values = highlight.values(samples);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = [(hi[0] - lo[0]).max(1e-12), (hi[1] - lo[1]).max(1e-12)];
    let inner = PANEL - 2 * MARGIN;
    let width = PANEL * values.len().max(1);
    let mut image = vec![255u8; width * PANEL * 3];
    let put = |image: &mut [u8], px: usize, py: usize, color: [u8; 3]| {
        for dy in 0..3 {
            for dx in 0..3 {
                let (x, y) = (px + dx, py + dy);
                if x < width && y < PANEL {
                    let o = (y * width + x) * 3;
                    image[o..o + 3].copy_from_slice(&color);
                }
            }
        }
    };
    for (k, value) in values.iter().enumerate() {
        let members: Vec<bool> = samples.iter().map(|s| &highlight.value(s) == value).collect();
        if !members.contains(&true) {
            log::warn!("highlight {}={value} has no samples; panel is all gray", highlight.key());
        }
        let to_pixel = |p: &[f64; 2]| {
            let x = MARGIN + (((p[0] - lo[0]) / span[0]) * (inner - 3) as f64) as usize;
            let y = MARGIN + (((hi[1] - p[1]) / span[1]) * (inner - 3) as f64) as usize;
            (k * PANEL + x, y)
        };
        for pass in [false, true] {
            for (p, &m) in points.iter().zip(&members) {
                if m == pass {
                    let (x, y) = to_pixel(p);
                    put(&mut image, x, y, if m { RED } else { GRAY });
                }
            }
        }
        for y in 0..PANEL {
            let o = (y * width + k * PANEL) * 3;
            image[o..o + 3].copy_from_slice(&[0, 0, 0]);
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), width as u32, PANEL as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::invalid(format!("png: {e}")))?;
    writer.write_image_data(&image).map_err(|e| Error::invalid(format!("png: {e}")))?;
    writer.finish().map_err(|e| Error::invalid(format!("png: {e}")))?;
    Ok(values)
}

/// `embedding.csv`: voxel_id, mask, x, y, pred, true.
pub fn write_embedding_csv(path: &Path, points: &[[f64; 2]], samples: &[FeatureSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(["voxel_id", "mask", "x", "y", "pred", "true"]).map_err(err)?;
    for (p, s) in points.iter().zip(samples) {
        w.write_record([
            s.voxel_id.to_string(),
            s.mask_name.clone(),
            p[0].to_string(),
            p[1].to_string(),
            s.predicted_label.to_string(),
            s.true_label.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
