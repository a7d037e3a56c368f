//! Selects trigger frequencies from a sensitivity map with 2-means over (error, radius)
//! features.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heatmap::{pbm_bytes, sibling, FourierHeatMap, SensitivityMap};
use crate::spectral::{self, Position};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyFeature {
    pub position: Position,
    /// `1 − t`.
    pub d0: f64,
    /// Distance to the real-valued center `(h/2, w/2)`.
    pub d1: f64,
}

impl FrequencyFeature {
    pub fn point(&self) -> [f64; 2] {
        [self.d0, self.d1]
    }
}

/// Distance from `(i, j)` to `(h/2, w/2)`, with the center kept real-valued.
pub fn radius(i: usize, j: usize, h: usize, w: usize) -> f64 {
    let di = i as f64 - h as f64 / 2.0;
    let dj = j as f64 - w as f64 / 2.0;
    (di * di + dj * dj).sqrt()
}

/// One feature per canonical sensitive position.
pub fn extract_features(heatmap: &FourierHeatMap, smap: &SensitivityMap) -> Result<Vec<FrequencyFeature>> {
    let (h, w) = (heatmap.height, heatmap.width);
    if (smap.height, smap.width) != (h, w) {
        return Err(Error::arg(format!(
            "sensitivity map is {}x{}, heat map is {h}x{w}",
            smap.height, smap.width
        )));
    }
    Ok(spectral::canonical_positions(h, w)
        .into_iter()
        .filter(|&(i, j)| smap.get(i, j) == 1)
        .map(|(i, j)| FrequencyFeature { position: (i, j), d0: 1.0 - heatmap.get(i, j), d1: radius(i, j, h, w) })
        .collect())
}

/// Per-dimension min-max scaling to `[0, 1]`; a constant dimension maps to 0.
pub fn minmax_normalize(points: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    if points.len() < 2 {
        return Err(Error::Degenerate(format!("normalization needs at least 2 points, got {}", points.len())));
    }
    let mut out = points.to_vec();
    for d in 0..2 {
        let lo = points.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
        for p in &mut out {
            p[d] = if hi > lo { (p[d] - lo) / (hi - lo) } else { 0.0 };
        }
    }
    Ok(out)
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster (0 or 1) per input point.
    pub assignment: Vec<usize>,
    pub centroids: [[f64; 2]; 2],
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
}

/// Seeded k-means++ for k = 2: a uniform first center, then a D²-weighted second one.
pub fn kmeans_pp_init(points: &[[f64; 2]], seed: u64) -> Result<[[f64; 2]; 2]> {
    if points.len() < 2 {
        return Err(Error::Degenerate(format!("k-means needs at least 2 points, got {}", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = points[rng.random_range(0..points.len())];
    let weights: Vec<f64> = points.iter().map(|p| dist2(p, &first)).collect();
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(Error::Degenerate("all feature points are identical".into()));
    }
    let mut target = rng.random::<f64>() * total;
    let mut second = None;
    for (p, &wgt) in points.iter().zip(&weights) {
        if wgt > 0.0 && target < wgt {
            second = Some(*p);
            break;
        }
        target -= wgt;
    }
    // Rounding can leave `target` just past the end; fall back to the last weighted point.
    let second = second.unwrap_or_else(|| {
        let k = weights.iter().rposition(|&w| w > 0.0).expect("total > 0");
        points[k]
    });
    Ok([first, second])
}

fn assign(points: &[[f64; 2]], c: &[[f64; 2]; 2]) -> (Vec<usize>, f64) {
    let mut wcss = 0.0;
    let labels = points
        .iter()
        .map(|p| {
            let (a, b) = (dist2(p, &c[0]), dist2(p, &c[1]));
            wcss += a.min(b);
            usize::from(b < a)
        })
        .collect();
    (labels, wcss)
}

/// Lloyd iterations from a given initialization.
///
/// Stops once no centroid moves by `tol` or more, or after `max_iters` updates. An empty
/// cluster is reseeded with the point farthest from the other centroid.
pub fn lloyd(points: &[[f64; 2]], init: [[f64; 2]; 2], max_iters: usize, tol: f64) -> KMeansResult {
    let mut centroids = init;
    let mut history = Vec::new();
    let (mut labels, mut wcss) = assign(points, &centroids);
    history.push(wcss);
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut sums = [[0.0; 2]; 2];
        let mut counts = [0usize; 2];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            counts[l] += 1;
        }
        let mut next = centroids;
        for k in 0..2 {
            if counts[k] > 0 {
                next[k] = [sums[k][0] / counts[k] as f64, sums[k][1] / counts[k] as f64];
            }
        }
        for k in 0..2 {
            if counts[k] == 0 {
                let other = next[1 - k];
                let mut far = 0;
                for (idx, p) in points.iter().enumerate() {
                    if dist2(p, &other) > dist2(&points[far], &other) {
                        far = idx;
                    }
                }
                next[k] = points[far];
            }
        }
        let moved = dist2(&next[0], &centroids[0]).sqrt().max(dist2(&next[1], &centroids[1]).sqrt());
        centroids = next;
        (labels, wcss) = assign(points, &centroids);
        history.push(wcss);
        if moved < tol {
            break;
        }
    }
    KMeansResult { assignment: labels, centroids, wcss_history: history, iterations }
}

pub fn kmeans2(points: &[[f64; 2]], seed: u64, max_iters: usize, tol: f64) -> Result<KMeansResult> {
    let init = kmeans_pp_init(points, seed)?;
    Ok(lloyd(points, init, max_iters, tol))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selection {
    /// The cluster closer to the spectrum center (mid-low frequencies).
    #[default]
    Nearest,
    /// The other cluster, for the high-frequency ablation.
    Farthest,
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Selection::Nearest),
            "farthest" => Ok(Selection::Farthest),
            other => Err(Error::arg(format!("unknown selection {other:?} (nearest|farthest)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDiagnostics {
    pub centroids: [[f64; 2]; 2],
    pub counts: [usize; 2],
    pub mean_radius: [f64; 2],
    pub selected: usize,
    pub iterations: usize,
    pub wcss_history: Vec<f64>,
    /// True when clustering was skipped and every sensitive position kept.
    pub fallback: bool,
}

/// Binary mask over centered spectrum positions; `1` marks trigger frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringMap {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
    pub diagnostics: Option<ClusterDiagnostics>,
}

impl ClusteringMap {
    pub fn from_positions(height: usize, width: usize, positions: &[Position]) -> Result<Self> {
        let mut mask = vec![0u8; height * width];
        for &(i, j) in positions {
            if i >= height || j >= width {
                return Err(Error::arg(format!("position ({i}, {j}) outside {height}x{width}")));
            }
            let (si, sj) = spectral::sym_index(i, j, height, width);
            mask[i * width + j] = 1;
            mask[si * width + sj] = 1;
        }
        Ok(ClusteringMap { height, width, mask, diagnostics: None })
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.mask[i * self.width + j]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Canonical representatives of the marked positions, row-major.
    pub fn canonical_positions(&self) -> Vec<Position> {
        spectral::canonical_positions(self.height, self.width)
            .into_iter()
            .filter(|&(i, j)| self.get(i, j) == 1)
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.height).all(|i| {
            (0..self.width).all(|j| {
                let (si, sj) = spectral::sym_index(i, j, self.height, self.width);
                self.get(i, j) == self.get(si, sj)
            })
        })
    }

    /// Writes `<base>.tensor`, `<base>.pbm` and, with diagnostics, `<base>.report`.
    pub fn save(&self, base: impl AsRef<Path>) -> Result<()> {
        let base = base.as_ref();
        let values: Vec<f64> = self.mask.iter().map(|&v| f64::from(v)).collect();
        Tensor::from_f64(vec![self.height, self.width], &values)?.save(sibling(base, "tensor"))?;
        fs::write(sibling(base, "pbm"), pbm_bytes(self.height, self.width, &self.mask))?;
        fs::write(sibling(base, "report"), self.report())?;
        Ok(())
    }

    pub fn load(base: impl AsRef<Path>) -> Result<Self> {
        let t = Tensor::load(sibling(base.as_ref(), "tensor"))?;
        if t.dims.len() != 2 {
            return Err(Error::Format(format!("mask tensor has rank {}", t.dims.len())));
        }
        let mask: Vec<u8> = t.data.iter().map(|&v| u8::from(v != 0.0)).collect();
        let map = ClusteringMap { height: t.dims[0], width: t.dims[1], mask, diagnostics: None };
        if !map.is_symmetric() {
            return Err(Error::Format("mask is not point-symmetric".into()));
        }
        Ok(map)
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dims={}x{}", self.height, self.width);
        let _ = writeln!(s, "marked_positions={}", self.count());
        let _ = writeln!(s, "canonical_positions={:?}", self.canonical_positions());
        if let Some(d) = &self.diagnostics {
            let _ = writeln!(s, "fallback={}", d.fallback);
            let _ = writeln!(s, "selected_cluster={}", d.selected);
            for k in 0..2 {
                let _ = writeln!(
                    s,
                    "cluster{k}: count={} mean_radius={:.6} centroid=({:.6}, {:.6})",
                    d.counts[k], d.mean_radius[k], d.centroids[k][0], d.centroids[k][1]
                );
            }
            let _ = writeln!(s, "iterations={}", d.iterations);
            let hist: Vec<String> = d.wcss_history.iter().map(|v| format!("{v:.9}")).collect();
            let _ = writeln!(s, "wcss_history={}", hist.join(","));
        }
        s
    }
}

/// Picks the cluster with the lower mean raw radius (or the other one for `Farthest`) and
/// marks its members plus their symmetric partners.
///
/// Equal mean radii go to the cluster that holds the smallest-radius member.
pub fn select_cluster(
    km: &KMeansResult,
    features: &[FrequencyFeature],
    height: usize,
    width: usize,
    selection: Selection,
) -> Result<ClusteringMap> {
    if km.assignment.len() != features.len() {
        return Err(Error::arg("assignment and features differ in length"));
    }
    let mut counts = [0usize; 2];
    let mut sums = [0.0; 2];
    let mut closest = (f64::INFINITY, 0usize);
    for (f, &l) in features.iter().zip(&km.assignment) {
        counts[l] += 1;
        sums[l] += f.d1;
        if f.d1 < closest.0 {
            closest = (f.d1, l);
        }
    }
    let mean = [0, 1].map(|k| if counts[k] > 0 { sums[k] / counts[k] as f64 } else { f64::INFINITY });
    let nearest = if mean[0] < mean[1] {
        0
    } else if mean[1] < mean[0] {
        1
    } else {
        closest.1
    };
    let selected = match selection {
        Selection::Nearest => nearest,
        Selection::Farthest => 1 - nearest,
    };
    let chosen: Vec<Position> =
        features.iter().zip(&km.assignment).filter(|(_, &l)| l == selected).map(|(f, _)| f.position).collect();
    let mut map = ClusteringMap::from_positions(height, width, &chosen)?;
    map.diagnostics = Some(ClusterDiagnostics {
        centroids: km.centroids,
        counts,
        mean_radius: mean,
        selected,
        iterations: km.iterations,
        wcss_history: km.wcss_history.clone(),
        fallback: false,
    });
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub selection: Selection,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { seed: 0, max_iters: DEFAULT_MAX_ITERS, tol: DEFAULT_TOL, selection: Selection::Nearest }
    }
}

/// Features → normalization → 2-means → selection.
///
/// With fewer than two sensitive pairs, or identical features, all sensitive positions are
/// kept and the diagnostics flag the fallback. No sensitive position at all is an error.
pub fn cluster_map(heatmap: &FourierHeatMap, smap: &SensitivityMap, cfg: &ClusterConfig) -> Result<ClusteringMap> {
    let features = extract_features(heatmap, smap)?;
    if features.is_empty() {
        return Err(Error::Degenerate("no sensitive frequencies".into()));
    }
    let raw: Vec<[f64; 2]> = features.iter().map(FrequencyFeature::point).collect();
    let clustered = minmax_normalize(&raw).and_then(|norm| kmeans2(&norm, cfg.seed, cfg.max_iters, cfg.tol));
    match clustered {
        Ok(km) => select_cluster(&km, &features, heatmap.height, heatmap.width, cfg.selection),
        Err(Error::Degenerate(_)) => {
            let positions: Vec<Position> = features.iter().map(|f| f.position).collect();
            let mut map = ClusteringMap::from_positions(heatmap.height, heatmap.width, &positions)?;
            let mean = features.iter().map(|f| f.d1).sum::<f64>() / features.len() as f64;
            map.diagnostics = Some(ClusterDiagnostics {
                centroids: [raw[0], raw[0]],
                counts: [features.len(), 0],
                mean_radius: [mean, f64::INFINITY],
                selected: 0,
                iterations: 0,
                wcss_history: Vec::new(),
                fallback: true,
            });
            Ok(map)
        }
        Err(e) => Err(e),
    }
}
