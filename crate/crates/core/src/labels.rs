//! k-means codebooks and frame-level pseudo-labels.

use std::path::Path;

use rand::Rng as _;

use crate::audio::{mfcc, FeatureMatrix, MfccConfig, Waveform};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_MAX_ITER: usize = 100;

/// Where the clustered features came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Mfcc,
    ModelLayer(usize),
}

impl std::fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureSource::Mfcc => write!(f, "mfcc"),
            FeatureSource::ModelLayer(l) => write!(f, "model-layer-{l}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `C x D` centroids.
    pub centroids: Tensor,
    pub source: FeatureSource,
}

impl Codebook {
    pub fn n_clusters(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    /// Id reserved for silence: one past the last cluster.
    pub fn sil(&self) -> u32 {
        self.n_clusters() as u32
    }

    /// Header `u64 C`, `u64 D`, then row-major little-endian f64 centroids.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.n_clusters() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for v in self.centroids.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8], source: FeatureSource) -> Result<Self> {
        let fm = FeatureMatrix::from_bytes(buf, 0, 0).map_err(|_| Error::invalid("malformed codebook file"))?;
        if fm.num_frames() < 2 {
            return Err(Error::invalid("codebook needs at least two centroids"));
        }
        Ok(Self {
            centroids: fm.frames,
            source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, source: FeatureSource) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, source)
    }
}

/// Frame-rate unit ids; `sil` (= number of clusters) marks silence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitSequence {
    pub units: Vec<u32>,
    pub sil: u32,
}

impl UnitSequence {
    pub fn new(units: Vec<u32>, sil: u32) -> Self {
        Self { units, sil }
    }

    pub fn silent(len: usize, sil: u32) -> Self {
        Self {
            units: vec![sil; len],
            sil,
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn is_all_sil(&self) -> bool {
        self.units.iter().all(|&u| u == self.sil)
    }

    pub fn to_line(&self) -> String {
        self.units.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
    }

    pub fn parse_line(line: &str, sil: u32) -> Result<Self> {
        let units = line
            .split_whitespace()
            .map(|s| {
                s.parse::<u32>()
                    .map_err(|_| Error::invalid(format!("bad unit id `{s}`")))
                    .and_then(|u| {
                        if u > sil {
                            Err(Error::invalid(format!("unit id {u} exceeds SIL id {sil}")))
                        } else {
                            Ok(u)
                        }
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { units, sil })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared distance; ties go to the lowest index.
fn nearest(x: &[f64], centroids: &Tensor) -> (usize, f64) {
    let c = centroids.shape()[0];
    let mut best = (0, f64::INFINITY);
    for j in 0..c {
        let d = sq_dist(x, centroids.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct KmeansFit {
    pub codebook: Codebook,
    /// Inertia after each Lloyd iteration.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iter` is reached. `rows` is `N x D`.
pub fn kmeans_fit(rows: &Tensor, n_clusters: usize, seed: u64, max_iter: usize) -> Result<KmeansFit> {
    let (n, d) = rows.dims2()?;
    if n_clusters < 2 {
        return Err(Error::invalid("k-means needs at least two clusters"));
    }
    if n < n_clusters {
        return Err(Error::TooFewFrames {
            needed: n_clusters,
            got: n,
        });
    }
    let mut r = rng::keyed(seed, &[rng::domain::KMEANS]);

    // k-means++
    let mut centroids = Vec::with_capacity(n_clusters * d);
    let first = r.random_range(0..n);
    centroids.extend_from_slice(rows.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(rows.row(i), rows.row(first))).collect();
    for k in 1..n_clusters {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateFeatures {
                distinct: k,
                clusters: n_clusters,
            });
        }
        let mut target = r.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in dist.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        if dist[pick] == 0.0 {
            pick = dist.iter().rposition(|&w| w > 0.0).expect("total > 0");
        }
        let row = rows.row(pick).to_vec();
        for (i, dv) in dist.iter_mut().enumerate() {
            *dv = dv.min(sq_dist(rows.row(i), &row));
        }
        centroids.extend_from_slice(&row);
    }
    let mut cent = Tensor::new(vec![n_clusters, d], centroids)?;

    let mut assign = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (j, dd) = nearest(rows.row(i), &cent);
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
            dists[i] = dd;
        }
        // Update step. Empty clusters take the point farthest from its centroid.
        let mut sums = vec![0.0; n_clusters * d];
        let mut counts = vec![0usize; n_clusters];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * d..(assign[i] + 1) * d].iter_mut().zip(rows.row(i)) {
                *s += v;
            }
        }
        for j in 0..n_clusters {
            if counts[j] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .ok_or(Error::DegenerateFeatures {
                        distinct: j,
                        clusters: n_clusters,
                    })?;
                let old = assign[far];
                counts[old] -= 1;
                for (s, v) in sums[old * d..(old + 1) * d].iter_mut().zip(rows.row(far)) {
                    *s -= v;
                }
                assign[far] = j;
                counts[j] = 1;
                sums[j * d..(j + 1) * d].copy_from_slice(rows.row(far));
                dists[far] = 0.0;
                changed = true;
            }
        }
        let cd = cent.data_mut();
        for j in 0..n_clusters {
            for k in 0..d {
                cd[j * d + k] = sums[j * d + k] / counts[j] as f64;
            }
        }
        let total: f64 = (0..n).map(|i| sq_dist(rows.row(i), cent.row(assign[i]))).sum();
        inertia.push(total);
        if !changed {
            break;
        }
    }
    for a in 0..n_clusters {
        for b in a + 1..n_clusters {
            if cent.row(a) == cent.row(b) {
                return Err(Error::DegenerateFeatures {
                    distinct: n_clusters - 1,
                    clusters: n_clusters,
                });
            }
        }
    }
    Ok(KmeansFit {
        codebook: Codebook {
            centroids: cent,
            source: FeatureSource::Mfcc,
        },
        inertia,
        iterations,
    })
}

/// Stacks the frames of several feature matrices into one `N x D` tensor.
pub fn pool_frames(feats: &[FeatureMatrix]) -> Result<Tensor> {
    let d = feats.first().map(FeatureMatrix::dim).unwrap_or(0);
    let mut data = Vec::new();
    let mut n = 0;
    for f in feats {
        if f.dim() != d {
            return Err(Error::shape("pool_frames", format!("{} vs {d}", f.dim())));
        }
        data.extend_from_slice(f.frames.data());
        n += f.num_frames();
    }
    Tensor::new(vec![n, d], data)
}

pub fn assign_units(features: &FeatureMatrix, codebook: &Codebook) -> Result<UnitSequence> {
    if features.num_frames() > 0 && features.dim() != codebook.dim() {
        return Err(Error::shape(
            "assign_units",
            format!("feature dim {} vs codebook dim {}", features.dim(), codebook.dim()),
        ));
    }
    let units = (0..features.num_frames())
        .map(|t| nearest(features.row(t), &codebook.centroids).0 as u32)
        .collect();
    Ok(UnitSequence::new(units, codebook.sil()))
}

/// `assign_units` over many utterances.
pub fn assign_all(exec: Exec, feats: &[FeatureMatrix], codebook: &Codebook) -> Result<Vec<UnitSequence>> {
    par::map(exec, feats, |f| assign_units(f, codebook))
        .into_iter()
        .collect()
}

/// MFCC features, a k-means codebook fitted on all of their frames, and the
/// resulting unit sequences.
pub fn mfcc_labels(
    exec: Exec,
    waves: &[Waveform],
    cfg: &MfccConfig,
    n_clusters: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(Codebook, Vec<UnitSequence>)> {
    let feats = par::map(exec, waves, |w| mfcc(w, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let fit = kmeans_fit(&pool_frames(&feats)?, n_clusters, seed, max_iter)?;
    let units = assign_all(exec, &feats, &fit.codebook)?;
    Ok((fit.codebook, units))
}

/// Fraction of frames whose cluster's majority ground-truth label matches
/// their own ground-truth label.
pub fn cluster_purity(units: &[u32], truth: &[u32]) -> f64 {
    use std::collections::BTreeMap;
    let mut table: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for (&u, &g) in units.iter().zip(truth) {
        *table.entry(u).or_default().entry(g).or_default() += 1;
    }
    let hit: usize = table.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    hit as f64 / units.len().min(truth.len()).max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn fm(rows: usize, cols: usize, data: Vec<f64>) -> FeatureMatrix {
        FeatureMatrix {
            frames: Tensor::matrix(rows, cols, data).unwrap(),
            window: 400,
            hop: 320,
        }
    }

    #[test]
    fn distinct_points_become_centroids() {
        let pts = Tensor::matrix(4, 2, vec![0.0, 0.0, 5.0, 0.0, 0.0, 5.0, 5.0, 5.0]).unwrap();
        let fit = kmeans_fit(&pts, 4, 3, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(*fit.inertia.last().unwrap(), 0.0);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|j| fit.codebook.centroids.row(j).to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![0.0, 5.0], vec![5.0, 0.0], vec![5.0, 5.0]]);
    }

    #[test]
    fn two_blobs_recover_sample_means() {
        let mut r = rng::keyed(11, &[]);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut data = Vec::new();
        let mut means = [[0.0; 2]; 2];
        let centers = [[-3.0, 1.0], [4.0, -2.0]];
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..200 {
                let p = [c[0] + noise.sample(&mut r), c[1] + noise.sample(&mut r)];
                means[b][0] += p[0] / 200.0;
                means[b][1] += p[1] / 200.0;
                data.extend_from_slice(&p);
            }
        }
        let fit = kmeans_fit(&Tensor::matrix(400, 2, data).unwrap(), 2, 5, DEFAULT_MAX_ITER).unwrap();
        for m in means {
            let best = (0..2)
                .map(|j| sq_dist(fit.codebook.centroids.row(j), &m).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "{best}");
        }
    }

    #[test]
    fn inertia_never_increases() {
        let mut r = rng::keyed(2, &[]);
        let data: Vec<f64> = (0..600).map(|_| r.random::<f64>() * 10.0).collect();
        let fit = kmeans_fit(&Tensor::matrix(200, 3, data).unwrap(), 7, 9, DEFAULT_MAX_ITER).unwrap();
        for w in fit.inertia.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", fit.inertia);
        }
    }

    #[test]
    fn fit_errors() {
        let few = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(matches!(kmeans_fit(&few, 3, 0, 10), Err(Error::TooFewFrames { .. })));
        let same = Tensor::matrix(5, 1, vec![1.0; 5]).unwrap();
        assert!(matches!(kmeans_fit(&same, 2, 0, 10), Err(Error::DegenerateFeatures { .. })));
    }

    #[test]
    fn deterministic_given_seed() {
        let mut r = rng::keyed(4, &[]);
        let data: Vec<f64> = (0..300).map(|_| r.random::<f64>()).collect();
        let t = Tensor::matrix(100, 3, data).unwrap();
        let a = kmeans_fit(&t, 5, 1, 100).unwrap();
        let b = kmeans_fit(&t, 5, 1, 100).unwrap();
        assert_eq!(a.codebook, b.codebook);
    }

    fn book(rows: usize, cols: usize, data: Vec<f64>) -> Codebook {
        Codebook {
            centroids: Tensor::matrix(rows, cols, data).unwrap(),
            source: FeatureSource::Mfcc,
        }
    }

    #[test]
    fn assignment_rules() {
        let cb = book(8, 1, (0..8).map(|v| v as f64 * 10.0).collect());
        assert_eq!(assign_units(&fm(1, 1, vec![70.0]), &cb).unwrap().units, vec![7]);
        let tie = book(6, 1, vec![100.0, 100.0, -1.0, 50.0, 50.0, 1.0]);
        assert_eq!(assign_units(&fm(1, 1, vec![0.0]), &tie).unwrap().units, vec![2]);
        assert!(assign_units(&fm(1, 2, vec![0.0, 0.0]), &cb).is_err());
    }

    #[test]
    fn assignment_matches_brute_force_scan() {
        let mut r = rng::keyed(8, &[]);
        let cb = book(9, 4, (0..36).map(|_| r.random::<f64>()).collect());
        let f = fm(50, 4, (0..200).map(|_| r.random::<f64>()).collect());
        let got = assign_units(&f, &cb).unwrap();
        for t in 0..50 {
            let mut best = 0;
            for j in 1..9 {
                let dj: f64 = (0..4).map(|k| (f.row(t)[k] - cb.centroids.row(j)[k]).powi(2)).sum();
                let db: f64 = (0..4).map(|k| (f.row(t)[k] - cb.centroids.row(best)[k]).powi(2)).sum();
                if dj < db {
                    best = j;
                }
            }
            assert_eq!(got.units[t], best as u32);
        }
        assert!(got.units.iter().all(|&u| u != cb.sil()));
    }

    #[test]
    fn centroid_rows_map_to_themselves() {
        let mut r = rng::keyed(5, &[]);
        let cb = book(6, 3, (0..18).map(|_| r.random::<f64>()).collect());
        let f = FeatureMatrix {
            frames: cb.centroids.clone(),
            window: 400,
            hop: 320,
        };
        assert_eq!(assign_units(&f, &cb).unwrap().units, (0..6).collect::<Vec<u32>>());
    }

    #[test]
    fn unit_lines_round_trip_and_reject_out_of_range() {
        let u = UnitSequence::new(vec![0, 3, 16, 2], 16);
        assert_eq!(UnitSequence::parse_line(&u.to_line(), 16).unwrap(), u);
        assert!(UnitSequence::parse_line("1 17", 16).is_err());
    }

    #[test]
    fn purity_examples() {
        assert_eq!(cluster_purity(&[0, 0, 1, 1], &[5, 5, 6, 6]), 1.0);
        assert_eq!(cluster_purity(&[0, 0, 0, 0], &[5, 5, 6, 6]), 0.5);
    }
}
