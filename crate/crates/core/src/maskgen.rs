//! Turns precomputed per-pixel descriptor maps into the two mask
//! granularities: k-means cluster label maps over view pairs, then a
//! saliency vote that selects foreground clusters for the coarse binary
//! mask. Also injects controlled mask noise for robustness studies.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::supervision::{MaskSet, CLUSTER_SENTINEL};

const DMAP_MAGIC: &[u8; 4] = b"DMAP";
const DMAP_VERSION: u32 = 1;

/// Dense per-pixel descriptors plus a saliency channel for one view,
/// paired with a reference view for co-segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMap {
    pub width: u32,
    pub height: u32,
    pub dim: u32,
    pub view_id: u32,
    pub ref_id: u32,
    /// row-major H*W*D
    pub descriptors: Vec<f32>,
    /// row-major H*W, values in [0,1]
    pub saliency: Vec<f32>,
}

impl DescriptorMap {
    pub fn pixels(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn descriptor(&self, pixel: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.descriptors[pixel * d..(pixel + 1) * d]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        if self.descriptors.len() != n * self.dim as usize || self.saliency.len() != n {
            return Err(Error::Shape(format!(
                "descriptor map arrays do not match {}x{}x{}",
                self.height, self.width, self.dim
            )));
        }
        if self.saliency.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            return Err(Error::Config("saliency outside [0,1]".into()));
        }
        Ok(())
    }

    /// Binary layout: magic "DMAP", u32 version, then u32 H, W, D,
    /// view id, ref id (all little-endian), then H*W*D f32 descriptors
    /// and H*W f32 saliency values, row-major little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(&mut f);
        let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
        put(DMAP_MAGIC)?;
        for v in [
            DMAP_VERSION,
            self.height,
            self.width,
            self.dim,
            self.view_id,
            self.ref_id,
        ] {
            put(&v.to_le_bytes())?;
        }
        for &v in &self.descriptors {
            put(&v.to_le_bytes())?;
        }
        for &v in &self.saliency {
            put(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DescriptorMap> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 28 || &bytes[0..4] != DMAP_MAGIC {
            return Err(Error::Config(format!(
                "{} is not a descriptor map",
                path.display()
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != DMAP_VERSION {
            return Err(Error::Version(format!(
                "descriptor map version {version}, this build reads {DMAP_VERSION}"
            )));
        }
        let (height, width, dim, view_id, ref_id) =
            (u32_at(8), u32_at(12), u32_at(16), u32_at(20), u32_at(24));
        let n = (width * height) as usize;
        let need = 28 + 4 * (n * dim as usize + n);
        if bytes.len() != need {
            return Err(Error::Config(format!(
                "descriptor map payload {} bytes, expected {need}",
                bytes.len()
            )));
        }
        let mut off = 28;
        let mut read_f32 = |count: usize| -> Vec<f32> {
            let out = bytes[off..off + 4 * count]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 4 * count;
            out
        };
        let descriptors = read_f32(n * dim as usize);
        let saliency = read_f32(n);
        let map = DescriptorMap {
            width,
            height,
            dim,
            view_id,
            ref_id,
            descriptors,
            saliency,
        };
        map.validate()?;
        Ok(map)
    }
}

/// K centroids in descriptor space.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
}

pub const MAX_CLUSTERS: usize = 16;

/// Lloyd's algorithm with k-means++ seeding. Returns the model, labels
/// and the objective value after each iteration (non-increasing).
/// Empty clusters are re-seeded at the point farthest from its current
/// centroid.
pub fn kmeans_raw(
    points: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> (ClusterModel, Vec<u8>, Vec<f64>) {
    assert!(dim > 0 && k >= 1);
    let n = points.len() / dim;
    assert!(n > 0, "kmeans on empty data");
    let k = k.min(n);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(pt(rng.gen_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(pt(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        centroids.push(pt(next).to_vec());
        for i in 0..n {
            let d = dist2(pt(i), centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut labels = vec![0u8; n];
    let mut objective_trace = Vec::new();
    for _ in 0..max_iters {
        // assignment
        let mut changed = false;
        let mut objective = 0.0;
        for i in 0..n {
            let mut best = (0usize, f64::INFINITY);
            for (c, cen) in centroids.iter().enumerate() {
                let d = dist2(pt(i), cen);
                if d < best.1 {
                    best = (c, d);
                }
            }
            objective += best.1;
            if labels[i] != best.0 as u8 {
                labels[i] = best.0 as u8;
                changed = true;
            }
        }
        objective_trace.push(objective);
        if !changed && objective_trace.len() > 1 {
            break;
        }

        // update
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for i in 0..n {
            let c = labels[i] as usize;
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(pt(i)) {
                *s += v;
            }
        }
        for c in 0..centroids.len() {
            if counts[c] == 0 {
                // re-seed at the point farthest from its assigned centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist2(pt(a), &centroids[labels[a] as usize]);
                        let db = dist2(pt(b), &centroids[labels[b] as usize]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c] = pt(far).to_vec();
            } else {
                for (cv, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *cv = s / counts[c] as f64;
                }
            }
        }
    }

    (ClusterModel { centroids }, labels, objective_trace)
}

/// Clusters the union of a view pair's descriptors and labels every
/// pixel of both maps.
pub fn kmeans_cluster(
    a: &DescriptorMap,
    b: &DescriptorMap,
    k: usize,
    seed: u64,
) -> Result<(ClusterModel, Vec<u8>, Vec<u8>)> {
    if a.dim != b.dim {
        return Err(Error::Shape(format!(
            "descriptor dims differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    if k < 1 || k > MAX_CLUSTERS {
        return Err(Error::Config(format!(
            "cluster count {k} outside 1..={MAX_CLUSTERS}"
        )));
    }
    a.validate()?;
    b.validate()?;
    let dim = a.dim as usize;
    let mut points = Vec::with_capacity((a.pixels() + b.pixels()) * dim);
    points.extend(a.descriptors.iter().map(|&v| v as f64));
    points.extend(b.descriptors.iter().map(|&v| v as f64));
    let (model, labels, _) = kmeans_raw(&points, dim, k, seed, 50);
    let la = labels[..a.pixels()].to_vec();
    let lb = labels[a.pixels()..].to_vec();
    Ok((model, la, lb))
}

/// Outcome of the saliency vote; `selected` lists foreground clusters.
#[derive(Debug, Clone)]
pub struct VoteOutcome {
    pub mask_a: Vec<bool>,
    pub mask_b: Vec<bool>,
    pub selected: Vec<u8>,
    /// no cluster passed the vote; masks are empty
    pub empty: bool,
}

/// A cluster is foreground iff its mean saliency exceeds the threshold
/// in BOTH views; the binary masks are the union of selected clusters'
/// pixels.
pub fn vote_salient_clusters(
    labels_a: &[u8],
    labels_b: &[u8],
    saliency_a: &[f32],
    saliency_b: &[f32],
    vote_threshold: f64,
) -> Result<VoteOutcome> {
    if labels_a.len() != saliency_a.len() || labels_b.len() != saliency_b.len() {
        return Err(Error::Shape("labels and saliency misaligned".into()));
    }
    let mean_sal = |labels: &[u8], sal: &[f32]| -> Vec<(f64, usize)> {
        let mut acc = vec![(0.0f64, 0usize); MAX_CLUSTERS];
        for (&l, &s) in labels.iter().zip(sal) {
            if l != CLUSTER_SENTINEL {
                acc[l as usize].0 += s as f64;
                acc[l as usize].1 += 1;
            }
        }
        acc
    };
    let sa = mean_sal(labels_a, saliency_a);
    let sb = mean_sal(labels_b, saliency_b);
    let mut selected = Vec::new();
    for c in 0..MAX_CLUSTERS {
        if sa[c].1 > 0 && sb[c].1 > 0 {
            let ma = sa[c].0 / sa[c].1 as f64;
            let mb = sb[c].0 / sb[c].1 as f64;
            if ma > vote_threshold && mb > vote_threshold {
                selected.push(c as u8);
            }
        }
    }
    let to_mask = |labels: &[u8]| -> Vec<bool> {
        labels.iter().map(|l| selected.contains(l)).collect()
    };
    Ok(VoteOutcome {
        mask_a: to_mask(labels_a),
        mask_b: to_mask(labels_b),
        empty: selected.is_empty(),
        selected,
    })
}

/// Flips an exact `seg_rate` fraction of binary-mask pixels (chosen
/// uniformly) and reassigns a `cls_rate` fraction of cluster labels to
/// uniformly random other labels. Deterministic given the seed.
pub fn inject_mask_noise(
    masks: &MaskSet,
    seg_rate: f64,
    cls_rate: f64,
    num_clusters: usize,
    seed: u64,
) -> Result<MaskSet> {
    for (name, r) in [("seg_rate", seg_rate), ("cls_rate", cls_rate)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("{name} = {r} outside [0,1]")));
        }
    }
    let mut out = masks.clone();
    let n = out.coarse.len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let flip_count = (seg_rate * n as f64).round() as usize;
    for &i in choose(n, flip_count, &mut rng).iter() {
        out.coarse[i] = !out.coarse[i];
    }

    let labeled: Vec<usize> = (0..n)
        .filter(|&i| out.clusters[i] != CLUSTER_SENTINEL)
        .collect();
    let reassign_count = (cls_rate * labeled.len() as f64).round() as usize;
    if num_clusters > 1 {
        for &j in choose(labeled.len(), reassign_count, &mut rng).iter() {
            let i = labeled[j];
            let current = out.clusters[i];
            let mut pick = rng.gen_range(0..num_clusters as u8 - 1);
            if pick >= current {
                pick += 1;
            }
            out.clusters[i] = pick;
        }
    }
    Ok(out)
}

// First `count` entries of a seeded partial Fisher-Yates shuffle of 0..n.
fn choose(n: usize, count: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let count = count.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_map(
        width: u32,
        height: u32,
        dim: u32,
        centers: &[(f64, f64)], // (descriptor offset, saliency) per region
        region_of: impl Fn(usize) -> usize,
        seed: u64,
    ) -> DescriptorMap {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = (width * height) as usize;
        let mut descriptors = Vec::with_capacity(n * dim as usize);
        let mut saliency = Vec::with_capacity(n);
        for p in 0..n {
            let (offset, sal) = centers[region_of(p)];
            for d in 0..dim as usize {
                let base = if d == region_of(p) % dim as usize {
                    offset
                } else {
                    0.0
                };
                descriptors.push((base + rng.gen::<f64>() * 0.5 - 0.25) as f32);
            }
            saliency.push(sal as f32);
        }
        DescriptorMap {
            width,
            height,
            dim,
            view_id: 1,
            ref_id: 0,
            descriptors,
            saliency,
        }
    }

    #[test]
    fn k_equals_one_gives_global_mean() {
        let points: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 3 points, dim 2
        let (model, labels, _) = kmeans_raw(&points, 2, 1, 7, 20);
        assert!(labels.iter().all(|&l| l == 0));
        assert!((model.centroids[0][0] - 3.0).abs() < 1e-12);
        assert!((model.centroids[0][1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn well_separated_blobs_recovered_exactly() {
        // two Gaussian-ish blobs 10+ sigma apart in an 8x8 pair of views
        let region = |p: usize| if p < 32 { 0 } else { 1 };
        let a = blob_map(8, 8, 4, &[(10.0, 0.9), (0.0, 0.1)], region, 1);
        let b = blob_map(8, 8, 4, &[(10.0, 0.9), (0.0, 0.1)], region, 2);
        let (_, la, lb) = kmeans_cluster(&a, &b, 2, 5).unwrap();
        // every blob maps to one label consistently across both views
        let l0 = la[0];
        let l1 = la[32];
        assert_ne!(l0, l1);
        for p in 0..64 {
            assert_eq!(la[p], if p < 32 { l0 } else { l1 });
            assert_eq!(lb[p], if p < 32 { l0 } else { l1 });
        }
    }

    #[test]
    fn kmeans_is_deterministic_and_objective_non_increasing() {
        let region = |p: usize| (p / 16) % 3;
        let a = blob_map(8, 8, 6, &[(4.0, 0.5), (8.0, 0.5), (12.0, 0.5)], region, 3);
        let b = blob_map(8, 8, 6, &[(4.0, 0.5), (8.0, 0.5), (12.0, 0.5)], region, 4);
        let (_, la1, lb1) = kmeans_cluster(&a, &b, 5, 99).unwrap();
        let (_, la2, lb2) = kmeans_cluster(&a, &b, 5, 99).unwrap();
        assert_eq!(la1, la2);
        assert_eq!(lb1, lb2);

        let points: Vec<f64> = a.descriptors.iter().map(|&v| v as f64).collect();
        let (_, _, trace) = kmeans_raw(&points, 6, 5, 42, 50);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn vote_requires_saliency_in_both_views() {
        let labels_a = vec![0u8, 0, 1, 1];
        let labels_b = vec![0u8, 0, 1, 1];
        // cluster 0 salient in both, cluster 1 only in view a
        let sal_a = vec![0.9f32, 0.9, 0.9, 0.9];
        let sal_b = vec![0.9f32, 0.9, 0.1, 0.1];
        let out =
            vote_salient_clusters(&labels_a, &labels_b, &sal_a, &sal_b, 0.5).unwrap();
        assert_eq!(out.selected, vec![0]);
        assert_eq!(out.mask_a, vec![true, true, false, false]);
        assert!(!out.empty);

        // nothing passes
        let low = vec![0.2f32; 4];
        let out = vote_salient_clusters(&labels_a, &labels_b, &low, &low, 0.5).unwrap();
        assert!(out.empty);
        assert!(out.mask_a.iter().all(|&m| !m));
    }

    #[test]
    fn constructed_saliency_recovers_ground_truth() {
        // object pixels carry saliency 0.8, background 0.2
        let region = |p: usize| if p % 5 == 0 { 0 } else { 1 };
        let a = blob_map(16, 16, 4, &[(8.0, 0.8), (0.0, 0.2)], region, 10);
        let b = blob_map(16, 16, 4, &[(8.0, 0.8), (0.0, 0.2)], region, 11);
        let (_, la, lb) = kmeans_cluster(&a, &b, 4, 17).unwrap();
        let out = vote_salient_clusters(&la, &lb, &a.saliency, &b.saliency, 0.5).unwrap();
        let gt: Vec<bool> = (0..256).map(|p| region(p) == 0).collect();
        let iou = crate::geometry::miou(&out.mask_a, &gt).unwrap();
        assert!(iou >= 0.99, "vote mask iou {iou}");
    }

    #[test]
    fn noise_injection_rates_and_determinism() {
        let masks = MaskSet {
            width: 100,
            height: 100,
            coarse: (0..10_000).map(|i| i % 4 == 0).collect(),
            clusters: (0..10_000).map(|i| (i % 6) as u8).collect(),
        };
        // identity
        let same = inject_mask_noise(&masks, 0.0, 0.0, 8, 1).unwrap();
        assert_eq!(same, masks);

        // full inversion
        let flipped = inject_mask_noise(&masks, 1.0, 0.0, 8, 1).unwrap();
        assert!(flipped
            .coarse
            .iter()
            .zip(&masks.coarse)
            .all(|(a, b)| a != b));

        // 10% flips, exactly, across many seeds
        for seed in 0..100 {
            let noisy = inject_mask_noise(&masks, 0.1, 0.0, 8, seed).unwrap();
            let hamming = noisy
                .coarse
                .iter()
                .zip(&masks.coarse)
                .filter(|(a, b)| a != b)
                .count();
            let frac = hamming as f64 / 10_000.0;
            assert!((0.09..=0.11).contains(&frac), "seed {seed}: {frac}");
        }

        // label reassignment changes exactly the requested fraction and
        // never to the same label
        let noisy = inject_mask_noise(&masks, 0.0, 0.25, 6, 9).unwrap();
        let changed = noisy
            .clusters
            .iter()
            .zip(&masks.clusters)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 2500);
        assert!(noisy.clusters.iter().all(|&l| l < 6));

        // bit-exact reproducibility
        let n1 = inject_mask_noise(&masks, 0.3, 0.3, 6, 77).unwrap();
        let n2 = inject_mask_noise(&masks, 0.3, 0.3, 6, 77).unwrap();
        assert_eq!(n1, n2);
    }

    #[test]
    fn descriptor_map_round_trip_and_errors() {
        let map = blob_map(6, 4, 3, &[(2.0, 0.7), (0.0, 0.2)], |p| p % 2, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        map.save(&path).unwrap();
        let loaded = DescriptorMap::load(&path).unwrap();
        assert_eq!(map, loaded);

        std::fs::write(&path, b"garbage").unwrap();
        assert!(DescriptorMap::load(&path).is_err());
    }
}
