//! Ground-truth masks and leakage-free dataset splits.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::{BinaryMask, RgbImage};
use crate::{Error, Result};

pub const DEFAULT_MASK_THRESHOLD: u8 = 25;
/// Normalized Hamming distance at or below which two faces are merged.
pub const DEFAULT_CLUSTER_DISTANCE: f64 = 0.1;
const HASH_SIDE: usize = 8;

/// A real frame and, for manipulated samples, the fake frame derived from it.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FramePair {
    pub frame_id: String,
    pub real_path: String,
    pub fake_path: Option<String>,
}

impl FramePair {
    pub fn is_fake(&self) -> bool {
        self.fake_path.is_some()
    }
}

/// `mask[p] = 1` iff the largest per-channel absolute difference at `p`
/// exceeds `threshold`.
pub fn make_mask(real: &RgbImage, fake: &RgbImage, threshold: u8) -> Result<BinaryMask> {
    if real.dims() != fake.dims() {
        return Err(Error::DimensionMismatch {
            a: real.dims(),
            b: fake.dims(),
        });
    }
    let data = real
        .data()
        .chunks_exact(3)
        .zip(fake.data().chunks_exact(3))
        .map(|(a, b)| {
            let d = a
                .iter()
                .zip(b)
                .map(|(x, y)| x.abs_diff(*y))
                .max()
                .unwrap_or(0);
            u8::from(d > threshold)
        })
        .collect();
    BinaryMask::new(real.width(), real.height(), data)
}

/// 64-bit average hash: the image is box-averaged to 8x8 gray cells and bit
/// `i` is set iff cell `i` (row-major) is brighter than the mean cell.
pub fn average_hash(image: &RgbImage) -> u64 {
    let (w, h) = image.dims();
    let gray = image.gray();
    let bounds = |i: usize, len: usize| {
        let lo = (i * len / HASH_SIDE).min(len - 1);
        let hi = ((i + 1) * len / HASH_SIDE).max(lo + 1).min(len);
        (lo, hi)
    };
    let mut cells = [0.0f64; HASH_SIDE * HASH_SIDE];
    for cy in 0..HASH_SIDE {
        let (y0, y1) = bounds(cy, h);
        for cx in 0..HASH_SIDE {
            let (x0, x1) = bounds(cx, w);
            let mut sum = 0.0f64;
            for y in y0..y1 {
                sum += gray[y * w + x0..y * w + x1]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            cells[cy * HASH_SIDE + cx] = sum / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    let mean = cells.iter().sum::<f64>() / cells.len() as f64;
    cells.iter().enumerate().fold(
        0u64,
        |acc, (i, &c)| if c > mean { acc | (1 << i) } else { acc },
    )
}

/// Fraction of differing bits between two hashes.
pub fn hash_distance(a: u64, b: u64) -> f64 {
    (a ^ b).count_ones() as f64 / 64.0
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Groups frames whose hashes lie within `max_distance` of each other,
/// transitively. Cluster ids are dense from 0 and ordered by the smallest
/// frame id in each cluster, so they do not depend on input order.
pub fn cluster_hashes(
    hashes: &[(String, u64)],
    max_distance: f64,
) -> Result<BTreeMap<String, usize>> {
    if hashes.is_empty() {
        return Err(Error::InvalidConfig(String::from("no frames to cluster")));
    }
    let mut sorted: Vec<&(String, u64)> = hashes.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidConfig(alloc::format!(
            "duplicate frame id {}",
            w[0].0
        )));
    }
    let mut uf = UnionFind::new(sorted.len());
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            if hash_distance(sorted[i].1, sorted[j].1) <= max_distance {
                uf.union(i, j);
            }
        }
    }
    // roots are the smallest index, i.e. the smallest frame id, of each set
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for (i, (frame, _)) in sorted.iter().enumerate() {
        let root = uf.find(i);
        let next = ids.len();
        let id = *ids.entry(root).or_insert(next);
        out.insert(frame.clone(), id);
    }
    Ok(out)
}

/// Hashes and clusters face crops.
pub fn cluster_faces(
    frames: &[(String, RgbImage)],
    max_distance: f64,
) -> Result<BTreeMap<String, usize>> {
    let hashes: Vec<(String, u64)> = frames
        .iter()
        .map(|(id, img)| (id.clone(), average_hash(img)))
        .collect();
    cluster_hashes(&hashes, max_distance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ManifestRecord {
    pub frame_id: String,
    pub cluster_id: usize,
    pub split: Split,
    pub mask_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetManifest {
    /// Sorted by frame id.
    pub records: Vec<ManifestRecord>,
    /// Target fractions of frames for train, val and test.
    pub ratios: [f64; 3],
}

impl DatasetManifest {
    /// Number of frames in each split, in [`Split::ALL`] order.
    pub fn split_sizes(&self) -> [usize; 3] {
        let mut sizes = [0; 3];
        for r in &self.records {
            sizes[r.split as usize] += 1;
        }
        sizes
    }

    /// Splits each cluster appears in; every entry has length 1 when the
    /// manifest is leakage free.
    pub fn cluster_splits(&self) -> BTreeMap<usize, Vec<Split>> {
        let mut m: BTreeMap<usize, Vec<Split>> = BTreeMap::new();
        for r in &self.records {
            let v = m.entry(r.cluster_id).or_default();
            if !v.contains(&r.split) {
                v.push(r.split);
            }
        }
        m
    }
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::InvalidRatios(alloc::format!(
            "{ratios:?} must all be positive"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(alloc::format!(
            "{ratios:?} sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Assigns whole clusters to splits.
///
/// Clusters are visited largest first (equal sizes in seeded random order)
/// and each goes to the split with the largest remaining frame deficit,
/// earliest split on ties. No split ends more than one largest-cluster size
/// away from its target.
pub fn split_dataset(
    clusters: &BTreeMap<String, usize>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetManifest> {
    check_ratios(ratios)?;
    let mut members: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (frame, &c) in clusters {
        members.entry(c).or_default().push(frame);
    }
    if members.len() < 3 {
        return Err(Error::TooFewClusters { got: members.len() });
    }
    let mut order: Vec<(usize, usize)> = members.iter().map(|(&c, m)| (c, m.len())).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|c| core::cmp::Reverse(c.1));

    let total = clusters.len() as f64;
    let mut deficit: [f64; 3] = ratios.map(|r| r * total);
    let mut split_of: BTreeMap<usize, Split> = BTreeMap::new();
    for (c, size) in order {
        let mut best = 0;
        for s in 1..3 {
            if deficit[s] > deficit[best] {
                best = s;
            }
        }
        deficit[best] -= size as f64;
        split_of.insert(c, Split::ALL[best]);
    }
    let records = clusters
        .iter()
        .map(|(frame, &c)| ManifestRecord {
            frame_id: frame.clone(),
            cluster_id: c,
            split: split_of[&c],
            mask_path: None,
        })
        .collect();
    Ok(DatasetManifest { records, ratios })
}
