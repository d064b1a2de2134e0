//! Dataset generation and loading, non-IID partitioning, and the
//! label-shift poisoning transform.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution};
use thiserror::Error;

use crate::nn::tensor::{Tensor, TensorShape};
use crate::rng;

pub const CLASS_COUNT: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic 0x{got:08x}, expected 0x{expected:08x}")]
    BadMagic { got: u32, expected: u32 },
    #[error("IDX file truncated at byte {at}")]
    Truncated { at: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("cannot partition {examples} examples across {nodes} nodes")]
    BadPartition { examples: usize, nodes: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Labelled example store. Images are D x H x W floats in [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<u8>,
    pub shape: TensorShape,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Gathers the given example indices into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let per = self.shape.elems();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
            labels.push(self.labels[i]);
        }
        (Tensor::from_data(indices.len(), self.shape.clone(), data).unwrap(), labels)
    }

    /// Whole dataset as one batch.
    pub fn full_batch(&self) -> (Tensor, Vec<u8>) {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.batch(&indices)
    }

    fn take(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic blob dataset
// ---------------------------------------------------------------------------

/// Renders ten classes as anisotropic Gaussian blobs on a ring. Class
/// identity is carried jointly by blob position and elongation; `noise`
/// scales centre jitter, amplitude wobble and additive pixel noise, so
/// `noise = 0` makes all images of a class identical.
pub fn gen_blobs(per_class: usize, side: usize, noise: f32, seed: u64) -> Dataset {
    assert!(side >= 8, "side must be >= 8");
    let shape = TensorShape::chw(1, side, side);
    let mut images = Vec::with_capacity(per_class * CLASS_COUNT);
    let mut labels = Vec::with_capacity(per_class * CLASS_COUNT);
    let centre = (side as f32 - 1.0) / 2.0;
    let ring = side as f32 * 0.27;
    for class in 0..CLASS_COUNT {
        let mut r = rng::stream(seed, "blobs", &[class as u64]);
        let angle = std::f32::consts::TAU * class as f32 / CLASS_COUNT as f32;
        let (cx0, cy0) = (centre + ring * angle.cos(), centre + ring * angle.sin());
        let sigma = side as f32 * (0.11 + 0.02 * (class % 3) as f32);
        let (sx, sy) = if class % 2 == 0 { (sigma * 1.5, sigma) } else { (sigma, sigma * 1.5) };
        for _ in 0..per_class {
            let jitter = side as f32 * 0.16 * noise;
            let cx = cx0 + r.gen_range(-1.0..1.0f32) * jitter;
            let cy = cy0 + r.gen_range(-1.0..1.0f32) * jitter;
            let amp = 1.0 - 0.35 * noise * r.gen_range(0.0..1.0f32);
            let mut img = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    let dx = (x as f32 - cx) / sx;
                    let dy = (y as f32 - cy) / sy;
                    let mut v = amp * (-(dx * dx + dy * dy) / 2.0).exp();
                    if noise > 0.0 {
                        v += 0.22 * noise * r.gen_range(-1.0..1.0f32);
                    }
                    img.push(v.clamp(0.0, 1.0));
                }
            }
            images.push(img);
            labels.push(class as u8);
        }
    }
    Dataset { images, labels, shape }
}

// ---------------------------------------------------------------------------
// IDX loader
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or(DataError::Truncated { at })
}

/// Loads the standard IDX image/label pair; u8 pixels are scaled by 1/255.
pub fn load_idx(images_path: &std::path::Path, labels_path: &std::path::Path) -> Result<Dataset, DataError> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;
    load_idx_bytes(&img_bytes, &lbl_bytes)
}

pub fn load_idx_bytes(img_bytes: &[u8], lbl_bytes: &[u8]) -> Result<Dataset, DataError> {
    let img_magic = read_u32_be(img_bytes, 0)?;
    if img_magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { got: img_magic, expected: IDX_IMAGES_MAGIC });
    }
    let lbl_magic = read_u32_be(lbl_bytes, 0)?;
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { got: lbl_magic, expected: IDX_LABELS_MAGIC });
    }
    let count = read_u32_be(img_bytes, 4)? as usize;
    let rows = read_u32_be(img_bytes, 8)? as usize;
    let cols = read_u32_be(img_bytes, 12)? as usize;
    let lbl_count = read_u32_be(lbl_bytes, 4)? as usize;
    if count != lbl_count {
        return Err(DataError::CountMismatch { images: count, labels: lbl_count });
    }
    let per = rows * cols;
    if img_bytes.len() < 16 + count * per {
        return Err(DataError::Truncated { at: img_bytes.len() });
    }
    if lbl_bytes.len() < 8 + count {
        return Err(DataError::Truncated { at: lbl_bytes.len() });
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * per;
        images.push(img_bytes[start..start + per].iter().map(|&b| b as f32 / 255.0).collect());
    }
    let labels = lbl_bytes[8..8 + count].to_vec();
    Ok(Dataset { images, labels, shape: TensorShape::chw(1, rows, cols) })
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionScheme {
    /// Sort by label, cut into `2 * node_count` shards, deal two shards per
    /// node in seeded order. Each node ends up with roughly two classes.
    LabelShards,
    /// Equal-size slices with Dirichlet(alpha)-skewed label composition.
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub node_count: usize,
    pub seed: u64,
}

/// Splits `ds` into `node_count` disjoint slices of equal size
/// (the remainder past `node_count * floor(len / node_count)` is dropped).
pub fn partition(ds: &Dataset, plan: &PartitionPlan) -> Result<Vec<Dataset>, DataError> {
    if plan.node_count == 0 || plan.node_count > ds.len() {
        return Err(DataError::BadPartition { examples: ds.len(), nodes: plan.node_count });
    }
    let per_node = ds.len() / plan.node_count;
    match &plan.scheme {
        PartitionScheme::LabelShards => {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            let mut r = rng::stream(plan.seed, "partition-shuffle", &[]);
            order.shuffle(&mut r);
            // stable sort by label keeps the shuffled order within a class
            order.sort_by_key(|&i| ds.labels[i]);
            let shard_count = plan.node_count * 2;
            let shard_len = per_node / 2;
            if shard_len == 0 {
                return Err(DataError::BadPartition { examples: ds.len(), nodes: plan.node_count });
            }
            let mut shard_ids: Vec<usize> = (0..shard_count).collect();
            let mut r2 = rng::stream(plan.seed, "partition-deal", &[]);
            shard_ids.shuffle(&mut r2);
            let mut slices = Vec::with_capacity(plan.node_count);
            for node in 0..plan.node_count {
                let mut indices = Vec::with_capacity(per_node);
                for k in 0..2 {
                    let shard = shard_ids[node * 2 + k];
                    indices.extend_from_slice(&order[shard * shard_len..(shard + 1) * shard_len]);
                }
                // odd per_node: top up from the undealt tail, one per node
                while indices.len() < per_node {
                    indices.push(order[shard_count * shard_len + node]);
                }
                slices.push(ds.take(&indices));
            }
            Ok(slices)
        }
        PartitionScheme::Dirichlet { alpha } => Ok(dirichlet_partition(ds, plan, *alpha, per_node)),
    }
}

/// Equal-size Dirichlet split: per-node class weights are drawn from
/// Dirichlet(alpha); class pools are dealt proportionally, then nodes are
/// topped up round-robin from whatever classes still have examples, so
/// every node holds exactly `per_node` examples.
fn dirichlet_partition(ds: &Dataset, plan: &PartitionPlan, alpha: f64, per_node: usize) -> Vec<Dataset> {
    let nodes = plan.node_count;
    // class pools in seeded shuffled order
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); CLASS_COUNT];
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut r = rng::stream(plan.seed, "dirichlet-shuffle", &[]);
    order.shuffle(&mut r);
    for &i in &order {
        pools[ds.labels[i] as usize].push(i);
    }

    let dirichlet = Dirichlet::new(&vec![alpha; CLASS_COUNT]).expect("valid alpha");
    let mut wanted: Vec<Vec<usize>> = Vec::with_capacity(nodes);
    for node in 0..nodes {
        let mut rr = rng::stream(plan.seed, "dirichlet-weights", &[node as u64]);
        let w = dirichlet.sample(&mut rr);
        // largest-remainder rounding of w * per_node to sum exactly per_node
        let raw: Vec<f64> = w.iter().map(|&p| p * per_node as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|&v| v.floor() as usize).collect();
        let mut deficit = per_node - counts.iter().sum::<usize>();
        let mut by_frac: Vec<usize> = (0..CLASS_COUNT).collect();
        by_frac.sort_by(|&a, &b| {
            let fa = raw[a] - raw[a].floor();
            let fb = raw[b] - raw[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &c in &by_frac {
            if deficit == 0 {
                break;
            }
            counts[c] += 1;
            deficit -= 1;
        }
        wanted.push(counts);
    }

    // deal from pools: first pass grants min(wanted, available)
    let mut slices: Vec<Vec<usize>> = vec![Vec::with_capacity(per_node); nodes];
    for node in 0..nodes {
        for class in 0..CLASS_COUNT {
            let take = wanted[node][class].min(pools[class].len());
            for _ in 0..take {
                slices[node].push(pools[class].pop().unwrap());
            }
        }
    }
    // top up deficits round-robin from the fullest pools
    for node in 0..nodes {
        while slices[node].len() < per_node {
            let class = (0..CLASS_COUNT).max_by_key(|&c| (pools[c].len(), c)).unwrap();
            slices[node].push(pools[class].pop().expect("enough examples overall"));
        }
    }
    slices.iter().map(|idx| ds.take(idx)).collect()
}

// ---------------------------------------------------------------------------
// Poisoning
// ---------------------------------------------------------------------------

/// Label-shift poisoning: for the first `flip_fraction` of examples, label
/// y becomes (y + 1) mod 10. Images are untouched. The default attack
/// poisons a malicious node's whole slice (fraction 1.0).
pub fn poison_labels(ds: &Dataset, flip_fraction: f32) -> Dataset {
    let n = ((ds.len() as f64) * flip_fraction as f64 + 1e-9).floor() as usize;
    let mut out = ds.clone();
    for label in out.labels.iter_mut().take(n) {
        *label = (*label + 1) % CLASS_COUNT as u8;
    }
    out
}
