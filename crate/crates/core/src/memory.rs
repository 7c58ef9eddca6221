//! Dynamic feature queue and the centroid memory built from it.
//!
//! The queue keeps the last `capacity` batches (FIFO). Each slot holds exactly
//! `batch_size` records. The centroid memory is derived data: it can always be
//! recomputed from the queue contents.

use std::collections::VecDeque;

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::prototypes::{class_centroids, pseudo_label, ClassCentroids};
use crate::rng::Rng;
use crate::subtype::{discover_subtypes, ClusterConfig, SubtypeCluster};
use crate::synth::Domain;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub sample_id: u64,
    pub domain: Domain,
    pub feature: Vec<f64>,
    /// Ground-truth class, source records only.
    pub source_label: Option<usize>,
    /// Current pseudo-label, target records only.
    pub pseudo_class: Option<usize>,
    pub stamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub stamp: u64,
    pub records: Vec<FeatureRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    batch_size: usize,
    feature_dim: usize,
    slots: VecDeque<Slot>,
}

impl FeatureQueue {
    pub fn new(capacity: usize, batch_size: usize, feature_dim: usize) -> Result<Self> {
        if capacity == 0 || batch_size == 0 || feature_dim == 0 {
            return Err(Error::Validation("queue capacity, batch size and feature dim must be positive".into()));
        }
        Ok(Self { capacity, batch_size, feature_dim, slots: VecDeque::with_capacity(capacity + 1) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.slots.iter()
    }

    pub fn latest(&self) -> Option<&Slot> {
        self.slots.back()
    }

    pub fn stamps(&self) -> Vec<u64> {
        self.slots.iter().map(|s| s.stamp).collect()
    }

    /// Number of stored feature scalars.
    pub fn stored_scalars(&self) -> usize {
        self.slots.iter().flat_map(|s| &s.records).map(|r| r.feature.len()).sum()
    }

    /// Appends a batch; returns the evicted oldest slot once capacity is exceeded.
    pub fn enqueue_batch(&mut self, records: Vec<FeatureRecord>) -> Result<Option<Slot>> {
        if records.len() != self.batch_size {
            return Err(Error::Usage(format!("batch of {} records, queue expects {}", records.len(), self.batch_size)));
        }
        let stamp = records[0].stamp;
        if records.iter().any(|r| r.stamp != stamp) {
            return Err(Error::Usage("records of one batch carry different iteration stamps".into()));
        }
        if let Some(last) = self.slots.back() {
            if stamp <= last.stamp {
                return Err(Error::Usage(format!("stamp {stamp} not after latest stamp {}", last.stamp)));
            }
        }
        for r in &records {
            if r.feature.len() != self.feature_dim {
                return Err(shape_err!("feature of length {}, queue stores {}", r.feature.len(), self.feature_dim));
            }
            if r.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("feature of sample {}", r.sample_id)));
            }
        }
        self.slots.push_back(Slot { stamp, records });
        Ok(if self.slots.len() > self.capacity { self.slots.pop_front() } else { None })
    }

    /// Rewrites the latest slot with `lambda * new + (1 - lambda) * stored`.
    /// `new_features` rows follow the slot's record order.
    pub fn refresh_latest(&mut self, new_features: &Matrix, lambda: f64) -> Result<()> {
        check_lambda(lambda)?;
        let slot = self.slots.back_mut().ok_or_else(|| Error::State("refresh on an empty queue".into()))?;
        if new_features.shape() != (slot.records.len(), self.feature_dim) {
            return Err(shape_err!("refresh with {:?} for {} records", new_features.shape(), slot.records.len()));
        }
        for (r, new) in slot.records.iter_mut().zip(new_features.row_iter()) {
            r.feature = momentum_blend(&r.feature, new, lambda)?;
        }
        Ok(())
    }

    /// Writes pseudo-labels back onto the target records, in window order.
    pub fn set_pseudo_labels(&mut self, labels: &[usize]) -> Result<()> {
        let mut it = labels.iter();
        for r in self.slots.iter_mut().flat_map(|s| s.records.iter_mut()) {
            if r.domain == Domain::Target {
                r.pseudo_class = Some(*it.next().ok_or_else(|| shape_err!("too few pseudo-labels"))?);
            }
        }
        if it.next().is_some() {
            return Err(shape_err!("too many pseudo-labels"));
        }
        Ok(())
    }

    /// Flattens the queue into per-domain matrices, oldest slot first.
    pub fn window(&self) -> Window {
        let mut w = Window::default();
        let mut sf = Vec::new();
        let mut tf = Vec::new();
        let latest = self.slots.len().saturating_sub(1);
        for (si, slot) in self.slots.iter().enumerate() {
            for r in &slot.records {
                match r.domain {
                    Domain::Source => {
                        if si == latest {
                            w.live_source.push(w.source_ids.len());
                        }
                        w.source_ids.push(r.sample_id);
                        w.source_labels.push(r.source_label.unwrap_or(0));
                        sf.extend_from_slice(&r.feature);
                    }
                    Domain::Target => {
                        if si == latest {
                            w.live_target.push(w.target_ids.len());
                        }
                        w.target_ids.push(r.sample_id);
                        tf.extend_from_slice(&r.feature);
                    }
                }
            }
        }
        let d = self.feature_dim;
        w.source = Matrix::from_vec(w.source_ids.len(), d, sf).expect("finite by construction");
        w.target = Matrix::from_vec(w.target_ids.len(), d, tf).expect("finite by construction");
        w
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Validation(format!("momentum weight {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `lambda * new + (1 - lambda) * old`.
pub fn momentum_blend(old: &[f64], new: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if old.len() != new.len() {
        return Err(shape_err!("momentum blend of lengths {} and {}", old.len(), new.len()));
    }
    Ok(old
        .iter()
        .zip(new)
        .map(|(o, n)| {
            if lambda == 1.0 {
                *n
            } else if lambda == 0.0 {
                *o
            } else {
                lambda * n + (1.0 - lambda) * o
            }
        })
        .collect())
}

/// Queue contents split by domain. `live_*` index the rows of the latest slot,
/// in record order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Window {
    pub source: Matrix,
    pub source_labels: Vec<usize>,
    pub source_ids: Vec<u64>,
    pub target: Matrix,
    pub target_ids: Vec<u64>,
    pub live_source: Vec<usize>,
    pub live_target: Vec<usize>,
}

/// Class and subtype centres over the current window.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidMemory {
    pub classes: ClassCentroids,
    /// Pseudo-label of each window target row.
    pub target_pseudo: Vec<usize>,
    pub clusters: Vec<SubtypeCluster>,
    pub generation: u64,
}

/// Builds the memory for a window. Clustering runs only when `cluster` is given.
pub fn compute_memory(
    window: &Window,
    num_classes: usize,
    cluster: Option<&ClusterConfig>,
    rng: &mut Rng,
) -> Result<CentroidMemory> {
    if window.source_ids.is_empty() {
        return Err(Error::State("window holds no source records".into()));
    }
    let source = class_centroids(&window.source, &window.source_labels, num_classes)?;
    let target_pseudo = pseudo_label(&window.target, &source)?;
    let target = class_centroids(&window.target, &target_pseudo, num_classes)?;
    let clusters = match cluster {
        Some(cfg) => discover_subtypes(
            &window.source,
            &window.source_labels,
            &window.target,
            &target_pseudo,
            num_classes,
            cfg,
            rng,
        )?,
        None => Vec::new(),
    };
    Ok(CentroidMemory { classes: ClassCentroids { source, target }, target_pseudo, clusters, generation: 0 })
}

/// Recomputes the memory from `queue`, one generation after `previous`.
pub fn rebuild_centroids(
    queue: &FeatureQueue,
    num_classes: usize,
    cluster: Option<&ClusterConfig>,
    previous: Option<&CentroidMemory>,
    rng: &mut Rng,
) -> Result<CentroidMemory> {
    if queue.is_empty() {
        return Err(Error::State("queue is empty".into()));
    }
    let mut m = compute_memory(&queue.window(), num_classes, cluster, rng)?;
    m.generation = previous.map_or(0, |p| p.generation) + 1;
    Ok(m)
}
