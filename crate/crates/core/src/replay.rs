//! Background clustering, proportional exemplar selection and the
//! append-only cross-task replay buffer.
//!
//! RPLY layout, integers little-endian `u32`:
//!
//! ```text
//! "RPLY" | version u8 = 1 | 3 reserved zero bytes
//! K | dim | entry count | task count | task ids...
//! per entry: task | cluster | dim f64 values
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_file, to_u32, write_file, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RPLY";
const VERSION: u8 = 1;

pub const DEFAULT_CLUSTERS: usize = 3;
pub const DEFAULT_EXEMPLARS_PER_TASK: usize = 500;
pub const DEFAULT_KMEANS_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub dim: usize,
    pub assignments: Vec<usize>,
    /// `k` centroids, row-major.
    pub centers: Vec<f64>,
    /// Per cluster, member indices by ascending distance to the centroid
    /// (ties by index).
    pub within_cluster_order: Vec<Vec<usize>>,
    /// Distance of each sample to its own centroid.
    pub distances: Vec<f64>,
    pub iterations: usize,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.within_cluster_order.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.within_cluster_order.iter().map(Vec::len).collect()
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding over `vectors` (row-major,
/// `dim` columns).
pub fn kmeans_cluster(vectors: &[f64], dim: usize, k: usize, seed: u64, max_iters: usize) -> Result<ClusterResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("cluster count must be at least 1".into()));
    }
    if dim == 0 || vectors.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!("{} values are not rows of {dim}", vectors.len())));
    }
    let n = vectors.len() / dim;
    if n < k {
        return Err(Error::TooFewSamples { needed: k, got: n });
    }
    let row = |i: usize| &vectors[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = Vec::with_capacity(k * dim);
    centers.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centers.len();
        centers.extend_from_slice(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &centers[start..start + dim]));
        }
    }

    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        for (i, a) in assignments.iter_mut().enumerate() {
            let (c, _) = nearest(row(i), &centers, dim);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centers[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    Ok(finish_clusters(vectors, dim, k, assignments, centers, iterations))
}

fn finish_clusters(
    vectors: &[f64],
    dim: usize,
    k: usize,
    assignments: Vec<usize>,
    centers: Vec<f64>,
    iterations: usize,
) -> ClusterResult {
    let distances: Vec<f64> = assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(&vectors[i * dim..(i + 1) * dim], &centers[a * dim..(a + 1) * dim]).sqrt())
        .collect();
    let mut within_cluster_order = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        within_cluster_order[a].push(i);
    }
    for members in &mut within_cluster_order {
        members.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    }
    ClusterResult {
        dim,
        assignments,
        centers,
        within_cluster_order,
        distances,
        iterations,
    }
}

/// Takes `floor(K * N_i / N_t)` closest-to-centroid members of each
/// cluster. Returns sample indices grouped by cluster.
pub fn select_exemplars(clusters: &ClusterResult, capacity: usize, total: usize) -> Vec<usize> {
    let mut out = Vec::new();
    if total == 0 {
        return out;
    }
    for members in &clusters.within_cluster_order {
        let take = ((capacity as u128 * members.len() as u128) / total as u128) as usize;
        out.extend_from_slice(&members[..take.min(members.len())]);
    }
    if out.is_empty() {
        log::warn!(
            "exemplar allocation floors to zero for every cluster (K = {capacity}, sizes {:?})",
            clusters.cluster_sizes()
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub vector: Vec<f64>,
    pub task: u32,
    pub cluster: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity_per_task: usize,
    dim: usize,
    tasks: Vec<u32>,
    entries: Vec<Exemplar>,
}

impl ReplayBuffer {
    pub fn new(capacity_per_task: usize, dim: usize) -> Self {
        Self {
            capacity_per_task,
            dim,
            tasks: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn capacity_per_task(&self) -> usize {
        self.capacity_per_task
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Exemplar] {
        &self.entries
    }

    pub fn tasks(&self) -> &[u32] {
        &self.tasks
    }

    pub fn count_for_task(&self, task: u32) -> usize {
        self.entries.iter().filter(|e| e.task == task).count()
    }

    /// Row-major copy of every stored vector.
    pub fn matrix(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.vector.iter().copied()).collect()
    }

    /// Appends one task's exemplars; earlier entries are untouched.
    pub fn update_buffer(&mut self, new: Vec<(Vec<f64>, u32)>, task: u32) -> Result<()> {
        if self.tasks.contains(&task) {
            return Err(Error::DuplicateTask(task as usize));
        }
        if new.len() > self.capacity_per_task {
            return Err(Error::InvalidArgument(format!(
                "{} exemplars exceed the per-task capacity {}",
                new.len(),
                self.capacity_per_task
            )));
        }
        if let Some((v, _)) = new.iter().find(|(v, _)| v.len() != self.dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        self.tasks.push(task);
        self.entries.extend(new.into_iter().map(|(vector, cluster)| Exemplar {
            vector,
            task,
            cluster,
        }));
        Ok(())
    }

    /// Clusters one task's background vectors and appends the selection.
    pub fn select_and_append(
        &mut self,
        vectors: &[f64],
        k: usize,
        seed: u64,
        max_iters: usize,
        task: u32,
    ) -> Result<ClusterResult> {
        let clusters = kmeans_cluster(vectors, self.dim, k, seed, max_iters)?;
        let n = vectors.len() / self.dim;
        let chosen = select_exemplars(&clusters, self.capacity_per_task, n);
        let new = chosen
            .iter()
            .map(|&i| {
                (
                    vectors[i * self.dim..(i + 1) * self.dim].to_vec(),
                    clusters.assignments[i] as u32,
                )
            })
            .collect();
        self.update_buffer(new, task)?;
        Ok(clusters)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.header(MAGIC, VERSION);
        w.u32(to_u32(self.capacity_per_task, "capacity")?);
        w.u32(to_u32(self.dim, "dimension")?);
        w.u32(to_u32(self.entries.len(), "entry count")?);
        w.u32(to_u32(self.tasks.len(), "task count")?);
        for &t in &self.tasks {
            w.u32(t);
        }
        for e in &self.entries {
            w.u32(e.task);
            w.u32(e.cluster);
            for &v in &e.vector {
                w.f64(v);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(path, MAGIC, VERSION)?;
        let capacity_per_task = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let n_tasks = r.u32()? as usize;
        let mut tasks = Vec::with_capacity(n_tasks.min(4096));
        for _ in 0..n_tasks {
            tasks.push(r.u32()?);
        }
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let task = r.u32()?;
            let cluster = r.u32()?;
            let vector = r.f64_vec(dim)?;
            if !tasks.contains(&task) {
                return Err(Error::Malformed(format!("entry references unlisted task {task}")));
            }
            entries.push(Exemplar { vector, task, cluster });
        }
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes in replay buffer", r.remaining())));
        }
        Ok(Self {
            capacity_per_task,
            dim,
            tasks,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64, per: &[usize], centers: &[[f64; 2]], spread: f64) -> (Vec<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, spread).unwrap();
        let mut v = Vec::new();
        let mut labels = Vec::new();
        for (c, (&n, center)) in per.iter().zip(centers).enumerate() {
            for _ in 0..n {
                v.push(center[0] + noise.sample(&mut rng));
                v.push(center[1] + noise.sample(&mut rng));
                labels.push(c);
            }
        }
        (v, labels)
    }

    #[test]
    fn single_cluster_center_is_mean() {
        let (v, _) = blobs(1, &[17], &[[2.0, -1.0]], 0.5);
        let r = kmeans_cluster(&v, 2, 1, 0, 50).unwrap();
        let mean_x = v.iter().step_by(2).sum::<f64>() / 17.0;
        let mean_y = v.iter().skip(1).step_by(2).sum::<f64>() / 17.0;
        assert!((r.centers[0] - mean_x).abs() < 1e-12);
        assert!((r.centers[1] - mean_y).abs() < 1e-12);
    }

    /// Brute force over all label permutations on separated clouds.
    #[test]
    fn separated_clouds_recovered_up_to_permutation() {
        let (v, truth) = blobs(3, &[10, 8, 12], &[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], 0.4);
        let r = kmeans_cluster(&v, 2, 3, 5, 100).unwrap();
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let best = perms
            .iter()
            .map(|p| truth.iter().zip(&r.assignments).filter(|(&t, &a)| p[t] == a).count())
            .max()
            .unwrap();
        assert_eq!(best, 30);
    }

    #[test]
    fn clustering_is_deterministic_and_ordered() {
        let (v, _) = blobs(4, &[30, 30, 30], &[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]], 1.0);
        let a = kmeans_cluster(&v, 2, 3, 9, 100).unwrap();
        let b = kmeans_cluster(&v, 2, 3, 9, 100).unwrap();
        assert_eq!(a, b);
        let mut seen = vec![false; 90];
        for members in &a.within_cluster_order {
            for w in members.windows(2) {
                assert!(a.distances[w[0]] <= a.distances[w[1]]);
            }
            for &m in members {
                assert!(!seen[m]);
                seen[m] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(matches!(
            kmeans_cluster(&[1.0, 2.0], 2, 3, 0, 10),
            Err(Error::TooFewSamples { needed: 3, got: 1 })
        ));
    }

    fn fixed_clusters(sizes: &[usize]) -> ClusterResult {
        let mut start = 0;
        let mut order = Vec::new();
        let mut assignments = Vec::new();
        for (c, &s) in sizes.iter().enumerate() {
            order.push((start..start + s).collect());
            assignments.extend(std::iter::repeat_n(c, s));
            start += s;
        }
        ClusterResult {
            dim: 1,
            distances: vec![0.0; start],
            centers: vec![0.0; sizes.len()],
            assignments,
            within_cluster_order: order,
            iterations: 0,
        }
    }

    #[test]
    fn floor_proportional_allocation() {
        let sel = select_exemplars(&fixed_clusters(&[50, 30, 20]), 10, 100);
        assert_eq!(sel.len(), 10);
        assert_eq!(&sel[..5], &[0, 1, 2, 3, 4]);
        assert_eq!(&sel[5..8], &[50, 51, 52]);
        assert_eq!(&sel[8..], &[80, 81]);
        assert!(select_exemplars(&fixed_clusters(&[10, 10, 10]), 1, 30).is_empty());
    }

    /// Independent oracle: sort each cluster's members by distance to the
    /// centroid recomputed here, then take the floor allocation.
    fn oracle(v: &[f64], dim: usize, r: &ClusterResult, capacity: usize) -> Vec<usize> {
        let n = v.len() / dim;
        let mut out = Vec::new();
        for c in 0..r.k() {
            let mut members: Vec<(f64, usize)> = (0..n)
                .filter(|&i| r.assignments[i] == c)
                .map(|i| {
                    let d: f64 = (0..dim).map(|j| (v[i * dim + j] - r.centers[c * dim + j]).powi(2)).sum();
                    (d, i)
                })
                .collect();
            members.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let take = capacity * members.len() / n;
            out.extend(members.iter().take(take).map(|m| m.1));
        }
        out
    }

    #[test]
    fn selection_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v: Vec<f64> = (0..60 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = kmeans_cluster(&v, 3, 3, 2, 100).unwrap();
        assert_eq!(select_exemplars(&r, 12, 60), oracle(&v, 3, &r, 12));
    }

    proptest! {
        #[test]
        fn selection_properties(seed in 0u64..1000, n in 3usize..80, capacity in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = kmeans_cluster(&v, 2, 3, seed, 50).unwrap();
            let sel = select_exemplars(&r, capacity, n);
            let expect: usize = r.cluster_sizes().iter().map(|&s| (capacity * s / n).min(s)).sum();
            prop_assert_eq!(sel.len(), expect);
            prop_assert!(sel.len() <= capacity);
            let mut uniq = sel.clone();
            uniq.sort();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), sel.len());
            prop_assert!(sel.iter().all(|&i| i < n));
            prop_assert_eq!(sel, oracle(&v, 2, &r, capacity));
        }

        #[test]
        fn selection_is_permutation_invariant_given_clustering(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let v: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = kmeans_cluster(&v, 2, 3, seed, 50).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let pv: Vec<f64> = perm.iter().flat_map(|&i| v[i * 2..i * 2 + 2].to_vec()).collect();
            let pa: Vec<usize> = perm.iter().map(|&i| r.assignments[i]).collect();
            let pr = finish_clusters(&pv, 2, 3, pa, r.centers.clone(), 0);
            let mut a: Vec<Vec<u64>> = select_exemplars(&r, 15, n).iter()
                .map(|&i| v[i * 2..i * 2 + 2].iter().map(|x| x.to_bits()).collect()).collect();
            let mut b: Vec<Vec<u64>> = select_exemplars(&pr, 15, n).iter()
                .map(|&i| pv[i * 2..i * 2 + 2].iter().map(|x| x.to_bits()).collect()).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn buffer_is_append_only() {
        let mut buf = ReplayBuffer::new(10, 2);
        buf.update_buffer((0..5).map(|i| (vec![i as f64, 0.0], 0)).collect(), 1).unwrap();
        assert_eq!(buf.len(), 5);
        assert!(buf.entries().iter().all(|e| e.task == 1));
        let before = buf.entries().to_vec();
        buf.update_buffer((0..7).map(|i| (vec![0.0, i as f64], 1)).collect(), 2).unwrap();
        assert_eq!(buf.len(), 12);
        assert_eq!(&buf.entries()[..5], &before[..]);
        assert!(matches!(buf.update_buffer(vec![], 2), Err(Error::DuplicateTask(2))));
        assert!(buf.update_buffer(vec![(vec![0.0; 3], 0)], 3).is_err());
        assert!(buf.update_buffer((0..11).map(|_| (vec![0.0; 2], 0)).collect(), 4).is_err());
    }

    #[test]
    fn five_tasks_stay_within_capacity() {
        let mut buf = ReplayBuffer::new(500, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 1..=5u32 {
            let n = 700 + 100 * t as usize;
            let v: Vec<f64> = (0..n * 4).map(|_| rng.random_range(0.0..1.0)).collect();
            let snapshot = buf.entries().to_vec();
            buf.select_and_append(&v, 3, t as u64, DEFAULT_KMEANS_ITERS, t).unwrap();
            assert!(buf.count_for_task(t) <= 500);
            assert_eq!(&buf.entries()[..snapshot.len()], &snapshot[..]);
        }
        assert!(buf.len() <= 2500);
    }

    #[test]
    fn buffer_file_round_trip() {
        let mut buf = ReplayBuffer::new(4, 3);
        buf.update_buffer(vec![(vec![0.1, 0.2, 0.3], 2), (vec![1.0, -1.0, 1e-9], 0)], 1).unwrap();
        buf.update_buffer(vec![], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.rply");
        buf.save(&p).unwrap();
        assert_eq!(ReplayBuffer::load(&p).unwrap(), buf);
        let mut bytes = buf.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(ReplayBuffer::from_bytes(&bytes, &p).is_err());
    }
}
