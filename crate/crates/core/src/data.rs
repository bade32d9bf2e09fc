//! Datasets, class partitions and leave-out views, plus the synthetic and
//! CIFAR-10 sources used by the experiments.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;

/// Channel-major image layout of each feature row (`C × H × W`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
    pub image_shape: Option<ImageShape>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if !features.is_matrix() || features.rows() != labels.len() {
            return Err(Error::dim("dataset", features.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Validation(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        if !features.all_finite() {
            return Err(Error::Validation("features contain NaN or Inf".into()));
        }
        Ok(Self {
            features,
            labels,
            class_count,
            name: name.into(),
            image_shape: None,
        })
    }

    pub fn with_image_shape(mut self, shape: ImageShape) -> Result<Self> {
        if shape.numel() != self.dim() {
            return Err(Error::dim(
                "image shape",
                &[shape.channels, shape.height, shape.width],
                self.features.shape(),
            ));
        }
        self.image_shape = Some(shape);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            name: self.name.clone(),
            image_shape: self.image_shape,
        }
    }

    /// Per-class counts over `[0, class_count)`.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Fails if any declared class has no samples.
    pub fn require_all_classes(&self) -> Result<()> {
        let missing: Vec<usize> = self
            .class_histogram()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(c, _)| c)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "dataset `{}` has no samples for classes {missing:?}",
                self.name
            )))
        }
    }

    /// Uniform random subsample of `count` rows (all rows if fewer), kept in
    /// original order.
    pub fn subsample(&self, count: usize, seed: u64) -> LabeledDataset {
        if count >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), count).into_vec();
        idx.sort_unstable();
        self.subset(&idx)
    }

    /// Stratified split into fractions `(val, test)` of every class; the
    /// remainder is the training set. Returns `(train, val, test)`.
    pub fn stratified_split(
        &self,
        val_fraction: f64,
        test_fraction: f64,
        seed: u64,
    ) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&val_fraction)
            || !(0.0..1.0).contains(&test_fraction)
            || val_fraction + test_fraction >= 1.0
        {
            return Err(Error::Config(format!(
                "split fractions val={val_fraction} test={test_fraction} must be in [0,1) and sum below 1"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.class_count];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for mut members in by_class {
            members.shuffle(&mut rng);
            let n = members.len();
            let n_val = (n as f64 * val_fraction).round() as usize;
            let n_test = ((n as f64 * test_fraction).round() as usize).min(n - n_val);
            val.extend_from_slice(&members[..n_val]);
            test.extend_from_slice(&members[n_val..n_val + n_test]);
            train.extend_from_slice(&members[n_val + n_test..]);
        }
        for part in [&mut train, &mut val, &mut test] {
            part.sort_unstable();
        }
        let tag = |ds: LabeledDataset, suffix: &str| LabeledDataset {
            name: format!("{}_{suffix}", self.name),
            ..ds
        };
        Ok((
            tag(self.subset(&train), "train"),
            tag(self.subset(&val), "val"),
            tag(self.subset(&test), "test"),
        ))
    }
}

/// K mutually disjoint class sets covering `{0, …, N−1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPartition {
    parts: Vec<Vec<usize>>,
    class_count: usize,
    seed: Option<u64>,
}

impl ClassPartition {
    pub fn parts(&self) -> &[Vec<usize>] {
        &self.parts
    }

    pub fn k(&self) -> usize {
        self.parts.len()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Index of the part holding `class`.
    pub fn part_of(&self, class: usize) -> Option<usize> {
        self.parts.iter().position(|p| p.contains(&class))
    }
}

/// Random partition into `k` parts whose sizes differ by at most one; the
/// first `n mod k` parts take the extra class.
pub fn partition_random(class_count: usize, k: usize, seed: u64) -> Result<ClassPartition> {
    if k < 2 || k > class_count {
        return Err(Error::Domain(format!(
            "need 2 <= K <= N, got K={k} N={class_count}"
        )));
    }
    let mut classes: Vec<usize> = (0..class_count).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (class_count / k, class_count % k);
    let mut parts = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        let mut part = classes[start..start + size].to_vec();
        part.sort_unstable();
        parts.push(part);
        start += size;
    }
    Ok(ClassPartition {
        parts,
        class_count,
        seed: Some(seed),
    })
}

/// Partition given explicitly as class groups over `class_count` classes.
pub fn partition_manual(groups: &[Vec<usize>], class_count: usize) -> Result<ClassPartition> {
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(Error::Validation("manual partition needs nonempty groups".into()));
    }
    let mut seen = vec![0usize; class_count];
    let mut out_of_range = Vec::new();
    for &c in groups.iter().flatten() {
        match seen.get_mut(c) {
            Some(n) => *n += 1,
            None => out_of_range.push(c),
        }
    }
    let overlap: Vec<usize> = (0..class_count).filter(|&c| seen[c] > 1).collect();
    let missing: Vec<usize> = (0..class_count).filter(|&c| seen[c] == 0).collect();
    let mut problems = Vec::new();
    if !out_of_range.is_empty() {
        problems.push(format!("classes out of range: {out_of_range:?}"));
    }
    if !overlap.is_empty() {
        problems.push(format!("overlapping classes: {overlap:?}"));
    }
    if !missing.is_empty() {
        problems.push(format!("missing classes: {missing:?}"));
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems.join("; ")));
    }
    Ok(ClassPartition {
        parts: groups.to_vec(),
        class_count,
        seed: None,
    })
}

/// One classifier's training view: retained classes as labelled ID data,
/// the left-out part as unlabelled OOD data.
#[derive(Clone, Debug)]
pub struct LeaveOutView {
    pub id_data: LabeledDataset,
    pub ood_data: Tensor,
    /// `local_map[j]` is the global class of local output `j`, ascending.
    pub local_map: Vec<usize>,
    pub part_index: usize,
    /// Global class count N.
    pub class_count: usize,
    /// Number of parts K in the partition the view came from.
    pub k: usize,
}

pub fn leaveout_view(
    data: &LabeledDataset,
    partition: &ClassPartition,
    part_index: usize,
) -> Result<LeaveOutView> {
    if part_index >= partition.k() {
        return Err(Error::Domain(format!(
            "part index {part_index} out of range for K={}",
            partition.k()
        )));
    }
    if partition.class_count() != data.class_count {
        return Err(Error::Validation(format!(
            "partition covers {} classes but dataset declares {}",
            partition.class_count(),
            data.class_count
        )));
    }
    let left_out = &partition.parts()[part_index];
    let local_map: Vec<usize> = (0..data.class_count)
        .filter(|c| !left_out.contains(c))
        .collect();
    let mut global_to_local = vec![usize::MAX; data.class_count];
    for (j, &g) in local_map.iter().enumerate() {
        global_to_local[g] = j;
    }
    let (mut id_idx, mut ood_idx) = (Vec::new(), Vec::new());
    for (i, &y) in data.labels.iter().enumerate() {
        if global_to_local[y] == usize::MAX {
            ood_idx.push(i);
        } else {
            id_idx.push(i);
        }
    }
    let id_data = LabeledDataset {
        features: data.features.select_rows(&id_idx),
        labels: id_idx.iter().map(|&i| global_to_local[data.labels[i]]).collect(),
        class_count: local_map.len(),
        name: format!("{}_in{part_index}", data.name),
        image_shape: data.image_shape,
    };
    Ok(LeaveOutView {
        id_data,
        ood_data: data.features.select_rows(&ood_idx),
        local_map,
        part_index,
        class_count: data.class_count,
        k: partition.k(),
    })
}

/// Class centers of the synthetic mixture.
///
/// In two dimensions the centers sit on a circle of radius `radius` around
/// (0.5, 0.5); otherwise class `c` sits on coordinate axis `c mod dim`,
/// alternating sign and stepping outward every `2·dim` classes.
pub fn mixture_centers(class_count: usize, dim: usize, radius: f64, phase: f64) -> Vec<Vec<f64>> {
    (0..class_count)
        .map(|c| {
            if dim == 2 {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / class_count as f64 + phase;
                vec![0.5 + radius * angle.cos(), 0.5 + radius * angle.sin()]
            } else {
                let mut center = vec![0.5; dim];
                let axis = c % dim;
                let sign = if (c / dim) % 2 == 0 { 1.0 } else { -1.0 };
                let shell = 1.0 + (c / (2 * dim)) as f64;
                center[axis] += sign * radius * shell;
                center
            }
        })
        .collect()
}

pub const MIXTURE_RADIUS: f64 = 0.35;

/// Isotropic Gaussian mixture with `per_class` samples around each class
/// center, rows ordered by class.
pub fn synth_gaussian_mixture(
    class_count: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_count < 2 || per_class < 1 || dim < 1 || !(spread >= 0.0) {
        return Err(Error::Domain(format!(
            "invalid mixture parameters N={class_count} per_class={per_class} dim={dim} spread={spread}"
        )));
    }
    let centers = mixture_centers(class_count, dim, MIXTURE_RADIUS, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(class_count * per_class * dim);
    let mut labels = Vec::with_capacity(class_count * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &mu in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(mu + spread * z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(
        "mixture",
        Tensor::matrix(class_count * per_class, dim, data)?,
        labels,
        class_count,
    )
}

/// Gaussian blobs half-way between adjacent class directions, at
/// `radius_scale` times the class radius (inside the class circle when the
/// scale is below 1). Unlabelled.
pub fn synth_heldout_clusters(
    cluster_count: usize,
    count: usize,
    dim: usize,
    spread: f64,
    radius_scale: f64,
    seed: u64,
) -> Result<Tensor> {
    if cluster_count == 0 || dim == 0 {
        return Err(Error::Domain("held-out clusters need clusters and dim".into()));
    }
    let phase = std::f64::consts::PI / cluster_count as f64;
    let centers = mixture_centers(cluster_count, dim, MIXTURE_RADIUS * radius_scale, phase);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(count * dim);
    for i in 0..count {
        for &mu in &centers[i % cluster_count] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(mu + spread * z);
        }
    }
    Tensor::matrix(count, dim, data)
}

/// I.i.d. uniform values in [0, 1].
pub fn noise_uniform(count: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..count * dim).map(|_| rng.gen::<f64>()).collect();
    Tensor::matrix(count, dim, data).expect("shape matches buffer")
}

/// I.i.d. N(0.5, 1) values clipped to [0, 1].
pub fn noise_gaussian(count: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::<f64>::new(0.5, 1.0).expect("unit variance is valid");
    let data = (0..count * dim)
        .map(|_| normal.sample(&mut rng).clamp(0.0, 1.0))
        .collect();
    Tensor::matrix(count, dim, data).expect("shape matches buffer")
}

/// Decodes concatenated CIFAR-10 binary records.
pub fn parse_cifar10(bytes: &[u8], base_offset: u64) -> Result<(Vec<f64>, Vec<usize>)> {
    let records = bytes.len() / CIFAR_RECORD_BYTES;
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format {
            offset: base_offset + (records * CIFAR_RECORD_BYTES) as u64,
            message: format!(
                "{} trailing bytes do not form a {CIFAR_RECORD_BYTES}-byte record",
                bytes.len() % CIFAR_RECORD_BYTES
            ),
        });
    }
    let mut features = Vec::with_capacity(records * (CIFAR_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(records);
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0];
        if label as usize >= CIFAR_CLASSES {
            return Err(Error::CorruptRecord {
                offset: base_offset + (r * CIFAR_RECORD_BYTES) as u64,
                label,
            });
        }
        labels.push(label as usize);
        features.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((features, labels))
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledDataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (f, l) = parse_cifar10(&bytes, 0).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        features.extend(f);
        labels.extend(l);
    }
    let dim = CIFAR_RECORD_BYTES - 1;
    let n = labels.len();
    LabeledDataset::new("cifar10", Tensor::matrix(n, dim, features)?, labels, CIFAR_CLASSES)?
        .with_image_shape(ImageShape {
            height: CIFAR_SIDE,
            width: CIFAR_SIDE,
            channels: 3,
        })
}

/// Random horizontal flip (probability `flip_probability`) and random crop
/// from a zero-padded canvas, independently per row. Rows without an image
/// shape are returned unchanged.
pub fn augment_with(
    features: &Tensor,
    shape: Option<ImageShape>,
    pad: usize,
    flip_probability: f64,
    seed: u64,
) -> Tensor {
    let Some(shape) = shape else {
        return features.clone();
    };
    let ImageShape {
        height: h,
        width: w,
        channels: ch,
    } = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = features.clone();
    for r in 0..features.rows() {
        let src = features.row(r);
        let flip = rng.gen::<f64>() < flip_probability;
        let dy = rng.gen_range(0..=2 * pad);
        let dx = rng.gen_range(0..=2 * pad);
        let dst = out.row_mut(r);
        for c in 0..ch {
            for y in 0..h {
                for x in 0..w {
                    // Position in the padded canvas, then back to source coords.
                    let sy = (y + dy) as isize - pad as isize;
                    let sx_unflipped = (x + dx) as isize - pad as isize;
                    let value = if sy < 0 || sy >= h as isize || sx_unflipped < 0 || sx_unflipped >= w as isize {
                        0.0
                    } else {
                        let sx = if flip {
                            w - 1 - sx_unflipped as usize
                        } else {
                            sx_unflipped as usize
                        };
                        src[c * h * w + sy as usize * w + sx]
                    };
                    dst[c * h * w + y * w + x] = value;
                }
            }
        }
    }
    out
}

/// Training-time augmentation: flip with probability one half, crop with `pad`.
pub fn augment(features: &Tensor, shape: Option<ImageShape>, pad: usize, seed: u64) -> Tensor {
    augment_with(features, shape, pad, 0.5, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_class_partition() {
        let p = partition_random(100, 5, 3).unwrap();
        assert!(p.parts().iter().all(|part| part.len() == 20));
    }

    #[test]
    fn singleton_partition() {
        let p = partition_random(10, 10, 0).unwrap();
        assert!(p.parts().iter().all(|part| part.len() == 1));
    }

    #[test]
    fn uneven_partition_front_loads_extra_classes() {
        let p = partition_random(10, 3, 7).unwrap();
        let sizes: Vec<usize> = p.parts().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        let mut all: Vec<usize> = p.parts().concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn partition_bounds() {
        assert!(matches!(partition_random(4, 5, 0), Err(Error::Domain(_))));
        assert!(matches!(partition_random(4, 1, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn manual_partition_validation() {
        let p = partition_manual(&[vec![0, 1], vec![2, 3]], 4).unwrap();
        assert_eq!(p.parts(), &[vec![0, 1], vec![2, 3]]);

        let err = partition_manual(&[vec![0], vec![0, 1]], 2).unwrap_err().to_string();
        assert!(err.contains("overlapping classes: [0]"), "{err}");

        let err = partition_manual(&[vec![0], vec![2]], 3).unwrap_err().to_string();
        assert!(err.contains("missing classes: [1]"), "{err}");
    }

    fn toy_dataset() -> LabeledDataset {
        let labels = vec![0, 1, 2, 3, 0, 1, 2, 3, 2];
        let features = Tensor::matrix(9, 1, (0..9).map(f64::from).collect()).unwrap();
        LabeledDataset::new("toy", features, labels, 4).unwrap()
    }

    #[test]
    fn leaveout_view_direct_construction() {
        let data = toy_dataset();
        let p = partition_manual(&[vec![0, 1], vec![2, 3]], 4).unwrap();
        let view = leaveout_view(&data, &p, 0).unwrap();
        assert_eq!(view.local_map, vec![2, 3]);
        assert_eq!(view.id_data.labels, vec![0, 1, 0, 1, 0]);
        assert_eq!(view.id_data.class_count, 2);
        assert_eq!(view.ood_data.data(), &[0.0, 1.0, 4.0, 5.0]);
        assert!(matches!(leaveout_view(&data, &p, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn degenerate_mixture_sits_on_centers() {
        let ds = synth_gaussian_mixture(5, 3, 2, 0.0, 1).unwrap();
        let centers = mixture_centers(5, 2, MIXTURE_RADIUS, 0.0);
        for (r, &y) in ds.labels.iter().enumerate() {
            assert_eq!(ds.features.row(r), centers[y].as_slice());
        }
        let ds = synth_gaussian_mixture(7, 2, 3, 0.0, 1).unwrap();
        let centers = mixture_centers(7, 3, MIXTURE_RADIUS, 0.0);
        for (r, &y) in ds.labels.iter().enumerate() {
            assert_eq!(ds.features.row(r), centers[y].as_slice());
        }
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(
            synth_gaussian_mixture(4, 10, 2, 0.1, 9).unwrap(),
            synth_gaussian_mixture(4, 10, 2, 0.1, 9).unwrap()
        );
        assert_eq!(noise_uniform(10, 3, 2), noise_uniform(10, 3, 2));
        assert_ne!(noise_uniform(10, 3, 2), noise_uniform(10, 3, 3));
        assert_eq!(noise_gaussian(10, 3, 2), noise_gaussian(10, 3, 2));
    }

    #[test]
    fn uniform_noise_range_and_mean() {
        let t = noise_uniform(1000, 100, 5);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn cifar_bad_lengths() {
        assert!(parse_cifar10(&[], 0).unwrap().1.is_empty());
        let err = parse_cifar10(&vec![0u8; 3072], 0).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        let mut two = vec![0u8; 2 * CIFAR_RECORD_BYTES + 5];
        two[CIFAR_RECORD_BYTES] = 3;
        assert!(matches!(
            parse_cifar10(&two, 0),
            Err(Error::Format { offset: 6146, .. })
        ));
        let mut bad = vec![0u8; CIFAR_RECORD_BYTES * 2];
        bad[CIFAR_RECORD_BYTES] = 10;
        assert!(matches!(
            parse_cifar10(&bad, 0),
            Err(Error::CorruptRecord { offset: 3073, label: 10 })
        ));
    }

    #[test]
    fn augment_identity_and_shape() {
        let shape = ImageShape { height: 4, width: 3, channels: 2 };
        let x = Tensor::matrix(5, 24, (0..120).map(|v| v as f64).collect()).unwrap();
        assert_eq!(augment_with(&x, Some(shape), 0, 0.0, 1), x);
        let y = augment(&x, Some(shape), 2, 11);
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y, augment(&x, Some(shape), 2, 11));
        assert_eq!(augment(&x, None, 2, 11), x);
    }

    #[test]
    fn forced_flip_mirrors_rows() {
        let shape = ImageShape { height: 1, width: 3, channels: 1 };
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(augment_with(&x, Some(shape), 0, 1.0, 0).data(), &[3.0, 2.0, 1.0]);
    }
}
