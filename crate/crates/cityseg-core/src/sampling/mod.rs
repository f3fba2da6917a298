//! Spatial preprocessing: voxel-grid downsampling, random subset sampling,
//! exact KNN region extraction, space-filling-curve serialization, and
//! local/global batch assembly.
//!
//! Everything here is a pure function of its inputs (seeds included). The
//! heavy loops parallelize over independent points or voxels and produce
//! results identical to the sequential definition.

mod curve;

pub use curve::{hilbert_axes, hilbert_key, morton_key, Curve, CURVE_BITS, CURVE_COORD_MAX};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::pcio::PointCloud;

/// Sampling configuration. The grid sizes are the published operating
/// point (0.2 m local, 1 m global); `local_count` is the per-batch local
/// point budget.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub local_grid: f64,
    pub global_grid: f64,
    pub local_count: usize,
    pub global_multiplier: usize,
    pub curve: Curve,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            local_grid: 0.2,
            global_grid: 1.0,
            local_count: 65536,
            global_multiplier: 10,
            curve: Curve::Morton,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.local_grid > 0.0) || !(self.global_grid > 0.0) {
            return Err(Error::Parameter("grid sizes must be positive".into()));
        }
        if self.local_grid > self.global_grid {
            return Err(Error::Parameter(format!(
                "local grid {} must not exceed global grid {}",
                self.local_grid, self.global_grid
            )));
        }
        if self.local_count == 0 {
            return Err(Error::Parameter("local_count must be ≥ 1".into()));
        }
        if self.global_multiplier == 0 {
            return Err(Error::Parameter("global_multiplier must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// A local/global pair ready for the point network: both clouds are
/// grid-sampled, both orders are space-filling-curve permutations, and
/// `origin_indices` maps each local point back to the source-cloud points
/// in its voxel.
#[derive(Debug, Clone)]
pub struct LocalGlobalBatch {
    pub local: PointCloud,
    pub global: PointCloud,
    pub local_order: Vec<u32>,
    pub global_order: Vec<u32>,
    pub origin_indices: Vec<Vec<u32>>,
}

fn voxel_coord(p: [f32; 3], cell: f64) -> [i64; 3] {
    [
        (p[0] as f64 / cell).floor() as i64,
        (p[1] as f64 / cell).floor() as i64,
        (p[2] as f64 / cell).floor() as i64,
    ]
}

/// Offset voxel coords to non-negative and check the 21-bit curve range.
fn normalize_coords(coords: &[[i64; 3]]) -> Result<Vec<[u32; 3]>> {
    let mut min = [i64::MAX; 3];
    for c in coords {
        for a in 0..3 {
            min[a] = min[a].min(c[a]);
        }
    }
    let mut out = Vec::with_capacity(coords.len());
    for c in coords {
        let mut q = [0u32; 3];
        for a in 0..3 {
            let v = c[a] - min[a];
            if v > CURVE_COORD_MAX as i64 {
                return Err(Error::Range(format!(
                    "quantized coordinate {v} exceeds the 21-bit curve range"
                )));
            }
            q[a] = v as u32;
        }
        out.push(q);
    }
    Ok(out)
}

/// Voxel-grid downsample: one representative point per occupied cell —
/// position = centroid, features = per-channel mean, label = majority with
/// ties to the smallest id — ordered by the voxel Morton key.
pub fn grid_sample(cloud: &PointCloud, cell: f64) -> Result<PointCloud> {
    Ok(grid_sample_with_origin(cloud, cell)?.0)
}

/// [`grid_sample`] plus, per output point, the source indices of the points
/// in its voxel (ascending).
pub fn grid_sample_with_origin(cloud: &PointCloud, cell: f64) -> Result<(PointCloud, Vec<Vec<u32>>)> {
    if !(cell > 0.0) {
        return Err(Error::Parameter(format!("grid cell {cell} must be > 0")));
    }
    let n = cloud.len();
    if n == 0 {
        return Ok((
            PointCloud::empty(cloud.channels().to_vec()),
            Vec::new(),
        ));
    }
    let coords: Vec<[i64; 3]> = cloud.positions().iter().map(|&p| voxel_coord(p, cell)).collect();
    // group source indices per voxel, ascending within each group
    let mut groups: std::collections::HashMap<[i64; 3], Vec<u32>> = std::collections::HashMap::new();
    for (i, c) in coords.iter().enumerate() {
        groups.entry(*c).or_default().push(i as u32);
    }
    let mut cells: Vec<([i64; 3], Vec<u32>)> = groups.into_iter().collect();
    let quantized = normalize_coords(&cells.iter().map(|(c, _)| *c).collect::<Vec<_>>())?;
    let mut order: Vec<(u64, usize)> = quantized
        .iter()
        .enumerate()
        .map(|(i, q)| (morton_key(q[0], q[1], q[2]), i))
        .collect();
    exec::sort_by_total_key(&mut order, |&(k, i)| (k, i));
    let cells: Vec<([i64; 3], Vec<u32>)> = {
        let mut sorted = Vec::with_capacity(cells.len());
        for &(_, i) in &order {
            sorted.push(std::mem::take(&mut cells[i]));
        }
        sorted
    };

    let f = cloud.feature_count();
    let has_labels = cloud.labels().is_some();
    struct Rep {
        pos: [f32; 3],
        feat: Vec<f32>,
        label: Option<u16>,
    }
    let reps: Vec<Rep> = exec::map_indexed(cells.len(), 8, |vi| {
        let group = &cells[vi].1;
        let inv = 1.0f64 / group.len() as f64;
        let mut pos = [0.0f64; 3];
        let mut feat = vec![0.0f64; f];
        for &i in group {
            let p = cloud.positions()[i as usize];
            for a in 0..3 {
                pos[a] += p[a] as f64;
            }
            for (acc, &v) in feat.iter_mut().zip(cloud.feature_row(i as usize)) {
                *acc += v as f64;
            }
        }
        let label = if has_labels {
            let labels = cloud.labels().unwrap();
            let mut counts: std::collections::BTreeMap<u16, u32> = std::collections::BTreeMap::new();
            for &i in group {
                *counts.entry(labels[i as usize]).or_insert(0) += 1;
            }
            // ascending scan with strict greater-than keeps the smallest id on ties
            let mut best = (0u16, 0u32);
            for (&l, &c) in &counts {
                if c > best.1 {
                    best = (l, c);
                }
            }
            Some(best.0)
        } else {
            None
        };
        Rep {
            pos: [
                (pos[0] * inv) as f32,
                (pos[1] * inv) as f32,
                (pos[2] * inv) as f32,
            ],
            feat: feat.iter().map(|&v| (v * inv) as f32).collect(),
            label,
        }
    });

    let mut positions = Vec::with_capacity(reps.len());
    let mut features = Vec::with_capacity(reps.len() * f);
    let mut labels = has_labels.then(|| Vec::with_capacity(reps.len()));
    for rep in &reps {
        positions.push(rep.pos);
        features.extend_from_slice(&rep.feat);
        if let Some(ls) = labels.as_mut() {
            ls.push(rep.label.unwrap());
        }
    }
    let out = PointCloud::new(positions, features, cloud.channels().to_vec(), labels, cloud.domain_id)?;
    let origin = cells.into_iter().map(|(_, g)| g).collect();
    Ok((out, origin))
}

/// Uniform sample of `m` distinct points (the whole cloud when N ≤ m),
/// returned in ascending source order. Deterministic for a fixed seed.
pub fn random_sample(cloud: &PointCloud, m: usize, seed: u64) -> Result<PointCloud> {
    Ok(cloud.select(&random_sample_indices(cloud.len(), m, seed)?))
}

/// Index form of [`random_sample`].
pub fn random_sample_indices(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::Parameter("sample size must be ≥ 1".into()));
    }
    if n <= m {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// The `k` cloud points nearest to `center` (everything when N < k);
/// distance ties break toward the smaller source index. Output is ordered
/// nearest-first.
pub fn knn_region(cloud: &PointCloud, center: [f64; 3], k: usize) -> Result<PointCloud> {
    Ok(cloud.select(&knn_indices(cloud, center, k)?))
}

/// Index form of [`knn_region`].
pub fn knn_indices(cloud: &PointCloud, center: [f64; 3], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Parameter("k must be ≥ 1".into()));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyInput("knn_region on an empty cloud".into()));
    }
    let positions = cloud.positions();
    let mut keyed: Vec<(u64, u32)> = exec::map_indexed(positions.len(), 4, |i| {
        let p = positions[i];
        let d2 = (0..3).map(|a| (p[a] as f64 - center[a]).powi(2)).sum::<f64>();
        // non-negative finite f64 order matches its bit pattern order
        (d2.to_bits(), i as u32)
    });
    exec::sort_by_total_key(&mut keyed, |&pair| pair);
    keyed.truncate(k);
    Ok(keyed.into_iter().map(|(_, i)| i as usize).collect())
}

/// Permutation sorting points by the curve key of their quantized voxel
/// coordinate; same-voxel ties keep source order.
pub fn serialize_order(positions: &[[f32; 3]], cell: f64, curve: Curve) -> Result<Vec<u32>> {
    if !(cell > 0.0) {
        return Err(Error::Parameter(format!("serialize cell {cell} must be > 0")));
    }
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    let coords: Vec<[i64; 3]> = positions.iter().map(|&p| voxel_coord(p, cell)).collect();
    let quantized = normalize_coords(&coords)?;
    let mut keyed: Vec<(u64, u32)> = exec::map_indexed(quantized.len(), 8, |i| {
        let q = quantized[i];
        (curve.key(q[0], q[1], q[2]), i as u32)
    });
    exec::sort_by_total_key(&mut keyed, |&pair| pair);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Assemble a local/global batch: the local branch is a random `local_count`
/// subset grid-sampled at the fine cell; the global branch is the
/// `global_multiplier × local_count` nearest neighbors of the local
/// centroid (always including the local source points, so the local cloud
/// lies inside the global region) grid-sampled at the coarse cell.
pub fn make_batch(cloud: &PointCloud, cfg: &SamplerConfig) -> Result<LocalGlobalBatch> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyInput("make_batch on an empty cloud".into()));
    }
    let sampled_idx = random_sample_indices(cloud.len(), cfg.local_count, cfg.seed)?;
    let sampled = cloud.select(&sampled_idx);
    let (local, local_origin) = grid_sample_with_origin(&sampled, cfg.local_grid)?;
    let origin_indices: Vec<Vec<u32>> = local_origin
        .into_iter()
        .map(|group| group.into_iter().map(|i| sampled_idx[i as usize] as u32).collect())
        .collect();

    let center = local.centroid();
    let k = cfg.global_multiplier.saturating_mul(cfg.local_count).min(cloud.len());
    let knn = knn_indices(cloud, center, k)?;
    let mut global_idx: Vec<usize> = knn;
    global_idx.extend_from_slice(&sampled_idx);
    global_idx.sort_unstable();
    global_idx.dedup();
    let global = grid_sample(&cloud.select(&global_idx), cfg.global_grid)?;

    let local_order = serialize_order(local.positions(), cfg.local_grid, cfg.curve)?;
    let global_order = serialize_order(global.positions(), cfg.global_grid, cfg.curve)?;
    Ok(LocalGlobalBatch {
        local,
        global,
        local_order,
        global_order,
        origin_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rgb() -> Vec<String> {
        vec!["r".into(), "g".into(), "b".into()]
    }

    fn random_cloud(n: usize, extent: f32, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-extent..extent),
                    rng.gen_range(0.0..extent),
                ]
            })
            .collect();
        let features = (0..n * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..9u16)).collect();
        PointCloud::new(positions, features, rgb(), Some(labels), 0).unwrap()
    }

    /// Brute-force voxel grouping written independently of the kernel.
    fn grid_sample_oracle(cloud: &PointCloud, cell: f64) -> Vec<([f32; 3], Vec<f32>, u16)> {
        use std::collections::BTreeMap;
        let mut groups: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
        for (i, p) in cloud.positions().iter().enumerate() {
            let c = [
                (p[0] as f64 / cell).floor() as i64,
                (p[1] as f64 / cell).floor() as i64,
                (p[2] as f64 / cell).floor() as i64,
            ];
            groups.entry(c).or_default().push(i);
        }
        let min = groups.keys().fold([i64::MAX; 3], |mut m, c| {
            for a in 0..3 {
                m[a] = m[a].min(c[a]);
            }
            m
        });
        let mut rows: Vec<(u64, [f32; 3], Vec<f32>, u16)> = groups
            .iter()
            .map(|(c, idxs)| {
                let q: Vec<u32> = (0..3).map(|a| (c[a] - min[a]) as u32).collect();
                // independent bit-interleave
                let mut key = 0u64;
                for bit in 0..21u64 {
                    key |= ((q[0] as u64 >> bit) & 1) << (3 * bit);
                    key |= ((q[1] as u64 >> bit) & 1) << (3 * bit + 1);
                    key |= ((q[2] as u64 >> bit) & 1) << (3 * bit + 2);
                }
                let inv = 1.0f64 / idxs.len() as f64;
                let mut pos = [0.0f64; 3];
                let mut feat = vec![0.0f64; cloud.feature_count()];
                for &i in idxs {
                    for a in 0..3 {
                        pos[a] += cloud.positions()[i][a] as f64;
                    }
                    for (acc, &v) in feat.iter_mut().zip(cloud.feature_row(i)) {
                        *acc += v as f64;
                    }
                }
                let mut counts: BTreeMap<u16, u32> = BTreeMap::new();
                for &i in idxs {
                    *counts.entry(cloud.labels().unwrap()[i]).or_insert(0) += 1;
                }
                let mut best = (0u16, 0u32);
                for (&l, &cnt) in &counts {
                    if cnt > best.1 {
                        best = (l, cnt);
                    }
                }
                (
                    key,
                    [
                        (pos[0] * inv) as f32,
                        (pos[1] * inv) as f32,
                        (pos[2] * inv) as f32,
                    ],
                    feat.iter().map(|&v| (v * inv) as f32).collect(),
                    best.0,
                )
            })
            .collect();
        rows.sort_by_key(|r| r.0);
        rows.into_iter().map(|(_, p, f, l)| (p, f, l)).collect()
    }

    #[test]
    fn grid_sample_matches_spec_example() {
        let cloud = PointCloud::new(
            vec![[0.1, 0.1, 0.1], [0.4, 0.2, 0.3], [2.5, 0.1, 0.1]],
            vec![0.0; 9],
            rgb(),
            None,
            0,
        )
        .unwrap();
        let out = grid_sample(&cloud, 1.0).unwrap();
        assert_eq!(out.len(), 2);
        let p0 = out.positions()[0];
        assert!((p0[0] - 0.25).abs() < 1e-6 && (p0[1] - 0.15).abs() < 1e-6 && (p0[2] - 0.2).abs() < 1e-6);
        assert_eq!(out.positions()[1], [2.5, 0.1, 0.1]);
    }

    #[test]
    fn grid_sample_identity_and_empty() {
        let one = PointCloud::new(vec![[1.5, -0.5, 3.25]], vec![0.1, 0.2, 0.3], rgb(), None, 0).unwrap();
        let out = grid_sample(&one, 0.5).unwrap();
        assert_eq!(out.positions(), one.positions());
        let empty = PointCloud::empty(rgb());
        assert_eq!(grid_sample(&empty, 1.0).unwrap().len(), 0);
        assert!(matches!(grid_sample(&one, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn grid_sample_matches_brute_force_oracle() {
        for seed in 0..12u64 {
            let cloud = random_cloud(500 + seed as usize * 97, 12.0, seed);
            let cell = 0.5 + (seed % 3) as f64 * 0.75;
            let got = grid_sample(&cloud, cell).unwrap();
            let want = grid_sample_oracle(&cloud, cell);
            assert_eq!(got.len(), want.len());
            for (i, (pos, feat, label)) in want.iter().enumerate() {
                assert_eq!(got.positions()[i], *pos, "position row {i}");
                assert_eq!(got.feature_row(i), feat.as_slice(), "feature row {i}");
                assert_eq!(got.labels().unwrap()[i], *label, "label row {i}");
            }
        }
    }

    #[test]
    fn grid_sample_voxels_distinct_count_bounded_centroid_contained() {
        for seed in 20..26u64 {
            let cloud = random_cloud(800, 9.0, seed);
            let cell = 1.0;
            let out = grid_sample(&cloud, cell).unwrap();
            assert!(out.len() <= cloud.len());
            let mut seen = std::collections::BTreeSet::new();
            for p in out.positions() {
                let c = voxel_coord(*p, cell);
                assert!(seen.insert(c), "duplicate voxel {c:?}");
                // centroid lies within its voxel's closed bounds
                for a in 0..3 {
                    let lo = c[a] as f64 * cell;
                    assert!(p[a] as f64 >= lo - 1e-6 && p[a] as f64 <= lo + cell + 1e-6);
                }
            }
        }
    }

    #[test]
    fn random_sample_cases() {
        let cloud = random_cloud(10, 5.0, 1);
        let out = random_sample(&cloud, 20, 7).unwrap();
        assert_eq!(out.len(), 10); // undersized input returns everything

        let big = random_cloud(100_000, 50.0, 2);
        let picked = random_sample_indices(big.len(), 4096, 11).unwrap();
        assert_eq!(picked.len(), 4096);
        let distinct: std::collections::BTreeSet<usize> = picked.iter().copied().collect();
        assert_eq!(distinct.len(), 4096);

        let again = random_sample_indices(big.len(), 4096, 11).unwrap();
        assert_eq!(picked, again);
        let other = random_sample_indices(big.len(), 4096, 12).unwrap();
        assert_ne!(picked, other);
    }

    #[test]
    fn knn_basic_and_oracle() {
        let cloud = PointCloud::new(
            vec![[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]],
            vec![0.0; 9],
            rgb(),
            None,
            0,
        )
        .unwrap();
        // center on an existing point
        let got = knn_region(&cloud, [2.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(got.positions()[0], [2.0, 0.0, 0.0]);
        // two nearest of distances {1,2,3} from origin
        let got = knn_indices(&cloud, [0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(got, vec![0, 1]);
        // k ≥ n returns all
        assert_eq!(knn_indices(&cloud, [0.0, 0.0, 0.0], 9).unwrap().len(), 3);
        let empty = PointCloud::empty(rgb());
        assert!(matches!(
            knn_region(&empty, [0.0; 3], 1),
            Err(Error::EmptyInput(_))
        ));

        // brute-force full-sort oracle on random instances
        for seed in 0..8u64 {
            let cloud = random_cloud(3000, 20.0, 100 + seed);
            let center = [1.5, -2.0, 4.0];
            let k = 257;
            let got = knn_indices(&cloud, center, k).unwrap();
            let mut all: Vec<(f64, usize)> = cloud
                .positions()
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    ((0..3).map(|a| (p[a] as f64 - center[a]).powi(2)).sum::<f64>(), i)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all[..k].iter().map(|&(_, i)| i).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn serialize_order_examples_and_oracle() {
        // single point
        assert_eq!(
            serialize_order(&[[0.3, 0.3, 0.3]], 1.0, Curve::Morton).unwrap(),
            vec![0]
        );
        // unit-grid corners keep their given order under Morton keys 0,1,2,7
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]];
        assert_eq!(
            serialize_order(&pts, 1.0, Curve::Morton).unwrap(),
            vec![0, 1, 2, 3]
        );

        for curve in [Curve::Morton, Curve::Hilbert] {
            for seed in 0..6u64 {
                let cloud = random_cloud(2500, 30.0, 200 + seed);
                let order = serialize_order(cloud.positions(), 0.4, curve).unwrap();
                // permutation property
                let mut seen = vec![false; order.len()];
                for &i in &order {
                    assert!(!seen[i as usize]);
                    seen[i as usize] = true;
                }
                // stable argsort by independently recomputed keys
                let coords: Vec<[i64; 3]> = cloud
                    .positions()
                    .iter()
                    .map(|&p| voxel_coord(p, 0.4))
                    .collect();
                let min = coords.iter().fold([i64::MAX; 3], |mut m, c| {
                    for a in 0..3 {
                        m[a] = m[a].min(c[a]);
                    }
                    m
                });
                let mut want: Vec<u32> = (0..order.len() as u32).collect();
                let keys: Vec<u64> = coords
                    .iter()
                    .map(|c| {
                        curve.key(
                            (c[0] - min[0]) as u32,
                            (c[1] - min[1]) as u32,
                            (c[2] - min[2]) as u32,
                        )
                    })
                    .collect();
                want.sort_by_key(|&i| (keys[i as usize], i));
                assert_eq!(order, want);
            }
        }
    }

    #[test]
    fn serialize_order_range_error() {
        let pts = [[0.0, 0.0, 0.0], [1e7, 0.0, 0.0]];
        assert!(matches!(
            serialize_order(&pts, 0.001, Curve::Morton),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn make_batch_is_deterministic_and_covers_local() {
        let cloud = random_cloud(20_000, 25.0, 5);
        let cfg = SamplerConfig {
            local_count: 2048,
            global_multiplier: 4,
            seed: 3,
            ..SamplerConfig::default()
        };
        let a = make_batch(&cloud, &cfg).unwrap();
        let b = make_batch(&cloud, &cfg).unwrap();
        assert_eq!(a.local, b.local);
        assert_eq!(a.global, b.global);
        assert_eq!(a.local_order, b.local_order);
        assert_eq!(a.global_order, b.global_order);
        assert_eq!(a.origin_indices, b.origin_indices);

        // permutations
        assert_eq!(a.local_order.len(), a.local.len());
        assert_eq!(a.global_order.len(), a.global.len());

        // every local point inside the global bounding region
        let mut lo = [f32::MAX; 3];
        let mut hi = [f32::MIN; 3];
        for p in a.global.positions() {
            for ax in 0..3 {
                lo[ax] = lo[ax].min(p[ax]);
                hi[ax] = hi[ax].max(p[ax]);
            }
        }
        for p in a.local.positions() {
            for ax in 0..3 {
                assert!(p[ax] >= lo[ax] - 1e-4 && p[ax] <= hi[ax] + 1e-4);
            }
        }

        // origin indices map into the source cloud and are non-empty
        for group in &a.origin_indices {
            assert!(!group.is_empty());
            for &i in group {
                assert!((i as usize) < cloud.len());
            }
        }
    }

    #[test]
    fn make_batch_small_cloud_uses_everything() {
        let cloud = random_cloud(300, 6.0, 9);
        let cfg = SamplerConfig {
            local_count: 4096,
            ..SamplerConfig::default()
        };
        let batch = make_batch(&cloud, &cfg).unwrap();
        let direct = grid_sample(&cloud, cfg.local_grid).unwrap();
        assert_eq!(batch.local, direct);
    }

    #[test]
    fn global_count_exceeds_local_on_sparse_uniform_clouds() {
        // sparse relative to both grids: every point gets its own cell
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let n = 5000;
            let positions: Vec<[f32; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(0.0..200.0),
                        rng.gen_range(0.0..200.0),
                        rng.gen_range(0.0..40.0),
                    ]
                })
                .collect();
            let features = vec![0.5; n * 3];
            let cloud = PointCloud::new(positions, features, rgb(), None, 0).unwrap();
            let cfg = SamplerConfig {
                local_count: 256,
                global_multiplier: rng.gen_range(1..6),
                seed,
                ..SamplerConfig::default()
            };
            let batch = make_batch(&cloud, &cfg).unwrap();
            assert!(
                batch.global.len() >= batch.local.len(),
                "seed {seed}: global {} < local {}",
                batch.global.len(),
                batch.local.len()
            );
        }
    }
}
