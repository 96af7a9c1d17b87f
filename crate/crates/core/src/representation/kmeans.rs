//! Per-layer k-means codebooks (k-means++ seeding, Lloyd iterations) and
//! nearest-centroid quantization.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::representation::features::ContentFeatures;
use crate::representation::ContentTokens;

/// Lloyd stops once no centroid moves further than this.
pub const CONVERGENCE_SHIFT: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookLayer {
    pub layer_id: u32,
    pub k: usize,
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centroids: Vec<f32>,
    pub iterations: u32,
    pub inertia: f64,
}

impl CodebookLayer {
    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, x: &[f32]) -> usize {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.k {
            let d = sq_dist(x, self.centroid(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub layers: Vec<CodebookLayer>,
    pub seed: u64,
}

impl Codebook {
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u32> = self.layers.iter().map(|l| l.layer_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.layers.len() || self.layers.is_empty() {
            return Err(Error::Format("codebook needs distinct layer ids".into()));
        }
        for l in &self.layers {
            if l.k == 0 || l.dim == 0 || l.centroids.len() != l.k * l.dim {
                return Err(Error::Format(format!("codebook layer {} is malformed", l.layer_id)));
            }
            if l.centroids.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("codebook layer {} has non-finite centroids", l.layer_id)));
            }
        }
        Ok(())
    }

    pub fn layer_ids(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.layer_id).collect()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.k).collect()
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

/// Result of clustering one pooled matrix.
#[derive(Clone, Debug)]
pub struct KmeansFit {
    pub centroids: Vec<f32>,
    pub assignments: Vec<usize>,
    /// Inertia of each assignment step, in order.
    pub inertia_history: Vec<f64>,
    pub iterations: u32,
}

/// Clusters `n x dim` row-major `data` into `k` groups.
pub fn kmeans(data: &[f32], dim: usize, k: usize, max_iter: u32, rng: &mut impl Rng) -> Result<KmeansFit> {
    let n = if dim == 0 { 0 } else { data.len() / dim };
    if k == 0 || n < k {
        return Err(Error::Config(format!("k-means needs at least k = {k} vectors, got {n}")));
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    // k-means++ seeding
    let mut centroids: Vec<f32> = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let next = match WeightedIndex::new(&dist) {
            Ok(w) => w.sample(rng),
            // every remaining point coincides with a centroid
            Err(_) => rng.random_range(0..n),
        };
        let c = row(next).to_vec();
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }

    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut point_dist = vec![0.0f64; n];
    let mut converged = false;
    loop {
        // assignment
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..n {
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(row(i), &centroids[c * dim..(c + 1) * dim]);
                if d < best.1 {
                    best = (c, d);
                }
            }
            changed |= assignments[i] != best.0;
            assignments[i] = best.0;
            point_dist[i] = best.1;
            inertia += best.1;
        }
        history.push(inertia);
        if !changed || converged || iterations >= max_iter {
            break;
        }
        iterations += 1;

        // update
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let a = assignments[i];
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += *v as f64;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed on the point currently worst served
                let far = (0..n)
                    .max_by(|&a, &b| point_dist[a].total_cmp(&point_dist[b]).then(b.cmp(&a)))
                    .expect("non-empty data");
                point_dist[far] = 0.0;
                let p = row(far).to_vec();
                shift = shift.max(sq_dist(&p, &centroids[c * dim..(c + 1) * dim]).sqrt());
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&p);
                continue;
            }
            let new: Vec<f32> = sums[c * dim..(c + 1) * dim].iter().map(|s| (s / counts[c] as f64) as f32).collect();
            shift = shift.max(sq_dist(&new, &centroids[c * dim..(c + 1) * dim]).sqrt());
            centroids[c * dim..(c + 1) * dim].copy_from_slice(&new);
        }
        // one more assignment pass follows so assignments match the centroids
        converged = shift < CONVERGENCE_SHIFT;
    }
    Ok(KmeansFit {
        centroids,
        assignments,
        inertia_history: history,
        iterations,
    })
}

/// Fits one codebook per layer on the pooled frames of `features`.
pub fn fit_kmeans(features: &[ContentFeatures], k_per_layer: &[usize], max_iter: u32, seed: u64) -> Result<Codebook> {
    let first = features
        .first()
        .ok_or_else(|| Error::Config("k-means needs at least one feature set".into()))?;
    if k_per_layer.len() != first.layer_ids.len() {
        return Err(Error::Config(format!(
            "{} K values for {} layers",
            k_per_layer.len(),
            first.layer_ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(first.layer_ids.len());
    for (li, (&layer_id, &k)) in first.layer_ids.iter().zip(k_per_layer).enumerate() {
        let dim = first.dims[li];
        let mut pooled = Vec::new();
        for f in features {
            if f.layer_ids != first.layer_ids || f.dims != first.dims {
                return Err(Error::Shape("feature sets disagree on layers or dimensions".into()));
            }
            pooled.extend_from_slice(&f.layers[li]);
        }
        let fit = kmeans(&pooled, dim, k, max_iter, &mut rng)?;
        log::info!(
            "layer {layer_id}: k = {k}, {} iterations, inertia {:.4}",
            fit.iterations,
            fit.inertia_history.last().copied().unwrap_or(0.0)
        );
        layers.push(CodebookLayer {
            layer_id,
            k,
            dim,
            inertia: *fit.inertia_history.last().expect("at least one assignment"),
            centroids: fit.centroids,
            iterations: fit.iterations,
        });
    }
    Ok(Codebook { layers, seed })
}

/// Nearest-centroid tokens per frame and layer.
pub fn quantize(features: &ContentFeatures, cb: &Codebook) -> Result<ContentTokens> {
    if features.layer_ids != cb.layer_ids() {
        return Err(Error::Shape(format!(
            "feature layers {:?} vs codebook layers {:?}",
            features.layer_ids,
            cb.layer_ids()
        )));
    }
    let mut tokens = Vec::with_capacity(cb.layers.len());
    for (li, layer) in cb.layers.iter().enumerate() {
        if features.dims[li] != layer.dim {
            return Err(Error::Shape(format!(
                "layer {}: feature dim {} vs centroid dim {}",
                layer.layer_id, features.dims[li], layer.dim
            )));
        }
        tokens.push((0..features.n_frames).map(|t| layer.nearest(features.frame(li, t)) as u32).collect());
    }
    ContentTokens::new(cb.layer_ids(), cb.vocab_sizes(), tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft::FrameSpec;
    use rand_distr::Normal;

    fn blobs(seed: u64, n: usize) -> (Vec<f32>, [[f32; 2]; 2]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = [[-3.0f32, 1.0], [4.0, -2.0]];
        let noise = Normal::new(0.0f32, 0.3).unwrap();
        let mut data = Vec::new();
        for i in 0..n {
            let m = means[i % 2];
            data.push(m[0] + noise.sample(&mut rng));
            data.push(m[1] + noise.sample(&mut rng));
        }
        (data, means)
    }

    #[test]
    fn k1_is_the_mean() {
        let data = [1.0f32, 2.0, 3.0, 6.0, -1.0, 1.0];
        let fit = kmeans(&data, 2, 1, 50, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((fit.centroids[0] - 1.0).abs() < 1e-6 && (fit.centroids[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let (data, means) = blobs(1, 400);
        let fit = kmeans(&data, 2, 2, 100, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for m in means {
            let best = (0..2)
                .map(|c| sq_dist(&m, &fit.centroids[c * 2..c * 2 + 2]).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "{best}");
        }
    }

    #[test]
    fn inertia_never_increases_and_ends_at_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..600).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let fit = kmeans(&data, 3, 8, 200, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for w in fit.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", fit.inertia_history);
        }
        let cb = CodebookLayer { layer_id: 1, k: 8, dim: 3, centroids: fit.centroids.clone(), iterations: 0, inertia: 0.0 };
        for i in 0..200 {
            assert_eq!(cb.nearest(&data[i * 3..i * 3 + 3]), fit.assignments[i]);
        }
    }

    #[test]
    fn too_few_vectors_is_config_error() {
        assert!(matches!(
            kmeans(&[0.0; 6], 2, 4, 10, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let fit = kmeans(&[1.0; 20], 2, 3, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(fit.centroids.iter().all(|&v| v == 1.0));
    }

    fn layer(centroids: Vec<f32>, dim: usize) -> CodebookLayer {
        CodebookLayer { layer_id: 1, k: centroids.len() / dim, dim, centroids, iterations: 0, inertia: 0.0 }
    }

    #[test]
    fn exact_centroid_and_tie_rules() {
        let cents: Vec<f32> = (0..10).flat_map(|i| [i as f32, 0.0]).collect();
        let l = layer(cents, 2);
        assert_eq!(l.nearest(&[7.0, 0.0]), 7);
        // (3.5, 0) is equidistant from centroids 3 and 4
        assert_eq!(l.nearest(&[3.5, 0.0]), 3);
        let l = layer(vec![9.0, 9.0, 9.0, 9.0, 1.0, 0.0, 9.0, 9.0, 9.0, 9.0, -1.0, 0.0], 2);
        assert_eq!(l.nearest(&[0.0, 0.0]), 2);
    }

    #[test]
    fn quantize_checks_layout() {
        let spec = FrameSpec::new(320, 1024, 16000).unwrap();
        let f = ContentFeatures::new(vec![5], vec![2], vec![vec![0.0, 0.0, 1.0, 1.0]], 2, spec).unwrap();
        let cb = Codebook { layers: vec![layer(vec![0.0, 0.0, 1.0, 1.0], 2)], seed: 0 };
        assert!(matches!(quantize(&f, &cb), Err(Error::Shape(_))));
        let cb = Codebook { layers: vec![CodebookLayer { layer_id: 5, ..layer(vec![0.0, 0.0, 1.0, 1.0], 2) }], seed: 0 };
        assert_eq!(quantize(&f, &cb).unwrap().tokens, vec![vec![0, 1]]);
        let cb3 = Codebook { layers: vec![CodebookLayer { layer_id: 5, ..layer(vec![0.0; 6], 3) }], seed: 0 };
        assert!(matches!(quantize(&f, &cb3), Err(Error::Shape(_))));
    }

    #[test]
    fn fit_is_seed_deterministic() {
        let spec = FrameSpec::new(320, 1024, 16000).unwrap();
        let (data, _) = blobs(2, 100);
        let f = ContentFeatures::new(vec![3], vec![2], vec![data], 100, spec).unwrap();
        let a = fit_kmeans(std::slice::from_ref(&f), &[4], 50, 11).unwrap();
        let b = fit_kmeans(std::slice::from_ref(&f), &[4], 50, 11).unwrap();
        assert_eq!(a, b);
    }
}
