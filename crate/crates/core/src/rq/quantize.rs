use rand::Rng;

use crate::error::{Error, Result};
use crate::modality::Modality;

/// `D` levels of `K` codewords, each of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStack {
    pub modality: Modality,
    depth: usize,
    size: usize,
    dim: usize,
    /// Level-major, then codeword-major: `levels[l][k * dim + j]`.
    levels: Vec<Vec<f64>>,
}

impl CodebookStack {
    pub fn new(modality: Modality, levels: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let depth = levels.len();
        if depth == 0 {
            return Err(Error::Contract("codebook stack needs at least one level".into()));
        }
        let size = levels[0].len();
        if size == 0 {
            return Err(Error::Contract("codebook level is empty".into()));
        }
        let dim = levels[0][0].len();
        let mut flat = Vec::with_capacity(depth);
        for level in &levels {
            if level.len() != size {
                return Err(Error::shape("codebook level", &[size], &[level.len()]));
            }
            let mut buf = Vec::with_capacity(size * dim);
            for cw in level {
                if cw.len() != dim {
                    return Err(Error::shape("codeword", &[dim], &[cw.len()]));
                }
                if cw.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Contract("codeword values must be finite".into()));
                }
                buf.extend_from_slice(cw);
            }
            flat.push(buf);
        }
        Ok(CodebookStack {
            modality,
            depth,
            size,
            dim,
            levels: flat,
        })
    }

    pub fn zeros(modality: Modality, depth: usize, size: usize, dim: usize) -> Self {
        CodebookStack {
            modality,
            depth,
            size,
            dim,
            levels: vec![vec![0.0; size * dim]; depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Codeword `k` at 0-based level `level`.
    pub fn codeword(&self, level: usize, k: usize) -> &[f64] {
        &self.levels[level][k * self.dim..(k + 1) * self.dim]
    }

    pub(crate) fn codeword_mut(&mut self, level: usize, k: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.levels[level][k * d..(k + 1) * d]
    }

    pub fn level(&self, level: usize) -> &[f64] {
        &self.levels[level]
    }

    pub(crate) fn set_level(&mut self, level: usize, data: Vec<f64>) {
        assert_eq!(data.len(), self.size * self.dim);
        self.levels[level] = data;
    }

    /// Index of the nearest codeword at `level`; ties go to the lowest index.
    pub fn nearest(&self, level: usize, r: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size {
            let d = sq_dist(r, self.codeword(level, k));
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(|l| l.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub codes: Vec<usize>,
    /// Residual after every level; `residuals[0]` is the input itself.
    pub residuals: Vec<Vec<f64>>,
}

impl Quantized {
    pub fn final_residual(&self) -> &[f64] {
        self.residuals.last().expect("residuals include the input")
    }

    /// Sum of the selected codewords.
    pub fn reconstruction(&self) -> Vec<f64> {
        let z = &self.residuals[0];
        z.iter().zip(self.final_residual()).map(|(a, b)| a - b).collect()
    }
}

/// Residual quantization: at each level pick the nearest codeword to the
/// running residual and subtract it.
pub fn quantize(z: &[f64], stack: &CodebookStack) -> Result<Quantized> {
    if z.len() != stack.dim() {
        return Err(Error::shape("quantize", &[stack.dim()], &[z.len()]));
    }
    let mut codes = Vec::with_capacity(stack.depth());
    let mut residuals = Vec::with_capacity(stack.depth() + 1);
    let mut r = z.to_vec();
    residuals.push(r.clone());
    for level in 0..stack.depth() {
        let c = stack.nearest(level, &r);
        for (rv, ev) in r.iter_mut().zip(stack.codeword(level, c)) {
            *rv -= ev;
        }
        codes.push(c);
        residuals.push(r.clone());
    }
    Ok(Quantized { codes, residuals })
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means with k-means++ seeding and a fixed number of Lloyd iterations.
/// Returns `k * dim` centroids and per-centroid counts. Empty clusters keep
/// their previous centroid.
pub fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut R) -> (Vec<f64>, Vec<usize>) {
    assert!(!points.is_empty(), "kmeans needs points");
    let dim = points[0].len();
    let n = points.len();
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (dv, p) in d2.iter_mut().zip(points) {
            *dv = dv.min(sq_dist(p, &c));
        }
        centroids.extend_from_slice(&c);
    }

    let mut counts = vec![0usize; k];
    let mut assign = vec![0usize; n];
    for it in 0..=iters {
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        counts.iter_mut().for_each(|c| *c = 0);
        let mut sums = vec![0.0; k * dim];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        if it == iters {
            break;
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    (centroids, counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_level_example() {
        let stack = CodebookStack::new(Modality::Text, vec![vec![vec![0.0, 0.0], vec![1.0, 1.0]]]).unwrap();
        let q = quantize(&[0.9, 1.2], &stack).unwrap();
        assert_eq!(q.codes, vec![1]);
        let r = q.final_residual();
        assert!((r[0] + 0.1).abs() < 1e-12 && (r[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn exact_match_leaves_zero_residual() {
        let e0 = vec![0.3, -0.7, 1.1];
        let stack = CodebookStack::new(
            Modality::Vision,
            vec![
                vec![e0.clone(), vec![5.0, 5.0, 5.0]],
                vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]],
                vec![vec![0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]],
            ],
        )
        .unwrap();
        let q = quantize(&e0, &stack).unwrap();
        assert_eq!(q.codes, vec![0, 1, 0]);
        assert!(q.final_residual().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ties_pick_lowest_index() {
        let stack = CodebookStack::new(Modality::Text, vec![vec![vec![1.0], vec![-1.0], vec![1.0]]]).unwrap();
        assert_eq!(quantize(&[0.0], &stack).unwrap().codes, vec![0]);
        assert_eq!(quantize(&[1.0], &stack).unwrap().codes, vec![0]);
    }

    #[test]
    fn dimension_mismatch() {
        let stack = CodebookStack::zeros(Modality::Text, 2, 3, 4);
        assert!(matches!(quantize(&[0.0; 3], &stack), Err(Error::Shape { .. })));
    }

    #[test]
    fn kmeans_recovers_distinct_points() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 3.0, -(i as f64)]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, counts) = kmeans(&pts, 6, 10, &mut rng);
        assert!(counts.iter().all(|&n| n == 1));
        for p in &pts {
            assert!((0..6).any(|k| sq_dist(p, &c[k * 2..k * 2 + 2]) == 0.0));
        }
    }
}
