//! PCA projection of adapter-parameter vectors to 2-D (power iteration with
//! deflation) and the CSV export used for plotting task clusters.

use std::path::Path;

use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use crate::error::{Error, Result};
use crate::storage::write_atomic;
use crate::tensor::Tensor;

/// 2-D coordinates per input vector plus explained-variance ratios.
#[derive(Clone, Debug)]
pub struct Projection {
    pub task_ids: Vec<u32>,
    /// `[n, 2]` row per input vector.
    pub coords: Vec<[f64; 2]>,
    pub explained_variance: [f64; 2],
    /// Set when all inputs are identical: coordinates are all zero.
    pub zero_variance: bool,
}

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 10_000;

/// Centered data as flat rows.
struct Centered {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Centered {
    fn new(vectors: &[Vec<f64>]) -> Self {
        let rows = vectors.len();
        let dim = vectors[0].len();
        let mut mean = vec![0.0; dim];
        for v in vectors {
            for (m, &x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut data = Vec::with_capacity(rows * dim);
        for v in vectors {
            data.extend(v.iter().zip(&mean).map(|(&x, &m)| x - m));
        }
        Centered { rows, dim, data }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Covariance-matrix product without materializing the matrix:
    /// `C v = X^T (X v) / (n - 1)`.
    fn cov_apply(&self, v: &[f64]) -> Vec<f64> {
        let mut proj = vec![0.0; self.rows];
        for i in 0..self.rows {
            proj[i] = self.row(i).iter().zip(v).map(|(&x, &y)| x * y).sum();
        }
        let mut out = vec![0.0; self.dim];
        for i in 0..self.rows {
            let p = proj[i] / (self.rows - 1).max(1) as f64;
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o += x * p;
            }
        }
        out
    }

    fn total_variance(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>() / (self.rows - 1).max(1) as f64
    }

    /// Remove the component along `v` from every row.
    fn deflate(&mut self, v: &[f64]) {
        for i in 0..self.rows {
            let dot: f64 = self.row(i).iter().zip(v).map(|(&x, &y)| x * y).sum();
            let row = &mut self.data[i * self.dim..(i + 1) * self.dim];
            for (x, &y) in row.iter_mut().zip(v) {
                *x -= dot * y;
            }
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Deterministic sign: first component of largest magnitude is positive.
fn fix_sign(v: &mut [f64]) {
    let lead = v
        .iter()
        .cloned()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .unwrap_or(0.0);
    if lead < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Leading eigenvector/value of the covariance via power iteration.
fn power_iteration(data: &Centered, seed_stream: u64) -> (Vec<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x70_77_65_72 ^ seed_stream);
    let mut v: Vec<f64> = (0..data.dim)
        .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
        .collect();
    normalize(&mut v);
    let mut eigenvalue = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let mut next = data.cov_apply(&v);
        let norm = normalize(&mut next);
        let delta: f64 = next
            .iter()
            .zip(&v)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max);
        // Sign flips between iterates mean a negative-direction start.
        let flipped: f64 = next
            .iter()
            .zip(&v)
            .map(|(&a, &b)| (a + b).abs())
            .fold(0.0, f64::max);
        v = next;
        eigenvalue = norm;
        if delta < POWER_TOL || flipped < POWER_TOL {
            break;
        }
    }
    fix_sign(&mut v);
    (v, eigenvalue)
}

/// Project labeled vectors onto their top-2 principal components.
pub fn project_2d(task_ids: &[u32], vectors: &[Vec<f64>]) -> Result<Projection> {
    if vectors.len() < 3 {
        return Err(Error::Precondition(format!(
            "projection needs at least 3 vectors, got {}",
            vectors.len()
        )));
    }
    if task_ids.len() != vectors.len() {
        return Err(Error::Config("task label count differs from vector count".into()));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Config("projection vectors have unequal lengths".into()));
    }
    let mut centered = Centered::new(vectors);
    let total = centered.total_variance();
    if total <= f64::EPSILON {
        // All vectors identical: zero-variance warning case.
        return Ok(Projection {
            task_ids: task_ids.to_vec(),
            coords: vec![[0.0, 0.0]; vectors.len()],
            explained_variance: [0.0, 0.0],
            zero_variance: true,
        });
    }
    let (v1, lambda1) = power_iteration(&centered, 1);
    let pc1: Vec<f64> = (0..vectors.len())
        .map(|i| centered.row(i).iter().zip(&v1).map(|(&x, &y)| x * y).sum())
        .collect();
    // Deflating before the second pass keeps pc2 orthogonal to pc1 and makes
    // rank-1 data project to an exactly-zero second coordinate.
    centered.deflate(&v1);
    let (v2, lambda2) = power_iteration(&centered, 2);
    let coords: Vec<[f64; 2]> = (0..vectors.len())
        .map(|i| {
            let c2: f64 = centered.row(i).iter().zip(&v2).map(|(&x, &y)| x * y).sum();
            [pc1[i], c2]
        })
        .collect();
    Ok(Projection {
        task_ids: task_ids.to_vec(),
        coords,
        explained_variance: [lambda1 / total, lambda2 / total],
        zero_variance: false,
    })
}

/// Flatten adapter parameters into one vector per task label.
pub fn flatten_adapters(psi: &crate::adapt::AdapterParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(psi.value_count());
    for b in &psi.blocks {
        out.extend_from_slice(b.down.data());
        out.extend_from_slice(b.up.data());
        out.extend_from_slice(b.gamma.data());
        out.extend_from_slice(b.beta.data());
    }
    out
}

/// Write the projection as CSV: `task_id,pc1,pc2` with explained-variance
/// ratios in a header comment.
pub fn export_projection(path: &Path, projection: &Projection) -> Result<()> {
    write_atomic(path, |w| {
        let io = |e| Error::io(path, e);
        writeln!(
            w,
            "# explained_variance_pc1={:.6} explained_variance_pc2={:.6}{}",
            projection.explained_variance[0],
            projection.explained_variance[1],
            if projection.zero_variance {
                " warning=zero_variance"
            } else {
                ""
            }
        )
        .map_err(io)?;
        writeln!(w, "task_id,pc1,pc2").map_err(io)?;
        for (id, c) in projection.task_ids.iter().zip(&projection.coords) {
            writeln!(w, "{id},{},{}", c[0], c[1]).map_err(io)?;
        }
        Ok(())
    })
}

/// Test-oracle eigендecomposition helper: projects through the n x n Gram
/// matrix instead of the covariance. Exposed for integration tests.
pub fn gram_matrix(vectors: &[Vec<f64>]) -> Tensor {
    let centered = Centered::new(vectors);
    let n = centered.rows;
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = centered
                .row(i)
                .iter()
                .zip(centered.row(j))
                .map(|(&x, &y)| x * y)
                .sum();
        }
    }
    Tensor::new(vec![n, n], g).expect("gram shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::rng_from;
    use rand::Rng;

    #[test]
    fn collinear_vectors_have_no_second_component()
    {
        let mut rng = rng_from(1, "pca", 0);
        let dir: Vec<f64> = (0..69).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vectors: Vec<Vec<f64>> = (0..6)
            .map(|i| dir.iter().map(|&d| d * (i as f64 - 2.5)).collect())
            .collect();
        let p = project_2d(&[0, 1, 2, 3, 4, 5], &vectors).unwrap();
        for c in &p.coords {
            assert!(c[1].abs() < 1e-8, "pc2 leak: {}", c[1]);
        }
        assert!(p.explained_variance[0] > 0.999);
    }

    #[test]
    fn two_orthogonal_clusters_separate_in_pc1() {
        let mut rng = rng_from(2, "pca", 0);
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        for i in 0..8 {
            let cluster = i % 2;
            let mut v = vec![0.0; 20];
            v[cluster] = 5.0;
            for x in v.iter_mut() {
                *x += rng.gen_range(-0.01..0.01);
            }
            vectors.push(v);
            labels.push(cluster as u32);
        }
        let p = project_2d(&labels, &vectors).unwrap();
        for (label, c) in labels.iter().zip(&p.coords) {
            let sign = c[0].signum();
            let expected = p.coords[*label as usize][0].signum();
            assert_eq!(sign, expected, "cluster {label} crossed pc1 sign");
        }
        let a = p.coords[0][0].signum();
        let b = p.coords[1][0].signum();
        assert_ne!(a, b, "clusters should land on opposite pc1 sides");
    }

    #[test]
    fn identical_vectors_project_to_zero_with_warning() {
        let vectors = vec![vec![1.0, 2.0, 3.0]; 4];
        let p = project_2d(&[0, 1, 2, 3], &vectors).unwrap();
        assert!(p.zero_variance);
        assert!(p.coords.iter().all(|c| c == &[0.0, 0.0]));
    }

    #[test]
    fn too_few_vectors_is_a_precondition_error() {
        let vectors = vec![vec![1.0], vec![2.0]];
        assert!(project_2d(&[0, 1], &vectors).is_err());
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.csv");
        let mut rng = rng_from(3, "pca", 0);
        let vectors: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let p = project_2d(&[7, 8, 9, 10], &vectors).unwrap();
        export_projection(&path, &p).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# explained_variance"));
        assert_eq!(lines.next().unwrap(), "task_id,pc1,pc2");
        assert_eq!(lines.count(), 4);
    }
}
