use super::tensor::TensorValue;
use rand::Rng;
use rand_distr::StandardNormal;

/// Orthogonal weight initialization via modified Gram-Schmidt on a random
/// Gaussian matrix. For rows <= cols the rows are orthonormal (W·Wᵀ = I);
/// for rows > cols the columns are.
pub fn orthogonal_init<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> TensorValue {
    assert!(rows >= 1 && cols >= 1);
    let (n, m, transpose) = if rows <= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    // n vectors of length m, n <= m.
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for i in 0..n {
        for j in 0..i {
            let d: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
            for k in 0..m {
                v[i][k] -= d * v[j][k];
            }
        }
        let norm: f64 = v[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v[i].iter_mut() {
            *x /= norm;
        }
    }
    let mut data = vec![0.0; rows * cols];
    for i in 0..n {
        for k in 0..m {
            if transpose {
                data[k * cols + i] = v[i][k];
            } else {
                data[i * cols + k] = v[i][k];
            }
        }
    }
    TensorValue {
        shape: vec![rows, cols],
        data,
    }
}
