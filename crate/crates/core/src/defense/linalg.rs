/// Leading eigenpair of a small symmetric matrix (row-major `n × n`) by
/// cyclic Jacobi rotations. Returns `(eigenvalue, unit eigenvector)`.
pub fn top_eigenvector(matrix: &[f64], n: usize) -> (f64, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let best = (0..n)
        .max_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]).then(j.cmp(&i)))
        .unwrap_or(0);
    let vec: Vec<f64> = (0..n).map(|k| v[k * n + best]).collect();
    (a[best * n + best], vec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_and_rotated() {
        let (l, v) = top_eigenvector(&[1.0, 0.0, 0.0, 3.0], 2);
        assert!((l - 3.0).abs() < 1e-12);
        assert!((v[1].abs() - 1.0).abs() < 1e-12);
        // [[2,1],[1,2]] has eigenvalues 3 and 1, top vector (1,1)/√2.
        let (l, v) = top_eigenvector(&[2.0, 1.0, 1.0, 2.0], 2);
        assert!((l - 3.0).abs() < 1e-12);
        assert!((v[0].abs() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((v[0] - v[1]).abs() < 1e-12);
    }
}
