use klab::spectral::FastFoodParams;

/// Sylvester construction, written out independently of the library.
fn hadamard(d: usize) -> Vec<Vec<f64>> {
    let mut h = vec![vec![1.0]];
    while h.len() < d {
        let n = h.len();
        let mut next = vec![vec![0.0; 2 * n]; 2 * n];
        for i in 0..n {
            for j in 0..n {
                next[i][j] = h[i][j];
                next[i][j + n] = h[i][j];
                next[i + n][j] = h[i][j];
                next[i + n][j + n] = -h[i][j];
            }
        }
        h = next;
    }
    h
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    (0..n)
        .map(|i| {
            (0..m)
                .map(|j| (0..b.len()).map(|k| a[i][k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn diag(v: &[f64]) -> Vec<Vec<f64>> {
    (0..v.len())
        .map(|i| {
            (0..v.len())
                .map(|j| if i == j { v[i] } else { 0.0 })
                .collect()
        })
        .collect()
}

/// `V = 1/(σ√d) · S H G Π H B` per block, built from explicit matrices.
pub fn dense_oracle(p: &FastFoodParams) -> Vec<Vec<f64>> {
    let d = p.dim();
    let h = hadamard(d);
    let c = 1.0 / (p.sigma * (d as f64).sqrt());
    let mut rows = Vec::new();
    for block in &p.blocks {
        let pi: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| if block.perm[i] == j { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let mut v = diag(&block.s);
        for m in [&h, &diag(&block.g), &pi, &h, &diag(&block.b)] {
            v = matmul(&v, m);
        }
        rows.extend(
            v.into_iter()
                .map(|r| r.into_iter().map(|x| c * x).collect::<Vec<_>>()),
        );
    }
    rows
}
