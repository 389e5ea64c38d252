//! Gauss-Legendre quadrature nodes and weights.

/// Nodes and weights on (-1, 1), computed by Newton iteration on the Legendre
/// polynomial with the Chebyshev initial guess.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1);
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Same rule mapped onto (a, b).
pub fn gauss_legendre_on(order: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (xs, ws) = gauss_legendre(order);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (
        xs.iter().map(|x| mid + half * x).collect(),
        ws.iter().map(|w| w * half).collect(),
    )
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_exactly() {
        // Order-n Gauss-Legendre is exact through degree 2n-1.
        let (xs, ws) = gauss_legendre_on(8, 0.0, 1.0);
        for deg in 0..16usize {
            let got: f64 = xs
                .iter()
                .zip(&ws)
                .map(|(x, w)| w * x.powi(deg as i32))
                .sum();
            let want = 1.0 / (deg as f64 + 1.0);
            assert!(
                (got - want).abs() < 1e-14,
                "degree {deg}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn weights_sum_to_interval_length() {
        let (_, ws) = gauss_legendre_on(32, 0.0, 0.37);
        let s: f64 = ws.iter().sum();
        assert!((s - 0.37).abs() < 1e-14);
    }
}
