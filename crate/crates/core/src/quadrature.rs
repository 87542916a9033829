//! Gauss–Legendre quadrature rules.

/// Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Build the n-point rule by Newton iteration on the Legendre polynomial.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature order must be positive");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_and_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Nodes and weights mapped to the interval [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    /// ∫_a^b f(x) dx.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// ∬_{[ax,bx]×[ay,by]} f dx dy with an n×n tensor-product rule.
pub fn integrate_2d<F: FnMut(f64, f64) -> f64>(
    rule: &GaussLegendre,
    (ax, bx): (f64, f64),
    (ay, by): (f64, f64),
    mut f: F,
) -> f64 {
    let xs: Vec<(f64, f64)> = rule.mapped(ax, bx).collect();
    let ys: Vec<(f64, f64)> = rule.mapped(ay, by).collect();
    let mut total = 0.0;
    for &(x, wx) in &xs {
        let mut row = 0.0;
        for &(y, wy) in &ys {
            row += wy * f(x, y);
        }
        total += wx * row;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn integrates_polynomials_exactly() {
        let q = GaussLegendre::new(8);
        // degree 15 is exact for 8 nodes
        let v = q.integrate(0.0, 1.0, |x| x.powi(15));
        assert_relative_eq!(v, 1.0 / 16.0, max_relative = 1e-13);
    }

    #[test]
    fn integrates_smooth_function() {
        let q = GaussLegendre::new(64);
        let v = q.integrate(0.0, std::f64::consts::PI, |x| x.sin());
        assert_relative_eq!(v, 2.0, max_relative = 1e-14);
    }

    #[test]
    fn tensor_product_area() {
        let q = GaussLegendre::new(16);
        let v = integrate_2d(&q, (-1.0, 1.0), (-2.0, 2.0), |x, y| x * x * y * y);
        assert_relative_eq!(v, (2.0 / 3.0) * (16.0 / 3.0), max_relative = 1e-13);
    }
}
