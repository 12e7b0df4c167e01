//! Exponential integrals and Gauss-Legendre rules.

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// E1(x) for x > 0; +inf at 0.
pub fn exp1(x: f64) -> f64 {
    if x <= 0.0 {
        return f64::INFINITY;
    }
    if x > 740.0 {
        return 0.0;
    }
    if x <= 1.0 {
        -EULER_GAMMA - x.ln() + ein_series(x)
    } else {
        // modified Lentz on the continued fraction
        let tiny = 1e-300;
        let mut b = x + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (an * d + b);
            c = b + an / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-x).exp()
    }
}

fn ein_series(u: f64) -> f64 {
    // sum_{k>=1} (-1)^{k+1} u^k / (k k!)
    let mut term = 1.0;
    let mut s = 0.0;
    for k in 1..60 {
        term *= -u / k as f64;
        let add = -term / k as f64;
        s += add;
        if add.abs() < 1e-17 * s.abs().max(1e-300) {
            break;
        }
    }
    s
}

/// Entire part of E1: Ein(u) = E1(u) + gamma + ln u.
pub fn ein(u: f64) -> f64 {
    if u < 1.0 {
        ein_series(u)
    } else {
        exp1(u) + EULER_GAMMA + u.ln()
    }
}

/// E1(ub) - E1(ua) with ua = +inf meaning E1(ua) = 0.
pub fn exp1_diff(ub: f64, ua: f64) -> f64 {
    if ua.is_infinite() {
        return exp1(ub);
    }
    if ua < 1.0 {
        // both small: the logs carry the difference
        (ua / ub).ln() + ein(ub) - ein(ua)
    } else {
        exp1(ub) - exp1(ua)
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * p - pm1) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// ln(q!) exact by summation (q is small here).
pub fn ln_factorial(q: usize) -> f64 {
    (2..=q).map(|k| (k as f64).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp1_reference_values() {
        // values from standard tables
        assert!((exp1(0.5) - 0.559_773_594_776_160_8).abs() < 1e-14);
        assert!((exp1(1.0) - 0.219_383_934_395_520_3).abs() < 1e-14);
        assert!((exp1(2.0) - 0.048_900_510_708_061_12).abs() < 1e-14);
        assert!((exp1(10.0) - 4.156_968_929_685_324e-6).abs() < 1e-18);
    }

    #[test]
    fn ein_matches_on_both_branches() {
        for &u in &[0.3, 0.99, 1.01, 3.0] {
            let lhs = ein(u);
            let rhs = exp1(u) + EULER_GAMMA + u.ln();
            assert!((lhs - rhs).abs() < 1e-13, "{u}");
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((s - 2.0 / 15.0).abs() < 1e-14);
    }
}
