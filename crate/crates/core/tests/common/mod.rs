//! Oracles shared by integration test targets.
#![allow(dead_code)]

/// Two-tailed Student-t tail probability by direct quadrature.
///
/// With `x = √ν·tan θ` the unnormalised density `(1 + x²/ν)^(−(ν+1)/2)`
/// becomes `√ν·cos^(ν−1) θ` on `[0, π/2)`, so the tail mass beyond `|t|` is
/// a ratio of two bounded integrals, evaluated with composite Simpson.
pub fn t_two_tailed_quadrature(t: f64, dof: f64) -> f64 {
    let theta_t = (t.abs() / dof.sqrt()).atan();
    let f = |th: f64| th.cos().max(0.0).powf(dof - 1.0);
    let simpson = |a: f64, b: f64| {
        let n = 400_000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    simpson(theta_t, half_pi) / simpson(0.0, half_pi)
}

/// Welch statistic and Welch–Satterthwaite dof, written out independently.
pub fn welch_reference(a: &[f64], b: &[f64]) -> (f64, f64) {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    (t, dof)
}

/// Twenty fixed two-sample cases covering small to moderate dof, unequal
/// sizes and spreads, and both signs of t.
pub fn welch_cases() -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out = vec![
        (vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![2.0, 3.0, 4.0, 5.0, 6.0]),
        (vec![0.448, 0.649, 1.55, 0.9, 0.7], vec![0.5, 0.689, 0.55, 0.6, 0.62]),
        (vec![2.3, 2.1, 2.6, 2.2, 2.4], vec![0.4, 0.45, 0.38, 0.5, 0.41]),
        (vec![1.0, 1.1], vec![5.0, 9.0, 2.0]),
        (vec![-1.0, 0.0, 1.0], vec![10.0, 10.5]),
    ];
    let mut state = 0x1234_5678_u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    while out.len() < 20 {
        let na = 2 + (next() * 9.0) as usize;
        let nb = 2 + (next() * 9.0) as usize;
        let (sa, sb) = (0.1 + 3.0 * next(), 0.1 + 3.0 * next());
        let shift = 4.0 * (next() - 0.5);
        let a: Vec<f64> = (0..na).map(|_| sa * (next() - 0.5)).collect();
        let b: Vec<f64> = (0..nb).map(|_| shift + sb * (next() - 0.5)).collect();
        out.push((a, b));
    }
    out
}
