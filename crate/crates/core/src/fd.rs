//! Central finite-difference stencils used as independent oracles against the
//! jet-propagated derivatives. These only ever consume point *values* of a
//! field, never its jets, so they stay independent of the Taylor machinery.

/// Fourth-order central first derivative along coordinate `a`.
pub fn d1<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], a: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut eval = |s: f64| {
        xp[a] = x[a] + s * h;
        f(&xp)
    };
    (-eval(2.0) + 8.0 * eval(1.0) - 8.0 * eval(-1.0) + eval(-2.0)) / (12.0 * h)
}

/// Mixed partial of order |m| ≤ 3 by nesting the fourth-order stencil.
pub fn mixed<F: Fn(&[f64]) -> f64 + Copy>(f: F, x: &[f64], m: &[u8], h: f64) -> f64 {
    fn go(f: &dyn Fn(&[f64]) -> f64, x: &[f64], m: &[u8], h: f64) -> f64 {
        match m.iter().position(|&e| e > 0) {
            None => f(x),
            Some(a) => {
                let mut next = m.to_vec();
                next[a] -= 1;
                let stencil = [(2.0, -1.0), (1.0, 8.0), (-1.0, -8.0), (-2.0, 1.0)];
                let mut acc = 0.0;
                for (s, w) in stencil {
                    let mut xs = x.to_vec();
                    xs[a] += s * h;
                    acc += w * go(f, &xs, &next, h);
                }
                acc / (12.0 * h)
            }
        }
    }
    go(&f, x, m, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencils_on_known_function() {
        let f = |x: &[f64]| x[0].sin() * x[1].exp();
        let x = [0.7, -0.2];
        let d = d1(&f, &x, 0, 1e-2);
        assert!((d - 0.7_f64.cos() * (-0.2_f64).exp()).abs() < 1e-9);
        let dxy = mixed(f, &x, &[1, 1], 1e-2);
        assert!((dxy - 0.7_f64.cos() * (-0.2_f64).exp()).abs() < 1e-8);
        let dxxx = mixed(f, &x, &[3, 0], 2e-2);
        assert!((dxxx + 0.7_f64.cos() * (-0.2_f64).exp()).abs() < 1e-7);
    }
}
