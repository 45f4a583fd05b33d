//! Composite 8-point Gauss–Legendre quadrature.

const GL8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
];

/// Nodes and weights of the composite rule on `[a, b]` with `panels` equal panels.
pub fn nodes(a: f64, b: f64, panels: usize) -> impl Iterator<Item = (f64, f64)> {
    let h = (b - a) / panels as f64;
    (0..panels).flat_map(move |p| {
        let mid = a + (p as f64 + 0.5) * h;
        GL8.iter().map(move |&(x, w)| (mid + 0.5 * h * x, 0.5 * h * w))
    })
}

pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    nodes(a, b, panels).map(|(t, w)| w * f(t)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_degree_15() {
        let v = integrate(|t| t.powi(15) + t.powi(14), 0.0, 1.0, 1);
        assert!((v - (1.0 / 16.0 + 1.0 / 15.0)).abs() < 1e-15);
    }

    #[test]
    fn weights_sum_to_length() {
        let s: f64 = nodes(-2.0, 3.0, 7).map(|(_, w)| w).sum();
        assert!((s - 5.0).abs() < 1e-13);
    }

    #[test]
    fn oscillatory_integrand() {
        let w = 1000.0;
        let v = integrate(|t| (1.0 - t) * (w * t).sin(), 0.0, 1.0, 2048);
        assert!((v - (w - w.sin()) / (w * w)).abs() < 1e-13);
    }
}
