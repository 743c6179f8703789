use crate::grid::Grid;

/// Noise predictor plus the feature map drag editing reads from.
///
/// Implementations must be deterministic and shape-preserving. The two
/// `*_vjp` methods are vector-Jacobian products with respect to `z`.
pub trait Denoiser {
    fn noise_predict(&self, z: &Grid, t: usize) -> Grid;
    fn noise_vjp(&self, z: &Grid, t: usize, cotangent: &Grid) -> Grid;
    fn feature_map(&self, z: &Grid, t: usize) -> Grid;
    fn feature_vjp(&self, z: &Grid, t: usize, cotangent: &Grid) -> Grid;
}

/// Analytic predictors with closed-form oracles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToyDenoiser {
    /// `ε ≡ 0`; features are the latent itself.
    Zero,
    /// `ε = a · z`; features are the latent itself.
    Linear { a: f64 },
    /// `ε = z - blur(z)` with a 3×3 box blur; features are `blur(z)`.
    Smoothing,
}

impl ToyDenoiser {
    pub const DEFAULT_LINEAR_A: f64 = 0.1;
}

impl Denoiser for ToyDenoiser {
    fn noise_predict(&self, z: &Grid, _t: usize) -> Grid {
        match *self {
            ToyDenoiser::Zero => z.map(|_| 0.0),
            ToyDenoiser::Linear { a } => z.map(|x| a * x),
            ToyDenoiser::Smoothing => z.zip_map(&z.box_blur(), |x, b| x - b),
        }
    }

    fn noise_vjp(&self, _z: &Grid, _t: usize, cotangent: &Grid) -> Grid {
        match *self {
            ToyDenoiser::Zero => cotangent.map(|_| 0.0),
            ToyDenoiser::Linear { a } => cotangent.map(|g| a * g),
            ToyDenoiser::Smoothing => cotangent.zip_map(&cotangent.box_blur_transpose(), |g, b| g - b),
        }
    }

    fn feature_map(&self, z: &Grid, _t: usize) -> Grid {
        match self {
            ToyDenoiser::Zero | ToyDenoiser::Linear { .. } => z.clone(),
            ToyDenoiser::Smoothing => z.box_blur(),
        }
    }

    fn feature_vjp(&self, _z: &Grid, _t: usize, cotangent: &Grid) -> Grid {
        match self {
            ToyDenoiser::Zero | ToyDenoiser::Linear { .. } => cotangent.clone(),
            ToyDenoiser::Smoothing => cotangent.box_blur_transpose(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &Grid, b: &Grid) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn vjps_are_adjoint_to_linear_maps() {
        let z = Grid::from_fn(4, 5, 2, |v, u, c| ((v * 3 + u * 5 + c * 7) % 11) as f64 * 0.1 - 0.4);
        let g = Grid::from_fn(4, 5, 2, |v, u, c| ((v * 7 + u + c * 3) % 5) as f64 * 0.2 - 0.5);
        for den in [ToyDenoiser::Zero, ToyDenoiser::Linear { a: 0.3 }, ToyDenoiser::Smoothing] {
            // all toy maps are linear, so <J z, g> = <z, Jᵀ g>
            let lhs = dot(&den.noise_predict(&z, 3), &g);
            let rhs = dot(&z, &den.noise_vjp(&z, 3, &g));
            assert!((lhs - rhs).abs() < 1e-12, "{den:?}");
            let lhs = dot(&den.feature_map(&z, 3), &g);
            let rhs = dot(&z, &den.feature_vjp(&z, 3, &g));
            assert!((lhs - rhs).abs() < 1e-12, "{den:?}");
        }
    }
}
