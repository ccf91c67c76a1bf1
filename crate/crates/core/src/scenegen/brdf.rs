//! Cook–Torrance microfacet specular lobe: GGX distribution (α = r²),
//! separable Smith masking, Schlick Fresnel.

use crate::geometry::Vec3;

/// Lowest roughness accepted anywhere; the GGX lobe degenerates at 0.
pub const MIN_ROUGHNESS: f64 = 0.05;

/// Dielectric reflectance at normal incidence.
pub const F0_DIELECTRIC: f64 = 0.04;

pub fn fresnel_f0(albedo: [f64; 3], metallic: f64) -> [f64; 3] {
    albedo.map(|a| F0_DIELECTRIC * (1.0 - metallic) + a * metallic)
}

pub fn ggx_ndf(n_dot_h: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let d = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    a2 / (std::f64::consts::PI * d * d)
}

pub fn smith_g1(n_dot_x: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    2.0 * n_dot_x / (n_dot_x + (a2 + (1.0 - a2) * n_dot_x * n_dot_x).sqrt())
}

/// Specular BRDF times `n·l` for unit `n`, `v` (toward the viewer) and `l`
/// (toward the light). Zero when either direction is below the surface.
pub fn specular_cos(
    n: &Vec3,
    v: &Vec3,
    l: &Vec3,
    albedo: [f64; 3],
    metallic: f64,
    roughness: f64,
) -> [f64; 3] {
    let nl = n.dot(l);
    let nv = n.dot(v);
    if nl <= 0.0 || nv <= 0.0 {
        return [0.0; 3];
    }
    let h = (v + l).normalize();
    let alpha = roughness.max(MIN_ROUGHNESS).powi(2);
    let d = ggx_ndf(n.dot(&h).max(0.0), alpha);
    let g = smith_g1(nl, alpha) * smith_g1(nv, alpha);
    let schlick = (1.0 - v.dot(&h).clamp(0.0, 1.0)).powi(5);
    let common = d * g / (4.0 * nl * nv) * nl;
    fresnel_f0(albedo, metallic).map(|f0| (f0 + (1.0 - f0) * schlick) * common)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndf_integrates_to_one_over_projected_hemisphere() {
        // ∫ D(h) (n·h) dω = 1
        let alpha: f64 = 0.4;
        let steps = 20_000;
        let mut acc = 0.0;
        for i in 0..steps {
            let theta = (i as f64 + 0.5) / steps as f64 * std::f64::consts::FRAC_PI_2;
            let c = theta.cos();
            acc += ggx_ndf(c, alpha) * c * theta.sin();
        }
        acc *= std::f64::consts::FRAC_PI_2 / steps as f64 * 2.0 * std::f64::consts::PI;
        assert!((acc - 1.0).abs() < 1e-4, "{acc}");
    }

    #[test]
    fn below_horizon_is_black() {
        let n = Vec3::new(0.0, 0.0, 1.0);
        let v = Vec3::new(0.0, 0.0, 1.0);
        let l = Vec3::new(0.0, 0.6, -0.8);
        assert_eq!(specular_cos(&n, &v, &l, [0.5; 3], 0.5, 0.5), [0.0; 3]);
    }
}
