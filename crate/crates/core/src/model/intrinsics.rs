use crate::tensor::{Result, Tensor, Var};

/// Channel name and channel count of each intrinsic map, in canonical order.
pub const CHANNELS: [(&str, usize); 5] = [
    ("albedo", 3),
    ("metallic", 1),
    ("roughness", 1),
    ("normal", 3),
    ("shading", 3),
];

/// Per-view intrinsic maps, each `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntrinsicSet {
    pub albedo: Tensor,
    pub metallic: Tensor,
    pub roughness: Tensor,
    pub normal: Tensor,
    pub shading: Tensor,
}

impl IntrinsicSet {
    pub fn num_views(&self) -> usize {
        self.albedo.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.albedo.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.albedo.shape()[3]
    }

    pub fn maps(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("albedo", &self.albedo),
            ("metallic", &self.metallic),
            ("roughness", &self.roughness),
            ("normal", &self.normal),
            ("shading", &self.shading),
        ]
    }

    fn map_each(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(Self {
            albedo: f(&self.albedo)?,
            metallic: f(&self.metallic)?,
            roughness: f(&self.roughness)?,
            normal: f(&self.normal)?,
            shading: f(&self.shading)?,
        })
    }

    /// Single view `i` as a one-view set.
    pub fn view(&self, i: usize) -> Result<Self> {
        self.map_each(|t| t.slice0(i, 1))
    }

    /// Views in the order given by `order`.
    pub fn select(&self, order: &[usize]) -> Result<Self> {
        self.map_each(|t| {
            let parts: Vec<Tensor> = order
                .iter()
                .map(|&i| t.slice0(i, 1))
                .collect::<Result<_>>()?;
            Tensor::cat0(&parts)
        })
    }

    pub fn cat(sets: &[IntrinsicSet]) -> Result<Self> {
        let pick = |f: fn(&IntrinsicSet) -> &Tensor| -> Result<Tensor> {
            Tensor::cat0(&sets.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
        };
        Ok(Self {
            albedo: pick(|s| &s.albedo)?,
            metallic: pick(|s| &s.metallic)?,
            roughness: pick(|s| &s.roughness)?,
            normal: pick(|s| &s.normal)?,
            shading: pick(|s| &s.shading)?,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.maps()
            .iter()
            .zip(other.maps())
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Range and unit-normal contracts; returns a description of the first
    /// violation.
    pub fn check_contracts(&self, normal_tol: f64) -> Result<(), String> {
        let n = self.num_views();
        let (h, w) = (self.height(), self.width());
        for ((name, c), (_, t)) in CHANNELS.iter().zip(self.maps()) {
            if t.shape() != [n, *c, h, w] {
                return Err(format!("{name} has shape {:?}", t.shape()));
            }
            if *name != "normal" && t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("{name} outside [0, 1]"));
            }
        }
        let nd = self.normal.data();
        let plane = h * w;
        for v in 0..n {
            for p in 0..plane {
                let s: f64 = (0..3).map(|c| nd[(v * 3 + c) * plane + p].powi(2)).sum();
                if (s.sqrt() - 1.0).abs() > normal_tol {
                    return Err(format!("normal norm {} at view {v} pixel {p}", s.sqrt()));
                }
            }
        }
        Ok(())
    }
}

/// Differentiable counterpart of [`IntrinsicSet`].
#[derive(Clone, Copy, Debug)]
pub struct IntrinsicVars<'t> {
    pub albedo: Var<'t>,
    pub metallic: Var<'t>,
    pub roughness: Var<'t>,
    pub normal: Var<'t>,
    pub shading: Var<'t>,
}

impl<'t> IntrinsicVars<'t> {
    pub fn values(&self) -> IntrinsicSet {
        IntrinsicSet {
            albedo: self.albedo.value(),
            metallic: self.metallic.value(),
            roughness: self.roughness.value(),
            normal: self.normal.value(),
            shading: self.shading.value(),
        }
    }

    pub fn maps(&self) -> [(&'static str, Var<'t>); 5] {
        [
            ("albedo", self.albedo),
            ("metallic", self.metallic),
            ("roughness", self.roughness),
            ("normal", self.normal),
            ("shading", self.shading),
        ]
    }

    /// Views `start..start + len`.
    pub fn narrow_views(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            albedo: self.albedo.narrow(0, start, len)?,
            metallic: self.metallic.narrow(0, start, len)?,
            roughness: self.roughness.narrow(0, start, len)?,
            normal: self.normal.narrow(0, start, len)?,
            shading: self.shading.narrow(0, start, len)?,
        })
    }
}
