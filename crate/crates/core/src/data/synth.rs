//! Synthetic faces under the Lambertian model `I(x, y) = R(x, y) * L(x, y)`.
//!
//! Identities are parametric reflectance maps built from a handful of placed
//! primitives (head ellipse, hair band, two eyes, two brows, nose bar, mouth
//! bar, one cheek mark), all drawn from a seed. Pose is a horizontal affine
//! map of the reflectance (compression plus lateral shift) with the far half
//! of the face hidden beyond 45 degrees of yaw. Lighting is a linear ramp.
//!
//! All geometry is in normalized image coordinates: `u` runs left to right
//! and `v` top to bottom over `[-1, 1]`, sampled at pixel centers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reflectance outside the head and on self-occluded regions.
pub const BACKGROUND_ALBEDO: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
struct Ellipse {
    cu: f64,
    cv: f64,
    ru: f64,
    rv: f64,
    albedo: Vec<f64>,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let a = (u - self.cu) / self.ru;
        let b = (v - self.cv) / self.rv;
        a * a + b * b <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Bar {
    cu: f64,
    cv: f64,
    hu: f64,
    hv: f64,
    albedo: Vec<f64>,
}

impl Bar {
    fn contains(&self, u: f64, v: f64) -> bool {
        (u - self.cu).abs() <= self.hu && (v - self.cv).abs() <= self.hv
    }
}

/// Seed-derived reflectance map `R` of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityTemplate {
    pub identity: usize,
    pub channels: usize,
    head: Ellipse,
    /// Rows above this `v` inside the head are hair.
    hairline: f64,
    hair: Vec<f64>,
    eyes: [Ellipse; 2],
    brows: [Bar; 2],
    nose: Bar,
    mouth: Bar,
    mark: Ellipse,
}

/// splitmix64 finalizer, used to derive per-identity streams from one seed.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn albedo(rng: &mut ChaCha8Rng, channels: usize, lo: f64, hi: f64) -> Vec<f64> {
    let base = rng.random_range(lo..hi);
    (0..channels)
        .map(|_| {
            if channels == 1 {
                base
            } else {
                (base + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0)
            }
        })
        .collect()
}

impl IdentityTemplate {
    pub fn new(seed: u64, identity: usize, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(identity as u64 + 1)));
        let r = &mut rng;
        let head = Ellipse {
            cu: r.random_range(-0.04..0.04),
            cv: r.random_range(0.0..0.08),
            ru: r.random_range(0.55..0.72),
            rv: r.random_range(0.72..0.88),
            albedo: albedo(r, channels, 0.55, 0.9),
        };
        let hairline = r.random_range(-0.75..-0.4);
        let hair = albedo(r, channels, 0.05, 0.5);
        let eye = |r: &mut ChaCha8Rng, side: f64| Ellipse {
            cu: side * r.random_range(0.18..0.34),
            cv: r.random_range(-0.22..-0.06),
            ru: r.random_range(0.07..0.14),
            rv: r.random_range(0.04..0.09),
            albedo: albedo(r, channels, 0.02, 0.35),
        };
        let eyes = [eye(r, -1.0), eye(r, 1.0)];
        let brow = |r: &mut ChaCha8Rng, e: &Ellipse| Bar {
            cu: e.cu + r.random_range(-0.04..0.04),
            cv: e.cv - e.rv - r.random_range(0.05..0.12),
            hu: r.random_range(0.08..0.16),
            hv: r.random_range(0.015..0.04),
            albedo: albedo(r, channels, 0.02, 0.4),
        };
        let brows = [brow(r, &eyes[0]), brow(r, &eyes[1])];
        let nose = Bar {
            cu: r.random_range(-0.05..0.05),
            cv: r.random_range(0.05..0.16),
            hu: r.random_range(0.03..0.07),
            hv: r.random_range(0.1..0.2),
            albedo: albedo(r, channels, 0.3, 0.65),
        };
        let mouth = Bar {
            cu: r.random_range(-0.06..0.06),
            cv: r.random_range(0.36..0.5),
            hu: r.random_range(0.1..0.26),
            hv: r.random_range(0.025..0.06),
            albedo: albedo(r, channels, 0.1, 0.45),
        };
        let side = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let mark = Ellipse {
            cu: side * r.random_range(0.25..0.42),
            cv: r.random_range(0.1..0.35),
            ru: r.random_range(0.04..0.1),
            rv: r.random_range(0.04..0.1),
            albedo: albedo(r, channels, 0.2, 0.5),
        };
        IdentityTemplate {
            identity,
            channels,
            head,
            hairline,
            hair,
            eyes,
            brows,
            nose,
            mouth,
            mark,
        }
    }

    /// Horizontal center of the head, the axis poses rotate about.
    pub fn center_u(&self) -> f64 {
        self.head.cu
    }

    /// Reflectance at a normalized point; later primitives paint over earlier
    /// ones.
    pub fn reflectance(&self, u: f64, v: f64, out: &mut [f64]) {
        if !self.head.contains(u, v) {
            out.fill(BACKGROUND_ALBEDO);
            return;
        }
        let mut src = if v < self.hairline { &self.hair } else { &self.head.albedo };
        for e in &self.eyes {
            if e.contains(u, v) {
                src = &e.albedo;
            }
        }
        for b in self.brows.iter().chain([&self.nose, &self.mouth]) {
            if b.contains(u, v) {
                src = &b.albedo;
            }
        }
        if self.mark.contains(u, v) {
            src = &self.mark.albedo;
        }
        out.copy_from_slice(src);
    }

    /// `R` sampled at the pixel centers of an `h x w` grid.
    pub fn rasterize(&self, h: usize, w: usize) -> Tensor {
        let mut t = Tensor::zeros(&[h, w, self.channels]);
        let c = self.channels;
        for y in 0..h {
            for x in 0..w {
                let o = (y * w + x) * c;
                self.reflectance(coord(x, w), coord(y, h), &mut t.data_mut()[o..o + c]);
            }
        }
        t
    }
}

fn coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSpec {
    pub yaw_deg: f64,
}

/// Horizontal scale at full profile.
const PROFILE_SCALE: f64 = 0.6;
/// Lateral shift of the head center at full profile, normalized units.
const PROFILE_SHIFT: f64 = 0.3;
/// Beyond this yaw the far half of the face is hidden.
pub const OCCLUSION_YAW_DEG: f64 = 45.0;

impl PoseSpec {
    pub fn new(yaw_deg: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&yaw_deg) {
            return Err(Error::config(format!("yaw {yaw_deg} outside [-90, 90]")));
        }
        Ok(PoseSpec { yaw_deg })
    }

    /// `(scale, shift)` of the horizontal map `u_img = c + shift + scale * (u_face - c)`.
    pub fn affine(&self) -> (f64, f64) {
        let s = self.yaw_deg.to_radians().sin();
        (1.0 - (1.0 - PROFILE_SCALE) * s.abs(), PROFILE_SHIFT * s)
    }

    pub fn occludes(&self) -> bool {
        self.yaw_deg.abs() > OCCLUSION_YAW_DEG
    }
}

/// Directional ramp plus ambient floor:
/// `L = ambient + (1 - ambient) * (1 + (cos(a) u + sin(a) v) / sqrt(2)) / 2`,
/// which stays in `[ambient, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightSpec {
    pub azimuth_deg: f64,
    pub ambient: f64,
}

impl LightSpec {
    pub fn new(azimuth_deg: f64, ambient: f64) -> Result<Self> {
        if !(0.1..=1.0).contains(&ambient) {
            return Err(Error::config(format!(
                "ambient {ambient} outside [0.1, 1]; the light field must stay in [0.1, 1]"
            )));
        }
        Ok(LightSpec {
            azimuth_deg,
            ambient,
        })
    }

    pub fn at(&self, u: f64, v: f64) -> f64 {
        let a = self.azimuth_deg.to_radians();
        let t = 0.5 + 0.5 * (a.cos() * u + a.sin() * v) / std::f64::consts::SQRT_2;
        self.ambient + (1.0 - self.ambient) * t
    }

    /// `L` sampled at the pixel centers of an `h x w` grid.
    pub fn field(&self, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[h, w], |i| self.at(coord(i % w, w), coord(i / w, h)))
    }
}

/// Pose-projected reflectance: each output pixel reads `R` at the inverse of
/// the pose map. Hidden far-half pixels and points off the head read the
/// background albedo.
pub fn project(template: &IdentityTemplate, pose: &PoseSpec, h: usize, w: usize) -> Tensor {
    let (scale, shift) = pose.affine();
    let c = template.channels;
    let center = template.center_u();
    let far_sign = if pose.yaw_deg > 0.0 { -1.0 } else { 1.0 };
    let mut t = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        let v = coord(y, h);
        for x in 0..w {
            let u = coord(x, w);
            let face_u = if pose.yaw_deg == 0.0 {
                u
            } else {
                center + (u - center - shift) / scale
            };
            let o = (y * w + x) * c;
            let px = &mut t.data_mut()[o..o + c];
            if pose.occludes() && far_sign * (face_u - center) > 0.0 {
                px.fill(BACKGROUND_ALBEDO);
            } else {
                template.reflectance(face_u, v, px);
            }
        }
    }
    t
}

/// `project(R) * L` without clamping. `light` is an `h x w` field.
pub fn render_unclamped(template: &IdentityTemplate, pose: &PoseSpec, light: &Tensor) -> Result<Tensor> {
    let (h, w) = light.dims2()?;
    let mut img = project(template, pose, h, w);
    let c = template.channels;
    for (px, &l) in img.data_mut().chunks_exact_mut(c).zip(light.data()) {
        for v in px {
            *v *= l;
        }
    }
    Ok(img)
}

/// `clamp(project(R) * L, 0, 1)` on an `h x w` grid.
pub fn render(
    template: &IdentityTemplate,
    pose: &PoseSpec,
    light: &LightSpec,
    h: usize,
    w: usize,
) -> Tensor {
    let field = light.field(h, w);
    render_unclamped(template, pose, &field)
        .expect("field is a matrix")
        .map(|v| v.clamp(0.0, 1.0))
}

/// Ordered pose bins; the index into the roster is the pose id.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRoster(pub Vec<PoseSpec>);

impl Default for PoseRoster {
    /// Thirteen yaw bins, -90 to +90 degrees in 15 degree steps.
    fn default() -> Self {
        PoseRoster((-6..=6).map(|k| PoseSpec { yaw_deg: 15.0 * k as f64 }).collect())
    }
}

impl PoseRoster {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn yaw(&self, pose_id: usize) -> Option<f64> {
        self.0.get(pose_id).map(|p| p.yaw_deg)
    }

    /// Pose ids with `|yaw| >= min_abs_yaw`.
    pub fn beyond(&self, min_abs_yaw: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.0[i].yaw_deg.abs() >= min_abs_yaw)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LightRoster(pub Vec<LightSpec>);

impl Default for LightRoster {
    /// Eight ramp directions 45 degrees apart, ambient alternating 0.2 / 0.35.
    fn default() -> Self {
        LightRoster(
            (0..8)
                .map(|k| LightSpec {
                    azimuth_deg: 45.0 * k as f64,
                    ambient: if k % 2 == 0 { 0.2 } else { 0.35 },
                })
                .collect(),
        )
    }
}

impl LightRoster {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_deterministic_and_distinct() {
        let a = IdentityTemplate::new(7, 3, 3);
        assert_eq!(a, IdentityTemplate::new(7, 3, 3));
        assert_ne!(a, IdentityTemplate::new(7, 4, 3));
        assert_ne!(a, IdentityTemplate::new(8, 3, 3));
        let r = a.rasterize(20, 20);
        assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn frontal_unit_light_is_template() {
        let t = IdentityTemplate::new(1, 0, 1);
        let unit = LightSpec::new(0.0, 1.0).unwrap();
        assert!(unit.field(5, 5).data().iter().all(|&l| l == 1.0));
        let img = render(&t, &PoseSpec::new(0.0).unwrap(), &unit, 31, 29);
        assert_eq!(img, t.rasterize(31, 29));
    }

    #[test]
    fn zero_reflectance_stays_dark() {
        let mut t = IdentityTemplate::new(1, 0, 1);
        t.head.albedo = vec![0.0];
        t.hairline = -2.0;
        let img = render(&t, &PoseSpec::new(0.0).unwrap(), &LightSpec::new(30.0, 0.3).unwrap(), 33, 33);
        let r = t.rasterize(33, 33);
        assert!(r.data().iter().filter(|&&v| v == 0.0).count() > 100);
        for (i, &v) in r.data().iter().enumerate() {
            if v == 0.0 {
                assert_eq!(img.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn light_field_bounds() {
        for l in LightRoster::default().0 {
            let f = l.field(40, 40);
            assert!(f.data().iter().all(|&v| (0.1..=1.0).contains(&v)));
        }
        assert!(LightSpec::new(0.0, 0.05).is_err());
        assert!(PoseSpec::new(91.0).is_err());
    }

    #[test]
    fn profile_hides_far_half() {
        let t = IdentityTemplate::new(2, 0, 1);
        let img = project(&t, &PoseSpec::new(90.0).unwrap(), 40, 40);
        let bg = img.data().iter().filter(|&&v| v == BACKGROUND_ALBEDO).count();
        let front = project(&t, &PoseSpec::new(0.0).unwrap(), 40, 40);
        let bg0 = front.data().iter().filter(|&&v| v == BACKGROUND_ALBEDO).count();
        assert!(bg > bg0 + 200, "{bg} vs {bg0}");
        let turned = project(&t, &PoseSpec::new(30.0).unwrap(), 40, 40);
        assert_ne!(turned, front);
        // no occlusion below 45 degrees
        assert!(!PoseSpec::new(45.0).unwrap().occludes());
    }

    #[test]
    fn default_rosters() {
        let p = PoseRoster::default();
        assert_eq!(p.len(), 13);
        assert_eq!(p.yaw(0), Some(-90.0));
        assert_eq!(p.yaw(12), Some(90.0));
        assert_eq!(p.beyond(90.0), vec![0, 12]);
        assert_eq!(LightRoster::default().len(), 8);
    }
}
