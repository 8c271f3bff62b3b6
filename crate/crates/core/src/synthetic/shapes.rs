use nalgebra::{Point3, Rotation3, Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shapes must stay inside this half-width for every time in `[0, 1]`.
pub const SHAPE_HALF: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Primitive {
    Sphere {
        center: Point3<f64>,
        radius: f64,
    },
    Capsule {
        a: Point3<f64>,
        b: Point3<f64>,
        radius: f64,
    },
}

impl Primitive {
    pub(crate) fn sdf(&self, p: &Point3<f64>) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Capsule { a, b, radius } => {
                let ab = b - a;
                let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (p - (a + ab * t)).norm() - radius
            }
        }
    }

    pub(crate) fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Primitive::Capsule { a, b, radius } => {
                4.0 * PI * radius * radius + 2.0 * PI * radius * (b - a).norm()
            }
        }
    }

    pub(crate) fn volume(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Primitive::Sphere { radius, .. } => 4.0 / 3.0 * PI * radius.powi(3),
            Primitive::Capsule { a, b, radius } => {
                4.0 / 3.0 * PI * radius.powi(3) + PI * radius * radius * (b - a).norm()
            }
        }
    }

    /// Uniform point on the primitive's own surface with its outward normal.
    pub(crate) fn sample_surface<R: Rng>(&self, rng: &mut R) -> (Point3<f64>, Vector3<f64>) {
        match *self {
            Primitive::Sphere { center, radius } => {
                let n = unit_vector(rng);
                (center + n * radius, n)
            }
            Primitive::Capsule { a, b, radius } => {
                let axis = b - a;
                let len = axis.norm();
                let u = axis / len;
                let cyl = 2.0 * std::f64::consts::PI * radius * len;
                if rng.gen::<f64>() * self.area() < cyl {
                    let (e1, e2) = orthonormal_pair(&u);
                    let phi = rng.gen::<f64>() * std::f64::consts::TAU;
                    let n = e1 * phi.cos() + e2 * phi.sin();
                    (a + axis * rng.gen::<f64>() + n * radius, n)
                } else {
                    let n = unit_vector(rng);
                    let end = if n.dot(&u) >= 0.0 { b } else { a };
                    (end + n * radius, n)
                }
            }
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let (lo, hi, r) = match *self {
            Primitive::Sphere { center, radius } => (center, center, radius),
            Primitive::Capsule { a, b, radius } => (a.inf(&b), a.sup(&b), radius),
        };
        (
            [lo.x - r, lo.y - r, lo.z - r],
            [hi.x + r, hi.y + r, hi.z + r],
        )
    }

    fn transformed(&self, m: &Similarity) -> Primitive {
        match *self {
            Primitive::Sphere { center, radius } => Primitive::Sphere {
                center: m.apply(&center),
                radius: radius * m.scale,
            },
            Primitive::Capsule { a, b, radius } => Primitive::Capsule {
                a: m.apply(&a),
                b: m.apply(&b),
                radius: radius * m.scale,
            },
        }
    }
}

fn unit_vector<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn orthonormal_pair(u: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if u.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let e1 = u.cross(&helper).normalize();
    (e1, u.cross(&e1))
}

/// `x -> scale * R (x - pivot) + pivot + translation`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Similarity {
    pub scale: f64,
    pub rotation: Rotation3<f64>,
    pub pivot: Point3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Point3<f64>) -> Point3<f64> {
        self.pivot + self.rotation * (x - self.pivot) * self.scale + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse_apply(&self, p: &Point3<f64>) -> Point3<f64> {
        self.pivot + self.rotation.inverse() * (p - self.pivot - self.translation) / self.scale
    }
}

/// A rigid (or uniformly scaling) piece of a shape.
#[derive(Debug, Clone)]
pub(crate) struct Part {
    pub primitives: Vec<Primitive>,
    motion: Motion,
}

#[derive(Debug, Clone, Copy)]
enum Motion {
    Translate {
        velocity: Vector3<f64>,
    },
    Breathe {
        pivot: Point3<f64>,
        amplitude: f64,
        frequency: f64,
    },
    Rotate {
        axis: Unit<Vector3<f64>>,
        angle: f64,
        pivot: Point3<f64>,
        drift: Vector3<f64>,
    },
}

impl Part {
    pub fn transform(&self, t: f64) -> Similarity {
        match self.motion {
            Motion::Translate { velocity } => Similarity {
                scale: 1.0,
                rotation: Rotation3::identity(),
                pivot: Point3::origin(),
                translation: velocity * t,
            },
            Motion::Breathe {
                pivot,
                amplitude,
                frequency,
            } => Similarity {
                scale: breathing_scale(amplitude, frequency, t),
                rotation: Rotation3::identity(),
                pivot,
                translation: Vector3::zeros(),
            },
            Motion::Rotate {
                axis,
                angle,
                pivot,
                drift,
            } => Similarity {
                scale: 1.0,
                rotation: Rotation3::from_axis_angle(&axis, angle * t),
                pivot,
                translation: drift * t,
            },
        }
    }

    /// Signed distance to the part at time `t` (exact for rigid motion,
    /// scaled accordingly for uniform scaling).
    pub fn sdf_at(&self, p: &Point3<f64>, t: f64) -> f64 {
        let m = self.transform(t);
        let x = m.inverse_apply(p);
        self.rest_sdf(&x) * m.scale
    }

    pub fn rest_sdf(&self, x: &Point3<f64>) -> f64 {
        self.primitives
            .iter()
            .map(|q| q.sdf(x))
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn breathing_scale(amplitude: f64, frequency: f64, t: f64) -> f64 {
    1.0 + amplitude * (std::f64::consts::TAU * frequency * t).sin()
}

/// Analytic deforming shape families. Coordinates are rest-pose positions;
/// motion parameters are expressed over unit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    TranslatingSphere {
        radius: f64,
        start: [f64; 3],
        velocity: [f64; 3],
    },
    BreathingSphere {
        radius: f64,
        center: [f64; 3],
        amplitude: f64,
        frequency: f64,
    },
    /// Capsule bar with a ball on each end, rotating rigidly.
    TwoLobeCapsule {
        half_length: f64,
        bar_radius: f64,
        lobe_radius: f64,
        axis: [f64; 3],
        angle: f64,
    },
    /// A ball that only drifts and a separate bar that swings about the
    /// origin while drifting with it.
    ArticulatedDumbbell {
        lobe_center: [f64; 3],
        lobe_radius: f64,
        bar_start: [f64; 3],
        bar_end: [f64; 3],
        bar_radius: f64,
        swing_axis: [f64; 3],
        swing_angle: f64,
        drift: [f64; 3],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    TranslatingSphere,
    BreathingSphere,
    TwoLobeCapsule,
    ArticulatedDumbbell,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [
        ShapeFamily::TranslatingSphere,
        ShapeFamily::BreathingSphere,
        ShapeFamily::TwoLobeCapsule,
        ShapeFamily::ArticulatedDumbbell,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::TranslatingSphere => "translating_sphere",
            ShapeFamily::BreathingSphere => "breathing_sphere",
            ShapeFamily::TwoLobeCapsule => "two_lobe_capsule",
            ShapeFamily::ArticulatedDumbbell => "articulated_dumbbell",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ShapeFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape `{s}`")))
    }

    pub fn default_kind(&self) -> ShapeKind {
        match self {
            ShapeFamily::TranslatingSphere => ShapeKind::TranslatingSphere {
                radius: 0.2,
                start: [-0.15, 0.0, 0.0],
                velocity: [0.3, 0.0, 0.0],
            },
            ShapeFamily::BreathingSphere => ShapeKind::BreathingSphere {
                radius: 0.25,
                center: [0.0, 0.0, 0.0],
                amplitude: 0.2,
                frequency: 0.25,
            },
            ShapeFamily::TwoLobeCapsule => ShapeKind::TwoLobeCapsule {
                half_length: 0.2,
                bar_radius: 0.08,
                lobe_radius: 0.14,
                axis: [0.0, 0.0, 1.0],
                angle: std::f64::consts::FRAC_PI_4,
            },
            ShapeFamily::ArticulatedDumbbell => ShapeKind::ArticulatedDumbbell {
                lobe_center: [-0.2, 0.0, 0.0],
                lobe_radius: 0.14,
                bar_start: [0.06, 0.0, 0.0],
                bar_end: [0.3, 0.0, 0.0],
                bar_radius: 0.085,
                swing_axis: [0.0, 0.0, 1.0],
                swing_angle: 0.6,
                drift: [0.0, 0.08, 0.0],
            },
        }
    }
}

/// A deforming shape sampled at `frames` time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformingShape {
    #[serde(flatten)]
    pub kind: ShapeKind,
    pub frames: usize,
}

fn p3(a: [f64; 3]) -> Point3<f64> {
    Point3::new(a[0], a[1], a[2])
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl DeformingShape {
    pub fn new(kind: ShapeKind, frames: usize) -> Result<Self> {
        let shape = DeformingShape { kind, frames };
        shape.validate()?;
        Ok(shape)
    }

    pub fn default_of(family: ShapeFamily, frames: usize) -> Result<Self> {
        DeformingShape::new(family.default_kind(), frames)
    }

    /// Family defaults with sizes and motion amplitudes jittered by up to ±20%.
    pub fn randomized<R: Rng>(family: ShapeFamily, frames: usize, rng: &mut R) -> Result<Self> {
        let mut j = || rng.gen_range(0.8..1.2);
        let kind = match family.default_kind() {
            ShapeKind::TranslatingSphere {
                radius,
                start,
                velocity,
            } => ShapeKind::TranslatingSphere {
                radius: radius * j(),
                start,
                velocity: velocity.map(|v| v * j()),
            },
            ShapeKind::BreathingSphere {
                radius,
                center,
                amplitude,
                frequency,
            } => ShapeKind::BreathingSphere {
                radius: radius * j(),
                center,
                amplitude: amplitude * j(),
                frequency,
            },
            ShapeKind::TwoLobeCapsule {
                half_length,
                bar_radius,
                lobe_radius,
                axis,
                angle,
            } => ShapeKind::TwoLobeCapsule {
                half_length: half_length * j(),
                bar_radius,
                lobe_radius,
                axis,
                angle: angle * j(),
            },
            ShapeKind::ArticulatedDumbbell {
                lobe_center,
                lobe_radius,
                bar_start,
                bar_end,
                bar_radius,
                swing_axis,
                swing_angle,
                drift,
            } => ShapeKind::ArticulatedDumbbell {
                lobe_center,
                lobe_radius,
                bar_start,
                bar_end,
                bar_radius,
                swing_axis,
                swing_angle: swing_angle * j(),
                drift: drift.map(|v| v * j()),
            },
        };
        DeformingShape::new(kind, frames)
    }

    pub fn family(&self) -> ShapeFamily {
        match self.kind {
            ShapeKind::TranslatingSphere { .. } => ShapeFamily::TranslatingSphere,
            ShapeKind::BreathingSphere { .. } => ShapeFamily::BreathingSphere,
            ShapeKind::TwoLobeCapsule { .. } => ShapeFamily::TwoLobeCapsule,
            ShapeKind::ArticulatedDumbbell { .. } => ShapeFamily::ArticulatedDumbbell,
        }
    }

    pub(crate) fn parts(&self) -> Vec<Part> {
        match self.kind {
            ShapeKind::TranslatingSphere {
                radius,
                start,
                velocity,
            } => vec![Part {
                primitives: vec![Primitive::Sphere {
                    center: p3(start),
                    radius,
                }],
                motion: Motion::Translate {
                    velocity: v3(velocity),
                },
            }],
            ShapeKind::BreathingSphere {
                radius,
                center,
                amplitude,
                frequency,
            } => vec![Part {
                primitives: vec![Primitive::Sphere {
                    center: p3(center),
                    radius,
                }],
                motion: Motion::Breathe {
                    pivot: p3(center),
                    amplitude,
                    frequency,
                },
            }],
            ShapeKind::TwoLobeCapsule {
                half_length,
                bar_radius,
                lobe_radius,
                axis,
                angle,
            } => {
                let a = Point3::new(-half_length, 0.0, 0.0);
                let b = Point3::new(half_length, 0.0, 0.0);
                vec![Part {
                    primitives: vec![
                        Primitive::Capsule {
                            a,
                            b,
                            radius: bar_radius,
                        },
                        Primitive::Sphere {
                            center: a,
                            radius: lobe_radius,
                        },
                        Primitive::Sphere {
                            center: b,
                            radius: lobe_radius,
                        },
                    ],
                    motion: Motion::Rotate {
                        axis: Unit::new_normalize(v3(axis)),
                        angle,
                        pivot: Point3::origin(),
                        drift: Vector3::zeros(),
                    },
                }]
            }
            ShapeKind::ArticulatedDumbbell {
                lobe_center,
                lobe_radius,
                bar_start,
                bar_end,
                bar_radius,
                swing_axis,
                swing_angle,
                drift,
            } => vec![
                Part {
                    primitives: vec![Primitive::Sphere {
                        center: p3(lobe_center),
                        radius: lobe_radius,
                    }],
                    motion: Motion::Translate {
                        velocity: v3(drift),
                    },
                },
                Part {
                    primitives: vec![Primitive::Capsule {
                        a: p3(bar_start),
                        b: p3(bar_end),
                        radius: bar_radius,
                    }],
                    motion: Motion::Rotate {
                        axis: Unit::new_normalize(v3(swing_axis)),
                        angle: swing_angle,
                        pivot: Point3::origin(),
                        drift: v3(drift),
                    },
                },
            ],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::InvalidArgument(
                "a sequence needs at least 2 frames".into(),
            ));
        }
        let parts = self.parts();
        for part in &parts {
            for q in &part.primitives {
                let r = match q {
                    Primitive::Sphere { radius, .. } | Primitive::Capsule { radius, .. } => *radius,
                };
                if !(r > 0.0 && r.is_finite()) {
                    return Err(Error::InvalidArgument("radii must be positive".into()));
                }
            }
        }
        if let ShapeKind::BreathingSphere { amplitude, .. } = self.kind {
            if !(0.0..1.0).contains(&amplitude) {
                return Err(Error::InvalidArgument(
                    "breathing amplitude must be in [0, 1)".into(),
                ));
            }
        }
        // dense time sweep; every motion here is smooth and slow over [0, 1]
        for k in 0..=400 {
            let t = k as f64 / 400.0;
            for part in &parts {
                let m = part.transform(t);
                for q in &part.primitives {
                    let (lo, hi) = q.transformed(&m).bounds();
                    if lo.iter().chain(&hi).any(|c| c.abs() > SHAPE_HALF) {
                        return Err(Error::ShapeOutOfBounds);
                    }
                }
            }
            if parts.len() > 1 && self.parts_overlap(&parts, t) {
                return Err(Error::InvalidArgument("shape parts collide".into()));
            }
        }
        Ok(())
    }

    fn parts_overlap(&self, parts: &[Part], t: f64) -> bool {
        // parts are spheres or capsules; sample the second part's axis densely
        let placed: Vec<Vec<Primitive>> = parts
            .iter()
            .map(|p| {
                let m = p.transform(t);
                p.primitives.iter().map(|q| q.transformed(&m)).collect()
            })
            .collect();
        for (i, a) in placed.iter().enumerate() {
            for b in &placed[i + 1..] {
                for qa in a {
                    for qb in b {
                        if primitives_overlap(qa, qb) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Exact occupancy indicator at `(p, t)`.
    pub fn inside(&self, p: &Point3<f64>, t: f64) -> bool {
        self.sdf(p, t) <= 0.0
    }

    /// Signed distance (negative inside) at time `t`.
    pub fn sdf(&self, p: &Point3<f64>, t: f64) -> f64 {
        self.parts()
            .iter()
            .map(|part| part.sdf_at(p, t))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn volume(&self, t: f64) -> f64 {
        // primitives within one part overlap, so integrate those numerically
        let parts = self.parts();
        parts
            .iter()
            .map(|part| {
                let s = part.transform(t).scale;
                let rest = if part.primitives.len() == 1 {
                    part.primitives[0].volume()
                } else {
                    union_volume(part)
                };
                rest * s.powi(3)
            })
            .sum()
    }

    /// Time of frame `k` under even sampling.
    pub fn even_time(&self, k: usize) -> f64 {
        k as f64 / (self.frames - 1) as f64
    }
}

fn primitives_overlap(a: &Primitive, b: &Primitive) -> bool {
    // conservative: compare distance between the cores with the radius sum
    let (core_a, ra) = core(a);
    let (core_b, rb) = core(b);
    segment_distance(core_a, core_b) < ra + rb
}

fn core(q: &Primitive) -> ((Point3<f64>, Point3<f64>), f64) {
    match *q {
        Primitive::Sphere { center, radius } => ((center, center), radius),
        Primitive::Capsule { a, b, radius } => ((a, b), radius),
    }
}

fn segment_distance(s: (Point3<f64>, Point3<f64>), u: (Point3<f64>, Point3<f64>)) -> f64 {
    // brute-force minimization over a fine parameter grid is plenty here
    let n = 64;
    let mut best = f64::INFINITY;
    for i in 0..=n {
        let p = s.0 + (s.1 - s.0) * (i as f64 / n as f64);
        let d = u.1 - u.0;
        let t = if d.norm_squared() > 0.0 {
            ((p - u.0).dot(&d) / d.norm_squared()).clamp(0.0, 1.0)
        } else {
            0.0
        };
        best = best.min((p - (u.0 + d * t)).norm());
    }
    best
}

fn union_volume(part: &Part) -> f64 {
    // midpoint-rule integration on a 160^3 grid over the part's bounding box
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for q in &part.primitives {
        let (l, h) = q.bounds();
        for a in 0..3 {
            lo[a] = lo[a].min(l[a]);
            hi[a] = hi[a].max(h[a]);
        }
    }
    let n = 160;
    let step: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a]) / n as f64).collect();
    let mut count = 0usize;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let p = Point3::new(
                    lo[0] + (i as f64 + 0.5) * step[0],
                    lo[1] + (j as f64 + 0.5) * step[1],
                    lo[2] + (k as f64 + 0.5) * step[2],
                );
                if part.rest_sdf(&p) <= 0.0 {
                    count += 1;
                }
            }
        }
    }
    count as f64 * step[0] * step[1] * step[2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn defaults_are_valid() {
        for f in ShapeFamily::ALL {
            let s = DeformingShape::default_of(f, 8).unwrap();
            assert_eq!(s.family(), f);
            assert_eq!(ShapeFamily::parse(f.name()).unwrap(), f);
            for k in 0..8 {
                assert!(!s.inside(&Point3::new(0.5, 0.5, 0.5), s.even_time(k)));
            }
        }
    }

    #[test]
    fn randomized_shapes_stay_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for f in ShapeFamily::ALL {
            for _ in 0..5 {
                DeformingShape::randomized(f, 8, &mut rng).unwrap();
            }
        }
    }

    #[test]
    fn out_of_bounds_is_rejected() {
        let kind = ShapeKind::TranslatingSphere {
            radius: 0.2,
            start: [0.0; 3],
            velocity: [0.5, 0.0, 0.0],
        };
        assert!(matches!(
            DeformingShape::new(kind, 4),
            Err(Error::ShapeOutOfBounds)
        ));
    }

    #[test]
    fn serde_round_trip() {
        let s = DeformingShape::default_of(ShapeFamily::ArticulatedDumbbell, 8).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"kind\":\"articulated_dumbbell\""));
        let back: DeformingShape = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn capsule_samples_lie_on_surface() {
        let q = Primitive::Capsule {
            a: Point3::new(-0.1, 0.0, 0.0),
            b: Point3::new(0.2, 0.1, 0.0),
            radius: 0.05,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let (p, n) = q.sample_surface(&mut rng);
            assert!(q.sdf(&p).abs() < 1e-12);
            assert!(q.sdf(&(p + n * 1e-3)) > 0.0);
        }
    }
}
