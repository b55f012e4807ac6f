//! Declarative synthetic scenes: textured rectangles and axis-aligned boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};

/// Built-in procedural textures evaluated in primitive-local metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Uniform {
        value: f64,
    },
    Checkerboard {
        period: f64,
        low: f64,
        high: f64,
    },
    /// Stripes varying along the local `s` axis only.
    Stripes {
        period: f64,
        low: f64,
        high: f64,
    },
    /// Smooth value noise.
    Noise {
        scale: f64,
        seed: u64,
        low: f64,
        high: f64,
    },
}

impl Texture {
    /// Intensity in `[0, 1]` at local coordinates `(s, t)`.
    pub fn eval(&self, s: f64, t: f64) -> f64 {
        let v = match *self {
            Texture::Uniform { value } => value,
            Texture::Checkerboard { period, low, high } => {
                let a = (s / period).floor() as i64;
                let b = (t / period).floor() as i64;
                if (a + b).rem_euclid(2) == 0 {
                    high
                } else {
                    low
                }
            }
            Texture::Stripes { period, low, high } => {
                if ((s / period).floor() as i64).rem_euclid(2) == 0 {
                    high
                } else {
                    low
                }
            }
            Texture::Noise {
                scale,
                seed,
                low,
                high,
            } => low + (high - low) * value_noise(s / scale, t / scale, seed),
        };
        v.clamp(0.0, 1.0)
    }
}

fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ seed.wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(ix, iy, seed);
    let b = lattice(ix + 1, iy, seed);
    let c = lattice(ix, iy + 1, seed);
    let d = lattice(ix + 1, iy + 1, seed);
    (1.0 - sy) * ((1.0 - sx) * a + sx * b) + sy * ((1.0 - sx) * c + sx * d)
}

/// A finite scene element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    /// Rectangle in the local `z = 0` plane, `|x| ≤ half_width`, `|y| ≤ half_height`.
    Plane {
        pose: Pose,
        half_width: f64,
        half_height: f64,
        texture: Texture,
    },
    /// Axis-aligned box; each face samples the texture in its own 2D coordinates.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        texture: Texture,
    },
}

/// A ray hit: distance along the (unit or not) ray direction and surface intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub intensity: f64,
}

impl Primitive {
    fn validate(&self) -> Result<()> {
        match self {
            Primitive::Plane {
                half_width,
                half_height,
                ..
            } => {
                if !(half_width.is_finite() && half_height.is_finite())
                    || *half_width <= 0.0
                    || *half_height <= 0.0
                {
                    return Err(Error::param("plane extents must be finite and positive"));
                }
            }
            Primitive::Box { min, max, .. } => {
                if (0..3).any(|i| !(min[i].is_finite() && max[i].is_finite()) || min[i] >= max[i]) {
                    return Err(Error::param("box must have finite, positive extent"));
                }
            }
        }
        Ok(())
    }

    /// Intersection with the ray `o + t·d`, `t > 1e-9`.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        match self {
            Primitive::Plane {
                pose,
                half_width,
                half_height,
                texture,
            } => {
                let lo = pose.inverse_transform_point(o);
                let ld = pose.rotation.inverse() * d;
                if ld.z.abs() < 1e-15 {
                    return None;
                }
                let t = -lo.z / ld.z;
                if t <= 1e-9 {
                    return None;
                }
                let p = lo + ld * t;
                if p.x.abs() > *half_width || p.y.abs() > *half_height {
                    return None;
                }
                Some(Hit {
                    t,
                    intensity: texture.eval(p.x + half_width, p.y + half_height),
                })
            }
            Primitive::Box { min, max, texture } => {
                let mut best: Option<Hit> = None;
                for axis in 0..3 {
                    if d[axis].abs() < 1e-15 {
                        continue;
                    }
                    for &bound in &[min[axis], max[axis]] {
                        let t = (bound - o[axis]) / d[axis];
                        if t <= 1e-9 || best.is_some_and(|b| b.t <= t) {
                            continue;
                        }
                        let p = o + d * t;
                        let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
                        let inside = |a: usize| p[a] >= min[a] && p[a] <= max[a];
                        if inside(a1) && inside(a2) {
                            best = Some(Hit {
                                t,
                                intensity: texture.eval(p[a1] - min[a1], p[a2] - min[a2]),
                            });
                        }
                    }
                }
                best
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneModel {
    pub primitives: Vec<Primitive>,
}

impl SceneModel {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let scene = Self { primitives };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        self.primitives.iter().try_for_each(|p| p.validate())
    }

    /// Nearest hit along the ray.
    pub fn cast(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for p in &self.primitives {
            if let Some(h) = p.intersect(o, d) {
                if best.is_none_or(|b| h.t < b.t) {
                    best = Some(h);
                }
            }
        }
        best
    }

    /// Axis-aligned bounds of all primitives.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.primitives {
            let corners: Vec<Vec3> = match p {
                Primitive::Plane {
                    pose,
                    half_width,
                    half_height,
                    ..
                } => [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
                    .iter()
                    .map(|(a, b)| pose.transform_point(&Vec3::new(a * half_width, b * half_height, 0.0)))
                    .collect(),
                Primitive::Box { min, max, .. } => vec![Vec3::from(*min), Vec3::from(*max)],
            };
            for c in corners {
                for i in 0..3 {
                    lo[i] = lo[i].min(c[i]);
                    hi[i] = hi[i].max(c[i]);
                }
            }
        }
        (lo[0] <= hi[0]).then_some((lo, hi))
    }

    /// Parses the declarative TOML scene description.
    pub fn from_toml(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            #[serde(default)]
            primitive: Vec<PrimitiveDoc>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct PrimitiveDoc {
            #[serde(rename = "type")]
            kind: String,
            #[serde(default)]
            position: Option<[f64; 3]>,
            /// Rotation vector (axis · angle, radians).
            #[serde(default)]
            rotation: Option<[f64; 3]>,
            #[serde(default)]
            size: Option<[f64; 2]>,
            #[serde(default)]
            min: Option<[f64; 3]>,
            #[serde(default)]
            max: Option<[f64; 3]>,
            texture: String,
            #[serde(default)]
            period: Option<f64>,
            #[serde(default)]
            value: Option<f64>,
            #[serde(default)]
            low: Option<f64>,
            #[serde(default)]
            high: Option<f64>,
            #[serde(default)]
            seed: Option<u64>,
        }
        let doc: Doc = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut prims = Vec::new();
        for p in doc.primitive {
            let low = p.low.unwrap_or(0.2);
            let high = p.high.unwrap_or(0.8);
            let period = p.period.unwrap_or(0.1);
            let texture = match p.texture.as_str() {
                "uniform" => Texture::Uniform {
                    value: p.value.unwrap_or(0.5),
                },
                "checkerboard" => Texture::Checkerboard { period, low, high },
                "stripes" => Texture::Stripes { period, low, high },
                "noise" => Texture::Noise {
                    scale: period,
                    seed: p.seed.unwrap_or(0),
                    low,
                    high,
                },
                other => return Err(Error::Config(format!("unknown texture '{other}'"))),
            };
            let prim = match p.kind.as_str() {
                "plane" => {
                    let size = p
                        .size
                        .ok_or_else(|| Error::Config("plane requires size".into()))?;
                    let pose = Pose::new(
                        crate::geometry::so3_exp(&Vec3::from(p.rotation.unwrap_or([0.0; 3]))),
                        Vec3::from(p.position.unwrap_or([0.0; 3])),
                    );
                    Primitive::Plane {
                        pose,
                        half_width: size[0] / 2.0,
                        half_height: size[1] / 2.0,
                        texture,
                    }
                }
                "box" => Primitive::Box {
                    min: p.min.ok_or_else(|| Error::Config("box requires min".into()))?,
                    max: p.max.ok_or_else(|| Error::Config("box requires max".into()))?,
                    texture,
                },
                other => return Err(Error::Config(format!("unknown primitive '{other}'"))),
            };
            prims.push(prim);
        }
        Self::new(prims)
    }
}

/// A fronto-parallel rectangle facing a camera at the origin looking along +z.
pub fn fronto_parallel_plane(depth: f64, half_extent: f64, texture: Texture) -> Primitive {
    Primitive::Plane {
        pose: Pose::from_translation(Vec3::new(0.0, 0.0, depth)),
        half_width: half_extent,
        half_height: half_extent,
        texture,
    }
}

/// Checkerboard wall at world `x = depth`, seen by a rig at the origin facing +x.
pub fn textured_wall(depth: f64, half_extent: f64, period: f64) -> SceneModel {
    use crate::geometry::so3_exp;
    SceneModel {
        primitives: vec![Primitive::Plane {
            pose: Pose::new(so3_exp(&Vec3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0)), Vec3::new(depth, 0.0, 0.0)),
            half_width: half_extent,
            half_height: half_extent,
            texture: Texture::Checkerboard {
                period,
                low: 0.15,
                high: 0.85,
            },
        }],
    }
}

/// Room of textured walls in a z-up world; the rig starts looking along +x.
///
/// With `low_texture_wall` the right (−y) wall carries vertical stripes, which
/// trigger events but offer no corners.
pub fn checkerboard_room(low_texture_wall: bool) -> SceneModel {
    use crate::geometry::so3_exp;
    let board = |period: f64| Texture::Checkerboard {
        period,
        low: 0.15,
        high: 0.85,
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    // local z → world x
    let facing_x = so3_exp(&Vec3::new(0.0, half_pi, 0.0));
    // local z → world −y, local y → world z
    let facing_y = so3_exp(&Vec3::new(half_pi, 0.0, 0.0));
    let right_texture = if low_texture_wall {
        Texture::Stripes {
            period: 0.3,
            low: 0.25,
            high: 0.75,
        }
    } else {
        board(0.22)
    };
    let prims = vec![
        Primitive::Plane {
            pose: Pose::new(facing_x, Vec3::new(2.5, 0.0, 0.4)),
            half_width: 1.6,
            half_height: 3.0,
            texture: board(0.25),
        },
        // floor
        Primitive::Plane {
            pose: Pose::from_translation(Vec3::new(0.5, 0.0, -1.2)),
            half_width: 2.5,
            half_height: 3.0,
            texture: board(0.3),
        },
        // ceiling
        Primitive::Plane {
            pose: Pose::from_translation(Vec3::new(0.5, 0.0, 2.0)),
            half_width: 2.5,
            half_height: 3.0,
            texture: Texture::Noise {
                scale: 0.2,
                seed: 7,
                low: 0.2,
                high: 0.8,
            },
        },
        // left wall (+y)
        Primitive::Plane {
            pose: Pose::new(facing_y, Vec3::new(0.5, 2.2, 0.4)),
            half_width: 2.5,
            half_height: 1.6,
            texture: board(0.22),
        },
        // right wall (−y)
        Primitive::Plane {
            pose: Pose::new(facing_y, Vec3::new(0.5, -2.2, 0.4)),
            half_width: 2.5,
            half_height: 1.6,
            texture: right_texture,
        },
    ];
    SceneModel { primitives: prims }
}
