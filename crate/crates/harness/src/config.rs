//! JSON scene description and its conversion into a simulation scene.

use std::path::Path;

use dabd_core::balance::BalancerParams;
use dabd_core::body::{placed_dof, regular_polygon, AffineBody, BodyId, Dof, SimParams, Vec2};
use dabd_core::consensus::{AdaptParams, Plane};
use dabd_core::scene::{AdmmParams, ReplicaBias, Scene};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum Shape {
    /// Convex loops in body-local coordinates, counter-clockwise.
    Loops(Vec<Vec<[f64; 2]>>),
    Regular {
        sides: usize,
        radius: f64,
        phase: f64,
    },
    Rect {
        width: f64,
        height: f64,
    },
}

impl Shape {
    pub fn loops(&self) -> Vec<Vec<Vec2>> {
        match self {
            Shape::Loops(ls) => ls
                .iter()
                .map(|l| l.iter().map(|p| Vec2::new(p[0], p[1])).collect())
                .collect(),
            Shape::Regular {
                sides,
                radius,
                phase,
            } => vec![regular_polygon(*sides, *radius, *phase)],
            Shape::Rect { width, height } => {
                let (x, y) = (0.5 * width, 0.5 * height);
                vec![vec![
                    Vec2::new(-x, -y),
                    Vec2::new(x, -y),
                    Vec2::new(x, y),
                    Vec2::new(-x, y),
                ]]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum Placement {
    At {
        position: [f64; 2],
        #[serde(default)]
        angle: f64,
    },
    /// Row-major grid; each copy is displaced by uniform jitter in
    /// `[-jitter, jitter]` per axis and rotated by a uniform angle in
    /// `[-spin, spin]`.
    Grid {
        origin: [f64; 2],
        cols: usize,
        rows: usize,
        spacing: [f64; 2],
        #[serde(default)]
        jitter: f64,
        #[serde(default)]
        spin: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySpec {
    /// Shapes cycled over the placements.
    pub shapes: Vec<Shape>,
    pub density: f64,
    #[serde(default, rename = "static")]
    pub is_static: bool,
    pub placement: Placement,
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default)]
    pub kappa_arap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub h: f64,
    pub gravity: [f64; 2],
    pub kappa_arap: f64,
    pub kappa_barrier: f64,
    pub d_hat: f64,
    pub theta: f64,
    pub scene_scale: f64,
    pub newton_max_iters: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        let p = SimParams::default();
        Self {
            h: p.h,
            gravity: [p.gravity.x, p.gravity.y],
            kappa_arap: p.kappa_arap,
            kappa_barrier: p.kappa_barrier,
            d_hat: p.d_hat,
            theta: p.theta,
            scene_scale: p.scene_scale,
            newton_max_iters: p.newton_max_iters,
        }
    }
}

impl SimConfig {
    pub fn params(&self) -> SimParams {
        SimParams {
            h: self.h,
            gravity: Vec2::new(self.gravity[0], self.gravity[1]),
            kappa_arap: self.kappa_arap,
            kappa_barrier: self.kappa_barrier,
            d_hat: self.d_hat,
            theta: self.theta,
            scene_scale: self.scene_scale,
            newton_max_iters: self.newton_max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub beta: f64,
    pub tau: f64,
    pub mu: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub adaptive: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        let a = AdaptParams::default();
        Self {
            beta: a.beta,
            tau: a.tau,
            mu: a.mu,
            sigma_min: a.sigma_min,
            sigma_max: a.sigma_max,
            adaptive: a.adaptive,
        }
    }
}

impl AdaptConfig {
    pub fn params(&self) -> AdaptParams {
        AdaptParams {
            beta: self.beta,
            tau: self.tau,
            mu: self.mu,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            adaptive: self.adaptive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneConfig {
    pub point: [f64; 2],
    pub normal: [f64; 2],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    /// Interface planes, ordered along the shared normal; `N − 1` for `N` workers.
    pub planes: Vec<PlaneConfig>,
    #[serde(default)]
    pub w_min: Option<f64>,
}

impl PartitionConfig {
    /// Vertical planes splitting `[x_lo, x_hi]` into `n` equal slabs.
    pub fn slabs(n: usize, x_lo: f64, x_hi: f64, w_min: Option<f64>) -> Self {
        let planes = (1..n)
            .map(|i| PlaneConfig {
                point: [x_lo + (x_hi - x_lo) * i as f64 / n as f64, 0.0],
                normal: [1.0, 0.0],
            })
            .collect();
        Self { planes, w_min }
    }

    pub fn planes(&self) -> Vec<Plane> {
        self.planes
            .iter()
            .map(|p| Plane {
                point: Vec2::new(p.point[0], p.point[1]),
                normal: Vec2::new(p.normal[0], p.normal[1]),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalancerConfig {
    pub enabled: bool,
    pub kp: f64,
    pub kd: f64,
    pub smoothing: f64,
}

impl BalancerConfig {
    pub fn for_region_width(width: f64) -> Self {
        let p = BalancerParams::for_region_width(width);
        Self {
            enabled: true,
            kp: p.kp,
            kd: p.kd,
            smoothing: p.smoothing,
        }
    }

    pub fn params(&self) -> Option<BalancerParams> {
        self.enabled.then_some(BalancerParams {
            kp: self.kp,
            kd: self.kd,
            smoothing: self.smoothing,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasConfig {
    /// Index into the generated body list.
    pub body: u32,
    pub force: [f64; 2],
    pub until_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub name: String,
    pub seed: u64,
    pub frames: usize,
    pub sim: SimConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    pub admm_max_iters: usize,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub balancer: Option<BalancerConfig>,
    pub bodies: Vec<BodySpec>,
    #[serde(default)]
    pub replica_bias: Vec<BiasConfig>,
}

impl SceneConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene config serializes")
    }

    pub fn workers(&self) -> usize {
        self.partition.planes.len() + 1
    }

    /// Instantiates every body; ids follow generation order.
    pub fn build_bodies(&self) -> Result<Vec<AffineBody>> {
        let mut rng = rand::rngs::StdRng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        for spec in &self.bodies {
            if spec.shapes.is_empty() {
                return Err(HarnessError::Config("body spec without shapes".into()));
            }
            let poses: Vec<(Vec2, f64)> = match &spec.placement {
                Placement::At { position, angle } => {
                    vec![(Vec2::new(position[0], position[1]), *angle)]
                }
                Placement::Grid {
                    origin,
                    cols,
                    rows,
                    spacing,
                    jitter,
                    spin,
                } => {
                    let mut v = Vec::with_capacity(cols * rows);
                    for r in 0..*rows {
                        for c in 0..*cols {
                            let mut p = Vec2::new(
                                origin[0] + c as f64 * spacing[0],
                                origin[1] + r as f64 * spacing[1],
                            );
                            let mut a = 0.0;
                            if *jitter > 0.0 {
                                p += Vec2::new(
                                    rng.gen_range(-jitter..=*jitter),
                                    rng.gen_range(-jitter..=*jitter),
                                );
                            }
                            if *spin > 0.0 {
                                a = rng.gen_range(-spin..=*spin);
                            }
                            v.push((p, a));
                        }
                    }
                    v
                }
            };
            for (i, (p, angle)) in poses.into_iter().enumerate() {
                let shape = &spec.shapes[i % spec.shapes.len()];
                let pose = placed_dof(p, angle);
                let world: Vec<Vec<Vec2>> = shape
                    .loops()
                    .iter()
                    .map(|l| {
                        l.iter()
                            .map(|x| dabd_core::body::world_point(&pose, x))
                            .collect()
                    })
                    .collect();
                let mut b = AffineBody::from_world(
                    BodyId(out.len() as u32),
                    world,
                    spec.density,
                    spec.is_static,
                )?;
                if !spec.is_static {
                    b.q_dot = Dof::new(spec.velocity[0], spec.velocity[1], 0.0, 0.0, 0.0, 0.0);
                }
                b.arap_stiffness = spec.kappa_arap;
                out.push(b);
            }
        }
        Ok(out)
    }

    pub fn build(&self) -> Result<Scene> {
        let bodies = self.build_bodies()?;
        let mut scene = Scene::new(bodies, self.sim.params());
        scene.adapt = self.adapt.params();
        scene.admm = AdmmParams {
            max_iters: self.admm_max_iters,
        };
        scene.planes = self.partition.planes();
        scene.w_min = self.partition.w_min;
        scene.replica_bias = self
            .replica_bias
            .iter()
            .map(|b| ReplicaBias {
                body: BodyId(b.body),
                force: Vec2::new(b.force[0], b.force[1]),
                until_frame: b.until_frame,
            })
            .collect();
        for rb in &scene.replica_bias {
            if scene.index_of(rb.body).is_none() {
                return Err(HarnessError::Config(format!(
                    "bias names missing body {}",
                    rb.body.0
                )));
            }
        }
        scene.validate()?;
        Ok(scene)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SceneConfig {
        SceneConfig {
            name: "t".into(),
            seed: 3,
            frames: 10,
            sim: SimConfig::default(),
            adapt: AdaptConfig::default(),
            admm_max_iters: 50,
            partition: PartitionConfig::slabs(2, -1.0, 1.0, Some(0.2)),
            balancer: Some(BalancerConfig::for_region_width(1.0)),
            bodies: vec![
                BodySpec {
                    shapes: vec![Shape::Rect {
                        width: 4.0,
                        height: 0.2,
                    }],
                    density: 1.0,
                    is_static: true,
                    placement: Placement::At {
                        position: [0.0, -0.1],
                        angle: 0.0,
                    },
                    velocity: [0.0, 0.0],
                    kappa_arap: None,
                },
                BodySpec {
                    shapes: vec![
                        Shape::Regular {
                            sides: 5,
                            radius: 0.1,
                            phase: 0.0,
                        },
                        Shape::Loops(vec![vec![[-0.1, -0.1], [0.1, -0.1], [0.0, 0.1]]]),
                    ],
                    density: 10.0,
                    is_static: false,
                    placement: Placement::Grid {
                        origin: [-0.5, 0.3],
                        cols: 3,
                        rows: 2,
                        spacing: [0.5, 0.4],
                        jitter: 0.02,
                        spin: 0.3,
                    },
                    velocity: [0.0, -1.0],
                    kappa_arap: Some(1e5),
                },
            ],
            replica_bias: vec![BiasConfig {
                body: 2,
                force: [1.0, 0.0],
                until_frame: 1,
            }],
        }
    }

    #[test]
    fn json_round_trips() {
        let c = sample();
        let back = SceneConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&sample().to_json()).unwrap();
        v["sim"]["stiffness"] = serde_json::json!(1.0);
        assert!(SceneConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&sample().to_json()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(SceneConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn builds_bodies_deterministically() {
        let c = sample();
        let a = c.build().unwrap();
        let b = c.build().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.bodies.len(), 7);
        assert!(a.bodies[0].is_static);
        assert_eq!(a.bodies[3].q_dot[1], -1.0);
        assert_eq!(a.bodies[2].arap_stiffness, Some(1e5));
        assert_eq!(a.planes, vec![Plane::vertical(0.0)]);
        let mut other = c.clone();
        other.seed = 4;
        assert_ne!(other.build().unwrap().bodies[1].q, a.bodies[1].q);
    }

    #[test]
    fn slabs_are_even() {
        let p = PartitionConfig::slabs(4, 0.0, 2.0, None).planes();
        let xs: Vec<f64> = p.iter().map(|p| p.point.x).collect();
        assert_eq!(xs, vec![0.5, 1.0, 1.5]);
        assert!(PartitionConfig::slabs(1, 0.0, 1.0, None).planes.is_empty());
    }
}
