//! Named scene generators.

use crate::config::{
    AdaptConfig, BalancerConfig, BiasConfig, BodySpec, PartitionConfig, Placement, PlaneConfig,
    SceneConfig, Shape, SimConfig,
};
use crate::error::{HarnessError, Result};

pub const DENSITY_LEVELS: [f64; 5] = [10.0, 100.0, 1000.0, 1.0e4, 1.0e5];
pub const BETA_LEVELS: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

/// Length scale `l` of the desk-scale scenes.
pub const SCENE_SCALE: f64 = 2.0;

pub const SCENARIO_NAMES: [&str; 5] = [
    "funnel",
    "drop-grid",
    "density-sweep",
    "blocked-merge",
    "heterogeneous",
];

fn base_sim() -> SimConfig {
    SimConfig {
        h: 0.01,
        gravity: [0.0, -9.81],
        kappa_arap: 1.0e8,
        kappa_barrier: 1.0e6,
        d_hat: 1.0e-3,
        theta: 1.0e-3,
        scene_scale: SCENE_SCALE,
        newton_max_iters: 50,
    }
}

fn ccw(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    let area: f64 = (0..pts.len())
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    if area < 0.0 {
        pts.reverse();
    }
    pts
}

fn static_body(loops: Vec<Vec<[f64; 2]>>) -> BodySpec {
    BodySpec {
        shapes: vec![Shape::Loops(loops.into_iter().map(ccw).collect())],
        density: 1000.0,
        is_static: true,
        placement: Placement::At {
            position: [0.0, 0.0],
            angle: 0.0,
        },
        velocity: [0.0, 0.0],
        kappa_arap: None,
    }
}

fn rect_loop(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<[f64; 2]> {
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

/// Mixed convex shapes of circumradius at most `r`.
fn mixed_shapes(r: f64) -> Vec<Shape> {
    vec![
        Shape::Regular {
            sides: 4,
            radius: r,
            phase: std::f64::consts::FRAC_PI_4,
        },
        Shape::Regular {
            sides: 5,
            radius: r,
            phase: 0.3,
        },
        Shape::Regular {
            sides: 6,
            radius: r,
            phase: 0.0,
        },
        Shape::Rect {
            width: 1.6 * r,
            height: 1.0 * r,
        },
        Shape::Regular {
            sides: 3,
            radius: r,
            phase: 0.5,
        },
        Shape::Regular {
            sides: 8,
            radius: r,
            phase: 0.2,
        },
    ]
}

/// V-shaped container with a flat bottom: two slanted walls and a floor,
/// all loops of one static body.
fn v_container(bottom_half: f64, slope: f64, height: f64, thickness: f64) -> BodySpec {
    let top = bottom_half + slope * height;
    let left = vec![
        [-bottom_half, 0.0],
        [-top, height],
        [-top - thickness, height],
        [-bottom_half - thickness, 0.0],
    ];
    let right = left.iter().map(|p| [-p[0], p[1]]).collect();
    let floor = rect_loop(
        -bottom_half - thickness,
        -thickness,
        bottom_half + thickness,
        0.0,
    );
    static_body(vec![left, right, floor])
}

/// 32 mixed convex bodies falling into a static V container split by a
/// plane through its axis.
pub fn funnel(density: f64) -> SceneConfig {
    SceneConfig {
        name: "funnel".into(),
        seed: 7,
        frames: 300,
        sim: base_sim(),
        adapt: AdaptConfig::default(),
        admm_max_iters: 300,
        partition: PartitionConfig {
            planes: vec![PlaneConfig {
                point: [0.0, 0.0],
                normal: [1.0, 0.0],
            }],
            w_min: Some(0.05),
        },
        balancer: None,
        bodies: vec![
            v_container(0.3, 1.06, 2.2, 0.1),
            BodySpec {
                shapes: mixed_shapes(0.11),
                density,
                is_static: false,
                placement: Placement::Grid {
                    origin: [-0.98, 0.9],
                    cols: 8,
                    rows: 4,
                    spacing: [0.28, 0.28],
                    jitter: 0.02,
                    spin: 0.4,
                },
                velocity: [0.0, 0.0],
                kappa_arap: None,
            },
        ],
        replica_bias: Vec::new(),
    }
}

/// `per_slab` flat-faced bodies stacked in columns above each of `n` unit
/// slabs on a shared floor, kept clear of the slab boundaries.
pub fn drop_grid(n: usize, per_slab: usize) -> SceneConfig {
    let n = n.max(1);
    let width = n as f64;
    let cols = 4usize;
    let rows = per_slab.div_ceil(cols).max(1);
    let height = 0.5 + 0.25 * rows as f64;
    let walls = vec![
        rect_loop(-0.1, -0.1, width + 0.1, 0.0),
        rect_loop(-0.1, 0.0, 0.0, height),
        rect_loop(width, 0.0, width + 0.1, height),
    ];
    let mut bodies = vec![static_body(walls)];
    for slab in 0..n {
        bodies.push(BodySpec {
            shapes: vec![
                Shape::Rect {
                    width: 0.16,
                    height: 0.16,
                },
                Shape::Rect {
                    width: 0.17,
                    height: 0.12,
                },
            ],
            density: 1000.0,
            is_static: false,
            placement: Placement::Grid {
                origin: [slab as f64 + 0.2, 0.15],
                cols,
                rows,
                spacing: [0.2, 0.25],
                jitter: 0.01,
                spin: 0.0,
            },
            velocity: [0.0, 0.0],
            kappa_arap: None,
        });
    }
    SceneConfig {
        name: format!("drop-grid-{n}"),
        seed: 11,
        frames: 300,
        sim: base_sim(),
        adapt: AdaptConfig::default(),
        admm_max_iters: 300,
        partition: PartitionConfig::slabs(n, 0.0, width, Some(0.05)),
        balancer: None,
        bodies,
        replica_bias: Vec::new(),
    }
}

/// The funnel at every density level, stiffness and geometry unchanged.
pub fn density_sweep() -> Vec<SceneConfig> {
    DENSITY_LEVELS
        .iter()
        .map(|&rho| {
            let mut c = funnel(rho);
            c.name = format!("density-{rho}");
            c
        })
        .collect()
}

/// A shared square dropped fast onto a static pillar under the interface,
/// with opposite lateral forces on its two replicas during the first frame.
pub fn blocked_merge() -> SceneConfig {
    let pillar = rect_loop(-0.05, 0.0, 0.05, 0.6);
    let floor = rect_loop(-1.5, -0.1, 1.5, 0.0);
    let side = 0.2;
    let mut sim = base_sim();
    sim.h = 0.02;
    sim.kappa_barrier = 1.0e5;
    let density = 100.0;
    let mass = density * side * side;
    // Lateral replica offset of 0.45 after one full step, 0.9 apart.
    let force = 0.45 * mass / (sim.h * sim.h);
    SceneConfig {
        name: "blocked-merge".into(),
        seed: 1,
        frames: 300,
        sim,
        adapt: AdaptConfig::default(),
        admm_max_iters: 100,
        partition: PartitionConfig {
            planes: vec![PlaneConfig {
                point: [0.0, 0.0],
                normal: [1.0, 0.0],
            }],
            w_min: Some(0.1),
        },
        balancer: None,
        bodies: vec![
            static_body(vec![pillar, floor]),
            BodySpec {
                shapes: vec![Shape::Rect {
                    width: side,
                    height: side,
                }],
                density,
                is_static: false,
                placement: Placement::At {
                    position: [0.0, 0.6 + 0.4 + 0.5 * side],
                    angle: 0.0,
                },
                velocity: [0.0, -30.0],
                kappa_arap: None,
            },
        ],
        replica_bias: vec![BiasConfig {
            body: 1,
            force: [-force, 0.0],
            until_frame: 1,
        }],
    }
}

/// Three rows, heaviest at the bottom, with mass and stiffness contrasts of 100x
/// between neighbours, dropped into the funnel.
pub fn heterogeneous() -> SceneConfig {
    let mut c = funnel(1000.0);
    c.name = "heterogeneous".into();
    let groups = [(1.0e5, 1.0e10), (1000.0, 1.0e8), (10.0, 1.0e6)];
    let template = c.bodies.pop().expect("funnel bodies");
    let Placement::Grid {
        origin,
        cols,
        rows,
        spacing,
        jitter,
        spin,
    } = template.placement
    else {
        unreachable!("funnel uses a grid")
    };
    let _ = rows;
    for (r, (density, kappa)) in groups.iter().enumerate() {
        c.bodies.push(BodySpec {
            density: *density,
            kappa_arap: Some(*kappa),
            placement: Placement::Grid {
                origin: [origin[0], origin[1] + r as f64 * spacing[1]],
                cols,
                rows: 1,
                spacing,
                jitter,
                spin,
            },
            ..template.clone()
        });
    }
    c
}

pub fn with_balancer(mut c: SceneConfig, width: f64) -> SceneConfig {
    c.balancer = Some(BalancerConfig::for_region_width(width));
    c
}

/// Looks up a generator by name; `density-sweep` yields the middle level.
pub fn by_name(name: &str) -> Result<SceneConfig> {
    Ok(match name {
        "funnel" => funnel(1000.0),
        "drop-grid" => drop_grid(2, 8),
        "density-sweep" => density_sweep().swap_remove(2),
        "blocked-merge" => blocked_merge(),
        "heterogeneous" => heterogeneous(),
        other => return Err(HarnessError::UnknownScenario(other.into())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dabd_core::geometry::intersection_test;

    #[test]
    fn every_scenario_builds() {
        for name in SCENARIO_NAMES {
            let c = by_name(name).unwrap();
            let s = c.build().unwrap();
            assert!(!intersection_test(&s.bodies, &s.configs()), "{name}");
            assert_eq!(c.workers(), 2, "{name}");
        }
        assert!(by_name("nope").is_err());
    }

    #[test]
    fn funnel_has_32_bodies_across_the_interface() {
        let s = funnel(1000.0).build().unwrap();
        assert_eq!(s.total_dynamic(), 32);
        let xs: Vec<f64> = s
            .bodies
            .iter()
            .filter(|b| !b.is_static)
            .map(|b| b.q[0])
            .collect();
        assert!(xs.iter().any(|&x| x < 0.0) && xs.iter().any(|&x| x > 0.0));
    }

    #[test]
    fn density_levels() {
        let d: Vec<f64> = density_sweep()
            .iter()
            .map(|c| c.bodies[1].density)
            .collect();
        assert_eq!(d, DENSITY_LEVELS.to_vec());
        let base = funnel(1000.0);
        for c in density_sweep() {
            assert_eq!(c.sim, base.sim);
            assert_eq!(c.bodies[0], base.bodies[0]);
        }
    }

    #[test]
    fn drop_grid_sizes() {
        let one = drop_grid(1, 8);
        assert_eq!(one.workers(), 1);
        assert!(one.partition.planes.is_empty());
        for n in [1, 2, 4] {
            let s = drop_grid(n, 8).build().unwrap();
            assert_eq!(s.total_dynamic(), 8 * n);
            assert_eq!(s.planes.len(), n - 1);
        }
    }

    #[test]
    fn blocked_merge_replica_separation() {
        let c = blocked_merge();
        let s = c.build().unwrap();
        let b = &s.bodies[1];
        let dx = 2.0 * c.replica_bias[0].force[0].abs() * c.sim.h * c.sim.h / b.mass;
        assert!((dx - 0.9).abs() < 1e-9);
        assert_eq!(b.q_dot[1], -30.0);
    }

    #[test]
    fn heterogeneous_groups() {
        let s = heterogeneous().build().unwrap();
        let mut pairs: Vec<(f64, Option<f64>)> = s
            .bodies
            .iter()
            .filter(|b| !b.is_static)
            .map(|b| (b.density, b.arap_stiffness))
            .collect();
        pairs.dedup();
        assert_eq!(
            pairs,
            vec![(1e5, Some(1e10)), (1000.0, Some(1e8)), (10.0, Some(1e6))]
        );
        assert_eq!(s.total_dynamic(), 24);
    }
}
