//! PD controller that moves slab boundaries from per-frame timing feedback.

use crate::body::Vec2;
use crate::consensus::Plane;
use crate::error::{Error, Result};

/// Normalized imbalance `(η − 1)/(η + 1)` with `η = τ_1/τ_2`, evaluated as
/// `(τ_1 − τ_2)/(τ_1 + τ_2)` so swapping the arguments negates it exactly.
pub fn imbalance_metric(tau_1: f64, tau_2: f64) -> Result<f64> {
    for t in [tau_1, tau_2] {
        if !(t > 0.0) {
            return Err(Error::NonPositiveTime(t));
        }
    }
    Ok((tau_1 - tau_2) / (tau_1 + tau_2))
}

/// `K_P·T + K_D·(T − T_prev)`, clamped to `±max_step`.
pub fn pd_update(t: f64, t_prev: f64, kp: f64, kd: f64, max_step: f64) -> f64 {
    (kp * t + kd * (t - t_prev)).clamp(-max_step, max_step)
}

/// `p' = p + Δp·n`.
pub fn shift_boundary(plane: &Plane, dp: f64) -> Plane {
    Plane {
        point: plane.point + plane.normal * dp,
        normal: plane.normal,
    }
}

/// `mean/max` of per-worker times; 1 is perfect balance.
pub fn balance_factor(times: &[f64]) -> f64 {
    if times.is_empty() {
        return 1.0;
    }
    let max = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    mean / max
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalancerParams {
    pub kp: f64,
    pub kd: f64,
    /// Weight of the newest sample in the moving average.
    pub smoothing: f64,
}

impl BalancerParams {
    /// Default gains for slabs of the given width.
    pub fn for_region_width(width: f64) -> Self {
        Self {
            kp: 0.1 * width,
            kd: 0.05 * width,
            smoothing: 0.5,
        }
    }
}

/// Per-interface controller state.
#[derive(Debug, Clone, PartialEq)]
pub struct Balancer {
    pub params: BalancerParams,
    pub t_prev: Vec<f64>,
    pub smoothed: Vec<Option<f64>>,
}

impl Balancer {
    pub fn new(params: BalancerParams, n_workers: usize) -> Self {
        Self {
            params,
            t_prev: vec![0.0; n_workers.saturating_sub(1)],
            smoothed: vec![None; n_workers],
        }
    }

    /// Folds one frame of per-worker times into the moving average.
    pub fn observe(&mut self, times: &[f64]) -> Result<()> {
        if times.len() != self.smoothed.len() {
            return Err(Error::DimensionMismatch {
                expected: self.smoothed.len(),
                got: times.len(),
            });
        }
        let l = self.params.smoothing;
        for (s, &t) in self.smoothed.iter_mut().zip(times) {
            if !(t > 0.0) {
                return Err(Error::NonPositiveTime(t));
            }
            *s = Some(match *s {
                Some(prev) => l * t + (1.0 - l) * prev,
                None => t,
            });
        }
        Ok(())
    }

    /// Current imbalance per interface from the smoothed times.
    pub fn imbalance(&self) -> Result<Vec<f64>> {
        let s: Vec<f64> = self.smoothed.iter().map(|t| t.unwrap_or(1.0)).collect();
        s.windows(2).map(|w| imbalance_metric(w[0], w[1])).collect()
    }

    /// Moves every plane toward its slower neighbour and returns the shifts
    /// applied along each normal. Steps are capped at `w/2` and planes keep
    /// at least `min_gap` from their neighbours.
    pub fn rebalance(&mut self, planes: &mut [Plane], w: f64, min_gap: f64) -> Result<Vec<f64>> {
        let t = self.imbalance()?;
        let mut applied = Vec::with_capacity(planes.len());
        for k in 0..planes.len() {
            let dp = pd_update(
                t[k],
                self.t_prev[k],
                self.params.kp,
                self.params.kd,
                0.5 * w,
            );
            self.t_prev[k] = t[k];
            // A slower lower-side worker (T > 0) gives up area: move against the normal.
            let mut shifted = shift_boundary(&planes[k], -dp);
            shifted.point = clamp_between(planes, k, shifted.point, min_gap);
            applied.push((shifted.point - planes[k].point).dot(&planes[k].normal));
            planes[k] = shifted;
        }
        Ok(applied)
    }
}

fn clamp_between(planes: &[Plane], k: usize, point: Vec2, min_gap: f64) -> Vec2 {
    let n = planes[k].normal;
    let mut s = (point - planes[k].point).dot(&n);
    if k > 0 {
        let lo = planes[k - 1].signed_distance(&planes[k].point);
        s = s.max(min_gap - lo);
    }
    if k + 1 < planes.len() {
        let hi = -planes[k + 1].signed_distance(&planes[k].point);
        s = s.min(hi - min_gap);
    }
    planes[k].point + n * s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn imbalance_examples() {
        assert_eq!(imbalance_metric(2.0, 2.0).unwrap(), 0.0);
        assert_eq!(imbalance_metric(3.0, 1.0).unwrap(), 0.5);
        assert_eq!(imbalance_metric(1.0, 3.0).unwrap(), -0.5);
        assert!(matches!(
            imbalance_metric(0.0, 1.0),
            Err(Error::NonPositiveTime(_))
        ));
    }

    #[test]
    fn pd_examples() {
        assert_eq!(pd_update(0.0, 0.0, 1.0, 1.0, 10.0), 0.0);
        assert_eq!(pd_update(0.5, 0.5, 1.0, 0.0, 10.0), 0.5);
        assert_relative_eq!(pd_update(0.3, 0.1, 0.0, 2.0, 10.0), 0.4, epsilon = 1e-15);
        assert_eq!(pd_update(0.9, 0.0, 1.0, 0.0, 0.2), 0.2);
    }

    #[test]
    fn shift_examples() {
        let p = Plane::vertical(0.0);
        assert_eq!(shift_boundary(&p, 0.0), p);
        assert_eq!(shift_boundary(&p, 0.1).point, Vec2::new(0.1, 0.0));
        let mut planes = [Plane::vertical(0.0), Plane::vertical(1.0)];
        let clamped = clamp_between(&planes, 0, Vec2::new(5.0, 0.0), 0.3);
        assert_relative_eq!(clamped.x, 0.7, epsilon = 1e-15);
        planes[1] = Plane {
            point: clamp_between(&planes, 1, Vec2::new(-3.0, 0.0), 0.3),
            ..planes[1]
        };
        assert_relative_eq!(planes[1].point.x, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn balance_factor_examples() {
        assert_eq!(balance_factor(&[2.0, 2.0, 2.0]), 1.0);
        assert_eq!(balance_factor(&[1.0, 1.0, 1.0, 3.0]), 0.5);
        assert_eq!(balance_factor(&[4.0]), 1.0);
    }

    #[test]
    fn fixed_point_is_exact() {
        let mut b = Balancer::new(BalancerParams::for_region_width(1.0), 2);
        b.observe(&[1.5, 1.5]).unwrap();
        let mut planes = [Plane::vertical(0.25)];
        let shift = b.rebalance(&mut planes, 0.5, 0.1).unwrap();
        assert_eq!(shift, vec![0.0]);
        assert_eq!(planes[0], Plane::vertical(0.25));
    }

    /// Area-proportional cost on `[0, 1]` with one plane; returns `|T|` per frame.
    fn run_synthetic(sign: f64, frames: usize) -> Vec<f64> {
        let mut b = Balancer::new(BalancerParams::for_region_width(0.5), 2);
        let mut plane = Plane::vertical(0.2);
        let mut out = Vec::new();
        for _ in 0..frames {
            let x = plane.point.x;
            b.observe(&[x, 1.0 - x]).unwrap();
            let t = b.imbalance().unwrap()[0];
            out.push(imbalance_metric(x, 1.0 - x).unwrap().abs());
            let dp = pd_update(t, b.t_prev[0], b.params.kp, b.params.kd, 0.1);
            b.t_prev[0] = t;
            plane = shift_boundary(&plane, sign * dp);
            plane.point.x = plane.point.x.clamp(0.05, 0.95);
        }
        out
    }

    #[test]
    fn literal_sign_diverges_and_opposite_sign_converges() {
        let literal = run_synthetic(1.0, 50);
        assert!(literal.last().unwrap() > &literal[0]);
        let applied = run_synthetic(-1.0, 50);
        assert!(applied.last().unwrap() < &0.05);
    }

    #[test]
    fn rebalance_converges_on_area_workload() {
        let mut b = Balancer::new(BalancerParams::for_region_width(0.5), 2);
        let mut planes = [Plane::vertical(0.2)];
        let mut first_ok = None;
        for frame in 0..80 {
            let x = planes[0].point.x;
            let times = [x, 1.0 - x];
            let t = imbalance_metric(times[0], times[1]).unwrap();
            if t.abs() < 0.05 && first_ok.is_none() {
                first_ok = Some(frame);
            }
            if let Some(f) = first_ok {
                if frame > f {
                    assert!(balance_factor(&times) >= 0.9);
                }
            }
            b.observe(&times).unwrap();
            b.rebalance(&mut planes, 0.2, 0.05).unwrap();
        }
        assert!(first_ok.unwrap() < 50);
    }

    proptest! {
        #[test]
        fn imbalance_is_antisymmetric_and_bounded(a in 1e-6..1e6f64, b in 1e-6..1e6f64) {
            let t = imbalance_metric(a, b).unwrap();
            prop_assert!(t > -1.0 && t < 1.0);
            prop_assert_eq!(-t, imbalance_metric(b, a).unwrap());
        }

        #[test]
        fn pd_step_is_clamped(t in -1.0..1.0f64, tp in -1.0..1.0f64, kp in 0.0..10.0f64, kd in 0.0..10.0f64, m in 0.0..1.0f64) {
            prop_assert!(pd_update(t, tp, kp, kd, m).abs() <= m);
        }
    }
}
