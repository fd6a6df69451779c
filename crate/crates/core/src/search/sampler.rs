use rand::Rng;

use crate::error::{Error, Result};
use crate::slimnet::{Architecture, WidthConfig};

/// FLOPs target with a relative tolerance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub target: f64,
    pub tolerance: f64,
}

impl Band {
    pub fn contains(&self, flops: f64) -> bool {
        (flops - self.target).abs() <= self.tolerance * self.target
    }
}

/// Result of widening a base config toward a FLOPs target.
#[derive(Clone, Debug, PartialEq)]
pub struct Growth {
    pub config: WidthConfig,
    /// Every block reached its maximum before the band did.
    pub saturated: bool,
    pub in_band: bool,
}

/// Widths `base + round(t * u_b * room_b)`, clamped to the block maximum.
fn along(base: &[usize], room: &[usize], u: &[f64], t: f64) -> Vec<usize> {
    base.iter()
        .zip(room)
        .zip(u)
        .map(|((&b, &r), &ub)| b + ((t * ub * r as f64).round() as usize).min(r))
        .collect()
}

/// Adds width to `base` along one random direction, bisecting the step
/// length until FLOPs land in `band`. Up to `attempts` directions are
/// tried; if none lands in the band the closest config seen is returned
/// with `in_band == false`. Widths never drop below `base`.
pub fn grow_to_band(arch: &Architecture, base: &[usize], band: Band, attempts: usize, rng: &mut impl Rng) -> Result<Growth> {
    arch.check_widths(base)?;
    if attempts == 0 {
        return Err(Error::usage("at least one sampling attempt is needed"));
    }
    let room: Vec<usize> = base.iter().zip(&arch.block_max_widths).map(|(b, m)| m - b).collect();
    let flops = |w: &[usize]| arch.flops_of(w);
    let top = arch.block_max_widths.clone();
    if flops(&top) < band.target * (1.0 - band.tolerance) {
        return Ok(Growth { config: arch.config(top)?, saturated: true, in_band: false });
    }
    if band.contains(flops(base)) && room.iter().all(|&r| r == 0) {
        return Ok(Growth { config: arch.config(base.to_vec())?, saturated: false, in_band: true });
    }
    let mut closest: Option<Vec<usize>> = None;
    let gap = |w: &[usize]| (flops(w) - band.target).abs();
    for _ in 0..attempts {
        let u: Vec<f64> = room.iter().map(|&r| if r == 0 { 0.0 } else { rng.random_range(0.05..1.0) }).collect();
        let umin = u.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
        let (mut lo, mut hi) = (0.0, 1.0 / umin);
        if flops(&along(base, &room, &u, lo)) >= band.target {
            hi = lo;
        }
        for _ in 0..60 {
            if hi - lo < 1e-12 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if flops(&along(base, &room, &u, mid)) >= band.target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let above = along(base, &room, &u, hi);
        let below = along(base, &room, &u, lo);
        let pick = if gap(&above) <= gap(&below) { above } else { below };
        if band.contains(flops(&pick)) {
            return Ok(Growth { config: arch.config(pick)?, saturated: false, in_band: true });
        }
        if closest.as_ref().is_none_or(|c| gap(&pick) < gap(c)) {
            closest = Some(pick);
        }
    }
    let config = arch.config(closest.expect("attempts > 0"))?;
    Ok(Growth { config, saturated: false, in_band: false })
}

/// `n` configs whose FLOPs targets are evenly spaced from the smallest to
/// the full config.
pub fn spanning_configs(arch: &Architecture, n: usize, tolerance: f64, attempts: usize, rng: &mut impl Rng) -> Result<Vec<WidthConfig>> {
    if n < 2 {
        return Err(Error::usage(format!("spanning sample needs at least 2 configs, got {n}")));
    }
    let smallest = arch.smallest_config();
    let (lo, hi) = (smallest.flops, arch.full_flops());
    (0..n)
        .map(|i| {
            let target = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            grow_to_band(arch, &smallest.widths, Band { target, tolerance }, attempts, rng).map(|g| g.config)
        })
        .collect()
}
