//! Synthetic crossing-groups scenes.
//!
//! Two groups walk towards each other along the x axis and swerve to opposite
//! sides as they meet: the group heading +x drifts towards +y, the other
//! towards −y. Positions carry i.i.d. Gaussian noise.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Scene, Track};
use crate::error::{Error, Result};
use crate::{PedId, DT, FUTURE_LEN, HISTORY_LEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossingConfig {
    pub ticks: usize,
    pub group_size: usize,
    /// Standard deviation of the position noise, in meters.
    pub noise: f64,
    /// Walking speed range in m/s.
    pub speed: (f64, f64),
    /// Lateral swerve amplitude range in meters.
    pub swerve: (f64, f64),
    /// Tick at which the swerve starts, and its duration in ticks.
    pub swerve_start: usize,
    pub swerve_ticks: usize,
}

impl Default for CrossingConfig {
    fn default() -> Self {
        CrossingConfig {
            ticks: HISTORY_LEN + FUTURE_LEN,
            group_size: 3,
            noise: 0.05,
            speed: (1.0, 1.4),
            swerve: (1.0, 2.0),
            swerve_start: 6,
            swerve_ticks: 10,
        }
    }
}

fn ease(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    0.5 * (1.0 - (PI * u).cos())
}

/// One scene; pedestrians of the +x group get ids `1..=g`, the others `g+1..=2g`.
pub fn crossing_scene(name: impl Into<String>, cfg: &CrossingConfig, rng: &mut impl Rng) -> Result<Scene> {
    if cfg.group_size == 0 || cfg.ticks == 0 {
        return Err(Error::arg("crossing scenes need at least one pedestrian and one tick"));
    }
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::arg(format!("noise: {e}")))?;
    let mut tracks = BTreeMap::new();
    for (gi, dir) in [1.0f64, -1.0].into_iter().enumerate() {
        let speed = rng.gen_range(cfg.speed.0..=cfg.speed.1);
        let swerve = rng.gen_range(cfg.swerve.0..=cfg.swerve.1);
        let x0 = -dir * rng.gen_range(4.0..5.0);
        let y0 = -dir * rng.gen_range(0.5..1.0);
        for m in 0..cfg.group_size {
            let (dx, dy) = match m {
                0 => (0.0, 0.0),
                _ => (
                    -dir * 0.5 * m.div_ceil(2) as f64 + rng.gen_range(-0.1..0.1),
                    if m % 2 == 1 { 0.6 } else { -0.6 } * m.div_ceil(2) as f64 + rng.gen_range(-0.1..0.1),
                ),
            };
            let positions = (0..cfg.ticks)
                .map(|t| {
                    let u = (t as f64 - cfg.swerve_start as f64) / cfg.swerve_ticks.max(1) as f64;
                    [
                        x0 + dx + dir * speed * DT * t as f64 + noise.sample(rng),
                        y0 + dy + dir * swerve * ease(u) + noise.sample(rng),
                    ]
                })
                .collect();
            let id = (gi * cfg.group_size + m + 1) as PedId;
            tracks.insert(id, Track { start: 0, positions });
        }
    }
    Ok(Scene {
        name: name.into(),
        dt: DT,
        first_frame: 0,
        frame_stride: 10,
        num_ticks: cfg.ticks,
        tracks,
    })
}

/// `count` scenes named `{prefix}{index:03}` from one seeded stream.
pub fn crossing_corpus(prefix: &str, count: usize, cfg: &CrossingConfig, seed: u64) -> Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| crossing_scene(format!("{prefix}{i:03}"), cfg, &mut rng))
        .collect()
}
