//! World layouts: room, furniture, target spawn regions and start area.
//!
//! Layouts are TOML files. Three rooms ship with the crate and are available
//! through [`WorldConfig::builtin`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsMode, QuadParams, Vec3};
use crate::error::{Error, Result};
use crate::geometry::Aabb;

/// An obstacle box with a label for trace readability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub label: String,
    pub min: Vec3,
    pub max: Vec3,
}

impl Obstacle {
    pub fn aabb(&self) -> Aabb {
        Aabb::new(self.min, self.max)
    }
}

/// Closed ball the visible target is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpawnSphere {
    pub center: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartArea {
    pub min: Vec3,
    pub max: Vec3,
    /// Nominal position of each agent; agent `n` uses `centers[n]`.
    pub centers: Vec<Vec3>,
    /// Nominal heading of every agent, degrees.
    #[serde(default)]
    pub yaw_deg: f64,
}

/// Target and agent randomization ranges applied at reset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Randomization {
    pub enabled: bool,
    pub target_scale_min: f64,
    pub target_scale_max: f64,
    pub target_yaw_min_deg: f64,
    pub target_yaw_max_deg: f64,
    /// Radius of the ball around each nominal start position.
    pub position_noise: f64,
    /// Agent yaw noise is uniform in `[-yaw_noise_deg, yaw_noise_deg]`.
    pub yaw_noise_deg: f64,
    /// Standard deviation of additive noise on normalized ray distances.
    pub ray_noise_std: f64,
}

impl Default for Randomization {
    fn default() -> Self {
        Self {
            enabled: true,
            target_scale_min: 0.2,
            target_scale_max: 0.3,
            target_yaw_min_deg: 0.0,
            target_yaw_max_deg: 360.0,
            position_noise: 0.2,
            yaw_noise_deg: 30.0,
            ray_noise_std: 0.0,
        }
    }
}

impl Randomization {
    /// Side length used when randomization is off.
    pub fn nominal_scale(&self) -> f64 {
        0.5 * (self.target_scale_min + self.target_scale_max)
    }
}

/// Fan of body-frame rays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub azimuths: usize,
    pub elevations: usize,
    /// Total horizontal span of the fan, degrees, centered on body x.
    pub azimuth_span_deg: f64,
    /// Total vertical span of the fan, degrees, centered on the horizon.
    pub elevation_span_deg: f64,
    pub max_range: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            azimuths: 12,
            elevations: 3,
            azimuth_span_deg: 180.0,
            elevation_span_deg: 60.0,
            max_range: 10.0,
        }
    }
}

impl SensorConfig {
    pub fn num_rays(&self) -> usize {
        self.azimuths * self.elevations
    }

    fn spread(count: usize, span_deg: f64) -> Vec<f64> {
        if count == 1 {
            return vec![0.0];
        }
        (0..count)
            .map(|i| (-0.5 * span_deg + span_deg * i as f64 / (count - 1) as f64).to_radians())
            .collect()
    }

    /// Unit ray directions in the body frame, elevation-major.
    pub fn directions(&self) -> Vec<Vec3> {
        let az = Self::spread(self.azimuths, self.azimuth_span_deg);
        let el = Self::spread(self.elevations, self.elevation_span_deg);
        let mut dirs = Vec::with_capacity(self.num_rays());
        for e in &el {
            for a in &az {
                dirs.push(Vec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin()));
            }
        }
        dirs
    }
}

/// Everything that defines one collaborative search scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub name: String,
    /// Width, length, height; the room spans `[0, w] x [0, l] x [0, h]`.
    pub room: Vec3,
    pub obstacles: Vec<Obstacle>,
    pub spawn_sphere: SpawnSphere,
    /// Hidden target locations (target centers).
    pub hidden: Vec<Vec3>,
    pub start_area: StartArea,
    pub agents: usize,
    pub t_max: usize,
    /// Weight of the remaining-distance term of the crash penalty.
    pub alpha: f64,
    /// Weight of the heading term of the crash penalty.
    pub beta: f64,
    pub drone_radius: f64,
    /// Extra slack added to the reach distance, m.
    #[serde(default = "default_reach_margin")]
    pub reach_margin: f64,
    #[serde(default)]
    pub randomization: Randomization,
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub dynamics: QuadParams,
    #[serde(default)]
    pub dynamics_mode: DynamicsMode,
}

fn default_reach_margin() -> f64 {
    0.1
}

const ROOM_5: &str = include_str!("../data/worlds/room_5x5x3.toml");
const ROOM_8: &str = include_str!("../data/worlds/room_8x8x3.toml");
const ROOM_10: &str = include_str!("../data/worlds/room_10x10x3.toml");

impl WorldConfig {
    /// Names accepted by [`WorldConfig::builtin`].
    pub const BUILTIN: [&'static str; 3] = ["5x5x3", "8x8x3", "10x10x3"];

    /// One of the shipped layouts, by room dimensions (`"5x5x3"`).
    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "5x5x3" => ROOM_5,
            "8x8x3" => ROOM_8,
            "10x10x3" => ROOM_10,
            other => {
                return Err(Error::Config(format!(
                    "unknown room '{other}', expected one of {:?} or a layout file",
                    Self::BUILTIN
                )))
            }
        };
        Self::from_toml(text)
    }

    /// Default training room.
    pub fn default_room() -> Self {
        Self::builtin("5x5x3").expect("shipped layout is valid")
    }

    /// Resolve either a builtin room name or a path to a layout file.
    pub fn resolve(spec: &str) -> Result<Self> {
        if Self::BUILTIN.contains(&spec) {
            Self::builtin(spec)
        } else {
            Self::load(spec)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("world config serializes")
    }

    pub fn room_box(&self) -> Aabb {
        Aabb::new(Vec3::zeros(), self.room)
    }

    /// Copy without furniture.
    pub fn without_obstacles(&self) -> Self {
        Self {
            name: format!("{}_empty", self.name),
            obstacles: Vec::new(),
            ..self.clone()
        }
    }

    pub fn with_agents(&self, agents: usize) -> Self {
        Self {
            agents,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.room.iter().all(|v| v.is_finite() && *v > 0.0)) {
            return bad(format!(
                "room extents must be positive, got {:?}",
                self.room
            ));
        }
        let room = self.room_box();
        for o in &self.obstacles {
            if !o.aabb().is_valid() {
                return bad(format!("obstacle '{}' has min >= max", o.label));
            }
        }
        let b = &self.spawn_sphere;
        if !(b.radius >= 0.0 && b.radius.is_finite()) {
            return bad(format!(
                "spawn sphere radius must be >= 0, got {}",
                b.radius
            ));
        }
        if !room.contains_box(&Aabb::from_center(b.center, Vec3::repeat(b.radius))) {
            return bad("spawn sphere must lie inside the room".into());
        }
        if self.hidden.is_empty() {
            return bad("at least one hidden location is required".into());
        }
        if let Some(p) = self.hidden.iter().find(|p| !room.contains(p)) {
            return bad(format!(
                "hidden location {:?} lies outside the room",
                p.as_slice()
            ));
        }
        if self.agents == 0 {
            return bad("agent count must be >= 1".into());
        }
        if self.agents > self.start_area.centers.len() {
            return bad(format!(
                "{} agents requested but the start area defines {} positions",
                self.agents,
                self.start_area.centers.len()
            ));
        }
        let start = Aabb::new(self.start_area.min, self.start_area.max);
        if !start.is_valid() || !room.contains_box(&start) {
            return bad("start area must be a non-empty box inside the room".into());
        }
        if let Some(c) = self.start_area.centers.iter().find(|c| !start.contains(c)) {
            return bad(format!(
                "start position {:?} lies outside the start area",
                c.as_slice()
            ));
        }
        if self.t_max == 0 {
            return bad("t_max must be > 0".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("reward weights alpha and beta must be >= 0".into());
        }
        if !(self.drone_radius > 0.0) || !(self.reach_margin >= 0.0) {
            return bad("drone_radius must be > 0 and reach_margin >= 0".into());
        }
        let r = &self.randomization;
        if !(r.target_scale_min > 0.0 && r.target_scale_min <= r.target_scale_max) {
            return bad("target scale range must satisfy 0 < min <= max".into());
        }
        if !(r.position_noise >= 0.0 && r.yaw_noise_deg >= 0.0 && r.ray_noise_std >= 0.0) {
            return bad("randomization magnitudes must be >= 0".into());
        }
        let s = &self.sensor;
        if s.azimuths == 0 || s.elevations == 0 || !(s.max_range > 0.0) {
            return bad("sensor needs >= 1 azimuth, >= 1 elevation and a positive range".into());
        }
        self.dynamics.validate()
    }

    /// Stretch the layout to a larger floor plan. Furniture keeps its size
    /// and moves with its scaled center; each hidden spot moves with its
    /// nearest piece of furniture; the start area keeps its distance to the
    /// `y = 0` wall.
    pub fn scaled_to(&self, width: f64, length: f64, height: f64) -> Self {
        let sx = width / self.room.x;
        let sy = length / self.room.y;
        let shift_of = |c: Vec3| Vec3::new(c.x * (sx - 1.0), c.y * (sy - 1.0), 0.0);

        let obstacles: Vec<Obstacle> = self
            .obstacles
            .iter()
            .map(|o| {
                let d = shift_of(o.aabb().center());
                Obstacle {
                    label: o.label.clone(),
                    min: o.min + d,
                    max: o.max + d,
                }
            })
            .collect();
        let hidden = self
            .hidden
            .iter()
            .map(|p| {
                let nearest = self
                    .obstacles
                    .iter()
                    .min_by(|a, b| a.aabb().distance_to(p).total_cmp(&b.aabb().distance_to(p)));
                match nearest {
                    Some(o) => p + shift_of(o.aabb().center()),
                    None => Vec3::new(p.x * sx, p.y * sy, p.z),
                }
            })
            .collect();
        let start_shift = Vec3::new(0.5 * self.room.x * (sx - 1.0), 0.0, 0.0);
        let sphere = SpawnSphere {
            center: self.spawn_sphere.center + shift_of(self.spawn_sphere.center),
            radius: self.spawn_sphere.radius,
        };
        Self {
            name: format!("room_{width}x{length}x{height}"),
            room: Vec3::new(width, length, height),
            obstacles,
            spawn_sphere: sphere,
            hidden,
            start_area: StartArea {
                min: self.start_area.min + start_shift,
                max: self.start_area.max + start_shift,
                centers: self
                    .start_area
                    .centers
                    .iter()
                    .map(|c| c + start_shift)
                    .collect(),
                yaw_deg: self.start_area.yaw_deg,
            },
            ..self.clone()
        }
    }
}

/// Parse `"WxLxH"` into metres.
pub fn parse_room_dims(spec: &str) -> Result<Vec3> {
    let parts: Vec<&str> = spec.split('x').collect();
    let err = || Error::Config(format!("room '{spec}' is not of the form WxLxH"));
    if parts.len() != 3 {
        return Err(err());
    }
    let mut v = [0.0; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.trim().parse::<f64>().map_err(|_| err())?;
        if !(*slot > 0.0) {
            return Err(err());
        }
    }
    Ok(Vec3::new(v[0], v[1], v[2]))
}
