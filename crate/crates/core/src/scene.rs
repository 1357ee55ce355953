//! Procedural urban scenarios, UAV routes, and the ground receiver grid.
//!
//! Two templates are provided: a crossroad scenario (orthogonal street
//! corridors kept building-free) and a wide-lane scenario (one broad
//! central lane with denser building bands on both sides). Everything is
//! deterministic for a given spec and seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// A point or displacement in scene coordinates, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec3) -> f64 {
        self.sub(o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn axis(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("axis index {i} out of range"),
        }
    }

    pub fn set_axis(&mut self, i: usize, v: f64) {
        match i {
            0 => self.x = v,
            1 => self.y = v,
            2 => self.z = v,
            _ => panic!("axis index {i} out of range"),
        }
    }
}

/// Axis-aligned building box standing on the ground plane (`min.z == 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub min: Vec3,
    pub max: Vec3,
    /// Stable identifier used by the renderer to pick a rooftop hue.
    pub height_color_id: u32,
}

impl Building {
    pub fn height(&self) -> f64 {
        self.max.z
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.min.x && x <= self.max.x && y >= self.min.y && y <= self.max.y
    }
}

/// Axis-aligned ground rectangle, used for street corridors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect2 {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect2 {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }

    fn overlaps(&self, o: &Rect2) -> bool {
        self.min[0] < o.max[0] && o.min[0] < self.max[0] && self.min[1] < o.max[1] && o.min[1] < self.max[1]
    }
}

/// Which scenario template to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Crossroad,
    WideLane,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioKind::Crossroad => write!(f, "crossroad"),
            ScenarioKind::WideLane => write!(f, "wide_lane"),
        }
    }
}

/// A constant-altitude UAV route sampled at `snapshot_count` positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u32,
    pub waypoints: Vec<Vec3>,
    pub snapshot_count: u32,
}

/// The ground receiver lattice centered at the UAV nadir point.
///
/// Index `(r, c)` maps to flat index `r * g + c`; `r` runs along +x and
/// `c` along +y, both spanning `side` meters centered on `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RxGrid {
    pub center: Vec3,
    pub side: f64,
    pub g: usize,
}

/// One UAV position along a route, with its receiver grid underneath.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub uav_pos: Vec3,
    pub route_id: u32,
    pub index: u32,
    pub grid: RxGrid,
}

/// The shared physical world consumed by both the renderer and the channel model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: ScenarioKind,
    /// (width along x, depth along y) in meters, centered on the origin.
    pub extent: (f64, f64),
    pub buildings: Vec<Building>,
    pub streets: Vec<Rect2>,
    pub routes: Vec<Trajectory>,
    pub rng_seed: u64,
    pub grid_side: f64,
    pub grid_g: usize,
}

impl Scenario {
    pub fn max_building_height(&self) -> f64 {
        self.buildings.iter().map(|b| b.height()).fold(0.0, f64::max)
    }

    pub fn route(&self, id: u32) -> Option<&Trajectory> {
        self.routes.iter().find(|r| r.id == id)
    }

    /// Copy of the scenario with every route waypoint re-pinned to altitude `z`.
    pub fn with_route_altitude(&self, z: f64) -> Scenario {
        let mut s = self.clone();
        for route in &mut s.routes {
            for w in &mut route.waypoints {
                w.z = z;
            }
        }
        s
    }
}

/// Receiver grid parameters of a scenario spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default = "GridSpec::default_side")]
    pub side: f64,
    #[serde(default = "GridSpec::default_g")]
    pub g: usize,
}

impl GridSpec {
    fn default_side() -> f64 {
        150.0
    }
    fn default_g() -> usize {
        30
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { side: 150.0, g: 30 }
    }
}

/// Custom route description inside a scenario spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSpec {
    pub waypoints: Vec<[f64; 3]>,
    pub snapshots: u32,
}

/// Declarative scenario configuration.
///
/// If `routes` is empty, the template's default route set is used with
/// `snapshots_per_route` snapshots on each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub template: ScenarioKind,
    pub seed: u64,
    #[serde(default)]
    pub extent: Option<(f64, f64)>,
    #[serde(default)]
    pub building_count: Option<usize>,
    #[serde(default)]
    pub routes: Vec<RouteSpec>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "ScenarioSpec::default_snapshots")]
    pub snapshots_per_route: u32,
    /// Per-route snapshot counts for template routes; overrides
    /// `snapshots_per_route` when non-empty.
    #[serde(default)]
    pub route_snapshots: Vec<u32>,
}

impl ScenarioSpec {
    fn default_snapshots() -> u32 {
        20
    }

    pub fn crossroad(seed: u64) -> Self {
        ScenarioSpec {
            template: ScenarioKind::Crossroad,
            seed,
            extent: None,
            building_count: None,
            routes: Vec::new(),
            grid: GridSpec::default(),
            snapshots_per_route: Self::default_snapshots(),
            route_snapshots: Vec::new(),
        }
    }

    pub fn wide_lane(seed: u64) -> Self {
        ScenarioSpec {
            template: ScenarioKind::WideLane,
            seed,
            ..Self::crossroad(seed)
        }
    }
}

/// Errors raised while building or querying scenarios.
#[derive(Debug, Clone, PartialEq)]
pub enum SceneError {
    InvalidConfig(String),
    RouteNotFound(u32),
}

impl fmt::Display for SceneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneError::InvalidConfig(msg) => write!(f, "invalid scenario config: {msg}"),
            SceneError::RouteNotFound(id) => write!(f, "route {id} not found"),
        }
    }
}

impl std::error::Error for SceneError {}

/// Street corridor half-width used by both templates.
const STREET_HALF_WIDTH: f64 = 7.0;
/// Default flight altitudes for template routes.
const CROSSROAD_ALTITUDE: f64 = 63.3;
const WIDE_LANE_ALTITUDE: f64 = 200.0;

/// Build a scenario from a spec. Deterministic for a given seed.
pub fn build_scenario(spec: &ScenarioSpec) -> Result<Scenario, SceneError> {
    let extent = spec.extent.unwrap_or((200.0, 260.0));
    if !(extent.0.is_finite() && extent.1.is_finite()) || extent.0 <= 0.0 || extent.1 <= 0.0 {
        return Err(SceneError::InvalidConfig(format!(
            "extent must be positive and finite, got {:?}",
            extent
        )));
    }
    if spec.grid.g < 2 {
        return Err(SceneError::InvalidConfig(format!(
            "grid.g must be at least 2, got {}",
            spec.grid.g
        )));
    }
    if !(spec.grid.side > 0.0) {
        return Err(SceneError::InvalidConfig(format!(
            "grid.side must be positive, got {}",
            spec.grid.side
        )));
    }

    let (streets, default_routes, altitude, default_count, heights) = match spec.template {
        ScenarioKind::Crossroad => {
            if extent.0 < 80.0 || extent.1 < 80.0 {
                return Err(SceneError::InvalidConfig(
                    "crossroad extent must be at least 80 x 80 m so street corridors do not overlap".into(),
                ));
            }
            let streets = crossroad_streets(extent);
            let routes = crossroad_routes(extent);
            (streets, routes, CROSSROAD_ALTITUDE, 19, (10.0, 55.0))
        }
        ScenarioKind::WideLane => {
            if extent.0 < 100.0 || extent.1 < 80.0 {
                return Err(SceneError::InvalidConfig(
                    "wide-lane extent must be at least 100 x 80 m".into(),
                ));
            }
            let streets = wide_lane_streets(extent);
            let routes = wide_lane_routes(extent);
            (streets, routes, WIDE_LANE_ALTITUDE, 26, (20.0, 70.0))
        }
    };

    for (i, a) in streets.iter().enumerate() {
        for b in streets.iter().skip(i + 1) {
            // Orthogonal corridors cross at intersections; parallel ones must not touch.
            let parallel = (a.min[0] == b.min[0] && a.max[0] == b.max[0])
                || (a.min[1] == b.min[1] && a.max[1] == b.max[1]);
            if parallel && a.overlaps(b) {
                return Err(SceneError::InvalidConfig("parallel street corridors overlap".into()));
            }
        }
    }

    let count = spec.building_count.unwrap_or(default_count);
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let buildings = place_buildings(&mut rng, extent, &streets, count, heights)?;

    let routes = if spec.routes.is_empty() {
        if !spec.route_snapshots.is_empty() && spec.route_snapshots.len() != default_routes.len() {
            return Err(SceneError::InvalidConfig(format!(
                "route_snapshots has {} entries but the template has {} routes",
                spec.route_snapshots.len(),
                default_routes.len()
            )));
        }
        default_routes
            .into_iter()
            .enumerate()
            .map(|(i, waypoints)| Trajectory {
                id: (i + 1) as u32,
                waypoints: waypoints
                    .into_iter()
                    .map(|(x, y)| Vec3::new(x, y, altitude))
                    .collect(),
                snapshot_count: spec.route_snapshots.get(i).copied().unwrap_or(spec.snapshots_per_route),
            })
            .collect()
    } else {
        spec.routes
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if r.waypoints.is_empty() {
                    return Err(SceneError::InvalidConfig(format!("route {} has no waypoints", i + 1)));
                }
                if r.snapshots < 1 {
                    return Err(SceneError::InvalidConfig(format!(
                        "route {} must have at least 1 snapshot",
                        i + 1
                    )));
                }
                let z = r.waypoints[0][2];
                if r.waypoints.iter().any(|w| w[2] != z) {
                    return Err(SceneError::InvalidConfig(format!(
                        "route {} waypoints must share one altitude",
                        i + 1
                    )));
                }
                Ok(Trajectory {
                    id: (i + 1) as u32,
                    waypoints: r.waypoints.iter().map(|w| Vec3::new(w[0], w[1], w[2])).collect(),
                    snapshot_count: r.snapshots,
                })
            })
            .collect::<Result<Vec<_>, _>>()?
    };

    if routes.is_empty() {
        return Err(SceneError::InvalidConfig("scenario needs at least one route".into()));
    }

    Ok(Scenario {
        name: spec.template,
        extent,
        buildings,
        streets,
        routes,
        rng_seed: spec.seed,
        grid_side: spec.grid.side,
        grid_g: spec.grid.g,
    })
}

fn crossroad_streets(extent: (f64, f64)) -> Vec<Rect2> {
    let (w, d) = extent;
    let (hw, hd) = (w / 2.0, d / 2.0);
    let vxs = [-0.3 * w, 0.0, 0.3 * w];
    let hys = [-0.33 * d, 0.0, 0.33 * d];
    let mut streets = Vec::with_capacity(6);
    for cx in vxs {
        streets.push(Rect2 {
            min: [cx - STREET_HALF_WIDTH, -hd],
            max: [cx + STREET_HALF_WIDTH, hd],
        });
    }
    for cy in hys {
        streets.push(Rect2 {
            min: [-hw, cy - STREET_HALF_WIDTH],
            max: [hw, cy + STREET_HALF_WIDTH],
        });
    }
    streets
}

fn crossroad_routes(extent: (f64, f64)) -> Vec<Vec<(f64, f64)>> {
    let (w, d) = extent;
    let (hw, hd) = (w / 2.0, d / 2.0);
    vec![
        vec![(-0.3 * w, -hd + 20.0), (-0.3 * w, hd - 20.0)],
        // Route 2: the held-out test route across the central horizontal street.
        vec![(-hw + 15.0, 0.0), (hw - 15.0, 0.0)],
        vec![(0.3 * w, -hd + 20.0), (0.3 * w, hd - 20.0)],
        vec![(-hw + 15.0, -0.33 * d), (hw - 15.0, -0.33 * d)],
        vec![(-hw + 15.0, 0.33 * d), (hw - 15.0, 0.33 * d)],
        vec![(0.0, -hd + 20.0), (0.0, hd - 20.0)],
        vec![
            (-0.4 * w, -0.42 * d),
            (-0.15 * w, -0.15 * d),
            (0.15 * w, 0.15 * d),
            (0.4 * w, 0.42 * d),
        ],
    ]
}

fn wide_lane_streets(extent: (f64, f64)) -> Vec<Rect2> {
    let (w, d) = extent;
    let (hw, hd) = (w / 2.0, d / 2.0);
    let lane_half = 18.0;
    vec![
        Rect2 {
            min: [-lane_half, -hd],
            max: [lane_half, hd],
        },
        Rect2 {
            min: [-hw, -0.38 * d - STREET_HALF_WIDTH],
            max: [hw, -0.38 * d + STREET_HALF_WIDTH],
        },
        Rect2 {
            min: [-hw, 0.38 * d - STREET_HALF_WIDTH],
            max: [hw, 0.38 * d + STREET_HALF_WIDTH],
        },
    ]
}

fn wide_lane_routes(extent: (f64, f64)) -> Vec<Vec<(f64, f64)>> {
    let (w, d) = extent;
    let (hw, hd) = (w / 2.0, d / 2.0);
    vec![
        vec![(-12.0, -hd + 20.0), (-12.0, hd - 20.0)],
        vec![(12.0, -hd + 20.0), (12.0, hd - 20.0)],
        vec![(-0.35 * w, -hd + 20.0), (-0.35 * w, hd - 20.0)],
        vec![(0.35 * w, -hd + 20.0), (0.35 * w, hd - 20.0)],
        vec![(-hw + 15.0, -0.38 * d), (hw - 15.0, -0.38 * d)],
        vec![(-hw + 15.0, 0.38 * d), (hw - 15.0, 0.38 * d)],
        vec![(-0.35 * w, -0.4 * d), (0.35 * w, 0.4 * d)],
        vec![(0.35 * w, -0.4 * d), (-0.35 * w, 0.4 * d)],
        // Route 9: the held-out test route along the lane center.
        vec![(0.0, -hd + 20.0), (0.0, hd - 20.0)],
    ]
}

/// Open ground cells between corridors, used as building sites.
fn building_cells(extent: (f64, f64), streets: &[Rect2]) -> Vec<Rect2> {
    let (w, d) = extent;
    let (hw, hd) = (w / 2.0, d / 2.0);
    // Collect corridor edges as cuts along each axis.
    let mut xs = vec![-hw, hw];
    let mut ys = vec![-hd, hd];
    for s in streets {
        // Vertical corridors cut x, horizontal corridors cut y, the outer
        // boundary is already present.
        if s.min[1] <= -hd && s.max[1] >= hd {
            xs.push(s.min[0]);
            xs.push(s.max[0]);
        }
        if s.min[0] <= -hw && s.max[0] >= hw {
            ys.push(s.min[1]);
            ys.push(s.max[1]);
        }
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut cells = Vec::new();
    for xpair in xs.windows(2) {
        for ypair in ys.windows(2) {
            let cell = Rect2 {
                min: [xpair[0], ypair[0]],
                max: [xpair[1], ypair[1]],
            };
            let cx = (cell.min[0] + cell.max[0]) / 2.0;
            let cy = (cell.min[1] + cell.max[1]) / 2.0;
            let too_small = cell.max[0] - cell.min[0] < 14.0 || cell.max[1] - cell.min[1] < 14.0;
            if !too_small && !streets.iter().any(|s| s.contains(cx, cy)) {
                cells.push(cell);
            }
        }
    }
    cells
}

fn place_buildings(
    rng: &mut ChaCha12Rng,
    extent: (f64, f64),
    streets: &[Rect2],
    count: usize,
    heights: (f64, f64),
) -> Result<Vec<Building>, SceneError> {
    let cells = building_cells(extent, streets);
    if count > 0 && cells.is_empty() {
        return Err(SceneError::InvalidConfig(
            "no building sites left between street corridors".into(),
        ));
    }
    let margin = 2.5;
    let mut buildings = Vec::with_capacity(count);
    for i in 0..count {
        let cell = &cells[i % cells.len()];
        let avail_w = cell.max[0] - cell.min[0] - 2.0 * margin;
        let avail_d = cell.max[1] - cell.min[1] - 2.0 * margin;
        let bw = avail_w * rng.gen_range(0.45..0.85);
        let bd = avail_d * rng.gen_range(0.45..0.85);
        let x0 = cell.min[0] + margin + rng.gen_range(0.0..(avail_w - bw).max(1e-9));
        let y0 = cell.min[1] + margin + rng.gen_range(0.0..(avail_d - bd).max(1e-9));
        let h = rng.gen_range(heights.0..heights.1);
        buildings.push(Building {
            min: Vec3::new(x0, y0, 0.0),
            max: Vec3::new(x0 + bw, y0 + bd, h),
            height_color_id: i as u32,
        });
    }
    Ok(buildings)
}

/// Uniformly spaced snapshots along the route polyline, receiver grid at nadir.
pub fn trajectory_snapshots(scenario: &Scenario, route_id: u32) -> Result<Vec<Snapshot>, SceneError> {
    let route = scenario.route(route_id).ok_or(SceneError::RouteNotFound(route_id))?;
    let n = route.snapshot_count.max(1);
    let mut seg_len = Vec::with_capacity(route.waypoints.len().saturating_sub(1));
    let mut total = 0.0;
    for pair in route.waypoints.windows(2) {
        let l = pair[0].dist(pair[1]);
        seg_len.push(l);
        total += l;
    }
    let mut out = Vec::with_capacity(n as usize);
    for k in 0..n {
        let t = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
        let pos = point_along(&route.waypoints, &seg_len, total, t);
        out.push(Snapshot {
            uav_pos: pos,
            route_id,
            index: k,
            grid: RxGrid {
                center: Vec3::new(pos.x, pos.y, 0.0),
                side: scenario.grid_side,
                g: scenario.grid_g,
            },
        });
    }
    Ok(out)
}

fn point_along(waypoints: &[Vec3], seg_len: &[f64], total: f64, t: f64) -> Vec3 {
    if waypoints.len() == 1 || total <= 0.0 {
        return waypoints[0];
    }
    let mut target = t * total;
    for (i, &l) in seg_len.iter().enumerate() {
        if target <= l || i == seg_len.len() - 1 {
            let f = if l > 0.0 { (target / l).clamp(0.0, 1.0) } else { 0.0 };
            return waypoints[i].add(waypoints[i + 1].sub(waypoints[i]).scale(f));
        }
        target -= l;
    }
    *waypoints.last().unwrap()
}

/// Row-major `g x g` receiver lattice on the ground plane.
pub fn rx_positions(grid: &RxGrid) -> Vec<Vec3> {
    let g = grid.g;
    let step = grid.side / (g - 1) as f64;
    let x0 = grid.center.x - grid.side / 2.0;
    let y0 = grid.center.y - grid.side / 2.0;
    let mut out = Vec::with_capacity(g * g);
    for r in 0..g {
        let x = x0 + r as f64 * step;
        for c in 0..g {
            out.push(Vec3::new(x, y0 + c as f64 * step, 0.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn crossroad_is_deterministic() {
        let spec = ScenarioSpec::crossroad(7);
        let a = build_scenario(&spec).unwrap();
        let b = build_scenario(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crossroad_default_layout() {
        let s = build_scenario(&ScenarioSpec::crossroad(7)).unwrap();
        assert_eq!(s.buildings.len(), 19);
        assert_eq!(s.streets.len(), 6);
        assert_eq!(s.routes.len(), 7);
        let (hw, hd) = (s.extent.0 / 2.0, s.extent.1 / 2.0);
        for b in &s.buildings {
            assert!(b.min.x < b.max.x && b.min.y < b.max.y && b.min.z < b.max.z);
            assert_eq!(b.min.z, 0.0);
            assert!(b.min.x >= -hw && b.max.x <= hw && b.min.y >= -hd && b.max.y <= hd);
            // Buildings never intrude into street corridors.
            for st in &s.streets {
                let sep = b.max.x <= st.min[0] || b.min.x >= st.max[0] || b.max.y <= st.min[1] || b.min.y >= st.max[1];
                assert!(sep, "building {:?} overlaps street {:?}", b, st);
            }
        }
    }

    #[test]
    fn zero_buildings_is_open_field() {
        let mut spec = ScenarioSpec::crossroad(3);
        spec.building_count = Some(0);
        let s = build_scenario(&spec).unwrap();
        assert!(s.buildings.is_empty());
    }

    #[test]
    fn wide_lane_default_layout() {
        let s = build_scenario(&ScenarioSpec::wide_lane(11)).unwrap();
        assert_eq!(s.routes.len(), 9);
        assert!(s.buildings.len() > 19, "wide lane places buildings more densely");
        // The central lane stays clear.
        for b in &s.buildings {
            assert!(b.max.x <= -18.0 || b.min.x >= 18.0);
        }
    }

    #[test]
    fn bad_extent_is_config_error() {
        let mut spec = ScenarioSpec::crossroad(1);
        spec.extent = Some((-10.0, 50.0));
        assert!(matches!(build_scenario(&spec), Err(SceneError::InvalidConfig(_))));
        spec.extent = Some((40.0, 40.0));
        assert!(matches!(build_scenario(&spec), Err(SceneError::InvalidConfig(_))));
    }

    #[test]
    fn snapshots_are_uniformly_spaced() {
        let mut spec = ScenarioSpec::crossroad(5);
        spec.routes = vec![RouteSpec {
            waypoints: vec![[0.0, 0.0, 63.3], [100.0, 0.0, 63.3]],
            snapshots: 3,
        }];
        let s = build_scenario(&spec).unwrap();
        let snaps = trajectory_snapshots(&s, 1).unwrap();
        assert_eq!(snaps.len(), 3);
        assert_eq!(snaps[0].uav_pos, Vec3::new(0.0, 0.0, 63.3));
        assert_eq!(snaps[1].uav_pos, Vec3::new(50.0, 0.0, 63.3));
        assert_eq!(snaps[2].uav_pos, Vec3::new(100.0, 0.0, 63.3));
        for sn in &snaps {
            assert_eq!(sn.uav_pos.z, 63.3);
            assert_eq!(sn.grid.center.x, sn.uav_pos.x);
            assert_eq!(sn.grid.center.y, sn.uav_pos.y);
        }
    }

    #[test]
    fn single_snapshot_sits_at_first_waypoint() {
        let mut spec = ScenarioSpec::crossroad(5);
        spec.routes = vec![RouteSpec {
            waypoints: vec![[-20.0, 30.0, 50.0], [80.0, 30.0, 50.0]],
            snapshots: 1,
        }];
        let s = build_scenario(&spec).unwrap();
        let snaps = trajectory_snapshots(&s, 1).unwrap();
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].uav_pos, Vec3::new(-20.0, 30.0, 50.0));
    }

    #[test]
    fn paper_scale_snapshot_totals() {
        // Three 350-snapshot routes plus four 260-snapshot routes: 2090
        // UAV positions in total for the crossroad scenario.
        let mut spec = ScenarioSpec::crossroad(7);
        spec.route_snapshots = vec![350, 350, 350, 260, 260, 260, 260];
        let s = build_scenario(&spec).unwrap();
        let total: usize = (1..=7).map(|r| trajectory_snapshots(&s, r).unwrap().len()).sum();
        assert_eq!(total, 2090);
    }

    #[test]
    fn unknown_route_is_not_found() {
        let s = build_scenario(&ScenarioSpec::crossroad(5)).unwrap();
        assert_eq!(trajectory_snapshots(&s, 99).unwrap_err(), SceneError::RouteNotFound(99));
    }

    #[test]
    fn rx_positions_tiny_lattice() {
        let grid = RxGrid {
            center: Vec3::new(0.0, 0.0, 0.0),
            side: 10.0,
            g: 2,
        };
        let pos = rx_positions(&grid);
        assert_eq!(
            pos,
            vec![
                Vec3::new(-5.0, -5.0, 0.0),
                Vec3::new(-5.0, 5.0, 0.0),
                Vec3::new(5.0, -5.0, 0.0),
                Vec3::new(5.0, 5.0, 0.0),
            ]
        );
    }

    #[test]
    fn rx_positions_paper_grid() {
        let grid = RxGrid {
            center: Vec3::new(12.0, -3.0, 0.0),
            side: 150.0,
            g: 30,
        };
        let pos = rx_positions(&grid);
        assert_eq!(pos.len(), 900);
        assert!(pos.iter().all(|p| p.z == 0.0));
    }

    proptest! {
        #[test]
        fn grid_translation_invariance(tx in -500.0f64..500.0, ty in -500.0f64..500.0) {
            let base = RxGrid { center: Vec3::new(0.0, 0.0, 0.0), side: 90.0, g: 5 };
            let moved = RxGrid { center: Vec3::new(tx, ty, 0.0), side: 90.0, g: 5 };
            let a = rx_positions(&base);
            let b = rx_positions(&moved);
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((q.x - (p.x + tx)).abs() < 1e-9);
                prop_assert!((q.y - (p.y + ty)).abs() < 1e-9);
                prop_assert_eq!(q.z, 0.0);
            }
        }

        #[test]
        fn nadir_alignment_holds(seed in 0u64..50, route in 1u32..8) {
            let s = build_scenario(&ScenarioSpec::crossroad(seed)).unwrap();
            for sn in trajectory_snapshots(&s, route).unwrap() {
                prop_assert_eq!(sn.grid.center.x, sn.uav_pos.x);
                prop_assert_eq!(sn.grid.center.y, sn.uav_pos.y);
            }
        }
    }
}
