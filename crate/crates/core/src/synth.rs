//! Deterministic bi-temporal urban scenes with per-point change labels.
//!
//! Buildings are box shells sampled on roof and facades, vegetation is an
//! ellipsoidal canopy filled with points, mobile objects are small boxes on
//! the ground. Change directives alter the second epoch and every second-epoch
//! point receives its class by construction.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::{Epoch, Point, PointCloud};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Vegetation canopies are volume-sampled at `density * VEGETATION_FILL` points per m³.
const VEGETATION_FILL: f64 = 0.5;

/// Change classes in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u32)]
pub enum ChangeClass {
    Unchanged = 0,
    NewBuilding = 1,
    Demolition = 2,
    NewVegetation = 3,
    VegetationGrowth = 4,
    MissingVegetation = 5,
    MobileObject = 6,
}

impl ChangeClass {
    pub const ALL: [ChangeClass; 7] = [
        ChangeClass::Unchanged,
        ChangeClass::NewBuilding,
        ChangeClass::Demolition,
        ChangeClass::NewVegetation,
        ChangeClass::VegetationGrowth,
        ChangeClass::MissingVegetation,
        ChangeClass::MobileObject,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ChangeClass::Unchanged => "unchanged",
            ChangeClass::NewBuilding => "new_building",
            ChangeClass::Demolition => "demolition",
            ChangeClass::NewVegetation => "new_vegetation",
            ChangeClass::VegetationGrowth => "vegetation_growth",
            ChangeClass::MissingVegetation => "missing_vegetation",
            ChangeClass::MobileObject => "mobile_object",
        }
    }
}

pub const N_CLASSES: usize = 7;

/// Class ids counted as change (everything but unchanged).
pub fn change_class_ids() -> Vec<u32> {
    (1..N_CLASSES as u32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Building,
    Vegetation,
    MobileObject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Demolish,
    Add,
    Grow,
    Remove,
    Move,
}

/// Axis-aligned footprint, `(x, y)` is the minimum corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub depth: f64,
}

impl Footprint {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x && x <= self.x + self.width && y >= self.y && y <= self.y + self.depth
    }

    fn center(&self) -> (f64, f64) {
        (self.x + self.width / 2.0, self.y + self.depth / 2.0)
    }

    fn inside_ellipse(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = self.center();
        let (rx, ry) = (self.width / 2.0, self.depth / 2.0);
        ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
    }

    fn moved_to(&self, to: [f64; 2]) -> Footprint {
        Footprint {
            x: to[0],
            y: to[1],
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPlacement {
    pub id: u32,
    pub kind: ObjectKind,
    pub footprint: Footprint,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeDirective {
    pub object: u32,
    pub change: ChangeKind,
    /// Destination corner for `move`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<[f64; 2]>,
    /// Apex rise for `grow`; defaults to [`SceneSpec::growth_delta`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub schema: u32,
    /// Scene size in meters, origin at (0, 0).
    pub extent: [f64; 2],
    /// Isotropic Gaussian jitter applied to every sampled point.
    pub ground_noise_sigma: f64,
    /// Terrain gradient (dz/dx, dz/dy).
    #[serde(default)]
    pub ground_slope: [f64; 2],
    /// Points per square meter of sampled surface.
    pub density: f64,
    pub rng_seed: u64,
    #[serde(default = "default_growth")]
    pub growth_delta: f64,
    pub objects: Vec<ObjectPlacement>,
    #[serde(default)]
    pub changes: Vec<ChangeDirective>,
}

fn default_growth() -> f64 {
    3.0
}

/// Generated scene: both epochs and the ground-truth class of every pc2 point.
#[derive(Debug, Clone)]
pub struct LabeledScenePair {
    pub pc1: PointCloud,
    pub pc2: PointCloud,
    pub gt_labels: Vec<u32>,
}

impl LabeledScenePair {
    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        let mut c = [0; N_CLASSES];
        for &l in &self.gt_labels {
            c[l as usize] += 1;
        }
        c
    }
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        if self.schema != SCHEMA_VERSION {
            return err(format!("unsupported schema {}", self.schema));
        }
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return err("extent must be positive".into());
        }
        if !(self.density > 0.0) {
            return err("density must be > 0".into());
        }
        if !(self.ground_noise_sigma >= 0.0) {
            return err("noise sigma must be >= 0".into());
        }
        let mut ids = BTreeMap::new();
        for o in &self.objects {
            if ids.insert(o.id, o).is_some() {
                return err(format!("duplicate object id {}", o.id));
            }
            if !(o.height > 0.0) {
                return err(format!("object {} has non-positive height", o.id));
            }
            self.check_footprint(o.id, &o.footprint)?;
        }
        let mut seen = BTreeSet::new();
        for d in &self.changes {
            let Some(o) = ids.get(&d.object) else {
                return err(format!("change directive references unknown object {}", d.object));
            };
            if !seen.insert(d.object) {
                return err(format!("object {} has more than one change directive", d.object));
            }
            let ok = matches!(
                (o.kind, d.change),
                (_, ChangeKind::Add)
                    | (ObjectKind::Building, ChangeKind::Demolish)
                    | (ObjectKind::Vegetation, ChangeKind::Grow | ChangeKind::Remove)
                    | (ObjectKind::MobileObject, ChangeKind::Remove | ChangeKind::Move)
            );
            if !ok {
                return err(format!("{:?} cannot be applied to {:?} object {}", d.change, o.kind, o.id));
            }
            if d.change == ChangeKind::Move {
                let Some(to) = d.to else {
                    return err(format!("move of object {} needs a destination", o.id));
                };
                self.check_footprint(o.id, &o.footprint.moved_to(to))?;
            }
            if let Some(delta) = d.delta {
                if !(delta > 0.0) {
                    return err(format!("growth delta of object {} must be > 0", o.id));
                }
            }
        }
        Ok(())
    }

    fn check_footprint(&self, id: u32, f: &Footprint) -> Result<()> {
        let inside = f.width > 0.0
            && f.depth > 0.0
            && f.x >= 0.0
            && f.y >= 0.0
            && f.x + f.width <= self.extent[0]
            && f.y + f.depth <= self.extent[1];
        if inside {
            Ok(())
        } else {
            Err(Error::Spec(format!("footprint of object {id} lies outside the extent")))
        }
    }

    fn ground_z(&self, x: f64, y: f64) -> f64 {
        self.ground_slope[0] * x + self.ground_slope[1] * y
    }
}

/// How an object appears in one epoch.
struct Instance<'a> {
    placement: &'a ObjectPlacement,
    footprint: Footprint,
    height: f64,
    label: ChangeClass,
    /// Canopy before growth; points outside it are labeled growth.
    grown_from: Option<f64>,
}

struct Sampler<'a> {
    spec: &'a SceneSpec,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

impl Sampler<'_> {
    fn jitter(&mut self, p: [f64; 3]) -> Point {
        match self.noise {
            Some(n) => Point::new(
                p[0] + n.sample(&mut self.rng),
                p[1] + n.sample(&mut self.rng),
                p[2] + n.sample(&mut self.rng),
            ),
            None => Point::from(p),
        }
    }

    fn count(&self, area: f64) -> usize {
        (area * self.spec.density).round() as usize
    }

    fn box_shell(&mut self, f: &Footprint, height: f64, out: &mut Vec<Point>) {
        let (cx, cy) = f.center();
        let base = self.spec.ground_z(cx, cy);
        for _ in 0..self.count(f.width * f.depth) {
            let x = f.x + self.rng.random::<f64>() * f.width;
            let y = f.y + self.rng.random::<f64>() * f.depth;
            let p = self.jitter([x, y, base + height]);
            out.push(p);
        }
        let walls = [
            ([f.x, f.y], [f.width, 0.0]),
            ([f.x, f.y + f.depth], [f.width, 0.0]),
            ([f.x, f.y], [0.0, f.depth]),
            ([f.x + f.width, f.y], [0.0, f.depth]),
        ];
        for (origin, dir) in walls {
            let len = dir[0] + dir[1];
            for _ in 0..self.count(len * height) {
                let t = self.rng.random::<f64>();
                let z = self.rng.random::<f64>() * height;
                let p = self.jitter([origin[0] + t * dir[0], origin[1] + t * dir[1], base + z]);
                out.push(p);
            }
        }
    }

    /// Canopy ellipsoid: `(center_z, rz)` for a tree of total height `height`.
    fn canopy(&self, f: &Footprint, height: f64) -> (f64, f64) {
        let (cx, cy) = f.center();
        let rz = height / 3.0;
        (self.spec.ground_z(cx, cy) + height - rz, rz)
    }

    fn vegetation(&mut self, inst: &Instance, out: &mut Vec<Point>, labels: &mut Vec<u32>) {
        let f = inst.footprint;
        let (cx, cy) = f.center();
        let (rx, ry) = (f.width / 2.0, f.depth / 2.0);
        // growth keeps the canopy bottom and raises the apex
        let (base_cz, base_rz) = self.canopy(&f, inst.grown_from.unwrap_or(inst.height));
        let extra = inst.height - inst.grown_from.unwrap_or(inst.height);
        let rz = base_rz + extra / 2.0;
        let cz = base_cz + extra / 2.0;
        let volume = 4.0 / 3.0 * std::f64::consts::PI * rx * ry * rz;
        let n = (volume * self.spec.density * VEGETATION_FILL).round() as usize;
        let mut made = 0;
        while made < n {
            let u: [f64; 3] = [
                self.rng.random_range(-1.0..1.0),
                self.rng.random_range(-1.0..1.0),
                self.rng.random_range(-1.0..1.0),
            ];
            if u[0] * u[0] + u[1] * u[1] + u[2] * u[2] > 1.0 {
                continue;
            }
            made += 1;
            let p = [cx + u[0] * rx, cy + u[1] * ry, cz + u[2] * rz];
            let label = if inst.grown_from.is_some() {
                let old = ((p[0] - cx) / rx).powi(2)
                    + ((p[1] - cy) / ry).powi(2)
                    + ((p[2] - base_cz) / base_rz).powi(2);
                if old > 1.0 {
                    ChangeClass::VegetationGrowth
                } else {
                    ChangeClass::Unchanged
                }
            } else {
                inst.label
            };
            let p = self.jitter(p);
            out.push(p);
            labels.push(label.id());
        }
    }

    fn epoch(&mut self, instances: &[Instance], second: bool) -> (Vec<Point>, Vec<u32>) {
        let spec = self.spec;
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        // ground, occluded by buildings and vehicles of this epoch
        let occluders: Vec<Footprint> = instances
            .iter()
            .filter(|i| i.placement.kind != ObjectKind::Vegetation)
            .map(|i| i.footprint)
            .collect();
        let exposed = self.exposed_regions(second);
        let n = self.count(spec.extent[0] * spec.extent[1]);
        for _ in 0..n {
            let x = self.rng.random::<f64>() * spec.extent[0];
            let y = self.rng.random::<f64>() * spec.extent[1];
            if occluders.iter().any(|f| f.contains(x, y)) {
                continue;
            }
            let label = exposed
                .iter()
                .find(|(f, ellipse, _)| {
                    if *ellipse {
                        f.inside_ellipse(x, y)
                    } else {
                        f.contains(x, y)
                    }
                })
                .map(|e| e.2)
                .unwrap_or(ChangeClass::Unchanged);
            let p = self.jitter([x, y, spec.ground_z(x, y)]);
            pts.push(p);
            labels.push(label.id());
        }
        for inst in instances {
            match inst.placement.kind {
                ObjectKind::Building | ObjectKind::MobileObject => {
                    let start = pts.len();
                    self.box_shell(&inst.footprint, inst.height, &mut pts);
                    labels.extend(std::iter::repeat_n(inst.label.id(), pts.len() - start));
                }
                ObjectKind::Vegetation => self.vegetation(inst, &mut pts, &mut labels),
            }
        }
        (pts, labels)
    }

    /// Ground areas of pc2 uncovered by a change, with their class.
    fn exposed_regions(&self, second: bool) -> Vec<(Footprint, bool, ChangeClass)> {
        if !second {
            return Vec::new();
        }
        let objects: BTreeMap<u32, &ObjectPlacement> =
            self.spec.objects.iter().map(|o| (o.id, o)).collect();
        self.spec
            .changes
            .iter()
            .filter_map(|d| {
                let o = objects[&d.object];
                match (o.kind, d.change) {
                    (ObjectKind::Building, ChangeKind::Demolish) => {
                        Some((o.footprint, false, ChangeClass::Demolition))
                    }
                    (ObjectKind::Vegetation, ChangeKind::Remove) => {
                        Some((o.footprint, true, ChangeClass::MissingVegetation))
                    }
                    (ObjectKind::MobileObject, ChangeKind::Remove | ChangeKind::Move) => {
                        Some((o.footprint, false, ChangeClass::MobileObject))
                    }
                    _ => None,
                }
            })
            .collect()
    }
}

/// Generates both epochs of `spec`. Same spec, same output, bit for bit.
pub fn generate(spec: &SceneSpec) -> Result<LabeledScenePair> {
    spec.validate()?;
    let directives: BTreeMap<u32, &ChangeDirective> =
        spec.changes.iter().map(|d| (d.object, d)).collect();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for o in &spec.objects {
        let d = directives.get(&o.id);
        let change = d.map(|d| d.change);
        if change != Some(ChangeKind::Add) {
            first.push(Instance {
                placement: o,
                footprint: o.footprint,
                height: o.height,
                label: ChangeClass::Unchanged,
                grown_from: None,
            });
        }
        let new_label = match o.kind {
            ObjectKind::Building => ChangeClass::NewBuilding,
            ObjectKind::Vegetation => ChangeClass::NewVegetation,
            ObjectKind::MobileObject => ChangeClass::MobileObject,
        };
        let inst = match (change, d) {
            (Some(ChangeKind::Demolish | ChangeKind::Remove), _) => None,
            (Some(ChangeKind::Add), _) => Some(Instance {
                placement: o,
                footprint: o.footprint,
                height: o.height,
                label: new_label,
                grown_from: None,
            }),
            (Some(ChangeKind::Move), Some(d)) => Some(Instance {
                placement: o,
                footprint: o.footprint.moved_to(d.to.expect("validated destination")),
                height: o.height,
                label: ChangeClass::MobileObject,
                grown_from: None,
            }),
            (Some(ChangeKind::Grow), Some(d)) => Some(Instance {
                placement: o,
                footprint: o.footprint,
                height: o.height + d.delta.unwrap_or(spec.growth_delta),
                label: ChangeClass::Unchanged,
                grown_from: Some(o.height),
            }),
            _ => Some(Instance {
                placement: o,
                footprint: o.footprint,
                height: o.height,
                label: ChangeClass::Unchanged,
                grown_from: None,
            }),
        };
        second.extend(inst);
    }

    let noise = if spec.ground_noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.ground_noise_sigma).map_err(|e| Error::Spec(e.to_string()))?)
    } else {
        None
    };
    let mut sampler = Sampler {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.rng_seed),
        noise,
    };
    let (p1, _) = sampler.epoch(&first, false);
    let (p2, gt) = sampler.epoch(&second, true);
    let pc1 = PointCloud::new(p1, Epoch::First)?;
    let pc2 = PointCloud::new(p2, Epoch::Second)?.with_labels(gt.clone())?;
    Ok(LabeledScenePair {
        pc1,
        pc2,
        gt_labels: gt,
    })
}

/// Parameters of the random city-block layout used by [`urban_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UrbanParams {
    pub extent: [f64; 2],
    pub density: f64,
    pub noise_sigma: f64,
    /// Side of the square lots the extent is cut into.
    pub lot_size: f64,
    pub seed: u64,
}

impl Default for UrbanParams {
    fn default() -> Self {
        Self {
            extent: [200.0, 200.0],
            density: 1.0,
            noise_sigma: 0.05,
            lot_size: 25.0,
            seed: 1,
        }
    }
}

/// A random urban layout with every change class represented.
pub fn urban_scene(p: &UrbanParams) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5eed_0f_c17e);
    let nx = (p.extent[0] / p.lot_size).floor().max(1.0) as usize;
    let ny = (p.extent[1] / p.lot_size).floor().max(1.0) as usize;
    let lot = p.lot_size;
    let mut objects = Vec::new();
    let mut changes = Vec::new();
    let mut next_id = 0u32;
    let mut push = |objects: &mut Vec<ObjectPlacement>, kind, footprint, height| {
        let id = next_id;
        next_id += 1;
        objects.push(ObjectPlacement {
            id,
            kind,
            footprint,
            height,
        });
        id
    };
    for j in 0..ny {
        for i in 0..nx {
            let (ox, oy) = (i as f64 * lot, j as f64 * lot);
            let roll: f64 = rng.random();
            if roll < 0.4 {
                let w = rng.random_range(0.4..0.7) * lot;
                let d = rng.random_range(0.4..0.7) * lot;
                let x = ox + rng.random_range(1.0..(lot - w - 1.0));
                let y = oy + rng.random_range(1.0..(lot - d - 1.0));
                let h = rng.random_range(6.0..16.0);
                let id = push(
                    &mut objects,
                    ObjectKind::Building,
                    Footprint { x, y, width: w, depth: d },
                    h,
                );
                let c: f64 = rng.random();
                if c < 0.2 {
                    changes.push(directive(id, ChangeKind::Demolish));
                } else if c < 0.4 {
                    changes.push(directive(id, ChangeKind::Add));
                }
            } else if roll < 0.7 {
                let trees = rng.random_range(2..=4);
                for _ in 0..trees {
                    let diam = rng.random_range(4.0..8.0);
                    let x = ox + rng.random_range(1.0..(lot - diam - 1.0));
                    let y = oy + rng.random_range(1.0..(lot - diam - 1.0));
                    let h = rng.random_range(6.0..12.0);
                    let id = push(
                        &mut objects,
                        ObjectKind::Vegetation,
                        Footprint { x, y, width: diam, depth: diam },
                        h,
                    );
                    let c: f64 = rng.random();
                    if c < 0.2 {
                        changes.push(directive(id, ChangeKind::Grow));
                    } else if c < 0.4 {
                        changes.push(directive(id, ChangeKind::Remove));
                    } else if c < 0.6 {
                        changes.push(directive(id, ChangeKind::Add));
                    }
                }
            } else if roll < 0.85 {
                // a parking row: cars in slots, some of them move to the free slots
                let slots = ((lot - 2.0) / 3.0).floor() as usize;
                let mut free: Vec<usize> = (0..slots).collect();
                let n_cars = rng.random_range(2..=(slots / 2).max(2));
                let slot_fp = |s: usize| Footprint {
                    x: ox + 1.0 + s as f64 * 3.0,
                    y: oy + lot / 2.0 - 2.25,
                    width: 1.8,
                    depth: 4.5,
                };
                let mut cars = Vec::new();
                for _ in 0..n_cars.min(free.len()) {
                    let s = free.swap_remove(rng.random_range(0..free.len()));
                    let id = push(&mut objects, ObjectKind::MobileObject, slot_fp(s), 1.5);
                    cars.push(id);
                }
                for id in cars {
                    let c: f64 = rng.random();
                    if c < 0.3 && !free.is_empty() {
                        let s = free.swap_remove(rng.random_range(0..free.len()));
                        let fp = slot_fp(s);
                        changes.push(ChangeDirective {
                            object: id,
                            change: ChangeKind::Move,
                            to: Some([fp.x, fp.y]),
                            delta: None,
                        });
                    } else if c < 0.5 {
                        changes.push(directive(id, ChangeKind::Remove));
                    } else if c < 0.7 {
                        changes.push(directive(id, ChangeKind::Add));
                    }
                }
            }
        }
    }
    ensure_every_change(&objects, &mut changes);
    SceneSpec {
        schema: SCHEMA_VERSION,
        extent: p.extent,
        ground_noise_sigma: p.noise_sigma,
        ground_slope: [0.0, 0.0],
        density: p.density,
        rng_seed: p.seed,
        growth_delta: 3.0,
        objects,
        changes,
    }
}

fn directive(object: u32, change: ChangeKind) -> ChangeDirective {
    ChangeDirective {
        object,
        change,
        to: None,
        delta: None,
    }
}

/// Forces at least one object of each (kind, change) that yields a distinct class.
fn ensure_every_change(objects: &[ObjectPlacement], changes: &mut Vec<ChangeDirective>) {
    let wanted = [
        (ObjectKind::Building, ChangeKind::Add),
        (ObjectKind::Building, ChangeKind::Demolish),
        (ObjectKind::Vegetation, ChangeKind::Add),
        (ObjectKind::Vegetation, ChangeKind::Grow),
        (ObjectKind::Vegetation, ChangeKind::Remove),
        (ObjectKind::MobileObject, ChangeKind::Add),
    ];
    for (kind, change) in wanted {
        let present = changes.iter().any(|d| {
            d.change == change && objects.iter().any(|o| o.id == d.object && o.kind == kind)
        });
        if present {
            continue;
        }
        let directed: BTreeSet<u32> = changes.iter().map(|d| d.object).collect();
        if let Some(o) = objects
            .iter()
            .find(|o| o.kind == kind && !directed.contains(&o.id))
        {
            changes.push(directive(o.id, change));
        }
    }
}
