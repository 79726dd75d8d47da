//! Synthetic labeled scenes and their on-disk text format.
//!
//! A scene is a rectangular room with a floor and two walls (background,
//! labeled −1) plus a handful of solid primitives resting on the floor. Each
//! primitive is one instance; its class is the index of its kind in the shape
//! catalog. Background surfaces are thin layers on the room side of its
//! bounding planes, so floor points share voxels with the bottoms of objects;
//! no background point lies inside a solid.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3D;

pub const SCENE_HEADER: &str = "TD3D-SCENE v1";

/// Retries per object before a placement is declared infeasible.
pub const PLACEMENT_RETRIES: usize = 1000;

/// Thickness of the floor and wall layers, in meters (sensor noise).
const SLAB_THICKNESS: f64 = 0.025;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Box,
    Sphere,
    Cylinder,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Box => "box",
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cylinder => "cylinder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "box" => Some(ShapeKind::Box),
            "sphere" => Some(ShapeKind::Sphere),
            "cylinder" => Some(ShapeKind::Cylinder),
            _ => None,
        }
    }
}

/// One entry of the shape catalog. For boxes every edge is drawn from
/// `size_range`; spheres draw their diameter; cylinders (z-aligned) draw
/// diameter and height independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub size_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub room_extent: [f64; 3],
    pub object_count_range: (usize, usize),
    pub shape_catalog: Vec<ShapeSpec>,
    pub points_per_object_range: (usize, usize),
    pub floor_wall_point_count: usize,
    pub min_object_gap: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            room_extent: [1.6, 1.6, 0.4],
            object_count_range: (3, 5),
            shape_catalog: vec![
                ShapeSpec {
                    kind: ShapeKind::Box,
                    size_range: (0.16, 0.40),
                },
                ShapeSpec {
                    kind: ShapeKind::Sphere,
                    size_range: (0.18, 0.36),
                },
                ShapeSpec {
                    kind: ShapeKind::Cylinder,
                    size_range: (0.16, 0.36),
                },
            ],
            points_per_object_range: (300, 700),
            floor_wall_point_count: 3000,
            min_object_gap: 0.08,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.shape_catalog.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.room_extent.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad(format!("room_extent must be positive, got {:?}", self.room_extent));
        }
        let (lo, hi) = self.object_count_range;
        if lo > hi {
            return bad(format!("object_count_range empty: {lo}..{hi}"));
        }
        if hi == 0 {
            return bad("object_count_range admits only zero objects".into());
        }
        if self.shape_catalog.is_empty() {
            return bad("shape_catalog is empty".into());
        }
        for s in &self.shape_catalog {
            let (a, b) = s.size_range;
            if !(a > 0.0 && a <= b && b.is_finite()) {
                return bad(format!("size range for {} invalid: ({a}, {b})", s.kind.name()));
            }
        }
        let (pa, pb) = self.points_per_object_range;
        if pa < 2 || pa > pb {
            return bad(format!("points_per_object_range invalid: ({pa}, {pb})"));
        }
        if !(self.min_object_gap >= 0.0) {
            return bad(format!("min_object_gap must be >= 0, got {}", self.min_object_gap));
        }
        Ok(())
    }
}

/// Point cloud with optional per-point annotation (−1 where unlabeled).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub semantic_ids: Vec<i32>,
    pub instance_ids: Vec<i32>,
    pub num_classes: usize,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of instances (`K`); ids are contiguous so this is max id + 1.
    pub fn num_instances(&self) -> usize {
        self.instance_ids.iter().map(|&i| i + 1).max().unwrap_or(0).max(0) as usize
    }

    /// Point indices of instance `k`, ascending.
    pub fn instance_points(&self, k: usize) -> Vec<u32> {
        self.instance_ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == k as i32)
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Semantic class of every instance, indexed by instance id.
    pub fn instance_classes(&self) -> Vec<usize> {
        let mut classes = vec![0usize; self.num_instances()];
        for (&inst, &sem) in self.instance_ids.iter().zip(&self.semantic_ids) {
            if inst >= 0 {
                classes[inst as usize] = sem as usize;
            }
        }
        classes
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n == 0 {
            return Err(Error::Data("point cloud is empty".into()));
        }
        if self.semantic_ids.len() != n || self.instance_ids.len() != n {
            return Err(Error::Data("label arrays do not match point count".into()));
        }
        if let Some(i) = self.points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data(format!("non-finite coordinate at point {i}")));
        }
        check_labels(&self.semantic_ids, &self.instance_ids, self.num_classes).map_err(
            |(i, msg)| Error::Data(format!("point {i}: {msg}")),
        )
    }
}

/// Shared label validation. Returns the offending point index on failure.
fn check_labels(sem: &[i32], inst: &[i32], num_classes: usize) -> std::result::Result<(), (usize, String)> {
    let k = inst.iter().map(|&i| i + 1).max().unwrap_or(0).max(0) as usize;
    let mut class_of: Vec<Option<i32>> = vec![None; k];
    for (i, (&s, &id)) in sem.iter().zip(inst).enumerate() {
        if s < -1 || s >= num_classes as i32 {
            return Err((i, format!("semantic id {s} outside [-1, {num_classes})")));
        }
        if id < -1 {
            return Err((i, format!("instance id {id} < -1")));
        }
        if id >= 0 {
            if s < 0 {
                return Err((i, format!("instance {id} carries background semantic id")));
            }
            match class_of[id as usize] {
                None => class_of[id as usize] = Some(s),
                Some(c) if c != s => {
                    return Err((i, format!("instance {id} has semantic ids {c} and {s}")))
                }
                _ => {}
            }
        }
    }
    if let Some(missing) = class_of.iter().position(Option::is_none) {
        let at = inst.iter().position(|&id| id > missing as i32).unwrap_or(0);
        return Err((at, format!("instance ids not contiguous: {missing} is missing")));
    }
    Ok(())
}

/// A ground-truth instance box with its class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: Box3D,
    pub class_id: usize,
}

/// A cloud plus the tight box of each instance (indexed by instance id).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub boxes: Vec<GtBox>,
}

impl Scene {
    /// Recomputes tight instance boxes from the labels.
    pub fn from_cloud(cloud: PointCloud) -> Result<Scene> {
        let classes = cloud.instance_classes();
        let mut lo = vec![[f64::INFINITY; 3]; classes.len()];
        let mut hi = vec![[f64::NEG_INFINITY; 3]; classes.len()];
        for (p, &id) in cloud.points.iter().zip(&cloud.instance_ids) {
            if id >= 0 {
                for a in 0..3 {
                    lo[id as usize][a] = lo[id as usize][a].min(p[a]);
                    hi[id as usize][a] = hi[id as usize][a].max(p[a]);
                }
            }
        }
        let boxes = (0..classes.len())
            .map(|k| {
                Ok(GtBox {
                    bbox: Box3D::from_min_max(lo[k], hi[k])?,
                    class_id: classes[k],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scene { cloud, boxes })
    }
}

/// Solid primitive as placed in a scene. `min` is the corner of its bounding
/// box; `dims` are the bounding box edge lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub kind: ShapeKind,
    pub min: [f64; 3],
    pub dims: [f64; 3],
}

impl Primitive {
    pub fn bounds(&self) -> Box3D {
        let max = std::array::from_fn(|i| self.min[i] + self.dims[i]);
        Box3D::from_min_max(self.min, max).expect("primitive dims are positive")
    }

    /// Membership in unit-box coordinates `u` (0..1 along each edge).
    fn contains_unit(&self, u: [f64; 3]) -> bool {
        match self.kind {
            ShapeKind::Box => u.iter().all(|v| (0.0..=1.0).contains(v)),
            ShapeKind::Sphere => u.iter().map(|v| (2.0 * v - 1.0).powi(2)).sum::<f64>() <= 1.0,
            ShapeKind::Cylinder => {
                (0.0..=1.0).contains(&u[2])
                    && (2.0 * u[0] - 1.0).powi(2) + (2.0 * u[1] - 1.0).powi(2) <= 1.0
            }
        }
    }

    /// Whether `p` lies inside the solid (boundary included).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.contains_unit(std::array::from_fn(|i| (p[i] - self.min[i]) / self.dims[i]))
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        loop {
            let u: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
            if self.contains_unit(u) {
                return std::array::from_fn(|i| self.min[i] + u[i] * self.dims[i]);
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn uniform_usize(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

/// Generates one labeled scene. Deterministic in `config.seed`.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    generate_scene_with_primitives(config).map(|(scene, _)| scene)
}

/// Like [`generate_scene`] but also returns the placed primitives, indexed
/// by instance id.
pub fn generate_scene_with_primitives(config: &SceneConfig) -> Result<(Scene, Vec<Primitive>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let [rx, ry, rz] = config.room_extent;
    let gap = config.min_object_gap;

    let n_objects = uniform_usize(&mut rng, config.object_count_range);
    let mut placed: Vec<Primitive> = Vec::with_capacity(n_objects);
    for obj in 0..n_objects {
        let class = rng.random_range(0..config.shape_catalog.len());
        let spec = config.shape_catalog[class];
        let dims = match spec.kind {
            ShapeKind::Box => std::array::from_fn(|_| uniform(&mut rng, spec.size_range)),
            ShapeKind::Sphere => [uniform(&mut rng, spec.size_range); 3],
            ShapeKind::Cylinder => {
                let d = uniform(&mut rng, spec.size_range);
                [d, d, uniform(&mut rng, spec.size_range)]
            }
        };
        let free = [rx - dims[0] - 2.0 * gap, ry - dims[1] - 2.0 * gap];
        let mut found = None;
        if free[0] >= 0.0 && free[1] >= 0.0 && dims[2] <= rz {
            for _ in 0..PLACEMENT_RETRIES {
                let min = [
                    gap + rng.random::<f64>() * free[0],
                    gap + rng.random::<f64>() * free[1],
                    0.0,
                ];
                let cand = Primitive {
                    kind: spec.kind,
                    min,
                    dims,
                };
                let b = cand.bounds();
                if placed.iter().all(|p| p.bounds().gap(&b) >= gap) {
                    found = Some(cand);
                    break;
                }
            }
        }
        match found {
            Some(p) => placed.push(p),
            None => {
                return Err(Error::SceneInfeasible(format!(
                    "could not place object {obj} ({}, dims {dims:?}) after {PLACEMENT_RETRIES} \
                     retries; config {config:?}",
                    spec.kind.name()
                )))
            }
        }
    }

    let mut points = Vec::new();
    let mut sem = Vec::new();
    let mut inst = Vec::new();

    // Background: floor layer above z = 0, walls in front of x = 0 and
    // y = 0. Points inside a solid are redrawn (the floor under a box or
    // cylinder is hidden; around a sphere it is not).
    let areas = [rx * ry, ry * rz, rx * rz];
    let total_area: f64 = areas.iter().sum();
    let mut counts = areas.map(|a| (config.floor_wall_point_count as f64 * a / total_area) as usize);
    counts[0] += config.floor_wall_point_count - counts.iter().sum::<usize>();
    for (plane, &count) in counts.iter().enumerate() {
        let mut drawn = 0;
        while drawn < count {
            let layer = SLAB_THICKNESS * rng.random::<f64>();
            let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
            let p = match plane {
                0 => [a * rx, b * ry, layer],
                1 => [layer, a * ry, b * rz],
                _ => [a * rx, layer, b * rz],
            };
            if !placed.iter().any(|prim| prim.contains(p)) {
                points.push(p);
                drawn += 1;
            }
        }
    }
    sem.resize(points.len(), -1);
    inst.resize(points.len(), -1);

    for (k, prim) in placed.iter().enumerate() {
        let n = uniform_usize(&mut rng, config.points_per_object_range);
        let class = config
            .shape_catalog
            .iter()
            .position(|s| s.kind == prim.kind)
            .expect("kind comes from catalog");
        for _ in 0..n {
            points.push(prim.sample(&mut rng));
            sem.push(class as i32);
            inst.push(k as i32);
        }
    }

    let cloud = PointCloud {
        points,
        semantic_ids: sem,
        instance_ids: inst,
        num_classes: config.num_classes(),
    };
    let scene = Scene::from_cloud(cloud)?;
    Ok((scene, placed))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serializes a cloud in the versioned columnar text format.
pub fn scene_to_string(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 80);
    s.push_str(SCENE_HEADER);
    s.push('\n');
    let _ = writeln!(s, "{} {}", cloud.len(), cloud.num_classes);
    for ((p, sem), inst) in cloud.points.iter().zip(&cloud.semantic_ids).zip(&cloud.instance_ids) {
        let _ = writeln!(
            s,
            "{} {} {} {sem} {inst}",
            fmt_f64(p[0]),
            fmt_f64(p[1]),
            fmt_f64(p[2])
        );
    }
    s
}

pub fn write_scene(cloud: &PointCloud, path: &Path) -> Result<()> {
    cloud.validate()?;
    fs::write(path, scene_to_string(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text, path)
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, path: &Path, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::parse(path, line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::parse(path, line, format!("cannot parse {what} from `{tok}`")))
}

pub fn parse_scene(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == SCENE_HEADER => {}
        Some(h) => return Err(Error::parse(path, 1, format!("bad header `{h}`"))),
        None => return Err(Error::parse(path, 1, "empty file")),
    }
    let dims = lines.next().ok_or_else(|| Error::parse(path, 2, "missing `N C` line"))?;
    let mut toks = dims.split_whitespace();
    let n: usize = parse_num(toks.next(), path, 2, "point count")?;
    let c: usize = parse_num(toks.next(), path, 2, "class count")?;
    if toks.next().is_some() {
        return Err(Error::parse(path, 2, "trailing tokens"));
    }
    if n == 0 {
        return Err(Error::parse(path, 2, "scene has no points"));
    }
    let mut points = Vec::with_capacity(n);
    let mut sem = Vec::with_capacity(n);
    let mut inst = Vec::with_capacity(n);
    for i in 0..n {
        let line_no = i + 3;
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(path, line_no, format!("expected {n} points, found {i}")))?;
        let mut toks = line.split_whitespace();
        let mut p = [0.0f64; 3];
        for (a, v) in p.iter_mut().enumerate() {
            *v = parse_num(toks.next(), path, line_no, ["x", "y", "z"][a])?;
            if !v.is_finite() {
                return Err(Error::parse(path, line_no, "non-finite coordinate"));
            }
        }
        sem.push(parse_num(toks.next(), path, line_no, "semantic id")?);
        inst.push(parse_num(toks.next(), path, line_no, "instance id")?);
        if toks.next().is_some() {
            return Err(Error::parse(path, line_no, "trailing tokens"));
        }
        points.push(p);
    }
    for (j, rest) in lines.enumerate() {
        if !rest.trim().is_empty() {
            return Err(Error::parse(path, n + 3 + j, "unexpected content after last point"));
        }
    }
    check_labels(&sem, &inst, c).map_err(|(i, msg)| Error::parse(path, i + 3, msg))?;
    Ok(PointCloud {
        points,
        semantic_ids: sem,
        instance_ids: inst,
        num_classes: c,
    })
}

/// Sidecar path holding the GT boxes of a scene file.
pub fn boxes_path(scene_path: &Path) -> PathBuf {
    scene_path.with_extension("boxes")
}

pub fn boxes_to_string(boxes: &[GtBox]) -> String {
    let mut s = format!("{}\n", boxes.len());
    for b in boxes {
        let c = b.bbox.center;
        let z = b.bbox.size;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            fmt_f64(c[0]),
            fmt_f64(c[1]),
            fmt_f64(c[2]),
            fmt_f64(z[0]),
            fmt_f64(z[1]),
            fmt_f64(z[2]),
            b.class_id
        );
    }
    s
}

pub fn write_boxes(boxes: &[GtBox], path: &Path) -> Result<()> {
    fs::write(path, boxes_to_string(boxes)).map_err(|e| Error::io(path, e))
}

pub fn read_boxes(path: &Path) -> Result<Vec<GtBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let k: usize = parse_num(lines.next().map(str::trim), path, 1, "box count")?;
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let line_no = i + 2;
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(path, line_no, format!("expected {k} boxes, found {i}")))?;
        let mut toks = line.split_whitespace();
        let mut v = [0.0; 6];
        for x in v.iter_mut() {
            *x = parse_num(toks.next(), path, line_no, "box value")?;
        }
        let class_id = parse_num(toks.next(), path, line_no, "class")?;
        let bbox = Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
            .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        out.push(GtBox { bbox, class_id });
    }
    Ok(out)
}

/// Writes `<path>` and its `.boxes` sidecar.
pub fn write_scene_files(scene: &Scene, path: &Path) -> Result<()> {
    write_scene(&scene.cloud, path)?;
    write_boxes(&scene.boxes, &boxes_path(path))
}

/// Reads a scene file and its sidecar, checking that the sidecar agrees with
/// the labels.
pub fn read_scene_files(path: &Path) -> Result<Scene> {
    let cloud = read_scene(path)?;
    let boxes = read_boxes(&boxes_path(path))?;
    let scene = Scene::from_cloud(cloud)?;
    if scene.boxes != boxes {
        return Err(Error::Data(format!(
            "{}: boxes sidecar disagrees with instance labels",
            path.display()
        )));
    }
    Ok(scene)
}
