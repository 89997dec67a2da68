//! Synthetic scene generation with full ground truth: ray-traced
//! Lambertian renders of a primitive object over a procedural
//! background, analytic masks and depth, and per-region Gaussian
//! descriptors standing in for a pretrained feature backbone. Also the
//! dataset directory format.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::SphereAnnotation;
use crate::geometry::PointCloud;
use crate::maskgen::DescriptorMap;
use crate::rendering::Camera;
use crate::supervision::{self, MaskSet};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObjectShape {
    Single(Primitive),
    Union(Primitive, Primitive),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BackgroundShape {
    /// horizontal plane z = height
    Plane { height: f64 },
    /// interior of a large sphere; concave, catches every ray
    Bowl { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TextureId {
    Solid { color: [f64; 3] },
    Checker { scale: f64, a: [f64; 3], b: [f64; 3] },
    /// stripes along one axis (0=x, 1=y, 2=z)
    Stripes { axis: u8, scale: f64, a: [f64; 3], b: [f64; 3] },
}

impl TextureId {
    fn albedo(&self, p: [f64; 3]) -> [f64; 3] {
        match *self {
            TextureId::Solid { color } => color,
            TextureId::Checker { scale, a, b } => {
                let k = (p[0] / scale).floor() + (p[1] / scale).floor() + (p[2] / scale).floor();
                if (k as i64).rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
            TextureId::Stripes { axis, scale, a, b } => {
                let v = p[axis as usize];
                if ((v / scale).floor() as i64).rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub object: ObjectShape,
    pub object_texture: TextureId,
    pub background: BackgroundShape,
    pub background_texture: TextureId,
    pub camera: CameraRing,
    pub image_width: u32,
    pub image_height: u32,
    pub sphere: SphereAnnotation,
    pub seed: u64,
    /// descriptor dimensionality D
    pub descriptor_dim: u32,
    /// distance between region descriptor means, in units of the
    /// within-region standard deviation
    pub descriptor_separation: f64,
    /// carve one descriptor cluster that spans object and background
    /// pixels in every view, with view-alternating saliency
    pub straddle_cluster: bool,
    /// fraction of views held out for testing
    pub test_fraction: f64,
    pub light_dir: [f64; 3],
    pub ambient: f64,
    pub shadows: bool,
}

impl SceneSpec {
    /// Sphere object resting on a checkered plane, ringed by cameras.
    pub fn toy_default() -> SceneSpec {
        SceneSpec {
            name: "toy-sphere-on-plane".into(),
            object: ObjectShape::Single(Primitive::Sphere {
                center: [0.0, 0.0, 1.0],
                radius: 1.0,
            }),
            object_texture: TextureId::Stripes {
                axis: 2,
                scale: 0.35,
                a: [0.85, 0.3, 0.2],
                b: [0.9, 0.65, 0.2],
            },
            background: BackgroundShape::Plane { height: 0.0 },
            background_texture: TextureId::Checker {
                scale: 1.2,
                a: [0.25, 0.35, 0.55],
                b: [0.6, 0.65, 0.7],
            },
            camera: CameraRing {
                count: 28,
                radius: 7.5,
                elevation_deg: 35.0,
                fov_deg: 45.0,
            },
            image_width: 64,
            image_height: 64,
            sphere: SphereAnnotation {
                center: [0.0, 0.0, 1.0],
                radius: 2.5,
            },
            seed: 7,
            descriptor_dim: 8,
            descriptor_separation: 8.0,
            straddle_cluster: false,
            test_fraction: 0.3,
            light_dir: [-0.4, 0.3, -0.85],
            ambient: 0.35,
            shadows: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sphere.validate()?;
        if self.camera.count == 0 {
            return Err(Error::Config("camera ring needs at least one view".into()));
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test fraction {} outside [0,1)",
                self.test_fraction
            )));
        }
        if self.descriptor_dim < 4 {
            return Err(Error::Config("descriptor_dim must be at least 4".into()));
        }
        // the annotation sphere must enclose the object
        let enclosed = object_max_distance(&self.object, self.sphere.center);
        if enclosed > self.sphere.radius {
            return Err(Error::Config(format!(
                "annotation sphere (r={}) does not enclose the object (extent {enclosed:.3})",
                self.sphere.radius
            )));
        }
        // cameras must stay outside the annotation sphere and the object
        if self.camera.radius <= self.sphere.radius {
            return Err(Error::Config(
                "camera ring lies inside the annotation sphere".into(),
            ));
        }
        Ok(())
    }

    pub fn view_count(&self) -> usize {
        self.camera.count
    }

    /// Deterministic train/test split: test views spread evenly by index.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.camera.count;
        let n_test = (self.test_fraction * n as f64).round() as usize;
        let mut test: Vec<usize> = (0..n_test)
            .map(|k| ((k as f64 + 0.5) * n as f64 / n_test as f64).floor() as usize)
            .collect();
        test.dedup();
        let train: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
        (train, test)
    }
}

fn object_max_distance(shape: &ObjectShape, from: [f64; 3]) -> f64 {
    let prim_max = |p: &Primitive| -> f64 {
        match *p {
            Primitive::Sphere { center, radius } => dist(center, from) + radius,
            Primitive::Box {
                center,
                half_extents,
            } => {
                let mut worst2 = 0.0;
                for sx in [-1.0, 1.0] {
                    for sy in [-1.0, 1.0] {
                        for sz in [-1.0, 1.0] {
                            let corner = [
                                center[0] + sx * half_extents[0],
                                center[1] + sy * half_extents[1],
                                center[2] + sz * half_extents[2],
                            ];
                            let d = dist(corner, from);
                            if d > worst2 {
                                worst2 = d;
                            }
                        }
                    }
                }
                worst2
            }
        }
    };
    match shape {
        ObjectShape::Single(p) => prim_max(p),
        ObjectShape::Union(a, b) => prim_max(a).max(prim_max(b)),
    }
}

/// A ray hit with surface info.
#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    point: [f64; 3],
    normal: [f64; 3],
}

fn intersect_sphere(o: [f64; 3], d: [f64; 3], center: [f64; 3], radius: f64) -> Option<Hit> {
    let oc = sub(o, center);
    let b = dot(oc, d);
    let disc = b * b - (dot(oc, oc) - radius * radius);
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = if -b - sq > 1e-9 {
        -b - sq
    } else if -b + sq > 1e-9 {
        -b + sq
    } else {
        return None;
    };
    let point = add(o, scale(d, t));
    Some(Hit {
        t,
        point,
        normal: normalize(sub(point, center)),
    })
}

fn intersect_box(
    o: [f64; 3],
    d: [f64; 3],
    center: [f64; 3],
    half: [f64; 3],
) -> Option<Hit> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis0 = 0usize;
    for k in 0..3 {
        let lo = center[k] - half[k];
        let hi = center[k] + half[k];
        if d[k].abs() < 1e-12 {
            if o[k] < lo || o[k] > hi {
                return None;
            }
            continue;
        }
        let mut ta = (lo - o[k]) / d[k];
        let mut tb = (hi - o[k]) / d[k];
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        if ta > t0 {
            t0 = ta;
            axis0 = k;
        }
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    if t0 <= 1e-9 {
        return None; // origin inside or box behind
    }
    let point = add(o, scale(d, t0));
    let mut normal = [0.0; 3];
    normal[axis0] = if d[axis0] > 0.0 { -1.0 } else { 1.0 };
    Some(Hit {
        t: t0,
        point,
        normal,
    })
}

fn intersect_primitive(o: [f64; 3], d: [f64; 3], p: &Primitive) -> Option<Hit> {
    match *p {
        Primitive::Sphere { center, radius } => intersect_sphere(o, d, center, radius),
        Primitive::Box {
            center,
            half_extents,
        } => intersect_box(o, d, center, half_extents),
    }
}

fn intersect_object(o: [f64; 3], d: [f64; 3], shape: &ObjectShape) -> Option<Hit> {
    match shape {
        ObjectShape::Single(p) => intersect_primitive(o, d, p),
        ObjectShape::Union(a, b) => {
            match (intersect_primitive(o, d, a), intersect_primitive(o, d, b)) {
                (Some(x), Some(y)) => Some(if x.t <= y.t { x } else { y }),
                (Some(x), None) => Some(x),
                (None, Some(y)) => Some(y),
                (None, None) => None,
            }
        }
    }
}

fn intersect_background(o: [f64; 3], d: [f64; 3], shape: &BackgroundShape) -> Option<Hit> {
    match *shape {
        BackgroundShape::Plane { height } => {
            if d[2].abs() < 1e-12 {
                return None;
            }
            let t = (height - o[2]) / d[2];
            if t <= 1e-9 {
                return None;
            }
            Some(Hit {
                t,
                point: add(o, scale(d, t)),
                normal: [0.0, 0.0, 1.0],
            })
        }
        BackgroundShape::Bowl { center, radius } => {
            // camera sits inside the bowl: take the far root
            let oc = sub(o, center);
            let b = dot(oc, d);
            let disc = b * b - (dot(oc, oc) - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let t = -b + disc.sqrt();
            if t <= 1e-9 {
                return None;
            }
            let point = add(o, scale(d, t));
            Some(Hit {
                t,
                point,
                normal: normalize(sub(center, point)),
            })
        }
    }
}

/// Pixel provenance used for descriptor regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    Object,
    Straddle,
    BackgroundNear,
    BackgroundFar,
    Sky,
}

impl Region {
    fn index(self) -> usize {
        match self {
            Region::Object => 0,
            Region::Straddle => 1,
            Region::BackgroundNear => 2,
            Region::BackgroundFar => 3,
            Region::Sky => 4,
        }
    }
}

const NUM_REGIONS: usize = 5;

fn classify_region(spec: &SceneSpec, hit_object: bool, p: [f64; 3]) -> Region {
    let c = spec.sphere.center;
    if hit_object {
        if spec.straddle_cluster {
            // an equatorial band of the object surface joins the straddle
            // cluster
            let band_half = 0.22 * spec.sphere.radius * 0.4;
            if (p[2] - c[2]).abs() < band_half {
                return Region::Straddle;
            }
        }
        Region::Object
    } else {
        let r_xy = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
        if spec.straddle_cluster {
            // an annulus of the floor around the object joins the same
            // cluster; roughly twice the band's pixel share
            let (lo, hi) = (0.55 * spec.sphere.radius, 1.05 * spec.sphere.radius);
            if r_xy >= lo && r_xy < hi {
                return Region::Straddle;
            }
        }
        if r_xy < 1.6 * spec.sphere.radius {
            Region::BackgroundNear
        } else {
            Region::BackgroundFar
        }
    }
}

/// Whether the straddle cluster reads as salient in a given view; the
/// alternation across views reproduces inconsistent coarse features.
pub fn straddle_salient_in_view(view: usize) -> bool {
    view % 2 == 0
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SceneSpec,
    pub cameras: Vec<Camera>,
    /// 8-bit RGB, row-major H*W*3 per view
    pub images: Vec<Vec<u8>>,
    pub gt_masks: Vec<Vec<bool>>,
    /// per-pixel depth along the ray; infinity for sky
    pub depths: Vec<Vec<f64>>,
    pub descriptors: Vec<DescriptorMap>,
    /// supervision masks; produced by mask generation, absent right
    /// after scene generation
    pub masks: Vec<Option<MaskSet>>,
    pub sphere: SphereAnnotation,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl SyntheticDataset {
    pub fn image_rgb(&self, view: usize, pixel: usize) -> [f64; 3] {
        let img = &self.images[view];
        [
            img[pixel * 3] as f64 / 255.0,
            img[pixel * 3 + 1] as f64 / 255.0,
            img[pixel * 3 + 2] as f64 / 255.0,
        ]
    }

    pub fn require_masks(&self) -> Result<()> {
        for &i in &self.train_idx {
            if self.masks[i].is_none() {
                return Err(Error::MissingInput(format!(
                    "train view {i} has no supervision masks; generate masks first"
                )));
            }
        }
        Ok(())
    }
}

fn ring_camera(spec: &SceneSpec, view: usize) -> Camera {
    let ring = &spec.camera;
    let angle = 2.0 * std::f64::consts::PI * view as f64 / ring.count as f64;
    let elev = ring.elevation_deg.to_radians();
    let target = spec.sphere.center;
    let pos = [
        target[0] + ring.radius * elev.cos() * angle.cos(),
        target[1] + ring.radius * elev.cos() * angle.sin(),
        target[2] + ring.radius * elev.sin(),
    ];
    // +z forward toward the target, +y down in world -z-ish
    let fwd = normalize(sub(target, pos));
    let world_up = if fwd[2].abs() > 0.999 {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let right = normalize(cross(fwd, world_up));
    let down = cross(fwd, right);
    let rot = [
        [right[0], down[0], fwd[0]],
        [right[1], down[1], fwd[1]],
        [right[2], down[2], fwd[2]],
    ];
    let focal = spec.image_width as f64 / (2.0 * (ring.fov_deg.to_radians() / 2.0).tan());
    Camera {
        fx: focal,
        fy: focal,
        cx: spec.image_width as f64 / 2.0,
        cy: spec.image_height as f64 / 2.0,
        rot,
        pos,
        width: spec.image_width,
        height: spec.image_height,
    }
}

/// Ray-traced dataset with analytic ground truth, deterministic in the
/// spec seed.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let n_views = spec.view_count();
    let (w, h) = (spec.image_width as usize, spec.image_height as usize);
    let light = normalize(spec.light_dir);
    let sky = [0.75, 0.82, 0.92];

    let mut cameras = Vec::with_capacity(n_views);
    let mut images = Vec::with_capacity(n_views);
    let mut gt_masks = Vec::with_capacity(n_views);
    let mut depths = Vec::with_capacity(n_views);
    let mut descriptors = Vec::with_capacity(n_views);

    // region descriptor means: separation along a distinct axis each
    let sep = spec.descriptor_separation;
    let mu = |region: usize, d: usize| -> f64 {
        if d == region {
            sep
        } else {
            0.0
        }
    };

    for view in 0..n_views {
        let cam = ring_camera(spec, view);
        cam.validate()?;
        // a camera inside the object would see nothing sensible
        if intersect_object(cam.pos, [0.0, 0.0, 1.0], &spec.object).map_or(false, |h| h.t < 1e-6) {
            return Err(Error::Config(format!("camera {view} starts inside the object")));
        }
        let mut img = vec![0u8; w * h * 3];
        let mut mask = vec![false; w * h];
        let mut depth = vec![f64::INFINITY; w * h];
        let mut desc = Vec::with_capacity(w * h * spec.descriptor_dim as usize);
        let mut sal = Vec::with_capacity(w * h);
        let mut rng = ChaCha12Rng::seed_from_u64(
            spec.seed ^ (view as u64).wrapping_mul(0xA076_1D64_78BD_642F),
        );
        let straddle_salient = straddle_salient_in_view(view);

        for row in 0..h {
            for col in 0..w {
                let pixel = row * w + col;
                let dir = cam.pixel_dir(row as u32, col as u32);
                let obj_hit = intersect_object(cam.pos, dir, &spec.object);
                let bg_hit = intersect_background(cam.pos, dir, &spec.background);

                let (is_object, hit) = match (obj_hit, bg_hit) {
                    (Some(o), Some(b)) => {
                        if o.t < b.t {
                            (true, Some(o))
                        } else {
                            (false, Some(b))
                        }
                    }
                    (Some(o), None) => (true, Some(o)),
                    (None, Some(b)) => (false, Some(b)),
                    (None, None) => (false, None),
                };

                let (rgb, region) = match hit {
                    Some(hitp) => {
                        let albedo = if is_object {
                            spec.object_texture.albedo(hitp.point)
                        } else {
                            spec.background_texture.albedo(hitp.point)
                        };
                        let mut lambert = (-dot(hitp.normal, light)).max(0.0);
                        if spec.shadows && !is_object {
                            // object blocks the light toward the source
                            let to_light = scale(light, -1.0);
                            let start = add(hitp.point, scale(to_light, 1e-6));
                            if intersect_object(start, to_light, &spec.object).is_some() {
                                lambert = 0.0;
                            }
                        }
                        let shade = spec.ambient + (1.0 - spec.ambient) * lambert;
                        let rgb = [
                            (albedo[0] * shade).clamp(0.0, 1.0),
                            (albedo[1] * shade).clamp(0.0, 1.0),
                            (albedo[2] * shade).clamp(0.0, 1.0),
                        ];
                        depth[pixel] = hitp.t;
                        mask[pixel] = is_object;
                        (rgb, classify_region(spec, is_object, hitp.point))
                    }
                    None => (sky, Region::Sky),
                };

                for k in 0..3 {
                    img[pixel * 3 + k] = (rgb[k] * 255.0 + 0.5) as u8;
                }

                // descriptor: region mean + unit Gaussian noise
                let ridx = region.index();
                for d in 0..spec.descriptor_dim as usize {
                    let noise: f64 = {
                        // Box-Muller from two uniforms
                        let u1: f64 = rng.gen::<f64>().max(1e-12);
                        let u2: f64 = rng.gen();
                        (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos()
                    };
                    desc.push((mu(ridx.min(3), d) + noise) as f32);
                }
                let s_base = match region {
                    Region::Object => 0.85,
                    Region::Straddle => {
                        if straddle_salient {
                            0.85
                        } else {
                            0.15
                        }
                    }
                    _ => 0.15,
                };
                let jitter = rng.gen::<f64>() * 0.06 - 0.03;
                sal.push(((s_base + jitter).clamp(0.0, 1.0)) as f32);
            }
        }

        descriptors.push(DescriptorMap {
            width: spec.image_width,
            height: spec.image_height,
            dim: spec.descriptor_dim,
            view_id: view as u32,
            ref_id: 0,
            descriptors: desc,
            saliency: sal,
        });
        cameras.push(cam);
        images.push(img);
        gt_masks.push(mask);
        depths.push(depth);
    }

    let (train_idx, test_idx) = spec.split();
    Ok(SyntheticDataset {
        spec: spec.clone(),
        cameras,
        images,
        gt_masks,
        depths,
        descriptors,
        masks: vec![None; n_views],
        sphere: spec.sphere,
        train_idx,
        test_idx,
    })
}

/// Area-weighted analytic samples of the object surface, for Chamfer
/// evaluation against reconstructed meshes. Points inside the other
/// union member are rejected.
pub fn object_surface_cloud(shape: &ObjectShape, count: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sample_prim = |p: &Primitive, rng: &mut ChaCha12Rng| -> [f64; 3] {
        match *p {
            Primitive::Sphere { center, radius } => {
                // uniform direction via normalized Gaussian triple
                loop {
                    let v = [
                        rng.gen::<f64>() * 2.0 - 1.0,
                        rng.gen::<f64>() * 2.0 - 1.0,
                        rng.gen::<f64>() * 2.0 - 1.0,
                    ];
                    let n2 = dot(v, v);
                    if n2 > 1e-6 && n2 <= 1.0 {
                        let n = n2.sqrt();
                        return add(center, scale(v, radius / n));
                    }
                }
            }
            Primitive::Box {
                center,
                half_extents: he,
            } => {
                let areas = [he[1] * he[2], he[0] * he[2], he[0] * he[1]];
                let total: f64 = areas.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut axis = 2;
                for (k, &a) in areas.iter().enumerate() {
                    if u < a {
                        axis = k;
                        break;
                    }
                    u -= a;
                }
                let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = if k == axis {
                        side * he[k]
                    } else {
                        (rng.gen::<f64>() * 2.0 - 1.0) * he[k]
                    };
                }
                add(center, p)
            }
        }
    };
    let inside = |p: &Primitive, x: [f64; 3]| -> bool {
        match *p {
            Primitive::Sphere { center, radius } => dist(x, center) < radius - 1e-9,
            Primitive::Box {
                center,
                half_extents,
            } => (0..3).all(|k| (x[k] - center[k]).abs() < half_extents[k] - 1e-9),
        }
    };
    let mut points = Vec::with_capacity(count);
    let mut guard = 0;
    while points.len() < count && guard < count * 20 {
        guard += 1;
        match shape {
            ObjectShape::Single(p) => points.push(sample_prim(p, &mut rng)),
            ObjectShape::Union(a, b) => {
                let (surf, other) = if rng.gen::<bool>() { (a, b) } else { (b, a) };
                let x = sample_prim(surf, &mut rng);
                if !inside(other, x) {
                    points.push(x);
                }
            }
        }
    }
    PointCloud { points }
}

// Dataset directory layout:
//   manifest.json, cameras.json, sphere.json,
//   images/0000.png .., masks_gt/0000.png .., depth/0000.bin ..,
//   descriptors/0000.bin .., masks_coarse/0000.png .., masks_cluster/0000.png ..

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    name: String,
    views: usize,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    has_masks: Vec<bool>,
    spec: SceneSpec,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    /// 4x4 world-from-camera, row-major
    world_from_camera: [[f64; 4]; 4],
}

fn view_path(dir: &Path, sub: &str, index: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{index:04}.{ext}"))
}

pub fn save_dataset(d: &SyntheticDataset, dir: &Path) -> Result<()> {
    for sub in [
        "images",
        "masks_gt",
        "depth",
        "descriptors",
        "masks_coarse",
        "masks_cluster",
    ] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }

    let n = d.cameras.len();
    for v in 0..n {
        let img = image::RgbImage::from_raw(
            d.spec.image_width,
            d.spec.image_height,
            d.images[v].clone(),
        )
        .ok_or_else(|| Error::Shape("image buffer mismatch".into()))?;
        let p = view_path(dir, "images", v, "png");
        img.save(&p)
            .map_err(|e| Error::io(&p, std::io::Error::other(e)))?;

        supervision::save_binary_mask(
            &view_path(dir, "masks_gt", v, "png"),
            d.spec.image_width,
            d.spec.image_height,
            &d.gt_masks[v],
        )?;

        let dp = view_path(dir, "depth", v, "bin");
        let mut bytes = Vec::with_capacity(d.depths[v].len() * 8);
        for &z in &d.depths[v] {
            bytes.extend_from_slice(&z.to_le_bytes());
        }
        std::fs::write(&dp, bytes).map_err(|e| Error::io(&dp, e))?;

        d.descriptors[v].save(&view_path(dir, "descriptors", v, "bin"))?;

        if let Some(masks) = &d.masks[v] {
            supervision::save_binary_mask(
                &view_path(dir, "masks_coarse", v, "png"),
                masks.width,
                masks.height,
                &masks.coarse,
            )?;
            supervision::save_cluster_map(
                &view_path(dir, "masks_cluster", v, "png"),
                masks.width,
                masks.height,
                &masks.clusters,
            )?;
        }
    }

    let cameras: Vec<CameraRecord> = d
        .cameras
        .iter()
        .map(|c| CameraRecord {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            world_from_camera: c.world_from_camera(),
        })
        .collect();
    let cam_path = dir.join("cameras.json");
    std::fs::write(
        &cam_path,
        serde_json::to_string_pretty(&cameras).map_err(|e| Error::Config(e.to_string()))?,
    )
    .map_err(|e| Error::io(&cam_path, e))?;

    let sphere_path = dir.join("sphere.json");
    std::fs::write(
        &sphere_path,
        serde_json::to_string_pretty(&d.sphere).map_err(|e| Error::Config(e.to_string()))?,
    )
    .map_err(|e| Error::io(&sphere_path, e))?;

    let manifest = Manifest {
        version: DATASET_VERSION,
        name: d.spec.name.clone(),
        views: n,
        train_idx: d.train_idx.clone(),
        test_idx: d.test_idx.clone(),
        has_masks: d.masks.iter().map(|m| m.is_some()).collect(),
        spec: d.spec.clone(),
    };
    let man_path = dir.join("manifest.json");
    std::fs::write(
        &man_path,
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?,
    )
    .map_err(|e| Error::io(&man_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let man_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Version(format!(
            "dataset version {}, this build reads {DATASET_VERSION}",
            manifest.version
        )));
    }

    let cam_path = dir.join("cameras.json");
    let cam_text = std::fs::read_to_string(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
    let cam_records: Vec<CameraRecord> =
        serde_json::from_str(&cam_text).map_err(|e| Error::Config(format!("cameras: {e}")))?;
    let cameras: Vec<Camera> = cam_records
        .iter()
        .map(|r| {
            let m = &r.world_from_camera;
            Camera {
                fx: r.fx,
                fy: r.fy,
                cx: r.cx,
                cy: r.cy,
                rot: [
                    [m[0][0], m[0][1], m[0][2]],
                    [m[1][0], m[1][1], m[1][2]],
                    [m[2][0], m[2][1], m[2][2]],
                ],
                pos: [m[0][3], m[1][3], m[2][3]],
                width: r.width,
                height: r.height,
            }
        })
        .collect();

    let sphere_path = dir.join("sphere.json");
    let sphere_text =
        std::fs::read_to_string(&sphere_path).map_err(|e| Error::io(&sphere_path, e))?;
    let sphere: SphereAnnotation =
        serde_json::from_str(&sphere_text).map_err(|e| Error::Config(format!("sphere: {e}")))?;

    let must_exist = |p: PathBuf| -> Result<PathBuf> {
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingInput(p.display().to_string()))
        }
    };

    let n = manifest.views;
    let mut images = Vec::with_capacity(n);
    let mut gt_masks = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    let mut descriptors = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for v in 0..n {
        let img_path = must_exist(view_path(dir, "images", v, "png"))?;
        let img = image::open(&img_path)
            .map_err(|e| Error::io(&img_path, std::io::Error::other(e)))?
            .into_rgb8();
        images.push(img.into_raw());

        let (_, _, mask) =
            supervision::load_binary_mask(&must_exist(view_path(dir, "masks_gt", v, "png"))?)?;
        gt_masks.push(mask);

        let dp = must_exist(view_path(dir, "depth", v, "bin"))?;
        let bytes = std::fs::read(&dp).map_err(|e| Error::io(&dp, e))?;
        depths.push(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );

        descriptors.push(DescriptorMap::load(&must_exist(view_path(
            dir,
            "descriptors",
            v,
            "bin",
        ))?)?);

        if manifest.has_masks[v] {
            let (w, h, coarse) = supervision::load_binary_mask(&must_exist(view_path(
                dir,
                "masks_coarse",
                v,
                "png",
            ))?)?;
            let (_, _, clusters) = supervision::load_cluster_map(&must_exist(view_path(
                dir,
                "masks_cluster",
                v,
                "png",
            ))?)?;
            masks.push(Some(MaskSet {
                width: w,
                height: h,
                coarse,
                clusters,
            }));
        } else {
            masks.push(None);
        }
    }

    Ok(SyntheticDataset {
        spec: manifest.spec,
        cameras,
        images,
        gt_masks,
        depths,
        descriptors,
        masks,
        sphere,
        train_idx: manifest.train_idx,
        test_idx: manifest.test_idx,
    })
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    dot(sub(a, b), sub(a, b)).sqrt()
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt().max(1e-12);
    scale(a, 1.0 / n)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projected_disc_area_matches_mask_pixel_count() {
        // centered sphere, camera on axis at distance 3, subtending 30
        // degrees; high resolution keeps discretization under 2%
        let mut spec = SceneSpec::toy_default();
        let half_angle = 15.0f64.to_radians();
        let obj_r = 3.0 * half_angle.sin();
        spec.object = ObjectShape::Single(Primitive::Sphere {
            center: [0.0, 0.0, 0.0],
            radius: obj_r,
        });
        spec.sphere = SphereAnnotation {
            center: [0.0, 0.0, 0.0],
            radius: 1.2 * obj_r,
        };
        spec.background = BackgroundShape::Plane { height: -10.0 };
        spec.camera = CameraRing {
            count: 1,
            radius: 3.0,
            elevation_deg: 90.0, // on the axis
            fov_deg: 40.0,
        };
        spec.image_width = 256;
        spec.image_height = 256;
        let data = generate_scene(&spec).unwrap();

        let count = data.gt_masks[0].iter().filter(|&&m| m).count() as f64;
        let cam = &data.cameras[0];
        let disc_r_px = cam.fx * half_angle.tan();
        let analytic = std::f64::consts::PI * disc_r_px * disc_r_px;
        let rel = (count - analytic).abs() / analytic;
        assert!(rel < 0.02, "mask {count} px vs analytic {analytic:.1} ({rel:.3})");
    }

    #[test]
    fn same_seed_reproduces_dataset_exactly() {
        let mut spec = SceneSpec::toy_default();
        spec.image_width = 24;
        spec.image_height = 24;
        spec.camera.count = 4;
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masks_agree_with_depth_ordering() {
        let mut spec = SceneSpec::toy_default();
        spec.image_width = 32;
        spec.image_height = 32;
        spec.camera.count = 3;
        let data = generate_scene(&spec).unwrap();
        for v in 0..3 {
            let cam = &data.cameras[v];
            for (pixel, &m) in data.gt_masks[v].iter().enumerate() {
                let row = (pixel / 32) as u32;
                let col = (pixel % 32) as u32;
                let dir = cam.pixel_dir(row, col);
                let obj = intersect_object(cam.pos, dir, &spec.object).map(|h| h.t);
                let bg = intersect_background(cam.pos, dir, &spec.background).map(|h| h.t);
                let expect = match (obj, bg) {
                    (Some(o), Some(b)) => o < b,
                    (Some(_), None) => true,
                    _ => false,
                };
                assert_eq!(m, expect, "view {v} pixel {pixel}");
                if m {
                    assert!(data.depths[v][pixel].is_finite());
                }
            }
        }
    }

    #[test]
    fn straddle_cluster_spans_object_and_background_in_every_view() {
        let mut spec = SceneSpec::toy_default();
        spec.image_width = 48;
        spec.image_height = 48;
        spec.camera.count = 6;
        spec.straddle_cluster = true;
        let data = generate_scene(&spec).unwrap();
        let sep = spec.descriptor_separation;

        for v in 0..6 {
            let desc = &data.descriptors[v];
            let mut straddle_fg = 0;
            let mut straddle_bg = 0;
            let mut other_regions_straddle = 0;
            for p in 0..desc.pixels() {
                let d = desc.descriptor(p);
                // nearest region mean along the 4 region axes
                let mut best = (4usize, f64::INFINITY);
                for region in 0..4 {
                    let mut dist2 = 0.0;
                    for (k, &dv) in d.iter().enumerate() {
                        let m = if k == region { sep } else { 0.0 };
                        dist2 += (dv as f64 - m).powi(2);
                    }
                    if dist2 < best.1 {
                        best = (region, dist2);
                    }
                }
                let is_straddle = best.0 == 1;
                let on_object = data.gt_masks[v][p];
                if is_straddle {
                    if on_object {
                        straddle_fg += 1;
                    } else {
                        straddle_bg += 1;
                    }
                } else if best.0 == 0 && !on_object {
                    other_regions_straddle += 1;
                }
            }
            assert!(
                straddle_fg > 0 && straddle_bg > 0,
                "view {v}: straddle covers fg={straddle_fg} bg={straddle_bg}"
            );
            // the object cluster itself stays on the object
            assert!(
                other_regions_straddle < 5,
                "view {v}: object cluster leaked to background {other_regions_straddle} px"
            );
        }
    }

    #[test]
    fn dataset_round_trip_and_missing_file_errors() {
        let mut spec = SceneSpec::toy_default();
        spec.image_width = 16;
        spec.image_height = 16;
        spec.camera.count = 3;
        let mut data = generate_scene(&spec).unwrap();
        // attach masks to one view to exercise both branches
        data.masks[1] = Some(MaskSet {
            width: 16,
            height: 16,
            coarse: data.gt_masks[1].clone(),
            clusters: vec![2u8; 256],
        });

        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(data, loaded);

        // deleting a mask file must name it in the error
        let victim = dir.path().join("masks_gt").join("0002.png");
        std::fs::remove_file(&victim).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(format!("{err}").contains("0002"), "{err}");

        // newer version is an explicit version error
        let man = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&man).unwrap();
        std::fs::write(&man, text.replace("\"version\": 1", "\"version\": 2")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Version(_)));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_sized() {
        let spec = SceneSpec::toy_default();
        let (train, test) = spec.split();
        assert_eq!(train.len(), 20);
        assert_eq!(test.len(), 8);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..28).collect::<Vec<_>>());
    }

    #[test]
    fn object_cloud_sits_on_the_surface() {
        let shape = ObjectShape::Union(
            Primitive::Sphere {
                center: [0.0, 0.0, 1.0],
                radius: 1.0,
            },
            Primitive::Box {
                center: [0.9, 0.0, 0.6],
                half_extents: [0.5, 0.4, 0.6],
            },
        );
        let cloud = object_surface_cloud(&shape, 500, 3);
        assert_eq!(cloud.points.len(), 500);
        for p in &cloud.points {
            let on_sphere = (dist(*p, [0.0, 0.0, 1.0]) - 1.0).abs() < 1e-9;
            let on_box = (0..3).any(|k| {
                let c = [0.9, 0.0, 0.6][k];
                let h = [0.5, 0.4, 0.6][k];
                ((p[k] - c).abs() - h).abs() < 1e-9
            });
            assert!(on_sphere || on_box);
        }
    }
}
