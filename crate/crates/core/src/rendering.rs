//! Ray generation, hierarchical sampling, point-wise max composition,
//! and volume integration producing composed and decomposed pixel
//! outputs.
//!
//! Rendering happens in normalized coordinates: the dataset's annotation
//! sphere is mapped to the unit sphere at the origin. Inside-sphere
//! points are modeled by both fields under max composition; the space
//! beyond is background-only through the inverted-sphere parameterization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::params::{BoundParams, ParamSet};
use crate::diffcore::tape::{sigmoid, NodeId, RayLayout, Tape};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};
use crate::fields::{
    beta_s_node, inside_sphere_param, invert_sphere_param, opaque_density_tape,
    sdf_to_opaque_density, BackgroundField, ForegroundField, SphereAnnotation,
};

/// Pinhole camera: intrinsics in pixels, world-from-camera rigid pose,
/// image size. Camera frame is +x right, +y down, +z forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// rotation, row-major world-from-camera
    pub rot: [[f64; 3]; 3],
    /// camera position in world coordinates
    pub pos: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("camera focal lengths must be positive".into()));
        }
        // orthonormality of the rotation block
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| self.rot[k][i] * self.rot[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-8 {
                    return Err(Error::Config(format!(
                        "camera rotation not orthonormal (col {i}.col {j} = {dot})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Unit world-space direction through the center of pixel (row, col).
    pub fn pixel_dir(&self, row: u32, col: u32) -> [f64; 3] {
        let x = (col as f64 + 0.5 - self.cx) / self.fx;
        let y = (row as f64 + 0.5 - self.cy) / self.fy;
        let d_cam = [x, y, 1.0];
        let mut d = [0.0; 3];
        for i in 0..3 {
            d[i] = (0..3).map(|k| self.rot[i][k] * d_cam[k]).sum();
        }
        normalize(d)
    }

    /// 4x4 world-from-camera matrix, row-major.
    pub fn world_from_camera(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = self.rot[i][j];
            }
            m[i][3] = self.pos[i];
        }
        m[3][3] = 1.0;
        m
    }
}

/// A ray in normalized coordinates. `sphere_span` is the [t_near, t_far]
/// interval inside the unit sphere, or None when the ray misses it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub sphere_span: Option<(f64, f64)>,
}

impl Ray {
    /// Builds a normalized-frame ray from a world origin and direction.
    pub fn from_world(origin_w: [f64; 3], dir_w: [f64; 3], sphere: &SphereAnnotation) -> Ray {
        let origin = [
            (origin_w[0] - sphere.center[0]) / sphere.radius,
            (origin_w[1] - sphere.center[1]) / sphere.radius,
            (origin_w[2] - sphere.center[2]) / sphere.radius,
        ];
        let dir = normalize(dir_w);
        let span = unit_sphere_span(origin, dir);
        Ray {
            origin,
            dir,
            sphere_span: span,
        }
    }

    pub fn point_at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

/// Analytic intersection with the unit sphere; entry clamped to 0 when
/// the origin is inside. None when the ray misses or the sphere is
/// entirely behind the origin.
fn unit_sphere_span(o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
    let od = dot(o, d);
    let disc = od * od - (dot(o, o) - 1.0);
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t_far = -od + sq;
    if t_far < 0.0 {
        return None;
    }
    let t_near = (-od - sq).max(0.0);
    Some((t_near, t_far))
}

/// Casts rays through the given pixel centers, expressed in the
/// normalized sphere frame.
pub fn generate_rays(
    camera: &Camera,
    pixels: &[(u32, u32)],
    sphere: &SphereAnnotation,
) -> Result<Vec<Ray>> {
    camera.validate()?;
    sphere.validate()?;
    let mut rays = Vec::with_capacity(pixels.len());
    for &(row, col) in pixels {
        if row >= camera.height || col >= camera.width {
            return Err(Error::Domain(format!(
                "pixel ({row},{col}) outside {}x{} image",
                camera.width, camera.height
            )));
        }
        rays.push(Ray::from_world(
            camera.pos,
            camera.pixel_dir(row, col),
            sphere,
        ));
    }
    Ok(rays)
}

/// Sampling configuration. Defaults follow the reference training setup:
/// 64 uniform inside samples refined by 4 importance rounds of 16, plus
/// 64 background samples spaced uniformly in inverse radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub n_uniform: usize,
    pub importance_iters: usize,
    pub n_per_importance_iter: usize,
    pub n_outside: usize,
    /// background horizon: outside samples cover radii up to this value
    pub r_max: f64,
    /// stratified jitter; cell centers when false
    pub perturb: bool,
    /// sharpness of the first importance round (doubles per round)
    pub importance_base_sharpness: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            n_uniform: 64,
            importance_iters: 4,
            n_per_importance_iter: 16,
            n_outside: 64,
            r_max: 32.0,
            perturb: true,
            importance_base_sharpness: 64.0,
        }
    }
}

/// Per-ray samples, sorted by t. Inside samples lie within the unit
/// sphere, outside samples beyond it; `dt` entries pair with each sample,
/// the last one reaching to its segment end.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub t_inside: Vec<f64>,
    pub dt_inside: Vec<f64>,
    pub t_outside: Vec<f64>,
    pub dt_outside: Vec<f64>,
}

/// Anything that can report SDF values for a batch of points; used by
/// the hierarchical sampler so tests can inject analytic fields.
pub trait SdfSource {
    fn sdf_values(&self, pts: &Tensor) -> Result<Tensor>;
}

/// Full field interface consumed by the value-only render path.
pub trait FieldSource: SdfSource {
    /// (sdf, normal, color) at inside points
    fn fg_eval(&self, pts: &Tensor, dirs: &Tensor) -> Result<(Tensor, Tensor, Tensor)>;
    /// (sigma, color) at 4D-parameterized points
    fn bg_eval(&self, pts4: &Tensor, dirs: &Tensor) -> Result<(Tensor, Tensor)>;
    fn beta_s(&self) -> f64;
}

/// The trained neural fields behind the `FieldSource` interface.
pub struct NeuralFields<'a> {
    pub fg: &'a ForegroundField,
    pub bg: &'a BackgroundField,
    pub params: &'a ParamSet,
}

impl SdfSource for NeuralFields<'_> {
    fn sdf_values(&self, pts: &Tensor) -> Result<Tensor> {
        self.fg.sdf_batch(self.params, pts)
    }
}

impl FieldSource for NeuralFields<'_> {
    fn fg_eval(&self, pts: &Tensor, dirs: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let e = self.fg.eval(self.params, pts, dirs)?;
        Ok((e.sdf, e.normal, e.color))
    }

    fn bg_eval(&self, pts4: &Tensor, dirs: &Tensor) -> Result<(Tensor, Tensor)> {
        let e = self.bg.eval(self.params, pts4, dirs)?;
        Ok((e.sigma, e.color))
    }

    fn beta_s(&self) -> f64 {
        self.fg.beta_s(self.params)
    }
}

fn ray_rng(seed: u64, ray_index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed ^ ray_index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Hierarchical sampling for a batch of rays: stratified uniform inside
/// samples, then importance rounds concentrating where the current SDF
/// field produces high alpha, plus inverse-radius background samples.
/// Deterministic given (seed, ray index).
pub fn sample_batch(
    rays: &[Ray],
    sdf: &dyn SdfSource,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<Vec<SampleSet>> {
    let mut sets: Vec<SampleSet> = Vec::with_capacity(rays.len());
    let mut rngs: Vec<ChaCha12Rng> = (0..rays.len())
        .map(|i| ray_rng(seed, i as u64))
        .collect();

    // stratified uniform inside samples
    for (ray, rng) in rays.iter().zip(rngs.iter_mut()) {
        let mut set = SampleSet::default();
        if let Some((t0, t1)) = ray.sphere_span {
            if t1 > t0 {
                let n = cfg.n_uniform.max(1);
                let w = (t1 - t0) / n as f64;
                for k in 0..n {
                    let xi = if cfg.perturb { rng.gen::<f64>() } else { 0.5 };
                    set.t_inside.push(t0 + (k as f64 + xi) * w);
                }
            } else {
                // tangent ray: a single degenerate sample
                set.t_inside.push(t0);
            }
        }
        sets.push(set);
    }

    // importance rounds: evaluate SDF at current samples, add
    // n_per_importance_iter samples from the estimated alpha weights
    for round in 0..cfg.importance_iters {
        if cfg.n_per_importance_iter == 0 {
            break;
        }
        let sharp = cfg.importance_base_sharpness * (1u64 << round) as f64;

        // one batched SDF evaluation over every ray's current samples
        let mut rows = Vec::new();
        let mut owners = Vec::new();
        for (i, (ray, set)) in rays.iter().zip(&sets).enumerate() {
            for &t in &set.t_inside {
                rows.push(ray.point_at(t));
                owners.push(i);
            }
        }
        let mut all_sdf = vec![Vec::new(); rays.len()];
        if !rows.is_empty() {
            let mut pts = Tensor::zeros(rows.len(), 3);
            for (r, p) in rows.iter().enumerate() {
                pts.row_mut(r).copy_from_slice(p);
            }
            let s = sdf.sdf_values(&pts)?;
            for (r, &owner) in owners.iter().enumerate() {
                all_sdf[owner].push(s.get(r, 0));
            }
        }

        for i in 0..rays.len() {
            if sets[i].t_inside.len() < 2 {
                continue;
            }
            let new_ts = importance_round(
                &sets[i].t_inside,
                &all_sdf[i],
                sharp,
                cfg.n_per_importance_iter,
                cfg.perturb,
                &mut rngs[i],
            );
            merge_sorted(&mut sets[i].t_inside, new_ts);
        }
    }

    // dt for inside samples; outside samples from an independent stream
    for (i, (ray, set)) in rays.iter().zip(sets.iter_mut()).enumerate() {
        if let Some((_, t1)) = ray.sphere_span {
            set.dt_inside = deltas_to_end(&set.t_inside, t1);
        }
        let mut rng = ray_rng(seed.wrapping_add(0xB5E5_55E5), i as u64);
        let (t_out, dt_out) = outside_samples(ray, cfg, &mut rng);
        set.t_outside = t_out;
        set.dt_outside = dt_out;
    }

    Ok(sets)
}

/// Single-ray convenience wrapper over `sample_batch`.
pub fn sample_hierarchical(
    ray: &Ray,
    sdf: &dyn SdfSource,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<SampleSet> {
    Ok(sample_batch(std::slice::from_ref(ray), sdf, cfg, seed)?.remove(0))
}

/// New sample positions for one importance round: estimate per-interval
/// alpha from consecutive SDF values under a sharpened sigmoid, weight by
/// transmittance, and draw from the induced piecewise-constant pdf.
fn importance_round(
    ts: &[f64],
    svals: &[f64],
    sharp: f64,
    count: usize,
    perturb: bool,
    rng: &mut ChaCha12Rng,
) -> Vec<f64> {
    let n = ts.len();
    let mut weights = Vec::with_capacity(n - 1);
    let mut trans = 1.0;
    for i in 0..n - 1 {
        let dist = (ts[i + 1] - ts[i]).max(1e-9);
        let mid = 0.5 * (svals[i] + svals[i + 1]);
        let slope = ((svals[i + 1] - svals[i]) / dist).clamp(-1e3, 0.0);
        let prev_est = mid - 0.5 * slope * dist;
        let next_est = mid + 0.5 * slope * dist;
        let prev_cdf = sigmoid(sharp * prev_est);
        let next_cdf = sigmoid(sharp * next_est);
        let alpha = ((prev_cdf - next_cdf + 1e-6) / (prev_cdf + 1e-6)).clamp(0.0, 1.0);
        weights.push(trans * alpha + 1e-7);
        trans *= 1.0 - alpha;
    }
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cdf.push(acc);
    }
    *cdf.last_mut().unwrap() = 1.0;

    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let u = if perturb {
            rng.gen::<f64>()
        } else {
            (k as f64 + 0.5) / count as f64
        };
        let j = match cdf.binary_search_by(|v| v.partial_cmp(&u).unwrap()) {
            Ok(j) => j.min(weights.len() - 1),
            Err(j) => j.saturating_sub(1).min(weights.len() - 1),
        };
        let denom = (cdf[j + 1] - cdf[j]).max(1e-12);
        let frac = (u - cdf[j]) / denom;
        out.push(ts[j] + frac * (ts[j + 1] - ts[j]));
    }
    out
}

fn merge_sorted(base: &mut Vec<f64>, mut extra: Vec<f64>) {
    base.append(&mut extra);
    base.sort_by(|a, b| a.partial_cmp(b).unwrap());
}

fn deltas_to_end(ts: &[f64], end: f64) -> Vec<f64> {
    let n = ts.len();
    let mut dt = Vec::with_capacity(n);
    for i in 0..n {
        let next = if i + 1 < n { ts[i + 1] } else { end.max(ts[i]) };
        dt.push((next - ts[i]).max(0.0));
    }
    dt
}

/// Background samples: stratified in inverse radius from the sphere exit
/// (or the closest approach for rays that miss) out to `r_max`.
fn outside_samples(ray: &Ray, cfg: &SampleConfig, rng: &mut ChaCha12Rng) -> (Vec<f64>, Vec<f64>) {
    if cfg.n_outside == 0 {
        return (Vec::new(), Vec::new());
    }
    let od = dot(ray.origin, ray.dir);
    let r_start = match ray.sphere_span {
        Some(_) => 1.0,
        None => {
            let t_ca = (-od).max(0.0);
            norm3(ray.point_at(t_ca)).max(1.0)
        }
    };
    let u_start = 1.0 / r_start;
    let u_min = 1.0 / cfg.r_max;
    let n = cfg.n_outside;
    let t_of_r = |r: f64| -> f64 {
        let disc = od * od + r * r - dot(ray.origin, ray.origin);
        -od + disc.max(0.0).sqrt()
    };
    let mut ts = Vec::with_capacity(n);
    for k in 0..n {
        let xi = if cfg.perturb { rng.gen::<f64>() } else { 0.5 };
        let u = u_start - (k as f64 + xi) / n as f64 * (u_start - u_min);
        ts.push(t_of_r(1.0 / u));
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t_end = t_of_r(cfg.r_max);
    let dt = deltas_to_end(&ts, t_end);
    (ts, dt)
}

/// Per-pixel render outputs: composed color, total weight, and its
/// foreground/background split (W_f + W_b = W by construction).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderResult {
    pub color: [f64; 3],
    pub weight: f64,
    pub weight_fg: f64,
    pub weight_bg: f64,
}

/// Point-wise max composition of the two fields' outputs. Ties go to the
/// background, so `fg_wins` is strict.
pub fn compose_max(
    sigma_b: f64,
    rho_f: f64,
    c_b: [f64; 3],
    c_f: [f64; 3],
) -> (f64, [f64; 3], bool) {
    let fg_wins = rho_f > sigma_b;
    if fg_wins {
        (rho_f, c_f, true)
    } else {
        (sigma_b, c_b, false)
    }
}

/// One composed sample ready for integration.
#[derive(Debug, Clone, Copy)]
pub struct ComposedSample {
    pub sigma: f64,
    pub color: [f64; 3],
    pub dt: f64,
    pub fg_wins: bool,
}

/// Discrete volume rendering of one ray's composed samples:
/// alpha_i = 1 - exp(-sigma_i dt_i), T_i = prod_{j<i} (1 - alpha_j),
/// C = sum T a c, W = sum T a, W_f counts foreground-winning samples.
pub fn volume_render(samples: &[ComposedSample]) -> RenderResult {
    let mut t_acc = 1.0;
    let mut color = [0.0; 3];
    let mut wf = 0.0;
    let mut wb = 0.0;
    for s in samples {
        debug_assert!(s.sigma >= 0.0 && s.dt >= 0.0);
        let alpha = 1.0 - (-s.sigma * s.dt).exp();
        let ta = t_acc * alpha;
        for k in 0..3 {
            color[k] += ta * s.color[k];
        }
        // accumulate the split and define W as their sum, so
        // W_f + W_b = W holds bit-exactly
        if s.fg_wins {
            wf += ta;
        } else {
            wb += ta;
        }
        t_acc *= 1.0 - alpha;
    }
    RenderResult {
        color,
        weight: wf + wb,
        weight_fg: wf,
        weight_bg: wb,
    }
}

/// Value-only render of a batch of rays: sampling, field evaluation,
/// max composition, and integration. Deterministic given (fields, rays,
/// seed).
pub fn render_rays(
    fields: &dyn FieldSource,
    rays: &[Ray],
    cfg: &SampleConfig,
    seed: u64,
) -> Result<Vec<RenderResult>> {
    let sets = sample_batch(rays, as_sdf_source(fields), cfg, seed)?;
    let gather = GatheredSamples::build(rays, &sets);
    let beta_s = fields.beta_s();

    let (sdf, normal, c_f) = if gather.n_inside > 0 {
        fields.fg_eval(&gather.pts_in, &gather.dirs_in)?
    } else {
        (Tensor::zeros(0, 1), Tensor::zeros(0, 3), Tensor::zeros(0, 3))
    };
    let (sig_b_in, c_b_in) = if gather.n_inside > 0 {
        fields.bg_eval(&gather.pts4_in, &gather.dirs_in)?
    } else {
        (Tensor::zeros(0, 1), Tensor::zeros(0, 3))
    };
    let (sig_out, c_out) = if gather.n_outside > 0 {
        fields.bg_eval(&gather.pts4_out, &gather.dirs_out)?
    } else {
        (Tensor::zeros(0, 1), Tensor::zeros(0, 3))
    };

    // ds/dt = n . d, then the opaque density conversion
    let mut ds_dt = vec![0.0; gather.n_inside];
    for i in 0..gather.n_inside {
        ds_dt[i] = normal.get(i, 0) * gather.dirs_in.get(i, 0)
            + normal.get(i, 1) * gather.dirs_in.get(i, 1)
            + normal.get(i, 2) * gather.dirs_in.get(i, 2);
    }
    let svals: Vec<f64> = (0..gather.n_inside).map(|i| sdf.get(i, 0)).collect();
    let rho_f = sdf_to_opaque_density(&svals, &ds_dt, beta_s)?;

    let mut results = Vec::with_capacity(rays.len());
    for r in 0..rays.len() {
        let mut composed = Vec::with_capacity(
            gather.layout.offsets_in[r + 1] - gather.layout.offsets_in[r]
                + gather.layout.offsets_out[r + 1]
                - gather.layout.offsets_out[r],
        );
        for i in gather.layout.offsets_in[r]..gather.layout.offsets_in[r + 1] {
            let cb = [c_b_in.get(i, 0), c_b_in.get(i, 1), c_b_in.get(i, 2)];
            let cf = [c_f.get(i, 0), c_f.get(i, 1), c_f.get(i, 2)];
            let (sigma, color, fg_wins) = compose_max(sig_b_in.get(i, 0), rho_f[i], cb, cf);
            composed.push(ComposedSample {
                sigma,
                color,
                dt: gather.layout.dt_in[i],
                fg_wins,
            });
        }
        for i in gather.layout.offsets_out[r]..gather.layout.offsets_out[r + 1] {
            composed.push(ComposedSample {
                sigma: sig_out.get(i, 0),
                color: [c_out.get(i, 0), c_out.get(i, 1), c_out.get(i, 2)],
                dt: gather.layout.dt_out[i],
                fg_wins: false,
            });
        }
        results.push(volume_render(&composed));
    }
    Ok(results)
}

/// End-to-end single-pixel render.
pub fn render_pixel(
    fields: &dyn FieldSource,
    ray: &Ray,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<RenderResult> {
    Ok(render_rays(fields, std::slice::from_ref(ray), cfg, seed)?.remove(0))
}

fn as_sdf_source(f: &dyn FieldSource) -> &dyn SdfSource {
    f
}

/// Flattened per-batch sample geometry shared by both render paths.
pub struct GatheredSamples {
    pub layout: RayLayout,
    pub pts_in: Tensor,
    pub dirs_in: Tensor,
    pub pts4_in: Tensor,
    pub pts4_out: Tensor,
    pub dirs_out: Tensor,
    pub n_inside: usize,
    pub n_outside: usize,
}

impl GatheredSamples {
    pub fn build(rays: &[Ray], sets: &[SampleSet]) -> GatheredSamples {
        let n_inside: usize = sets.iter().map(|s| s.t_inside.len()).sum();
        let n_outside: usize = sets.iter().map(|s| s.t_outside.len()).sum();
        let mut pts_in = Tensor::zeros(n_inside, 3);
        let mut dirs_in = Tensor::zeros(n_inside, 3);
        let mut pts4_in = Tensor::zeros(n_inside, 4);
        let mut pts4_out = Tensor::zeros(n_outside, 4);
        let mut dirs_out = Tensor::zeros(n_outside, 3);
        let mut layout = RayLayout {
            offsets_in: Vec::with_capacity(rays.len() + 1),
            offsets_out: Vec::with_capacity(rays.len() + 1),
            dt_in: Vec::with_capacity(n_inside),
            dt_out: Vec::with_capacity(n_outside),
            fg_win: Vec::new(),
        };
        layout.offsets_in.push(0);
        layout.offsets_out.push(0);
        let (mut ii, mut oo) = (0usize, 0usize);
        for (ray, set) in rays.iter().zip(sets) {
            for (&t, &dt) in set.t_inside.iter().zip(&set.dt_inside) {
                let p = ray.point_at(t);
                // numeric safety: clamp just inside the unit sphere
                let n = norm3(p);
                let p = if n > 1.0 {
                    [p[0] / n, p[1] / n, p[2] / n]
                } else {
                    p
                };
                pts_in.row_mut(ii).copy_from_slice(&p);
                dirs_in.row_mut(ii).copy_from_slice(&ray.dir);
                pts4_in.row_mut(ii).copy_from_slice(&inside_sphere_param(p));
                layout.dt_in.push(dt);
                ii += 1;
            }
            for (&t, &dt) in set.t_outside.iter().zip(&set.dt_outside) {
                let p = ray.point_at(t);
                let n = norm3(p);
                let p = if n < 1.0 {
                    [p[0] / n.max(1e-9), p[1] / n.max(1e-9), p[2] / n.max(1e-9)]
                } else {
                    p
                };
                let inv = invert_sphere_param(p).expect("outside sample inside sphere");
                pts4_out.row_mut(oo).copy_from_slice(&inv);
                dirs_out.row_mut(oo).copy_from_slice(&ray.dir);
                layout.dt_out.push(dt);
                oo += 1;
            }
            layout.offsets_in.push(ii);
            layout.offsets_out.push(oo);
        }
        GatheredSamples {
            layout,
            pts_in,
            dirs_in,
            pts4_in,
            pts4_out,
            dirs_out,
            n_inside,
            n_outside,
        }
    }
}

/// Taped render outputs for a ray batch.
pub struct RenderTape {
    /// (rays, 5): [C_rgb, W, W_f]
    pub out: NodeId,
    pub color: NodeId,
    pub weight: NodeId,
    pub weight_fg: NodeId,
    /// foreground normals at inside samples, for the Eikonal term
    pub normals: Option<NodeId>,
    pub n_inside: usize,
}

/// Differentiable render of a ray batch over already-drawn samples.
/// Gradients flow to both fields' parameters through max composition
/// (winner branch only) and the fused compositor.
pub fn render_rays_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    fg: &ForegroundField,
    bg: &BackgroundField,
    rays: &[Ray],
    sets: &[SampleSet],
) -> RenderTape {
    let gather = GatheredSamples::build(rays, sets);
    let beta_s = beta_s_node(tape, bound);

    let (sigma_in, col_in, fg_mask, normals) = if gather.n_inside > 0 {
        let fg_eval = fg.eval_tape(tape, bound, &gather.pts_in, &gather.dirs_in);
        let dirs_leaf = tape.leaf(gather.dirs_in.clone());
        let nd = tape.mul(fg_eval.normal, dirs_leaf);
        let ds_dt = tape.row_sum(nd);
        let rho_f = opaque_density_tape(tape, fg_eval.sdf, ds_dt, beta_s);

        let bg_eval = bg.eval_tape(tape, bound, &gather.pts4_in, &gather.dirs_in);

        // winner mask from forward values; ties resolve to background
        let mask: Vec<bool> = tape
            .value(rho_f)
            .data()
            .iter()
            .zip(tape.value(bg_eval.sigma).data())
            .map(|(&r, &s)| r > s)
            .collect();
        let mask3: Vec<bool> = mask.iter().flat_map(|&m| [m, m, m]).collect();
        let sigma = tape.select(mask.clone(), rho_f, bg_eval.sigma);
        let color = tape.select(mask3, fg_eval.color, bg_eval.color);
        (Some(sigma), Some(color), mask, Some(fg_eval.normal))
    } else {
        (None, None, Vec::new(), None)
    };

    let (sigma_out, col_out) = if gather.n_outside > 0 {
        let bg_eval = bg.eval_tape(tape, bound, &gather.pts4_out, &gather.dirs_out);
        (bg_eval.sigma, bg_eval.color)
    } else {
        let s = tape.leaf(Tensor::zeros(0, 1));
        let c = tape.leaf(Tensor::zeros(0, 3));
        (s, c)
    };

    let (sigma_in, col_in) = match (sigma_in, col_in) {
        (Some(s), Some(c)) => (s, c),
        _ => {
            let s = tape.leaf(Tensor::zeros(0, 1));
            let c = tape.leaf(Tensor::zeros(0, 3));
            (s, c)
        }
    };

    let mut layout = gather.layout;
    layout.fg_win = fg_mask;

    let out = tape.composite_rays(sigma_in, col_in, sigma_out, col_out, layout);
    let color = tape.slice_cols(out, 0, 3);
    let weight = tape.slice_cols(out, 3, 4);
    let weight_fg = tape.slice_cols(out, 4, 5);
    RenderTape {
        out,
        color,
        weight,
        weight_fg,
        normals,
        n_inside: gather.n_inside,
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm3(a).max(1e-12);
    [a[0] / n, a[1] / n, a[2] / n]
}
