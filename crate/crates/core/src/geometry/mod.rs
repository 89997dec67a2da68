//! Surface extraction (marching cubes over an SDF grid) and the two
//! evaluation metrics: Chamfer distance and intersection-over-union.

mod mc_tables;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rendering::SdfSource;

/// N^3 SDF samples over the axis-aligned cube [-1,1]^3 enclosing the
/// unit sphere. Index order is x-major: value(ix, iy, iz) at
/// data[(ix*n + iy)*n + iz].
#[derive(Debug, Clone)]
pub struct SdfGrid {
    pub n: usize,
    pub values: Vec<f64>,
}

impl SdfGrid {
    pub fn spacing(&self) -> f64 {
        2.0 / (self.n as f64 - 1.0)
    }

    pub fn coord(&self, i: usize) -> f64 {
        -1.0 + i as f64 * self.spacing()
    }

    #[inline]
    pub fn value(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[(ix * self.n + iy) * self.n + iz]
    }
}

/// Evaluates the SDF on the grid in batched slabs.
pub fn sample_sdf_grid(sdf: &dyn SdfSource, n: usize) -> Result<SdfGrid> {
    if n < 2 {
        return Err(Error::Config(format!("grid resolution {n} < 2")));
    }
    let mut values = Vec::with_capacity(n * n * n);
    let spacing = 2.0 / (n as f64 - 1.0);
    let coord = |i: usize| -1.0 + i as f64 * spacing;
    // one x-slab per batch keeps peak memory at n^2 x 3
    let mut pts = Tensor::zeros(n * n, 3);
    for ix in 0..n {
        let x = coord(ix);
        for iy in 0..n {
            for iz in 0..n {
                let row = iy * n + iz;
                pts.set(row, 0, x);
                pts.set(row, 1, coord(iy));
                pts.set(row, 2, coord(iz));
            }
        }
        let s = sdf.sdf_values(&pts)?;
        values.extend_from_slice(s.data());
    }
    Ok(SdfGrid { n, values })
}

#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    fn triangle_area(&self, t: &[usize; 3]) -> f64 {
        let a = self.vertices[t[0]];
        let b = self.vertices[t[1]];
        let c = self.vertices[t[2]];
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cx = u[1] * v[2] - u[2] * v[1];
        let cy = u[2] * v[0] - u[0] * v[2];
        let cz = u[0] * v[1] - u[1] * v[0];
        0.5 * (cx * cx + cy * cy + cz * cz).sqrt()
    }

    /// Area-uniform point samples on the surface.
    pub fn sample_surface(&self, count: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let areas: Vec<f64> = self.triangles.iter().map(|t| self.triangle_area(t)).collect();
        let total: f64 = areas.iter().sum();
        let mut cdf = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a / total;
            cdf.push(acc);
        }
        let mut points = Vec::with_capacity(count);
        for _ in 0..count {
            let u = rng.gen::<f64>();
            let ti = match cdf.binary_search_by(|v| v.partial_cmp(&u).unwrap()) {
                Ok(i) => i,
                Err(i) => i.min(cdf.len() - 1),
            };
            let t = &self.triangles[ti];
            let (mut r1, r2) = (rng.gen::<f64>(), rng.gen::<f64>());
            r1 = r1.sqrt();
            let (w0, w1, w2) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
            let a = self.vertices[t[0]];
            let b = self.vertices[t[1]];
            let c = self.vertices[t[2]];
            points.push([
                w0 * a[0] + w1 * b[0] + w2 * c[0],
                w0 * a[1] + w1 * b[1] + w2 * c[1],
                w0 * a[2] + w1 * b[2] + w2 * c[2],
            ]);
        }
        PointCloud { points }
    }

    /// ASCII OBJ with the inverse normalization recorded in a header
    /// comment (scale then translate maps mesh coordinates back to
    /// scene units).
    pub fn save_obj(&self, path: &Path, scale: f64, translate: [f64; 3]) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(&mut f);
        writeln!(
            w,
            "# normalized coordinates; scene = {scale} * v + ({}, {}, {})",
            translate[0], translate[1], translate[2]
        )
        .and_then(|_| {
            for v in &self.vertices {
                writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
            }
            for t in &self.triangles {
                writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
            }
            Ok(())
        })
        .map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn save_xyz(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(&mut f);
        for p in &self.points {
            writeln!(w, "{} {} {}", p[0], p[1], p[2]).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Standard 256-case marching cubes with linear edge interpolation.
/// Grids that never change sign produce an empty mesh. Vertices shared
/// along cell edges are welded.
pub fn marching_cubes(grid: &SdfGrid, iso: f64) -> TriangleMesh {
    let n = grid.n;
    let mut mesh = TriangleMesh::default();
    // edge -> vertex index cache, keyed by (cell corner linear id, axis)
    let mut edge_cache: std::collections::HashMap<(usize, u8), usize> =
        std::collections::HashMap::new();

    let corner_offsets: [[usize; 3]; 8] = [
        [0, 0, 0],
        [1, 0, 0],
        [1, 1, 0],
        [0, 1, 0],
        [0, 0, 1],
        [1, 0, 1],
        [1, 1, 1],
        [0, 1, 1],
    ];
    let edge_connections: [[usize; 2]; 12] = [
        [0, 1],
        [1, 2],
        [2, 3],
        [3, 0],
        [4, 5],
        [5, 6],
        [6, 7],
        [7, 4],
        [0, 4],
        [1, 5],
        [2, 6],
        [3, 7],
    ];

    for ix in 0..n - 1 {
        for iy in 0..n - 1 {
            for iz in 0..n - 1 {
                let mut vals = [0.0f64; 8];
                let mut cube_index = 0usize;
                for (c, off) in corner_offsets.iter().enumerate() {
                    vals[c] = grid.value(ix + off[0], iy + off[1], iz + off[2]);
                    if vals[c] < iso {
                        cube_index |= 1 << c;
                    }
                }
                if mc_tables::EDGE_TABLE[cube_index] == 0 {
                    continue;
                }

                let mut edge_vertex = [usize::MAX; 12];
                for (e, conn) in edge_connections.iter().enumerate() {
                    if mc_tables::EDGE_TABLE[cube_index] & (1 << e) == 0 {
                        continue;
                    }
                    let (c0, c1) = (conn[0], conn[1]);
                    let g0 = [
                        ix + corner_offsets[c0][0],
                        iy + corner_offsets[c0][1],
                        iz + corner_offsets[c0][2],
                    ];
                    let g1 = [
                        ix + corner_offsets[c1][0],
                        iy + corner_offsets[c1][1],
                        iz + corner_offsets[c1][2],
                    ];
                    // canonical key: lower corner id + axis of the edge
                    let lin = |g: [usize; 3]| (g[0] * n + g[1]) * n + g[2];
                    let (lo, hi) = if lin(g0) <= lin(g1) { (g0, g1) } else { (g1, g0) };
                    let axis = if hi[0] != lo[0] {
                        0u8
                    } else if hi[1] != lo[1] {
                        1
                    } else {
                        2
                    };
                    let key = (lin(lo), axis);
                    let idx = *edge_cache.entry(key).or_insert_with(|| {
                        let (v0, v1) = (vals[c0], vals[c1]);
                        let t = if (v1 - v0).abs() < 1e-30 {
                            0.5
                        } else {
                            ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0)
                        };
                        let p0 = [grid.coord(g0[0]), grid.coord(g0[1]), grid.coord(g0[2])];
                        let p1 = [grid.coord(g1[0]), grid.coord(g1[1]), grid.coord(g1[2])];
                        mesh.vertices.push([
                            p0[0] + t * (p1[0] - p0[0]),
                            p0[1] + t * (p1[1] - p0[1]),
                            p0[2] + t * (p1[2] - p0[2]),
                        ]);
                        mesh.vertices.len() - 1
                    });
                    edge_vertex[e] = idx;
                }

                let tri = &mc_tables::TRIANGLE_TABLE[cube_index];
                let mut i = 0;
                while i < tri.len() && tri[i] != -1 {
                    let a = edge_vertex[tri[i] as usize];
                    let b = edge_vertex[tri[i + 1] as usize];
                    let c = edge_vertex[tri[i + 2] as usize];
                    if a != b && b != c && a != c {
                        mesh.triangles.push([a, b, c]);
                    }
                    i += 3;
                }
            }
        }
    }
    mesh
}

/// Symmetric Chamfer distance: half the sum of the two mean
/// nearest-neighbor distances. Brute force O(|a| |b|).
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(Error::Domain("chamfer distance of an empty cloud".into()));
    }
    let mean_nn = |from: &PointCloud, to: &PointCloud| -> f64 {
        let mut acc = 0.0;
        for p in &from.points {
            let mut best = f64::INFINITY;
            for q in &to.points {
                let dx = p[0] - q[0];
                let dy = p[1] - q[1];
                let dz = p[2] - q[2];
                let d2 = dx * dx + dy * dy + dz * dz;
                if d2 < best {
                    best = d2;
                }
            }
            acc += best.sqrt();
        }
        acc / from.points.len() as f64
    };
    Ok(0.5 * (mean_nn(a, b) + mean_nn(b, a)))
}

/// Intersection-over-union of the foreground class. An empty union
/// counts as 1 when both masks are empty, else 0.
pub fn miou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "miou mask sizes {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Two-class mean IoU (foreground and background averaged), for
/// consumers that read "mIoU" that way.
pub fn miou_two_class(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let fg = miou(pred, gt)?;
    let pred_inv: Vec<bool> = pred.iter().map(|&p| !p).collect();
    let gt_inv: Vec<bool> = gt.iter().map(|&g| !g).collect();
    let bg = miou(&pred_inv, &gt_inv)?;
    Ok(0.5 * (fg + bg))
}

/// Per-scene metrics report written by evaluation commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scene: String,
    pub miou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cd: Option<f64>,
    pub per_view: Vec<ViewMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub miou: f64,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("metrics encode: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct AnalyticSphere {
        radius: f64,
    }

    impl SdfSource for AnalyticSphere {
        fn sdf_values(&self, pts: &Tensor) -> Result<Tensor> {
            let mut out = Tensor::zeros(pts.rows(), 1);
            for r in 0..pts.rows() {
                let p = pts.row(r);
                out.set(
                    r,
                    0,
                    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - self.radius,
                );
            }
            Ok(out)
        }
    }

    struct PlaneZ;

    impl SdfSource for PlaneZ {
        fn sdf_values(&self, pts: &Tensor) -> Result<Tensor> {
            let mut out = Tensor::zeros(pts.rows(), 1);
            for r in 0..pts.rows() {
                out.set(r, 0, pts.row(r)[2]);
            }
            Ok(out)
        }
    }

    #[test]
    fn grid_samples_hit_analytic_values() {
        let grid = sample_sdf_grid(&AnalyticSphere { radius: 0.5 }, 9).unwrap();
        // center sample
        assert!((grid.value(4, 4, 4) + 0.5).abs() < 1e-12);
        // corner sample: sqrt(3) - 0.5
        assert!((grid.value(0, 0, 0) - (3.0f64.sqrt() - 0.5)).abs() < 1e-12);
        assert!((grid.spacing() - 0.25).abs() < 1e-15);
        for n in [2usize, 5, 33] {
            let g = sample_sdf_grid(&AnalyticSphere { radius: 0.5 }, n).unwrap();
            assert!((g.spacing() - 2.0 / (n as f64 - 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn all_positive_grid_gives_empty_mesh() {
        let grid = SdfGrid {
            n: 4,
            values: vec![1.0; 64],
        };
        let mesh = marching_cubes(&grid, 0.0);
        assert!(mesh.is_empty());
    }

    #[test]
    fn sphere_mesh_area_within_five_percent() {
        let grid = sample_sdf_grid(&AnalyticSphere { radius: 0.5 }, 64).unwrap();
        let mesh = marching_cubes(&grid, 0.0);
        assert!(!mesh.is_empty());
        let area = mesh.surface_area();
        let analytic = 4.0 * std::f64::consts::PI * 0.25;
        assert!(
            (area - analytic).abs() / analytic < 0.05,
            "area {area} vs analytic {analytic}"
        );
    }

    #[test]
    fn planar_field_interpolates_exactly() {
        let grid = sample_sdf_grid(&PlaneZ, 17).unwrap();
        let mesh = marching_cubes(&grid, 0.0);
        assert!(!mesh.is_empty());
        let tol = grid.spacing() * 1e-6;
        for v in &mesh.vertices {
            assert!(v[2].abs() <= tol, "vertex z = {}", v[2]);
        }
    }

    #[test]
    fn mesh_vertices_lie_between_opposite_sign_samples() {
        let grid = sample_sdf_grid(&AnalyticSphere { radius: 0.6 }, 16).unwrap();
        let mesh = marching_cubes(&grid, 0.0);
        let h = grid.spacing();
        for v in &mesh.vertices {
            // every vertex is on a grid edge: at least two coordinates sit
            // on the lattice, within fp tolerance
            let on_lattice = v
                .iter()
                .filter(|&&c| {
                    let k = (c + 1.0) / h;
                    (k - k.round()).abs() < 1e-9
                })
                .count();
            assert!(on_lattice >= 2, "vertex {v:?} not on a grid edge");
            // and the sdf there is small
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 0.6).abs() < h, "vertex radius {r}");
        }
    }

    #[test]
    fn chamfer_examples_and_symmetry() {
        let a = PointCloud {
            points: vec![[0.0, 0.0, 0.0]],
        };
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);

        let b = PointCloud {
            points: vec![[1.0, 0.0, 0.0]],
        };
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 1.0);

        assert!(chamfer_distance(&a, &PointCloud::default()).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force_oracle_on_random_clouds() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let cloud = |rng: &mut ChaCha12Rng, n: usize| PointCloud {
            points: (0..n)
                .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
                .collect(),
        };
        let a = cloud(&mut rng, 500);
        let b = cloud(&mut rng, 500);
        let got = chamfer_distance(&a, &b).unwrap();

        // independent O(n^2) summation, written differently
        let one_way = |from: &PointCloud, to: &PointCloud| {
            from.points
                .iter()
                .map(|p| {
                    to.points
                        .iter()
                        .map(|q| {
                            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                                .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / from.points.len() as f64
        };
        let oracle = 0.5 * (one_way(&a, &b) + one_way(&b, &a));
        assert!((got - oracle).abs() < 1e-12);
        let sym = chamfer_distance(&b, &a).unwrap();
        assert!((got - sym).abs() < 1e-15);
    }

    #[test]
    fn miou_examples() {
        let a = vec![true, true, false, false];
        assert_eq!(miou(&a, &a).unwrap(), 1.0);
        let b = vec![false, false, true, true];
        assert_eq!(miou(&a, &b).unwrap(), 0.0);

        // pred = top half, gt = left half of a 4x4 image
        let n = 4;
        let mut pred = vec![false; n * n];
        let mut gt = vec![false; n * n];
        for r in 0..n {
            for c in 0..n {
                if r < n / 2 {
                    pred[r * n + c] = true;
                }
                if c < n / 2 {
                    gt[r * n + c] = true;
                }
            }
        }
        assert!((miou(&pred, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-12);

        // empty union
        let empty = vec![false; 4];
        assert_eq!(miou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(miou(&a, &empty).unwrap(), 0.0);
    }

    #[test]
    fn miou_invariant_to_transposition() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let (h, w) = (6, 9);
        let pred: Vec<bool> = (0..h * w).map(|_| rng.gen()).collect();
        let gt: Vec<bool> = (0..h * w).map(|_| rng.gen()).collect();
        let transpose = |m: &[bool]| -> Vec<bool> {
            let mut out = vec![false; h * w];
            for r in 0..h {
                for c in 0..w {
                    out[c * h + r] = m[r * w + c];
                }
            }
            out
        };
        let a = miou(&pred, &gt).unwrap();
        let b = miou(&transpose(&pred), &transpose(&gt)).unwrap();
        assert_eq!(a, b);
        let two = miou_two_class(&pred, &gt).unwrap();
        assert!((0.0..=1.0).contains(&two));
    }

    #[test]
    fn mesh_export_and_sampling() {
        let grid = sample_sdf_grid(&AnalyticSphere { radius: 0.5 }, 24).unwrap();
        let mesh = marching_cubes(&grid, 0.0);
        let cloud = mesh.sample_surface(2000, 3);
        // sampled points sit near the sphere
        for p in &cloud.points {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 0.5).abs() < grid.spacing());
        }

        let dir = tempfile::tempdir().unwrap();
        let obj = dir.path().join("m.obj");
        mesh.save_obj(&obj, 2.0, [0.1, 0.2, 0.3]).unwrap();
        let text = std::fs::read_to_string(&obj).unwrap();
        assert!(text.starts_with("# normalized coordinates; scene = 2"));
        assert_eq!(
            text.lines().filter(|l| l.starts_with("v ")).count(),
            mesh.vertices.len()
        );
        assert_eq!(
            text.lines().filter(|l| l.starts_with("f ")).count(),
            mesh.triangles.len()
        );
    }
}
