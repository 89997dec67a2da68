//! The two neural fields and the coordinate/encoding machinery they
//! consume: a foreground SDF field (surface representation) and a
//! background density field covering the rest of the scene through an
//! inverted-sphere parameterization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::mlp::{Activation, MlpSpec};
use crate::diffcore::params::{BoundParams, ParamSet};
use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Frequency encoding gamma(p) = (sin(2^0 pi p), cos(2^0 pi p), ...,
/// sin(2^{L-1} pi p), cos(2^{L-1} pi p)), optionally prefixed with the
/// raw input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosEncConfig {
    pub freqs: usize,
    pub include_input: bool,
}

impl PosEncConfig {
    pub fn new(freqs: usize, include_input: bool) -> Self {
        PosEncConfig {
            freqs,
            include_input,
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * 2 * self.freqs + if self.include_input { input_dim } else { 0 }
    }

    /// Encodes one vector. Layout: [raw p]?, then per frequency l the
    /// sin block over all components followed by the cos block.
    pub fn encode(&self, p: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_dim(p.len()));
        if self.include_input {
            out.extend_from_slice(p);
        }
        for l in 0..self.freqs {
            let f = (1u64 << l) as f64 * std::f64::consts::PI;
            for &v in p {
                out.push((f * v).sin());
            }
            for &v in p {
                out.push((f * v).cos());
            }
        }
        out
    }

    pub fn encode_batch(&self, pts: &Tensor) -> Tensor {
        let dim = pts.cols();
        let out_dim = self.output_dim(dim);
        let mut out = Tensor::zeros(pts.rows(), out_dim);
        for r in 0..pts.rows() {
            let enc = self.encode(pts.row(r));
            out.row_mut(r).copy_from_slice(&enc);
        }
        out
    }

    /// Encoded batch plus the three tangent matrices d(gamma)/dx_k,
    /// evaluated analytically. Input must be 3D.
    pub fn encode_batch_with_tangents(&self, pts: &Tensor) -> (Tensor, [Tensor; 3]) {
        assert_eq!(pts.cols(), 3);
        let out_dim = self.output_dim(3);
        let rows = pts.rows();
        let mut pe = Tensor::zeros(rows, out_dim);
        let mut tangents = [
            Tensor::zeros(rows, out_dim),
            Tensor::zeros(rows, out_dim),
            Tensor::zeros(rows, out_dim),
        ];
        let base = if self.include_input { 3 } else { 0 };
        for r in 0..rows {
            let p = pts.row(r).to_vec();
            if self.include_input {
                for k in 0..3 {
                    pe.set(r, k, p[k]);
                    tangents[k].set(r, k, 1.0);
                }
            }
            for l in 0..self.freqs {
                let f = (1u64 << l) as f64 * std::f64::consts::PI;
                for k in 0..3 {
                    let (s, c) = (f * p[k]).sin_cos();
                    let sin_col = base + l * 6 + k;
                    let cos_col = base + l * 6 + 3 + k;
                    pe.set(r, sin_col, s);
                    pe.set(r, cos_col, c);
                    tangents[k].set(r, sin_col, f * c);
                    tangents[k].set(r, cos_col, -f * s);
                }
            }
        }
        (pe, tangents)
    }
}

/// Scene-unit sphere from the dataset annotation; rendering normalizes
/// so this sphere becomes the unit sphere at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereAnnotation {
    pub center: [f64; 3],
    pub radius: f64,
}

impl SphereAnnotation {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!(
                "sphere annotation radius must be positive, got {}",
                self.radius
            )));
        }
        Ok(())
    }
}

/// Inverted sphere parameterization for a point outside the unit
/// sphere: (x/r, 1/r) with r = |x| >= 1.
pub fn invert_sphere_param(x: [f64; 3]) -> Result<[f64; 4]> {
    let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    if r < 1.0 {
        return Err(Error::Domain(format!(
            "invert_sphere_param: |x| = {r} < 1"
        )));
    }
    Ok([x[0] / r, x[1] / r, x[2] / r, 1.0 / r])
}

/// Inside-sphere points enter the background model as (x, 1), matching
/// the boundary value of the inverted parameterization.
pub fn inside_sphere_param(x: [f64; 3]) -> [f64; 4] {
    [x[0], x[1], x[2], 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForegroundConfig {
    pub pe_x: PosEncConfig,
    pub pe_d: PosEncConfig,
    /// hidden widths of the SDF net (all equal; geometric init needs
    /// square middle layers)
    pub sdf_hidden: Vec<usize>,
    pub sdf_skips: Vec<usize>,
    /// sharpness of the softplus activations in the SDF net
    pub sdf_act_beta: f64,
    pub feat_dim: usize,
    pub color_hidden: Vec<usize>,
    /// design radius of the geometric initialization
    pub init_radius: f64,
    /// initial value of 1/beta_s for the opaque-density sigmoid
    pub beta_s_init_inv: f64,
}

impl Default for ForegroundConfig {
    fn default() -> Self {
        ForegroundConfig {
            pe_x: PosEncConfig::new(6, true),
            pe_d: PosEncConfig::new(4, true),
            sdf_hidden: vec![64; 4],
            sdf_skips: vec![2],
            sdf_act_beta: 100.0,
            feat_dim: 64,
            color_hidden: vec![64; 2],
            init_radius: 0.5,
            beta_s_init_inv: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundConfig {
    /// encoding of the 4D inverted-sphere coordinate
    pub pe_x: PosEncConfig,
    pub pe_d: PosEncConfig,
    pub density_hidden: Vec<usize>,
    pub feat_dim: usize,
    pub color_hidden: Vec<usize>,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            pe_x: PosEncConfig::new(10, true),
            pe_d: PosEncConfig::new(4, true),
            density_hidden: vec![64; 4],
            feat_dim: 64,
            color_hidden: vec![64],
        }
    }
}

/// Foreground surface field: x -> (sdf, feature), plus a color head
/// (x, gamma(d), n, feature) -> rgb, plus the learnable density
/// sharpness beta_s (stored as its log for positivity).
#[derive(Debug, Clone)]
pub struct ForegroundField {
    pub cfg: ForegroundConfig,
    pub sdf: MlpSpec,
    pub color: MlpSpec,
}

pub const FG_SHARPNESS_PARAM: &str = "fg.s_log";

impl ForegroundField {
    pub fn new(cfg: ForegroundConfig) -> Result<Self> {
        let pe_dim = cfg.pe_x.output_dim(3);
        let mut widths = vec![pe_dim];
        widths.extend_from_slice(&cfg.sdf_hidden);
        widths.push(1 + cfg.feat_dim);
        let mut acts = vec![Activation::Softplus(cfg.sdf_act_beta); cfg.sdf_hidden.len()];
        acts.push(Activation::None);
        let sdf = MlpSpec::new("fg.sdf", widths, acts).with_skips(cfg.sdf_skips.clone());
        sdf.validate()?;

        let color_in = 3 + cfg.pe_d.output_dim(3) + 3 + cfg.feat_dim;
        let mut cwidths = vec![color_in];
        cwidths.extend_from_slice(&cfg.color_hidden);
        cwidths.push(3);
        let mut cacts = vec![Activation::Relu; cfg.color_hidden.len()];
        cacts.push(Activation::Sigmoid);
        let color = MlpSpec::new("fg.color", cwidths, cacts);
        color.validate()?;

        if !cfg.pe_x.include_input {
            return Err(Error::Config(
                "foreground pe_x must include the raw input (geometric init)".into(),
            ));
        }
        Ok(ForegroundField { cfg, sdf, color })
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        self.sdf
            .init_geometric(params, rng, self.cfg.init_radius, 3)?;
        self.color.init_uniform(params, rng)?;
        if !(self.cfg.beta_s_init_inv > 0.0) {
            return Err(Error::Config("beta_s_init_inv must be positive".into()));
        }
        params.insert(
            FG_SHARPNESS_PARAM,
            Tensor::scalar((1.0 / self.cfg.beta_s_init_inv).ln()),
        )?;
        Ok(())
    }

    pub fn beta_s(&self, params: &ParamSet) -> f64 {
        params.get(FG_SHARPNESS_PARAM).expect("fg params").item().exp()
    }

    /// SDF values only (column 0), for sampling and grid extraction.
    pub fn sdf_batch(&self, params: &ParamSet, pts: &Tensor) -> Result<Tensor> {
        let pe = self.cfg.pe_x.encode_batch(pts);
        let out = self.sdf.forward(params, &pe)?;
        let mut s = Tensor::zeros(pts.rows(), 1);
        for r in 0..pts.rows() {
            s.set(r, 0, out.get(r, 0));
        }
        Ok(s)
    }

    /// Value-only evaluation: sdf, exact spatial gradient (normal),
    /// and view-dependent color per point.
    pub fn eval(&self, params: &ParamSet, pts: &Tensor, dirs: &Tensor) -> Result<FgEval> {
        check_dirs(dirs)?;
        let (pe, pe_tangents) = self.cfg.pe_x.encode_batch_with_tangents(pts);
        let (out, tangents) = self
            .sdf
            .forward_with_tangents(params, &pe, &pe_tangents.iter().collect::<Vec<_>>())?;
        let rows = pts.rows();
        let feat_dim = self.cfg.feat_dim;
        let mut sdf = Tensor::zeros(rows, 1);
        let mut normal = Tensor::zeros(rows, 3);
        let mut feat = Tensor::zeros(rows, feat_dim);
        for r in 0..rows {
            sdf.set(r, 0, out.get(r, 0));
            for k in 0..3 {
                normal.set(r, k, tangents[k].get(r, 0));
            }
            feat.row_mut(r).copy_from_slice(&out.row(r)[1..1 + feat_dim]);
        }
        let pe_d = self.cfg.pe_d.encode_batch(dirs);
        let mut cin = Tensor::zeros(rows, self.color.input_dim());
        for r in 0..rows {
            let row = cin.row_mut(r);
            row[0..3].copy_from_slice(pts.row(r));
            let off = 3;
            row[off..off + pe_d.cols()].copy_from_slice(pe_d.row(r));
            let off = off + pe_d.cols();
            row[off..off + 3].copy_from_slice(normal.row(r));
            let off = off + 3;
            row[off..off + feat_dim].copy_from_slice(feat.row(r));
        }
        let color = self.color.forward(params, &cin)?;
        Ok(FgEval {
            sdf,
            normal,
            color,
        })
    }

    /// Taped evaluation with normals produced by tangent propagation,
    /// so losses on sdf, normal, and color all differentiate w.r.t.
    /// the parameters in one reverse pass.
    pub fn eval_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        pts: &Tensor,
        dirs: &Tensor,
    ) -> FgTapeEval {
        let (pe, pe_tangents) = self.cfg.pe_x.encode_batch_with_tangents(pts);
        let pe_id = tape.leaf(pe);
        let tangent_ids: Vec<NodeId> = pe_tangents.into_iter().map(|t| tape.leaf(t)).collect();
        let (out, tangents) =
            self.sdf
                .forward_tape_with_tangents(tape, bound, pe_id, &tangent_ids);
        let feat_dim = self.cfg.feat_dim;
        let sdf = tape.slice_cols(out, 0, 1);
        let feat = tape.slice_cols(out, 1, 1 + feat_dim);
        let n_parts: Vec<NodeId> = tangents
            .iter()
            .map(|&t| tape.slice_cols(t, 0, 1))
            .collect();
        let normal = tape.concat_cols(&n_parts);

        let pe_d = self.cfg.pe_d.encode_batch(dirs);
        let x_id = tape.leaf(pts.clone());
        let ped_id = tape.leaf(pe_d);
        let cin = tape.concat_cols(&[x_id, ped_id, normal, feat]);
        let color = self.color.forward_tape(tape, bound, cin);
        FgTapeEval { sdf, normal, color }
    }
}

pub struct FgEval {
    pub sdf: Tensor,
    pub normal: Tensor,
    pub color: Tensor,
}

pub struct FgTapeEval {
    pub sdf: NodeId,
    pub normal: NodeId,
    pub color: NodeId,
}

/// Opaque density of a surface field along a ray:
/// rho(t) = max(-(dPhi/dt)(s) / Phi(s), 0) with Phi(s) = sigmoid(beta_s s),
/// which reduces to beta_s (1 - Phi(s)) relu(-ds/dt).
pub fn sdf_to_opaque_density(s: &[f64], ds_dt: &[f64], beta_s: f64) -> Result<Vec<f64>> {
    if s.len() != ds_dt.len() {
        return Err(Error::Shape(format!(
            "sdf_to_opaque_density: {} sdf values vs {} slopes",
            s.len(),
            ds_dt.len()
        )));
    }
    if !(beta_s > 0.0) {
        return Err(Error::Config(format!("beta_s must be positive, got {beta_s}")));
    }
    Ok(s.iter()
        .zip(ds_dt)
        .map(|(&sv, &dv)| {
            let phi = crate::diffcore::tape::sigmoid(beta_s * sv);
            beta_s * (1.0 - phi) * (-dv).max(0.0)
        })
        .collect())
}

/// Taped form of `sdf_to_opaque_density`; `beta_s` is a (1,1) node so
/// the sharpness stays learnable.
pub fn opaque_density_tape(
    tape: &mut Tape,
    sdf: NodeId,
    ds_dt: NodeId,
    beta_s: NodeId,
) -> NodeId {
    let scaled = tape.mul_scalar_broadcast(sdf, beta_s);
    let phi = tape.sigmoid(scaled);
    let neg_phi = tape.scale(phi, -1.0);
    let one_minus = tape.add_scalar(neg_phi, 1.0);
    let neg_slope = tape.scale(ds_dt, -1.0);
    let gated = tape.relu(neg_slope);
    let prod = tape.mul(one_minus, gated);
    tape.mul_scalar_broadcast(prod, beta_s)
}

/// The learnable sharpness as a tape node: beta_s = exp(s_log).
pub fn beta_s_node(tape: &mut Tape, bound: &BoundParams) -> NodeId {
    let p = bound.id(FG_SHARPNESS_PARAM);
    tape.exp(p)
}

/// Background radiance field over the 4D inverted-sphere coordinate:
/// x' -> (density, feature), color head (feature, gamma(d)) -> rgb.
#[derive(Debug, Clone)]
pub struct BackgroundField {
    pub cfg: BackgroundConfig,
    pub density: MlpSpec,
    pub color: MlpSpec,
}

impl BackgroundField {
    pub fn new(cfg: BackgroundConfig) -> Result<Self> {
        let pe_dim = cfg.pe_x.output_dim(4);
        let mut widths = vec![pe_dim];
        widths.extend_from_slice(&cfg.density_hidden);
        widths.push(1 + cfg.feat_dim);
        let mut acts = vec![Activation::Relu; cfg.density_hidden.len()];
        acts.push(Activation::None);
        let density = MlpSpec::new("bg.density", widths, acts);
        density.validate()?;

        let color_in = cfg.feat_dim + cfg.pe_d.output_dim(3);
        let mut cwidths = vec![color_in];
        cwidths.extend_from_slice(&cfg.color_hidden);
        cwidths.push(3);
        let mut cacts = vec![Activation::Relu; cfg.color_hidden.len()];
        cacts.push(Activation::Sigmoid);
        let color = MlpSpec::new("bg.color", cwidths, cacts);
        color.validate()?;
        Ok(BackgroundField { cfg, density, color })
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        self.density.init_uniform(params, rng)?;
        self.color.init_uniform(params, rng)
    }

    /// Value-only evaluation at 4D parameterized points.
    pub fn eval(&self, params: &ParamSet, pts4: &Tensor, dirs: &Tensor) -> Result<BgEval> {
        check_dirs(dirs)?;
        assert_eq!(pts4.cols(), 4, "background expects 4D points");
        let pe = self.cfg.pe_x.encode_batch(pts4);
        let out = self.density.forward(params, &pe)?;
        let rows = pts4.rows();
        let mut sigma = Tensor::zeros(rows, 1);
        let mut cin = Tensor::zeros(rows, self.color.input_dim());
        let pe_d = self.cfg.pe_d.encode_batch(dirs);
        let feat_dim = self.cfg.feat_dim;
        for r in 0..rows {
            sigma.set(r, 0, crate::diffcore::tape::softplus(out.get(r, 0), 1.0));
            let row = cin.row_mut(r);
            row[0..feat_dim].copy_from_slice(&out.row(r)[1..1 + feat_dim]);
            row[feat_dim..].copy_from_slice(pe_d.row(r));
        }
        let color = self.color.forward(params, &cin)?;
        Ok(BgEval { sigma, color })
    }

    pub fn eval_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        pts4: &Tensor,
        dirs: &Tensor,
    ) -> BgTapeEval {
        assert_eq!(pts4.cols(), 4, "background expects 4D points");
        let pe = self.cfg.pe_x.encode_batch(pts4);
        let pe_id = tape.leaf(pe);
        let out = self.density.forward_tape(tape, bound, pe_id);
        let raw = tape.slice_cols(out, 0, 1);
        let sigma = tape.softplus(raw, 1.0);
        let feat = tape.slice_cols(out, 1, 1 + self.cfg.feat_dim);
        let pe_d = self.cfg.pe_d.encode_batch(dirs);
        let ped_id = tape.leaf(pe_d);
        let cin = tape.concat_cols(&[feat, ped_id]);
        let color = self.color.forward_tape(tape, bound, cin);
        BgTapeEval { sigma, color }
    }
}

pub struct BgEval {
    pub sigma: Tensor,
    pub color: Tensor,
}

pub struct BgTapeEval {
    pub sigma: NodeId,
    pub color: NodeId,
}

fn check_dirs(dirs: &Tensor) -> Result<()> {
    assert_eq!(dirs.cols(), 3);
    for r in 0..dirs.rows() {
        let d = dirs.row(r);
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!(
                "direction row {r} has norm {n}, expected unit"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn positional_encode_scalar_cases() {
        let cfg = PosEncConfig::new(2, false);
        let e = cfg.encode(&[0.0]);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0]);

        let cfg1 = PosEncConfig::new(1, false);
        let e = cfg1.encode(&[0.5]);
        assert!((e[0] - 1.0).abs() < 1e-15);
        assert!(e[1].abs() < 1e-15);

        let e = cfg.encode(&[0.25]);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for (got, want) in e.iter().zip([r, r, 1.0, 0.0]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn positional_encode_dims_for_all_l() {
        for l in 0..=16usize {
            for include in [false, true] {
                let cfg = PosEncConfig::new(l, include);
                let dim = cfg.output_dim(3);
                assert_eq!(dim, 3 * 2 * l + if include { 3 } else { 0 });
                assert_eq!(cfg.encode(&[0.1, 0.2, 0.3]).len(), dim);
            }
        }
    }

    #[test]
    fn pe_tangents_match_finite_differences() {
        let cfg = PosEncConfig::new(4, true);
        let pts = Tensor::from_vec(2, 3, vec![0.11, -0.42, 0.37, -0.05, 0.26, -0.33]);
        let (_, tangents) = cfg.encode_batch_with_tangents(&pts);
        let h = 1e-7;
        for k in 0..3 {
            let mut pp = pts.clone();
            let mut pm = pts.clone();
            for r in 0..2 {
                pp.set(r, k, pp.get(r, k) + h);
                pm.set(r, k, pm.get(r, k) - h);
            }
            let ep = cfg.encode_batch(&pp);
            let em = cfg.encode_batch(&pm);
            for i in 0..ep.len() {
                let fd = (ep.data()[i] - em.data()[i]) / (2.0 * h);
                assert!((tangents[k].data()[i] - fd).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn invert_sphere_param_examples() {
        assert_eq!(
            invert_sphere_param([1.0, 0.0, 0.0]).unwrap(),
            [1.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(
            invert_sphere_param([2.0, 0.0, 0.0]).unwrap(),
            [1.0, 0.0, 0.0, 0.5]
        );
        let p = invert_sphere_param([0.0, 3.0, 4.0]).unwrap();
        for (got, want) in p.iter().zip([0.0, 0.6, 0.8, 0.2]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(invert_sphere_param([0.2, 0.2, 0.2]).is_err());
    }

    #[test]
    fn opaque_density_zero_for_flat_or_rising_sdf() {
        let s = vec![0.3; 5];
        let ds = vec![0.0; 5];
        let rho = sdf_to_opaque_density(&s, &ds, 10.0).unwrap();
        assert!(rho.iter().all(|&r| r == 0.0));

        let rising: Vec<f64> = (0..5).map(|i| i as f64 * 0.1).collect();
        let slopes = vec![0.1; 5];
        let rho = sdf_to_opaque_density(&rising, &slopes, 10.0).unwrap();
        assert!(rho.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn opaque_density_matches_direct_formula_oracle() {
        // s(t) = 1 - t, beta = 10, at t in {0.5, 1.0, 1.5}
        let beta = 10.0;
        let ts = [0.5, 1.0, 1.5];
        let s: Vec<f64> = ts.iter().map(|t| 1.0 - t).collect();
        let ds = vec![-1.0; 3];
        let rho = sdf_to_opaque_density(&s, &ds, beta).unwrap();

        // independent evaluation of -Phi'(s) * ds/dt / Phi(s)
        for (i, &sv) in s.iter().enumerate() {
            let phi = 1.0 / (1.0 + (-beta * sv).exp());
            let dphi_ds = beta * (-beta * sv).exp() / (1.0 + (-beta * sv).exp()).powi(2);
            let oracle = (-(dphi_ds * ds[i]) / phi).max(0.0);
            assert!(
                (rho[i] - oracle).abs() < 1e-12,
                "t={} rho={} oracle={}",
                ts[i],
                rho[i],
                oracle
            );
        }
    }

    #[test]
    fn opaque_density_scale_equivariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..200 {
            let s: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let ds: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let beta = rng.gen::<f64>() * 50.0 + 1.0;
            let k = rng.gen::<f64>() * 5.0 + 0.1;
            let base = sdf_to_opaque_density(&s, &ds, beta).unwrap();
            let scaled_s: Vec<f64> = s.iter().map(|v| v * k).collect();
            let scaled_ds: Vec<f64> = ds.iter().map(|v| v * k).collect();
            let scaled = sdf_to_opaque_density(&scaled_s, &scaled_ds, beta / k).unwrap();
            for (a, b) in base.iter().zip(&scaled) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    fn small_fg() -> (ForegroundField, ParamSet) {
        let cfg = ForegroundConfig {
            sdf_hidden: vec![32; 3],
            sdf_skips: vec![],
            feat_dim: 8,
            color_hidden: vec![16],
            ..Default::default()
        };
        let field = ForegroundField::new(cfg).unwrap();
        let mut params = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        field.init(&mut params, &mut rng).unwrap();
        (field, params)
    }

    #[test]
    fn geometric_init_surface_and_interior() {
        let (field, params) = small_fg();
        let origin = Tensor::from_vec(1, 3, vec![0.0; 3]);
        let s0 = field.sdf_batch(&params, &origin).unwrap().item();
        assert!(s0 < 0.0, "sdf at origin {s0}");

        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..30 {
            let v = [
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let p = Tensor::from_vec(1, 3, vec![0.5 * v[0] / n, 0.5 * v[1] / n, 0.5 * v[2] / n]);
            let s = field.sdf_batch(&params, &p).unwrap().item();
            assert!(s.abs() <= 0.05, "surface sdf {s}");
        }
    }

    #[test]
    fn normals_match_finite_differences_of_sdf() {
        let (field, params) = small_fg();
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let n_pts = 50;
        let pts = Tensor::from_fn(n_pts, 3, |_, _| rng.gen::<f64>() * 1.2 - 0.6);
        let dirs = unit_rows(n_pts, &mut rng);
        let eval = field.eval(&params, &pts, &dirs).unwrap();

        let h = 1e-5;
        for r in 0..n_pts {
            for k in 0..3 {
                let mut pp = pts.clone();
                let mut pm = pts.clone();
                pp.set(r, k, pp.get(r, k) + h);
                pm.set(r, k, pm.get(r, k) - h);
                let sp = field.sdf_batch(&params, &pp).unwrap().get(r, 0);
                let sm = field.sdf_batch(&params, &pm).unwrap().get(r, 0);
                let fd = (sp - sm) / (2.0 * h);
                let got = eval.normal.get(r, k);
                let denom = fd.abs().max(1e-4);
                assert!(
                    ((got - fd) / denom).abs() <= 1e-4,
                    "normal[{r},{k}] {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn taped_foreground_matches_plain_evaluation() {
        let (field, params) = small_fg();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let pts = Tensor::from_fn(7, 3, |_, _| rng.gen::<f64>() - 0.5);
        let dirs = unit_rows(7, &mut rng);
        let plain = field.eval(&params, &pts, &dirs).unwrap();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let taped = field.eval_tape(&mut tape, &bound, &pts, &dirs);
        for (a, b) in plain.sdf.data().iter().zip(tape.value(taped.sdf).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in plain
            .normal
            .data()
            .iter()
            .zip(tape.value(taped.normal).data())
        {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in plain
            .color
            .data()
            .iter()
            .zip(tape.value(taped.color).data())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn small_bg() -> (BackgroundField, ParamSet) {
        let cfg = BackgroundConfig {
            pe_x: PosEncConfig::new(6, true),
            density_hidden: vec![24; 2],
            feat_dim: 8,
            color_hidden: vec![16],
            ..Default::default()
        };
        let field = BackgroundField::new(cfg).unwrap();
        let mut params = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        field.init(&mut params, &mut rng).unwrap();
        (field, params)
    }

    #[test]
    fn zero_weight_density_head_gives_softplus_of_zero() {
        let (field, mut params) = small_bg();
        // zero the density net entirely
        for l in 0..field.density.num_layers() {
            for t in [
                params.get_mut(&field.density.weight_name(l)).unwrap(),
                // biases are separate entries
            ] {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            for v in params
                .get_mut(&field.density.bias_name(l))
                .unwrap()
                .data_mut()
            {
                *v = 0.0;
            }
        }
        let pts = Tensor::from_vec(1, 4, vec![0.3, -0.2, 0.5, 0.8]);
        let dirs = Tensor::from_vec(1, 3, vec![0.0, 0.0, 1.0]);
        let out = field.eval(&params, &pts, &dirs).unwrap();
        assert!((out.sigma.item() - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn background_eval_is_deterministic_and_matches_composition_oracle() {
        let (field, params) = small_bg();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let mut pts = Tensor::from_fn(20, 4, |_, _| rng.gen::<f64>() - 0.5);
        for r in 0..20 {
            pts.set(r, 3, rng.gen::<f64>());
        }
        let dirs = unit_rows(20, &mut rng);
        let a = field.eval(&params, &pts, &dirs).unwrap();
        let b = field.eval(&params, &pts, &dirs).unwrap();
        assert_eq!(a.sigma.data(), b.sigma.data());
        assert_eq!(a.color.data(), b.color.data());

        // composition oracle through the raw mlp path
        let pe = field.cfg.pe_x.encode_batch(&pts);
        let raw = field.density.forward(&params, &pe).unwrap();
        for r in 0..20 {
            let oracle = crate::diffcore::tape::softplus(raw.get(r, 0), 1.0);
            assert!((a.sigma.get(r, 0) - oracle).abs() < 1e-12);
        }
        for v in a.color.data() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    fn unit_rows(n: usize, rng: &mut impl Rng) -> Tensor {
        let mut t = Tensor::from_fn(n, 3, |_, _| rng.gen::<f64>() - 0.5);
        for r in 0..n {
            let row = t.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let vals: Vec<f64> = row.iter().map(|v| v / norm).collect();
            t.row_mut(r).copy_from_slice(&vals);
        }
        t
    }
}
