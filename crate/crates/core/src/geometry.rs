//! Rotation-group and rigid-frame kernels.
//!
//! Rotations are stored as 3×3 matrices. Tangent vectors are axis-angle
//! 3-vectors whose direction is the rotation axis and whose norm is the
//! angle in radians. All coordinates handled here are in model units
//! (Ångström × [`MODEL_UNITS_PER_ANGSTROM`]).

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::discrete::AMINO_ACIDS;
use crate::error::{Error, Result};

/// Scale applied to Ångström coordinates at ingestion.
pub const MODEL_UNITS_PER_ANGSTROM: f64 = 0.1;

/// Tolerance on ‖mᵀm − I‖_F and |det m − 1| for a matrix to count as a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Angles closer than this to π are inverted through the symmetric part of
/// the matrix instead of the antisymmetric part.
const NEAR_PI: f64 = 1e-2;

/// Idealized backbone coordinates (Å) of N, CA, C and O in the residue frame.
///
/// CA sits at the origin, C on the +x axis and N in the xy-plane with y > 0,
/// which is the convention [`frame_from_backbone`] reproduces. Bond lengths
/// N–CA 1.458 Å, CA–C 1.526 Å, C=O 1.231 Å; angles N–CA–C 111.0°,
/// CA–C–O 120.8°, with O placed in the peptide plane opposite to N.
pub const BACKBONE_TEMPLATE_ANGSTROM: [[f64; 3]; 4] = [
    [-0.525, 1.363, 0.0],
    [0.0, 0.0, 0.0],
    [1.526, 0.0, 0.0],
    [2.1561, -1.0574, 0.0],
];

pub const BACKBONE_ATOM_NAMES: [&str; 4] = ["N", "CA", "C", "O"];

/// An element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix after checking orthonormality and orientation.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        check_rotation(&m)?;
        Ok(Rotation(m))
    }

    /// Wraps a matrix without validation. Callers must guarantee the
    /// rotation invariants.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Rotation about `axis` (need not be normalized) by `angle` radians.
    pub fn about_axis(axis: Vector3<f64>, angle: f64) -> Self {
        so3_exp(&(axis.normalize() * angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation angle in [0, π].
    pub fn angle(&self) -> f64 {
        let w = vee_antisymmetric(&self.0);
        let cos = 0.5 * (self.0.trace() - 1.0);
        (0.5 * w.norm()).atan2(cos)
    }

    /// Geodesic distance (radians) to `other`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.transpose().compose(other).angle()
    }

    /// Projects onto the nearest rotation (polar decomposition via SVD).
    pub fn renormalized(&self) -> Self {
        Rotation(nearest_rotation(&self.0))
    }

    /// Unit quaternion (w, x, y, z) with w ≥ 0.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.0);
        let q = q.quaternion();
        let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
        [sign * q.w, sign * q.i, sign * q.j, sign * q.k]
    }

    /// Builds a rotation from a (w, x, y, z) quaternion; the input is normalized.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidRotation(format!(
                "quaternion {q:?} has no direction"
            )));
        }
        let unit = UnitQuaternion::from_quaternion(quat);
        Ok(Rotation(unit.to_rotation_matrix().into_inner()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

fn check_rotation(m: &Matrix3<f64>) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidRotation("non-finite entries".into()));
    }
    let ortho = (m.transpose() * m - Matrix3::identity()).norm();
    let det = m.determinant();
    if ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(Error::InvalidRotation(format!(
            "‖mᵀm − I‖ = {ortho:.3e}, det = {det:.12}"
        )));
    }
    Ok(())
}

/// Nearest proper rotation to `m` in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Skew-symmetric matrix [v]× such that [v]× u = v × u.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// (m − mᵀ)^∨, which equals 2 sin θ · axis for a rotation.
fn vee_antisymmetric(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
}

/// sin θ / θ and (1 − cos θ) / θ² as functions of θ², with series near zero.
pub(crate) fn rodrigues_coefficients(theta_sq: f64) -> (f64, f64) {
    if theta_sq < 1e-6 {
        let s = theta_sq;
        (
            1.0 - s / 6.0 + s * s / 120.0,
            0.5 - s / 24.0 + s * s / 720.0,
        )
    } else {
        let theta = theta_sq.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    }
}

/// Exponential map from axis-angle to rotation (Rodrigues' formula).
pub fn so3_exp(v: &Vector3<f64>) -> Rotation {
    let (a, b) = rodrigues_coefficients(v.norm_squared());
    let k = hat(v);
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Logarithm map from rotation to axis-angle, angle in [0, π].
///
/// Validates the input; see [`so3_log_unchecked`] for the raw kernel.
pub fn so3_log(r: &Rotation) -> Result<Vector3<f64>> {
    check_rotation(&r.0)?;
    Ok(so3_log_unchecked(&r.0))
}

/// Logarithm kernel without validation. Near angle π the axis is recovered
/// from the symmetric part with a largest-diagonal pivot; the sign follows
/// the antisymmetric part when it is informative.
pub fn so3_log_unchecked(m: &Matrix3<f64>) -> Vector3<f64> {
    let w = vee_antisymmetric(m);
    let cos = (0.5 * (m.trace() - 1.0)).clamp(-1.0, 1.0);
    let sin = 0.5 * w.norm();
    let theta = sin.atan2(cos);
    if theta < 1e-6 {
        // θ / (2 sin θ) = 1/2 + θ²/12 + O(θ⁴)
        return w * (0.5 + theta * theta / 12.0);
    }
    if PI - theta > NEAR_PI {
        return w * (theta / (2.0 * theta.sin()));
    }
    // (m + mᵀ)/2 = cos θ I + (1 − cos θ) n nᵀ
    let sym = (m + m.transpose()) * 0.5;
    let outer = (sym - Matrix3::identity() * cos) / (1.0 - cos);
    let pivot = (0..3)
        .max_by(|&a, &b| outer[(a, a)].total_cmp(&outer[(b, b)]))
        .unwrap_or(0);
    let pivot_norm = outer[(pivot, pivot)].max(0.0).sqrt();
    let mut axis = Vector3::zeros();
    for j in 0..3 {
        axis[j] = outer[(pivot, j)] / pivot_norm;
    }
    axis.normalize_mut();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Point on the geodesic from `r0` (t = 0) to `r1` (t = 1).
pub fn geodesic_interpolate(r0: &Rotation, r1: &Rotation, t: f64) -> Rotation {
    let rel = r0.transpose().compose(r1);
    let tangent = so3_log_unchecked(&rel.0);
    r0.compose(&so3_exp(&(tangent * t)))
}

pub fn translation_interpolate(x0: &Vector3<f64>, x1: &Vector3<f64>, t: f64) -> Vector3<f64> {
    if t == 1.0 {
        return *x1;
    }
    x0 * (1.0 - t) + x1 * t
}

/// Uniform (Haar) rotation from a normalized 4-component Gaussian quaternion.
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if let Ok(r) = Rotation::from_quaternion(q) {
            return r;
        }
    }
}

/// Rigid transform acting as x ↦ rot·x + trans.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidTransform {
    pub rot: Rotation,
    pub trans: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rot: Rotation, trans: Vector3<f64>) -> Self {
        RigidTransform { rot, trans }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.apply(p) + self.trans
    }

    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.transpose().apply(&(p - self.trans))
    }

    /// self ∘ other
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rot: self.rot.compose(&other.rot),
            trans: self.rot.apply(&other.trans) + self.trans,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, translation_scale: f64) -> Self {
        let trans = Vector3::from_fn(|_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * translation_scale
        });
        RigidTransform {
            rot: sample_uniform_rotation(rng),
            trans,
        }
    }
}

/// Per-residue rigid frame with its amino-acid category.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidueFrame {
    pub trans: Vector3<f64>,
    pub rot: Rotation,
    /// 0-based amino-acid index, or [`crate::discrete::AMINO_ACID_SPACE`]'s mask index.
    pub aatype: usize,
}

impl ResidueFrame {
    pub fn rigid(&self) -> RigidTransform {
        RigidTransform::new(self.rot, self.trans)
    }

    pub fn transformed(&self, g: &RigidTransform) -> Self {
        ResidueFrame {
            trans: g.apply(&self.trans),
            rot: g.rot.compose(&self.rot),
            aatype: self.aatype,
        }
    }

    /// 7-value record: unit quaternion (w ≥ 0) then translation.
    pub fn to_record(&self) -> [f64; 7] {
        let q = self.rot.to_quaternion();
        [
            q[0],
            q[1],
            q[2],
            q[3],
            self.trans.x,
            self.trans.y,
            self.trans.z,
        ]
    }

    pub fn from_record(rec: &[f64; 7], aatype: usize) -> Result<Self> {
        Ok(ResidueFrame {
            rot: Rotation::from_quaternion([rec[0], rec[1], rec[2], rec[3]])?,
            trans: Vector3::new(rec[4], rec[5], rec[6]),
            aatype,
        })
    }

    pub fn aa_letter(&self) -> char {
        AMINO_ACIDS.get(self.aatype).copied().unwrap_or('X')
    }
}

/// Draws a frame from the prior: N(0, I) translation, Haar rotation, masked type.
pub fn sample_frame_prior<R: Rng + ?Sized>(rng: &mut R) -> ResidueFrame {
    let trans = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
    ResidueFrame {
        trans,
        rot: sample_uniform_rotation(rng),
        aatype: crate::discrete::AMINO_ACID_SPACE.mask_index(),
    }
}

/// Backbone N, CA, C, O positions (model units) of a frame.
pub fn backbone_atoms_from_frame(frame: &ResidueFrame) -> [Vector3<f64>; 4] {
    let rigid = frame.rigid();
    std::array::from_fn(|k| {
        let local = Vector3::from(BACKBONE_TEMPLATE_ANGSTROM[k]) * MODEL_UNITS_PER_ANGSTROM;
        if k == 1 {
            frame.trans
        } else {
            rigid.apply(&local)
        }
    })
}

/// Frame from N, CA, C positions: origin at CA, x along CA→C, N in the
/// xy-plane with positive y (Gram–Schmidt).
pub fn frame_from_backbone(
    n: &Vector3<f64>,
    ca: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Result<RigidTransform> {
    let e1 = c - ca;
    let n1 = e1.norm();
    if n1 < 1e-8 {
        return Err(Error::DegenerateGeometry("CA and C coincide".into()));
    }
    let e1 = e1 / n1;
    let u2 = n - ca;
    let u2 = u2 - e1 * e1.dot(&u2);
    let n2 = u2.norm();
    if n2 < 1e-8 {
        return Err(Error::DegenerateGeometry("N, CA and C are collinear".into()));
    }
    let e2 = u2 / n2;
    let e3 = e1.cross(&e2);
    let m = Matrix3::from_columns(&[e1, e2, e3]);
    Ok(RigidTransform::new(Rotation(m), *ca))
}

/// Ordered residue frames; the generated object.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pocket {
    pub residues: Vec<ResidueFrame>,
}

impl Pocket {
    pub fn new(residues: Vec<ResidueFrame>) -> Self {
        Pocket { residues }
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn ca_positions(&self) -> Vec<Vector3<f64>> {
        self.residues.iter().map(|r| r.trans).collect()
    }

    pub fn aatypes(&self) -> Vec<usize> {
        self.residues.iter().map(|r| r.aatype).collect()
    }

    pub fn sequence(&self) -> String {
        self.residues.iter().map(|r| r.aa_letter()).collect()
    }

    pub fn transformed(&self, g: &RigidTransform) -> Self {
        Pocket {
            residues: self.residues.iter().map(|r| r.transformed(g)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_axis_angle(rng: &mut ChaCha8Rng, max_angle: f64) -> Vector3<f64> {
        let axis = Vector3::from_fn(|_, _| StandardNormal.sample(rng)).normalize();
        axis * rng.random_range(0.0..max_angle)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(so3_exp(&Vector3::zeros()), Rotation::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let r = so3_exp(&Vector3::new(0.0, 0.0, PI / 2.0));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r.matrix() - expected).norm() < 1e-15);
    }

    #[test]
    fn log_identity_and_quarter_turn() {
        assert_eq!(so3_log(&Rotation::identity()).unwrap(), Vector3::zeros());
        let m = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let v = so3_log(&Rotation::from_matrix(m).unwrap()).unwrap();
        assert!((v - Vector3::new(0.0, 0.0, PI / 2.0)).norm() < 1e-15);
    }

    #[test]
    fn log_at_half_turn_about_x() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let r = Rotation::from_matrix(m).unwrap();
        let v = so3_log(&r).unwrap();
        assert!((v - Vector3::new(PI, 0.0, 0.0)).norm() < 1e-7);
        assert!((so3_exp(&v).matrix() - m).norm() < 1e-7);
    }

    #[test]
    fn log_rejects_non_orthonormal() {
        let m = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            Rotation::from_matrix(m),
            Err(Error::InvalidRotation(_))
        ));
        let reflection = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Rotation::from_matrix(reflection).is_err());
    }

    #[test]
    fn exp_log_roundtrip_seeded() {
        let mut rng = rng(7);
        for _ in 0..1000 {
            let v = random_axis_angle(&mut rng, PI - 1e-3);
            let back = so3_log(&so3_exp(&v)).unwrap();
            assert!((back - v).norm() < 1e-9, "{v} -> {back}");
        }
    }

    #[test]
    fn log_near_pi_round_trips_through_exp() {
        let mut rng = rng(3);
        for _ in 0..200 {
            let axis = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng)).normalize();
            let angle = PI - rng.random_range(0.0..2e-2);
            let r = so3_exp(&(axis * angle));
            let v = so3_log(&r).unwrap();
            assert!((so3_exp(&v).matrix() - r.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn geodesic_endpoints_and_midpoint() {
        let mut rng = rng(11);
        let r0 = sample_uniform_rotation(&mut rng);
        let r1 = sample_uniform_rotation(&mut rng);
        assert!((geodesic_interpolate(&r0, &r1, 0.0).matrix() - r0.matrix()).norm() < 1e-9);
        assert!((geodesic_interpolate(&r0, &r1, 1.0).matrix() - r1.matrix()).norm() < 1e-9);

        let rz90 = so3_exp(&Vector3::new(0.0, 0.0, PI / 2.0));
        let half = geodesic_interpolate(&Rotation::identity(), &rz90, 0.5);
        let rz45 = so3_exp(&Vector3::new(0.0, 0.0, PI / 4.0));
        assert!((half.matrix() - rz45.matrix()).norm() < 1e-12);
    }

    #[test]
    fn geodesic_has_constant_speed() {
        let mut rng = rng(5);
        for _ in 0..200 {
            let r0 = sample_uniform_rotation(&mut rng);
            let r1 = r0.compose(&so3_exp(&random_axis_angle(&mut rng, PI - 1e-2)));
            let t: f64 = rng.random();
            let rt = geodesic_interpolate(&r0, &r1, t);
            assert!((r0.angle_to(&rt) - t * r0.angle_to(&r1)).abs() < 1e-8);
        }
    }

    #[test]
    fn geodesic_is_left_invariant() {
        let mut rng = rng(9);
        for _ in 0..100 {
            let g = sample_uniform_rotation(&mut rng);
            let r0 = sample_uniform_rotation(&mut rng);
            let r1 = r0.compose(&so3_exp(&random_axis_angle(&mut rng, PI - 1e-2)));
            let t: f64 = rng.random();
            let lhs = geodesic_interpolate(&g.compose(&r0), &g.compose(&r1), t);
            let rhs = g.compose(&geodesic_interpolate(&r0, &r1, t));
            assert!((lhs.matrix() - rhs.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn translation_interpolation() {
        let x0 = Vector3::zeros();
        let x1 = Vector3::new(2.0, 0.0, 0.0);
        assert_eq!(
            translation_interpolate(&x0, &x1, 0.25),
            Vector3::new(0.5, 0.0, 0.0)
        );
        let x1 = Vector3::new(0.1, 0.2, 0.3);
        let x0 = Vector3::new(0.7, -0.2, 1e-3);
        assert_eq!(translation_interpolate(&x0, &x1, 1.0), x1);
        let mid = translation_interpolate(&x0, &x1, 0.5);
        assert!((mid - (x0 + x1) / 2.0).norm() < 1e-15);
    }

    #[test]
    fn prior_is_deterministic_and_masked() {
        let a = sample_frame_prior(&mut rng(42));
        let b = sample_frame_prior(&mut rng(42));
        assert_eq!(a, b);
        assert_eq!(a.aatype, crate::discrete::AMINO_ACID_SPACE.mask_index());
        assert!(check_rotation(a.rot.matrix()).is_ok());
    }

    #[test]
    fn backbone_template_identity_translation_rotation() {
        let mut frame = ResidueFrame {
            trans: Vector3::zeros(),
            rot: Rotation::identity(),
            aatype: 0,
        };
        let atoms = backbone_atoms_from_frame(&frame);
        for (k, atom) in atoms.iter().enumerate() {
            let local = Vector3::from(BACKBONE_TEMPLATE_ANGSTROM[k]) * MODEL_UNITS_PER_ANGSTROM;
            assert_eq!(*atom, local);
        }
        let d = Vector3::new(0.3, -1.0, 2.0);
        frame.trans = d;
        let moved = backbone_atoms_from_frame(&frame);
        for k in 0..4 {
            assert!((moved[k] - (atoms[k] + d)).norm() < 1e-15);
        }
        assert_eq!(moved[1], d);

        frame.rot = sample_uniform_rotation(&mut rng(1));
        let rotated = backbone_atoms_from_frame(&frame);
        for i in 0..4 {
            for j in 0..4 {
                let a = (atoms[i] - atoms[j]).norm();
                let b = (rotated[i] - rotated[j]).norm();
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn template_frame_reconstruction_is_identity() {
        let t = BACKBONE_TEMPLATE_ANGSTROM.map(Vector3::from);
        let f = frame_from_backbone(&t[0], &t[1], &t[2]).unwrap();
        assert!((f.rot.matrix() - Matrix3::identity()).norm() < 1e-12);
        assert_eq!(f.trans, Vector3::zeros());
    }

    #[test]
    fn frame_record_roundtrip() {
        let mut rng = rng(2);
        let mut f = sample_frame_prior(&mut rng);
        f.aatype = 4;
        let rec = f.to_record();
        assert!(rec[0] >= 0.0);
        let back = ResidueFrame::from_record(&rec, 4).unwrap();
        assert!((back.rot.matrix() - f.rot.matrix()).norm() < 1e-12);
        assert_eq!(back.trans, f.trans);
    }

    #[test]
    fn renormalize_recovers_rotation() {
        let r = sample_uniform_rotation(&mut rng(4));
        let noisy = Rotation::from_matrix_unchecked(r.matrix() + Matrix3::repeat(1e-7));
        let fixed = noisy.renormalized();
        assert!(check_rotation(fixed.matrix()).is_ok());
        assert!((fixed.matrix() - r.matrix()).norm() < 1e-6);
    }
}
