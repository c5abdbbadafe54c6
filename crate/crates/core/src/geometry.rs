//! Rigid frames in 3-D: construction from backbone atoms, composition,
//! sampling, and dihedral angles.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::Scalar;

pub type Vec3<T> = [T; 3];
/// Row-major 3x3 matrix: `m[row][col]`.
pub type Mat3<T> = [[T; 3]; 3];

/// Minimum bond length / non-parallel offset accepted when building frames, in Å.
pub const DEGENERACY_EPS: f64 = 1e-8;

#[inline]
pub fn sub<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale<T: Scalar>(a: Vec3<T>, k: T) -> Vec3<T> {
    [a[0] * k, a[1] * k, a[2] * k]
}

#[inline]
pub fn dot<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm<T: Scalar>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn mat_vec<T: Scalar>(m: &Mat3<T>, x: Vec3<T>) -> Vec3<T> {
    [dot(m[0], x), dot(m[1], x), dot(m[2], x)]
}

/// `mᵀ x`
#[inline]
pub fn mat_t_vec<T: Scalar>(m: &Mat3<T>, x: Vec3<T>) -> Vec3<T> {
    [
        m[0][0] * x[0] + m[1][0] * x[1] + m[2][0] * x[2],
        m[0][1] * x[0] + m[1][1] * x[1] + m[2][1] * x[2],
        m[0][2] * x[0] + m[1][2] * x[1] + m[2][2] * x[2],
    ]
}

pub fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

pub fn transpose<T: Scalar>(m: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (r, row) in m.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c][r] = v;
        }
    }
    out
}

pub fn determinant<T: Scalar>(m: &Mat3<T>) -> T {
    dot(m[0], cross(m[1], m[2]))
}

/// Tolerance for orthonormality checks at the precision of `T`.
pub fn orthonormal_tolerance<T: Scalar>() -> T {
    match T::PRECISION {
        crate::Precision::F64 => T::of(1e-9),
        crate::Precision::F32 => T::of(1e-5),
    }
}

/// Rotation followed by translation: `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T: Scalar> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Scalar> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> RigidTransform<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            translation: [z; 3],
        }
    }

    /// Checked constructor: `rotation` must be a proper rotation.
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        if !t.is_valid(orthonormal_tolerance()) {
            return Err(Error::SingularFrame(format!(
                "rotation {rotation:?} is not orthonormal with det +1"
            )));
        }
        Ok(t)
    }

    pub fn from_translation(translation: Vec3<T>) -> Self {
        Self {
            translation,
            ..Self::identity()
        }
    }

    /// Rotation of the unit quaternion `q / |q|`, `q = (w, x, y, z)`.
    pub fn from_quaternion(q: [T; 4], translation: Vec3<T>) -> Self {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let [w, x, y, z] = q.map(|c| c / n);
        let two = T::of(2.0);
        let one = T::one();
        let rotation = [
            [
                one - two * (y * y + z * z),
                two * (x * y - w * z),
                two * (x * z + w * y),
            ],
            [
                two * (x * y + w * z),
                one - two * (x * x + z * z),
                two * (y * z - w * x),
            ],
            [
                two * (x * z - w * y),
                two * (y * z + w * x),
                one - two * (x * x + y * y),
            ],
        ];
        Self {
            rotation,
            translation,
        }
    }

    /// Rotation by `angle` radians about the +z axis.
    pub fn rotation_z(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self {
            rotation: [[c, -s, z], [s, c, z], [z, z, o]],
            translation: [z; 3],
        }
    }

    /// `RᵀR = I` and `det R = +1` within `tol`.
    pub fn is_valid(&self, tol: T) -> bool {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let ortho = (0..3).all(|r| {
            (0..3).all(|c| {
                let target = if r == c { T::one() } else { T::zero() };
                (rtr[r][c] - target).abs() <= tol
            })
        });
        ortho
            && (determinant(&self.rotation) - T::one()).abs() <= tol
            && self.translation.iter().all(|x| x.is_finite())
    }

    #[inline]
    pub fn apply(&self, x: Vec3<T>) -> Vec3<T> {
        add(mat_vec(&self.rotation, x), self.translation)
    }

    /// `Rᵀ (x − t)`
    #[inline]
    pub fn apply_inverse(&self, x: Vec3<T>) -> Vec3<T> {
        mat_t_vec(&self.rotation, sub(x, self.translation))
    }

    /// The transform acting as `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation);
        Self {
            rotation: rt,
            translation: scale(mat_vec(&rt, self.translation), -T::one()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> RigidTransform<U> {
        RigidTransform {
            rotation: self.rotation.map(|r| r.map(|v| U::of(v.as_f64()))),
            translation: self.translation.map(|v| U::of(v.as_f64())),
        }
    }
}

/// Frame centred on `origin` with first axis towards `p_b` and second axis in
/// the plane of `p_a`, via Gram–Schmidt.
///
/// For protein backbones pass `(N, Cα, C)`; for RNA `(O4′, C4′, C3′)` or any
/// other triple with the frame centre in the middle.
pub fn frame_from_three_points<T: Scalar>(
    p_a: Vec3<T>,
    origin: Vec3<T>,
    p_b: Vec3<T>,
) -> Result<RigidTransform<T>> {
    let eps = T::of(DEGENERACY_EPS);
    let u = sub(p_b, origin);
    let un = norm(u);
    if !(un > eps) {
        return Err(Error::SingularFrame(format!(
            "origin→p_b has length {un} (<= {DEGENERACY_EPS} Å)"
        )));
    }
    let e1 = scale(u, un.recip());
    let v = sub(p_a, origin);
    if !(norm(v) > eps) {
        return Err(Error::SingularFrame(format!(
            "origin→p_a has length {} (<= {DEGENERACY_EPS} Å)",
            norm(v)
        )));
    }
    let w = sub(v, scale(e1, dot(v, e1)));
    let wn = norm(w);
    if !(wn > eps) {
        return Err(Error::SingularFrame(
            "origin→p_a is parallel to origin→p_b".into(),
        ));
    }
    let e2 = scale(w, wn.recip());
    let e3 = cross(e1, e2);
    let rotation = [
        [e1[0], e2[0], e3[0]],
        [e1[1], e2[1], e3[1]],
        [e1[2], e2[2], e3[2]],
    ];
    Ok(RigidTransform {
        rotation,
        translation: origin,
    })
}

/// Rotation uniform on SO(3) (normalized Gaussian quaternion) and translation
/// with i.i.d. `N(0, translation_scale²)` components.
pub fn random_rototranslation<T: Scalar>(
    rng: &mut Rng,
    translation_scale: f64,
) -> Result<RigidTransform<T>> {
    if !(translation_scale >= 0.0) {
        return Err(Error::Config(format!(
            "translation scale must be non-negative, got {translation_scale}"
        )));
    }
    let q = loop {
        let q = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
        if q.iter().map(|c| c * c).sum::<f64>() > 1e-12 {
            break q;
        }
    };
    let t = [0; 3].map(|_| rng.normal() * translation_scale);
    // Build in f64 then cast so f32 frames are as orthonormal as f32 allows.
    Ok(RigidTransform::<f64>::from_quaternion(q, t).cast())
}

/// Signed dihedral between planes (p1, p2, p3) and (p2, p3, p4), in (−π, π].
/// Cis is 0, trans is π; sign follows the IUPAC convention.
pub fn torsion_angle<T: Scalar>(p1: Vec3<T>, p2: Vec3<T>, p3: Vec3<T>, p4: Vec3<T>) -> Result<T> {
    let b1 = sub(p2, p1);
    let b2 = sub(p3, p2);
    let b3 = sub(p4, p3);
    let eps = T::of(DEGENERACY_EPS);
    let b2n = norm(b2);
    if !(b2n > eps) {
        return Err(Error::UndefinedDihedral(
            "central bond has zero length".into(),
        ));
    }
    let n1 = cross(b1, b2);
    let n2 = cross(b2, b3);
    if !(norm(n1) > eps * b2n) || !(norm(n2) > eps * b2n) {
        return Err(Error::UndefinedDihedral(
            "collinear triple of points".into(),
        ));
    }
    let x = dot(n1, n2);
    let y = dot(cross(n1, n2), b2) / b2n;
    let angle = y.atan2(x);
    Ok(if angle <= -T::PI() { T::PI() } else { angle })
}

/// Per-residue frames plus validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet<T: Scalar> {
    pub frames: Vec<RigidTransform<T>>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> FrameSet<T> {
    /// All frames unmasked.
    pub fn new(frames: Vec<RigidTransform<T>>) -> Self {
        let mask = vec![true; frames.len()];
        Self { frames, mask }
    }

    pub fn with_mask(frames: Vec<RigidTransform<T>>, mask: Vec<bool>) -> Result<Self> {
        if frames.len() != mask.len() {
            return Err(Error::Shape(format!(
                "{} frames but mask of length {}",
                frames.len(),
                mask.len()
            )));
        }
        Ok(Self { frames, mask })
    }

    pub fn identity(len: usize) -> Self {
        Self::new(vec![RigidTransform::identity(); len])
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Every unmasked frame is a proper rigid transform within `tol`.
    pub fn validate(&self, tol: T) -> Result<()> {
        for (i, (f, &m)) in self.frames.iter().zip(&self.mask).enumerate() {
            if m && !f.is_valid(tol) {
                return Err(Error::SingularFrame(format!(
                    "frame {i} is not a rigid transform"
                )));
            }
        }
        Ok(())
    }

    /// Left-multiplies every frame by `g`.
    pub fn transformed(&self, g: &RigidTransform<T>) -> Self {
        Self {
            frames: self.frames.iter().map(|f| g.compose(f)).collect(),
            mask: self.mask.clone(),
        }
    }

    pub fn all_unmasked(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn cast<U: Scalar>(&self) -> FrameSet<U> {
        FrameSet {
            frames: self.frames.iter().map(|f| f.cast()).collect(),
            mask: self.mask.clone(),
        }
    }
}
