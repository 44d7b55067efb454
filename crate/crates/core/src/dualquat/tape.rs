//! Dual-quaternion primitives and pose losses on the tape.

use super::{PoseSet, Quat, UnitDualQuat};
use crate::numerics::gradcheck::uniform;
use crate::numerics::{GradCase, Primitive, Tensor, Var};

type Grads = Vec<Option<Vec<f64>>>;

/// Width of a quaternion-plus-translation pose row.
pub const QUAT_TRANS_WIDTH: usize = 7;

fn q4(s: &[f64]) -> Quat {
    Quat::new(s[0], s[1], s[2], s[3])
}

fn put(dst: &mut [f64], q: Quat) {
    dst.copy_from_slice(&q.to_array());
}

/// Row-wise projection of raw 8-vectors onto canonical unit dual
/// quaternions. Rows with a vanishing real part become NaN.
struct DqNormalize {
    signs: Vec<f64>,
    norms: Vec<f64>,
}

impl Primitive for DqNormalize {
    fn name(&self) -> &'static str {
        "dq_normalize"
    }

    fn vjp(&self, x: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        if !needs[0] {
            return vec![None];
        }
        let mut out = vec![0.0; g.len()];
        for (r, ((orow, xrow), grow)) in out
            .chunks_mut(8)
            .zip(x[0].data().chunks(8))
            .zip(g.chunks(8))
            .enumerate()
        {
            let (s, n) = (self.signs[r], self.norms[r]);
            let u = q4(&xrow[..4]).scale(1.0 / n);
            let d = q4(&xrow[4..]);
            let gr = q4(&grow[..4]).scale(s);
            let gd = q4(&grow[4..]).scale(s);
            let du = d.dot(u);
            let gdu = gd.dot(u);
            // q_d = d - <d,u> u
            let gu = gr.sub(d.scale(gdu)).sub(gd.scale(du));
            let g_raw_r = gu.sub(u.scale(gu.dot(u))).scale(1.0 / n);
            let g_raw_d = gd.sub(u.scale(gdu));
            put(&mut orow[..4], g_raw_r);
            put(&mut orow[4..], g_raw_d);
        }
        vec![Some(out)]
    }
}

/// Row-wise dual-quaternion product without sign canonicalization.
struct DqMul;

fn dq_product(a: &[f64], b: &[f64]) -> [f64; 8] {
    let (ar, ad, br, bd) = (q4(&a[..4]), q4(&a[4..]), q4(&b[..4]), q4(&b[4..]));
    let r = ar.mul(br);
    let d = ar.mul(bd).add(ad.mul(br));
    [r.w, r.x, r.y, r.z, d.w, d.x, d.y, d.z]
}

impl Primitive for DqMul {
    fn name(&self) -> &'static str {
        "dq_mul"
    }

    fn vjp(&self, x: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        let n = g.len();
        let mut ga = vec![0.0; n];
        let mut gb = vec![0.0; n];
        for r in 0..n / 8 {
            let a = &x[0].data()[r * 8..][..8];
            let b = &x[1].data()[r * 8..][..8];
            let gg = &g[r * 8..][..8];
            let (ar, ad, br, bd) = (q4(&a[..4]), q4(&a[4..]), q4(&b[..4]), q4(&b[4..]));
            let (gr, gd) = (q4(&gg[..4]), q4(&gg[4..]));
            // <g, a b> = <g b*, a> = <a* g, b>
            put(&mut ga[r * 8..][..4], gr.mul(br.conj()).add(gd.mul(bd.conj())));
            put(&mut ga[r * 8 + 4..][..4], gd.mul(br.conj()));
            put(&mut gb[r * 8..][..4], ar.conj().mul(gr).add(ad.conj().mul(gd)));
            put(&mut gb[r * 8 + 4..][..4], ar.conj().mul(gd));
        }
        vec![needs[0].then_some(ga), needs[1].then_some(gb)]
    }
}

impl<'t> Var<'t> {
    /// Projects each row of a `[R, 8]` tensor onto a canonical unit dual
    /// quaternion.
    pub fn dq_normalize(self) -> Var<'t> {
        let (value, signs, norms) = {
            let x = self.value();
            assert_eq!(x.cols(), 8, "dq_normalize expects rows of 8");
            let mut out = vec![0.0; x.numel()];
            let mut signs = Vec::with_capacity(x.rows());
            let mut norms = Vec::with_capacity(x.rows());
            for (orow, xrow) in out.chunks_mut(8).zip(x.data().chunks(8)) {
                let r = q4(&xrow[..4]);
                let n = r.norm();
                if !(n > 1e-8) {
                    orow.iter_mut().for_each(|v| *v = f64::NAN);
                    signs.push(1.0);
                    norms.push(f64::NAN);
                    continue;
                }
                let u = r.scale(1.0 / n);
                let d = q4(&xrow[4..]);
                let dual = d.sub(u.scale(d.dot(u)));
                let s = u.canonical_sign();
                put(&mut orow[..4], u.scale(s));
                put(&mut orow[4..], dual.scale(s));
                signs.push(s);
                norms.push(n);
            }
            (Tensor::new(x.shape().to_vec(), out), signs, norms)
        };
        self.tape.record(DqNormalize { signs, norms }, &[self], value)
    }
}

/// Row-wise `a_i * b_i` for `[R, 8]` inputs.
pub fn dq_mul_rows<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let value = {
        let (av, bv) = (a.value(), b.value());
        assert_eq!(av.shape(), bv.shape(), "dq_mul: shape mismatch");
        assert_eq!(av.cols(), 8);
        let data = av
            .data()
            .chunks(8)
            .zip(bv.data().chunks(8))
            .flat_map(|(x, y)| dq_product(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    };
    a.tape().record(DqMul, &[a, b], value)
}

/// Quaternion conjugate of both parts of every row.
pub fn conjugate_rows(x: Var<'_>) -> Var<'_> {
    let signs = x.tape().constant(Tensor::new([1, 8], super::conjugate_signs().to_vec()));
    x.mul_rows(signs)
}

fn tail_tensor(gt: &PoseSet) -> Tensor {
    Tensor::new([gt.len() - 1, 8], gt.tail_coefficients())
}

fn identity_rows(rows: usize) -> Tensor {
    Tensor::from_fn([rows, 8], |i| if i % 8 == 0 { 1.0 } else { 0.0 })
}

/// Symmetric alignment loss for predicted frames `2..T` (`pred` is
/// `[T-1, 8]`) against a full ground-truth pose set.
pub fn align_loss<'t>(pred: Var<'t>, gt: &PoseSet) -> Var<'t> {
    let tape = pred.tape();
    assert!(!gt.is_empty());
    let rows = gt.len() - 1;
    if rows == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    assert_eq!(pred.shape(), vec![rows, 8], "align_loss: pred/gt length mismatch");
    let g = tape.constant(tail_tensor(gt));
    let g_conj = conjugate_rows(g);
    let id = tape.constant(identity_rows(rows));
    let a = id.sub(dq_mul_rows(g, conjugate_rows(pred)));
    let b = id.sub(dq_mul_rows(pred, g_conj));
    a.row_norm().sum().add(b.row_norm().sum())
}

/// Separate camera loss components.
#[derive(Clone, Copy, Debug)]
pub struct CameraTerms<'t> {
    pub mse: Var<'t>,
    pub align: Var<'t>,
}

/// Mean squared coefficient error plus the alignment loss.
pub fn camera_terms<'t>(pred: Var<'t>, gt: &PoseSet) -> CameraTerms<'t> {
    let tape = pred.tape();
    let rows = gt.len().saturating_sub(1);
    if rows == 0 {
        let z = tape.constant(Tensor::scalar(0.0));
        return CameraTerms { mse: z, align: z };
    }
    assert_eq!(pred.shape(), vec![rows, 8], "camera_loss: pred/gt length mismatch");
    let g = tape.constant(tail_tensor(gt));
    CameraTerms {
        mse: pred.sub(g).square().mean(),
        align: align_loss(pred, gt),
    }
}

pub fn camera_loss<'t>(pred: Var<'t>, gt: &PoseSet) -> Var<'t> {
    let t = camera_terms(pred, gt);
    t.mse.add(t.align)
}

/// Ground-truth rows `(q, t)` for the quaternion-plus-translation variant.
pub fn quat_trans_rows(gt: &PoseSet) -> Tensor {
    let data = gt
        .iter()
        .skip(1)
        .flat_map(|p: &UnitDualQuat| {
            let q = p.rotation().to_array();
            let t = p.translation();
            [q[0], q[1], q[2], q[3], t.x, t.y, t.z]
        })
        .collect();
    Tensor::new([gt.len() - 1, QUAT_TRANS_WIDTH], data)
}

/// MSE over sign-canonical quaternion and translation, frames `2..T`.
pub fn quat_trans_loss<'t>(pred: Var<'t>, gt: &PoseSet) -> Var<'t> {
    let tape = pred.tape();
    if gt.len() < 2 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let g = tape.constant(quat_trans_rows(gt));
    pred.sub(g).square().mean()
}

fn random_pose_set(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> PoseSet {
    use rand::Rng;
    let mut poses = vec![UnitDualQuat::IDENTITY];
    for _ in 1..n {
        let raw: [f64; 8] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let mut raw = raw;
        raw[0] = raw[0].abs() + 0.5;
        poses.push(UnitDualQuat::from_raw(raw).unwrap());
    }
    PoseSet::new(poses).unwrap()
}

/// Gradient-check cases for the primitives and losses in this module.
pub fn grad_cases() -> Vec<GradCase> {
    vec![
        GradCase::new(
            "dq_normalize",
            |r| {
                let mut t = uniform(r, [3, 8], -1.0, 1.0);
                // keep the real part away from zero and from the sign flip
                for row in t.data_mut().chunks_mut(8) {
                    row[0] = row[0].abs() + 0.2;
                }
                vec![t]
            },
            |_, x| x[0].dq_normalize(),
        ),
        GradCase::new(
            "dq_mul",
            |r| vec![uniform(r, [2, 8], -1.0, 1.0), uniform(r, [2, 8], -1.0, 1.0)],
            |_, x| dq_mul_rows(x[0], x[1]),
        ),
        GradCase::new(
            "dq_conjugate",
            |r| vec![uniform(r, [2, 8], -1.0, 1.0)],
            |_, x| conjugate_rows(x[0]),
        ),
        GradCase::new(
            "camera_loss",
            |r| {
                let mut t = uniform(r, [3, 8], -1.0, 1.0);
                for row in t.data_mut().chunks_mut(8) {
                    row[0] = row[0].abs() + 0.2;
                }
                vec![t]
            },
            |_, x| {
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
                let gt = random_pose_set(&mut rng, 4);
                camera_loss(x[0].dq_normalize(), &gt)
            },
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use nalgebra::Vector3;

    fn offset_gradient(t3: Vector3<f64>) -> Vec<f64> {
        let gt = PoseSet::new(vec![
            UnitDualQuat::IDENTITY,
            UnitDualQuat::from_translation(Vector3::new(0.0, 0.0, 1.0)),
            UnitDualQuat::from_rotation_translation(Quat::from_axis_angle(Vector3::y(), 0.2), t3),
        ])
        .unwrap();
        let mut rows = gt.tail_coefficients();
        let off = UnitDualQuat::from_rotation_translation(
            gt.get(2).rotation(),
            gt.get(2).translation() + Vector3::new(0.1, 0.0, 0.0),
        );
        rows[8..].copy_from_slice(&off.to_array());
        let tape = Tape::new();
        let p = tape.leaf(Tensor::new([2, 8], rows));
        let loss = camera_loss(p, &gt);
        assert!(loss.item() > 0.0);
        let g = tape.backward(loss).unwrap();
        g.wrt(p).unwrap().to_vec()
    }

    #[test]
    fn translation_error_only_moves_that_frames_dual_part() {
        // Frame whose ground-truth translation is zero: the real-part
        // gradient vanishes exactly, only the dual part is pushed.
        let g = offset_gradient(Vector3::zeros());
        assert!(g[..8].iter().all(|&v| v == 0.0), "{g:?}");
        assert!(g[8..12].iter().all(|&v| v.abs() < 1e-12), "{g:?}");
        assert!(g[12..].iter().any(|&v| v.abs() > 1e-3));
    }

    #[test]
    fn translation_error_gradient_stays_in_its_frame() {
        // With a translated frame the alignment term couples the dual error
        // back into the real part, but other frames stay untouched.
        let g = offset_gradient(Vector3::new(0.3, 0.0, 1.5));
        assert!(g[..8].iter().all(|&v| v == 0.0), "{g:?}");
        assert!(g[12..].iter().any(|&v| v.abs() > 1e-3));
    }

    #[test]
    fn loss_at_truth_is_zero() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let gt = random_pose_set(&mut rng, 5);
        let tape = Tape::new();
        let p = tape.leaf(Tensor::new([4, 8], gt.tail_coefficients()));
        assert!(camera_loss(p, &gt).item().abs() < 1e-12);
    }

    #[test]
    fn degenerate_real_part_faults() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::zeros([1, 8]));
        let l = p.dq_normalize().sum();
        match tape.backward(l) {
            Err(crate::numerics::NumericsError::NonFinite { op, .. }) => assert_eq!(op, "dq_normalize"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grad_cases_pass() {
        for c in grad_cases() {
            let r = c.check_seeds(0, 10, 1e-5, 1e-4).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }
}
