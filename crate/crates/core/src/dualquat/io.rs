//! Text pose records: `frame_index q_r(4) q_d(4)` per line.

use std::fmt::Write;

use super::{DqError, PoseSet, UnitDualQuat};

pub fn format_pose_file(poses: &PoseSet) -> String {
    let mut s = String::new();
    for (i, p) in poses.iter().enumerate() {
        write!(s, "{i}").unwrap();
        for c in p.to_array() {
            write!(s, " {c:e}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Parses a pose file. Blank lines and `#` comments are ignored; frame
/// indices must be `0, 1, 2, ...` in order.
pub fn parse_pose_file(text: &str) -> Result<PoseSet, DqError> {
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| DqError::Parse { line: n + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(err(format!("expected 9 fields, found {}", fields.len())));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad frame index `{}`", fields[0])))?;
        if idx != poses.len() {
            return Err(err(format!("frame index {idx} out of order, expected {}", poses.len())));
        }
        let mut c = [0.0; 8];
        for (slot, f) in c.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("bad number `{f}`")))?;
        }
        let p = UnitDualQuat::from_array(c).map_err(|e| err(e.to_string()))?;
        poses.push(p);
    }
    if let Some(first) = poses.first_mut() {
        // Tolerate round-off in a written identity.
        if first.max_diff(UnitDualQuat::IDENTITY) < 1e-12 {
            *first = UnitDualQuat::IDENTITY;
        }
    }
    PoseSet::new(poses)
}

/// One row-major 4x4 matrix per line, prefixed by the frame index.
pub fn format_matrix_file(poses: &PoseSet) -> String {
    let mut s = String::new();
    for (i, p) in poses.iter().enumerate() {
        write!(s, "{i}").unwrap();
        let m = p.to_se3().to_matrix4();
        for r in 0..4 {
            for c in 0..4 {
                write!(s, " {:e}", m[(r, c)]).unwrap();
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dualquat::Quat;
    use nalgebra::Vector3;

    #[test]
    fn round_trip_is_exact() {
        let poses = PoseSet::new(vec![
            UnitDualQuat::IDENTITY,
            UnitDualQuat::from_rotation_translation(
                Quat::from_axis_angle(Vector3::new(1.0, 2.0, 0.5), 0.3),
                Vector3::new(0.1, -0.2, 1.0),
            ),
        ])
        .unwrap();
        let text = format_pose_file(&poses);
        assert_eq!(parse_pose_file(&text).unwrap(), poses);
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let e = parse_pose_file("0 1 0 0 0 0 0 0 0\n1 1 0 0\n").unwrap_err();
        assert!(matches!(e, DqError::Parse { line: 2, .. }));
        let e = parse_pose_file("0 2 0 0 0 0 0 0 0\n").unwrap_err();
        assert!(matches!(e, DqError::Parse { line: 1, .. }));
    }

    #[test]
    fn matrix_export_has_homogeneous_row() {
        let poses = PoseSet::new(vec![UnitDualQuat::IDENTITY]).unwrap();
        let line = format_matrix_file(&poses);
        let v: Vec<f64> = line.split_whitespace().skip(1).map(|s| s.parse().unwrap()).collect();
        assert_eq!(&v[12..], &[0.0, 0.0, 0.0, 1.0]);
    }
}
