//! ASCII PLY writer for colored point clouds.

use std::fmt::Write;

pub struct Vertex {
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
}

/// Coordinates carry 9 significant digits.
pub fn to_ascii(vertices: &[Vertex], comment: &str) -> String {
    let mut s = String::with_capacity(64 * (vertices.len() + 4));
    s.push_str("ply\nformat ascii 1.0\n");
    if !comment.is_empty() {
        let _ = writeln!(s, "comment {comment}");
    }
    let _ = writeln!(s, "element vertex {}", vertices.len());
    for axis in ["x", "y", "z"] {
        let _ = writeln!(s, "property double {axis}");
    }
    for c in ["red", "green", "blue"] {
        let _ = writeln!(s, "property uchar {c}");
    }
    s.push_str("end_header\n");
    for v in vertices {
        let [x, y, z] = v.xyz;
        let [r, g, b] = v.rgb;
        let _ = writeln!(s, "{x:.8e} {y:.8e} {z:.8e} {r} {g} {b}");
    }
    s
}

pub fn color(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}
