//! Hand-written SVG for 2-DoF fields: banded distance, collision boundary,
//! gradient quiver.

use qflow::field::FieldAnswer;
use qflow::geometry::Configuration;
use qflow::oracle::CollisionGrid;
use std::fmt::Write;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 24.0;
/// Distance band width for the level-set shading, in radians.
pub const BAND: f64 = 0.25;

struct Frame {
    lo: [f64; 2],
    span: [f64; 2],
}

impl Frame {
    fn x(&self, q0: f64) -> f64 {
        MARGIN + (q0 - self.lo[0]) / self.span[0] * SIZE
    }

    // SVG y grows downward.
    fn y(&self, q1: f64) -> f64 {
        MARGIN + SIZE - (q1 - self.lo[1]) / self.span[1] * SIZE
    }
}

/// `queries` is an `n` x `n` row-major grid of cell centers (first joint
/// slowest) with one answer each.
pub fn field_svg(
    header: &str,
    title: &str,
    grid: &CollisionGrid,
    queries: &[Configuration],
    answers: &[Option<FieldAnswer>],
    n: usize,
    arrows_per_axis: usize,
) -> String {
    let b = grid.bounds();
    let f = Frame {
        lo: [b[0].0, b[1].0],
        span: [b[0].1 - b[0].0, b[1].1 - b[1].0],
    };
    let full = SIZE + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    s.push_str(header);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}">"#
    );
    let _ = writeln!(s, r#"<title>{title}</title>"#);
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);

    let (cw, ch) = (SIZE / n as f64, SIZE / n as f64);
    let _ = writeln!(s, r#"<g stroke="none">"#);
    for (q, a) in queries.iter().zip(answers) {
        let fill = match a {
            Some(a) if a.distance == 0.0 => "#d62728".to_string(),
            Some(a) => {
                let band = (a.distance / BAND).floor() as i64;
                let l = 95 - 6 * band.min(10);
                let l = if band % 2 == 0 { l } else { l - 3 };
                format!("hsl(210,40%,{l}%)")
            }
            None => "#000000".to_string(),
        };
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{cw:.2}" height="{ch:.2}" fill="{fill}"/>"#,
            f.x(q[0]) - cw / 2.0,
            f.y(q[1]) - ch / 2.0
        );
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r##"<path fill="none" stroke="#000000" stroke-width="1" d=""##);
    let res = grid.resolution();
    let (dx, dy) = (f.span[0] / res[0] as f64, f.span[1] / res[1] as f64);
    let flags = grid.flags();
    let at = |i: usize, j: usize| flags[i * res[1] + j];
    for i in 0..res[0] {
        for j in 0..res[1] {
            if !at(i, j) {
                continue;
            }
            let (x0, x1) = (f.lo[0] + i as f64 * dx, f.lo[0] + (i + 1) as f64 * dx);
            let (y0, y1) = (f.lo[1] + j as f64 * dy, f.lo[1] + (j + 1) as f64 * dy);
            let mut seg = |a: (f64, f64), c: (f64, f64)| {
                let _ = write!(s, "M{:.2} {:.2}L{:.2} {:.2}", f.x(a.0), f.y(a.1), f.x(c.0), f.y(c.1));
            };
            if i > 0 && !at(i - 1, j) {
                seg((x0, y0), (x0, y1));
            }
            if i + 1 < res[0] && !at(i + 1, j) {
                seg((x1, y0), (x1, y1));
            }
            if j > 0 && !at(i, j - 1) {
                seg((x0, y0), (x1, y0));
            }
            if j + 1 < res[1] && !at(i, j + 1) {
                seg((x0, y1), (x1, y1));
            }
        }
    }
    let _ = writeln!(s, r#""/>"#);

    let stride = n.div_ceil(arrows_per_axis.max(1)).max(1);
    let len = 0.45 * stride as f64 * cw;
    let _ = writeln!(s, r##"<g stroke="#1f1f1f" stroke-width="1.2" fill="#1f1f1f">"##);
    for i in (0..n).step_by(stride) {
        for j in (0..n).step_by(stride) {
            let k = i * n + j;
            let Some(Some(a)) = answers.get(k) else { continue };
            let Some(g) = &a.gradient else { continue };
            let q = &queries[k];
            let (x, y) = (f.x(q[0]), f.y(q[1]));
            // Screen vector; the y flip keeps arrows in joint-space orientation.
            let (ex, ey) = (g[0] / f.span[0] * SIZE, -g[1] / f.span[1] * SIZE);
            let norm = (ex * ex + ey * ey).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                continue;
            }
            let scale = len * a.gradient_norm().unwrap_or(1.0).min(1.0) / norm;
            let _ = writeln!(
                s,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.2"/><line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{:.2}"/>"#,
                x + ex * scale,
                y + ey * scale
            );
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{:.0}" font-family="sans-serif" font-size="12">{title}</text>"#,
        MARGIN - 8.0
    );
    let _ = writeln!(s, "</svg>");
    s
}
