//! Static SVG scatter of evaluated configurations in (resource, fidelity) space.

use std::fmt::Write;

use dattile_core::search::Candidate;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const TICKS: usize = 5;

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            return Self {
                lo: lo - 0.5,
                hi: hi + 0.5,
            };
        }
        let pad = 0.05 * (hi - lo);
        Self {
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

/// Grey dots for every evaluated candidate, red dots joined by a step line for
/// the front, and a dashed line at each resource bound inside the plotted range.
pub fn scatter_svg(evaluated: &[Candidate], front: &[Candidate], r_min: f64, r_max: f64) -> String {
    let xs = Axis::fit(evaluated.iter().chain(front).map(|c| c.f2));
    let ys = Axis::fit(evaluated.iter().chain(front).map(|c| c.f1));
    let px = |v: f64| MARGIN + xs.frac(v) * (WIDTH - 2.0 * MARGIN);
    let py = |v: f64| HEIGHT - MARGIN - ys.frac(v) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black"/>"#
    );
    for i in 0..=TICKS {
        let t = i as f64 / TICKS as f64;
        let xv = xs.lo + t * (xs.hi - xs.lo);
        let yv = ys.lo + t * (ys.hi - ys.lo);
        let (tx, ty) = (px(xv), py(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{tx:.2}" y1="{y0}" x2="{tx:.2}" y2="{:.2}" stroke="black"/><text x="{tx:.2}" y="{:.2}" text-anchor="middle">{xv:.0}</text>"#,
            y0 + 4.0,
            y0 + 18.0
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ty:.2}" x2="{x0}" y2="{ty:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.3}</text>"#,
            x0 - 4.0,
            x0 - 6.0,
            ty + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">resource (bits)</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">fidelity</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for bound in [r_min, r_max] {
        if bound > xs.lo && bound < xs.hi {
            let bx = px(bound);
            let _ = writeln!(
                s,
                r#"<line x1="{bx:.2}" y1="{y0}" x2="{bx:.2}" y2="{y1}" stroke="gray" stroke-dasharray="4 3"/>"#
            );
        }
    }
    for c in evaluated {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#999999"/>"##,
            px(c.f2),
            py(c.f1)
        );
    }
    let mut sorted: Vec<&Candidate> = front.iter().collect();
    sorted.sort_by(|a, b| a.f2.total_cmp(&b.f2).then(a.cfg.cmp(&b.cfg)));
    if sorted.len() > 1 {
        let mut d = String::new();
        for (i, c) in sorted.iter().enumerate() {
            let (x, y) = (px(c.f2), py(c.f1));
            if i == 0 {
                let _ = write!(d, "M{x:.2} {y:.2}");
            } else {
                let _ = write!(d, " H{x:.2} V{y:.2}");
            }
        }
        let _ = writeln!(s, r##"<path d="{d}" fill="none" stroke="#cc2222"/>"##);
    }
    for c in &sorted {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#cc2222"><title>{} fidelity={:.6} resource={}</title></circle>"##,
            px(c.f2),
            py(c.f1),
            c.cfg,
            c.f1,
            c.f2
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use dattile_core::SliceConfig;

    fn cand(h: u32, f1: f64, f2: f64) -> Candidate {
        Candidate::new(SliceConfig::new(h, h, 0).unwrap(), f1, f2)
    }

    #[test]
    fn marks_front_members() {
        let all = [cand(8, 0.5, 1024.0), cand(9, 0.4, 1300.0), cand(10, 0.7, 1600.0)];
        let front = [all[0], all[2]];
        let svg = scatter_svg(&all, &front, 0.0, 14_400.0);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("#999999").count(), 3);
        assert_eq!(svg.matches(r#"r="4""#).count(), 2);
        assert!(svg.contains("10x10+0"));
    }

    #[test]
    fn degenerate_inputs_do_not_panic() {
        let svg = scatter_svg(&[], &[], 0.0, 1.0);
        assert!(!svg.contains("NaN"));
        let one = [cand(8, 0.5, 1024.0)];
        assert!(!scatter_svg(&one, &one, 0.0, 1.0).contains("NaN"));
    }
}
