//! Static top-down scene drawings as SVG.

use std::fmt::Write as _;

use crate::kinematics::Vec2;
use crate::scene::{bbox_corners, LightState, PolylineKind, Scenario};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotOptions {
    /// Output width in pixels; height follows the scene's aspect ratio.
    pub width: f64,
    /// Margin around the scene in meters.
    pub margin: f64,
    /// Draw boxes every this many steps along each trajectory.
    pub box_every: usize,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self { width: 800.0, margin: 10.0, box_every: 4 }
    }
}

fn polyline_style(kind: PolylineKind) -> (&'static str, f64, &'static str) {
    match kind {
        PolylineKind::LaneCenter => ("#b0b0b0", 0.3, "1.5,1"),
        PolylineKind::RoadEdge => ("#404040", 0.4, "none"),
        PolylineKind::Crosswalk => ("#6a8caf", 0.3, "none"),
        PolylineKind::StopLine => ("#c03030", 0.5, "none"),
    }
}

fn light_color(s: LightState) -> &'static str {
    match s {
        LightState::Red => "#d62728",
        LightState::Yellow => "#e0b000",
        LightState::Green => "#2ca02c",
        LightState::Unknown => "#888888",
    }
}

/// Draws map polylines, each agent's trajectory with periodic boxes, and
/// light stop points at step `start`. Agents in `highlight` are drawn red,
/// the others blue; history steps before `start` are faded.
pub fn render_svg(s: &Scenario, start: usize, highlight: &[u32], opts: &PlotOptions) -> String {
    let mut pts: Vec<Vec2> = s.polylines.iter().flat_map(|p| p.points.iter().copied()).collect();
    for tr in &s.tracks {
        pts.extend(tr.states.iter().zip(&tr.valid).filter(|(_, v)| **v).map(|(st, _)| st.position()));
    }
    if pts.is_empty() {
        pts.push(Vec2::default());
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    x0 -= opts.margin;
    y0 -= opts.margin;
    x1 += opts.margin;
    y1 += opts.margin;
    let scale = opts.width / (x1 - x0).max(1e-6);
    let height = (y1 - y0) * scale;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="{x0:.3} {:.3} {:.3} {:.3}">"#,
        opts.width,
        height,
        -y1,
        x1 - x0,
        y1 - y0
    );
    let _ = writeln!(out, r#"<title>{}</title>"#, escape(&s.id));
    // Flip y so north is up.
    let _ = writeln!(out, r#"<rect x="{x0:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="white"/>"#, -y1, x1 - x0, y1 - y0);
    let _ = writeln!(out, r#"<g transform="scale(1,-1)">"#);
    for p in &s.polylines {
        let (color, w, dash) = polyline_style(p.kind);
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{w}" stroke-dasharray="{dash}"/>"#,
            points(&p.points)
        );
    }
    for l in &s.lights {
        let state = l.states.get(start).copied().unwrap_or(LightState::Unknown);
        let _ = writeln!(out, r#"<circle cx="{:.3}" cy="{:.3}" r="0.8" fill="{}"/>"#, l.stop_point.x, l.stop_point.y, light_color(state));
    }
    for tr in &s.tracks {
        let color = if highlight.contains(&tr.id()) { "#d62728" } else { "#1f77b4" };
        let valid: Vec<Vec2> = tr.states.iter().zip(&tr.valid).filter(|(_, v)| **v).map(|(st, _)| st.position()).collect();
        if valid.len() > 1 {
            let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="0.25"/>"#, points(&valid));
        }
        for (t, (st, v)) in tr.states.iter().zip(&tr.valid).enumerate() {
            let last = t + 1 == tr.states.len();
            if !*v || !(t == start || last || (t > start && (t - start) % opts.box_every.max(1) == 0)) {
                continue;
            }
            let opacity = if t == start { 0.9 } else { 0.35 };
            let corners = bbox_corners(st, &tr.meta);
            let _ = writeln!(
                out,
                r#"<polygon points="{}" fill="{color}" fill-opacity="{opacity}" stroke="{color}" stroke-width="0.1"/>"#,
                points(&corners)
            );
        }
    }
    out.push_str("</g>\n</svg>\n");
    out
}

fn points(p: &[Vec2]) -> String {
    let mut s = String::new();
    for (i, v) in p.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:.3},{:.3}", v.x, v.y);
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::synth::{generate_synthetic, GenConfig};

    #[test]
    fn renders_all_elements() {
        let cfg = GenConfig { intersection_turn: 1, ..GenConfig::empty() };
        let s = generate_synthetic(&cfg, 0).unwrap().remove(0);
        let svg = render_svg(&s, s.current_step(), &[0], &PlotOptions::default());
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), s.lights.len());
        assert!(svg.matches("<polyline").count() >= s.polylines.len() + s.tracks.len());
        assert!(svg.contains("#d62728") && svg.contains("#1f77b4"));
    }
}
