//! Bird's-eye-view SVG of a fused scene. CAVs are pink, regular vehicles
//! yellow with opacity equal to their fused confidence. North is up.

use std::fmt::Write as _;
use std::path::Path;

use crate::geometry::Vec2;
use crate::scenario::CavState;

use super::FusedObject;

pub const PX_PER_M: f64 = 5.0;
pub const MARGIN_M: f64 = 20.0;
pub const CAV_FILL: &str = "#ff69b4";
pub const VEHICLE_FILL: &str = "#ffd700";
const CAV_SIZE: (f64, f64) = (4.5, 2.0);

/// Maps world coordinates to canvas pixels for a given world bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Canvas {
    pub min: Vec2,
    pub max: Vec2,
}

impl Canvas {
    pub fn fit(points: &[Vec2]) -> Self {
        if points.is_empty() {
            return Canvas {
                min: Vec2(-MARGIN_M, -MARGIN_M),
                max: Vec2(MARGIN_M, MARGIN_M),
            };
        }
        let (mut lo, mut hi) = (points[0], points[0]);
        for p in points {
            lo = Vec2(lo.0.min(p.0), lo.1.min(p.1));
            hi = Vec2(hi.0.max(p.0), hi.1.max(p.1));
        }
        Canvas {
            min: lo - Vec2(MARGIN_M, MARGIN_M),
            max: hi + Vec2(MARGIN_M, MARGIN_M),
        }
    }

    pub fn width_px(&self) -> f64 {
        (self.max.0 - self.min.0) * PX_PER_M
    }

    pub fn height_px(&self) -> f64 {
        (self.max.1 - self.min.1) * PX_PER_M
    }

    pub fn to_px(&self, p: Vec2) -> Vec2 {
        Vec2((p.0 - self.min.0) * PX_PER_M, (self.max.1 - p.1) * PX_PER_M)
    }
}

fn rect(out: &mut String, id: u32, kind: &str, center: Vec2, heading: f64, size: (f64, f64), fill: &str, opacity: f64, canvas: &Canvas) {
    let c = canvas.to_px(center);
    let (w, h) = (size.0 * PX_PER_M, size.1 * PX_PER_M);
    let _ = writeln!(
        out,
        r#"  <g data-id="{id}" data-kind="{kind}" data-cx="{:.2}" data-cy="{:.2}">"#,
        c.0, c.1
    );
    let _ = writeln!(
        out,
        r##"    <rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}" fill-opacity="{:.3}" stroke="#333333" transform="rotate({:.2} {:.2} {:.2})"/>"##,
        c.0 - w / 2.0,
        c.1 - h / 2.0,
        w,
        h,
        opacity.clamp(0.0, 1.0),
        -heading.to_degrees(),
        c.0,
        c.1
    );
    let _ = writeln!(
        out,
        r#"    <text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{id}</text>"#,
        c.0,
        c.1 - h / 2.0 - 3.0
    );
    out.push_str("  </g>\n");
}

pub fn bev_svg(fused: &[FusedObject], states: &[CavState]) -> String {
    let mut cavs: Vec<&CavState> = states.iter().collect();
    cavs.sort_by_key(|s| s.id);
    let mut objs: Vec<&FusedObject> = fused
        .iter()
        .filter(|o| !cavs.iter().any(|s| s.id == o.object_id))
        .collect();
    objs.sort_by_key(|o| o.object_id);

    let pts: Vec<Vec2> = cavs.iter().map(|s| s.position).chain(objs.iter().map(|o| o.location)).collect();
    let canvas = Canvas::fit(&pts);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.2} {:.2}" data-min-x="{:.2}" data-max-y="{:.2}" data-px-per-m="{}">"#,
        canvas.width_px().ceil(),
        canvas.height_px().ceil(),
        canvas.width_px(),
        canvas.height_px(),
        canvas.min.0,
        canvas.max.1,
        PX_PER_M
    );
    out.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"#f4f4f4\"/>\n");
    for o in objs {
        rect(&mut out, o.object_id.0, "vehicle", o.location, o.heading, (o.extent[0], o.extent[1]), VEHICLE_FILL, o.p_fused, &canvas);
    }
    for s in cavs {
        rect(&mut out, s.id.0, "cav", s.position, s.heading, CAV_SIZE, CAV_FILL, 1.0, &canvas);
    }
    out.push_str("</svg>\n");
    out
}

pub fn render_bev(fused: &[FusedObject], states: &[CavState], path: &Path) -> std::io::Result<()> {
    std::fs::write(path, bev_svg(fused, states))
}
