//! SVG overlay of a trial's tool paths colored by map intensity.
//!
//! The frame occupies `0..640 × 0..480`; a vertical intensity strip (time
//! runs downward) sits to its right. Each channel pair `(x, y)` is one tool.
//! Ramps have 256 steps, indexed by `round(255·intensity)`:
//!
//! - tool 0: `rgb(i, 0, 255 − i)` (blue → red)
//! - tool 1: `rgb(255, i, 0)` (red → yellow)
//! - further tools cycle through these.

use std::fmt::Write as _;
use std::path::Path;

use super::cam::CamMap;
use crate::data::Trial;
use crate::error::{Error, Result};

pub const FRAME_WIDTH: f64 = 640.0;
pub const FRAME_HEIGHT: f64 = 480.0;
const STRIP_X: f64 = 660.0;
const STRIP_WIDTH: f64 = 40.0;
const CANVAS_WIDTH: f64 = 720.0;

pub fn ramp_index(intensity: f64) -> u8 {
    (intensity.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn ramp_color(tool: usize, intensity: f64) -> (u8, u8, u8) {
    let i = ramp_index(intensity);
    match tool % 2 {
        0 => (i, 0, 255 - i),
        _ => (255, i, 0),
    }
}

fn hex((r, g, b): (u8, u8, u8)) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub svg: String,
    /// Vertices moved to the frame boundary.
    pub clamped: usize,
}

/// `trial` must be gap-filled and aligned with the map but not normalized.
pub fn cam_overlay_svg(trial: &Trial, cam: &CamMap) -> Result<Overlay> {
    let c = trial.n_channels();
    if c == 0 || c % 2 != 0 {
        return Err(Error::invalid(format!(
            "overlay needs (x, y) channel pairs, trial has {c} channels"
        )));
    }
    if cam.len() != trial.frames() {
        return Err(Error::shape(
            "overlay",
            format!("map has {} steps, trial has {} frames", cam.len(), trial.frames()),
        ));
    }
    if trial.missing_count() > 0 {
        return Err(Error::invalid("overlay needs gap-filled coordinates"));
    }
    let mut clamped = 0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS_WIDTH}" height="{FRAME_HEIGHT}" viewBox="0 0 {CANVAS_WIDTH} {FRAME_HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, trial.id());
    let _ = writeln!(
        s,
        r##"<rect x="0" y="0" width="{FRAME_WIDTH}" height="{FRAME_HEIGHT}" fill="#ffffff" stroke="#000000"/>"##
    );
    for tool in 0..c / 2 {
        let pts: Vec<(f64, f64)> = (0..trial.frames())
            .map(|t| {
                let (x, y) = (trial.get(t, 2 * tool), trial.get(t, 2 * tool + 1));
                let (cx, cy) = (x.clamp(0.0, FRAME_WIDTH), y.clamp(0.0, FRAME_HEIGHT));
                if (cx, cy) != (x, y) {
                    clamped += 1;
                }
                (cx, cy)
            })
            .collect();
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.3},{y:.3}")).collect();
        let _ = writeln!(
            s,
            r##"<polyline class="tool{tool}" points="{}" fill="none" stroke="#999999" stroke-width="1"/>"##,
            path.join(" ")
        );
        for ((x, y), &v) in pts.iter().zip(&cam.intensities) {
            let _ = writeln!(
                s,
                r#"<circle cx="{x:.3}" cy="{y:.3}" r="3" fill="{}"/>"#,
                hex(ramp_color(tool, v))
            );
        }
    }
    let h = FRAME_HEIGHT / cam.len() as f64;
    for (t, &v) in cam.intensities.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<rect x="{STRIP_X}" y="{:.3}" width="{STRIP_WIDTH}" height="{h:.3}" fill="{}"/>"#,
            t as f64 * h,
            hex(ramp_color(0, v))
        );
    }
    s.push_str("</svg>\n");
    if clamped > 0 {
        log::warn!("{}: {clamped} vertices outside the 640×480 frame were clamped", trial.id());
    }
    Ok(Overlay { svg: s, clamped })
}

pub fn render_cam_overlay(trial: &Trial, cam: &CamMap, path: &Path) -> Result<Overlay> {
    let overlay = cam_overlay_svg(trial, cam)?;
    std::fs::write(path, &overlay.svg).map_err(|e| Error::io(path, e))?;
    Ok(overlay)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(values: Vec<f64>) -> Trial {
        let ch = ["sx", "sy", "gx", "gy"].iter().map(|c| c.to_string()).collect();
        Trial::new("S01", 1, 1.0, ch, values).unwrap()
    }

    #[test]
    fn two_frames_give_two_vertices_per_tool() {
        let t = trial(vec![100.0, 100.0, 200.0, 200.0, 110.0, 120.0, 210.0, 220.0]);
        let cam = CamMap::from_raw("S01/1", 0, vec![0.0, 1.0]).unwrap();
        let o = cam_overlay_svg(&t, &cam).unwrap();
        assert_eq!(o.svg.matches("<polyline").count(), 2);
        assert_eq!(o.svg.matches("<circle").count(), 4);
        assert!(o.svg.starts_with("<svg") && o.svg.ends_with("</svg>\n"));
        assert_eq!(o.clamped, 0);
    }

    #[test]
    fn constant_half_map_uses_ramp_midpoint() {
        let t = trial(vec![1.0; 12]);
        let mut cam = CamMap::from_raw("S01/1", 0, vec![0.0; 3]).unwrap();
        cam.intensities = vec![0.5; 3];
        let a = cam_overlay_svg(&t, &cam).unwrap();
        assert_eq!(a, cam_overlay_svg(&t, &cam).unwrap());
        let mid0 = hex(ramp_color(0, 0.5));
        let mid1 = hex(ramp_color(1, 0.5));
        assert_eq!(mid0, "#80007f");
        assert_eq!(mid1, "#ff8000");
        assert_eq!(a.svg.matches(&format!(r#"fill="{mid0}""#)).count(), 3 + 3);
        assert_eq!(a.svg.matches(&format!(r#"fill="{mid1}""#)).count(), 3);
    }

    #[test]
    fn out_of_frame_points_are_clamped() {
        let t = trial(vec![-5.0, 100.0, 700.0, 500.0, 10.0, 10.0, 20.0, 20.0]);
        let cam = CamMap::from_raw("S01/1", 0, vec![0.0, 1.0]).unwrap();
        let o = cam_overlay_svg(&t, &cam).unwrap();
        assert_eq!(o.clamped, 2);
        assert!(o.svg.contains(r#"cx="0.000" cy="100.000""#));
        assert!(o.svg.contains(r#"cx="640.000" cy="480.000""#));
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let t = trial(vec![1.0; 8]);
        let cam = CamMap::from_raw("S01/1", 0, vec![0.0, 1.0]).unwrap();
        assert!(render_cam_overlay(&t, &cam, Path::new("/nonexistent/dir/x.svg")).is_err());
    }
}
