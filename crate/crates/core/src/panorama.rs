//! Rectilinear views cut from a 360° panorama and the pixel ↔ bearing maps.
//!
//! Each panorama is split into [`VIEWS_PER_PANORAMA`] pinhole views with a
//! 90° horizontal field of view, rotated 45° apart so that neighbours
//! overlap by half a view. Only horizontal geometry matters for bearings;
//! the vertical pixel coordinate is carried through untouched.

use crate::geodesy::{wrap_angle_deg, Bearing};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VIEWS_PER_PANORAMA: u8 = 8;
pub const VIEW_HFOV_DEG: f64 = 90.0;
pub const VIEW_YAW_STEP_DEG: f64 = 45.0;
pub const DEFAULT_VIEW_WIDTH: u32 = 640;
pub const DEFAULT_VIEW_HEIGHT: u32 = 640;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PanoramaError {
    #[error("pixel ({u}, {v}) outside {width}x{height} view")]
    OutOfView { u: f64, v: f64, width: u32, height: u32 },
    #[error("view index {0} out of range")]
    BadViewIndex(u8),
}

/// Pixel position, origin top-left, `u` rightward and `v` downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Pinhole intrinsics shared by the views of a panorama.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Specification of one rectilinear view of a panorama.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectilinearView {
    pub panorama_id: String,
    pub view_index: u8,
    /// Yaw of the view's optical axis relative to the panorama heading.
    pub yaw_offset: f64,
    pub hfov: f64,
    pub width: u32,
    pub height: u32,
    pub focal_px: f64,
}

impl RectilinearView {
    pub fn new(panorama_id: &str, view_index: u8, width: u32, height: u32, hfov: f64) -> Self {
        Self {
            panorama_id: panorama_id.to_string(),
            view_index,
            yaw_offset: VIEW_YAW_STEP_DEG * f64::from(view_index),
            hfov,
            width,
            height,
            focal_px: focal_from_hfov(width, hfov),
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            focal_px: self.focal_px,
            cx: f64::from(self.width) / 2.0,
            cy: f64::from(self.height) / 2.0,
        }
    }

    pub fn contains(&self, p: PixelCoord) -> bool {
        p.u >= 0.0 && p.u < f64::from(self.width) && p.v >= 0.0 && p.v < f64::from(self.height)
    }
}

/// Dimensions and field of view shared by every view of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewGeometry {
    pub width: u32,
    pub height: u32,
    pub hfov: f64,
}

impl Default for ViewGeometry {
    fn default() -> Self {
        Self {
            width: DEFAULT_VIEW_WIDTH,
            height: DEFAULT_VIEW_HEIGHT,
            hfov: VIEW_HFOV_DEG,
        }
    }
}

impl ViewGeometry {
    pub fn view(&self, panorama_id: &str, view_index: u8) -> Result<RectilinearView, PanoramaError> {
        if view_index >= VIEWS_PER_PANORAMA {
            return Err(PanoramaError::BadViewIndex(view_index));
        }
        Ok(RectilinearView::new(panorama_id, view_index, self.width, self.height, self.hfov))
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            focal_px: focal_from_hfov(self.width, self.hfov),
            cx: f64::from(self.width) / 2.0,
            cy: f64::from(self.height) / 2.0,
        }
    }
}

pub fn focal_from_hfov(width: u32, hfov_deg: f64) -> f64 {
    (f64::from(width) / 2.0) / (hfov_deg.to_radians() / 2.0).tan()
}

/// The eight view specifications of one panorama; `width`/`height` are the
/// view dimensions in pixels.
pub fn split_panorama(panorama_id: &str, width: u32, height: u32) -> Vec<RectilinearView> {
    (0..VIEWS_PER_PANORAMA)
        .map(|k| RectilinearView::new(panorama_id, k, width, height, VIEW_HFOV_DEG))
        .collect()
}

/// World bearing of the ray through pixel `p` of `view`.
pub fn pixel_to_bearing(
    view: &RectilinearView,
    camera_heading: Bearing,
    p: PixelCoord,
) -> Result<Bearing, PanoramaError> {
    if !view.contains(p) {
        return Err(PanoramaError::OutOfView {
            u: p.u,
            v: p.v,
            width: view.width,
            height: view.height,
        });
    }
    let offset = ((p.u - f64::from(view.width) / 2.0) / view.focal_px).atan().to_degrees();
    Ok(Bearing::new(camera_heading.degrees() + view.yaw_offset + offset))
}

/// Every `(view_index, pixel)` whose ray has bearing `b`. Overlapping views
/// give one or two candidates; the pixel row is the view's center row.
pub fn bearing_to_view_pixel(
    views: &[RectilinearView],
    camera_heading: Bearing,
    b: Bearing,
) -> Vec<(u8, PixelCoord)> {
    views
        .iter()
        .filter_map(|view| {
            let offset = wrap_angle_deg(b.degrees() - camera_heading.degrees() - view.yaw_offset);
            if offset.abs() > view.hfov / 2.0 {
                return None;
            }
            let p = PixelCoord::new(
                f64::from(view.width) / 2.0 + view.focal_px * offset.to_radians().tan(),
                f64::from(view.height) / 2.0,
            );
            view.contains(p).then_some((view.view_index, p))
        })
        .collect()
}
