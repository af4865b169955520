//! Integer rasteriser for scenes. Each grid cell is split into sixteenths;
//! a pixel belongs to a shape when its centre does. Glyphs stay inside the
//! band `[2/16, 14/16)` of their cell and motion markers use the outer band,
//! so the two never overlap.

use super::{Camera, Motion, ObjectKind, Scene, SceneObject, GRID};
use crate::image::RgbImage;

pub const MARKER_RGB: [u8; 3] = [255, 255, 255];

/// View-specific background shade. Each view gets its own tint direction,
/// not just a brightness level: a uniform field that differs only in
/// scale would look the same to every view once features are normalised.
pub fn background(cam: Camera) -> [u8; 3] {
    const TINTS: [[u8; 3]; 6] = [
        [40, 8, 8],
        [8, 40, 8],
        [8, 8, 40],
        [40, 40, 8],
        [8, 40, 40],
        [40, 8, 40],
    ];
    TINTS[cam.index()]
}

/// Pixel centre of pixel `p` scaled so a cell of `cell` pixels spans
/// `0..16·cell`: returns `(2p+1)·8`, comparable against `sixteenths · cell`.
fn centre(p: usize) -> i64 {
    (2 * p as i64 + 1) * 8
}

fn covers(kind: ObjectKind, y: i64, x: i64, c: i64) -> bool {
    let within = |v: i64, lo: i64, hi: i64| v >= lo * c && v < hi * c;
    match kind {
        ObjectKind::Car => within(y, 5, 11) && within(x, 3, 13),
        ObjectKind::Truck => within(y, 3, 13) && within(x, 3, 13),
        ObjectKind::Pedestrian => {
            let (dy, dx) = (y - 8 * c, x - 8 * c);
            dy * dy + dx * dx <= (4 * c) * (4 * c)
        }
        ObjectKind::Cone => within(y, 3, 13) && 2 * (x - 8 * c).abs() <= y - 3 * c,
        ObjectKind::Barrier => within(y, 7, 9) && within(x, 2, 14),
    }
}

fn marker(motion: Motion, y: i64, x: i64, c: i64) -> bool {
    let within = |v: i64, lo: i64, hi: i64| v >= lo * c && v < hi * c;
    match motion {
        Motion::Stopped => false,
        Motion::MovingLeft => within(x, 0, 2) && within(y, 4, 12),
        Motion::MovingRight => within(x, 14, 16) && within(y, 4, 12),
        Motion::Approaching => within(y, 14, 16) && within(x, 4, 12),
    }
}

fn draw_object(img: &mut RgbImage, obj: &SceneObject, cell: usize) {
    let (row, col) = obj.cell;
    let c = cell as i64;
    for py in 0..cell {
        for px in 0..cell {
            let (y, x) = (centre(py), centre(px));
            let rgb = if covers(obj.kind, y, x, c) {
                Some(obj.color.rgb())
            } else if marker(obj.motion, y, x, c) {
                Some(MARKER_RGB)
            } else {
                None
            };
            if let Some(rgb) = rgb {
                img.put(col * cell + px, row * cell + py, rgb);
            }
        }
    }
}

/// Renders one view at `size×size` pixels (`size` divisible by the grid).
pub fn render_view(scene: &Scene, cam: Camera, size: usize) -> RgbImage {
    let cell = size / GRID;
    let mut img = RgbImage::filled(size, size, background(cam));
    for obj in scene.view(cam) {
        draw_object(&mut img, obj, cell);
    }
    img
}

/// All six views in canonical order.
pub fn render_views(scene: &Scene, size: usize) -> Vec<RgbImage> {
    Camera::ALL.iter().map(|&c| render_view(scene, c, size)).collect()
}
