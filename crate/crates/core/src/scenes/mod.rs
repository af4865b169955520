//! Deterministic multi-view driving-like scenes, their rasterisation, the
//! templated QA built on them, and dataset file IO.
//!
//! Generation uses only integer arithmetic on top of [`Lcg64`], so a seed
//! and a configuration always produce byte-identical datasets.

pub mod dataset;
pub mod qa;
pub mod render;
pub mod rng;

use serde::{Deserialize, Serialize};

use crate::image::RgbImage;
pub use rng::Lcg64;

pub const GRID: usize = 4;
pub const MAX_OBJECTS: usize = 4;

/// Camera views in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Camera {
    Front,
    FrontLeft,
    FrontRight,
    Back,
    BackLeft,
    BackRight,
}

impl Camera {
    pub const ALL: [Camera; 6] = [
        Camera::Front,
        Camera::FrontLeft,
        Camera::FrontRight,
        Camera::Back,
        Camera::BackLeft,
        Camera::BackRight,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Camera::Front => "CAM_FRONT",
            Camera::FrontLeft => "CAM_FRONT_LEFT",
            Camera::FrontRight => "CAM_FRONT_RIGHT",
            Camera::Back => "CAM_BACK",
            Camera::BackLeft => "CAM_BACK_LEFT",
            Camera::BackRight => "CAM_BACK_RIGHT",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.key() == key)
    }

    /// Positional phrase used in questions and answers.
    pub fn phrase(self) -> &'static str {
        match self {
            Camera::Front => "front",
            Camera::FrontLeft => "front left",
            Camera::FrontRight => "front right",
            Camera::Back => "back",
            Camera::BackLeft => "back left",
            Camera::BackRight => "back right",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// The view a question refers to by its positional phrase.
    pub fn referenced_by(question: &str) -> Option<Self> {
        let q = question.replace('?', " ");
        Self::ALL
            .into_iter()
            .filter(|c| q.contains(&format!("the {} ", c.phrase())))
            .max_by_key(|c| c.phrase().len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectKind {
    Car,
    Truck,
    Pedestrian,
    Cone,
    Barrier,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 5] = [
        ObjectKind::Car,
        ObjectKind::Truck,
        ObjectKind::Pedestrian,
        ObjectKind::Cone,
        ObjectKind::Barrier,
    ];

    pub fn noun(self, plural: bool) -> &'static str {
        match (self, plural) {
            (ObjectKind::Car, false) => "car",
            (ObjectKind::Car, true) => "cars",
            (ObjectKind::Truck, false) => "truck",
            (ObjectKind::Truck, true) => "trucks",
            (ObjectKind::Pedestrian, false) => "pedestrian",
            (ObjectKind::Pedestrian, true) => "pedestrians",
            (ObjectKind::Cone, false) => "cone",
            (ObjectKind::Cone, true) => "cones",
            (ObjectKind::Barrier, false) => "barrier",
            (ObjectKind::Barrier, true) => "barriers",
        }
    }

    pub fn is_static(self) -> bool {
        matches!(self, ObjectKind::Cone | ObjectKind::Barrier)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Blue, Color::Green, Color::Yellow];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Blue => [40, 80, 230],
            Color::Green => [40, 200, 60],
            Color::Yellow => [230, 210, 40],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Motion {
    Stopped,
    MovingLeft,
    MovingRight,
    Approaching,
}

impl Motion {
    pub const ALL: [Motion; 4] = [
        Motion::Stopped,
        Motion::MovingLeft,
        Motion::MovingRight,
        Motion::Approaching,
    ];
}

/// Categorical tables (integer weights) used by [`generate_scene`].
pub const COUNT_WEIGHTS: [u32; MAX_OBJECTS + 1] = [2, 4, 3, 2, 1];
pub const KIND_WEIGHTS: [u32; 5] = [4, 2, 2, 1, 1];
pub const COLOR_WEIGHTS: [u32; 4] = [1, 1, 1, 1];
pub const MOTION_WEIGHTS: [u32; 4] = [1, 1, 1, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub color: Color,
    /// Grid cell as (row, column).
    pub cell: (usize, usize),
    pub motion: Motion,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub seed: u64,
    /// Objects per camera in canonical order, sorted by cell.
    pub views: [Vec<SceneObject>; 6],
}

impl Scene {
    pub fn view(&self, cam: Camera) -> &[SceneObject] {
        &self.views[cam.index()]
    }
}

pub fn generate_scene(seed: u64) -> Scene {
    let mut rng = Lcg64::new(seed);
    let views = std::array::from_fn(|_| {
        let n = rng.categorical(&COUNT_WEIGHTS);
        let mut cells: Vec<usize> = (0..GRID * GRID).collect();
        for i in 0..n {
            let j = i + rng.below((GRID * GRID - i) as u32) as usize;
            cells.swap(i, j);
        }
        let mut chosen = cells[..n].to_vec();
        chosen.sort_unstable();
        chosen
            .into_iter()
            .map(|cell| {
                let kind = ObjectKind::ALL[rng.categorical(&KIND_WEIGHTS)];
                let color = Color::ALL[rng.categorical(&COLOR_WEIGHTS)];
                let motion = if kind.is_static() {
                    Motion::Stopped
                } else {
                    Motion::ALL[rng.categorical(&MOTION_WEIGHTS)]
                };
                SceneObject {
                    kind,
                    color,
                    cell: (cell / GRID, cell % GRID),
                    motion,
                }
            })
            .collect()
    });
    Scene { seed, views }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Perception,
    Planning,
    Prediction,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Perception => "perception",
            Category::Planning => "planning",
            Category::Prediction => "prediction",
        }
    }
}

/// One training or evaluation record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSample {
    pub id: String,
    /// Views in canonical camera order.
    pub views: Vec<RgbImage>,
    pub question: String,
    pub answer: String,
    pub category: Category,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(generate_scene(99), generate_scene(99));
        assert_ne!(generate_scene(99), generate_scene(100));
    }

    #[test]
    fn object_counts_in_range_and_cells_unique() {
        for seed in 0..10_000u64 {
            let s = generate_scene(seed);
            for v in &s.views {
                assert!(v.len() <= MAX_OBJECTS);
                let mut cells: Vec<_> = v.iter().map(|o| o.cell).collect();
                cells.dedup();
                assert_eq!(cells.len(), v.len());
                assert!(v.iter().all(|o| !o.kind.is_static() || o.motion == Motion::Stopped));
            }
        }
    }

    #[test]
    fn kind_frequencies_follow_table() {
        let mut counts = [0usize; 5];
        let mut total = 0usize;
        let mut seed = 0;
        while total < 100_000 {
            for v in &generate_scene(seed).views {
                for o in v {
                    counts[o.kind as usize] += 1;
                    total += 1;
                }
            }
            seed += 1;
        }
        let wsum: u32 = KIND_WEIGHTS.iter().sum();
        for (c, w) in counts.iter().zip(KIND_WEIGHTS) {
            let got = *c as f64 / total as f64;
            assert!((got - w as f64 / wsum as f64).abs() <= 0.02);
        }
    }

    #[test]
    fn camera_keys_round_trip() {
        for c in Camera::ALL {
            assert_eq!(Camera::from_key(c.key()), Some(c));
        }
        assert_eq!(Camera::from_key("CAM_TOP"), None);
    }

    #[test]
    fn question_phrase_resolves_view() {
        for c in Camera::ALL {
            for t in 0..3 {
                let q = match t {
                    0 => format!("what are the important objects to the {}?", c.phrase()),
                    1 => format!("what should the ego vehicle do about the {}?", c.phrase()),
                    _ => format!("what is the pedestrian to the {} doing?", c.phrase()),
                };
                assert_eq!(Camera::referenced_by(&q), Some(c), "{q}");
            }
        }
        assert_eq!(Camera::referenced_by("where am i?"), None);
    }
}
