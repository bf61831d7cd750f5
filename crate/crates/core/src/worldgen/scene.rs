use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::WorldError;
use crate::seed;

pub const GRID: usize = 3;
pub const NUM_CELLS: usize = GRID * GRID;
pub const MAX_SCENE_OBJECTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn synonyms(self) -> [&'static str; 2] {
        match self {
            Shape::Circle => ["disc", "ring"],
            Shape::Square => ["box", "block"],
            Shape::Triangle => ["wedge", "pyramid"],
        }
    }

    pub fn from_word(w: &str) -> Option<Shape> {
        Shape::ALL
            .into_iter()
            .find(|s| s.word() == w || s.synonyms().contains(&w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn synonyms(self) -> [&'static str; 2] {
        match self {
            Color::Red => ["scarlet", "crimson"],
            Color::Green => ["emerald", "lime"],
            Color::Blue => ["azure", "navy"],
            Color::Yellow => ["golden", "amber"],
        }
    }

    pub fn from_word(w: &str) -> Option<Color> {
        Color::ALL
            .into_iter()
            .find(|c| c.word() == w || c.synonyms().contains(&w))
    }
}

/// Canonical position words for a cell (row-major, 0 = top left).
pub fn cell_words(cell: u8) -> &'static [&'static str] {
    match cell {
        0 => &["top", "left"],
        1 => &["top"],
        2 => &["top", "right"],
        3 => &["left"],
        4 => &["center"],
        5 => &["right"],
        6 => &["bottom", "left"],
        7 => &["bottom"],
        8 => &["bottom", "right"],
        _ => panic!("cell {cell} out of range"),
    }
}

/// Alternate position words used by paraphrases.
pub fn cell_words_alt(cell: u8) -> &'static [&'static str] {
    match cell {
        0 => &["upper", "left"],
        1 => &["upper"],
        2 => &["upper", "right"],
        3 => &["left"],
        4 => &["middle"],
        5 => &["right"],
        6 => &["lower", "left"],
        7 => &["lower"],
        8 => &["lower", "right"],
        _ => panic!("cell {cell} out of range"),
    }
}

/// Resolves a run of position words (either bank) back to a cell.
pub fn cell_from_words(words: &[&str]) -> Option<u8> {
    let (mut row, mut col) = (None, None);
    let mut centered = false;
    for &w in words {
        match w {
            "top" | "upper" => row = Some(0u8),
            "bottom" | "lower" => row = Some(2),
            "left" => col = Some(0u8),
            "right" => col = Some(2),
            "center" | "middle" => centered = true,
            _ => return None,
        }
    }
    if centered {
        return (row.is_none() && col.is_none()).then_some(4);
    }
    if row.is_none() && col.is_none() {
        return None;
    }
    Some(row.unwrap_or(1) * GRID as u8 + col.unwrap_or(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub cell: u8,
}

impl Object {
    pub fn new(shape: Shape, color: Color, cell: u8) -> Result<Self, WorldError> {
        if cell as usize >= NUM_CELLS {
            return Err(WorldError::InvalidScene(format!("cell {cell} out of range")));
        }
        Ok(Object { shape, color, cell })
    }

    /// Index of the (shape, color) pair in 0..12.
    pub fn kind_index(&self) -> usize {
        self.shape.index() * Color::ALL.len() + self.color.index()
    }
}

/// A micro-world: up to nine objects on a 3x3 grid, kept sorted by cell.
///
/// Sampled scenes hold between one and three objects; edits may produce an
/// empty scene, and the probe may read back anything the grid can hold.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct Scene {
    objects: Vec<Object>,
}

impl Scene {
    pub fn new(mut objects: Vec<Object>) -> Result<Self, WorldError> {
        objects.sort_by_key(|o| o.cell);
        for o in &objects {
            if o.cell as usize >= NUM_CELLS {
                return Err(WorldError::InvalidScene(format!("cell {} out of range", o.cell)));
            }
        }
        if objects.windows(2).any(|w| w[0].cell == w[1].cell) {
            return Err(WorldError::InvalidScene("two objects share a cell".into()));
        }
        Ok(Scene { objects })
    }

    pub fn empty() -> Self {
        Scene::default()
    }

    pub fn objects(&self) -> &[Object] {
        &self.objects
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn object_at(&self, cell: u8) -> Option<&Object> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    pub fn free_cells(&self) -> Vec<u8> {
        (0..NUM_CELLS as u8).filter(|&c| self.object_at(c).is_none()).collect()
    }

    /// Enumerates every scene with exactly `n` objects.
    pub fn enumerate(n: usize) -> Vec<Scene> {
        let mut out = Vec::new();
        let kinds: Vec<(Shape, Color)> = Shape::ALL
            .iter()
            .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
            .collect();
        fn rec(
            start: u8,
            left: usize,
            acc: &mut Vec<Object>,
            kinds: &[(Shape, Color)],
            out: &mut Vec<Scene>,
        ) {
            if left == 0 {
                out.push(Scene { objects: acc.clone() });
                return;
            }
            for cell in start..NUM_CELLS as u8 {
                for &(shape, color) in kinds {
                    acc.push(Object { shape, color, cell });
                    rec(cell + 1, left - 1, acc, kinds, out);
                    acc.pop();
                }
            }
        }
        rec(0, n, &mut Vec::new(), &kinds, &mut out);
        out
    }
}

/// Draws a scene with 1..=max_objects objects in distinct cells.
pub fn sample_scene(seed: u64, max_objects: usize) -> Result<Scene, WorldError> {
    if !(1..=MAX_SCENE_OBJECTS).contains(&max_objects) {
        return Err(WorldError::InvalidArgument(format!(
            "max_objects must be in 1..=3, got {max_objects}"
        )));
    }
    let mut rng = seed::rng_for(seed, "scene");
    let n = rng.random_range(1..=max_objects);
    let cells = index::sample(&mut rng, NUM_CELLS, n);
    let objects = cells
        .into_iter()
        .map(|cell| Object {
            shape: Shape::ALL[rng.random_range(0..3)],
            color: Color::ALL[rng.random_range(0..4)],
            cell: cell as u8,
        })
        .collect();
    Scene::new(objects)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_scene(0, 1).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, sample_scene(0, 1).unwrap());
    }

    #[test]
    fn adjacent_seeds_usually_differ() {
        let differ = (0..1000u64)
            .filter(|k| sample_scene(2 * k, 3).unwrap() != sample_scene(2 * k + 1, 3).unwrap())
            .count();
        assert!(differ as f64 / 1000.0 >= 0.9, "{differ}");
    }

    #[test]
    fn cells_distinct() {
        for s in 0..500 {
            let scene = sample_scene(s, 3).unwrap();
            let mut cells: Vec<u8> = scene.objects().iter().map(|o| o.cell).collect();
            cells.dedup();
            assert_eq!(cells.len(), scene.len());
            assert!((1..=3).contains(&scene.len()));
        }
    }

    #[test]
    fn rejects_bad_max_objects() {
        assert!(sample_scene(0, 0).is_err());
        assert!(sample_scene(0, 4).is_err());
    }

    #[test]
    fn position_words_round_trip() {
        for cell in 0..9u8 {
            assert_eq!(cell_from_words(cell_words(cell)), Some(cell));
            assert_eq!(cell_from_words(cell_words_alt(cell)), Some(cell));
        }
        assert_eq!(cell_from_words(&["center", "left"]), None);
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(Scene::enumerate(1).len(), 108);
        assert_eq!(Scene::enumerate(2).len(), 36 * 144);
    }
}
