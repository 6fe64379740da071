//! Dense per-pixel maps and the class taxonomy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic label for pixels with no assignment.
pub const UNKNOWN: u16 = u16::MAX;

/// Depth value for pixels without a measurement.
pub const INVALID_DEPTH: f32 = 0.0;

/// Row-major H×W grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub type SemanticMap = Grid<u16>;
pub type DepthMap = Grid<f32>;
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Input(format!(
                "{height}x{width} grid needs {} cells, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.dims() == other.dims()
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Pixel bounds `(top, left, bottom, right)` with exclusive bottom/right.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, &on)| on) {
            let (r, c) = (i / self.width, i % self.width);
            b = Some(match b {
                None => (r, c, r + 1, c + 1),
                Some((t, l, bt, rt)) => (t.min(r), l.min(c), bt.max(r + 1), rt.max(c + 1)),
            });
        }
        b
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// Stuff classes take ids `0..num_stuff`; thing classes follow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSet {
    pub stuff: Vec<String>,
    pub things: Vec<String>,
}

const STUFF_NAMES: [&str; 5] = ["road", "sidewalk", "building", "vegetation", "sky"];
const THING_NAMES: [&str; 2] = ["car", "person"];

impl ClassSet {
    pub fn new(num_stuff: usize, num_things: usize) -> Self {
        let name = |names: &[&str], prefix: &str, k: usize| {
            names.get(k).map_or_else(|| format!("{prefix}{k}"), |s| s.to_string())
        };
        ClassSet {
            stuff: (0..num_stuff).map(|k| name(&STUFF_NAMES, "stuff", k)).collect(),
            things: (0..num_things).map(|k| name(&THING_NAMES, "thing", k)).collect(),
        }
    }

    pub fn num_stuff(&self) -> usize {
        self.stuff.len()
    }

    pub fn num_things(&self) -> usize {
        self.things.len()
    }

    pub fn len(&self) -> usize {
        self.stuff.len() + self.things.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_thing(&self, class: u16) -> bool {
        (class as usize) >= self.num_stuff() && (class as usize) < self.len()
    }

    pub fn is_stuff(&self, class: u16) -> bool {
        (class as usize) < self.num_stuff()
    }

    pub fn thing_class(&self, k: usize) -> u16 {
        (self.num_stuff() + k) as u16
    }

    pub fn thing_index(&self, class: u16) -> Option<usize> {
        self.is_thing(class).then(|| class as usize - self.num_stuff())
    }

    pub fn name(&self, class: u16) -> &str {
        let c = class as usize;
        if c < self.num_stuff() {
            &self.stuff[c]
        } else {
            self.things.get(c - self.num_stuff()).map_or("?", String::as_str)
        }
    }
}

/// Per-pixel (class, instance) pairs. Instance 0 marks stuff.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticMap {
    pub class: SemanticMap,
    pub instance: Grid<u16>,
}

impl PanopticMap {
    pub fn from_semantic(bg: &SemanticMap) -> Self {
        PanopticMap {
            class: bg.clone(),
            instance: Grid::filled(bg.height(), bg.width(), 0),
        }
    }

    pub fn new(class: SemanticMap, instance: Grid<u16>) -> Result<Self> {
        if !class.same_dims(&instance) {
            return Err(Error::Input("class and instance planes differ in size".into()));
        }
        Ok(PanopticMap { class, instance })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.class.dims()
    }

    pub fn get(&self, row: usize, col: usize) -> (u16, u16) {
        (*self.class.get(row, col), *self.instance.get(row, col))
    }

    /// Pixel indices per `(class, instance)` segment, skipping UNKNOWN.
    pub fn segments(&self) -> BTreeMap<(u16, u16), Vec<usize>> {
        let mut out: BTreeMap<(u16, u16), Vec<usize>> = BTreeMap::new();
        for (i, (&c, &k)) in self.class.data().iter().zip(self.instance.data()).enumerate() {
            if c != UNKNOWN {
                out.entry((c, k)).or_default().push(i);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_bbox_is_exclusive() {
        let mut m = Mask::filled(5, 6, false);
        m.set(1, 2, true);
        m.set(3, 4, true);
        assert_eq!(m.bbox(), Some((1, 2, 4, 5)));
        assert_eq!(Mask::filled(2, 2, false).bbox(), None);
    }

    #[test]
    fn class_set_layout() {
        let c = ClassSet::new(5, 2);
        assert_eq!(c.thing_class(1), 6);
        assert!(c.is_thing(5) && !c.is_thing(4) && !c.is_thing(7));
        assert_eq!(c.name(5), "car");
        assert_eq!(ClassSet::new(7, 1).name(6), "stuff6");
    }

    #[test]
    fn grid_size_checked() {
        assert!(SemanticMap::from_vec(2, 3, vec![0; 5]).is_err());
    }
}
