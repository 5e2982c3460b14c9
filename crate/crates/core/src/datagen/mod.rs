//! Synthetic compositional scenes: up to three colored shapes on a 2x2 grid,
//! each with a rendered image and a caption from a fixed grammar.

mod grammar;
mod io;
mod perturb;
mod render;

pub use grammar::{caption_of, grammar_terminals, scene_satisfies, Attrs, Caption, Relation};
pub use io::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use perturb::{perturb, PerturbKind, PerturbedPair};
pub use render::{inverse_render, render, resolution_is_decodable};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Grid side; scenes have `GRID * GRID` cells.
pub const GRID: usize = 2;
pub const MAX_OBJECTS: usize = 3;
pub const DEFAULT_RESOLUTION: usize = 32;
/// Longest caption the grammar produces, in words.
pub const MAX_CAPTION_WORDS: usize = 9;
pub const NUM_CLASSES: usize = Shape::ALL.len() * Color::ALL.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    /// Row-major cell index in `0..GRID * GRID`.
    pub cell: u8,
}

impl Object {
    pub fn row_col(&self) -> (usize, usize) {
        (self.cell as usize / GRID, self.cell as usize % GRID)
    }
}

/// Objects sorted by cell; at most one object per cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scene {
    objects: Vec<Object>,
}

impl Scene {
    pub fn new(mut objects: Vec<Object>) -> Result<Self> {
        if objects.is_empty() || objects.len() > MAX_OBJECTS {
            return Err(Error::Config(format!("scenes hold 1..={MAX_OBJECTS} objects, got {}", objects.len())));
        }
        objects.sort_by_key(|o| o.cell);
        if objects.windows(2).any(|w| w[0].cell == w[1].cell) || objects.iter().any(|o| o.cell as usize >= GRID * GRID)
        {
            return Err(Error::Config("objects must occupy distinct grid cells".into()));
        }
        Ok(Self { objects })
    }

    pub fn objects(&self) -> &[Object] {
        &self.objects
    }

    /// Relation phrase between the first two objects, if there are two.
    pub fn relation(&self) -> Option<Relation> {
        match self.objects.as_slice() {
            [a, b, ..] => Some(Relation::between(a, b)),
            _ => None,
        }
    }

    /// Shape-by-color class of the first object, in `0..NUM_CLASSES`.
    pub fn class_label(&self) -> usize {
        class_of(self.objects[0].shape, self.objects[0].color)
    }
}

pub fn class_of(shape: Shape, color: Color) -> usize {
    shape as usize * Color::ALL.len() + color as usize
}

/// Text name of a class, e.g. `"red circle"`.
pub fn class_name(label: usize) -> String {
    let shape = Shape::ALL[label / Color::ALL.len()];
    let color = Color::ALL[label % Color::ALL.len()];
    format!("{} {}", color.word(), shape.word())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[3, R, R]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub caption: String,
    pub scene: Scene,
}

impl Example {
    pub fn from_scene(scene: Scene, res: usize) -> Self {
        Self { image: render(&scene, res), caption: caption_of(&scene), scene }
    }

    pub fn resolution(&self) -> usize {
        self.image.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct GenOptions {
    pub n: usize,
    pub seed: u64,
    pub resolution: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Amplitude of uniform pixel noise; 0 keeps images flat.
    pub noise: f32,
}

impl GenOptions {
    pub fn new(n: usize, seed: u64, resolution: usize) -> Self {
        Self { n, seed, resolution, min_objects: 1, max_objects: MAX_OBJECTS, noise: 0.0 }
    }

    pub fn single_object(mut self) -> Self {
        self.min_objects = 1;
        self.max_objects = 1;
        self
    }

    pub fn objects(mut self, min: usize, max: usize) -> Self {
        self.min_objects = min;
        self.max_objects = max;
        self
    }

    pub fn noise(mut self, amplitude: f32) -> Self {
        self.noise = amplitude;
        self
    }
}

/// Draws scene `index` of the stream keyed by `seed`.
pub fn gen_scene(seed: u64, index: u64, min_objects: usize, max_objects: usize) -> Scene {
    let mut rng = stream_rng(seed, Stream::Data, &[index]);
    let count = rng.gen_range(min_objects..=max_objects);
    let mut cells: Vec<u8> = (0..(GRID * GRID) as u8).collect();
    cells.shuffle(&mut rng);
    let objects = cells[..count]
        .iter()
        .map(|&cell| Object {
            shape: Shape::ALL[rng.gen_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.gen_range(0..Color::ALL.len())],
            cell,
        })
        .collect();
    Scene::new(objects).expect("generated scene is valid")
}

pub fn generate(opts: &GenOptions) -> Result<Vec<Example>> {
    if opts.n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    if opts.resolution == 0 || !opts.resolution.is_multiple_of(GRID) {
        return Err(Error::Config(format!("resolution {} must be a positive multiple of {GRID}", opts.resolution)));
    }
    if !resolution_is_decodable(opts.resolution) {
        return Err(Error::Config(format!("resolution {} is too small to tell the shapes apart", opts.resolution)));
    }
    if opts.min_objects == 0 || opts.min_objects > opts.max_objects || opts.max_objects > MAX_OBJECTS {
        return Err(Error::Config(format!(
            "object count range {}..={} outside 1..={MAX_OBJECTS}",
            opts.min_objects, opts.max_objects
        )));
    }
    Ok((0..opts.n as u64)
        .map(|i| {
            let scene = gen_scene(opts.seed, i, opts.min_objects, opts.max_objects);
            let mut ex = Example::from_scene(scene, opts.resolution);
            if opts.noise > 0.0 {
                let mut rng = stream_rng(opts.seed, Stream::Noise, &[i]);
                for p in ex.image.data_mut() {
                    *p = (*p + rng.gen_range(-opts.noise..=opts.noise)).clamp(0.0, 1.0);
                }
            }
            ex
        })
        .collect())
}

/// `n` examples of 1-3 objects at `resolution`, deterministic in `seed`.
pub fn gen_dataset(n: usize, seed: u64, resolution: usize) -> Result<Vec<Example>> {
    generate(&GenOptions::new(n, seed, resolution))
}

/// Every caption the grammar can emit for a scene, plus the perturbation
/// vocabulary, as one corpus line per terminal.
pub fn grammar_corpus() -> Vec<String> {
    grammar_terminals().into_iter().map(str::to_owned).collect()
}
