//! A 2-D stand-in for CLEVR: objects with four categorical attributes on a
//! square grid, questions generated from typed functional programs, and a
//! set-based executor that supplies the gold answers.
//!
//! Directions map onto grid order: `left`/`right` compare columns and
//! `front`/`behind` compare rows, with larger rows nearer the viewer.

mod generate;
mod program;

pub use generate::{
    answer_vocabulary, generate_dataset, generate_question, vocabulary_words, Category, CategoryMix,
    DatasetSpec, GenerationError, QAInstance, QuestionOptions,
};
pub use program::{execute_program, Answer, Direction, ExecError, Program, ProgramError, ValueType};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cube,
    Sphere,
    Cylinder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
    Gray,
    Purple,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Rubber,
    Metal,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Cube, Shape::Sphere, Shape::Cylinder];
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Yellow,
        Color::Gray,
        Color::Purple,
    ];
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];
}

impl Material {
    pub const ALL: [Material; 2] = [Material::Rubber, Material::Metal];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Shape,
    Color,
    Size,
    Material,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::Shape,
        Attribute::Color,
        Attribute::Size,
        Attribute::Material,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Attribute::Shape => "shape",
            Attribute::Color => "color",
            Attribute::Size => "size",
            Attribute::Material => "material",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.word() == w)
    }

    /// Every value this attribute can take.
    pub fn values(self) -> Vec<AttrValue> {
        match self {
            Attribute::Shape => Shape::ALL.map(AttrValue::Shape).to_vec(),
            Attribute::Color => Color::ALL.map(AttrValue::Color).to_vec(),
            Attribute::Size => Size::ALL.map(AttrValue::Size).to_vec(),
            Attribute::Material => Material::ALL.map(AttrValue::Material).to_vec(),
        }
    }
}

/// A concrete attribute value such as `red` or `metal`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttrValue {
    Shape(Shape),
    Color(Color),
    Size(Size),
    Material(Material),
}

impl AttrValue {
    pub fn attribute(self) -> Attribute {
        match self {
            AttrValue::Shape(_) => Attribute::Shape,
            AttrValue::Color(_) => Attribute::Color,
            AttrValue::Size(_) => Attribute::Size,
            AttrValue::Material(_) => Attribute::Material,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            AttrValue::Shape(Shape::Cube) => "cube",
            AttrValue::Shape(Shape::Sphere) => "sphere",
            AttrValue::Shape(Shape::Cylinder) => "cylinder",
            AttrValue::Color(Color::Red) => "red",
            AttrValue::Color(Color::Blue) => "blue",
            AttrValue::Color(Color::Green) => "green",
            AttrValue::Color(Color::Yellow) => "yellow",
            AttrValue::Color(Color::Gray) => "gray",
            AttrValue::Color(Color::Purple) => "purple",
            AttrValue::Size(Size::Small) => "small",
            AttrValue::Size(Size::Large) => "large",
            AttrValue::Material(Material::Rubber) => "rubber",
            AttrValue::Material(Material::Metal) => "metal",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Attribute::ALL
            .into_iter()
            .flat_map(Attribute::values)
            .find(|v| v.word() == w)
    }

    pub fn all() -> Vec<AttrValue> {
        Attribute::ALL.into_iter().flat_map(Attribute::values).collect()
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub row: usize,
    pub col: usize,
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub material: Material,
}

impl Object {
    pub fn get(&self, attr: Attribute) -> AttrValue {
        match attr {
            Attribute::Shape => AttrValue::Shape(self.shape),
            Attribute::Color => AttrValue::Color(self.color),
            Attribute::Size => AttrValue::Size(self.size),
            Attribute::Material => AttrValue::Material(self.material),
        }
    }

    pub fn has(&self, value: AttrValue) -> bool {
        self.get(value.attribute()) == value
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SceneError {
    #[error("scene needs between 2 and {max} objects, got {got}")]
    ObjectCount { got: usize, max: usize },
    #[error("object at ({row}, {col}) lies outside a {grid}x{grid} grid")]
    OutOfGrid { row: usize, col: usize, grid: usize },
    #[error("two objects share cell ({row}, {col})")]
    Collision { row: usize, col: usize },
    #[error("scene grid {got} does not match configured grid {want}")]
    GridMismatch { got: usize, want: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub grid_size: usize,
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SceneError> {
        let g = self.grid_size;
        let n = self.objects.len();
        if n < 2 || n > g * g {
            return Err(SceneError::ObjectCount { got: n, max: g * g });
        }
        let mut seen = vec![false; g * g];
        for o in &self.objects {
            if o.row >= g || o.col >= g {
                return Err(SceneError::OutOfGrid {
                    row: o.row,
                    col: o.col,
                    grid: g,
                });
            }
            let cell = o.row * g + o.col;
            if seen[cell] {
                return Err(SceneError::Collision { row: o.row, col: o.col });
            }
            seen[cell] = true;
        }
        Ok(())
    }

    /// Object occupying `(row, col)`, if any.
    pub fn object_at(&self, row: usize, col: usize) -> Option<&Object> {
        self.objects.iter().find(|o| o.row == row && o.col == col)
    }
}

/// Places `n_objects` on distinct uniformly chosen cells with uniformly
/// sampled attributes.
pub fn generate_scene(rng: &mut impl Rng, grid_size: usize, n_objects: usize) -> Result<Scene, SceneError> {
    let cells = grid_size * grid_size;
    if n_objects < 2 || n_objects > cells {
        return Err(SceneError::ObjectCount {
            got: n_objects,
            max: cells,
        });
    }
    let mut positions: Vec<usize> = (0..cells).collect();
    positions.shuffle(rng);
    let objects = positions[..n_objects]
        .iter()
        .map(|&p| Object {
            row: p / grid_size,
            col: p % grid_size,
            shape: *Shape::ALL.choose(rng).expect("non-empty"),
            color: *Color::ALL.choose(rng).expect("non-empty"),
            size: *Size::ALL.choose(rng).expect("non-empty"),
            material: *Material::ALL.choose(rng).expect("non-empty"),
        })
        .collect();
    Ok(Scene { grid_size, objects })
}
