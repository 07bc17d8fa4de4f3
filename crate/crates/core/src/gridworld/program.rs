use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::fmt;

use super::{AttrValue, Attribute, Object, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Front,
    Behind,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Front, Direction::Behind];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Front => "front",
            Direction::Behind => "behind",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.word() == w)
    }

    /// Whether `candidate` lies in this direction of `anchor`.
    pub fn holds(self, candidate: &Object, anchor: &Object) -> bool {
        match self {
            Direction::Left => candidate.col < anchor.col,
            Direction::Right => candidate.col > anchor.col,
            Direction::Front => candidate.row > anchor.row,
            Direction::Behind => candidate.row < anchor.row,
        }
    }
}

/// A typed functional program over a scene. Set-valued nodes produce
/// object sets, `Unique` narrows a singleton set to its object, and the
/// question roots (`Count`, `Exist`, `Query`, `Equal`, `Greater`, `Less`)
/// produce answers.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Program {
    Scene,
    Filter { value: AttrValue, input: Box<Program> },
    Relate { direction: Direction, input: Box<Program> },
    Unique(Box<Program>),
    Count(Box<Program>),
    Exist(Box<Program>),
    Query { attribute: Attribute, input: Box<Program> },
    Equal { attribute: Attribute, left: Box<Program>, right: Box<Program> },
    And(Box<Program>, Box<Program>),
    Or(Box<Program>, Box<Program>),
    Greater(Box<Program>, Box<Program>),
    Less(Box<Program>, Box<Program>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueType {
    Set,
    Object,
    Integer,
    Boolean,
    Attribute,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ProgramError {
    #[error("{node} expects {want:?} input, got {got:?}")]
    Type {
        node: &'static str,
        want: ValueType,
        got: ValueType,
    },
    #[error("malformed program: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    #[error("unique() over a set of {0} objects")]
    Ambiguous(usize),
    #[error(transparent)]
    Program(#[from] ProgramError),
}

/// A gold answer: closed vocabulary of attribute values, yes/no and counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Answer {
    Yes,
    No,
    Count(usize),
    Attr(AttrValue),
}

impl Answer {
    pub fn word(&self) -> String {
        match self {
            Answer::Yes => "yes".into(),
            Answer::No => "no".into(),
            Answer::Count(n) => n.to_string(),
            Answer::Attr(v) => v.word().into(),
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        match w {
            "yes" => Some(Answer::Yes),
            "no" => Some(Answer::No),
            _ => w
                .parse::<usize>()
                .ok()
                .map(Answer::Count)
                .or_else(|| AttrValue::from_word(w).map(Answer::Attr)),
        }
    }

    fn from_bool(b: bool) -> Self {
        if b {
            Answer::Yes
        } else {
            Answer::No
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.word())
    }
}

impl Serialize for Answer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.word())
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = String::deserialize(d)?;
        Answer::from_word(&w).ok_or_else(|| serde::de::Error::custom(format!("unknown answer {w:?}")))
    }
}

enum Eval {
    Set(Vec<usize>),
    Object(usize),
    Int(usize),
    Bool(bool),
    Attr(AttrValue),
}

impl Eval {
    fn kind(&self) -> ValueType {
        match self {
            Eval::Set(_) => ValueType::Set,
            Eval::Object(_) => ValueType::Object,
            Eval::Int(_) => ValueType::Integer,
            Eval::Bool(_) => ValueType::Boolean,
            Eval::Attr(_) => ValueType::Attribute,
        }
    }
}

fn expect_type(node: &'static str, want: ValueType, got: ValueType) -> Result<(), ProgramError> {
    if want == got {
        Ok(())
    } else {
        Err(ProgramError::Type { node, want, got })
    }
}

impl Program {
    pub fn filter(value: AttrValue, input: Program) -> Self {
        Program::Filter {
            value,
            input: Box::new(input),
        }
    }

    pub fn relate(direction: Direction, input: Program) -> Self {
        Program::Relate {
            direction,
            input: Box::new(input),
        }
    }

    pub fn unique(input: Program) -> Self {
        Program::Unique(Box::new(input))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Program::Scene => "scene",
            Program::Filter { .. } => "filter",
            Program::Relate { .. } => "relate",
            Program::Unique(_) => "unique",
            Program::Count(_) => "count",
            Program::Exist(_) => "exist",
            Program::Query { .. } => "query",
            Program::Equal { .. } => "equal",
            Program::And(..) => "and",
            Program::Or(..) => "or",
            Program::Greater(..) => "greater",
            Program::Less(..) => "less",
        }
    }

    pub fn children(&self) -> Vec<&Program> {
        match self {
            Program::Scene => vec![],
            Program::Filter { input, .. }
            | Program::Relate { input, .. }
            | Program::Query { input, .. }
            | Program::Unique(input)
            | Program::Count(input)
            | Program::Exist(input) => vec![input],
            Program::Equal { left, right, .. } => vec![left, right],
            Program::And(a, b) | Program::Or(a, b) | Program::Greater(a, b) | Program::Less(a, b) => vec![a, b],
        }
    }

    /// Static type of the program's output.
    pub fn type_check(&self) -> Result<ValueType, ProgramError> {
        use ValueType::*;
        let t = |p: &Program| p.type_check();
        Ok(match self {
            Program::Scene => Set,
            Program::Filter { input, .. } => {
                expect_type("filter", Set, t(input)?)?;
                Set
            }
            Program::Relate { input, .. } => {
                expect_type("relate", Object, t(input)?)?;
                Set
            }
            Program::Unique(input) => {
                expect_type("unique", Set, t(input)?)?;
                Object
            }
            Program::Count(input) => {
                expect_type("count", Set, t(input)?)?;
                Integer
            }
            Program::Exist(input) => {
                expect_type("exist", Set, t(input)?)?;
                Boolean
            }
            Program::Query { input, .. } => {
                expect_type("query", Object, t(input)?)?;
                Attribute
            }
            Program::Equal { left, right, .. } => {
                expect_type("equal", Object, t(left)?)?;
                expect_type("equal", Object, t(right)?)?;
                Boolean
            }
            Program::And(a, b) | Program::Or(a, b) => {
                let node = self.name();
                expect_type(node, Set, t(a)?)?;
                expect_type(node, Set, t(b)?)?;
                Set
            }
            Program::Greater(a, b) | Program::Less(a, b) => {
                let node = self.name();
                expect_type(node, Integer, t(a)?)?;
                expect_type(node, Integer, t(b)?)?;
                Boolean
            }
        })
    }

    /// Reasoning depth: chains of filters count as one reference, every
    /// `relate` hop adds one, and each combinator or question root adds one.
    /// `query(color, unique(filter(cube, scene)))` has depth 2; a two-hop
    /// relational query has depth 4.
    pub fn depth(&self) -> usize {
        match self {
            Program::Scene => 1,
            Program::Filter { input, .. } | Program::Unique(input) => input.depth(),
            Program::Relate { input, .. }
            | Program::Count(input)
            | Program::Exist(input)
            | Program::Query { input, .. } => 1 + input.depth(),
            Program::Equal { left: a, right: b, .. }
            | Program::And(a, b)
            | Program::Or(a, b)
            | Program::Greater(a, b)
            | Program::Less(a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    /// Visits every node, parents before children.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Program)) {
        f(self);
        for c in self.children() {
            c.walk(f);
        }
    }

    /// Nested-array form, e.g. `["count", ["filter", "color", "red", ["scene"]]]`.
    pub fn to_json(&self) -> Value {
        match self {
            Program::Scene => json!(["scene"]),
            Program::Filter { value, input } => {
                json!(["filter", value.attribute().word(), value.word(), input.to_json()])
            }
            Program::Relate { direction, input } => json!(["relate", direction.word(), input.to_json()]),
            Program::Query { attribute, input } => json!(["query", attribute.word(), input.to_json()]),
            Program::Equal { attribute, left, right } => {
                json!(["equal", attribute.word(), left.to_json(), right.to_json()])
            }
            Program::Unique(a) | Program::Count(a) | Program::Exist(a) => json!([self.name(), a.to_json()]),
            Program::And(a, b) | Program::Or(a, b) | Program::Greater(a, b) | Program::Less(a, b) => {
                json!([self.name(), a.to_json(), b.to_json()])
            }
        }
    }

    pub fn from_json(v: &Value) -> Result<Self, ProgramError> {
        let bad = |m: &str| ProgramError::Malformed(format!("{m}: {v}"));
        let arr = v.as_array().ok_or_else(|| bad("expected array"))?;
        let head = arr.first().and_then(Value::as_str).ok_or_else(|| bad("missing node name"))?;
        let s = |i: usize| arr.get(i).and_then(Value::as_str).ok_or_else(|| bad("missing string field"));
        let sub = |i: usize| -> Result<Box<Program>, ProgramError> {
            Ok(Box::new(Program::from_json(arr.get(i).ok_or_else(|| bad("missing child"))?)?))
        };
        let attr = |i: usize| s(i).and_then(|w| Attribute::from_word(w).ok_or_else(|| bad("unknown attribute")));
        let want_len = |n: usize| if arr.len() == n { Ok(()) } else { Err(bad("wrong arity")) };
        let p = match head {
            "scene" => {
                want_len(1)?;
                Program::Scene
            }
            "filter" => {
                want_len(4)?;
                let a = attr(1)?;
                let value = AttrValue::from_word(s(2)?)
                    .filter(|v| v.attribute() == a)
                    .ok_or_else(|| bad("value does not belong to attribute"))?;
                Program::Filter { value, input: sub(3)? }
            }
            "relate" => {
                want_len(3)?;
                let direction = Direction::from_word(s(1)?).ok_or_else(|| bad("unknown direction"))?;
                Program::Relate { direction, input: sub(2)? }
            }
            "query" => {
                want_len(3)?;
                Program::Query {
                    attribute: attr(1)?,
                    input: sub(2)?,
                }
            }
            "equal" => {
                want_len(4)?;
                Program::Equal {
                    attribute: attr(1)?,
                    left: sub(2)?,
                    right: sub(3)?,
                }
            }
            "unique" | "count" | "exist" => {
                want_len(2)?;
                let a = sub(1)?;
                match head {
                    "unique" => Program::Unique(a),
                    "count" => Program::Count(a),
                    _ => Program::Exist(a),
                }
            }
            "and" | "or" | "greater" | "less" => {
                want_len(3)?;
                let (a, b) = (sub(1)?, sub(2)?);
                match head {
                    "and" => Program::And(a, b),
                    "or" => Program::Or(a, b),
                    "greater" => Program::Greater(a, b),
                    _ => Program::Less(a, b),
                }
            }
            other => return Err(bad(&format!("unknown node {other}"))),
        };
        Ok(p)
    }

    fn eval(&self, scene: &Scene) -> Result<Eval, ExecError> {
        let objs = &scene.objects;
        let set = |p: &Program| -> Result<Vec<usize>, ExecError> {
            match p.eval(scene)? {
                Eval::Set(s) => Ok(s),
                other => Err(ProgramError::Type {
                    node: self.name(),
                    want: ValueType::Set,
                    got: other.kind(),
                }
                .into()),
            }
        };
        let object = |p: &Program| -> Result<usize, ExecError> {
            match p.eval(scene)? {
                Eval::Object(o) => Ok(o),
                other => Err(ProgramError::Type {
                    node: self.name(),
                    want: ValueType::Object,
                    got: other.kind(),
                }
                .into()),
            }
        };
        let int = |p: &Program| -> Result<usize, ExecError> {
            match p.eval(scene)? {
                Eval::Int(n) => Ok(n),
                other => Err(ProgramError::Type {
                    node: self.name(),
                    want: ValueType::Integer,
                    got: other.kind(),
                }
                .into()),
            }
        };
        Ok(match self {
            Program::Scene => Eval::Set((0..objs.len()).collect()),
            Program::Filter { value, input } => {
                Eval::Set(set(input)?.into_iter().filter(|&i| objs[i].has(*value)).collect())
            }
            Program::Relate { direction, input } => {
                let anchor = &objs[object(input)?];
                Eval::Set((0..objs.len()).filter(|&i| direction.holds(&objs[i], anchor)).collect())
            }
            Program::Unique(input) => {
                let s = set(input)?;
                if s.len() != 1 {
                    return Err(ExecError::Ambiguous(s.len()));
                }
                Eval::Object(s[0])
            }
            Program::Count(input) => Eval::Int(set(input)?.len()),
            Program::Exist(input) => Eval::Bool(!set(input)?.is_empty()),
            Program::Query { attribute, input } => Eval::Attr(objs[object(input)?].get(*attribute)),
            Program::Equal { attribute, left, right } => {
                let (a, b) = (object(left)?, object(right)?);
                Eval::Bool(objs[a].get(*attribute) == objs[b].get(*attribute))
            }
            Program::And(a, b) => {
                let rhs = set(b)?;
                Eval::Set(set(a)?.into_iter().filter(|i| rhs.contains(i)).collect())
            }
            Program::Or(a, b) => {
                let mut s = set(a)?;
                s.extend(set(b)?);
                s.sort_unstable();
                s.dedup();
                Eval::Set(s)
            }
            Program::Greater(a, b) => Eval::Bool(int(a)? > int(b)?),
            Program::Less(a, b) => Eval::Bool(int(a)? < int(b)?),
        })
    }

    /// Objects selected by a set-valued program, in scene order.
    pub fn select(&self, scene: &Scene) -> Result<Vec<usize>, ExecError> {
        match self.eval(scene)? {
            Eval::Set(s) => Ok(s),
            Eval::Object(o) => Ok(vec![o]),
            other => Err(ProgramError::Type {
                node: self.name(),
                want: ValueType::Set,
                got: other.kind(),
            }
            .into()),
        }
    }
}

/// Bottom-up evaluation of a question program over `scene`.
pub fn execute_program(program: &Program, scene: &Scene) -> Result<Answer, ExecError> {
    Ok(match program.eval(scene)? {
        Eval::Int(n) => Answer::Count(n),
        Eval::Bool(b) => Answer::from_bool(b),
        Eval::Attr(v) => Answer::Attr(v),
        other => {
            return Err(ProgramError::Malformed(format!(
                "{} produces {:?}, not an answer",
                program.name(),
                other.kind()
            ))
            .into())
        }
    })
}

impl Serialize for Program {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Program {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        Program::from_json(&v).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{Color, Material, Shape, Size};

    fn obj(row: usize, col: usize, shape: Shape, color: Color) -> Object {
        Object {
            row,
            col,
            shape,
            color,
            size: Size::Small,
            material: Material::Rubber,
        }
    }

    fn scene() -> Scene {
        Scene {
            grid_size: 5,
            objects: vec![
                obj(0, 0, Shape::Cube, Color::Red),
                obj(2, 3, Shape::Sphere, Color::Red),
                obj(1, 1, Shape::Cylinder, Color::Blue),
                obj(4, 4, Shape::Sphere, Color::Green),
            ],
        }
    }

    fn color(c: Color) -> AttrValue {
        AttrValue::Color(c)
    }

    #[test]
    fn query_on_single_cube() {
        let p = Program::Query {
            attribute: Attribute::Color,
            input: Box::new(Program::unique(Program::filter(AttrValue::Shape(Shape::Cube), Program::Scene))),
        };
        assert_eq!(execute_program(&p, &scene()), Ok(Answer::Attr(color(Color::Red))));
        assert_eq!(p.depth(), 2);
    }

    #[test]
    fn exist_without_match_is_no() {
        let mut s = scene();
        s.objects.retain(|o| o.shape != Shape::Cylinder);
        let p = Program::Exist(Box::new(Program::filter(AttrValue::Shape(Shape::Cylinder), Program::Scene)));
        assert_eq!(execute_program(&p, &s), Ok(Answer::No));
    }

    #[test]
    fn count_reds() {
        let p = Program::Count(Box::new(Program::filter(color(Color::Red), Program::Scene)));
        assert_eq!(execute_program(&p, &scene()), Ok(Answer::Count(2)));
    }

    #[test]
    fn or_counts_the_union_once() {
        // red OR sphere: {red cube, red sphere} ∪ {red sphere, green sphere} = 3
        let p = Program::Count(Box::new(Program::Or(
            Box::new(Program::filter(color(Color::Red), Program::Scene)),
            Box::new(Program::filter(AttrValue::Shape(Shape::Sphere), Program::Scene)),
        )));
        assert_eq!(execute_program(&p, &scene()), Ok(Answer::Count(3)));
    }

    #[test]
    fn relate_uses_grid_order() {
        let anchor = Program::unique(Program::filter(AttrValue::Shape(Shape::Cylinder), Program::Scene));
        let s = scene();
        let pick = |d| Program::relate(d, anchor.clone()).select(&s).unwrap();
        assert_eq!(pick(Direction::Left), vec![0]);
        assert_eq!(pick(Direction::Right), vec![1, 3]);
        assert_eq!(pick(Direction::Front), vec![1, 3]);
        assert_eq!(pick(Direction::Behind), vec![0]);
    }

    #[test]
    fn ambiguous_unique_is_rejected() {
        let p = Program::Query {
            attribute: Attribute::Shape,
            input: Box::new(Program::unique(Program::filter(color(Color::Red), Program::Scene))),
        };
        assert_eq!(execute_program(&p, &scene()), Err(ExecError::Ambiguous(2)));
    }

    #[test]
    fn type_errors_are_reported() {
        let p = Program::Count(Box::new(Program::unique(Program::Scene)));
        assert!(matches!(p.type_check(), Err(ProgramError::Type { node: "count", .. })));
        let p = Program::relate(Direction::Left, Program::Scene);
        assert!(p.type_check().is_err());
    }

    #[test]
    fn json_form_round_trips() {
        let p = Program::Greater(
            Box::new(Program::Count(Box::new(Program::filter(color(Color::Red), Program::Scene)))),
            Box::new(Program::Count(Box::new(Program::relate(
                Direction::Front,
                Program::unique(Program::filter(AttrValue::Material(Material::Metal), Program::Scene)),
            )))),
        );
        let v = p.to_json();
        assert_eq!(v[0], "greater");
        assert_eq!(Program::from_json(&v).unwrap(), p);
        assert!(Program::from_json(&json!(["filter", "shape", "red", ["scene"]])).is_err());
        assert!(Program::from_json(&json!(["frobnicate"])).is_err());
    }

    #[test]
    fn answers_round_trip_through_words() {
        for a in [Answer::Yes, Answer::No, Answer::Count(12), Answer::Attr(color(Color::Gray))] {
            assert_eq!(Answer::from_word(&a.word()), Some(a));
        }
    }
}
