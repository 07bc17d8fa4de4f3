use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::fmt;

use super::program::{execute_program, Answer, Direction, ExecError, Program};
use super::{generate_scene, AttrValue, Attribute, Scene, SceneError};

/// Question families, keyed to the answer type of the program root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Count,
    Exist,
    CompareNumbers,
    QueryAttribute,
    CompareAttribute,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Count,
        Category::Exist,
        Category::CompareNumbers,
        Category::QueryAttribute,
        Category::CompareAttribute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Count => "count",
            Category::Exist => "exist",
            Category::CompareNumbers => "compare_numbers",
            Category::QueryAttribute => "query_attribute",
            Category::CompareAttribute => "compare_attribute",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Category implied by a program's root node.
    pub fn of_program(p: &Program) -> Option<Self> {
        match p {
            Program::Count(_) => Some(Category::Count),
            Program::Exist(_) => Some(Category::Exist),
            Program::Greater(..) | Program::Less(..) => Some(Category::CompareNumbers),
            Program::Query { .. } => Some(Category::QueryAttribute),
            Program::Equal { .. } => Some(Category::CompareAttribute),
            _ => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Relative frequency of each category in a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMix {
    pub weights: [f64; 5],
}

impl Default for CategoryMix {
    fn default() -> Self {
        Self { weights: [1.0; 5] }
    }
}

impl CategoryMix {
    pub fn sample(&self, rng: &mut impl Rng) -> Category {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (c, w) in Category::ALL.iter().zip(self.weights) {
            if u < w {
                return *c;
            }
            u -= w;
        }
        Category::CompareAttribute
    }

    pub fn fraction(&self, c: Category) -> f64 {
        self.weights[c as usize] / self.weights.iter().sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionOptions {
    /// Upper bound on [`Program::depth`].
    pub max_depth: usize,
    /// Swap in synonyms for some words (block for cube, shiny for metal, ...).
    pub paraphrase: bool,
    /// Attempts per scene before giving up.
    pub max_retries: usize,
}

impl Default for QuestionOptions {
    fn default() -> Self {
        Self {
            max_depth: 5,
            paraphrase: false,
            max_retries: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum GenerationError {
    #[error("no valid {category} question after {attempts} attempts")]
    Exhausted { category: Category, attempts: usize },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// A question over a scene with its program and gold answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAInstance {
    pub tokens: Vec<String>,
    pub scene: Scene,
    pub program: Program,
    pub answer: Answer,
    pub category: Category,
}

impl QAInstance {
    /// Whether answering needs at least one spatial relation hop.
    pub fn is_relational(&self) -> bool {
        let mut found = false;
        self.program.walk(&mut |p| found |= matches!(p, Program::Relate { .. }));
        found
    }
}

/// Builds a type-correct program of the requested family, renders it to
/// words and attaches the executor's answer. Programs whose `unique` nodes
/// are ambiguous on `scene` are discarded and resampled.
pub fn generate_question(
    scene: &Scene,
    rng: &mut impl Rng,
    family: Category,
    opts: &QuestionOptions,
) -> Result<QAInstance, GenerationError> {
    scene.validate()?;
    for _ in 0..opts.max_retries {
        let Some(program) = sample_program(scene, rng, family) else {
            continue;
        };
        if program.depth() > opts.max_depth {
            continue;
        }
        let answer = match execute_program(&program, scene) {
            Ok(a) => a,
            Err(ExecError::Ambiguous(_)) => continue,
            Err(ExecError::Program(e)) => panic!("generator built an ill-typed program: {e}"),
        };
        let mut tokens = render(&program);
        if opts.paraphrase {
            paraphrase(&mut tokens, rng);
        }
        return Ok(QAInstance {
            tokens,
            scene: scene.clone(),
            program,
            answer,
            category: family,
        });
    }
    Err(GenerationError::Exhausted {
        category: family,
        attempts: opts.max_retries,
    })
}

fn sample_program(scene: &Scene, rng: &mut impl Rng, family: Category) -> Option<Program> {
    let n = scene.objects.len();
    Some(match family {
        Category::Count => Program::Count(Box::new(counted_set(scene, rng)?)),
        Category::Exist => Program::Exist(Box::new(counted_set(scene, rng)?)),
        Category::CompareNumbers => {
            let a = random_set(scene, rng, 0)?;
            let b = random_set(scene, rng, 0)?;
            if a == b {
                return None;
            }
            let (a, b) = (Box::new(Program::Count(Box::new(a))), Box::new(Program::Count(Box::new(b))));
            if rng.gen_bool(0.5) {
                Program::Greater(a, b)
            } else {
                Program::Less(a, b)
            }
        }
        Category::QueryAttribute => {
            let target = rng.gen_range(0..n);
            let hops = pick_weighted(rng, &[0.4, 0.35, 0.25]);
            let reference = unique_ref(scene, rng, target, hops)?;
            let used = final_filters(&reference);
            let free: Vec<Attribute> = Attribute::ALL.into_iter().filter(|a| !used.contains(a)).collect();
            let attribute = *free.choose(rng)?;
            Program::Query {
                attribute,
                input: Box::new(reference),
            }
        }
        Category::CompareAttribute => {
            let t1 = rng.gen_range(0..n);
            let t2 = rng.gen_range(0..n);
            if t1 == t2 {
                return None;
            }
            let h1 = usize::from(rng.gen_bool(0.3));
            let h2 = usize::from(rng.gen_bool(0.3));
            let left = unique_ref(scene, rng, t1, h1)?;
            let right = unique_ref(scene, rng, t2, h2)?;
            let mut used = final_filters(&left);
            used.extend(final_filters(&right));
            let free: Vec<Attribute> = Attribute::ALL.into_iter().filter(|a| !used.contains(a)).collect();
            let attribute = *free.choose(rng).or_else(|| Attribute::ALL.choose(rng))?;
            Program::Equal {
                attribute,
                left: Box::new(left),
                right: Box::new(right),
            }
        }
    })
}

fn pick_weighted(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let mut u = rng.gen::<f64>() * weights.iter().sum::<f64>();
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Set expression for count/exist: plain filters, a one-hop relation, or a
/// union/intersection of two sets.
fn counted_set(scene: &Scene, rng: &mut impl Rng) -> Option<Program> {
    match pick_weighted(rng, &[0.45, 0.25, 0.15, 0.15]) {
        0 => random_set(scene, rng, 0),
        1 => random_set(scene, rng, 1),
        2 => {
            let a = random_set(scene, rng, 0)?;
            let b = random_set(scene, rng, 0)?;
            (a != b).then(|| Program::Or(Box::new(a), Box::new(b)))
        }
        _ => {
            let a = random_set(scene, rng, 1)?;
            let b = random_set(scene, rng, 1)?;
            (a != b).then(|| Program::And(Box::new(a), Box::new(b)))
        }
    }
}

/// Filter chain over the whole scene (`hops == 0`) or over the objects in
/// one direction of a uniquely described anchor.
fn random_set(scene: &Scene, rng: &mut impl Rng, hops: usize) -> Option<Program> {
    let base = if hops == 0 {
        Program::Scene
    } else {
        let anchor = rng.gen_range(0..scene.objects.len());
        let direction = *Direction::ALL.choose(rng)?;
        Program::relate(direction, unique_ref(scene, rng, anchor, hops - 1)?)
    };
    let pool = base.select(scene).ok()?;
    let n_filters = if hops == 0 { rng.gen_range(1..=2) } else { rng.gen_range(0..=1) };
    let mut attrs = Attribute::ALL.to_vec();
    attrs.shuffle(rng);
    let mut p = base;
    for attr in attrs.into_iter().take(n_filters) {
        let value = match pool.choose(rng) {
            Some(&i) if rng.gen_bool(0.6) => scene.objects[i].get(attr),
            _ => *attr.values().choose(rng)?,
        };
        p = Program::filter(value, p);
    }
    Some(p)
}

/// `unique(...)` expression that resolves to `target`, reached through
/// `hops` relation steps from other uniquely described objects.
fn unique_ref(scene: &Scene, rng: &mut impl Rng, target: usize, hops: usize) -> Option<Program> {
    let objs = &scene.objects;
    if hops == 0 {
        let all: Vec<usize> = (0..objs.len()).collect();
        return identify(scene, rng, target, &all, Program::Scene).map(Program::unique);
    }
    let mut options: Vec<(usize, Direction)> = (0..objs.len())
        .filter(|&a| a != target)
        .flat_map(|a| Direction::ALL.into_iter().map(move |d| (a, d)))
        .filter(|&(a, d)| d.holds(&objs[target], &objs[a]))
        .collect();
    options.shuffle(rng);
    for (anchor, direction) in options.into_iter().take(6) {
        let Some(anchor_ref) = unique_ref(scene, rng, anchor, hops - 1) else {
            continue;
        };
        let related = Program::relate(direction, anchor_ref);
        let pool = related.select(scene).ok()?;
        if let Some(p) = identify(scene, rng, target, &pool, related) {
            return Some(Program::unique(p));
        }
    }
    None
}

/// Wraps `base` in filters on `target`'s own attributes so that `target` is
/// the only member of `pool` left. Usually the smallest such filter set.
fn identify(scene: &Scene, rng: &mut impl Rng, target: usize, pool: &[usize], base: Program) -> Option<Program> {
    let t = &scene.objects[target];
    let mut valid: Vec<Vec<Attribute>> = Vec::new();
    for mask in 0u8..16 {
        let attrs: Vec<Attribute> = Attribute::ALL
            .into_iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, a)| a)
            .collect();
        let matches = pool
            .iter()
            .filter(|&&i| attrs.iter().all(|&a| scene.objects[i].get(a) == t.get(a)))
            .count();
        if matches == 1 && pool.contains(&target) {
            valid.push(attrs);
        }
    }
    let min = valid.iter().map(Vec::len).min()?;
    let chosen = if rng.gen_bool(0.7) {
        let smallest: Vec<&Vec<Attribute>> = valid.iter().filter(|v| v.len() == min).collect();
        (*smallest.choose(rng)?).clone()
    } else {
        valid.choose(rng)?.clone()
    };
    let mut p = base;
    for a in chosen {
        p = Program::filter(t.get(a), p);
    }
    Some(p)
}

/// Attributes filtered directly on top of an object reference's base set.
fn final_filters(reference: &Program) -> Vec<Attribute> {
    let mut p = match reference {
        Program::Unique(inner) => inner.as_ref(),
        other => other,
    };
    let mut out = Vec::new();
    while let Program::Filter { value, input } = p {
        out.push(value.attribute());
        p = input;
    }
    out
}

fn push_words(out: &mut Vec<String>, words: &[&str]) {
    out.extend(words.iter().map(|w| w.to_string()));
}

fn plural(noun: &str) -> String {
    format!("{noun}s")
}

fn relation_words(d: Direction) -> &'static [&'static str] {
    match d {
        Direction::Left => &["left", "of"],
        Direction::Right => &["right", "of"],
        Direction::Front => &["in", "front", "of"],
        Direction::Behind => &["behind"],
    }
}

fn noun_phrase(p: &Program, plural_form: bool, out: &mut Vec<String>) {
    let mut filters = Vec::new();
    let mut base = p;
    loop {
        match base {
            Program::Filter { value, input } => {
                filters.push(*value);
                base = input;
            }
            Program::Unique(inner) => base = inner,
            _ => break,
        }
    }
    match base {
        Program::And(a, b) => {
            out.push("both".into());
            noun_phrase(a, plural_form, out);
            out.push("and".into());
            noun_phrase(b, plural_form, out);
            return;
        }
        Program::Or(a, b) => {
            out.push("either".into());
            noun_phrase(a, plural_form, out);
            out.push("or".into());
            noun_phrase(b, plural_form, out);
            return;
        }
        _ => {}
    }
    for attr in [Attribute::Size, Attribute::Color, Attribute::Material] {
        if let Some(v) = filters.iter().find(|v| v.attribute() == attr) {
            out.push(v.word().into());
        }
    }
    let noun = filters
        .iter()
        .find(|v| v.attribute() == Attribute::Shape)
        .map_or("object", |v| v.word());
    out.push(if plural_form { plural(noun) } else { noun.into() });
    if let Program::Relate { direction, input } = base {
        push_words(out, relation_words(*direction));
        out.push("the".into());
        noun_phrase(input, false, out);
    }
}

/// Deterministic template rendering of a question program.
pub(crate) fn render(p: &Program) -> Vec<String> {
    let mut out = Vec::new();
    match p {
        Program::Count(s) => {
            push_words(&mut out, &["how", "many"]);
            noun_phrase(s, true, &mut out);
            push_words(&mut out, &["are", "there"]);
        }
        Program::Exist(s) => {
            push_words(&mut out, &["are", "there", "any"]);
            noun_phrase(s, true, &mut out);
        }
        Program::Greater(a, b) | Program::Less(a, b) => {
            let cmp = if matches!(p, Program::Greater(..)) { "more" } else { "fewer" };
            push_words(&mut out, &["are", "there", cmp]);
            for (i, side) in [a, b].into_iter().enumerate() {
                if i == 1 {
                    out.push("than".into());
                }
                if let Program::Count(s) = side.as_ref() {
                    noun_phrase(s, true, &mut out);
                }
            }
        }
        Program::Query { attribute, input } => {
            push_words(&mut out, &["what", attribute.word(), "is", "the"]);
            noun_phrase(input, false, &mut out);
        }
        Program::Equal { attribute, left, right } => {
            push_words(&mut out, &["does", "the"]);
            noun_phrase(left, false, &mut out);
            push_words(&mut out, &["have", "the", "same", attribute.word(), "as", "the"]);
            noun_phrase(right, false, &mut out);
        }
        other => noun_phrase(other, false, &mut out),
    }
    out
}

const SYNONYMS: [(&str, &str); 11] = [
    ("cube", "block"),
    ("cubes", "blocks"),
    ("sphere", "ball"),
    ("spheres", "balls"),
    ("object", "thing"),
    ("objects", "things"),
    ("large", "big"),
    ("small", "tiny"),
    ("metal", "shiny"),
    ("rubber", "matte"),
    ("cylinders", "cylinders"),
];

fn paraphrase(tokens: &mut [String], rng: &mut impl Rng) {
    for t in tokens.iter_mut() {
        if let Some((_, syn)) = SYNONYMS.iter().find(|(w, _)| w == t) {
            if rng.gen_bool(0.5) {
                *t = syn.to_string();
            }
        }
    }
}

/// Every word the templates (with or without paraphrasing) can produce, sorted.
pub fn vocabulary_words() -> Vec<String> {
    let mut words: Vec<String> = [
        "how", "many", "are", "there", "any", "more", "fewer", "than", "what", "is", "the", "does", "have",
        "same", "as", "both", "and", "either", "or", "left", "right", "of", "in", "front", "behind", "object",
        "objects",
    ]
    .iter()
    .map(|w| w.to_string())
    .collect();
    for a in Attribute::ALL {
        words.push(a.word().into());
    }
    for v in AttrValue::all() {
        words.push(v.word().into());
        if v.attribute() == Attribute::Shape {
            words.push(plural(v.word()));
        }
    }
    for (_, syn) in SYNONYMS {
        words.push(syn.into());
    }
    words.sort();
    words.dedup();
    words
}

/// Closed answer set: yes/no, every attribute value and the counts
/// `0..=grid_size^2`.
pub fn answer_vocabulary(grid_size: usize) -> Vec<String> {
    let mut out = vec!["yes".to_string(), "no".to_string()];
    out.extend(AttrValue::all().into_iter().map(|v| v.word().to_string()));
    out.extend((0..=grid_size * grid_size).map(|n| n.to_string()));
    out
}

/// Parameters of a generated dataset. Instance `i` depends only on
/// `(seed, i)`, so shards can be produced independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub grid_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub mix: CategoryMix,
    pub options: QuestionOptions,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 1000,
            grid_size: 5,
            min_objects: 3,
            max_objects: 7,
            mix: CategoryMix::default(),
            options: QuestionOptions::default(),
        }
    }
}

impl DatasetSpec {
    pub fn instance(&self, index: usize) -> Result<QAInstance, GenerationError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let category = self.mix.sample(&mut rng);
        let mut last = None;
        for _ in 0..100 {
            let n = rng.gen_range(self.min_objects..=self.max_objects);
            let scene = generate_scene(&mut rng, self.grid_size, n)?;
            match generate_question(&scene, &mut rng, category, &self.options) {
                Ok(q) => return Ok(q),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<QAInstance>, GenerationError> {
    (0..spec.count).map(|i| spec.instance(i)).collect()
}
