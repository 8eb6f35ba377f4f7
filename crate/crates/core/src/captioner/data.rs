//! Procedural shape scenes with template captions.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::CaptionPair;
use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};

pub const BOS: usize = 0;
pub const EOS: usize = 1;

/// Word list; token id = 2 + position. Ids past the last word up to the
/// model vocabulary are never produced.
pub const WORDS: [&str; 16] = [
    "this", "is", "a", "photo", "of", "small", "large", "red", "green", "blue", "yellow", "square", "circle",
    "triangle", "left", "above",
];

pub const PROMPT: [&str; 6] = ["this", "is", "a", "photo", "of", "a"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the offset `(dx, dy)` from the center lies inside a shape of
    /// half-extent `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            // apex up, base at dy = r
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
        }
    }
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

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.1],
            Color::Blue => [0.15, 0.2, 0.9],
            Color::Yellow => [0.9, 0.85, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    LeftOf,
    Above,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub large: bool,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scene {
    Single { object: Object, prompted: bool },
    Pair { first: Object, second: Object, relation: Relation },
}

impl Scene {
    /// Shape-color class `color·3 + shape` of a single-object scene.
    pub fn class(&self) -> Option<usize> {
        match self {
            Scene::Single { object, .. } => Some(class_of(object.color, object.shape)),
            Scene::Pair { .. } => None,
        }
    }

    pub fn words(&self) -> Vec<&'static str> {
        let mut w = Vec::new();
        match self {
            Scene::Single { object, prompted } => {
                if *prompted {
                    w.extend_from_slice(&PROMPT);
                } else {
                    w.push("a");
                    w.push(if object.large { "large" } else { "small" });
                }
                w.push(object.color.word());
                w.push(object.shape.word());
            }
            Scene::Pair {
                first,
                second,
                relation,
            } => {
                w.extend_from_slice(&["a", first.color.word(), first.shape.word()]);
                match relation {
                    Relation::LeftOf => w.extend_from_slice(&["left", "of"]),
                    Relation::Above => w.push("above"),
                }
                w.extend_from_slice(&["a", second.color.word(), second.shape.word()]);
            }
        }
        w
    }
}

pub const NUM_CLASSES: usize = 12;

pub fn class_of(color: Color, shape: Shape) -> usize {
    color as usize * 3 + shape as usize
}

pub fn class_parts(class: usize) -> (Color, Shape) {
    (Color::ALL[class / 3], Shape::ALL[class % 3])
}

pub fn token_of(word: &str) -> Option<usize> {
    WORDS.iter().position(|w| *w == word).map(|i| i + 2)
}

pub fn word_of(id: usize) -> Option<&'static str> {
    match id {
        BOS => Some("<bos>"),
        EOS => Some("<eos>"),
        _ => WORDS.get(id - 2).copied(),
    }
}

/// `[BOS, words…, EOS]`.
pub fn encode_words(words: &[&str]) -> Result<Vec<usize>> {
    let mut out = vec![BOS];
    for w in words {
        out.push(token_of(w).ok_or_else(|| Error::InvalidArgument(format!("word {w:?} not in vocabulary")))?);
    }
    out.push(EOS);
    Ok(out)
}

pub fn decode_tokens(ids: &[usize]) -> String {
    ids.iter()
        .filter(|&&i| i != BOS && i != EOS)
        .map(|&i| word_of(i).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub image_size: usize,
    /// Probability that a scene holds two objects and a spatial relation.
    pub pair_frac: f64,
    /// Probability that a single-object caption uses the photo prompt.
    pub prompt_frac: f64,
    /// Std of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 16,
            pair_frac: 0.25,
            prompt_frac: 0.5,
            noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pair: CaptionPair,
    pub scene: Scene,
}

const CHANNELS: usize = 3;
const BACKGROUND: f64 = 0.15;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::InvalidArgument(format!("image size {} below 8", self.image_size)));
        }
        for (name, p) in [("pair_frac", self.pair_frac), ("prompt_frac", self.prompt_frac)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise = {}", self.noise)));
        }
        Ok(())
    }

    fn object(&self, rng: &mut Stream, region: (f64, f64, f64, f64), large: Option<bool>) -> Object {
        let shape = Shape::ALL[rng.below(3)];
        let color = Color::ALL[rng.below(4)];
        let s = self.image_size as f64;
        let large = large.unwrap_or_else(|| rng.bernoulli(0.5));
        let radius = if large { 0.3 * s } else { 0.17 * s };
        let (x0, x1, y0, y1) = region;
        let cx = x0 + radius + rng.uniform() * (x1 - x0 - 2.0 * radius).max(0.0);
        let cy = y0 + radius + rng.uniform() * (y1 - y0 - 2.0 * radius).max(0.0);
        Object {
            shape,
            color,
            large,
            cx,
            cy,
            radius,
        }
    }

    /// Scene `index`; a pure function of `(self, index)`.
    pub fn scene(&self, index: u64) -> Scene {
        let mut rng = Stream::new(self.seed, Purpose::Data, index);
        let s = self.image_size as f64;
        if rng.bernoulli(self.pair_frac) {
            let relation = if rng.bernoulli(0.5) { Relation::LeftOf } else { Relation::Above };
            let (r1, r2) = match relation {
                Relation::LeftOf => ((0.0, 0.5 * s, 0.0, s), (0.5 * s, s, 0.0, s)),
                Relation::Above => ((0.0, s, 0.0, 0.5 * s), (0.0, s, 0.5 * s, s)),
            };
            let first = self.object(&mut rng, r1, Some(false));
            let second = self.object(&mut rng, r2, Some(false));
            Scene::Pair {
                first,
                second,
                relation,
            }
        } else {
            let prompted = rng.bernoulli(self.prompt_frac);
            let object = self.object(&mut rng, (0.0, s, 0.0, s), None);
            Scene::Single { object, prompted }
        }
    }

    /// Renders a scene as an `H×W×3` row-major image in roughly `[0, 1]`.
    pub fn render(&self, scene: &Scene, index: u64) -> Vec<f64> {
        let n = self.image_size;
        let mut img = vec![BACKGROUND; n * n * CHANNELS];
        let objects: Vec<&Object> = match scene {
            Scene::Single { object, .. } => vec![object],
            Scene::Pair { first, second, .. } => vec![first, second],
        };
        for o in objects {
            let rgb = o.color.rgb();
            for y in 0..n {
                for x in 0..n {
                    // pixel centers
                    let dx = x as f64 + 0.5 - o.cx;
                    let dy = y as f64 + 0.5 - o.cy;
                    if o.shape.contains(dx, dy, o.radius) {
                        img[(y * n + x) * CHANNELS..][..CHANNELS].copy_from_slice(&rgb);
                    }
                }
            }
        }
        if self.noise > 0.0 {
            let mut rng = Stream::new(self.seed, Purpose::Other(1), index);
            for v in &mut img {
                *v += self.noise * rng.normal();
            }
        }
        img
    }

    pub fn sample(&self, index: u64) -> Sample {
        let scene = self.scene(index);
        let image = self.render(&scene, index);
        let tokens = encode_words(&scene.words()).expect("grammar words are in the vocabulary");
        Sample {
            pair: CaptionPair { image, tokens },
            scene,
        }
    }

    /// Samples `start..start + n`.
    pub fn generate_range(&self, start: u64, n: usize) -> Vec<Sample> {
        (start..start + n as u64).map(|i| self.sample(i)).collect()
    }

    pub fn generate(&self, n: usize) -> Vec<Sample> {
        self.generate_range(0, n)
    }
}

/// Writes one record per line: image values separated by spaces, a tab,
/// then the token ids separated by spaces.
pub fn export<W: Write>(out: &mut W, pairs: impl IntoIterator<Item = impl AsRef<CaptionPair>>) -> std::io::Result<()> {
    let mut line = String::new();
    for p in pairs {
        let p = p.as_ref();
        line.clear();
        for (i, v) in p.image.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            write!(line, "{v}").expect("write to string");
        }
        line.push('\t');
        for (i, t) in p.tokens.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            write!(line, "{t}").expect("write to string");
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Reads records written by [`export`].
pub fn import<R: BufRead>(input: R) -> Result<Vec<CaptionPair>> {
    let mut pairs = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let (img, toks) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("line {}: missing tab separator", n + 1)))?;
        let image = img
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        let tokens = toks
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        pairs.push(CaptionPair { image, tokens });
    }
    Ok(pairs)
}
