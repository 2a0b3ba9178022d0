//! Deterministic synthetic text-segmentation scenes.
//!
//! A [`SceneSpec`] fully determines the geometry; the two domains share the
//! same spec distribution and differ only in the renderer. Captions name a
//! present color+shape, a plural shape, or the background "stuff" region.

mod io;
mod render;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LdzError, Result};
use crate::rng;

pub use io::{
    build_split, generate_dataset, load_sample, load_split, read_index, sample_id, sample_seed, save_gray_png, save_rgb_png, write_split, DatasetConfig, IndexEntry,
    SplitIndex, SPLITS,
};
pub use render::{inside_fraction, owner_map, point_in_shape, render, shape_mask, Owner};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Star,
        ShapeKind::Cross,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circles",
            ShapeKind::Square => "squares",
            ShapeKind::Triangle => "triangles",
            ShapeKind::Star => "stars",
            ShapeKind::Cross => "crosses",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

impl ColorName {
    pub const ALL: [ColorName; 5] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
        ColorName::Purple,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Purple => "purple",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            ColorName::Red => [0.86, 0.14, 0.14],
            ColorName::Green => [0.18, 0.68, 0.24],
            ColorName::Blue => [0.14, 0.28, 0.86],
            ColorName::Yellow => [0.95, 0.84, 0.12],
            ColorName::Purple => [0.58, 0.22, 0.70],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    SkyGradient,
    StripedFloor,
    DottedWall,
}

impl Background {
    pub const ALL: [Background; 3] = [
        Background::SkyGradient,
        Background::StripedFloor,
        Background::DottedWall,
    ];

    /// The caption word naming this region.
    pub fn word(self) -> &'static str {
        match self {
            Background::SkyGradient => "sky",
            Background::StripedFloor => "floor",
            Background::DottedWall => "wall",
        }
    }
}

/// Rendering style. `A`: antialiased fills with texture noise; `B`: flat
/// fills with 2-px black outlines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = LdzError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            _ => Err(LdzError::Invalid(format!("unknown domain `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: ColorName,
    /// Pixel coordinates `(x, y)` of the centre.
    pub center: (f32, f32),
    pub radius: f32,
}

/// Everything needed to re-rasterize a scene. Objects are drawn in list
/// order, later ones on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SceneObject>,
    pub background: Background,
    pub domain: Domain,
}

/// What a caption refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Phrase {
    ColorShape { color: ColorName, shape: ShapeKind },
    Plural { shape: ShapeKind },
    Stuff { background: Background },
}

impl Phrase {
    pub fn text(&self) -> String {
        match *self {
            Phrase::ColorShape { color, shape } => format!("{} {}", color.word(), shape.word()),
            Phrase::Plural { shape } => shape.plural().to_string(),
            Phrase::Stuff { background } => background.word().to_string(),
        }
    }

    /// Parses the caption grammar, ignoring any known prefix.
    pub fn parse(caption: &str) -> Result<Phrase> {
        let mut rest = caption.trim();
        for p in PREFIXES.iter().filter(|p| !p.is_empty()) {
            if let Some(r) = rest.strip_prefix(p) {
                rest = r;
                break;
            }
        }
        let words: Vec<&str> = rest.split_whitespace().collect();
        let color = |w: &str| ColorName::ALL.into_iter().find(|c| c.word() == w);
        let shape = |w: &str| ShapeKind::ALL.into_iter().find(|s| s.word() == w);
        let plural = |w: &str| ShapeKind::ALL.into_iter().find(|s| s.plural() == w);
        let stuff = |w: &str| Background::ALL.into_iter().find(|b| b.word() == w);
        match words.as_slice() {
            [c, s] if color(c).is_some() && shape(s).is_some() => Ok(Phrase::ColorShape {
                color: color(c).unwrap(),
                shape: shape(s).unwrap(),
            }),
            [s] if plural(s).is_some() => Ok(Phrase::Plural { shape: plural(s).unwrap() }),
            [b] if stuff(b).is_some() => Ok(Phrase::Stuff { background: stuff(b).unwrap() }),
            _ => Err(LdzError::Dataset(format!("caption `{caption}` does not parse"))),
        }
    }
}

/// Caption prefixes, sampled uniformly.
pub const PREFIXES: [&str; 4] = ["", "a photo of ", "an image of ", "a picture of "];

/// Per-pixel binary mask, row-major `H x W`.
pub type Mask = Vec<bool>;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `H x W x 3`, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub caption: String,
    pub mask: Mask,
    pub domain: Domain,
    pub sample_id: String,
}

impl ImageSample {
    /// Channel-major copy `3 x H x W`.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.image[p * 3 + c];
            }
        }
        out
    }

    pub fn mask_f32(&self) -> Vec<f32> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

/// Minimum visible pixels per object after occlusion.
pub const MIN_VISIBLE_PIXELS: usize = 12;

/// Draws a scene whose objects are each at least half inside the canvas and
/// visible after occlusion. Invalid draws are redrawn from the same stream.
pub fn sample_scene<R: Rng>(rng: &mut R, seed: u64, height: usize, width: usize, max_objects: usize) -> SceneSpec {
    loop {
        let count = rng.random_range(1..=max_objects.max(1));
        let background = *Background::ALL.choose(rng).unwrap();
        let scale = height.min(width) as f32 / 64.0;
        let mut objects = Vec::with_capacity(count);
        while objects.len() < count {
            let radius = rng.random_range(6.0..14.0) * scale;
            let margin = radius * 0.3;
            let obj = SceneObject {
                shape: *ShapeKind::ALL.choose(rng).unwrap(),
                color: *ColorName::ALL.choose(rng).unwrap(),
                center: (
                    rng.random_range(margin..width as f32 - margin),
                    rng.random_range(margin..height as f32 - margin),
                ),
                radius,
            };
            if render::inside_fraction(&obj, height, width) >= 0.5 {
                objects.push(obj);
            }
        }
        let spec = SceneSpec {
            seed,
            height,
            width,
            objects,
            background,
            domain: Domain::A,
        };
        if scene_is_valid(&spec) {
            return spec;
        }
    }
}

/// Every object keeps at least [`MIN_VISIBLE_PIXELS`] after occlusion and
/// some background remains.
pub fn scene_is_valid(spec: &SceneSpec) -> bool {
    let owners = owner_map(spec);
    let mut counts = vec![0usize; spec.objects.len() + 1];
    for o in &owners {
        match o {
            Owner::Background => counts[0] += 1,
            Owner::Object(i) => counts[i + 1] += 1,
        }
    }
    counts[0] >= MIN_VISIBLE_PIXELS && counts[1..].iter().all(|&c| c >= MIN_VISIBLE_PIXELS)
}

/// Picks a caption naming something present in the scene.
pub fn sample_phrase<R: Rng>(rng: &mut R, spec: &SceneSpec) -> Phrase {
    let roll: f32 = rng.random();
    if roll < 0.6 {
        let o = spec.objects.choose(rng).unwrap();
        Phrase::ColorShape { color: o.color, shape: o.shape }
    } else if roll < 0.8 {
        let o = spec.objects.choose(rng).unwrap();
        Phrase::Plural { shape: o.shape }
    } else {
        Phrase::Stuff { background: spec.background }
    }
}

pub fn sample_prefix<R: Rng>(rng: &mut R) -> &'static str {
    PREFIXES[rng.random_range(0..PREFIXES.len())]
}

/// Ground truth for `phrase`: the union of all visible pixels it names.
pub fn phrase_mask(spec: &SceneSpec, phrase: &Phrase) -> Mask {
    let owners = owner_map(spec);
    owners
        .iter()
        .map(|o| match (o, phrase) {
            (Owner::Background, Phrase::Stuff { background }) => *background == spec.background,
            (Owner::Object(i), Phrase::ColorShape { color, shape }) => {
                let obj = &spec.objects[*i];
                obj.color == *color && obj.shape == *shape
            }
            (Owner::Object(i), Phrase::Plural { shape }) => spec.objects[*i].shape == *shape,
            _ => false,
        })
        .collect()
}

/// Builds one sample from its derived seed. The scene/caption streams are
/// independent of `domain`, so the same seed yields the same scene in both
/// domains.
pub fn make_sample(seed: u64, sample_id: String, height: usize, width: usize, domain: Domain) -> (SceneSpec, ImageSample) {
    let mut scene_rng = rng::stream(seed, "scene");
    let mut spec = sample_scene(&mut scene_rng, seed, height, width, 4);
    spec.domain = domain;
    let mut cap_rng = rng::stream(seed, "caption");
    let phrase = sample_phrase(&mut cap_rng, &spec);
    let prefix = sample_prefix(&mut cap_rng);
    let caption = format!("{prefix}{}", phrase.text());
    let mask = phrase_mask(&spec, &phrase);
    let image = render(&spec, &mut rng::stream(seed, "render"));
    let sample = ImageSample {
        image: quantize(&image),
        height,
        width,
        caption,
        mask,
        domain,
        sample_id,
    };
    (spec, sample)
}

/// Rounds to the 8-bit grid used on disk, so in-memory and loaded samples
/// are identical.
pub fn quantize(image: &[f32]) -> Vec<f32> {
    image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect()
}

/// Two-object scenes with distinct (shape, color) pairs, used by the
/// saliency probe. The sample's caption and mask name the first object.
pub fn two_object_scene(seed: u64, height: usize, width: usize, domain: Domain) -> (SceneSpec, ImageSample) {
    let mut r = rng::stream(seed, "two-object");
    loop {
        let mut spec = sample_scene(&mut r, seed, height, width, 2);
        if spec.objects.len() != 2 {
            continue;
        }
        let (a, b) = (spec.objects[0], spec.objects[1]);
        if a.color == b.color || a.shape == b.shape {
            continue;
        }
        spec.domain = domain;
        let phrase = Phrase::ColorShape { color: a.color, shape: a.shape };
        let mask = phrase_mask(&spec, &phrase);
        let image = render(&spec, &mut rng::stream(seed, "render"));
        let sample = ImageSample {
            image: quantize(&image),
            height,
            width,
            caption: format!("{}{}", sample_prefix(&mut r), phrase.text()),
            mask,
            domain,
            sample_id: format!("pair-{seed}"),
        };
        return (spec, sample);
    }
}
